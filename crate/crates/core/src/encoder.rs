//! Twin convolutional encoders over frames and maskiges, merged per stage by channel gating.

use crate::error::{Error, Result};
use crate::params::{Bound, Conv, Linear, ParamStore};
use crate::tensor::Var;

/// Four stage outputs, `[T, C_i, H/2^(i+1), W/2^(i+1)]` for `i = 1..=4`.
pub type Pyramid<'t> = [Var<'t>; 4];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Which {
    Image,
    Maskige,
}

#[derive(Clone, Copy, Debug)]
struct Stage {
    down: Conv,
    refine: Conv,
}

/// Stem conv (k=5, stride 4) then three stride-2 stages, each `conv→ReLU→conv→ReLU`.
#[derive(Clone, Debug)]
pub struct Backbone {
    stages: [Stage; 4],
    channels: [usize; 4],
}

impl Backbone {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: [usize; 4]) -> Result<Self> {
        let mut stages = Vec::with_capacity(4);
        let mut cin = 3;
        for (i, &c) in channels.iter().enumerate() {
            let (k, stride) = if i == 0 { (5, 4) } else { (3, 2) };
            stages.push(Stage {
                down: Conv::new(store, &format!("{prefix}.s{}.down", i + 1), cin, c, k, stride)?,
                refine: Conv::new(store, &format!("{prefix}.s{}.refine", i + 1), c, c, 3, 1)?,
            });
            cin = c;
        }
        Ok(Backbone {
            stages: stages.try_into().expect("four stages"),
            channels,
        })
    }

    pub fn channels(&self) -> [usize; 4] {
        self.channels
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Pyramid<'t>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::Shape(format!("encoder expects [T, 3, H, W], got {s:?}")));
        }
        if s[2] == 0 || s[3] == 0 || !s[2].is_multiple_of(32) || !s[3].is_multiple_of(32) {
            return Err(Error::Shape(format!(
                "encoder input {}x{} is not divisible by 32",
                s[2], s[3]
            )));
        }
        let mut h = x;
        let mut out = Vec::with_capacity(4);
        for st in &self.stages {
            h = st.down.forward(p, h)?.relu()?;
            h = st.refine.forward(p, h)?.relu()?;
            out.push(h);
        }
        Ok(out.try_into().expect("four stages"))
    }
}

/// `F_m ⊙ expand(GAP(F_m)·W) + F_v`: each frame's maskige channels are scaled by a gate
/// computed from their own spatial means, then added to the visual features.
pub fn channel_weighted_fuse<'t>(fv: Var<'t>, fm: Var<'t>, w: Var<'t>) -> Result<Var<'t>> {
    let (vs, ms, ws) = (fv.shape(), fm.shape(), w.shape());
    if vs != ms || vs.len() != 4 {
        return Err(Error::dim("channel_weighted_fuse", &vs, &ms));
    }
    let (t, c, h, wd) = (vs[0], vs[1], vs[2], vs[3]);
    if ws != [c, c] {
        return Err(Error::dim("channel_weighted_fuse", &vs, &ws));
    }
    let gate = fm
        .global_avg_pool()?
        .matmul(w)?
        .reshape(&[t, c, 1])?
        .expand(2, h * wd)?
        .reshape(&[t, c, h, wd])?;
    fm.mul(gate)?.add(fv)
}

/// Image encoder, optional maskige encoder and the per-stage gate matrices.
#[derive(Clone, Debug)]
pub struct SiamEncoder {
    image: Backbone,
    maskige: Option<Backbone>,
    gates: Option<[Linear; 4]>,
}

impl SiamEncoder {
    /// `siam = false` builds the image branch alone; `shared` reuses its parameters for maskiges.
    pub fn new(store: &mut ParamStore, channels: [usize; 4], siam: bool, shared: bool) -> Result<Self> {
        let image = Backbone::new(store, "enc.image", channels)?;
        if !siam {
            return Ok(SiamEncoder {
                image,
                maskige: None,
                gates: None,
            });
        }
        let maskige = if shared {
            image.clone()
        } else {
            Backbone::new(store, "enc.maskige", channels)?
        };
        let mut gates = Vec::with_capacity(4);
        for (i, &c) in channels.iter().enumerate() {
            gates.push(Linear::new(store, &format!("enc.gate{}", i + 1), c, c, false)?);
        }
        Ok(SiamEncoder {
            image,
            maskige: Some(maskige),
            gates: Some(gates.try_into().expect("four gates")),
        })
    }

    pub fn has_siam(&self) -> bool {
        self.maskige.is_some()
    }

    pub fn channels(&self) -> [usize; 4] {
        self.image.channels()
    }

    pub fn encode<'t>(&self, p: &Bound<'t>, x: Var<'t>, which: Which) -> Result<Pyramid<'t>> {
        match which {
            Which::Image => self.image.forward(p, x),
            Which::Maskige => self
                .maskige
                .as_ref()
                .ok_or_else(|| Error::Config("maskige branch is disabled".into()))?
                .forward(p, x),
        }
    }

    /// Fused pyramid; without the siam branch this is the image pyramid and `maskiges` is unused.
    pub fn forward<'t>(&self, p: &Bound<'t>, frames: Var<'t>, maskiges: Option<Var<'t>>) -> Result<Pyramid<'t>> {
        let fv = self.encode(p, frames, Which::Image)?;
        let (Some(gates), Some(m)) = (&self.gates, maskiges) else {
            if self.has_siam() {
                return Err(Error::Contract("siam encoder needs maskige input".into()));
            }
            return Ok(fv);
        };
        let fm = self.encode(p, m, Which::Maskige)?;
        let mut out = Vec::with_capacity(4);
        for i in 0..4 {
            out.push(channel_weighted_fuse(fv[i], fm[i], p.p(gates[i].weight))?);
        }
        Ok(out.try_into().expect("four stages"))
    }
}
