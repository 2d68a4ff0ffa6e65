//! Lateral/top-down decoder turning the fused pyramid into per-pixel embeddings of one width.

use crate::encoder::Pyramid;
use crate::error::{Error, Result};
use crate::params::{Bound, Conv, ParamStore};
use crate::tensor::Var;

/// `P_1..P_4`, each `[T, C, H_i, W_i]`; `P_1` is the finest.
pub type PixelEmbeddings<'t> = [Var<'t>; 4];

#[derive(Clone, Debug)]
pub struct PixelDecoder {
    laterals: [Conv; 4],
    in_channels: [usize; 4],
    width: usize,
}

impl PixelDecoder {
    pub fn new(store: &mut ParamStore, in_channels: [usize; 4], width: usize) -> Result<Self> {
        let mut laterals = Vec::with_capacity(4);
        for (i, &c) in in_channels.iter().enumerate() {
            laterals.push(Conv::new(store, &format!("pix.lateral{}", i + 1), c, width, 1, 1)?);
        }
        Ok(PixelDecoder {
            laterals: laterals.try_into().expect("four laterals"),
            in_channels,
            width,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `P_4 = lat(F_4)`, `P_i = lat(F_i) + up2(P_{i+1})`, `lat = ReLU(1×1 conv)`.
    pub fn forward<'t>(&self, p: &Bound<'t>, pyramid: &Pyramid<'t>) -> Result<PixelEmbeddings<'t>> {
        let mut levels: Vec<Option<Var<'t>>> = vec![None; 4];
        let mut above: Option<Var<'t>> = None;
        for i in (0..4).rev() {
            let s = pyramid[i].shape();
            if s.len() != 4 || s[1] != self.in_channels[i] {
                return Err(Error::dim(
                    "pixel_decoder.lateral",
                    &s,
                    &[self.in_channels[i]],
                ));
            }
            let lat = self.laterals[i].forward(p, pyramid[i])?.relu()?;
            let level = match above {
                Some(a) => lat.add(a.upsample_nearest2x()?)?,
                None => lat,
            };
            levels[i] = Some(level);
            above = Some(level);
        }
        Ok(levels
            .into_iter()
            .map(|l| l.expect("every level set"))
            .collect::<Vec<_>>()
            .try_into()
            .expect("four levels"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};

    #[test]
    fn zero_pyramid_with_zero_bias_gives_zero_levels() {
        let mut store = ParamStore::new(1);
        let dec = PixelDecoder::new(&mut store, [2, 3, 4, 5], 6).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let pyr = [
            tape.constant(Tensor::zeros([1, 2, 8, 8])),
            tape.constant(Tensor::zeros([1, 3, 4, 4])),
            tape.constant(Tensor::zeros([1, 4, 2, 2])),
            tape.constant(Tensor::zeros([1, 5, 1, 1])),
        ];
        let out = dec.forward(&p, &pyr).unwrap();
        for (i, l) in out.iter().enumerate() {
            assert_eq!(l.shape(), vec![1, 6, 8 >> i, 8 >> i]);
            assert_eq!(l.to_tensor().max_abs(), 0.0);
        }
        let wrong = [pyr[1], pyr[1], pyr[2], pyr[3]];
        assert!(matches!(dec.forward(&p, &wrong), Err(Error::Dimension { .. })));
    }
}
