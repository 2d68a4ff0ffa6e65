//! Query-based mask decoder: audio-conditioned object queries refined by masked
//! cross-attention over the coarse pixel levels, with shared class and mask heads.

use crate::bfm::sine_tokens;
use crate::config::QueryMode;
use crate::error::{Error, Result};
use crate::params::{Bound, LayerNorm, Linear, ParamId, ParamStore};
use crate::pixel_decoder::PixelEmbeddings;
use crate::tensor::{Tensor, Var};

/// Class logits `[T, N_q, K_c+1]` (last = no-object) and mask logits `[T, N_q, H_1, W_1]`.
#[derive(Clone, Copy, Debug)]
pub struct PredictionSet<'t> {
    pub class_logits: Var<'t>,
    pub mask_logits: Var<'t>,
}

/// Single-head scaled dot-product attention with input and output projections.
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
}

impl Attention {
    fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(Attention {
            query: Linear::new(store, &format!("{name}.query"), d, d, true)?,
            key: Linear::new(store, &format!("{name}.key"), d, d, true)?,
            value: Linear::new(store, &format!("{name}.value"), d, d, true)?,
            out: Linear::new(store, &format!("{name}.out"), d, d, true)?,
        })
    }

    /// `q: [T, N, d]`, `k, v: [T, M, d]`, `keep: [T, N, M]` or unmasked.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        q: Var<'t>,
        k: Var<'t>,
        v: Var<'t>,
        keep: Option<&[bool]>,
    ) -> Result<Var<'t>> {
        let d = *q.shape().last().unwrap_or(&1);
        let scores = self
            .query
            .forward(p, q)?
            .matmul_nt(self.key.forward(p, k)?)?
            .scale(1.0 / (d as f64).sqrt())?;
        let weights = match keep {
            Some(keep) => scores.masked_softmax(keep)?,
            None => scores.softmax(2)?,
        };
        self.out.forward(p, weights.matmul(self.value.forward(p, v)?)?)
    }
}

/// Pre-norm masked cross-attention, self-attention and feed-forward, each residual.
#[derive(Clone, Copy, Debug)]
pub struct DecoderLayer {
    pub cross_norm: LayerNorm,
    pub cross: Attention,
    pub self_norm: LayerNorm,
    pub self_attention: Attention,
    pub ffn_norm: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

impl DecoderLayer {
    fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(DecoderLayer {
            cross_norm: LayerNorm::new(store, &format!("{name}.cross_norm"), d)?,
            cross: Attention::new(store, &format!("{name}.cross"), d)?,
            self_norm: LayerNorm::new(store, &format!("{name}.self_norm"), d)?,
            self_attention: Attention::new(store, &format!("{name}.self"), d)?,
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), d)?,
            ffn_in: Linear::new(store, &format!("{name}.ffn_in"), d, 2 * d, true)?,
            ffn_out: Linear::new(store, &format!("{name}.ffn_out"), 2 * d, d, true)?,
        })
    }

    /// `q: [T, N_q, d]`; `keys` carry positions, `values` do not; both `[T, M, d]`.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        q: Var<'t>,
        keys: Var<'t>,
        values: Var<'t>,
        keep: Option<&[bool]>,
    ) -> Result<Var<'t>> {
        let n = self.cross_norm.forward(p, q)?;
        let q = q.add(self.cross.forward(p, n, keys, values, keep)?)?;
        let n = self.self_norm.forward(p, q)?;
        let q = q.add(self.self_attention.forward(p, n, n, n, None)?)?;
        let n = self.ffn_norm.forward(p, q)?;
        let h = self.ffn_in.forward(p, n)?.relu()?;
        q.add(self.ffn_out.forward(p, h)?)
    }
}

/// Per-layer predictions plus the attention masks actually applied.
#[derive(Clone, Debug)]
pub struct DecoderOutput<'t> {
    pub predictions: Vec<PredictionSet<'t>>,
    /// Keep-masks `[T, N_q, H_l·W_l]`, one per layer.
    pub attention_masks: Vec<Vec<bool>>,
    /// Query rows whose mask was entirely empty and fell back to full attention.
    pub fallbacks: usize,
}

#[derive(Clone, Debug)]
pub struct QueryDecoder {
    pub queries: ParamId,
    pub expand: Linear,
    level_proj: [Option<Linear>; 3],
    layers: Vec<DecoderLayer>,
    pub norm: LayerNorm,
    pub class_head: Linear,
    pub mask_mlp: [Linear; 3],
    mode: QueryMode,
    num_queries: usize,
    width: usize,
    classes: usize,
}

/// Index into `P_1..P_4` of the level read by layer `j`: P_4, P_3, P_2, P_4, ...
pub fn level_of_layer(j: usize) -> usize {
    3 - j % 3
}

impl QueryDecoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        pixel_dim: usize,
        width: usize,
        num_queries: usize,
        rounds: usize,
        classes: usize,
        mode: QueryMode,
    ) -> Result<Self> {
        let queries = store.uniform("qdec.queries", &[num_queries, width], 1.0)?;
        let expand = Linear::new(store, "qdec.expand", width, width, true)?;
        let mut level_proj = [None; 3];
        if pixel_dim != width {
            for (i, slot) in level_proj.iter_mut().enumerate() {
                *slot = Some(Linear::new(store, &format!("qdec.level{}", i + 2), pixel_dim, width, true)?);
            }
        }
        let layers = (0..3 * rounds)
            .map(|j| DecoderLayer::new(store, &format!("qdec.layer{j}"), width))
            .collect::<Result<Vec<_>>>()?;
        Ok(QueryDecoder {
            queries,
            expand,
            level_proj,
            layers,
            norm: LayerNorm::new(store, "qdec.norm", width)?,
            class_head: Linear::new(store, "qdec.class", width, classes + 1, true)?,
            mask_mlp: [
                Linear::new(store, "qdec.mask0", width, width, true)?,
                Linear::new(store, "qdec.mask1", width, width, true)?,
                Linear::new(store, "qdec.mask2", width, width, true)?,
            ],
            mode,
            num_queries,
            width,
            classes,
        })
    }

    pub fn layers(&self) -> &[DecoderLayer] {
        &self.layers
    }

    pub fn num_queries(&self) -> usize {
        self.num_queries
    }

    /// Effective per-frame queries `[T, N_q, d]` from fused audio `[T, d]`.
    pub fn build_queries<'t>(&self, p: &Bound<'t>, audio: Var<'t>, learnable: Var<'t>) -> Result<Var<'t>> {
        let (a, l) = (audio.shape(), learnable.shape());
        if a.len() != 2 || a[1] != self.width || l != [self.num_queries, self.width] {
            return Err(Error::dim("build_queries", &a, &l));
        }
        if self.num_queries == 0 {
            return Err(Error::Config("query replication needs N_q >= 1".into()));
        }
        let replicated = self
            .expand
            .forward(p, audio)?
            .reshape(&[a[0], 1, self.width])?
            .expand(1, self.num_queries)?;
        match self.mode {
            QueryMode::All => Ok(replicated),
            QueryMode::Add => replicated.add(learnable),
        }
    }

    /// Shared heads on queries `[T, N_q, d]` against fused pixels `[T, d, H_1, W_1]`.
    pub fn predict<'t>(&self, p: &Bound<'t>, q: Var<'t>, pixels: Var<'t>) -> Result<PredictionSet<'t>> {
        let ps = pixels.shape();
        if ps.len() != 4 || ps[1] != self.width {
            return Err(Error::dim("mask_head", &q.shape(), &ps));
        }
        let n = self.norm.forward(p, q)?;
        let class_logits = self.class_head.forward(p, n)?;
        let mut e = n;
        for (i, lin) in self.mask_mlp.iter().enumerate() {
            e = lin.forward(p, e)?;
            if i + 1 < self.mask_mlp.len() {
                e = e.relu()?;
            }
        }
        let (t, h, w) = (ps[0], ps[2], ps[3]);
        let mask_logits = e
            .matmul(pixels.reshape(&[t, self.width, h * w])?)?
            .reshape(&[t, self.num_queries, h, w])?;
        Ok(PredictionSet {
            class_logits,
            mask_logits,
        })
    }

    fn level_memory<'t>(&self, p: &Bound<'t>, level: Var<'t>, slot: usize) -> Result<(Var<'t>, Var<'t>)> {
        let s = level.shape();
        let (t, c, h, w) = (s[0], s[1], s[2], s[3]);
        let mut mem = level.permute(&[0, 2, 3, 1])?.reshape(&[t, h * w, c])?;
        if let Some(proj) = &self.level_proj[slot] {
            mem = proj.forward(p, mem)?;
        } else if c != self.width {
            return Err(Error::dim("decoder_level", &s, &[self.width]));
        }
        let keys = mem.add(p.constant(sine_tokens(h, w, self.width)?))?;
        Ok((keys, mem))
    }

    /// Runs all `3L` layers. `frozen` replaces the mask-derived attention masks, layer by layer.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        audio: Var<'t>,
        levels: &PixelEmbeddings<'t>,
        pixels: Var<'t>,
        frozen: Option<&[Vec<bool>]>,
    ) -> Result<DecoderOutput<'t>> {
        let mut memory: [Option<(Var<'t>, Var<'t>)>; 4] = [None; 4];
        for li in 1..4 {
            memory[li] = Some(self.level_memory(p, levels[li], li - 1)?);
        }
        let mut q = self.build_queries(p, audio, p.p(self.queries))?;
        let mut previous = self.predict(p, q, pixels)?.mask_logits;
        let mut out = DecoderOutput {
            predictions: Vec::with_capacity(self.layers.len()),
            attention_masks: Vec::with_capacity(self.layers.len()),
            fallbacks: 0,
        };
        for (j, layer) in self.layers.iter().enumerate() {
            let li = level_of_layer(j);
            let (keys, values) = memory[li].expect("levels 2..4 prepared");
            let keep = match frozen {
                Some(f) => f
                    .get(j)
                    .cloned()
                    .ok_or_else(|| Error::Contract(format!("no frozen mask for layer {j}")))?,
                None => {
                    let ls = levels[li].shape();
                    let (keep, fb) = attention_keep(&previous.to_tensor(), ls[2], ls[3])?;
                    out.fallbacks += fb;
                    keep
                }
            };
            q = layer.forward(p, q, keys, values, Some(&keep))?;
            let pred = self.predict(p, q, pixels)?;
            previous = pred.mask_logits;
            out.predictions.push(pred);
            out.attention_masks.push(keep);
        }
        Ok(out)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }
}

/// Keep-mask `[T, N_q, h·w]` from mask logits `[T, N_q, H, W]`: logits average-pooled to
/// `h×w`, kept where the sigmoid is at least 0.5. Rows with nothing kept keep everything;
/// the number of such rows is returned alongside.
pub fn attention_keep(mask_logits: &Tensor, h: usize, w: usize) -> Result<(Vec<bool>, usize)> {
    let s = mask_logits.shape();
    if s.len() != 4 || h == 0 || w == 0 || !s[2].is_multiple_of(h) || !s[3].is_multiple_of(w) {
        return Err(Error::dim("attention_keep", s, &[h, w]));
    }
    let (fy, fx) = (s[2] / h, s[3] / w);
    let rows = s[0] * s[1];
    let plane = s[2] * s[3];
    let d = mask_logits.data();
    let mut keep = vec![false; rows * h * w];
    let mut fallbacks = 0;
    for r in 0..rows {
        let src = &d[r * plane..(r + 1) * plane];
        let dst = &mut keep[r * h * w..(r + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dy in 0..fy {
                    for dx in 0..fx {
                        acc += src[(y * fy + dy) * s[3] + x * fx + dx];
                    }
                }
                dst[y * w + x] = acc >= 0.0;
            }
        }
        if !dst.iter().any(|&k| k) {
            dst.fill(true);
            fallbacks += 1;
        }
    }
    Ok((keep, fallbacks))
}

/// Bilinear resize of mask logits `[.., H_1, W_1]` to `[.., oh, ow]`, half-pixel centres.
pub fn upsample_masks<'t>(mask_logits: Var<'t>, oh: usize, ow: usize) -> Result<Var<'t>> {
    mask_logits.upsample_bilinear(oh, ow)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keep_mask_pools_and_falls_back() {
        let logits = Tensor::new(
            [1, 2, 2, 2],
            vec![1.0, -3.0, 1.0, -3.0, -1.0, -1.0, -1.0, -1.0],
        )
        .unwrap();
        let (keep, fb) = attention_keep(&logits, 1, 2).unwrap();
        assert_eq!(keep, vec![true, false, true, true]);
        assert_eq!(fb, 1);
        let (keep, fb) = attention_keep(&logits, 1, 1).unwrap();
        assert_eq!((keep, fb), (vec![true, true], 2));
    }

    #[test]
    fn level_cycle() {
        let order: Vec<_> = (0..6).map(level_of_layer).collect();
        assert_eq!(order, vec![3, 2, 1, 3, 2, 1]);
    }
}
