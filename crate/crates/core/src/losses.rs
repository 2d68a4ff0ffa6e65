//! Matched set-prediction losses with deep supervision and the adaptive inter-frame
//! consistency penalty.

use crate::config::{AdaGranularity, AdaSource, RunConfig, Supervision};
use crate::error::{Error, Result};
use crate::matching::{hungarian, Assignment};
use crate::query_decoder::PredictionSet;
use crate::tensor::{bilinear_resize, sigmoid, softmax_slice, softplus, Tape, Tensor, Var};

/// Dice smoothing constant.
pub const DICE_EPS: f64 = 1.0;

/// One ground-truth object in one frame; `class` is in `1..=K_c`.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub class: usize,
    /// `H×W` row-major, 0 or 1.
    pub mask: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameTarget {
    /// Unannotated frames contribute nothing to the matched losses.
    pub annotated: bool,
    pub instances: Vec<Instance>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipTarget {
    pub height: usize,
    pub width: usize,
    pub frames: Vec<FrameTarget>,
}

impl ClipTarget {
    /// Applies the supervision protocol: with `FirstFrame` only frame 0 stays annotated.
    pub fn with_supervision(mut self, s: Supervision) -> Self {
        if s == Supervision::FirstFrame {
            for (t, f) in self.frames.iter_mut().enumerate() {
                f.annotated = t == 0;
            }
        }
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub cls: f64,
    pub mask: f64,
    pub ada: f64,
    pub no_object: f64,
}

impl LossWeights {
    pub fn from_config(c: &RunConfig) -> Self {
        LossWeights {
            cls: c.lambda_cls,
            mask: c.lambda_mask,
            ada: c.lambda_ada,
            no_object: c.no_object_weight,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for v in [self.cls, self.mask, self.ada, self.no_object] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Parameter(format!("loss weights must be >= 0, got {self:?}")));
            }
        }
        Ok(())
    }
}

/// `exp(S−1)·(1−S)`: the penalty for one adjacent pair with similarity `S`.
pub fn ada_term(s: f64) -> f64 {
    (s - 1.0).exp() * (1.0 - s)
}

/// Pixel-mean BCE of logits `x` against 0/1 `y`, via `softplus(x) − x·y`.
pub fn bce_value(x: &[f64], y: &[u8]) -> f64 {
    let s: f64 = x
        .iter()
        .zip(y)
        .map(|(&xi, &yi)| softplus(xi) - xi * yi as f64)
        .sum();
    s / x.len().max(1) as f64
}

/// `1 − (2Σpy + ε)/(Σp + Σy + ε)` with `p = sigmoid(x)`.
pub fn dice_value(x: &[f64], y: &[u8]) -> f64 {
    let (mut inter, mut ps, mut ys) = (0.0, 0.0, 0.0);
    for (&xi, &yi) in x.iter().zip(y) {
        let p = sigmoid(xi);
        inter += p * yi as f64;
        ps += p;
        ys += yi as f64;
    }
    1.0 - (2.0 * inter + DICE_EPS) / (ps + ys + DICE_EPS)
}

/// Per-frame assignments of ground-truth instances to queries for one layer.
/// `class_logits: [T, N_q, K_c+1]`, `mask_logits: [T, N_q, H, W]` at target resolution.
pub fn match_frames(
    class_logits: &Tensor,
    mask_logits: &Tensor,
    target: &ClipTarget,
    weights: &LossWeights,
) -> Result<Vec<Assignment>> {
    let (cs, ms) = (class_logits.shape(), mask_logits.shape());
    let hw = target.height * target.width;
    if cs.len() != 3 || ms.len() != 4 || cs[0] != ms[0] || cs[1] != ms[1] || ms[2] * ms[3] != hw {
        return Err(Error::dim("match_frames", cs, ms));
    }
    if target.frames.len() != cs[0] {
        return Err(Error::dim("match_frames", cs, &[target.frames.len()]));
    }
    let (nq, nc) = (cs[1], cs[2]);
    let mut probs = vec![0.0; nc];
    let mut out = Vec::with_capacity(cs[0]);
    for (t, frame) in target.frames.iter().enumerate() {
        let g = if frame.annotated { frame.instances.len() } else { 0 };
        if g > nq {
            return Err(Error::Capacity { k: g, n: nq });
        }
        let mut cost = vec![0.0; g * nq];
        for q in 0..nq {
            let row = &class_logits.data()[(t * nq + q) * nc..(t * nq + q + 1) * nc];
            softmax_slice(row, &mut probs);
            let x = &mask_logits.data()[(t * nq + q) * hw..(t * nq + q + 1) * hw];
            for (gi, inst) in frame.instances.iter().take(g).enumerate() {
                if inst.class == 0 || inst.class >= nc {
                    return Err(Error::Contract(format!("instance class {} out of range", inst.class)));
                }
                cost[gi * nq + q] = -weights.cls * probs[inst.class - 1]
                    + weights.mask * (bce_value(x, &inst.mask) + dice_value(x, &inst.mask));
            }
        }
        out.push(hungarian(&cost, g, nq)?);
    }
    Ok(out)
}

/// Weighted cross-entropy `Σ w·CE / Σ w` over every query of every annotated frame: matched
/// queries target their instance's class with weight 1, the rest target no-object with
/// weight `no_object`.
pub fn classification_loss<'t>(
    class_logits: Var<'t>,
    matches: &[Assignment],
    target: &ClipTarget,
    no_object: f64,
) -> Result<Var<'t>> {
    let s = class_logits.shape();
    if s.len() != 3 || s[0] != matches.len() || s[0] != target.frames.len() {
        return Err(Error::dim("classification_loss", &s, &[matches.len()]));
    }
    let (t_len, nq, nc) = (s[0], s[1], s[2]);
    let mut w = vec![0.0; t_len * nq * nc];
    let mut total = 0.0;
    for t in 0..t_len {
        if !target.frames[t].annotated {
            continue;
        }
        for q in 0..nq {
            let (k, wt) = match matches[t].pairs.iter().find(|p| p.1 == q) {
                Some(&(g, _)) => (target.frames[t].instances[g].class - 1, 1.0),
                None => (nc - 1, no_object),
            };
            w[(t * nq + q) * nc + k] = wt;
            total += wt;
        }
    }
    let tape = class_logits.tape();
    if total == 0.0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    for v in &mut w {
        *v /= total;
    }
    let w = tape.constant(Tensor::new(s.clone(), w)?);
    class_logits.log_softmax(2)?.mul(w)?.sum()?.neg()
}

/// Mean over matched pairs of (pixel-mean BCE + Dice), after bilinear upsampling of the
/// matched mask logits `[T, N_q, H_1, W_1]` to the target resolution. No pairs gives 0.
pub fn mask_loss<'t>(mask_logits: Var<'t>, matches: &[Assignment], target: &ClipTarget) -> Result<Var<'t>> {
    let s = mask_logits.shape();
    if s.len() != 4 || s[0] != matches.len() {
        return Err(Error::dim("mask_loss", &s, &[matches.len()]));
    }
    let (h, w) = (target.height, target.width);
    let hw = h * w;
    let mut idx = Vec::new();
    let mut y = Vec::new();
    for (t, m) in matches.iter().enumerate() {
        for &(g, q) in &m.pairs {
            idx.push(t * s[1] + q);
            y.extend(target.frames[t].instances[g].mask.iter().map(|&b| b as f64));
        }
    }
    let tape = mask_logits.tape();
    if idx.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let m = idx.len();
    let ysum: Vec<f64> = y.chunks(hw).map(|c| c.iter().sum()).collect();
    let y = tape.constant(Tensor::new([m, h, w], y)?);
    let x = mask_logits
        .reshape(&[s[0] * s[1], s[2], s[3]])?
        .index_select(0, &idx)?
        .upsample_bilinear(h, w)?;
    let bce = x.softplus()?.sub(x.mul(y)?)?.mean()?;
    let p = x.sigmoid()?;
    let inter = p.mul(y)?.reshape(&[m, hw])?.sum_axis(1)?;
    let psum = p.reshape(&[m, hw])?.sum_axis(1)?;
    let den = psum
        .add(tape.constant(Tensor::new([m], ysum)?))?
        .add_scalar(DICE_EPS)?;
    let ratio = inter.scale(2.0)?.add_scalar(DICE_EPS)?.div(den)?;
    let dice = ratio.mean()?.neg()?.add_scalar(1.0)?;
    bce.add(dice)
}

/// `Σ_t exp(S_t−1)(1−S_t)` over adjacent frames of `mask_logits: [T, N_q, H_1, W_1]`.
pub fn adaptive_consistency_loss<'t>(
    mask_logits: Var<'t>,
    source: AdaSource,
    granularity: AdaGranularity,
) -> Result<Var<'t>> {
    let s = mask_logits.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("consistency loss expects [T, N_q, H, W], got {s:?}")));
    }
    let tape = mask_logits.tape();
    let mut total = tape.constant(Tensor::scalar(0.0));
    if s[0] < 2 {
        return Ok(total);
    }
    let x = match source {
        AdaSource::Probabilities => mask_logits.sigmoid()?,
        AdaSource::Logits => mask_logits,
    };
    let term = |sim: Var<'t>| -> Result<Var<'t>> {
        sim.add_scalar(-1.0)?.exp()?.mul(sim.neg()?.add_scalar(1.0)?)
    };
    for t in 0..s[0] - 1 {
        let a = x.narrow(0, t, 1)?;
        let b = x.narrow(0, t + 1, 1)?;
        let pair = match granularity {
            AdaGranularity::Flattened => term(a.cosine_similarity(b)?)?,
            AdaGranularity::PerQuery => {
                let mut acc = tape.constant(Tensor::scalar(0.0));
                for q in 0..s[1] {
                    let sim = a.narrow(1, q, 1)?.cosine_similarity(b.narrow(1, q, 1)?)?;
                    acc = acc.add(term(sim)?)?;
                }
                acc.scale(1.0 / s[1] as f64)?
            }
        };
        total = total.add(pair)?;
    }
    Ok(total)
}

/// Weighted components of one clip's loss.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Breakdown {
    pub cls: f64,
    pub mask: f64,
    pub ada: f64,
    pub total: f64,
}

impl Breakdown {
    pub fn accumulate(&mut self, o: &Breakdown) {
        self.cls += o.cls;
        self.mask += o.mask;
        self.ada += o.ada;
        self.total += o.total;
    }

    pub fn scaled(&self, c: f64) -> Breakdown {
        Breakdown {
            cls: self.cls * c,
            mask: self.mask * c,
            ada: self.ada * c,
            total: self.total * c,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LossOutput<'t> {
    pub total: Var<'t>,
    pub breakdown: Breakdown,
    /// `matches[layer][frame]`.
    pub matches: Vec<Vec<Assignment>>,
}

/// Consistency-loss settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaSettings {
    pub layer: usize,
    pub source: AdaSource,
    pub granularity: AdaGranularity,
}

impl AdaSettings {
    pub fn from_config(c: &RunConfig) -> Self {
        AdaSettings {
            layer: c.ada_layer(),
            source: c.ada_source,
            granularity: c.ada_granularity,
        }
    }
}

/// `Σ_layers (λ_cls·L_cls + λ_mask·L_mask) + λ_ada·L_ada`. Matching is recomputed per layer
/// unless `frozen` supplies it.
pub fn total_loss<'t>(
    predictions: &[PredictionSet<'t>],
    target: &ClipTarget,
    weights: &LossWeights,
    ada: &AdaSettings,
    frozen: Option<&[Vec<Assignment>]>,
) -> Result<LossOutput<'t>> {
    weights.validate()?;
    let first = predictions
        .first()
        .ok_or_else(|| Error::Contract("no predictions to score".into()))?;
    let tape: &'t Tape = first.class_logits.tape();
    let mut total = tape.constant(Tensor::scalar(0.0));
    let mut breakdown = Breakdown::default();
    let mut all_matches = Vec::with_capacity(predictions.len());
    for (j, pred) in predictions.iter().enumerate() {
        let matches = match frozen {
            Some(f) => f
                .get(j)
                .cloned()
                .ok_or_else(|| Error::Contract(format!("no frozen matching for layer {j}")))?,
            None => {
                let up = bilinear_resize(&pred.mask_logits.value(), target.height, target.width)?;
                match_frames(&pred.class_logits.value(), &up, target, weights)?
            }
        };
        let lc = classification_loss(pred.class_logits, &matches, target, weights.no_object)?.scale(weights.cls)?;
        let lm = mask_loss(pred.mask_logits, &matches, target)?.scale(weights.mask)?;
        breakdown.cls += lc.item();
        breakdown.mask += lm.item();
        total = total.add(lc)?.add(lm)?;
        all_matches.push(matches);
    }
    if weights.ada > 0.0 {
        let pred = predictions
            .get(ada.layer)
            .ok_or_else(|| Error::Contract(format!("no decoder layer {}", ada.layer)))?;
        let la = adaptive_consistency_loss(pred.mask_logits, ada.source, ada.granularity)?.scale(weights.ada)?;
        breakdown.ada = la.item();
        total = total.add(la)?;
    }
    breakdown.total = total.item();
    Ok(LossOutput {
        total,
        breakdown,
        matches: all_matches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_mask_terms() {
        let x = [0.0; 4];
        let y = [1, 1, 0, 0];
        assert!((bce_value(&x, &y) - 2f64.ln()).abs() < 1e-15);
        assert!((dice_value(&x, &y) - 0.4).abs() < 1e-15);
        let big = [40.0; 4];
        assert_eq!(dice_value(&big, &[1, 1, 1, 1]), 0.0);
    }

    #[test]
    fn ada_term_values() {
        assert_eq!(ada_term(1.0), 0.0);
        assert!((ada_term(0.0) - (-1f64).exp()).abs() < 1e-16);
    }
}
