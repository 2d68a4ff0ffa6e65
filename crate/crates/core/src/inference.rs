//! Semantic maps from class posteriors and mask probabilities.

use crate::error::{Error, Result};
use crate::imageio::encode_pgm;
use crate::tensor::{bilinear_resize, sigmoid, softmax_slice, Tensor};

/// Labels `T×H×W`; 0 is background and `1..=classes` are object classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SemanticMap {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub labels: Vec<u8>,
}

impl SemanticMap {
    pub fn new(frames: usize, height: usize, width: usize, classes: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != frames * height * width {
            return Err(Error::dim("semantic_map", &[labels.len()], &[frames, height, width]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize > classes) {
            return Err(Error::Contract(format!("label {bad} exceeds {classes} classes")));
        }
        Ok(SemanticMap {
            frames,
            height,
            width,
            classes,
            labels,
        })
    }

    pub fn frame(&self, t: usize) -> &[u8] {
        let hw = self.height * self.width;
        &self.labels[t * hw..(t + 1) * hw]
    }

    /// Frame `t` as PGM with labels scaled to `⌊255·k/K_c⌋`.
    pub fn frame_pgm(&self, t: usize) -> Vec<u8> {
        let k = self.classes.max(1);
        let gray: Vec<u8> = self
            .frame(t)
            .iter()
            .map(|&l| (255 * l as usize / k) as u8)
            .collect();
        encode_pgm(self.width, self.height, &gray)
    }
}

/// `O[t,k] = Σ_q cls[t,q,k]·mask[t,q]` over real classes; each pixel takes the arg-max class
/// (lowest index on ties) or background when the best score is below `tau`.
/// `class_probs: [T, N_q, K_c+1]`, `mask_probs: [T, N_q, H, W]`.
pub fn semantic_inference(class_probs: &Tensor, mask_probs: &Tensor, tau: f64) -> Result<SemanticMap> {
    let (cs, ms) = (class_probs.shape(), mask_probs.shape());
    if cs.len() != 3 || ms.len() != 4 || cs[0] != ms[0] || cs[1] != ms[1] || cs[2] < 2 {
        return Err(Error::dim("semantic_inference", cs, ms));
    }
    let (t_len, nq, nc) = (cs[0], cs[1], cs[2]);
    let k = nc - 1;
    if k > u8::MAX as usize {
        return Err(Error::Parameter(format!("{k} classes do not fit an 8-bit map")));
    }
    let (h, w) = (ms[2], ms[3]);
    let hw = h * w;
    let (cd, md) = (class_probs.data(), mask_probs.data());
    let mut labels = vec![0u8; t_len * hw];
    let mut scores = vec![0.0; k * hw];
    for t in 0..t_len {
        scores.fill(0.0);
        for q in 0..nq {
            let cls = &cd[(t * nq + q) * nc..(t * nq + q) * nc + k];
            let mask = &md[(t * nq + q) * hw..(t * nq + q + 1) * hw];
            for (c, &pc) in cls.iter().enumerate() {
                let row = &mut scores[c * hw..(c + 1) * hw];
                for (s, &m) in row.iter_mut().zip(mask) {
                    *s += pc * m;
                }
            }
        }
        for px in 0..hw {
            let mut best = 0;
            for c in 1..k {
                if scores[c * hw + px] > scores[best * hw + px] {
                    best = c;
                }
            }
            if scores[best * hw + px] >= tau {
                labels[t * hw + px] = (best + 1) as u8;
            }
        }
    }
    SemanticMap::new(t_len, h, w, k, labels)
}

/// Single-class specialisation: foreground versus background.
pub fn binary_inference(class_probs: &Tensor, mask_probs: &Tensor, tau: f64) -> Result<SemanticMap> {
    if class_probs.shape().get(2) != Some(&2) {
        return Err(Error::dim("binary_inference", class_probs.shape(), &[2]));
    }
    semantic_inference(class_probs, mask_probs, tau)
}

/// Raw decoder outputs to a map: softmax over classes, mask logits resized to `h×w` then
/// passed through the sigmoid.
pub fn predict_map(class_logits: &Tensor, mask_logits: &Tensor, h: usize, w: usize, tau: f64) -> Result<SemanticMap> {
    let cs = class_logits.shape();
    if cs.len() != 3 {
        return Err(Error::Shape(format!("class logits must be rank 3, got {cs:?}")));
    }
    let nc = cs[2];
    let mut probs = vec![0.0; class_logits.numel()];
    for (src, dst) in class_logits.data().chunks(nc).zip(probs.chunks_mut(nc)) {
        softmax_slice(src, dst);
    }
    let class_probs = Tensor::new(cs.to_vec(), probs)?;
    let mask_probs = bilinear_resize(mask_logits, h, w)?.map(sigmoid);
    semantic_inference(&class_probs, &mask_probs, tau)
}
