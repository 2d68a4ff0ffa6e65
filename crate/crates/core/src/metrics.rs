//! Jaccard and F-measure per class and clip, and adjacent-frame agreement of predictions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::SemanticMap;

/// β² of the F-measure.
pub const BETA2: f64 = 0.3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub pred: usize,
    pub gt: usize,
    pub inter: usize,
}

impl Counts {
    /// `|∩|/|∪|`; 1 when both sides are empty.
    pub fn jaccard(&self) -> f64 {
        let union = self.pred + self.gt - self.inter;
        if union == 0 {
            1.0
        } else {
            self.inter as f64 / union as f64
        }
    }

    /// `(1+β²)PR/(β²P+R)`; 1 when both sides are empty, 0 on any other zero denominator.
    pub fn fscore(&self) -> f64 {
        if self.pred == 0 && self.gt == 0 {
            return 1.0;
        }
        if self.pred == 0 || self.gt == 0 {
            return 0.0;
        }
        f_beta(
            self.inter as f64 / self.pred as f64,
            self.inter as f64 / self.gt as f64,
        )
    }
}

pub fn f_beta(precision: f64, recall: f64) -> f64 {
    let den = BETA2 * precision + recall;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + BETA2) * precision * recall / den
    }
}

fn check(pred: &SemanticMap, gt: &SemanticMap) -> Result<()> {
    let a = [pred.frames, pred.height, pred.width];
    let b = [gt.frames, gt.height, gt.width];
    if a != b {
        return Err(Error::dim("metric", &a, &b));
    }
    Ok(())
}

/// Pixel counts per class `1..=K` over all frames of a clip.
pub fn class_counts(pred: &SemanticMap, gt: &SemanticMap) -> Result<Vec<Counts>> {
    check(pred, gt)?;
    let k = pred.classes.max(gt.classes);
    let mut counts = vec![Counts::default(); k + 1];
    for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
        counts[p as usize].pred += 1;
        counts[g as usize].gt += 1;
        if p == g {
            counts[p as usize].inter += 1;
        }
    }
    Ok(counts)
}

/// Classes present in either map, with their counts.
fn present(counts: &[Counts]) -> impl Iterator<Item = (usize, &Counts)> {
    counts
        .iter()
        .enumerate()
        .skip(1)
        .filter(|(_, c)| c.pred > 0 || c.gt > 0)
}

fn mean_over_present(counts: &[Counts], f: impl Fn(&Counts) -> f64) -> f64 {
    let vals: Vec<f64> = present(counts).map(|(_, c)| f(c)).collect();
    if vals.is_empty() {
        1.0
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

/// Clip Jaccard: mean over classes present in prediction or ground truth; 1 if none is.
pub fn jaccard(pred: &SemanticMap, gt: &SemanticMap) -> Result<f64> {
    Ok(mean_over_present(&class_counts(pred, gt)?, Counts::jaccard))
}

/// Clip F-measure, aggregated like [`jaccard`].
pub fn fscore(pred: &SemanticMap, gt: &SemanticMap) -> Result<f64> {
    Ok(mean_over_present(&class_counts(pred, gt)?, Counts::fscore))
}

/// Mean cosine between adjacent binary foreground maps; an empty pair counts as 1.
/// `None` for fewer than two frames.
pub fn interframe_similarity(pred: &SemanticMap) -> Option<f64> {
    if pred.frames < 2 {
        return None;
    }
    let mut total = 0.0;
    for t in 0..pred.frames - 1 {
        let (a, b) = (pred.frame(t), pred.frame(t + 1));
        let (mut na, mut nb, mut dot) = (0usize, 0usize, 0usize);
        for (&x, &y) in a.iter().zip(b) {
            let (x, y) = (x > 0, y > 0);
            na += x as usize;
            nb += y as usize;
            dot += (x && y) as usize;
        }
        total += match (na, nb) {
            (0, 0) => 1.0,
            (0, _) | (_, 0) => 0.0,
            _ => dot as f64 / ((na * nb) as f64).sqrt(),
        };
    }
    Some(total / (pred.frames - 1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipScore {
    pub clip: String,
    pub miou: f64,
    pub fscore: f64,
    pub interframe_similarity: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub miou: f64,
    pub fscore: f64,
    /// Clips in which the class was present.
    pub clips: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub miou: f64,
    pub fscore: f64,
    pub per_class: BTreeMap<String, ClassScore>,
    pub interframe_similarity: Option<f64>,
    pub per_clip: Vec<ClipScore>,
}

/// Accumulates clips in order; means are taken per class, then per clip.
#[derive(Clone, Debug, Default)]
pub struct MetricAccumulator {
    clips: Vec<ClipScore>,
    classes: BTreeMap<usize, (f64, f64, usize)>,
}

impl MetricAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, pred: &SemanticMap, gt: &SemanticMap) -> Result<ClipScore> {
        let counts = class_counts(pred, gt)?;
        for (k, c) in present(&counts) {
            let e = self.classes.entry(k).or_insert((0.0, 0.0, 0));
            e.0 += c.jaccard();
            e.1 += c.fscore();
            e.2 += 1;
        }
        let score = ClipScore {
            clip: name.to_string(),
            miou: mean_over_present(&counts, Counts::jaccard),
            fscore: mean_over_present(&counts, Counts::fscore),
            interframe_similarity: interframe_similarity(pred),
        };
        self.clips.push(score.clone());
        Ok(score)
    }

    pub fn report(&self) -> MetricReport {
        let n = self.clips.len().max(1) as f64;
        let sims: Vec<f64> = self.clips.iter().filter_map(|c| c.interframe_similarity).collect();
        MetricReport {
            miou: self.clips.iter().map(|c| c.miou).sum::<f64>() / n,
            fscore: self.clips.iter().map(|c| c.fscore).sum::<f64>() / n,
            per_class: self
                .classes
                .iter()
                .map(|(&k, &(j, f, c))| {
                    (
                        k.to_string(),
                        ClassScore {
                            miou: j / c as f64,
                            fscore: f / c as f64,
                            clips: c,
                        },
                    )
                })
                .collect(),
            interframe_similarity: (!sims.is_empty()).then(|| sims.iter().sum::<f64>() / sims.len() as f64),
            per_clip: self.clips.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(t: usize, h: usize, w: usize, labels: Vec<u8>) -> SemanticMap {
        SemanticMap::new(t, h, w, 2, labels).unwrap()
    }

    #[test]
    fn identity_and_empty_cases() {
        let g = map(1, 2, 2, vec![0, 1, 2, 2]);
        assert_eq!(jaccard(&g, &g).unwrap(), 1.0);
        assert_eq!(fscore(&g, &g).unwrap(), 1.0);
        let e = map(1, 2, 2, vec![0; 4]);
        assert_eq!(jaccard(&e, &e).unwrap(), 1.0);
        assert_eq!(fscore(&e, &g).unwrap(), 0.0);
        assert!(jaccard(&map(2, 1, 2, vec![0; 4]), &g).is_err());
    }

    #[test]
    fn f_beta_closed_form() {
        assert!((f_beta(0.5, 1.0) - 1.3 * 0.5 / 1.15).abs() < 1e-15);
        assert_eq!(f_beta(0.0, 0.0), 0.0);
    }

    #[test]
    fn interframe_cases() {
        assert_eq!(interframe_similarity(&map(1, 1, 2, vec![1, 0])), None);
        assert_eq!(interframe_similarity(&map(2, 1, 2, vec![1, 0, 1, 0])), Some(1.0));
        assert_eq!(interframe_similarity(&map(2, 1, 2, vec![1, 0, 0, 1])), Some(0.0));
        let half = map(2, 1, 3, vec![1, 1, 0, 0, 1, 1]);
        assert!((interframe_similarity(&half).unwrap() - 0.5).abs() < 1e-15);
    }
}
