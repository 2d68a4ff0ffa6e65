//! Inference over a split and metric reporting.

use std::path::Path;

use crate::dataset::Clip;
use crate::error::{Error, Result};
use crate::imageio;
use crate::inference::{predict_map, SemanticMap};
use crate::metrics::{MetricAccumulator, MetricReport};
use crate::model::Model;
use crate::parallel::map_indices;
use crate::tensor::Tape;

/// Semantic map from the last decoder layer of one clip.
pub fn predict(model: &Model, clip: &Clip) -> Result<SemanticMap> {
    let tape = Tape::new();
    let p = model.store.bind(&tape);
    let out = model.forward(&p, &clip.input, None)?;
    let last = out
        .decoder
        .predictions
        .last()
        .ok_or_else(|| Error::Contract("decoder produced no predictions".into()))?;
    let (cls, masks) = (last.class_logits.to_tensor(), last.mask_logits.to_tensor());
    let c = &model.config;
    predict_map(&cls, &masks, c.height, c.width, c.background_threshold)
}

/// Predicts every clip (fanned out across threads) and scores the maps in clip order.
pub fn evaluate(model: &Model, clips: &[&Clip]) -> Result<(MetricReport, Vec<SemanticMap>)> {
    let maps = map_indices(clips.len(), |i| predict(model, clips[i]))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let report = score(clips, &maps)?;
    Ok((report, maps))
}

pub fn score(clips: &[&Clip], maps: &[SemanticMap]) -> Result<MetricReport> {
    let mut acc = MetricAccumulator::new();
    for (clip, map) in clips.iter().zip(maps) {
        acc.add(&clip.name, map, &clip.semantic)?;
    }
    Ok(acc.report())
}

/// Writes `DIR/<clip>_<t>.pgm` for every predicted frame.
pub fn write_predictions(dir: &Path, clips: &[&Clip], maps: &[SemanticMap]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (clip, map) in clips.iter().zip(maps) {
        for t in 0..map.frames {
            imageio::write_file(&dir.join(format!("{}_{t}.pgm", clip.name)), &map.frame_pgm(t))?;
        }
    }
    Ok(())
}

pub fn report_json(report: &MetricReport) -> String {
    serde_json::to_string_pretty(report).expect("report serialises")
}
