//! Run configuration. Every ablation switch lives here so each variant is a config file,
//! not a code change.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which directions of the audio-visual attention update their stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    None,
    VisualOnly,
    AudioOnly,
    Bilateral,
}

impl FusionMode {
    pub fn updates_visual(self) -> bool {
        matches!(self, FusionMode::VisualOnly | FusionMode::Bilateral)
    }

    pub fn updates_audio(self) -> bool {
        matches!(self, FusionMode::AudioOnly | FusionMode::Bilateral)
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(FusionMode::None),
            "visual_only" => Ok(FusionMode::VisualOnly),
            "audio_only" => Ok(FusionMode::AudioOnly),
            "bilateral" => Ok(FusionMode::Bilateral),
            other => Err(Error::Config(format!("unknown fusion mode {other:?}"))),
        }
    }
}

/// How object queries are formed from the fused audio features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    /// Expanded audio replicated across every query.
    All,
    /// Expanded audio added to learnable queries.
    Add,
}

impl FromStr for QueryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(QueryMode::All),
            "add" => Ok(QueryMode::Add),
            other => Err(Error::Config(format!("unknown query mode {other:?}"))),
        }
    }
}

/// Quantity compared between adjacent frames by the consistency loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaSource {
    Probabilities,
    Logits,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaGranularity {
    /// One similarity per frame pair over all queries and pixels.
    Flattened,
    /// One similarity per query, averaged.
    PerQuery,
}

/// Frames whose annotations feed the classification and mask losses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    AllFrames,
    FirstFrame,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub audio_dim: usize,
    pub embed_dim: usize,
    pub pixel_dim: usize,
    pub stage_channels: [usize; 4],
    pub queries: usize,
    pub rounds: usize,
    pub classes: usize,
    pub palette_capacity: usize,

    pub lambda_cls: f64,
    pub lambda_mask: f64,
    pub lambda_ada: f64,
    pub no_object_weight: f64,
    pub ada_source: AdaSource,
    pub ada_granularity: AdaGranularity,
    pub supervision: Supervision,

    pub fusion: FusionMode,
    pub per_frame_attention: bool,
    pub query_mode: QueryMode,
    pub siam: bool,
    pub shared_weights: bool,
    pub background_threshold: f64,

    pub seed: u64,
    pub iterations: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub log_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            frames: 3,
            height: 32,
            width: 32,
            audio_dim: 16,
            embed_dim: 32,
            pixel_dim: 32,
            stage_channels: [16, 32, 64, 128],
            queries: 8,
            rounds: 3,
            classes: 3,
            palette_capacity: 100,
            lambda_cls: 2.0,
            lambda_mask: 5.0,
            lambda_ada: 10.0,
            no_object_weight: 0.1,
            ada_source: AdaSource::Probabilities,
            ada_granularity: AdaGranularity::Flattened,
            supervision: Supervision::AllFrames,
            fusion: FusionMode::Bilateral,
            per_frame_attention: false,
            query_mode: QueryMode::Add,
            siam: true,
            shared_weights: false,
            background_threshold: 0.5,
            seed: 0,
            iterations: 2000,
            lr: 1e-3,
            weight_decay: 0.05,
            batch_size: 4,
            log_every: 50,
        }
    }
}

impl RunConfig {
    /// Full-size shapes: 224×224 input, 256-wide embeddings, 100 queries, 3 rounds, 5 frames.
    pub fn paper_scale() -> Self {
        RunConfig {
            frames: 5,
            height: 224,
            width: 224,
            audio_dim: 128,
            embed_dim: 256,
            pixel_dim: 256,
            queries: 100,
            rounds: 3,
            ..Self::default()
        }
    }

    /// Smallest model used by the gradient checks.
    pub fn micro() -> Self {
        RunConfig {
            frames: 2,
            height: 32,
            width: 32,
            audio_dim: 4,
            embed_dim: 8,
            pixel_dim: 8,
            stage_channels: [4, 4, 8, 8],
            queries: 3,
            rounds: 1,
            classes: 2,
            palette_capacity: 8,
            ..Self::default()
        }
    }

    pub fn decoder_layers(&self) -> usize {
        3 * self.rounds
    }

    /// Layer whose masks feed the consistency loss.
    pub fn ada_layer(&self) -> usize {
        self.decoder_layers() / 2
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(32) || !self.width.is_multiple_of(32) {
            return bad(format!(
                "frame size {}x{} must be a positive multiple of 32",
                self.height, self.width
            ));
        }
        if self.frames == 0 || self.queries == 0 || self.rounds == 0 || self.classes == 0 {
            return bad("frames, queries, rounds and classes must be positive".into());
        }
        if self.audio_dim == 0 || self.stage_channels.contains(&0) {
            return bad("audio and stage widths must be positive".into());
        }
        if self.embed_dim == 0 || !self.embed_dim.is_multiple_of(2) || self.pixel_dim == 0 || !self.pixel_dim.is_multiple_of(2) {
            return bad(format!(
                "embedding widths must be even (sine encodings), got d={} C={}",
                self.embed_dim, self.pixel_dim
            ));
        }
        if self.classes > self.palette_capacity {
            return bad(format!(
                "{} classes exceed palette capacity {}",
                self.classes, self.palette_capacity
            ));
        }
        for (name, v) in [
            ("lambda_cls", self.lambda_cls),
            ("lambda_mask", self.lambda_mask),
            ("lambda_ada", self.lambda_ada),
            ("no_object_weight", self.no_object_weight),
            ("weight_decay", self.weight_decay),
            ("background_threshold", self.background_threshold),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        if !(self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return bad("batch_size and log_every must be positive".into());
        }
        if self.shared_weights && !self.siam {
            return bad("shared_weights needs the maskige branch (siam = true)".into());
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        RunConfig::paper_scale().validate().unwrap();
        RunConfig::micro().validate().unwrap();
        assert_eq!(cfg.decoder_layers(), 9);
        assert_eq!(cfg.ada_layer(), 4);
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(matches!(RunConfig::from_json(r#"{"frams": 3}"#), Err(Error::Config(_))));
        assert!(RunConfig::from_json(r#"{"height": 40}"#).is_err());
        assert!(RunConfig::from_json(r#"{"lambda_ada": -1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"fusion": "sideways"}"#).is_err());
        assert!(RunConfig::from_json(r#"{"siam": false, "shared_weights": true}"#).is_err());
        let partial = RunConfig::from_json(r#"{"lambda_ada": 0.0, "fusion": "none"}"#).unwrap();
        assert_eq!(partial.lambda_ada, 0.0);
        assert_eq!(partial.fusion, FusionMode::None);
        assert_eq!(partial.queries, 8);
    }

    #[test]
    fn mode_strings() {
        assert_eq!("visual_only".parse::<FusionMode>().unwrap(), FusionMode::VisualOnly);
        assert!("both".parse::<FusionMode>().is_err());
        assert_eq!("all".parse::<QueryMode>().unwrap(), QueryMode::All);
        assert!(FusionMode::Bilateral.updates_audio() && FusionMode::Bilateral.updates_visual());
        assert!(!FusionMode::None.updates_audio() && !FusionMode::None.updates_visual());
    }

    #[test]
    fn every_ablation_row_is_expressible() {
        let rows = [
            r#"{"siam": false}"#,
            r#"{"shared_weights": true}"#,
            r#"{"fusion": "none"}"#,
            r#"{"fusion": "visual_only"}"#,
            r#"{"fusion": "audio_only"}"#,
            r#"{"fusion": "bilateral"}"#,
            r#"{"query_mode": "all"}"#,
            r#"{"query_mode": "add"}"#,
            r#"{"lambda_ada": 0}"#,
            r#"{"lambda_ada": 5}"#,
            r#"{"lambda_ada": 10}"#,
            r#"{"lambda_ada": 20}"#,
        ];
        for r in rows {
            RunConfig::from_json(r).unwrap();
        }
    }
}
