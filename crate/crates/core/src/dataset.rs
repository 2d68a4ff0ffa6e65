//! On-disk layout of a synthetic dataset and its in-memory form.
//!
//! ```text
//! DIR/manifest.json
//! DIR/palette.txt
//! DIR/clips/NNNN/frameT.ppm       RGB frame
//! DIR/clips/NNNN/labelT.pgm       raw class labels, 0 = background
//! DIR/clips/NNNN/proposalT_K.pgm  proposal masks, 0/255
//! DIR/clips/NNNN/audio.ctns       [T, D] audio features
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio;
use crate::inference::SemanticMap;
use crate::losses::{ClipTarget, FrameTarget, Instance};
use crate::maskige::{self, MaskStack, Palette, DEFAULT_CAPACITY};
use crate::model::ClipInput;
use crate::parallel::map_indices;
use crate::synth::{generate_clip, ClassBank, SynthSpec};
use crate::tensor::{ctns, Tensor};

pub const MANIFEST: &str = "manifest.json";
pub const PALETTE: &str = "palette.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipEntry {
    pub name: String,
    pub split: Split,
    pub sounding: Vec<Vec<usize>>,
    pub proposals: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: u32,
    pub seed: u64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub audio_dim: usize,
    pub noise: f64,
    pub perturb: usize,
    pub palette_capacity: usize,
    pub clips: Vec<ClipEntry>,
}

/// Fraction of clips held out for validation.
pub const VAL_FRACTION: f64 = 0.2;

fn clip_dir(root: &Path, name: &str) -> PathBuf {
    root.join("clips").join(name)
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Generates `n` clips into `dir`; the last `⌈0.2·n⌉` form the validation split.
pub fn write_dataset(dir: &Path, spec: &SynthSpec, n: usize) -> Result<Manifest> {
    spec.validate()?;
    let bank = ClassBank::new(spec)?;
    let palette = Palette::generate(DEFAULT_CAPACITY, spec.seed)?;
    create_dir(dir)?;
    palette.write(&dir.join(PALETTE))?;
    let n_val = ((n as f64) * VAL_FRACTION).ceil() as usize;
    let entries = map_indices(n, |i| -> Result<ClipEntry> {
        let clip = generate_clip(spec, &bank, i)?;
        if let Some(k) = clip.proposals.iter().map(|p| p.planes()).find(|&k| k > palette.len()) {
            return Err(Error::Capacity { k, n: palette.len() });
        }
        let name = format!("{i:04}");
        let cd = clip_dir(dir, &name);
        create_dir(&cd)?;
        let (h, w) = (spec.height, spec.width);
        let hw = h * w;
        for t in 0..spec.frames {
            let (_, _, rgb) = imageio::chw_to_rgb(&clip.frames.index0(t))?;
            imageio::write_file(&cd.join(format!("frame{t}.ppm")), &imageio::encode_ppm(w, h, &rgb))?;
            let labels = &clip.semantic[t * hw..(t + 1) * hw];
            imageio::write_file(&cd.join(format!("label{t}.pgm")), &imageio::encode_pgm(w, h, labels))?;
            for k in 0..clip.proposals[t].planes() {
                imageio::write_file(
                    &cd.join(format!("proposal{t}_{k}.pgm")),
                    &clip.proposals[t].plane_pgm(k),
                )?;
            }
        }
        ctns::write(&cd.join("audio.ctns"), &clip.audio)?;
        Ok(ClipEntry {
            name,
            split: if i + n_val >= n { Split::Val } else { Split::Train },
            sounding: clip.sounding,
            proposals: clip.proposals.iter().map(|p| p.planes()).collect(),
        })
    });
    let manifest = Manifest {
        format: 1,
        seed: spec.seed,
        frames: spec.frames,
        height: spec.height,
        width: spec.width,
        classes: spec.classes,
        audio_dim: spec.audio_dim,
        noise: spec.noise,
        perturb: spec.perturb,
        palette_capacity: palette.len(),
        clips: entries.into_iter().collect::<Result<Vec<_>>>()?,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    imageio::write_file(&dir.join(MANIFEST), text.as_bytes())?;
    Ok(manifest)
}

/// A clip ready for training or evaluation.
#[derive(Clone, Debug)]
pub struct Clip {
    pub name: String,
    pub split: Split,
    pub input: ClipInput,
    pub semantic: SemanticMap,
    pub target: ClipTarget,
    pub proposals: Vec<MaskStack>,
}

/// Per-class instances of each frame, every frame annotated.
pub fn target_from_semantic(map: &SemanticMap) -> ClipTarget {
    let hw = map.height * map.width;
    let frames = (0..map.frames)
        .map(|t| {
            let labels = map.frame(t);
            let instances = (1..=map.classes)
                .filter(|&c| labels.iter().any(|&l| l as usize == c))
                .map(|c| Instance {
                    class: c,
                    mask: labels.iter().map(|&l| (l as usize == c) as u8).collect(),
                })
                .collect();
            debug_assert_eq!(labels.len(), hw);
            FrameTarget {
                annotated: true,
                instances,
            }
        })
        .collect();
    ClipTarget {
        height: map.height,
        width: map.width,
        frames,
    }
}

/// Maskiges `[T, 3, H, W]` of per-frame proposal stacks.
pub fn maskige_tensor(proposals: &[MaskStack], palette: &Palette) -> Result<Tensor> {
    let images = proposals
        .iter()
        .map(|s| maskige::encode_proposals(s, palette).map(|m| m.image))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&images)
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub palette: Palette,
    pub clips: Vec<Clip>,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let mpath = root.join(MANIFEST);
        let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: mpath.clone(),
            source: e,
        })?;
        let palette = Palette::default_palette(manifest.palette_capacity, manifest.seed, Some(&root.join(PALETTE)))?;
        let clips = map_indices(manifest.clips.len(), |i| load_clip(root, &manifest, &palette, i))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest,
            palette,
            clips,
        })
    }

    pub fn split(&self, split: Split) -> Vec<&Clip> {
        self.clips.iter().filter(|c| c.split == split).collect()
    }
}

fn load_clip(root: &Path, m: &Manifest, palette: &Palette, i: usize) -> Result<Clip> {
    let entry = &m.clips[i];
    let cd = clip_dir(root, &entry.name);
    let (h, w) = (m.height, m.width);
    let check = |path: &Path, dims: (usize, usize)| -> Result<()> {
        if dims != (w, h) {
            return Err(Error::Format(format!(
                "{} is {}x{}, manifest says {w}x{h}",
                path.display(),
                dims.0,
                dims.1
            )));
        }
        Ok(())
    };
    let mut frames = Vec::with_capacity(m.frames);
    let mut labels = Vec::with_capacity(m.frames * h * w);
    let mut proposals = Vec::with_capacity(m.frames);
    if entry.proposals.len() != m.frames {
        return Err(Error::Format(format!("clip {} lists {} proposal frames", entry.name, entry.proposals.len())));
    }
    for t in 0..m.frames {
        let fp = cd.join(format!("frame{t}.ppm"));
        let (fw, fh, rgb) = imageio::read_ppm(&fp)?;
        check(&fp, (fw, fh))?;
        frames.push(imageio::rgb_to_chw(w, h, &rgb));
        let lp = cd.join(format!("label{t}.pgm"));
        let (lw, lh, gray) = imageio::read_pgm(&lp)?;
        check(&lp, (lw, lh))?;
        labels.extend_from_slice(&gray);
        let paths: Vec<PathBuf> = (0..entry.proposals[t])
            .map(|k| cd.join(format!("proposal{t}_{k}.pgm")))
            .collect();
        proposals.push(if paths.is_empty() {
            MaskStack::empty(h, w)?
        } else {
            MaskStack::read_pgm_planes(&paths)?
        });
    }
    let audio = ctns::read(&cd.join("audio.ctns"))?;
    if audio.shape() != [m.frames, m.audio_dim] {
        return Err(Error::dim("dataset.audio", audio.shape(), &[m.frames, m.audio_dim]));
    }
    let semantic = SemanticMap::new(m.frames, h, w, m.classes, labels)?;
    Ok(Clip {
        name: entry.name.clone(),
        split: entry.split,
        input: ClipInput {
            frames: Tensor::stack(&frames)?,
            maskiges: maskige_tensor(&proposals, palette)?,
            audio,
        },
        target: target_from_semantic(&semantic),
        semantic,
        proposals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_small_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec::default();
        let m = write_dataset(dir.path(), &spec, 5).unwrap();
        assert_eq!(m.clips.iter().filter(|c| c.split == Split::Val).count(), 1);
        let ds = Dataset::load(dir.path()).unwrap();
        assert_eq!(ds.clips.len(), 5);
        let bank = ClassBank::new(&spec).unwrap();
        let clip = generate_clip(&spec, &bank, 2).unwrap();
        assert_eq!(ds.clips[2].semantic.labels, clip.semantic);
        assert_eq!(ds.clips[2].input.audio, clip.audio);
        assert_eq!(ds.clips[2].proposals, clip.proposals);
    }
}
