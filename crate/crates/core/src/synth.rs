//! Synthetic audio-visual clips: coloured shapes on linear trajectories, a per-frame subset
//! of which is sounding. Audio is the sum of the sounding classes' signatures plus bounded
//! noise; proposals are jittered masks of every visible object, sounding or not.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::maskige::MaskStack;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub audio_dim: usize,
    /// Upper bound on the audio noise norm.
    pub noise: f64,
    /// Largest proposal dilation/erosion radius in pixels.
    pub perturb: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 0,
            frames: 3,
            height: 32,
            width: 32,
            classes: 3,
            audio_dim: 16,
            noise: 0.05,
            perturb: 2,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(32) || !self.width.is_multiple_of(32) {
            return Err(Error::Config(format!(
                "clip size {}x{} must be a positive multiple of 32",
                self.height, self.width
            )));
        }
        if self.frames == 0 || self.classes == 0 || self.classes > 255 {
            return Err(Error::Config("need 1..=255 classes and at least one frame".into()));
        }
        if self.classes > self.audio_dim {
            return Err(Error::Config(format!(
                "{} orthogonal signatures do not fit audio width {}",
                self.classes, self.audio_dim
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise level must be >= 0, got {}", self.noise)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Rectangle,
    Disk,
    Triangle,
}

/// Shape drawn for class `c` (1-based).
pub fn shape_of_class(c: usize) -> ShapeKind {
    [ShapeKind::Rectangle, ShapeKind::Disk, ShapeKind::Triangle][(c - 1) % 3]
}

/// Per-class colours and orthonormal audio signatures shared by every clip of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassBank {
    pub colors: Vec<[f64; 3]>,
    /// `[K, D]`, rows orthonormal.
    pub signatures: Tensor,
}

impl ClassBank {
    pub fn new(spec: &SynthSpec) -> Result<Self> {
        spec.validate()?;
        let (k, d) = (spec.classes, spec.audio_dim);
        let mut r = rng::stream(spec.seed, "synth.colors");
        let offset: f64 = r.random();
        let colors = (0..k)
            .map(|c| hsv((offset + c as f64 / k as f64).fract(), 0.85, 0.95))
            .collect();
        let mut r = rng::stream(spec.seed, "synth.signatures");
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(k);
        while rows.len() < k {
            let mut v: Vec<f64> = (0..d).map(|_| r.sample(StandardNormal)).collect();
            for u in &rows {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
            }
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if n > 1e-6 {
                rows.push(v.into_iter().map(|a| a / n).collect());
            }
        }
        Ok(ClassBank {
            colors,
            signatures: Tensor::new([k, d], rows.concat())?,
        })
    }

    pub fn signature(&self, class: usize) -> &[f64] {
        let d = self.signatures.shape()[1];
        &self.signatures.data()[(class - 1) * d..class * d]
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match i as i64 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticClip {
    /// `[T, 3, H, W]`.
    pub frames: Tensor,
    /// `[T, D]`.
    pub audio: Tensor,
    /// `T×H×W` labels, 0 = background.
    pub semantic: Vec<u8>,
    /// Sounding classes per frame, ascending.
    pub sounding: Vec<Vec<usize>>,
    /// Visible-but-silent objects are included.
    pub proposals: Vec<MaskStack>,
}

struct Object {
    class: usize,
    kind: ShapeKind,
    size: f64,
    pos: (f64, f64),
    vel: (f64, f64),
    sounding: Vec<bool>,
}

impl Object {
    fn covers(&self, t: usize, y: usize, x: usize) -> bool {
        let cx = self.pos.0 + self.vel.0 * t as f64;
        let cy = self.pos.1 + self.vel.1 * t as f64;
        let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
        let r = self.size;
        match self.kind {
            ShapeKind::Rectangle => dx.abs() <= r && dy.abs() <= 0.7 * r,
            ShapeKind::Disk => dx * dx + dy * dy <= r * r,
            // apex up, base at dy = r
            ShapeKind::Triangle => dy <= r && dy >= -r && dx.abs() <= (dy + r) / 2.0,
        }
    }
}

/// Sounding pattern over `t` frames: every run lasts at least two frames (or the whole clip
/// when shorter).
fn sounding_pattern(r: &mut Rng, t: usize) -> Vec<bool> {
    let min_run = t.min(2);
    let u: f64 = r.random();
    if u < 0.15 {
        return vec![false; t];
    }
    if u < 0.6 || t <= min_run {
        return vec![true; t];
    }
    let len = r.random_range(min_run..=t);
    let start = r.random_range(0..=t - len);
    (0..t).map(|i| i >= start && i < start + len).collect()
}

fn morph(mask: &[bool], h: usize, w: usize, radius: isize) -> Vec<bool> {
    if radius == 0 {
        return mask.to_vec();
    }
    let grow = radius > 0;
    let r = radius.unsigned_abs() as isize;
    let mut out = vec![false; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut hit = !grow;
            'scan: for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y + dy, x + dx);
                    let v = yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize
                        && mask[(yy * w as isize + xx) as usize];
                    if grow && v {
                        hit = true;
                        break 'scan;
                    }
                    if !grow && !v {
                        hit = false;
                        break 'scan;
                    }
                }
            }
            out[(y * w as isize + x) as usize] = hit;
        }
    }
    out
}

/// Clip `index` of a dataset; depends only on `(spec, index)`.
pub fn generate_clip(spec: &SynthSpec, bank: &ClassBank, index: usize) -> Result<SyntheticClip> {
    spec.validate()?;
    let (t_len, h, w, k, d) = (spec.frames, spec.height, spec.width, spec.classes, spec.audio_dim);
    let hw = h * w;
    let mut r = rng::stream(spec.seed, &format!("synth.clip{index}"));
    let n_obj = r.random_range(1..=k.min(3));
    let mut classes: Vec<usize> = (1..=k).collect();
    classes.shuffle(&mut r);
    let side = h.min(w) as f64;
    let objects: Vec<Object> = classes[..n_obj]
        .iter()
        .map(|&class| {
            let size = side * r.random_range(0.14..0.24);
            let margin = size + 1.0;
            let pos = (
                r.random_range(margin..w as f64 - margin),
                r.random_range(margin..h as f64 - margin),
            );
            let speed = side * 0.05;
            let vel = (r.random_range(-speed..speed), r.random_range(-speed..speed));
            Object {
                class,
                kind: shape_of_class(class),
                size,
                pos,
                vel,
                sounding: sounding_pattern(&mut r, t_len),
            }
        })
        .collect();

    let background: f64 = r.random_range(0.05..0.35);
    let mut frames = vec![0.0; t_len * 3 * hw];
    let mut semantic = vec![0u8; t_len * hw];
    let mut proposals = Vec::with_capacity(t_len);
    let mut sounding = Vec::with_capacity(t_len);
    for t in 0..t_len {
        // later objects occlude earlier ones
        let mut owner: Vec<Option<usize>> = vec![None; hw];
        for (oi, o) in objects.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    if o.covers(t, y, x) {
                        owner[y * w + x] = Some(oi);
                    }
                }
            }
        }
        for p in 0..hw {
            let color = match owner[p] {
                Some(oi) => bank.colors[objects[oi].class - 1],
                None => [background; 3],
            };
            for c in 0..3 {
                let jitter: f64 = r.random_range(-0.03..0.03);
                frames[(t * 3 + c) * hw + p] = (color[c] + jitter).clamp(0.0, 1.0);
            }
            if let Some(oi) = owner[p] {
                if objects[oi].sounding[t] {
                    semantic[t * hw + p] = objects[oi].class as u8;
                }
            }
        }
        let mut planes: Vec<Vec<bool>> = Vec::new();
        for oi in 0..objects.len() {
            let visible: Vec<bool> = owner.iter().map(|o| *o == Some(oi)).collect();
            if !visible.iter().any(|&v| v) {
                continue;
            }
            let p = spec.perturb as isize;
            let radius = if p > 0 { r.random_range(-(p as i64)..=p as i64) as isize } else { 0 };
            let jittered = morph(&visible, h, w, radius);
            planes.push(if jittered.iter().any(|&v| v) { jittered } else { visible });
        }
        planes.shuffle(&mut r);
        proposals.push(MaskStack::from_planes(h, w, &planes)?);
        let mut s: Vec<usize> = objects
            .iter()
            .filter(|o| o.sounding[t])
            .map(|o| o.class)
            .collect();
        s.sort_unstable();
        sounding.push(s);
    }

    let mut audio = vec![0.0; t_len * d];
    for t in 0..t_len {
        let row = &mut audio[t * d..(t + 1) * d];
        for &c in &sounding[t] {
            row.iter_mut().zip(bank.signature(c)).for_each(|(a, s)| *a += s);
        }
        if spec.noise > 0.0 {
            let v: Vec<f64> = (0..d).map(|_| r.sample(StandardNormal)).collect();
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
            let scale = spec.noise * r.random::<f64>() / n;
            row.iter_mut().zip(&v).for_each(|(a, b)| *a += scale * b);
        }
    }
    Ok(SyntheticClip {
        frames: Tensor::new([t_len, 3, h, w], frames)?,
        audio: Tensor::new([t_len, d], audio)?,
        semantic,
        sounding,
        proposals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn signatures_are_orthonormal() {
        let bank = ClassBank::new(&SynthSpec::default()).unwrap();
        for a in 1..=3 {
            for b in 1..=3 {
                let dot: f64 = bank.signature(a).iter().zip(bank.signature(b)).map(|(x, y)| x * y).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn semantics_follow_sounding() {
        let spec = SynthSpec::default();
        let bank = ClassBank::new(&spec).unwrap();
        for i in 0..20 {
            let clip = generate_clip(&spec, &bank, i).unwrap();
            let hw = spec.height * spec.width;
            for t in 0..spec.frames {
                for &l in &clip.semantic[t * hw..(t + 1) * hw] {
                    assert!(l == 0 || clip.sounding[t].contains(&(l as usize)));
                }
            }
            assert_eq!(clip, generate_clip(&spec, &bank, i).unwrap());
        }
    }

    #[test]
    fn morphology() {
        let mut m = vec![false; 25];
        m[12] = true;
        assert_eq!(morph(&m, 5, 5, 1).iter().filter(|&&v| v).count(), 9);
        assert_eq!(morph(&m, 5, 5, -1).iter().filter(|&&v| v).count(), 0);
    }
}
