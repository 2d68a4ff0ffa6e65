//! Bilateral audio-visual attention: one pixel-audio similarity matrix, applied row-wise to
//! update pixels from audio and column-wise to update audio from pixels.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::config::FusionMode;
use crate::error::{Error, Result};
use crate::params::{Bound, Linear, ParamId, ParamStore};
use crate::tensor::{Tensor, Var};

const TEMPERATURE: f64 = 10_000.0;

/// Fixed 2-D sine/cosine encoding `[C, H, W]`: the first `C/2` channels encode the row
/// (1-based), the rest the column, with sin on even and cos on odd channels of each half.
pub fn sine_positional_encoding(h: usize, w: usize, c: usize) -> Result<Tensor> {
    if c == 0 || !c.is_multiple_of(2) {
        return Err(Error::Parameter(format!("sine encoding needs an even width, got {c}")));
    }
    let half = c / 2;
    let freq = |i: usize| TEMPERATURE.powf((2 * (i / 2)) as f64 / half as f64);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let (i, along_rows) = if ch < half { (ch, true) } else { (ch - half, false) };
        let div = freq(i);
        for y in 0..h {
            for x in 0..w {
                let pos = if along_rows { y + 1 } else { x + 1 } as f64 / div;
                out[(ch * h + y) * w + x] = if i % 2 == 0 { pos.sin() } else { pos.cos() };
            }
        }
    }
    Tensor::new([c, h, w], out)
}

/// Encoding laid out as `[H·W, C]` tokens.
pub fn sine_tokens(h: usize, w: usize, c: usize) -> Result<Tensor> {
    let pe = sine_positional_encoding(h, w, c)?;
    let hw = h * w;
    Tensor::new([hw, c], (0..hw * c).map(|i| pe.data()[(i % c) * hw + i / c]).collect())
}

/// `[T, C, H, W]` to `[T·H·W, C]` tokens.
pub fn to_tokens<'t>(x: Var<'t>) -> Result<Var<'t>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("expected [T, C, H, W], got {s:?}")));
    }
    x.permute(&[0, 2, 3, 1])?.reshape(&[s[0] * s[2] * s[3], s[1]])
}

/// Inverse of [`to_tokens`].
pub fn from_tokens<'t>(x: Var<'t>, t: usize, h: usize, w: usize) -> Result<Var<'t>> {
    let c = *x.shape().last().unwrap_or(&0);
    x.reshape(&[t, h, w, c])?.permute(&[0, 3, 1, 2])
}

#[derive(Clone, Copy, Debug)]
pub struct BfmWeights {
    pub query: Linear,
    pub key: Linear,
    pub value_audio: Linear,
    pub value_visual: Linear,
    pub residual_visual: Linear,
    pub residual_audio: Linear,
}

#[derive(Debug)]
pub struct Bilateral {
    pub weights: BfmWeights,
    pub audio_position: ParamId,
    mode: FusionMode,
    per_frame: bool,
    width: usize,
    similarity_evaluations: AtomicUsize,
}

impl Clone for Bilateral {
    fn clone(&self) -> Self {
        Bilateral {
            weights: self.weights,
            audio_position: self.audio_position,
            mode: self.mode,
            per_frame: self.per_frame,
            width: self.width,
            similarity_evaluations: AtomicUsize::new(self.similarity_evaluations()),
        }
    }
}

/// Token-level result of [`Bilateral::attend_detailed`]. The attention maps are row-stochastic
/// `[N, T]` (pixels over audio) and `[T, N]` (audio over pixels), absent when unused.
#[derive(Clone, Copy, Debug)]
pub struct Attended<'t> {
    pub pixels: Var<'t>,
    pub audio: Var<'t>,
    pub pixel_attention: Option<Var<'t>>,
    pub audio_attention: Option<Var<'t>>,
}

/// Fused pixel embeddings `[T, d, H_1, W_1]` and audio `[T, d]`.
#[derive(Clone, Copy, Debug)]
pub struct Fused<'t> {
    pub pixels: Var<'t>,
    pub audio: Var<'t>,
}

impl Bilateral {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        pixel_dim: usize,
        audio_dim: usize,
        width: usize,
        frames: usize,
        mode: FusionMode,
        per_frame: bool,
    ) -> Result<Self> {
        let weights = BfmWeights {
            query: Linear::new(store, "bfm.query", pixel_dim, width, false)?,
            key: Linear::new(store, "bfm.key", audio_dim, width, false)?,
            value_audio: Linear::new(store, "bfm.value_audio", audio_dim, width, false)?,
            value_visual: Linear::new(store, "bfm.value_visual", pixel_dim, width, false)?,
            residual_visual: Linear::new(store, "bfm.residual_visual", pixel_dim, width, true)?,
            residual_audio: Linear::new(store, "bfm.residual_audio", audio_dim, width, true)?,
        };
        let audio_position = store.uniform("bfm.audio_position", &[frames, audio_dim], 0.1)?;
        Ok(Bilateral {
            weights,
            audio_position,
            mode,
            per_frame,
            width,
            similarity_evaluations: AtomicUsize::new(0),
        })
    }

    pub fn mode(&self) -> FusionMode {
        self.mode
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Number of times the similarity matrix has been formed since construction.
    pub fn similarity_evaluations(&self) -> usize {
        self.similarity_evaluations.load(Ordering::Relaxed)
    }

    /// Token-level attention. `x: [N, C]` pixel tokens with positions attached, `f: [T, D]`
    /// audio tokens with positions attached, `frame_of[n]` the frame of token `n`
    /// (consulted only under per-frame attention). Returns `([N, d], [T, d])`.
    pub fn attend<'t>(
        &self,
        p: &Bound<'t>,
        x: Var<'t>,
        f: Var<'t>,
        frame_of: &[usize],
    ) -> Result<(Var<'t>, Var<'t>)> {
        let a = self.attend_detailed(p, x, f, frame_of)?;
        Ok((a.pixels, a.audio))
    }

    /// [`Bilateral::attend`] that also returns both attention maps.
    pub fn attend_detailed<'t>(
        &self,
        p: &Bound<'t>,
        x: Var<'t>,
        f: Var<'t>,
        frame_of: &[usize],
    ) -> Result<Attended<'t>> {
        let w = &self.weights;
        let (xs, fs) = (x.shape(), f.shape());
        if xs.len() != 2 || fs.len() != 2 || frame_of.len() != xs[0] {
            return Err(Error::dim("bilateral_attention", &xs, &fs));
        }
        let res_v = w.residual_visual.forward(p, x)?;
        let res_a = w.residual_audio.forward(p, f)?;
        if self.mode == FusionMode::None {
            return Ok(Attended {
                pixels: res_v,
                audio: res_a,
                pixel_attention: None,
                audio_attention: None,
            });
        }
        let q = w.query.forward(p, x)?;
        let k = w.key.forward(p, f)?;
        if q.shape()[1] != self.width || k.shape()[1] != self.width {
            return Err(Error::dim("bilateral_attention", &q.shape(), &k.shape()));
        }
        let s = q.matmul_nt(k)?.scale(1.0 / (self.width as f64).sqrt())?;
        self.similarity_evaluations.fetch_add(1, Ordering::Relaxed);
        let (n, t) = (xs[0], fs[0]);
        let keep_rows: Option<Vec<bool>> = self
            .per_frame
            .then(|| (0..n * t).map(|i| frame_of[i / t] == i % t).collect());
        let (mut out, mut pixel_attention, mut audio_attention) = ((res_v, res_a), None, None);
        if self.mode.updates_visual() {
            let a = match &keep_rows {
                Some(keep) => s.masked_softmax(keep)?,
                None => s.softmax(1)?,
            };
            out.0 = a.matmul(w.value_audio.forward(p, f)?)?.add(res_v)?;
            pixel_attention = Some(a);
        }
        if self.mode.updates_audio() {
            let st = s.transpose()?;
            let a = match &keep_rows {
                Some(_) => {
                    let keep: Vec<bool> = (0..t * n).map(|i| frame_of[i % n] == i / n).collect();
                    st.masked_softmax(&keep)?
                }
                None => st.softmax(1)?,
            };
            out.1 = a.matmul(w.value_visual.forward(p, x)?)?.add(res_a)?;
            audio_attention = Some(a);
        }
        Ok(Attended {
            pixels: out.0,
            audio: out.1,
            pixel_attention,
            audio_attention,
        })
    }

    /// Adds the sine encoding to `p1: [T, C, H_1, W_1]` and the learnable encoding to
    /// `audio: [T, D]`, then runs [`Bilateral::attend`].
    pub fn forward<'t>(&self, p: &Bound<'t>, p1: Var<'t>, audio: Var<'t>) -> Result<Fused<'t>> {
        let s = p1.shape();
        if s.len() != 4 {
            return Err(Error::Shape(format!("expected [T, C, H, W], got {s:?}")));
        }
        let (t, c, h, w) = (s[0], s[1], s[2], s[3]);
        let pos = p.constant(sine_tokens(h, w, c)?);
        let x = to_tokens(p1)?
            .reshape(&[t, h * w, c])?
            .add(pos)?
            .reshape(&[t * h * w, c])?;
        let f = audio.add(p.p(self.audio_position))?;
        let frame_of: Vec<usize> = (0..t * h * w).map(|i| i / (h * w)).collect();
        let (px, fa) = self.attend(p, x, f, &frame_of)?;
        Ok(Fused {
            pixels: from_tokens(px, t, h, w)?,
            audio: fa,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn sine_encoding_range_and_distinctness() {
        let pe = sine_positional_encoding(7, 7, 8).unwrap();
        assert_eq!(pe, sine_positional_encoding(7, 7, 8).unwrap());
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let tok = sine_tokens(7, 7, 8).unwrap();
        for a in 0..49 {
            for b in a + 1..49 {
                let (ra, rb) = (&tok.data()[a * 8..a * 8 + 8], &tok.data()[b * 8..b * 8 + 8]);
                assert!(ra.iter().zip(rb).any(|(x, y)| (x - y).abs() > 1e-9), "{a} {b}");
            }
        }
        assert!(matches!(sine_positional_encoding(2, 2, 3), Err(Error::Parameter(_))));
        assert_eq!(pe.data()[0], (1.0f64).sin());
        assert_eq!(pe.data()[49], (1.0f64).cos());
    }

    #[test]
    fn none_mode_skips_similarity() {
        let mut store = ParamStore::new(0);
        let bfm = Bilateral::new(&mut store, 4, 3, 4, 2, FusionMode::None, false).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let p1 = tape.constant(Tensor::from_fn([2, 4, 2, 2], |i| (i as f64 * 0.3).sin()));
        let a = tape.constant(Tensor::from_fn([2, 3], |i| i as f64));
        let out = bfm.forward(&p, p1, a).unwrap();
        assert_eq!(out.pixels.shape(), vec![2, 4, 2, 2]);
        assert_eq!(out.audio.shape(), vec![2, 4]);
        assert_eq!(bfm.similarity_evaluations(), 0);
    }
}
