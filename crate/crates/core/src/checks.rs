//! Gradient-check suites: every differentiable op, the fusion module, the query decoder and
//! the full training loss on a micro model, each against central differences.

use std::str::FromStr;
use std::time::Instant;

use rand::seq::index::sample;
use rand::Rng as _;
use serde::Serialize;

use crate::bfm::Bilateral;
use crate::config::{FusionMode, QueryMode, RunConfig};
use crate::dataset::{maskige_tensor, target_from_semantic};
use crate::error::{Error, Result};
use crate::inference::SemanticMap;
use crate::losses::{total_loss, AdaSettings, ClipTarget, LossWeights};
use crate::maskige::Palette;
use crate::matching::Assignment;
use crate::model::{ClipInput, Model};
use crate::params::{Bound, ParamStore};
use crate::query_decoder::QueryDecoder;
use crate::rng::{self, Rng};
use crate::synth::{generate_clip, ClassBank, SynthSpec};
use crate::tensor::gradcheck::{CheckReport, REL_FLOOR};
use crate::tensor::{Tape, Tensor, Var};

/// Difference scheme, tolerance and relative-error floor of one check.
#[derive(Clone, Copy, Debug)]
pub struct Settings {
    /// Initial step.
    pub h: f64,
    /// Fourth-order stencil `(8(f₁ − f₋₁) − (f₂ − f₋₂)) / 12h` instead of `(f₁ − f₋₁) / 2h`.
    pub fourth_order: bool,
    /// The step shrinks tenfold while a stencil point changes a ReLU sign, down to this.
    pub min_h: f64,
    pub max_rel: f64,
    /// Denominator floor of the relative error; smaller gradients are judged absolutely.
    pub floor: f64,
}

/// Single operations: second-order differences, tolerance 1e-6.
pub const OP: Settings = Settings {
    h: 1e-5,
    fourth_order: false,
    min_h: 1e-5,
    max_rel: 1e-6,
    floor: REL_FLOOR,
};

/// Composed modules and the full loss: tolerance 1e-4. Roundoff of a difference quotient on a
/// loss near 30 is about `2e-11` at this step, far below the floor.
pub const COMPOSED: Settings = Settings {
    h: 1e-3,
    fourth_order: true,
    min_h: 1e-6,
    max_rel: 1e-4,
    floor: 1e-5,
};

/// Half-width of the jitter that moves parameters off ReLU kinks before a composed check.
pub const GENERIC_JITTER: f64 = 0.05;

/// Relative error with denominator `max(|a|, |n|, floor)`.
pub fn relative_error_floored(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Tensor,
    Bfm,
    Decoder,
    Loss,
    All,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tensor" => Ok(Suite::Tensor),
            "bfm" => Ok(Suite::Bfm),
            "decoder" => Ok(Suite::Decoder),
            "loss" => Ok(Suite::Loss),
            "all" => Ok(Suite::All),
            other => Err(Error::Config(format!("unknown gradcheck module {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    /// Share of checked coordinates within tolerance.
    pub within_tolerance: f64,
    pub coordinates: usize,
    /// Coordinates whose step had to shrink to stay on one ReLU piece.
    pub shrunk: usize,
    /// Analytic and numeric derivative at the worst coordinate.
    pub worst: (f64, f64),
    pub tolerance: f64,
    pub passed: bool,
    pub seconds: f64,
}

/// Outcome of [`check_inputs`].
#[derive(Clone, Debug, Default)]
pub struct Comparison {
    pub report: CheckReport,
    pub within: usize,
    pub shrunk: usize,
}

/// Compares the tape gradient of scalar `f` with finite differences on the listed inputs.
/// `sample_per_input` caps the number of coordinates checked per input.
pub fn check_inputs<F>(
    inputs: &[Tensor],
    settings: Settings,
    mut sample_per_input: Option<(usize, &mut Rng)>,
    f: F,
) -> Result<Comparison>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let (analytic, pattern) = {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let y = f(&tape, &vars)?;
        if y.value().numel() != 1 {
            return Err(Error::Contract("gradient check needs a scalar function".into()));
        }
        let pattern = tape.relu_pattern();
        let g = tape.backward(y)?;
        let grads: Vec<Tensor> = vars
            .iter()
            .zip(inputs)
            .map(|(v, t)| g.get(*v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
            .collect();
        (grads, pattern)
    };
    let eval = |work: &[Tensor]| -> Result<(f64, bool)> {
        let tape = Tape::new();
        let vars: Vec<Var> = work.iter().map(|t| tape.constant(t.clone())).collect();
        let y = f(&tape, &vars)?.item();
        Ok((y, tape.relu_pattern() == pattern))
    };
    let offsets: &[(f64, f64)] = if settings.fourth_order {
        &[(1.0, 8.0 / 12.0), (-1.0, -8.0 / 12.0), (2.0, -1.0 / 12.0), (-2.0, 1.0 / 12.0)]
    } else {
        &[(1.0, 0.5), (-1.0, -0.5)]
    };
    let mut work = inputs.to_vec();
    let mut out = Comparison::default();
    for k in 0..inputs.len() {
        let n = inputs[k].numel();
        let coords: Vec<usize> = match sample_per_input.as_mut() {
            Some((m, r)) if *m < n => {
                let mut c = sample(*r, n, *m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for i in coords {
            let orig = work[k].data()[i];
            let mut h = settings.h;
            let numeric = loop {
                let mut acc = 0.0;
                let mut same_piece = true;
                for &(step, weight) in offsets {
                    work[k].data_mut()[i] = orig + step * h;
                    let (y, same) = eval(&work)?;
                    acc += weight * y;
                    same_piece &= same;
                }
                work[k].data_mut()[i] = orig;
                if same_piece || h / 10.0 < settings.min_h {
                    break acc / h;
                }
                h /= 10.0;
                out.shrunk += 1;
            };
            let a = analytic[k].data()[i];
            let e = relative_error_floored(a, numeric, settings.floor);
            out.within += (e < settings.max_rel) as usize;
            out.report.merge(&CheckReport {
                max_rel_error: e,
                worst_index: i,
                analytic: a,
                numeric,
                coordinates: 1,
            });
        }
    }
    Ok(out)
}

/// Deterministic non-uniform weights used to reduce a tensor output to a scalar.
fn probe(shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |i| (1.3 * i as f64 + 0.7).sin() + 0.1)
}

/// `Σ probe ⊙ y`.
fn project<'t>(tape: &'t Tape, y: Var<'t>) -> Result<Var<'t>> {
    y.mul(tape.constant(probe(&y.shape())))?.sum()
}

fn uniform(r: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| r.random_range(lo..hi))
}

/// Values in `±[lo, hi]` with random signs.
fn away_from_zero(r: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = r.random_range(lo..hi);
        if r.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

type OpFn = for<'t> fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>;

fn op_cases(r: &mut Rng) -> Vec<(&'static str, Vec<Tensor>, OpFn)> {
    let u = |r: &mut Rng, s: &[usize]| uniform(r, s, -1.0, 1.0);
    let mut cases: Vec<(&'static str, Vec<Tensor>, OpFn)> = Vec::new();
    cases.push(("add_broadcast", vec![u(r, &[3, 4]), u(r, &[4])], |t, v| project(t, v[0].add(v[1])?)));
    cases.push(("sub", vec![u(r, &[2, 3]), u(r, &[2, 3])], |t, v| project(t, v[0].sub(v[1])?)));
    cases.push(("mul_broadcast", vec![u(r, &[2, 3, 2]), u(r, &[3, 2])], |t, v| project(t, v[0].mul(v[1])?)));
    cases.push(("div", vec![u(r, &[5]), away_from_zero(r, &[5], 0.5, 2.0)], |t, v| project(t, v[0].div(v[1])?)));
    cases.push(("scale_add_scalar", vec![u(r, &[4])], |t, v| project(t, v[0].scale(-1.7)?.add_scalar(0.3)?)));
    cases.push(("exp", vec![u(r, &[6])], |t, v| project(t, v[0].exp()?)));
    cases.push(("log", vec![uniform(r, &[6], 0.5, 2.0)], |t, v| project(t, v[0].log()?)));
    cases.push(("sigmoid", vec![uniform(r, &[6], -3.0, 3.0)], |t, v| project(t, v[0].sigmoid()?)));
    cases.push(("relu", vec![away_from_zero(r, &[8], 0.1, 1.0)], |t, v| project(t, v[0].relu()?)));
    cases.push(("softplus", vec![uniform(r, &[6], -3.0, 3.0)], |t, v| project(t, v[0].softplus()?)));
    cases.push(("sum", vec![u(r, &[2, 3])], |_, v| v[0].sum()));
    cases.push(("mean", vec![u(r, &[2, 3])], |_, v| v[0].exp()?.mean()));
    cases.push(("sum_axis", vec![u(r, &[2, 3, 4])], |t, v| project(t, v[0].sum_axis(1)?)));
    cases.push(("softmax_last", vec![u(r, &[3, 5])], |t, v| project(t, v[0].softmax(1)?)));
    cases.push(("softmax_middle", vec![u(r, &[2, 4, 3])], |t, v| project(t, v[0].softmax(1)?)));
    cases.push(("log_softmax", vec![u(r, &[3, 4])], |t, v| project(t, v[0].log_softmax(1)?)));
    cases.push(("softmax_cross_entropy", vec![uniform(r, &[4, 5], -3.0, 3.0)], |t, v| {
        let onehot = Tensor::from_fn([4, 5], |i| (i % 5 == (i / 5 * 2) % 5) as u8 as f64);
        v[0].log_softmax(1)?.mul(t.constant(onehot))?.sum()?.neg()
    }));
    cases.push(("masked_softmax", vec![u(r, &[2, 4])], |t, v| {
        let keep = [true, false, true, true, false, true, false, false];
        project(t, v[0].masked_softmax(&keep)?)
    }));
    cases.push(("matmul", vec![u(r, &[3, 4]), u(r, &[4, 2])], |_, v| v[0].matmul(v[1])?.sum()));
    cases.push(("matmul_batched", vec![u(r, &[2, 3, 4]), u(r, &[2, 4, 2])], |t, v| project(t, v[0].matmul(v[1])?)));
    cases.push(("matmul_shared", vec![u(r, &[2, 3, 4]), u(r, &[4, 5])], |t, v| project(t, v[0].matmul(v[1])?)));
    cases.push(("matmul_nt", vec![u(r, &[2, 3, 4]), u(r, &[2, 5, 4])], |t, v| project(t, v[0].matmul_nt(v[1])?)));
    cases.push(("permute", vec![u(r, &[2, 3, 4])], |t, v| project(t, v[0].permute(&[2, 0, 1])?)));
    cases.push(("transpose", vec![u(r, &[3, 4])], |t, v| project(t, v[0].transpose()?)));
    cases.push(("reshape", vec![u(r, &[2, 6])], |t, v| project(t, v[0].reshape(&[3, 4])?)));
    cases.push(("narrow", vec![u(r, &[3, 5])], |t, v| project(t, v[0].narrow(1, 1, 3)?)));
    cases.push(("index_select", vec![u(r, &[4, 3])], |t, v| project(t, v[0].index_select(0, &[2, 0, 2])?)));
    cases.push(("concat", vec![u(r, &[2, 3]), u(r, &[2, 2])], |t, v| project(t, Var::concat(&[v[0], v[1]], 1)?)));
    cases.push(("expand", vec![u(r, &[2, 1, 3])], |t, v| project(t, v[0].expand(1, 4)?)));
    cases.push(("conv2d_stride1", vec![u(r, &[2, 3, 5, 5]), u(r, &[4, 3, 3, 3]), u(r, &[4])], |t, v| {
        project(t, v[0].conv2d(v[1], Some(v[2]), 1)?)
    }));
    cases.push(("conv2d_stride2", vec![u(r, &[1, 2, 6, 6]), u(r, &[3, 2, 3, 3]), u(r, &[3])], |t, v| {
        project(t, v[0].conv2d(v[1], Some(v[2]), 2)?)
    }));
    cases.push(("conv2d_stem", vec![u(r, &[1, 3, 8, 8]), u(r, &[2, 3, 5, 5]), u(r, &[2])], |t, v| {
        project(t, v[0].conv2d(v[1], Some(v[2]), 4)?)
    }));
    cases.push(("global_avg_pool", vec![u(r, &[2, 3, 4, 4])], |t, v| project(t, v[0].global_avg_pool()?)));
    cases.push(("upsample_nearest2x", vec![u(r, &[1, 2, 3, 3])], |t, v| project(t, v[0].upsample_nearest2x()?)));
    cases.push(("upsample_bilinear", vec![u(r, &[2, 3, 3])], |t, v| project(t, v[0].upsample_bilinear(7, 5)?)));
    cases.push(("layer_norm", vec![u(r, &[3, 5]), u(r, &[5]), u(r, &[5])], |t, v| {
        project(t, v[0].layer_norm(v[1], v[2], 1e-5)?)
    }));
    cases.push(("cosine_similarity", vec![u(r, &[2, 4]), u(r, &[2, 4])], |_, v| v[0].cosine_similarity(v[1])));
    cases
}

/// Parameters shifted by `U(±GENERIC_JITTER)` so zero biases leave no pre-activation exactly
/// on a ReLU kink.
pub fn generic_point(values: &[Tensor], seed: u64) -> Vec<Tensor> {
    let mut r = rng::stream(seed, "gradcheck.generic");
    values
        .iter()
        .map(|v| {
            let d = v.data();
            Tensor::from_fn(v.shape().to_vec(), |i| d[i] + r.random_range(-GENERIC_JITTER..GENERIC_JITTER))
        })
        .collect()
}

fn timed(name: String, settings: Settings, f: impl FnOnce() -> Result<Comparison>) -> Result<CheckResult> {
    let start = Instant::now();
    let c = f()?;
    Ok(CheckResult {
        name,
        max_rel_error: c.report.max_rel_error,
        within_tolerance: c.within as f64 / c.report.coordinates.max(1) as f64,
        coordinates: c.report.coordinates,
        shrunk: c.shrunk,
        worst: (c.report.analytic, c.report.numeric),
        tolerance: settings.max_rel,
        passed: c.report.max_rel_error < settings.max_rel,
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn tensor_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut r = rng::stream(seed, "gradcheck.tensor");
    op_cases(&mut r)
        .into_iter()
        .map(|(name, inputs, f)| {
            timed(format!("tensor.{name}"), OP, || {
                check_inputs(&inputs, OP, None, f)
            })
        })
        .collect()
}

/// Runs `f` with the store's parameters replaced by the first `store.len()` inputs.
fn with_store<'t>(store: &ParamStore, tape: &'t Tape, v: &[Var<'t>]) -> Bound<'t> {
    Bound::from_vars(tape, v[..store.len()].to_vec())
}

pub fn bfm_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (mode, label) in [
        (FusionMode::Bilateral, "bilateral"),
        (FusionMode::VisualOnly, "visual_only"),
        (FusionMode::AudioOnly, "audio_only"),
    ] {
        for per_frame in [false, true] {
            let mut store = ParamStore::new(seed);
            let bfm = Bilateral::new(&mut store, 4, 3, 4, 2, mode, per_frame)?;
            let mut r = rng::stream(seed, "gradcheck.bfm");
            let mut inputs = generic_point(store.values(), seed);
            inputs.push(uniform(&mut r, &[2, 4, 2, 2], -1.0, 1.0));
            inputs.push(uniform(&mut r, &[2, 3], -1.0, 1.0));
            let name = format!("bfm.{label}{}", if per_frame { ".per_frame" } else { "" });
            out.push(timed(name, COMPOSED, || {
                check_inputs(&inputs, COMPOSED, None, |tape, v| {
                    let p = with_store(&store, tape, v);
                    let n = v.len();
                    let fused = bfm.forward(&p, v[n - 2], v[n - 1])?;
                    project(tape, fused.pixels)?.add(project(tape, fused.audio)?)
                })
            })?);
        }
    }
    Ok(out)
}

pub fn decoder_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (mode, label) in [(QueryMode::Add, "add"), (QueryMode::All, "all")] {
        let mut store = ParamStore::new(seed);
        let dec = QueryDecoder::new(&mut store, 6, 4, 2, 1, 2, mode)?;
        let mut r = rng::stream(seed, "gradcheck.decoder");
        let (t, c, d) = (2, 6, 4);
        let extra = vec![
            uniform(&mut r, &[t, d], -1.0, 1.0),
            uniform(&mut r, &[t, c, 8, 8], -1.0, 1.0),
            uniform(&mut r, &[t, c, 4, 4], -1.0, 1.0),
            uniform(&mut r, &[t, c, 2, 2], -1.0, 1.0),
            uniform(&mut r, &[t, c, 1, 1], -1.0, 1.0),
            uniform(&mut r, &[t, d, 8, 8], -1.0, 1.0),
        ];
        let mut inputs = generic_point(store.values(), seed);
        inputs.extend(extra);
        let n = store.len();
        let frozen = {
            let tape = Tape::new();
            let v: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
            let p = with_store(&store, &tape, &v);
            let levels = [v[n + 1], v[n + 2], v[n + 3], v[n + 4]];
            dec.forward(&p, v[n], &levels, v[n + 5], None)?.attention_masks
        };
        out.push(timed(format!("decoder.{label}"), COMPOSED, || {
            check_inputs(&inputs, COMPOSED, None, |tape, v| {
                let p = with_store(&store, tape, v);
                let levels = [v[n + 1], v[n + 2], v[n + 3], v[n + 4]];
                let o = dec.forward(&p, v[n], &levels, v[n + 5], Some(&frozen))?;
                let mut acc = tape.constant(Tensor::scalar(0.0));
                for pred in &o.predictions {
                    acc = acc
                        .add(project(tape, pred.class_logits)?)?
                        .add(project(tape, pred.mask_logits)?)?;
                }
                Ok(acc)
            })
        })?);
    }
    Ok(out)
}

/// Micro clip for the full-loss check: two frames at 32×32 with at least one sounding object.
pub fn micro_clip(config: &RunConfig, seed: u64) -> Result<(ClipInput, ClipTarget)> {
    let spec = SynthSpec {
        seed,
        frames: config.frames,
        height: config.height,
        width: config.width,
        classes: config.classes,
        audio_dim: config.audio_dim,
        noise: 0.05,
        perturb: 1,
    };
    let bank = ClassBank::new(&spec)?;
    let palette = Palette::generate(config.palette_capacity, seed)?;
    for i in 0..1000 {
        let clip = generate_clip(&spec, &bank, i)?;
        if clip.sounding.iter().all(|s| s.is_empty()) {
            continue;
        }
        let map = SemanticMap::new(spec.frames, spec.height, spec.width, spec.classes, clip.semantic.clone())?;
        let input = ClipInput {
            frames: clip.frames,
            maskiges: maskige_tensor(&clip.proposals, &palette)?,
            audio: clip.audio,
        };
        return Ok((input, target_from_semantic(&map)));
    }
    Err(Error::Generation("no clip with a sounding object".into()))
}

/// Full training loss of the micro model with matching and attention masks held fixed.
pub fn loss_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut cfg = RunConfig::micro();
    cfg.seed = seed;
    let mut model = Model::new(&cfg)?;
    let jittered = generic_point(model.store.values(), seed);
    model.store.values_mut().clone_from_slice(&jittered);
    let (input, target) = micro_clip(&cfg, seed)?;
    let weights = LossWeights::from_config(&cfg);
    let ada = AdaSettings::from_config(&cfg);
    let (masks, matches): (Vec<Vec<bool>>, Vec<Vec<Assignment>>) = {
        let tape = Tape::new();
        let p = model.store.bind(&tape);
        let out = model.forward(&p, &input, None)?;
        let loss = total_loss(&out.decoder.predictions, &target, &weights, &ada, None)?;
        (out.decoder.attention_masks, loss.matches)
    };
    let inputs = model.store.values().to_vec();
    let mut r = rng::stream(seed, "gradcheck.loss");
    let result = timed("loss.micro_model".into(), COMPOSED, || {
        check_inputs(&inputs, COMPOSED, Some((32, &mut r)), |tape, v| {
            let p = Bound::from_vars(tape, v.to_vec());
            let out = model.forward(&p, &input, Some(&masks))?;
            Ok(total_loss(&out.decoder.predictions, &target, &weights, &ada, Some(&matches))?.total)
        })
    })?;
    Ok(vec![result])
}

pub fn run(suite: Suite, seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    if matches!(suite, Suite::Tensor | Suite::All) {
        out.extend(tensor_suite(seed)?);
    }
    if matches!(suite, Suite::Bfm | Suite::All) {
        out.extend(bfm_suite(seed)?);
    }
    if matches!(suite, Suite::Decoder | Suite::All) {
        out.extend(decoder_suite(seed)?);
    }
    if matches!(suite, Suite::Loss | Suite::All) {
        out.extend(loss_suite(seed)?);
    }
    Ok(out)
}
