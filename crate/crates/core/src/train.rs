//! Deterministic single-threaded training loop.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::Clip;
use crate::error::{Error, Result};
use crate::losses::{total_loss, AdaSettings, Breakdown, LossWeights};
use crate::model::Model;
use crate::rng;
use crate::tensor::{AdamW, Tape, Tensor};

/// One JSON line of the training log; components are λ-weighted batch means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub iteration: usize,
    pub cls: f64,
    pub mask: f64,
    pub ada: f64,
    pub total: f64,
}

impl LogLine {
    fn new(iteration: usize, b: &Breakdown) -> Self {
        LogLine {
            iteration,
            cls: b.cls,
            mask: b.mask,
            ada: b.ada,
            total: b.total,
        }
    }
}

/// Endless reshuffled pass over `n` items drawn from a named stream.
struct Sampler {
    rng: rng::Rng,
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    fn new(seed: u64, n: usize) -> Self {
        Sampler {
            rng: rng::stream(seed, "train.order"),
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Loss of one batch and its gradients, one slot per parameter.
pub fn batch_gradients(model: &Model, clips: &[&Clip]) -> Result<(Breakdown, Vec<Option<Tensor>>)> {
    let cfg = &model.config;
    let weights = LossWeights::from_config(cfg);
    let ada = AdaSettings::from_config(cfg);
    let tape = Tape::new();
    let p = model.store.bind(&tape);
    let mut acc = tape.constant(Tensor::scalar(0.0));
    let mut breakdown = Breakdown::default();
    let scale = 1.0 / clips.len().max(1) as f64;
    for clip in clips {
        let out = model.forward(&p, &clip.input, None)?;
        let target = clip.target.clone().with_supervision(cfg.supervision);
        let loss = total_loss(&out.decoder.predictions, &target, &weights, &ada, None)?;
        breakdown.accumulate(&loss.breakdown.scaled(scale));
        acc = acc.add(loss.total.scale(scale)?)?;
    }
    let grads = tape.backward(acc)?;
    Ok((breakdown, p.gradients(&grads)))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<LogLine>,
}

/// Trains a freshly initialised model on `clips`, calling `sink` for every logged line.
pub fn train(config: &RunConfig, clips: &[&Clip], mut sink: impl FnMut(&LogLine)) -> Result<TrainOutcome> {
    let mut model = Model::new(config)?;
    if clips.is_empty() {
        return Err(Error::Config("no training clips".into()));
    }
    for c in clips {
        model.check_input(&c.input)?;
    }
    let mut opt = AdamW::new(config.lr, config.weight_decay)?;
    let mut sampler = Sampler::new(config.seed, clips.len());
    let mut log = Vec::new();
    let mut last = Breakdown::default();
    for it in 0..config.iterations {
        let batch: Vec<&Clip> = (0..config.batch_size).map(|_| clips[sampler.next()]).collect();
        let (breakdown, grads) = batch_gradients(&model, &batch).map_err(|e| match e {
            Error::NonFinite { op } => Error::Diverged {
                iteration: it,
                breakdown: format!("{op} produced a non-finite value; previous losses {last:?}"),
            },
            other => other,
        })?;
        if !breakdown.total.is_finite() {
            return Err(Error::Diverged {
                iteration: it,
                breakdown: format!("{breakdown:?}"),
            });
        }
        if it % config.log_every == 0 || it + 1 == config.iterations {
            let line = LogLine::new(it, &breakdown);
            sink(&line);
            log.push(line);
        }
        opt.step(model.store.values_mut(), &grads)?;
        if model.store.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                iteration: it,
                breakdown: format!("parameters non-finite after update; losses {breakdown:?}"),
            });
        }
        last = breakdown;
    }
    Ok(TrainOutcome { model, log })
}
