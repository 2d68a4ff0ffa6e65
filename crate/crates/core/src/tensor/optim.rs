use super::Tensor;
use crate::error::{Error, Result};

/// AdamW with decoupled weight decay and bias correction. One moment slot per parameter.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Result<Self> {
        Self::with_betas(lr, weight_decay, 0.9, 0.999)
    }

    pub fn with_betas(lr: f64, weight_decay: f64, beta1: f64, beta2: f64) -> Result<Self> {
        if !(lr > 0.0) {
            return Err(Error::Parameter(format!("learning rate must be positive, got {lr}")));
        }
        if weight_decay < 0.0 || !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
            return Err(Error::Parameter(format!(
                "invalid AdamW coefficients wd={weight_decay} beta1={beta1} beta2={beta2}"
            )));
        }
        Ok(AdamW {
            lr,
            weight_decay,
            beta1,
            beta2,
            eps: 1e-8,
            steps: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update. A missing gradient is treated as zero.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<Tensor>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Contract(format!(
                "{} parameters but {} gradient slots",
                params.len(),
                grads.len()
            )));
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.second = self.first.clone();
        }
        self.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - self.beta2.powi(self.steps as i32);
        for (k, p) in params.iter_mut().enumerate() {
            let g = grads[k].as_ref().map(|g| g.data());
            if let Some(g) = g {
                if g.len() != p.numel() {
                    return Err(Error::dim("adamw", p.shape(), &[g.len()]));
                }
            }
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let gi = g.map_or(0.0, |g| g[i]);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *w -= self.lr * (m_hat / (v_hat.sqrt() + self.eps)) + self.lr * self.weight_decay * *w;
            }
        }
        Ok(())
    }
}
