use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::DenseMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Constant,
    Cosine,
}

impl std::str::FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Schedule::Constant),
            "cosine" => Ok(Schedule::Cosine),
            other => Err(Error::Validation(format!(
                "unknown schedule `{other}` (expected constant or cosine)"
            ))),
        }
    }
}

/// SGD with heavy-ball momentum and an optional cosine learning-rate decay.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    lr_max: f64,
    momentum: f64,
    weight_decay: f64,
    schedule: Schedule,
    step_index: usize,
    total_steps: usize,
    velocity: Vec<DenseMatrix>,
}

impl OptimizerState {
    pub fn new(
        lr_max: f64,
        momentum: f64,
        weight_decay: f64,
        schedule: Schedule,
        total_steps: usize,
        shapes: &[(usize, usize)],
    ) -> Result<Self> {
        if !(lr_max > 0.0 && lr_max.is_finite()) {
            return Err(Error::Validation(format!("learning rate {lr_max} must be > 0")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Validation(format!("momentum {momentum} outside [0, 1)")));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::Validation(format!("weight decay {weight_decay} must be >= 0")));
        }
        Ok(Self {
            lr_max,
            momentum,
            weight_decay,
            schedule,
            step_index: 0,
            total_steps,
            velocity: shapes.iter().map(|&(r, c)| DenseMatrix::zeros(r, c)).collect(),
        })
    }

    pub fn step_index(&self) -> usize {
        self.step_index
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn velocity(&self) -> &[DenseMatrix] {
        &self.velocity
    }

    pub fn learning_rate_at(&self, t: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr_max,
            Schedule::Cosine => {
                if self.total_steps == 0 {
                    return self.lr_max;
                }
                let frac = t.min(self.total_steps) as f64 / self.total_steps as f64;
                self.lr_max * 0.5 * (1.0 + (PI * frac).cos())
            }
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate_at(self.step_index)
    }

    /// `v <- mu v + g (+ wd w)`, `w <- w - lr(t) v`, then advances `t`.
    pub fn step(&mut self, params: &mut [&mut DenseMatrix], grads: &[DenseMatrix]) -> Result<()> {
        if params.len() != self.velocity.len() || grads.len() != self.velocity.len() {
            return Err(Error::len(
                "optimizer parameter count",
                self.velocity.len(),
                params.len().max(grads.len()),
            ));
        }
        let lr = self.learning_rate();
        for ((w, g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            if w.shape() != v.shape() || g.shape() != v.shape() {
                return Err(Error::dim("optimizer step", w.shape(), g.shape()));
            }
            for ((wv, &gv), vv) in w
                .values_mut()
                .iter_mut()
                .zip(g.values())
                .zip(v.values_mut())
            {
                *vv = self.momentum * *vv + gv + self.weight_decay * *wv;
                *wv -= lr * *vv;
            }
        }
        self.step_index += 1;
        Ok(())
    }
}

/// Shuffled minibatches of `0..n`; the last batch may be short.
pub fn minibatches<R: Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}
