//! Adam with bias correction.

use crate::error::{shape_err, NltError, Result};

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    /// Zero moments for parameter buffers of the given lengths.
    pub fn new(param_lens: &[usize], lr: f64) -> Self {
        Self::with_betas(param_lens, lr, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPS)
    }

    pub fn with_betas(param_lens: &[usize], lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState {
            step_count: 0,
            lr,
            beta1,
            beta2,
            eps,
            first_moment: param_lens.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: param_lens.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn first_moment(&self) -> &[Vec<f64>] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[Vec<f64>] {
        &self.second_moment
    }

    /// One Adam update of every buffer in `params` using the matching `grads`.
    pub fn step(&mut self, params: &mut [&mut [f32]], grads: &[&[f32]]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(shape_err!(
                "adam expects {} parameter buffers, got {} params and {} grads",
                self.first_moment.len(),
                params.len(),
                grads.len()
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let m = self.first_moment[i].len();
            if p.len() != m || g.len() != m {
                return Err(shape_err!(
                    "adam buffer {i}: state has {m} entries, param {} and grad {}",
                    p.len(),
                    g.len()
                ));
            }
        }
        if !(self.lr >= 0.0) {
            return Err(NltError::InvalidArgument(format!(
                "adam learning rate must be non-negative, got {}",
                self.lr
            )));
        }

        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut().zip(self.second_moment.iter_mut()))
        {
            for j in 0..p.len() {
                let gj = g[j] as f64;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                let delta = self.lr * m_hat / (v_hat.sqrt() + self.eps);
                p[j] = (p[j] as f64 - delta) as f32;
            }
        }
        Ok(())
    }
}
