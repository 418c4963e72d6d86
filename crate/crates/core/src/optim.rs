//! Gradient clipping and the AdamW parameter update.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm measured before any scaling.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> Result<f64> {
    if !max_norm.is_finite() || max_norm <= 0.0 {
        return Err(Error::invalid(
            "gradient clip threshold must be positive and finite",
        ));
    }
    let mut sum_sq = 0.0;
    for g in grads.iter() {
        for &x in g.data() {
            sum_sq += x * x;
        }
    }
    let norm = sum_sq.sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFinite {
            context: "gradient norm".into(),
        });
    }
    if norm > max_norm {
        let factor = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= factor;
            }
        }
    }
    Ok(norm)
}

/// AdamW with decoupled weight decay. Moment buffers are allocated on the
/// first step and keyed by parameter order, so every call must pass the
/// parameters in the same order with the same shapes.
pub struct AdamW {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    steps: u32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> AdamW {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            steps: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::invalid(format!(
                "optimizer got {} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() && !params.is_empty() {
            self.m = grads
                .iter()
                .map(|g| Tensor::zeros(g.rows(), g.cols()))
                .collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::invalid(format!(
                "optimizer state holds {} parameters but step got {}",
                self.m.len(),
                params.len()
            )));
        }
        self.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - self.beta2.powi(self.steps as i32);
        for (idx, (param, grad)) in params.iter_mut().zip(grads).enumerate() {
            if param.shape() != grad.shape() {
                return Err(Error::Shape {
                    op: "adamw step",
                    lhs: param.shape(),
                    rhs: grad.shape(),
                });
            }
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            if m.shape() != param.shape() {
                return Err(Error::Shape {
                    op: "adamw state",
                    lhs: m.shape(),
                    rhs: param.shape(),
                });
            }
            let p = param.data_mut();
            let g = grad.data();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..p.len() {
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * g[i];
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                p[i] -= self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * p[i]);
            }
            if !param.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("parameter {idx} after optimizer step"),
                });
            }
        }
        Ok(())
    }
}
