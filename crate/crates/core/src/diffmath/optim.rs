use serde::{Deserialize, Serialize};

use super::{Tensor, TensorError};

/// Stochastic gradient descent with classical (heavy-ball) momentum:
/// `v ← momentum·v + g`, then `p ← p − lr·v`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    /// Update `params` in place. Velocity buffers are zero-initialised on the
    /// first call and must keep matching shapes afterwards.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<(), TensorError> {
        if params.len() != grads.len() {
            return Err(TensorError::ShapeMismatch {
                op: "sgd_step",
                node: 0,
                detail: format!("{} params, {} grads", params.len(), grads.len()),
            });
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(TensorError::ShapeMismatch {
                op: "sgd_step",
                node: 0,
                detail: format!("{} velocity buffers, {} params", self.velocity.len(), params.len()),
            });
        }
        for (i, ((p, g), v)) in params.iter().zip(grads).zip(&self.velocity).enumerate() {
            if p.shape() != g.shape() || p.shape() != v.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "sgd_step",
                    node: i,
                    detail: format!("param {:?}, grad {:?}, velocity {:?}", p.shape(), g.shape(), v.shape()),
                });
            }
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = self.momentum * *vv + gv;
                *pv -= self.learning_rate * *vv;
            }
        }
        Ok(())
    }
}
