//! Adam optimizer with bias correction. Moment buffers are kept in f64
//! regardless of the parameter precision, and are serializable for resume.

use adapt_tensor::Real;
use serde::{Deserialize, Serialize};

use crate::params::{ParamId, ParamSet};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Serializable optimizer state.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Adam {
    state: AdamState,
}

impl Adam {
    /// Fresh zeroed moments matching the parameter set.
    pub fn new<T: Real>(params: &ParamSet<T>) -> Adam {
        let m = params
            .ids()
            .map(|id| vec![0.0; params.value(id).numel()])
            .collect::<Vec<_>>();
        Adam {
            state: AdamState {
                t: 0,
                v: m.clone(),
                m,
            },
        }
    }

    /// Restore from serialized state, verifying buffer shapes.
    pub fn from_state<T: Real>(params: &ParamSet<T>, state: AdamState) -> Result<Adam, String> {
        if state.m.len() != params.len() || state.v.len() != params.len() {
            return Err(format!(
                "optimizer state has {} buffers, model has {} parameters",
                state.m.len(),
                params.len()
            ));
        }
        for (i, id) in params.ids().enumerate() {
            let n = params.value(id).numel();
            if state.m[i].len() != n || state.v[i].len() != n {
                return Err(format!(
                    "optimizer buffer {i} has wrong length for parameter {}",
                    params.name(id)
                ));
            }
        }
        Ok(Adam { state })
    }

    pub fn state(&self) -> &AdamState {
        &self.state
    }

    pub fn into_state(self) -> AdamState {
        self.state
    }

    /// One update: `grads` holds the per-parameter gradient (flattened, f64),
    /// aligned with the parameter set's id order.
    pub fn step<T: Real>(&mut self, params: &mut ParamSet<T>, grads: &[Vec<f64>], lr: f64) {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        self.state.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.state.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.state.t as i32);
        for (i, grad) in grads.iter().enumerate() {
            let id = ParamId(i);
            let m = &mut self.state.m[i];
            let v = &mut self.state.v[i];
            let data = params.value_mut(id).data_mut();
            assert_eq!(grad.len(), data.len());
            for j in 0..grad.len() {
                let g = grad[j];
                m[j] = BETA1 * m[j] + (1.0 - BETA1) * g;
                v[j] = BETA2 * v[j] + (1.0 - BETA2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                let update = lr * m_hat / (v_hat.sqrt() + EPSILON);
                data[j] = T::from_f64(Real::to_f64(data[j]) - update);
            }
        }
    }
}
