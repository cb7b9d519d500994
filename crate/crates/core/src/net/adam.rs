use serde::{Deserialize, Serialize};

use super::dense::{DenseNetwork, NetworkGrads};
use crate::error::{Error, Result};

pub const DEFAULT_STEP_SIZE: f64 = 2e-4;

/// Bias-corrected Adam, applied as gradient *ascent*.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(parameter_count: usize, step_size: f64) -> Self {
        Self {
            first_moment: vec![0.0; parameter_count],
            second_moment: vec![0.0; parameter_count],
            step: 0,
            step_size,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn for_network(net: &DenseNetwork, step_size: f64) -> Self {
        Self::new(net.parameter_count(), step_size)
    }

    /// Updates `params` in place along `+grads`.
    pub fn step_flat(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first_moment.len() {
            return Err(Error::Usage(format!(
                "Adam shapes differ: {} parameters, {} gradients, {} moments",
                params.len(),
                grads.len(),
                self.first_moment.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p += self.step_size * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

pub fn adam_step(net: &mut DenseNetwork, grads: &NetworkGrads, state: &mut AdamState) -> Result<()> {
    let mut params = net.flat_parameters();
    state.step_flat(&mut params, &grads.flat())?;
    net.set_flat_parameters(&params)
}
