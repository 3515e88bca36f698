//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use super::{Float, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Float> AdamState<T> {
    pub fn new<'a>(config: AdamConfig, shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let (m, v) = shapes
            .into_iter()
            .map(|s| (Tensor::zeros(s.to_vec()), Tensor::zeros(s.to_vec())))
            .unzip();
        AdamState {
            config,
            step: 0,
            m,
            v,
        }
    }

    /// Rebuilds a state from saved moments.
    pub fn from_parts(
        config: AdamConfig,
        step: u64,
        m: Vec<Tensor<T>>,
        v: Vec<Tensor<T>>,
    ) -> Result<Self> {
        if m.len() != v.len() || m.iter().zip(&v).any(|(a, b)| a.shape() != b.shape()) {
            return Err(TensorError::spec("adam", "moment buffers disagree"));
        }
        Ok(AdamState { config, step, m, v })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }

    /// Applies one update. `grads[i] == None` means a zero gradient.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Option<&Tensor<T>>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(TensorError::spec(
                "adam",
                format!(
                    "{} params, {} grads, {} moment buffers",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            ));
        }
        for (i, p) in params.iter().enumerate() {
            let want = self.m[i].shape();
            let bad = p.shape() != want || grads[i].is_some_and(|g| g.shape() != want);
            if bad {
                return Err(TensorError::ShapeMismatch {
                    op: "adam",
                    lhs: want.to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        if self.config.lr < 0.0 {
            return Err(TensorError::spec("adam", "negative learning rate"));
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let b1 = T::from_f64(c.beta1);
        let b2 = T::from_f64(c.beta2);
        let one = T::one();
        let lr = T::from_f64(c.lr);
        let eps = T::from_f64(c.eps);
        let bc1 = one - b1.powi(t);
        let bc2_sqrt = (one - b2.powi(t)).sqrt();
        let step_size = lr / bc1;
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let md = m.data_mut();
            let vd = v.data_mut();
            let pd = p.data_mut();
            for i in 0..pd.len() {
                let gi = g.map_or(T::zero(), |g| g.data()[i]);
                md[i] = b1 * md[i] + (one - b1) * gi;
                vd[i] = b2 * vd[i] + (one - b2) * gi * gi;
                let denom = vd[i].sqrt() / bc2_sqrt + eps;
                pd[i] -= step_size * md[i] / denom;
            }
        }
        Ok(())
    }
}
