use serde::{Deserialize, Serialize};

use super::{DiffError, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter first and second moment estimates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let first: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            second: first.clone(),
            first,
            step: 0,
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn update(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[Tensor],
        config: &AdamConfig,
    ) -> Result<(), DiffError> {
        if params.len() != grads.len() || params.len() != self.first.len() {
            return Err(DiffError::ParamCount {
                params: params.len(),
                grads: grads.len(),
                moments: self.first.len(),
            });
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(DiffError::ShapeMismatch {
                    op: "adam_step",
                    shapes: vec![p.shape().to_vec(), g.shape().to_vec(), m.shape().to_vec()],
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - config.beta1.powi(t);
        let bc2 = 1.0 - config.beta2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            let pd = p.data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (i, &gv) in g.data().iter().enumerate() {
                md[i] = config.beta1 * md[i] + (1.0 - config.beta1) * gv;
                vd[i] = config.beta2 * vd[i] + (1.0 - config.beta2) * gv * gv;
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                pd[i] -= config.lr * m_hat / (v_hat.sqrt() + config.eps);
            }
        }
        Ok(())
    }
}

/// Global L2 norm across all tensors.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::squared_norm).sum::<f64>().sqrt()
}

/// Rescale `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.scale_in_place(s));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_leaves_small_gradients() {
        let mut g = vec![Tensor::row(vec![3.0, 4.0])];
        assert_eq!(clip_global_norm(&mut g, 10.0), 5.0);
        assert_eq!(g[0].data(), &[3.0, 4.0]);
    }

    #[test]
    fn clip_scales_large_gradients() {
        let mut g = vec![Tensor::row(vec![3.0, 4.0])];
        clip_global_norm(&mut g, 2.5);
        assert_eq!(g[0].data(), &[1.5, 2.0]);
    }

    #[test]
    fn clip_zero_and_empty() {
        let mut g = vec![Tensor::row(vec![0.0, 0.0])];
        clip_global_norm(&mut g, 1.0);
        assert_eq!(g[0].data(), &[0.0, 0.0]);
        let mut empty: Vec<Tensor> = Vec::new();
        assert_eq!(clip_global_norm(&mut empty, 1.0), 0.0);
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = Tensor::row(vec![1.0, -2.0]);
        let mut st = AdamState::new([&p]);
        st.update(&mut [&mut p], &[Tensor::zeros(&[1, 2])], &AdamConfig::default())
            .unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_lr_still_updates_moments() {
        let mut p = Tensor::scalar(1.0);
        let mut st = AdamState::new([&p]);
        st.update(&mut [&mut p], &[Tensor::scalar(2.0)], &AdamConfig::with_lr(0.0))
            .unwrap();
        assert_eq!(p.item(), 1.0);
        assert!((st.first[0].item() - 0.2).abs() < 1e-15);
        assert!((st.second[0].item() - 0.004).abs() < 1e-15);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m = 0.1, v = 0.001; m_hat = 1, v_hat = 1 -> 1 - 0.1 * 1/(1 + 1e-8)
        let mut p = Tensor::scalar(1.0);
        let mut st = AdamState::new([&p]);
        st.update(&mut [&mut p], &[Tensor::scalar(1.0)], &AdamConfig::with_lr(0.1))
            .unwrap();
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((p.item() - expected).abs() < 1e-12);
        assert!((p.item() - 0.9).abs() < 1e-8);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = Tensor::row(vec![1.0, 2.0]);
        let mut st = AdamState::new([&p]);
        let err = st.update(&mut [&mut p], &[Tensor::zeros(&[2, 1])], &AdamConfig::default());
        assert!(err.is_err());
        assert_eq!(st.step, 0);
    }
}
