use crate::error::{NumericError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay, applied as `p -= lr * weight_decay * p`.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Adam moments for an ordered list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        let zeros = |p: &Tensor| Tensor::zeros(p.shape());
        Self {
            config,
            first: params.iter().map(zeros).collect(),
            second: params.iter().map(zeros).collect(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(NumericError::Invalid {
                op: "adam_step",
                msg: format!(
                    "{} params, {} grads, state tracks {}",
                    params.len(),
                    grads.len(),
                    self.first.len()
                ),
            });
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(NumericError::Shape {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            let (pd, gd) = (p.data_mut(), g.data());
            let (md, vd) = (m.data_mut(), v.data_mut());
            for j in 0..pd.len() {
                md[j] = beta1 * md[j] + (1.0 - beta1) * gd[j];
                vd[j] = beta2 * vd[j] + (1.0 - beta2) * gd[j] * gd[j];
                let mhat = md[j] / c1;
                let vhat = vd[j] / c2;
                pd[j] -= lr * (mhat / (vhat.sqrt() + eps) + weight_decay * pd[j]);
            }
            if !p.is_finite() {
                return Err(NumericError::NonFinite { op: "adam_step" });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut params = vec![Tensor::vector(vec![0.5, -1.5]).unwrap()];
        let before = params.clone();
        let mut st = AdamState::new(AdamConfig::with_lr(0.1), &params);
        st.step(&mut params, &[Tensor::zeros(&[2])]).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut params = vec![Tensor::scalar(2.0).unwrap()];
        let mut st = AdamState::new(AdamConfig::with_lr(0.1), &params);
        st.step(&mut params, &[Tensor::scalar(1.0).unwrap()])
            .unwrap();
        // m̂ = v̂ = 1, so the step is lr / (1 + eps).
        assert!((params[0].item() - (2.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_shrinks_without_gradient() {
        let mut params = vec![Tensor::vector(vec![2.0, -4.0]).unwrap()];
        let cfg = AdamConfig {
            weight_decay: 0.5,
            ..AdamConfig::with_lr(0.1)
        };
        let mut st = AdamState::new(cfg, &params);
        st.step(&mut params, &[Tensor::zeros(&[2])]).unwrap();
        assert_eq!(params[0].data(), &[2.0 * 0.95, -4.0 * 0.95]);
    }

    #[test]
    fn deterministic_from_cloned_state() {
        let params = vec![Tensor::vector(vec![0.3, 0.1, -0.2]).unwrap()];
        let grads = vec![Tensor::vector(vec![0.7, -0.4, 1e-3]).unwrap()];
        let st = AdamState::new(AdamConfig::default(), &params);
        let (mut p1, mut p2) = (params.clone(), params.clone());
        let (mut s1, mut s2) = (st.clone(), st);
        s1.step(&mut p1, &grads).unwrap();
        s2.step(&mut p2, &grads).unwrap();
        let bits = |p: &[Tensor]| p[0].data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&p1), bits(&p2));
        assert_eq!(s1, s2);
    }

    #[test]
    fn shape_mismatch() {
        let mut params = vec![Tensor::zeros(&[2])];
        let mut st = AdamState::new(AdamConfig::default(), &params);
        let err = st.step(&mut params, &[Tensor::zeros(&[3])]).unwrap_err();
        assert!(matches!(err, NumericError::Shape { .. }));
    }
}
