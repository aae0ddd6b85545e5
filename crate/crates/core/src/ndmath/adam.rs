use crate::error::{Error, Result};
use crate::ndmath::Matrix;

/// Adam hyperparameters shared by every tensor of a model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment accumulators for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Matrix,
    pub v: Matrix,
}

impl AdamState {
    pub fn new(config: AdamConfig, rows: usize, cols: usize) -> Self {
        AdamState {
            config,
            step: 0,
            m: Matrix::zeros(rows, cols),
            v: Matrix::zeros(rows, cols),
        }
    }

    pub fn for_param(config: AdamConfig, param: &Matrix) -> Self {
        AdamState::new(config, param.rows(), param.cols())
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut Matrix, grads: &Matrix) -> Result<()> {
        if params.shape() != grads.shape() {
            return Err(Error::dims("adam_step", params.shape(), grads.shape()));
        }
        if params.shape() != self.m.shape() {
            return Err(Error::dims("adam_step state", params.shape(), self.m.shape()));
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let p = params.data_mut();
        let m = self.m.data_mut();
        let v = self.v.data_mut();
        for i in 0..p.len() {
            let g = grads.data()[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
        }
        Ok(())
    }
}

/// Functional form: returns updated params and state.
pub fn adam_step(params: &Matrix, grads: &Matrix, state: &AdamState) -> Result<(Matrix, AdamState)> {
    let mut p = params.clone();
    let mut s = state.clone();
    s.step(&mut p, grads)?;
    Ok((p, s))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let p = Matrix::filled(2, 2, 0.5);
        let mut s = AdamState::for_param(AdamConfig::default(), &p);
        s.m.fill(1.0);
        s.v.fill(1.0);
        let (p2, s2) = adam_step(&p, &Matrix::zeros(2, 2), &s).unwrap();
        assert!(s2.m.data().iter().all(|&x| (x - 0.9).abs() < 1e-15));
        assert!(s2.v.data().iter().all(|&x| (x - 0.999).abs() < 1e-15));
        assert_eq!(s2.step, 1);

        let fresh = AdamState::for_param(AdamConfig::default(), &p);
        let (p3, _) = adam_step(&p, &Matrix::zeros(2, 2), &fresh).unwrap();
        assert_eq!(p3, p);
        assert_ne!(p2, p);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let p = Matrix::filled(1, 1, 2.0);
        let s = AdamState::for_param(AdamConfig::default(), &p);
        let (p2, s2) = adam_step(&p, &Matrix::filled(1, 1, 1.0), &s).unwrap();
        // m_hat = 1, v_hat = 1 -> delta = lr / (1 + eps)
        let expected = 2.0 - 0.001 / (1.0 + 1e-8);
        assert!((p2.get(0, 0) - expected).abs() < 1e-15);
        assert_eq!(s2.step, 1);
    }

    #[test]
    fn deterministic_and_shape_checked() {
        let p = Matrix::filled(2, 3, 0.1);
        let g = Matrix::filled(2, 3, -0.3);
        let s = AdamState::for_param(AdamConfig::default(), &p);
        assert_eq!(adam_step(&p, &g, &s).unwrap(), adam_step(&p, &g, &s).unwrap());
        assert!(matches!(
            adam_step(&p, &Matrix::zeros(3, 2), &s),
            Err(Error::Dimension { .. })
        ));
    }
}
