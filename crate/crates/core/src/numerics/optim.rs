use super::Tensor;
use crate::error::{Error, Result};

/// Momentum buffers for [`Sgd`], one per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<Tensor>,
}

impl OptimizerState {
    pub fn zeros_like(params: &[&Tensor]) -> Self {
        OptimizerState {
            velocity: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }
}

/// SGD with classical momentum: `v <- mu*v + g; p <- p - lr*v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    pub state: OptimizerState,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64, params: &[&Tensor]) -> Result<Self> {
        if !(learning_rate >= 0.0) || !learning_rate.is_finite() {
            return Err(Error::InvalidArgument(format!("learning rate {learning_rate} must be >= 0")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!("momentum {momentum} must be in [0, 1)")));
        }
        Ok(Sgd {
            learning_rate,
            momentum,
            state: OptimizerState::zeros_like(params),
        })
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        const OP: &str = "sgd_step";
        if params.len() != self.state.velocity.len() || grads.len() != params.len() {
            return Err(Error::shape(
                OP,
                "parameter count",
                self.state.velocity.len(),
                (params.len(), grads.len()),
            ));
        }
        for ((p, g), v) in params.iter().zip(grads).zip(&self.state.velocity) {
            g.expect_shape(OP, "gradient", p.shape())?;
            v.expect_shape(OP, "momentum buffer", p.shape())?;
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.state.velocity) {
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = self.momentum * *vv + gv;
                *pv -= self.learning_rate * *vv;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(&[1], vec![v]).unwrap()
    }

    #[test]
    fn plain_sgd_without_momentum() {
        let mut p = Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap();
        let g = Tensor::from_vec(&[2], vec![0.5, 1.0]).unwrap();
        let mut opt = Sgd::new(0.1, 0.0, &[&p]).unwrap();
        opt.step(&mut [&mut p], &[g]).unwrap();
        assert_eq!(p.data(), &[1.0 - 0.05, -2.0 - 0.1]);
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut p = scalar(3.0);
        let mut opt = Sgd::new(0.5, 0.9, &[&p]).unwrap();
        for _ in 0..5 {
            opt.step(&mut [&mut p], &[scalar(0.0)]).unwrap();
        }
        assert_eq!(p.data(), &[3.0]);
    }

    #[test]
    fn two_momentum_steps() {
        // v1 = 1, p1 = 0.9; v2 = 0.9 + 1 = 1.9, p2 = 0.9 - 0.19 = 0.71
        let mut p = scalar(1.0);
        let mut opt = Sgd::new(0.1, 0.9, &[&p]).unwrap();
        opt.step(&mut [&mut p], &[scalar(1.0)]).unwrap();
        opt.step(&mut [&mut p], &[scalar(1.0)]).unwrap();
        assert!((p.data()[0] - 0.71).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = scalar(1.0);
        let mut opt = Sgd::new(0.1, 0.9, &[&p]).unwrap();
        assert!(opt.step(&mut [&mut p], &[Tensor::zeros(&[2])]).is_err());
        assert!(Sgd::new(0.1, 1.0, &[&p]).is_err());
    }
}
