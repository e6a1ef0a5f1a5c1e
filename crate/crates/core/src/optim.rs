//! Classic momentum SGD over an ordered list of tensors.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// `v <- momentum * v + g; p <- p - lr * v`, one velocity buffer per tensor.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) || !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!(
                "sgd needs lr >= 0 and momentum in [0, 1), got lr={lr} momentum={momentum}"
            )));
        }
        Ok(Sgd {
            lr,
            momentum,
            velocity: Vec::new(),
        })
    }

    /// Applies one update. Tensors whose `frozen` flag is set are left
    /// untouched, and so is their velocity.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor<T>],
        grads: &[&Tensor<T>],
        frozen: &[bool],
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != frozen.len() {
            return Err(Error::dim(
                "sgd_step",
                &[params.len(), frozen.len()],
                &[grads.len()],
            ));
        }
        if self.velocity.len() != params.len() {
            self.velocity = vec![None; params.len()];
        }
        let lr = T::from_f64(self.lr);
        let mu = T::from_f64(self.momentum);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if frozen[i] {
                continue;
            }
            if p.shape() != g.shape() {
                return Err(Error::dim("sgd_step", p.shape(), g.shape()));
            }
            let v = self.velocity[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = mu * *vv + gv;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }

    /// Drops the velocity of tensor `index`; used when a tensor is replaced
    /// wholesale rather than updated.
    pub fn reset(&mut self, index: usize) {
        if let Some(v) = self.velocity.get_mut(index) {
            *v = None;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::vector(vec![v])
    }

    #[test]
    fn zero_lr_is_noop() {
        let mut p = Tensor::<f64>::vector(vec![1.0, -2.0]);
        let g = Tensor::vector(vec![5.0, 5.0]);
        let mut opt = Sgd::new(0.0, 0.9).unwrap();
        opt.step(&mut [&mut p], &[&g], &[false]).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
    }

    #[test]
    fn plain_step() {
        let mut p = scalar(1.0);
        let mut opt = Sgd::new(0.1, 0.0).unwrap();
        opt.step(&mut [&mut p], &[&scalar(2.0)], &[false]).unwrap();
        assert!((p.data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn two_momentum_steps_match_hand_unrolled() {
        // v1 = g1; p1 = p0 - lr g1
        // v2 = 0.9 g1 + g2; p2 = p1 - lr (0.9 g1 + g2)
        let (p0, g1, g2, lr) = (1.0, 0.5, -0.25, 0.1);
        let mut p = scalar(p0);
        let mut opt = Sgd::new(lr, 0.9).unwrap();
        opt.step(&mut [&mut p], &[&scalar(g1)], &[false]).unwrap();
        opt.step(&mut [&mut p], &[&scalar(g2)], &[false]).unwrap();
        let want = p0 - lr * g1 - lr * (0.9 * g1 + g2);
        assert!((p.data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn frozen_tensor_untouched() {
        let mut a = scalar(1.0);
        let mut b = scalar(1.0);
        let mut opt = Sgd::new(0.5, 0.9).unwrap();
        opt.step(&mut [&mut a, &mut b], &[&scalar(1.0), &scalar(1.0)], &[false, true])
            .unwrap();
        assert_eq!(b.data()[0], 1.0);
        assert_eq!(a.data()[0], 0.5);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(Sgd::<f64>::new(0.1, 1.0).is_err());
        assert!(Sgd::<f64>::new(-0.1, 0.0).is_err());
    }
}
