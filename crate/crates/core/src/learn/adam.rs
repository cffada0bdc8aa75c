use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// ADAM over a fixed list of parameter tensors; moments kept in f64.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new<T: Real>(lr: f64, params: &[Tensor<T>]) -> Self {
        Adam {
            lr,
            beta1: BETA1,
            beta2: BETA2,
            eps: EPS,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step<T: Real>(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape("parameter/gradient list does not match optimizer state"));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.numel() != self.m[k].len() || g.numel() != self.m[k].len() {
                return Err(Error::shape(format!("parameter {k} changed size")));
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, (pv, gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gv = gv.f64();
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gv;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gv * gv;
                let update = self.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                *pv = T::of(pv.f64() - update);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = vec![Tensor::<f32>::from_fn(&[4], |i| i as f32)];
        let before = p.clone();
        let mut opt = Adam::new(0.01, &p);
        opt.step(&mut p, &[Tensor::zeros(&[4])]).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr_against_the_gradient() {
        let mut p = vec![Tensor::<f64>::new(vec![2], vec![1.0, 1.0]).unwrap()];
        let mut opt = Adam::new(0.01, &p);
        opt.step(&mut p, &[Tensor::new(vec![2], vec![3.0, -0.5]).unwrap()]).unwrap();
        assert!((p[0].data()[0] - 0.99).abs() < 1e-8);
        assert!((p[0].data()[1] - 1.01).abs() < 1e-8);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = vec![Tensor::<f64>::scalar(5.0)];
        let mut opt = Adam::new(0.1, &p);
        for _ in 0..500 {
            let g = Tensor::scalar(2.0 * (p[0].data()[0] - 2.0));
            opt.step(&mut p, &[g]).unwrap();
        }
        assert!((p[0].data()[0] - 2.0).abs() < 1e-2);
    }
}
