//! Momentum SGD, Adam and the polynomial learning-rate schedule.

use crate::scalar::Scalar;

/// `lr * (1 - iter / max_iter) ^ power`.
pub fn poly_lr(base: f64, iter: usize, max_iter: usize, power: f64) -> f64 {
    if max_iter == 0 {
        return base;
    }
    base * (1.0 - iter as f64 / max_iter as f64).max(0.0).powf(power)
}

#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<T>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(len: usize, momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, velocity: vec![T::zero(); len] }
    }

    /// `v = mu v + (g + wd p); p -= lr v`
    pub fn step(&mut self, params: &mut [T], grads: &[T], lr: f64) {
        let (mu, wd, lr) = (T::of(self.momentum), T::of(self.weight_decay), T::of(lr));
        for ((p, &g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            *v = mu * *v + g + wd * *p;
            *p -= lr * *v;
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    pub fn new(len: usize, beta1: f64, beta2: f64) -> Self {
        Self { beta1, beta2, eps: 1e-8, m: vec![T::zero(); len], v: vec![T::zero(); len], t: 0 }
    }

    pub fn step(&mut self, params: &mut [T], grads: &[T], lr: f64) {
        self.t += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powi(self.t));
        let c2 = T::of(1.0 - self.beta2.powi(self.t));
        let (lr, eps) = (T::of(lr), T::of(self.eps));
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *p -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_schedule_endpoints() {
        assert_eq!(poly_lr(0.1, 0, 100, 0.9), 0.1);
        assert_eq!(poly_lr(0.1, 100, 100, 0.9), 0.0);
        assert!((poly_lr(1.0, 50, 100, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn optimizers_minimize_a_quadratic() {
        let mut p = vec![3.0f64, -2.0];
        let mut sgd = Sgd::new(2, 0.9, 0.0);
        for _ in 0..200 {
            let g: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
            sgd.step(&mut p, &g, 0.05);
        }
        assert!(p.iter().all(|x| x.abs() < 1e-3));
        let mut q = vec![3.0f64, -2.0];
        let mut adam = Adam::new(2, 0.9, 0.99);
        for _ in 0..2000 {
            let g: Vec<f64> = q.iter().map(|x| 2.0 * x).collect();
            adam.step(&mut q, &g, 0.01);
        }
        assert!(q.iter().all(|x| x.abs() < 1e-2), "{q:?}");
    }
}
