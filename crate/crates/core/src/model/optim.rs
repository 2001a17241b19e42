//! First-order optimizers over [`TaggerParams`].

use super::params::TaggerParams;
use crate::scalar::Scalar;

pub trait Optimizer<T: Scalar> {
    /// Applies one update given the gradient of the loss being minimized.
    fn step(&mut self, params: &mut TaggerParams<T>, grads: &TaggerParams<T>);
}

#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub learning_rate: T,
}

impl<T: Scalar> Optimizer<T> for Sgd<T> {
    fn step(&mut self, params: &mut TaggerParams<T>, grads: &TaggerParams<T>) {
        let lr = self.learning_rate;
        params.zip_mut(grads, |_, p, g| {
            for (w, &d) in p.data.iter_mut().zip(&g.data) {
                *w = *w - lr * d;
            }
        });
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub learning_rate: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    steps: i32,
    first: Option<TaggerParams<T>>,
    second: Option<TaggerParams<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(learning_rate: T) -> Self {
        Self {
            learning_rate,
            beta1: T::from_f64_lossy(0.9),
            beta2: T::from_f64_lossy(0.999),
            eps: T::from_f64_lossy(1e-8),
            steps: 0,
            first: None,
            second: None,
        }
    }

    pub fn steps(&self) -> i32 {
        self.steps
    }
}

impl<T: Scalar> Optimizer<T> for Adam<T> {
    fn step(&mut self, params: &mut TaggerParams<T>, grads: &TaggerParams<T>) {
        self.steps += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = T::one() - b1.powi(self.steps);
        let c2 = T::one() - b2.powi(self.steps);
        let lr = self.learning_rate;
        let first = self.first.get_or_insert_with(|| params.zeros_like());
        let second = self.second.get_or_insert_with(|| params.zeros_like());
        first.zip_mut(grads, |_, m, g| {
            for (m, &g) in m.data.iter_mut().zip(&g.data) {
                *m = b1 * *m + (T::one() - b1) * g;
            }
        });
        second.zip_mut(grads, |_, v, g| {
            for (v, &g) in v.data.iter_mut().zip(&g.data) {
                *v = b2 * *v + (T::one() - b2) * g * g;
            }
        });
        let moments: Vec<_> = first.named().into_iter().zip(second.named()).map(|((_, m), (_, v))| (m, v)).collect();
        for ((_, p), (m, v)) in params.named_mut().into_iter().zip(moments) {
            for ((w, &m), &v) in p.data.iter_mut().zip(&m.data).zip(&v.data) {
                *w = *w - lr * (m / c1) / ((v / c2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::TaggerConfig;

    #[test]
    fn first_adam_step_moves_by_learning_rate() {
        let cfg = TaggerConfig::new(5, 4, 1);
        let mut p = TaggerParams::<f64>::init(cfg, 1);
        let before = p.clone();
        let mut g = p.zeros_like();
        g.heads.deletion_b.data[0] = 3.0;
        g.heads.deletion_b.data[1] = -0.5;
        let mut adam = Adam::new(0.01);
        adam.step(&mut p, &g);
        let moved = &p.heads.deletion_b.data;
        assert!((moved[0] - (before.heads.deletion_b.data[0] - 0.01)).abs() < 1e-9);
        assert!((moved[1] - (before.heads.deletion_b.data[1] + 0.01)).abs() < 1e-9);
        assert_eq!(p.heads.deletion_w, before.heads.deletion_w);
    }

    #[test]
    fn sgd_moves_against_gradient() {
        let cfg = TaggerConfig::new(5, 4, 1);
        let mut p = TaggerParams::<f64>::init(cfg, 1);
        let before = p.heads.deletion_b.data.clone();
        let mut g = p.zeros_like();
        g.heads.deletion_b.data[0] = 2.0;
        Sgd { learning_rate: 0.5 }.step(&mut p, &g);
        assert_eq!(p.heads.deletion_b.data[0], before[0] - 1.0);
        assert_eq!(p.heads.deletion_b.data[1], before[1]);
    }
}
