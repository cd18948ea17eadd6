use crate::nn::{Grads, ParamStore, Real};

pub const DEFAULT_MOMENTUM: f64 = 0.99;
pub const POLY_EXPONENT: f64 = 0.9;

/// `lr0 * (1 - epoch / num_epochs)^0.9`.
pub fn poly_learning_rate(lr0: f64, epoch: usize, num_epochs: usize) -> f64 {
    let frac = 1.0 - epoch as f64 / num_epochs.max(1) as f64;
    lr0 * frac.max(0.0).powf(POLY_EXPONENT)
}

/// SGD with Nesterov momentum: `v = mu*v + g; p -= lr*(g + mu*v)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub velocity: Grads<T>,
}

impl<T: Real> Sgd<T> {
    pub fn new(params: &ParamStore<T>, momentum: f64) -> Self {
        Self {
            momentum,
            velocity: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Grads<T>, lr: f64) {
        let mu = T::lit(self.momentum);
        let lr = T::lit(lr);
        for ((p, v), g) in params
            .entries_mut()
            .iter_mut()
            .zip(&mut self.velocity.data)
            .zip(&grads.data)
        {
            for ((pi, vi), &gi) in p.data.iter_mut().zip(v.iter_mut()).zip(g) {
                *vi = mu * *vi + gi;
                *pi -= lr * (gi + mu * *vi);
            }
        }
    }
}
