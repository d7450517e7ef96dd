use ndarray::{Array2, Zip};

use crate::autograd::{ParamStore, Scalar};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adam with bias correction; moments are kept per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub t: u64,
    pub m: Vec<Array2<T>>,
    pub v: Vec<Array2<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.values().iter().map(|p| Array2::zeros(p.raw_dim())).collect();
        Self { t: 0, m: zeros(), v: zeros() }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Array2<T>], lr: f64) {
        self.t += 1;
        let b1 = T::from_f64(BETA1).unwrap();
        let b2 = T::from_f64(BETA2).unwrap();
        let c1 = T::from_f64(1.0 - BETA1).unwrap();
        let c2 = T::from_f64(1.0 - BETA2).unwrap();
        let bc1 = T::from_f64(1.0 - BETA1.powi(self.t as i32)).unwrap();
        let bc2 = T::from_f64(1.0 - BETA2.powi(self.t as i32)).unwrap();
        let lr = T::from_f64(lr).unwrap();
        let eps = T::from_f64(EPSILON).unwrap();
        for (((p, g), m), v) in store.values_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + c1 * g;
                *v = b2 * *v + c2 * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *p = *p - lr * mh / (vh.sqrt() + eps);
            });
        }
    }
}

/// Global L2 norm of all gradients.
pub fn global_norm<T: Scalar>(grads: &[Array2<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&x| {
            let x = x.to_f64().unwrap();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` in place so their global norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Array2<T>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let k = T::from_f64(max_norm / norm).unwrap();
        grads.iter_mut().for_each(|g| g.mapv_inplace(|x| x * k));
    }
    norm
}
