//! Variational style enhancer: diagonal Gaussian posterior over the style
//! latent, refined by a chain of Householder reflections.

use rand::Rng;
use rand_distr::StandardNormal;

use super::ModelConfig;
use crate::autograd::nn::Linear;
use crate::autograd::{Graph, ParamStore, Scalar, Var};

pub const LOG_SIGMA_MIN: f64 = -8.0;
pub const LOG_SIGMA_MAX: f64 = 4.0;
/// Added to `|v|^2` before dividing.
pub const HOUSEHOLDER_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct VariationalEnhancer {
    pub mu: Linear,
    pub log_sigma: Linear,
    /// Produces `v^(0)` from the style feature.
    pub v0: Linear,
    /// `v^(k) = links[k-1](v^(k-1))`; one fewer than the number of steps.
    pub links: Vec<Linear>,
    pub steps: usize,
}

/// Graph handles for one posterior/flow evaluation over a batch.
#[derive(Clone, Copy, Debug)]
pub struct LatentVars {
    pub mu: Var,
    pub log_sigma: Var,
    pub sigma: Var,
    pub z0: Var,
    pub zk: Var,
}

impl VariationalEnhancer {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let (h, z) = (cfg.style_dim, cfg.latent_dim);
        let mu = Linear::new(store, "enhancer.posterior.mu", h, z, rng);
        let log_sigma = Linear::new(store, "enhancer.posterior.log_sigma", h, z, rng);
        // start near sigma = 1
        store.value_mut(log_sigma.w).mapv_inplace(|w| w * T::from_f64(0.1).unwrap());
        let v0 = Linear::new(store, "enhancer.flow.v0", h, z, rng);
        // keep initial reflection vectors well away from the norm floor
        store.value_mut(v0.b).mapv_inplace(|_| T::from_f64(rng.sample(StandardNormal)).unwrap());
        let links =
            (1..cfg.flow_steps).map(|k| Linear::new(store, &format!("enhancer.flow.link{k}"), z, z, rng)).collect();
        Self { mu, log_sigma, v0, links, steps: cfg.flow_steps }
    }

    /// `(mu, log sigma clamped, sigma)` from a `B x style_dim` feature.
    pub fn posterior<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, h: Var) -> (Var, Var, Var) {
        let mu = self.mu.forward(g, store, h);
        let raw = self.log_sigma.forward(g, store, h);
        let log_sigma = g.clamp(raw, T::from_f64(LOG_SIGMA_MIN).unwrap(), T::from_f64(LOG_SIGMA_MAX).unwrap());
        let sigma = g.exp(log_sigma);
        (mu, log_sigma, sigma)
    }

    /// Reflection vectors `v^(0..K)` for each row of `h`.
    pub fn flow_vectors<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, h: Var) -> Vec<Var> {
        if self.steps == 0 {
            return Vec::new();
        }
        let mut v = self.v0.forward(g, store, h);
        let mut out = vec![v];
        for link in &self.links {
            v = link.forward(g, store, v);
            out.push(v);
        }
        out
    }

    /// Posterior, reparameterized sample with noise `eps` (`B x d_z`) and the flow.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, h: Var, eps: Var) -> LatentVars {
        let (mu, log_sigma, sigma) = self.posterior(g, store, h);
        let z0 = sample_var(g, mu, sigma, eps);
        let vs = self.flow_vectors(g, store, h);
        let zk = flow_var(g, z0, &vs);
        LatentVars { mu, log_sigma, sigma, z0, zk }
    }
}

/// `mu + sigma * eps`
pub fn sample_var<T: Scalar>(g: &mut Graph<T>, mu: Var, sigma: Var, eps: Var) -> Var {
    let noise = g.mul(sigma, eps);
    g.add(mu, noise)
}

/// Row-wise `z - 2 v (v.z) / (|v|^2 + floor)`.
pub fn householder_var<T: Scalar>(g: &mut Graph<T>, z: Var, v: Var) -> Var {
    let vz = g.mul(v, z);
    let vz = g.row_sum(vz);
    let vv = g.mul(v, v);
    let vv = g.row_sum(vv);
    let denom = g.add_scalar(vv, T::from_f64(HOUSEHOLDER_FLOOR).unwrap());
    let inv = g.recip(denom);
    let coef = g.mul(vz, inv);
    let proj = g.mul_col(v, coef);
    let two_proj = g.scale(proj, T::from_f64(2.0).unwrap());
    g.sub(z, two_proj)
}

pub fn flow_var<T: Scalar>(g: &mut Graph<T>, z0: Var, vs: &[Var]) -> Var {
    vs.iter().fold(z0, |z, &v| householder_var(g, z, v))
}

/// Per-row single-sample KL estimate `ln q0(z0) - ln p(zK)` (`B x 1`).
///
/// Householder reflections are orthogonal, so the log-determinant term vanishes.
/// The `-0.5 ln 2 pi` constants of both densities cancel and are omitted.
pub fn kl_estimate_var<T: Scalar>(g: &mut Graph<T>, lat: &LatentVars) -> Var {
    let half = T::from_f64(0.5).unwrap();
    let diff = g.sub(lat.z0, lat.mu);
    let neg_ls = g.scale(lat.log_sigma, -T::one());
    let inv_sigma = g.exp(neg_ls);
    let std = g.mul(diff, inv_sigma);
    let std2 = g.mul(std, std);
    let q_quad = g.scale(std2, -half);
    let log_q = g.add(neg_ls, q_quad);
    let zk2 = g.mul(lat.zk, lat.zk);
    let neg_log_p = g.scale(zk2, half);
    let term = g.add(log_q, neg_log_p);
    g.row_sum(term)
}
