//! Posterior, flow and loss operations on plain vectors.
//!
//! These evaluate the same graph code the trainer differentiates, on single
//! examples in f64, plus the closed-form densities used to check it.

use std::f64::consts::PI;

use ndarray::{Array2, ArrayView2};

use crate::autograd::{Graph, ParamStore};
use crate::error::{Error, Result};
use crate::model::enhancer::{self, VariationalEnhancer, LOG_SIGMA_MAX, LOG_SIGMA_MIN};

/// Diagonal Gaussian `N(mu, diag(sigma^2))`.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorParams {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl PosteriorParams {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if mu.len() != sigma.len() {
            return Err(Error::Shape(format!("mu has {} dims, sigma {}", mu.len(), sigma.len())));
        }
        if mu.iter().chain(&sigma).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("posterior parameters".into()));
        }
        if sigma.iter().any(|&s| s <= 0.0) {
            return Err(Error::InvalidArgument("sigma must be positive".into()));
        }
        Ok(Self { mu, sigma })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// State of the flow chain for one example.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleLatent {
    pub z0: Vec<f64>,
    pub zk: Vec<f64>,
    pub log_det_sum: f64,
    pub posterior: PosteriorParams,
}

fn row(v: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row vector")
}

fn check_finite(what: &str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

/// Posterior readouts for a single style feature.
pub fn posterior_params(h: &[f64], enh: &VariationalEnhancer, store: &ParamStore<f64>) -> Result<PosteriorParams> {
    check_finite("style feature", h)?;
    let mut g = Graph::new();
    let hv = g.constant(row(h));
    if g.value(hv).ncols() != store.value(enh.mu.w).nrows() {
        return Err(Error::Shape(format!("style feature of length {}", h.len())));
    }
    let (mu, _, sigma) = enh.posterior(&mut g, store, hv);
    PosteriorParams::new(g.value(mu).iter().copied().collect(), g.value(sigma).iter().copied().collect())
}

/// `exp(clamp(x, -8, 4))`, the posterior's sigma for a raw log-sigma output.
pub fn sigma_from_raw(x: f64) -> f64 {
    x.clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX).exp()
}

/// Reparameterized draw `mu + sigma * eps`.
pub fn sample_latent(post: &PosteriorParams, eps: &[f64]) -> Result<Vec<f64>> {
    if eps.len() != post.dim() {
        return Err(Error::Shape(format!("eps has {} dims, posterior {}", eps.len(), post.dim())));
    }
    let mut g = Graph::<f64>::new();
    let mu = g.constant(row(&post.mu));
    let sigma = g.constant(row(&post.sigma));
    let e = g.constant(row(eps));
    let z = enhancer::sample_var(&mut g, mu, sigma, e);
    Ok(g.value(z).iter().copied().collect())
}

/// One reflection `z - 2 v (v.z) / (|v|^2 + 1e-6)`.
pub fn householder_step(z: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    if z.len() != v.len() {
        return Err(Error::Shape(format!("z has {} dims, v {}", z.len(), v.len())));
    }
    let mut g = Graph::<f64>::new();
    let zv = g.constant(row(z));
    let vv = g.constant(row(v));
    let out = enhancer::householder_var(&mut g, zv, vv);
    Ok(g.value(out).iter().copied().collect())
}

/// Runs the enhancer's flow on `z0`, with reflection vectors derived from `h`.
pub fn apply_flow(
    z0: &[f64],
    post: &PosteriorParams,
    h: &[f64],
    enh: &VariationalEnhancer,
    store: &ParamStore<f64>,
) -> Result<StyleLatent> {
    check_finite("z0", z0)?;
    check_finite("style feature", h)?;
    if z0.len() != post.dim() {
        return Err(Error::Shape(format!("z0 has {} dims, posterior {}", z0.len(), post.dim())));
    }
    let mut g = Graph::new();
    let hv = g.constant(row(h));
    let z = g.constant(row(z0));
    let vs = enh.flow_vectors(&mut g, store, hv);
    let zk = enhancer::flow_var(&mut g, z, &vs);
    Ok(StyleLatent {
        z0: z0.to_vec(),
        zk: g.value(zk).iter().copied().collect(),
        log_det_sum: 0.0,
        posterior: post.clone(),
    })
}

/// Flow with explicitly supplied reflection vectors.
pub fn apply_flow_vectors(z0: &[f64], vectors: &[Vec<f64>]) -> Result<Vec<f64>> {
    vectors.iter().try_fold(z0.to_vec(), |z, v| householder_step(&z, v))
}

/// `sum_i [-0.5 ln(2 pi) - ln sigma_i - (z_i - mu_i)^2 / (2 sigma_i^2)]`
pub fn gaussian_log_density(z: &[f64], mu: &[f64], sigma: &[f64]) -> Result<f64> {
    if z.len() != mu.len() || z.len() != sigma.len() {
        return Err(Error::Shape("z, mu and sigma lengths differ".into()));
    }
    if sigma.iter().any(|&s| s <= 0.0) {
        return Err(Error::InvalidArgument("sigma must be positive".into()));
    }
    Ok(z.iter()
        .zip(mu)
        .zip(sigma)
        .map(|((&z, &m), &s)| -0.5 * (2.0 * PI).ln() - s.ln() - (z - m).powi(2) / (2.0 * s * s))
        .sum())
}

/// Closed-form `KL(N(mu, sigma^2) || N(0, I))`.
pub fn kl_diag_standard(post: &PosteriorParams) -> f64 {
    let kl: f64 = post.mu.iter().zip(&post.sigma).map(|(&m, &s)| m * m + s * s - 1.0 - (s * s).ln()).sum::<f64>() * 0.5;
    kl.max(0.0)
}

/// Single-sample estimate `ln q0(z0) - ln p(zK) - sum ln|det|` with a standard normal prior.
pub fn kl_flow_estimate(latent: &StyleLatent) -> Result<f64> {
    if latent.z0.len() != latent.zk.len() || latent.z0.len() != latent.posterior.dim() {
        return Err(Error::Shape("latent dimensions disagree".into()));
    }
    if latent.log_det_sum.abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("Householder chain with log-det {}", latent.log_det_sum)));
    }
    let d = latent.zk.len();
    let log_q = gaussian_log_density(&latent.z0, &latent.posterior.mu, &latent.posterior.sigma)?;
    let log_p = gaussian_log_density(&latent.zk, &vec![0.0; d], &vec![1.0; d])?;
    Ok(log_q - log_p - latent.log_det_sum)
}

/// Per-element weight of the asymmetric loss: `lambda` where the error opposes
/// the target's sign (under-articulation), `1 - lambda` elsewhere.
pub fn asymmetric_weight(err: f64, target: f64, lambda: f64) -> f64 {
    if err * target.signum() < 0.0 && target != 0.0 {
        lambda
    } else {
        1.0 - lambda
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("lambda = {lambda} outside (0, 1)")))
    }
}

/// Mean over elements of `w(e) e^2` with `e = pred - target`.
pub fn asymmetric_recon_loss(pred: ArrayView2<f64>, target: ArrayView2<f64>, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    if pred.dim() != target.dim() {
        return Err(Error::Shape(format!("pred {:?} vs target {:?}", pred.dim(), target.dim())));
    }
    if pred.is_empty() {
        return Err(Error::Shape("empty sequences".into()));
    }
    let total: f64 = pred
        .iter()
        .zip(target.iter())
        .map(|(&p, &t)| {
            let e = p - t;
            asymmetric_weight(e, t, lambda) * e * e
        })
        .sum();
    Ok(total / pred.len() as f64)
}

/// Reconstruction plus `beta`-weighted KL estimate.
pub fn elbo_loss(
    pred: ArrayView2<f64>,
    target: ArrayView2<f64>,
    latent: &StyleLatent,
    beta: f64,
    lambda: f64,
) -> Result<f64> {
    let recon = asymmetric_recon_loss(pred, target, lambda)?;
    if beta == 0.0 {
        return Ok(recon);
    }
    Ok(recon + beta * kl_flow_estimate(latent)?)
}

/// KL of the graph estimator for one latent, used to cross-check both routes.
#[cfg(test)]
pub(crate) fn kl_estimate_graph(latent: &StyleLatent) -> f64 {
    let mut g = Graph::<f64>::new();
    let ls: Vec<f64> = latent.posterior.sigma.iter().map(|s| s.ln()).collect();
    let sigma = g.constant(row(&latent.posterior.sigma));
    let vars = enhancer::LatentVars {
        mu: g.constant(row(&latent.posterior.mu)),
        log_sigma: g.constant(row(&ls)),
        sigma,
        z0: g.constant(row(&latent.z0)),
        zk: g.constant(row(&latent.zk)),
    };
    let kl = enhancer::kl_estimate_var(&mut g, &vars);
    g.scalar(kl)
}
