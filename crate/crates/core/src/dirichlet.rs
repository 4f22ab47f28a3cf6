//! The architecture distribution: a Dirichlet over per-edge operation mixing
//! weights, parameterized through a shifted ELU so concentrations stay
//! positive.
//!
//! Gradients flow to the concentrations through the implicit (pathwise)
//! reparameterization: for a sample θ ~ Dir(β), the Beta marginal
//! θ_j ~ Beta(β_j, β_tot − β_j) gives
//!
//! ```text
//! dθ_i/dβ_j = −[∂F/∂a (θ_j | β_j, β_tot − β_j) / f(θ_j | β_j, β_tot − β_j)] · (δ_ij − θ_i) / (1 − θ_j)
//! ```
//!
//! where `F` and `f` are the Beta CDF and density.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::rng::Rng;
use crate::special::{
    beta_log_pdf, d_reg_inc_beta_da, digamma_unchecked, ln_gamma_sample, ln_gamma_unchecked,
    trigamma_unchecked,
};

/// Samples are kept at least this far from the simplex boundary.
pub const THETA_EPS: f64 = 1e-6;

/// Unconstrained concentration parameters of one edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Concentration {
    pub eta: Vec<f64>,
}

impl Concentration {
    pub fn new(eta: Vec<f64>) -> Self {
        Self { eta }
    }

    pub fn len(&self) -> usize {
        self.eta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eta.is_empty()
    }

    pub fn beta(&self) -> Result<Vec<f64>> {
        beta_from_eta(&self.eta)
    }
}

/// One draw on the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexSample {
    pub theta: Vec<f64>,
}

/// Softmax-Gaussian approximation of a Dirichlet: logits ~ N(mu, diag(sigma_diag)).
#[derive(Debug, Clone, PartialEq)]
pub struct LaplaceParams {
    pub mu: Vec<f64>,
    pub sigma_diag: Vec<f64>,
}

/// Which distance to the symmetric Dirichlet the architecture objective penalizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceKind {
    /// λ·½‖η‖², the default.
    #[default]
    EtaL2,
    /// λ·‖η‖, the unsquared norm.
    EtaNorm,
    /// λ·KL(Dir(β) ‖ Dir(1)).
    Kl,
}

fn check_beta(beta: &[f64]) -> Result<()> {
    ensure!(!beta.is_empty(), Contract, "empty concentration vector");
    for &b in beta {
        ensure!(b.is_finite() && b > 0.0, Domain, "concentration must be positive and finite, got {b}");
    }
    Ok(())
}

/// β = ELU(η) + 1.
pub fn beta_from_eta(eta: &[f64]) -> Result<Vec<f64>> {
    eta.iter()
        .map(|&e| {
            ensure!(e.is_finite(), Domain, "non-finite eta entry {e}");
            Ok(if e >= 0.0 { e + 1.0 } else { e.exp() })
        })
        .collect()
}

/// dβ/dη elementwise.
pub fn elu_derivative(eta: &[f64]) -> Vec<f64> {
    eta.iter().map(|&e| if e >= 0.0 { 1.0 } else { e.exp() }).collect()
}

/// Dirichlet mean β / Σβ.
pub fn mean(beta: &[f64]) -> Vec<f64> {
    let total: f64 = beta.iter().sum();
    beta.iter().map(|b| b / total).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Draw θ ~ Dir(β) by normalizing independent Gamma draws.
///
/// Each Gamma draw runs on its own child stream seeded from one word of
/// `rng`, so the parent advances by exactly `|β|` words whatever the
/// rejection sampler does. Small perturbations of β then move θ
/// continuously, which keeps common-random-number comparisons meaningful.
pub fn sample(beta: &[f64], rng: &mut Rng) -> Result<SimplexSample> {
    check_beta(beta)?;
    let logs = beta
        .iter()
        .map(|&b| {
            let mut child = Rng::new(rng.next_seed());
            ln_gamma_sample(b, &mut child)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(SimplexSample {
        theta: clamp_to_simplex(softmax(&logs)),
    })
}

/// Raise entries below [`THETA_EPS`] to it and take the excess mass from
/// the largest entry, so the result stays on the simplex exactly.
pub fn clamp_to_simplex(mut theta: Vec<f64>) -> Vec<f64> {
    if theta.len() < 2 {
        return vec![1.0; theta.len()];
    }
    let mut excess = 0.0;
    for t in theta.iter_mut() {
        if *t < THETA_EPS {
            excess += THETA_EPS - *t;
            *t = THETA_EPS;
        }
    }
    if excess > 0.0 {
        let imax = argmax(&theta);
        theta[imax] -= excess;
    }
    theta
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Per-column scalar of the pathwise Jacobian,
/// `s_j = −∂F/∂a(θ_j | β_j, β_tot − β_j) / f(θ_j | β_j, β_tot − β_j)`.
pub fn pathwise_scales(theta: &[f64], beta: &[f64]) -> Result<Vec<f64>> {
    check_beta(beta)?;
    ensure!(
        theta.len() == beta.len(),
        Contract,
        "theta has {} entries but beta has {}",
        theta.len(),
        beta.len()
    );
    if beta.len() == 1 {
        return Ok(vec![0.0]);
    }
    let total: f64 = beta.iter().sum();
    theta
        .iter()
        .zip(beta)
        .map(|(&t, &b)| {
            let t = t.clamp(THETA_EPS, 1.0 - THETA_EPS);
            let rest = total - b;
            let dcdf = d_reg_inc_beta_da(t, b, rest)?;
            let density = beta_log_pdf(t, b, rest)?.exp();
            let s = -dcdf / density;
            ensure!(s.is_finite(), Numeric, "non-finite pathwise scale at theta={t}, a={b}, b={rest}");
            Ok(s)
        })
        .collect()
}

/// Full `|O|×|O|` Jacobian dθ/dβ of one sample; row `i`, column `j`.
pub fn pathwise_jacobian(sample: &SimplexSample, beta: &[f64]) -> Result<Vec<Vec<f64>>> {
    let theta = &sample.theta;
    let scales = pathwise_scales(theta, beta)?;
    let n = theta.len();
    Ok((0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let tj = theta[j].clamp(THETA_EPS, 1.0 - THETA_EPS);
                    let delta = if i == j { 1.0 } else { 0.0 };
                    scales[j] * (delta - theta[i]) / (1.0 - tj)
                })
                .collect()
        })
        .collect())
}

/// Vector–Jacobian product `Jᵀ·g` without materializing `J`.
pub fn pathwise_vjp(grad_theta: &[f64], sample: &SimplexSample, beta: &[f64]) -> Result<Vec<f64>> {
    let theta = &sample.theta;
    ensure!(
        grad_theta.len() == theta.len(),
        Contract,
        "gradient has {} entries but theta has {}",
        grad_theta.len(),
        theta.len()
    );
    let scales = pathwise_scales(theta, beta)?;
    let dot: f64 = grad_theta.iter().zip(theta).map(|(g, t)| g * t).sum();
    Ok(scales
        .iter()
        .zip(grad_theta)
        .zip(theta)
        .map(|((s, g), t)| s * (g - dot) / (1.0 - t.clamp(THETA_EPS, 1.0 - THETA_EPS)))
        .collect())
}

/// Chain a loss gradient w.r.t. θ back to the unconstrained η.
pub fn grad_eta_from_grad_theta(
    grad_theta: &[f64],
    sample: &SimplexSample,
    beta: &[f64],
    eta: &[f64],
) -> Result<Vec<f64>> {
    ensure!(eta.len() == beta.len(), Contract, "eta/beta length mismatch");
    let gb = pathwise_vjp(grad_theta, sample, beta)?;
    Ok(gb.iter().zip(elu_derivative(eta)).map(|(g, d)| g * d).collect())
}

/// Score-function gradient `∇_β ln Dir(θ | β)`.
pub fn score_function(theta: &[f64], beta: &[f64]) -> Result<Vec<f64>> {
    check_beta(beta)?;
    let total: f64 = beta.iter().sum();
    let psi_total = digamma_unchecked(total);
    Ok(theta
        .iter()
        .zip(beta)
        .map(|(t, &b)| psi_total - digamma_unchecked(b) + t.ln())
        .collect())
}

/// Squared anchor penalty `λ·½‖η‖²` and its gradient.
pub fn anchor_penalty(eta: &[f64], lambda: f64) -> (f64, Vec<f64>) {
    let sq: f64 = eta.iter().map(|e| e * e).sum();
    (0.5 * lambda * sq, eta.iter().map(|e| lambda * e).collect())
}

/// Unsquared anchor penalty `λ·‖η‖`; subgradient 0 at the anchor.
pub fn anchor_norm_penalty(eta: &[f64], lambda: f64) -> (f64, Vec<f64>) {
    let norm = eta.iter().map(|e| e * e).sum::<f64>().sqrt();
    if norm == 0.0 {
        return (0.0, vec![0.0; eta.len()]);
    }
    (lambda * norm, eta.iter().map(|e| lambda * e / norm).collect())
}

/// KL(Dir(β) ‖ Dir(1, …, 1)).
pub fn kl_to_symmetric(beta: &[f64]) -> Result<f64> {
    check_beta(beta)?;
    let n = beta.len() as f64;
    let total: f64 = beta.iter().sum();
    let psi_total = digamma_unchecked(total);
    let mut kl = ln_gamma_unchecked(total) - ln_gamma_unchecked(n);
    for &b in beta {
        kl += -ln_gamma_unchecked(b) + (b - 1.0) * (digamma_unchecked(b) - psi_total);
    }
    Ok(kl)
}

/// ∂KL(Dir(β) ‖ Dir(1))/∂β.
pub fn kl_to_symmetric_grad(beta: &[f64]) -> Result<Vec<f64>> {
    check_beta(beta)?;
    let n = beta.len() as f64;
    let total: f64 = beta.iter().sum();
    let shared = (total - n) * trigamma_unchecked(total);
    Ok(beta
        .iter()
        .map(|&b| (b - 1.0) * trigamma_unchecked(b) - shared)
        .collect())
}

/// Penalty value and gradient w.r.t. η for the configured distance.
pub fn distance_penalty(kind: DistanceKind, eta: &[f64], lambda: f64) -> Result<(f64, Vec<f64>)> {
    match kind {
        DistanceKind::EtaL2 => Ok(anchor_penalty(eta, lambda)),
        DistanceKind::EtaNorm => Ok(anchor_norm_penalty(eta, lambda)),
        DistanceKind::Kl => {
            let beta = beta_from_eta(eta)?;
            let value = lambda * kl_to_symmetric(&beta)?;
            let grad = kl_to_symmetric_grad(&beta)?
                .into_iter()
                .zip(elu_derivative(eta))
                .map(|(g, d)| lambda * g * d)
                .collect();
            Ok((value, grad))
        }
    }
}

/// Laplace (softmax-basis) approximation of Dir(β).
pub fn laplace_params(beta: &[f64]) -> Result<LaplaceParams> {
    check_beta(beta)?;
    let n = beta.len() as f64;
    let logs: Vec<f64> = beta.iter().map(|b| b.ln()).collect();
    let mean_log = logs.iter().sum::<f64>() / n;
    let inv_sum: f64 = beta.iter().map(|b| 1.0 / b).sum();
    Ok(LaplaceParams {
        mu: logs.iter().map(|l| l - mean_log).collect(),
        sigma_diag: beta
            .iter()
            .map(|b| (1.0 / b) * (1.0 - 2.0 / n) + inv_sum / (n * n))
            .collect(),
    })
}

/// Logit draw `mu + sqrt(Σ)·z` from the Laplace approximation.
pub fn laplace_sample(params: &LaplaceParams, rng: &mut Rng) -> Vec<f64> {
    params
        .mu
        .iter()
        .zip(&params.sigma_diag)
        .map(|(m, s)| m + s.sqrt() * rng.normal())
        .collect()
}

/// Lower bound on every Laplace variance entry when ‖β − 1‖₂ ≤ δ.
pub fn sigma_lower_bound(delta: f64, n_ops: usize) -> Result<f64> {
    ensure!(n_ops >= 2, Domain, "sigma_lower_bound needs at least two operations, got {n_ops}");
    ensure!(delta >= 0.0 && !delta.is_nan(), Domain, "delta must be non-negative, got {delta}");
    let n = n_ops as f64;
    let inv = 1.0 / (1.0 + delta);
    Ok(inv * (1.0 - 2.0 / n) + inv / n)
}

impl From<Vec<f64>> for SimplexSample {
    fn from(theta: Vec<f64>) -> Self {
        SimplexSample { theta }
    }
}
