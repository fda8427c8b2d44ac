//! Multi-factor Cox-Ingersoll-Ross term structure model.
//!
//! The spot rate is the sum of K independent square-root factors
//! `dX^j = k_j (θ_j − X^j) dt + σ_j √X^j dW^j` under the objective measure;
//! pricing shifts the mean reversion by the market price of risk λ_j. Yields
//! are affine in the factors,
//!
//! ```text
//! y_t(T) = −(1/T) Σ_j [ln φ(α_j, T) − ψ(α_j, T) X_t^j] = χ(T) + Ψ(T)·X_t,
//! ```
//!
//! with the usual closed forms for φ and ψ driven by
//! h_j = (k_j + λ_j)² + 2σ_j². Observed yields add per-maturity Gaussian
//! noise δ_i ε. All evaluation here is in log/exp(−T√h) form so large
//! maturities never overflow.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

/// Parameters of one square-root factor.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CirFactor {
    /// Mean-reversion speed k > 0 (1/time).
    pub k: f64,
    /// Long-run level θ > 0.
    pub theta: f64,
    /// Volatility σ > 0.
    pub sigma: f64,
    /// Market price of risk λ (enters pricing through k + λ).
    pub lambda: f64,
}

impl CirFactor {
    /// h = (k + λ)² + 2σ², always positive.
    pub fn h(&self) -> f64 {
        let s = self.k + self.lambda;
        s * s + 2.0 * self.sigma * self.sigma
    }

    /// Whether 2kθ ≥ σ² (the boundary non-attainment condition).
    pub fn feller_satisfied(&self) -> bool {
        2.0 * self.k * self.theta >= self.sigma * self.sigma
    }

    /// Stationary mean θ and variance σ²θ/(2k).
    pub fn stationary_moments(&self) -> (f64, f64) {
        (
            self.theta,
            self.sigma * self.sigma * self.theta / (2.0 * self.k),
        )
    }
}

/// Full model: per-factor parameters plus measurement-noise standard
/// deviations, one per maturity slot (a single entry broadcasts when the
/// number of maturities varies over time).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CirParams {
    pub factors: Vec<CirFactor>,
    pub delta: Vec<f64>,
}

impl CirParams {
    pub fn new(factors: Vec<CirFactor>, delta: Vec<f64>) -> Result<Self> {
        if factors.is_empty() {
            return Err(Error::InvalidParameter("need at least one factor".into()));
        }
        for (j, f) in factors.iter().enumerate() {
            if !(f.k > 0.0 && f.theta > 0.0 && f.sigma > 0.0)
                || !f.k.is_finite()
                || !f.theta.is_finite()
                || !f.sigma.is_finite()
                || !f.lambda.is_finite()
            {
                return Err(Error::InvalidParameter(format!(
                    "factor {j}: k, theta, sigma must be positive and finite, lambda finite"
                )));
            }
            if !f.feller_satisfied() {
                log::warn!(
                    "factor {j}: 2kθ = {:.4e} < σ² = {:.4e}; origin is attainable",
                    2.0 * f.k * f.theta,
                    f.sigma * f.sigma
                );
            }
        }
        if delta.is_empty() || delta.iter().any(|d| !(d > &0.0) || !d.is_finite()) {
            return Err(Error::InvalidParameter(
                "measurement noise deltas must be positive and finite".into(),
            ));
        }
        Ok(Self { factors, delta })
    }

    pub fn n_factors(&self) -> usize {
        self.factors.len()
    }

    /// Noise standard deviations for an observation with `n` maturities:
    /// exact match or scalar broadcast.
    pub fn delta_for(&self, n: usize) -> Result<Vec<f64>> {
        if self.delta.len() == n {
            Ok(self.delta.clone())
        } else if self.delta.len() == 1 {
            Ok(vec![self.delta[0]; n])
        } else {
            Err(Error::InvalidParameter(format!(
                "{} noise slots cannot serve {} maturities (exact match or scalar broadcast)",
                self.delta.len(),
                n
            )))
        }
    }
}

/// Factor values; componentwise nonnegative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorState(pub Vec<f64>);

impl FactorState {
    pub fn new(x: Vec<f64>) -> Result<Self> {
        if x.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidParameter(
                "factor values must be finite and nonnegative".into(),
            ));
        }
        Ok(Self(x))
    }

    /// The instantaneous spot rate r = Σ_j x_j.
    pub fn short_rate(&self) -> f64 {
        self.0.iter().sum()
    }
}

/// One cross-section of observed yields.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct YieldObservation {
    pub t: usize,
    pub maturities: Vec<f64>,
    pub yields: Vec<f64>,
}

impl YieldObservation {
    pub fn new(t: usize, maturities: Vec<f64>, yields: Vec<f64>) -> Result<Self> {
        if maturities.is_empty() || maturities.len() != yields.len() {
            return Err(Error::InvalidParameter(
                "maturities and yields must be non-empty and equally long".into(),
            ));
        }
        if maturities.windows(2).any(|w| w[0] >= w[1]) || maturities[0] <= 0.0 {
            return Err(Error::InvalidParameter(
                "maturities must be strictly positive and strictly increasing".into(),
            ));
        }
        if yields.iter().any(|y| !y.is_finite()) {
            return Err(Error::InvalidParameter("yields must be finite".into()));
        }
        Ok(Self {
            t,
            maturities,
            yields,
        })
    }

    pub fn len(&self) -> usize {
        self.maturities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maturities.is_empty()
    }
}

/// ln φ(α_j, T), evaluated through exp(−T√h) so large T√h never overflows:
///
/// ```text
/// ln φ = (2kθ/σ²) [ln(2√h) + aT/2 − T√h − ln(a + (2√h − a) e^{−T√h})],
/// a = k + λ + √h.
/// ```
pub fn ln_phi(f: &CirFactor, t_mat: f64) -> f64 {
    let g = f.h().sqrt();
    let a = f.k + f.lambda + g;
    let e = t_mat * g;
    let q = (-e).exp();
    let expo = 2.0 * f.k * f.theta / (f.sigma * f.sigma);
    expo * ((2.0 * g).ln() + 0.5 * a * t_mat - e - (a + (2.0 * g - a) * q).ln())
}

/// φ(α_j, T) itself; log-space evaluation guards the overflow region.
pub fn phi(f: &CirFactor, t_mat: f64) -> f64 {
    ln_phi(f, t_mat).exp()
}

/// ψ(α_j, T) = 2(e^{T√h} − 1) / (2√h + a(e^{T√h} − 1)), computed in the
/// equivalent form 2(1 − q) / (a + (2√h − a)q), q = e^{−T√h}, which is
/// stable for every T and tends to 2/a as T grows.
pub fn psi_fn(f: &CirFactor, t_mat: f64) -> f64 {
    let g = f.h().sqrt();
    let a = f.k + f.lambda + g;
    let q = (-t_mat * g).exp();
    let one_minus_q = -(-t_mat * g).exp_m1();
    2.0 * one_minus_q / (a + (2.0 * g - a) * q)
}

/// Model yield y = −(1/T) Σ_j [ln φ_j(T) − ψ_j(T) x_j].
pub fn model_yield(params: &CirParams, x: &FactorState, t_mat: f64) -> Result<f64> {
    if !(t_mat > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "maturity must be positive, got {t_mat}"
        )));
    }
    if x.0.len() != params.n_factors() {
        return Err(Error::InvalidParameter(format!(
            "state has {} factors, model has {}",
            x.0.len(),
            params.n_factors()
        )));
    }
    let mut acc = 0.0;
    for (f, xj) in params.factors.iter().zip(&x.0) {
        acc += ln_phi(f, t_mat) - psi_fn(f, t_mat) * xj;
    }
    Ok(-acc / t_mat)
}

/// The affine observation map: intercept χ_i = −(1/T_i) Σ_j ln φ_j(T_i) and
/// loading matrix Ψ_{i,j} = ψ_j(T_i)/T_i, so y = χ + Ψ x.
pub fn yield_affine(params: &CirParams, maturities: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if maturities.iter().any(|t| !(*t > 0.0)) {
        return Err(Error::InvalidParameter(
            "maturities must be positive".into(),
        ));
    }
    let n = maturities.len();
    let k = params.n_factors();
    let mut chi = DVector::zeros(n);
    let mut psi_mat = DMatrix::zeros(n, k);
    for (i, &t) in maturities.iter().enumerate() {
        let mut acc = 0.0;
        for (j, f) in params.factors.iter().enumerate() {
            acc += ln_phi(f, t);
            psi_mat[(i, j)] = psi_fn(f, t) / t;
        }
        chi[i] = -acc / t;
    }
    Ok((chi, psi_mat))
}

/// Partial derivatives of ln φ and ψ with respect to (k, θ, σ, λ) at one
/// maturity, in the same stable q = e^{−T√h} parameterization. These feed
/// the measurement Jacobian of the augmented-state filter.
#[derive(Debug, Clone, Copy)]
pub struct CoeffGradients {
    pub dlnphi: [f64; 4],
    pub dpsi: [f64; 4],
}

pub fn coeff_gradients(f: &CirFactor, t_mat: f64) -> CoeffGradients {
    let s = f.k + f.lambda;
    let g = f.h().sqrt();
    let a = s + g;
    let e = t_mat * g;
    let q = (-e).exp();
    let one_minus_q = -(-e).exp_m1();
    let denom = a + (2.0 * g - a) * q;
    let expo = 2.0 * f.k * f.theta / (f.sigma * f.sigma);
    let big_l = (2.0 * g).ln() + 0.5 * a * t_mat - e - denom.ln();

    // ψ = 2(1−q)/denom; partials at fixed g and via g.
    let psi = 2.0 * one_minus_q / denom;
    let psi_s = -0.5 * psi * psi;
    let psi_g = 2.0 * t_mat / denom
        - 2.0 * one_minus_q * ((1.0 + a * t_mat) + q) / (denom * denom);
    // L partials: L_s at fixed g, L_g at fixed s.
    let l_s = 0.5 * t_mat - one_minus_q / denom;
    let l_g = 1.0 / g + 0.5 * t_mat - ((1.0 + a * t_mat) + q) / denom;
    // dg/dk = dg/dλ = s/g, dg/dσ = 2σ/g.
    let dg_ds = s / g;
    let dg_dsigma = 2.0 * f.sigma / g;

    let dl_dk = l_s + l_g * dg_ds;
    let dl_dsigma = l_g * dg_dsigma;

    let dlnphi_k = (2.0 * f.theta / (f.sigma * f.sigma)) * big_l + expo * dl_dk;
    let dlnphi_theta = (2.0 * f.k / (f.sigma * f.sigma)) * big_l;
    let dlnphi_sigma = (-2.0 * expo / f.sigma) * big_l + expo * dl_dsigma;
    // λ enters only through s = k + λ, without the exponent's k-dependence.
    let dlnphi_lambda = expo * dl_dk;

    let dpsi_k = psi_s + psi_g * dg_ds;
    let dpsi_sigma = psi_g * dg_dsigma;

    CoeffGradients {
        dlnphi: [dlnphi_k, dlnphi_theta, dlnphi_sigma, dlnphi_lambda],
        dpsi: [dpsi_k, 0.0, dpsi_sigma, dpsi_k],
    }
}

/// Exact one-step transition X_{t+dt} | X_t = x of a CIR factor: the scaled
/// non-central χ² law, sampled by the gamma-Poisson mixture representation
/// (N ~ Poisson(nc/2), then Gamma(ν/2 + N, scale 2), scaled by c).
pub fn sample_cir_transition(f: &CirFactor, x: f64, dt: f64, rng: &mut impl Rng) -> f64 {
    let ekt = (-f.k * dt).exp();
    let c = f.sigma * f.sigma * (1.0 - ekt) / (4.0 * f.k);
    if c < 1e-300 {
        // σ → 0 (or dt → 0): the transition degenerates onto the drift ODE.
        return f.theta + (x - f.theta) * ekt;
    }
    let df = 4.0 * f.k * f.theta / (f.sigma * f.sigma);
    let nc = x * ekt / c;
    let j = if nc > 0.0 {
        Poisson::new(0.5 * nc).expect("positive Poisson mean").sample(rng)
    } else {
        0.0
    };
    let shape = 0.5 * df + j;
    let gamma = Gamma::new(shape, 2.0).expect("positive gamma shape");
    c * gamma.sample(rng)
}

/// Simulates all factors over `n` steps of size `dt` by exact transition
/// sampling. Each factor draws from its own generator stream, so paths are
/// reproducible regardless of factor count or evaluation order.
pub fn simulate_factors(
    params: &CirParams,
    x0: &FactorState,
    dt: f64,
    n: usize,
    seed: u64,
) -> Result<Vec<FactorState>> {
    if !(dt > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "step size must be positive, got {dt}"
        )));
    }
    if x0.0.len() != params.n_factors() {
        return Err(Error::InvalidParameter(
            "initial state dimension mismatch".into(),
        ));
    }
    let k = params.n_factors();
    let mut paths: Vec<Vec<f64>> = vec![Vec::with_capacity(n + 1); k];
    for (j, f) in params.factors.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(j as u64 + 1);
        let mut x = x0.0[j];
        paths[j].push(x);
        for _ in 0..n {
            x = sample_cir_transition(f, x, dt, &mut rng);
            paths[j].push(x);
        }
    }
    (0..=n)
        .map(|t| FactorState::new((0..k).map(|j| paths[j][t]).collect()))
        .collect()
}

/// Observes yields at the given maturities with fresh measurement noise.
pub fn observe_yields(
    params: &CirParams,
    x: &FactorState,
    maturities: &[f64],
    t: usize,
    seed: u64,
) -> Result<YieldObservation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    observe_yields_with(params, x, maturities, t, &mut rng)
}

/// As [`observe_yields`] but drawing noise from a caller-managed generator,
/// for panel simulation.
pub fn observe_yields_with(
    params: &CirParams,
    x: &FactorState,
    maturities: &[f64],
    t: usize,
    rng: &mut impl Rng,
) -> Result<YieldObservation> {
    let delta = params.delta_for(maturities.len())?;
    let mut yields = Vec::with_capacity(maturities.len());
    for (i, &tau) in maturities.iter().enumerate() {
        let eps: f64 = rng.sample(StandardNormal);
        yields.push(model_yield(params, x, tau)? + delta[i] * eps);
    }
    YieldObservation::new(t, maturities.to_vec(), yields)
}

/// Simulates a factor path and the corresponding yield panel at fixed
/// maturities, one observation per step.
pub fn simulate_panel(
    params: &CirParams,
    x0: &FactorState,
    maturities: &[f64],
    n: usize,
    dt: f64,
    seed: u64,
) -> Result<(Vec<FactorState>, Vec<YieldObservation>)> {
    let path = simulate_factors(params, x0, dt, n, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    let mut panel = Vec::with_capacity(n);
    for (t, state) in path.iter().enumerate().skip(1) {
        panel.push(observe_yields_with(params, state, maturities, t, &mut rng)?);
    }
    Ok((path, panel))
}
