//! The logarithmic autoregressive stochastic volatility model
//!
//! ```text
//! X_{t+1} = ρ X_t + σ W_{t+1},        Y_t = exp((X_t + γ)/2) V_t,
//! ```
//!
//! with independent standard Gaussian noises W, V, plus the discrete-time
//! projection filter that keeps the conditional density of X inside EP(m).
//!
//! Each filter step pushes the current member through the Bayes kernel by
//! computing the unnormalized posterior moments
//!
//! ```text
//! α_j = ∫ x^j exp[-(x+γ)/2 - x²/(2σ²) - y² e^{-x-γ}/2]
//!          ∫ exp[-(ρ²u² - 2ρxu)/(2σ²)] p(u, θ) du dx
//! ```
//!
//! for j = 0..K (K = m or 2m depending on the recovery mode), normalizes to
//! η = α/α₀ and recovers canonical parameters for the next member. Both
//! integrals run on the shared mode-centered adaptive quadrature; the inner
//! integrand is exp(polynomial) because the transition kernel's quadratic
//! terms fold into the polynomial coefficients.

use crate::density::{Density, Gaussian, LN_2PI};
use crate::error::{Error, Result};
use crate::exact_oracle::GridDensity;
use crate::expfam::{
    self, ExpFamilyDensity, MomentVector, NewtonOptions,
};
use crate::quad::{self, Polynomial, QuadConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Parameters of the stochastic volatility model.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SvmParams {
    /// AR coefficient ρ of the latent log-variance.
    pub rho: f64,
    /// State noise standard deviation σ > 0.
    pub sigma: f64,
    /// Volatility level γ.
    pub gamma: f64,
}

impl SvmParams {
    pub fn new(rho: f64, sigma: f64, gamma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "state noise sigma must be positive and finite, got {sigma}"
            )));
        }
        if !rho.is_finite() || !gamma.is_finite() {
            return Err(Error::InvalidParameter(
                "rho and gamma must be finite".into(),
            ));
        }
        if rho.abs() >= 1.0 {
            log::warn!("|rho| = {} >= 1: latent state is non-stationary", rho.abs());
        }
        Ok(Self { rho, sigma, gamma })
    }

    pub fn is_stationary(&self) -> bool {
        self.rho.abs() < 1.0
    }

    /// Stationary standard deviation σ/√(1-ρ²) of the AR(1) state, when it
    /// exists.
    pub fn stationary_sd(&self) -> Option<f64> {
        self.is_stationary()
            .then(|| self.sigma / (1.0 - self.rho * self.rho).sqrt())
    }
}

/// Law of the initial latent state for simulation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum InitialLaw {
    Point(f64),
    Gaussian { mean: f64, var: f64 },
}

impl InitialLaw {
    fn sample(&self, rng: &mut impl Rng) -> f64 {
        match self {
            InitialLaw::Point(c) => *c,
            InitialLaw::Gaussian { mean, var } => {
                mean + var.sqrt() * rng.sample::<f64, _>(rand_distr::StandardNormal)
            }
        }
    }
}

/// One simulated trajectory of the model. Regenerating with the same seed
/// and parameters reproduces the path bit-exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SvmPath {
    /// Latent log-variance X_t.
    pub x: Vec<f64>,
    /// Observed log-returns Y_t = exp((X_t + γ)/2) V_t.
    pub y: Vec<f64>,
    pub seed: u64,
}

/// Simulates `n` steps of the model with X₀ drawn from `x0`.
pub fn simulate_svm(params: &SvmParams, n: usize, x0: &InitialLaw, seed: u64) -> Result<SvmPath> {
    if n == 0 {
        return Err(Error::InvalidParameter("path length must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut state = x0.sample(&mut rng);
    for _ in 0..n {
        x.push(state);
        let v: f64 = rng.sample(rand_distr::StandardNormal);
        y.push((0.5 * (state + params.gamma)).exp() * v);
        let w: f64 = rng.sample(rand_distr::StandardNormal);
        state = params.rho * state + params.sigma * w;
    }
    Ok(SvmPath { x, y, seed })
}

/// Which moment set drives the θ recovery at each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RecoveryMode {
    /// m posterior moments, damped-Newton recovery seeded at the previous θ.
    MMoments,
    /// 2m posterior moments, algebraic Hankel recovery polished by Newton;
    /// falls back to Newton from the previous θ if the solve is refused.
    TwoMMoments,
}

impl Default for RecoveryMode {
    fn default() -> Self {
        RecoveryMode::TwoMMoments
    }
}

/// Filter state after a step: the unnormalized posterior moments α (α₀ is
/// the one-step mass relative to the normalized incoming member, so the
/// recursion's degree-1 homogeneity never compounds magnitudes), and the
/// EP(m) member holding the recovered canonical parameters.
#[derive(Debug)]
pub struct ProjFilterState {
    time: usize,
    alpha: MomentVector,
    density: ExpFamilyDensity,
    mode: RecoveryMode,
    conversion_residual: f64,
}

impl ProjFilterState {
    pub fn time(&self) -> usize {
        self.time
    }

    pub fn order(&self) -> usize {
        self.density.order()
    }

    pub fn mode(&self) -> RecoveryMode {
        self.mode
    }

    /// Unnormalized moments (α₀, α₁, …, α_K).
    pub fn alpha(&self) -> &MomentVector {
        &self.alpha
    }

    /// Normalized posterior moments η = α/α₀.
    pub fn eta(&self) -> Vec<f64> {
        self.alpha.eta()
    }

    pub fn theta(&self) -> &[f64] {
        self.density.theta()
    }

    pub fn density(&self) -> &ExpFamilyDensity {
        &self.density
    }

    /// Sup-norm mismatch between the recovered member's first m moments and
    /// the posterior moments it was fit to.
    pub fn conversion_residual(&self) -> f64 {
        self.conversion_residual
    }
}

/// Builds the time-0 state by projecting an initial density onto EP(m),
/// with α₀(0) = 1 and α_i(0) = η_i(0).
pub fn init_state(
    initial: &impl Density,
    order: usize,
    mode: RecoveryMode,
) -> Result<ProjFilterState> {
    let density = expfam::kl_project(initial, order)?;
    let k = moment_count(order, mode);
    let eta = density.moments(k)?.eta();
    let mut alpha = Vec::with_capacity(k + 1);
    alpha.push(1.0);
    alpha.extend_from_slice(&eta);
    Ok(ProjFilterState {
        time: 0,
        alpha: MomentVector::unnormalized(alpha)?,
        density,
        mode,
        conversion_residual: 0.0,
    })
}

fn moment_count(order: usize, mode: RecoveryMode) -> usize {
    match mode {
        RecoveryMode::MMoments => order,
        RecoveryMode::TwoMMoments => 2 * order,
    }
}

/// The combined prediction kernel, reorganized so no large quantities cancel
/// through quadrature.
///
/// The raw step multiplies exp(-x²/(2σ²)) by the inner integral
/// `∫ exp[-(ρ²u² - 2ρxu)/(2σ²)] p(u, θ) du`, whose exponent is the member's
/// polynomial with c₁(x) = θ₁ + ρx/σ² added to the linear and
/// c₂ = θ₂ − ρ²/(2σ²) replacing the quadratic coefficient. For small σ both
/// factors are astronomically large with an O(1) product, so completing the
/// square in u and merging -x²/(2σ²) with the extracted constant -c₁²/(4c₂)
/// algebraically is required for the quadrature to see well-scaled numbers:
///
/// ```text
/// ln pred(x) = A(x) + ln ∫ exp[c₂ (u - s(x))² + Σ_{i≥3} θ_i u^i] du − ψ(θ),
/// A(x) = −θ₂/(2σ²c₂) x² − θ₁ρ/(2σ²c₂) x − θ₁²/(4c₂),   s(x) = −c₁(x)/(2c₂).
/// ```
///
/// A's coefficients stay O(θ) for any σ (they reproduce the exact Gaussian
/// predicted density when m = 2), and the shifted integrand is evaluated in
/// the (u − s) form so its quadratic part never suffers cancellation.
struct PredictionKernel {
    theta1: f64,
    c2: f64,
    /// θ₃.. θ_m (empty for m = 2).
    tail: Vec<f64>,
    a2: f64,
    a1: f64,
    a0: f64,
    rho_over_s2: f64,
    log_normalizer: f64,
    cfg: QuadConfig,
    /// For a purely quadratic shifted integrand the integral is translation
    /// invariant, hence independent of x; computed once.
    constant_shift_integral: Option<f64>,
}

impl PredictionKernel {
    fn new(theta: &[f64], log_normalizer: f64, params: &SvmParams, cfg: &QuadConfig) -> Result<Self> {
        let s2 = params.sigma * params.sigma;
        let rho = params.rho;
        let c2 = theta[1] - 0.5 * rho * rho / s2;
        if !(c2 < 0.0) {
            return Err(Error::InvalidParameter(format!(
                "prediction kernel quadratic coefficient must be negative, got {c2}"
            )));
        }
        let theta1 = theta[0];
        let denom = 2.0 * s2 * c2; // = 2σ²θ₂ − ρ² < 0
        let mut kernel = Self {
            theta1,
            c2,
            tail: theta[2..].to_vec(),
            a2: -theta[1] / denom,
            a1: -theta1 * rho / denom,
            a0: -theta1 * theta1 / (4.0 * c2),
            rho_over_s2: rho / s2,
            log_normalizer,
            cfg: cfg.clone(),
            constant_shift_integral: None,
        };
        if kernel.tail.iter().all(|t| *t == 0.0) {
            kernel.constant_shift_integral = Some(kernel.shift_integral(0.0)?);
        }
        Ok(kernel)
    }

    fn shift(&self, x: f64) -> f64 {
        -(self.theta1 + self.rho_over_s2 * x) / (2.0 * self.c2)
    }

    /// ln ∫ exp[c₂(u − s)² + tail(u)] du, adapted per shift.
    fn shift_integral(&self, s: f64) -> Result<f64> {
        let c2 = self.c2;
        let tail = &self.tail;
        let integrand = move |u: f64| {
            let d = u - s;
            let mut acc = 0.0;
            for &t in tail.iter().rev() {
                acc = (acc + t) * u;
            }
            c2 * d * d + acc * u * u
        };
        // Window from the expanded coefficients (evaluation stays in the
        // shifted form).
        let mut coeffs = vec![c2 * s * s, -2.0 * c2 * s, c2];
        coeffs.extend_from_slice(tail);
        let hint = Polynomial(coeffs).scan_window();
        let grid = quad::adapt(integrand, hint, 0, &self.cfg)?;
        Ok(grid.ln_mass())
    }

    /// ln of exp(-x²/(2σ²)) · ∫ exp[-(ρ²u²-2ρxu)/(2σ²)] p(u, θ) du.
    fn ln_predicted(&self, x: f64) -> Result<f64> {
        let shift_part = match self.constant_shift_integral {
            Some(v) => v,
            None => self.shift_integral(self.shift(x))?,
        };
        Ok((self.a2 * x + self.a1) * x + self.a0 + shift_part - self.log_normalizer)
    }
}

/// Advances the filter by one observation.
pub fn projection_step(
    state: &ProjFilterState,
    y: f64,
    params: &SvmParams,
) -> Result<ProjFilterState> {
    if !y.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "observation must be finite, got {y}"
        )));
    }
    let cfg = QuadConfig::default();
    let m = state.order();
    let k = moment_count(m, state.mode);
    let theta = state.theta().to_vec();
    let psi = state.density.log_normalizer();
    let gamma = params.gamma;

    let inner_cfg = QuadConfig {
        // The outer adaptation already controls the overall error; a
        // slightly looser inner tolerance keeps the nested cost down.
        rel_tol: 1e-11,
        ..QuadConfig::default()
    };
    let kernel = PredictionKernel::new(&theta, psi, params, &inner_cfg)?;
    let ln_g = |x: f64| -> f64 {
        match kernel.ln_predicted(x) {
            Ok(pred) => -0.5 * (x + gamma) - 0.5 * y * y * (-x - gamma).exp() + pred,
            Err(_) => f64::NEG_INFINITY,
        }
    };

    // Hint window around the predicted state.
    let eta = state.eta();
    let mean = eta[0];
    let sd = (eta[1] - mean * mean).max(0.0).sqrt();
    let spread =
        (params.rho * params.rho * sd * sd + params.sigma * params.sigma).sqrt();
    let center = params.rho * mean;
    let half = 12.0 * spread + 2.0;
    let grid = quad::adapt(ln_g, (center - half, center + half), k, &cfg)?;

    let alpha0 = grid.ln_mass().exp();
    if !(alpha0 > 0.0) || !alpha0.is_finite() {
        return Err(Error::PosteriorUnderflow);
    }
    let eta_new = grid.normalized_moments(k);
    let mut alpha_values = Vec::with_capacity(k + 1);
    alpha_values.push(alpha0);
    alpha_values.extend(eta_new.iter().map(|e| e * alpha0));
    let alpha = MomentVector::unnormalized(alpha_values)?;

    let theta_new = recover_theta(&eta_new, &theta, state.mode, m)?;
    let density = ExpFamilyDensity::from_theta(theta_new)?;
    let fitted = density.moments(m)?.eta();
    let conversion_residual = fitted
        .iter()
        .zip(&eta_new[..m])
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    Ok(ProjFilterState {
        time: state.time + 1,
        alpha,
        density,
        mode: state.mode,
        conversion_residual,
    })
}

/// θ recovery step: algebraic solve from 2m moments polished by Newton on
/// the first m, or Newton alone from the previous θ when only m moments are
/// carried (or when the algebraic solve is refused).
fn recover_theta(
    eta: &[f64],
    previous_theta: &[f64],
    mode: RecoveryMode,
    m: usize,
) -> Result<Vec<f64>> {
    let target = MomentVector::normalized(eta[..m].to_vec())?;
    let newton = NewtonOptions::default();
    match mode {
        RecoveryMode::MMoments => {
            expfam::theta_from_moments_iterative(&target, previous_theta, &newton)
        }
        RecoveryMode::TwoMMoments => {
            let full = MomentVector::normalized(eta[..2 * m].to_vec())?;
            match expfam::theta_from_moments_algebraic(&full) {
                Ok(seed) => {
                    expfam::theta_from_moments_iterative(&target, &seed, &newton).or_else(|_| {
                        expfam::theta_from_moments_iterative(&target, previous_theta, &newton)
                    })
                }
                Err(
                    Error::IllConditioned { .. }
                    | Error::BoundaryViolation { .. }
                    | Error::InconsistentMoments { .. }
                    | Error::NotPositiveDefinite(_),
                ) => expfam::theta_from_moments_iterative(&target, previous_theta, &newton),
                Err(e) => Err(e),
            }
        }
    }
}

/// Minimum-mean-square-error estimate of the volatility at the state's time:
/// `E[exp((x+γ)/2)] = e^{γ/2} exp(ψ(θ + e₁/2) − ψ(θ))`, via the exact
/// normalizer-shift identity for the moment generating function.
pub fn volatility_estimate(state: &ProjFilterState, params: &SvmParams) -> Result<f64> {
    let ln = state.density.ln_mgf(0.5)? + 0.5 * params.gamma;
    Ok(ln.exp())
}

/// One step of the filter output.
#[derive(Debug)]
pub struct FilterStep {
    pub state: ProjFilterState,
    pub volatility: f64,
}

/// Full filter run; on failure, `steps` holds everything computed before the
/// failing observation and `failure` carries the step index and cause.
#[derive(Debug)]
pub struct FilterOutput {
    pub steps: Vec<FilterStep>,
    pub failure: Option<Error>,
}

impl FilterOutput {
    pub fn is_complete(&self) -> bool {
        self.failure.is_none()
    }
}

/// Folds the projection step over an observation series. The initial density
/// describes the latent state one step before the first observation; each
/// output entry is the posterior for the latent state that generated the
/// corresponding observation.
pub fn run_filter(
    observations: &[f64],
    params: &SvmParams,
    order: usize,
    mode: RecoveryMode,
    initial: &impl Density,
) -> Result<FilterOutput> {
    if observations.is_empty() {
        return Err(Error::InvalidParameter(
            "observation series must be non-empty".into(),
        ));
    }
    let mut state = init_state(initial, order, mode)?;
    let mut steps = Vec::with_capacity(observations.len());
    for (i, &y) in observations.iter().enumerate() {
        match projection_step(&state, y, params).and_then(|next| {
            let volatility = volatility_estimate(&next, params)?;
            Ok((next, volatility))
        }) {
            Ok((next, volatility)) => {
                state = projection_clone(&next)?;
                steps.push(FilterStep {
                    state: next,
                    volatility,
                });
            }
            Err(e) => {
                return Ok(FilterOutput {
                    steps,
                    failure: Some(e.at_step(i)),
                })
            }
        }
    }
    Ok(FilterOutput {
        steps,
        failure: None,
    })
}

// ExpFamilyDensity carries a non-cloneable adapted grid; rebuilding from θ
// is the cheap, exact way to duplicate a state for the fold.
fn projection_clone(state: &ProjFilterState) -> Result<ProjFilterState> {
    Ok(ProjFilterState {
        time: state.time,
        alpha: state.alpha.clone(),
        density: ExpFamilyDensity::from_theta(state.theta().to_vec())?,
        mode: state.mode,
        conversion_residual: state.conversion_residual,
    })
}

/// Default non-informative initial density: a wide Gaussian N(0, 10), which
/// lies inside every EP(m).
pub fn default_initial() -> Gaussian {
    Gaussian::new(0.0, 10.0)
}

/// Reference posterior update on a tabulated grid, exposed here for
/// side-by-side runs; see [`crate::exact_oracle`].
pub fn oracle_posterior(prior: &GridDensity, y: f64, params: &SvmParams) -> Result<GridDensity> {
    crate::exact_oracle::bayes_step(prior, y, params)
}

/// Log-likelihood factor p(y | x) of one observation given the latent state.
pub(crate) fn ln_observation_density(y: f64, x: f64, gamma: f64) -> f64 {
    -0.5 * (LN_2PI + x + gamma) - 0.5 * y * y * (-x - gamma).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact_oracle::{self, GridDensity};
    use approx::assert_relative_eq;

    #[test]
    fn simulate_is_reproducible_and_degenerate_ar_holds() {
        // sigma tiny enough that c + sigma*w rounds to c in f64.
        let params = SvmParams::new(1.0, 1e-308, 0.0).unwrap();
        let path = simulate_svm(&params, 50, &InitialLaw::Point(0.7), 42).unwrap();
        assert!(path.x.iter().all(|&v| v == 0.7));
        let again = simulate_svm(&params, 50, &InitialLaw::Point(0.7), 42).unwrap();
        assert_eq!(path.y, again.y);
    }

    #[test]
    fn simulate_matches_stationary_variance() {
        let params = SvmParams::new(0.95, 0.3, 0.0).unwrap();
        let n = 100_000;
        let path = simulate_svm(
            &params,
            n,
            &InitialLaw::Gaussian {
                mean: 0.0,
                var: 0.923,
            },
            7,
        )
        .unwrap();
        let mean = path.x.iter().sum::<f64>() / n as f64;
        let var = path.x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let target = 0.09 / (1.0 - 0.95f64 * 0.95);
        // effective sample size of an AR(1) for variance estimation
        let n_eff = n as f64 * (1.0 - 0.95) / (1.0 + 0.95);
        let se = target * (2.0 / n_eff).sqrt();
        assert!(
            (var - target).abs() < 3.0 * se,
            "sample var {var} vs {target} (3se = {})",
            3.0 * se
        );
    }

    #[test]
    fn gamma_shift_scales_observations() {
        let base = SvmParams::new(0.9, 0.2, -1.0).unwrap();
        let shifted = SvmParams::new(0.9, 0.2, 1.0).unwrap();
        let p0 = simulate_svm(&base, 200, &InitialLaw::Point(0.0), 5).unwrap();
        let p1 = simulate_svm(&shifted, 200, &InitialLaw::Point(0.0), 5).unwrap();
        for (a, b) in p0.y.iter().zip(&p1.y) {
            assert_relative_eq!(*b, std::f64::consts::E * a, max_relative = 1e-12);
        }
    }

    #[test]
    fn zero_rho_posterior_is_prior_independent() {
        let params = SvmParams::new(0.0, 1.0, 0.0).unwrap();
        let a = init_state(&Gaussian::new(0.0, 1.0), 2, RecoveryMode::TwoMMoments).unwrap();
        let b = init_state(&Gaussian::new(2.0, 0.3), 2, RecoveryMode::TwoMMoments).unwrap();
        let pa = projection_step(&a, 0.4, &params).unwrap();
        let pb = projection_step(&b, 0.4, &params).unwrap();
        for (x, y) in pa.eta().iter().zip(pb.eta()) {
            assert_relative_eq!(*x, y, epsilon = 1e-9);
        }
    }

    #[test]
    fn one_step_matches_grid_oracle() {
        // One step from N(0, 0.04), ρ=0.9, σ=0.2, γ=−1, y=0.05, m=2:
        // posterior mean/variance against the 4000-point grid recursion.
        let params = SvmParams::new(0.9, 0.2, -1.0).unwrap();
        let prior = Gaussian::new(0.0, 0.04);
        let state = init_state(&prior, 2, RecoveryMode::TwoMMoments).unwrap();
        let stepped = projection_step(&state, 0.05, &params).unwrap();

        let grid_prior = GridDensity::from_density(&prior, -4.0, 4.0, 4000).unwrap();
        let post = exact_oracle::bayes_step(&grid_prior, 0.05, &params).unwrap();
        let oracle = post.moments(2).unwrap().eta();

        let eta = stepped.eta();
        assert!(
            (eta[0] - oracle[0]).abs() < 1e-4,
            "mean {} vs oracle {}",
            eta[0],
            oracle[0]
        );
        assert!(
            (eta[1] - oracle[1]).abs() < 1e-4,
            "second moment {} vs oracle {}",
            eta[1],
            oracle[1]
        );
        assert!(stepped.conversion_residual() < 1e-6);
    }

    #[test]
    fn richer_manifold_fits_at_least_as_well() {
        let params = SvmParams::new(0.9, 0.2, -1.0).unwrap();
        let prior = Gaussian::new(0.0, 0.04);
        let s2 = init_state(&prior, 2, RecoveryMode::TwoMMoments).unwrap();
        let s4 = init_state(&prior, 4, RecoveryMode::TwoMMoments).unwrap();
        let p2 = projection_step(&s2, 0.05, &params).unwrap();
        let p4 = projection_step(&s4, 0.05, &params).unwrap();

        let grid_prior = GridDensity::from_density(&prior, -4.0, 4.0, 4000).unwrap();
        let post = exact_oracle::bayes_step(&grid_prior, 0.05, &params).unwrap();
        let kl2 = exact_oracle::kl_to_grid(&post, p2.density()).unwrap();
        let kl4 = exact_oracle::kl_to_grid(&post, p4.density()).unwrap();
        assert!(
            kl4 <= kl2 + 1e-9,
            "KLI m=4 ({kl4}) should not exceed m=2 ({kl2})"
        );
    }

    #[test]
    fn volatility_estimates_closed_forms() {
        let state = init_state(&Gaussian::new(0.0, 1.0), 2, RecoveryMode::TwoMMoments).unwrap();
        let p0 = SvmParams::new(0.9, 0.2, 0.0).unwrap();
        let pm2 = SvmParams::new(0.9, 0.2, -2.0).unwrap();
        assert_relative_eq!(
            volatility_estimate(&state, &p0).unwrap(),
            1.1331484530668263,
            max_relative = 1e-8
        );
        assert_relative_eq!(
            volatility_estimate(&state, &pm2).unwrap(),
            0.4168620196785084,
            max_relative = 1e-8
        );
    }

    #[test]
    fn quartic_volatility_matches_grid_integration() {
        let density = ExpFamilyDensity::from_theta(vec![0.0, 0.0, 0.0, -1.0]).unwrap();
        let k = moment_count(4, RecoveryMode::MMoments);
        let eta = density.moments(k).unwrap().eta();
        let mut alpha = vec![1.0];
        alpha.extend_from_slice(&eta);
        let state = ProjFilterState {
            time: 0,
            alpha: MomentVector::unnormalized(alpha).unwrap(),
            density,
            mode: RecoveryMode::MMoments,
            conversion_residual: 0.0,
        };
        let params = SvmParams::new(0.9, 0.2, 0.0).unwrap();
        let vol = volatility_estimate(&state, &params).unwrap();
        // trapezoid oracle on [-6, 6]
        let n = 240_000;
        let h = 12.0 / n as f64;
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..=n {
            let x = -6.0 + i as f64 * h;
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            let f = (-x.powi(4)).exp();
            num += w * (0.5 * x).exp() * f;
            den += w * f;
        }
        assert_relative_eq!(vol, num / den, epsilon = 1e-8);
    }

    #[test]
    fn near_deterministic_run_tracks_closed_form() {
        // σ -> 0+, ρ = 1, initial concentrated at c: volatility stays at
        // exp((c+γ)/2).
        let c = -0.3;
        let gamma = -1.0;
        let params = SvmParams::new(1.0, 1e-4, gamma).unwrap();
        let path = simulate_svm(&params, 9, &InitialLaw::Point(c), 11).unwrap();
        let initial = Gaussian::new(c, 1e-6);
        let out = run_filter(&path.y[1..], &params, 2, RecoveryMode::TwoMMoments, &initial)
            .unwrap();
        assert!(out.is_complete(), "failure: {:?}", out.failure);
        let want = (0.5 * (c + gamma)).exp();
        for step in &out.steps {
            assert_relative_eq!(step.volatility, want, max_relative = 1e-3);
        }
    }

    #[test]
    fn zero_observation_is_handled() {
        let params = SvmParams::new(0.9, 0.2, -1.0).unwrap();
        let state = init_state(&Gaussian::new(0.0, 0.04), 2, RecoveryMode::TwoMMoments).unwrap();
        let stepped = projection_step(&state, 0.0, &params).unwrap();
        assert!(stepped.conversion_residual() < 1e-6);

        let grid_prior =
            GridDensity::from_density(&Gaussian::new(0.0, 0.04), -4.0, 4.0, 4000).unwrap();
        let post = exact_oracle::bayes_step(&grid_prior, 0.0, &params).unwrap();
        let oracle = post.moments(2).unwrap().eta();
        let eta = stepped.eta();
        assert!((eta[0] - oracle[0]).abs() < 1e-4);
    }

    #[test]
    fn alpha_rescaling_leaves_eta_and_theta_unchanged() {
        // The recursion is degree-1 homogeneous in the prior: the step only
        // reads θ, so states differing by an α rescale advance identically.
        let params = SvmParams::new(0.9, 0.2, -1.0).unwrap();
        let base = init_state(&Gaussian::new(0.1, 0.5), 2, RecoveryMode::TwoMMoments).unwrap();
        let scaled = ProjFilterState {
            time: base.time,
            alpha: MomentVector::unnormalized(
                base.alpha().values().iter().map(|v| 7.5 * v).collect(),
            )
            .unwrap(),
            density: ExpFamilyDensity::from_theta(base.theta().to_vec()).unwrap(),
            mode: base.mode,
            conversion_residual: 0.0,
        };
        assert_relative_eq!(scaled.eta()[0], base.eta()[0], epsilon = 1e-12);
        let a = projection_step(&base, 0.2, &params).unwrap();
        let b = projection_step(&scaled, 0.2, &params).unwrap();
        for (x, y) in a.eta().iter().zip(b.eta()) {
            assert_relative_eq!(*x, y, epsilon = 1e-12);
        }
        for (x, y) in a.theta().iter().zip(b.theta()) {
            assert_relative_eq!(*x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn failure_reports_step_index_with_partial_output() {
        let params = SvmParams::new(0.9, 0.2, -1.0).unwrap();
        let obs = [0.1, -0.05, f64::NAN, 0.2];
        let out = run_filter(&obs, &params, 2, RecoveryMode::TwoMMoments, &default_initial())
            .unwrap();
        assert_eq!(out.steps.len(), 2);
        match out.failure {
            Some(Error::FilterStep { step, .. }) => assert_eq!(step, 2),
            other => panic!("expected step-indexed failure, got {other:?}"),
        }
    }
}
