//! Grid-based exact Bayes filter for the stochastic volatility model.
//!
//! The conditional density is updated point by point on a truncated uniform
//! grid: prediction is a direct quadrature convolution with the Gaussian
//! transition kernel, correction multiplies by the observation likelihood
//! and renormalizes with the trapezoid rule. Direct O(N²) convolution is
//! deliberate: the kernel is not shift-invariant in (x, u) when ρ ≠ 1, and
//! the oracle's job is correctness, not speed.

use crate::density::Density;
use crate::error::{Error, Result};
use crate::expfam::MomentVector;
use crate::svm_filter::{ln_observation_density, SvmParams};
use serde::{Deserialize, Serialize};

/// Relative tail mass at a grid boundary that triggers auto-extension.
const TAIL_LIMIT: f64 = 1e-10;

/// A density tabulated on a uniform grid, normalized so that its trapezoid
/// integral is 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridDensity {
    lo: f64,
    step: f64,
    values: Vec<f64>,
}

impl GridDensity {
    /// Builds a grid density from raw nonnegative values, normalizing them.
    pub fn from_values(lo: f64, step: f64, values: Vec<f64>) -> Result<Self> {
        if values.len() < 3 || !(step > 0.0) || !lo.is_finite() {
            return Err(Error::InvalidParameter(
                "grid needs >= 3 nodes, positive spacing and a finite origin".into(),
            ));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidParameter(
                "grid values must be finite and nonnegative".into(),
            ));
        }
        let mut d = Self { lo, step, values };
        let z = d.integral();
        if !(z > 0.0) || !z.is_finite() {
            return Err(Error::PosteriorUnderflow);
        }
        for v in &mut d.values {
            *v /= z;
        }
        Ok(d)
    }

    /// Discretizes a log-density evaluator on `n + 1` nodes spanning
    /// [lo, hi].
    pub fn from_density(d: &impl Density, lo: f64, hi: f64, n: usize) -> Result<Self> {
        if !(hi > lo) || n < 2 {
            return Err(Error::InvalidParameter(
                "need hi > lo and at least 2 intervals".into(),
            ));
        }
        let step = (hi - lo) / n as f64;
        let ln_vals: Vec<f64> = (0..=n).map(|i| d.ln_pdf(lo + i as f64 * step)).collect();
        let peak = ln_vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !peak.is_finite() {
            return Err(Error::PosteriorUnderflow);
        }
        let values = ln_vals.iter().map(|l| (l - peak).exp()).collect();
        Self::from_values(lo, step, values)
    }

    /// Default grid for the volatility filter: 4001 nodes spanning the
    /// initial mean ± 10 stationary standard deviations of the latent AR(1)
    /// (falling back to ±10σ·√10 for non-stationary parameters), widened to
    /// cover the initial density's own support hint.
    pub fn default_grid_for(
        params: &SvmParams,
        initial: &impl Density,
    ) -> Result<Self> {
        let sd = params
            .stationary_sd()
            .unwrap_or(params.sigma * 10f64.sqrt());
        let (ilo, ihi) = initial.support_hint();
        let lo = (-10.0 * sd).min(ilo);
        let hi = (10.0 * sd).max(ihi);
        Self::from_density(initial, lo, hi, 4000)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn node(&self, i: usize) -> f64 {
        self.lo + i as f64 * self.step
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.values.len()).map(|i| self.node(i))
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.lo, self.node(self.values.len() - 1))
    }

    fn trapezoid_weight(&self, i: usize) -> f64 {
        if i == 0 || i == self.values.len() - 1 {
            0.5 * self.step
        } else {
            self.step
        }
    }

    /// Trapezoid integral of the tabulated values; 1 after normalization.
    pub fn integral(&self) -> f64 {
        self.values
            .iter()
            .enumerate()
            .map(|(i, v)| self.trapezoid_weight(i) * v)
            .sum()
    }

    /// Trapezoid moments (η₁, …, η_K).
    pub fn moments(&self, count: usize) -> Result<MomentVector> {
        let mut eta = vec![0.0; count];
        for (i, v) in self.values.iter().enumerate() {
            let w = self.trapezoid_weight(i) * v;
            let x = self.node(i);
            let mut xp = x;
            for e in eta.iter_mut() {
                *e += w * xp;
                xp *= x;
            }
        }
        MomentVector::normalized(eta)
    }

    pub fn mean(&self) -> f64 {
        self.moments(1).map(|m| m.eta()[0]).unwrap_or(f64::NAN)
    }

    pub fn variance(&self) -> f64 {
        match self.moments(2) {
            Ok(m) => {
                let eta = m.eta();
                eta[1] - eta[0] * eta[0]
            }
            Err(_) => f64::NAN,
        }
    }

    /// E[g(x)] by the trapezoid rule.
    pub fn expect(&self, mut g: impl FnMut(f64) -> f64) -> f64 {
        self.values
            .iter()
            .enumerate()
            .map(|(i, v)| self.trapezoid_weight(i) * v * g(self.node(i)))
            .sum()
    }

    /// Relative mass sitting in the outermost cell on each side.
    fn boundary_mass(&self) -> (f64, f64) {
        let n = self.values.len();
        let left = 0.5 * (self.values[0] + self.values[1]) * self.step;
        let right = 0.5 * (self.values[n - 1] + self.values[n - 2]) * self.step;
        (left, right)
    }
}

impl Density for GridDensity {
    /// Log of the linearly interpolated tabulated value; −inf outside.
    fn ln_pdf(&self, x: f64) -> f64 {
        let t = (x - self.lo) / self.step;
        if t < 0.0 || t > (self.values.len() - 1) as f64 {
            return f64::NEG_INFINITY;
        }
        let i = (t.floor() as usize).min(self.values.len() - 2);
        let frac = t - i as f64;
        let v = self.values[i] * (1.0 - frac) + self.values[i + 1] * frac;
        v.ln()
    }
    fn support_hint(&self) -> (f64, f64) {
        self.bounds()
    }
}

/// One exact Bayes update: posterior(x) ∝ p_{N(0, exp(x+γ))}(y) ·
/// ∫ p_{N(x, σ²)}(ρu) prior(u) du, normalized by the trapezoid rule.
/// The grid auto-extends while boundary tail mass exceeds 1e-10.
pub fn bayes_step(prior: &GridDensity, y: f64, params: &SvmParams) -> Result<GridDensity> {
    if !y.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "observation must be finite, got {y}"
        )));
    }
    let (plo, phi) = prior.bounds();
    let mut lo = plo;
    let mut hi = phi;
    for _ in 0..12 {
        let n = ((hi - lo) / prior.step()).round() as usize;
        let post = bayes_on_window(prior, y, params, lo, hi, n)?;
        let (l, r) = post.boundary_mass();
        let mut extended = false;
        let width = hi - lo;
        if l > TAIL_LIMIT {
            lo -= 0.25 * width;
            extended = true;
        }
        if r > TAIL_LIMIT {
            hi += 0.25 * width;
            extended = true;
        }
        if !extended {
            return Ok(post);
        }
    }
    Err(Error::QuadratureNonConvergence(
        "posterior grid kept extending without the tails decaying".into(),
    ))
}

fn bayes_on_window(
    prior: &GridDensity,
    y: f64,
    params: &SvmParams,
    lo: f64,
    hi: f64,
    n: usize,
) -> Result<GridDensity> {
    let step = (hi - lo) / n as f64;
    let sigma = params.sigma;
    let rho = params.rho;
    let ln_norm = -(0.5 * crate::density::LN_2PI + sigma.ln());
    // Kernel support truncation: the Gaussian transition is below 1e-16 of
    // its peak past 8.6 sigma.
    let reach = 8.6 * sigma;

    let mut ln_post = vec![f64::NEG_INFINITY; n + 1];
    for (i, lp) in ln_post.iter_mut().enumerate() {
        let x = lo + i as f64 * step;
        let mut pred = 0.0;
        for (k, v) in prior.values().iter().enumerate() {
            if *v == 0.0 {
                continue;
            }
            let z = x - rho * prior.node(k);
            if z.abs() > reach {
                continue;
            }
            pred += prior.trapezoid_weight(k) * v * (-0.5 * z * z / (sigma * sigma)).exp();
        }
        if pred > 0.0 {
            *lp = pred.ln() + ln_norm + ln_observation_density(y, x, params.gamma);
        }
    }
    let peak = ln_post.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    // The unnormalized posterior (including the Gaussian normalizing
    // constants dropped from ln_post, all O(1) here) is below the smallest
    // positive float everywhere: the observation contradicts the prior.
    if !peak.is_finite() || peak < -708.0 {
        return Err(Error::PosteriorUnderflow);
    }
    let values: Vec<f64> = ln_post.iter().map(|l| (l - peak).exp()).collect();
    if values.iter().filter(|v| **v > 0.0).count() < 3 {
        // A posterior the grid cannot resolve (fewer than three live nodes)
        // is indistinguishable from underflow for every downstream use.
        return Err(Error::PosteriorUnderflow);
    }
    GridDensity::from_values(lo, step, values)
}

/// D(d, q) = E_d[log d − log q] by the trapezoid rule. Errors if `q`
/// underflows anywhere the grid carries mass.
pub fn kl_to_grid(d: &GridDensity, q: &impl Density) -> Result<f64> {
    let mut acc = 0.0;
    for (i, v) in d.values().iter().enumerate() {
        if *v == 0.0 {
            continue;
        }
        let lq = q.ln_pdf(d.node(i));
        if lq < -700.0 {
            return Err(Error::DomainMismatch {
                captured: f64::NEG_INFINITY,
            });
        }
        acc += d.trapezoid_weight(i) * v * (v.ln() - lq);
    }
    Ok(acc)
}

/// Folds the exact Bayes update over an observation series, returning the
/// posterior after each step.
pub fn run_grid_filter(
    observations: &[f64],
    params: &SvmParams,
    initial: GridDensity,
) -> Result<Vec<GridDensity>> {
    let mut state = initial;
    let mut out = Vec::with_capacity(observations.len());
    for (i, &y) in observations.iter().enumerate() {
        state = bayes_step(&state, y, params).map_err(|e| e.at_step(i))?;
        out.push(state.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::Gaussian;
    use crate::expfam::ExpFamilyDensity;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn desk_params() -> SvmParams {
        SvmParams::new(0.9, 0.5, 0.0).unwrap()
    }

    #[test]
    fn grid_moments_of_discretized_gaussian() {
        let g = GridDensity::from_density(&Gaussian::new(0.0, 1.0), -8.0, 8.0, 4000).unwrap();
        let eta = g.moments(4).unwrap().eta();
        assert_relative_eq!(eta[0], 0.0, epsilon = 1e-6);
        assert_relative_eq!(eta[1], 1.0, epsilon = 1e-6);
        assert_relative_eq!(eta[2], 0.0, epsilon = 1e-6);
        assert_relative_eq!(eta[3], 3.0, epsilon = 1e-6);
    }

    #[test]
    fn grid_moments_of_narrow_spike() {
        let g = GridDensity::from_density(&Gaussian::new(0.3, 1e-4), -1.0, 1.0, 4000).unwrap();
        let eta = g.moments(2).unwrap().eta();
        assert_relative_eq!(eta[0], 0.3, epsilon = 1e-6);
        assert_relative_eq!(eta[1], 0.09 + 1e-4, epsilon = 1e-6);
    }

    #[test]
    fn grid_moments_of_uniform_density() {
        let g = GridDensity::from_values(0.0, 1.0 / 2000.0, vec![1.0; 2001]).unwrap();
        let eta = g.moments(2).unwrap().eta();
        assert_relative_eq!(eta[0], 0.5, epsilon = 1e-6);
        assert_relative_eq!(eta[1], 1.0 / 3.0, epsilon = 1e-6);
    }

    #[test]
    fn zero_rho_severs_prior_dependence() {
        let params = SvmParams::new(0.0, 1.0, 0.3).unwrap();
        let p1 = GridDensity::from_density(&Gaussian::new(0.0, 1.0), -12.0, 12.0, 3000).unwrap();
        let p2 = GridDensity::from_density(&Gaussian::new(1.5, 0.2), -12.0, 12.0, 3000).unwrap();
        let a = bayes_step(&p1, 0.7, &params).unwrap();
        let b = bayes_step(&p2, 0.7, &params).unwrap();
        let tv: f64 = a
            .values()
            .iter()
            .zip(b.values())
            .enumerate()
            .map(|(i, (x, y))| a.trapezoid_weight(i) * (x - y).abs())
            .sum();
        assert!(tv < 1e-9, "total variation {tv}");
    }

    #[test]
    fn posterior_moments_match_importance_sampling() {
        // Monte Carlo oracle for the oracle: prior-predictive proposal with
        // likelihood weights.
        let params = SvmParams::new(1.0, 0.5, 0.0).unwrap();
        let prior = Gaussian::new(0.0, 1.0);
        let grid = GridDensity::from_density(&prior, -10.0, 10.0, 4000).unwrap();
        let post = bayes_step(&grid, 0.0, &params).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 1_000_000;
        let (mut sw, mut swx, mut swx2) = (0.0, 0.0, 0.0);
        let mut weights = Vec::with_capacity(n);
        let mut xs = Vec::with_capacity(n);
        for _ in 0..n {
            let u: f64 = rng.sample::<f64, _>(rand_distr::StandardNormal);
            let x = params.rho * u + params.sigma * rng.sample::<f64, _>(rand_distr::StandardNormal);
            let w = ln_observation_density(0.0, x, params.gamma).exp();
            sw += w;
            swx += w * x;
            swx2 += w * x * x;
            weights.push(w);
            xs.push(x);
        }
        let mean = swx / sw;
        let second = swx2 / sw;
        // ratio-estimator standard error for the weighted mean
        let wbar = sw / n as f64;
        let se_mean = (weights
            .iter()
            .zip(&xs)
            .map(|(w, x)| (w * (x - mean) / wbar).powi(2))
            .sum::<f64>()
            / (n as f64 * n as f64))
            .sqrt();
        let se_second = (weights
            .iter()
            .zip(&xs)
            .map(|(w, x)| (w * (x * x - second) / wbar).powi(2))
            .sum::<f64>()
            / (n as f64 * n as f64))
            .sqrt();
        let eta = post.moments(2).unwrap().eta();
        assert!(
            (eta[0] - mean).abs() < 3.0 * se_mean,
            "mean {} vs MC {} (3se {})",
            eta[0],
            mean,
            3.0 * se_mean
        );
        assert!(
            (eta[1] - second).abs() < 3.0 * se_second,
            "second {} vs MC {} (3se {})",
            eta[1],
            second,
            3.0 * se_second
        );
    }

    #[test]
    fn sequential_equals_joint_two_observation_update() {
        // Two bayes_step calls equal the marginal of the joint two-step
        // update evaluated with the same trapezoid sums.
        let params = desk_params();
        let prior = GridDensity::from_density(&Gaussian::new(0.0, 1.0), -12.0, 12.0, 1200).unwrap();
        let y = (0.1, -0.1);
        let p1 = bayes_step(&prior, y.0, &params).unwrap();
        let p2 = bayes_step(&p1, y.1, &params).unwrap();

        // Joint on the same node set: w(x1, x2) = lik1 lik2 K(x2; x1) pred1(x1)
        let n = p2.len();
        let sigma = params.sigma;
        let mut marginal = vec![0.0; n];
        // pred1 on p1's window equals the prior convolved once.
        let (lo1, hi1) = p1.bounds();
        let n1 = p1.len() - 1;
        let step1 = (hi1 - lo1) / n1 as f64;
        let mut pred1 = vec![0.0; n1 + 1];
        for (i, pr) in pred1.iter_mut().enumerate() {
            let x1 = lo1 + i as f64 * step1;
            let mut acc = 0.0;
            for (k, v) in prior.values().iter().enumerate() {
                let z = x1 - params.rho * prior.node(k);
                acc += prior.trapezoid_weight(k) * v * (-0.5 * z * z / (sigma * sigma)).exp();
            }
            *pr = acc * ln_observation_density(y.0, x1, params.gamma).exp();
        }
        for (j, m) in marginal.iter_mut().enumerate() {
            let x2 = p2.node(j);
            let mut acc = 0.0;
            for (i, p) in pred1.iter().enumerate() {
                let w1 = if i == 0 || i == n1 { 0.5 * step1 } else { step1 };
                let x1 = lo1 + i as f64 * step1;
                let z = x2 - params.rho * x1;
                acc += w1 * p * (-0.5 * z * z / (sigma * sigma)).exp();
            }
            *m = acc * ln_observation_density(y.1, x2, params.gamma).exp();
        }
        let joint = GridDensity::from_values(p2.bounds().0, p2.step(), marginal).unwrap();
        let seq = p2.moments(2).unwrap().eta();
        let jnt = joint.moments(2).unwrap().eta();
        assert_relative_eq!(seq[0], jnt[0], epsilon = 1e-10);
        assert_relative_eq!(seq[1], jnt[1], epsilon = 1e-10);
    }

    #[test]
    fn refinement_is_converged_at_default_resolution() {
        let params = SvmParams::new(0.95, 0.26, -9.0).unwrap();
        let initial = Gaussian::new(0.0, 1.0);
        let coarse = GridDensity::from_density(&initial, -9.0, 9.0, 4000).unwrap();
        let fine = GridDensity::from_density(&initial, -9.0, 9.0, 8000).unwrap();
        let y = 0.002;
        let a = bayes_step(&coarse, y, &params).unwrap();
        let b = bayes_step(&fine, y, &params).unwrap();
        let ea = a.moments(2).unwrap().eta();
        let eb = b.moments(2).unwrap().eta();
        assert!((ea[0] - eb[0]).abs() < 1e-6, "Richardson mean gap {}", ea[0] - eb[0]);
        assert!((ea[1] - eb[1]).abs() < 1e-6);
    }

    #[test]
    fn large_state_noise_flattens_prior_dependence() {
        let p1 = GridDensity::from_density(&Gaussian::new(-1.0, 0.5), -40.0, 40.0, 2000).unwrap();
        let p2 = GridDensity::from_density(&Gaussian::new(1.0, 0.5), -40.0, 40.0, 2000).unwrap();
        let mut last_tv = f64::INFINITY;
        for sigma in [1.0, 2.0, 4.0, 8.0] {
            let params = SvmParams::new(0.9, sigma, 0.0).unwrap();
            let a = bayes_step(&p1, 0.3, &params).unwrap();
            let b = bayes_step(&p2, 0.3, &params).unwrap();
            let tv: f64 = a
                .values()
                .iter()
                .zip(b.values())
                .enumerate()
                .map(|(i, (x, y))| a.trapezoid_weight(i) * (x - y).abs())
                .sum();
            assert!(tv < last_tv, "TV should shrink with sigma: {tv} vs {last_tv}");
            last_tv = tv;
        }
    }

    #[test]
    fn kl_to_grid_mirrors_closed_forms() {
        let d = GridDensity::from_density(&Gaussian::new(0.0, 1.0), -10.0, 10.0, 8000).unwrap();
        let q_same = ExpFamilyDensity::gaussian(0.0, 1.0).unwrap();
        let q_shift = ExpFamilyDensity::gaussian(1.0, 1.0).unwrap();
        assert!(kl_to_grid(&d, &q_same).unwrap().abs() < 1e-6);
        assert_relative_eq!(kl_to_grid(&d, &q_shift).unwrap(), 0.5, epsilon = 1e-4);
    }

    #[test]
    fn incompatible_observation_underflows() {
        // Mass far in the left tail makes the likelihood term y²e^{-x}
        // astronomically negative.
        let prior = GridDensity::from_density(&Gaussian::new(-60.0, 0.01), -61.0, -59.0, 500)
            .unwrap();
        let params = SvmParams::new(1.0, 0.001, 0.0).unwrap();
        let err = bayes_step(&prior, 1e6, &params).unwrap_err();
        assert!(matches!(err, Error::PosteriorUnderflow | Error::QuadratureNonConvergence(_)));
    }

    #[test]
    fn grid_auto_extends_when_posterior_drifts() {
        // ρ = 1 with a prior hugging the right edge pushes mass outside.
        let prior = GridDensity::from_density(&Gaussian::new(1.8, 0.04), -2.0, 2.0, 400).unwrap();
        let params = SvmParams::new(1.0, 0.4, 0.0).unwrap();
        let post = bayes_step(&prior, 0.1, &params).unwrap();
        let (_, hi) = post.bounds();
        assert!(hi > 2.0, "grid should have extended right, bounds {:?}", post.bounds());
        let (l, r) = post.boundary_mass();
        assert!(l < TAIL_LIMIT && r < TAIL_LIMIT);
    }
}
