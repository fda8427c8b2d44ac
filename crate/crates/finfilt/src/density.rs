//! Log-density evaluator abstraction.
//!
//! Grid densities, closed-form densities and exponential-manifold members all
//! enter the quadrature and projection machinery through the same interface:
//! a log-density callable plus a window expected to contain essentially all
//! of the probability mass.

/// A probability density on the real line, presented through its log.
pub trait Density {
    /// Natural log of the density at `x`; `-inf` outside the support.
    fn ln_pdf(&self, x: f64) -> f64;

    /// Window expected to contain essentially all probability mass. Adaptive
    /// quadrature may extend beyond it; it only seeds the mode search.
    fn support_hint(&self) -> (f64, f64);
}

impl<T: Density + ?Sized> Density for &T {
    fn ln_pdf(&self, x: f64) -> f64 {
        (**self).ln_pdf(x)
    }
    fn support_hint(&self) -> (f64, f64) {
        (**self).support_hint()
    }
}

pub(crate) const LN_2PI: f64 = 1.8378770664093453;

/// Closure-backed density with an explicit support window.
pub struct FnDensity<F: Fn(f64) -> f64> {
    ln_pdf: F,
    window: (f64, f64),
}

impl<F: Fn(f64) -> f64> FnDensity<F> {
    pub fn new(ln_pdf: F, window: (f64, f64)) -> Self {
        Self { ln_pdf, window }
    }
}

impl<F: Fn(f64) -> f64> Density for FnDensity<F> {
    fn ln_pdf(&self, x: f64) -> f64 {
        (self.ln_pdf)(x)
    }
    fn support_hint(&self) -> (f64, f64) {
        self.window
    }
}

/// Gaussian density N(mean, var) parameterized by mean and variance.
#[derive(Debug, Clone, Copy)]
pub struct Gaussian {
    pub mean: f64,
    pub var: f64,
}

impl Gaussian {
    pub fn new(mean: f64, var: f64) -> Self {
        assert!(var > 0.0, "Gaussian variance must be positive");
        Self { mean, var }
    }

    pub fn sd(&self) -> f64 {
        self.var.sqrt()
    }
}

impl Density for Gaussian {
    fn ln_pdf(&self, x: f64) -> f64 {
        let z = x - self.mean;
        -0.5 * (LN_2PI + self.var.ln()) - 0.5 * z * z / self.var
    }
    fn support_hint(&self) -> (f64, f64) {
        let w = 10.0 * self.sd();
        (self.mean - w, self.mean + w)
    }
}

/// Finite mixture of Gaussians; weights are normalized at construction.
#[derive(Debug, Clone)]
pub struct GaussianMixture {
    components: Vec<(f64, Gaussian)>,
}

impl GaussianMixture {
    /// `components` are (weight, mean, var) triples; weights must be
    /// nonnegative with a positive sum.
    pub fn new(components: &[(f64, f64, f64)]) -> Self {
        let total: f64 = components.iter().map(|c| c.0).sum();
        assert!(
            total > 0.0 && components.iter().all(|c| c.0 >= 0.0),
            "mixture weights must be nonnegative with positive sum"
        );
        Self {
            components: components
                .iter()
                .map(|&(w, m, v)| (w / total, Gaussian::new(m, v)))
                .collect(),
        }
    }

    pub fn components(&self) -> &[(f64, Gaussian)] {
        &self.components
    }

    /// Raw moment E[x^j], computed from the closed-form Gaussian moments.
    pub fn raw_moment(&self, j: usize) -> f64 {
        self.components
            .iter()
            .map(|(w, g)| w * gaussian_raw_moment(g.mean, g.var, j))
            .sum()
    }
}

/// Raw moment E[x^j] of N(mean, var) via the binomial expansion over central
/// moments (odd central moments vanish, even ones are var^{k} (2k-1)!!).
pub fn gaussian_raw_moment(mean: f64, var: f64, j: usize) -> f64 {
    let mut total = 0.0;
    let mut binom = 1.0; // C(j, k)
    for k in 0..=j {
        if k % 2 == 0 {
            let half = k / 2;
            let mut central = 1.0; // (k-1)!! var^{k/2}
            for i in 0..half {
                central *= (2 * i + 1) as f64 * var;
            }
            total += binom * central * mean.powi((j - k) as i32);
        }
        binom = binom * (j - k) as f64 / (k + 1) as f64;
    }
    total
}

impl Density for GaussianMixture {
    fn ln_pdf(&self, x: f64) -> f64 {
        let logs: Vec<f64> = self
            .components
            .iter()
            .map(|(w, g)| w.ln() + g.ln_pdf(x))
            .collect();
        let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !m.is_finite() {
            return f64::NEG_INFINITY;
        }
        m + logs.iter().map(|l| (l - m).exp()).sum::<f64>().ln()
    }
    fn support_hint(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (_, g) in &self.components {
            let (a, b) = g.support_hint();
            lo = lo.min(a);
            hi = hi.max(b);
        }
        (lo, hi)
    }
}
