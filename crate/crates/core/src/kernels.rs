//! Stationary kernels: the Gaussian-spectrum basis bank, mixtures of it,
//! Gram matrices, and the fixed kernels used by the task generators.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Cholesky, Mat, JITTER_LADDER};
use crate::scalar::Scalar;

/// Gaussian spectral density with mean `mu` and diagonal variance `sigma2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralDensity<F> {
    pub mu: Vec<F>,
    pub sigma2: Vec<F>,
}

impl<F: Scalar> SpectralDensity<F> {
    pub fn new(mu: Vec<F>, sigma2: Vec<F>) -> Result<Self> {
        if mu.is_empty() || mu.len() != sigma2.len() {
            return Err(Error::shape(
                "spectral_density",
                format!("mu has {} dims, sigma2 has {}", mu.len(), sigma2.len()),
            ));
        }
        if sigma2.iter().any(|s| !(*s > F::zero()) || !s.is_finite()) {
            return Err(Error::domain("spectral_density", "sigma2 must be positive and finite"));
        }
        if mu.iter().any(|m| !m.is_finite()) {
            return Err(Error::domain("spectral_density", "mu must be finite"));
        }
        Ok(Self { mu, sigma2 })
    }

    /// One-dimensional density.
    pub fn scalar(mu: F, sigma2: F) -> Result<Self> {
        Self::new(vec![mu], vec![sigma2])
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Kernel value for a scalar lag; the density must be one-dimensional.
    pub fn eval(&self, tau: F) -> F {
        debug_assert_eq!(self.dim(), 1);
        sm_1d(self.mu[0], self.sigma2[0], tau)
    }
}

#[inline]
pub(crate) fn sm_1d<F: Scalar>(mu: F, sigma2: F, tau: F) -> F {
    let two_pi = F::two_pi();
    let quad = sigma2 * tau * tau;
    (-(two_pi * two_pi) * F::lit(0.5) * quad).exp() * (two_pi * (mu * tau)).cos()
}

/// `exp(−2π² τᵀΣτ)·cos(2π μᵀτ)`: the real Fourier transform of the density.
pub fn sm_kernel_eval<F: Scalar>(density: &SpectralDensity<F>, tau: &[F]) -> F {
    debug_assert_eq!(density.dim(), tau.len());
    let mut quad = F::zero();
    let mut lin = F::zero();
    for ((&m, &s), &t) in density.mu.iter().zip(&density.sigma2).zip(tau) {
        quad += s * t * t;
        lin += m * t;
    }
    let two_pi = F::two_pi();
    (-(two_pi * two_pi) * F::lit(0.5) * quad).exp() * (two_pi * lin).cos()
}

/// Ordered set of basis densities plus the observation noise level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelBank<F> {
    densities: Vec<SpectralDensity<F>>,
    sigma_eps: F,
}

impl<F: Scalar> KernelBank<F> {
    pub fn new(densities: Vec<SpectralDensity<F>>, sigma_eps: F) -> Result<Self> {
        let Some(first) = densities.first() else {
            return Err(Error::invalid("kernel bank needs at least one density"));
        };
        if !(sigma_eps > F::zero()) {
            return Err(Error::domain("kernel_bank", "sigma_eps must be positive"));
        }
        let dim = first.dim();
        if first.mu.iter().any(|m| *m != F::zero()) {
            return Err(Error::invalid("first density of a bank must have mu = 0"));
        }
        for (q, pair) in densities.windows(2).enumerate() {
            if pair[1].dim() != dim {
                return Err(Error::shape("kernel_bank", format!("density {} has dim {}", q + 1, pair[1].dim())));
            }
            if pair[0].mu.iter().zip(&pair[1].mu).any(|(a, b)| b < a) {
                return Err(Error::invalid(format!("mu not ordered between densities {q} and {}", q + 1)));
            }
        }
        Ok(Self { densities, sigma_eps })
    }

    pub fn len(&self) -> usize {
        self.densities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.densities.is_empty()
    }

    pub fn densities(&self) -> &[SpectralDensity<F>] {
        &self.densities
    }

    pub fn density(&self, q: usize) -> &SpectralDensity<F> {
        &self.densities[q]
    }

    pub fn sigma_eps(&self) -> F {
        self.sigma_eps
    }

    /// Scalar-lag value of basis kernel `q`.
    pub fn eval(&self, q: usize, tau: F) -> F {
        self.densities[q].eval(tau)
    }

    /// Mixture `Σ_q w_q k_q` as a [`StationaryKernel`].
    pub fn mixture<'a>(&'a self, weights: &'a [F]) -> Result<MixtureKernel<'a, F>> {
        check_weights(self, weights)?;
        Ok(MixtureKernel { bank: self, weights })
    }

    /// Basis kernel `q` alone.
    pub fn basis(&self, q: usize) -> impl StationaryKernel<F> + '_ {
        move |tau: F| self.eval(q, tau)
    }
}

fn check_weights<F: Scalar>(bank: &KernelBank<F>, weights: &[F]) -> Result<()> {
    if weights.len() != bank.len() {
        return Err(Error::shape(
            "mixture_kernel",
            format!("{} weights for a bank of {}", weights.len(), bank.len()),
        ));
    }
    if weights.iter().any(|w| *w < F::zero()) {
        return Err(Error::domain("mixture_kernel", "weights must be nonnegative"));
    }
    Ok(())
}

/// Linearly spaced one-dimensional bank on `[0, hz_max]` with `σ_ε = 1e-2`.
///
/// Each density has standard deviation `0.5·(μ_2 − μ_1)`; with a single
/// density the spacing is taken to be `hz_max`.
pub fn make_kernel_bank<F: Scalar>(q: usize, hz_max: f64) -> Result<KernelBank<F>> {
    if q == 0 {
        return Err(Error::invalid("make_kernel_bank: Q must be at least 1"));
    }
    if !(hz_max > 0.0) || !hz_max.is_finite() {
        return Err(Error::domain("make_kernel_bank", "hz_max must be positive"));
    }
    let spacing = if q == 1 { hz_max } else { hz_max / (q - 1) as f64 };
    let sd = 0.5 * spacing;
    let densities = (0..q)
        .map(|i| SpectralDensity::scalar(F::lit(i as f64 * spacing), F::lit(sd * sd)))
        .collect::<Result<Vec<_>>>()?;
    KernelBank::new(densities, F::lit(1e-2))
}

/// `Σ_q z_q k_q(τ)`.
pub fn mixture_kernel_eval<F: Scalar>(bank: &KernelBank<F>, weights: &[F], tau: &[F]) -> Result<F> {
    check_weights(bank, weights)?;
    Ok(bank
        .densities
        .iter()
        .zip(weights)
        .map(|(d, &w)| w * sm_kernel_eval(d, tau))
        .sum())
}

/// A one-dimensional stationary covariance `k(x − x')`.
pub trait StationaryKernel<F> {
    fn k(&self, tau: F) -> F;
}

impl<F, T: Fn(F) -> F> StationaryKernel<F> for T {
    fn k(&self, tau: F) -> F {
        self(tau)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MixtureKernel<'a, F> {
    bank: &'a KernelBank<F>,
    weights: &'a [F],
}

impl<F: Scalar> StationaryKernel<F> for MixtureKernel<'_, F> {
    fn k(&self, tau: F) -> F {
        self.bank
            .densities
            .iter()
            .zip(self.weights)
            .map(|(d, &w)| w * d.eval(tau))
            .sum()
    }
}

/// Squared-exponential kernel `exp(−τ²/(2l²))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rbf<F> {
    pub lengthscale: F,
}

impl<F: Scalar> StationaryKernel<F> for Rbf<F> {
    fn k(&self, tau: F) -> F {
        let r = tau / self.lengthscale;
        (F::lit(-0.5) * r * r).exp()
    }
}

/// `G[i][j] = k(x_i − x'_j)`, with `jitter` added to the leading diagonal.
pub fn gram_matrix<F: Scalar, K: StationaryKernel<F> + ?Sized>(kernel: &K, x: &[F], x2: &[F], jitter: F) -> Mat<F> {
    let mut g = Mat::from_fn(x.len(), x2.len(), |i, j| kernel.k(x[i] - x2[j]));
    if jitter != F::zero() {
        for i in 0..x.len().min(x2.len()) {
            g[(i, i)] += jitter;
        }
    }
    g
}

/// Cholesky factor of `K(X, X) + noise_var·I`, escalating jitter when needed.
pub fn gram_cholesky<F: Scalar, K: StationaryKernel<F> + ?Sized>(kernel: &K, x: &[F], noise_var: F) -> Result<Cholesky<F>> {
    let g = gram_matrix(kernel, x, x, noise_var);
    match Cholesky::new(&g) {
        Ok(c) => Ok(c),
        Err(_) => Cholesky::with_jitter(&g).map_err(|_| {
            Error::Numerical(format!(
                "Gram of {} points not positive definite after jitter {:e}",
                x.len(),
                JITTER_LADDER[JITTER_LADDER.len() - 1]
            ))
        }),
    }
}

/// Per-channel parameters of a multi-output spectral mixture kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MosmSpec<F> {
    pub mu: Vec<F>,
    pub sigma2: Vec<F>,
    pub theta: Vec<F>,
    pub phi: Vec<F>,
}

impl<F: Scalar> MosmSpec<F> {
    pub fn new(mu: Vec<F>, sigma2: Vec<F>, theta: Vec<F>, phi: Vec<F>) -> Result<Self> {
        let k = mu.len();
        if k == 0 || sigma2.len() != k || theta.len() != k || phi.len() != k {
            return Err(Error::shape("mosm", "per-channel parameter vectors must share a nonzero length"));
        }
        if sigma2.iter().any(|s| !(*s > F::zero())) {
            return Err(Error::domain("mosm", "sigma2 must be positive"));
        }
        Ok(Self { mu, sigma2, theta, phi })
    }

    /// The three-channel setting with `μ = (0.1, 3, 5)`, `Σ = 0.1`, `θ = 1`, `φ = 0`.
    pub fn standard() -> Self {
        Self {
            mu: vec![F::lit(0.1), F::lit(3.0), F::lit(5.0)],
            sigma2: vec![F::lit(0.1); 3],
            theta: vec![F::one(); 3],
            phi: vec![F::zero(); 3],
        }
    }

    pub fn channels(&self) -> usize {
        self.mu.len()
    }
}

/// Cross-covariance between channel `i` at `x` and channel `j` at `x2`.
///
/// Uses the spectral cross-density of two Gaussians, which keeps the stacked
/// multi-channel Gram positive semi-definite:
/// `α_ij·exp(−2π²Σ_ij(τ+θ_ij)²)·cos(2πμ_ij(τ+θ_ij) + φ_ij)` with
/// `α_ij = exp(−¼(μ_i−μ_j)²/(Σ_i+Σ_j))·sqrt(Σ_ij/sqrt(Σ_iΣ_j))`.
pub fn mosm_cross_eval<F: Scalar>(spec: &MosmSpec<F>, i: usize, j: usize, x: F, x2: F) -> F {
    let (mi, mj) = (spec.mu[i], spec.mu[j]);
    let (si, sj) = (spec.sigma2[i], spec.sigma2[j]);
    let ssum = si + sj;
    let mu_ij = (si * mj + sj * mi) / ssum;
    let s_ij = F::lit(2.0) * si * sj / ssum;
    let theta_ij = spec.theta[i] - spec.theta[j];
    let phi_ij = spec.phi[i] - spec.phi[j];
    let dm = mi - mj;
    let alpha = (F::lit(-0.25) * dm * dm / ssum).exp() * (s_ij / (si * sj).sqrt()).sqrt();
    let u = x - x2 + theta_ij;
    let two_pi = F::two_pi();
    alpha * (-(two_pi * two_pi) * F::lit(0.5) * s_ij * u * u).exp() * (two_pi * mu_ij * u + phi_ij).cos()
}

/// The stacked `[K·n, K·n]` Gram over all channels at shared inputs `x`.
pub fn mosm_stacked_gram<F: Scalar>(spec: &MosmSpec<F>, x: &[F]) -> Mat<F> {
    let n = x.len();
    let k = spec.channels();
    Mat::from_fn(k * n, k * n, |r, c| mosm_cross_eval(spec, r / n, c / n, x[r % n], x[c % n]))
}

/// Kernels of the synthetic data-generating processes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum DataKernelSpec<F> {
    Rbf { lengthscale: F },
    Matern52 { lengthscale: F },
    WeaklyPeriodic { f: F },
    Mosm(MosmSpec<F>),
}

impl<F: Scalar> DataKernelSpec<F> {
    pub fn family(&self) -> &'static str {
        match self {
            DataKernelSpec::Rbf { .. } => "rbf",
            DataKernelSpec::Matern52 { .. } => "matern52",
            DataKernelSpec::WeaklyPeriodic { .. } => "weakly_periodic",
            DataKernelSpec::Mosm(_) => "mosm",
        }
    }
}

/// Single-output covariance `k(x, x')` of a generator kernel.
pub fn data_kernel_eval<F: Scalar>(spec: &DataKernelSpec<F>, x: F, x2: F) -> Result<F> {
    let half = F::lit(0.5);
    match *spec {
        DataKernelSpec::Rbf { lengthscale } => {
            let r = (x - x2) / lengthscale;
            Ok((-half * r * r).exp())
        }
        DataKernelSpec::Matern52 { lengthscale } => {
            let d = ((x - x2) / lengthscale).abs();
            let s5 = F::lit(5.0).sqrt();
            Ok((F::one() + s5 * d + F::lit(5.0 / 3.0) * d * d) * (-s5 * d).exp())
        }
        DataKernelSpec::WeaklyPeriodic { f } => {
            let w = F::two_pi() * f;
            let d1 = (w * x).cos() - (w * x2).cos();
            let d2 = (w * x).sin() - (w * x2).sin();
            let dx = x - x2;
            Ok((-half * d1 * d1 - half * d2 * d2 - dx * dx / F::lit(32.0)).exp())
        }
        DataKernelSpec::Mosm(_) => Err(Error::invalid(
            "data_kernel_eval: mosm is multi-output, use mosm_cross_eval",
        )),
    }
}

/// Gram matrix of a single-output generator kernel.
pub fn data_gram<F: Scalar>(spec: &DataKernelSpec<F>, x: &[F], x2: &[F]) -> Result<Mat<F>> {
    let mut g = Mat::zeros(x.len(), x2.len());
    for (i, &a) in x.iter().enumerate() {
        for (j, &b) in x2.iter().enumerate() {
            g[(i, j)] = data_kernel_eval(spec, a, b)?;
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn sm_at_zero_lag_is_one() {
        let d = SpectralDensity::new(vec![1.3, 0.2], vec![0.4, 2.0]).unwrap();
        assert_eq!(sm_kernel_eval(&d, &[0.0, 0.0]), 1.0);
    }

    #[test]
    fn sm_matches_quadrature() {
        let d = SpectralDensity::scalar(0.0, 0.25).unwrap();
        let v = sm_kernel_eval(&d, &[1.0]);
        assert!(close(v, 0.007192, 1e-6), "{v}");
        // real part of the Fourier integral of the Gaussian density, step 1e-4
        let (mu, s2, tau) = (0.7f64, 0.3f64, 0.45f64);
        let h = 1e-4;
        let mut acc = 0.0;
        let mut s = mu - 12.0 * s2.sqrt();
        while s <= mu + 12.0 * s2.sqrt() {
            let p = (-(s - mu).powi(2) / (2.0 * s2)).exp() / (2.0 * std::f64::consts::PI * s2).sqrt();
            acc += p * (2.0 * std::f64::consts::PI * s * tau).cos() * h;
            s += h;
        }
        let d = SpectralDensity::scalar(mu, s2).unwrap();
        assert!(close(d.eval(tau), acc, 1e-6));
    }

    #[test]
    fn sm_is_symmetric_and_bounded() {
        let mut rng = crate::random::rng_from_seed(3);
        let d = SpectralDensity::scalar(2.1, 0.05).unwrap();
        for _ in 0..200 {
            let t: f64 = rng.random_range(-5.0..5.0);
            assert_eq!(d.eval(t), d.eval(-t));
            assert!(d.eval(t).abs() <= 1.0);
        }
    }

    #[test]
    fn bank_rule_q5() {
        let bank = make_kernel_bank::<f64>(5, 5.0).unwrap();
        let mus: Vec<f64> = bank.densities().iter().map(|d| d.mu[0]).collect();
        assert_eq!(mus, vec![0.0, 1.25, 2.5, 3.75, 5.0]);
        for d in bank.densities() {
            assert!(close(d.sigma2[0].sqrt(), 0.625, 1e-12));
        }
        assert_eq!(bank.sigma_eps(), 1e-2);
    }

    #[test]
    fn bank_edge_cases() {
        let bank = make_kernel_bank::<f64>(1, 3.0).unwrap();
        assert_eq!(bank.len(), 1);
        assert_eq!(bank.density(0).mu[0], 0.0);
        assert!(make_kernel_bank::<f64>(0, 3.0).is_err());
        for q in 1..9 {
            let b = make_kernel_bank::<f64>(q, 4.0).unwrap();
            assert!(b.densities().windows(2).all(|w| w[0].mu[0] <= w[1].mu[0]));
        }
        let bad = vec![
            SpectralDensity::scalar(0.0, 0.1).unwrap(),
            SpectralDensity::scalar(2.0, 0.1).unwrap(),
            SpectralDensity::scalar(1.0, 0.1).unwrap(),
        ];
        assert!(KernelBank::new(bad, 0.01).is_err());
        let nonzero = vec![SpectralDensity::scalar(0.5, 0.1).unwrap()];
        assert!(KernelBank::new(nonzero, 0.01).is_err());
    }

    #[test]
    fn mixture_cases() {
        let bank = make_kernel_bank::<f64>(3, 2.0).unwrap();
        let t = [0.37];
        assert_eq!(mixture_kernel_eval(&bank, &[1.0, 0.0, 0.0], &t).unwrap(), bank.eval(0, 0.37));
        let two = KernelBank::new(
            vec![SpectralDensity::scalar(0.0, 0.25).unwrap(), SpectralDensity::scalar(1.0, 0.1).unwrap()],
            0.01,
        )
        .unwrap();
        let v = mixture_kernel_eval(&two, &[0.5, 0.5], &[1.0]).unwrap();
        let a = (-2.0 * std::f64::consts::PI.powi(2) * 0.25f64).exp();
        let b = (-2.0 * std::f64::consts::PI.powi(2) * 0.1f64).exp() * (2.0 * std::f64::consts::PI).cos();
        assert!(close(v, 0.5 * (a + b), 1e-15));
        assert!(mixture_kernel_eval(&bank, &[1.0, 0.0], &t).is_err());
        assert!(mixture_kernel_eval(&bank, &[1.5, -0.5, 0.0], &t).is_err());

        let same = KernelBank::new(vec![SpectralDensity::scalar(0.0, 0.2).unwrap(); 3], 0.01).unwrap();
        let v = mixture_kernel_eval(&same, &[0.2, 0.3, 0.5], &[0.8]).unwrap();
        assert!(close(v, same.eval(0, 0.8), 1e-15));
    }

    #[test]
    fn gram_properties() {
        let rbf = Rbf { lengthscale: 1.0 };
        let g = gram_matrix(&rbf, &[0.3], &[0.3], 0.0);
        assert_eq!(g[(0, 0)], 1.0);
        let x = [0.1, -0.7, 2.3];
        let g = gram_matrix(&rbf, &x, &x, 0.0);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(g[(i, j)], g[(j, i)]);
                let d: f64 = x[i] - x[j];
                assert!(close(g[(i, j)], (-0.5 * d * d).exp(), 1e-15));
            }
        }
    }

    #[test]
    fn mixture_gram_is_positive_definite() {
        let mut rng = crate::random::rng_from_seed(17);
        let mut failures = 0;
        for trial in 0..1000 {
            let bank = make_kernel_bank::<f64>(1 + trial % 5, 5.0).unwrap();
            let mut z: Vec<f64> = (0..bank.len()).map(|_| rng.random::<f64>()).collect();
            let s: f64 = z.iter().sum();
            z.iter_mut().for_each(|v| *v /= s);
            let n = rng.random_range(1..=8);
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..4.0)).collect();
            let k = bank.mixture(&z).unwrap();
            let eps = bank.sigma_eps();
            if Cholesky::new(&gram_matrix(&k, &x, &x, eps * eps)).is_err() {
                failures += 1;
            }
        }
        assert!(failures <= 1, "{failures} failures");
    }

    #[test]
    fn data_kernels() {
        for spec in [
            DataKernelSpec::Rbf { lengthscale: 1.3 },
            DataKernelSpec::Matern52 { lengthscale: 0.2 },
            DataKernelSpec::WeaklyPeriodic { f: 2.5 },
        ] {
            assert!(close(data_kernel_eval(&spec, 0.4, 0.4).unwrap(), 1.0, 1e-15));
        }
        let m = data_kernel_eval(&DataKernelSpec::Matern52 { lengthscale: 1.0 }, 1.0, 0.0).unwrap();
        assert!(close(m, 0.5240, 1e-4), "{m}");

        // term by term for f = 2, x − x' = 0.5
        let (x, x2, f) = (0.8f64, 0.3f64, 2.0f64);
        let w = 2.0 * std::f64::consts::PI * f;
        let e1 = -0.5 * ((w * x).cos() - (w * x2).cos()).powi(2);
        let e2 = -0.5 * ((w * x).sin() - (w * x2).sin()).powi(2);
        let e3 = -(0.5f64 * 0.5) / 32.0;
        let v = data_kernel_eval(&DataKernelSpec::WeaklyPeriodic { f }, x, x2).unwrap();
        assert!(close(v, (e1 + e2 + e3).exp(), 1e-15));

        assert!(data_kernel_eval(&DataKernelSpec::Mosm(MosmSpec::<f64>::standard()), 0.0, 1.0).is_err());
    }

    fn mosm_oracle(spec: &MosmSpec<f64>, i: usize, j: usize, x: f64, x2: f64) -> f64 {
        use std::f64::consts::PI;
        let (mi, mj, si, sj) = (spec.mu[i], spec.mu[j], spec.sigma2[i], spec.sigma2[j]);
        let sij = 2.0 * si * sj / (si + sj);
        let muij = (si * mj + sj * mi) / (si + sj);
        let u = (x - x2) + (spec.theta[i] - spec.theta[j]);
        let mag = (-(mi - mj).powi(2) / (4.0 * (si + sj))).exp() * (sij / (si * sj).sqrt()).sqrt();
        mag * (-2.0 * PI * PI * sij * u * u).exp() * (2.0 * PI * muij * u + spec.phi[i] - spec.phi[j]).cos()
    }

    #[test]
    fn mosm_cases() {
        let spec = MosmSpec::<f64>::new(vec![0.7, 2.0], vec![0.2, 0.05], vec![0.0, 0.3], vec![0.0, 1.1]).unwrap();
        assert!(close(mosm_cross_eval(&spec, 0, 0, 1.2, 1.2), 1.0, 1e-15));
        let d = SpectralDensity::scalar(2.0, 0.05).unwrap();
        assert!(close(mosm_cross_eval(&spec, 1, 1, 0.9, 0.1), d.eval(0.8), 1e-15));

        let std = MosmSpec::<f64>::standard();
        assert_eq!(std.mu, vec![0.1, 3.0, 5.0]);
        let mut rng = crate::random::rng_from_seed(5);
        for _ in 0..50 {
            let (x, x2): (f64, f64) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            for i in 0..3 {
                for j in 0..3 {
                    let v = mosm_cross_eval(&std, i, j, x, x2);
                    assert!(close(v, mosm_oracle(&std, i, j, x, x2), 1e-14));
                    assert!(close(v, mosm_cross_eval(&std, j, i, x2, x), 1e-14));
                    assert!(close(mosm_cross_eval(&spec, i % 2, j % 2, x, x2), mosm_oracle(&spec, i % 2, j % 2, x, x2), 1e-14));
                }
            }
        }
    }

    #[test]
    fn mosm_stacked_gram_is_psd() {
        let mut rng = crate::random::rng_from_seed(9);
        for _ in 0..100 {
            let spec = MosmSpec::<f64>::new(
                (0..3).map(|_| rng.random_range(0.0..5.0)).collect(),
                (0..3).map(|_| rng.random_range(0.02..0.5)).collect(),
                (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
                (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let x: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..3.0)).collect();
            let mut g = mosm_stacked_gram(&spec, &x);
            assert_eq!(g.max_abs_diff(&g.transpose()), 0.0);
            g.add_diag(1e-8);
            Cholesky::with_jitter(&g).unwrap();
        }
    }
}
