//! Random Fourier feature priors, path-wise posterior samples, and the exact
//! GP posterior used as their reference. Inputs are one-dimensional.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{gram_cholesky, gram_matrix, KernelBank, StationaryKernel};
use crate::linalg::{Cholesky, Mat};
use crate::random::{normal, uniform};
use crate::scalar::Scalar;

/// Floor applied to empirical variances.
pub const VARIANCE_FLOOR: f64 = 1e-8;

/// One draw of random Fourier features for every basis kernel of a bank.
///
/// Frequencies are stored as standard-normal draws `eps` and mapped through
/// the density as `s = μ_q + sqrt(σ²_q)·eps`, so the same draw can be
/// re-evaluated under updated kernel parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RffPrior<F> {
    pub l_spec: usize,
    pub weights: Vec<Vec<F>>,
    pub unit_freqs: Vec<Vec<F>>,
    pub phases: Vec<Vec<F>>,
}

/// Draws `w ~ N(0,1)`, `s ~ p_q`, `b ~ U[0, 2π)` for every `(q, i)`.
pub fn sample_rff_prior<F: Scalar, R: Rng + ?Sized>(bank: &KernelBank<F>, l_spec: usize, rng: &mut R) -> Result<RffPrior<F>> {
    if l_spec == 0 {
        return Err(Error::invalid("sample_rff_prior: l_spec must be at least 1"));
    }
    if bank.density(0).dim() != 1 {
        return Err(Error::shape("sample_rff_prior", "random features are implemented for 1D inputs"));
    }
    let q = bank.len();
    let mut prior = RffPrior {
        l_spec,
        weights: Vec::with_capacity(q),
        unit_freqs: Vec::with_capacity(q),
        phases: Vec::with_capacity(q),
    };
    let tau = std::f64::consts::TAU;
    for _ in 0..q {
        let mut w = Vec::with_capacity(l_spec);
        let mut e = Vec::with_capacity(l_spec);
        let mut b = Vec::with_capacity(l_spec);
        for _ in 0..l_spec {
            w.push(normal(rng));
            e.push(normal(rng));
            b.push(uniform(rng, 0.0, tau));
        }
        prior.weights.push(w);
        prior.unit_freqs.push(e);
        prior.phases.push(b);
    }
    Ok(prior)
}

impl<F: Scalar> RffPrior<F> {
    pub fn num_bases(&self) -> usize {
        self.weights.len()
    }

    /// Spectral points of basis `q` under the bank's current densities.
    pub fn frequencies(&self, bank: &KernelBank<F>, q: usize) -> Vec<F> {
        let d = bank.density(q);
        let (mu, sd) = (d.mu[0], d.sigma2[0].sqrt());
        self.unit_freqs[q].iter().map(|&e| mu + sd * e).collect()
    }

    /// `φ_q(x) = sqrt(2/l)·Σ_i w_i cos(2π s_i x + b_i)`.
    pub fn feature(&self, bank: &KernelBank<F>, q: usize, x: F) -> F {
        let s = self.frequencies(bank, q);
        self.feature_with(&s, q, x)
    }

    fn feature_with(&self, s: &[F], q: usize, x: F) -> F {
        let two_pi = F::two_pi();
        let acc: F = self.weights[q]
            .iter()
            .zip(s)
            .zip(&self.phases[q])
            .map(|((&w, &s), &b)| w * (two_pi * s * x + b).cos())
            .sum();
        acc * self.scale()
    }

    fn scale(&self) -> F {
        (F::lit(2.0) / F::from_usize_lossy(self.l_spec)).sqrt()
    }

    /// Raw feature product `(2/l)·Σ_i cos(2π s_i x + b_i)·cos(2π s_i x' + b_i)`.
    pub fn feature_covariance(&self, bank: &KernelBank<F>, q: usize, x: F, x2: F) -> F {
        let two_pi = F::two_pi();
        let s = self.frequencies(bank, q);
        let acc: F = s
            .iter()
            .zip(&self.phases[q])
            .map(|(&s, &b)| (two_pi * s * x + b).cos() * (two_pi * s * x2 + b).cos())
            .sum();
        acc * F::lit(2.0) / F::from_usize_lossy(self.l_spec)
    }

    /// Feature covariance with the phases integrated out,
    /// `(1/l)·Σ_i cos(2π s_i τ)`, the standard random-feature kernel estimate.
    pub fn kernel_estimate(&self, bank: &KernelBank<F>, q: usize, tau: F) -> F {
        let two_pi = F::two_pi();
        let s = self.frequencies(bank, q);
        let acc: F = s.iter().map(|&s| (two_pi * s * tau).cos()).sum();
        acc / F::from_usize_lossy(self.l_spec)
    }

    /// Prior term `Σ_q sqrt(z_q)·φ_q(x)` at every input.
    pub fn eval_many(&self, bank: &KernelBank<F>, z: &[F], xs: &[F]) -> Result<Vec<F>> {
        check_z(self, z)?;
        let mut out = vec![F::zero(); xs.len()];
        for (q, &zq) in z.iter().enumerate() {
            if zq == F::zero() {
                continue;
            }
            let s = self.frequencies(bank, q);
            let root = zq.sqrt();
            for (o, &x) in out.iter_mut().zip(xs) {
                *o += root * self.feature_with(&s, q, x);
            }
        }
        Ok(out)
    }
}

fn check_z<F: Scalar>(prior: &RffPrior<F>, z: &[F]) -> Result<()> {
    if z.len() != prior.num_bases() {
        return Err(Error::shape("eval_rff_prior", format!("{} weights for {} bases", z.len(), prior.num_bases())));
    }
    if let Some(bad) = z.iter().find(|v| **v < F::zero()) {
        return Err(Error::domain("eval_rff_prior", format!("negative mixture weight {bad}")));
    }
    Ok(())
}

/// `Σ_q sqrt(z_q)·φ_q(x)` at a single input.
pub fn eval_rff_prior<F: Scalar>(prior: &RffPrior<F>, bank: &KernelBank<F>, z: &[F], x: F) -> Result<F> {
    Ok(prior.eval_many(bank, z, &[x])?[0])
}

/// A path-wise GP posterior function: prior draw plus a kernel-smoothed update.
#[derive(Debug, Clone)]
pub struct PathwiseSample<'a, F> {
    pub z: Vec<F>,
    pub v: Vec<F>,
    pub probs: Vec<F>,
    pub context_x: Vec<F>,
    pub prior: &'a RffPrior<F>,
    pub bank: &'a KernelBank<F>,
}

impl<'a, F: Scalar> PathwiseSample<'a, F> {
    /// Solves for the update weights `v = (K̄ + σ_ε² I)⁻¹ (Y − Ψ(X))`.
    pub fn fit(
        xc: &[F],
        yc: &[F],
        bank: &'a KernelBank<F>,
        probs: &[F],
        prior: &'a RffPrior<F>,
        z: &[F],
    ) -> Result<Self> {
        if xc.len() != yc.len() {
            return Err(Error::shape("pathwise_posterior_sample", format!("{} inputs, {} outputs", xc.len(), yc.len())));
        }
        let kbar = bank.mixture(probs)?;
        let psi = prior.eval_many(bank, z, xc)?;
        let v = if xc.is_empty() {
            Vec::new()
        } else {
            let eps = bank.sigma_eps();
            let chol = gram_cholesky(&kbar, xc, eps * eps)?;
            let resid: Vec<F> = yc.iter().zip(&psi).map(|(&y, &p)| y - p).collect();
            chol.solve(&resid)?
        };
        Ok(Self { z: z.to_vec(), v, probs: probs.to_vec(), context_x: xc.to_vec(), prior, bank })
    }

    /// Evaluates the prior term.
    pub fn prior_term(&self, xs: &[F]) -> Result<Vec<F>> {
        self.prior.eval_many(self.bank, &self.z, xs)
    }

    /// Evaluates the update term `Σ_n v_n k̄(x − x_n)`.
    pub fn update_term(&self, xs: &[F]) -> Result<Vec<F>> {
        let kbar = self.bank.mixture(&self.probs)?;
        Ok(xs
            .iter()
            .map(|&x| self.context_x.iter().zip(&self.v).map(|(&xn, &vn)| vn * kbar.k(x - xn)).sum())
            .collect())
    }

    pub fn eval(&self, xs: &[F]) -> Result<Vec<F>> {
        let p = self.prior_term(xs)?;
        let u = self.update_term(xs)?;
        Ok(p.into_iter().zip(u).map(|(a, b)| a + b).collect())
    }
}

/// One path-wise posterior sample evaluated at `xq`.
pub fn pathwise_posterior_sample<F: Scalar>(
    xc: &[F],
    yc: &[F],
    bank: &KernelBank<F>,
    probs: &[F],
    prior: &RffPrior<F>,
    z: &[F],
    xq: &[F],
) -> Result<Vec<F>> {
    PathwiseSample::fit(xc, yc, bank, probs, prior, z)?.eval(xq)
}

/// Scalable surrogate for a path-wise sample on a grid:
/// `α·prior + filter ⊛ (data − α·prior)` with a centred, zero-padded filter.
///
/// `data_delta` holds each context value at its nearest grid cell and zero
/// elsewhere.
pub fn approx_random_representation<F: Scalar>(data_delta: &[F], prior: &[F], alpha: F, filter: &[F]) -> Result<Vec<F>> {
    if !(alpha > F::zero() && alpha < F::one()) {
        return Err(Error::domain("approx_random_representation", "alpha must lie in (0, 1)"));
    }
    if data_delta.len() != prior.len() {
        return Err(Error::shape("approx_random_representation", "data and prior grids differ in length"));
    }
    if filter.len() % 2 == 0 {
        return Err(Error::shape("approx_random_representation", format!("filter length {} is even", filter.len())));
    }
    if filter.len() > prior.len() {
        return Err(Error::shape(
            "approx_random_representation",
            format!("filter length {} exceeds grid size {}", filter.len(), prior.len()),
        ));
    }
    let m = prior.len() as isize;
    let half = (filter.len() / 2) as isize;
    let resid: Vec<F> = data_delta.iter().zip(prior).map(|(&d, &p)| d - alpha * p).collect();
    Ok((0..m)
        .map(|i| {
            let mut acc = alpha * prior[i as usize];
            for (k, &w) in filter.iter().enumerate() {
                let j = i + k as isize - half;
                if (0..m).contains(&j) {
                    acc += w * resid[j as usize];
                }
            }
            acc
        })
        .collect())
}

/// Standard GP regression posterior mean and covariance at `xq`.
pub fn exact_gp_posterior<F: Scalar, K: StationaryKernel<F> + ?Sized>(
    xc: &[F],
    yc: &[F],
    kernel: &K,
    sigma_eps: F,
    xq: &[F],
) -> Result<(Vec<F>, Mat<F>)> {
    if xc.is_empty() {
        return Err(Error::invalid("exact_gp_posterior needs at least one context point"));
    }
    if xc.len() != yc.len() {
        return Err(Error::shape("exact_gp_posterior", format!("{} inputs, {} outputs", xc.len(), yc.len())));
    }
    let chol: Cholesky<F> = gram_cholesky(kernel, xc, sigma_eps * sigma_eps)?;
    let kqc = gram_matrix(kernel, xq, xc, F::zero());
    let alpha = chol.solve(yc)?;
    let mean = kqc.matvec(&alpha)?;
    let a = chol.solve_mat(&kqc.transpose())?;
    let reduce = kqc.matmul(&a)?;
    let kqq = gram_matrix(kernel, xq, xq, F::zero());
    let cov = Mat::from_fn(xq.len(), xq.len(), |i, j| kqq[(i, j)] - reduce[(i, j)]);
    Ok((mean, cov))
}

/// Per-query sample mean and unbiased variance (floored at [`VARIANCE_FLOOR`]).
pub fn empirical_posterior_stats<F: Scalar>(samples: &[Vec<F>]) -> Result<(Vec<F>, Vec<F>)> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::invalid(format!("empirical_posterior_stats needs at least 2 samples, got {n}")));
    }
    let m = samples[0].len();
    if samples.iter().any(|s| s.len() != m) {
        return Err(Error::shape("empirical_posterior_stats", "samples differ in length"));
    }
    let nf = F::from_usize_lossy(n);
    let floor = F::lit(VARIANCE_FLOOR);
    let mut mean = vec![F::zero(); m];
    for s in samples {
        for (a, &v) in mean.iter_mut().zip(s) {
            *a += v;
        }
    }
    mean.iter_mut().for_each(|a| *a /= nf);
    let mut var = vec![F::zero(); m];
    for s in samples {
        for ((a, &v), &mu) in var.iter_mut().zip(s).zip(&mean) {
            *a += (v - mu) * (v - mu);
        }
    }
    let denom = nf - F::one();
    var.iter_mut().for_each(|a| *a = (*a / denom).max(floor));
    Ok((mean, var))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{make_kernel_bank, Rbf};
    use crate::random::rng_from_seed;

    #[test]
    fn prior_shape_and_determinism() {
        let bank = make_kernel_bank::<f64>(3, 3.0).unwrap();
        let a = sample_rff_prior(&bank, 10, &mut rng_from_seed(4)).unwrap();
        let b = sample_rff_prior(&bank, 10, &mut rng_from_seed(4)).unwrap();
        assert_eq!(a, b);
        for q in 0..3 {
            assert_eq!(a.weights[q].len(), 10);
            assert_eq!(a.unit_freqs[q].len(), 10);
            assert!(a.phases[q].iter().all(|&p| (0.0..std::f64::consts::TAU).contains(&p)));
        }
        assert!(sample_rff_prior(&bank, 0, &mut rng_from_seed(4)).is_err());
    }

    #[test]
    fn large_l_estimate_matches_kernel() {
        let bank = make_kernel_bank::<f64>(4, 4.0).unwrap();
        let prior = sample_rff_prior(&bank, 4096, &mut rng_from_seed(21)).unwrap();
        for q in 0..4 {
            let sup = (0..=120)
                .map(|i| -3.0 + 0.05 * i as f64)
                .map(|t| (prior.kernel_estimate(&bank, q, t) - bank.eval(q, t)).abs())
                .fold(0.0, f64::max);
            assert!(sup <= 0.05, "basis {q}: {sup}");
        }
    }

    #[test]
    fn eval_prior_cases() {
        let bank = make_kernel_bank::<f64>(3, 3.0).unwrap();
        let prior = sample_rff_prior(&bank, 10, &mut rng_from_seed(1)).unwrap();
        assert_eq!(eval_rff_prior(&prior, &bank, &[0.0; 3], 0.4).unwrap(), 0.0);
        let v = eval_rff_prior(&prior, &bank, &[0.0, 1.0, 0.0], 0.4).unwrap();
        assert!((v - prior.feature(&bank, 1, 0.4)).abs() < 1e-15);
        assert!(eval_rff_prior(&prior, &bank, &[0.5, -0.1, 0.6], 0.4).is_err());
        assert!(eval_rff_prior(&prior, &bank, &[1.0], 0.4).is_err());
    }

    #[test]
    fn prior_marginal_variance_is_one() {
        let bank = make_kernel_bank::<f64>(3, 3.0).unwrap();
        let mut rng = rng_from_seed(8);
        for q in 0..3 {
            let vals: Vec<f64> = (0..2000)
                .map(|_| sample_rff_prior(&bank, 10, &mut rng).unwrap().feature(&bank, q, 0.7))
                .collect();
            let var = vals.iter().map(|v| v * v).sum::<f64>() / 2000.0;
            assert!((var - 1.0).abs() < 0.1, "basis {q}: {var}");
        }
    }

    #[test]
    fn empty_context_is_prior() {
        let bank = make_kernel_bank::<f64>(2, 2.0).unwrap();
        let prior = sample_rff_prior(&bank, 10, &mut rng_from_seed(2)).unwrap();
        let z = [0.3, 0.7];
        let xs = [0.0, 0.5, 1.5];
        let f = pathwise_posterior_sample(&[], &[], &bank, &[0.5, 0.5], &prior, &z, &xs).unwrap();
        assert_eq!(f, prior.eval_many(&bank, &z, &xs).unwrap());
    }

    #[test]
    fn update_is_linear_in_y() {
        let bank = make_kernel_bank::<f64>(3, 3.0).unwrap();
        let prior = sample_rff_prior(&bank, 10, &mut rng_from_seed(6)).unwrap();
        let z = [0.2, 0.5, 0.3];
        let probs = [0.1, 0.6, 0.3];
        let xc = [0.1, 0.9, 2.2];
        let yc = [0.4, -1.0, 0.8];
        let y2: Vec<f64> = yc.iter().map(|v| 2.0 * v).collect();
        let xq = [0.0, 0.5, 1.0, 3.0];
        // with Y doubled and the prior term at X removed, v doubles exactly
        let psi = prior.eval_many(&bank, &z, &xc).unwrap();
        let ya: Vec<f64> = yc.iter().zip(&psi).map(|(y, p)| y + p).collect();
        let yb: Vec<f64> = y2.iter().zip(&psi).map(|(y, p)| y + p).collect();
        let a = PathwiseSample::fit(&xc, &ya, &bank, &probs, &prior, &z).unwrap();
        let b = PathwiseSample::fit(&xc, &yb, &bank, &probs, &prior, &z).unwrap();
        let ua = a.update_term(&xq).unwrap();
        let ub = b.update_term(&xq).unwrap();
        for (x, y) in ua.iter().zip(&ub) {
            assert!((2.0 * x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_posterior_limits() {
        let k = Rbf { lengthscale: 0.5f64 };
        let (m, _) = exact_gp_posterior(&[0.3, 1.0], &[0.7, -0.2], &k, 1e-8, &[0.3]).unwrap();
        assert!((m[0] - 0.7).abs() < 1e-4);
        let (m, s) = exact_gp_posterior(&[0.3], &[0.7], &k, 0.1, &[50.0]).unwrap();
        assert!(m[0].abs() < 1e-12 && (s[(0, 0)] - 1.0).abs() < 1e-12);
        let (m, s) = exact_gp_posterior(&[0.0], &[2.0], &k, 0.1, &[0.4]).unwrap();
        let kx = (-0.5f64 * (0.4f64 / 0.5).powi(2)).exp();
        assert!((m[0] - kx * 2.0 / 1.01).abs() < 1e-12);
        assert!((s[(0, 0)] - (1.0 - kx * kx / 1.01)).abs() < 1e-12);
        assert!(exact_gp_posterior::<f64, _>(&[], &[], &k, 0.1, &[0.0]).is_err());
    }

    #[test]
    fn empirical_stats_cases() {
        let (m, v) = empirical_posterior_stats(&[vec![0.0], vec![2.0]]).unwrap();
        assert_eq!((m[0], v[0]), (1.0, 2.0));
        let (_, v) = empirical_posterior_stats(&vec![vec![3.0, 1.0]; 4]).unwrap();
        assert_eq!(v, vec![VARIANCE_FLOOR; 2]);
        assert!(empirical_posterior_stats(&[vec![1.0]]).is_err());
    }

    fn loop_conv(data: &[f64], prior: &[f64], alpha: f64, filt: &[f64]) -> Vec<f64> {
        let m = prior.len();
        let h = filt.len() / 2;
        let mut out = vec![0.0; m];
        for i in 0..m {
            let mut acc = 0.0;
            for k in 0..filt.len() {
                let j = i as i64 + k as i64 - h as i64;
                if j >= 0 && (j as usize) < m {
                    acc += filt[k] * (data[j as usize] - alpha * prior[j as usize]);
                }
            }
            out[i] = alpha * prior[i] + acc;
        }
        out
    }

    #[test]
    fn approx_representation_cases() {
        let mut rng = rng_from_seed(12);
        let data: Vec<f64> = (0..30).map(|i| if i % 7 == 0 { normal(&mut rng) } else { 0.0 }).collect();
        let prior: Vec<f64> = (0..30).map(|_| normal(&mut rng)).collect();
        let filt: Vec<f64> = (0..7).map(|_| normal(&mut rng)).collect();
        let got = approx_random_representation(&data, &prior, 0.3, &filt).unwrap();
        let want = loop_conv(&data, &prior, 0.3, &filt);
        assert!(got.iter().zip(&want).all(|(a, b)| (a - b).abs() <= 1e-12));

        let delta = [0.0, 0.0, 1.0, 0.0, 0.0];
        let got = approx_random_representation(&data, &prior, 1e-12, &delta).unwrap();
        assert!(got.iter().zip(&data).all(|(a, b)| (a - b).abs() < 1e-10));

        let zero = vec![0.0; 30];
        let got = approx_random_representation(&zero, &prior, 0.4, &filt).unwrap();
        let smoothed = loop_conv(&zero, &prior, 0.0, &filt);
        for i in 0..30 {
            // filt ⊛ (0 − αp) = −α·(filt ⊛ p); `smoothed` is filt ⊛ (−0·p) = 0, so rebuild
            let mut fp = 0.0;
            for k in 0..7 {
                let j = i as i64 + k as i64 - 3;
                if (0..30).contains(&j) {
                    fp += filt[k] * prior[j as usize];
                }
            }
            assert!((got[i] - (0.4 * prior[i] - 0.4 * fp) - smoothed[i]).abs() < 1e-12);
        }
        assert!(approx_random_representation(&zero, &prior, 0.4, &[1.0, 1.0]).is_err());
        assert!(approx_random_representation(&zero, &prior, 0.4, &vec![1.0; 31]).is_err());
        assert!(approx_random_representation(&zero, &prior, 1.0, &filt).is_err());
    }
}
