//! Kernel-bank evaluation on the autodiff tape, so spectral parameters and
//! mixture probabilities receive gradients.

use crate::error::Result;
use crate::kernels::{KernelBank, SpectralDensity};
use crate::linalg::Mat;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// One-dimensional bank with `mu: [Q]` and `sigma2: [Q]` as tape variables.
#[derive(Clone, Copy)]
pub struct TapeBank<'t, F> {
    pub mu: Var<'t, F>,
    pub sigma2: Var<'t, F>,
    pub q: usize,
    pub sigma_eps: F,
}

impl<'t, F: Scalar> TapeBank<'t, F> {
    /// The bank as constants.
    pub fn constant(tape: &'t Tape<F>, bank: &KernelBank<F>) -> Self {
        let mu: Vec<F> = bank.densities().iter().map(|d| d.mu[0]).collect();
        let s2: Vec<F> = bank.densities().iter().map(|d| d.sigma2[0]).collect();
        Self {
            mu: tape.constant(Tensor::from_vec(mu)),
            sigma2: tape.constant(Tensor::from_vec(s2)),
            q: bank.len(),
            sigma_eps: bank.sigma_eps(),
        }
    }

    pub fn tape(&self) -> &'t Tape<F> {
        self.mu.tape()
    }

    /// Current values as a plain bank.
    pub fn to_bank(&self) -> Result<KernelBank<F>> {
        let mu = self.mu.value();
        let s2 = self.sigma2.value();
        let densities = mu
            .data()
            .iter()
            .zip(s2.data())
            .map(|(&m, &s)| SpectralDensity::scalar(m, s))
            .collect::<Result<Vec<_>>>()?;
        KernelBank::new(densities, self.sigma_eps)
    }

    fn param(&self, v: Var<'t, F>, q: usize) -> Result<Var<'t, F>> {
        v.narrow(0, q, 1)
    }

    /// `k_q(a_i − b_j)` as `[len(a), len(b)]`.
    pub fn basis_matrix(&self, q: usize, a: &[F], b: &[F]) -> Result<Var<'t, F>> {
        let (tau, tau2) = lag_constants(self.tape(), a, b);
        self.basis_from_lags(q, tau, tau2)
    }

    fn basis_from_lags(&self, q: usize, tau: Var<'t, F>, tau2: Var<'t, F>) -> Result<Var<'t, F>> {
        let two_pi = F::two_pi();
        let mu = self.param(self.mu, q)?;
        let s2 = self.param(self.sigma2, q)?;
        let env = tau2.mul(s2)?.scale(-(two_pi * two_pi) * F::lit(0.5)).exp();
        let osc = tau.mul(mu)?.scale(two_pi).cos();
        env.mul(osc)
    }

    /// `Σ_q w_q k_q(a_i − b_j)` for mixture weights `w: [Q]`.
    pub fn mixture_matrix(&self, w: Var<'t, F>, a: &[F], b: &[F]) -> Result<Var<'t, F>> {
        let (tau, tau2) = lag_constants(self.tape(), a, b);
        let mut acc: Option<Var<'t, F>> = None;
        for q in 0..self.q {
            let term = self.basis_from_lags(q, tau, tau2)?.mul(w.narrow(0, q, 1)?)?;
            acc = Some(match acc {
                None => term,
                Some(s) => s.add(term)?,
            });
        }
        Ok(acc.expect("bank is nonempty"))
    }
}

fn lag_constants<'t, F: Scalar>(tape: &'t Tape<F>, a: &[F], b: &[F]) -> (Var<'t, F>, Var<'t, F>) {
    let lags = Mat::from_fn(a.len(), b.len(), |i, j| a[i] - b[j]).into_vec();
    let sq: Vec<F> = lags.iter().map(|&t| t * t).collect();
    let shape = vec![a.len(), b.len()];
    (
        tape.constant(Tensor::new(shape.clone(), lags).expect("sized")),
        tape.constant(Tensor::new(shape, sq).expect("sized")),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{make_kernel_bank, StationaryKernel};

    #[test]
    fn matches_plain_evaluation() {
        let bank = make_kernel_bank::<f64>(3, 3.0).unwrap();
        let tape = Tape::new();
        let tb = TapeBank::constant(&tape, &bank);
        let a = [0.0, 0.3, 1.7];
        let b = [0.1, -0.4];
        let m = tb.basis_matrix(2, &a, &b).unwrap().value();
        let w = [0.2, 0.3, 0.5];
        let mix = tb.mixture_matrix(tape.constant(Tensor::from_vec(w.to_vec())), &a, &b).unwrap().value();
        let k = bank.mixture(&w).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                assert!((m.data()[i * 2 + j] - bank.eval(2, a[i] - b[j])).abs() < 1e-14);
                assert!((mix.data()[i * 2 + j] - k.k(a[i] - b[j])).abs() < 1e-14);
            }
        }
        assert_eq!(tb.to_bank().unwrap(), bank);
    }
}
