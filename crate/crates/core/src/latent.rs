//! Task-dependent categorical distribution over the kernel bank: the set
//! network producing it, Gumbel-softmax relaxation, and categorical KL.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::convdeepsets::{density_channel, deterministic_data_channel, Grid};
use crate::error::{Error, Result};
use crate::kernels::Rbf;
use crate::params::{Bound, ParamStore};
use crate::random::gumbel;
use crate::scalar::Scalar;
use crate::tapekernel::TapeBank;
use crate::tensor::{Tensor, Var};

/// Added inside `log p` before perturbing with Gumbel noise.
pub const LOG_FLOOR: f64 = 1e-12;
/// Logit offset that removes exactly-zero probabilities from the relaxation.
const MASKED_LOGIT: f64 = -1e30;

/// A point on the probability simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalParams<F> {
    pub probs: Vec<F>,
}

impl<F: Scalar> CategoricalParams<F> {
    pub fn new(probs: Vec<F>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::invalid("categorical needs at least one category"));
        }
        if probs.iter().any(|p| *p < F::zero() || !p.is_finite()) {
            return Err(Error::domain("categorical", "probabilities must be finite and nonnegative"));
        }
        let s: F = probs.iter().copied().sum();
        if (s - F::one()).abs() > F::lit(1e-9) {
            return Err(Error::domain("categorical", format!("probabilities sum to {s}")));
        }
        Ok(Self { probs })
    }

    pub fn uniform(q: usize) -> Self {
        Self { probs: vec![F::one() / F::from_usize_lossy(q); q] }
    }

    pub fn one_hot(q: usize, k: usize) -> Self {
        let mut probs = vec![F::zero(); q];
        probs[k] = F::one();
        Self { probs }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }
}

fn argmax<F: Scalar>(v: &[F]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// `Σ_i q_i log(q_i / p_i)` with `p` floored at 1e-12 and `0·log 0 = 0`.
pub fn kl_categorical<F: Scalar>(q: &[F], p: &[F]) -> Result<F> {
    if q.len() != p.len() {
        return Err(Error::shape("kl_categorical", format!("{} vs {} categories", q.len(), p.len())));
    }
    let floor = F::lit(LOG_FLOOR);
    Ok(q.iter()
        .zip(p)
        .filter(|(qi, _)| **qi > F::zero())
        .map(|(&qi, &pi)| qi * (qi.ln() - pi.max(floor).ln()))
        .sum())
}

/// `Q` independent standard Gumbel draws.
pub fn sample_gumbel_noise<F: Scalar, R: Rng + ?Sized>(q: usize, rng: &mut R) -> Vec<F> {
    (0..q).map(|_| gumbel(rng)).collect()
}

fn perturbed_logits<F: Scalar>(probs: &[F], noise: &[F], temperature: F) -> Vec<F> {
    probs
        .iter()
        .zip(noise)
        .map(|(&p, &g)| {
            let mask = if p == F::zero() { F::lit(MASKED_LOGIT) } else { F::zero() };
            ((p + F::lit(LOG_FLOOR)).ln() + g + mask) / temperature
        })
        .collect()
}

/// `softmax((log(p + 1e-12) + g)/T)` for given noise `g`; categories with
/// `p = 0` exactly receive zero weight. `hard` returns the argmax one-hot.
pub fn gumbel_softmax_from_noise<F: Scalar>(probs: &[F], noise: &[F], temperature: F, hard: bool) -> Result<Vec<F>> {
    if !(temperature > F::zero()) {
        return Err(Error::domain("gumbel_softmax", "temperature must be positive"));
    }
    if probs.len() != noise.len() {
        return Err(Error::shape("gumbel_softmax", format!("{} probs, {} noise draws", probs.len(), noise.len())));
    }
    let logits = perturbed_logits(probs, noise, temperature);
    let m = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let e: Vec<F> = logits.iter().map(|&l| (l - m).exp()).collect();
    let s: F = e.iter().copied().sum();
    let soft: Vec<F> = e.into_iter().map(|v| v / s).collect();
    if hard {
        let k = argmax(&soft);
        Ok((0..soft.len()).map(|i| if i == k { F::one() } else { F::zero() }).collect())
    } else {
        Ok(soft)
    }
}

/// Draws one relaxed sample of the categorical.
pub fn gumbel_softmax_sample<F: Scalar, R: Rng + ?Sized>(probs: &[F], temperature: f64, hard: bool, rng: &mut R) -> Result<Vec<F>> {
    let noise = sample_gumbel_noise(probs.len(), rng);
    gumbel_softmax_from_noise(probs, &noise, F::lit(temperature), hard)
}

/// Tape version of [`gumbel_softmax_from_noise`]; differentiable in `probs`.
/// The hard variant passes gradients straight through the soft sample.
pub fn gumbel_softmax_var<'t, F: Scalar>(probs: Var<'t, F>, noise: &[F], temperature: F, hard: bool) -> Result<Var<'t, F>> {
    if !(temperature > F::zero()) {
        return Err(Error::domain("gumbel_softmax", "temperature must be positive"));
    }
    let tape = probs.tape();
    let pv = probs.value();
    if pv.shape() != [noise.len()] {
        return Err(Error::shape("gumbel_softmax", format!("probs {:?}, {} noise draws", pv.shape(), noise.len())));
    }
    let offset: Vec<F> = pv
        .data()
        .iter()
        .zip(noise)
        .map(|(&p, &g)| g + if p == F::zero() { F::lit(MASKED_LOGIT) } else { F::zero() })
        .collect();
    let logits = probs
        .add_scalar(F::lit(LOG_FLOOR))
        .log()?
        .add(tape.constant(Tensor::from_vec(offset)))?
        .scale(F::one() / temperature);
    let soft = logits.softmax(0)?;
    if !hard {
        return Ok(soft);
    }
    let sv = soft.value();
    let k = argmax(sv.data());
    let shift: Vec<F> = sv
        .data()
        .iter()
        .enumerate()
        .map(|(i, &s)| if i == k { F::one() - s } else { -s })
        .collect();
    soft.add(tape.constant(Tensor::from_vec(shift)))
}

/// Which set-network structure produces the categorical.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PnnVersion {
    V1Gridless,
    V2Grid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Sum,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PnnConfig {
    pub version: PnnVersion,
    /// MLP-1 width (v1) or CNN channel count (v2).
    pub hidden: usize,
    pub pooling: Pooling,
    /// Smoother lengthscale for the v2 grid channels.
    pub v2_lengthscale: f64,
}

impl Default for PnnConfig {
    fn default() -> Self {
        Self { version: PnnVersion::V1Gridless, hidden: 32, pooling: Pooling::Sum, v2_lengthscale: 0.1 }
    }
}

impl PnnConfig {
    pub fn v2() -> Self {
        Self { version: PnnVersion::V2Grid, hidden: 16, pooling: Pooling::Mean, v2_lengthscale: 0.1 }
    }

    /// Registers `pnn.*` parameters for a bank of `q` kernels and `channels` heads.
    pub fn init_params<F: Scalar, R: Rng + ?Sized>(&self, q: usize, channels: usize, store: &mut ParamStore<F>, rng: &mut R) {
        let h = self.hidden;
        match self.version {
            PnnVersion::V1Gridless => {
                store.init_affine("pnn.mlp1.0", q + 1, h, rng);
                store.init_affine("pnn.mlp1.1", h, h, rng);
            }
            PnnVersion::V2Grid => {
                store.init_conv("pnn.cnn.0", 2, h, 5, rng);
                store.init_conv("pnn.cnn.1", h, h, 5, rng);
            }
        }
        for k in 0..channels {
            store.init_affine(&format!("pnn.head.{k}"), h, q, rng);
        }
    }
}

/// Output of the set network for one channel.
#[derive(Clone, Copy)]
pub struct PnnHead<'t, F> {
    pub probs: Var<'t, F>,
    pub log_probs: Var<'t, F>,
}

/// One context set per channel.
pub type ChannelContext<'a, F> = (&'a [F], &'a [F]);

/// Categorical over the bank for every channel's context set. Empty context
/// sets give the uniform distribution.
pub fn pnn_forward<'t, F: Scalar>(
    config: &PnnConfig,
    params: &Bound<'t, F>,
    bank: &TapeBank<'t, F>,
    contexts: &[ChannelContext<'_, F>],
    grid: Option<&Grid<F>>,
) -> Result<Vec<PnnHead<'t, F>>> {
    let tape = bank.tape();
    let mut heads = Vec::with_capacity(contexts.len());
    for (k, &(xc, yc)) in contexts.iter().enumerate() {
        if xc.len() != yc.len() {
            return Err(Error::shape("pnn_forward", format!("channel {k}: {} inputs, {} outputs", xc.len(), yc.len())));
        }
        let logits = if xc.is_empty() {
            tape.constant(Tensor::zeros(&[bank.q]))
        } else {
            let pooled = match config.version {
                PnnVersion::V1Gridless => v1_trunk(config, params, bank, xc, yc)?,
                PnnVersion::V2Grid => {
                    let g = grid.ok_or_else(|| Error::invalid("p_nn version 2 requires a grid"))?;
                    v2_trunk(config, params, xc, yc, g)?
                }
            };
            params.affine(&format!("pnn.head.{k}"), pooled)?.reshape(&[bank.q])?
        };
        heads.push(PnnHead { probs: logits.softmax(0)?, log_probs: logits.log_softmax(0)? });
    }
    Ok(heads)
}

fn pool<'t, F: Scalar>(config: &PnnConfig, x: Var<'t, F>, axis: usize) -> Result<Var<'t, F>> {
    match config.pooling {
        Pooling::Sum => x.sum(axis, false),
        Pooling::Mean => x.mean(axis, false),
    }
}

fn v1_trunk<'t, F: Scalar>(
    config: &PnnConfig,
    params: &Bound<'t, F>,
    bank: &TapeBank<'t, F>,
    xc: &[F],
    yc: &[F],
) -> Result<Var<'t, F>> {
    let tape = bank.tape();
    let n = xc.len();
    let y = tape.constant(Tensor::new(vec![n, 1], yc.to_vec())?);
    let mut cols = Vec::with_capacity(bank.q + 1);
    for q in 0..bank.q {
        cols.push(bank.basis_matrix(q, xc, xc)?.matmul(y)?);
    }
    cols.push(y);
    let feats = Var::concat(&cols, 1)?;
    let h = params.affine("pnn.mlp1.0", feats)?.relu();
    let h = params.affine("pnn.mlp1.1", h)?.relu();
    pool(config, h, 0)?.reshape(&[1, config.hidden])
}

fn v2_trunk<'t, F: Scalar>(
    config: &PnnConfig,
    params: &Bound<'t, F>,
    xc: &[F],
    yc: &[F],
    grid: &Grid<F>,
) -> Result<Var<'t, F>> {
    let tape = params.get("pnn.cnn.0.w")?.tape();
    let k = Rbf { lengthscale: F::lit(config.v2_lengthscale) };
    let mut input = density_channel(xc, grid, &k);
    input.extend(deterministic_data_channel(xc, yc, grid, &k));
    let x = tape.constant(Tensor::new(vec![2, grid.len], input)?);
    let h = params.conv("pnn.cnn.0", x, 2)?.relu();
    let h = params.conv("pnn.cnn.1", h, 2)?.relu();
    pool(config, h, 1)?.reshape(&[1, config.hidden])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convdeepsets::make_grid;
    use crate::kernels::make_kernel_bank;
    use crate::random::{rng_from_seed, uniform};
    use crate::tensor::gradcheck::check_gradients;
    use crate::tensor::Tape;

    #[test]
    fn categorical_validation() {
        assert!(CategoricalParams::new(vec![0.3, 0.7]).is_ok());
        assert!(CategoricalParams::new(vec![0.3, 0.6]).is_err());
        assert!(CategoricalParams::new(vec![-0.1, 1.1]).is_err());
        assert_eq!(CategoricalParams::<f64>::uniform(4).probs, vec![0.25; 4]);
    }

    #[test]
    fn kl_cases() {
        assert!(kl_categorical(&[0.2f64, 0.8], &[0.2, 0.8]).unwrap().abs() < 1e-15);
        let v = kl_categorical(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
        let mut rng = rng_from_seed(3);
        for _ in 0..200 {
            let a: Vec<f64> = (0..4).map(|_| uniform(&mut rng, 0.0, 1.0)).collect();
            let b: Vec<f64> = (0..4).map(|_| uniform(&mut rng, 0.0, 1.0)).collect();
            let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
            let a: Vec<f64> = a.iter().map(|v| v / sa).collect();
            let b: Vec<f64> = b.iter().map(|v| v / sb).collect();
            assert!(kl_categorical(&a, &b).unwrap() >= 0.0);
        }
    }

    #[test]
    fn low_temperature_limit() {
        // the soft sample is within 1% of one-hot exactly when the top perturbed
        // logit leads the others by enough; at T = 1e-4 that is almost always
        let mut rng = rng_from_seed(4);
        let p = [0.1f64, 0.2, 0.3, 0.4];
        let t = 0.01;
        for _ in 0..1000 {
            let g: Vec<f64> = sample_gumbel_noise(4, &mut rng);
            let z = gumbel_softmax_from_noise(&p, &g, t, false).unwrap();
            let l: Vec<f64> = p.iter().zip(&g).map(|(p, g)| (p + LOG_FLOOR).ln() + g).collect();
            let k = argmax(&l);
            assert_eq!(argmax(&z), k);
            let rest: f64 = (0..4).filter(|&j| j != k).map(|j| ((l[j] - l[k]) / t).exp()).sum();
            assert_eq!(z[k] >= 0.99, rest <= 1.0 / 99.0 + 1e-12 && (1.0 / (1.0 + rest)) >= 0.99);
        }
        let hits = (0..1000)
            .filter(|_| gumbel_softmax_sample(&p, 1e-4, false, &mut rng).unwrap().iter().copied().fold(0.0, f64::max) >= 0.99)
            .count();
        assert!(hits >= 999, "{hits}");
    }

    #[test]
    fn one_hot_probs_stay_one_hot() {
        let mut rng = rng_from_seed(5);
        for t in [0.01, 0.5, 10.0, 1000.0] {
            let z = gumbel_softmax_sample(&[0.0, 1.0, 0.0], t, false, &mut rng).unwrap();
            assert_eq!(z, vec![0.0, 1.0, 0.0]);
        }
    }

    #[test]
    fn tape_relaxation_matches_plain_and_gradcheck() {
        let noise = [0.3, -0.8, 1.2];
        let p = [0.2f64, 0.5, 0.3];
        let plain = gumbel_softmax_from_noise(&p, &noise, 0.5, false).unwrap();
        let tape = Tape::new();
        let v = gumbel_softmax_var(tape.constant(Tensor::from_vec(p.to_vec())), &noise, 0.5, false).unwrap();
        for (a, b) in plain.iter().zip(v.value().data()) {
            assert!((a - b).abs() < 1e-15);
        }
        let hard = gumbel_softmax_var(tape.constant(Tensor::from_vec(p.to_vec())), &noise, 0.5, true).unwrap();
        assert_eq!(hard.value().data(), gumbel_softmax_from_noise(&p, &noise, 0.5, true).unwrap().as_slice());

        let weights = Tensor::from_vec(vec![0.7, -1.3, 2.1]);
        let report = check_gradients(
            &[Tensor::from_vec(p.to_vec())],
            |tape, v| {
                let z = gumbel_softmax_var(v[0], &noise, 0.5, false)?;
                Ok(z.mul(tape.constant(weights.clone()))?.sum_all())
            },
            1e-6,
            1e-8,
            None,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }

    fn setup(version: PnnVersion) -> (PnnConfig, ParamStore<f64>) {
        let cfg = match version {
            PnnVersion::V1Gridless => PnnConfig::default(),
            PnnVersion::V2Grid => PnnConfig::v2(),
        };
        let mut store = ParamStore::new();
        cfg.init_params(4, 1, &mut store, &mut rng_from_seed(9));
        (cfg, store)
    }

    fn run(cfg: &PnnConfig, store: &ParamStore<f64>, xc: &[f64], yc: &[f64], grid: Option<&Grid<f64>>) -> Vec<f64> {
        let bank = make_kernel_bank::<f64>(4, 4.0).unwrap();
        let tape = Tape::new();
        let b = store.bind(&tape);
        let tb = TapeBank::constant(&tape, &bank);
        let heads = pnn_forward(cfg, &b, &tb, &[(xc, yc)], grid).unwrap();
        heads[0].probs.value().into_data()
    }

    #[test]
    fn v1_properties() {
        let (cfg, mut store) = setup(PnnVersion::V1Gridless);
        let xc = [0.1, 0.9, 1.7, 2.2, 3.5];
        let yc = [0.3, -0.4, 1.1, 0.2, -0.9];
        let p = run(&cfg, &store, &xc, &yc, None);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let xs: Vec<f64> = xc.iter().map(|x| x + 1.7).collect();
        let ps = run(&cfg, &store, &xs, &yc, None);
        assert!(p.iter().zip(&ps).all(|(a, b)| (a - b).abs() < 1e-9));
        let perm = [3, 0, 4, 2, 1];
        let xp: Vec<f64> = perm.iter().map(|&i| xc[i]).collect();
        let yp: Vec<f64> = perm.iter().map(|&i| yc[i]).collect();
        let pp = run(&cfg, &store, &xp, &yp, None);
        assert!(p.iter().zip(&pp).all(|(a, b)| (a - b).abs() < 1e-12));
        assert_eq!(run(&cfg, &store, &[], &[], None), vec![0.25; 4]);
        store.get_mut("pnn.head.0.w").unwrap().data_mut().iter_mut().for_each(|w| *w = 0.0);
        assert_eq!(run(&cfg, &store, &xc, &yc, None), vec![0.25; 4]);
    }

    #[test]
    fn v2_grid_shift_invariance() {
        let (cfg, store) = setup(PnnVersion::V2Grid);
        let xc = [0.1, 0.9, 1.7];
        let yc = [0.3, -0.4, 1.1];
        let g = make_grid(0.0, 2.0, 16.0, 0.5).unwrap();
        let p = run(&cfg, &store, &xc, &yc, Some(&g));
        let s = 5.0 / 16.0;
        let xs: Vec<f64> = xc.iter().map(|x| x + s).collect();
        let gs = make_grid(s, 2.0 + s, 16.0, 0.5).unwrap();
        let ps = run(&cfg, &store, &xs, &yc, Some(&gs));
        assert!(p.iter().zip(&ps).all(|(a, b)| (a - b).abs() < 1e-9), "{p:?} {ps:?}");
        let tape = Tape::new();
        let b = store.bind(&tape);
        let tb = TapeBank::constant(&tape, &make_kernel_bank::<f64>(4, 4.0).unwrap());
        assert!(pnn_forward(&cfg, &b, &tb, &[(&xc[..], &yc[..])], None).is_err());
    }
}
