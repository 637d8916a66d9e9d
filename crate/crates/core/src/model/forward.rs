use rand::Rng;

use super::{decoder_forward, Model, ModelConfig, Variant, SIGMA_FLOOR};
use crate::convdeepsets::{
    data_delta_channel, default_filter_half_width, density_channel, deterministic_data_channel, grid_for, Grid,
    RepresentationMode,
};
use crate::error::{Error, Result};
use crate::gp::{sample_rff_prior, RffPrior};
use crate::kernels::Rbf;
use crate::latent::{gumbel_softmax_var, pnn_forward, sample_gumbel_noise, PnnHead};
use crate::params::Bound;
use crate::scalar::Scalar;
use crate::tapekernel::TapeBank;
use crate::task::Task;
use crate::tensor::{Tape, Tensor, Var};

/// All randomness of one forward pass, drawn up front so a pass can be
/// repeated with frozen noise.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleNoise<F> {
    /// `[sample][channel]` Gumbel draws, one per basis kernel.
    pub gumbel: Vec<Vec<Vec<F>>>,
    /// `[sample][channel]` random feature priors.
    pub priors: Vec<Vec<RffPrior<F>>>,
}

/// Draws noise in the order sample → channel → (Gumbel, feature prior).
pub fn draw_noise<F: Scalar, R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<SampleNoise<F>> {
    let mut noise = SampleNoise { gumbel: Vec::new(), priors: Vec::new() };
    if config.variant == Variant::Convcnp {
        return Ok(noise);
    }
    let bank = config.initial_bank::<F>()?;
    for _ in 0..config.n_samples {
        let mut g = Vec::with_capacity(config.channels);
        let mut p = Vec::with_capacity(config.channels);
        for _ in 0..config.channels {
            g.push(sample_gumbel_noise(bank.len(), rng));
            p.push(sample_rff_prior(&bank, config.l_spec, rng)?);
        }
        noise.gumbel.push(g);
        noise.priors.push(p);
    }
    Ok(noise)
}

/// Tape outputs of one forward pass.
pub struct ForwardOutput<'t, F> {
    /// Per channel `[N, N^t_k]`.
    pub mu: Vec<Var<'t, F>>,
    pub sigma: Vec<Var<'t, F>>,
    /// `[N]`: summed Gaussian log-density of all targets under each sample.
    pub sample_loglik: Var<'t, F>,
    /// Per channel categorical (latent variant only).
    pub heads: Vec<PnnHead<'t, F>>,
    pub bank: TapeBank<'t, F>,
    pub grid: Grid<F>,
}

impl<'t, F: Scalar> ForwardOutput<'t, F> {
    /// `log (1/N) Σ_n exp(ℓ_n)`.
    pub fn loglik(&self) -> Result<Var<'t, F>> {
        let n = self.sample_loglik.shape()[0];
        Ok(self.sample_loglik.log_sum_exp(0, false)?.add_scalar(-F::from_usize_lossy(n).ln()))
    }
}

fn tape_bank<'t, F: Scalar>(model: &Model<F>, params: &Bound<'t, F>, tape: &'t Tape<F>) -> Result<TapeBank<'t, F>> {
    let cfg = &model.config;
    if cfg.variant != Variant::Bayes {
        return Ok(TapeBank::constant(tape, &cfg.initial_bank()?));
    }
    let q = cfg.q;
    let sigma2 = params.get("kernel.log_sigma2")?.exp();
    let mu = if q == 1 {
        tape.constant(Tensor::zeros(&[1]))
    } else {
        let sp = params.get("kernel.mu_delta")?.softplus().reshape(&[q - 1, 1])?;
        let lower = (0..q).flat_map(|i| (0..q - 1).map(move |j| if j < i { F::one() } else { F::zero() })).collect();
        tape.constant(Tensor::new(vec![q, q - 1], lower)?).matmul(sp)?.reshape(&[q])?
    };
    Ok(TapeBank { mu, sigma2, q, sigma_eps: F::lit(cfg.sigma_eps) })
}

/// `sqrt(z)` with exactly-zero weights kept at zero.
fn masked_sqrt<'t, F: Scalar>(z: Var<'t, F>) -> Result<Var<'t, F>> {
    let zv = z.value();
    if zv.data().iter().all(|v| *v > F::zero()) {
        return z.sqrt();
    }
    let tape = z.tape();
    let lift: Vec<F> = zv.data().iter().map(|v| if *v > F::zero() { F::zero() } else { F::one() }).collect();
    let keep: Vec<F> = lift.iter().map(|v| F::one() - *v).collect();
    z.add(tape.constant(Tensor::from_vec(lift)))?.sqrt()?.mul(tape.constant(Tensor::from_vec(keep)))
}

/// `Σ_q sqrt(z_q)·φ_q(x)` at every point, as `[P]`.
fn prior_term<'t, F: Scalar>(bank: &TapeBank<'t, F>, prior: &RffPrior<F>, sqrt_z: Var<'t, F>, pts: &[F]) -> Result<Var<'t, F>> {
    let tape = bank.tape();
    let l = prior.l_spec;
    let p = pts.len();
    let col = tape.constant(Tensor::new(vec![p, 1], pts.to_vec())?);
    let sd = bank.sigma2.sqrt()?;
    let scale = (F::lit(2.0) / F::from_usize_lossy(l)).sqrt();
    let mut acc: Option<Var<'t, F>> = None;
    for q in 0..bank.q {
        let eps = tape.constant(Tensor::from_vec(prior.unit_freqs[q].clone()));
        let s = eps.mul(sd.narrow(0, q, 1)?)?.add(bank.mu.narrow(0, q, 1)?)?.reshape(&[1, l])?;
        let phase = tape.constant(Tensor::from_vec(prior.phases[q].clone()));
        let w = tape.constant(Tensor::new(vec![l, 1], prior.weights[q].clone())?);
        let feat = col.matmul(s)?.scale(F::two_pi()).add(phase)?.cos().matmul(w)?.scale(scale);
        let term = feat.mul(sqrt_z.narrow(0, q, 1)?)?;
        acc = Some(match acc {
            None => term,
            Some(a) => a.add(term)?,
        });
    }
    acc.expect("bank is nonempty").reshape(&[p])
}

fn identity_scaled<F: Scalar>(n: usize, v: F) -> Tensor<F> {
    let mut data = vec![F::zero(); n * n];
    for i in 0..n {
        data[i * n + i] = v;
    }
    Tensor::new(vec![n, n], data).expect("sized")
}

/// Density and `N` sampled data channels of one output channel, each `[M]`.
#[allow(clippy::too_many_arguments)]
fn random_channels<'t, F: Scalar>(
    cfg: &ModelConfig,
    bank: &TapeBank<'t, F>,
    probs: Var<'t, F>,
    xc: &[F],
    yc: &[F],
    grid: &Grid<F>,
    noise: &SampleNoise<F>,
    k: usize,
) -> Result<(Var<'t, F>, Vec<Var<'t, F>>)> {
    let tape = bank.tape();
    let t = grid.points();
    let m = grid.len;
    let nc = xc.len();
    let (density, kgc, kcc) = if nc == 0 {
        (tape.constant(Tensor::zeros(&[m])), None, None)
    } else {
        let kgc = bank.mixture_matrix(probs, &t, xc)?;
        let eps = bank.sigma_eps;
        let kcc = bank.mixture_matrix(probs, xc, xc)?.add(tape.constant(identity_scaled(nc, eps * eps)))?;
        (kgc.sum(1, false)?, Some(kgc), Some(kcc))
    };
    let mut pts = t.clone();
    pts.extend_from_slice(xc);
    let temperature = F::lit(cfg.gs_temperature);
    let mut channels = Vec::with_capacity(cfg.n_samples);
    for n in 0..cfg.n_samples {
        let z = gumbel_softmax_var(probs, &noise.gumbel[n][k], temperature, cfg.hard_gumbel)?;
        let root = masked_sqrt(z)?;
        let channel = match cfg.mode {
            RepresentationMode::Exact => {
                let f = prior_term(bank, &noise.priors[n][k], root, &pts)?;
                let on_grid = f.narrow(0, 0, m)?;
                match (&kgc, &kcc) {
                    (Some(kgc), Some(kcc)) => {
                        let psi = f.narrow(0, m, nc)?;
                        let resid = tape.constant(Tensor::new(vec![nc], yc.to_vec())?).sub(psi)?.reshape(&[nc, 1])?;
                        let v = kcc.spd_solve(resid)?;
                        on_grid.add(kgc.matmul(v)?.reshape(&[m])?)?
                    }
                    _ => on_grid,
                }
            }
            RepresentationMode::Approx { alpha } => {
                let a = F::lit(alpha);
                let on_grid = prior_term(bank, &noise.priors[n][k], root, &t)?;
                let plain_bank = bank.to_bank()?;
                let half = default_filter_half_width(&plain_bank, grid);
                let lags: Vec<F> = (-(half as isize)..=half as isize).map(|j| grid.spacing * F::lit(j as f64)).collect();
                let width = lags.len();
                let filter = bank.mixture_matrix(probs, &lags, &[F::zero()])?.reshape(&[1, 1, width])?;
                let delta = tape.constant(Tensor::new(vec![m], data_delta_channel(xc, yc, grid))?);
                let resid = delta.sub(on_grid.scale(a))?.reshape(&[1, m])?;
                let smoothed = resid.conv1d(filter, tape.constant(Tensor::zeros(&[1])), half)?.reshape(&[m])?;
                on_grid.scale(a).add(smoothed)?
            }
        };
        channels.push(channel);
    }
    Ok((density, channels))
}

/// Runs the full pipeline on `task` with the given noise. Targets without
/// outputs (`yt` empty) are allowed only when `task` has no `yt` at all.
pub fn forward<'t, F: Scalar>(
    model: &Model<F>,
    params: &Bound<'t, F>,
    tape: &'t Tape<F>,
    task: &Task<F>,
    noise: &SampleNoise<F>,
) -> Result<ForwardOutput<'t, F>> {
    let cfg = &model.config;
    if task.num_channels() != cfg.channels {
        return Err(Error::shape("forward", format!("task has {} channels, model {}", task.num_channels(), cfg.channels)));
    }
    for (k, ch) in task.channels.iter().enumerate() {
        if ch.xc.len() != ch.yc.len() {
            return Err(Error::shape("forward", format!("channel {k}: context inputs and outputs differ in length")));
        }
        if ch.xt.is_empty() {
            return Err(Error::invalid(format!("forward: channel {k} has no target inputs")));
        }
    }
    let inputs = task.all_inputs();
    let grid = grid_for(&[&inputs], F::lit(cfg.points_per_unit), F::lit(cfg.margin))?;
    let m = grid.len;
    let bank = tape_bank(model, params, tape)?;
    let n_samples = cfg.n_samples;

    let mut heads = Vec::new();
    // per output channel: density [M] and sample channels [M] × N
    let mut reps: Vec<(Var<'t, F>, Vec<Var<'t, F>>)> = Vec::with_capacity(cfg.channels);
    match cfg.variant {
        Variant::Convcnp => {
            let k = Rbf { lengthscale: F::lit(cfg.convcnp_lengthscale) };
            for ch in &task.channels {
                let d = density_channel(&ch.xc, &grid, &k);
                let f = deterministic_data_channel(&ch.xc, &ch.yc, &grid, &k);
                reps.push((tape.constant(Tensor::from_vec(d)), vec![tape.constant(Tensor::from_vec(f))]));
            }
        }
        Variant::Bayes | Variant::Gpconvcnp => {
            if noise.priors.len() != n_samples || noise.priors.iter().any(|p| p.len() != cfg.channels) {
                return Err(Error::shape("forward", "noise does not match the model's samples and channels"));
            }
            let probs: Vec<Var<'t, F>> = if cfg.variant == Variant::Bayes {
                let contexts: Vec<(&[F], &[F])> = task.channels.iter().map(|c| (&c.xc[..], &c.yc[..])).collect();
                heads = pnn_forward(&cfg.pnn, params, &bank, &contexts, Some(&grid))?;
                heads.iter().map(|h| h.probs).collect()
            } else {
                vec![tape.constant(Tensor::from_vec(vec![F::one()])); cfg.channels]
            };
            for (k, ch) in task.channels.iter().enumerate() {
                reps.push(random_channels(cfg, &bank, probs[k], &ch.xc, &ch.yc, &grid, noise, k)?);
            }
        }
    }

    let mut per_sample = Vec::with_capacity(n_samples);
    for n in 0..n_samples {
        let mut parts = Vec::with_capacity(2 * cfg.channels);
        for (density, samples) in &reps {
            parts.push(density.reshape(&[1, 1, m])?);
            parts.push(samples[n].reshape(&[1, 1, m])?);
        }
        per_sample.push(Var::concat(&parts, 1)?);
    }
    let x = Var::concat(&per_sample, 0)?;
    let h = decoder_forward(cfg.decoder, params, x)?;
    let feat = h.shape()[1];
    let flat = h.reshape(&[n_samples * feat, m])?;

    let log_l = params.get("smooth.log_lengthscale")?;
    let coef = log_l.scale(F::lit(-2.0)).exp().scale(F::lit(-0.5));
    let t = grid.points();
    let half_log_2pi = F::lit(0.5 * (2.0 * std::f64::consts::PI).ln());
    let mut mus = Vec::with_capacity(cfg.channels);
    let mut sigmas = Vec::with_capacity(cfg.channels);
    let mut loglik: Option<Var<'t, F>> = None;
    for (k, ch) in task.channels.iter().enumerate() {
        let nt = ch.xt.len();
        let sq: Vec<F> = t.iter().flat_map(|&tm| ch.xt.iter().map(move |&x| (x - tm) * (x - tm))).collect();
        let w = tape.constant(Tensor::new(vec![m, nt], sq)?).mul(coef)?.exp();
        let smoothed = flat.matmul(w)?.reshape(&[n_samples, feat, nt])?;
        let out = params.conv("head", smoothed, 0)?;
        let mu = out.narrow(1, 2 * k, 1)?.reshape(&[n_samples, nt])?;
        let sigma = out.narrow(1, 2 * k + 1, 1)?.reshape(&[n_samples, nt])?.softplus().add_scalar(F::lit(SIGMA_FLOOR));
        if ch.yt.len() == nt {
            let y = tape.constant(Tensor::new(vec![1, nt], ch.yt.clone())?);
            let zsc = y.sub(mu)?.div(sigma)?;
            let lp = zsc.square().scale(F::lit(-0.5)).sub(sigma.log()?)?.add_scalar(-half_log_2pi).sum(1, false)?;
            loglik = Some(match loglik {
                None => lp,
                Some(a) => a.add(lp)?,
            });
        } else if !ch.yt.is_empty() {
            return Err(Error::shape("forward", format!("channel {k}: {} targets but {} outputs", nt, ch.yt.len())));
        }
        mus.push(mu);
        sigmas.push(sigma);
    }
    let sample_loglik = loglik.unwrap_or_else(|| tape.constant(Tensor::zeros(&[n_samples])));
    Ok(ForwardOutput { mu: mus, sigma: sigmas, sample_loglik, heads, bank, grid })
}

/// `log N(y; mu, sigma²)`.
pub fn gaussian_log_density<F: Scalar>(y: F, mu: F, sigma: F) -> F {
    let z = (y - mu) / sigma;
    F::lit(-0.5) * z * z - sigma.ln() - F::lit(0.5 * (2.0 * std::f64::consts::PI).ln())
}

/// Predictive parameters for every sample: `mu[n][k][j]`, `sigma[n][k][j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<F> {
    pub mu: Vec<Vec<Vec<F>>>,
    pub sigma: Vec<Vec<Vec<F>>>,
    /// Per channel categorical over the bank (latent variant only).
    pub probs: Vec<Vec<F>>,
}

impl<F: Scalar> Prediction<F> {
    pub fn num_samples(&self) -> usize {
        self.mu.len()
    }

    /// `log (1/N) Σ_n Π_{k,j} N(y_kj; mu_nkj, sigma_nkj²)`.
    pub fn log_density(&self, yt: &[Vec<F>]) -> Result<F> {
        let per_sample: Vec<F> = (0..self.num_samples())
            .map(|n| {
                if yt.len() != self.mu[n].len() {
                    return Err(Error::shape("log_density", "channel count mismatch"));
                }
                let mut acc = F::zero();
                for (k, ys) in yt.iter().enumerate() {
                    if ys.len() != self.mu[n][k].len() {
                        return Err(Error::shape("log_density", format!("channel {k}: target count mismatch")));
                    }
                    for (j, &y) in ys.iter().enumerate() {
                        acc += gaussian_log_density(y, self.mu[n][k][j], self.sigma[n][k][j]);
                    }
                }
                Ok(acc)
            })
            .collect::<Result<_>>()?;
        Ok(log_mean_exp(&per_sample))
    }
}

pub(crate) fn log_mean_exp<F: Scalar>(v: &[F]) -> F {
    let m = v.iter().copied().fold(F::neg_infinity(), F::max);
    if !m.is_finite() {
        return m;
    }
    let s: F = v.iter().map(|&x| (x - m).exp()).sum();
    m + (s / F::from_usize_lossy(v.len())).ln()
}

fn split<F: Scalar>(v: &Tensor<F>) -> Vec<Vec<F>> {
    let cols = v.shape()[1];
    v.data().chunks(cols).map(<[F]>::to_vec).collect()
}

/// Forward pass without gradients using the given noise.
pub fn predict_with_noise<F: Scalar>(model: &Model<F>, task: &Task<F>, noise: &SampleNoise<F>) -> Result<Prediction<F>> {
    let tape = Tape::new();
    let params = model.params.bind(&tape);
    let out = forward(model, &params, &tape, task, noise)?;
    let n = model.config.n_samples;
    let mut mu = vec![Vec::new(); n];
    let mut sigma = vec![Vec::new(); n];
    for k in 0..task.num_channels() {
        for (i, row) in split(&out.mu[k].value()).into_iter().enumerate() {
            mu[i].push(row);
        }
        for (i, row) in split(&out.sigma[k].value()).into_iter().enumerate() {
            sigma[i].push(row);
        }
    }
    let probs = out.heads.iter().map(|h| h.probs.value().into_data()).collect();
    Ok(Prediction { mu, sigma, probs })
}

/// Draws fresh noise from `rng` and predicts.
pub fn predict<F: Scalar, R: Rng + ?Sized>(model: &Model<F>, task: &Task<F>, rng: &mut R) -> Result<Prediction<F>> {
    let noise = draw_noise(&model.config, rng)?;
    predict_with_noise(model, task, &noise)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convdeepsets::{random_functional_representation, RandomRepresentationConfig};
    use crate::kernels::make_kernel_bank;
    use crate::random::{normal, rng_from_seed, uniform};

    fn toy_task(seed: u64, nc: usize, nt: usize) -> Task<f64> {
        let mut rng = rng_from_seed(seed);
        let xc: Vec<f64> = (0..nc).map(|_| uniform(&mut rng, 0.0, 2.0)).collect();
        let yc: Vec<f64> = xc.iter().map(|x| x.sin() + 0.1 * normal::<f64, _>(&mut rng)).collect();
        let xt: Vec<f64> = (0..nt).map(|_| uniform(&mut rng, 0.0, 2.0)).collect();
        let yt: Vec<f64> = xt.iter().map(|x| x.sin()).collect();
        Task::single(xc, yc, xt, yt)
    }

    fn small(variant: Variant) -> ModelConfig {
        ModelConfig { points_per_unit: 16.0, ..ModelConfig::for_variant(variant) }.normalized()
    }

    #[test]
    fn output_shapes_per_variant() {
        let task = toy_task(1, 6, 9);
        for (variant, n) in [(Variant::Bayes, 5), (Variant::Convcnp, 1), (Variant::Gpconvcnp, 5)] {
            let model = Model::<f64>::new(small(variant), 2).unwrap();
            let p = predict(&model, &task, &mut rng_from_seed(3)).unwrap();
            assert_eq!(p.num_samples(), n);
            assert_eq!(p.mu[0][0].len(), 9);
            assert!(p.sigma.iter().flatten().flatten().all(|&s| s > SIGMA_FLOOR - 1e-15));
            let yt = vec![task.channels[0].yt.clone()];
            assert!(p.log_density(&yt).unwrap().is_finite());
        }
    }

    #[test]
    fn convcnp_is_deterministic() {
        let task = toy_task(4, 5, 7);
        let model = Model::<f64>::new(small(Variant::Convcnp), 2).unwrap();
        let a = predict(&model, &task, &mut rng_from_seed(1)).unwrap();
        let b = predict(&model, &task, &mut rng_from_seed(99)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn identical_samples_leave_log_density_unchanged() {
        let task = toy_task(4, 5, 7);
        let model = Model::<f64>::new(small(Variant::Convcnp), 2).unwrap();
        let p = predict(&model, &task, &mut rng_from_seed(1)).unwrap();
        let yt = vec![task.channels[0].yt.clone()];
        let mut rep = p.clone();
        rep.mu = vec![p.mu[0].clone(); 4];
        rep.sigma = vec![p.sigma[0].clone(); 4];
        assert!((rep.log_density(&yt).unwrap() - p.log_density(&yt).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn tape_channels_match_plain_representation() {
        let cfg = small(Variant::Bayes);
        let model = Model::<f64>::new(cfg.clone(), 5).unwrap();
        let task = toy_task(6, 4, 5);
        let ch = &task.channels[0];
        let noise = draw_noise::<f64, _>(&cfg, &mut rng_from_seed(7)).unwrap();
        let tape = Tape::new();
        let params = model.params.bind(&tape);
        let bank = tape_bank(&model, &params, &tape).unwrap();
        let probs = vec![0.1, 0.4, 0.3, 0.2];
        let pv = tape.constant(Tensor::from_vec(probs.clone()));
        let grid = grid_for(&[&task.all_inputs()], 16.0, 0.1).unwrap();
        let (density, samples) = random_channels(&cfg, &bank, pv, &ch.xc, &ch.yc, &grid, &noise, 0).unwrap();

        let plain_bank = make_kernel_bank::<f64>(4, 4.0).unwrap();
        let rcfg = RandomRepresentationConfig {
            samples: 5,
            l_spec: 10,
            temperature: 0.5,
            hard: false,
            mode: RepresentationMode::Exact,
        };
        let rep = random_functional_representation(&ch.xc, &ch.yc, &grid, &plain_bank, &probs, &rcfg, &mut rng_from_seed(7))
            .unwrap();
        assert!(density.value().data().iter().zip(&rep.density).all(|(a, b)| (a - b).abs() < 1e-10));
        for (s, r) in samples.iter().zip(&rep.data_channels) {
            assert!(s.value().data().iter().zip(r).all(|(a, b)| (a - b).abs() < 1e-8));
        }
    }
}
