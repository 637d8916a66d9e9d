//! Meta-training: multi-sample likelihood, tempered-posterior regulariser,
//! Adam updates and grouped evaluation.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{empirical_posterior_stats, pathwise_posterior_sample, sample_rff_prior};
use crate::kernels::KernelBank;
use crate::latent::{CategoricalParams, LOG_FLOOR};
use crate::model::{draw_noise, forward, gaussian_log_density, predict, Model, SampleNoise, Variant};
use crate::params::Bound;
use crate::random::{derive_seed, rng_from_seed, SeededRng};
use crate::scalar::Scalar;
use crate::task::Task;
use crate::tensor::{AdamConfig, AdamState, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub beta: f64,
    pub tau0: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub tasks_per_epoch: usize,
    pub seed: u64,
    /// Path-wise samples per basis kernel for the tempered posterior.
    pub n_mc: usize,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            tau0: 1.0,
            lr: 5e-4,
            weight_decay: 1e-4,
            epochs: 100,
            batch_size: 16,
            tasks_per_epoch: 1024,
            seed: 0,
            n_mc: 5,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) {
            return Err(Error::Config(format!("beta must be ≥ 0, got {}", self.beta)));
        }
        if !(self.tau0 > 0.0) {
            return Err(Error::Config(format!("tau0 must be > 0, got {}", self.tau0)));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("lr must be > 0 and weight_decay ≥ 0".into()));
        }
        if self.batch_size == 0 || self.tasks_per_epoch == 0 {
            return Err(Error::Config("batch_size and tasks_per_epoch must be positive".into()));
        }
        if self.n_mc < 2 {
            return Err(Error::Config(format!("n_mc must be ≥ 2, got {}", self.n_mc)));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, weight_decay: self.weight_decay, ..AdamConfig::default() }
    }
}

/// `log (1/N) Σ_n Σ_j log N(y_j; mu_nj, sigma_nj²)` for `mu`, `sigma` of
/// shape `[N, N^t]` and `y` of length `N^t`.
pub fn multisample_loglik<'t, F: Scalar>(mu: Var<'t, F>, sigma: Var<'t, F>, y: &[F]) -> Result<Var<'t, F>> {
    let shape = mu.shape();
    if shape.len() != 2 || shape[1] != y.len() || sigma.shape() != shape {
        return Err(Error::shape("multisample_loglik", format!("mu {:?}, sigma {:?}, {} targets", shape, sigma.shape(), y.len())));
    }
    let n = shape[0];
    if n == 0 {
        return Err(Error::invalid("multisample_loglik needs at least one sample"));
    }
    let tape = mu.tape();
    let yv = tape.constant(Tensor::new(vec![1, y.len()], y.to_vec())?);
    let z = yv.sub(mu)?.div(sigma)?;
    let half_log_2pi = F::lit(0.5 * (2.0 * std::f64::consts::PI).ln());
    let per = z.square().scale(F::lit(-0.5)).sub(sigma.log()?)?.add_scalar(-half_log_2pi).sum(1, false)?;
    Ok(per.log_sum_exp(0, false)?.add_scalar(-F::from_usize_lossy(n).ln()))
}

/// Softmax of `loglik / tau0`, shifted by the maximum.
pub fn tempered_softmax<F: Scalar>(logliks: &[F], tau0: f64) -> Result<CategoricalParams<F>> {
    if !(tau0 > 0.0) {
        return Err(Error::domain("tempered_posterior_params", "tau0 must be > 0"));
    }
    let t = F::lit(tau0);
    let m = logliks.iter().copied().fold(F::neg_infinity(), F::max);
    if !m.is_finite() {
        return Err(Error::numerical("tempered_posterior_params", "non-finite kernel log-likelihood"));
    }
    let e: Vec<F> = logliks.iter().map(|&l| ((l - m) / t).exp()).collect();
    let s: F = e.iter().copied().sum();
    CategoricalParams::new(e.into_iter().map(|v| v / s).collect())
}

/// Per basis kernel: the Gaussian log-likelihood of the targets under the
/// empirical moments of `n_mc` one-hot path-wise posterior samples.
pub fn kernel_logliks<F: Scalar, R: Rng + ?Sized>(
    xc: &[F],
    yc: &[F],
    xt: &[F],
    yt: &[F],
    bank: &KernelBank<F>,
    l_spec: usize,
    n_mc: usize,
    rng: &mut R,
) -> Result<Vec<F>> {
    if xt.len() != yt.len() {
        return Err(Error::shape("tempered_posterior_params", "target inputs and outputs differ in length"));
    }
    let q = bank.len();
    let noise_var = bank.sigma_eps() * bank.sigma_eps();
    (0..q)
        .map(|k| {
            let one_hot = CategoricalParams::<F>::one_hot(q, k).probs;
            let samples = (0..n_mc)
                .map(|_| {
                    let prior = sample_rff_prior(bank, l_spec, rng)?;
                    pathwise_posterior_sample(xc, yc, bank, &one_hot, &prior, &one_hot, xt)
                })
                .collect::<Result<Vec<_>>>()?;
            let (mean, var) = empirical_posterior_stats(&samples)?;
            Ok(yt
                .iter()
                .zip(mean.iter().zip(&var))
                .map(|(&y, (&m, &v))| gaussian_log_density(y, m, (v + noise_var).sqrt()))
                .sum())
        })
        .collect()
}

/// The tempered categorical posterior over basis kernels for one channel.
#[allow(clippy::too_many_arguments)]
pub fn tempered_posterior_params<F: Scalar, R: Rng + ?Sized>(
    xc: &[F],
    yc: &[F],
    xt: &[F],
    yt: &[F],
    bank: &KernelBank<F>,
    l_spec: usize,
    n_mc: usize,
    tau0: f64,
    rng: &mut R,
) -> Result<CategoricalParams<F>> {
    if n_mc < 2 {
        return Err(Error::invalid(format!("tempered_posterior_params needs n_mc ≥ 2, got {n_mc}")));
    }
    if !(tau0 > 0.0) {
        return Err(Error::domain("tempered_posterior_params", "tau0 must be > 0"));
    }
    let ll = kernel_logliks(xc, yc, xt, yt, bank, l_spec, n_mc, rng)?;
    tempered_softmax(&ll, tau0)
}

/// Tape terms of the per-task objective.
pub struct LossTerms<'t, F> {
    /// `−(loglik − β·KL) / N^t`.
    pub loss: Var<'t, F>,
    pub loglik: Var<'t, F>,
    pub kl: Option<Var<'t, F>>,
}

/// Builds the per-task loss. `targets` holds one tempered posterior per
/// channel and is treated as a constant.
pub fn task_loss<'t, F: Scalar>(
    model: &Model<F>,
    params: &Bound<'t, F>,
    tape: &'t Tape<F>,
    task: &Task<F>,
    noise: &SampleNoise<F>,
    targets: Option<&[CategoricalParams<F>]>,
    beta: f64,
) -> Result<LossTerms<'t, F>> {
    let nt = task.num_targets();
    if nt == 0 || task.channels.iter().any(|c| c.yt.len() != c.xt.len()) {
        return Err(Error::invalid("training task needs target outputs"));
    }
    let out = forward(model, params, tape, task, noise)?;
    let loglik = out.loglik()?;
    let mut kl: Option<Var<'t, F>> = None;
    if let Some(targets) = targets {
        if targets.len() != out.heads.len() {
            return Err(Error::shape("task_loss", format!("{} targets for {} heads", targets.len(), out.heads.len())));
        }
        for (head, p) in out.heads.iter().zip(targets) {
            let log_p: Vec<F> = p.probs.iter().map(|&v| v.max(F::lit(LOG_FLOOR)).ln()).collect();
            let diff = head.log_probs.sub(tape.constant(Tensor::from_vec(log_p)))?;
            let term = head.probs.mul(diff)?.sum_all();
            kl = Some(match kl {
                None => term,
                Some(a) => a.add(term)?,
            });
        }
    }
    let objective = match kl {
        Some(k) if beta > 0.0 => loglik.sub(k.scale(F::lit(beta)))?,
        _ => loglik,
    };
    let loss = objective.scale(-F::one() / F::from_usize_lossy(nt));
    Ok(LossTerms { loss, loglik, kl })
}

/// Loss and gradients of one task.
#[derive(Debug, Clone)]
pub struct TaskGradient<F> {
    pub loss: F,
    pub loglik: F,
    pub kl: F,
    pub grads: BTreeMap<String, Tensor<F>>,
}

/// Draws the tempered targets (if needed) and the model noise from a task
/// seed, then differentiates the per-task loss.
pub fn task_gradient<F: Scalar>(model: &Model<F>, task: &Task<F>, config: &TrainConfig, seed: u64) -> Result<TaskGradient<F>> {
    let mut rng = rng_from_seed(seed);
    let targets = regulariser_targets(model, task, config, &mut rng)?;
    let noise = draw_noise(&model.config, &mut rng)?;
    let tape = Tape::new();
    let params = model.params.bind(&tape);
    let terms = task_loss(model, &params, &tape, task, &noise, targets.as_deref(), config.beta)?;
    let grads = tape.backward(terms.loss)?;
    Ok(TaskGradient {
        loss: terms.loss.item(),
        loglik: terms.loglik.item(),
        kl: terms.kl.map_or(F::zero(), |k| k.item()),
        grads: params.collect_grads(&grads),
    })
}

/// Tempered posteriors for every channel, or `None` when the model has no
/// latent or `beta` is zero.
pub fn regulariser_targets<F: Scalar>(
    model: &Model<F>,
    task: &Task<F>,
    config: &TrainConfig,
    rng: &mut SeededRng,
) -> Result<Option<Vec<CategoricalParams<F>>>> {
    if model.config.variant != Variant::Bayes || config.beta == 0.0 {
        return Ok(None);
    }
    let bank = model.bank()?;
    task.channels
        .iter()
        .map(|c| tempered_posterior_params(&c.xc, &c.yc, &c.xt, &c.yt, &bank, model.config.l_spec, config.n_mc, config.tau0, rng))
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

/// Applies `f` to `0..n` on up to `threads` scoped workers, returning
/// results in index order.
pub fn par_map<T, G>(n: usize, threads: usize, f: G) -> Vec<T>
where
    T: Send,
    G: Fn(usize) -> T + Sync,
{
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return (0..n).map(f).collect();
    }
    let chunk = n.div_ceil(threads);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|w| s.spawn(move || (w * chunk..((w + 1) * chunk).min(n)).map(f).collect::<Vec<T>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepReport<F> {
    pub loss: F,
    pub loglik: F,
    pub kl: F,
    pub tasks: usize,
    /// Whether the update was skipped because the loss or a gradient was
    /// not finite.
    pub skipped: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub loss: f64,
    pub loglik: f64,
    pub kl: f64,
    pub steps: usize,
    pub skipped: usize,
}

/// Owns a model, its optimiser state and the training RNG.
pub struct Trainer<F> {
    pub model: Model<F>,
    pub config: TrainConfig,
    adam: AdamState<F>,
    names: Vec<String>,
    rng: SeededRng,
    epoch: usize,
}

impl<F: Scalar> Trainer<F> {
    pub fn new(model: Model<F>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let names: Vec<String> = model.params.names().filter(|n| model.is_trainable(n)).map(str::to_string).collect();
        let tensors = names.iter().map(|n| model.params.get(n)).collect::<Result<Vec<_>>>()?;
        let adam = AdamState::new(config.adam(), &tensors);
        let rng = rng_from_seed(derive_seed(config.seed, u64::MAX));
        Ok(Self { model, config, adam, names, rng, epoch: 0 })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn trainable_names(&self) -> &[String] {
        &self.names
    }

    /// One optimiser step on the mean loss of `batch`.
    pub fn step(&mut self, batch: &[Task<F>]) -> Result<StepReport<F>> {
        let seeds: Vec<u64> = (0..batch.len()).map(|_| self.rng.random()).collect();
        self.step_with_seeds(batch, &seeds)
    }

    /// As [`Trainer::step`] but with explicit per-task seeds, so the same
    /// noise can be replayed.
    pub fn step_with_seeds(&mut self, batch: &[Task<F>], seeds: &[u64]) -> Result<StepReport<F>> {
        if batch.is_empty() {
            return Err(Error::invalid("meta_train_step needs a nonempty batch"));
        }
        if seeds.len() != batch.len() {
            return Err(Error::shape("meta_train_step", "one seed per task required"));
        }
        let model = &self.model;
        let config = &self.config;
        let results = par_map(batch.len(), config.threads, |i| task_gradient(model, &batch[i], config, seeds[i]));
        let n = F::from_usize_lossy(batch.len());
        let mut report = StepReport { loss: F::zero(), loglik: F::zero(), kl: F::zero(), tasks: batch.len(), skipped: false };
        let mut sum: Vec<Tensor<F>> = self
            .names
            .iter()
            .map(|name| self.model.params.get(name).map(|t| Tensor::zeros(t.shape())))
            .collect::<Result<_>>()?;
        for r in results {
            let r = r?;
            report.loss += r.loss / n;
            report.loglik += r.loglik / n;
            report.kl += r.kl / n;
            for (acc, name) in sum.iter_mut().zip(&self.names) {
                let g = &r.grads[name];
                for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b / n;
                }
            }
        }
        let finite = report.loss.is_finite() && sum.iter().all(|g| g.data().iter().all(|v| v.is_finite()));
        if !finite {
            report.skipped = true;
            return Ok(report);
        }
        let names = &self.names;
        let mut params: Vec<&mut Tensor<F>> = self
            .model
            .params
            .iter_mut()
            .filter(|(name, _)| names.binary_search_by(|n| n.as_str().cmp(name)).is_ok())
            .map(|(_, t)| t)
            .collect();
        let grads: Vec<&Tensor<F>> = sum.iter().collect();
        self.adam.step(&mut params, &grads)?;
        Ok(report)
    }

    /// One pass over `tasks` in consecutive batches.
    pub fn train_epoch(&mut self, tasks: &[Task<F>]) -> Result<EpochReport> {
        let mut rep = EpochReport { epoch: self.epoch, loss: 0.0, loglik: 0.0, kl: 0.0, steps: 0, skipped: 0 };
        let mut counted = 0usize;
        for batch in tasks.chunks(self.config.batch_size) {
            let s = self.step(batch)?;
            rep.steps += 1;
            if s.skipped {
                rep.skipped += 1;
                continue;
            }
            rep.loss += s.loss.as_f64();
            rep.loglik += s.loglik.as_f64();
            rep.kl += s.kl.as_f64();
            counted += 1;
        }
        if counted > 0 {
            let c = counted as f64;
            rep.loss /= c;
            rep.loglik /= c;
            rep.kl /= c;
        } else {
            rep.loss = f64::NAN;
        }
        self.epoch += 1;
        Ok(rep)
    }
}

/// Per-`N^c` evaluation summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalGroup {
    pub num_context: usize,
    pub tasks: usize,
    /// Mean of per-task log-likelihoods divided by the target count.
    pub mean_ll: f64,
    pub stderr: f64,
    pub mean_ll_raw: f64,
    pub stderr_raw: f64,
    /// Set when only one task is present and the standard error is reported as 0.
    pub single_task: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub variant: String,
    pub groups: Vec<EvalGroup>,
    /// Per-point mean and standard error over all tasks.
    pub overall: (f64, f64),
}

impl EvalReport {
    pub fn group(&self, num_context: usize) -> Option<&EvalGroup> {
        self.groups.iter().find(|g| g.num_context == num_context)
    }

    /// Pools the per-point groups into `[lo, lo + width)` context-size
    /// buckets: `(label, tasks, mean, stderr)`.
    pub fn bucketed(&self, width: usize) -> Vec<(String, usize, f64, f64)> {
        let width = width.max(1);
        // (n, sum, sum of squares) per bucket, rebuilt from mean and stderr.
        let mut acc: BTreeMap<usize, (usize, f64, f64)> = BTreeMap::new();
        for g in &self.groups {
            let n = g.tasks as f64;
            let sd = g.stderr * n.sqrt();
            let e = acc.entry(g.num_context / width).or_default();
            e.0 += g.tasks;
            e.1 += n * g.mean_ll;
            e.2 += sd * sd * (n - 1.0) + n * g.mean_ll * g.mean_ll;
        }
        acc.into_iter()
            .map(|(b, (n, sum, sq))| {
                let label = format!("{}-{}", b * width, (b + 1) * width - 1);
                let nf = n as f64;
                let mean = sum / nf;
                let se = if n > 1 { ((sq - nf * mean * mean).max(0.0) / (nf - 1.0) / nf).sqrt() } else { 0.0 };
                (label, n, mean, se)
            })
            .collect()
    }
}

/// Mean and standard error (`n − 1` standard deviation over `√n`).
pub fn mean_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = v.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Multi-sample log-likelihood of every task, raw and per target point.
pub fn task_logliks<F: Scalar>(model: &Model<F>, tasks: &[Task<F>], seed: u64, threads: usize) -> Result<Vec<(f64, f64)>> {
    par_map(tasks.len(), threads, |i| {
        let task = &tasks[i];
        let mut rng = rng_from_seed(derive_seed(seed, i as u64));
        let p = predict(model, task, &mut rng)?;
        let yt: Vec<Vec<F>> = task.channels.iter().map(|c| c.yt.clone()).collect();
        let ll = p.log_density(&yt)?.as_f64();
        Ok((ll, ll / task.num_targets() as f64))
    })
    .into_iter()
    .collect()
}

/// Evaluates with `n_eval_samples` predictive samples, grouped by context size.
pub fn evaluate_tasks<F: Scalar>(
    model: &Model<F>,
    tasks: &[Task<F>],
    n_eval_samples: usize,
    seed: u64,
    threads: usize,
) -> Result<EvalReport> {
    if tasks.is_empty() {
        return Err(Error::invalid("evaluate_tasks needs at least one task"));
    }
    let mut eval_model = model.clone();
    if eval_model.config.variant != Variant::Convcnp {
        eval_model.config.n_samples = n_eval_samples.max(1);
    }
    let lls = task_logliks(&eval_model, tasks, seed, threads)?;
    let overall = mean_stderr(&lls.iter().map(|p| p.1).collect::<Vec<_>>());
    let mut groups: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
    for (task, ll) in tasks.iter().zip(lls) {
        groups.entry(task.num_context()).or_default().push(ll);
    }
    let groups = groups
        .into_iter()
        .map(|(nc, v)| {
            let raw: Vec<f64> = v.iter().map(|p| p.0).collect();
            let norm: Vec<f64> = v.iter().map(|p| p.1).collect();
            let (mean_ll, stderr) = mean_stderr(&norm);
            let (mean_ll_raw, stderr_raw) = mean_stderr(&raw);
            EvalGroup { num_context: nc, tasks: v.len(), mean_ll, stderr, mean_ll_raw, stderr_raw, single_task: v.len() == 1 }
        })
        .collect();
    Ok(EvalReport { variant: model.config.variant.name().to_string(), groups, overall })
}

/// One row of the metrics stream. Training rows carry `loss` and `kl`,
/// validation rows carry `mean_ll` and `stderr`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: String,
    pub variant: String,
    pub nc_bucket: String,
    pub mean_ll: Option<f64>,
    pub stderr: Option<f64>,
    pub loss: Option<f64>,
    pub kl: Option<f64>,
}

impl MetricsRow {
    pub fn train(report: &EpochReport, variant: &str) -> Self {
        Self {
            epoch: report.epoch,
            split: "train".into(),
            variant: variant.into(),
            nc_bucket: "all".into(),
            mean_ll: None,
            stderr: None,
            loss: Some(report.loss),
            kl: Some(report.kl),
        }
    }

    /// One row per context-size bucket of width 5 plus an `all` row over
    /// every task.
    pub fn validation(epoch: usize, report: &EvalReport) -> Vec<Self> {
        let row = |bucket: String, mean: f64, se: f64| Self {
            epoch,
            split: "validation".into(),
            variant: report.variant.clone(),
            nc_bucket: bucket,
            mean_ll: Some(mean),
            stderr: Some(se),
            loss: None,
            kl: None,
        };
        let mut rows: Vec<Self> = report.bucketed(5).into_iter().map(|(label, _, m, se)| row(label, m, se)).collect();
        rows.push(row("all".into(), report.overall.0, report.overall.1));
        rows
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::make_kernel_bank;
    use crate::model::ModelConfig;
    use crate::random::{normal, uniform};

    fn sine_task(seed: u64, nc: usize, nt: usize) -> Task<f64> {
        let mut rng = rng_from_seed(seed);
        let xc: Vec<f64> = (0..nc).map(|_| uniform(&mut rng, 0.0, 4.0)).collect();
        let xt: Vec<f64> = (0..nt).map(|_| uniform(&mut rng, 0.0, 4.0)).collect();
        let f = |x: f64| (1.5 * x).sin();
        let yc = xc.iter().map(|&x| f(x) + 0.05 * normal::<f64, _>(&mut rng)).collect();
        let yt = xt.iter().map(|&x| f(x)).collect();
        Task::single(xc, yc, xt, yt)
    }

    #[test]
    fn bucketed_matches_direct_pooling() {
        let values: [(usize, f64); 7] = [(5, -1.0), (5, -3.0), (6, -2.5), (9, -0.5), (10, -4.0), (12, -1.5), (14, -2.0)];
        let mut groups: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for (nc, v) in values {
            groups.entry(nc).or_default().push(v);
        }
        let groups = groups
            .into_iter()
            .map(|(nc, v)| {
                let (m, se) = mean_stderr(&v);
                EvalGroup { num_context: nc, tasks: v.len(), mean_ll: m, stderr: se, mean_ll_raw: m, stderr_raw: se, single_task: v.len() == 1 }
            })
            .collect();
        let rep = EvalReport { variant: "bayes".into(), groups, overall: (0.0, 0.0) };
        let b = rep.bucketed(5);
        let direct_lo = mean_stderr(&[-1.0, -3.0, -2.5, -0.5]);
        let direct_hi = mean_stderr(&[-4.0, -1.5, -2.0]);
        assert_eq!(b.len(), 2);
        assert_eq!((b[0].0.as_str(), b[0].1), ("5-9", 4));
        assert_eq!((b[1].0.as_str(), b[1].1), ("10-14", 3));
        assert!((b[0].2 - direct_lo.0).abs() < 1e-12 && (b[0].3 - direct_lo.1).abs() < 1e-12);
        assert!((b[1].2 - direct_hi.0).abs() < 1e-12 && (b[1].3 - direct_hi.1).abs() < 1e-12);
    }

    #[test]
    fn single_sample_is_plain_gaussian_sum() {
        let tape = Tape::<f64>::new();
        let mu = tape.constant(Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap());
        let sigma = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let got = multisample_loglik(mu, sigma, &[0.5, 0.0]).unwrap().item();
        let want = gaussian_log_density(0.5, 0.0, 1.0) + gaussian_log_density(0.0, 1.0, 2.0);
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn multisample_is_above_mean_of_samples() {
        let tape = Tape::<f64>::new();
        let mu = tape.constant(Tensor::new(vec![3, 2], vec![0.0, 1.0, 0.3, -0.2, 1.0, 0.0]).unwrap());
        let sigma = tape.constant(Tensor::new(vec![3, 2], vec![1.0, 0.5, 0.7, 1.1, 0.2, 0.9]).unwrap());
        let y = [0.1, 0.4];
        let got = multisample_loglik(mu, sigma, &y).unwrap().item();
        let m = mu.value();
        let s = sigma.value();
        let mean: f64 = (0..3)
            .map(|n| (0..2).map(|j| gaussian_log_density(y[j], m.data()[n * 2 + j], s.data()[n * 2 + j])).sum::<f64>())
            .sum::<f64>()
            / 3.0;
        assert!(got >= mean);
    }

    #[test]
    fn tempered_softmax_cases() {
        let u = tempered_softmax(&[-3.0f64, -3.0, -3.0], 1.0).unwrap();
        assert!(u.probs.iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-15));
        let p = tempered_softmax(&[0.0f64, -10.0], 1.0).unwrap();
        let e = (-10.0f64).exp();
        assert!((p.probs[0] - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((p.probs[1] - 4.54e-5).abs() < 1e-7);
        let hot = tempered_softmax(&[0.0f64, -10.0], 1e12).unwrap();
        assert!((hot.probs[0] - 0.5).abs() < 1e-9);
        let shifted = tempered_softmax(&[7.0f64, -3.0], 1.0).unwrap();
        assert_eq!(shifted.probs, p.probs);
        assert!(tempered_softmax(&[0.0f64], 0.0).is_err());
    }

    #[test]
    fn tempered_posterior_is_a_distribution() {
        let t = sine_task(2, 8, 10);
        let c = &t.channels[0];
        let bank = make_kernel_bank::<f64>(4, 4.0).unwrap();
        let p = tempered_posterior_params(&c.xc, &c.yc, &c.xt, &c.yt, &bank, 10, 5, 1.0, &mut rng_from_seed(3)).unwrap();
        assert!((p.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(tempered_posterior_params(&c.xc, &c.yc, &c.xt, &c.yt, &bank, 10, 1, 1.0, &mut rng_from_seed(3)).is_err());
    }

    #[test]
    fn stderr_matches_hand_values() {
        assert_eq!(mean_stderr(&[-1.0, -3.0]), (-2.0, 1.0));
        assert_eq!(mean_stderr(&[-1.5]), (-1.5, 0.0));
    }

    #[test]
    fn kl_is_nonnegative_and_lowers_objective() {
        let cfg = ModelConfig { points_per_unit: 16.0, ..ModelConfig::default() }.normalized();
        let model = Model::<f64>::new(cfg, 4).unwrap();
        let task = sine_task(5, 6, 8);
        let tc = TrainConfig::default();
        let mut rng = rng_from_seed(9);
        let targets = regulariser_targets(&model, &task, &tc, &mut rng).unwrap().unwrap();
        let noise = draw_noise(&model.config, &mut rng).unwrap();
        let tape = Tape::new();
        let params = model.params.bind(&tape);
        let with = task_loss(&model, &params, &tape, &task, &noise, Some(&targets), 0.1).unwrap();
        let without = task_loss(&model, &params, &tape, &task, &noise, Some(&targets), 0.0).unwrap();
        assert!(with.kl.unwrap().item() >= 0.0);
        assert!(with.loss.item() >= without.loss.item());
        let nt = task.num_targets() as f64;
        assert!((without.loss.item() + without.loglik.item() / nt).abs() < 1e-12);
    }

    #[test]
    fn par_map_preserves_order() {
        let v = par_map(17, 4, |i| i * i);
        assert_eq!(v, (0..17).map(|i| i * i).collect::<Vec<_>>());
    }

    #[test]
    fn threaded_step_matches_serial() {
        let cfg = ModelConfig { points_per_unit: 16.0, ..ModelConfig::default() }.normalized();
        let batch: Vec<_> = (0..4).map(|i| sine_task(10 + i, 5, 6)).collect();
        let run = |threads| {
            let model = Model::<f64>::new(cfg.clone(), 1).unwrap();
            let mut tr = Trainer::new(model, TrainConfig { threads, ..TrainConfig::default() }).unwrap();
            tr.step(&batch).unwrap();
            tr.model
        };
        assert_eq!(run(1), run(3));
    }

    #[test]
    fn eval_is_deterministic() {
        let cfg = ModelConfig { points_per_unit: 16.0, ..ModelConfig::default() }.normalized();
        let model = Model::<f64>::new(cfg, 1).unwrap();
        let tasks: Vec<_> = (0..3).map(|i| sine_task(i, 5, 6)).collect();
        let a = evaluate_tasks(&model, &tasks, 4, 7, 1).unwrap();
        let b = evaluate_tasks(&model, &tasks, 4, 7, 2).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.groups.len(), 1);
        assert_eq!(a.groups[0].tasks, 3);
    }
}
