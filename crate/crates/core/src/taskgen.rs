//! Seeded synthetic task generators: 1D GP families, sawtooth, 3-channel
//! sinusoids, multi-output spectral mixture GPs and Lotka–Volterra series.

use std::collections::BTreeMap;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{data_kernel_eval, mosm_cross_eval, DataKernelSpec, KernelBank, MosmSpec};
use crate::linalg::{Cholesky, Mat};
use crate::random::{derive_seed, normal, normal_vec, rng_from_seed, uniform, uniform_int};
use crate::scalar::Scalar;
use crate::task::{ChannelData, Task, TaskMeta};

/// Diagonal jitter added to every generator Gram matrix.
pub const GP_JITTER: f64 = 1e-8;
/// Input redraws allowed when a Gram matrix fails to factorise.
pub const MAX_RETRIES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Rbf,
    Matern52,
    WeaklyPeriodic,
    Sawtooth,
    SinusoidalPhase,
    SinusoidalAll,
    Mosm,
    MosmVarying,
    LotkaVolterra,
}

impl Family {
    pub const ALL: [Family; 9] = [
        Family::Rbf,
        Family::Matern52,
        Family::WeaklyPeriodic,
        Family::Sawtooth,
        Family::SinusoidalPhase,
        Family::SinusoidalAll,
        Family::Mosm,
        Family::MosmVarying,
        Family::LotkaVolterra,
    ];

    /// The four single-output processes.
    pub const ONE_D: [Family; 4] = [Family::Rbf, Family::Matern52, Family::WeaklyPeriodic, Family::Sawtooth];

    pub fn name(self) -> &'static str {
        match self {
            Family::Rbf => "rbf",
            Family::Matern52 => "matern52",
            Family::WeaklyPeriodic => "weakly_periodic",
            Family::Sawtooth => "sawtooth",
            Family::SinusoidalPhase => "sinusoidal_phase",
            Family::SinusoidalAll => "sinusoidal_all",
            Family::Mosm => "mosm",
            Family::MosmVarying => "mosm_varying",
            Family::LotkaVolterra => "lotka_volterra",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        Family::ALL
            .into_iter()
            .find(|f| f.name() == key)
            .ok_or_else(|| Error::Config(format!("unknown family `{s}`")))
    }

    pub fn channels(self) -> usize {
        match self {
            Family::SinusoidalPhase | Family::SinusoidalAll | Family::Mosm | Family::MosmVarying => 3,
            Family::LotkaVolterra => 2,
            _ => 1,
        }
    }

    /// Training input range of the family's experiment.
    pub fn train_range(self) -> [f64; 2] {
        match self.channels() {
            3 => [0.0, 3.0],
            2 => [0.0, LvConfig::default().horizon],
            _ => [0.0, 4.0],
        }
    }

    /// Out-of-range evaluation inputs (same width, shifted right).
    pub fn test_range(self) -> [f64; 2] {
        let [a, b] = self.train_range();
        [b, 2.0 * b - a]
    }
}

/// Context and target counts: `N^c ~ U[nc_min, nc_max]`, then
/// `N^t ~ U[nt_min.unwrap_or(N^c), nt_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Counts {
    pub nc_min: usize,
    pub nc_max: usize,
    pub nt_min: Option<usize>,
    pub nt_max: usize,
}

impl Default for Counts {
    fn default() -> Self {
        Self { nc_min: 5, nc_max: 25, nt_min: None, nt_max: 50 }
    }
}

impl Counts {
    /// Fixed context size with a fixed number of targets.
    pub fn fixed(nc: usize, nt: usize) -> Self {
        Self { nc_min: nc, nc_max: nc, nt_min: Some(nt), nt_max: nt }
    }

    pub fn validate(&self) -> Result<()> {
        let nt_lo = self.nt_min.unwrap_or(self.nc_max);
        if self.nc_min > self.nc_max || nt_lo > self.nt_max || self.nt_max == 0 {
            return Err(Error::Config(format!("inconsistent counts {self:?}")));
        }
        Ok(())
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(usize, usize)> {
        self.validate()?;
        let nc = uniform_int(rng, self.nc_min, self.nc_max);
        let nt = uniform_int(rng, self.nt_min.unwrap_or(nc), self.nt_max);
        Ok((nc, nt))
    }
}

fn check_range(range: [f64; 2]) -> Result<()> {
    if !(range[0] < range[1]) || !range.iter().all(|v| v.is_finite()) {
        return Err(Error::Config(format!("input range {range:?} is empty")));
    }
    Ok(())
}

fn uniform_inputs<F: Scalar, R: Rng + ?Sized>(range: [f64; 2], n: usize, rng: &mut R) -> Vec<F> {
    (0..n).map(|_| uniform(rng, range[0], range[1])).collect()
}

fn split_channel<F: Scalar>(x: Vec<F>, y: Vec<F>, nc: usize) -> ChannelData<F> {
    let (xc, xt) = x.split_at(nc);
    let (yc, yt) = y.split_at(nc);
    ChannelData { xc: xc.to_vec(), yc: yc.to_vec(), xt: xt.to_vec(), yt: yt.to_vec() }
}

/// One draw `L·ε` from a zero-mean Gaussian with covariance `gram` (+ jitter).
pub fn sample_gaussian<F: Scalar, R: Rng + ?Sized>(mut gram: Mat<F>, rng: &mut R) -> Result<Vec<F>> {
    gram.add_diag(F::lit(GP_JITTER));
    let chol = Cholesky::new(&gram)?;
    let eps = normal_vec(rng, gram.rows());
    Ok(chol.lower_mul(&eps))
}

/// Single-output GP task from an arbitrary covariance function.
pub fn sample_kernel_task<F: Scalar, R: Rng + ?Sized, K: Fn(F, F) -> F>(
    kernel: K,
    range: [f64; 2],
    counts: &Counts,
    rng: &mut R,
) -> Result<Task<F>> {
    check_range(range)?;
    let (nc, nt) = counts.draw(rng)?;
    let mut last = None;
    for _ in 0..MAX_RETRIES {
        let x: Vec<F> = uniform_inputs(range, nc + nt, rng);
        let gram = Mat::from_fn(x.len(), x.len(), |i, j| kernel(x[i], x[j]));
        match sample_gaussian(gram, rng) {
            Ok(y) => return Ok(Task { channels: vec![split_channel(x, y, nc)], meta: TaskMeta::default() }),
            Err(e) => last = Some(e),
        }
    }
    Err(Error::Numerical(format!(
        "generator Gram not positive definite after {MAX_RETRIES} input draws: {}",
        last.map(|e| e.to_string()).unwrap_or_default()
    )))
}

/// Draws the family hyperparameter: RBF `l ~ U[1.1, 2.1]`, Matérn-5/2
/// `l ~ U[0.19, 0.21]`, weakly periodic `f ~ U[2, 3]`.
pub fn sample_gp_kernel<F: Scalar, R: Rng + ?Sized>(family: Family, rng: &mut R) -> Result<DataKernelSpec<F>> {
    Ok(match family {
        Family::Rbf => DataKernelSpec::Rbf { lengthscale: uniform(rng, 1.1, 2.1) },
        Family::Matern52 => DataKernelSpec::Matern52 { lengthscale: uniform(rng, 0.19, 0.21) },
        Family::WeaklyPeriodic => DataKernelSpec::WeaklyPeriodic { f: uniform(rng, 2.0, 3.0) },
        other => return Err(Error::Config(format!("{} is not a single-output GP family", other.name()))),
    })
}

pub fn sample_gp_task<F: Scalar, R: Rng + ?Sized>(family: Family, range: [f64; 2], counts: &Counts, rng: &mut R) -> Result<Task<F>> {
    let spec = sample_gp_kernel::<F, _>(family, rng)?;
    data_kernel_eval(&spec, F::zero(), F::zero())?;
    let mut task = sample_kernel_task(|a, b| data_kernel_eval(&spec, a, b).expect("single-output kernel"), range, counts, rng)?;
    let (key, value) = match spec {
        DataKernelSpec::Rbf { lengthscale } | DataKernelSpec::Matern52 { lengthscale } => ("lengthscale", lengthscale),
        DataKernelSpec::WeaklyPeriodic { f } => ("f", f),
        DataKernelSpec::Mosm(_) => unreachable!("rejected above"),
    };
    task.meta.family = family.name().to_string();
    task.meta.hyper.insert(key.to_string(), value.as_f64());
    Ok(task)
}

/// GP task whose covariance is basis kernel `q` of `bank`.
pub fn sample_bank_task<F: Scalar, R: Rng + ?Sized>(
    bank: &KernelBank<F>,
    q: usize,
    range: [f64; 2],
    counts: &Counts,
    rng: &mut R,
) -> Result<Task<F>> {
    if q >= bank.len() {
        return Err(Error::invalid(format!("basis kernel {q} out of range for a bank of {}", bank.len())));
    }
    let mut task = sample_kernel_task(|a, b| bank.eval(q, a - b), range, counts, rng)?;
    task.meta.family = format!("bank_{q}");
    task.meta.hyper.insert("q".into(), q as f64);
    Ok(task)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SawtoothParams {
    pub amplitude: f64,
    pub freq: f64,
    pub terms: usize,
    pub shift: f64,
}

impl SawtoothParams {
    /// `A ~ U[0.8, 1.2]`, `f ~ U[1, 2]`, `K ~ U{10..20}`, `τ ~ U[−1, 1]`.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            amplitude: uniform(rng, 0.8, 1.2),
            freq: uniform(rng, 1.0, 2.0),
            terms: uniform_int(rng, 10, 20),
            shift: uniform(rng, -1.0, 1.0),
        }
    }

    /// `A/2 − (A/π) Σ_{k=1}^{K} (−1)^k sin(2πkf(t+τ))/k`.
    pub fn eval<F: Scalar>(&self, t: F) -> F {
        let a = F::lit(self.amplitude);
        let phase = F::two_pi() * F::lit(self.freq) * (t + F::lit(self.shift));
        let mut s = F::zero();
        for k in 1..=self.terms {
            let kf = F::from_usize_lossy(k);
            let term = (kf * phase).sin() / kf;
            if k % 2 == 0 {
                s += term;
            } else {
                s -= term;
            }
        }
        a * F::lit(0.5) - a / F::PI() * s
    }
}

pub fn sample_sawtooth_task<F: Scalar, R: Rng + ?Sized>(range: [f64; 2], counts: &Counts, rng: &mut R) -> Result<Task<F>> {
    check_range(range)?;
    let p = SawtoothParams::sample(rng);
    let (nc, nt) = counts.draw(rng)?;
    let x: Vec<F> = uniform_inputs(range, nc + nt, rng);
    let y = x.iter().map(|&t| p.eval(t)).collect();
    let hyper = BTreeMap::from([
        ("amplitude".to_string(), p.amplitude),
        ("freq".to_string(), p.freq),
        ("terms".to_string(), p.terms as f64),
        ("shift".to_string(), p.shift),
    ]);
    Ok(Task {
        channels: vec![split_channel(x, y, nc)],
        meta: TaskMeta { family: Family::Sawtooth.name().into(), seed: 0, hyper },
    })
}

/// Base frequencies of the three sinusoidal channels.
pub const SINUSOID_FREQS: [f64; 3] = [2.1, 4.1, 6.1];
pub const SINUSOID_NOISE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinusoidalParams {
    /// Shared amplitude offset `a`; channel `i` has amplitude `i + a`.
    pub amp_offset: f64,
    pub phases: [f64; 3],
    /// Frequency offset `θ`; channel `i` uses `w_i + i·θ`.
    pub theta: f64,
}

impl SinusoidalParams {
    pub fn new(amp_offset: f64, phases: [f64; 3], theta: f64) -> Self {
        Self { amp_offset, phases, theta }
    }

    /// `a ~ U[−0.25, 0.25]`, phases `U[−1,1]`, `U[−1.5,0.5]`, `U[−2,0]`, and
    /// for the `all` variant `θ ~ U[0, 5]`.
    pub fn sample<R: Rng + ?Sized>(all: bool, rng: &mut R) -> Self {
        let amp_offset = uniform(rng, -0.25, 0.25);
        let phases = [uniform(rng, -1.0, 1.0), uniform(rng, -1.5, 0.5), uniform(rng, -2.0, 0.0)];
        let theta = if all { uniform(rng, 0.0, 5.0) } else { 0.0 };
        Self { amp_offset, phases, theta }
    }

    pub fn amplitude(&self, channel: usize) -> f64 {
        (channel + 1) as f64 + self.amp_offset
    }

    /// Noise-free value of `channel` at `t`.
    pub fn eval<F: Scalar>(&self, channel: usize, t: F) -> F {
        let w = SINUSOID_FREQS[channel] + (channel + 1) as f64 * self.theta;
        F::lit(self.amplitude(channel)) * (F::two_pi() * F::lit(w) * (t - F::lit(self.phases[channel]))).sin()
    }
}

/// Three-channel sinusoidal task with independent inputs and counts per channel.
pub fn sinusoidal_task_from<F: Scalar, R: Rng + ?Sized>(
    params: &SinusoidalParams,
    range: [f64; 2],
    counts: &Counts,
    noise: bool,
    rng: &mut R,
) -> Result<Task<F>> {
    check_range(range)?;
    let mut channels = Vec::with_capacity(3);
    for k in 0..3 {
        let (nc, nt) = counts.draw(rng)?;
        let x: Vec<F> = uniform_inputs(range, nc + nt, rng);
        let y = x
            .iter()
            .map(|&t| {
                let e = if noise { F::lit(SINUSOID_NOISE) * normal::<F, _>(rng) } else { F::zero() };
                params.eval(k, t) + e
            })
            .collect();
        channels.push(split_channel(x, y, nc));
    }
    let mut hyper = BTreeMap::from([("amp_offset".to_string(), params.amp_offset), ("theta".to_string(), params.theta)]);
    for (i, p) in params.phases.iter().enumerate() {
        hyper.insert(format!("phase_{}", i + 1), *p);
    }
    Ok(Task { channels, meta: TaskMeta { family: String::new(), seed: 0, hyper } })
}

pub fn sample_sinusoidal_task<F: Scalar, R: Rng + ?Sized>(all: bool, range: [f64; 2], counts: &Counts, rng: &mut R) -> Result<Task<F>> {
    let params = SinusoidalParams::sample(all, rng);
    let mut task = sinusoidal_task_from(&params, range, counts, true, rng)?;
    task.meta.family = if all { Family::SinusoidalAll } else { Family::SinusoidalPhase }.name().into();
    Ok(task)
}

/// One joint draw of a multi-output GP with per-channel inputs.
pub fn mosm_task_from<F: Scalar, R: Rng + ?Sized>(spec: &MosmSpec<F>, range: [f64; 2], counts: &Counts, rng: &mut R) -> Result<Task<F>> {
    check_range(range)?;
    let k = spec.channels();
    let sizes: Vec<(usize, usize)> = (0..k).map(|_| counts.draw(rng)).collect::<Result<_>>()?;
    let mut last = None;
    for _ in 0..MAX_RETRIES {
        let inputs: Vec<Vec<F>> = sizes.iter().map(|&(nc, nt)| uniform_inputs(range, nc + nt, rng)).collect();
        let index: Vec<(usize, F)> = inputs.iter().enumerate().flat_map(|(c, xs)| xs.iter().map(move |&x| (c, x))).collect();
        let gram = Mat::from_fn(index.len(), index.len(), |r, s| mosm_cross_eval(spec, index[r].0, index[s].0, index[r].1, index[s].1));
        match sample_gaussian(gram, rng) {
            Ok(y) => {
                let mut offset = 0;
                let channels = inputs
                    .into_iter()
                    .zip(&sizes)
                    .map(|(x, &(nc, _))| {
                        let n = x.len();
                        let ch = split_channel(x, y[offset..offset + n].to_vec(), nc);
                        offset += n;
                        ch
                    })
                    .collect();
                let mut hyper = BTreeMap::new();
                for (i, m) in spec.mu.iter().enumerate() {
                    hyper.insert(format!("mu_{}", i + 1), m.as_f64());
                }
                return Ok(Task { channels, meta: TaskMeta { family: String::new(), seed: 0, hyper } });
            }
            Err(e) => last = Some(e),
        }
    }
    Err(Error::Numerical(format!(
        "multi-output Gram not positive definite after {MAX_RETRIES} input draws: {}",
        last.map(|e| e.to_string()).unwrap_or_default()
    )))
}

/// The fixed setting, or for `varying` means perturbed by `N(0, 0.5²)`.
pub fn sample_mosm_task<F: Scalar, R: Rng + ?Sized>(varying: bool, range: [f64; 2], counts: &Counts, rng: &mut R) -> Result<Task<F>> {
    let mut spec = MosmSpec::<F>::standard();
    if varying {
        for m in &mut spec.mu {
            *m += F::lit(0.5) * normal::<F, _>(rng);
        }
    }
    let mut task = mosm_task_from(&spec, range, counts, rng)?;
    task.meta.family = if varying { Family::MosmVarying } else { Family::Mosm }.name().into();
    Ok(task)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LvParams {
    pub alpha: f64,
    pub beta: f64,
    pub delta: f64,
    pub gamma: f64,
    pub x0: f64,
    pub y0: f64,
}

impl Default for LvParams {
    fn default() -> Self {
        Self { alpha: 2.0 / 3.0, beta: 4.0 / 3.0, delta: 1.0, gamma: 1.0, x0: 1.0, y0: 1.0 }
    }
}

impl LvParams {
    pub fn equilibrium(&self) -> (f64, f64) {
        (self.gamma / self.delta, self.alpha / self.beta)
    }

    fn rhs(&self, x: f64, y: f64) -> (f64, f64) {
        (self.alpha * x - self.beta * x * y, self.delta * x * y - self.gamma * y)
    }
}

/// Simulation and observation settings for Lotka–Volterra tasks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LvConfig {
    pub base: LvParams,
    /// Each rate is multiplied by an independent `U[1 − jitter, 1 + jitter]`.
    pub jitter: f64,
    pub x0_range: [f64; 2],
    pub y0_range: [f64; 2],
    pub horizon: f64,
    pub dt: f64,
    pub n_min: usize,
    pub n_max: usize,
    pub nc_min: usize,
    pub nc_max: usize,
}

impl Default for LvConfig {
    fn default() -> Self {
        Self {
            base: LvParams::default(),
            jitter: 0.1,
            x0_range: [0.5, 2.0],
            y0_range: [0.25, 1.0],
            horizon: 10.0,
            dt: 0.01,
            n_min: 85,
            n_max: 100,
            nc_min: 10,
            nc_max: 30,
        }
    }
}

/// Classical RK4 from `t = 0`; returns `(t, x, y)` at every step including
/// both end points.
pub fn integrate_lotka_volterra(p: &LvParams, horizon: f64, dt: f64) -> Result<Vec<(f64, f64, f64)>> {
    if !(dt > 0.0) || !(horizon >= 0.0) {
        return Err(Error::invalid("integrate_lotka_volterra needs dt > 0 and horizon ≥ 0"));
    }
    if !(p.x0 > 0.0 && p.y0 > 0.0) {
        return Err(Error::domain("integrate_lotka_volterra", "initial populations must be positive"));
    }
    let steps = (horizon / dt).round() as usize;
    let mut out = Vec::with_capacity(steps + 1);
    let (mut x, mut y) = (p.x0, p.y0);
    out.push((0.0, x, y));
    for i in 1..=steps {
        let (k1x, k1y) = p.rhs(x, y);
        let (k2x, k2y) = p.rhs(x + 0.5 * dt * k1x, y + 0.5 * dt * k1y);
        let (k3x, k3y) = p.rhs(x + 0.5 * dt * k2x, y + 0.5 * dt * k2y);
        let (k4x, k4y) = p.rhs(x + dt * k3x, y + dt * k3y);
        x += dt / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x);
        y += dt / 6.0 * (k1y + 2.0 * k2y + 2.0 * k3y + k4y);
        out.push((i as f64 * dt, x, y));
    }
    Ok(out)
}

/// Two-channel predator–prey task. Targets are `N ~ U[n_min, n_max]`
/// trajectory points; the context is a random subset of them.
pub fn simulate_lotka_volterra<F: Scalar, R: Rng + ?Sized>(cfg: &LvConfig, rng: &mut R) -> Result<Task<F>> {
    if cfg.n_min > cfg.n_max || cfg.nc_min > cfg.nc_max || cfg.nc_max > cfg.n_min {
        return Err(Error::Config(format!("inconsistent Lotka–Volterra counts {cfg:?}")));
    }
    for _ in 0..MAX_RETRIES {
        let j = |rng: &mut R| uniform::<f64, _>(rng, 1.0 - cfg.jitter, 1.0 + cfg.jitter);
        let p = LvParams {
            alpha: cfg.base.alpha * j(rng),
            beta: cfg.base.beta * j(rng),
            delta: cfg.base.delta * j(rng),
            gamma: cfg.base.gamma * j(rng),
            x0: uniform(rng, cfg.x0_range[0], cfg.x0_range[1]),
            y0: uniform(rng, cfg.y0_range[0], cfg.y0_range[1]),
        };
        let traj = integrate_lotka_volterra(&p, cfg.horizon, cfg.dt)?;
        if traj.iter().any(|&(_, x, y)| !(x >= 1e-9 && y >= 1e-9) || !x.is_finite() || !y.is_finite()) {
            continue;
        }
        let n = uniform_int(rng, cfg.n_min, cfg.n_max).min(traj.len());
        let mut idx = sample_indices(rng, traj.len(), n).into_vec();
        idx.sort_unstable();
        let nc = uniform_int(rng, cfg.nc_min, cfg.nc_max).min(n);
        let mut ctx = sample_indices(rng, n, nc).into_vec();
        ctx.sort_unstable();
        let channels = (0..2)
            .map(|c| {
                let val = |i: usize| F::lit(if c == 0 { traj[i].1 } else { traj[i].2 });
                ChannelData {
                    xc: ctx.iter().map(|&k| F::lit(traj[idx[k]].0)).collect(),
                    yc: ctx.iter().map(|&k| val(idx[k])).collect(),
                    xt: idx.iter().map(|&i| F::lit(traj[i].0)).collect(),
                    yt: idx.iter().map(|&i| val(i)).collect(),
                }
            })
            .collect();
        let hyper = BTreeMap::from([
            ("alpha".to_string(), p.alpha),
            ("beta".to_string(), p.beta),
            ("delta".to_string(), p.delta),
            ("gamma".to_string(), p.gamma),
            ("x0".to_string(), p.x0),
            ("y0".to_string(), p.y0),
        ]);
        return Ok(Task { channels, meta: TaskMeta { family: Family::LotkaVolterra.name().into(), seed: 0, hyper } });
    }
    Err(Error::Numerical(format!("population underflow in {MAX_RETRIES} consecutive Lotka–Volterra draws")))
}

/// Everything needed to regenerate a task set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskGenConfig {
    /// Families are interleaved so each gets the same number of tasks.
    pub families: Vec<Family>,
    /// `None` uses each family's training range.
    pub range: Option<[f64; 2]>,
    pub counts: Counts,
    pub lotka_volterra: LvConfig,
}

impl Default for TaskGenConfig {
    fn default() -> Self {
        Self { families: vec![Family::Rbf], range: None, counts: Counts::default(), lotka_volterra: LvConfig::default() }
    }
}

impl TaskGenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.families.is_empty() {
            return Err(Error::Config("at least one family is required".into()));
        }
        let channels = self.families[0].channels();
        if self.families.iter().any(|f| f.channels() != channels) {
            return Err(Error::Config("families in one task set must share a channel count".into()));
        }
        if let Some(r) = self.range {
            check_range(r)?;
        }
        self.counts.validate()
    }

    /// Copy in which every task has exactly `nc` context points. Families
    /// that sample targets separately get `nt` targets.
    pub fn with_context_size(&self, nc: usize, nt: usize) -> Self {
        let mut c = self.clone();
        c.counts = Counts::fixed(nc, nt);
        c.lotka_volterra.nc_min = nc;
        c.lotka_volterra.nc_max = nc;
        c
    }
}

/// Generates one task of `family` from `seed`.
pub fn generate_task<F: Scalar>(family: Family, cfg: &TaskGenConfig, seed: u64) -> Result<Task<F>> {
    let mut rng = rng_from_seed(seed);
    let range = cfg.range.unwrap_or(family.train_range());
    let c = &cfg.counts;
    let mut task = match family {
        Family::Rbf | Family::Matern52 | Family::WeaklyPeriodic => sample_gp_task(family, range, c, &mut rng)?,
        Family::Sawtooth => sample_sawtooth_task(range, c, &mut rng)?,
        Family::SinusoidalPhase => sample_sinusoidal_task(false, range, c, &mut rng)?,
        Family::SinusoidalAll => sample_sinusoidal_task(true, range, c, &mut rng)?,
        Family::Mosm => sample_mosm_task(false, range, c, &mut rng)?,
        Family::MosmVarying => sample_mosm_task(true, range, c, &mut rng)?,
        Family::LotkaVolterra => {
            let mut lv = cfg.lotka_volterra;
            if let Some(r) = cfg.range {
                lv.horizon = r[1] - r[0];
            }
            let mut t = simulate_lotka_volterra(&lv, &mut rng)?;
            if let Some(r) = cfg.range {
                t = t.translated(F::lit(r[0]));
            }
            t
        }
    };
    task.meta.seed = seed;
    Ok(task)
}

/// `n` tasks with per-task seeds `derive_seed(base_seed, i)`; task `i` uses
/// family `i mod |families|`.
pub fn generate_tasks<F: Scalar>(cfg: &TaskGenConfig, base_seed: u64, n: usize) -> Result<Vec<Task<F>>> {
    cfg.validate()?;
    (0..n)
        .map(|i| generate_task(cfg.families[i % cfg.families.len()], cfg, derive_seed(base_seed, i as u64)))
        .collect()
}

pub const DUMP_FORMAT: &str = "stationary-np-tasks";
pub const DUMP_VERSION: u32 = 1;
const BINARY_MAGIC: &[u8; 4] = b"SNPT";

/// JSON task dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDump {
    pub format: String,
    pub version: u32,
    pub header: BTreeMap<String, String>,
    pub tasks: Vec<Task<f64>>,
}

impl TaskDump {
    pub fn new(header: BTreeMap<String, String>, tasks: Vec<Task<f64>>) -> Self {
        Self { format: DUMP_FORMAT.into(), version: DUMP_VERSION, header, tasks }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let d: Self = serde_json::from_str(s)?;
        if d.format != DUMP_FORMAT || d.version != DUMP_VERSION {
            return Err(Error::Format(format!("unsupported task dump {} v{}", d.format, d.version)));
        }
        Ok(d)
    }

    /// Little-endian layout: magic, version, header JSON, task count, then
    /// per task its metadata JSON, channel count and four length-prefixed
    /// `f64` arrays per channel.
    pub fn to_binary(&self) -> Result<Vec<u8>> {
        fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
            out.extend_from_slice(&(b.len() as u64).to_le_bytes());
            out.extend_from_slice(b);
        }
        let mut out = Vec::new();
        out.extend_from_slice(BINARY_MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        put_bytes(&mut out, serde_json::to_string(&self.header)?.as_bytes());
        out.extend_from_slice(&(self.tasks.len() as u64).to_le_bytes());
        for t in &self.tasks {
            put_bytes(&mut out, serde_json::to_string(&t.meta)?.as_bytes());
            out.extend_from_slice(&(t.channels.len() as u64).to_le_bytes());
            for c in &t.channels {
                for arr in [&c.xc, &c.yc, &c.xt, &c.yt] {
                    out.extend_from_slice(&(arr.len() as u64).to_le_bytes());
                    for v in arr.iter() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn from_binary(bytes: &[u8]) -> Result<Self> {
        struct Reader<'a>(&'a [u8]);
        impl<'a> Reader<'a> {
            fn take(&mut self, n: usize) -> Result<&'a [u8]> {
                if self.0.len() < n {
                    return Err(Error::Format("truncated binary task dump".into()));
                }
                let (a, b) = self.0.split_at(n);
                self.0 = b;
                Ok(a)
            }
            fn u64(&mut self) -> Result<usize> {
                Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")) as usize)
            }
            fn f64s(&mut self) -> Result<Vec<f64>> {
                let n = self.u64()?;
                let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("array length overflow".into()))?)?;
                Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
            }
            fn json<T: serde::de::DeserializeOwned>(&mut self) -> Result<T> {
                let n = self.u64()?;
                Ok(serde_json::from_slice(self.take(n)?)?)
            }
        }
        let mut r = Reader(bytes);
        if r.take(4)? != BINARY_MAGIC {
            return Err(Error::Format("not a binary task dump".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != DUMP_VERSION {
            return Err(Error::Format(format!("unsupported binary task dump v{version}")));
        }
        let header = r.json()?;
        let n = r.u64()?;
        let mut tasks = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let meta: TaskMeta = r.json()?;
            let k = r.u64()?;
            let mut channels = Vec::with_capacity(k.min(64));
            for _ in 0..k {
                channels.push(ChannelData { xc: r.f64s()?, yc: r.f64s()?, xt: r.f64s()?, yt: r.f64s()? });
            }
            tasks.push(Task { channels, meta });
        }
        if !r.0.is_empty() {
            return Err(Error::Format("trailing bytes after binary task dump".into()));
        }
        Ok(Self { format: DUMP_FORMAT.into(), version, header, tasks })
    }
}
