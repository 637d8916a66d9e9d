//! Acceptance checks 1–9 as library functions, shared by the `acceptance`
//! test target and the `verify` command.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::Rng;
use serde::Serialize;

use crate::convdeepsets::{
    density_channel, deterministic_data_channel, make_grid, random_functional_representation, RandomRepresentationConfig,
    RepresentationMode, DENSITY_FLOOR,
};
use crate::error::Result;
use crate::gp::{empirical_posterior_stats, exact_gp_posterior, pathwise_posterior_sample, sample_rff_prior};
use crate::kernels::{data_kernel_eval, gram_matrix, make_kernel_bank, DataKernelSpec, Rbf};
use crate::latent::{gumbel_softmax_sample, pnn_forward, PnnConfig};
use crate::linalg::Mat;
use crate::model::{draw_noise, predict, Model, ModelConfig, Variant};
use crate::params::{Bound, ParamStore};
use crate::random::{derive_seed, normal, rng_from_seed, uniform, uniform_int};
use crate::tapekernel::TapeBank;
use crate::task::Task;
use crate::taskgen::{
    integrate_lotka_volterra, sample_bank_task, sample_gaussian, Counts, Family, LvParams, SawtoothParams, TaskGenConfig,
};
use crate::tensor::gradcheck::{check_gradients, GradCheckReport};
use crate::tensor::{Tape, Tensor, Var};
use crate::training::{evaluate_tasks, regulariser_targets, task_loss, tempered_posterior_params, TrainConfig, Trainer};

/// Result of one criterion: a verdict plus one line per sub-check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Outcome {
    pub id: u32,
    pub title: String,
    pub passed: bool,
    pub checks: Vec<SubCheck>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Outcome {
    fn new(id: u32, title: &str) -> Self {
        Self { id, title: title.to_string(), passed: true, checks: Vec::new(), seconds: 0.0 }
    }

    fn check(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.passed &= passed;
        self.checks.push(SubCheck { name: name.into(), passed, detail: detail.into() });
    }

    /// True when every failing sub-check is listed in [`KNOWN_UNATTAINABLE`].
    pub fn passed_except_known(&self) -> bool {
        self.checks.iter().filter(|c| !c.passed).all(|c| is_known_unattainable(self.id, &c.name))
    }

    /// `criterion N: PASS|FAIL  title (…s)`.
    pub fn summary_line(&self) -> String {
        format!(
            "criterion {}: {}  {} ({:.1}s)",
            self.id,
            if self.passed { "PASS" } else { "FAIL" },
            self.title,
            self.seconds
        )
    }
}

/// Sub-checks that no non-degenerate implementation can satisfy. They are
/// still run and reported as FAIL.
pub const KNOWN_UNATTAINABLE: &[(u32, &str)] = &[(6, "temperature 0.01 concentration")];

pub fn is_known_unattainable(id: u32, check: &str) -> bool {
    KNOWN_UNATTAINABLE.iter().any(|&(i, c)| i == id && c == check)
}

pub const TITLES: [&str; 9] = [
    "RFF kernel consistency",
    "path-wise sampling vs exact GP posterior",
    "kernel smoother equals rescaled GP mean",
    "translation equivariance",
    "autodiff correctness",
    "Gumbel-softmax statistics",
    "tempered posterior identifies the generating kernel",
    "generator fidelity",
    "desk-scale trend reproduction",
];

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
}

/// Criterion 1.
pub fn rff_consistency() -> Result<Outcome> {
    let mut out = Outcome::new(1, TITLES[0]);
    let bank = make_kernel_bank::<f64>(4, 4.0)?;
    let taus = linspace(-3.0, 3.0, 121);
    let ls = [64usize, 512, 4096];
    let mut sups = vec![vec![vec![0.0; 20]; ls.len()]; bank.len()];
    for (li, &l) in ls.iter().enumerate() {
        for seed in 0..20u64 {
            let prior = sample_rff_prior(&bank, l, &mut rng_from_seed(derive_seed(101, seed * 8 + li as u64)))?;
            for (q, s) in sups.iter_mut().enumerate() {
                s[li][seed as usize] = taus.iter().map(|&t| (prior.kernel_estimate(&bank, q, t) - bank.eval(q, t)).abs()).fold(0.0, f64::max);
            }
        }
    }
    for (q, s) in sups.iter().enumerate() {
        let worst = s[2].iter().copied().fold(0.0, f64::max);
        out.check(format!("q={q} sup error at l=4096"), worst <= 0.05, format!("max over 20 seeds {worst:.4} (≤ 0.05)"));
        let med: Vec<f64> = s.iter().map(|v| median(v.clone())).collect();
        let dec = med.windows(2).all(|w| w[1] < w[0]);
        out.check(format!("q={q} medians decrease"), dec, format!("medians {:.4} > {:.4} > {:.4}", med[0], med[1], med[2]));
    }
    Ok(out)
}

/// Criterion 2.
pub fn pathwise_vs_exact() -> Result<Outcome> {
    let mut out = Outcome::new(2, TITLES[1]);
    let bank = make_kernel_bank::<f64>(4, 4.0)?;
    let probs = [0.1, 0.2, 0.3, 0.4];
    let xq = linspace(-0.5, 4.5, 32);
    for (i, &nc) in [1usize, 4, 8].iter().enumerate() {
        let mut rng = rng_from_seed(derive_seed(202, i as u64));
        let xc: Vec<f64> = (0..nc).map(|_| uniform(&mut rng, 0.0, 4.0)).collect();
        let yc: Vec<f64> = xc.iter().map(|&x| (2.0 * x).sin() + 0.1 * normal::<f64, _>(&mut rng)).collect();
        let samples = (0..2000)
            .map(|_| {
                let prior = sample_rff_prior(&bank, 10, &mut rng)?;
                pathwise_posterior_sample(&xc, &yc, &bank, &probs, &prior, &probs, &xq)
            })
            .collect::<Result<Vec<_>>>()?;
        let (mean, var) = empirical_posterior_stats(&samples)?;
        let (emean, ecov) = exact_gp_posterior(&xc, &yc, &bank.mixture(&probs)?, bank.sigma_eps(), &xq)?;
        let mean_err = max_abs_diff(&mean, &emean);
        let var_err = var.iter().enumerate().map(|(j, v)| (v - ecov[(j, j)]).abs() / ecov[(j, j)]).fold(0.0, f64::max);
        out.check(format!("N^c={nc} mean"), mean_err <= 0.1, format!("max abs error {mean_err:.4} (≤ 0.1)"));
        out.check(format!("N^c={nc} variance"), var_err <= 0.2, format!("max rel error {var_err:.4} (≤ 0.2)"));
    }
    Ok(out)
}

/// Criterion 3.
pub fn smoother_identity() -> Result<Outcome> {
    let mut out = Outcome::new(3, TITLES[2]);
    let mut rng = rng_from_seed(303);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let k = Rbf { lengthscale: uniform::<f64, _>(&mut rng, 0.05, 1.0) };
        let nc = uniform_int(&mut rng, 1, 12);
        let xc: Vec<f64> = (0..nc).map(|_| uniform(&mut rng, -2.0, 2.0)).collect();
        let yc: Vec<f64> = (0..nc).map(|_| normal(&mut rng)).collect();
        let grid = make_grid(-2.0, 2.0, uniform::<f64, _>(&mut rng, 8.0, 64.0), 0.1)?;
        // GP mean with the Gram restricted to its diagonal k(0) = 1
        let mean = gram_matrix(&k, &grid.points(), &xc, 0.0).matvec(&yc)?;
        let density = density_channel(&xc, &grid, &k);
        let channel = deterministic_data_channel(&xc, &yc, &grid, &k);
        for m in 0..grid.len {
            worst = worst.max((channel[m] - mean[m] / density[m].max(DENSITY_FLOOR)).abs());
        }
    }
    out.check("100 random instances", worst <= 1e-10, format!("max abs difference {worst:.2e} (≤ 1e-10)"));
    Ok(out)
}

/// Criterion 4.
pub fn translation_equivariance() -> Result<Outcome> {
    let mut out = Outcome::new(4, TITLES[3]);
    let mut rng = rng_from_seed(404);

    // (a) p_nn v1 under arbitrary real shifts
    let bank = make_kernel_bank::<f64>(4, 4.0)?;
    let cfg = PnnConfig::default();
    let mut store = ParamStore::<f64>::new();
    cfg.init_params(4, 1, &mut store, &mut rng);
    let probs_of = |xc: &[f64], yc: &[f64]| -> Result<Vec<f64>> {
        let tape = Tape::new();
        let b = store.bind(&tape);
        let tb = TapeBank::constant(&tape, &bank);
        Ok(pnn_forward(&cfg, &b, &tb, &[(xc, yc)], None)?[0].probs.value().into_data())
    };
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let nc = uniform_int(&mut rng, 1, 20);
        let xc: Vec<f64> = (0..nc).map(|_| uniform(&mut rng, 0.0, 4.0)).collect();
        let yc: Vec<f64> = (0..nc).map(|_| normal(&mut rng)).collect();
        let tau = uniform::<f64, _>(&mut rng, -10.0, 10.0);
        let shifted: Vec<f64> = xc.iter().map(|x| x + tau).collect();
        worst = worst.max(max_abs_diff(&probs_of(&xc, &yc)?, &probs_of(&shifted, &yc)?));
    }
    out.check("(a) p_nn v1 shift invariance", worst <= 1e-9, format!("max abs difference {worst:.2e} (≤ 1e-9)"));

    // (b) grid-aligned shifts of the deterministic channels and the ConvCNP pipeline
    let ppu = 32.0;
    let k = Rbf { lengthscale: 0.1 };
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let nc = uniform_int(&mut rng, 1, 15);
        let xc: Vec<f64> = (0..nc).map(|_| uniform(&mut rng, 0.0, 4.0)).collect();
        let yc: Vec<f64> = (0..nc).map(|_| normal(&mut rng)).collect();
        let s = uniform_int(&mut rng, 1, 200) as f64 / ppu;
        let g = make_grid(0.0, 4.0, ppu, 0.1)?;
        let gs = make_grid(s, 4.0 + s, ppu, 0.1)?;
        let xs: Vec<f64> = xc.iter().map(|x| x + s).collect();
        worst = worst.max(max_abs_diff(&density_channel(&xc, &g, &k), &density_channel(&xs, &gs, &k)));
        worst = worst.max(max_abs_diff(&deterministic_data_channel(&xc, &yc, &g, &k), &deterministic_data_channel(&xs, &yc, &gs, &k)));
    }
    out.check("(b) density and data channels", worst <= 1e-6, format!("max abs difference {worst:.2e} (≤ 1e-6)"));

    let model = Model::<f64>::new(ModelConfig::for_variant(Variant::Convcnp), 4)?;
    let spacing = 1.0 / model.config.points_per_unit;
    let mut worst = 0.0f64;
    for i in 0..10 {
        let task = small_task(derive_seed(405, i), 10, 20);
        let s = uniform_int(&mut rng, 1, 300) as f64 * spacing;
        let a = predict(&model, &task, &mut rng_from_seed(0))?;
        let b = predict(&model, &task.translated(s), &mut rng_from_seed(0))?;
        worst = worst.max(max_abs_diff(&a.mu[0][0], &b.mu[0][0])).max(max_abs_diff(&a.sigma[0][0], &b.sigma[0][0]));
    }
    out.check("(b) ConvCNP predictive pipeline", worst <= 1e-6, format!("max abs difference {worst:.2e} (≤ 1e-6)"));

    // (c) distributional equivariance of the random representation; both
    // runs share a seed (common random numbers), each is still a valid draw
    let probs = [0.1, 0.2, 0.3, 0.4];
    let rcfg = RandomRepresentationConfig { samples: 2000, l_spec: 10, temperature: 0.5, hard: false, mode: RepresentationMode::Exact };
    let ppu = 8.0;
    let xc: Vec<f64> = (0..8).map(|_| uniform(&mut rng, 0.0, 3.0)).collect();
    let yc: Vec<f64> = xc.iter().map(|&x| (1.5 * x).sin()).collect();
    let s = 13.0 / ppu;
    let xs: Vec<f64> = xc.iter().map(|x| x + s).collect();
    let g = make_grid(0.0, 3.0, ppu, 0.1)?;
    let gs = make_grid(s, 3.0 + s, ppu, 0.1)?;
    let a = random_functional_representation(&xc, &yc, &g, &bank, &probs, &rcfg, &mut rng_from_seed(406))?;
    let b = random_functional_representation(&xs, &yc, &gs, &bank, &probs, &rcfg, &mut rng_from_seed(406))?;
    let (ma, va) = empirical_posterior_stats(&a.data_channels)?;
    let (mb, vb) = empirical_posterior_stats(&b.data_channels)?;
    let dm = max_abs_diff(&ma, &mb);
    let dv = max_abs_diff(&va, &vb);
    out.check("(c) channel means", dm <= 0.1, format!("max abs difference {dm:.4} (≤ 0.1)"));
    out.check("(c) channel variances", dv <= 0.1, format!("max abs difference {dv:.4} (≤ 0.1)"));
    Ok(out)
}

fn small_task(seed: u64, nc: usize, nt: usize) -> Task<f64> {
    let mut rng = rng_from_seed(seed);
    let xc: Vec<f64> = (0..nc).map(|_| uniform(&mut rng, 0.0, 4.0)).collect();
    let xt: Vec<f64> = (0..nt).map(|_| uniform(&mut rng, 0.0, 4.0)).collect();
    let f = |x: f64| (1.3 * x).sin() + 0.3 * (3.1 * x).cos();
    let yc = xc.iter().map(|&x| f(x) + 0.05 * normal::<f64, _>(&mut rng)).collect();
    let yt = xt.iter().map(|&x| f(x)).collect();
    Task::single(xc, yc, xt, yt)
}

type PrimitiveFn = for<'t> fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>;

fn weighted<'t>(v: Var<'t, f64>) -> Result<Var<'t, f64>> {
    // a fixed, non-uniform weighting so that every output element matters
    let n = v.value().numel();
    let w: Vec<f64> = (0..n).map(|i| 0.3 + ((i * 7919) % 13) as f64 / 10.0).collect();
    let w = v.tape().constant(Tensor::new(v.shape(), w)?);
    Ok(v.mul(w)?.sum_all())
}

/// Every differentiable primitive with its input shapes.
fn primitives() -> Vec<(&'static str, Vec<Vec<usize>>, PrimitiveFn)> {
    vec![
        ("add (broadcast)", vec![vec![3, 4], vec![4]], |_, v| weighted(v[0].add(v[1])?)),
        ("sub", vec![vec![3, 4], vec![3, 4]], |_, v| weighted(v[0].sub(v[1])?)),
        ("mul (broadcast)", vec![vec![2, 3, 4], vec![3, 1]], |_, v| weighted(v[0].mul(v[1])?)),
        ("div", vec![vec![3, 4], vec![3, 4]], |_, v| weighted(v[0].div(v[1].square().add_scalar(0.5))?)),
        ("neg", vec![vec![5]], |_, v| weighted(v[0].neg())),
        ("exp", vec![vec![5]], |_, v| weighted(v[0].exp())),
        ("log", vec![vec![5]], |_, v| weighted(v[0].square().add_scalar(0.3).log()?)),
        ("sqrt", vec![vec![5]], |_, v| weighted(v[0].square().add_scalar(0.3).sqrt()?)),
        ("relu", vec![vec![6]], |_, v| weighted(v[0].relu())),
        ("softplus", vec![vec![6]], |_, v| weighted(v[0].softplus())),
        ("sigmoid", vec![vec![6]], |_, v| weighted(v[0].sigmoid())),
        ("tanh", vec![vec![6]], |_, v| weighted(v[0].tanh())),
        ("square", vec![vec![6]], |_, v| weighted(v[0].square())),
        ("cos", vec![vec![6]], |_, v| weighted(v[0].cos())),
        ("sin", vec![vec![6]], |_, v| weighted(v[0].sin())),
        ("scale / add_scalar", vec![vec![6]], |_, v| weighted(v[0].scale(-1.7).add_scalar(0.4))),
        ("matmul", vec![vec![3, 4], vec![4, 2]], |_, v| weighted(v[0].matmul(v[1])?)),
        ("affine", vec![vec![3, 4], vec![4, 2], vec![2]], |_, v| weighted(v[0].affine(v[1], v[2])?)),
        ("conv1d [C, L]", vec![vec![2, 7], vec![3, 2, 3], vec![3]], |_, v| weighted(v[0].conv1d(v[1], v[2], 1)?)),
        ("conv1d [B, C, L]", vec![vec![2, 2, 9], vec![3, 2, 5], vec![3]], |_, v| weighted(v[0].conv1d(v[1], v[2], 2)?)),
        ("sum", vec![vec![3, 4]], |_, v| weighted(v[0].sum(1, false)?)),
        ("mean", vec![vec![3, 4]], |_, v| weighted(v[0].mean(0, true)?)),
        ("sum_all / mean_all", vec![vec![3, 4]], |_, v| Ok(v[0].square().sum_all().add(v[0].mean_all())?)),
        ("max", vec![vec![3, 4]], |_, v| weighted(v[0].max(1, false)?)),
        ("log_sum_exp", vec![vec![3, 4]], |_, v| weighted(v[0].log_sum_exp(1, false)?)),
        ("softmax", vec![vec![2, 5]], |_, v| weighted(v[0].softmax(1)?)),
        ("log_softmax", vec![vec![2, 5]], |_, v| weighted(v[0].log_softmax(1)?)),
        ("reshape / transpose", vec![vec![2, 6]], |_, v| weighted(v[0].reshape(&[3, 4])?.transpose()?)),
        ("concat / narrow", vec![vec![2, 3], vec![2, 2]], |_, v| weighted(Var::concat(&[v[0], v[1]], 1)?.narrow(1, 1, 3)?)),
        ("gather", vec![vec![6]], |_, v| weighted(v[0].gather(&[5, 0, 0, 3], &[2, 2])?)),
        ("spd_solve", vec![vec![4, 4], vec![4, 2]], |tape, v| {
            let a = v[0].matmul(v[0].transpose()?)?.add(tape.constant(Tensor::new(vec![4, 4], Mat::<f64>::identity(4).into_vec())?))?;
            weighted(a.spd_solve(v[1])?)
        }),
    ]
}

/// Finite-difference checks of every primitive (`h = 1e-5`).
pub fn primitive_gradchecks(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut rng = rng_from_seed(seed);
    primitives()
        .into_iter()
        .map(|(name, shapes, f)| {
            let inputs: Vec<Tensor<f64>> = shapes
                .iter()
                .map(|s| {
                    let n = s.iter().product();
                    // keep relu and max away from their kinks
                    let data = (0..n)
                        .map(|i| {
                            let v: f64 = normal(&mut rng);
                            v + 0.05 * v.signum() + 1e-3 * i as f64
                        })
                        .collect();
                    Tensor::new(s.clone(), data)
                })
                .collect::<Result<_>>()?;
            Ok((name, check_gradients(&inputs, f, 1e-5, 1e-6, None)?))
        })
        .collect()
}

/// End-to-end finite-difference check of the per-task loss on a random
/// subset of parameter entries, with frozen noise and regulariser target.
///
/// Uses `h = 1e-6`: with thousands of decoder ReLUs, a step of `1e-5`
/// occasionally moves a pre-activation across zero.
pub fn end_to_end_gradcheck(seed: u64, subset_size: usize) -> Result<GradCheckReport> {
    let cfg = ModelConfig { points_per_unit: 16.0, ..ModelConfig::default() }.normalized();
    let model = Model::<f64>::new(cfg, seed)?;
    let task = small_task(derive_seed(seed, 1), 6, 8);
    let train = TrainConfig::default();
    let mut rng = rng_from_seed(derive_seed(seed, 2));
    let targets = regulariser_targets(&model, &task, &train, &mut rng)?;
    let noise = draw_noise(&model.config, &mut rng)?;
    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    let inputs: Vec<Tensor<f64>> = names.iter().map(|n| model.params.get(n).cloned()).collect::<Result<_>>()?;
    let mut subset = Vec::with_capacity(subset_size);
    while subset.len() < subset_size {
        let i = rng.random_range(0..inputs.len());
        let j = rng.random_range(0..inputs[i].numel());
        if !subset.contains(&(i, j)) {
            subset.push((i, j));
        }
    }
    check_gradients(
        &inputs,
        |tape, vars| {
            let bound = Bound::from_vars(names.iter().cloned().zip(vars.iter().copied()).collect::<BTreeMap<_, _>>());
            Ok(task_loss(&model, &bound, tape, &task, &noise, targets.as_deref(), train.beta)?.loss)
        },
        1e-6,
        1e-6,
        Some(&subset),
    )
}

/// Criterion 5.
pub fn autodiff_correctness() -> Result<Outcome> {
    let mut out = Outcome::new(5, TITLES[4]);
    for (name, r) in primitive_gradchecks(505)? {
        out.check(name, r.max_rel_error <= 1e-4, format!("max rel error {:.2e} over {} entries (≤ 1e-4)", r.max_rel_error, r.checked));
    }
    for seed in 0..3u64 {
        let r = end_to_end_gradcheck(506 + seed, 10)?;
        out.check(
            format!("per-task loss, seed {seed}"),
            r.max_rel_error <= 1e-3,
            format!("max rel error {:.2e} on {} parameters (≤ 1e-3)", r.max_rel_error, r.checked),
        );
    }
    Ok(out)
}

/// Criterion 6.
pub fn gumbel_statistics() -> Result<Outcome> {
    let mut out = Outcome::new(6, TITLES[5]);
    let p = [0.1, 0.2, 0.3, 0.4];
    let draws = 100_000;
    let mut rng = rng_from_seed(606);
    let mut counts = [0usize; 4];
    for _ in 0..draws {
        let z = gumbel_softmax_sample(&p, 0.5, true, &mut rng)?;
        counts[z.iter().position(|&v| v == 1.0).unwrap_or(0)] += 1;
    }
    let freq: Vec<f64> = counts.iter().map(|&c| c as f64 / draws as f64).collect();
    let dev = max_abs_diff(&freq, &p);
    out.check("hard argmax frequencies", dev <= 0.02, format!("{freq:.4?}, max deviation {dev:.4} (≤ 0.02)"));
    let hits = (0..draws)
        .filter(|_| gumbel_softmax_sample(&p, 0.01, false, &mut rng).map(|z| z.iter().copied().fold(0.0, f64::max) >= 0.99).unwrap_or(false))
        .count();
    let rate = hits as f64 / draws as f64;
    out.check(
        "temperature 0.01 concentration",
        rate >= 0.999,
        format!("max entry ≥ 0.99 in {:.2}% of draws (≥ 99.9%); the top two perturbed logits must differ by T·ln 99 ≈ 0.046", 100.0 * rate),
    );
    Ok(out)
}

/// Criterion 7.
pub fn tempered_posterior_identification() -> Result<Outcome> {
    let mut out = Outcome::new(7, TITLES[6]);
    let bank = make_kernel_bank::<f64>(4, 4.0)?;
    let q = bank.len();
    let mut mass = vec![Vec::new(); q];
    for i in 0..500u64 {
        let target = (i % q as u64) as usize;
        let mut rng = rng_from_seed(derive_seed(707, i));
        let task = sample_bank_task(&bank, target, [0.0, 4.0], &Counts::default(), &mut rng)?;
        let c = &task.channels[0];
        let p = tempered_posterior_params(&c.xc, &c.yc, &c.xt, &c.yt, &bank, 10, 5, 1.0, &mut rng)?;
        mass[target].push(p.probs[target]);
    }
    let all: Vec<f64> = mass.iter().flatten().copied().collect();
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let per: Vec<f64> = mass.iter().map(|m| m.iter().sum::<f64>() / m.len() as f64).collect();
    let need = 1.0 / q as f64 + 0.15;
    out.check(
        "mean mass on the generating kernel",
        mean >= need,
        format!("{mean:.4} over 500 tasks (≥ {need:.2}); per kernel {per:.3?}"),
    );
    Ok(out)
}

/// Criterion 8.
pub fn generator_fidelity() -> Result<Outcome> {
    let mut out = Outcome::new(8, TITLES[7]);
    let lags = [0.1, 0.3, 0.7];
    let specs = [
        DataKernelSpec::Rbf { lengthscale: 1.6 },
        DataKernelSpec::Matern52 { lengthscale: 0.2 },
        DataKernelSpec::WeaklyPeriodic { f: 2.5 },
    ];
    for (si, spec) in specs.iter().enumerate() {
        let mut rng = rng_from_seed(derive_seed(808, si as u64));
        let xs = [0.5, 0.5 + lags[0], 0.5 + lags[1], 0.5 + lags[2]];
        let gram = Mat::from_fn(4, 4, |i, j| data_kernel_eval(spec, xs[i], xs[j]).expect("single-output kernel"));
        let n = 5000;
        let draws: Vec<Vec<f64>> = (0..n).map(|_| sample_gaussian(gram.clone(), &mut rng)).collect::<Result<_>>()?;
        let mut worst = 0.0f64;
        for j in 0..4 {
            let prods: Vec<f64> = draws.iter().map(|d| d[0] * d[j]).collect();
            let m = prods.iter().sum::<f64>() / n as f64;
            let sd = (prods.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64).sqrt();
            let se = sd / (n as f64).sqrt();
            worst = worst.max((m - gram[(0, j)]).abs() / se);
        }
        out.check(
            format!("{} sample moments", spec.family()),
            worst <= 3.0,
            format!("worst deviation {worst:.2} standard errors at lags 0, {lags:?} (≤ 3)"),
        );
    }
    let mut rng = rng_from_seed(809);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let p = SawtoothParams::sample(&mut rng);
        let t: f64 = uniform(&mut rng, 0.0, 4.0);
        worst = worst.max((p.eval(t + 1.0 / p.freq) - p.eval(t)).abs());
    }
    out.check("sawtooth periodicity", worst <= 1e-12, format!("max |y(t + 1/f) − y(t)| {worst:.2e} (≤ 1e-12)"));

    let base = LvParams::default();
    let (xe, ye) = base.equilibrium();
    let traj = integrate_lotka_volterra(&LvParams { x0: xe, y0: ye, ..base }, 10.0, 0.01)?;
    let drift = traj.iter().map(|&(_, x, y)| (x - xe).abs().max((y - ye).abs())).fold(0.0, f64::max);
    out.check("Lotka-Volterra equilibrium", drift <= 1e-6, format!("max drift {drift:.2e} (≤ 1e-6)"));
    let free = LvParams { beta: 0.0, delta: 0.0, x0: 0.8, y0: 1.2, ..base };
    let traj = integrate_lotka_volterra(&free, 5.0, 0.01)?;
    let rel = traj
        .iter()
        .map(|&(t, x, y)| ((x / (free.x0 * (free.alpha * t).exp()) - 1.0).abs()).max((y / (free.y0 * (-free.gamma * t).exp()) - 1.0).abs()))
        .fold(0.0, f64::max);
    out.check("Lotka-Volterra decoupled growth and decay", rel <= 1e-5, format!("max rel error {rel:.2e} (≤ 1e-5)"));
    let osc = LvParams { x0: 1.5, y0: 0.8, ..base };
    let end = |dt: f64| integrate_lotka_volterra(&osc, 4.0, dt).map(|t| *t.last().expect("nonempty"));
    let (a, b, c) = (end(0.2)?, end(0.1)?, end(0.05)?);
    let ratio = ((a.1 - b.1).powi(2) + (a.2 - b.2).powi(2)).sqrt() / ((b.1 - c.1).powi(2) + (b.2 - c.2).powi(2)).sqrt();
    out.check("RK4 step-halving ratio", (12.0..=20.0).contains(&ratio), format!("ratio {ratio:.2} (≈ 16)"));
    Ok(out)
}

/// Settings of the desk-scale training comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrendConfig {
    pub seeds: usize,
    pub epochs: usize,
    pub tasks_per_epoch: usize,
    pub eval_tasks: usize,
    pub eval_context: usize,
    pub threads: usize,
}

impl Default for TrendConfig {
    fn default() -> Self {
        Self { seeds: 3, epochs: 10, tasks_per_epoch: 200, eval_tasks: 256, eval_context: 5, threads: 1 }
    }
}

/// Per-seed numbers of the trend comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrendRun {
    pub seed: u64,
    pub variant: String,
    pub epoch_losses: Vec<f64>,
    pub eval_ll: f64,
    pub eval_stderr: f64,
}

/// Trains both variants on RBF tasks and evaluates out of range.
pub fn trend_runs(cfg: &TrendConfig) -> Result<Vec<TrendRun>> {
    let gen = TaskGenConfig { families: vec![Family::Rbf], ..TaskGenConfig::default() };
    let eval_gen = TaskGenConfig {
        range: Some(Family::Rbf.test_range()),
        counts: Counts::fixed(cfg.eval_context, 50),
        ..gen.clone()
    };
    let eval_tasks = crate::taskgen::generate_tasks::<f64>(&eval_gen, 9_000_000, cfg.eval_tasks)?;
    let mut runs = Vec::new();
    for s in 0..cfg.seeds as u64 {
        for variant in [Variant::Bayes, Variant::Convcnp] {
            let model = Model::<f64>::new(ModelConfig::for_variant(variant), derive_seed(900 + s, 0))?;
            let train = TrainConfig { seed: 900 + s, threads: cfg.threads, ..TrainConfig::default() };
            let mut trainer = Trainer::new(model, train)?;
            let mut losses = Vec::with_capacity(cfg.epochs);
            for e in 0..cfg.epochs as u64 {
                let tasks = crate::taskgen::generate_tasks::<f64>(&gen, derive_seed(1000 + s, e), cfg.tasks_per_epoch)?;
                losses.push(trainer.train_epoch(&tasks)?.loss);
            }
            let rep = evaluate_tasks(&trainer.model, &eval_tasks, trainer.model.config.n_samples, 77, cfg.threads)?;
            let g = rep.group(cfg.eval_context).expect("fixed context size");
            runs.push(TrendRun { seed: s, variant: variant.name().into(), epoch_losses: losses, eval_ll: g.mean_ll, eval_stderr: g.stderr });
        }
    }
    Ok(runs)
}

/// Criterion 9.
pub fn trend_reproduction(cfg: &TrendConfig) -> Result<Outcome> {
    let mut out = Outcome::new(9, TITLES[8]);
    let runs = trend_runs(cfg)?;
    for r in &runs {
        let (first, last) = (r.epoch_losses[0], *r.epoch_losses.last().expect("epochs"));
        out.check(format!("seed {} {} loss decreases", r.seed, r.variant), last < first, format!("first epoch {first:.4}, last epoch {last:.4}"));
    }
    let mut wins = 0;
    let mut lines = Vec::new();
    for s in 0..cfg.seeds as u64 {
        let get = |v: &str| runs.iter().find(|r| r.seed == s && r.variant == v).expect("run");
        let (b, c) = (get("bayes"), get("convcnp"));
        wins += usize::from(b.eval_ll >= c.eval_ll);
        lines.push(format!("seed {s}: bayes {:.3}±{:.3}, convcnp {:.3}±{:.3}", b.eval_ll, b.eval_stderr, c.eval_ll, c.eval_stderr));
    }
    let need = (2 * cfg.seeds).div_ceil(3);
    out.check(
        format!("bayes ≥ convcnp at N^c={} out of range", cfg.eval_context),
        wins >= need,
        format!("{wins} of {} seeds (≥ {need}); {}", cfg.seeds, lines.join("; ")),
    );
    Ok(out)
}

/// Runs the given criteria; an internal error marks that criterion failed.
pub fn run_criteria(ids: &[u32], trend: &TrendConfig) -> Vec<Outcome> {
    ids.iter()
        .map(|&id| {
            let start = Instant::now();
            let res = match id {
                1 => rff_consistency(),
                2 => pathwise_vs_exact(),
                3 => smoother_identity(),
                4 => translation_equivariance(),
                5 => autodiff_correctness(),
                6 => gumbel_statistics(),
                7 => tempered_posterior_identification(),
                8 => generator_fidelity(),
                9 => trend_reproduction(trend),
                _ => Err(crate::Error::Config(format!("no criterion {id}"))),
            };
            let mut o = res.unwrap_or_else(|e| {
                let mut o = Outcome::new(id, TITLES.get(id.wrapping_sub(1) as usize).copied().unwrap_or("unknown"));
                o.check("run", false, format!("error: {e}"));
                o
            });
            o.seconds = start.elapsed().as_secs_f64();
            o
        })
        .collect()
}
