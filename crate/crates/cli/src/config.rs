//! Run configuration: TOML file, dotted overrides, schema and hash.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use stationary_np::model::ModelConfig;
use stationary_np::taskgen::{Family, TaskGenConfig};
use stationary_np::training::TrainConfig;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub tasks: TaskGenConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 1,
            model: ModelConfig::default(),
            train: TrainSection::default(),
            tasks: TaskGenConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub beta: f64,
    pub tau0: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub tasks_per_epoch: usize,
    pub n_mc: usize,
    pub validation_tasks: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            beta: t.beta,
            tau0: t.tau0,
            lr: t.lr,
            weight_decay: t.weight_decay,
            epochs: t.epochs,
            batch_size: t.batch_size,
            tasks_per_epoch: t.tasks_per_epoch,
            n_mc: t.n_mc,
            validation_tasks: 128,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn range(self, family: Family) -> [f64; 2] {
        match self {
            Split::Train => family.train_range(),
            Split::Test => family.test_range(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub families: Vec<Family>,
    pub nc_list: Vec<usize>,
    pub nt: usize,
    pub tasks_per_nc: usize,
    pub n_samples: usize,
    pub split: Split,
    pub context_sets: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            families: vec![Family::Rbf],
            nc_list: vec![5, 10, 15, 20, 25, 30],
            nt: 50,
            tasks_per_nc: 1024,
            n_samples: 5,
            split: Split::Test,
            context_sets: 128,
        }
    }
}

/// `(dotted key, description)` for every leaf of the configuration.
pub const SCHEMA: &[(&str, &str)] = &[
    ("seed", "base seed; every random stream is derived from it"),
    ("threads", "worker threads; results do not depend on it"),
    ("model.variant", "bayes | convcnp | gpconvcnp"),
    ("model.q", "number of basis kernels in the spectral bank"),
    ("model.hz_max", "largest spectral mean of the initial bank"),
    ("model.l_spec", "random Fourier features per basis kernel"),
    ("model.n_samples", "sampled data channels per prediction"),
    ("model.mode.kind", "exact | approx"),
    ("model.mode.alpha", "window scale of the approx mode (approx only)"),
    ("model.decoder", "shallow | deep"),
    ("model.points_per_unit", "grid density of the functional representation"),
    ("model.margin", "grid margin beyond the data"),
    ("model.gs_temperature", "Gumbel-softmax temperature"),
    ("model.hard_gumbel", "straight-through one-hot samples"),
    ("model.pnn.version", "v1_gridless | v2_grid"),
    ("model.pnn.hidden", "width of the kernel-selection network"),
    ("model.pnn.pooling", "sum | mean"),
    ("model.pnn.v2_lengthscale", "smoother lengthscale of the grid network"),
    ("model.channels", "output channels; set from the task families when training"),
    ("model.convcnp_lengthscale", "smoother lengthscale of the convcnp variant"),
    ("model.gp_lengthscale", "RBF lengthscale of the gpconvcnp variant"),
    ("model.sigma_eps", "observation noise standard deviation of the prior"),
    ("model.train_kernel", "update the spectral parameters during training"),
    ("train.beta", "weight of the KL regulariser"),
    ("train.tau0", "temperature of the tempered posterior"),
    ("train.lr", "Adam learning rate"),
    ("train.weight_decay", "decoupled weight decay"),
    ("train.epochs", "training epochs"),
    ("train.batch_size", "tasks per optimiser step"),
    ("train.tasks_per_epoch", "freshly generated tasks per epoch"),
    ("train.n_mc", "path-wise samples per kernel for the tempered posterior"),
    ("train.validation_tasks", "held-out tasks scored after every epoch"),
    ("tasks.families", "training families; all must share a channel count"),
    ("tasks.range", "[lo, hi] input range; omitted means the family default"),
    ("tasks.counts.nc_min", "smallest context size"),
    ("tasks.counts.nc_max", "largest context size"),
    ("tasks.counts.nt_min", "smallest target count; omitted means N^c"),
    ("tasks.counts.nt_max", "largest target count"),
    ("tasks.lotka_volterra.base.alpha", "prey growth rate"),
    ("tasks.lotka_volterra.base.beta", "predation rate"),
    ("tasks.lotka_volterra.base.delta", "predator growth per prey"),
    ("tasks.lotka_volterra.base.gamma", "predator death rate"),
    ("tasks.lotka_volterra.base.x0", "unused; initial prey comes from x0_range"),
    ("tasks.lotka_volterra.base.y0", "unused; initial predators come from y0_range"),
    ("tasks.lotka_volterra.jitter", "relative jitter of each rate"),
    ("tasks.lotka_volterra.x0_range", "initial prey population range"),
    ("tasks.lotka_volterra.y0_range", "initial predator population range"),
    ("tasks.lotka_volterra.horizon", "simulated time span"),
    ("tasks.lotka_volterra.dt", "RK4 step"),
    ("tasks.lotka_volterra.n_min", "smallest number of observed points"),
    ("tasks.lotka_volterra.n_max", "largest number of observed points"),
    ("tasks.lotka_volterra.nc_min", "smallest context size"),
    ("tasks.lotka_volterra.nc_max", "largest context size"),
    ("eval.families", "families scored by eval and plot-data"),
    ("eval.nc_list", "context sizes scored by eval and plot-data"),
    ("eval.nt", "targets per evaluation task"),
    ("eval.tasks_per_nc", "evaluation tasks per (family, context size)"),
    ("eval.n_samples", "predictive samples when scoring"),
    ("eval.split", "train (in range) | test (shifted range)"),
    ("eval.context_sets", "context sets fed to the kernel-selection network by plot-data"),
];

/// Schema listing followed by the default configuration.
pub fn schema_text() -> String {
    let width = SCHEMA.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut s = String::from("# Configuration keys (TOML; any key may be given as key=value on the command line)\n#\n");
    for (k, d) in SCHEMA {
        s.push_str(&format!("# {k:<width$}  {d}\n"));
    }
    s.push_str("#\n# Defaults:\n\n");
    s.push_str(&toml::to_string(&RunConfig::default()).expect("default config serialises"));
    s
}

/// Reads `path` (if any) and applies `key=value` overrides in order.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, CliError> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("reading {}: {e}", p.display())))?;
            text.parse::<toml::Table>().map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))
}

/// Sets a dotted key. The value is read as a TOML literal, falling back to a
/// bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{assignment}` is not key=value")))?;
    let value = parse_value(raw.trim());
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("malformed key `{key}`")));
    }
    let (last, parents) = parts.split_last().expect("nonempty");
    let mut cur = table;
    for p in parents {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("`{p}` in `{key}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.threads == 0 {
            return Err(CliError::Config("threads must be ≥ 1".into()));
        }
        self.model.validate()?;
        self.train_config().validate()?;
        self.tasks.validate()?;
        let e = &self.eval;
        if e.families.is_empty() || e.nc_list.is_empty() || e.tasks_per_nc == 0 || e.nt == 0 || e.context_sets == 0 {
            return Err(CliError::Config("eval needs families, context sizes and positive counts".into()));
        }
        if e.n_samples == 0 {
            return Err(CliError::Config("eval.n_samples must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Trainer settings; `seed` is the stream handed to the trainer.
    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            beta: t.beta,
            tau0: t.tau0,
            lr: t.lr,
            weight_decay: t.weight_decay,
            epochs: t.epochs,
            batch_size: t.batch_size,
            tasks_per_epoch: t.tasks_per_epoch,
            seed: self.seed,
            n_mc: t.n_mc,
            threads: self.threads,
        }
    }

    /// First 16 hex digits of the SHA-256 of the configuration with
    /// `threads` cleared, so the thread count never changes an artifact.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.threads = 0;
        let json = serde_json::to_string(&c).expect("config serialises");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaves(prefix: &str, v: &toml::Value, out: &mut Vec<String>) {
        match v {
            toml::Value::Table(t) => {
                for (k, v) in t {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    leaves(&key, v, out);
                }
            }
            _ => out.push(prefix.to_string()),
        }
    }

    #[test]
    fn schema_documents_every_default_key() {
        let v = toml::Value::try_from(RunConfig::default()).unwrap();
        let mut keys = Vec::new();
        leaves("", &v, &mut keys);
        for k in keys {
            assert!(SCHEMA.iter().any(|(s, _)| *s == k), "undocumented key {k}");
        }
    }

    #[test]
    fn schema_text_parses_back_to_default() {
        let cfg: RunConfig = toml::from_str(&schema_text()).unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn overrides_win_and_are_typed() {
        let mut t: toml::Table = "seed = 3\n[train]\nepochs = 7\n".parse().unwrap();
        apply_override(&mut t, "train.epochs=2").unwrap();
        apply_override(&mut t, "model.variant=convcnp").unwrap();
        apply_override(&mut t, "tasks.families=[\"rbf\", \"matern52\"]").unwrap();
        let cfg: RunConfig = toml::Value::Table(t).try_into().unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.model.variant.name(), "convcnp");
        assert_eq!(cfg.tasks.families, vec![Family::Rbf, Family::Matern52]);
    }

    #[test]
    fn unknown_key_is_config_error() {
        let err = load(None, &["train.epoch=2".into()]).unwrap_err();
        assert!(matches!(err, CliError::Config(_)));
        assert!(matches!(load(None, &["noequals".into()]).unwrap_err(), CliError::Config(_)));
    }

    #[test]
    fn hash_ignores_threads_only() {
        let a = RunConfig::default();
        let b = RunConfig { threads: 8, ..a.clone() };
        let c = RunConfig { seed: 1, ..a.clone() };
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 16);
    }
}
