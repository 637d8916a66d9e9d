//! The end-to-end predictive model: representation, CNN decoder, smoothing
//! to targets, and a Gaussian head, in three variants.

mod decoder;
mod forward;

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use decoder::{decoder_forward, init_decoder, DecoderKind, DECODER_OUT};
pub use forward::{
    draw_noise, forward, gaussian_log_density, predict, predict_with_noise, ForwardOutput, Prediction, SampleNoise,
};

use crate::convdeepsets::RepresentationMode;
use crate::error::{Error, Result};
use crate::kernels::{make_kernel_bank, KernelBank, SpectralDensity};
use crate::latent::PnnConfig;
use crate::params::{ParamRecord, ParamStore};
use crate::random::rng_from_seed;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Lower bound added to the predictive standard deviation.
pub const SIGMA_FLOOR: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Bayesian ConvDeepsets: task-selected stationary prior, path-wise samples.
    Bayes,
    /// Deterministic kernel-smoother representation.
    Convcnp,
    /// Path-wise samples under one fixed RBF kernel.
    Gpconvcnp,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Bayes => "bayes",
            Variant::Convcnp => "convcnp",
            Variant::Gpconvcnp => "gpconvcnp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "bayes" => Ok(Variant::Bayes),
            "convcnp" => Ok(Variant::Convcnp),
            "gpconvcnp" => Ok(Variant::Gpconvcnp),
            other => Err(Error::Config(format!("unknown variant `{other}` (bayes, convcnp, gpconvcnp)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Number of basis kernels.
    pub q: usize,
    pub hz_max: f64,
    /// Random Fourier features per basis kernel.
    pub l_spec: usize,
    /// Sampled data channels per prediction.
    pub n_samples: usize,
    pub mode: RepresentationMode,
    pub decoder: DecoderKind,
    pub points_per_unit: f64,
    pub margin: f64,
    pub gs_temperature: f64,
    pub hard_gumbel: bool,
    pub pnn: PnnConfig,
    /// Output channels per task.
    pub channels: usize,
    /// Fixed RBF smoother lengthscale of the deterministic variant.
    pub convcnp_lengthscale: f64,
    /// RBF lengthscale defining the single kernel of the fixed-GP variant.
    pub gp_lengthscale: f64,
    pub sigma_eps: f64,
    /// Whether the spectral parameters are updated during training.
    pub train_kernel: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Bayes,
            q: 4,
            hz_max: 4.0,
            l_spec: 10,
            n_samples: 5,
            mode: RepresentationMode::Exact,
            decoder: DecoderKind::Shallow,
            points_per_unit: 64.0,
            margin: 0.1,
            gs_temperature: 0.5,
            hard_gumbel: false,
            pnn: PnnConfig::default(),
            channels: 1,
            convcnp_lengthscale: 0.01,
            gp_lengthscale: 1.0,
            sigma_eps: 1e-2,
            train_kernel: true,
        }
    }
}

impl ModelConfig {
    pub fn for_variant(variant: Variant) -> Self {
        Self { variant, ..Self::default() }.normalized()
    }

    /// Applies the variant constraints: one deterministic sample for the
    /// smoother variant, a single frozen kernel for the fixed-GP variant.
    pub fn normalized(mut self) -> Self {
        match self.variant {
            Variant::Bayes => {}
            Variant::Convcnp => {
                self.n_samples = 1;
                self.train_kernel = false;
            }
            Variant::Gpconvcnp => {
                self.q = 1;
                self.train_kernel = false;
            }
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("model config: {m}")));
        if self.q == 0 {
            return bad("q must be at least 1");
        }
        if !(self.hz_max > 0.0) {
            return bad("hz_max must be positive");
        }
        if self.l_spec == 0 || self.n_samples == 0 || self.channels == 0 {
            return bad("l_spec, n_samples and channels must be positive");
        }
        if !(self.points_per_unit >= 1.0) || !(self.margin >= 0.0) {
            return bad("points_per_unit must be ≥ 1 and margin ≥ 0");
        }
        if !(self.gs_temperature > 0.0) || !(self.sigma_eps > 0.0) {
            return bad("gs_temperature and sigma_eps must be positive");
        }
        if !(self.convcnp_lengthscale > 0.0) || !(self.gp_lengthscale > 0.0) {
            return bad("lengthscales must be positive");
        }
        if let RepresentationMode::Approx { alpha } = self.mode {
            if !(alpha > 0.0 && alpha < 1.0) {
                return bad("approx alpha must lie in (0, 1)");
            }
        }
        match self.variant {
            Variant::Convcnp if self.n_samples != 1 => bad("convcnp uses exactly one sample"),
            Variant::Gpconvcnp if self.q != 1 => bad("gpconvcnp uses a single kernel"),
            _ => Ok(()),
        }
    }

    /// Whether the model has a latent categorical and a KL term.
    pub fn has_latent(&self) -> bool {
        self.variant == Variant::Bayes
    }

    /// The initial (or, for the fixed-GP variant, permanent) kernel bank.
    pub fn initial_bank<F: Scalar>(&self) -> Result<KernelBank<F>> {
        match self.variant {
            Variant::Gpconvcnp => {
                let l = self.gp_lengthscale;
                let s2 = 1.0 / (4.0 * std::f64::consts::PI.powi(2) * l * l);
                KernelBank::new(vec![SpectralDensity::scalar(F::zero(), F::lit(s2))?], F::lit(self.sigma_eps))
            }
            _ => {
                let b = make_kernel_bank::<F>(self.q, self.hz_max)?;
                KernelBank::new(b.densities().to_vec(), F::lit(self.sigma_eps))
            }
        }
    }
}

/// Configuration plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<F> {
    pub config: ModelConfig,
    pub params: ParamStore<F>,
}

fn inverse_softplus(y: f64) -> f64 {
    let y = y.max(1e-6);
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

impl<F: Scalar> Model<F> {
    /// Freshly initialised parameters drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = rng_from_seed(seed);
        Self::with_rng(config, &mut rng)
    }

    pub fn with_rng<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        if config.variant == Variant::Bayes {
            let bank = config.initial_bank::<F>()?;
            let mu: Vec<f64> = bank.densities().iter().map(|d| d.mu[0].as_f64()).collect();
            let deltas: Vec<F> = mu.windows(2).map(|w| F::lit(inverse_softplus(w[1] - w[0]))).collect();
            if !deltas.is_empty() {
                params.insert("kernel.mu_delta", Tensor::from_vec(deltas));
            }
            let ls2 = bank.densities().iter().map(|d| d.sigma2[0].ln()).collect();
            params.insert("kernel.log_sigma2", Tensor::from_vec(ls2));
            config.pnn.init_params(config.q, config.channels, &mut params, rng);
        }
        init_decoder(config.decoder, 2 * config.channels, &mut params, rng);
        let ls = F::lit(2.0 / config.points_per_unit).ln();
        params.insert("smooth.log_lengthscale", Tensor::from_vec(vec![ls]));
        params.init_conv("head", DECODER_OUT, 2 * config.channels, 1, rng);
        Ok(Self { config, params })
    }

    /// Whether a parameter is updated by the optimiser.
    pub fn is_trainable(&self, name: &str) -> bool {
        self.config.train_kernel || !name.starts_with("kernel.")
    }

    /// The kernel bank under the current parameters.
    pub fn bank(&self) -> Result<KernelBank<F>> {
        if self.config.variant != Variant::Bayes {
            return self.config.initial_bank();
        }
        let ls2 = self.params.get("kernel.log_sigma2")?.data();
        let mut mu = F::zero();
        let mut densities = Vec::with_capacity(ls2.len());
        for q in 0..ls2.len() {
            if q > 0 {
                let d = self.params.get("kernel.mu_delta")?.data()[q - 1];
                mu += softplus(d);
            }
            densities.push(SpectralDensity::scalar(mu, ls2[q].exp())?);
        }
        KernelBank::new(densities, F::lit(self.config.sigma_eps))
    }

    pub fn to_checkpoint(&self, meta: BTreeMap<String, String>) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            meta,
            params: self.params.to_record(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint {} v{}", ck.format, ck.version)));
        }
        ck.config.validate()?;
        let params = ParamStore::from_record(&ck.params)?;
        let fresh = Model::<F>::new(ck.config.clone(), 0)?;
        for (name, t) in fresh.params.iter() {
            let got = params.get(name).map_err(|_| Error::Format(format!("checkpoint lacks `{name}`")))?;
            if got.shape() != t.shape() {
                return Err(Error::Format(format!("`{name}` has shape {:?}, expected {:?}", got.shape(), t.shape())));
            }
        }
        if params.len() != fresh.params.len() {
            return Err(Error::Format("checkpoint has unexpected parameters".into()));
        }
        Ok(Self { config: ck.config.clone(), params })
    }

    pub fn save(&self, path: &Path, meta: BTreeMap<String, String>) -> Result<()> {
        let s = serde_json::to_string(&self.to_checkpoint(meta))?;
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, BTreeMap<String, String>)> {
        let ck: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Ok((Self::from_checkpoint(&ck)?, ck.meta))
    }
}

fn softplus<F: Scalar>(x: F) -> F {
    if x > F::lit(30.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub const CHECKPOINT_FORMAT: &str = "stationary-np-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// JSON checkpoint: config, free-form metadata, and every named parameter
/// as `{shape, data}` in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub meta: BTreeMap<String, String>,
    pub params: BTreeMap<String, ParamRecord>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_constraints() {
        let c = ModelConfig::for_variant(Variant::Convcnp);
        assert_eq!(c.n_samples, 1);
        let g = ModelConfig::for_variant(Variant::Gpconvcnp);
        assert_eq!(g.q, 1);
        let mut bad = ModelConfig::for_variant(Variant::Convcnp);
        bad.n_samples = 3;
        assert!(bad.validate().is_err());
        assert!(Variant::parse("nope").is_err());
    }

    #[test]
    fn bank_round_trips_through_parameters() {
        let m = Model::<f64>::new(ModelConfig::default(), 1).unwrap();
        let want = make_kernel_bank::<f64>(4, 4.0).unwrap();
        let got = m.bank().unwrap();
        for (a, b) in want.densities().iter().zip(got.densities()) {
            assert!((a.mu[0] - b.mu[0]).abs() < 1e-12);
            assert!((a.sigma2[0] - b.sigma2[0]).abs() < 1e-12);
        }
        let g = Model::<f64>::new(ModelConfig::for_variant(Variant::Gpconvcnp), 1).unwrap();
        let b = g.bank().unwrap();
        // RBF with l = 1: exp(−τ²/2)
        assert!((b.eval(0, 0.7) - (-0.245f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = Model::<f64>::new(ModelConfig::default(), 3).unwrap();
        let ck = m.to_checkpoint(BTreeMap::new());
        let s = serde_json::to_string(&ck).unwrap();
        let back: Checkpoint = serde_json::from_str(&s).unwrap();
        assert_eq!(Model::<f64>::from_checkpoint(&back).unwrap(), m);
        let mut broken = back.clone();
        broken.params.remove("head.w");
        assert!(Model::<f64>::from_checkpoint(&broken).is_err());
    }
}
