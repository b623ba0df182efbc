//! Experiment configuration: a single JSON document describing the data,
//! the model, the trainer, and the analysis settings of one run.
//!
//! Unknown keys are rejected everywhere so a typo cannot silently fall back
//! to a default, and every run writes the fully-resolved document (defaults
//! expanded, command-line overrides applied) next to its outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use eae_core::datasets::{self, Dataset};
use eae_core::error::EaeError;
use eae_core::networks::LossKind;
use eae_core::sampler::ThermostatConfig;
use eae_core::tensor::{Activation, NetworkSpec};
use eae_core::training::derived_seed;
use eae_core::Result;

/// Seed streams carved out of the experiment seed. The training library
/// reserves low stream numbers for its own generators; the runner's streams
/// start higher so the two never collide.
pub const STREAM_DATASET: u64 = 10;
pub const STREAM_SPLIT: u64 = 11;
pub const STREAM_THERMOSTAT: u64 = 12;

fn default_split() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}

/// Where the rows come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceConfig {
    /// Planar rotation embedded in a higher-dimensional space by a seeded
    /// random linear map, with exact time derivatives.
    Oscillator {
        omega: f64,
        embed_dim: usize,
        n: usize,
        dt: f64,
    },
    /// Spiral-wave reaction–diffusion snapshots with analytic derivatives.
    LambdaOmega {
        grid_n: usize,
        steps: usize,
        dt: f64,
        diffusion: f64,
    },
    /// Labeled Gaussian clusters with separated means.
    GaussianMixture {
        components: usize,
        dim: usize,
        n: usize,
    },
    /// Big-endian image/label container pair.
    Idx { images: String, labels: String },
    /// A dataset previously cached by this tool.
    Cached { path: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub source: SourceConfig,
    /// Train/validation/test fractions; the first two sizes round down and
    /// the remainder lands in the test slice.
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    /// Keep row order when splitting (time-indexed data); otherwise the
    /// split shuffles with a seed derived from the experiment seed.
    #[serde(default)]
    pub sequential_split: bool,
}

/// One feed-forward stack: `widths[0]` is the input width and each later
/// entry adds a layer with the paired activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerStack {
    pub widths: Vec<usize>,
    pub activations: Vec<Activation>,
}

impl LayerStack {
    pub fn spec(&self) -> Result<NetworkSpec> {
        NetworkSpec::new(self.widths.clone(), self.activations.clone())
    }
}

fn default_loss() -> LossKind {
    LossKind::SquaredError
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub encoder: LayerStack,
    pub decoder: LayerStack,
    #[serde(default = "default_loss")]
    pub loss: LossKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainerKind {
    Eae,
    Vae,
    Ae,
}

impl TrainerKind {
    pub fn name(self) -> &'static str {
        match self {
            TrainerKind::Eae => "eae",
            TrainerKind::Vae => "vae",
            TrainerKind::Ae => "ae",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    #[default]
    Reconstruction,
    /// Joint reconstruction / latent-velocity-matching objective; requires
    /// a dataset with time derivatives.
    Dynamics,
}

fn default_ensemble() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerSection {
    pub kind: TrainerKind,
    /// Inner samples per outer iteration (ensemble trainer only).
    #[serde(default = "default_ensemble")]
    pub ensemble_size: usize,
    pub minibatch_size: usize,
    pub learning_rate: f64,
    /// Outer-iteration budget for the ensemble trainer.
    #[serde(default)]
    pub max_outer_iterations: usize,
    /// Epoch budget for the two baselines.
    #[serde(default)]
    pub epochs: usize,
    #[serde(default)]
    pub grad_tolerance: f64,
    /// Leading inner samples per outer iteration to drop from the stored
    /// ensemble.
    #[serde(default)]
    pub burn_in_discard: usize,
    #[serde(default)]
    pub objective: ObjectiveKind,
}

/// Thermostat settings as written in the file. The sampler's own RNG seed
/// is not configurable here: the runner derives it from the experiment seed
/// so one number controls the whole run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThermostatSection {
    pub temperature: f64,
    pub particle_mass: f64,
    pub chain_length: usize,
    #[serde(default)]
    pub chain_mass: Option<f64>,
    pub step_size: f64,
    #[serde(default)]
    pub velocity_resample_period: usize,
}

impl ThermostatSection {
    pub fn to_config(&self, experiment_seed: u64) -> ThermostatConfig {
        ThermostatConfig {
            temperature: self.temperature,
            particle_mass: self.particle_mass,
            chain_length: self.chain_length,
            chain_mass: self.chain_mass,
            step_size: self.step_size,
            velocity_resample_period: self.velocity_resample_period,
            rng_seed: derived_seed(experiment_seed, STREAM_THERMOSTAT),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsSection {
    /// A latent dimension is active when its variance over the test codes
    /// exceeds this.
    pub activity_threshold: f64,
    /// Latent dimensions for the per-class density curves.
    pub kde_dims: Vec<usize>,
    /// Class-label pairs to interpolate between; empty selects the two
    /// lowest labels when the data is labeled.
    pub interpolation_pairs: Vec<[usize; 2]>,
}

impl Default for DiagnosticsSection {
    fn default() -> Self {
        DiagnosticsSection {
            activity_threshold: 0.01,
            kde_dims: vec![0],
            interpolation_pairs: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DynamicsSection {
    /// Highest polynomial degree in the basis library (sines of each
    /// coordinate are always included).
    pub poly_order: u32,
    /// Reconstruction weight in the joint training objective.
    pub lambda1: f64,
    /// Latent-velocity-matching weight in the joint training objective.
    pub lambda2: f64,
    /// How many trailing ensemble members contribute a coefficient fit.
    pub n_samples: usize,
    /// Steps and step size for rolling the recovered model forward.
    pub integrate_steps: usize,
    pub integrate_dt: f64,
    /// Fit coefficients on the generator's own latent trajectory instead of
    /// encoder outputs (oracle mode for validating the fit itself).
    pub use_true_latents: bool,
}

impl Default for DynamicsSection {
    fn default() -> Self {
        DynamicsSection {
            poly_order: 2,
            lambda1: 1.0,
            lambda2: 1.0,
            n_samples: 5000,
            integrate_steps: 500,
            integrate_dt: 0.01,
            use_true_latents: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub trainer: TrainerSection,
    /// Required for the ensemble trainer, ignored by the baselines.
    #[serde(default)]
    pub thermostat: Option<ThermostatSection>,
    #[serde(default)]
    pub diagnostics: DiagnosticsSection,
    #[serde(default)]
    pub dynamics: DynamicsSection,
    pub seed: u64,
    pub output_dir: String,
}

impl ExperimentConfig {
    /// Read and parse a config file; the path lands in the error message so
    /// a missing file is diagnosable from the exit alone.
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            EaeError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|e| {
            EaeError::Config(format!("cannot parse config {}: {e}", path.display()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.encoder.spec()?;
        self.model.decoder.spec()?;
        match self.trainer.kind {
            TrainerKind::Eae => {
                if self.thermostat.is_none() {
                    return Err(EaeError::Config(
                        "the ensemble trainer needs a thermostat section".into(),
                    ));
                }
                if self.trainer.max_outer_iterations == 0 {
                    return Err(EaeError::Config(
                        "max_outer_iterations must be positive for the ensemble trainer".into(),
                    ));
                }
            }
            TrainerKind::Vae | TrainerKind::Ae => {
                if self.trainer.epochs == 0 {
                    return Err(EaeError::Config(format!(
                        "the {} baseline needs a positive epoch count",
                        self.trainer.kind.name()
                    )));
                }
                if self.trainer.objective == ObjectiveKind::Dynamics {
                    return Err(EaeError::Config(
                        "only the ensemble trainer supports the dynamics objective".into(),
                    ));
                }
            }
        }
        if self.trainer.objective == ObjectiveKind::Dynamics && !self.dataset.has_derivatives() {
            return Err(EaeError::Config(
                "the dynamics objective needs a dataset with time derivatives".into(),
            ));
        }
        Ok(())
    }

    /// Serialized form written beside the run's outputs: stable field
    /// order, expanded defaults, trailing newline.
    pub fn resolved_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Rebuild (or fetch from the cache) the configured dataset.
    pub fn build_dataset(&self) -> Result<Dataset> {
        build_dataset(&self.dataset.source, self.seed)
    }

    /// Dataset plus split, honoring the sequential flag.
    pub fn build_splits(&self) -> Result<(Dataset, Dataset, Dataset)> {
        let ds = self.build_dataset()?;
        if self.dataset.sequential_split {
            datasets::split_sequential(&ds, self.dataset.split)
        } else {
            datasets::split(&ds, self.dataset.split, derived_seed(self.seed, STREAM_SPLIT))
        }
    }
}

impl DatasetSection {
    /// Whether the source can carry time derivatives. Cached files are
    /// given the benefit of the doubt; the trainer checks the actual data.
    fn has_derivatives(&self) -> bool {
        matches!(
            self.source,
            SourceConfig::Oscillator { .. }
                | SourceConfig::LambdaOmega { .. }
                | SourceConfig::Cached { .. }
        )
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Resolve a possibly-relative path against the dataset root env var.
fn resolve_data_path(raw: &str) -> PathBuf {
    let p = PathBuf::from(raw);
    if p.is_absolute() {
        return p;
    }
    match std::env::var_os("EAE_DATA_DIR") {
        Some(root) => PathBuf::from(root).join(p),
        None => p,
    }
}

fn build_dataset(source: &SourceConfig, experiment_seed: u64) -> Result<Dataset> {
    let seed = derived_seed(experiment_seed, STREAM_DATASET);
    // Generated sources are cached under the dataset root when one is set;
    // the cache key covers the full source description and the seed.
    let cache_path = std::env::var_os("EAE_DATA_DIR").and_then(|root| {
        if matches!(source, SourceConfig::Idx { .. } | SourceConfig::Cached { .. }) {
            return None;
        }
        let desc = serde_json::to_string(source).ok()?;
        Some(PathBuf::from(root).join(format!("{:016x}-{seed}.dataset", fnv1a(desc.as_bytes()))))
    });
    if let Some(p) = &cache_path {
        if p.exists() {
            return Dataset::load(p);
        }
    }
    let ds = match source {
        SourceConfig::Oscillator {
            omega,
            embed_dim,
            n,
            dt,
        } => datasets::gen_oscillator(*omega, *embed_dim, *n, *dt, seed)?,
        SourceConfig::LambdaOmega {
            grid_n,
            steps,
            dt,
            diffusion,
        } => datasets::gen_lambda_omega(*grid_n, *steps, *dt, *diffusion, seed)?,
        SourceConfig::GaussianMixture { components, dim, n } => {
            datasets::gen_gaussian_mixture(*components, *dim, *n, seed)?
        }
        SourceConfig::Idx { images, labels } => {
            datasets::load_idx(&resolve_data_path(images), &resolve_data_path(labels))?
        }
        SourceConfig::Cached { path } => Dataset::load(&resolve_data_path(path))?,
    };
    if let Some(p) = &cache_path {
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent)?;
        }
        ds.save(p)?;
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_json() -> serde_json::Value {
        serde_json::json!({
            "dataset": {
                "source": {"gaussian_mixture": {"components": 2, "dim": 4, "n": 50}}
            },
            "model": {
                "encoder": {"widths": [4, 2], "activations": ["linear"]},
                "decoder": {"widths": [2, 4], "activations": ["linear"]}
            },
            "trainer": {
                "kind": "eae",
                "ensemble_size": 4,
                "minibatch_size": 8,
                "learning_rate": 0.01,
                "max_outer_iterations": 5
            },
            "thermostat": {
                "temperature": 0.01,
                "particle_mass": 1.0,
                "chain_length": 3,
                "step_size": 0.01
            },
            "seed": 7,
            "output_dir": "out"
        })
    }

    #[test]
    fn defaults_expand_and_round_trip() {
        let cfg: ExperimentConfig = serde_json::from_value(minimal_json()).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.dataset.split, [0.8, 0.1, 0.1]);
        assert!(!cfg.dataset.sequential_split);
        assert_eq!(cfg.model.loss, LossKind::SquaredError);
        assert_eq!(cfg.trainer.objective, ObjectiveKind::Reconstruction);
        assert_eq!(cfg.diagnostics.activity_threshold, 0.01);
        assert_eq!(cfg.dynamics.poly_order, 2);
        let resolved = cfg.resolved_json().unwrap();
        let back: ExperimentConfig = serde_json::from_str(&resolved).unwrap();
        assert_eq!(back, cfg);
        assert!(resolved.ends_with('\n'));
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        let mut top = minimal_json();
        top["surprise"] = 1.into();
        assert!(serde_json::from_value::<ExperimentConfig>(top).is_err());

        let mut section = minimal_json();
        section["trainer"]["momentum"] = 0.9.into();
        assert!(serde_json::from_value::<ExperimentConfig>(section).is_err());

        let mut source = minimal_json();
        source["dataset"]["source"]["gaussian_mixture"]["sigma"] = 2.0.into();
        assert!(serde_json::from_value::<ExperimentConfig>(source).is_err());
    }

    #[test]
    fn trainer_cross_field_rules_are_enforced() {
        let mut no_thermo = minimal_json();
        no_thermo["thermostat"] = serde_json::Value::Null;
        let cfg: ExperimentConfig = serde_json::from_value(no_thermo).unwrap();
        assert!(cfg.validate().is_err());

        let mut baseline = minimal_json();
        baseline["trainer"]["kind"] = "ae".into();
        let cfg: ExperimentConfig = serde_json::from_value(baseline).unwrap();
        // Baselines need an epoch budget.
        assert!(cfg.validate().is_err());

        let mut dyn_on_static = minimal_json();
        dyn_on_static["trainer"]["objective"] = "dynamics".into();
        let cfg: ExperimentConfig = serde_json::from_value(dyn_on_static).unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn dataset_builds_are_seeded_by_the_experiment_seed() {
        let cfg: ExperimentConfig = serde_json::from_value(minimal_json()).unwrap();
        let a = cfg.build_dataset().unwrap();
        let b = cfg.build_dataset().unwrap();
        assert_eq!(a, b);
        let mut other = cfg.clone();
        other.seed = 8;
        let c = other.build_dataset().unwrap();
        assert_ne!(a.inputs.data(), c.inputs.data());
        let (train, val, test) = cfg.build_splits().unwrap();
        assert_eq!(train.n_rows(), 40);
        assert_eq!(val.n_rows(), 5);
        assert_eq!(test.n_rows(), 5);
    }

    #[test]
    fn missing_config_file_reports_its_path() {
        let err = ExperimentConfig::load(Path::new("/no/such/config.json")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("/no/such/config.json"), "{msg}");
        assert!(matches!(err, EaeError::Config(_)));
    }
}
