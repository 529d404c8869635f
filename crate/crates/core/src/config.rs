//! Run configuration file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::oracle::MixtureSpec;
use crate::sampler::SamplerConfig;
use crate::trainer::TrainConfig;

/// Environment variable that replaces `output_dir` when set.
pub const OUTPUT_ENV: &str = "FLOWCONSIST_OUT";

/// Sizes and switches for the numerical experiments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsConfig {
    /// Generated and reference points for sample-quality metrics.
    pub eval_samples: usize,
    /// Monte Carlo points for the decomposition checks.
    pub n_mc: usize,
    /// Points for the covariance check.
    pub n_points: usize,
    /// Paths for the drift experiment.
    pub n_paths: usize,
    /// Number of points in uniform `t` grids.
    pub t_grid: usize,
    /// Quadrature nodes for the error-dynamics check.
    pub n_quad: usize,
    /// Random `(x_t, s, t)` triples for the error-dynamics check.
    pub n_triples: usize,
    /// Random parameter sets for the decomposition checks.
    pub n_thetas: usize,
    /// Euler steps of the multi-step reference in the accumulation experiment.
    pub euler_steps: usize,
    pub omegas: Vec<f64>,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            eval_samples: 512,
            n_mc: 100_000,
            n_points: 1000,
            n_paths: 256,
            t_grid: 16,
            n_quad: 256,
            n_triples: 20,
            n_thetas: 3,
            euler_steps: 256,
            omegas: vec![1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0],
        }
    }
}

impl DiagnosticsConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("eval_samples", self.eval_samples),
            ("n_mc", self.n_mc),
            ("n_points", self.n_points),
            ("n_paths", self.n_paths),
            ("n_quad", self.n_quad),
            ("n_triples", self.n_triples),
            ("euler_steps", self.euler_steps),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("diagnostics.{k} must be positive")));
        }
        if self.t_grid < 2 {
            return Err(Error::Config("diagnostics.t_grid needs at least 2 points".into()));
        }
        if self.n_thetas < 2 {
            return Err(Error::Config("diagnostics.n_thetas needs at least 2 parameter sets".into()));
        }
        if self.omegas.is_empty() || self.omegas.iter().any(|w| !(*w >= 1.0 && w.is_finite())) {
            return Err(Error::Config("diagnostics.omegas must be a non-empty list of values ≥ 1".into()));
        }
        Ok(())
    }
}

/// Everything one invocation needs; every field has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Steps between metric rows.
    pub log_every: usize,
    /// Steps between intermediate checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub diagnostics: DiagnosticsConfig,
    pub mixture: MixtureSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            log_every: 100,
            checkpoint_every: 0,
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            diagnostics: DiagnosticsConfig::default(),
            mixture: MixtureSpec::ring(8, 2.0, 0.04, false).expect("static ring"),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.sampler.validate()?;
        self.diagnostics.validate()?;
        self.mixture.validate().map_err(|e| Error::Config(format!("mixture: {e}")))?;
        if let Some(l) = self.sampler.label {
            if l >= self.mixture.num_classes() {
                return Err(Error::Config(format!("sampler.label {l} outside {} classes", self.mixture.num_classes())));
            }
        }
        Ok(())
    }

    /// Parses and validates TOML; unknown keys are errors.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Training settings with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }

    /// First eight bytes of the SHA-256 of the canonical TOML form, with
    /// `output_dir` cleared so the hash names the experiment, not its location.
    pub fn hash(&self) -> [u8; 8] {
        let located = Self { output_dir: PathBuf::new(), ..self.clone() };
        let text = located.to_toml().expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        let mut out = [0u8; 8];
        out.copy_from_slice(&digest[..8]);
        out
    }

    pub fn hash_hex(&self) -> String {
        self.hash().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// `output_dir`, unless overridden by the environment.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ENV) {
            Some(root) if !root.is_empty() => PathBuf::from(root),
            _ => self.output_dir.clone(),
        }
    }

    pub fn csv_meta(&self) -> crate::io::CsvMeta {
        crate::io::CsvMeta { config_hash: self.hash_hex(), seed: self.seed }
    }
}

/// The default configuration as commented TOML.
pub fn default_config_toml() -> String {
    let body = RunConfig::default().to_toml().expect("default config serializes");
    let notes = "\
# Default run configuration. Every key is optional; unknown keys are rejected.
#
# seed              master seed for data, noise, time and initialisation draws
# output_dir        directory for checkpoints and CSVs (overridden by FLOWCONSIST_OUT)
# log_every         steps between metric rows; checkpoint_every: 0 = final only
# [train]           objective = fm | meanflow | flowconsist | cm
#                   rectify_ratio: share of each batch used for rectification
#                   rectify_warmup: share of total_steps before rectification starts
#                   rectification_form = literal | dmd
#                   cfg_omega_range, cfg_interval, cfg_drop_prob: guidance training
#                   adaptive_weight = { p, c }: per-sample weight 1/(r + c)^p
# [train.time]      logit-normal sampler sigmoid(N(mu, sigma^2)); equal_prob forces s = t
# [train.arch]      hidden width, depth, sinusoidal embedding sizes
# [sampler]         nfe, omega, mode = flow_map_jumps | euler_instantaneous, optional label
# [diagnostics]     Monte Carlo sizes and grids for `diagnose`
# [[mixture.components]]  weight, mean, variance (0 = point mass), optional label
";
    format!("{notes}\n{body}")
}
