//! The command implementations behind the `flowconsist` binary.
//!
//! Every command returns a typed outcome; [`CliError::exit_code`] maps
//! failures onto the process exit status.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use flowconsist::checkpoint::{checkpoint_load, checkpoint_save, Checkpoint};
use flowconsist::config::{default_config_toml, RunConfig};
use flowconsist::diagnostics::{
    accumulation_experiment, appendix_identity_check, drift_experiment, sample_quality, theorem1_check,
    theorem2_check, theorem3_check, uniform_grid, write_records, CheckReport, DiagnosticsRecord,
};
use flowconsist::io::{write_csv, write_samples, CsvMeta};
use flowconsist::network::{AverageVelocityNet, Layout, ModelParams, OutputInit};
use flowconsist::oracle::{MixtureSpec, OracleField};
use flowconsist::sampler::{generate, omega_sweep, SamplerConfig};
use flowconsist::trainer::{run_training, MetricRow, RunSchedule, TrainState};
use flowconsist::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const CHECKPOINT_FILE: &str = "checkpoint.fck";
pub const METRICS_FILE: &str = "metrics.csv";

/// Times at which the identity gap is compared with its quadrature value.
const APPENDIX_TIMES: [f64; 3] = [0.25, 0.5, 0.75];
const APPENDIX_QUAD: usize = 2001;
const THM3_REL_TOL: f64 = 1e-3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("unknown experiment `{0}` (expected one of drift, thm1, thm2, thm3, appendix, accumulation, omega_sweep)")]
    UnknownExperiment(String),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(Error::Dimension(_) | Error::Domain(_) | Error::Numeric(_)) => 3,
            CliError::Core(_) | CliError::UnknownExperiment(_) | CliError::Usage(_) => 2,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Exit status when every assertion of a diagnostic held.
pub const EXIT_OK: u8 = 0;
/// Exit status when a diagnostic ran but some assertion failed.
pub const EXIT_ASSERTION: u8 = 4;

/// Reads a config file, or the defaults when no path is given.
pub fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

pub fn cmd_config_default() -> String {
    default_config_toml()
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub final_step: u64,
}

/// Trains from scratch into the configured output directory, writing the
/// final checkpoint, any intermediate ones, and the metrics CSV.
pub fn cmd_train(config: &RunConfig) -> CliResult<TrainOutcome> {
    config.validate()?;
    let out = config.resolved_output_dir();
    std::fs::create_dir_all(&out).map_err(Error::from)?;
    let train = config.train_config();
    let hash = config.hash();
    let meta = config.csv_meta();
    let mut state = TrainState::new(&train, &config.mixture)?;
    let schedule = RunSchedule { log_every: config.log_every, checkpoint_every: config.checkpoint_every };
    let total = train.total_steps as u64;
    let metrics = out.join(METRICS_FILE);
    let rows = run_training(&mut state, &train, &config.mixture, schedule, |st, rows| {
        if st.step < total {
            checkpoint_save(&out.join(format!("checkpoint_{:08}.fck", st.step)), &Checkpoint::from_state(st, hash))?;
        }
        write_metrics(&metrics, rows, &meta)
    })?;
    let checkpoint = out.join(CHECKPOINT_FILE);
    checkpoint_save(&checkpoint, &Checkpoint::from_state(&state, hash))?;
    write_metrics(&metrics, &rows, &meta)?;
    Ok(TrainOutcome { checkpoint, metrics, final_step: state.step })
}

fn write_metrics(path: &Path, rows: &[MetricRow], meta: &CsvMeta) -> flowconsist::Result<()> {
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.step.to_string(),
                r.objective.clone(),
                r.loss.to_string(),
                r.mean_residual_norm.to_string(),
                r.mean_target_norm.to_string(),
                r.omega_mean.to_string(),
                format!("{:.1}", r.wall_ms),
            ]
        })
        .collect();
    write_csv(path, &MetricRow::HEADER, &cells, meta)
}

fn hex(hash: &[u8; 8]) -> String {
    hash.iter().map(|b| format!("{b:02x}")).collect()
}

/// Draws `n` samples from the EMA weights of a checkpoint.
pub fn cmd_sample(checkpoint: &Path, sampler: &SamplerConfig, n: usize, seed: u64, out: &Path) -> CliResult<()> {
    sampler.validate()?;
    let ck = checkpoint_load(checkpoint)?;
    let params = ck.ema_params()?;
    if let Some(l) = sampler.label {
        if l >= params.layout().num_classes {
            return Err(CliError::Usage(format!("label {l} outside the model's {} classes", params.layout().num_classes)));
        }
    }
    let f = AverageVelocityNet::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = generate(&f, &mut rng, sampler, n)?;
    let meta = CsvMeta { config_hash: hex(&ck.config_hash), seed };
    write_samples(out, &samples, params.layout().dim, &meta)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Experiment {
    Drift,
    Thm1,
    Thm2,
    Thm3,
    Appendix,
    Accumulation,
    OmegaSweep,
}

impl Experiment {
    pub const ALL: [Experiment; 7] = [
        Experiment::Drift,
        Experiment::Thm1,
        Experiment::Thm2,
        Experiment::Thm3,
        Experiment::Appendix,
        Experiment::Accumulation,
        Experiment::OmegaSweep,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Experiment::Drift => "drift",
            Experiment::Thm1 => "thm1",
            Experiment::Thm2 => "thm2",
            Experiment::Thm3 => "thm3",
            Experiment::Appendix => "appendix",
            Experiment::Accumulation => "accumulation",
            Experiment::OmegaSweep => "omega_sweep",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Experiment {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        Experiment::ALL.into_iter().find(|e| e.id() == s).ok_or_else(|| CliError::UnknownExperiment(s.to_string()))
    }
}

/// Where the velocity field of a diagnostic comes from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ModelSource {
    /// Closed-form quantities only; experiments that need a network use the
    /// exact oracle field or freshly initialised parameter sets.
    Analytic,
    Checkpoint(PathBuf),
}

impl FromStr for ModelSource {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        Ok(if s == "analytic" { ModelSource::Analytic } else { ModelSource::Checkpoint(PathBuf::from(s)) })
    }
}

#[derive(Clone, Debug)]
pub struct DiagnoseOutcome {
    pub csv: PathBuf,
    pub report: CheckReport,
}

impl DiagnoseOutcome {
    pub fn exit_code(&self) -> u8 {
        if self.report.passed() {
            EXIT_OK
        } else {
            EXIT_ASSERTION
        }
    }
}

fn random_params(config: &RunConfig, seed: u64) -> CliResult<ModelParams<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = Layout::average_velocity(config.mixture.dims(), config.mixture.num_classes(), &config.train.arch);
    Ok(ModelParams::init(&mut rng, layout, OutputInit::FanIn)?)
}

fn load_model(path: &Path, spec: &MixtureSpec) -> CliResult<ModelParams<f64>> {
    let params = checkpoint_load(path)?.ema_params()?;
    if params.layout().dim != spec.dims() {
        return Err(CliError::Core(Error::Config(format!(
            "checkpoint has dimension {}, mixture has {}",
            params.layout().dim,
            spec.dims()
        ))));
    }
    Ok(params)
}

/// Runs one experiment on the configured mixture, writes its CSV (to `out`,
/// or `diag_<id>.csv` in the output directory) and returns the report. The
/// CSV is written even when assertions fail.
pub fn cmd_diagnose(
    source: &ModelSource,
    experiment: Experiment,
    config: &RunConfig,
    out: Option<&Path>,
) -> CliResult<DiagnoseOutcome> {
    config.validate()?;
    let spec = &config.mixture;
    let diag = &config.diagnostics;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let model = match source {
        ModelSource::Checkpoint(p) => Some(load_model(p, spec)?),
        ModelSource::Analytic => None,
    };
    let needs_model = |what: &str| {
        CliError::Usage(format!("experiment `{what}` needs a trained checkpoint, not the analytic source"))
    };
    let report = match experiment {
        Experiment::Drift => drift_experiment(spec, &mut rng, &uniform_grid(0.0, 1.0, diag.t_grid), diag.n_paths)?,
        Experiment::Thm1 => theorem1_check(spec, &mut rng, diag.n_points)?,
        Experiment::Thm2 => {
            let params = match &model {
                Some(p) => p.clone(),
                None => random_params(config, config.seed.wrapping_add(1))?,
            };
            theorem2_check(spec, &AverageVelocityNet::new(&params), &mut rng, diag.n_mc)?
        }
        Experiment::Thm3 => {
            let (report, _) = match &model {
                Some(p) => theorem3_check(spec, &AverageVelocityNet::new(p), &mut rng, diag.n_triples, diag.n_quad, THM3_REL_TOL)?,
                None => theorem3_check(spec, &OracleField::new(spec.clone()), &mut rng, diag.n_triples, diag.n_quad, THM3_REL_TOL)?,
            };
            report
        }
        Experiment::Appendix => {
            let mut thetas = Vec::with_capacity(diag.n_thetas);
            if let Some(p) = &model {
                thetas.push(p.clone());
            }
            let mut k = 1;
            while thetas.len() < diag.n_thetas {
                thetas.push(random_params(config, config.seed.wrapping_add(k))?);
                k += 1;
            }
            let nets: Vec<_> = thetas.iter().map(AverageVelocityNet::new).collect();
            let refs: Vec<&AverageVelocityNet<f64>> = nets.iter().collect();
            appendix_identity_check(spec, &mut rng, &refs, diag.n_mc, &APPENDIX_TIMES, APPENDIX_QUAD)?
        }
        Experiment::Accumulation => {
            let p = model.as_ref().ok_or_else(|| needs_model("accumulation"))?;
            let grid: Vec<f64> = (1..=diag.t_grid).map(|k| k as f64 / diag.t_grid as f64).collect();
            accumulation_experiment(spec, &AverageVelocityNet::new(p), &grid, &mut rng, diag.eval_samples, diag.euler_steps)?
        }
        Experiment::OmegaSweep => {
            let p = model.as_ref().ok_or_else(|| needs_model("omega_sweep"))?;
            sweep_report(p, config, &mut rng)?
        }
    };
    let csv = match out {
        Some(p) => p.to_path_buf(),
        None => config.resolved_output_dir().join(format!("diag_{}.csv", experiment.id())),
    };
    write_records(&csv, &report.records, &config.csv_meta())?;
    Ok(DiagnoseOutcome { csv, report })
}

fn sweep_report(params: &ModelParams<f64>, config: &RunConfig, rng: &mut ChaCha8Rng) -> CliResult<CheckReport> {
    let n = config.diagnostics.eval_samples;
    let (reference, _) = config.mixture.sample_data(rng, n);
    let f = AverageVelocityNet::new(params);
    let mut mmd = Vec::new();
    let scores = omega_sweep(&f, rng, &config.sampler, &config.diagnostics.omegas, n, |s| {
        let q = sample_quality(s, &reference)?;
        mmd.push(q.mmd);
        Ok(q.w2)
    })?;
    let mut report = CheckReport::default();
    for ((omega, w2), m) in scores.into_iter().zip(mmd) {
        report.records.push(DiagnosticsRecord::exact("omega_sweep_w2", omega, w2));
        report.records.push(DiagnosticsRecord::exact("omega_sweep_mmd", omega, m));
    }
    Ok(report)
}

/// Guidance-scale sweep of a checkpoint; the `omega_sweep` diagnostic.
pub fn cmd_sweep_omega(checkpoint: &Path, config: &RunConfig, out: Option<&Path>) -> CliResult<DiagnoseOutcome> {
    cmd_diagnose(&ModelSource::Checkpoint(checkpoint.to_path_buf()), Experiment::OmegaSweep, config, out)
}
