//! The training loop for `F_θ` and, once rectification is active, `G_ψ`.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, numeric_err, Error, Result};
use crate::network::{
    warm_start_fake, ArchConfig, AverageVelocityNet, Conditioning, EmaShadow, FakeVelocityNet, Layout, ModelParams,
    OutputInit,
};
use crate::objectives::{
    guided_velocity, regression_grad, AdaptiveWeightConfig, FakeBatch, LossReport, Objective, RectificationForm,
};
use crate::oracle::MixtureSpec;
use crate::sampler::draw_noise;
use crate::schedule::{sample_time_pair, CouplingBatch, TimeSamplerConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub objective: Objective,
    pub batch_size: usize,
    pub total_steps: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub ema_decay: f64,
    /// Fraction of each batch spent on rectification once it is active.
    pub rectify_ratio: f64,
    /// Fraction of `total_steps` trained before rectification starts.
    pub rectify_warmup: f64,
    pub rectification_form: RectificationForm,
    /// Per-sample weighting of the rectification segment; `None` reuses
    /// `adaptive_weight`.
    pub rectify_weight: Option<AdaptiveWeightConfig>,
    /// Learning rate of the auxiliary network; `None` reuses `learning_rate`.
    pub aux_learning_rate: Option<f64>,
    pub time: TimeSamplerConfig,
    pub cfg_drop_prob: f64,
    pub cfg_omega_range: [f64; 2],
    pub cfg_interval: [f64; 2],
    pub adaptive_weight: AdaptiveWeightConfig,
    pub arch: ArchConfig,
    /// Set from the run seed; not part of the `[train]` table.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Flowconsist,
            batch_size: 256,
            total_steps: 20_000,
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.95,
            adam_eps: 1e-8,
            ema_decay: 0.999,
            rectify_ratio: 0.3,
            rectify_warmup: 0.25,
            rectification_form: RectificationForm::Literal,
            rectify_weight: None,
            aux_learning_rate: None,
            time: TimeSamplerConfig::default(),
            cfg_drop_prob: 0.1,
            cfg_omega_range: [1.0, 4.0],
            cfg_interval: [0.0, 0.75],
            adaptive_weight: AdaptiveWeightConfig::default(),
            arch: ArchConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if let Some(lr) = self.aux_learning_rate {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("aux_learning_rate must be positive, got {lr}"));
            }
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad(format!("ema_decay must lie in [0, 1], got {}", self.ema_decay));
        }
        if !(0.0..=1.0).contains(&self.rectify_ratio) {
            return bad(format!("rectify_ratio must lie in [0, 1], got {}", self.rectify_ratio));
        }
        if !(0.0..=1.0).contains(&self.rectify_warmup) {
            return bad(format!("rectify_warmup must lie in [0, 1], got {}", self.rectify_warmup));
        }
        if !(0.0..=1.0).contains(&self.cfg_drop_prob) {
            return bad(format!("cfg_drop_prob must lie in [0, 1], got {}", self.cfg_drop_prob));
        }
        let [lo, hi] = self.cfg_omega_range;
        if !(lo >= 1.0 && lo <= hi && hi.is_finite()) {
            return bad(format!("cfg_omega_range needs 1 ≤ lo ≤ hi, got [{lo}, {hi}]"));
        }
        let [a, b] = self.cfg_interval;
        if !(0.0 <= a && a <= b && b <= 1.0) {
            return bad(format!("cfg_interval needs 0 ≤ a ≤ b ≤ 1, got [{a}, {b}]"));
        }
        self.time.validate()?;
        self.adaptive_weight.validate()?;
        if let Some(w) = &self.rectify_weight {
            w.validate()?;
        }
        Ok(())
    }

    /// First step at which rectification runs, or `None` if it never does.
    pub fn rectify_start(&self) -> Option<usize> {
        if self.rectify_ratio == 0.0 || self.objective == Objective::Fm {
            return None;
        }
        Some((self.rectify_warmup * self.total_steps as f64).round() as usize)
    }

    fn rectify_rows(&self) -> usize {
        (self.rectify_ratio * self.batch_size as f64).round() as usize
    }
}

/// Adam moment accumulators for one parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }
}

/// Bias-corrected Adam step, in place.
pub fn adam_update(
    opt: &mut OptimizerState,
    params: &mut [f64],
    grad: &[f64],
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if params.len() != grad.len() || opt.m.len() != params.len() || opt.v.len() != params.len() {
        return Err(dim_err("optimizer, parameter and gradient lengths differ"));
    }
    opt.step += 1;
    let c1 = 1.0 - beta1.powi(opt.step as i32);
    let c2 = 1.0 - beta2.powi(opt.step as i32);
    for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(&mut opt.m).zip(&mut opt.v) {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
    }
    Ok(())
}

/// The auxiliary network with its optimiser.
#[derive(Clone, Debug, PartialEq)]
pub struct AuxState {
    pub params: ModelParams<f64>,
    pub opt: OptimizerState,
}

/// Everything a training run mutates.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: u64,
    pub params: ModelParams<f64>,
    pub ema: EmaShadow<f64>,
    pub opt: OptimizerState,
    pub aux: Option<AuxState>,
    seed: u64,
}

impl TrainState {
    /// Fresh state: zero output layer, so the initial field is `F ≡ 0`.
    pub fn new(config: &TrainConfig, mixture: &MixtureSpec) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let layout = Layout::average_velocity(mixture.dims(), mixture.num_classes(), &config.arch);
        let params = ModelParams::init(&mut rng, layout, OutputInit::Zero)?;
        let ema = EmaShadow::new(&params, config.ema_decay)?;
        let opt = OptimizerState::new(params.len());
        Ok(Self { step: 0, params, ema, opt, aux: None, seed: config.seed })
    }

    /// Restores a state from stored parts. Every step draws from its own
    /// stream of `seed`, so a restored run continues exactly where it stopped.
    pub fn from_parts(
        config: &TrainConfig,
        step: u64,
        params: ModelParams<f64>,
        ema: EmaShadow<f64>,
        opt: OptimizerState,
        aux: Option<AuxState>,
    ) -> Self {
        Self { step, params, ema, opt, aux, seed: config.seed }
    }

    /// Random stream for step number `step` (stream 0 initialises the weights).
    fn step_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.step + 1);
        rng
    }

    pub fn ema_params(&self) -> Result<ModelParams<f64>> {
        self.ema.to_params(self.params.layout())
    }
}

/// What one segment of a step optimised.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Segment {
    Consistency(Objective),
    Rectification,
    Auxiliary,
}

impl Segment {
    pub fn name(self) -> &'static str {
        match self {
            Segment::Consistency(o) => o.name(),
            Segment::Rectification => "rectification",
            Segment::Auxiliary => "aux",
        }
    }
}

/// One metrics CSV row.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub objective: String,
    pub loss: f64,
    pub mean_residual_norm: f64,
    pub mean_target_norm: f64,
    pub omega_mean: f64,
    pub wall_ms: f64,
}

impl MetricRow {
    pub const HEADER: [&'static str; 7] =
        ["step", "objective", "loss", "mean_residual_norm", "mean_target_norm", "omega_mean", "wall_ms"];

    fn from_report(step: u64, segment: Segment, report: &LossReport<f64>, omega_mean: f64, wall_ms: f64) -> Self {
        Self {
            step,
            objective: segment.name().to_string(),
            loss: report.loss,
            mean_residual_norm: report.mean_residual_norm(),
            mean_target_norm: report.mean_target_norm(),
            omega_mean,
            wall_ms,
        }
    }
}

/// Loss reports of one step, keyed by segment.
#[derive(Clone, Debug)]
pub struct StepReport {
    pub step: u64,
    pub segments: Vec<(Segment, LossReport<f64>)>,
    pub omega_mean: f64,
}

/// A labelled coupling batch after CFG dropout, with the per-row guidance
/// scale and the sampled lower time `s`.
struct DrawnBatch {
    batch: CouplingBatch<f64>,
    omega: Vec<f64>,
    s: Vec<f64>,
}

fn draw_batch(config: &TrainConfig, mixture: &MixtureSpec, rng: &mut ChaCha8Rng) -> Result<DrawnBatch> {
    let n = config.batch_size;
    let (x, mut labels) = mixture.sample_data(rng, n);
    let eps = draw_noise(rng, n, mixture.dims());
    let conditional = mixture.num_classes() > 0;
    let [lo, hi] = config.cfg_omega_range;
    let mut omega = vec![1.0; n];
    for (l, w) in labels.iter_mut().zip(&mut omega) {
        if !conditional || rng.gen::<f64>() < config.cfg_drop_prob {
            *l = None;
        } else {
            *w = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        }
    }
    let pairs: Vec<_> = (0..n).map(|_| sample_time_pair::<f64, _>(rng, &config.time)).collect();
    let t = pairs.iter().map(|p| p.t()).collect();
    let s = pairs.iter().map(|p| p.s()).collect();
    Ok(DrawnBatch { batch: CouplingBatch::new(x, eps, labels, t)?, omega, s })
}

fn finite(g: &[f64]) -> bool {
    g.iter().all(|v| v.is_finite())
}

fn seg_scale(rows: usize, total: usize) -> f64 {
    rows as f64 / total as f64
}

/// One optimisation step. On a numeric failure nothing in `state` changes.
pub fn train_step(state: &mut TrainState, config: &TrainConfig, mixture: &MixtureSpec) -> Result<StepReport> {
    let mut rng = state.step_rng();
    let DrawnBatch { batch, omega, s: s_draw } = draw_batch(config, mixture, &mut rng)?;
    let n = batch.len();
    let rect_active = config.rectify_start().is_some_and(|k| state.step >= k as u64);
    let n_rect = if rect_active { config.rectify_rows().min(n) } else { 0 };

    let mut aux = state.aux.clone();
    if n_rect > 0 && aux.is_none() {
        let layout = Layout::fake_velocity(mixture.dims(), mixture.num_classes(), &config.arch);
        let params = warm_start_fake(&mut rng, &state.params, layout)?;
        let opt = OptimizerState::new(params.len());
        aux = Some(AuxState { params, opt });
    }

    let f = AverageVelocityNet::new(&state.params);
    let mut grad = vec![0.0; state.params.len()];
    let mut segments = Vec::new();

    let consist_rows: Vec<usize> = (n_rect..n).collect();
    if !consist_rows.is_empty() {
        let sub = batch.select(&consist_rows);
        let t = sub.t.clone();
        let s: Vec<f64> = consist_rows
            .iter()
            .map(|&i| match config.objective {
                Objective::Fm => batch.t[i],
                Objective::Cm => {
                    if s_draw[i] == batch.t[i] {
                        batch.t[i]
                    } else {
                        0.0
                    }
                }
                Objective::Meanflow | Objective::Flowconsist => s_draw[i],
            })
            .collect();
        let cond = Conditioning {
            s,
            t,
            labels: sub.labels.clone(),
            omega: consist_rows.iter().map(|&i| omega[i]).collect(),
        };
        let v_eff = guided_velocity(&f, &sub.x_t, &sub.v_t, &cond, config.cfg_interval)?;
        let objective = match config.objective {
            Objective::Cm => Objective::Flowconsist,
            o => o,
        };
        let target = objective.target(&f, &sub.x_t, &cond, &v_eff)?;
        let (_, cache) = f.forward_taped(&sub.x_t, &cond)?;
        let (report, g) = regression_grad(&state.params, &cache, target, &config.adaptive_weight)?;
        let k = seg_scale(consist_rows.len(), n);
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += k * b);
        segments.push((Segment::Consistency(config.objective), report));
    }

    let mut aux_grad = None;
    if n_rect > 0 {
        let aux_state = aux.as_ref().expect("created above");
        let rows: Vec<usize> = (0..n_rect).collect();
        let sub = batch.select(&rows);
        let cond = Conditioning {
            s: vec![0.0; n_rect],
            t: sub.t.clone(),
            labels: sub.labels.clone(),
            omega: rows.iter().map(|&i| omega[i]).collect(),
        };
        let fake = FakeBatch::generate(&f, &sub.x_t, &cond, &config.time, &mut rng)?;
        let g_net = FakeVelocityNet::new(&aux_state.params);
        let (pred, cache) = f.forward_taped(&sub.x_t, &cond)?;
        let target =
            crate::objectives::rectification_target_for(&f, &g_net, &pred, &fake, config.rectification_form)?;
        let weighting = config.rectify_weight.unwrap_or(config.adaptive_weight);
        let (report, g) = regression_grad(&state.params, &cache, target, &weighting)?;
        let k = seg_scale(n_rect, n);
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += k * b);
        segments.push((Segment::Rectification, report));

        let (_, g_cache) = g_net.forward_taped(&fake.x_noised, &fake.aux_conditioning())?;
        let (g_report, gg) =
            regression_grad(&aux_state.params, &g_cache, fake.conditional_velocity()?, &AdaptiveWeightConfig::UNIFORM)?;
        segments.push((Segment::Auxiliary, g_report));
        aux_grad = Some(gg);
    }

    if !finite(&grad) || aux_grad.as_deref().is_some_and(|g| !finite(g)) {
        return Err(numeric_err(format!("non-finite gradient at step {}", state.step)));
    }

    let mut params = state.params.clone();
    let mut opt = state.opt.clone();
    adam_update(&mut opt, params.flat_mut(), &grad, config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps)?;
    if !finite(params.flat()) {
        return Err(numeric_err(format!("parameters became non-finite at step {}", state.step)));
    }
    if let (Some(a), Some(g)) = (aux.as_mut(), aux_grad.as_ref()) {
        let lr = config.aux_learning_rate.unwrap_or(config.learning_rate);
        adam_update(&mut a.opt, a.params.flat_mut(), g, lr, config.adam_beta1, config.adam_beta2, config.adam_eps)?;
        if !finite(a.params.flat()) {
            return Err(numeric_err(format!("auxiliary parameters became non-finite at step {}", state.step)));
        }
    }
    state.ema.update(params.flat())?;
    state.params = params;
    state.opt = opt;
    state.aux = aux;
    state.step += 1;
    let omega_mean = omega.iter().sum::<f64>() / n as f64;
    Ok(StepReport { step: state.step, segments, omega_mean })
}

/// Controls how often [`run_training`] reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunSchedule {
    /// Metric rows are kept every `log_every` steps (and at the last step).
    pub log_every: usize,
    /// The observer is called every `checkpoint_every` steps; 0 disables it.
    pub checkpoint_every: usize,
}

impl Default for RunSchedule {
    fn default() -> Self {
        Self { log_every: 100, checkpoint_every: 0 }
    }
}

/// Runs `config.total_steps` steps from `state`. The observer sees the state
/// after every checkpoint interval and may flush it to disk.
pub fn run_training<O>(
    state: &mut TrainState,
    config: &TrainConfig,
    mixture: &MixtureSpec,
    schedule: RunSchedule,
    mut observer: O,
) -> Result<Vec<MetricRow>>
where
    O: FnMut(&TrainState, &[MetricRow]) -> Result<()>,
{
    config.validate()?;
    mixture.validate()?;
    if mixture.dims() != state.params.layout().dim {
        return Err(Error::Config("mixture and network dimensions differ".into()));
    }
    let start = Instant::now();
    let mut rows = Vec::new();
    let total = config.total_steps as u64;
    while state.step < total {
        let report = train_step(state, config, mixture)?;
        let last = report.step == total;
        if last || report.step % schedule.log_every.max(1) as u64 == 0 {
            let ms = start.elapsed().as_secs_f64() * 1e3;
            for (seg, r) in &report.segments {
                rows.push(MetricRow::from_report(report.step, *seg, r, report.omega_mean, ms));
            }
        }
        if schedule.checkpoint_every > 0 && report.step % schedule.checkpoint_every as u64 == 0 && !last {
            observer(state, &rows)?;
        }
    }
    observer(state, &rows)?;
    Ok(rows)
}
