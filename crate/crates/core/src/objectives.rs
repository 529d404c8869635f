//! Training targets and regression losses.
//!
//! Every target is returned as a plain tensor, so it is a constant with
//! respect to the parameters: the only gradient path of each loss runs
//! through the prediction, which is what the stop-gradient requires.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, domain_err, Error, Result};
use crate::network::{AuxConditioning, Conditioning, FakeVelocityField, ForwardCache, ModelParams, VelocityField};
use crate::scalar::Scalar;
use crate::schedule::{cfg_coefficient, CouplingBatch, TimeSamplerConfig};
use crate::tensor::Tensor;

/// Per-batch loss summary.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport<T> {
    /// `mean_i w_i · r_i` with `r_i = ||prediction_i − target_i||²`.
    pub loss: T,
    pub residual_sq_norms: Vec<T>,
    pub target: Tensor<T>,
    pub weights: Vec<T>,
}

impl<T: Scalar> LossReport<T> {
    pub fn len(&self) -> usize {
        self.residual_sq_norms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.residual_sq_norms.is_empty()
    }

    pub fn mean_residual_norm(&self) -> T {
        mean(self.residual_sq_norms.iter().map(|r| r.sqrt()))
    }

    pub fn mean_target_norm(&self) -> T {
        mean(self.target.row_sq_norms().into_iter().map(|r| r.sqrt()))
    }
}

fn mean<T: Scalar>(it: impl ExactSizeIterator<Item = T>) -> T {
    let n = it.len();
    if n == 0 {
        return T::zero();
    }
    it.fold(T::zero(), |a, v| a + v) / T::from_usize(n).expect("count fits")
}

/// `1/(r + c)^p` with `r` the squared residual norm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptiveWeightConfig {
    pub p: f64,
    pub c: f64,
}

impl Default for AdaptiveWeightConfig {
    fn default() -> Self {
        Self { p: 1.0, c: 1e-3 }
    }
}

impl AdaptiveWeightConfig {
    pub const UNIFORM: Self = Self { p: 0.0, c: 1e-3 };

    pub fn validate(&self) -> Result<()> {
        if !(self.p >= 0.0 && self.p.is_finite()) || !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::Config(format!("adaptive weight needs p ≥ 0 and c > 0, got p = {}, c = {}", self.p, self.c)));
        }
        Ok(())
    }
}

pub fn adaptive_weight<T: Scalar>(residual_sq_norm: T, cfg: &AdaptiveWeightConfig) -> T {
    if cfg.p == 0.0 {
        return T::one();
    }
    (residual_sq_norm + T::lit(cfg.c)).powf(T::lit(-cfg.p))
}

/// Weighted squared-error report of `prediction` against a frozen `target`.
pub fn regression_report<T: Scalar>(
    prediction: &Tensor<T>,
    target: Tensor<T>,
    weighting: &AdaptiveWeightConfig,
) -> Result<LossReport<T>> {
    prediction.check_same_shape(&target, "regression target")?;
    if prediction.rows() == 0 {
        return Err(dim_err("empty batch"));
    }
    let residual_sq_norms = prediction.sub(&target)?.row_sq_norms();
    let weights: Vec<T> = residual_sq_norms.iter().map(|&r| adaptive_weight(r, weighting)).collect();
    let loss = mean(residual_sq_norms.iter().zip(&weights).map(|(&r, &w)| w * r));
    if !loss.is_finite() {
        return Err(crate::error::numeric_err(format!("loss evaluated to {loss}")));
    }
    Ok(LossReport { loss, residual_sq_norms, target, weights })
}

/// `∂loss/∂prediction = 2 w_i (prediction_i − target_i) / n`.
pub fn regression_cotangent<T: Scalar>(prediction: &Tensor<T>, report: &LossReport<T>) -> Result<Tensor<T>> {
    let n = T::from_usize(prediction.rows()).expect("count fits");
    let scale: Vec<T> = report.weights.iter().map(|&w| T::lit(2.0) * w / n).collect();
    prediction.sub(&report.target)?.scale_rows(&scale)
}

/// Conditioning `(s = t, t, label, ω = 1)` for every row of a batch.
pub fn diagonal_conditioning<T: Scalar>(batch: &CouplingBatch<T>) -> Conditioning<T> {
    Conditioning { s: batch.t.clone(), t: batch.t.clone(), labels: batch.labels.clone(), omega: vec![T::one(); batch.len()] }
}

/// Flow matching: mean `||F(x_t, t, t) − v_t||²`.
pub fn fm_loss<T: Scalar, F: VelocityField<T> + ?Sized>(f: &F, batch: &CouplingBatch<T>) -> Result<LossReport<T>> {
    fm_loss_weighted(f, batch, &AdaptiveWeightConfig::UNIFORM)
}

pub fn fm_loss_weighted<T: Scalar, F: VelocityField<T> + ?Sized>(
    f: &F,
    batch: &CouplingBatch<T>,
    weighting: &AdaptiveWeightConfig,
) -> Result<LossReport<T>> {
    if batch.is_empty() {
        return Err(dim_err("empty batch"));
    }
    let pred = f.eval(&batch.x_t, &diagonal_conditioning(batch))?;
    regression_report(&pred, batch.v_t.clone(), weighting)
}

/// `v_eff − (t − s)·(∇ₓF·dir + ∂ₜF)`, row by row.
fn consistency_target<T: Scalar, F: VelocityField<T> + ?Sized>(
    f: &F,
    x_t: &Tensor<T>,
    cond: &Conditioning<T>,
    v_eff: &Tensor<T>,
    dir: &Tensor<T>,
) -> Result<Tensor<T>> {
    x_t.check_same_shape(v_eff, "effective velocity")?;
    let (_, d) = f.eval_jvp(x_t, cond, dir, &vec![T::one(); x_t.rows()])?;
    let span: Vec<T> = cond.t.iter().zip(&cond.s).map(|(&t, &s)| t - s).collect();
    v_eff.sub(&d.scale_rows(&span)?)
}

/// MeanFlow target: tangent direction `(v_eff, 1)`.
pub fn meanflow_target<T: Scalar, F: VelocityField<T> + ?Sized>(
    f: &F,
    x_t: &Tensor<T>,
    cond: &Conditioning<T>,
    v_eff: &Tensor<T>,
) -> Result<Tensor<T>> {
    consistency_target(f, x_t, cond, v_eff, v_eff)
}

/// The model's own instantaneous velocity `u_θ = F(x_t, t, t)`.
pub fn instantaneous_velocity<T: Scalar, F: VelocityField<T> + ?Sized>(
    f: &F,
    x_t: &Tensor<T>,
    cond: &Conditioning<T>,
) -> Result<Tensor<T>> {
    f.eval(x_t, &cond.diagonal())
}

/// FlowConsist target: tangent direction `(u_θ, 1)`.
pub fn flowconsist_target<T: Scalar, F: VelocityField<T> + ?Sized>(
    f: &F,
    x_t: &Tensor<T>,
    cond: &Conditioning<T>,
    v_eff: &Tensor<T>,
) -> Result<Tensor<T>> {
    let u = instantaneous_velocity(f, x_t, cond)?;
    consistency_target(f, x_t, cond, v_eff, &u)
}

/// Consistency-model specialisation: [`flowconsist_target`] with `s = 0`.
pub fn cm_consistency_target<T: Scalar, F: VelocityField<T> + ?Sized>(
    f: &F,
    x_t: &Tensor<T>,
    cond: &Conditioning<T>,
    v_eff: &Tensor<T>,
) -> Result<Tensor<T>> {
    flowconsist_target(f, x_t, &cond.with_s(vec![T::zero(); cond.len()]), v_eff)
}

/// Which consistency target a run trains against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Fm,
    Meanflow,
    Flowconsist,
    Cm,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::Fm => "fm",
            Objective::Meanflow => "meanflow",
            Objective::Flowconsist => "flowconsist",
            Objective::Cm => "cm",
        }
    }

    /// Target for the rows of `cond`; `Fm` ignores `s` and returns `v_eff`.
    pub fn target<T: Scalar, F: VelocityField<T> + ?Sized>(
        self,
        f: &F,
        x_t: &Tensor<T>,
        cond: &Conditioning<T>,
        v_eff: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        match self {
            Objective::Fm => Ok(v_eff.clone()),
            Objective::Meanflow => meanflow_target(f, x_t, cond, v_eff),
            Objective::Flowconsist => flowconsist_target(f, x_t, cond, v_eff),
            Objective::Cm => cm_consistency_target(f, x_t, cond, v_eff),
        }
    }

    /// Conditioning the prediction `F(x_t, s, t)` is evaluated at.
    pub fn prediction_conditioning<T: Scalar>(self, cond: &Conditioning<T>) -> Conditioning<T> {
        match self {
            Objective::Fm => cond.diagonal(),
            Objective::Cm => cond.with_s(vec![T::zero(); cond.len()]),
            Objective::Meanflow | Objective::Flowconsist => cond.clone(),
        }
    }
}

/// Consistency loss for a batch at times `cond`, evaluated without
/// gradients; the trainer reuses [`Objective::target`] for the same numbers.
pub fn consistency_loss<T: Scalar, F: VelocityField<T> + ?Sized>(
    objective: Objective,
    f: &F,
    batch: &CouplingBatch<T>,
    cond: &Conditioning<T>,
    v_eff: &Tensor<T>,
    weighting: &AdaptiveWeightConfig,
) -> Result<LossReport<T>> {
    if batch.is_empty() {
        return Err(dim_err("empty batch"));
    }
    let target = objective.target(f, &batch.x_t, cond, v_eff)?;
    let pred = f.eval(&batch.x_t, &objective.prediction_conditioning(cond))?;
    regression_report(&pred, target, weighting)
}

/// `w(t) = (t − 1)/t`.
pub fn kl_weight<T: Scalar>(t: T) -> Result<T> {
    if !(t > T::zero() && t <= T::one()) {
        return Err(domain_err(format!("weighting needs t in (0, 1], got {t}")));
    }
    Ok((t - T::one()) / t)
}

/// Model samples re-noised for the auxiliary network.
#[derive(Clone, Debug, PartialEq)]
pub struct FakeBatch<T> {
    /// `x_0^t = x_t − t·F(x_t, 0, t)`.
    pub x0: Tensor<T>,
    pub eps: Tensor<T>,
    /// Noise level `t′` per row.
    pub t_prime: Vec<T>,
    /// `x_{t′}^t = t′ε′ + (1 − t′)x_0^t`.
    pub x_noised: Tensor<T>,
    /// Origin time `t` per row.
    pub origin: Vec<T>,
    pub labels: Vec<Option<usize>>,
}

impl<T: Scalar> FakeBatch<T> {
    /// Builds the batch from given `x_0^t`, noise and `t′`.
    pub fn from_parts(x0: Tensor<T>, eps: Tensor<T>, t_prime: Vec<T>, origin: Vec<T>, labels: Vec<Option<usize>>) -> Result<Self> {
        let x_noised = crate::schedule::interpolate_rows(&x0, &eps, &t_prime)?;
        if origin.len() != x0.rows() || labels.len() != x0.rows() {
            return Err(dim_err("fake batch rows"));
        }
        Ok(Self { x0, eps, t_prime, x_noised, origin, labels })
    }

    /// Draws `ε′` and `t′` and maps `x_t` to `x_0^t` through `F`.
    pub fn generate<F: VelocityField<T> + ?Sized, R: Rng + ?Sized>(
        f: &F,
        x_t: &Tensor<T>,
        cond: &Conditioning<T>,
        time: &TimeSamplerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let start = cond.with_s(vec![T::zero(); cond.len()]);
        let x0 = x_t.sub(&f.eval(x_t, &start)?.scale_rows(&cond.t)?)?;
        let n = x_t.rows();
        let t_prime: Vec<T> = (0..n).map(|_| T::lit(time.sample_logit_normal(rng))).collect();
        let eps_data: Vec<T> = (0..n * x_t.cols())
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::lit(z)
            })
            .collect();
        let eps = Tensor::new(vec![n, x_t.cols()], eps_data)?;
        Self::from_parts(x0, eps, t_prime, cond.t.clone(), cond.labels.clone())
    }

    pub fn aux_conditioning(&self) -> AuxConditioning<T> {
        AuxConditioning { origin: self.origin.clone(), noise: self.t_prime.clone(), labels: self.labels.clone() }
    }

    /// Regression target `ε′ − x_0^t` of the auxiliary network.
    pub fn conditional_velocity(&self) -> Result<Tensor<T>> {
        self.eps.sub(&self.x0)
    }

    /// Conditioning `(t′, t′, label, ω = 1)` for querying `F` on the noised samples.
    pub fn real_conditioning(&self) -> Conditioning<T> {
        Conditioning {
            s: self.t_prime.clone(),
            t: self.t_prime.clone(),
            labels: self.labels.clone(),
            omega: vec![T::one(); self.t_prime.len()],
        }
    }
}

/// Auxiliary loss: mean `||G(x_{t′}^t, t, t′) − (ε′ − x_0^t)||²`.
pub fn gpsi_loss<T: Scalar, G: FakeVelocityField<T> + ?Sized>(g: &G, fake: &FakeBatch<T>) -> Result<LossReport<T>> {
    let pred = g.eval(&fake.x_noised, &fake.aux_conditioning())?;
    regression_report(&pred, fake.conditional_velocity()?, &AdaptiveWeightConfig::UNIFORM)
}

/// How the rectification target is assembled from the real and fake velocities.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RectificationForm {
    /// `sg(F(x_{t′}, t′, t′) − G(x_{t′}, t, t′))`.
    #[default]
    Literal,
    /// `sg(F(x_t, 0, t) − t′·(G(x_{t′}, t, t′) − F(x_{t′}, t′, t′)))`: a KL
    /// descent step on the generated sample. The velocity gap is the score
    /// gap in `x_0` space; moving `x_0^t = x_t − t·F` along it by `t′/t` of
    /// the denoising distance maps back to this shift of `F`.
    Dmd,
}

/// Rectification pair `(F(x_t, 0, t), target)` for one batch.
pub fn rectification_target<T: Scalar, F: VelocityField<T> + ?Sized, G: FakeVelocityField<T> + ?Sized>(
    f: &F,
    g: &G,
    x_t: &Tensor<T>,
    cond: &Conditioning<T>,
    fake: &FakeBatch<T>,
    form: RectificationForm,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let prediction = f.eval(x_t, &cond.with_s(vec![T::zero(); cond.len()]))?;
    let target = rectification_target_for(f, g, &prediction, fake, form)?;
    Ok((prediction, target))
}

/// Target half of [`rectification_target`], given the prediction.
pub fn rectification_target_for<T: Scalar, F: VelocityField<T> + ?Sized, G: FakeVelocityField<T> + ?Sized>(
    f: &F,
    g: &G,
    prediction: &Tensor<T>,
    fake: &FakeBatch<T>,
    form: RectificationForm,
) -> Result<Tensor<T>> {
    let u_real = f.eval(&fake.x_noised, &fake.real_conditioning())?;
    let u_fake = g.eval(&fake.x_noised, &fake.aux_conditioning())?;
    match form {
        RectificationForm::Literal => u_real.sub(&u_fake),
        RectificationForm::Dmd => {
            let shift = u_fake.sub(&u_real)?;
            let k: Vec<T> = fake.t_prime.iter().map(|&tp| -tp).collect();
            prediction.add(&shift.scale_rows(&k)?)
        }
    }
}

/// Per-row CFG-modified conditional velocity. Rows whose `t` lies outside
/// `interval`, or whose label was dropped, keep plain `v_t`.
pub fn guided_velocity<T: Scalar, F: VelocityField<T> + ?Sized>(
    f: &F,
    x_t: &Tensor<T>,
    v_t: &Tensor<T>,
    cond: &Conditioning<T>,
    interval: [f64; 2],
) -> Result<Tensor<T>> {
    let (lo, hi) = (T::lit(interval[0]), T::lit(interval[1]));
    let rows: Vec<usize> = (0..x_t.rows())
        .filter(|&i| cond.labels[i].is_some() && cond.t[i] >= lo && cond.t[i] <= hi && cond.omega[i] > T::one())
        .collect();
    let mut out = v_t.clone();
    if rows.is_empty() {
        return Ok(out);
    }
    let sub_x = x_t.select_rows(&rows);
    let sub = cond.select(&rows).diagonal();
    let f_c = f.eval(&sub_x, &sub)?;
    let f_u = f.eval(&sub_x, &sub.with_labels(vec![None; rows.len()]))?;
    for (k, &i) in rows.iter().enumerate() {
        let kappa = cfg_coefficient(cond.omega[i])?;
        for ((o, &a), &b) in out.row_mut(i).iter_mut().zip(f_c.row(k)).zip(f_u.row(k)) {
            *o += kappa * (a - b);
        }
    }
    Ok(out)
}

/// Loss and flat parameter gradient of a weighted regression of
/// `F(x, cond)` onto a frozen target.
pub fn regression_grad<T: Scalar>(
    params: &ModelParams<T>,
    cache: &ForwardCache<T>,
    target: Tensor<T>,
    weighting: &AdaptiveWeightConfig,
) -> Result<(LossReport<T>, Vec<T>)> {
    let report = regression_report(cache.output(), target, weighting)?;
    let cot = regression_cotangent(cache.output(), &report)?;
    let (g, _) = params.backward(cache, &cot)?;
    Ok((report, g))
}
