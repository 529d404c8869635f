//! Few-step generation with a trained average-velocity field.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{domain_err, Error, Result};
use crate::network::{Conditioning, VelocityField};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMode {
    /// `nfe` jumps `x_s = x_t − (t − s)·F(x_t, s, t)` on a uniform grid.
    #[default]
    FlowMapJumps,
    /// Euler steps with the instantaneous field `F(x, t, t)`.
    EulerInstantaneous,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub nfe: usize,
    pub omega: f64,
    pub mode: SamplerMode,
    /// Class to generate; `None` is unconditional.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { nfe: 1, omega: 1.0, mode: SamplerMode::FlowMapJumps, label: None }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nfe == 0 {
            return Err(Error::Config("nfe must be at least 1".into()));
        }
        if !(self.omega >= 1.0 && self.omega.is_finite()) {
            return Err(Error::Config(format!("omega must be ≥ 1, got {}", self.omega)));
        }
        Ok(())
    }
}

/// `x_t − (t − s)·F(x_t, s, t | label, ω)` for every row.
pub fn flow_map_apply<T: Scalar, F: VelocityField<T> + ?Sized>(
    f: &F,
    x_t: &Tensor<T>,
    s: T,
    t: T,
    label: Option<usize>,
    omega: T,
) -> Result<Tensor<T>> {
    if !(s <= t) {
        return Err(domain_err(format!("flow map needs s ≤ t, got s = {s}, t = {t}")));
    }
    let x = x_t.as_matrix();
    let cond = Conditioning::uniform(x.rows(), s, t, label, omega);
    let out = x.axpy(-(t - s), &f.eval(&x, &cond)?)?;
    out.reshape(x_t.shape().to_vec())
}

/// Standard normal `[n, d]` noise.
pub fn draw_noise<T: Scalar, R: Rng + ?Sized>(rng: &mut R, n: usize, d: usize) -> Tensor<T> {
    let data = (0..n * d)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z)
        })
        .collect();
    Tensor::new(vec![n, d], data).expect("finite normal draws")
}

/// Transports a given noise batch from `t = 1` to `t = 0`.
pub fn transport<T: Scalar, F: VelocityField<T> + ?Sized>(f: &F, noise: &Tensor<T>, cfg: &SamplerConfig) -> Result<Tensor<T>> {
    cfg.validate()?;
    let omega = T::lit(cfg.omega);
    let k = cfg.nfe;
    let grid = |i: usize| T::lit(1.0 - i as f64 / k as f64);
    let mut x = noise.as_matrix();
    if x.rows() == 0 {
        return Ok(x);
    }
    for i in 0..k {
        let (t, s) = (grid(i), if i + 1 == k { T::zero() } else { grid(i + 1) });
        x = match cfg.mode {
            SamplerMode::FlowMapJumps => flow_map_apply(f, &x, s, t, cfg.label, omega)?,
            SamplerMode::EulerInstantaneous => {
                let cond = Conditioning::uniform(x.rows(), t, t, cfg.label, omega);
                x.axpy(-(t - s), &f.eval(&x, &cond)?)?
            }
        };
    }
    x.ensure_finite("generated samples")
}

/// Draws `n` noise vectors and transports them to data space.
pub fn generate<T: Scalar, F: VelocityField<T> + ?Sized, R: Rng + ?Sized>(
    f: &F,
    rng: &mut R,
    cfg: &SamplerConfig,
    n: usize,
) -> Result<Tensor<T>> {
    let noise = draw_noise(rng, n, f.dim());
    transport(f, &noise, cfg)
}

/// One `(ω, score)` pair per requested scale, all sharing one noise batch.
pub fn omega_sweep<T, F, R, M>(
    f: &F,
    rng: &mut R,
    base: &SamplerConfig,
    omegas: &[f64],
    n: usize,
    mut metric: M,
) -> Result<Vec<(f64, f64)>>
where
    T: Scalar,
    F: VelocityField<T> + ?Sized,
    R: Rng + ?Sized,
    M: FnMut(&Tensor<T>) -> Result<f64>,
{
    if omegas.is_empty() {
        return Err(Error::Config("omega sweep needs at least one scale".into()));
    }
    let noise = draw_noise(rng, n, f.dim());
    omegas
        .iter()
        .map(|&omega| {
            let samples = transport(f, &noise, &SamplerConfig { omega, ..*base })?;
            Ok((omega, metric(&samples)?))
        })
        .collect()
}
