//! Linear noise schedule, conditional velocities, `(s, t)` sampling and the
//! guidance-modified target velocity.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, domain_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn check_unit<T: Scalar>(t: T, what: &str) -> Result<()> {
    if !(t >= T::zero() && t <= T::one()) {
        return Err(domain_err(format!("{what} = {t} outside [0, 1]")));
    }
    Ok(())
}

/// `(1 − t)·x + t·eps`.
pub fn interpolate<T: Scalar>(x: &Tensor<T>, eps: &Tensor<T>, t: T) -> Result<Tensor<T>> {
    check_unit(t, "t")?;
    x.check_same_shape(eps, "interpolate")?;
    let one_minus = T::one() - t;
    x.zip_map(eps, |a, e| one_minus * a + t * e)
}

/// Row-wise [`interpolate`] with one time per row.
pub fn interpolate_rows<T: Scalar>(x: &Tensor<T>, eps: &Tensor<T>, t: &[T]) -> Result<Tensor<T>> {
    x.check_same_shape(eps, "interpolate")?;
    if t.len() != x.rows() {
        return Err(dim_err(format!("{} times for {} rows", t.len(), x.rows())));
    }
    for &ti in t {
        check_unit(ti, "t")?;
    }
    let mut out = x.clone();
    for (i, &ti) in t.iter().enumerate() {
        let one_minus = T::one() - ti;
        for (o, &e) in out.row_mut(i).iter_mut().zip(eps.row(i)) {
            *o = one_minus * *o + ti * e;
        }
    }
    Ok(out)
}

/// `eps − x`, the velocity of the straight path joining one pair.
pub fn conditional_velocity<T: Scalar>(x: &Tensor<T>, eps: &Tensor<T>) -> Result<Tensor<T>> {
    eps.sub(x)
}

/// A data/noise pair together with its interpolant and conditional velocity.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingSample<T> {
    pub x: Tensor<T>,
    pub eps: Tensor<T>,
    pub label: Option<usize>,
    pub t: T,
    pub x_t: Tensor<T>,
    pub v_t: Tensor<T>,
}

impl<T: Scalar> CouplingSample<T> {
    pub fn new(x: Tensor<T>, eps: Tensor<T>, label: Option<usize>, t: T) -> Result<Self> {
        let x_t = interpolate(&x, &eps, t)?;
        let v_t = conditional_velocity(&x, &eps)?;
        Ok(Self { x, eps, label, t, x_t, v_t })
    }
}

/// A batch of couplings stored as `[n, d]` tensors, one time per row.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingBatch<T> {
    pub x: Tensor<T>,
    pub eps: Tensor<T>,
    pub labels: Vec<Option<usize>>,
    pub t: Vec<T>,
    pub x_t: Tensor<T>,
    pub v_t: Tensor<T>,
}

impl<T: Scalar> CouplingBatch<T> {
    pub fn new(x: Tensor<T>, eps: Tensor<T>, labels: Vec<Option<usize>>, t: Vec<T>) -> Result<Self> {
        let x = x.as_matrix();
        let eps = eps.as_matrix();
        if labels.len() != x.rows() {
            return Err(dim_err("one label slot per row required"));
        }
        let x_t = interpolate_rows(&x, &eps, &t)?;
        let v_t = conditional_velocity(&x, &eps)?;
        Ok(Self { x, eps, labels, t, x_t, v_t })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn sample(&self, i: usize) -> CouplingSample<T> {
        let row = |m: &Tensor<T>| Tensor::from_parts(vec![m.cols()], m.row(i).to_vec());
        CouplingSample {
            x: row(&self.x),
            eps: row(&self.eps),
            label: self.labels[i],
            t: self.t[i],
            x_t: row(&self.x_t),
            v_t: row(&self.v_t),
        }
    }

    /// Sub-batch with the listed rows.
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(idx),
            eps: self.eps.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            t: idx.iter().map(|&i| self.t[i]).collect(),
            x_t: self.x_t.select_rows(idx),
            v_t: self.v_t.select_rows(idx),
        }
    }
}

/// Ordered segment endpoints `0 ≤ s ≤ t ≤ 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimePair<T> {
    s: T,
    t: T,
}

impl<T: Scalar> TimePair<T> {
    pub fn new(s: T, t: T) -> Result<Self> {
        if !(T::zero() <= s && s <= t && t <= T::one()) {
            return Err(domain_err(format!("time pair requires 0 <= s <= t <= 1, got s={s}, t={t}")));
        }
        Ok(Self { s, t })
    }

    pub fn s(&self) -> T {
        self.s
    }

    pub fn t(&self) -> T {
        self.t
    }

    pub fn span(&self) -> T {
        self.t - self.s
    }
}

/// How the two logit-normal draws become an `(s, t)` pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairingRule {
    /// Draw two values; `t` is the larger, `s` the smaller.
    #[default]
    MaxMin,
    /// Draw `t`; draw a second value `r` and set `s = r·t`.
    ScaledBelow,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeSamplerConfig {
    pub mu: f64,
    pub sigma: f64,
    /// Probability of forcing `s = t`.
    pub equal_prob: f64,
    #[serde(default)]
    pub pairing: PairingRule,
}

impl Default for TimeSamplerConfig {
    fn default() -> Self {
        Self { mu: -0.4, sigma: 1.0, equal_prob: 0.6, pairing: PairingRule::MaxMin }
    }
}

impl TimeSamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) || !self.mu.is_finite() {
            return Err(domain_err("time sampler needs finite mu and sigma > 0"));
        }
        if !(0.0..=1.0).contains(&self.equal_prob) {
            return Err(domain_err("equal_prob must lie in [0, 1]"));
        }
        Ok(())
    }

    /// One draw of `sigmoid(N(mu, sigma²))`.
    pub fn sample_logit_normal<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let z: f64 = Normal::new(self.mu, self.sigma).expect("validated sigma").sample(rng);
        1.0 / (1.0 + (-z).exp())
    }
}

pub fn sample_time_pair<T: Scalar, R: Rng + ?Sized>(rng: &mut R, cfg: &TimeSamplerConfig) -> TimePair<T> {
    let a = cfg.sample_logit_normal(rng);
    let b = cfg.sample_logit_normal(rng);
    let (mut s, t) = match cfg.pairing {
        PairingRule::MaxMin => (a.min(b), a.max(b)),
        PairingRule::ScaledBelow => (a * b, a),
    };
    if rng.gen::<f64>() < cfg.equal_prob {
        s = t;
    }
    TimePair { s: T::lit(s), t: T::lit(t) }
}

/// The scalar `1 − 1/ω` multiplying the guidance difference.
pub fn cfg_coefficient<T: Scalar>(omega: T) -> Result<T> {
    if !(omega >= T::one()) {
        return Err(domain_err(format!("guidance scale {omega} < 1")));
    }
    Ok(T::one() - omega.recip())
}

/// `v + (1 − 1/ω)·(f_cond − f_uncond)`.
pub fn cfg_velocity<T: Scalar>(v: &Tensor<T>, f_cond: &Tensor<T>, f_uncond: &Tensor<T>, omega: T) -> Result<Tensor<T>> {
    let k = cfg_coefficient(omega)?;
    v.check_same_shape(f_cond, "cfg velocity")?;
    v.check_same_shape(f_uncond, "cfg velocity")?;
    let diff = f_cond.sub(f_uncond)?;
    v.axpy(k, &diff)
}
