//! Gaussian-mixture data distributions with closed-form posteriors, the exact
//! marginal velocity field and a high-accuracy reference flow map.
//!
//! Every component is isotropic, `N(μ_k, σ_k² I)`. Under the coupling
//! `x_t = (1 − t)x + tε` the observation given component `k` is
//! `N((1 − t)μ_k, D_k I)` with `D_k = (1 − t)²σ_k² + t²`, which makes all
//! posterior quantities scalar formulas.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, domain_err, numeric_err, Error, Result};
use crate::network::{Conditioning, VelocityField};
use crate::tensor::Tensor;

/// Default number of RK4 substeps for reference trajectories.
pub const REFERENCE_STEPS: usize = 1024;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Per-dimension variance. Zero makes the component a point mass.
    pub variance: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub components: Vec<MixtureComponent>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorMoments {
    /// `E[x | x_t]`.
    pub mean: Vec<f64>,
    /// `Tr Var(x | x_t)`.
    pub covariance_trace: f64,
    pub responsibilities: Vec<f64>,
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(domain_err(format!("t = {t} outside [0, 1]")));
    }
    Ok(())
}

fn sq_dist(a: &[f64], b: &[f64], scale_b: f64) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - scale_b * y).powi(2)).sum()
}

impl MixtureSpec {
    pub fn new(components: Vec<MixtureComponent>) -> Result<Self> {
        let spec = Self { components };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .components
            .first()
            .ok_or_else(|| Error::Config("mixture needs at least one component".into()))?;
        let d = first.mean.len();
        if d == 0 {
            return Err(Error::Config("mixture dimension must be positive".into()));
        }
        let mut total = 0.0;
        for (k, c) in self.components.iter().enumerate() {
            if c.mean.len() != d {
                return Err(Error::Config(format!("component {k} has dimension {} not {d}", c.mean.len())));
            }
            if !(c.weight > 0.0 && c.weight.is_finite()) {
                return Err(Error::Config(format!("component {k} weight must be positive")));
            }
            if !(c.variance >= 0.0 && c.variance.is_finite()) {
                return Err(Error::Config(format!("component {k} variance must be finite and >= 0")));
            }
            if c.mean.iter().any(|m| !m.is_finite()) {
                return Err(Error::Config(format!("component {k} mean not finite")));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("mixture weights sum to {total}, expected 1")));
        }
        Ok(())
    }

    pub fn dims(&self) -> usize {
        self.components[0].mean.len()
    }

    /// Number of distinct class labels (max label + 1), zero when unlabelled.
    pub fn num_classes(&self) -> usize {
        self.components.iter().filter_map(|c| c.label).max().map_or(0, |m| m + 1)
    }

    /// True when the distribution is a single point mass.
    pub fn is_degenerate(&self) -> bool {
        let first = &self.components[0].mean;
        self.components.iter().all(|c| c.variance == 0.0 && c.mean == *first)
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dims()];
        for c in &self.components {
            for (a, b) in m.iter_mut().zip(&c.mean) {
                *a += c.weight * b;
            }
        }
        m
    }

    /// `N(mean, variance·I)`.
    pub fn gaussian(mean: Vec<f64>, variance: f64) -> Result<Self> {
        Self::new(vec![MixtureComponent { weight: 1.0, mean, variance, label: None }])
    }

    pub fn dirac(point: Vec<f64>) -> Result<Self> {
        Self::gaussian(point, 0.0)
    }

    /// `k` equal-weight components on a circle of the given radius, one class
    /// per component when `labelled`.
    pub fn ring(k: usize, radius: f64, variance: f64, labelled: bool) -> Result<Self> {
        let comps = (0..k)
            .map(|i| {
                let a = std::f64::consts::TAU * i as f64 / k as f64;
                MixtureComponent {
                    weight: 1.0 / k as f64,
                    mean: vec![radius * a.cos(), radius * a.sin()],
                    variance,
                    label: labelled.then_some(i),
                }
            })
            .collect();
        Self::new(comps)
    }

    /// Equal-weight one-dimensional pair at `±offset`.
    pub fn pair_1d(offset: f64, variance: f64) -> Result<Self> {
        Self::new(vec![
            MixtureComponent { weight: 0.5, mean: vec![-offset], variance, label: Some(0) },
            MixtureComponent { weight: 0.5, mean: vec![offset], variance, label: Some(1) },
        ])
    }

    /// Four components on the corners of a square, with unequal weights.
    pub fn square_2d(half_width: f64, variance: f64) -> Result<Self> {
        let w = [0.4, 0.3, 0.2, 0.1];
        let corners = [[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]];
        Self::new(
            corners
                .iter()
                .zip(w)
                .enumerate()
                .map(|(k, (c, w))| MixtureComponent {
                    weight: w,
                    mean: vec![half_width * c[0], half_width * c[1]],
                    variance,
                    label: Some(k),
                })
                .collect(),
        )
    }

    /// Draws `n` i.i.d. points and the class label of the drawn component.
    pub fn sample_data<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> (Tensor<f64>, Vec<Option<usize>>) {
        let d = self.dims();
        let index = WeightedIndex::new(self.components.iter().map(|c| c.weight)).expect("validated weights");
        let mut data = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let c = &self.components[index.sample(rng)];
            let sd = c.variance.sqrt();
            for &m in &c.mean {
                let z: f64 = StandardNormal.sample(rng);
                data.push(m + sd * z);
            }
            labels.push(c.label);
        }
        (Tensor::from_parts(vec![n, d], data), labels)
    }

    fn check_point(&self, x_t: &[f64]) -> Result<()> {
        if x_t.len() != self.dims() {
            return Err(dim_err(format!("point has {} dims, mixture has {}", x_t.len(), self.dims())));
        }
        Ok(())
    }

    /// Component log-likelihoods of the observation `x_t` (up to a shared constant).
    fn component_log_lik(&self, x_t: &[f64], t: f64) -> Vec<f64> {
        let d = self.dims() as f64;
        self.components
            .iter()
            .map(|c| {
                let var = (1.0 - t).powi(2) * c.variance + t * t;
                let dist = sq_dist(x_t, &c.mean, 1.0 - t);
                if var == 0.0 {
                    if dist == 0.0 {
                        c.weight.ln()
                    } else {
                        f64::NEG_INFINITY
                    }
                } else {
                    c.weight.ln() - 0.5 * d * var.ln() - 0.5 * dist / var
                }
            })
            .collect()
    }

    fn responsibilities(&self, x_t: &[f64], t: f64) -> Vec<f64> {
        let ll = self.component_log_lik(x_t, t);
        let max = ll.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return self.components.iter().map(|c| c.weight).collect();
        }
        let w: Vec<f64> = ll.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = w.iter().sum();
        w.into_iter().map(|v| v / z).collect()
    }

    /// Exact posterior of `x` given `x_t`.
    pub fn posterior_moments(&self, x_t: &[f64], t: f64) -> Result<PosteriorMoments> {
        check_time(t)?;
        self.check_point(x_t)?;
        let resp = self.responsibilities(x_t, t);
        if t == 0.0 {
            return Ok(PosteriorMoments { mean: x_t.to_vec(), covariance_trace: 0.0, responsibilities: resp });
        }
        let d = self.dims();
        let (means, vars) = self.component_posteriors(x_t, t);
        let mut mean = vec![0.0; d];
        for (r, m) in resp.iter().zip(&means) {
            for (a, b) in mean.iter_mut().zip(m) {
                *a += r * b;
            }
        }
        let covariance_trace = resp
            .iter()
            .zip(means.iter().zip(&vars))
            .map(|(r, (m, v))| r * (d as f64 * v + sq_dist(m, &mean, 1.0)))
            .sum();
        Ok(PosteriorMoments { mean, covariance_trace, responsibilities: resp })
    }

    /// Per-component posterior means and per-dimension variances, `t > 0`.
    fn component_posteriors(&self, x_t: &[f64], t: f64) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut means = Vec::with_capacity(self.components.len());
        let mut vars = Vec::with_capacity(self.components.len());
        for c in &self.components {
            let den = (1.0 - t).powi(2) * c.variance + t * t;
            let gain = (1.0 - t) * c.variance / den;
            means.push(
                c.mean
                    .iter()
                    .zip(x_t)
                    .map(|(&mu, &x)| mu + gain * (x - (1.0 - t) * mu))
                    .collect(),
            );
            vars.push(c.variance * t * t / den);
        }
        (means, vars)
    }

    /// Draws one `x ~ p(x | x_t)`: component from the responsibilities, then
    /// the conjugate Gaussian. Requires `t > 0`.
    pub fn sample_posterior<R: Rng + ?Sized>(&self, rng: &mut R, x_t: &[f64], t: f64) -> Result<Vec<f64>> {
        check_time(t)?;
        self.check_point(x_t)?;
        if t == 0.0 {
            return Ok(x_t.to_vec());
        }
        let resp = self.responsibilities(x_t, t);
        let k = WeightedIndex::new(&resp).map_err(|e| numeric_err(e.to_string()))?.sample(rng);
        let (means, vars) = self.component_posteriors(x_t, t);
        let sd = vars[k].sqrt();
        Ok(means[k]
            .iter()
            .map(|&m| {
                let z: f64 = StandardNormal.sample(rng);
                m + sd * z
            })
            .collect())
    }

    /// `u_t(x_t) = E[ε − x | x_t]`; equals `−x_t` at `t = 0`.
    pub fn marginal_velocity(&self, x_t: &[f64], t: f64) -> Result<Vec<f64>> {
        check_time(t)?;
        self.check_point(x_t)?;
        let mut out = vec![0.0; self.dims()];
        self.marginal_velocity_into(x_t, t, &mut out);
        Ok(out)
    }

    /// Unchecked core of [`Self::marginal_velocity`]. Uses
    /// `(x_t − m_k)/t = ((t − (1 − t)σ²)x_t − tμ_k)/D_k`, which stays exact as
    /// `t → 0`.
    fn marginal_velocity_into(&self, x_t: &[f64], t: f64, out: &mut [f64]) {
        if t == 0.0 {
            for (o, &x) in out.iter_mut().zip(x_t) {
                *o = -x;
            }
            return;
        }
        let resp = self.responsibilities(x_t, t);
        out.iter_mut().for_each(|o| *o = 0.0);
        for (c, r) in self.components.iter().zip(resp) {
            if r == 0.0 {
                continue;
            }
            let den = (1.0 - t).powi(2) * c.variance + t * t;
            let a = (t - (1.0 - t) * c.variance) / den;
            let b = t / den;
            for ((o, &x), &mu) in out.iter_mut().zip(x_t).zip(&c.mean) {
                *o += r * (a * x - b * mu);
            }
        }
    }

    /// `Tr Σ_t(x_t)`, the trace of the conditional velocity covariance.
    /// At `t = 0` this is the noise covariance trace `d`.
    pub fn velocity_covariance(&self, x_t: &[f64], t: f64) -> Result<f64> {
        check_time(t)?;
        self.check_point(x_t)?;
        if t == 0.0 {
            return Ok(self.dims() as f64);
        }
        Ok(self.posterior_moments(x_t, t)?.covariance_trace / (t * t))
    }

    /// Integrates `dx/dτ = u_τ(x)` backward from `t` to `s` with classical RK4.
    pub fn reference_flow_map(&self, x_t: &[f64], s: f64, t: f64, n_steps: usize) -> Result<Vec<f64>> {
        check_time(s)?;
        check_time(t)?;
        self.check_point(x_t)?;
        if s > t {
            return Err(domain_err(format!("flow map needs s <= t, got s={s}, t={t}")));
        }
        if n_steps == 0 {
            return Err(domain_err("n_steps must be at least 1"));
        }
        let mut x = x_t.to_vec();
        if s == t {
            return Ok(x);
        }
        self.integrate(&mut x, t, s, n_steps)?;
        Ok(x)
    }

    /// States at `nodes + 1` uniformly spaced times from `t` down to `s`
    /// (index 0 is `x_t`), with `substeps` RK4 steps between nodes.
    pub fn reference_trajectory(
        &self,
        x_t: &[f64],
        s: f64,
        t: f64,
        nodes: usize,
        substeps: usize,
    ) -> Result<Vec<Vec<f64>>> {
        check_time(s)?;
        check_time(t)?;
        self.check_point(x_t)?;
        if s > t || nodes == 0 || substeps == 0 {
            return Err(domain_err("trajectory needs s <= t and positive node/substep counts"));
        }
        let mut out = Vec::with_capacity(nodes + 1);
        let mut x = x_t.to_vec();
        out.push(x.clone());
        let h = (t - s) / nodes as f64;
        for j in 0..nodes {
            let from = t - j as f64 * h;
            let to = if j + 1 == nodes { s } else { t - (j + 1) as f64 * h };
            self.integrate(&mut x, from, to, substeps)?;
            out.push(x.clone());
        }
        Ok(out)
    }

    fn integrate(&self, x: &mut [f64], from: f64, to: f64, n_steps: usize) -> Result<()> {
        let d = x.len();
        let h = (from - to) / n_steps as f64;
        let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]);
        let mut tmp = vec![0.0; d];
        for i in 0..n_steps {
            let tau = from - i as f64 * h;
            let end = if i + 1 == n_steps { to } else { tau - h };
            let mid = tau - 0.5 * h;
            self.marginal_velocity_into(x, tau, &mut k1);
            axpy_into(&mut tmp, x, -0.5 * h, &k1);
            self.marginal_velocity_into(&tmp, mid, &mut k2);
            axpy_into(&mut tmp, x, -0.5 * h, &k2);
            self.marginal_velocity_into(&tmp, mid, &mut k3);
            axpy_into(&mut tmp, x, -h, &k3);
            self.marginal_velocity_into(&tmp, end.max(0.0), &mut k4);
            for j in 0..d {
                x[j] -= h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(numeric_err(format!("reference trajectory diverged at τ = {tau}")));
            }
        }
        Ok(())
    }

    /// `(x_t − Φ(x_t, s, t))/(t − s)`, requires `s < t`.
    pub fn average_velocity_oracle(&self, x_t: &[f64], s: f64, t: f64, n_steps: usize) -> Result<Vec<f64>> {
        if !(s < t) {
            return Err(domain_err("average velocity needs s < t; use marginal_velocity at s = t"));
        }
        let end = self.reference_flow_map(x_t, s, t, n_steps)?;
        Ok(x_t.iter().zip(&end).map(|(a, b)| (a - b) / (t - s)).collect())
    }

    /// `p_t(x_t)`, the density of the interpolant at time `t`.
    pub fn marginal_density(&self, x_t: &[f64], t: f64) -> f64 {
        let d = self.dims() as f64;
        self.components
            .iter()
            .map(|c| {
                let var = (1.0 - t).powi(2) * c.variance + t * t;
                let dist = sq_dist(x_t, &c.mean, 1.0 - t);
                c.weight * (-0.5 * dist / var).exp() / (std::f64::consts::TAU * var).powf(0.5 * d)
            })
            .sum()
    }

    /// `E_{x_t ~ p_t}[Tr Σ_t(x_t)]` by trapezoidal quadrature on a tensor grid
    /// with `grid` nodes per axis (supports `d ≤ 2`).
    pub fn expected_velocity_variance(&self, t: f64, grid: usize) -> Result<f64> {
        check_time(t)?;
        if t == 0.0 {
            return Ok(self.dims() as f64);
        }
        let d = self.dims();
        if d > 2 {
            return Err(dim_err("quadrature oracle supports at most two dimensions"));
        }
        // Grid covers every component's interpolant to ±10 standard deviations.
        let half = self
            .components
            .iter()
            .map(|c| {
                let sd = ((1.0 - t).powi(2) * c.variance + t * t).sqrt();
                c.mean.iter().map(|m| ((1.0 - t) * m).abs()).fold(0.0, f64::max) + 10.0 * sd
            })
            .fold(0.0, f64::max);
        let h = 2.0 * half / (grid - 1) as f64;
        let node = |i: usize| -half + i as f64 * h;
        let mut acc = 0.0;
        let mut point = vec![0.0; d];
        let total = grid.pow(d as u32);
        for flat in 0..total {
            let mut rem = flat;
            let mut w = 1.0;
            for p in point.iter_mut() {
                let i = rem % grid;
                rem /= grid;
                *p = node(i);
                if i == 0 || i == grid - 1 {
                    w *= 0.5;
                }
            }
            let dens = self.marginal_density(&point, t);
            if dens < 1e-300 {
                continue;
            }
            acc += w * dens * self.velocity_covariance(&point, t)?;
        }
        Ok(acc * h.powi(d as i32))
    }
}

fn axpy_into(out: &mut [f64], x: &[f64], k: f64, y: &[f64]) {
    for ((o, &a), &b) in out.iter_mut().zip(x).zip(y) {
        *o = a + k * b;
    }
}

/// The analytic average-velocity field packaged as a [`VelocityField`]:
/// `F(x_t, s, t) = u_avg(x_t, s, t)` and `F(x_t, t, t) = u_t(x_t)`.
///
/// Labels and guidance scales are ignored. The directional derivative is a
/// central finite difference, so this stub belongs with test oracles rather
/// than with the differentiable networks.
#[derive(Clone, Debug)]
pub struct OracleField {
    pub spec: MixtureSpec,
    pub n_steps: usize,
    pub fd_step: f64,
}

impl OracleField {
    pub fn new(spec: MixtureSpec) -> Self {
        Self { spec, n_steps: REFERENCE_STEPS, fd_step: 1e-5 }
    }

    fn eval_row(&self, x: &[f64], s: f64, t: f64) -> Result<Vec<f64>> {
        if s == t {
            self.spec.marginal_velocity(x, t)
        } else {
            self.spec.average_velocity_oracle(x, s, t, self.n_steps)
        }
    }
}

impl VelocityField<f64> for OracleField {
    fn dim(&self) -> usize {
        self.spec.dims()
    }

    fn eval(&self, x: &Tensor<f64>, cond: &Conditioning<f64>) -> Result<Tensor<f64>> {
        cond.check_rows(x.rows())?;
        let mut data = Vec::with_capacity(x.len());
        for i in 0..x.rows() {
            data.extend(self.eval_row(x.row(i), cond.s[i], cond.t[i])?);
        }
        Tensor::new(vec![x.rows(), x.cols()], data)
    }

    fn eval_jvp(
        &self,
        x: &Tensor<f64>,
        cond: &Conditioning<f64>,
        dir_x: &Tensor<f64>,
        dir_t: &[f64],
    ) -> Result<(Tensor<f64>, Tensor<f64>)> {
        cond.check_rows(x.rows())?;
        let value = self.eval(x, cond)?;
        let h = self.fd_step;
        let mut deriv = Vec::with_capacity(x.len());
        for i in 0..x.rows() {
            let (s, t, dt) = (cond.s[i], cond.t[i], dir_t[i]);
            let at = |sign: f64| -> Result<Vec<f64>> {
                let xi: Vec<f64> = x.row(i).iter().zip(dir_x.row(i)).map(|(a, v)| a + sign * h * v).collect();
                self.eval_row(&xi, s, (t + sign * h * dt).min(1.0))
            };
            let plus = at(1.0)?;
            // s is held fixed, so a backward step in t is only allowed while t − h > s.
            if t - h * dt.abs() > s {
                let minus = at(-1.0)?;
                deriv.extend(plus.iter().zip(&minus).map(|(a, b)| (a - b) / (2.0 * h)));
            } else {
                deriv.extend(plus.iter().zip(value.row(i)).map(|(a, b)| (a - b) / h));
            }
        }
        Ok((value, Tensor::new(vec![x.rows(), x.cols()], deriv)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn weights_must_sum_to_one() {
        let bad = MixtureSpec::new(vec![MixtureComponent { weight: 0.7, mean: vec![0.0], variance: 1.0, label: None }]);
        assert!(bad.is_err());
    }

    #[test]
    fn endpoint_posteriors() {
        let spec = MixtureSpec::pair_1d(1.5, 0.2).unwrap();
        let p0 = spec.posterior_moments(&[0.7], 0.0).unwrap();
        assert_eq!(p0.mean, vec![0.7]);
        assert_eq!(p0.covariance_trace, 0.0);
        let p1 = spec.posterior_moments(&[0.7], 1.0).unwrap();
        assert!((p1.mean[0] - 0.0).abs() < 1e-15);
        for r in &p1.responsibilities {
            assert!((r - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn marginal_velocity_boundary_and_symmetry() {
        let spec = MixtureSpec::pair_1d(1.0, 0.3).unwrap();
        assert_eq!(spec.marginal_velocity(&[0.4], 0.0).unwrap(), vec![-0.4]);
        let g = MixtureSpec::gaussian(vec![0.0, 0.0], 1.0).unwrap();
        let u = g.marginal_velocity(&[1.3, -0.2], 0.5).unwrap();
        assert!(u.iter().all(|v| v.abs() < 1e-15));
        assert!(spec.marginal_velocity(&[0.0], 1.2).is_err());
    }

    #[test]
    fn velocity_covariance_cases() {
        let spec = MixtureSpec::square_2d(1.0, 0.1).unwrap();
        assert_eq!(spec.velocity_covariance(&[0.3, 0.3], 0.0).unwrap(), 2.0);
        let dirac = MixtureSpec::dirac(vec![0.5]).unwrap();
        for t in [0.01, 0.3, 1.0] {
            assert_eq!(dirac.velocity_covariance(&[0.2], t).unwrap(), 0.0);
        }
    }

    #[test]
    fn flow_map_empty_interval_and_errors() {
        let spec = MixtureSpec::pair_1d(1.0, 0.3).unwrap();
        assert_eq!(spec.reference_flow_map(&[0.3], 0.4, 0.4, 8).unwrap(), vec![0.3]);
        assert!(spec.reference_flow_map(&[0.3], 0.5, 0.4, 8).is_err());
        assert!(spec.average_velocity_oracle(&[0.3], 0.4, 0.4, 8).is_err());
    }

    #[test]
    fn degenerate_samples_sit_on_the_mean() {
        let spec = MixtureSpec::gaussian(vec![1.0, -2.0], 1e-12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (x, _) = spec.sample_data(&mut rng, 1000);
        for r in x.iter_rows() {
            assert!((r[0] - 1.0).abs() < 1e-5 && (r[1] + 2.0).abs() < 1e-5);
        }
    }

    #[test]
    fn trajectory_endpoints_match_flow_map() {
        let spec = MixtureSpec::ring(4, 1.0, 0.1, false).unwrap();
        let traj = spec.reference_trajectory(&[0.2, 0.9], 0.1, 0.8, 7, 64).unwrap();
        assert_eq!(traj.len(), 8);
        let end = spec.reference_flow_map(&[0.2, 0.9], 0.1, 0.8, 7 * 64).unwrap();
        for (a, b) in traj[7].iter().zip(&end) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}
