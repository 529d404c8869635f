use rand::Rng;

use super::decomposition::flow_map_derivative;
use super::{Assertion, CheckReport, DiagnosticsRecord, MeanEstimate, CHUNK};
use crate::error::{dim_err, domain_err, Result};
use crate::network::{Conditioning, VelocityField};
use crate::objectives::flowconsist_target;
use crate::oracle::{MixtureSpec, REFERENCE_STEPS};
use crate::sampler::draw_noise;
use crate::tensor::Tensor;

/// Both evaluations of the endpoint error at one `(x_t, s, t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Theorem3Point {
    pub s: f64,
    pub t: f64,
    /// `f_θ(x_t, s, t) − Φ(x_t, s, t)`.
    pub direct: Vec<f64>,
    /// Composite Simpson quadrature of `R(r) = ∂_r f(x_r, s, r)` along the
    /// marginal trajectory through `x_t`.
    pub integral: Vec<f64>,
}

impl Theorem3Point {
    pub fn abs_gap(&self) -> f64 {
        self.direct.iter().zip(&self.integral).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
    }

    pub fn direct_norm(&self) -> f64 {
        self.direct.iter().map(|a| a * a).sum::<f64>().sqrt()
    }

    pub fn rel_gap(&self) -> f64 {
        self.abs_gap() / self.direct_norm().max(f64::MIN_POSITIVE)
    }
}

/// Endpoint error of `f_θ` at one point, computed directly and as the
/// integral of its rate along the reference trajectory. `n_quad` must be even.
pub fn theorem3_point<F: VelocityField<f64> + ?Sized>(
    spec: &MixtureSpec,
    f: &F,
    x_t: &[f64],
    s: f64,
    t: f64,
    n_quad: usize,
) -> Result<Theorem3Point> {
    if !(s <= t) {
        return Err(domain_err(format!("error dynamics need s ≤ t, got s = {s}, t = {t}")));
    }
    if n_quad == 0 || n_quad % 2 != 0 {
        return Err(domain_err("Simpson quadrature needs an even, positive node count"));
    }
    let d = spec.dims();
    if s == t {
        return Ok(Theorem3Point { s, t, direct: vec![0.0; d], integral: vec![0.0; d] });
    }
    let x = Tensor::new(vec![1, d], x_t.to_vec())?;
    let fx = f.eval(&x, &Conditioning::uniform(1, s, t, None, 1.0))?;
    let end = spec.reference_flow_map(x_t, s, t, REFERENCE_STEPS)?;
    let direct: Vec<f64> = (0..d).map(|j| x_t[j] - (t - s) * fx.data()[j] - end[j]).collect();

    let substeps = REFERENCE_STEPS.div_ceil(n_quad);
    let traj = spec.reference_trajectory(x_t, s, t, n_quad, substeps)?;
    let h = (t - s) / n_quad as f64;
    let times: Vec<f64> = (0..=n_quad).map(|j| if j == n_quad { s } else { t - j as f64 * h }).collect();
    let mut states = Vec::with_capacity((n_quad + 1) * d);
    let mut vel = Vec::with_capacity((n_quad + 1) * d);
    for (xr, &r) in traj.iter().zip(&times) {
        states.extend_from_slice(xr);
        vel.extend(spec.marginal_velocity(xr, r)?);
    }
    let states = Tensor::new(vec![n_quad + 1, d], states)?;
    let vel = Tensor::new(vec![n_quad + 1, d], vel)?;
    let cond = Conditioning { s: vec![s; n_quad + 1], t: times, labels: vec![None; n_quad + 1], omega: vec![1.0; n_quad + 1] };
    let rate = flow_map_derivative(f, &states, &cond, &vel, 1.0)?;
    let mut integral = vec![0.0; d];
    for j in 0..=n_quad {
        let w = if j == 0 || j == n_quad {
            1.0
        } else if j % 2 == 1 {
            4.0
        } else {
            2.0
        };
        for (acc, &v) in integral.iter_mut().zip(rate.row(j)) {
            *acc += w * v;
        }
    }
    integral.iter_mut().for_each(|v| *v *= h / 3.0);
    Ok(Theorem3Point { s, t, direct, integral })
}

/// [`theorem3_point`] at `n_triples` random forward-process points with
/// `t ~ U(0.05, 1]`, `s = t·U[0, 0.9)`. Asserts agreement within `rel_tol`
/// relative to the direct error (plus an absolute floor of `1e-9`).
pub fn theorem3_check<F: VelocityField<f64> + ?Sized, R: Rng + ?Sized>(
    spec: &MixtureSpec,
    f: &F,
    rng: &mut R,
    n_triples: usize,
    n_quad: usize,
    rel_tol: f64,
) -> Result<(CheckReport, Vec<Theorem3Point>)> {
    let d = spec.dims();
    let (xs, _) = spec.sample_data(rng, n_triples);
    let eps = draw_noise::<f64, _>(rng, n_triples, d);
    let mut report = CheckReport::default();
    let mut points = Vec::with_capacity(n_triples);
    for (i, (x, e)) in xs.iter_rows().zip(eps.iter_rows()).enumerate() {
        let t = 0.05 + 0.95 * (1.0 - rng.gen::<f64>());
        let s = t * 0.9 * rng.gen::<f64>();
        let x_t: Vec<f64> = x.iter().zip(e).map(|(a, b)| (1.0 - t) * a + t * b).collect();
        let p = theorem3_point(spec, f, &x_t, s, t, n_quad)?;
        report.records.push(DiagnosticsRecord::exact("thm3_direct_norm", i as f64, p.direct_norm()));
        report.records.push(DiagnosticsRecord::exact("thm3_abs_gap", i as f64, p.abs_gap()));
        report.records.push(DiagnosticsRecord::exact("thm3_rel_gap", i as f64, p.rel_gap()));
        let ok = p.abs_gap() <= rel_tol * p.direct_norm() + 1e-9;
        report.assertions.push(Assertion::new(
            format!("direct and integrated error agree (point {i}, s = {s:.3}, t = {t:.3})"),
            ok,
            format!("gap {:.3e}, |e| {:.3e}", p.abs_gap(), p.direct_norm()),
        ));
        points.push(p);
    }
    Ok((report, points))
}

/// Single-jump versus multi-step accumulation along the trajectory. For each
/// `t`: `accumulation_rel_error` is `sqrt(Σ‖f_θ(x_t, 0, t) − x_E‖² / Σ‖x_E‖²)`
/// with `x_E` the Euler solution of `dx/dτ = F(x, τ, τ)` from `t` to 0
/// (`⌈euler_steps·t⌉` steps); `accumulation_target_norm` is the mean norm of
/// the consistency target at `s = 0` with plain conditional velocity. Points
/// `x_t` are built from one shared set of data/noise pairs.
pub fn accumulation_experiment<F: VelocityField<f64> + ?Sized, R: Rng + ?Sized>(
    spec: &MixtureSpec,
    f: &F,
    t_grid: &[f64],
    rng: &mut R,
    n: usize,
    euler_steps: usize,
) -> Result<CheckReport> {
    if f.dim() != spec.dims() {
        return Err(dim_err("network and mixture dimensions differ"));
    }
    if let Some(t) = t_grid.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(domain_err(format!("grid time {t} outside [0, 1]")));
    }
    let d = spec.dims();
    let (xs, labels) = spec.sample_data(rng, n);
    let labels: Vec<Option<usize>> = labels.iter().map(|_| None).collect();
    let eps = draw_noise::<f64, _>(rng, n, d);
    let mut report = CheckReport::default();
    for &t in t_grid {
        let (mut a, mut b, mut norms) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        for start in (0..n).step_by(CHUNK) {
            let idx: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
            let m = idx.len();
            let x = xs.select_rows(&idx);
            let e = eps.select_rows(&idx);
            let x_t = crate::schedule::interpolate(&x, &e, t)?;
            let cond = Conditioning { s: vec![0.0; m], t: vec![t; m], labels: idx.iter().map(|&i| labels[i]).collect(), omega: vec![1.0; m] };
            let single = x_t.axpy(-t, &f.eval(&x_t, &cond)?)?;
            let steps = ((euler_steps as f64 * t).ceil() as usize).max(1);
            let dt = t / steps as f64;
            let mut xe = x_t.clone();
            for k in 0..steps {
                let tau = t - k as f64 * dt;
                let c = Conditioning::uniform(m, tau, tau, None, 1.0);
                xe = xe.axpy(-dt, &f.eval(&xe, &c)?)?;
            }
            a.extend(single.sub(&xe)?.row_sq_norms());
            b.extend(xe.row_sq_norms());
            let v = e.sub(&x)?;
            let target = flowconsist_target(f, &x_t, &cond, &v)?;
            norms.extend(target.row_sq_norms().into_iter().map(f64::sqrt));
        }
        let ma = a.iter().sum::<f64>() / n as f64;
        let mb = b.iter().sum::<f64>() / n as f64;
        let ratio = ma / mb.max(f64::MIN_POSITIVE);
        // Delta-method standard error of the ratio, then of its square root.
        let lin: Vec<f64> = a.iter().zip(&b).map(|(ai, bi)| ai - ratio * bi).collect();
        let se_ratio = MeanEstimate::of(&lin).std_err / mb.max(f64::MIN_POSITIVE);
        let rel = ratio.sqrt();
        let se_rel = if rel > 0.0 { se_ratio / (2.0 * rel) } else { 0.0 };
        report.records.push(DiagnosticsRecord::estimate(
            "accumulation_rel_error",
            t,
            MeanEstimate { mean: rel, std_err: se_rel, n },
        ));
        report.records.push(DiagnosticsRecord::estimate("accumulation_target_norm", t, MeanEstimate::of(&norms)));
    }
    Ok(report)
}
