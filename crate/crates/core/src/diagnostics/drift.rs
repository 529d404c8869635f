use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Assertion, CheckReport, DiagnosticsRecord, MeanEstimate};
use crate::error::{domain_err, Result};
use crate::oracle::{MixtureSpec, REFERENCE_STEPS};

fn noise<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

fn per_dim_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Conditional-path drift. For each sampled pair `(x, ε)` and grid time `t`:
/// `drift_path_mse` is the per-dimension MSE between `x` and the endpoint of
/// the marginal trajectory through `x_t`; `drift_velocity_mse` is the
/// per-dimension MSE between `u_t(x_t)` and `v_t`. The same pairs are used at
/// every `t`.
pub fn drift_experiment<R: Rng + ?Sized>(
    spec: &MixtureSpec,
    rng: &mut R,
    t_grid: &[f64],
    n_paths: usize,
) -> Result<CheckReport> {
    if let Some(t) = t_grid.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(domain_err(format!("grid time {t} outside [0, 1]")));
    }
    let d = spec.dims();
    let (xs, _) = spec.sample_data(rng, n_paths);
    let eps: Vec<Vec<f64>> = (0..n_paths).map(|_| noise(rng, d)).collect();
    let mut report = CheckReport::default();
    let mut path_means = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        let mut path = Vec::with_capacity(n_paths);
        let mut vel = Vec::with_capacity(n_paths);
        for (x, e) in xs.iter_rows().zip(&eps) {
            let x_t: Vec<f64> = x.iter().zip(e).map(|(a, b)| (1.0 - t) * a + t * b).collect();
            let end = spec.reference_flow_map(&x_t, 0.0, t, REFERENCE_STEPS)?;
            path.push(per_dim_sq(&end, x));
            let u = spec.marginal_velocity(&x_t, t)?;
            let v: Vec<f64> = e.iter().zip(x).map(|(a, b)| a - b).collect();
            vel.push(per_dim_sq(&u, &v));
        }
        let p = MeanEstimate::of(&path);
        let v = MeanEstimate::of(&vel);
        path_means.push(p.mean);
        report.records.push(DiagnosticsRecord::estimate("drift_path_mse", t, p));
        report.records.push(DiagnosticsRecord::estimate("drift_velocity_mse", t, v));
        if t == 0.0 {
            report.assertions.push(Assertion::new("path MSE is zero at t = 0", p.mean == 0.0, format!("{:.3e}", p.mean)));
            report.assertions.push(Assertion::within_band("velocity MSE is 1 at t = 0", v.mean - 1.0, v.std_err, 3.0));
        }
    }
    let monotone = path_means.windows(2).all(|w| w[1] >= w[0]);
    if !spec.is_degenerate() {
        report.assertions.push(Assertion::new(
            "path MSE nondecreasing in t",
            monotone,
            format!("{path_means:.4?}"),
        ));
    }
    Ok(report)
}

/// `Tr Σ_t(x_t)` at `n_points` forward-process draws with `t ∈ (0, 1]`, and at
/// `t = 0`. Non-degenerate specs must give strictly positive traces and `d`
/// at `t = 0`; a point-mass spec must give zero for `t > 0`.
pub fn theorem1_check<R: Rng + ?Sized>(spec: &MixtureSpec, rng: &mut R, n_points: usize) -> Result<CheckReport> {
    let d = spec.dims();
    let (xs, _) = spec.sample_data(rng, n_points);
    let mut traces = Vec::with_capacity(n_points);
    let mut at_zero = Vec::with_capacity(n_points);
    for x in xs.iter_rows() {
        let e = noise(rng, d);
        let t = 1.0 - rng.gen::<f64>();
        let x_t: Vec<f64> = x.iter().zip(&e).map(|(a, b)| (1.0 - t) * a + t * b).collect();
        traces.push(spec.velocity_covariance(&x_t, t)?);
        at_zero.push(spec.velocity_covariance(x, 0.0)?);
    }
    let mut report = CheckReport::default();
    let min = traces.iter().copied().fold(f64::INFINITY, f64::min);
    let max = traces.iter().copied().fold(0.0, f64::max);
    report.records.push(DiagnosticsRecord::exact("thm1_min_trace", 1.0, min));
    report.records.push(DiagnosticsRecord::exact("thm1_max_trace", 1.0, max));
    report.records.push(DiagnosticsRecord::estimate("thm1_mean_trace", 1.0, MeanEstimate::of(&traces)));
    let zero_ok = at_zero.iter().all(|&v| v == d as f64);
    report.records.push(DiagnosticsRecord::exact("thm1_trace_t0", 0.0, at_zero.first().copied().unwrap_or(d as f64)));
    report.assertions.push(Assertion::new("trace equals d at t = 0", zero_ok, format!("d = {d}")));
    if spec.is_degenerate() {
        let zero = traces.iter().all(|&v| v == 0.0);
        report.assertions.push(Assertion::new("point-mass spec has zero covariance", zero, format!("max {max:.3e}")));
    } else {
        let positive = traces.iter().filter(|&&v| v > 0.0).count();
        report.assertions.push(Assertion::new(
            "trace positive at every sampled point",
            positive == n_points,
            format!("{positive}/{n_points} positive, min {min:.3e}"),
        ));
    }
    Ok(report)
}
