use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Assertion, CheckReport, DiagnosticsRecord, MeanEstimate, CHUNK};
use crate::error::{dim_err, Result};
use crate::network::{Conditioning, VelocityField};
use crate::oracle::MixtureSpec;
use crate::tensor::Tensor;

/// Monte Carlo points shared by every estimate of one check.
struct Points {
    x_t: Tensor<f64>,
    /// Conditional velocity `ε − x`.
    v: Tensor<f64>,
    /// Marginal velocity `u_t(x_t)`.
    u: Tensor<f64>,
    /// `(E[x | x_t] − x′)/t` for a posterior draw `x′`: a zero-mean draw with
    /// covariance `Σ_t(x_t)`.
    w: Tensor<f64>,
    cond: Conditioning<f64>,
}

fn draw_points<R: Rng + ?Sized>(
    spec: &MixtureSpec,
    rng: &mut R,
    n: usize,
    mut times: impl FnMut(&mut R) -> (f64, f64),
) -> Result<Points> {
    let d = spec.dims();
    let (xs, _) = spec.sample_data(rng, n);
    let (mut x_t, mut v, mut u, mut w) =
        (Vec::with_capacity(n * d), Vec::with_capacity(n * d), Vec::with_capacity(n * d), Vec::with_capacity(n * d));
    let (mut s_all, mut t_all) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for x in xs.iter_rows() {
        let (s, t) = times(rng);
        let eps: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let xt: Vec<f64> = x.iter().zip(&eps).map(|(a, b)| (1.0 - t) * a + t * b).collect();
        v.extend(eps.iter().zip(x).map(|(a, b)| a - b));
        u.extend(spec.marginal_velocity(&xt, t)?);
        let mean = spec.posterior_moments(&xt, t)?.mean;
        let draw = spec.sample_posterior(rng, &xt, t)?;
        w.extend(mean.iter().zip(&draw).map(|(m, p)| (m - p) / t));
        x_t.extend(xt);
        s_all.push(s);
        t_all.push(t);
    }
    let shape = vec![n, d];
    Ok(Points {
        x_t: Tensor::new(shape.clone(), x_t)?,
        v: Tensor::new(shape.clone(), v)?,
        u: Tensor::new(shape.clone(), u)?,
        w: Tensor::new(shape, w)?,
        cond: Conditioning { s: s_all, t: t_all, labels: vec![None; n], omega: vec![1.0; n] },
    })
}

/// Per-row `Σ_j a_j²`.
fn row_sq(a: &Tensor<f64>) -> Vec<f64> {
    a.row_sq_norms()
}

fn chunks(n: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..n).step_by(CHUNK).map(move |start| (start..(start + CHUNK).min(n)).collect())
}

/// Directional derivative of the flow map `f = x − (t − s)F` along
/// `(dir, dir_t)`: `dir − dir_t·F − (t − s)·(∇F·dir + dir_t·∂ₜF)`.
pub(super) fn flow_map_derivative<F: VelocityField<f64> + ?Sized>(
    f: &F,
    x: &Tensor<f64>,
    cond: &Conditioning<f64>,
    dir: &Tensor<f64>,
    dir_t: f64,
) -> Result<Tensor<f64>> {
    let (value, jvp) = f.eval_jvp(x, cond, dir, &vec![dir_t; x.rows()])?;
    let span: Vec<f64> = cond.t.iter().zip(&cond.s).map(|(t, s)| t - s).collect();
    dir.sub(&value.scale(dir_t))?.sub(&jvp.scale_rows(&span)?)
}

/// Splits `E‖∇f·v + ∂ₜf‖²` into the consistency term with `u_t` and the
/// variance term `E Tr(∇f Σ_t ∇fᵀ)`, estimated on one shared sample stream.
/// Times are `t ~ U(0, 1]`, `s = t·U[0, 1)`.
pub fn theorem2_check<F: VelocityField<f64> + ?Sized, R: Rng + ?Sized>(
    spec: &MixtureSpec,
    f: &F,
    rng: &mut R,
    n_mc: usize,
) -> Result<CheckReport> {
    if f.dim() != spec.dims() {
        return Err(dim_err("network and mixture dimensions differ"));
    }
    let pts = draw_points(spec, rng, n_mc, |r| {
        let t = 1.0 - r.gen::<f64>();
        (t * r.gen::<f64>(), t)
    })?;
    let (mut cond_sq, mut consist_sq, mut var_sq) = (Vec::new(), Vec::new(), Vec::new());
    for idx in chunks(n_mc) {
        let x = pts.x_t.select_rows(&idx);
        let c = pts.cond.select(&idx);
        cond_sq.extend(row_sq(&flow_map_derivative(f, &x, &c, &pts.v.select_rows(&idx), 1.0)?));
        consist_sq.extend(row_sq(&flow_map_derivative(f, &x, &c, &pts.u.select_rows(&idx), 1.0)?));
        var_sq.extend(row_sq(&flow_map_derivative(f, &x, &c, &pts.w.select_rows(&idx), 0.0)?));
    }
    let residual: Vec<f64> = (0..n_mc).map(|i| cond_sq[i] - consist_sq[i] - var_sq[i]).collect();
    let (lc, lk, lv, res) =
        (MeanEstimate::of(&cond_sq), MeanEstimate::of(&consist_sq), MeanEstimate::of(&var_sq), MeanEstimate::of(&residual));
    let mut report = CheckReport::default();
    report.records.push(DiagnosticsRecord::estimate("thm2_l_cond", 0.0, lc));
    report.records.push(DiagnosticsRecord::estimate("thm2_l_consist", 0.0, lk));
    report.records.push(DiagnosticsRecord::estimate("thm2_l_var", 0.0, lv));
    report.records.push(DiagnosticsRecord::estimate("thm2_residual", 0.0, res));
    report.assertions.push(Assertion::within_band("L_cond − L_consist − L_var within 3 SE", res.mean, res.std_err, 3.0));
    if spec.is_degenerate() {
        report.assertions.push(Assertion::new("point-mass spec has L_var = 0", lv.mean == 0.0, format!("{:.3e}", lv.mean)));
        let rel = (lc.mean - lk.mean).abs() / lc.mean.abs().max(1e-300);
        report.assertions.push(Assertion::new("point-mass spec has L_cond = L_consist", rel < 1e-9, format!("relative {rel:.3e}")));
    }
    Ok(report)
}

/// Gap between the conditional-velocity objective
/// `‖F − v + (t−s)Ḟ(u)‖²` and the marginal-velocity objective
/// `‖F − u + (t−s)Ḟ(u)‖²` at fixed times `t_values` (`s = t·U[0, 1)`),
/// compared with the quadrature value of `E Tr Σ_t` and across parameter
/// sets on common points.
pub fn appendix_identity_check<F: VelocityField<f64> + ?Sized, R: Rng + ?Sized>(
    spec: &MixtureSpec,
    rng: &mut R,
    thetas: &[&F],
    n_mc: usize,
    t_values: &[f64],
    quad_grid: usize,
) -> Result<CheckReport> {
    if thetas.len() < 2 {
        return Err(dim_err("identity check needs at least two parameter sets"));
    }
    let mut report = CheckReport::default();
    for &t in t_values {
        let pts = draw_points(spec, rng, n_mc, |r| (t * r.gen::<f64>(), t))?;
        let quad = spec.expected_velocity_variance(t, quad_grid)?;
        report.records.push(DiagnosticsRecord::exact("appendix_quadrature_trace", t, quad));
        let mut gaps: Vec<Vec<f64>> = Vec::with_capacity(thetas.len());
        for (k, f) in thetas.iter().enumerate() {
            let (mut lv, mut lu) = (Vec::with_capacity(n_mc), Vec::with_capacity(n_mc));
            for idx in chunks(n_mc) {
                let x = pts.x_t.select_rows(&idx);
                let c = pts.cond.select(&idx);
                let u = pts.u.select_rows(&idx);
                let (value, jvp) = f.eval_jvp(&x, &c, &u, &vec![1.0; idx.len()])?;
                let span: Vec<f64> = c.t.iter().zip(&c.s).map(|(t, s)| t - s).collect();
                let b = value.sub(&u)?.add(&jvp.scale_rows(&span)?)?;
                lu.extend(row_sq(&b));
                lv.extend(row_sq(&b.add(&u)?.sub(&pts.v.select_rows(&idx))?));
            }
            let gap: Vec<f64> = lv.iter().zip(&lu).map(|(a, b)| a - b).collect();
            let est = MeanEstimate::of(&gap);
            report.records.push(DiagnosticsRecord::estimate(&format!("appendix_l_v_theta{k}"), t, MeanEstimate::of(&lv)));
            report.records.push(DiagnosticsRecord::estimate(&format!("appendix_l_u_theta{k}"), t, MeanEstimate::of(&lu)));
            report.records.push(DiagnosticsRecord::estimate(&format!("appendix_gap_theta{k}"), t, est));
            if spec.is_degenerate() {
                let worst = gap.iter().fold(0.0f64, |m, g| m.max(g.abs()));
                report.assertions.push(Assertion::new(
                    format!("point-mass gap vanishes (θ{k}, t = {t})"),
                    worst <= 1e-12,
                    format!("max |gap| {worst:.3e}"),
                ));
            } else {
                report.assertions.push(Assertion::within_band(
                    format!("gap matches E Tr Σ_t (θ{k}, t = {t})"),
                    est.mean - quad,
                    est.std_err,
                    3.0,
                ));
            }
            gaps.push(gap);
        }
        for k in 1..gaps.len() {
            for j in 0..k {
                let diff: Vec<f64> = gaps[k].iter().zip(&gaps[j]).map(|(a, b)| a - b).collect();
                let est = MeanEstimate::of(&diff);
                report.records.push(DiagnosticsRecord::estimate(&format!("appendix_paired_diff_{j}_{k}"), t, est));
                report.assertions.push(Assertion::within_band(
                    format!("gap independent of θ (θ{j} vs θ{k}, t = {t})"),
                    est.mean,
                    est.std_err,
                    3.0,
                ));
            }
        }
    }
    Ok(report)
}
