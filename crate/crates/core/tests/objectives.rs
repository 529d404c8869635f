use flowconsist::network::{
    warm_start_fake, ArchConfig, AverageVelocityNet, Conditioning, FakeVelocityNet, Layout, ModelParams, OutputInit,
    VelocityField,
};
use flowconsist::objectives::{
    consistency_loss, fm_loss, fm_loss_weighted, flowconsist_target, gpsi_loss, guided_velocity, kl_weight,
    meanflow_target, rectification_target, regression_grad, AdaptiveWeightConfig, FakeBatch, Objective,
    RectificationForm,
};
use flowconsist::sampler::draw_noise;
use flowconsist::schedule::{CouplingBatch, TimeSamplerConfig};
use flowconsist::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn arch() -> ArchConfig {
    ArchConfig { hidden: 24, depth: 2, embed_dim: 8, embed_hidden: 16, max_freq: 16.0 }
}

fn setup(seed: u64, n: usize, dim: usize, classes: usize) -> (ModelParams<f64>, CouplingBatch<f64>, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = ModelParams::init(&mut rng, Layout::average_velocity(dim, classes, &arch()), OutputInit::FanIn).unwrap();
    let x = draw_noise(&mut rng, n, dim);
    let eps = draw_noise(&mut rng, n, dim);
    let t: Vec<f64> = (0..n).map(|_| 1.0 - rng.gen::<f64>()).collect();
    let labels = (0..n).map(|i| if classes > 0 && i % 2 == 0 { Some(i % classes) } else { None }).collect();
    (params, CouplingBatch::new(x, eps, labels, t).unwrap(), rng)
}

fn diag(batch: &CouplingBatch<f64>) -> Conditioning<f64> {
    Conditioning { s: batch.t.clone(), t: batch.t.clone(), labels: batch.labels.clone(), omega: vec![1.0; batch.len()] }
}

#[test]
fn equal_times_reduce_to_flow_matching_bitwise() {
    for seed in 0..5 {
        let (params, batch, _) = setup(seed, 64, 2, 3);
        let f = AverageVelocityNet::new(&params);
        let cond = diag(&batch);
        for weighting in [AdaptiveWeightConfig::UNIFORM, AdaptiveWeightConfig::default()] {
            let fm = fm_loss_weighted(&f, &batch, &weighting).unwrap();
            for obj in [Objective::Meanflow, Objective::Flowconsist] {
                let l = consistency_loss(obj, &f, &batch, &cond, &batch.v_t, &weighting).unwrap();
                assert_eq!(l.loss.to_bits(), fm.loss.to_bits(), "{}", obj.name());
                assert_eq!(l.target, fm.target);
            }
        }
        assert_eq!(fm_loss(&f, &batch).unwrap().loss.to_bits(), fm_loss_weighted(&f, &batch, &AdaptiveWeightConfig::UNIFORM).unwrap().loss.to_bits());
    }
}

#[test]
fn meanflow_and_flowconsist_differ_by_spatial_jvp() {
    let (params, batch, mut rng) = setup(3, 32, 3, 0);
    let f = AverageVelocityNet::new(&params);
    let mut cond = diag(&batch);
    cond.s = cond.t.iter().map(|t| t * rng.gen::<f64>()).collect();
    let mf = meanflow_target(&f, &batch.x_t, &cond, &batch.v_t).unwrap();
    let fc = flowconsist_target(&f, &batch.x_t, &cond, &batch.v_t).unwrap();
    let u = f.eval(&batch.x_t, &cond.diagonal()).unwrap();
    let (_, grad) = f.eval_jvp(&batch.x_t, &cond, &batch.v_t.sub(&u).unwrap(), &vec![0.0; 32]).unwrap();
    let span: Vec<f64> = cond.t.iter().zip(&cond.s).map(|(t, s)| t - s).collect();
    let expect = grad.scale_rows(&span).unwrap().scale(-1.0);
    for (a, b) in mf.sub(&fc).unwrap().data().iter().zip(expect.data()) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn cm_prediction_starts_at_zero() {
    let (params, batch, _) = setup(4, 8, 2, 0);
    let f = AverageVelocityNet::new(&params);
    let cond = diag(&batch);
    let pc = Objective::Cm.prediction_conditioning(&cond);
    assert!(pc.s.iter().all(|&s| s == 0.0));
    assert_eq!(pc.t, cond.t);
    let direct = flowconsist_target(&f, &batch.x_t, &pc, &batch.v_t).unwrap();
    assert_eq!(Objective::Cm.target(&f, &batch.x_t, &cond, &batch.v_t).unwrap(), direct);
    assert_eq!(Objective::Fm.target(&f, &batch.x_t, &cond, &batch.v_t).unwrap(), batch.v_t);
}

#[test]
fn adaptive_weight_values() {
    let cfg = AdaptiveWeightConfig { p: 1.0, c: 1e-3 };
    let (params, batch, _) = setup(5, 16, 2, 0);
    let f = AverageVelocityNet::new(&params);
    let rep = fm_loss_weighted(&f, &batch, &cfg).unwrap();
    for (w, r) in rep.weights.iter().zip(&rep.residual_sq_norms) {
        assert!((w - 1.0 / (r + 1e-3)).abs() < 1e-12 * w);
    }
    let manual: f64 = rep.weights.iter().zip(&rep.residual_sq_norms).map(|(w, r)| w * r).sum::<f64>() / 16.0;
    assert!((rep.loss - manual).abs() < 1e-14);
    assert!(AdaptiveWeightConfig { p: -1.0, c: 1e-3 }.validate().is_err());
    assert!(AdaptiveWeightConfig { p: 1.0, c: 0.0 }.validate().is_err());
}

#[test]
fn regression_gradient_matches_difference_of_losses() {
    let (params, batch, mut rng) = setup(6, 8, 2, 0);
    let cond = diag(&batch);
    let weighting = AdaptiveWeightConfig::UNIFORM;
    let (_, cache) = AverageVelocityNet::new(&params).forward_taped(&batch.x_t, &cond).unwrap();
    let (report, grad) = regression_grad(&params, &cache, batch.v_t.clone(), &weighting).unwrap();
    let delta: Vec<f64> = (0..params.len()).map(|_| rng.gen::<f64>() - 0.5).collect();
    let h = 1e-5;
    let at = |sign: f64| {
        let flat: Vec<f64> = params.flat().iter().zip(&delta).map(|(p, d)| p + sign * h * d).collect();
        let p = ModelParams::from_flat(params.layout().clone(), flat).unwrap();
        fm_loss(&AverageVelocityNet::new(&p), &batch).unwrap().loss
    };
    let fd = (at(1.0) - at(-1.0)) / (2.0 * h);
    let an: f64 = grad.iter().zip(&delta).map(|(g, d)| g * d).sum();
    assert!((fd - an).abs() < 1e-6 * an.abs().max(1e-8));
    assert_eq!(report.loss, fm_loss(&AverageVelocityNet::new(&params), &batch).unwrap().loss);
}

#[test]
fn kl_weight_values_and_domain() {
    assert_eq!(kl_weight(1.0f64).unwrap(), 0.0);
    assert_eq!(kl_weight(0.5f64).unwrap(), -1.0);
    assert!((kl_weight(0.25f64).unwrap() + 3.0).abs() < 1e-15);
    assert!(kl_weight(0.0f64).is_err());
    assert!(kl_weight(1.5f64).is_err());
}

#[test]
fn gpsi_loss_of_zero_field_is_target_energy() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let g = ModelParams::<f64>::init(&mut rng, Layout::fake_velocity(2, 0, &arch()), OutputInit::Zero).unwrap();
    let x0 = draw_noise(&mut rng, 10, 2);
    let eps = draw_noise(&mut rng, 10, 2);
    let fake = FakeBatch::from_parts(x0.clone(), eps.clone(), vec![0.3; 10], vec![0.8; 10], vec![None; 10]).unwrap();
    let rep = gpsi_loss(&FakeVelocityNet::new(&g), &fake).unwrap();
    let energy = eps.sub(&x0).unwrap().row_sq_norms().iter().sum::<f64>() / 10.0;
    assert!((rep.loss - energy).abs() < 1e-14);
    let expect = x0.scale(0.7).add(&eps.scale(0.3)).unwrap();
    for (a, b) in fake.x_noised.data().iter().zip(expect.data()) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn rectification_targets_with_matched_fake_field() {
    let (params, batch, mut rng) = setup(8, 16, 2, 0);
    let g = warm_start_fake(&mut rng, &params, Layout::fake_velocity(2, 0, &arch())).unwrap();
    let f = AverageVelocityNet::new(&params);
    let g = FakeVelocityNet::new(&g);
    let cond = diag(&batch);
    let fake = FakeBatch::generate(&f, &batch.x_t, &cond, &TimeSamplerConfig::default(), &mut rng).unwrap();
    // x_0^t = x_t − t F(x_t, 0, t)
    let start = cond.with_s(vec![0.0; 16]);
    let expect = batch.x_t.sub(&f.eval(&batch.x_t, &start).unwrap().scale_rows(&cond.t).unwrap()).unwrap();
    assert_eq!(fake.x0, expect);

    let (pred, lit) = rectification_target(&f, &g, &batch.x_t, &cond, &fake, RectificationForm::Literal).unwrap();
    assert!(lit.data().iter().all(|v| v.abs() < 1e-12));
    let (_, dmd) = rectification_target(&f, &g, &batch.x_t, &cond, &fake, RectificationForm::Dmd).unwrap();
    for (a, b) in dmd.data().iter().zip(pred.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn guidance_only_touches_eligible_rows() {
    let (params, batch, _) = setup(9, 6, 2, 3);
    let f = AverageVelocityNet::new(&params);
    let mut cond = diag(&batch);
    cond.t = vec![0.2, 0.2, 0.9, 0.5, 0.5, 0.3];
    cond.s = cond.t.clone();
    cond.labels = vec![Some(0), None, Some(1), Some(2), Some(1), Some(0)];
    cond.omega = vec![2.0, 2.0, 2.0, 1.0, 3.0, 4.0];
    let x_t = batch.x_t.clone();
    let out = guided_velocity(&f, &x_t, &batch.v_t, &cond, [0.0, 0.75]).unwrap();
    // unlabeled, outside the interval, and ω = 1 rows are untouched
    for i in [1, 2, 3] {
        assert_eq!(out.row(i), batch.v_t.row(i));
    }
    for i in [0, 4, 5] {
        let sub = cond.select(&[i]);
        let xi = x_t.select_rows(&[i]);
        let fc = f.eval(&xi, &sub).unwrap();
        let fu = f.eval(&xi, &sub.with_labels(vec![None])).unwrap();
        let k = 1.0 - 1.0 / cond.omega[i];
        for j in 0..2 {
            let expect = batch.v_t.row(i)[j] + k * (fc.row(0)[j] - fu.row(0)[j]);
            assert!((out.row(i)[j] - expect).abs() < 1e-14);
        }
    }
}

#[test]
fn mismatched_shapes_are_rejected() {
    let (params, batch, _) = setup(10, 4, 2, 0);
    let f = AverageVelocityNet::new(&params);
    let cond = diag(&batch);
    let bad: Tensor<f64> = Tensor::zeros(vec![4, 3]);
    assert!(meanflow_target(&f, &batch.x_t, &cond, &bad).is_err());
    assert!(f.eval(&batch.x_t, &cond.select(&[0, 1])).is_err());
    let mut backwards = cond.clone();
    backwards.s = vec![0.9; 4];
    backwards.t = vec![0.1; 4];
    assert!(f.eval(&batch.x_t, &backwards).is_err());
}
