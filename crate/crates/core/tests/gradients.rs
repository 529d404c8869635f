use flowconsist::network::{
    ArchConfig, AverageVelocityNet, Conditioning, FakeVelocityNet, AuxConditioning, Layout, ModelParams, OutputInit,
    VelocityField, FakeVelocityField,
};
use flowconsist::sampler::draw_noise;
use flowconsist::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;

fn small_arch() -> ArchConfig {
    ArchConfig { hidden: 16, depth: 2, embed_dim: 8, embed_hidden: 8, max_freq: 8.0 }
}

fn random_cond(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Conditioning<f64> {
    let mut s = Vec::with_capacity(n);
    let mut t = Vec::with_capacity(n);
    for _ in 0..n {
        // keep t away from 1 so the central difference in t stays in range
        let tt = 0.05 + 0.9 * rng.gen::<f64>();
        t.push(tt);
        s.push(tt * rng.gen::<f64>() * 0.9);
    }
    let labels = (0..n).map(|_| if classes > 0 && rng.gen::<bool>() { Some(rng.gen_range(0..classes)) } else { None }).collect();
    let omega = (0..n).map(|_| 1.0 + 3.0 * rng.gen::<f64>()).collect();
    Conditioning { s, t, labels, omega }
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-12)
}

fn net(rng: &mut ChaCha8Rng, dim: usize, classes: usize) -> ModelParams<f64> {
    let layout = Layout::average_velocity(dim, classes, &small_arch());
    ModelParams::init(rng, layout, OutputInit::FanIn).unwrap()
}

#[test]
fn jvp_matches_central_difference() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for draw in 0..100 {
        let dim = 1 + draw % 3;
        let params = net(&mut rng, dim, 3);
        let f = AverageVelocityNet::new(&params);
        let n = 4;
        let x: Tensor<f64> = draw_noise(&mut rng, n, dim);
        let dir: Tensor<f64> = draw_noise(&mut rng, n, dim);
        let cond = random_cond(&mut rng, n, 3);
        let dt: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let (_, jvp) = f.eval_jvp(&x, &cond, &dir, &dt).unwrap();
        let shift = |sign: f64| {
            let xs = x.axpy(sign * H, &dir).unwrap();
            let mut c = cond.clone();
            for (ti, d) in c.t.iter_mut().zip(&dt) {
                *ti += sign * H * d;
            }
            f.eval(&xs, &c).unwrap()
        };
        let fd: Vec<f64> = shift(1.0).data().iter().zip(shift(-1.0).data()).map(|(a, b)| (a - b) / (2.0 * H)).collect();
        worst = worst.max(rel(jvp.data(), &fd));
    }
    assert!(worst < 1e-5, "worst relative error {worst:.3e}");
}

#[test]
fn backward_matches_central_difference() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst: f64 = 0.0;
    for draw in 0..100 {
        let dim = 1 + draw % 3;
        let params = net(&mut rng, dim, 2);
        let n = 3;
        let x: Tensor<f64> = draw_noise(&mut rng, n, dim);
        let cond = random_cond(&mut rng, n, 2);
        let cot: Tensor<f64> = draw_noise(&mut rng, n, dim);
        let (_, cache) = AverageVelocityNet::new(&params).forward_taped(&x, &cond).unwrap();
        let (grad, dx) = params.backward(&cache, &cot).unwrap();

        let delta: Vec<f64> = (0..params.len()).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let loss_at = |sign: f64| {
            let flat: Vec<f64> = params.flat().iter().zip(&delta).map(|(p, d)| p + sign * H * d).collect();
            let p = ModelParams::from_flat(params.layout().clone(), flat).unwrap();
            let out = AverageVelocityNet::new(&p).eval(&x, &cond).unwrap();
            out.data().iter().zip(cot.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let fd = (loss_at(1.0) - loss_at(-1.0)) / (2.0 * H);
        let analytic: f64 = grad.iter().zip(&delta).map(|(g, d)| g * d).sum();
        worst = worst.max(rel(&[analytic], &[fd]));

        let dir: Tensor<f64> = draw_noise(&mut rng, n, dim);
        let f = AverageVelocityNet::new(&params);
        let at = |sign: f64| {
            let out = f.eval(&x.axpy(sign * H, &dir).unwrap(), &cond).unwrap();
            out.data().iter().zip(cot.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let fd_x = (at(1.0) - at(-1.0)) / (2.0 * H);
        let an_x: f64 = dx.data().iter().zip(dir.data()).map(|(a, b)| a * b).sum();
        worst = worst.max(rel(&[an_x], &[fd_x]));
    }
    assert!(worst < 1e-5, "worst relative error {worst:.3e}");
}

#[test]
fn fake_network_backward_matches_central_difference() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..20 {
        let layout = Layout::fake_velocity(2, 0, &small_arch());
        let params = ModelParams::init(&mut rng, layout, OutputInit::FanIn).unwrap();
        let x: Tensor<f64> = draw_noise(&mut rng, 3, 2);
        let cond = AuxConditioning {
            origin: (0..3).map(|_| rng.gen()).collect(),
            noise: (0..3).map(|_| rng.gen()).collect(),
            labels: vec![None; 3],
        };
        let cot: Tensor<f64> = draw_noise(&mut rng, 3, 2);
        let (_, cache) = FakeVelocityNet::new(&params).forward_taped(&x, &cond).unwrap();
        let (grad, _) = params.backward(&cache, &cot).unwrap();
        let delta: Vec<f64> = (0..params.len()).map(|_| rng.gen::<f64>() - 0.5).collect();
        let loss_at = |sign: f64| {
            let flat: Vec<f64> = params.flat().iter().zip(&delta).map(|(p, d)| p + sign * H * d).collect();
            let p = ModelParams::from_flat(params.layout().clone(), flat).unwrap();
            let out = FakeVelocityNet::new(&p).eval(&x, &cond).unwrap();
            out.data().iter().zip(cot.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let fd = (loss_at(1.0) - loss_at(-1.0)) / (2.0 * H);
        let analytic: f64 = grad.iter().zip(&delta).map(|(g, d)| g * d).sum();
        assert!(rel(&[analytic], &[fd]) < 1e-5);
    }
}

#[test]
fn replay_reproduces_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let params = net(&mut rng, 2, 0);
    let x: Tensor<f64> = draw_noise(&mut rng, 5, 2);
    let cond = random_cond(&mut rng, 5, 0);
    let (out, cache) = AverageVelocityNet::new(&params).forward_taped(&x, &cond).unwrap();
    assert_eq!(cache.replay(&params).unwrap(), out);
    assert_eq!(AverageVelocityNet::new(&params).eval(&x, &cond).unwrap(), out);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn jvp_is_linear_in_direction(seed in 0u64..1000, a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = net(&mut rng, 2, 0);
        let f = AverageVelocityNet::new(&params);
        let x: Tensor<f64> = draw_noise(&mut rng, 2, 2);
        let cond = random_cond(&mut rng, 2, 0);
        let d1: Tensor<f64> = draw_noise(&mut rng, 2, 2);
        let d2: Tensor<f64> = draw_noise(&mut rng, 2, 2);
        let (t1, t2) = (vec![0.3, -0.7], vec![1.1, 0.2]);
        let (_, j1) = f.eval_jvp(&x, &cond, &d1, &t1).unwrap();
        let (_, j2) = f.eval_jvp(&x, &cond, &d2, &t2).unwrap();
        let dir = d1.scale(a).add(&d2.scale(b)).unwrap();
        let dt: Vec<f64> = t1.iter().zip(&t2).map(|(p, q)| a * p + b * q).collect();
        let (_, j) = f.eval_jvp(&x, &cond, &dir, &dt).unwrap();
        let expect = j1.scale(a).add(&j2.scale(b)).unwrap();
        for (p, q) in j.data().iter().zip(expect.data()) {
            prop_assert!((p - q).abs() <= 1e-10 * (1.0 + q.abs()));
        }
    }

    #[test]
    fn rows_are_independent(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = net(&mut rng, 3, 2);
        let f = AverageVelocityNet::new(&params);
        let x: Tensor<f64> = draw_noise(&mut rng, 4, 3);
        let cond = random_cond(&mut rng, 4, 2);
        let full = f.eval(&x, &cond).unwrap();
        for i in 0..4 {
            let one = f.eval(&x.select_rows(&[i]), &cond.select(&[i])).unwrap();
            prop_assert_eq!(one.row(0), full.row(i));
        }
    }
}
