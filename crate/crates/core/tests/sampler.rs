use flowconsist::network::{Conditioning, VelocityField};
use flowconsist::oracle::{MixtureSpec, OracleField};
use flowconsist::sampler::{draw_noise, flow_map_apply, generate, omega_sweep, transport, SamplerConfig, SamplerMode};
use flowconsist::{Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// `F ≡ c`, independent of everything.
struct Constant(Vec<f64>);

impl VelocityField<f64> for Constant {
    fn dim(&self) -> usize {
        self.0.len()
    }

    fn eval(&self, x: &Tensor<f64>, cond: &Conditioning<f64>) -> Result<Tensor<f64>> {
        cond.check_rows(x.rows())?;
        Tensor::new(x.shape().to_vec(), (0..x.rows()).flat_map(|_| self.0.clone()).collect())
    }

    fn eval_jvp(
        &self,
        x: &Tensor<f64>,
        cond: &Conditioning<f64>,
        _dir_x: &Tensor<f64>,
        _dir_t: &[f64],
    ) -> Result<(Tensor<f64>, Tensor<f64>)> {
        Ok((self.eval(x, cond)?, Tensor::zeros(x.shape().to_vec())))
    }
}

#[test]
fn constant_field_moves_every_point_by_the_same_amount() {
    let f = Constant(vec![0.5, -1.0]);
    let noise: Tensor<f64> = draw_noise(&mut ChaCha8Rng::seed_from_u64(1), 7, 2);
    for nfe in [1, 2, 5] {
        for mode in [SamplerMode::FlowMapJumps, SamplerMode::EulerInstantaneous] {
            let out = transport(&f, &noise, &SamplerConfig { nfe, mode, ..Default::default() }).unwrap();
            for (o, x) in out.iter_rows().zip(noise.iter_rows()) {
                assert!((o[0] - (x[0] - 0.5)).abs() < 1e-14);
                assert!((o[1] - (x[1] + 1.0)).abs() < 1e-14);
            }
        }
    }
}

#[test]
fn oracle_flow_map_is_the_gaussian_transport() {
    // For N(m, σ²I) the probability-flow map from t = 1 is x ↦ m + σx.
    let (m, var) = (vec![1.0, -2.0], 0.25);
    let f = OracleField::new(MixtureSpec::gaussian(m.clone(), var).unwrap());
    let noise: Tensor<f64> = draw_noise(&mut ChaCha8Rng::seed_from_u64(2), 16, 2);
    for nfe in [1, 2, 4] {
        let out = transport(&f, &noise, &SamplerConfig { nfe, ..Default::default() }).unwrap();
        for (o, z) in out.iter_rows().zip(noise.iter_rows()) {
            for j in 0..2 {
                assert!((o[j] - (m[j] + var.sqrt() * z[j])).abs() < 1e-9, "nfe {nfe}");
            }
        }
    }
    // Euler along the marginal velocity converges to the same map.
    let euler = transport(&f, &noise, &SamplerConfig { nfe: 256, mode: SamplerMode::EulerInstantaneous, ..Default::default() }).unwrap();
    for (o, z) in euler.iter_rows().zip(noise.iter_rows()) {
        assert!((o[0] - (m[0] + 0.5 * z[0])).abs() < 1e-2);
    }
}

#[test]
fn flow_map_apply_checks_time_order_and_keeps_shape() {
    let f = Constant(vec![2.0]);
    let x: Tensor<f64> = Tensor::vector(vec![1.0]).unwrap();
    let out = flow_map_apply(&f, &x, 0.25, 0.75, None, 1.0).unwrap();
    assert_eq!(out.shape(), &[1]);
    assert_eq!(out.data(), &[0.0]);
    assert!(flow_map_apply(&f, &x, 0.8, 0.2, None, 1.0).is_err());
    assert_eq!(flow_map_apply(&f, &x, 0.3, 0.3, None, 1.0).unwrap(), x);
}

#[test]
fn sampler_config_validation() {
    let f = Constant(vec![0.0]);
    let noise: Tensor<f64> = Tensor::zeros(vec![2, 1]);
    assert!(transport(&f, &noise, &SamplerConfig { nfe: 0, ..Default::default() }).is_err());
    assert!(transport(&f, &noise, &SamplerConfig { omega: 0.5, ..Default::default() }).is_err());
    assert!(transport(&f, &Tensor::zeros(vec![0, 1]), &SamplerConfig::default()).unwrap().is_empty());
}

#[test]
fn generation_is_seeded() {
    let f = Constant(vec![0.1, 0.2]);
    let a: Tensor<f64> = generate(&f, &mut ChaCha8Rng::seed_from_u64(3), &SamplerConfig::default(), 32).unwrap();
    let b: Tensor<f64> = generate(&f, &mut ChaCha8Rng::seed_from_u64(3), &SamplerConfig::default(), 32).unwrap();
    assert_eq!(a, b);
}

#[test]
fn omega_sweep_shares_noise() {
    // guidance-blind field: every scale must see identical samples
    let f = Constant(vec![0.3]);
    let scores = omega_sweep(&f, &mut ChaCha8Rng::seed_from_u64(4), &SamplerConfig::default(), &[1.0, 2.0, 3.5], 64, |s: &Tensor<f64>| {
        Ok(s.data().iter().sum())
    })
    .unwrap();
    assert_eq!(scores.len(), 3);
    assert!(scores.windows(2).all(|w| w[0].1 == w[1].1));
    assert!(omega_sweep(&f, &mut ChaCha8Rng::seed_from_u64(4), &SamplerConfig::default(), &[], 4, |_: &Tensor<f64>| Ok(0.0)).is_err());
}
