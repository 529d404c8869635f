use flowconsist::diagnostics::{
    accumulation_experiment, appendix_identity_check, drift_experiment, min_cost_assignment, mmd_rbf, spearman,
    theorem1_check, theorem2_check, theorem3_check, uniform_grid, wasserstein2, write_records, DiagnosticsRecord,
};
use flowconsist::io::{read_csv, CsvMeta};
use flowconsist::network::{ArchConfig, AverageVelocityNet, Layout, ModelParams, OutputInit};
use flowconsist::oracle::{MixtureSpec, OracleField};
use flowconsist::sampler::draw_noise;
use flowconsist::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for k in 0..n {
            let mut q = p.clone();
            q.insert(k, n - 1);
            out.push(q);
        }
    }
    out
}

#[test]
fn assignment_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for n in 1..=6 {
        let cost: Vec<f64> = (0..n * n).map(|_| rng.gen::<f64>()).collect();
        let best = permutations(n)
            .iter()
            .map(|p| p.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        let a = min_cost_assignment(n, &cost);
        let mut seen = a.clone();
        seen.sort();
        assert_eq!(seen, (0..n).collect::<Vec<_>>());
        let got: f64 = a.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
        assert!((got - best).abs() < 1e-12, "n = {n}");
    }
}

#[test]
fn w2_of_shift_and_symmetry() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a: Tensor<f64> = draw_noise(&mut rng, 64, 2);
    let shifted = a.map(|v| v + 0.0).zip_map(&Tensor::filled(vec![64, 2], 0.0), |x, _| x).unwrap();
    assert_eq!(wasserstein2(&a, &shifted).unwrap(), 0.0);
    // a rigid translation is optimally matched to itself
    let mut data = a.data().to_vec();
    data.iter_mut().step_by(2).for_each(|v| *v += 3.0);
    let moved = Tensor::new(vec![64, 2], data).unwrap();
    assert!((wasserstein2(&a, &moved).unwrap() - 3.0).abs() < 1e-12);
    let b: Tensor<f64> = draw_noise(&mut rng, 64, 2);
    assert!((wasserstein2(&a, &b).unwrap() - wasserstein2(&b, &a).unwrap()).abs() < 1e-12);
    let perm: Vec<usize> = (0..64).rev().collect();
    assert!((wasserstein2(&a.select_rows(&perm), &b).unwrap() - wasserstein2(&a, &b).unwrap()).abs() < 1e-12);
}

#[test]
fn w2_rejects_bad_sizes() {
    let a: Tensor<f64> = Tensor::zeros(vec![4, 2]);
    assert!(wasserstein2(&a, &Tensor::zeros(vec![5, 2])).is_err());
    assert!(wasserstein2(&a, &Tensor::zeros(vec![4, 3])).is_err());
    let big: Tensor<f64> = Tensor::zeros(vec![2049, 1]);
    assert!(wasserstein2(&big, &big).is_err());
}

#[test]
fn mmd_separates_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a: Tensor<f64> = draw_noise(&mut rng, 200, 2);
    let b: Tensor<f64> = draw_noise(&mut rng, 200, 2);
    let far = b.map(|v| v + 2.0);
    let near = mmd_rbf(&a, &b, 1.0).unwrap();
    assert!(near.abs() < 0.02, "{near}");
    assert!(mmd_rbf(&a, &far, 1.0).unwrap() > 0.3);
}

#[test]
fn spearman_and_grid() {
    assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), 1.0);
    assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), -1.0);
    assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 1.0, 2.0, 3.0]) - 0.9486832980505138).abs() < 1e-12);
    let g = uniform_grid(0.0, 1.0, 5);
    assert_eq!(g, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
}

#[test]
fn covariance_check_on_mixtures_and_point_mass() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for spec in [MixtureSpec::pair_1d(1.0, 0.1).unwrap(), MixtureSpec::square_2d(1.0, 0.1).unwrap()] {
        let r = theorem1_check(&spec, &mut rng, 300).unwrap();
        assert!(r.passed(), "{:?}", r.failures().collect::<Vec<_>>());
    }
    let r = theorem1_check(&MixtureSpec::dirac(vec![0.3, -0.2]).unwrap(), &mut rng, 100).unwrap();
    assert!(r.passed());
    assert_eq!(r.values("thm1_max_trace")[0].value, 0.0);
}

#[test]
fn drift_on_pair_and_point_mass() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let grid = uniform_grid(0.0, 1.0, 8);
    let r = drift_experiment(&MixtureSpec::pair_1d(1.0, 0.1).unwrap(), &mut rng, &grid, 256).unwrap();
    assert!(r.passed(), "{:?}", r.failures().collect::<Vec<_>>());
    let d = drift_experiment(&MixtureSpec::dirac(vec![1.0]).unwrap(), &mut rng, &grid, 64).unwrap();
    // u_0 = −x is not the along-path limit for a point mass, so the last RK4
    // stage leaves a small residue
    assert!(d.values("drift_path_mse").iter().all(|r| r.value < 1e-6));
    assert!(drift_experiment(&MixtureSpec::dirac(vec![1.0]).unwrap(), &mut rng, &[1.5], 4).is_err());
}

fn random_net(seed: u64, dim: usize) -> ModelParams<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = ArchConfig { hidden: 16, depth: 2, embed_dim: 8, embed_hidden: 8, max_freq: 8.0 };
    ModelParams::init(&mut rng, Layout::average_velocity(dim, 0, &arch), OutputInit::FanIn).unwrap()
}

#[test]
fn decomposition_holds_for_random_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let spec = MixtureSpec::pair_1d(1.0, 0.2).unwrap();
    let p = random_net(1, 1);
    let r = theorem2_check(&spec, &AverageVelocityNet::new(&p), &mut rng, 20_000).unwrap();
    assert!(r.passed(), "{:?}", r.failures().collect::<Vec<_>>());
    let dirac = MixtureSpec::dirac(vec![0.5]).unwrap();
    let r = theorem2_check(&dirac, &AverageVelocityNet::new(&p), &mut rng, 2_000).unwrap();
    assert!(r.passed(), "{:?}", r.failures().collect::<Vec<_>>());
    assert_eq!(r.values("thm2_l_var")[0].value, 0.0);
}

#[test]
fn identity_gap_is_parameter_free() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let spec = MixtureSpec::square_2d(1.0, 0.2).unwrap();
    let ps: Vec<_> = (0..3).map(|k| random_net(10 + k, 2)).collect();
    let nets: Vec<_> = ps.iter().map(AverageVelocityNet::new).collect();
    let refs: Vec<&AverageVelocityNet<f64>> = nets.iter().collect();
    let r = appendix_identity_check(&spec, &mut rng, &refs, 20_000, &[0.3, 0.7], 201).unwrap();
    assert!(r.passed(), "{:?}", r.failures().collect::<Vec<_>>());
    assert!(appendix_identity_check(&spec, &mut rng, &refs[..1], 10, &[0.5], 11).is_err());
}

#[test]
fn error_dynamics_with_network_and_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let spec = MixtureSpec::pair_1d(1.0, 0.2).unwrap();
    let p = random_net(2, 1);
    let (r, pts) = theorem3_check(&spec, &AverageVelocityNet::new(&p), &mut rng, 5, 128, 1e-3).unwrap();
    assert!(r.passed(), "{:?}", r.failures().collect::<Vec<_>>());
    assert!(pts.iter().all(|p| p.direct_norm() > 1e-3));

    let oracle = OracleField::new(spec.clone());
    let (_, pts) = theorem3_check(&spec, &oracle, &mut rng, 3, 32, 1e-3).unwrap();
    for p in pts {
        assert!(p.direct_norm() < 1e-9, "{}", p.direct_norm());
        assert!(p.integral.iter().all(|v| v.abs() < 1e-6));
    }
}

#[test]
fn accumulation_with_oracle_is_small() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let spec = MixtureSpec::pair_1d(1.0, 0.2).unwrap();
    let oracle = OracleField { n_steps: 256, ..OracleField::new(spec.clone()) };
    let r = accumulation_experiment(&spec, &oracle, &[0.25, 1.0], &mut rng, 16, 64).unwrap();
    for rec in r.values("accumulation_rel_error") {
        // only the Euler discretisation of the reference separates the two
        assert!(rec.value < 0.05, "{rec:?}");
    }
    assert_eq!(r.values("accumulation_target_norm").len(), 2);
}

#[test]
fn records_csv_format() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("diag.csv");
    let recs = vec![DiagnosticsRecord::exact("a", 0.5, 1.25), DiagnosticsRecord { std_err: Some(0.1), ..DiagnosticsRecord::exact("b", 1.0, 2.0) }];
    write_records(&path, &recs, &CsvMeta { config_hash: "00ff".into(), seed: 3 }).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("experiment,") && text.trim_end().ends_with("# config_hash=00ff, seed=3"));
    let (header, rows) = read_csv(&path).unwrap();
    assert_eq!(header, vec!["experiment", "sweep_value", "value", "std_err"]);
    assert_eq!(rows[0], vec!["a", "0.5", "1.25", ""]);
    assert_eq!(rows[1][3], "0.1");
}
