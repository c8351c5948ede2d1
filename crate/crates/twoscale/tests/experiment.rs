use std::f64::consts::PI;
use twoscale::container::*;
use twoscale::environment::*;
use twoscale::experiment::*;
use twoscale::grid::{MatrixField, SpaceTimeGrid};
use twoscale::pde_solver::{Preset, SimBox};
use twoscale::rng;

use rand_distr::{Distribution, StandardNormal};

fn gaussian_sample(n: usize, shift: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng::stream(seed, "test-sample", 0);
    (0..n)
        .map(|_| {
            let x: f64 = StandardNormal.sample(&mut r);
            let y: f64 = StandardNormal.sample(&mut r);
            vec![x + shift, y]
        })
        .collect()
}

#[test]
fn law_distance_basic_values() {
    let a = gaussian_sample(50, 0.0, 1);
    assert_eq!(law_distance(&a, &a).unwrap(), 0.0);
    let p = vec![vec![0.0, 0.0]; 10];
    let q = vec![vec![0.6, 0.8]; 7];
    assert!((law_distance(&p, &q).unwrap() - 1.0).abs() < 1e-15);
    assert!((law_distance_resolved(&p, &q, 0.25).unwrap() - 0.75).abs() < 1e-15);
    assert_eq!(law_distance_resolved(&p, &q, 2.0).unwrap(), 0.0);
    assert!(matches!(law_distance(&p, &[vec![1.0]]), Err(ExperimentError::DimensionMismatch(2, 1))));
    assert!(matches!(law_distance(&[], &q), Err(ExperimentError::EmptySample)));
}

#[test]
fn permutation_test_separates_laws() {
    let a = gaussian_sample(300, 0.0, 2);
    let b = gaussian_sample(300, 0.0, 3);
    let same = permutation_test(&a, &b, 0.0, 99, 4).unwrap();
    assert!(same.statistic <= same.threshold_95 || same.p_value > 0.01, "{same:?}");
    let c = gaussian_sample(300, 0.5, 5);
    let diff = permutation_test(&a, &c, 0.0, 99, 4).unwrap();
    assert!(diff.statistic > diff.threshold_95);
    assert_eq!(diff.p_value, 0.01);
}

#[test]
fn default_probes_are_distinct_bumps() {
    let sim = SimBox::new(2, 64, 2.0).unwrap();
    let probes = default_probes(&sim);
    assert_eq!(probes.len(), 5);
    for p in &probes {
        p.validate().unwrap();
    }
}

fn tiny_config(params: SpectralParams, bbar: BbarSpec) -> ExperimentConfig {
    let grid = SpaceTimeGrid::new(2, 8, 8, 1.0, 1.0).unwrap();
    ExperimentConfig {
        eps_list: vec![0.25, 0.125],
        ensemble: 2,
        sim_length: 1.0,
        resolution: SimResolution::Fixed { m: 64 },
        initial: Preset::gaussian(0.08),
        horizon: 0.002,
        dt_max: 5e-4,
        delta_list: vec![1e-1, 1e-2, 1e-3],
        limit_samples: 20,
        permutations: 19,
        ..ExperimentConfig::new(grid, params, bbar)
    }
}

#[test]
fn configuration_is_validated() {
    let good = tiny_config(SpectralParams::default(), BbarSpec::zero());
    good.validate().unwrap();
    let bad_eps = ExperimentConfig { eps_list: vec![0.1, 0.2], ..good.clone() };
    assert!(matches!(bad_eps.validate(), Err(ExperimentError::Invalid(_))));
    let bad_horizon = ExperimentConfig { horizon: 0.0, ..good.clone() };
    assert!(bad_horizon.validate().is_err());
    let misaligned = ExperimentConfig { resolution: SimResolution::Aligned, sim_length: 1.3, ..good.clone() };
    assert!(misaligned.validate().is_err());
    let aligned = ExperimentConfig { resolution: SimResolution::Aligned, ..good.clone() };
    assert_eq!(aligned.sim_box(0.125).unwrap().m, 64);
    assert!((good.dt(0.125) - 5e-4f64.min(0.25 * 0.125 * 0.125 / 8.0)).abs() < 1e-18);
}

#[test]
fn trivial_environment_run_has_no_homogenization_error() {
    let params = SpectralParams { sigma_a: 0.0, sigma_s: 0.0, ..Default::default() };
    // A fine step keeps the time error of the ε-solve below the probe resolution.
    let config = ExperimentConfig { dt_max: 5e-5, ..tiny_config(params, BbarSpec::zero()) };
    let (report, timing) = homogenization_run(&config).unwrap();
    assert_eq!(report.records.len(), 4);
    assert_eq!(timing.per_eps_secs.len(), 2);
    assert!(report.records.iter().all(|r| r.relative_error <= 1e-5), "{:?}", report.records);
    for s in &report.per_eps {
        assert_eq!(s.law_distance, 0.0);
        assert!(s.energy_bounds_ok);
    }
    assert!(report.mean_a_bar.max_abs_diff(&twoscale::linalg::SquareMatrix::scaled_identity(2, params.lambda)) < 1e-15);
}

#[test]
fn random_run_is_reproducible() {
    let bbar = BbarSpec { model: BbarModel::Ou { tau: 0.3 }, amplitude: 0.5 };
    let config = tiny_config(SpectralParams::default(), bbar);
    let (first, _) = homogenization_run(&config).unwrap();
    let (second, _) = homogenization_run(&config).unwrap();
    assert_eq!(format!("{first:?}"), format!("{second:?}"));
    assert_eq!(first.schema_version, REPORT_SCHEMA_VERSION);
    assert_eq!(first.limit_probe_samples.len(), 2);
    assert!(first.records.iter().all(|r| r.pathwise_error.is_finite() && r.probes_eps.len() == 5));
    assert!(first.correctors.iter().all(|c| c.lambda_min >= config.params.lambda));
    assert!((first.sigma_sq.get(0, 0) - 2.0 * 0.25 * 0.3).abs() < 1e-15);
    let other = ExperimentConfig { seed: 2, ..config };
    let (third, _) = homogenization_run(&other).unwrap();
    assert_ne!(third.records[0].env_seed, first.records[0].env_seed);
}

#[test]
fn invalid_configuration_fails_before_work() {
    let config = ExperimentConfig { ensemble: 0, ..tiny_config(SpectralParams::default(), BbarSpec::zero()) };
    let failure = homogenization_run(&config).unwrap_err();
    assert!(failure.partial.records.is_empty());
    assert!(matches!(failure.error, ExperimentError::Invalid(_)));
}

fn laminate() -> EnvironmentRealization {
    let grid = SpaceTimeGrid::new(2, 16, 4, 1.0, 1.0).unwrap();
    let params = SpectralParams { sigma_a: 0.0, sigma_s: 0.0, lambda: 1.0, big_lambda: 3.0, ..Default::default() };
    let mut a = MatrixField::zeros(2, grid.len());
    for node in 0..grid.len() {
        let x1 = grid.unravel_spatial(node % grid.slice_len())[0] as f64 * grid.h();
        let alpha = 2.0 + (2.0 * PI * x1).sin();
        a.comp_mut(0, 0)[node] = alpha;
        a.comp_mut(1, 1)[node] = alpha;
    }
    let s = MatrixField::zeros(2, grid.len());
    EnvironmentRealization::from_fields(grid, params, a, s, DriftSeries::zeros(2, 4, 0.25, true), 0).unwrap()
}

#[test]
fn corrected_test_function_shrinks_the_residual() {
    let setup = ResidualSetup {
        sim: SimBox::new(2, 256, 1.0).unwrap(),
        initial: Preset::gaussian(0.05),
        horizon: 0.002,
        dt: 1e-4,
        corrector_tol: 1e-10,
    };
    let r = perturbed_test_residual(&laminate(), 0.0625, 1e-4, &Preset::gaussian(0.08), &[0, 1], &setup).unwrap();
    assert!(r.corrected < 0.5 * r.plain, "{r:?}");
    assert!(r.delta_term <= 1e-2 * r.plain, "{r:?}");
}

#[test]
fn trivial_environment_residuals_vanish() {
    let grid = SpaceTimeGrid::new(2, 8, 4, 1.0, 1.0).unwrap();
    let params = SpectralParams { sigma_a: 0.0, sigma_s: 0.0, ..Default::default() };
    let env = build_environment(&grid, &params, 1, &BbarSpec::zero()).unwrap();
    let setup = ResidualSetup {
        sim: SimBox::new(2, 64, 1.0).unwrap(),
        initial: Preset::gaussian(0.08),
        horizon: 0.002,
        dt: 2.5e-4,
        corrector_tol: 1e-10,
    };
    let r = perturbed_test_residual(&env, 0.25, 1e-2, &Preset::gaussian(0.1), &[0, 1], &setup).unwrap();
    assert!(r.plain <= 1e-12 && r.corrected <= 1e-12 && r.delta_term == 0.0, "{r:?}");
}

#[test]
fn container_round_trip_and_corruption() {
    let grid = SpaceTimeGrid::new(2, 8, 4, 1.0, 0.5).unwrap();
    let env = build_environment(&grid, &SpectralParams::default(), 11, &BbarSpec::zero()).unwrap();
    let container = FieldContainer::from_environment(&env);
    let mut bytes = Vec::new();
    container.write_to(&mut bytes).unwrap();
    let back = FieldContainer::read_from(bytes.as_slice()).unwrap().to_environment().unwrap();
    assert_eq!(back.a.comps, env.a.comps);
    assert_eq!(back.s.comps, env.s.comps);
    assert_eq!(back.seed, env.seed);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(FieldContainer::read_from(bad.as_slice()), Err(ContainerError::BadMagic)));
    let truncated = &bytes[..bytes.len() - 3];
    assert!(FieldContainer::read_from(truncated).is_err());
    assert!(matches!(container.get("nope"), Err(ContainerError::Missing(_))));
}
