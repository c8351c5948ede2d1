use proptest::prelude::*;
use std::fs;
use std::process::Command;
use twoscale::environment::{BbarModel, BbarSpec, SpectralParams};
use twoscale::experiment::{ExperimentConfig, SimResolution};
use twoscale::grid::SpaceTimeGrid;
use twoscale::pde_solver::Preset;
use twoscale_cli::config::ConfigFile;
use twoscale_cli::manifest::{config_hash, RunManifest, MANIFEST_NAME};
use twoscale_cli::*;

const SMALL: &str = r#"
[grid]
d = 2
n_x = 8
n_t = 8

[params]
sigma_a = 0.0
sigma_s = 0.0

[experiment]
eps_list = [0.25, 0.125]
ensemble = 2
sim_length = 1.0
resolution = { rule = "fixed", m = 64 }
initial = { preset = "gaussian-bump", width = 0.08, amplitude = 1.0 }
horizon = 0.002
dt_max = 5e-5
limit_samples = 10
permutations = 9
"#;

#[test]
fn minimal_config_gets_defaults() {
    let c = parse_config_str("[grid]\nn_x = 16\n", &[]).unwrap();
    assert_eq!(c.grid.n_x, 16);
    assert_eq!(c.grid.d, 2);
    assert_eq!(c.params, SpectralParams::default());
    assert_eq!(c.bbar, BbarSpec::zero());
    assert_eq!(c.eps_list, vec![0.25, 0.125, 0.0625]);
    assert_eq!(parse_config_str("", &[]).unwrap().grid.n_x, 32);
}

#[test]
fn slow_decay_is_a_validation_error() {
    let err = parse_config_str("[params]\nbeta_decay = 1.5\n", &[]).unwrap_err();
    assert!(matches!(err, ConfigError::Validation(_)));
    assert!(err.to_string().contains("must exceed 2"), "{err}");
}

#[test]
fn unknown_keys_report_position() {
    let err = parse_config_str("[grid]\nd = 2\nbogus = 1\n", &[]).unwrap_err();
    match err {
        ConfigError::Parse { line, column, .. } => assert_eq!((line, column), (3, 1)),
        other => panic!("unexpected {other}"),
    }
    assert!(parse_config_str("[nonsense]\n", &[]).is_err());
    assert!(parse_config_str("[grid\n", &[]).is_err());
}

#[test]
fn drift_parameters_must_match_the_model() {
    let c = parse_config_str("[bbar]\nmodel = \"ou\"\ntau = 0.3\n", &[]).unwrap();
    assert_eq!(c.bbar, BbarSpec { model: BbarModel::Ou { tau: 0.3 }, amplitude: 1.0 });
    assert!(parse_config_str("[bbar]\nmodel = \"ou\"\n", &[]).is_err());
    assert!(parse_config_str("[bbar]\nmodel = \"ou\"\ntau = 0.3\nblock = 1.0\n", &[]).is_err());
}

#[test]
fn environment_overrides_apply() {
    let vars = vec![
        ("DH_EXPERIMENT__ENSEMBLE".to_string(), "7".to_string()),
        ("DH_PARAMS__BIG_LAMBDA".to_string(), "3.5".to_string()),
        ("DH_BBAR__MODEL".to_string(), "rw-interp".to_string()),
        ("DH_BBAR__BLOCK".to_string(), "0.5".to_string()),
        ("PATH".to_string(), "/bin".to_string()),
    ];
    let c = parse_config_str(SMALL, &vars).unwrap();
    assert_eq!(c.ensemble, 7);
    assert_eq!(c.params.big_lambda, 3.5);
    assert_eq!(c.bbar.model, BbarModel::RwInterp { block: 0.5 });
    let bad = vec![("DH_NOSECTION".to_string(), "1".to_string())];
    assert!(matches!(parse_config_str(SMALL, &bad), Err(ConfigError::Override { .. })));
}

#[test]
fn hash_ignores_key_order() {
    let a = parse_config_str("[grid]\nn_x = 16\nn_t = 8\n[experiment]\nensemble = 3\nseed = 5\n", &[]).unwrap();
    let b = parse_config_str("[experiment]\nseed = 5\nensemble = 3\n[grid]\nn_t = 8\nn_x = 16\n", &[]).unwrap();
    assert_eq!(config_hash(&a), config_hash(&b));
    let c = ExperimentConfig { seed: 6, ..a.clone() };
    assert_ne!(config_hash(&a), config_hash(&c));
}

fn preset() -> impl Strategy<Value = Preset> {
    prop_oneof![
        (0.01f64..0.5, 0.1f64..2.0, -0.2f64..0.2)
            .prop_map(|(width, amplitude, o)| Preset::GaussianBump { offset: vec![o, -o], width, amplitude }),
        (0.0f64..0.5, 0.01f64..0.2, 0.1f64..2.0).prop_map(|(separation, width, amplitude)| Preset::TwoBumps {
            separation,
            width,
            amplitude
        }),
        (0.05f64..0.4, 0.01f64..0.1, 0.1f64..2.0).prop_map(|(radius, mollifier, amplitude)| Preset::IndicatorMollified {
            radius,
            mollifier,
            amplitude
        }),
    ]
}

fn bbar() -> impl Strategy<Value = BbarSpec> {
    (0usize..4, 0.01f64..2.0, 0.0f64..3.0).prop_map(|(k, p, amplitude)| {
        let model = match k {
            0 => return BbarSpec::zero(),
            1 => BbarModel::Periodic { period: p },
            2 => BbarModel::Ou { tau: p },
            _ => BbarModel::RwInterp { block: p },
        };
        BbarSpec { model, amplitude }
    })
}

fn config() -> impl Strategy<Value = ExperimentConfig> {
    let grid = (2usize..4, 2u32..5, 2u32..5, 0.5f64..3.0, 0.1f64..2.0).prop_map(|(d, nx, nt, length, period)| {
        SpaceTimeGrid { d, n_x: 1 << nx, n_t: 1 << nt, length, period }
    });
    let params = (0.05f64..0.5, 0.05f64..0.5, 2.01f64..6.0, 0.0f64..3.0, 0.0f64..1.0, 0.1f64..2.0, 0.0f64..2.0).prop_map(
        |(ell_x, ell_t, beta_decay, sigma_s, sigma_a, lambda, extra)| SpectralParams {
            ell_x,
            ell_t,
            beta_decay,
            sigma_s,
            sigma_a,
            lambda,
            big_lambda: lambda + extra,
        },
    );
    let numbers = (1usize..50, 0u64..(i64::MAX as u64), 1e-4f64..0.1, 1e-5f64..1e-2, 0.01f64..1.0, 1e-12f64..1e-6);
    (grid, params, bbar(), numbers, preset(), proptest::option::of(preset()), proptest::option::of(prop::collection::vec(preset(), 1..4)), any::<bool>())
        .prop_map(|(grid, params, bbar, (ensemble, seed, horizon, dt_max, dt_fraction, tol), initial, source, probes, fixed)| {
            ExperimentConfig {
                eps_list: vec![0.5, 0.2, 0.05],
                ensemble,
                seed,
                sim_length: 2.0 * grid.length,
                resolution: if fixed { SimResolution::Fixed { m: 64 } } else { SimResolution::Aligned },
                initial,
                source,
                horizon,
                dt_max,
                dt_fraction,
                corrector_tol: tol,
                delta_list: vec![0.1, 0.03, 0.001],
                probes,
                ..ExperimentConfig::new(grid, params, bbar)
            }
        })
        .prop_filter("valid", |c| c.validate().is_ok())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn serialize_then_parse_is_identity(c in config()) {
        let text = config_to_toml(&c);
        let back = parse_config_str(&text, &[]).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(ConfigFile::from_config(&back), ConfigFile::from_config(&c));
    }
}

fn manifest_complete(dir: &std::path::Path, manifest: &RunManifest) {
    let mut on_disk: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n != MANIFEST_NAME)
        .collect();
    on_disk.sort();
    let mut listed: Vec<String> = manifest.files.iter().map(|f| f.path.clone()).collect();
    listed.sort();
    assert_eq!(on_disk, listed);
    for f in &manifest.files {
        let bytes = fs::read(dir.join(&f.path)).unwrap();
        assert_eq!(bytes.len() as u64, f.bytes);
        assert_eq!(manifest::sha256_hex(&bytes), f.sha256);
    }
}

#[test]
fn trivial_homogenize_is_flat_and_reproducible() {
    let config = parse_config_str(SMALL, &[]).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let ma = run(Stage::Homogenize, &config, &a, &RunOptions::default()).unwrap();
    let mb = run(Stage::Homogenize, &config, &b, &RunOptions::default()).unwrap();
    manifest_complete(&a, &ma);
    for name in ["records.csv", "summary.csv", "report.json"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    assert_eq!(ma.files, mb.files);
    assert_eq!(ma.config_hash, mb.config_hash);

    let summary = fs::read_to_string(a.join("summary.csv")).unwrap();
    let mut lines = summary.lines();
    assert!(lines.next().unwrap().starts_with("eps,sim_points,dt,mean_pathwise_error"));
    for line in lines {
        let rel: f64 = line.split(',').nth(4).unwrap().parse().unwrap();
        assert!(rel <= 1e-5, "{line}");
    }
    let records = fs::read_to_string(a.join("records.csv")).unwrap();
    // ε × realization × probe rows plus the header.
    assert_eq!(records.lines().count(), 2 * 2 * 5 + 1);
}

#[test]
fn stream_recovery_from_generated_drift() {
    let text = SMALL.replace("sigma_s = 0.0", "sigma_s = 1.0");
    let config = parse_config_str(&text, &[]).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let envs = tmp.path().join("env");
    let m = run(Stage::GenerateEnv, &config, &envs, &RunOptions::default()).unwrap();
    manifest_complete(&envs, &m);
    let opts = RunOptions { input: Some(envs.join("drift_001.dhf")), ..RunOptions::default() };
    let out = tmp.path().join("stream");
    run(Stage::StreamRecover, &config, &out, &opts).unwrap();
    let rec = twoscale::container::FieldContainer::load(out.join("stream.dhf")).unwrap();
    let env = twoscale::container::FieldContainer::load(envs.join("env_001.dhf")).unwrap().to_environment().unwrap();
    let got = rec.get("s:0:1").unwrap();
    let worst = got.iter().zip(env.s.comp(0, 1)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(worst <= 1e-9, "{worst}");
}

#[test]
fn single_stage_outputs() {
    let text = SMALL.replace("sigma_a = 0.0", "sigma_a = 0.5").replace("sigma_s = 0.0", "sigma_s = 0.5");
    let config = ExperimentConfig { delta_list: vec![0.1, 0.01, 0.001], ..parse_config_str(&text, &[]).unwrap() };
    let tmp = tempfile::tempdir().unwrap();
    let dump = RunOptions { dump_fields: true, ..RunOptions::default() };
    for (stage, file) in [
        (Stage::SolveCorrector, "corrector_phi.dhf"),
        (Stage::EffectiveMatrix, "effective_matrix.json"),
        (Stage::SolveEps, "solution_eps_1.dhf"),
        (Stage::SolveLimit, "solution_limit.dhf"),
    ] {
        let dir = tmp.path().join(stage.name());
        let m = run(stage, &config, &dir, &dump).unwrap();
        manifest_complete(&dir, &m);
        assert!(dir.join(file).exists(), "{file}");
    }
    let clt = tmp.path().join("clt");
    let opts = RunOptions { paths: 200, clt_horizon: 0.25, ..RunOptions::default() };
    let ou = ExperimentConfig { bbar: BbarSpec { model: BbarModel::Ou { tau: 0.3 }, amplitude: 1.0 }, ..config.clone() };
    run(Stage::Clt, &ou, &clt, &opts).unwrap();
    let csv = fs::read_to_string(clt.join("clt.csv")).unwrap();
    assert!(csv.starts_with("eps,statistic,component,value,stderr"));
    assert!(csv.lines().any(|l| l.starts_with("0.125,sigma_sq_empirical,0:0")));
    let bad = RunOptions { realization: 5, ..RunOptions::default() };
    assert!(matches!(run(Stage::SolveEps, &config, &tmp.path().join("x"), &bad), Err(CliError::Invalid(_))));
}

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_twoscale"))
}

#[test]
fn binary_exit_codes_and_error_json() {
    let status = binary().arg("frobnicate").output().unwrap();
    assert_eq!(status.status.code(), Some(2));

    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[params]\nbeta_decay = 1.5\n").unwrap();
    let out = binary().arg("--config").arg(&cfg).arg("--out").arg(tmp.path().join("o")).arg("generate-env").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "validation");

    let good = tmp.path().join("good.toml");
    fs::write(&good, SMALL).unwrap();
    let out = binary()
        .args(["--seed", "9", "--eps", "0.5,0.25", "--workers", "1", "--out"])
        .arg(tmp.path().join("g"))
        .arg("--config")
        .arg(&good)
        .arg("generate-env")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest: RunManifest = serde_json::from_slice(&fs::read(tmp.path().join("g").join(MANIFEST_NAME)).unwrap()).unwrap();
    assert_eq!(manifest.base_seed, 9);
    assert_eq!(manifest.versions["csv-schema"], CSV_SCHEMA_VERSION.to_string());
}
