use std::path::Path;

use uqvae::dataset::load_dataset;
use uqvae::experiment::commands::read_kv;
use uqvae::experiment::{
    cmd_gen_data, cmd_laplace, cmd_report, cmd_timing, cmd_train, cmd_verify, ExperimentConfig, PtoModeName,
};
use uqvae::{EncoderParams, Error};

fn small(dir: &Path, name: &str) -> ExperimentConfig {
    ExperimentConfig {
        mesh_n: 6,
        m_train: 40,
        m_test: 5,
        delta: 0.01,
        epochs: 5,
        batch_size: 20,
        encoder_hidden: vec![32, 32],
        decoder_hidden: vec![32],
        timing_evals: 3,
        output_dir: dir.join(name),
        ..ExperimentConfig::default()
    }
}

#[test]
fn gen_data_is_reproducible_and_embeds_config() {
    let dir = tempfile::tempdir().unwrap();
    let a = small(dir.path(), "a");
    let b = small(dir.path(), "b");
    cmd_gen_data::<f64>(&a).unwrap();
    cmd_gen_data::<f64>(&b).unwrap();
    let ta = std::fs::read_to_string(a.train_path()).unwrap();
    let tb = std::fs::read_to_string(b.train_path()).unwrap();
    // identical apart from the recorded output directory
    let strip = |s: &str| s.lines().filter(|l| !l.contains("output_dir")).collect::<Vec<_>>().join("\n");
    assert_eq!(strip(&ta), strip(&tb));
    assert!(ta.contains("meta.alpha=0.001"));
    let ds = load_dataset::<f64>(a.train_path()).unwrap();
    assert_eq!((ds.len(), ds.param_dim(), ds.obs_dim()), (40, 49, 10));
    assert_eq!(load_dataset::<f64>(a.test_path()).unwrap().len(), 5);
    let cfg = ExperimentConfig::from_file(a.output_dir.join("config.txt")).unwrap();
    assert_eq!(cfg.to_pairs(), a.to_pairs());
}

#[test]
fn train_laplace_timing_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), "modelled");
    cmd_gen_data::<f64>(&cfg).unwrap();
    let out = cmd_train::<f64>(&cfg).unwrap();
    assert!(out.final_total.is_finite() && out.initial_total.is_finite());
    let ev = out.evaluation.unwrap();
    assert!(ev.param_error.percent.is_finite());
    assert!(ev.obs_error.is_none());
    let (enc, header) = EncoderParams::<f64>::load(&out.checkpoint).unwrap();
    assert_eq!(enc.param_dim(), 49);
    assert_eq!(header.get("config.mesh_n").map(String::as_str), Some("6"));
    let log = std::fs::read_to_string(&out.log_path).unwrap();
    assert_eq!(log.lines().filter(|l| !l.starts_with('#')).count(), 1 + 6);

    let mut learned = small(dir.path(), "learned");
    learned.pto_mode = PtoModeName::Learned;
    learned.train_data = Some(cfg.train_path());
    learned.test_data = Some(cfg.test_path());
    let lo = cmd_train::<f64>(&learned).unwrap();
    assert!(lo.decoder_checkpoint.unwrap().exists());
    assert!(lo.evaluation.unwrap().obs_error.is_some());

    let lap = cmd_laplace::<f64>(&cfg).unwrap();
    assert!(lap.iterations >= 1 && lap.relative_error.is_finite());
    let (lap_cfg, values) = read_kv(&lap.result_path).unwrap();
    assert_eq!(lap_cfg.delta, 0.01);
    assert!(values.contains_key("wall_seconds"));

    let t = cmd_timing::<f64>(&cfg).unwrap();
    assert!(t.trained_encoder && t.ratio > 0.0);

    let rep = cmd_report(dir.path()).unwrap();
    assert_eq!(rep.runs.len(), 3);
    assert_eq!(rep.tables.len(), 1);
    let table = std::fs::read_to_string(&rep.tables[0]).unwrap();
    let rows: Vec<&str> = table.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 1 + 4);
    assert!(rows[2].starts_with("0.001,") && !rows[2].contains("absent"));
    assert!(rows[1].ends_with("absent,absent,absent"));
    assert!(!table.contains("map_param_error_percent=absent"));
    for f in &rep.figures {
        assert!(std::fs::read_to_string(f).unwrap().starts_with("<svg"));
    }
}

#[test]
fn f32_pipeline_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), "f32");
    cmd_gen_data::<f32>(&cfg).unwrap();
    let out = cmd_train::<f32>(&cfg).unwrap();
    assert!(out.final_total.is_finite());
}

#[test]
fn mismatched_dataset_is_schema_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), "a");
    cmd_gen_data::<f64>(&cfg).unwrap();
    let mut other = cfg.clone();
    other.mesh_n = 5;
    assert!(matches!(cmd_train::<f64>(&other), Err(Error::Schema(_))));
    let mut sensors = cfg.clone();
    sensors.sensor_seed = 99;
    assert!(matches!(cmd_train::<f64>(&sensors), Err(Error::Schema(_))));
}

#[test]
fn missing_training_data_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), "empty");
    assert!(matches!(cmd_train::<f64>(&cfg), Err(Error::Io(_))));
}

#[test]
fn verify_passes_and_writes_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), "verify");
    let out = cmd_verify(&cfg, 20_000).unwrap();
    for r in &out.rows {
        assert!(r.pass, "{} = {} ± {}", r.check, r.value, r.std_error);
    }
    assert!(out.all_pass());
    let csv = std::fs::read_to_string(cfg.output_dir.join("linear_recovery.csv")).unwrap();
    assert!(csv.starts_with("seed,mean_error,cov_error,steps,pass"));
    assert!(cfg.output_dir.join("verification.csv").exists());
}
