//! End-to-end runs of the experiment commands on a tiny configuration.

use std::path::Path;

use cgc_core::cgcloss::Variant;
use cgc_core::data::SynthSpec;
use cgc_core::experiment::explain::{decode_pgm, HeatmapSidecar};
use cgc_core::experiment::{
    checkpoint_path, cmd_eval, cmd_explain, cmd_gen_data, cmd_sweep, cmd_train, DataSource,
    EpochLog, ExperimentConfig, RunOptions, FINAL_CHECKPOINT, REPORT_CSV, REPORT_JSON,
    SWEEP_CSV, SWEEP_HEADER, SWEEP_LAMBDAS, TRAIN_LOG,
};
use cgc_core::metrics::MetricsReport;
use cgc_core::nn::ModelConfig;
use cgc_core::Error;

const DET: RunOptions = RunOptions { deterministic: true };

fn tiny(variant: Variant) -> ExperimentConfig {
    let spec = SynthSpec {
        num_classes: 2,
        image_size: 16,
        train_per_class: 8,
        val_per_class: 16,
        glyph_size_range: [8, 10],
        ..SynthSpec::default()
    };
    let mut cfg = ExperimentConfig::with_synthetic(spec);
    cfg.model = ModelConfig::with_channels(1, 16, 2, &[3, 4]);
    cfg.variant = variant;
    cfg.epochs = 2;
    cfg.batch_size = 4;
    cfg.lr = 0.05;
    cfg.lambda = 0.01;
    cfg.seed = 5;
    cfg
}

fn log_lines(dir: &Path) -> Vec<EpochLog> {
    std::fs::read_to_string(dir.join(TRAIN_LOG))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

#[test]
fn baseline_training_logs_zero_consistency_and_checkpoints_each_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(Variant::Baseline);
    cfg.lambda = 5.0;
    cmd_train(&cfg, dir.path(), None).unwrap();
    let logs = log_lines(dir.path());
    assert_eq!(logs.len(), 2);
    assert!(logs.iter().all(|l| l.cgc == 0.0 && l.total == l.ce));
    for e in 1..=2 {
        assert!(checkpoint_path(dir.path(), e).exists());
    }
    assert_eq!(read(&checkpoint_path(dir.path(), 2)), read(&dir.path().join(FINAL_CHECKPOINT)));
    let saved = ExperimentConfig::load(&dir.path().join("config.json")).unwrap();
    assert_eq!(saved, cfg);
}

#[test]
fn identical_runs_are_bit_identical_and_resume_matches() {
    let cfg = tiny(Variant::Cgc);
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    cmd_train(&cfg, a.path(), None).unwrap();
    cmd_train(&cfg, b.path(), None).unwrap();
    let final_a = read(&a.path().join(FINAL_CHECKPOINT));
    assert_eq!(final_a, read(&b.path().join(FINAL_CHECKPOINT)));
    assert_eq!(read(&a.path().join(TRAIN_LOG)), read(&b.path().join(TRAIN_LOG)));

    let ra = cmd_eval(&a.path().join(FINAL_CHECKPOINT), None, a.path(), DET).unwrap();
    let rb = cmd_eval(&b.path().join(FINAL_CHECKPOINT), None, b.path(), DET).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(read(&a.path().join(REPORT_JSON)), read(&b.path().join(REPORT_JSON)));
    let threaded = cmd_eval(&a.path().join(FINAL_CHECKPOINT), None, c.path(), RunOptions { deterministic: false }).unwrap();
    assert_eq!(threaded, ra);

    // Resume from the first epoch in a fresh directory.
    let first = c.path().join("epoch1.cgct");
    std::fs::copy(checkpoint_path(a.path(), 1), &first).unwrap();
    cmd_train(&cfg, c.path(), Some(&first)).unwrap();
    assert_eq!(read(&c.path().join(FINAL_CHECKPOINT)), final_a);
    let resumed = log_lines(c.path());
    assert_eq!(resumed.len(), 1);
    assert_eq!(resumed[0], log_lines(a.path())[1]);
}

#[test]
fn resuming_under_another_config_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(Variant::Baseline);
    cmd_train(&cfg, dir.path(), None).unwrap();
    let mut other = cfg.clone();
    other.lr = 0.2;
    let ck = checkpoint_path(dir.path(), 1);
    assert!(cmd_train(&other, &dir.path().join("other"), Some(&ck)).is_err());
}

#[test]
fn evaluation_reads_but_never_writes_model_state() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(Variant::Baseline);
    cmd_train(&cfg, dir.path(), None).unwrap();
    let ck = dir.path().join(FINAL_CHECKPOINT);
    let before = read(&ck);
    let out = dir.path().join("eval");
    let report = cmd_eval(&ck, None, &out, DET).unwrap();
    assert_eq!(read(&ck), before);
    let mut files: Vec<String> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    files.sort();
    assert_eq!(files, vec![REPORT_CSV.to_string(), REPORT_JSON.to_string()]);

    let text = std::fs::read_to_string(out.join(REPORT_JSON)).unwrap();
    assert_eq!(MetricsReport::from_json(&text).unwrap(), report);
    let rows = MetricsReport::rows_from_csv(&std::fs::read_to_string(out.join(REPORT_CSV)).unwrap()).unwrap();
    assert_eq!(rows, report.rows);
    for metric in ["accuracy", "content_heatmap", "content_heatmap_pct", "heatmap_entropy", "insertion_auc"] {
        assert!(report.summary(metric).is_some(), "{metric}");
    }
    assert!(report.aggregates.contains_key("eval_cgc_loss"));
    assert_eq!(report.summary("accuracy").unwrap().n, 32);
}

#[test]
fn evaluation_of_a_missing_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let err = cmd_eval(&dir.path().join("nope.cgct"), None, dir.path(), DET).unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
}

#[test]
fn generated_files_feed_training_and_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(Variant::Baseline);
    let (train, val) = cmd_gen_data(&cfg, &dir.path().join("data")).unwrap();
    let mut from_files = cfg.clone();
    from_files.data = DataSource::Files { train, val: val.clone() };
    from_files.validate().unwrap();
    let run = dir.path().join("run");
    cmd_train(&from_files, &run, None).unwrap();
    let synthetic = dir.path().join("synthetic");
    cmd_train(&cfg, &synthetic, None).unwrap();
    // Same samples, same parameters, whatever the data source.
    let a = cgc_core::experiment::Checkpoint::load(&run.join(FINAL_CHECKPOINT)).unwrap();
    let b = cgc_core::experiment::Checkpoint::load(&synthetic.join(FINAL_CHECKPOINT)).unwrap();
    assert_eq!(a.params, b.params);
    let report = cmd_eval(&run.join(FINAL_CHECKPOINT), Some(&val), &run, DET).unwrap();
    assert_eq!(report.rows.len(), 4 * 32);
}

#[test]
fn explain_writes_parseable_heatmaps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(Variant::Baseline);
    cmd_train(&cfg, dir.path(), None).unwrap();
    let ck = dir.path().join(FINAL_CHECKPOINT);
    let ids = [16u64, 20];
    let written = cmd_explain(&ck, None, &ids, dir.path()).unwrap();
    assert_eq!(written.len(), 8);
    for id in ids {
        let stem = dir.path().join("explain").join(format!("sample_{id}"));
        for suffix in ["image", "heatmap", "overlay"] {
            let (w, h, px) = decode_pgm(&read(Path::new(&format!("{}_{suffix}.pgm", stem.display())))).unwrap();
            assert_eq!((w, h, px.len()), (16, 16, 256));
        }
        let side: HeatmapSidecar =
            serde_json::from_slice(&read(Path::new(&format!("{}_heatmap.json", stem.display())))).unwrap();
        assert_eq!(side.sample_id, id);
        assert!(side.min <= side.max);
    }
    assert!(cmd_explain(&ck, None, &[123_456], dir.path()).is_err());
}

#[test]
fn sweep_emits_one_row_per_lambda() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(Variant::Cgc);
    cfg.epochs = 1;
    let rows = cmd_sweep(&cfg, &SWEEP_LAMBDAS, dir.path(), DET).unwrap();
    assert_eq!(rows.len(), 6);
    let csv = std::fs::read_to_string(dir.path().join(SWEEP_CSV)).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], SWEEP_HEADER);
    assert_eq!(lines.len(), 7);
    for (line, lambda) in lines[1..].iter().zip(SWEEP_LAMBDAS) {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 6);
        assert_eq!(fields[0].parse::<f64>().unwrap(), lambda);
        let acc: f64 = fields[1].parse().unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
    assert!(matches!(cmd_sweep(&cfg, &[], dir.path(), DET), Err(Error::Config(_))));
    assert!(matches!(cmd_sweep(&cfg, &[-1.0], dir.path(), DET), Err(Error::Config(_))));
}
