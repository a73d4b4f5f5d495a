mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

use tagnoise::dataset::{load_manifest, SplitRole, TagVocabulary};
use tagnoise::experiment::{cmd_report, cmd_sweep, cmd_synth, cmd_train, read_suite, Condition, ExperimentConfig};
use tagnoise::noise::affected_count;
use tagnoise::trainer::TrainConfig;

fn tiny_config(condition: Condition, corpus: &Path, out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk(condition, corpus, out);
    cfg.train = TrainConfig {
        total_epochs: 2,
        lr_drop_epoch: 1,
        batch_size: 8,
        seeds: vec![1, 2],
        ..TrainConfig::desk()
    };
    cfg.label_seed = 3;
    cfg
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    rdr.records().map(|r| r.unwrap().iter().map(str::to_string).collect()).collect()
}

#[test]
fn pipeline_conditions_and_reports() {
    let root = tempfile::tempdir().unwrap();
    let corpus = root.path().join("corpus");
    let paths = cmd_synth(&common::tiny_spec(3, 4, 2), 11, &corpus).unwrap();
    let vocab = TagVocabulary::from_file(&paths.vocabulary).unwrap();
    let test_bytes = std::fs::read(&paths.test).unwrap();
    let n_curated = load_manifest(&paths.curated_train, &vocab, SplitRole::Train).unwrap().len();
    let out = |name: &str| root.path().join("runs").join(name);

    let curated = cmd_train(&tiny_config(Condition::Curated, &corpus, &out("curated"))).unwrap();
    assert!(curated.is_complete());
    for seed in [1, 2] {
        for f in ["checkpoint.bin", "loss.csv", "config.toml", "metrics.csv"] {
            assert!(out("curated").join(format!("run-{seed}")).join(f).exists(), "{f}");
        }
    }

    // r = 0 is the identity: same labels, same seeds, same runs
    let sweep_cfg = ExperimentConfig {
        sweep_rates: vec![0, 50, 100],
        ..tiny_config(Condition::Curated, &corpus, &out("sweep"))
    };
    let sweep = cmd_sweep(&sweep_cfg).unwrap();
    assert!(sweep.is_complete());
    let r0 = out("sweep").join("r-000");
    for f in ["summary.csv", "run-1/checkpoint.bin", "run-2/metrics.csv", "train_manifest.csv"] {
        assert_eq!(
            std::fs::read(r0.join(f)).unwrap(),
            std::fs::read(out("curated").join(f)).unwrap(),
            "{f}"
        );
    }
    for r in [0u32, 50, 100] {
        let audit = csv_rows(&out("sweep").join(format!("r-{r:03}")).join("corruption.csv"));
        assert_eq!(audit.len(), affected_count(f64::from(r), n_curated));
        for row in &audit {
            assert_ne!(row[1], row[2]);
        }
    }
    assert!(out("sweep").join("sweep.csv").exists());
    let sweep_txt = std::fs::read_to_string(out("sweep").join("sweep.txt")).unwrap();
    assert!(sweep_txt.contains("100"));
    assert_eq!(sweep.rows[0].map_test.unwrap().t, 0.0);

    let shuffled = cmd_train(&tiny_config(Condition::Shuffled, &corpus, &out("shuffled"))).unwrap();
    assert!(shuffled.is_complete());
    let audit = csv_rows(&out("shuffled").join("shuffle_audit.csv"));
    assert_eq!(audit.len(), n_curated);
    let mut before: Vec<&str> = audit.iter().map(|r| r[1].as_str()).collect();
    let mut after: Vec<&str> = audit.iter().map(|r| r[2].as_str()).collect();
    before.sort_unstable();
    after.sort_unstable();
    assert_eq!(before, after);

    let sub = cmd_train(&tiny_config(Condition::NoisySubsampled(None), &corpus, &out("noisy_sub"))).unwrap();
    assert!(sub.is_complete());
    let sub_train = load_manifest(out("noisy_sub").join("train_manifest.csv"), &vocab, SplitRole::Train).unwrap();
    assert_eq!(sub_train.len(), n_curated);
    assert!(sub_train.records().iter().all(|r| r.source == tagnoise::dataset::Source::Noisy));

    let mut held = tiny_config(Condition::Curated, &corpus, &out("holdout"));
    held.holdout = Some(0.25);
    cmd_train(&held).unwrap();
    let val = load_manifest(out("holdout").join("validation_manifest.csv"), &vocab, SplitRole::Train).unwrap();
    let tr = load_manifest(out("holdout").join("train_manifest.csv"), &vocab, SplitRole::Train).unwrap();
    assert_eq!(val.len(), (n_curated as f64 * 0.25).round() as usize);
    assert_eq!(val.len() + tr.len(), n_curated);

    // the test split is read, never rewritten
    assert_eq!(std::fs::read(&paths.test).unwrap(), test_bytes);

    let suites = vec![out("curated"), r0.clone(), out("shuffled"), out("noisy_sub")];
    let table = cmd_report(&suites, root.path().join("report-a")).unwrap();
    cmd_report(&suites, root.path().join("report-b")).unwrap();
    assert_eq!(table.rows.len(), 4);
    assert_eq!(table.rows[2].label, "Curated (shuffled labels)");
    for f in ["table.txt", "table.csv"] {
        assert_eq!(
            std::fs::read(root.path().join("report-a").join(f)).unwrap(),
            std::fs::read(root.path().join("report-b").join(f)).unwrap()
        );
    }
    let text = std::fs::read_to_string(root.path().join("report-a/table.txt")).unwrap();
    assert!(text.starts_with("Training Data"), "{text}");

    std::fs::remove_dir_all(out("shuffled").join("run-2")).unwrap();
    let err = read_suite(out("shuffled")).unwrap_err().to_string();
    assert!(err.contains("run-2") && !err.contains("run-1"), "{err}");
    assert!(cmd_report(&[out("shuffled")], root.path().join("report-c")).is_err());
}

#[test]
fn sweep_requires_reference_rate() {
    let root = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        sweep_rates: vec![50, 100],
        ..tiny_config(Condition::Curated, root.path(), &root.path().join("out"))
    };
    assert!(cmd_sweep(&cfg).is_err());
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tagnoise"))
}

#[test]
fn binary_exposes_all_subcommands() {
    let help = bin().arg("--help").output().unwrap();
    assert!(help.status.success());
    let text = String::from_utf8(help.stdout).unwrap();
    for sub in ["synth", "train", "sweep", "report"] {
        assert!(text.contains(sub), "{sub} missing from\n{text}");
    }
    let bad = bin().args(["train", "--condition", "corrupted:101"]).output().unwrap();
    assert!(!bad.status.success());
}

#[test]
fn binary_synth_and_print_config() {
    let root = tempfile::tempdir().unwrap();
    let corpus = root.path().join("c");
    let status = bin()
        .args(["synth", "--seed", "4", "--curated-per-class", "1", "--noisy-per-class", "1", "--test-per-class", "1"])
        .arg("--out")
        .arg(&corpus)
        .status()
        .unwrap();
    assert!(status.success());
    let files: BTreeMap<_, _> = common::snapshot(&corpus);
    assert!(files.keys().any(|p| p.ends_with("curated_train.csv")));
    assert!(files.keys().any(|p| p.ends_with("corpus.toml")));

    let out = bin()
        .args(["train", "--condition", "corrupted:35", "--print-config", "--seeds", "7,8"])
        .arg("--corpus")
        .arg(&corpus)
        .arg("--out")
        .arg(root.path().join("o"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let cfg = ExperimentConfig::from_text(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(cfg.condition, Condition::Corrupted(35));
    assert_eq!(cfg.train.seeds, [7, 8]);
}
