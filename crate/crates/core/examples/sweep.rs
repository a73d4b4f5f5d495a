//! A miniature corruption sweep through the experiment runner, followed by a
//! report table. Output lands in `sweep-demo/`.
//!
//! ```bash
//! cargo run --release --example sweep
//! ```

use tagnoise::dataset::CorpusSpec;
use tagnoise::experiment::{cmd_report, cmd_sweep, cmd_synth, cmd_train, Condition, ExperimentConfig};
use tagnoise::trainer::TrainConfig;

fn main() -> tagnoise::Result<()> {
    let root = std::path::PathBuf::from("sweep-demo");
    let corpus = root.join("corpus");
    let spec = CorpusSpec {
        curated_per_class: 6,
        noisy_per_class: 6,
        test_per_class: 3,
        max_duration_s: 4.0,
        ..CorpusSpec::desk()
    };
    cmd_synth(&spec, 3, &corpus)?;

    let base = |condition, out: &str| {
        let mut cfg = ExperimentConfig::desk(condition, &corpus, root.join(out));
        cfg.train = TrainConfig {
            total_epochs: 6,
            lr_drop_epoch: 5,
            seeds: vec![1, 2, 3],
            ..TrainConfig::desk()
        };
        cfg.sweep_rates = vec![0, 50, 100];
        cfg
    };
    let sweep = cmd_sweep(&base(Condition::Curated, "sweep"))?;
    for row in &sweep.rows {
        let agg = row.aggregate.as_ref().expect("complete suite");
        let t = row.map_test.map(|t| format!("{:+.2}", t.t)).unwrap_or_default();
        println!("r = {:3}%  MAP {}  MAUC {}  t {t}", row.r, agg.map, agg.mauc);
    }
    cmd_train(&base(Condition::Shuffled, "shuffled"))?;

    let table = cmd_report(&[root.join("sweep/r-000"), root.join("sweep/r-100"), root.join("shuffled")], root.join("report"))?;
    print!("{}", table.render_text());
    Ok(())
}
