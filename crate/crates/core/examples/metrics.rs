//! Per-class AP and ROC AUC, their macro means, and a paired t-test between
//! two sets of per-seed scores.
//!
//! ```bash
//! cargo run --example metrics
//! ```

use tagnoise::dataset::{binarize, ClipRecord, Manifest, Source, SplitRole, TagVocabulary, N_CLASSES};
use tagnoise::eval::{evaluate, paired_t_test, MeanStd, ScoreMatrix};

fn main() -> tagnoise::Result<()> {
    let vocab = TagVocabulary::default();
    // four clips per class, one or two tags each
    let records: Vec<ClipRecord> = (0..4 * N_CLASSES)
        .map(|i| ClipRecord {
            id: format!("clip{i:02}"),
            audio_ref: format!("audio/clip{i:02}.wav"),
            tags: if i % 5 == 0 { [i % N_CLASSES, (i + 1) % N_CLASSES].into() } else { [i % N_CLASSES].into() },
            source: Source::Curated,
        })
        .collect();
    let labels = binarize(&Manifest::new(records, SplitRole::Test)?, &vocab);

    // a decent but imperfect tagger: the right class scores high, with a
    // deterministic wobble that sometimes inverts the ranking
    let scores: Vec<Vec<f64>> = (0..labels.rows())
        .map(|i| {
            (0..N_CLASSES)
                .map(|c| {
                    let wobble = ((i * 7 + c * 13) % 10) as f64 / 20.0;
                    0.5 * f64::from(labels.get(i, c)) + wobble
                })
                .collect()
        })
        .collect();
    let report = evaluate(&ScoreMatrix::from_rows(&scores)?, &labels, &vocab)?;
    for c in 0..N_CLASSES {
        println!("{:<16} AP {:.3}  AUC {:.3}", vocab.name(c), report.per_class_ap[c], report.per_class_auc[c]);
    }
    println!("MAP {:.3}  MAUC {:.3}", report.map, report.mauc);

    let clean = [0.91, 0.90, 0.92, 0.89, 0.91];
    let noisy = [0.84, 0.86, 0.83, 0.85, 0.84];
    let t = paired_t_test(&noisy, &clean)?;
    println!(
        "clean {}  noisy {}  t = {:.2} (df {}, threshold {:.3}) -> {}",
        MeanStd::of(&clean)?,
        MeanStd::of(&noisy)?,
        t.t,
        t.df,
        t.threshold,
        if t.significant { "significant" } else { "not significant" }
    );
    Ok(())
}
