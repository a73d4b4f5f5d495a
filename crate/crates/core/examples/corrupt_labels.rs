//! Corrupts r% of a manifest's clips by swapping one tag each, then shuffles
//! the label sets, printing what changed.
//!
//! ```bash
//! cargo run --example corrupt_labels -- 30
//! ```

use tagnoise::dataset::{synth_corpus, CorpusSpec};
use tagnoise::noise::{corrupt_labels, shuffle_labels};
use tagnoise::rng::{stream_rng, Stream};

fn main() -> tagnoise::Result<()> {
    let r: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(30.0);
    let spec = CorpusSpec {
        curated_per_class: 2,
        noisy_per_class: 0,
        test_per_class: 1,
        max_duration_s: 2.0,
        ..CorpusSpec::desk()
    };
    let corpus = synth_corpus(&spec, 1)?;
    let vocab = &corpus.vocabulary;
    let manifest = corpus.curated_manifest()?;

    let (corrupted, plan) = corrupt_labels(&manifest, r, &mut stream_rng(0, Stream::Labels, 0))?;
    println!("{r}% of {} clips -> {} replacements", manifest.len(), plan.len());
    for rep in plan.replacements.iter().take(8) {
        println!("  {:<12} {} -> {}", rep.id, vocab.name(rep.removed), vocab.name(rep.inserted));
    }
    let changed = manifest
        .records()
        .iter()
        .zip(corrupted.records())
        .filter(|(a, b)| a.tags != b.tags)
        .count();
    println!("clips with changed labels: {changed}");

    let shuffled = shuffle_labels(&manifest, &mut stream_rng(0, Stream::Labels, 1))?;
    let kept = manifest
        .records()
        .iter()
        .zip(shuffled.records())
        .filter(|(a, b)| a.tags == b.tags)
        .count();
    println!("after shuffling, {kept} of {} clips kept their own label set", manifest.len());
    Ok(())
}
