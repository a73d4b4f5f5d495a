//! Writes a small synthetic corpus: audio, three manifests and the tag
//! vocabulary.
//!
//! ```bash
//! cargo run --example synth_corpus -- /tmp/corpus
//! ```

use tagnoise::dataset::{synth_corpus, tag_stats, CorpusSpec};

fn main() -> tagnoise::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "corpus-small".into());
    let spec = CorpusSpec {
        curated_per_class: 4,
        noisy_per_class: 8,
        test_per_class: 2,
        ..CorpusSpec::desk()
    };
    let corpus = synth_corpus(&spec, 42)?;
    let paths = corpus.write(&out)?;

    for (name, m) in [
        ("curated", corpus.curated_manifest()?),
        ("noisy", corpus.noisy_manifest()?),
        ("test", corpus.test_manifest()?),
    ] {
        println!("{name:>8}: {:4} clips, {:.2} tags per clip", m.len(), tag_stats(&m)?);
    }
    let first = &corpus.curated_train[0];
    let tags: Vec<&str> = first.record.tags.iter().map(|&t| corpus.vocabulary.name(t)).collect();
    println!("first clip {} ({:.1} s): {}", first.record.id, first.waveform.duration_s(), tags.join(", "));
    println!("manifests in {}", paths.curated_train.parent().unwrap().display());
    Ok(())
}
