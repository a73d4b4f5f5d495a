//! Trains the desk tagger on a small synthetic corpus and scores the test
//! split.
//!
//! ```bash
//! cargo run --release --example train_curated -- 10
//! ```

use tagnoise::dataset::{synth_corpus, CorpusSpec, LoadedSplit, SynthClip};
use tagnoise::dsp::FeatureExtractor;
use tagnoise::tagger::{TaggerConfig, TaggerModel};
use tagnoise::trainer::{train_run, EvalSet, TrainConfig};

fn waves(clips: &[SynthClip]) -> Vec<tagnoise::dsp::Waveform> {
    clips.iter().map(|c| c.waveform.clone()).collect()
}

fn main() -> tagnoise::Result<()> {
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let spec = CorpusSpec {
        curated_per_class: 10,
        noisy_per_class: 0,
        test_per_class: 5,
        ..CorpusSpec::desk()
    };
    let corpus = synth_corpus(&spec, 7)?;
    let vocab = &corpus.vocabulary;
    let train = LoadedSplit::new(corpus.curated_manifest()?, waves(&corpus.curated_train), vocab)?;
    let test = LoadedSplit::new(corpus.test_manifest()?, waves(&corpus.test), vocab)?;
    let test_set = EvalSet::from_split(&test, &FeatureExtractor::new())?;

    let config = TrainConfig {
        total_epochs: epochs,
        lr_drop_epoch: epochs * 4 / 5,
        ..TrainConfig::desk()
    };
    let model = TaggerModel::build(TaggerConfig::desk(), 1)?;
    let run = train_run(&train, model, &config, 1, Some((&test_set, vocab)))?;
    for (e, l) in run.loss_trace.iter().enumerate() {
        println!("epoch {e:3}  lr {:.4}  loss {l:.4}", config.lr(e)?);
    }
    let report = run.report.expect("test set given");
    println!("{} steps; test MAP {:.3}  MAUC {:.3}", run.steps, report.map, report.mauc);

    let clip = &corpus.test[0];
    let probs = run.model.predict_clip(&clip.waveform)?;
    let best = (0..probs.len()).max_by(|&a, &b| probs[a].total_cmp(&probs[b])).unwrap();
    let truth: Vec<&str> = clip.record.tags.iter().map(|&t| vocab.name(t)).collect();
    println!("{}: predicted {} ({:.2}), labelled {}", clip.record.id, vocab.name(best), probs[best], truth.join(", "));
    Ok(())
}
