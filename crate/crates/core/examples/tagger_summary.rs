//! Layer stack and parameter counts of the default and desk taggers, and a
//! forward pass on a random 3 s input.
//!
//! ```bash
//! cargo run --example tagger_summary
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tagnoise::dsp::{Matrix, MelSpectrogram};
use tagnoise::tagger::{TaggerConfig, TaggerModel};

fn main() -> tagnoise::Result<()> {
    for (name, cfg) in [("default", TaggerConfig::default()), ("desk", TaggerConfig::desk())] {
        let model = TaggerModel::build(cfg.clone(), 0)?;
        println!("{name}: {} trainable parameters", model.parameter_count());
        for layer in cfg.layers()? {
            println!("  {layer:?}");
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data = (0..90 * 96).map(|_| rng.gen_range(-80.0..0.0)).collect();
    let features = MelSpectrogram::new(Matrix::from_vec(90, 96, data)?)?;
    let model = TaggerModel::build(TaggerConfig::desk(), 1)?;
    let probs = model.predict_features(&features)?;
    println!("untrained desk tagger on noise: {:.3?}", probs);
    Ok(())
}
