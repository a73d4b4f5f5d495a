//! Compares backpropagated gradients of a narrow tagger with central finite
//! differences on every parameter coordinate.
//!
//! ```bash
//! cargo run --release --example gradcheck
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tagnoise::nn::{Graph, Mode, Tensor};
use tagnoise::rng::{stream_rng, Stream};
use tagnoise::tagger::{TaggerConfig, TaggerModel};

const STEP: f64 = 1e-5;

fn loss(model: &TaggerModel, x: &Tensor, y: &Tensor) -> tagnoise::Result<(Graph, tagnoise::nn::ForwardPass, tagnoise::nn::Var)> {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    // same dropout mask on every evaluation
    let pass = model.forward_graph(&mut g, xv, &mut stream_rng(0, Stream::Dropout, 0))?;
    let l = g.bce_loss(pass.output, y)?;
    Ok((g, pass, l))
}

fn main() -> tagnoise::Result<()> {
    let cfg = TaggerConfig {
        conv_channels: vec![2, 2, 3, 3, 4, 4, 4, 4],
        ..TaggerConfig::default()
    };
    let mut model = TaggerModel::build(cfg, 5)?;
    model.set_mode(Mode::Train);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::new(vec![2, 1, 8, 96], (0..2 * 8 * 96).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let y = Tensor::new(vec![2, 12], (0..24).map(|i| f64::from(u8::from(i % 7 == 0))).collect())?;

    let (mut g, pass, l) = loss(&model, &x, &y)?;
    g.backward(l)?;
    for (idx, var) in pass.param_vars.iter().enumerate() {
        let Some(var) = var else { continue };
        let analytic = g.grad(*var).expect("parameter gradient").to_vec();
        let mut worst: f64 = 0.0;
        for (j, &a) in analytic.iter().enumerate() {
            let eval = |d: f64| -> tagnoise::Result<f64> {
                let mut m = model.clone();
                m.params_mut().tensor_mut(idx).data_mut()[j] += d;
                let (g, _, l) = loss(&m, &x, &y)?;
                Ok(g.value(l).data()[0])
            };
            let numeric = (eval(STEP)? - eval(-STEP)?) / (2.0 * STEP);
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
        }
        println!("{:<18} {:5} values  max rel err {worst:.2e}", model.params().entry(idx).name, analytic.len());
    }
    Ok(())
}
