//! Fits a two-layer MLP to XOR with the tape, a parameter store and AdamW.
//!
//! cargo run --release --example autodiff_xor

use protodiff::nn::{Linear, ParamStore};
use protodiff::optim::{AdamW, AdamWConfig, LrSchedule};
use protodiff::rng::stream;
use protodiff::{Tape, Tensor};

fn main() -> protodiff::Result<()> {
    let x = Tensor::matrix(4, 2, vec![0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0])?;
    let y = Tensor::matrix(4, 1, vec![0.0, 1.0, 1.0, 0.0])?;

    let mut rng = stream(3, &[]);
    let mut store = ParamStore::new();
    let l1 = Linear::new(&mut store, "l1", 2, 8, &mut rng);
    let l2 = Linear::new(&mut store, "l2", 8, 1, &mut rng);
    let steps = 2000;
    let mut opt = AdamW::new(
        AdamWConfig::default().with_lr(0.05).with_weight_decay(0.0),
        LrSchedule::Cosine { total_steps: steps },
        &store,
    );

    for step in 0..steps {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape)?;
        let xi = tape.constant(x.clone())?;
        let h = l1.forward(&mut tape, &bound, xi)?;
        let h = tape.tanh(h)?;
        let logits = l2.forward(&mut tape, &bound, h)?;
        let p = tape.sigmoid(logits)?;
        let target = tape.constant(y.clone())?;
        let diff = tape.sub(p, target)?;
        let sq = tape.mul(diff, diff)?;
        let loss = tape.mean(sq)?;
        tape.backward(loss)?;
        store.accumulate_grads(&tape, &bound)?;
        opt.step(&mut store)?;
        store.zero_grad();
        if step % 500 == 0 || step == steps - 1 {
            println!("step {step:4}  mse {:.5}  lr {:.4}", tape.value(loss).item()?, opt.current_lr());
        }
        if step == steps - 1 {
            println!("predictions {:?}", tape.value(p).data().iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>());
        }
    }
    Ok(())
}
