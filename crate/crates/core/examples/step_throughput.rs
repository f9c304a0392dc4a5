//! Measures training-step throughput of the toy model.
//!
//! `cargo run --release -p dualproc --example step_throughput [v] [steps]`

use std::time::Instant;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use dualproc::grammar::{sample_example, GrammarConfig, Lexicon};
use dualproc::model::{init_params, loss_and_grads, ModelConfig};
use dualproc::numerics::Rng;
use dualproc::optim::{adamw_step, AdamWConfig, OptState};

fn main() -> dualproc::Result<()> {
    let args: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let v = args.first().copied().unwrap_or(1000);
    let steps = args.get(1).copied().unwrap_or(200);
    let lex = Lexicon::new(&GrammarConfig {
        v,
        alpha: 1.0001,
        epsilon: 0.1,
        n_bins: 10,
        seed: 0,
    })?;
    let cfg = ModelConfig::toy(lex.vocab_size());
    let mut rng = Rng::new(0);
    let mut params = init_params(&cfg, &mut rng)?;
    let mut state = OptState::new(&params.tensors);
    let opt = AdamWConfig::default();
    let start = Instant::now();
    let mut loss = 0.0;
    for _ in 0..steps {
        let batch: Vec<_> = (0..64).map(|_| sample_example(&lex, &mut rng)).collect();
        let toks: Vec<_> = batch.iter().map(|e| e.tokens).collect();
        let tgts: Vec<_> = batch.iter().map(|e| e.targets).collect();
        let (l, grads) = loss_and_grads(&params, &toks, &tgts)?;
        adamw_step(&mut params.tensors, &grads, &mut state, &opt)?;
        loss = l;
    }
    let secs = start.elapsed().as_secs_f64();
    println!(
        "v={v}: {:.2} ms/step, last loss {loss:.4}",
        1e3 * secs / steps as f64
    );
    Ok(())
}
