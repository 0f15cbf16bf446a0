//! Wall time of a few desk-scale generator steps, to estimate a full run.
//! `cargo run --release -p earballs-core --example step_timing [steps]`

use std::time::Instant;

use earballs_core::datasets::{synth_audio, synth_source};
use earballs_core::training::{TrainConfig, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let steps: u64 = std::env::args()
        .nth(1)
        .map_or(5, |s| s.parse().expect("steps"));
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let src = synth_source(8, 25, 16, 0.1, &mut r).unwrap();
    let corpus = synth_audio(500, 4096, &mut r).unwrap();
    let desk = TrainConfig::desk();
    let full = desk.steps;
    let cfg = TrainConfig {
        steps,
        validate_every: 0,
        ..desk
    };
    let mut t = Trainer::new(&src, None, &corpus, cfg).unwrap();
    let start = Instant::now();
    t.run(|_, _| Ok(())).unwrap();
    let per = start.elapsed().as_secs_f64() / steps as f64;
    println!(
        "{per:.3} s per step, about {:.0} min for {full} steps",
        per * full as f64 / 60.0
    );
}
