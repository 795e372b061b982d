//! Trains on the 16-class synthetic hierarchy and prints the learned codebook.
//!
//! `cargo run --release --example synthetic16 [noise_scale]`

use std::time::Instant;

use llc_core::data::{generate_hierarchical, SyntheticSpec};
use llc_core::train::{run_llc, TrainConfig};

fn main() -> llc_core::Result<()> {
    let noise = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0.7);
    let data = generate_hierarchical(&SyntheticSpec {
        noise_scale: noise,
        ..SyntheticSpec::default()
    })?;
    let cfg = TrainConfig {
        bits: 8,
        hidden: vec![64],
        phase1_epochs: 60,
        phase2_epochs: 20,
        batch_size: 64,
        seed: 7,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let out = run_llc(&data, &cfg)?;
    let summary = out.report.summary.as_ref().expect("summary");
    let test = summary.test.as_ref().expect("test split");
    println!(
        "{} unique codes, test ED {:.3}, test MHD {:.3}, {:.1}s",
        summary.unique_codes,
        test.ed_accuracy,
        test.mhd_accuracy,
        start.elapsed().as_secs_f64()
    );
    print!("{}", out.codebook.to_text());
    Ok(())
}
