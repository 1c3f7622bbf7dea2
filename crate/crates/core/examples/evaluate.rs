//! Train briefly, then score the validation split and print per-class
//! pixel ratios.
//!
//! ```text
//! cargo run --release --example evaluate -- [epochs]
//! ```

use spike_saliency::cli::build_net;
use spike_saliency::spike::dataset::{prepare_all, Dataset};
use spike_saliency::spike::synthetic::{Scenario, SyntheticConfig};
use spike_saliency::train::{evaluate, train, TrainConfig};

fn main() -> spike_saliency::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(4);
    let mut cfg = TrainConfig {
        epochs,
        time_steps: 3,
        ..TrainConfig::default()
    };
    cfg.model.base_channels = 4;
    let ds = Dataset::synthesize(&Scenario::ALL, 5, &SyntheticConfig::default(), 16, 1.0)?;
    let outcome = train(&ds, &cfg, |_| Ok(()))?;

    let net = build_net(&cfg, &outcome.gen)?;
    let (_, val) = ds.split();
    let prepared = prepare_all(&val, cfg.time_steps)?;
    let ev = evaluate(&net, &outcome.gen, &prepared, true)?;
    println!("{}", serde_json::to_string_pretty(&ev.report)?);
    Ok(())
}
