//! Compare spike fusion rules on one short training budget and print the
//! table the `ablate` subcommand writes.
//!
//! ```text
//! cargo run --release --example ablation -- [grid] [epochs]
//! ```

use spike_saliency::cli::{ablation_markdown, run_ablation};
use spike_saliency::spike::dataset::Dataset;
use spike_saliency::spike::synthetic::{Scenario, SyntheticConfig};
use spike_saliency::train::TrainConfig;

fn main() -> spike_saliency::Result<()> {
    let mut args = std::env::args().skip(1);
    let grid = args.next().unwrap_or_else(|| "fusion".into());
    let epochs = args.next().and_then(|a| a.parse().ok()).unwrap_or(2);
    let mut base = TrainConfig {
        epochs,
        time_steps: 3,
        ..TrainConfig::default()
    };
    base.model.base_channels = 4;
    let ds = Dataset::synthesize(&Scenario::ALL, 9, &SyntheticConfig::default(), 12, 1.0)?;
    let rows = run_ablation(&ds, &base, &[grid])?;
    print!("{}", ablation_markdown(&rows));
    Ok(())
}
