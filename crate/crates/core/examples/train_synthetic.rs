//! Train on a freshly synthesised dataset and print one line per epoch.
//!
//! ```text
//! cargo run --release --example train_synthetic -- [epochs] [time_steps] [base_channels]
//! ```

use std::time::Instant;

use spike_saliency::spike::dataset::Dataset;
use spike_saliency::spike::synthetic::{Scenario, SyntheticConfig};
use spike_saliency::train::{train, TrainConfig};

fn main() -> spike_saliency::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let epochs = args.first().copied().unwrap_or(3);
    let mut cfg = TrainConfig {
        epochs,
        time_steps: args.get(1).copied().unwrap_or(5),
        ..TrainConfig::default()
    };
    cfg.model.base_channels = args.get(2).copied().unwrap_or(8);

    let data = Dataset::synthesize(&Scenario::ALL, 7, &SyntheticConfig::default(), 64, 1.0)?;
    let start = Instant::now();
    train(&data, &cfg, |e| {
        println!(
            "epoch {:>3}  loss {:.4}  mse {:.4}  gap {:+.4}  val_mae {:.4}  [{:.1}s]",
            e.epoch,
            e.terms.total,
            e.terms.mse,
            e.critic_gap,
            e.val_mae.unwrap_or(f64::NAN),
            start.elapsed().as_secs_f64()
        );
        Ok(())
    })?;
    Ok(())
}
