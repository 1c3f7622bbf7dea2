//! Synthesise a small labelled dataset, save it, load it back and show the
//! train/validation split and one prepared network input.
//!
//! ```text
//! cargo run --release --example dataset -- [out_dir]
//! ```

use std::path::PathBuf;

use spike_saliency::spike::dataset::{prepare, Dataset};
use spike_saliency::spike::synthetic::{Scenario, SyntheticConfig};

fn main() -> spike_saliency::Result<()> {
    let out: PathBuf = std::env::args().nth(1).unwrap_or_else(|| "synthetic_ds".into()).into();
    let ds = Dataset::synthesize(&Scenario::ALL, 3, &SyntheticConfig::default(), 12, 1.0)?;
    ds.save(&out)?;
    let loaded = Dataset::load(&out)?;
    assert_eq!(loaded, ds);

    let (train, val) = loaded.split();
    println!("{} samples: {} train, {} val", loaded.samples.len(), train.len(), val.len());
    for s in &loaded.samples {
        let masks = s.masks.as_ref().map_or(0, |m| m.len());
        println!(
            "  {:<12} {:<10} {}x{}x{} ticks, {} spikes, {masks} masks",
            s.id,
            s.scenario.as_str(),
            s.stream.width(),
            s.stream.height(),
            s.stream.num_ticks(),
            s.stream.total_spikes()
        );
    }
    let p = prepare(train[0], 5)?;
    let fg = p.gt.as_ref().map_or(0.0, |g| g.iter().sum::<f64>() / g.len() as f64);
    println!("prepared `{}`: frames {:?}, foreground fraction {fg:.3}", p.id, p.frames.shape());
    Ok(())
}
