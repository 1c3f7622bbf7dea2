//! Draw loss and validation curves from a training log.
//!
//! ```text
//! cargo run --release --example plot_log -- <log.jsonl> [out_dir]
//! ```

use std::path::PathBuf;

use spike_saliency::cli::read_log;
use spike_saliency::plot::{line_chart, Series};

fn main() -> spike_saliency::Result<()> {
    let mut args = std::env::args().skip(1);
    let Some(log) = args.next() else {
        eprintln!("usage: plot_log <log.jsonl> [out_dir]");
        std::process::exit(2);
    };
    let out: PathBuf = args.next().unwrap_or_else(|| "plots".into()).into();
    std::fs::create_dir_all(&out).map_err(|e| spike_saliency::Error::io(&out, e))?;
    let epochs = read_log(log.as_ref())?;
    let series = |label: &str, f: &dyn Fn(&spike_saliency::train::EpochLog) -> f64| Series {
        label: label.to_string(),
        values: epochs.iter().map(f).collect(),
    };
    line_chart(
        &out,
        "loss",
        "training loss",
        &[series("total", &|e| e.terms.total), series("mse", &|e| e.terms.mse)],
    )?;
    line_chart(&out, "critic_gap", "critic gap", &[series("gap", &|e| e.critic_gap)])?;
    println!("{} epochs plotted into {}", epochs.len(), out.display());
    Ok(())
}
