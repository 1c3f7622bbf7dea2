//! Recover intensity from spike intervals and compare it with the clip that
//! produced the spikes.
//!
//! ```text
//! cargo run --release --example reconstruct_tfi -- [out_dir]
//! ```

use std::path::PathBuf;

use spike_saliency::spike::image_io::write_scaled;
use spike_saliency::spike::{simulate_spikes, tfi_reconstruct, IntensityClip};

fn main() -> spike_saliency::Result<()> {
    let out: PathBuf = std::env::args().nth(1).unwrap_or_else(|| "tfi".into()).into();
    std::fs::create_dir_all(&out).map_err(|e| spike_saliency::Error::io(&out, e))?;
    let (w, h, t) = (64, 16, 80);
    // a horizontal gradient from 0.1 to 1.0
    let frame: Vec<f64> = (0..w * h).map(|i| 0.1 + 0.9 * (i % w) as f64 / (w - 1) as f64).collect();
    let lum: Vec<f64> = (0..t).flat_map(|_| frame.iter().copied()).collect();
    let stream = simulate_spikes(&IntensityClip::new(w, h, t, lum)?, 1.0)?;

    for tick in [10, 40, 70] {
        let rec = tfi_reconstruct(&stream, tick, 255.0)?;
        let norm = rec.normalized();
        let err = norm.iter().zip(&frame).map(|(a, b)| (a - b).abs()).sum::<f64>() / norm.len() as f64;
        println!("tick {tick:>2}: mean |reconstruction − luminance| = {err:.4}");
        write_scaled(&out.join(format!("tfi_{tick:04}.pgm")), w, h, &rec.values, rec.max_gray)?;
    }
    println!("frames in {}", out.display());
    Ok(())
}
