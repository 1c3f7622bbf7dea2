//! Integrate-and-fire a moving bright square, write it as a `.spk` file and
//! read a single frame back by seeking.
//!
//! ```text
//! cargo run --release --example simulate_codec -- [out.spk]
//! ```

use std::fs::File;
use std::io::BufReader;

use spike_saliency::spike::codec::{encode_stream, SpikeReader};
use spike_saliency::spike::{simulate_spikes, IntensityClip};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "square.spk".into());
    let (w, h, t) = (48, 32, 64);
    let mut lum = vec![0.15; w * h * t];
    for tick in 0..t {
        let x0 = 4 + tick / 4;
        for y in 10..22 {
            for x in x0..x0 + 12 {
                lum[tick * w * h + y * w + x] = 0.9;
            }
        }
    }
    let clip = IntensityClip::new(w, h, t, lum)?;
    let stream = simulate_spikes(&clip, 2.0)?;
    let counts = stream.spike_counts();
    println!(
        "{} spikes over {t} ticks; background pixel fired {}, square pixel fired {}",
        stream.total_spikes(),
        counts[0],
        counts[16 * w + 20]
    );

    let bytes = encode_stream(&stream);
    std::fs::write(&out, &bytes)?;
    println!("wrote {out} ({} bytes, {} per frame)", bytes.len(), stream.frame_bytes());

    let mut reader = SpikeReader::new(BufReader::new(File::open(&out)?))?;
    let packed = reader.seek_frame(40)?;
    assert_eq!(packed, stream.packed_frame(40));
    println!("tick 40 read back by seeking: {} set bits", packed.iter().map(|b| b.count_ones()).sum::<u32>());
    Ok(())
}
