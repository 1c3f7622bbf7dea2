//! Count synaptic operations of an untrained network at several numbers of
//! time steps and convert them to energy.
//!
//! ```text
//! cargo run --release --example energy -- [max_steps]
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use spike_saliency::cli::energy_rows;
use spike_saliency::model::{ModelConfig, SaliencyNet};
use spike_saliency::params::ParamStore;
use spike_saliency::spike::dataset::Dataset;
use spike_saliency::spike::synthetic::{Scenario, SyntheticConfig};

fn main() -> spike_saliency::Result<()> {
    let max_steps: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(5);
    let mut store = ParamStore::new();
    let net = SaliencyNet::new(&mut store, ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(0))?;
    let ds = Dataset::synthesize(&Scenario::ALL, 1, &SyntheticConfig::default(), 2, 1.0)?;
    let steps: Vec<usize> = (1..=max_steps).collect();
    for r in energy_rows(&net, &store, &ds, &steps, 2)? {
        println!("T={}  AC {:>12.0}  MAC {:>12.0}  {:.6} mJ", r.time_steps, r.ac, r.mac, r.energy_mj);
    }
    Ok(())
}
