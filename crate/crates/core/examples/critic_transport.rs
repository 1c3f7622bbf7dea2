//! Fit a gradient-penalised critic between two 1-D Gaussians and compare its
//! transport estimate with the exact earth mover's distance of the samples.
//!
//! ```text
//! cargo run --release --example critic_transport -- [steps]
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spike_saliency::autodiff::Graph;
use spike_saliency::global::{em_exact_1d, f_net_loss, Critic};
use spike_saliency::optim::Adam;
use spike_saliency::params::{Binder, ParamStore};
use spike_saliency::Tensor;

// Box-Muller
fn normal<R: Rng>(rng: &mut R, mu: f64, sd: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let (u1, u2): (f64, f64) = (rng.gen::<f64>().max(1e-12), rng.gen());
            mu + sd * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect()
}

fn main() -> spike_saliency::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(1500);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let critic = Critic::conv(&mut store, &mut rng)?;
    let mut opt = Adam::new(5e-3, 0.0)?;
    let sample = |rng: &mut ChaCha8Rng, mu: f64, n: usize| Tensor::new(&[n, 1, 1, 1], normal(rng, mu, 0.3, n));

    for step in 0..steps {
        let (t, p) = (sample(&mut rng, 2.0, 64)?, sample(&mut rng, 0.5, 64)?);
        let mut g = Graph::new();
        let mut b = Binder::new(&store);
        let out = f_net_loss(&mut g, &critic, &mut b, &t, &p, 10.0, &mut rng)?;
        g.backward(out.loss)?;
        let grads = b.grads(&g);
        opt.step(&mut store, &grads);
        if step % 250 == 0 {
            println!("step {step:>5}  gap {:+.4}  penalty {:.4}", out.gap, out.penalty);
        }
    }

    let (t, p) = (sample(&mut rng, 2.0, 4096)?, sample(&mut rng, 0.5, 4096)?);
    let mut g = Graph::new();
    let mut b = Binder::frozen(&store);
    let est = f_net_loss(&mut g, &critic, &mut b, &t, &p, 0.0, &mut rng)?.gap;
    let (mut ts, mut ps) = (t.data().to_vec(), p.data().to_vec());
    ts.sort_by(f64::total_cmp);
    ps.sort_by(f64::total_cmp);
    let exact = ts.iter().zip(&ps).map(|(a, c)| (a - c).abs()).sum::<f64>() / ts.len() as f64;
    println!("critic estimate {est:.4}, exact {exact:.4}");

    // the same distance on histograms has a closed form
    let h = |mu: f64| -> Vec<f64> { (0..8).map(|i| (-((i as f64 - mu).powi(2)) / 2.0).exp()).collect() };
    let (hp, hq) = (h(2.0), h(4.5));
    let (sp, sq) = (hp.iter().sum::<f64>(), hq.iter().sum::<f64>());
    let hp: Vec<f64> = hp.iter().map(|v| v / sp).collect();
    let hq: Vec<f64> = hq.iter().map(|v| v / sq).collect();
    println!("histogram EM over 8 bins: {:.4}", em_exact_1d(&hp, &hq)?);
    Ok(())
}
