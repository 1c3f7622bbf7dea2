//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the verdict lines always reach the
//! output. `ACCEPTANCE_ONLY=1,5,7` restricts the run to some criteria.

mod common;

use std::io::Cursor;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spike_saliency::autodiff::gradcheck::GradCheck;
use spike_saliency::autodiff::{Graph, SurrogateSpec, Var};
use spike_saliency::cli::energy_rows;
use spike_saliency::energy::conv_ac_count;
use spike_saliency::global::{em_exact_1d, f_net_loss, Critic, DistanceKind};
use spike_saliency::metrics;
use spike_saliency::micro::Fusion;
use spike_saliency::model::{ModelConfig, SaliencyNet};
use spike_saliency::optim::Adam;
use spike_saliency::params::{Binder, ParamStore};
use spike_saliency::snn::{lif_step, LifConfig, LifState};
use spike_saliency::spike::codec::{decode_stream, encode_stream, SpikeReader};
use spike_saliency::spike::dataset::Dataset;
use spike_saliency::spike::synthetic::{Scenario, SyntheticConfig};
use spike_saliency::spike::{simulate_spikes, tfi_reconstruct, IntensityClip, SpikeStream};
use spike_saliency::train::{energy_estimate, train, TrainConfig};
use spike_saliency::Tensor;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

type Criterion = (usize, &'static str, fn() -> Outcome);

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let criteria: [Criterion; 10] = [
        (1, "gradient integrity", c1_gradients),
        (2, "LIF exactness", c2_lif),
        (3, "spike conservation", c3_conservation),
        (4, "codec round trip and seek", c4_codec),
        (5, "TFI on constant streams", c5_tfi),
        (6, "metric oracles", c6_metrics),
        (7, "optimal transport", c7_transport),
        (8, "directional ordering", c8_directional),
        (9, "energy estimator", c9_energy),
        (10, "determinism", c10_determinism),
    ];
    let mut failed = Vec::new();
    for (id, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let verdict = if res.pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {id:>2} {name}: {verdict} ({}) [{:.1}s]",
            res.detail,
            start.elapsed().as_secs_f64()
        );
        if !res.pass {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}

// ---- 1 -----------------------------------------------------------------------

const POINTS: usize = 100;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::uniform(shape, lo, hi, rng)
}

/// Uniform in `±[lo, hi]`, so the point stays clear of a kink at zero.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let d = (0..n)
        .map(|_| {
            let m = rng.gen_range(lo..hi);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, d).unwrap()
}

/// Values spaced at least `gap` apart, shuffled, so max-pool windows have no ties.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut d: Vec<f64> = (0..n).map(|i| i as f64 * gap + rng.gen_range(0.0..gap * 0.5)).collect();
    for i in (1..n).rev() {
        d.swap(i, rng.gen_range(0..=i));
    }
    Tensor::new(shape, d.into_iter().map(|v| v - n as f64 * gap / 2.0).collect()).unwrap()
}

type Gen = Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>>;
type OpFn = Box<dyn Fn(&mut Graph, &[Var]) -> spike_saliency::Result<Var>>;

fn gen_uniform(shapes: &'static [&'static [usize]], lo: f64, hi: f64) -> Gen {
    Box::new(move |r| shapes.iter().map(|s| uniform(r, s, lo, hi)).collect())
}

fn grad_cases() -> Vec<(&'static str, Gen, OpFn)> {
    const M23: &[&[usize]] = &[&[2, 3], &[2, 3]];
    const V23: &[&[usize]] = &[&[2, 3]];
    vec![
        ("add", gen_uniform(M23, -2.0, 2.0), Box::new(|g, v| g.add(v[0], v[1]))),
        ("sub", gen_uniform(M23, -2.0, 2.0), Box::new(|g, v| g.sub(v[0], v[1]))),
        ("mul", gen_uniform(M23, -2.0, 2.0), Box::new(|g, v| g.mul(v[0], v[1]))),
        (
            "div",
            Box::new(|r| vec![uniform(r, &[2, 3], -2.0, 2.0), off_zero(r, &[2, 3], 0.5, 2.0)]),
            Box::new(|g, v| g.div(v[0], v[1])),
        ),
        (
            "maximum",
            Box::new(|r| {
                let a = uniform(r, &[2, 3], -2.0, 2.0);
                let d = off_zero(r, &[2, 3], 0.01, 1.0);
                let b = Tensor::new(&[2, 3], a.data().iter().zip(d.data()).map(|(x, y)| x + y).collect()).unwrap();
                vec![a, b]
            }),
            Box::new(|g, v| g.maximum(v[0], v[1])),
        ),
        ("scale", gen_uniform(V23, -2.0, 2.0), Box::new(|g, v| Ok(g.scale(v[0], -1.7)))),
        ("add_scalar", gen_uniform(V23, -2.0, 2.0), Box::new(|g, v| Ok(g.add_scalar(v[0], 0.3)))),
        ("neg", gen_uniform(V23, -2.0, 2.0), Box::new(|g, v| Ok(g.neg(v[0])))),
        ("sigmoid", gen_uniform(V23, -4.0, 4.0), Box::new(|g, v| Ok(g.sigmoid(v[0])))),
        ("exp", gen_uniform(V23, -2.0, 2.0), Box::new(|g, v| Ok(g.exp(v[0])))),
        ("log", gen_uniform(V23, 0.1, 3.0), Box::new(|g, v| Ok(g.log(v[0])))),
        ("sqrt", gen_uniform(V23, 0.1, 3.0), Box::new(|g, v| Ok(g.sqrt(v[0])))),
        ("relu", Box::new(|r| vec![off_zero(r, &[2, 3], 0.01, 2.0)]), Box::new(|g, v| Ok(g.relu(v[0])))),
        (
            "leaky_relu",
            Box::new(|r| vec![off_zero(r, &[2, 3], 0.01, 2.0)]),
            Box::new(|g, v| Ok(g.leaky_relu(v[0], 0.2))),
        ),
        (
            "add_channel",
            Box::new(|r| vec![uniform(r, &[2, 3, 2, 2], -1.0, 1.0), uniform(r, &[3], -1.0, 1.0)]),
            Box::new(|g, v| g.add_channel(v[0], v[1])),
        ),
        (
            "mul_channel",
            Box::new(|r| vec![uniform(r, &[2, 3, 2, 2], -1.0, 1.0), uniform(r, &[3], -1.0, 1.0)]),
            Box::new(|g, v| g.mul_channel(v[0], v[1])),
        ),
        ("matmul", gen_uniform(&[&[3, 4], &[4, 2]], -1.0, 1.0), Box::new(|g, v| g.matmul(v[0], v[1]))),
        ("bmm", gen_uniform(&[&[2, 3, 4], &[2, 4, 2]], -1.0, 1.0), Box::new(|g, v| g.bmm(v[0], v[1]))),
        ("permute", gen_uniform(&[&[2, 3, 4]], -1.0, 1.0), Box::new(|g, v| g.permute(v[0], &[2, 0, 1]))),
        ("reshape", gen_uniform(&[&[2, 6]], -1.0, 1.0), Box::new(|g, v| g.reshape(v[0], &[3, 4]))),
        ("concat", gen_uniform(&[&[2, 3], &[2, 2]], -1.0, 1.0), Box::new(|g, v| g.concat(&[v[0], v[1]], 1))),
        ("narrow", gen_uniform(&[&[3, 5]], -1.0, 1.0), Box::new(|g, v| g.narrow(v[0], 1, 1, 3))),
        ("index_first", gen_uniform(&[&[3, 2, 2]], -1.0, 1.0), Box::new(|g, v| g.index_first(v[0], 1))),
        ("stack_first", gen_uniform(&[&[2, 2], &[2, 2]], -1.0, 1.0), Box::new(|g, v| g.stack_first(&[v[0], v[1]]))),
        ("sum_last", gen_uniform(&[&[3, 4]], -1.0, 1.0), Box::new(|g, v| g.sum_last(v[0]))),
        ("broadcast_last", gen_uniform(&[&[3, 1]], -1.0, 1.0), Box::new(|g, v| g.broadcast_last(v[0], 4))),
        ("sum_all", gen_uniform(&[&[3, 4]], -1.0, 1.0), Box::new(|g, v| Ok(g.sum_all(v[0])))),
        ("mean_all", gen_uniform(&[&[3, 4]], -1.0, 1.0), Box::new(|g, v| Ok(g.mean_all(v[0])))),
        ("softmax", gen_uniform(&[&[3, 5]], -2.0, 2.0), Box::new(|g, v| g.softmax(v[0]))),
        (
            "conv2d",
            gen_uniform(&[&[1, 2, 6, 6], &[3, 2, 3, 3], &[3]], -1.0, 1.0),
            Box::new(|g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 1)),
        ),
        (
            "conv2d_nobias",
            gen_uniform(&[&[2, 1, 5, 5], &[2, 1, 3, 3]], -1.0, 1.0),
            Box::new(|g, v| g.conv2d(v[0], v[1], None, 1, 0)),
        ),
        (
            "conv_transpose2d",
            gen_uniform(&[&[1, 3, 3, 3], &[3, 2, 3, 3]], -1.0, 1.0),
            Box::new(|g, v| g.conv_transpose2d(v[0], v[1], 2, 1, (6, 6))),
        ),
        (
            "dwconv2d",
            gen_uniform(&[&[1, 3, 5, 5], &[3, 1, 3, 3]], -1.0, 1.0),
            Box::new(|g, v| g.dwconv2d(v[0], v[1], 1, 1)),
        ),
        (
            "maxpool2d",
            Box::new(|r| vec![distinct(r, &[1, 2, 4, 4], 0.05)]),
            Box::new(|g, v| g.maxpool2d(v[0], 2)),
        ),
        (
            "upsample_bilinear",
            gen_uniform(&[&[1, 2, 3, 3]], -1.0, 1.0),
            Box::new(|g, v| g.upsample_bilinear(v[0], 6, 5)),
        ),
        (
            "batchnorm_train",
            Box::new(|r| {
                vec![
                    uniform(r, &[3, 2, 2, 2], -1.0, 1.0),
                    uniform(r, &[2], 0.5, 1.5),
                    uniform(r, &[2], -0.5, 0.5),
                ]
            }),
            Box::new(|g, v| g.batchnorm_train(v[0], v[1], v[2], 1e-5).map(|(y, _, _)| y)),
        ),
        ("mse", gen_uniform(M23, -1.0, 1.0), Box::new(|g, v| g.mse(v[0], v[1]))),
        (
            "bce",
            Box::new(|r| vec![uniform(r, &[2, 3], 0.05, 0.95), uniform(r, &[2, 3], 0.0, 1.0)]),
            Box::new(|g, v| g.bce(v[0], v[1], 1e-7)),
        ),
        (
            "grad_graph_dense",
            gen_uniform(&[&[2, 3], &[3, 4], &[4]], -1.0, 1.0),
            Box::new(|g, v| {
                let h = g.matmul(v[0], v[1])?;
                let h = g.add_channel(h, v[2])?;
                let h = g.sigmoid(h);
                let y = g.sum_all(h);
                let gx = g.grad_graph(y, v[0])?;
                g.mul(gx, gx)
            }),
        ),
        (
            "grad_graph_conv",
            gen_uniform(&[&[2, 1, 4, 4], &[2, 1, 3, 3], &[2]], -1.0, 1.0),
            Box::new(|g, v| {
                let h = g.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
                let h = g.sigmoid(h);
                let y = g.mean_all(h);
                let gx = g.grad_graph(y, v[0])?;
                let sq = g.mul(gx, gx)?;
                let s = g.reshape(sq, &[2, 16])?;
                g.sum_last(s)
            }),
        ),
    ]
}

fn c1_gradients() -> Outcome {
    let start = Instant::now();
    let check = GradCheck::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = (0.0f64, String::new());
    let mut failures = Vec::new();
    let cases = grad_cases();
    for (name, gen, op) in &cases {
        for _ in 0..POINTS {
            let inputs = gen(&mut rng);
            let rep = match check.run(name, &inputs, |g, v| op(g, v)) {
                Ok(r) => r,
                Err(e) => return outcome(false, format!("{name}: {e}")),
            };
            if rep.max_rel_err > worst.0 {
                worst = (rep.max_rel_err, name.to_string());
            }
            if !rep.passed() {
                failures.push(rep.to_string());
                break;
            }
        }
    }
    // The spiking nonlinearity has no finite-difference derivative; its
    // backward must equal the surrogate window instead.
    let spec = SurrogateSpec::default();
    for _ in 0..POINTS {
        let u = uniform(&mut rng, &[8], -1.5, 1.5);
        let mut g = Graph::new();
        let x = g.variable(u.clone());
        let s = g.heaviside(x, 0.2, spec);
        let y = g.sum_all(s);
        g.backward(y).unwrap();
        let grad = g.grad_tensor(x);
        for (i, &ui) in u.data().iter().enumerate() {
            if grad.data()[i] != spec.derivative(ui - 0.2) || g.value(s).data()[i] != f64::from(ui > 0.2) {
                failures.push(format!("heaviside at u = {ui}"));
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = failures.is_empty() && elapsed < Duration::from_secs(120);
    outcome(
        pass,
        format!(
            "{} ops x {POINTS} points plus heaviside surrogate; worst rel err {:.2e} ({}); {:.1}s{}",
            cases.len(),
            worst.0,
            worst.1,
            elapsed.as_secs_f64(),
            if failures.is_empty() { String::new() } else { format!("; failures: {}", failures.join(" | ")) }
        ),
    )
}

// ---- 2 -----------------------------------------------------------------------

fn c2_lif() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut bad = 0usize;
    let mut fired = 0usize;
    for _ in 0..10_000 {
        let u: f64 = rng.gen_range(-2.0..2.0);
        let c: f64 = rng.gen_range(-2.0..2.0);
        let theta: f64 = rng.gen_range(0.05..2.0);
        let v_reset: f64 = rng.gen_range(-1.0..0.5);
        let cfg = LifConfig {
            threshold: theta,
            v_reset,
            ..LifConfig::default()
        };
        let mut g = Graph::new();
        let state = LifState {
            u: g.constant(Tensor::new(&[1], vec![u]).unwrap()),
        };
        let cur = g.constant(Tensor::new(&[1], vec![c]).unwrap());
        let (s, next) = lif_step(&mut g, state, cur, &cfg).unwrap();
        let (spike, v) = (g.value(s).item(), g.value(next.u).item());
        let integrated = u + c;
        let ok = if integrated > theta {
            fired += 1;
            spike == 1.0 && v == v_reset
        } else {
            spike == 0.0 && v == integrated
        };
        bad += usize::from(!ok);
    }
    outcome(bad == 0, format!("10000 tuples, {fired} fired, {bad} mismatches"))
}

// ---- 3 -----------------------------------------------------------------------

fn c3_conservation() -> Outcome {
    // Luminance and threshold on a 1/256 grid keep every partial sum exact.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut bad = 0usize;
    for _ in 0..1000 {
        let (w, h, t) = (rng.gen_range(1..=8), rng.gen_range(1..=8), rng.gen_range(1..=64));
        let kind = rng.gen_range(0..3);
        let per_pixel: Vec<u32> = (0..w * h).map(|_| rng.gen_range(0..=256)).collect();
        let lum: Vec<f64> = (0..t * w * h)
            .map(|i| {
                let q = match kind {
                    0 => per_pixel[i % (w * h)],
                    1 => rng.gen_range(0..=256),
                    _ => {
                        if rng.gen_bool(0.3) {
                            0
                        } else {
                            rng.gen_range(0..=256)
                        }
                    }
                };
                q as f64 / 256.0
            })
            .collect();
        let theta = rng.gen_range(256..=1024) as f64 / 256.0;
        let clip = IntensityClip::new(w, h, t, lum.clone()).unwrap();
        let stream = simulate_spikes(&clip, theta).unwrap();
        let counts = stream.spike_counts();
        for p in 0..w * h {
            let integral: f64 = (0..t).map(|k| lum[k * w * h + p]).sum();
            let n = counts[p] as f64;
            if !(n * theta <= integral && integral < (n + 1.0) * theta) {
                bad += 1;
            }
        }
    }
    outcome(bad == 0, format!("1000 clips, {bad} pixels out of bounds"))
}

// ---- 4 -----------------------------------------------------------------------

fn random_stream(rng: &mut ChaCha8Rng, w: usize, h: usize, t: usize) -> SpikeStream {
    let density = rng.gen_range(0..4);
    let n = w * h * t;
    let mut bits = Vec::with_capacity(n);
    while bits.len() < n {
        let mut word = rng.next_u64();
        if density == 0 {
            word &= rng.next_u64() & rng.next_u64();
        } else if density == 1 {
            word |= rng.next_u64();
        }
        for b in 0..64 {
            if bits.len() == n {
                break;
            }
            bits.push(density != 3 && (word >> b) & 1 == 1);
        }
    }
    SpikeStream::from_bools(w, h, t, &bits).unwrap()
}

fn c4_codec() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut bad = Vec::new();
    let mut bytes_total = 0usize;
    for i in 0..500 {
        let (w, h, t) = if i == 0 {
            (400, 250, 128)
        } else {
            (rng.gen_range(1..=400), rng.gen_range(1..=250), rng.gen_range(1..=128))
        };
        let s = random_stream(&mut rng, w, h, t);
        let enc = encode_stream(&s);
        bytes_total += enc.len();
        match decode_stream(&enc) {
            Ok(d) if d == s => {}
            _ => bad.push(format!("round trip {w}x{h}x{t}")),
        }
        let tick = rng.gen_range(0..t);
        let mut reader = SpikeReader::new(Cursor::new(&enc)).unwrap();
        if reader.seek_frame(tick).ok().as_deref() != Some(s.packed_frame(tick)) {
            bad.push(format!("seek {w}x{h}x{t} tick {tick}"));
        }
    }
    outcome(
        bad.is_empty(),
        format!("500 streams, {:.0} MB encoded, {} failures {}", bytes_total as f64 / 1e6, bad.len(), bad.join(", ")),
    )
}

// ---- 5 -----------------------------------------------------------------------

fn c5_tfi() -> Outcome {
    let m = 255.0;
    let mut bad = Vec::new();
    let mut checked = 0usize;
    for k in 1..=16usize {
        for lum in [1.0, 0.5, 0.25] {
            let theta = k as f64 * lum;
            let (w, h, t) = (3, 2, 4 * k + 9);
            let clip = IntensityClip::constant(w, h, t, lum).unwrap();
            let s = simulate_spikes(&clip, theta).unwrap();
            let ticks: Vec<usize> = (0..t).filter(|&i| s.get(i, 0)).collect();
            if ticks.windows(2).any(|p| p[1] - p[0] != k) || ticks.len() < 2 {
                bad.push(format!("k={k} spacing"));
                continue;
            }
            let (first, last) = (ticks[0], *ticks.last().unwrap());
            for tick in first..last {
                let f = tfi_reconstruct(&s, tick, m).unwrap();
                checked += 1;
                if f.values.iter().any(|&v| v != m / k as f64) {
                    bad.push(format!("k={k} lum={lum} tick={tick}"));
                }
            }
        }
    }
    outcome(bad.is_empty(), format!("k = 1..16, {checked} interior frames, failures: {:?}", bad))
}

// ---- 6 -----------------------------------------------------------------------

fn c6_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = [0.0f64; 5];
    for _ in 0..200 {
        let (p, g) = common::random_pair(&mut rng, 64);
        let errs = [
            (metrics::mae(&p, &g).unwrap() - common::naive_mae(&p, &g)).abs(),
            (metrics::mean_f_beta(&p, &g).unwrap() - common::naive_mean_f(&p, &g)).abs(),
            (metrics::max_f_beta(&p, &g).unwrap() - common::naive_max_f(&p, &g)).abs(),
            (metrics::psnr(&p, &g).unwrap() - common::naive_psnr(&p, &g)).abs(),
            (metrics::ssim(&p, &g, 8, 8).unwrap() - common::naive_ssim(&p, &g, 8, 8)).abs(),
        ];
        for (w, e) in worst.iter_mut().zip(errs) {
            *w = w.max(if e.is_nan() { f64::INFINITY } else { e });
        }
    }
    let worked = metrics::f_beta_from_pr(0.5, 0.5);
    let pass = worst[..4].iter().all(|&e| e < 1e-10) && worst[4] < 1e-6 && (worked - 0.5).abs() < 1e-15;
    outcome(
        pass,
        format!(
            "200 pairs; max abs err mae {:.1e}, meanF {:.1e}, maxF {:.1e}, psnr {:.1e}, ssim {:.1e}; F(P=R=0.5) = {worked}",
            worst[0], worst[1], worst[2], worst[3], worst[4]
        ),
    )
}

// ---- 7 -----------------------------------------------------------------------

fn random_hist(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.2) { 0.0 } else { rng.gen::<f64>() }).collect();
    let s: f64 = raw.iter().sum();
    if s == 0.0 {
        let mut v = vec![0.0; n];
        v[0] = 1.0;
        return v;
    }
    raw.iter().map(|v| v / s).collect()
}

/// Train the default critic to separate two shifted 1-D Gaussians.
fn critic_estimate() -> (f64, f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut store = ParamStore::new();
    let critic = Critic::conv(&mut store, &mut rng).unwrap();
    let mut opt = Adam::new(5e-3, 0.0).unwrap();
    let (mu_p, mu_t, sd) = (0.5, 2.5, 0.3);
    let draw = |rng: &mut ChaCha8Rng, mu: f64, n: usize| -> Vec<f64> {
        (0..n)
            .map(|_| {
                let (u1, u2): (f64, f64) = (rng.gen::<f64>().max(1e-12), rng.gen());
                mu + sd * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            })
            .collect()
    };
    let steps = 2000;
    for _ in 0..steps {
        let t = Tensor::new(&[64, 1, 1, 1], draw(&mut rng, mu_t, 64)).unwrap();
        let p = Tensor::new(&[64, 1, 1, 1], draw(&mut rng, mu_p, 64)).unwrap();
        let mut g = Graph::new();
        let mut b = Binder::new(&store);
        let out = f_net_loss(&mut g, &critic, &mut b, &t, &p, 10.0, &mut rng).unwrap();
        g.backward(out.loss).unwrap();
        let grads = b.grads(&g);
        opt.step(&mut store, &grads);
    }
    let n = 4096;
    let mut ts = draw(&mut rng, mu_t, n);
    let mut ps = draw(&mut rng, mu_p, n);
    let t = Tensor::new(&[n, 1, 1, 1], ts.clone()).unwrap();
    let p = Tensor::new(&[n, 1, 1, 1], ps.clone()).unwrap();
    let mut g = Graph::new();
    let mut b = Binder::frozen(&store);
    let est = f_net_loss(&mut g, &critic, &mut b, &t, &p, 0.0, &mut rng).unwrap().gap;
    ts.sort_by(f64::total_cmp);
    ps.sort_by(f64::total_cmp);
    let exact = ts.iter().zip(&ps).map(|(a, c)| (a - c).abs()).sum::<f64>() / n as f64;
    (est, exact, steps)
}

fn c7_transport() -> Outcome {
    let hists = common::compositions(4, 4);
    let mut worst_lp = 0.0f64;
    for a in &hists {
        for b in &hists {
            let lp = common::brute_force_em(a, b) as f64 / 4.0;
            let pa: Vec<f64> = a.iter().map(|&v| v as f64 / 4.0).collect();
            let pb: Vec<f64> = b.iter().map(|&v| v as f64 / 4.0).collect();
            worst_lp = worst_lp.max((em_exact_1d(&pa, &pb).unwrap() - lp).abs());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut axiom_failures = 0usize;
    for _ in 0..1000 {
        let n = rng.gen_range(2..=16);
        let (p, q, r) = (random_hist(&mut rng, n), random_hist(&mut rng, n), random_hist(&mut rng, n));
        let d = |x: &[f64], y: &[f64]| em_exact_1d(x, y).unwrap();
        let ok = d(&p, &p) == 0.0
            && d(&p, &q) >= 0.0
            && (d(&p, &q) - d(&q, &p)).abs() < 1e-12
            && d(&p, &r) <= d(&p, &q) + d(&q, &r) + 1e-12
            && (p == q || d(&p, &q) > 0.0);
        axiom_failures += usize::from(!ok);
    }
    let t0 = Instant::now();
    let (est, exact, steps) = critic_estimate();
    let rel = (est - exact).abs() / exact;
    let secs = t0.elapsed().as_secs_f64();
    let pass = worst_lp < 1e-12 && axiom_failures == 0 && rel <= 0.2 && secs < 60.0;
    outcome(
        pass,
        format!(
            "{} histogram pairs, max |em - LP| {worst_lp:.1e}; {axiom_failures} axiom failures in 1000 triples; \
             critic {est:.4} vs exact {exact:.4} (rel err {:.1}%) after {steps} steps in {secs:.1}s",
            hists.len() * hists.len(),
            rel * 100.0
        ),
    )
}

// ---- 8 -----------------------------------------------------------------------

const C8_EPOCHS: usize = 25;
const C8_TAIL: usize = 5;
const C8_SEEDS: [u64; 3] = [0, 1, 2];

/// Mean validation MAE over the last few epochs.
fn tail_mae(data: &Dataset, cfg: &TrainConfig) -> f64 {
    let out = train(data, cfg, |_| Ok(())).unwrap();
    let tail: Vec<f64> = out.log.iter().rev().take(C8_TAIL).map(|e| e.val_mae.unwrap()).collect();
    tail.iter().sum::<f64>() / tail.len() as f64
}

fn c8_directional() -> Outcome {
    let data = Dataset::synthesize(&Scenario::ALL, 7, &SyntheticConfig::default(), 64, 1.0).unwrap();
    let mut wins = [0usize; 4];
    let mut lines = Vec::new();
    for seed in C8_SEEDS {
        let base = TrainConfig {
            epochs: C8_EPOCHS,
            seed,
            ..TrainConfig::default()
        };
        let run = |edit: &dyn Fn(&mut TrainConfig)| {
            let mut c = base.clone();
            edit(&mut c);
            tail_mae(&data, &c)
        };
        let full = run(&|_| {});
        let single = run(&|c| c.time_steps = 1);
        let no_sg = run(&|c| c.sg = false);
        let or = run(&|c| c.model.attention.fusion = Fusion::Or);
        let js = run(&|c| c.distance = DistanceKind::Js);
        let claims = [full <= single, full <= no_sg, full <= or, full <= js];
        for (w, c) in wins.iter_mut().zip(claims) {
            *w += usize::from(c);
        }
        lines.push(format!(
            "seed {seed}: full {full:.4}, T=1 {single:.4}, no-SG {no_sg:.4}, OR {or:.4}, JS {js:.4}"
        ));
    }
    let majority = C8_SEEDS.len() / 2 + 1;
    let verdicts: Vec<String> = ["a T5<=T1", "b SG<=noSG", "c SOTA<=OR", "d EM<=JS"]
        .iter()
        .zip(wins)
        .map(|(name, w)| format!("{name} {w}/{} {}", C8_SEEDS.len(), if w >= majority { "ok" } else { "NOT MET" }))
        .collect();
    let pass = wins.iter().all(|&w| w >= majority);
    outcome(
        pass,
        format!("tail-{C8_TAIL} val MAE after {C8_EPOCHS} epochs; {}; {}", verdicts.join(", "), lines.join("; ")),
    )
}

// ---- 9 -----------------------------------------------------------------------

fn r_squared(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    sxy * sxy / (sxx * syy)
}

fn c9_energy() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    let net = SaliencyNet::new(&mut store, ModelConfig::default(), &mut rng).unwrap();
    let zero = energy_estimate(&net, &store, &Tensor::zeros(&[5, 1, 32, 32])).unwrap();

    let shape = [1usize, 8, 16, 16];
    let n: usize = shape.iter().product();
    let (mut dens, mut acs) = (Vec::new(), Vec::new());
    for i in 1..=10 {
        let p = i as f64 * 0.09;
        let spikes: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_bool(p))).collect();
        dens.push(spikes.iter().sum::<f64>() / n as f64);
        acs.push(conv_ac_count(&spikes, shape, 16, 3, 1, 1) as f64);
    }
    let r2 = r_squared(&dens, &acs);

    let data = Dataset::synthesize(&Scenario::ALL, 7, &SyntheticConfig::default(), 4, 1.0).unwrap();
    let rows = energy_rows(&net, &store, &data, &[1, 5], 4).unwrap();
    let ratio = rows[1].energy_mj / rows[0].energy_mj;
    let pass = zero.ac == 0 && r2 > 0.99 && (3.0..=10.0).contains(&ratio);
    outcome(
        pass,
        format!(
            "zero input AC {}; R^2 {r2:.5} over 10 densities; T=5 {:.4} mJ / T=1 {:.4} mJ = {ratio:.2}",
            zero.ac, rows[1].energy_mj, rows[0].energy_mj
        ),
    )
}

// ---- 10 ----------------------------------------------------------------------

fn cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_spike-saliency"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(String::from_utf8_lossy(&out.stderr).into_owned())
    }
}

fn same_files(a: &Path, b: &Path, names: &[&str]) -> Vec<String> {
    names
        .iter()
        .filter(|n| std::fs::read(a.join(n)).ok() != std::fs::read(b.join(n)).ok() || !a.join(n).is_file())
        .map(|n| n.to_string())
        .collect()
}

fn c10_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
    let mut diffs = Vec::new();
    for run in ["a", "b"] {
        let steps = [
            vec!["--deterministic", "gen-data", "--count", "8", "--size", "32", "--ticks", "24", "--seed", "3"],
            vec!["--deterministic", "train", "--epochs", "2", "--time-steps", "2", "--base-channels", "2", "--heads", "2"],
            vec!["--deterministic", "eval", "--split", "all", "--energy"],
        ];
        let ds = p(&format!("ds_{run}"));
        let out = p(&format!("run_{run}"));
        let report = p(&format!("eval_{run}/report.json"));
        let model = p(&format!("run_{run}/model.ssck"));
        let extra = [
            vec!["--out", ds.as_str()],
            vec!["--dataset", ds.as_str(), "--out", out.as_str()],
            vec!["--checkpoint", model.as_str(), "--dataset", ds.as_str(), "--out", report.as_str()],
        ];
        for (s, e) in steps.iter().zip(&extra) {
            let args: Vec<&str> = s.iter().chain(e.iter()).copied().collect();
            if let Err(err) = cli(&args) {
                return outcome(false, format!("`{}` failed: {err}", args.join(" ")));
            }
        }
    }
    let d = dir.path();
    diffs.extend(same_files(&d.join("run_a"), &d.join("run_b"), &["model.ssck", "critic.ssck", "log.jsonl", "metrics.json"]));
    diffs.extend(same_files(&d.join("eval_a"), &d.join("eval_b"), &["report.json"]));
    diffs.extend(same_files(&d.join("ds_a/sample_0000"), &d.join("ds_b/sample_0000"), &["stream.spk"]));
    outcome(
        diffs.is_empty(),
        if diffs.is_empty() {
            "gen-data, train and eval twice: all outputs byte-identical".to_string()
        } else {
            format!("differing outputs: {diffs:?}")
        },
    )
}
