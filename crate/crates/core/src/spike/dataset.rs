//! Datasets on disk and their conversion to network inputs.
//!
//! ```text
//! <root>/dataset.json            DatasetMeta
//! <root>/<id>/stream.spk         spike stream
//! <root>/<id>/meta.json          SampleMeta
//! <root>/<id>/masks/mask_NNNN.pgm  one binary mask per tick
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::codec::{decode_stream, encode_stream};
use super::synthetic::{make_synthetic_dataset, Scenario, SyntheticConfig};
use super::{image_io, simulate_spikes, tfi_reconstruct, SpikeStream};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub seed: u64,
    pub count: usize,
    pub theta: f64,
    pub scenarios: Vec<Scenario>,
    pub synthetic: SyntheticConfig,
    pub samples: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleMeta {
    pub id: String,
    pub scenario: Scenario,
    pub width: usize,
    pub height: usize,
    pub num_ticks: usize,
    pub theta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub scenario: Scenario,
    pub stream: SpikeStream,
    /// Per-tick masks, absent if the sample has no ground truth on disk.
    pub masks: Option<Vec<Vec<u8>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub samples: Vec<Sample>,
}

/// Simulated ticks per network time step.
pub const TICKS_PER_STEP: usize = 8;
/// Gray level used for reconstruction.
pub const MAX_GRAY: f64 = 255.0;

impl Dataset {
    /// Generate clips, simulate their spike streams and keep masks in memory.
    pub fn synthesize(scenarios: &[Scenario], seed: u64, cfg: &SyntheticConfig, count: usize, theta: f64) -> Result<Self> {
        let raw = make_synthetic_dataset(scenarios, seed, cfg, count)?;
        let mut samples = Vec::with_capacity(raw.len());
        for s in raw {
            samples.push(Sample {
                stream: simulate_spikes(&s.clip, theta)?,
                id: s.id,
                scenario: s.scenario,
                masks: Some(s.masks),
            });
        }
        Ok(Self {
            meta: DatasetMeta {
                seed,
                count,
                theta,
                scenarios: scenarios.to_vec(),
                synthetic: cfg.clone(),
                samples: samples.iter().map(|s| s.id.clone()).collect(),
            },
            samples,
        })
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        for s in &self.samples {
            let dir = root.join(&s.id);
            let mask_dir = dir.join("masks");
            fs::create_dir_all(&mask_dir).map_err(|e| Error::io(&mask_dir, e))?;
            let spk = dir.join("stream.spk");
            fs::write(&spk, encode_stream(&s.stream)).map_err(|e| Error::io(&spk, e))?;
            let meta = SampleMeta {
                id: s.id.clone(),
                scenario: s.scenario,
                width: s.stream.width(),
                height: s.stream.height(),
                num_ticks: s.stream.num_ticks(),
                theta: self.meta.theta,
            };
            write_json(&dir.join("meta.json"), &meta)?;
            if let Some(masks) = &s.masks {
                for (t, m) in masks.iter().enumerate() {
                    image_io::write_mask(
                        &mask_dir.join(format!("mask_{t:04}.pgm")),
                        s.stream.width(),
                        s.stream.height(),
                        m,
                    )?;
                }
            }
        }
        write_json(&root.join("dataset.json"), &self.meta)
    }

    pub fn load(root: &Path) -> Result<Self> {
        let meta: DatasetMeta = read_json(&root.join("dataset.json"))?;
        let mut samples = Vec::with_capacity(meta.samples.len());
        for id in &meta.samples {
            let dir = root.join(id);
            let sm: SampleMeta = read_json(&dir.join("meta.json"))?;
            let spk = dir.join("stream.spk");
            let bytes = fs::read(&spk).map_err(|e| Error::io(&spk, e))?;
            let stream = decode_stream(&bytes)?;
            let mask_dir = dir.join("masks");
            let masks = if mask_dir.is_dir() {
                let files = image_io::list_frames(&mask_dir)?;
                if files.len() == stream.num_ticks() {
                    let mut ms = Vec::with_capacity(files.len());
                    for f in files {
                        ms.push(image_io::read_mask(&f)?.2);
                    }
                    Some(ms)
                } else {
                    None
                }
            } else {
                None
            };
            samples.push(Sample {
                id: sm.id,
                scenario: sm.scenario,
                stream,
                masks,
            });
        }
        Ok(Self { meta, samples })
    }

    /// Deterministic split: every fourth sample goes to validation.
    pub fn split(&self) -> (Vec<&Sample>, Vec<&Sample>) {
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for (i, s) in self.samples.iter().enumerate() {
            if i % 4 == 3 {
                val.push(s);
            } else {
                train.push(s);
            }
        }
        (train, val)
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(v)?;
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&s)?)
}

/// Network input and label for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub id: String,
    pub scenario: Scenario,
    /// `[T, 1, H, W]` reconstructed frames in `[0, 1]`.
    pub frames: Tensor,
    /// Mask at the last step's reference tick, if known.
    pub gt: Option<Vec<f64>>,
}

/// Tick at the centre of window `w`.
pub fn reference_tick(window: usize) -> usize {
    window * TICKS_PER_STEP + TICKS_PER_STEP / 2
}

/// Reconstruct one frame per step from the last `time_steps` windows.
pub fn prepare(sample: &Sample, time_steps: usize) -> Result<Prepared> {
    let windows = sample.stream.num_ticks() / TICKS_PER_STEP;
    if time_steps == 0 || time_steps > windows {
        return Err(Error::Param(format!(
            "{time_steps} time steps requested but `{}` holds {windows} windows of {TICKS_PER_STEP} ticks",
            sample.id
        )));
    }
    let (w, h) = (sample.stream.width(), sample.stream.height());
    let mut data = Vec::with_capacity(time_steps * w * h);
    for j in 0..time_steps {
        let tick = reference_tick(windows - time_steps + j);
        data.extend(tfi_reconstruct(&sample.stream, tick, MAX_GRAY)?.normalized());
    }
    let last = reference_tick(windows - 1);
    let gt = sample
        .masks
        .as_ref()
        .map(|m| m[last].iter().map(|&v| v as f64).collect());
    Ok(Prepared {
        id: sample.id.clone(),
        scenario: sample.scenario,
        frames: Tensor::new(&[time_steps, 1, h, w], data)?,
        gt,
    })
}

pub fn prepare_all(samples: &[&Sample], time_steps: usize) -> Result<Vec<Prepared>> {
    samples.iter().map(|s| prepare(s, time_steps)).collect()
}
