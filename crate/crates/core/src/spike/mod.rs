//! Spike-camera model: integrate-to-threshold simulation, interval-based
//! frame reconstruction, the `.spk` container and synthetic datasets.

pub mod codec;
pub mod dataset;
pub mod image_io;
pub mod synthetic;

use crate::error::{Error, Result};

/// Luminance per pixel per tick, values in `[0, 1]`, stored tick-major then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityClip {
    width: usize,
    height: usize,
    num_ticks: usize,
    luminance: Vec<f64>,
}

impl IntensityClip {
    pub fn new(width: usize, height: usize, num_ticks: usize, luminance: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || num_ticks == 0 {
            return Err(Error::Input(format!(
                "clip dimensions must be positive, got {width}x{height}x{num_ticks}"
            )));
        }
        if luminance.len() != width * height * num_ticks {
            return Err(Error::Input(format!(
                "clip {width}x{height}x{num_ticks} needs {} values, got {}",
                width * height * num_ticks,
                luminance.len()
            )));
        }
        if let Some(bad) = luminance.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Input(format!("luminance {bad} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            num_ticks,
            luminance,
        })
    }

    /// The same frame repeated for every tick.
    pub fn constant(width: usize, height: usize, num_ticks: usize, value: f64) -> Result<Self> {
        Self::new(width, height, num_ticks, vec![value; width * height * num_ticks])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn num_ticks(&self) -> usize {
        self.num_ticks
    }

    pub fn frame(&self, tick: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.luminance[tick * n..(tick + 1) * n]
    }

    pub fn luminance(&self) -> &[f64] {
        &self.luminance
    }
}

/// Binary spikes, one bit per pixel per tick.
///
/// Bits are kept in the on-disk layout: one byte-aligned, LSB-first packed
/// frame per tick.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpikeStream {
    width: usize,
    height: usize,
    num_ticks: usize,
    bits: Vec<u8>,
}

impl SpikeStream {
    pub fn zeros(width: usize, height: usize, num_ticks: usize) -> Self {
        let fb = frame_bytes(width, height);
        Self {
            width,
            height,
            num_ticks,
            bits: vec![0; fb * num_ticks],
        }
    }

    /// Build from packed frames; padding bits must be zero.
    pub(crate) fn from_packed(width: usize, height: usize, num_ticks: usize, bits: Vec<u8>) -> Self {
        debug_assert_eq!(bits.len(), frame_bytes(width, height) * num_ticks);
        Self {
            width,
            height,
            num_ticks,
            bits,
        }
    }

    /// Build from one `bool` per pixel per tick, tick-major then row-major.
    pub fn from_bools(width: usize, height: usize, num_ticks: usize, spikes: &[bool]) -> Result<Self> {
        if spikes.len() != width * height * num_ticks {
            return Err(Error::Input(format!(
                "expected {} spike flags, got {}",
                width * height * num_ticks,
                spikes.len()
            )));
        }
        let mut s = Self::zeros(width, height, num_ticks);
        let n = width * height;
        for (i, &b) in spikes.iter().enumerate() {
            if b {
                s.set(i / n, i % n, true);
            }
        }
        Ok(s)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn num_ticks(&self) -> usize {
        self.num_ticks
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn frame_bytes(&self) -> usize {
        frame_bytes(self.width, self.height)
    }

    /// Packed bytes of one tick.
    pub fn packed_frame(&self, tick: usize) -> &[u8] {
        let fb = self.frame_bytes();
        &self.bits[tick * fb..(tick + 1) * fb]
    }

    pub(crate) fn packed(&self) -> &[u8] {
        &self.bits
    }

    /// Spike at `(tick, pixel)` with `pixel = y * width + x`.
    pub fn get(&self, tick: usize, pixel: usize) -> bool {
        let byte = self.bits[tick * self.frame_bytes() + pixel / 8];
        byte >> (pixel % 8) & 1 == 1
    }

    pub fn set(&mut self, tick: usize, pixel: usize, value: bool) {
        let fb = self.frame_bytes();
        let byte = &mut self.bits[tick * fb + pixel / 8];
        if value {
            *byte |= 1 << (pixel % 8);
        } else {
            *byte &= !(1 << (pixel % 8));
        }
    }

    /// Spike frame at `tick` as 0/1 values.
    pub fn frame_values(&self, tick: usize) -> Vec<f64> {
        (0..self.num_pixels())
            .map(|p| if self.get(tick, p) { 1.0 } else { 0.0 })
            .collect()
    }

    /// Spikes per pixel over the whole stream.
    pub fn spike_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_pixels()];
        for t in 0..self.num_ticks {
            for (p, n) in c.iter_mut().enumerate() {
                *n += self.get(t, p) as usize;
            }
        }
        c
    }

    pub fn total_spikes(&self) -> usize {
        self.bits.iter().map(|b| b.count_ones() as usize).sum()
    }
}

pub(crate) fn frame_bytes(width: usize, height: usize) -> usize {
    (width * height).div_ceil(8)
}

/// Integrate luminance per pixel and fire whenever the integral reaches `theta`.
///
/// The accumulator keeps its remainder after each spike, and at most one
/// spike is emitted per tick.
pub fn simulate_spikes(clip: &IntensityClip, theta: f64) -> Result<SpikeStream> {
    if !(theta > 0.0 && theta.is_finite()) {
        return Err(Error::Param(format!("theta must be positive, got {theta}")));
    }
    let n = clip.width * clip.height;
    let mut acc = vec![0.0f64; n];
    let mut out = SpikeStream::zeros(clip.width, clip.height, clip.num_ticks);
    for t in 0..clip.num_ticks {
        for (p, (a, &i)) in acc.iter_mut().zip(clip.frame(t)).enumerate() {
            *a += i;
            if *a >= theta {
                *a -= theta;
                out.set(t, p, true);
            }
        }
    }
    Ok(out)
}

/// Grayscale frame with values in `[0, max_gray]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructedFrame {
    pub width: usize,
    pub height: usize,
    pub max_gray: f64,
    pub values: Vec<f64>,
}

impl ReconstructedFrame {
    /// Values scaled into `[0, 1]`.
    pub fn normalized(&self) -> Vec<f64> {
        self.values.iter().map(|v| v / self.max_gray).collect()
    }
}

/// Texture-from-interval reconstruction at `tick`: `max_gray / Δt`, where
/// `Δt` is the interval between the last spike at or before `tick` and the
/// first spike after it.
///
/// Before the first spike or after the last one, the nearest interval is
/// used. Pixels with fewer than two spikes are 0.
pub fn tfi_reconstruct(stream: &SpikeStream, tick: usize, max_gray: f64) -> Result<ReconstructedFrame> {
    if tick >= stream.num_ticks {
        return Err(Error::Input(format!(
            "tick {tick} out of range for a stream of {} ticks",
            stream.num_ticks
        )));
    }
    if !(max_gray > 0.0 && max_gray.is_finite()) {
        return Err(Error::Param(format!("max gray must be positive, got {max_gray}")));
    }
    let values = (0..stream.num_pixels())
        .map(|p| match bracketing_interval(stream, p, tick) {
            Some(dt) => max_gray / dt as f64,
            None => 0.0,
        })
        .collect();
    Ok(ReconstructedFrame {
        width: stream.width,
        height: stream.height,
        max_gray,
        values,
    })
}

fn bracketing_interval(s: &SpikeStream, p: usize, tick: usize) -> Option<usize> {
    let spike = |t: usize| s.get(t, p);
    let prev = (0..=tick).rev().find(|&t| spike(t));
    let next = (tick + 1..s.num_ticks).find(|&t| spike(t));
    match (prev, next) {
        (Some(a), Some(b)) => Some(b - a),
        // after the last spike: the final interval
        (Some(a), None) => (0..a).rev().find(|&t| spike(t)).map(|b| a - b),
        // before the first spike: the first interval
        (None, Some(b)) => (b + 1..s.num_ticks).find(|&t| spike(t)).map(|c| c - b),
        (None, None) => None,
    }
}
