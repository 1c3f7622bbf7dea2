//! Synthetic clips: a bright shape drifting over a textured background,
//! under one of three lighting scenarios.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::IntensityClip;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    ConstantLight,
    /// Global luminance falls from 1 to `ramp_floor`.
    BrightnessRamp,
    /// A dark half-plane sweeps over the shape.
    ShadowOcclusion,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [
        Scenario::ConstantLight,
        Scenario::BrightnessRamp,
        Scenario::ShadowOcclusion,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::ConstantLight => "constant-light",
            Scenario::BrightnessRamp => "brightness-ramp",
            Scenario::ShadowOcclusion => "shadow-occlusion",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Param(format!("unknown scenario `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub width: usize,
    pub height: usize,
    pub num_ticks: usize,
    /// Shape extent in pixels (rectangle side or disc diameter).
    pub min_shape: usize,
    pub max_shape: usize,
    pub shape_luminance: f64,
    pub background_lo: f64,
    pub background_hi: f64,
    /// Final brightness factor of the ramp scenario.
    pub ramp_floor: f64,
    /// Fraction of the clip after which the ramp stays at its floor.
    pub ramp_end: f64,
    /// Largest shape speed along each axis, pixels per tick.
    pub max_speed: f64,
    /// Amplitude of independent per-tick luminance noise.
    pub jitter: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            width: 32,
            height: 32,
            num_ticks: 40,
            min_shape: 8,
            max_shape: 16,
            shape_luminance: 0.9,
            background_lo: 0.1,
            background_hi: 0.45,
            ramp_floor: 0.3,
            ramp_end: 0.75,
            max_speed: 0.02,
            jitter: 0.02,
        }
    }
}

impl SyntheticConfig {
    pub fn sized(width: usize, height: usize, num_ticks: usize) -> Self {
        let side = width.min(height);
        Self {
            width,
            height,
            num_ticks,
            min_shape: (side / 4).max(1),
            max_shape: (side / 2).max(1),
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.num_ticks == 0 {
            return Err(Error::Param("clip dimensions must be positive".into()));
        }
        if self.min_shape == 0 || self.min_shape > self.max_shape {
            return Err(Error::Param(format!(
                "shape size range {}..={} is empty",
                self.min_shape, self.max_shape
            )));
        }
        if self.max_shape > self.width.min(self.height) {
            return Err(Error::Param(format!(
                "shape of up to {} px does not fit a {}x{} frame",
                self.max_shape, self.width, self.height
            )));
        }
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(unit(self.shape_luminance)
            && unit(self.background_lo)
            && unit(self.background_hi)
            && self.background_lo <= self.background_hi
            && unit(self.ramp_floor)
            && self.ramp_end > 0.0
            && self.ramp_end <= 1.0
            && self.jitter >= 0.0
            && self.max_speed >= 0.0)
        {
            return Err(Error::Param("luminance settings must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Shape {
    Rect { w: f64, h: f64 },
    Disc { r: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub id: String,
    pub scenario: Scenario,
    pub clip: IntensityClip,
    /// One binary mask per tick, row-major; 1 marks the shape.
    pub masks: Vec<Vec<u8>>,
}

struct Motion {
    shape: Shape,
    x0: f64,
    y0: f64,
    vx: f64,
    vy: f64,
}

impl Motion {
    fn centre(&self, t: f64) -> (f64, f64) {
        (self.x0 + self.vx * t, self.y0 + self.vy * t)
    }

    fn contains(&self, t: f64, px: f64, py: f64) -> bool {
        let (cx, cy) = self.centre(t);
        match self.shape {
            Shape::Rect { w, h } => (px - cx).abs() < w / 2.0 && (py - cy).abs() < h / 2.0,
            Shape::Disc { r } => (px - cx).powi(2) + (py - cy).powi(2) < r * r,
        }
    }

    fn half_extent_x(&self) -> f64 {
        match self.shape {
            Shape::Rect { w, .. } => w / 2.0,
            Shape::Disc { r } => r,
        }
    }
}

/// Deterministic dataset of `count` clips; sample `i` uses
/// `scenarios[i % scenarios.len()]`.
pub fn make_synthetic_dataset(scenarios: &[Scenario], seed: u64, cfg: &SyntheticConfig, count: usize) -> Result<Vec<SyntheticSample>> {
    if count == 0 {
        return Err(Error::Param("count must be at least 1".into()));
    }
    if scenarios.is_empty() {
        return Err(Error::Param("at least one scenario is required".into()));
    }
    cfg.validate()?;
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            make_sample(&format!("sample_{i:04}"), scenarios[i % scenarios.len()], cfg, &mut rng)
        })
        .collect()
}

fn make_sample(id: &str, scenario: Scenario, cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Result<SyntheticSample> {
    let (w, h, n) = (cfg.width, cfg.height, cfg.num_ticks);
    let background = texture(cfg, rng);

    let size = rng.gen_range(cfg.min_shape..=cfg.max_shape) as f64;
    let shape = if rng.gen_bool(0.5) {
        let aspect = rng.gen_range(0.6..=1.0);
        let (sw, sh) = if rng.gen_bool(0.5) {
            (size, (size * aspect).max(1.0))
        } else {
            ((size * aspect).max(1.0), size)
        };
        Shape::Rect { w: sw, h: sh }
    } else {
        Shape::Disc { r: size / 2.0 }
    };
    let (hx, hy) = match shape {
        Shape::Rect { w, h } => (w / 2.0, h / 2.0),
        Shape::Disc { r } => (r, r),
    };
    let span = (n as f64 - 1.0).max(0.0);
    let mut vx = rng.gen_range(-cfg.max_speed..=cfg.max_speed);
    let mut vy = rng.gen_range(-cfg.max_speed..=cfg.max_speed);
    // keep the whole trajectory inside the frame
    let room_x = (w as f64 - 2.0 * hx).max(0.0);
    let room_y = (h as f64 - 2.0 * hy).max(0.0);
    if span > 0.0 {
        vx = vx.clamp(-room_x / span, room_x / span);
        vy = vy.clamp(-room_y / span, room_y / span);
    }
    let lo_x = hx + (-vx * span).max(0.0);
    let hi_x = w as f64 - hx - (vx * span).max(0.0);
    let lo_y = hy + (-vy * span).max(0.0);
    let hi_y = h as f64 - hy - (vy * span).max(0.0);
    let x0 = if hi_x > lo_x { rng.gen_range(lo_x..=hi_x) } else { w as f64 / 2.0 };
    let y0 = if hi_y > lo_y { rng.gen_range(lo_y..=hi_y) } else { h as f64 / 2.0 };
    let motion = Motion { shape, x0, y0, vx, vy };

    // shadow edge sweeps from left of the shape to its vertical midline
    let sweep_from = x0 - motion.half_extent_x() - 1.0;
    let mut luminance = Vec::with_capacity(w * h * n);
    let mut masks = Vec::with_capacity(n);
    for t in 0..n {
        let tf = t as f64;
        let progress = if span > 0.0 { tf / span } else { 1.0 };
        let factor = match scenario {
            Scenario::BrightnessRamp => {
                let r = (progress / cfg.ramp_end).min(1.0);
                1.0 + (cfg.ramp_floor - 1.0) * r
            }
            _ => 1.0,
        };
        let (cx, _) = motion.centre(tf);
        let shadow_edge = sweep_from + (cx - sweep_from) * progress;
        let mut mask = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let inside = motion.contains(tf, px, py);
                mask.push(inside as u8);
                let base = if inside {
                    cfg.shape_luminance
                } else {
                    background[y * w + x]
                };
                let noise = if cfg.jitter > 0.0 {
                    rng.gen_range(-cfg.jitter..=cfg.jitter)
                } else {
                    0.0
                };
                let mut v = ((base + noise) * factor).clamp(0.0, 1.0);
                if scenario == Scenario::ShadowOcclusion && px < shadow_edge {
                    v = 0.0;
                }
                luminance.push(v);
            }
        }
        masks.push(mask);
    }
    Ok(SyntheticSample {
        id: id.to_string(),
        scenario,
        clip: IntensityClip::new(w, h, n, luminance)?,
        masks,
    })
}

/// Smooth background: a few random plane waves mapped into the background range.
fn texture(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            let freq = rng.gen_range(0.15..0.6);
            (freq * angle.cos(), freq * angle.sin(), rng.gen_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    let mid = 0.5 * (cfg.background_lo + cfg.background_hi);
    let amp = 0.5 * (cfg.background_hi - cfg.background_lo);
    let mut out = Vec::with_capacity(cfg.width * cfg.height);
    for y in 0..cfg.height {
        for x in 0..cfg.width {
            let s: f64 = waves
                .iter()
                .map(|(kx, ky, ph)| (kx * x as f64 + ky * y as f64 + ph).sin())
                .sum::<f64>()
                / waves.len() as f64;
            out.push(mid + amp * s);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_dataset() {
        let cfg = SyntheticConfig::default();
        let a = make_synthetic_dataset(&Scenario::ALL, 11, &cfg, 3).unwrap();
        let b = make_synthetic_dataset(&Scenario::ALL, 11, &cfg, 3).unwrap();
        assert_eq!(a, b);
        let c = make_synthetic_dataset(&Scenario::ALL, 12, &cfg, 3).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn oversized_shape_rejected() {
        let cfg = SyntheticConfig {
            max_shape: 40,
            ..SyntheticConfig::default()
        };
        assert!(matches!(
            make_synthetic_dataset(&[Scenario::ConstantLight], 0, &cfg, 1),
            Err(Error::Param(_))
        ));
    }

    #[test]
    fn mask_marks_bright_pixels() {
        let cfg = SyntheticConfig {
            jitter: 0.0,
            ..SyntheticConfig::default()
        };
        let s = &make_synthetic_dataset(&[Scenario::ConstantLight], 5, &cfg, 1).unwrap()[0];
        for t in [0, 20, 39] {
            let frame = s.clip.frame(t);
            for (m, v) in s.masks[t].iter().zip(frame) {
                assert_eq!(*m == 1, *v == cfg.shape_luminance);
            }
            assert!(s.masks[t].iter().any(|&m| m == 1));
        }
    }

    #[test]
    fn ramp_reaches_floor() {
        let cfg = SyntheticConfig {
            jitter: 0.0,
            ramp_floor: 0.0,
            ..SyntheticConfig::default()
        };
        let s = &make_synthetic_dataset(&[Scenario::BrightnessRamp], 2, &cfg, 1).unwrap()[0];
        assert!(s.clip.frame(39).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shadow_covers_part_of_shape_at_end() {
        let cfg = SyntheticConfig {
            jitter: 0.0,
            ..SyntheticConfig::default()
        };
        let s = &make_synthetic_dataset(&[Scenario::ShadowOcclusion], 9, &cfg, 1).unwrap()[0];
        let last = s.clip.frame(39);
        let dark = s.masks[39].iter().zip(last).filter(|(m, v)| **m == 1 && **v == 0.0).count();
        let lit = s.masks[39].iter().zip(last).filter(|(m, v)| **m == 1 && **v > 0.0).count();
        assert!(dark > 0 && lit > 0, "dark {dark} lit {lit}");
        let first_dark = s.masks[0].iter().zip(s.clip.frame(0)).filter(|(m, v)| **m == 1 && **v == 0.0).count();
        assert_eq!(first_dark, 0);
    }
}
