//! The full saliency network: stem, pyramid, cross-step attention and a
//! skip-connected decoder.
//!
//! ```text
//! frames [T,B,1,H,W] ─ stem CBS (no pool) ─ f0 [T,B,C,H,W]
//!   ─ pyramid ─ F1..F4 ─ attention on F4 ─ decoder(F3, F2, F1, f0) ─ logits [T,B,1,H,W]
//! ```
//!
//! The decoder upsamples ×2 four times, concatenating the matching skip
//! each time, with stage widths `[8C, 4C, 2C, C]` and a 1×1 head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::micro::{AttentionConfig, MicroDebias};
use crate::params::{ParamStore, Session};
use crate::snn::layers::{expect_rank, Conv2d, InputKind};
use crate::snn::{CbsBlock, LifConfig, Pyramid, PyramidFeatures};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub attention: AttentionConfig,
    pub lif: LifConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_channels: 8,
            attention: AttentionConfig::default(),
            lif: LifConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub stages: Vec<Conv2d>,
    pub head: Conv2d,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, base: usize, rng: &mut R) -> Result<Self> {
        // (input from below, skip channels, output width)
        let plan = [
            (base * 16, base * 8, base * 8),
            (base * 8, base * 4, base * 4),
            (base * 4, base * 2, base * 2),
            (base * 2, base, base),
        ];
        let stages = plan
            .iter()
            .enumerate()
            .map(|(i, &(below, skip, out))| Conv2d::new(store, &format!("{name}.stage{}", i + 1), below + skip, out, 3, 1, 1, true, rng))
            .collect::<Result<_>>()?;
        let head = Conv2d::new(store, &format!("{name}.head"), base, 1, 1, 1, 0, true, rng)?;
        Ok(Self { stages, head })
    }

    /// `sm_out [T,B,16C,H/16,W/16]` plus skips `[F3, F2, F1, f0]` → logits `[T,B,1,H,W]`.
    pub fn forward(&self, s: &mut Session, sm_out: Var, skips: [Var; 4]) -> Result<Var> {
        let shape = expect_rank(&s.graph, sm_out, 5, "refine_decode")?;
        let (t, b) = (shape[0], shape[1]);
        let fold = |s: &mut Session, v: Var| -> Result<Var> {
            let sh = expect_rank(&s.graph, v, 5, "refine_decode")?;
            if sh[0] != t || sh[1] != b {
                return Err(Error::shape(
                    "refine_decode",
                    format!("skip {sh:?} does not match T={t}, B={b}"),
                ));
            }
            s.graph.reshape(v, &[t * b, sh[2], sh[3], sh[4]])
        };
        let mut x = fold(s, sm_out)?;
        for (conv, skip) in self.stages.iter().zip(skips) {
            let skip = fold(s, skip)?;
            let (h, w) = (s.graph.shape(x)[2], s.graph.shape(x)[3]);
            let sk = s.graph.shape(skip).to_vec();
            if sk[2] != 2 * h || sk[3] != 2 * w {
                return Err(Error::shape(
                    "refine_decode",
                    format!("skip is {}x{}, expected {}x{}", sk[2], sk[3], 2 * h, 2 * w),
                ));
            }
            let up = s.graph.upsample_bilinear(x, 2 * h, 2 * w)?;
            let cat = s.graph.concat(&[up, skip], 1)?;
            let y = conv.forward(s, cat, InputKind::Real)?;
            x = s.graph.relu(y);
        }
        let logits = self.head.forward(s, x, InputKind::Real)?;
        let sh = s.graph.shape(logits).to_vec();
        s.graph.reshape(logits, &[t, b, 1, sh[2], sh[3]])
    }
}

#[derive(Debug, Clone)]
pub struct SaliencyNet {
    pub cfg: ModelConfig,
    pub stem: CbsBlock,
    pub pyramid: Pyramid,
    pub sm: MicroDebias,
    pub decoder: Decoder,
}

#[derive(Debug, Clone)]
pub struct NetOutput {
    /// `[T, B, 1, H, W]`.
    pub logits: Var,
    /// Per-step saliency, `sigmoid(logits)`.
    pub step_maps: Var,
    /// Mean of the per-step maps, `[B, 1, H, W]`.
    pub readout: Var,
    pub f0: Var,
    pub features: PyramidFeatures,
}

impl SaliencyNet {
    /// Register all parameters under `net.` in `store`.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: ModelConfig, rng: &mut R) -> Result<Self> {
        let c = cfg.base_channels;
        if c == 0 {
            return Err(Error::Param("base channel count must be positive".into()));
        }
        Ok(Self {
            cfg,
            stem: CbsBlock::new(store, "net.stem", 1, c, false, InputKind::Real, cfg.lif, rng)?,
            pyramid: Pyramid::new(store, "net.pyramid", c, cfg.lif, rng)?,
            sm: MicroDebias::new(store, "net.sm", c * 16, cfg.attention, rng)?,
            decoder: Decoder::new(store, "net.decoder", c, rng)?,
        })
    }

    /// `frames [T, B, 1, H, W]` with values in `[0, 1]`.
    pub fn forward(&self, s: &mut Session, frames: Var) -> Result<NetOutput> {
        let shape = expect_rank(&s.graph, frames, 5, "saliency_net")?;
        if shape[2] != 1 {
            return Err(Error::shape("saliency_net", format!("expected one input channel, got {}", shape[2])));
        }
        let steps = shape[0];
        let f0 = self.stem.forward(s, frames)?;
        let features = self.pyramid.forward(s, f0)?;
        let sm = self.sm.forward(s, features.levels[3])?;
        let skips = [features.levels[2], features.levels[1], features.levels[0], f0];
        let logits = self.decoder.forward(s, sm, skips)?;
        let step_maps = s.graph.sigmoid(logits);
        let mut acc = s.graph.index_first(step_maps, 0)?;
        for t in 1..steps {
            let m = s.graph.index_first(step_maps, t)?;
            acc = s.graph.add(acc, m)?;
        }
        let readout = if steps > 1 { s.graph.scale(acc, 1.0 / steps as f64) } else { acc };
        Ok(NetOutput {
            logits,
            step_maps,
            readout,
            f0,
            features,
        })
    }
}
