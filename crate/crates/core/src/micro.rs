//! Cross-step attention over the deepest pyramid level.
//!
//! Step `t` queries step `t + 1`: the query comes from the current step,
//! keys and values from the next one. The last step (and a single-step
//! input) attends to itself.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{SurrogateSpec, Var};
use crate::error::{Error, Result};
use crate::params::{ParamStore, Session};
use crate::snn::layers::{count_matmul, expect_rank, Conv2d, DwConv2d, InputKind};
use crate::tensor::Tensor;

/// How adjacent steps are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fusion {
    /// Elementwise max of the binarised maps.
    Or,
    /// Elementwise sum.
    Add,
    /// Attention, projected residual and MLP.
    #[serde(rename = "sota", alias = "attention")]
    Attention,
}

impl Fusion {
    pub fn as_str(self) -> &'static str {
        match self {
            Fusion::Or => "or",
            Fusion::Add => "add",
            Fusion::Attention => "sota",
        }
    }
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "or" => Ok(Fusion::Or),
            "add" => Ok(Fusion::Add),
            "sota" | "attention" => Ok(Fusion::Attention),
            _ => Err(Error::Param(format!("unknown fusion `{s}` (expected or, add, sota)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionConfig {
    pub heads: usize,
    pub fusion: Fusion,
    pub use_dwconv_projections: bool,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            heads: 4,
            fusion: Fusion::Attention,
            use_dwconv_projections: true,
        }
    }
}

/// Query/key/value projection: depthwise 3×3, or pointwise 1×1 for the ablation.
#[derive(Debug, Clone)]
pub enum Projection {
    Depthwise(DwConv2d),
    Pointwise(Conv2d),
}

impl Projection {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, dw: bool, rng: &mut R) -> Result<Self> {
        Ok(if dw {
            Projection::Depthwise(DwConv2d::new(store, name, channels, 3, rng)?)
        } else {
            Projection::Pointwise(Conv2d::new(store, name, channels, channels, 1, 1, 0, false, rng)?)
        })
    }

    pub fn weight(&self) -> crate::params::ParamId {
        match self {
            Projection::Depthwise(d) => d.weight,
            Projection::Pointwise(c) => c.weight,
        }
    }

    fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        match self {
            Projection::Depthwise(d) => d.forward(s, x, InputKind::Spikes),
            Projection::Pointwise(c) => c.forward(s, x, InputKind::Spikes),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MicroDebias {
    pub cfg: AttentionConfig,
    pub channels: usize,
    pub q: Projection,
    pub k: Projection,
    pub v: Projection,
    pub out_proj: Conv2d,
    pub residual: Conv2d,
    pub mlp_in: Conv2d,
    pub mlp_out: Conv2d,
    /// Pre-fusion projection of the ADD variant.
    pub add_proj: Option<Projection>,
}

impl MicroDebias {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, cfg: AttentionConfig, rng: &mut R) -> Result<Self> {
        if cfg.heads == 0 || channels % cfg.heads != 0 {
            return Err(Error::Param(format!(
                "{channels} channels cannot be split into {} heads",
                cfg.heads
            )));
        }
        let dw = cfg.use_dwconv_projections;
        let q = Projection::new(store, &format!("{name}.q"), channels, dw, rng)?;
        let k = Projection::new(store, &format!("{name}.k"), channels, dw, rng)?;
        let v = Projection::new(store, &format!("{name}.v"), channels, dw, rng)?;
        let out_proj = Conv2d::new(store, &format!("{name}.out"), channels, channels, 1, 1, 0, true, rng)?;
        let residual = Conv2d::new(store, &format!("{name}.residual"), channels, channels, 1, 1, 0, false, rng)?;
        let eye: Vec<f64> = (0..channels * channels)
            .map(|i| if i / channels == i % channels { 1.0 } else { 0.0 })
            .collect();
        store.set(residual.weight, Tensor::new(&[channels, channels, 1, 1], eye)?)?;
        let mlp_in = Conv2d::new(store, &format!("{name}.mlp1"), channels, channels, 1, 1, 0, true, rng)?;
        let mlp_out = Conv2d::new(store, &format!("{name}.mlp2"), channels, channels, 1, 1, 0, true, rng)?;
        store.set(mlp_out.weight, Tensor::zeros(&[channels, channels, 1, 1]))?;
        let add_proj = if cfg.fusion == Fusion::Add && dw {
            Some(Projection::new(store, &format!("{name}.add"), channels, true, rng)?)
        } else {
            None
        };
        Ok(Self {
            cfg,
            channels,
            q,
            k,
            v,
            out_proj,
            residual,
            mlp_in,
            mlp_out,
            add_proj,
        })
    }

    /// Multi-head `softmax(q kᵀ / √d) v` with tokens over space, `[B, C, h, w]` in and out.
    /// Returns the attention output and the attention weights `[B·heads, N, N]`.
    pub fn attend(&self, s: &mut Session, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
        let shape = expect_rank(&s.graph, q, 4, "cross_step_attention")?;
        if s.graph.shape(k) != shape.as_slice() || s.graph.shape(v) != shape.as_slice() {
            return Err(Error::shape("cross_step_attention", "q, k and v must share one shape"));
        }
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let heads = self.cfg.heads;
        let hd = c / heads;
        let n = h * w;
        let g = &mut s.graph;
        let split = |g: &mut crate::autodiff::Graph, x: Var| -> Result<Var> {
            let x = g.reshape(x, &[b, heads, hd, n])?;
            let x = g.permute(x, &[0, 1, 3, 2])?;
            g.reshape(x, &[b * heads, n, hd])
        };
        let qt = split(g, q)?;
        let vt = split(g, v)?;
        let kt = g.reshape(k, &[b * heads, hd, n])?;
        let scores = g.bmm(qt, kt)?;
        let scores = g.scale(scores, 1.0 / (hd as f64).sqrt());
        let att = g.softmax(scores)?;
        let out = g.bmm(att, vt)?;
        let out = g.reshape(out, &[b, heads, n, hd])?;
        let out = g.permute(out, &[0, 1, 3, 2])?;
        let out = g.reshape(out, &[b, c, h, w])?;
        count_matmul(s, "sm.attention", b * heads, n, hd, n);
        count_matmul(s, "sm.attention", b * heads, n, n, hd);
        Ok((out, att))
    }

    /// Attention of `cur` onto `next`, plus projected residual and MLP.
    pub fn cross_step_attention(&self, s: &mut Session, cur: Var, next: Var) -> Result<Var> {
        if s.graph.shape(cur) != s.graph.shape(next) {
            return Err(Error::shape(
                "cross_step_attention",
                format!("{:?} vs {:?}", s.graph.shape(cur), s.graph.shape(next)),
            ));
        }
        let q = self.q.forward(s, cur)?;
        let k = self.k.forward(s, next)?;
        let v = self.v.forward(s, next)?;
        let (att, _) = self.attend(s, q, k, v)?;
        let att = self.out_proj.forward(s, att, InputKind::Real)?;
        let res = self.residual.forward(s, cur, InputKind::Spikes)?;
        let y = s.graph.add(att, res)?;
        let hdn = self.mlp_in.forward(s, y, InputKind::Real)?;
        let hdn = s.graph.relu(hdn);
        let m = self.mlp_out.forward(s, hdn, InputKind::Real)?;
        s.graph.add(y, m)
    }

    /// `[T, B, C, h, w]` in and out; step `t` is fused with step `min(t + 1, T − 1)`.
    pub fn forward(&self, s: &mut Session, f4: Var) -> Result<Var> {
        let shape = expect_rank(&s.graph, f4, 5, "sm_forward")?;
        let steps = shape[0];
        if steps == 0 {
            return Err(Error::shape("sm_forward", "no time steps"));
        }
        let slices: Vec<Var> = (0..steps)
            .map(|t| s.graph.index_first(f4, t))
            .collect::<Result<_>>()?;
        let mut outs = Vec::with_capacity(steps);
        for t in 0..steps {
            let cur = slices[t];
            let next = slices[(t + 1).min(steps - 1)];
            let y = match self.cfg.fusion {
                Fusion::Attention => self.cross_step_attention(s, cur, next)?,
                Fusion::Or => or_fusion(s, cur, next)?,
                Fusion::Add => {
                    let (a, b) = match &self.add_proj {
                        Some(p) => (p.forward(s, cur)?, p.forward(s, next)?),
                        None => (cur, next),
                    };
                    s.graph.add(a, b)?
                }
            };
            outs.push(y);
        }
        s.graph.stack_first(&outs)
    }
}

/// `max(H(a − ½), H(b − ½))`: logical OR of binarised maps.
pub fn or_fusion(s: &mut Session, a: Var, b: Var) -> Result<Var> {
    let spec = SurrogateSpec::default();
    let ba = s.graph.heaviside(a, 0.5, spec);
    let bb = s.graph.heaviside(b, 0.5, spec);
    s.graph.maximum(ba, bb)
}
