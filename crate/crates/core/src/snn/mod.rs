//! Spiking building blocks: LIF dynamics, the conv-BN-LIF-pool block and
//! the downsampling pyramid.
//!
//! Spiking tensors are time-major, `[T, B, C, H, W]`; membrane state is
//! threaded along the leading axis.

pub mod layers;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, SurrogateSpec, Var};
use crate::error::{Error, Result};
use crate::params::{ParamStore, Session};
use crate::tensor::Tensor;
use layers::{expect_rank, BatchNorm2d, Conv2d, InputKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LifConfig {
    pub threshold: f64,
    pub v_reset: f64,
    /// Multiplies the carried potential before integration; 1 disables leak.
    pub leak: f64,
    pub surrogate: SurrogateSpec,
}

impl Default for LifConfig {
    fn default() -> Self {
        Self {
            threshold: 1.0,
            v_reset: 0.0,
            leak: 1.0,
            surrogate: SurrogateSpec::default(),
        }
    }
}

/// Membrane potentials of a population, as a graph node.
#[derive(Debug, Clone, Copy)]
pub struct LifState {
    pub u: Var,
}

impl LifState {
    pub fn zeros(g: &mut Graph, shape: &[usize]) -> Self {
        Self {
            u: g.constant(Tensor::zeros(shape)),
        }
    }
}

/// One integrate-fire-reset step:
/// `U' = leak·U + I`, `S = H(U' − θ)`, `V = U'(1 − S) + V_reset·S`.
pub fn lif_step(g: &mut Graph, state: LifState, current: Var, cfg: &LifConfig) -> Result<(Var, LifState)> {
    if g.shape(state.u) != g.shape(current) {
        return Err(Error::shape(
            "lif_step",
            format!("current {:?} does not match state {:?}", g.shape(current), g.shape(state.u)),
        ));
    }
    let carried = if cfg.leak == 1.0 { state.u } else { g.scale(state.u, cfg.leak) };
    let u = g.add(carried, current)?;
    let spikes = g.heaviside(u, cfg.threshold, cfg.surrogate);
    let neg = g.neg(spikes);
    let keep = g.add_scalar(neg, 1.0);
    let held = g.mul(u, keep)?;
    let reset = g.scale(spikes, cfg.v_reset);
    let v = g.add(held, reset)?;
    Ok((spikes, LifState { u: v }))
}

/// Conv (no bias) → batch norm → LIF → optional 2×2 max pool, per time step.
#[derive(Debug, Clone)]
pub struct CbsBlock {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub lif: LifConfig,
    pub pool: bool,
    pub input: InputKind,
}

impl CbsBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        pool: bool,
        input: InputKind,
        lif: LifConfig,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), c_in, c_out, 3, 1, 1, false, rng)?,
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), c_out)?,
            lif,
            pool,
            input,
        })
    }

    /// `[T, B, C, H, W]` → `[T, B, C', H/2, W/2]` (or full size without pooling).
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let shape = expect_rank(&s.graph, x, 5, "cbs_block")?;
        if self.pool && (shape[3] % 2 != 0 || shape[4] % 2 != 0) {
            return Err(Error::shape(
                "cbs_block",
                format!("spatial dims {}x{} must be even for 2x2 pooling", shape[3], shape[4]),
            ));
        }
        let mut state: Option<LifState> = None;
        let mut steps = Vec::with_capacity(shape[0]);
        for t in 0..shape[0] {
            let xt = s.graph.index_first(x, t)?;
            let c = self.conv.forward(s, xt, self.input)?;
            let c = self.bn.forward(s, c)?;
            let st = match state {
                Some(st) => st,
                None => {
                    let shape = s.graph.shape(c).to_vec();
                    LifState::zeros(&mut s.graph, &shape)
                }
            };
            let (spk, next) = lif_step(&mut s.graph, st, c, &self.lif)?;
            state = Some(next);
            steps.push(if self.pool { s.graph.maxpool2d(spk, 2)? } else { spk });
        }
        s.graph.stack_first(&steps)
    }
}

/// `F_1..F_4`, each halving the resolution and doubling the channels.
#[derive(Debug, Clone)]
pub struct PyramidFeatures {
    pub levels: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct Pyramid {
    pub blocks: Vec<CbsBlock>,
}

impl Pyramid {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, base: usize, lif: LifConfig, rng: &mut R) -> Result<Self> {
        let blocks = (0..4)
            .map(|i| {
                CbsBlock::new(
                    store,
                    &format!("{name}.down{}", i + 1),
                    base << i,
                    base << (i + 1),
                    true,
                    InputKind::Spikes,
                    lif,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    pub fn forward(&self, s: &mut Session, f0: Var) -> Result<PyramidFeatures> {
        let shape = expect_rank(&s.graph, f0, 5, "build_pyramid")?;
        if shape[3] % 16 != 0 || shape[4] % 16 != 0 {
            return Err(Error::shape(
                "build_pyramid",
                format!("spatial dims {}x{} must be divisible by 16", shape[3], shape[4]),
            ));
        }
        let mut levels = Vec::with_capacity(4);
        let mut x = f0;
        for b in &self.blocks {
            x = b.forward(s, x)?;
            levels.push(x);
        }
        Ok(PyramidFeatures { levels })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn step(u: f64, c: f64) -> (f64, f64) {
        let mut g = Graph::new();
        let st = LifState {
            u: g.constant(Tensor::scalar(u)),
        };
        let cur = g.constant(Tensor::scalar(c));
        let (s, next) = lif_step(&mut g, st, cur, &LifConfig::default()).unwrap();
        (g.value(s).item(), g.value(next.u).item())
    }

    #[test]
    fn lif_worked_examples() {
        assert_eq!(step(0.0, 1.2), (1.0, 0.0));
        assert_eq!(step(0.3, 0.4), (0.0, 0.7));
        let (_, mut u) = step(0.3, 0.4);
        for _ in 0..5 {
            let (s, next) = step(u, 0.0);
            assert_eq!(s, 0.0);
            assert_eq!(next, u);
            u = next;
        }
    }

    #[test]
    fn cbs_shapes_and_binary_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let block = CbsBlock::new(&mut store, "b", 8, 16, true, InputKind::Spikes, LifConfig::default(), &mut rng).unwrap();
        let x = Tensor::uniform(&[5, 2, 8, 32, 32], 0.0, 1.0, &mut rng).map(|v| v.round());
        let mut s = Session::new(&store, true);
        let xv = s.graph.constant(x);
        let y = block.forward(&mut s, xv).unwrap();
        assert_eq!(s.graph.shape(y), &[5, 2, 16, 16, 16]);
        assert!(s.graph.value(y).data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn cbs_rejects_odd_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let block = CbsBlock::new(&mut store, "b", 1, 2, true, InputKind::Real, LifConfig::default(), &mut rng).unwrap();
        let mut s = Session::new(&store, true);
        let x = s.graph.constant(Tensor::zeros(&[1, 1, 1, 5, 4]));
        assert!(block.forward(&mut s, x).is_err());
    }

    #[test]
    fn pyramid_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let p = Pyramid::new(&mut store, "p", 4, LifConfig::default(), &mut rng).unwrap();
        let mut s = Session::new(&store, true);
        let x = s.graph.constant(Tensor::ones(&[1, 1, 4, 64, 64]));
        let f = p.forward(&mut s, x).unwrap();
        assert_eq!(s.graph.shape(f.levels[0]), &[1, 1, 8, 32, 32]);
        assert_eq!(s.graph.shape(f.levels[1]), &[1, 1, 16, 16, 16]);
        assert_eq!(s.graph.shape(f.levels[3]), &[1, 1, 64, 4, 4]);
        let bad = s.graph.constant(Tensor::ones(&[1, 1, 4, 24, 24]));
        assert!(p.forward(&mut s, bad).is_err());
    }
}
