//! Finite-difference verification of backward rules.
//!
//! The op output is reduced to a scalar with a fixed random projection
//! `Σ r ⊙ op(x)`, so one backward pass yields a full vector-Jacobian
//! product that is then compared entry by entry with central differences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub epsilon: f64,
    pub tolerance: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_err: f64,
    /// Which input and which flat element produced `max_rel_err`.
    pub worst_input: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: max rel err {:.3e} at input {} element {} (analytic {:.6e}, numeric {:.6e}){}",
            self.op,
            self.max_rel_err,
            self.worst_input,
            self.worst_index,
            self.analytic,
            self.numeric,
            if self.passed() { "" } else { " FAILED" }
        )
    }
}

/// `|a - n| / max(|a|, |n|, 1e-4)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

impl GradCheck {
    /// Check every input of `op` at the point `inputs`.
    pub fn run<F>(&self, name: &str, inputs: &[Tensor], op: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
        let out = op(&mut g, &vars)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0x9c0d);
        let proj = Tensor::uniform(g.shape(out), -1.0, 1.0, &mut rng);
        let loss = project(&mut g, out, &proj)?;
        g.backward(loss)?;

        let eval = |point: &[Tensor]| -> Result<f64> {
            let mut g = Graph::new();
            let vars: Vec<Var> = point.iter().map(|t| g.constant(t.clone())).collect();
            let out = op(&mut g, &vars)?;
            let loss = project(&mut g, out, &proj)?;
            Ok(g.value(loss).item())
        };

        let mut report = GradCheckReport {
            op: name.to_string(),
            max_rel_err: 0.0,
            worst_input: 0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            tolerance: self.tolerance,
        };
        let mut point = inputs.to_vec();
        for (k, &v) in vars.iter().enumerate() {
            let analytic = g.grad_tensor(v);
            for j in 0..inputs[k].numel() {
                let orig = inputs[k].data()[j];
                point[k].data_mut()[j] = orig + self.epsilon;
                let up = eval(&point)?;
                point[k].data_mut()[j] = orig - self.epsilon;
                let down = eval(&point)?;
                point[k].data_mut()[j] = orig;
                let numeric = (up - down) / (2.0 * self.epsilon);
                let a = analytic.data()[j];
                let err = relative_error(a, numeric);
                if err > report.max_rel_err || !err.is_finite() {
                    report.max_rel_err = if err.is_finite() { err } else { f64::INFINITY };
                    report.worst_input = k;
                    report.worst_index = j;
                    report.analytic = a;
                    report.numeric = numeric;
                }
            }
        }
        Ok(report)
    }
}

fn project(g: &mut Graph, out: Var, proj: &Tensor) -> Result<Var> {
    let r = g.constant(proj.clone());
    let prod = g.mul(out, r)?;
    Ok(g.sum_all(prod))
}
