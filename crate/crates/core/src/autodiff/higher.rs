//! Gradients as graph nodes, for penalties that differentiate a gradient.

use super::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

impl Graph {
    /// Build d`y`/d`x` out of ordinary graph nodes so it can itself be
    /// differentiated. `y` must be a scalar.
    ///
    /// Only the ops a critic network needs are supported on the path from
    /// `x` to `y`; anything else returns [`Error::Unsupported`].
    pub fn grad_graph(&mut self, y: Var, x: Var) -> Result<Var> {
        if self.value(y).numel() != 1 {
            return Err(Error::shape("grad_graph", "output must be a scalar"));
        }
        let x_shape = self.shape(x).to_vec();
        if y.0 < x.0 {
            return Ok(self.constant(Tensor::zeros(&x_shape)));
        }
        let mut depends = vec![false; y.0 + 1];
        depends[x.0] = true;
        for i in x.0 + 1..=y.0 {
            depends[i] = self.nodes[i].op.parents().iter().any(|p| p.0 >= x.0 && depends[p.0]);
        }
        let mut adj: Vec<Option<Var>> = vec![None; y.0 + 1];
        adj[y.0] = Some(self.constant(Tensor::ones(self.shape(y))));
        for i in (x.0 + 1..=y.0).rev() {
            let Some(gy) = adj[i] else { continue };
            if !depends[i] {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let node = Var(i);
            let dep = |v: &Var| v.0 >= x.0 && depends[v.0];
            let mut contribs: Vec<(Var, Var)> = Vec::new();
            match &op {
                Op::Add(a, b) => {
                    contribs.push((*a, gy));
                    contribs.push((*b, gy));
                }
                Op::Sub(a, b) => {
                    contribs.push((*a, gy));
                    if dep(b) {
                        let n = self.neg(gy);
                        contribs.push((*b, n));
                    }
                }
                Op::Mul(a, b) => {
                    if dep(a) {
                        let d = self.mul(gy, *b)?;
                        contribs.push((*a, d));
                    }
                    if dep(b) {
                        let d = self.mul(gy, *a)?;
                        contribs.push((*b, d));
                    }
                }
                Op::Scale(a, s) => {
                    let d = self.scale(gy, *s);
                    contribs.push((*a, d));
                }
                Op::AddScalar(a) | Op::Reshape(a) => {
                    let d = self.reshape(gy, &self.shape(*a).to_vec())?;
                    contribs.push((*a, d));
                }
                Op::Sigmoid(a) => {
                    let sq = self.mul(node, node)?;
                    let slope = self.sub(node, sq)?;
                    let d = self.mul(gy, slope)?;
                    contribs.push((*a, d));
                }
                Op::Relu(a) | Op::LeakyRelu(a, _) => {
                    let neg = match op {
                        Op::LeakyRelu(_, s) => s,
                        _ => 0.0,
                    };
                    let mask = self.value(*a).map(|v| if v > 0.0 { 1.0 } else { neg });
                    let m = self.constant(mask);
                    let d = self.mul(gy, m)?;
                    contribs.push((*a, d));
                }
                Op::SumLast(a) => {
                    let m = *self.shape(*a).last().unwrap();
                    let d = self.broadcast_last(gy, m)?;
                    contribs.push((*a, d));
                }
                Op::BroadcastLast(a) => {
                    let d = self.sum_last(gy)?;
                    contribs.push((*a, d));
                }
                Op::SumAll(a) | Op::MeanAll(a) => {
                    let shape = self.shape(*a).to_vec();
                    let n: usize = shape.iter().product();
                    let col = self.reshape(gy, &[1, 1])?;
                    let wide = self.broadcast_last(col, n)?;
                    let mut d = self.reshape(wide, &shape)?;
                    if matches!(op, Op::MeanAll(_)) {
                        d = self.scale(d, 1.0 / n as f64);
                    }
                    contribs.push((*a, d));
                }
                Op::MatMul(a, b) => {
                    if dep(a) {
                        let bt = self.permute(*b, &[1, 0])?;
                        let d = self.matmul(gy, bt)?;
                        contribs.push((*a, d));
                    }
                    if dep(b) {
                        let at = self.permute(*a, &[1, 0])?;
                        let d = self.matmul(at, gy)?;
                        contribs.push((*b, d));
                    }
                }
                Op::AddChannel(a, b) => {
                    if dep(b) {
                        return Err(Error::Unsupported("grad_graph through a data-dependent channel bias".into()));
                    }
                    contribs.push((*a, gy));
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    geom,
                } => {
                    if dep(weight) || bias.as_ref().is_some_and(dep) {
                        return Err(Error::Unsupported("grad_graph through data-dependent conv weights".into()));
                    }
                    let d = self.conv_transpose2d(gy, *weight, geom.stride, geom.pad, (geom.h, geom.w))?;
                    contribs.push((*input, d));
                }
                other => {
                    return Err(Error::Unsupported(format!(
                        "grad_graph has no symbolic rule for {}",
                        other.name()
                    )))
                }
            }
            for (p, d) in contribs {
                if !dep(&p) {
                    continue;
                }
                adj[p.0] = Some(match adj[p.0] {
                    Some(prev) => self.add(prev, d)?,
                    None => d,
                });
            }
        }
        match adj[x.0] {
            Some(g) => Ok(g),
            None => Ok(self.constant(Tensor::zeros(&x_shape))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_of_square_sum() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let y = g.sum_all(sq);
        let dx = g.grad_graph(y, x).unwrap();
        assert_eq!(g.value(dx).data(), &[2.0, -4.0, 1.0]);
        // d/dx Σ (2x)^2 = 8x
        let dd = g.mul(dx, dx).unwrap();
        let pen = g.sum_all(dd);
        g.backward(pen).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[8.0, -16.0, 4.0]);
    }

    #[test]
    fn unsupported_op_is_reported() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::ones(&[1, 4]));
        let s = g.softmax(x).unwrap();
        let y = g.sum_all(s);
        assert!(matches!(g.grad_graph(y, x), Err(Error::Unsupported(_))));
    }
}
