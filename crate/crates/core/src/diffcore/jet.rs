//! First-order spatial jets.
//!
//! A jet over `n` query points is a single graph node with `blocks · n`
//! rows: rows `0..n` hold values, and block `b ≥ 1` holds the directional
//! derivative of those values along spatial axis `b − 1`. Functions written
//! over jets therefore produce their spatial gradient alongside their value,
//! and that gradient is an ordinary graph node that losses can consume.

use super::graph::{Activation, Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Number of row blocks in a jet carrying a full 3-D gradient.
pub const SPATIAL_BLOCKS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Jet {
    pub var: Var,
    /// Number of query points.
    pub n: usize,
    /// 1 for value-only, 4 with three spatial tangents.
    pub blocks: usize,
}

impl Jet {
    /// Seeds a jet at `points` (`[n, 3]`). With `with_tangents` the tangent
    /// blocks are the unit axes.
    pub fn seed(g: &mut Graph, points: Var, with_tangents: bool) -> Result<Jet> {
        let [n, d] = g.shape(points);
        if d != 3 {
            return Err(Error::Shape(format!("jet seed expects [n, 3], got [{n}, {d}]")));
        }
        if !with_tangents {
            return Ok(Jet { var: points, n, blocks: 1 });
        }
        let mut parts = vec![points];
        for axis in 0..3 {
            let mut t = Tensor::zeros(n, 3);
            for r in 0..n {
                t.set(r, axis, 1.0);
            }
            parts.push(g.constant(t));
        }
        let var = g.concat_rows(&parts)?;
        Ok(Jet { var, n, blocks: SPATIAL_BLOCKS })
    }

    /// Wraps a point-independent `[n, k]` quantity (zero tangents).
    pub fn lift(g: &mut Graph, x: Var, blocks: usize) -> Result<Jet> {
        let n = g.shape(x)[0];
        let var = if blocks == 1 { x } else { g.pad_rows(x, n * blocks)? };
        Ok(Jet { var, n, blocks })
    }

    pub fn cols(&self, g: &Graph) -> usize {
        g.shape(self.var)[1]
    }

    pub fn has_tangents(&self) -> bool {
        self.blocks > 1
    }

    /// Value block, `[n, k]`.
    pub fn value(&self, g: &mut Graph) -> Result<Var> {
        if self.blocks == 1 {
            return Ok(self.var);
        }
        g.slice_rows(self.var, 0, self.n)
    }

    /// Derivative along `axis`, `[n, k]`.
    pub fn tangent(&self, g: &mut Graph, axis: usize) -> Result<Var> {
        if axis + 1 >= self.blocks {
            return Err(Error::Capability(format!("jet has no tangent block for axis {axis}")));
        }
        g.slice_rows(self.var, (axis + 1) * self.n, self.n)
    }

    /// Spatial gradient of column `col`, `[n, 3]`.
    pub fn gradient(&self, g: &mut Graph, col: usize) -> Result<Var> {
        let c = g.slice_cols(self.var, col, 1)?;
        let mut parts = Vec::with_capacity(3);
        for axis in 0..3 {
            if axis + 1 >= self.blocks {
                return Err(Error::Capability("value-only jet has no gradient".into()));
            }
            parts.push(g.slice_rows(c, (axis + 1) * self.n, self.n)?);
        }
        g.concat_cols(&parts)
    }

    /// Jacobian of columns `start..start + 3`, `[n, 9]` in row-major
    /// `∂out_i/∂x_j` order.
    pub fn jacobian3(&self, g: &mut Graph, start: usize) -> Result<Var> {
        let mut cols = Vec::with_capacity(9);
        for i in 0..3 {
            let grad = self.gradient(g, start + i)?;
            cols.push(grad);
        }
        g.concat_cols(&cols)
    }

    pub fn slice_cols(&self, g: &mut Graph, start: usize, len: usize) -> Result<Jet> {
        Ok(Jet { var: g.slice_cols(self.var, start, len)?, ..*self })
    }

    pub fn concat(g: &mut Graph, parts: &[Jet]) -> Result<Jet> {
        let first = parts.first().ok_or_else(|| Error::Shape("empty jet concat".into()))?;
        if parts.iter().any(|p| p.n != first.n || p.blocks != first.blocks) {
            return Err(Error::Shape("jet concat layout mismatch".into()));
        }
        let vars: Vec<Var> = parts.iter().map(|p| p.var).collect();
        Ok(Jet { var: g.concat_cols(&vars)?, ..*first })
    }

    pub fn add(&self, g: &mut Graph, other: &Jet) -> Result<Jet> {
        Ok(Jet { var: g.add(self.var, other.var)?, ..*self })
    }

    pub fn scale(&self, g: &mut Graph, f: f64) -> Jet {
        Jet { var: g.scale(self.var, f), ..*self }
    }

    /// `x · W + b` with the bias entering the value block only.
    pub fn affine(&self, g: &mut Graph, weight: Var, bias: Var) -> Result<Jet> {
        let z = g.matmul(self.var, weight)?;
        let var = g.add_bias(z, bias, self.n)?;
        Ok(Jet { var, ..*self })
    }

    pub fn activate(&self, g: &mut Graph, act: Activation) -> Result<Jet> {
        Ok(Jet { var: g.jet_act(self.var, self.blocks, act)?, ..*self })
    }

    pub fn encode(&self, g: &mut Graph, freqs: usize, include_input: bool) -> Result<Jet> {
        Ok(Jet { var: g.jet_pe(self.var, self.blocks, freqs, include_input)?, ..*self })
    }

    pub fn norm(&self, g: &mut Graph) -> Result<Jet> {
        Ok(Jet { var: g.jet_norm(self.var, self.blocks)?, ..*self })
    }

    /// Adds a constant to the value block.
    pub fn offset(&self, g: &mut Graph, c: f64) -> Result<Jet> {
        let cols = self.cols(g);
        let b = g.constant(Tensor::filled(1, cols, c));
        Ok(Jet { var: g.add_bias(self.var, b, self.n)?, ..*self })
    }

    pub fn detach(&self, g: &mut Graph) -> Jet {
        Jet { var: g.detach(self.var), ..*self }
    }
}

/// `∇ₓ field(x)` for a scalar field written over jets, as an `[n, 3]` node
/// that stays on the tape.
pub fn spatial_gradient<F>(g: &mut Graph, points: Var, field: F) -> Result<Var>
where
    F: FnOnce(&mut Graph, Jet) -> Result<Jet>,
{
    let seed = Jet::seed(g, points, true)?;
    let out = field(g, seed)?;
    if out.cols(g) != 1 {
        return Err(Error::Shape(format!("spatial_gradient needs a scalar field, got {} columns", out.cols(g))));
    }
    out.gradient(g, 0)
}
