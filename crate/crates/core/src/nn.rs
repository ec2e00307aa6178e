//! Parameter-naming conventions and small layer builders over a [`Graph`].

use sparsepatch_numcore::{Graph, ParamSet, SplitSeed, Var};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Act {
    Relu,
    Gelu,
}

/// `x·W + b` with `W: din × dout` at `{prefix}.w` and `b: 1 × dout` at `{prefix}.b`.
pub fn linear(g: &mut Graph, p: &ParamSet, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param(p, &format!("{prefix}.w"))?;
    let b = g.param(p, &format!("{prefix}.b"))?;
    let h = g.matmul(x, w)?;
    Ok(g.add_row(h, b)?)
}

/// `x·W` with `W` at `{prefix}.w` and no bias.
pub fn project(g: &mut Graph, p: &ParamSet, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param(p, &format!("{prefix}.w"))?;
    Ok(g.matmul(x, w)?)
}

pub fn init_projection(p: &mut ParamSet, prefix: &str, din: usize, dout: usize, seed: u64) -> Result<()> {
    p.insert_normal(&format!("{prefix}.w"), &[din, dout], (1.0 / din as f64).sqrt(), seed)?;
    Ok(())
}

/// Gaussian weights with variance `gain / din`, zero bias.
pub fn init_linear(p: &mut ParamSet, prefix: &str, din: usize, dout: usize, gain: f64, seed: u64) -> Result<()> {
    p.insert_normal(&format!("{prefix}.w"), &[din, dout], (gain / din as f64).sqrt(), seed)?;
    p.insert_const(&format!("{prefix}.b"), &[1, dout], 0.0)?;
    Ok(())
}

/// MLP with layers `{prefix}.l0 ..`; activation between layers, none after the last.
pub fn mlp(g: &mut Graph, p: &ParamSet, prefix: &str, layers: usize, act: Act, x: Var) -> Result<Var> {
    let mut h = x;
    for i in 0..layers {
        h = linear(g, p, &format!("{prefix}.l{i}"), h)?;
        if i + 1 < layers {
            h = match act {
                Act::Relu => g.relu(h)?,
                Act::Gelu => g.gelu(h)?,
            };
        }
    }
    Ok(h)
}

/// `dims = [din, h1, .., dout]`.
pub fn init_mlp(p: &mut ParamSet, prefix: &str, dims: &[usize], seed: u64) -> Result<()> {
    for (i, w) in dims.windows(2).enumerate() {
        let gain = if i + 2 == dims.len() { 1.0 } else { 2.0 };
        init_linear(p, &format!("{prefix}.l{i}"), w[0], w[1], gain, seed.split(i as u64))?;
    }
    Ok(())
}

/// Multiply-accumulates of one MLP application to a single row.
pub fn mlp_macs(dims: &[usize]) -> u64 {
    dims.windows(2).map(|w| (w[0] * w[1]) as u64).sum()
}

pub fn init_layer_norm(p: &mut ParamSet, prefix: &str, dim: usize) -> Result<()> {
    p.insert_const(&format!("{prefix}.g"), &[1, dim], 1.0)?;
    p.insert_const(&format!("{prefix}.b"), &[1, dim], 0.0)?;
    Ok(())
}

pub fn layer_norm(g: &mut Graph, p: &ParamSet, prefix: &str, x: Var) -> Result<Var> {
    let gamma = g.param(p, &format!("{prefix}.g"))?;
    let beta = g.param(p, &format!("{prefix}.b"))?;
    Ok(g.layer_norm(x, gamma, beta, 1e-5)?)
}

/// Euclidean norm of a tensor as a `1 × 1` node.
pub fn l2_norm(g: &mut Graph, x: Var) -> Result<Var> {
    let sq = g.square(x)?;
    let s = g.sum_all(sq)?;
    Ok(g.sqrt(s)?)
}
