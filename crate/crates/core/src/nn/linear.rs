use rand::Rng;

use super::init::Init;
use crate::autodiff::{Bound, ParamError, ParameterSet, Result, Tape, Tensor, Var};

/// Affine map `x W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: String,
    pub b: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParameterSet,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        rng: &mut R,
    ) -> std::result::Result<Self, ParamError> {
        let w = format!("{prefix}.w");
        let b = format!("{prefix}.b");
        params.insert(&w, init.tensor(in_dim, out_dim, rng))?;
        params.insert(&b, Tensor::zeros(&[out_dim]))?;
        Ok(Self { w, b, in_dim, out_dim })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = tape.matmul(x, p.get(&self.w))?;
        tape.add(h, p.get(&self.b))
    }
}

/// First layer whose input is a concatenation of named blocks; each block
/// has its own weight so a block shared by many rows can be projected once
/// and gathered.
#[derive(Debug, Clone)]
pub struct SplitLinear {
    pub blocks: Vec<(String, usize)>,
    pub b: String,
    pub out_dim: usize,
}

impl SplitLinear {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParameterSet,
        prefix: &str,
        blocks: &[(&str, usize)],
        out_dim: usize,
        init: Init,
        rng: &mut R,
    ) -> std::result::Result<Self, ParamError> {
        // Initialize as one matrix so the split equals a single orthogonal layer.
        let total: usize = blocks.iter().map(|b| b.1).sum();
        let full = init.tensor(total, out_dim, rng);
        let mut out = Vec::new();
        let mut row = 0;
        for (name, dim) in blocks {
            let id = format!("{prefix}.w_{name}");
            let slice = full.data()[row * out_dim..(row + dim) * out_dim].to_vec();
            params.insert(&id, Tensor::matrix(*dim, out_dim, slice)?)?;
            out.push((id, *dim));
            row += dim;
        }
        let b = format!("{prefix}.b");
        params.insert(&b, Tensor::zeros(&[out_dim]))?;
        Ok(Self { blocks: out, b, out_dim })
    }

    /// `x_k W_k` for block `k`, without bias.
    pub fn project(&self, tape: &mut Tape, p: &Bound, block: usize, x: Var) -> Result<Var> {
        tape.matmul(x, p.get(&self.blocks[block].0))
    }

    /// Sum of per-block projections plus bias.
    pub fn combine(&self, tape: &mut Tape, p: &Bound, projected: &[Var]) -> Result<Var> {
        let mut acc = projected[0];
        for &v in &projected[1..] {
            acc = tape.add(acc, v)?;
        }
        tape.add(acc, p.get(&self.b))
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, inputs: &[Var]) -> Result<Var> {
        let mut proj = Vec::with_capacity(inputs.len());
        for (k, &x) in inputs.iter().enumerate() {
            proj.push(self.project(tape, p, k, x)?);
        }
        self.combine(tape, p, &proj)
    }
}
