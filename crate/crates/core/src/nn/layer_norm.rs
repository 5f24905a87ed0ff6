use crate::autodiff::{Bound, ParamError, ParameterSet, Result, Tape, Tensor, Var};

/// Variance floor inside the normalizer.
pub const LN_EPS: f64 = 1e-9;

/// Per-row normalization over the last axis with learned gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    gain: String,
    bias: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(params: &mut ParameterSet, prefix: &str, dim: usize) -> std::result::Result<Self, ParamError> {
        let ln = Self {
            gain: format!("{prefix}.gain"),
            bias: format!("{prefix}.bias"),
            dim,
        };
        params.insert(&ln.gain, Tensor::full(&[dim], 1.0))?;
        params.insert(&ln.bias, Tensor::zeros(&[dim]))?;
        Ok(ln)
    }

    /// `(x - mean) / sqrt(var + eps)` per row, before the affine map.
    pub fn normalize(tape: &mut Tape, x: Var) -> Result<Var> {
        let mu = tape.mean_axis(x, 1)?;
        let centered = tape.sub(x, mu)?;
        let sq = tape.mul(centered, centered)?;
        let var = tape.mean_axis(sq, 1)?;
        let var = tape.add_scalar(var, LN_EPS)?;
        let sd = tape.sqrt(var)?;
        tape.div(centered, sd)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let n = Self::normalize(tape, x)?;
        let g = tape.mul(n, p.get(&self.gain))?;
        tape.add(g, p.get(&self.bias))
    }
}
