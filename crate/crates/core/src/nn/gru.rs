use rand::Rng;

use super::init::Init;
use crate::autodiff::{Bound, ParamError, ParameterSet, Result, Tape, Tensor, Var};

/// Gated recurrent unit with gate blocks ordered reset | update | candidate.
///
/// ```text
/// r  = sigmoid(x W_ir + b_ir + h W_hr + b_hr)
/// z  = sigmoid(x W_iz + b_iz + h W_hz + b_hz)
/// n  = tanh(x W_in + b_in + r * (h W_hn + b_hn))
/// h' = (1 - z) * n + z * h
/// ```
#[derive(Debug, Clone)]
pub struct GruCell {
    w_i: String,
    w_h: String,
    b_i: String,
    b_h: String,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParameterSet,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        init: Init,
        rng: &mut R,
    ) -> std::result::Result<Self, ParamError> {
        let h = hidden_dim;
        let blocks = |rows: usize, rng: &mut R| -> Tensor {
            // One orthogonal block per gate, laid side by side.
            let parts: Vec<Tensor> = (0..3).map(|_| init.tensor(rows, h, rng)).collect();
            let mut data = Vec::with_capacity(rows * 3 * h);
            for r in 0..rows {
                for p in &parts {
                    data.extend_from_slice(p.row(r));
                }
            }
            Tensor::matrix(rows, 3 * h, data).expect("gate blocks")
        };
        let cell = Self {
            w_i: format!("{prefix}.w_i"),
            w_h: format!("{prefix}.w_h"),
            b_i: format!("{prefix}.b_i"),
            b_h: format!("{prefix}.b_h"),
            input_dim,
            hidden_dim,
        };
        params.insert(&cell.w_i, blocks(input_dim, rng))?;
        params.insert(&cell.w_h, blocks(hidden_dim, rng))?;
        params.insert(&cell.b_i, Tensor::zeros(&[3 * h]))?;
        params.insert(&cell.b_h, Tensor::zeros(&[3 * h]))?;
        Ok(cell)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, h: Var) -> Result<Var> {
        let hd = self.hidden_dim;
        let gi = tape.matmul(x, p.get(&self.w_i))?;
        let gi = tape.add(gi, p.get(&self.b_i))?;
        let gh = tape.matmul(h, p.get(&self.w_h))?;
        let gh = tape.add(gh, p.get(&self.b_h))?;
        let i_rz = tape.narrow(gi, 0, 2 * hd)?;
        let h_rz = tape.narrow(gh, 0, 2 * hd)?;
        let rz = tape.add(i_rz, h_rz)?;
        let rz = tape.sigmoid(rz)?;
        let r = tape.narrow(rz, 0, hd)?;
        let z = tape.narrow(rz, hd, hd)?;
        let i_n = tape.narrow(gi, 2 * hd, hd)?;
        let h_n = tape.narrow(gh, 2 * hd, hd)?;
        let rh = tape.mul(r, h_n)?;
        let pre = tape.add(i_n, rh)?;
        let n = tape.tanh(pre)?;
        // h' = n + z * (h - n)
        let diff = tape.sub(h, n)?;
        let zd = tape.mul(z, diff)?;
        tape.add(n, zd)
    }
}
