//! Soft group assignment over learnable prototypes.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::{Bound, ParamError, ParameterSet, Result, Tape, Tensor, TensorError, Var};
use crate::nn::Init;

pub const INIT_LOGIT_SCALE: f64 = 3.0;
/// Added to descriptor and prototype norms before the cosine.
pub const NORM_EPS: f64 = 1e-8;
/// Uniform samples are clamped to `[GUMBEL_EPS, 1 - GUMBEL_EPS]`.
pub const GUMBEL_EPS: f64 = 1e-10;
/// Floor applied inside every `log P`.
pub const LOG_FLOOR: f64 = 1e-12;
/// Guard on the centered-row norms of the edge alignment loss.
pub const EDGE_EPS: f64 = 1e-8;

/// Prototypes plus a softplus-parameterized logit scale.
#[derive(Debug, Clone)]
pub struct GroupModule {
    pub prototypes: String,
    pub raw_scale: String,
    pub n_groups: usize,
    pub dim: usize,
}

impl GroupModule {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParameterSet,
        prefix: &str,
        n_groups: usize,
        dim: usize,
        rng: &mut R,
    ) -> std::result::Result<Self, ParamError> {
        let prototypes = format!("{prefix}.prototypes");
        let raw_scale = format!("{prefix}.raw_scale");
        params.insert(&prototypes, Init::Orthogonal(1.0).tensor(n_groups, dim, rng))?;
        params.insert(&raw_scale, Tensor::vector(vec![inverse_softplus(INIT_LOGIT_SCALE)]))?;
        Ok(Self {
            prototypes,
            raw_scale,
            n_groups,
            dim,
        })
    }

    /// Current positive logit scale.
    pub fn scale(&self, params: &ParameterSet) -> f64 {
        softplus(params.get(&self.raw_scale).expect("registered").data()[0])
    }

    /// `alpha * cos(z_i, p_g)` for descriptors `z: [R, dim]`, giving `[R, M]`.
    pub fn logits(&self, tape: &mut Tape, p: &Bound, z: Var) -> Result<Var> {
        let zn = unit_rows(tape, z)?;
        let pn = unit_rows(tape, p.get(&self.prototypes))?;
        let pt = tape.transpose(pn)?;
        let cos = tape.matmul(zn, pt)?;
        let e = tape.exp(p.get(&self.raw_scale))?;
        let e1 = tape.add_scalar(e, 1.0)?;
        let alpha = tape.log(e1)?;
        tape.mul(cos, alpha)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

fn unit_rows(tape: &mut Tape, x: Var) -> Result<Var> {
    let n = tape.l2_norm_last(x)?;
    let n = tape.add_scalar(n, NORM_EPS)?;
    tape.div(x, n)
}

/// Standard Gumbel noise `-ln(-ln u)` with clamped uniforms.
pub fn sample_gumbel<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let u: f64 = rng.gen::<f64>().clamp(GUMBEL_EPS, 1.0 - GUMBEL_EPS);
            -(-u.ln()).ln()
        })
        .collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches data")
}

/// One macro-step's assignment variables on a tape.
#[derive(Debug, Clone, Copy)]
pub struct Assignment {
    pub logits: Var,
    /// Gumbel-softmax sample.
    pub soft: Var,
    /// Noiseless tempered softmax.
    pub probs: Var,
    /// `ln max(probs, LOG_FLOOR)`.
    pub log_probs: Var,
}

pub fn assign(tape: &mut Tape, logits: Var, gumbel: &Tensor, tau: f64) -> Result<Assignment> {
    if !tape.value(logits).is_finite() {
        return Err(TensorError::NonFinite { op: "assign" });
    }
    let noise = tape.constant(gumbel.clone());
    let noisy = tape.add(logits, noise)?;
    let noisy = tape.scale(noisy, 1.0 / tau)?;
    let soft = tape.softmax(noisy)?;
    let tempered = tape.scale(logits, 1.0 / tau)?;
    let probs = tape.softmax(tempered)?;
    let floored = tape.max_scalar(probs, LOG_FLOOR)?;
    let log_probs = tape.log(floored)?;
    Ok(Assignment {
        logits,
        soft,
        probs,
        log_probs,
    })
}

/// Within-bundle affinity rows `G[b*n + i, j] = <Y_{b,i}, Y_{b,j}>` for
/// `soft: [B*n, M]`, giving `[B*n, n]`.
pub fn affinity_rows(tape: &mut Tape, soft: Var, n_agents: usize) -> Result<Var> {
    let rows = tape.shape(soft)[0];
    let mut left = Vec::with_capacity(rows * n_agents);
    let mut right = Vec::with_capacity(rows * n_agents);
    for r in 0..rows {
        let base = r - r % n_agents;
        for j in 0..n_agents {
            left.push(r);
            right.push(base + j);
        }
    }
    let a = tape.gather_rows(soft, &left)?;
    let b = tape.gather_rows(soft, &right)?;
    let prod = tape.mul(a, b)?;
    let dots = tape.sum_last(prod)?;
    tape.reshape(dots, &[rows, n_agents])
}

/// `-sum_i adv_i * sum_g Y_ig ln P_ig` with `adv` treated as constant.
pub fn pg_loss(tape: &mut Tape, a: &Assignment, adv: &[f64]) -> Result<Var> {
    let rows = tape.shape(a.soft)[0];
    let w = tape.constant(Tensor::new(vec![rows, 1], adv.to_vec())?);
    let score = tape.mul(a.soft, a.log_probs)?;
    let score = tape.sum_last(score)?;
    let weighted = tape.mul(score, w)?;
    let total = tape.sum(weighted)?;
    tape.neg(total)
}

/// Constant `[B, B*n]` matrix that averages each bundle's rows.
fn bundle_mean_matrix(bundles: usize, n_agents: usize) -> Tensor {
    let mut data = vec![0.0; bundles * bundles * n_agents];
    for b in 0..bundles {
        for i in 0..n_agents {
            data[b * bundles * n_agents + b * n_agents + i] = 1.0 / n_agents as f64;
        }
    }
    Tensor::new(vec![bundles, bundles * n_agents], data).expect("shape matches data")
}

/// `||mean_i P_i - 1/M||^2`, averaged over the bundles stacked in `probs`.
pub fn balance_loss(tape: &mut Tape, probs: Var, n_agents: usize) -> Result<Var> {
    let (rows, m) = (tape.shape(probs)[0], tape.shape(probs)[1]);
    let bundles = rows / n_agents;
    let avg = tape.constant(bundle_mean_matrix(bundles, n_agents));
    let mean = tape.matmul(avg, probs)?;
    let dev = tape.add_scalar(mean, -1.0 / m as f64)?;
    let sq = tape.mul(dev, dev)?;
    let per = tape.sum_last(sq)?;
    tape.mean(per)
}

/// Negative mean row entropy `(1/N) sum_i sum_g P ln P`.
pub fn entropy_loss(tape: &mut Tape, a: &Assignment) -> Result<Var> {
    let plogp = tape.mul(a.probs, a.log_probs)?;
    let per = tape.sum_last(plogp)?;
    tape.mean(per)
}

/// Center over valid entries and divide by the guarded norm; invalid
/// entries come out zero.
fn center_rows(tape: &mut Tape, x: Var, mask: Var, counts: Var) -> Result<Var> {
    let xm = tape.mul(x, mask)?;
    let sums = tape.sum_last(xm)?;
    let means = tape.div(sums, counts)?;
    let c = tape.sub(xm, means)?;
    let c = tape.mul(c, mask)?;
    let sq = tape.mul(c, c)?;
    let ss = tape.sum_last(sq)?;
    let ss = tape.add_scalar(ss, EDGE_EPS * EDGE_EPS)?;
    let norm = tape.sqrt(ss)?;
    tape.div(c, norm)
}

/// `-(1/R) sum_r cos(center(G_r), center(U_r))` over the entries marked in
/// `valid` (self-pairs excluded). Rows with fewer than one valid entry add 0.
pub fn edge_alignment_loss(
    tape: &mut Tape,
    g_rows: Var,
    utilities: &Tensor,
    valid: &Tensor,
) -> Result<Var> {
    let rows = tape.shape(g_rows)[0];
    let counts: Vec<f64> = valid
        .data()
        .chunks(valid.shape()[1])
        .map(|r| r.iter().sum::<f64>().max(1.0))
        .collect();
    let counts = tape.constant(Tensor::new(vec![rows, 1], counts)?);
    let mask = tape.constant(valid.clone());
    let u = tape.constant(utilities.clone());
    let gn = center_rows(tape, g_rows, mask, counts)?;
    let un = center_rows(tape, u, mask, counts)?;
    let prod = tape.mul(gn, un)?;
    let cos = tape.sum_last(prod)?;
    let mean = tape.mean(cos)?;
    tape.neg(mean)
}

/// `(P v)_i - (P v_sigma)_i` for each row of `probs: [N, M]` (row-major).
pub fn grouping_advantage(probs: &[f64], values: &[f64], perm: &[usize]) -> Vec<f64> {
    let m = values.len();
    probs
        .chunks(m)
        .map(|row| {
            row.iter()
                .enumerate()
                .map(|(g, p)| p * (values[g] - values[perm[g]]))
                .sum()
        })
        .collect()
}

pub fn random_permutation<R: Rng + ?Sized>(rng: &mut R, m: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..m).collect();
    p.shuffle(rng);
    p
}

/// Argmax with lowest-index tie breaking.
pub fn hard_label(row: &[f64]) -> usize {
    let mut best = 0;
    for (g, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = g;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_inverse_round_trip() {
        for y in [1e-3, 0.5, 3.0, 20.0] {
            assert!((softplus(inverse_softplus(y)) - y).abs() < 1e-12 * y.max(1.0));
        }
    }

    #[test]
    fn hard_label_prefers_lowest_index_on_ties() {
        assert_eq!(hard_label(&[0.5, 0.5]), 0);
        assert_eq!(hard_label(&[0.2, 0.4, 0.4]), 1);
    }

    #[test]
    fn bundle_mean_matrix_rows_average() {
        let m = bundle_mean_matrix(2, 3);
        assert_eq!(m.shape(), &[2, 6]);
        assert_eq!(m.row(1), &[0.0, 0.0, 0.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]);
    }
}
