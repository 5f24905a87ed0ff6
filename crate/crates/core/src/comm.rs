//! Three-headed policy output, recipient biasing and the attention mailbox.

use rand::Rng;
use thiserror::Error;

use crate::autodiff::{Bound, ParamError, ParameterSet, Result, Tape, Tensor, Var};
use crate::nn::{Init, Linear};

pub const MSG_DIM: usize = 96;
/// Added to affinities inside the recipient log-bias.
pub const BIAS_EPS: f64 = 1e-6;
/// Finite stand-in for minus infinity on masked recipients.
pub const MASKED_LOGIT: f64 = -1e30;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum CommError {
    #[error("agent {sender} is not among the senders to {recipient}")]
    NotASender { sender: usize, recipient: usize },
    #[error("message dimension mismatch: expected {expected}, got {got}")]
    Dim { expected: usize, got: usize },
}

/// Action, send and recipient heads on the shared recurrent state.
#[derive(Debug, Clone)]
pub struct PolicyHeads {
    pub action: Linear,
    pub send: Linear,
    pub recipient: Linear,
}

#[derive(Debug, Clone, Copy)]
pub struct HeadLogits {
    pub action: Var,
    pub send: Var,
    /// Unbiased recipient scores `[R, N]`.
    pub recipient: Var,
}

impl PolicyHeads {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParameterSet,
        prefix: &str,
        hidden_dim: usize,
        n_actions: usize,
        n_agents: usize,
        init: Init,
        rng: &mut R,
    ) -> std::result::Result<Self, ParamError> {
        Ok(Self {
            action: Linear::new(params, &format!("{prefix}.action"), hidden_dim, n_actions, init, rng)?,
            send: Linear::new(params, &format!("{prefix}.send"), hidden_dim, 2, init, rng)?,
            recipient: Linear::new(params, &format!("{prefix}.recipient"), hidden_dim, n_agents, init, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, hidden: Var) -> Result<HeadLogits> {
        Ok(HeadLogits {
            action: self.action.forward(tape, p, hidden)?,
            send: self.send.forward(tape, p, hidden)?,
            recipient: self.recipient.forward(tape, p, hidden)?,
        })
    }
}

/// Constant `[R, N]` mask with [`MASKED_LOGIT`] at each row's own index.
pub fn self_mask(self_index: &[usize], n_agents: usize) -> Tensor {
    let mut data = vec![0.0; self_index.len() * n_agents];
    for (r, &i) in self_index.iter().enumerate() {
        data[r * n_agents + i] = MASKED_LOGIT;
    }
    Tensor::new(vec![self_index.len(), n_agents], data).expect("shape matches data")
}

/// `raw + ln(G + eps)` with each row's own index masked out.
pub fn recipient_logits(
    tape: &mut Tape,
    raw: Var,
    affinity: Var,
    self_index: &[usize],
) -> Result<Var> {
    let n = tape.shape(raw)[1];
    let shifted = tape.add_scalar(affinity, BIAS_EPS)?;
    let bias = tape.log(shifted)?;
    let biased = tape.add(raw, bias)?;
    let mask = tape.constant(self_mask(self_index, n));
    tape.add(biased, mask)
}

/// Inverse-CDF draw from a probability vector.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (k, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last = k;
            acc += p;
            if u < acc {
                return k;
            }
        }
    }
    last
}

/// Incoming messages after one aggregation round.
#[derive(Debug, Clone, PartialEq)]
pub struct Mailboxes {
    /// One `MSG_DIM` vector per recipient; zero when nothing arrived.
    pub boxes: Vec<Vec<f64>>,
    /// `(sender, attention weight)` per recipient, in sender order.
    pub incoming: Vec<Vec<(usize, f64)>>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scaled dot-product attention of recipient `query` over `senders`.
pub fn attention_weights(query: &[f64], senders: &[&[f64]]) -> Vec<f64> {
    if senders.is_empty() {
        return Vec::new();
    }
    let scale = (query.len() as f64).sqrt();
    let scores: Vec<f64> = senders.iter().map(|x| dot(query, x) / scale).collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn weighted_sum(dim: usize, terms: impl Iterator<Item = (f64, usize)>, messages: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for (w, i) in terms {
        for (o, x) in out.iter_mut().zip(&messages[i]) {
            *o += w * x;
        }
    }
    out
}

/// Deliver messages: `targets[i]` is `Some(j)` when agent `i` sends to `j`.
/// Each recipient's query is its own message vector.
pub fn aggregate(targets: &[Option<usize>], messages: &[Vec<f64>]) -> Mailboxes {
    let n = messages.len();
    let dim = messages.first().map_or(0, Vec::len);
    let mut senders: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, t) in targets.iter().enumerate() {
        if let Some(j) = *t {
            senders[j].push(i);
        }
    }
    let mut boxes = Vec::with_capacity(n);
    let mut incoming = Vec::with_capacity(n);
    for (j, s) in senders.iter().enumerate() {
        let xs: Vec<&[f64]> = s.iter().map(|&i| messages[i].as_slice()).collect();
        let w = attention_weights(&messages[j], &xs);
        boxes.push(weighted_sum(dim, w.iter().cloned().zip(s.iter().cloned()), messages));
        incoming.push(s.iter().cloned().zip(w).collect());
    }
    Mailboxes { boxes, incoming }
}

/// Differentiable [`aggregate`] over `messages: [N, d]`, returning `[N, d]`.
///
/// Training detaches messages at the mailbox boundary, so rollouts use the
/// plain version; this one exists for gradient checks of the attention path.
pub fn aggregate_on_tape(tape: &mut Tape, targets: &[Option<usize>], messages: Var) -> Result<Var> {
    let shape = tape.shape(messages).to_vec();
    let (n, dim) = (shape[0], shape[1]);
    let scale = 1.0 / (dim as f64).sqrt();
    let mut rows = Vec::with_capacity(n);
    for j in 0..n {
        let senders: Vec<usize> = (0..targets.len()).filter(|&i| targets[i] == Some(j)).collect();
        if senders.is_empty() {
            rows.push(tape.constant(Tensor::zeros(&[1, dim])));
            continue;
        }
        let xs = tape.gather_rows(messages, &senders)?;
        let q = tape.gather_rows(messages, &[j])?;
        let xt = tape.transpose(xs)?;
        let scores = tape.matmul(q, xt)?;
        let scores = tape.scale(scores, scale)?;
        let w = tape.softmax(scores)?;
        rows.push(tape.matmul(w, xs)?);
    }
    tape.concat(&rows, 0)
}

impl Mailboxes {
    /// Recipient's mailbox with `sender` removed, renormalizing the cached
    /// weights of the remaining senders.
    pub fn leave_one_out(
        &self,
        messages: &[Vec<f64>],
        sender: usize,
        recipient: usize,
    ) -> std::result::Result<Vec<f64>, CommError> {
        let inc = &self.incoming[recipient];
        if !inc.iter().any(|(i, _)| *i == sender) {
            return Err(CommError::NotASender { sender, recipient });
        }
        let dim = self.boxes[recipient].len();
        let rest: Vec<(f64, usize)> = inc
            .iter()
            .filter(|(i, _)| *i != sender)
            .map(|(i, w)| (*w, *i))
            .collect();
        let total: f64 = rest.iter().map(|t| t.0).sum();
        if rest.is_empty() {
            return Ok(vec![0.0; dim]);
        }
        Ok(weighted_sum(dim, rest.into_iter().map(|(w, i)| (w / total, i)), messages))
    }
}

/// A realized message edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edge {
    pub t: usize,
    pub sender: usize,
    pub recipient: usize,
    pub same_group: bool,
}

impl Edge {
    pub const CSV_HEADER: &'static str = "t,sender,recipient,same_group";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.t, self.sender, self.recipient, u8::from(self.same_group))
    }
}
