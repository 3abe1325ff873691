//! Fixed-window MLP language model with hand-derived gradients.
//!
//! Row `t` of the output predicts token `x_t` from the `w` tokens before it
//! (left-padded with BOS): the context embeddings are concatenated, passed
//! through one `tanh` hidden layer and projected to vocabulary logits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub context: usize,
    pub hidden: usize,
    pub bos_id: u32,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.embed_dim == 0 || self.context == 0 || self.hidden == 0 {
            return Err(Error::InvalidConfig(format!(
                "all dimensions must be >= 1: {self:?}"
            )));
        }
        if self.bos_id as usize >= self.vocab_size {
            return Err(Error::InvalidConfig(format!("bos id {} >= vocab size", self.bos_id)));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.context * self.embed_dim
    }

    pub fn param_count(&self) -> usize {
        let (v, d, w, h) = (self.vocab_size, self.embed_dim, self.context, self.hidden);
        v * d + w * d * h + h + h * v + v
    }
}

/// Model parameters; also used as the gradient container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// `V x d`, row per token.
    pub embedding: Vec<f64>,
    /// `(w*d) x h`, row-major.
    pub w_hidden: Vec<f64>,
    pub b_hidden: Vec<f64>,
    /// `h x V`, row-major.
    pub w_out: Vec<f64>,
    pub b_out: Vec<f64>,
}

pub type ParamGradients = ModelParams;

impl ModelParams {
    pub fn zeros(config: ModelConfig) -> Self {
        let (v, d, h) = (config.vocab_size, config.embed_dim, config.hidden);
        Self {
            config,
            embedding: vec![0.0; v * d],
            w_hidden: vec![0.0; config.input_dim() * h],
            b_hidden: vec![0.0; h],
            w_out: vec![0.0; h * v],
            b_out: vec![0.0; v],
        }
    }

    pub fn groups(&self) -> [(&'static str, &[f64]); 5] {
        [
            ("embedding", &self.embedding),
            ("w_hidden", &self.w_hidden),
            ("b_hidden", &self.b_hidden),
            ("w_out", &self.w_out),
            ("b_out", &self.b_out),
        ]
    }

    pub fn groups_mut(&mut self) -> [(&'static str, &mut Vec<f64>); 5] {
        [
            ("embedding", &mut self.embedding),
            ("w_hidden", &mut self.w_hidden),
            ("b_hidden", &mut self.b_hidden),
            ("w_out", &mut self.w_out),
            ("b_out", &mut self.b_out),
        ]
    }

    pub fn len(&self) -> usize {
        self.groups().iter().map(|(_, g)| g.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn l2_norm(&self) -> f64 {
        self.groups()
            .iter()
            .flat_map(|(_, g)| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.groups().iter().all(|(_, g)| g.iter().all(|x| x.is_finite()))
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for ((_, dst), (_, src)) in self.groups_mut().into_iter().zip(other.groups()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, g) in self.groups_mut() {
            g.iter_mut().for_each(|x| *x *= factor);
        }
    }
}

/// Deterministic init: weights `U(-0.05, 0.05) / sqrt(fan_in)`, biases zero.
pub fn init_params(config: ModelConfig) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut p = ModelParams::zeros(config);
    let mut fill = |buf: &mut [f64], fan_in: usize| {
        let s = 1.0 / (fan_in as f64).sqrt();
        for x in buf {
            *x = rng.gen_range(-0.05..0.05) * s;
        }
    };
    fill(&mut p.embedding, 1);
    fill(&mut p.w_hidden, config.input_dim());
    fill(&mut p.w_out, config.hidden);
    Ok(p)
}

/// Row-major `rows x vocab` score matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub rows: usize,
    pub vocab: usize,
    pub data: Vec<f64>,
}

impl Logits {
    pub fn zeros(rows: usize, vocab: usize) -> Self {
        Self {
            rows,
            vocab,
            data: vec![0.0; rows * vocab],
        }
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.vocab..(t + 1) * self.vocab]
    }

    pub fn row_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.data[t * self.vocab..(t + 1) * self.vocab]
    }
}

pub type LogitsSequence = Logits;

/// Hidden activations and logits for a subset of positions.
#[derive(Debug, Clone)]
pub struct Activations {
    pub positions: Vec<usize>,
    pub hidden: Vec<f64>,
    pub logits: Logits,
}

fn check_ids(params: &ModelParams, ids: &[u32]) -> Result<()> {
    let v = params.config.vocab_size;
    match ids.iter().find(|&&id| id as usize >= v) {
        Some(&id) => Err(Error::IdOutOfRange { id, vocab: v }),
        None => Ok(()),
    }
}

#[inline]
fn context_id(ids: &[u32], t: usize, slot: usize, w: usize, bos: u32) -> u32 {
    // slot 0 is the oldest token in the window
    (t + slot).checked_sub(w).map_or(bos, |p| ids[p])
}

fn row_forward(params: &ModelParams, ids: &[u32], t: usize, hidden: &mut [f64], logits: &mut [f64]) {
    let c = &params.config;
    let (d, h, w) = (c.embed_dim, c.hidden, c.context);
    hidden.copy_from_slice(&params.b_hidden);
    for slot in 0..w {
        let tok = context_id(ids, t, slot, w, c.bos_id) as usize;
        let emb = &params.embedding[tok * d..(tok + 1) * d];
        for (k, &e) in emb.iter().enumerate() {
            let row = &params.w_hidden[(slot * d + k) * h..(slot * d + k + 1) * h];
            for (acc, &wt) in hidden.iter_mut().zip(row) {
                *acc += e * wt;
            }
        }
    }
    for x in hidden.iter_mut() {
        *x = x.tanh();
    }
    logits.copy_from_slice(&params.b_out);
    let v = c.vocab_size;
    for (j, &hj) in hidden.iter().enumerate() {
        let row = &params.w_out[j * v..(j + 1) * v];
        for (acc, &wt) in logits.iter_mut().zip(row) {
            *acc += hj * wt;
        }
    }
}

/// Logits for every position of `ids`.
pub fn forward(params: &ModelParams, ids: &[u32]) -> Result<Logits> {
    let positions: Vec<usize> = (0..ids.len()).collect();
    Ok(forward_positions(params, ids, &positions)?.logits)
}

/// Forward pass restricted to `positions`, keeping hidden activations for backprop.
pub fn forward_positions(params: &ModelParams, ids: &[u32], positions: &[usize]) -> Result<Activations> {
    check_ids(params, ids)?;
    let c = &params.config;
    let mut hidden = vec![0.0; positions.len() * c.hidden];
    let mut logits = Logits::zeros(positions.len(), c.vocab_size);
    for (r, &t) in positions.iter().enumerate() {
        if t >= ids.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("position < {}", ids.len()),
                got: t.to_string(),
            });
        }
        row_forward(
            params,
            ids,
            t,
            &mut hidden[r * c.hidden..(r + 1) * c.hidden],
            logits.row_mut(r),
        );
    }
    Ok(Activations {
        positions: positions.to_vec(),
        hidden,
        logits,
    })
}

/// Scores for the token following `ids`.
pub fn next_token_logits(params: &ModelParams, ids: &[u32]) -> Result<Vec<f64>> {
    check_ids(params, ids)?;
    let c = &params.config;
    let mut ext = Vec::with_capacity(c.context + 1);
    ext.extend_from_slice(&ids[ids.len().saturating_sub(c.context)..]);
    let t = ext.len();
    ext.push(c.bos_id);
    let mut hidden = vec![0.0; c.hidden];
    let mut logits = vec![0.0; c.vocab_size];
    row_forward(params, &ext, t, &mut hidden, &mut logits);
    Ok(logits)
}

/// Accumulate gradients for the rows in `act` given `dlogits` (one row per position in `act`).
pub fn backward_positions(
    params: &ModelParams,
    ids: &[u32],
    act: &Activations,
    dlogits: &Logits,
    grads: &mut ParamGradients,
) -> Result<()> {
    let c = &params.config;
    let (d, h, w, v) = (c.embed_dim, c.hidden, c.context, c.vocab_size);
    if dlogits.rows != act.positions.len() || dlogits.vocab != v {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", act.positions.len(), v),
            got: format!("{}x{}", dlogits.rows, dlogits.vocab),
        });
    }
    let mut dpre = vec![0.0; h];
    for (r, &t) in act.positions.iter().enumerate() {
        let dl = dlogits.row(r);
        if dl.iter().all(|&x| x == 0.0) {
            continue;
        }
        let hid = &act.hidden[r * h..(r + 1) * h];
        for (gb, &g) in grads.b_out.iter_mut().zip(dl) {
            *gb += g;
        }
        for j in 0..h {
            let wrow = &params.w_out[j * v..(j + 1) * v];
            let grow = &mut grads.w_out[j * v..(j + 1) * v];
            let mut dh = 0.0;
            for ((gw, &wt), &g) in grow.iter_mut().zip(wrow).zip(dl) {
                *gw += hid[j] * g;
                dh += wt * g;
            }
            dpre[j] = dh * (1.0 - hid[j] * hid[j]);
        }
        for (gb, &g) in grads.b_hidden.iter_mut().zip(&dpre) {
            *gb += g;
        }
        for slot in 0..w {
            let tok = context_id(ids, t, slot, w, c.bos_id) as usize;
            for k in 0..d {
                let i = slot * d + k;
                let e = params.embedding[tok * d + k];
                let wrow = &params.w_hidden[i * h..(i + 1) * h];
                let grow = &mut grads.w_hidden[i * h..(i + 1) * h];
                let mut de = 0.0;
                for ((gw, &wt), &g) in grow.iter_mut().zip(wrow).zip(&dpre) {
                    *gw += e * g;
                    de += wt * g;
                }
                grads.embedding[tok * d + k] += de;
            }
        }
    }
    Ok(())
}

/// Exact gradients of a scalar loss given its derivative w.r.t. every logit (`T x V`).
pub fn backward(params: &ModelParams, ids: &[u32], dlogits: &Logits) -> Result<ParamGradients> {
    if dlogits.rows != ids.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} rows", ids.len()),
            got: format!("{} rows", dlogits.rows),
        });
    }
    let positions: Vec<usize> = (0..ids.len())
        .filter(|&t| dlogits.row(t).iter().any(|&x| x != 0.0))
        .collect();
    let act = forward_positions(params, ids, &positions)?;
    let mut sub = Logits::zeros(positions.len(), dlogits.vocab);
    for (r, &t) in positions.iter().enumerate() {
        sub.row_mut(r).copy_from_slice(dlogits.row(t));
    }
    let mut grads = ModelParams::zeros(params.config);
    backward_positions(params, ids, &act, &sub, &mut grads)?;
    Ok(grads)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy continuation of `prompt`. Generation stops after emitting `stop_id` or
/// after `max_len` new tokens; the returned sequence includes the prompt.
pub fn greedy_decode(params: &ModelParams, prompt: &[u32], max_len: usize, stop_id: Option<u32>) -> Result<Vec<u32>> {
    let mut out = prompt.to_vec();
    for _ in 0..max_len {
        let next = argmax(&next_token_logits(params, &out)?) as u32;
        out.push(next);
        if Some(next) == stop_id {
            break;
        }
    }
    Ok(out)
}
