//! Sub-word neural language models built on a small autodiff tape: a FOFE
//! feed-forward model, a stacked LSTM and a pre-norm Transformer with
//! relative-position attention biases.
//!
//! A sequence of sub-word ids `w_1..w_n` is scored as
//! `Σ log p(w_t | <s>, w_<t) + log p(</s> | <s>, w_1..w_n)`.

mod checkpoint;
pub(crate) mod tape;
mod train;

use std::collections::HashMap;
use std::fmt;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::subword::{SubwordModel, BOS_ID, EOS_ID};
use tape::{log_softmax_rows, Graph, Var};

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use train::{train_nnlm, EpochStats, TrainLog};

/// Attention relative-distance clipping.
pub const REL_CLIP: usize = 16;

#[derive(Debug, Error)]
pub enum NnlmError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("token id {id} out of range for vocab size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Fofe,
    Lstm,
    Transformer,
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::Fofe => "fofe",
            Architecture::Lstm => "lstm",
            Architecture::Transformer => "transformer",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NnlmConfig {
    pub architecture: Architecture,
    pub layers: usize,
    pub embed_dim: usize,
    pub layer_dim: usize,
    #[serde(default = "one")]
    pub attention_heads: usize,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default = "default_fofe_factor")]
    pub fofe_factor: f64,
    #[serde(default = "default_fofe_order")]
    pub fofe_order: usize,
    pub vocab_size: usize,
}

fn one() -> usize {
    1
}
fn default_fofe_factor() -> f64 {
    0.85
}
fn default_fofe_order() -> usize {
    8
}

impl NnlmConfig {
    /// A small configuration of the given architecture.
    pub fn tiny(architecture: Architecture, vocab_size: usize) -> Self {
        Self {
            architecture,
            layers: 2,
            embed_dim: 8,
            layer_dim: 8,
            attention_heads: 2,
            dropout: 0.0,
            fofe_factor: 0.85,
            fofe_order: 8,
            vocab_size,
        }
    }

    pub fn validate(&self) -> Result<(), NnlmError> {
        let bad = |m: &str| Err(NnlmError::InvalidConfig(m.to_string()));
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.fofe_factor > 0.0 && self.fofe_factor < 1.0) {
            return bad("fofe_factor must lie in (0, 1)");
        }
        if self.vocab_size < 3 || self.embed_dim == 0 || self.layer_dim == 0 {
            return bad("vocab_size, embed_dim and layer_dim must be positive");
        }
        match self.architecture {
            Architecture::Transformer => {
                if self.attention_heads == 0 || !self.layer_dim.is_multiple_of(self.attention_heads) {
                    return bad("attention_heads must divide layer_dim");
                }
            }
            Architecture::Lstm if self.layers == 0 => return bad("an LSTM needs at least one layer"),
            _ => {}
        }
        Ok(())
    }

    /// Parameter names and shapes in checkpoint order.
    fn shapes(&self) -> Vec<(String, (usize, usize))> {
        let (v, e, h) = (self.vocab_size, self.embed_dim, self.layer_dim);
        let mut out = vec![("embed".to_string(), (v, e))];
        let top = match self.architecture {
            Architecture::Fofe => {
                let mut input = 2 * e;
                for l in 0..self.layers {
                    out.push((format!("layer{l}.w"), (input, h)));
                    out.push((format!("layer{l}.b"), (1, h)));
                    input = h;
                }
                input
            }
            Architecture::Lstm => {
                let mut input = e;
                for l in 0..self.layers {
                    out.push((format!("lstm{l}.wx"), (input, 4 * h)));
                    out.push((format!("lstm{l}.wh"), (h, 4 * h)));
                    out.push((format!("lstm{l}.b"), (1, 4 * h)));
                    input = h;
                }
                h
            }
            Architecture::Transformer => {
                if e != h {
                    out.push(("in_proj".to_string(), (e, h)));
                }
                for l in 0..self.layers {
                    for (n, shape) in [
                        ("ln1.g", (1, h)),
                        ("ln1.b", (1, h)),
                        ("attn.wq", (h, h)),
                        ("attn.wk", (h, h)),
                        ("attn.wv", (h, h)),
                        ("attn.wo", (h, h)),
                        ("attn.rel", (self.attention_heads, REL_CLIP + 1)),
                        ("ln2.g", (1, h)),
                        ("ln2.b", (1, h)),
                        ("ffn.w1", (h, 4 * h)),
                        ("ffn.b1", (1, 4 * h)),
                        ("ffn.w2", (4 * h, h)),
                        ("ffn.b2", (1, h)),
                    ] {
                        out.push((format!("block{l}.{n}"), shape));
                    }
                }
                out.push(("ln_f.g".to_string(), (1, h)));
                out.push(("ln_f.b".to_string(), (1, h)));
                h
            }
        };
        out.push(("out.w".to_string(), (top, v)));
        out.push(("out.b".to_string(), (1, v)));
        out
    }
}

/// Optimizer schedule: linear warm-up from `lr_min` to `lr_peak`, then one
/// multiplication by `decay_factor` per completed epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub warmup_steps: usize,
    pub lr_min: f64,
    pub lr_peak: f64,
    pub decay_factor: f64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_sequences: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            warmup_steps: 1200,
            lr_min: 1e-6,
            lr_peak: 1e-3,
            decay_factor: 0.94,
            epochs: 80,
            steps_per_epoch: 28_000,
            batch_sequences: 16,
        }
    }
}

impl TrainSchedule {
    /// Learning rate at 1-based optimizer step `step`.
    pub fn learning_rate(&self, step: usize) -> f64 {
        if step <= self.warmup_steps {
            let frac = if self.warmup_steps == 0 {
                1.0
            } else {
                step as f64 / self.warmup_steps as f64
            };
            return self.lr_min + (self.lr_peak - self.lr_min) * frac;
        }
        let epochs_done = (step - self.warmup_steps - 1) / self.steps_per_epoch.max(1);
        self.lr_peak * self.decay_factor.powi(epochs_done as i32)
    }
}

/// FOFE code of the last `order` tokens of `history`:
/// `z_t = factor · z_{t-1} + onehot(w_t)`, `z_0 = 0`.
pub fn fofe_encode(history: &[u32], factor: f64, order: usize, vocab_size: usize) -> Vec<f64> {
    let mut z = vec![0.0; vocab_size];
    for (w, weight) in fofe_weights(history, factor, order) {
        z[w] += weight;
    }
    z
}

/// Sparse form of [`fofe_encode`]: `(token, weight)` for each windowed token.
fn fofe_weights(history: &[u32], factor: f64, order: usize) -> Vec<(usize, f64)> {
    let start = history.len().saturating_sub(order);
    let window = &history[start..];
    window
        .iter()
        .enumerate()
        .map(|(k, &w)| (w as usize, factor.powi((window.len() - 1 - k) as i32)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct NnlmModel {
    config: NnlmConfig,
    names: Vec<String>,
    params: Vec<Array2<f64>>,
    index: HashMap<String, usize>,
}

impl NnlmModel {
    /// Randomly initialized model: uniform weights scaled by fan-in, zero
    /// biases, unit layer-norm gains.
    pub fn new(config: NnlmConfig, seed: u64) -> Result<Self, NnlmError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, (r, c)) in config.shapes() {
            let leaf = name.rsplit('.').next().unwrap_or("");
            let p = if name.ends_with(".g") {
                Array2::ones((r, c))
            } else if matches!(leaf, "b" | "b1" | "b2" | "rel") {
                Array2::zeros((r, c))
            } else {
                let fan_in = if name == "embed" { c } else { r };
                let a = 1.0 / (fan_in as f64).sqrt();
                Array2::from_shape_fn((r, c), |_| rng.random_range(-a..a))
            };
            names.push(name);
            params.push(p);
        }
        Ok(Self::from_parts(config, names, params))
    }

    pub(crate) fn from_parts(config: NnlmConfig, names: Vec<String>, params: Vec<Array2<f64>>) -> Self {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self {
            config,
            names,
            params,
            index,
        }
    }

    pub fn config(&self) -> &NnlmConfig {
        &self.config
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn parameters(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn parameter(&self, name: &str) -> Option<&Array2<f64>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub(crate) fn params(&self) -> &[Array2<f64>] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.params
    }

    pub fn parameter_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    /// Summed NLL of `ids` (plus `</s>`) and its gradient with respect to
    /// every parameter, in [`parameters`](Self::parameters) order. Dropout
    /// is off.
    pub fn loss_and_gradient(&self, ids: &[u32]) -> Result<(f64, Vec<Array2<f64>>), NnlmError> {
        self.check_ids(ids)?;
        Ok(train::sequence_gradient(self, ids, None))
    }

    /// Zeroes the output projection, making every prediction uniform.
    pub fn zero_output_layer(&mut self) {
        for name in ["out.w", "out.b"] {
            let i = self.index[name];
            self.params[i].fill(0.0);
        }
    }

    fn check_ids(&self, ids: &[u32]) -> Result<(), NnlmError> {
        match ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            Some(&id) => Err(NnlmError::TokenOutOfRange {
                id,
                vocab: self.config.vocab_size,
            }),
            None => Ok(()),
        }
    }

    /// Next-token log-distributions for the inputs `<s>, ids...`: row `t` is
    /// `log p(· | <s>, ids[..t])`, so there are `ids.len() + 1` rows.
    pub fn forward(&self, ids: &[u32]) -> Result<Array2<f64>, NnlmError> {
        self.check_ids(ids)?;
        let input = with_bos(ids);
        let mut g = Graph::new(&self.params);
        let logits = self.build(&mut g, &input, None);
        Ok(log_softmax_rows(g.value(logits)))
    }

    /// Negative natural-log likelihood of `ids` followed by `</s>`.
    pub fn sequence_nll(&self, ids: &[u32]) -> Result<f64, NnlmError> {
        let logp = self.forward(ids)?;
        Ok(-targets(ids).iter().enumerate().map(|(t, &y)| logp[[t, y]]).sum::<f64>())
    }

    /// Builds the training loss (summed NLL) on `g`.
    pub(crate) fn loss(&self, g: &mut Graph, ids: &[u32], rng: Option<&mut ChaCha8Rng>) -> Var {
        let input = with_bos(ids);
        let logits = self.build(g, &input, rng);
        g.nll(logits, &targets(ids))
    }

    fn p(&self, g: &mut Graph, name: &str) -> Var {
        g.param(self.index[name])
    }

    fn build(&self, g: &mut Graph, input: &[usize], mut rng: Option<&mut ChaCha8Rng>) -> Var {
        let rate = if rng.is_some() { self.config.dropout } else { 0.0 };
        let mut dropout = |g: &mut Graph, v: Var| match rng.as_deref_mut() {
            Some(r) => g.dropout(v, rate, r),
            None => v,
        };
        let embed = self.p(g, "embed");
        let top = match self.config.architecture {
            Architecture::Fofe => {
                let hist: Vec<u32> = input.iter().map(|&i| i as u32).collect();
                let rows = (0..input.len())
                    .map(|t| fofe_weights(&hist[..t], self.config.fofe_factor, self.config.fofe_order))
                    .collect();
                let z = g.sparse_rows(embed, rows);
                let cur = g.gather(embed, input);
                let mut x = g.concat_cols(&[z, cur]);
                x = dropout(g, x);
                for l in 0..self.config.layers {
                    let w = self.p(g, &format!("layer{l}.w"));
                    let b = self.p(g, &format!("layer{l}.b"));
                    let a = g.matmul(x, w);
                    let a = g.add_row(a, b);
                    let a = g.relu(a);
                    x = dropout(g, a);
                }
                x
            }
            Architecture::Lstm => {
                let h_dim = self.config.layer_dim;
                let emb = g.gather(embed, input);
                let mut x = dropout(g, emb);
                for l in 0..self.config.layers {
                    let wx = self.p(g, &format!("lstm{l}.wx"));
                    let wh = self.p(g, &format!("lstm{l}.wh"));
                    let b = self.p(g, &format!("lstm{l}.b"));
                    let xw = g.matmul(x, wx);
                    let xw = g.add_row(xw, b);
                    let mut h = g.constant(Array2::zeros((1, h_dim)));
                    let mut c = g.constant(Array2::zeros((1, h_dim)));
                    let mut outs = Vec::with_capacity(input.len());
                    for t in 0..input.len() {
                        let xt = g.slice_rows(xw, t, 1);
                        let hw = g.matmul(h, wh);
                        let gates = g.add(xt, hw);
                        let i = g.slice_cols(gates, 0, h_dim);
                        let f = g.slice_cols(gates, h_dim, h_dim);
                        let u = g.slice_cols(gates, 2 * h_dim, h_dim);
                        let o = g.slice_cols(gates, 3 * h_dim, h_dim);
                        let (i, f, u, o) = (g.sigmoid(i), g.sigmoid(f), g.tanh(u), g.sigmoid(o));
                        let keep = g.mul(f, c);
                        let write = g.mul(i, u);
                        c = g.add(keep, write);
                        let tc = g.tanh(c);
                        h = g.mul(o, tc);
                        outs.push(h);
                    }
                    let seq = g.concat_rows(&outs);
                    x = dropout(g, seq);
                }
                x
            }
            Architecture::Transformer => {
                let d = self.config.layer_dim;
                let heads = self.config.attention_heads;
                let dh = d / heads;
                let mut x = g.gather(embed, input);
                if self.index.contains_key("in_proj") {
                    let w = self.p(g, "in_proj");
                    x = g.matmul(x, w);
                }
                x = dropout(g, x);
                for l in 0..self.config.layers {
                    let n = |s: &str| format!("block{l}.{s}");
                    let (g1, b1) = (self.p(g, &n("ln1.g")), self.p(g, &n("ln1.b")));
                    let a = g.layer_norm(x, g1, b1);
                    let (wq, wk, wv, wo) = (
                        self.p(g, &n("attn.wq")),
                        self.p(g, &n("attn.wk")),
                        self.p(g, &n("attn.wv")),
                        self.p(g, &n("attn.wo")),
                    );
                    let rel = self.p(g, &n("attn.rel"));
                    let (q, k, v) = (g.matmul(a, wq), g.matmul(a, wk), g.matmul(a, wv));
                    let mut ctx = Vec::with_capacity(heads);
                    for hd in 0..heads {
                        let qh = g.slice_cols(q, hd * dh, dh);
                        let kh = g.slice_cols(k, hd * dh, dh);
                        let vh = g.slice_cols(v, hd * dh, dh);
                        let sc = g.matmul_t(qh, kh);
                        let sc = g.scale(sc, 1.0 / (dh as f64).sqrt());
                        let bias = g.slice_rows(rel, hd, 1);
                        let sc = g.rel_bias(sc, bias, REL_CLIP);
                        let att = g.causal_softmax(sc);
                        ctx.push(g.matmul(att, vh));
                    }
                    let cat = g.concat_cols(&ctx);
                    let att_out = g.matmul(cat, wo);
                    let att_out = dropout(g, att_out);
                    x = g.add(x, att_out);

                    let (g2, b2) = (self.p(g, &n("ln2.g")), self.p(g, &n("ln2.b")));
                    let a = g.layer_norm(x, g2, b2);
                    let (w1, bb1) = (self.p(g, &n("ffn.w1")), self.p(g, &n("ffn.b1")));
                    let (w2, bb2) = (self.p(g, &n("ffn.w2")), self.p(g, &n("ffn.b2")));
                    let hdn = g.matmul(a, w1);
                    let hdn = g.add_row(hdn, bb1);
                    let hdn = g.relu(hdn);
                    let f = g.matmul(hdn, w2);
                    let f = g.add_row(f, bb2);
                    let f = dropout(g, f);
                    x = g.add(x, f);
                }
                let (gf, bf) = (self.p(g, "ln_f.g"), self.p(g, "ln_f.b"));
                g.layer_norm(x, gf, bf)
            }
        };
        let w = self.p(g, "out.w");
        let b = self.p(g, "out.b");
        let logits = g.matmul(top, w);
        g.add_row(logits, b)
    }
}

fn with_bos(ids: &[u32]) -> Vec<usize> {
    std::iter::once(BOS_ID as usize).chain(ids.iter().map(|&i| i as usize)).collect()
}

fn targets(ids: &[u32]) -> Vec<usize> {
    ids.iter().map(|&i| i as usize).chain(std::iter::once(EOS_ID as usize)).collect()
}

/// Negative natural-log likelihood of `text` after sub-word encoding,
/// including the end-of-sentence prediction.
pub fn nnlm_sequence_nll(model: &NnlmModel, text: &str, tokenizer: &SubwordModel) -> Result<f64, NnlmError> {
    model.sequence_nll(&tokenizer.encode(text).ids)
}
