//! Plain-loop reference implementations of the three architectures. The
//! model's tape-based forward pass must agree with them to rounding error.

use nbest_rescore::nnlm::{Architecture, NnlmConfig, NnlmModel};
use nbest_rescore::subword::{BOS_ID, EOS_ID};
use proptest::prelude::*;

type Mat = Vec<Vec<f64>>;

fn param(m: &NnlmModel, name: &str) -> Mat {
    let p = m.parameter(name).unwrap_or_else(|| panic!("no parameter {name}"));
    p.outer_iter().map(|r| r.to_vec()).collect()
}

fn vec_mat(x: &[f64], w: &Mat) -> Vec<f64> {
    let mut out = vec![0.0; w[0].len()];
    for (xi, row) in x.iter().zip(w) {
        for (o, wij) in out.iter_mut().zip(row) {
            *o += xi * wij;
        }
    }
    out
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let s = (var + 1e-5).sqrt();
    x.iter().zip(g).zip(b).map(|((v, g), b)| (v - mean) / s * g + b).collect()
}

fn log_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

/// Hidden states of the top layer for each input position.
fn fofe_hidden(m: &NnlmModel, input: &[u32]) -> Vec<Vec<f64>> {
    let c = m.config();
    let embed = param(m, "embed");
    (0..input.len())
        .map(|t| {
            // Recursion z_t = α z_{t-1} + e(w) over the window before position t.
            let start = t.saturating_sub(c.fofe_order);
            let mut z = vec![0.0; c.embed_dim];
            for &w in &input[start..t] {
                z = z.iter().zip(&embed[w as usize]).map(|(z, e)| c.fofe_factor * z + e).collect();
            }
            let mut x: Vec<f64> = z.into_iter().chain(embed[input[t] as usize].iter().cloned()).collect();
            for l in 0..c.layers {
                let a = add(&vec_mat(&x, &param(m, &format!("layer{l}.w"))), &param(m, &format!("layer{l}.b"))[0]);
                x = a.into_iter().map(|v| v.max(0.0)).collect();
            }
            x
        })
        .collect()
}

fn lstm_hidden(m: &NnlmModel, input: &[u32]) -> Vec<Vec<f64>> {
    let c = m.config();
    let h_dim = c.layer_dim;
    let embed = param(m, "embed");
    let mut xs: Vec<Vec<f64>> = input.iter().map(|&w| embed[w as usize].clone()).collect();
    for l in 0..c.layers {
        let (wx, wh, b) = (
            param(m, &format!("lstm{l}.wx")),
            param(m, &format!("lstm{l}.wh")),
            param(m, &format!("lstm{l}.b")),
        );
        let (mut h, mut cell) = (vec![0.0; h_dim], vec![0.0; h_dim]);
        let mut outs = Vec::new();
        for x in &xs {
            let gates = add(&add(&vec_mat(x, &wx), &b[0]), &vec_mat(&h, &wh));
            for k in 0..h_dim {
                let i = sigmoid(gates[k]);
                let f = sigmoid(gates[h_dim + k]);
                let u = gates[2 * h_dim + k].tanh();
                let o = sigmoid(gates[3 * h_dim + k]);
                cell[k] = f * cell[k] + i * u;
                h[k] = o * cell[k].tanh();
            }
            outs.push(h.clone());
        }
        xs = outs;
    }
    xs
}

fn transformer_hidden(m: &NnlmModel, input: &[u32]) -> Vec<Vec<f64>> {
    let c = m.config();
    let (d, heads) = (c.layer_dim, c.attention_heads);
    let dh = d / heads;
    let embed = param(m, "embed");
    let mut xs: Vec<Vec<f64>> = input.iter().map(|&w| embed[w as usize].clone()).collect();
    if m.parameter("in_proj").is_some() {
        let w = param(m, "in_proj");
        xs = xs.iter().map(|x| vec_mat(x, &w)).collect();
    }
    for l in 0..c.layers {
        let p = |s: &str| param(m, &format!("block{l}.{s}"));
        let (wq, wk, wv, wo, rel) = (p("attn.wq"), p("attn.wk"), p("attn.wv"), p("attn.wo"), p("attn.rel"));
        let normed: Vec<Vec<f64>> = xs.iter().map(|x| layer_norm(x, &p("ln1.g")[0], &p("ln1.b")[0])).collect();
        let q: Vec<Vec<f64>> = normed.iter().map(|a| vec_mat(a, &wq)).collect();
        let k: Vec<Vec<f64>> = normed.iter().map(|a| vec_mat(a, &wk)).collect();
        let v: Vec<Vec<f64>> = normed.iter().map(|a| vec_mat(a, &wv)).collect();
        let mut next = Vec::new();
        for i in 0..xs.len() {
            let mut ctx = vec![0.0; d];
            for (hd, rel_h) in rel.iter().enumerate().take(heads) {
                let cols = hd * dh..(hd + 1) * dh;
                let scores: Vec<f64> = (0..=i)
                    .map(|j| {
                        let dot: f64 = cols.clone().map(|c| q[i][c] * k[j][c]).sum();
                        dot / (dh as f64).sqrt() + rel_h[(i - j).min(16)]
                    })
                    .collect();
                let att: Vec<f64> = log_softmax(&scores).into_iter().map(f64::exp).collect();
                for (j, a) in att.iter().enumerate() {
                    for c in cols.clone() {
                        ctx[c] += a * v[j][c];
                    }
                }
            }
            let x = add(&xs[i], &vec_mat(&ctx, &wo));
            let a = layer_norm(&x, &p("ln2.g")[0], &p("ln2.b")[0]);
            let hidden: Vec<f64> = add(&vec_mat(&a, &p("ffn.w1")), &p("ffn.b1")[0]).into_iter().map(|v| v.max(0.0)).collect();
            next.push(add(&x, &add(&vec_mat(&hidden, &p("ffn.w2")), &p("ffn.b2")[0])));
        }
        xs = next;
    }
    xs.iter().map(|x| layer_norm(x, &param(m, "ln_f.g")[0], &param(m, "ln_f.b")[0])).collect()
}

/// Reference negative log-likelihood of `ids` followed by end of sentence.
fn reference_nll(m: &NnlmModel, ids: &[u32]) -> f64 {
    let input: Vec<u32> = std::iter::once(BOS_ID).chain(ids.iter().cloned()).collect();
    let hidden = match m.config().architecture {
        Architecture::Fofe => fofe_hidden(m, &input),
        Architecture::Lstm => lstm_hidden(m, &input),
        Architecture::Transformer => transformer_hidden(m, &input),
    };
    let (w, b) = (param(m, "out.w"), param(m, "out.b"));
    let targets = ids.iter().cloned().chain(std::iter::once(EOS_ID));
    hidden
        .iter()
        .zip(targets)
        .map(|(h, y)| -log_softmax(&add(&vec_mat(h, &w), &b[0]))[y as usize])
        .sum()
}

fn check(arch: Architecture, embed: usize, layers: usize, seed: u64, ids: &[u32]) {
    let config = NnlmConfig {
        embed_dim: embed,
        layers,
        fofe_order: 3,
        ..NnlmConfig::tiny(arch, 13)
    };
    let m = NnlmModel::new(config, seed).unwrap();
    let got = m.sequence_nll(ids).unwrap();
    let want = reference_nll(&m, ids);
    assert!((got - want).abs() < 1e-9 * want.abs().max(1.0), "{arch}: {got} vs {want}");
}

#[test]
fn forward_matches_reference_for_each_architecture() {
    for arch in [Architecture::Fofe, Architecture::Lstm, Architecture::Transformer] {
        check(arch, 8, 2, 1, &[3, 4, 12, 4, 5, 6, 7]);
        // Transformer with an input projection.
        check(arch, 6, 1, 2, &[9]);
        check(arch, 8, 1, 3, &[]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn random_sequences_match_reference(
        arch in prop::sample::select(vec![Architecture::Fofe, Architecture::Lstm, Architecture::Transformer]),
        seed in 0u64..1000,
        ids in prop::collection::vec(3u32..13, 0..20),
    ) {
        check(arch, 8, 2, seed, &ids);
    }
}
