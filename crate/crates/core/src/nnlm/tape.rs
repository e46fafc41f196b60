//! Minimal reverse-mode automatic differentiation over dense f64 matrices.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters are
//! borrowed, never copied; [`Graph::backward`] accumulates their gradients
//! into a caller-supplied buffer.

use ndarray::{concatenate, s, Array1, Array2, Axis, Zip};
use rand::Rng;

pub(crate) type Var = usize;

const LN_EPS: f64 = 1e-5;

enum Op {
    Const,
    Param(usize),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    /// Adds a `[1, n]` row to every row.
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Array2<f64>,
        inv_std: Array1<f64>,
    },
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    /// Row `i` of the output is `Σ w · table[j]` over `rows[i]`.
    SparseRows {
        table: Var,
        rows: Vec<Vec<(usize, f64)>>,
    },
    /// Adds `table[0, min(i - j, clip)]` to entry `(i, j)` for `j ≤ i`.
    RelBias {
        scores: Var,
        table: Var,
        clip: usize,
    },
    /// Row-wise softmax over columns `0..=i`; later columns are zero.
    CausalSoftmax(Var),
    /// Summed cross-entropy of row-wise softmax against target columns.
    Nll {
        logits: Var,
        targets: Vec<usize>,
        probs: Array2<f64>,
    },
}

pub(crate) struct Graph<'p> {
    params: &'p [Array2<f64>],
    vals: Vec<Option<Array2<f64>>>,
    ops: Vec<Op>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p [Array2<f64>]) -> Self {
        Self {
            params,
            vals: Vec::new(),
            ops: Vec::new(),
        }
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        match (&self.vals[v], &self.ops[v]) {
            (Some(a), _) => a,
            (None, Op::Param(i)) => &self.params[*i],
            _ => unreachable!("node without value"),
        }
    }

    fn push(&mut self, val: Option<Array2<f64>>, op: Op) -> Var {
        self.vals.push(val);
        self.ops.push(op);
        self.ops.len() - 1
    }

    pub fn param(&mut self, index: usize) -> Var {
        self.push(None, Op::Param(index))
    }

    pub fn constant(&mut self, a: Array2<f64>) -> Var {
        self.push(Some(a), Op::Const)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(Some(v), Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(Some(v), Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(Some(v), Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        self.push(Some(v), Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(Some(v), Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(Some(v), Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(Some(v), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(Some(v), Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(Some(v), Op::Sigmoid(a))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mean = xv.sum_axis(Axis(1)) / n;
        let centered = xv - &mean.view().insert_axis(Axis(1));
        let var = centered.mapv(|c| c * c).sum_axis(Axis(1)) / n;
        let inv_std = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
        let xhat = centered * inv_std.view().insert_axis(Axis(1));
        let y = &xhat * self.value(gain) + self.value(bias);
        self.push(
            Some(y),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("row counts agree");
        self.push(Some(v), Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(Some(v), Op::SliceCols(a, start))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(0), &views).expect("column counts agree");
        self.push(Some(v), Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(Some(v), Op::SliceRows(a, start))
    }

    pub fn sparse_rows(&mut self, table: Var, rows: Vec<Vec<(usize, f64)>>) -> Var {
        let t = self.value(table);
        let mut out = Array2::zeros((rows.len(), t.ncols()));
        for (i, row) in rows.iter().enumerate() {
            let mut dst = out.row_mut(i);
            for &(j, w) in row {
                dst.scaled_add(w, &t.row(j));
            }
        }
        self.push(Some(out), Op::SparseRows { table, rows })
    }

    /// Looks up rows of an embedding table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        self.sparse_rows(table, ids.iter().map(|&i| vec![(i, 1.0)]).collect())
    }

    pub fn rel_bias(&mut self, scores: Var, table: Var, clip: usize) -> Var {
        let mut v = self.value(scores).clone();
        let t = self.value(table);
        for i in 0..v.nrows() {
            for j in 0..=i.min(v.ncols() - 1) {
                v[[i, j]] += t[[0, (i - j).min(clip)]];
            }
        }
        self.push(Some(v), Op::RelBias { scores, table, clip })
    }

    pub fn causal_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut y = Array2::zeros(x.raw_dim());
        for i in 0..x.nrows() {
            let n = (i + 1).min(x.ncols());
            let row = x.slice(s![i, ..n]);
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut z = 0.0;
            for j in 0..n {
                let e = (row[j] - m).exp();
                y[[i, j]] = e;
                z += e;
            }
            y.slice_mut(s![i, ..n]).mapv_inplace(|e| e / z);
        }
        self.push(Some(y), Op::CausalSoftmax(a))
    }

    pub fn dropout<R: Rng>(&mut self, a: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return a;
        }
        let keep = 1.0 / (1.0 - rate);
        let mask = self.value(a).mapv(|_| if rng.random::<f64>() < rate { 0.0 } else { keep });
        let m = self.constant(mask);
        self.mul(a, m)
    }

    /// Summed negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`; a `[1, 1]` node.
    pub fn nll(&mut self, logits: Var, targets: &[usize]) -> Var {
        let probs = softmax_rows(self.value(logits));
        let loss: f64 = targets
            .iter()
            .enumerate()
            .map(|(t, &y)| -probs[[t, y]].ln())
            .sum();
        self.push(
            Some(Array2::from_elem((1, 1), loss)),
            Op::Nll {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Back-propagates from the scalar node `root`, adding parameter
    /// gradients into `grads` (indexed like the parameter slice).
    pub fn backward(&self, root: Var, grads: &mut [Array2<f64>]) {
        let mut g: Vec<Option<Array2<f64>>> = (0..self.ops.len()).map(|_| None).collect();
        g[root] = Some(Array2::ones(self.value(root).raw_dim()));
        for v in (0..=root).rev() {
            let Some(gv) = g[v].take() else { continue };
            match &self.ops[v] {
                Op::Const => {}
                Op::Param(i) => grads[*i] += &gv,
                Op::MatMul(a, b) => {
                    acc(&mut g, *a, gv.dot(&self.value(*b).t()));
                    acc(&mut g, *b, self.value(*a).t().dot(&gv));
                }
                Op::MatMulT(a, b) => {
                    acc(&mut g, *a, gv.dot(self.value(*b)));
                    acc(&mut g, *b, gv.t().dot(self.value(*a)));
                }
                Op::Add(a, b) => {
                    acc(&mut g, *b, gv.clone());
                    acc(&mut g, *a, gv);
                }
                Op::AddRow(a, r) => {
                    acc(&mut g, *r, gv.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut g, *a, gv);
                }
                Op::Mul(a, b) => {
                    acc(&mut g, *a, &gv * self.value(*b));
                    acc(&mut g, *b, &gv * self.value(*a));
                }
                Op::Scale(a, c) => acc(&mut g, *a, gv * *c),
                Op::Relu(a) => {
                    let mut d = gv;
                    Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| {
                        if x <= 0.0 {
                            *d = 0.0
                        }
                    });
                    acc(&mut g, *a, d);
                }
                Op::Tanh(a) => {
                    let y = self.value(v);
                    acc(&mut g, *a, gv * &y.mapv(|y| 1.0 - y * y));
                }
                Op::Sigmoid(a) => {
                    let y = self.value(v);
                    acc(&mut g, *a, gv * &y.mapv(|y| y * (1.0 - y)));
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    acc(&mut g, *bias, gv.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut g, *gain, (&gv * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    let gx_hat = &gv * self.value(*gain);
                    let n = xhat.ncols() as f64;
                    let sum_g = gx_hat.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let sum_gx = (&gx_hat * xhat).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let dx = (gx_hat * n - &sum_g - xhat * &sum_gx) * &(inv_std / n).insert_axis(Axis(1));
                    acc(&mut g, *x, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        acc(&mut g, p, gv.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut d = Array2::zeros(self.value(*a).raw_dim());
                    d.slice_mut(s![.., *start..*start + gv.ncols()]).assign(&gv);
                    acc(&mut g, *a, d);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let h = self.value(p).nrows();
                        acc(&mut g, p, gv.slice(s![start..start + h, ..]).to_owned());
                        start += h;
                    }
                }
                Op::SliceRows(a, start) => {
                    let mut d = Array2::zeros(self.value(*a).raw_dim());
                    d.slice_mut(s![*start..*start + gv.nrows(), ..]).assign(&gv);
                    acc(&mut g, *a, d);
                }
                Op::SparseRows { table, rows } => {
                    let mut d = Array2::zeros(self.value(*table).raw_dim());
                    for (i, row) in rows.iter().enumerate() {
                        for &(j, w) in row {
                            d.row_mut(j).scaled_add(w, &gv.row(i));
                        }
                    }
                    acc(&mut g, *table, d);
                }
                Op::RelBias { scores, table, clip } => {
                    let mut d = Array2::zeros(self.value(*table).raw_dim());
                    for i in 0..gv.nrows() {
                        for j in 0..=i.min(gv.ncols() - 1) {
                            d[[0, (i - j).min(*clip)]] += gv[[i, j]];
                        }
                    }
                    acc(&mut g, *table, d);
                    acc(&mut g, *scores, gv);
                }
                Op::CausalSoftmax(a) => {
                    let y = self.value(v);
                    let dot = (&gv * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(&mut g, *a, y * &(gv - &dot));
                }
                Op::Nll { logits, targets, probs } => {
                    let mut d = probs.clone();
                    for (t, &y) in targets.iter().enumerate() {
                        d[[t, y]] -= 1.0;
                    }
                    acc(&mut g, *logits, d * gv[[0, 0]]);
                }
            }
        }
    }
}

fn acc(g: &mut [Option<Array2<f64>>], v: Var, d: Array2<f64>) {
    match &mut g[v] {
        Some(x) => *x += &d,
        slot => *slot = Some(d),
    }
}

pub(crate) fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut y = x.clone();
    for mut row in y.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    y
}

pub(crate) fn log_softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut y = x.clone();
    for mut row in y.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    y
}
