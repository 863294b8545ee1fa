//! Reverse-mode differentiation over a linear tape of matrix operations.
//!
//! Parameters live in a [`ParamStore`] borrowed by the tape; a parameter
//! leaf never copies its value, and gradients for parameters are collected
//! per parameter id by [`Tape::backward`].

use std::collections::HashMap;

use super::mat::{log_sum_exp, neg_log_sigmoid, sigmoid, softmax_in_place, Mat};
use super::params::{ParamId, ParamStore};

/// Lower bound applied to RBF widths.
pub const STD_FLOOR: f64 = 1e-2;
/// Skip marker in lookup index lists.
pub const NO_ROW: u32 = u32::MAX;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    LookupSum(Vec<(Var, Vec<u32>)>),
    Rbf {
        mean: Var,
        std: Var,
        dists: Vec<Option<f64>>,
    },
    ColumnToSquare(Var, usize),
    HeadSum {
        mats: Vec<Var>,
        w: Var,
        b: Var,
    },
    Bce {
        logits: Var,
        targets: Vec<Option<f64>>,
        count: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        inv_temp: f64,
        probs: Mat,
        count: usize,
    },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Option<Mat>,
    op: Op,
}

/// Parameter gradients, indexed by [`ParamId`].
#[derive(Debug, Clone, Default)]
pub struct Grads {
    pub by_param: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.by_param.get(id.0).and_then(Option::as_ref)
    }

    fn accumulate(&mut self, id: ParamId, g: Mat) {
        if self.by_param.len() <= id.0 {
            self.by_param.resize(id.0 + 1, None);
        }
        match &mut self.by_param[id.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    /// Adds another gradient set into this one.
    pub fn merge(&mut self, other: Grads) {
        for (i, g) in other.by_param.into_iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.by_param.iter_mut().flatten() {
            for x in &mut g.data {
                *x *= s;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.by_param.iter().flatten().map(Mat::sum_sq).sum::<f64>().sqrt()
    }
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        match (&self.nodes[v.0].value, &self.nodes[v.0].op) {
            (Some(m), _) => m,
            (None, Op::Param(id)) => self.params.value(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let m = self.value(a).matmul(self.value(b));
        self.push(m, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let m = self.value(a).matmul_t(self.value(b));
        self.push(m, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut m = self.value(a).clone();
        m.add_assign(self.value(b));
        self.push(m, Op::Add(a, b))
    }

    /// Adds a `1×c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!((1, self.value(a).cols), r.shape(), "add_row shape");
        let mut m = self.value(a).clone();
        for i in 0..m.rows {
            for (x, y) in m.row_mut(i).iter_mut().zip(&r.data) {
                *x += y;
            }
        }
        self.push(m, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let m = self.value(a).scaled(s);
        self.push(m, Op::Scale(a, s))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let m = self.value(a).transpose();
        self.push(m, Op::Transpose(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut m = self.value(a).clone();
        for i in 0..m.rows {
            softmax_in_place(m.row_mut(i));
        }
        self.push(m, Op::SoftmaxRows(a))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let (rows, cols) = xv.shape();
        let mut xhat = Mat::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Mat::zeros(rows, cols);
        for i in 0..rows {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for j in 0..cols {
                let h = (row[j] - mean) * is;
                xhat.set(i, j, h);
                out.set(i, j, h * g.data[j] + b.data[j]);
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let m = self.value(a).map(gelu);
        self.push(m, Op::Gelu(a))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let src = self.value(a);
        let mut m = Mat::zeros(src.rows, len);
        for i in 0..src.rows {
            m.row_mut(i).copy_from_slice(&src.row(i)[start..start + len]);
        }
        self.push(m, Op::SliceCols(a, start))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let src = self.value(a);
        let m = Mat::from_vec(len, src.cols, src.data[start * src.cols..(start + len) * src.cols].to_vec());
        self.push(m, Op::SliceRows(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut m = Mat::zeros(rows, cols);
        for i in 0..rows {
            let mut off = 0;
            for p in parts {
                let pv = self.value(*p);
                assert_eq!(pv.rows, rows, "concat_cols rows");
                m.row_mut(i)[off..off + pv.cols].copy_from_slice(pv.row(i));
                off += pv.cols;
            }
        }
        self.push(m, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.cols, cols, "concat_rows cols");
            data.extend_from_slice(&pv.data);
        }
        let rows = data.len() / cols.max(1);
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    /// Output row `r` is the sum over tables of `table[index[r]]`; entries
    /// equal to [`NO_ROW`] contribute nothing. All index lists share a length.
    pub fn lookup_sum(&mut self, lookups: Vec<(Var, Vec<u32>)>) -> Var {
        let rows = lookups[0].1.len();
        let cols = self.value(lookups[0].0).cols;
        let mut m = Mat::zeros(rows, cols);
        for (table, idx) in &lookups {
            let t = self.value(*table);
            assert_eq!(idx.len(), rows, "lookup index length");
            assert_eq!(t.cols, cols, "lookup table width");
            for (r, &i) in idx.iter().enumerate() {
                if i != NO_ROW {
                    for (o, x) in m.row_mut(r).iter_mut().zip(t.row(i as usize)) {
                        *o += x;
                    }
                }
            }
        }
        self.push(m, Op::LookupSum(lookups))
    }

    /// Gaussian radial basis per head: row `r`, column `h` holds
    /// `rbf(dists[r]; mean[h], std[h])`, or 0 where the distance is absent.
    pub fn rbf(&mut self, mean: Var, std: Var, dists: Vec<Option<f64>>) -> Var {
        let (mu, sd) = (self.value(mean), self.value(std));
        let heads = mu.cols;
        let mut m = Mat::zeros(dists.len(), heads);
        for (r, d) in dists.iter().enumerate() {
            if let Some(d) = d {
                for h in 0..heads {
                    m.set(r, h, rbf(*d, mu.data[h], sd.data[h]));
                }
            }
        }
        self.push(m, Op::Rbf { mean, std, dists })
    }

    /// Reshapes column `col` of an `(n·n)×c` matrix into `n×n`.
    pub fn column_to_square(&mut self, a: Var, col: usize, n: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.rows, n * n, "column_to_square rows");
        let m = Mat::from_vec(n, n, (0..n * n).map(|r| src.get(r, col)).collect());
        self.push(m, Op::ColumnToSquare(a, col))
    }

    /// `Σ_h w[h]·mats[h] + b` for same-shaped matrices, `w` of shape `H×1`
    /// and `b` of shape `1×1`.
    pub fn head_sum(&mut self, mats: &[Var], w: Var, b: Var) -> Var {
        let (rows, cols) = self.value(mats[0]).shape();
        let wv = self.value(w);
        let bias = self.value(b).scalar();
        let mut m = Mat::from_vec(rows, cols, vec![bias; rows * cols]);
        for (h, v) in mats.iter().enumerate() {
            let wh = wv.data[h];
            for (o, x) in m.data.iter_mut().zip(&self.value(*v).data) {
                *o += wh * x;
            }
        }
        self.push(
            m,
            Op::HeadSum {
                mats: mats.to_vec(),
                w,
                b,
            },
        )
    }

    /// Mean binary cross-entropy with logits over the supervised entries
    /// (`targets` is row-major over `logits`). Zero when nothing is supervised.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Vec<Option<f64>>) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.data.len(), targets.len(), "bce target length");
        let mut total = 0.0;
        let mut count = 0;
        for (x, t) in lv.data.iter().zip(&targets) {
            if let Some(y) = t {
                total += y * neg_log_sigmoid(*x) + (1.0 - y) * neg_log_sigmoid(-*x);
                count += 1;
            }
        }
        let value = if count == 0 { 0.0 } else { total / count as f64 };
        self.push(
            Mat::row_vector(vec![value]),
            Op::Bce {
                logits,
                targets,
                count,
            },
        )
    }

    /// Mean row-wise cross-entropy of `softmax(logits / temperature)`
    /// against class targets; rows without a target are skipped.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<Option<usize>>, temperature: f64) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows, targets.len(), "cross-entropy target length");
        let inv_temp = 1.0 / temperature;
        let mut probs = lv.scaled(inv_temp);
        let mut total = 0.0;
        let mut count = 0;
        for (i, t) in targets.iter().enumerate() {
            if let Some(c) = t {
                total += log_sum_exp(probs.row(i)) - probs.get(i, *c);
                count += 1;
            }
            softmax_in_place(probs.row_mut(i));
        }
        let value = if count == 0 { 0.0 } else { total / count as f64 };
        self.push(
            Mat::row_vector(vec![value]),
            Op::CrossEntropy {
                logits,
                targets,
                inv_temp,
                probs,
                count,
            },
        )
    }

    /// `Σ c_i · x_i` over `1×1` inputs.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let v = terms.iter().map(|(x, c)| c * self.value(*x).scalar()).sum();
        self.push(Mat::row_vector(vec![v]), Op::WeightedSum(terms.to_vec()))
    }

    /// Gradients of the scalar `root` with respect to every parameter used.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.value(root).data.len(), 1, "backward from a non-scalar");
        let mut adj: Vec<Option<Mat>> = vec![None; root.0 + 1];
        adj[root.0] = Some(Mat::row_vector(vec![1.0]));
        let mut grads = Grads::default();
        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => grads.accumulate(*id, g),
                Op::MatMul(a, b) => {
                    let da = g.matmul_t(self.value(*b));
                    let db = self.value(*a).t_matmul(&g);
                    acc(&mut adj, *a, da);
                    acc(&mut adj, *b, db);
                }
                Op::MatMulT(a, b) => {
                    let da = g.matmul(self.value(*b));
                    let db = g.t_matmul(self.value(*a));
                    acc(&mut adj, *a, da);
                    acc(&mut adj, *b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut adj, *b, g.clone());
                    acc(&mut adj, *a, g);
                }
                Op::AddRow(a, row) => {
                    let mut dr = Mat::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (o, x) in dr.data.iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    acc(&mut adj, *row, dr);
                    acc(&mut adj, *a, g);
                }
                Op::Scale(a, s) => acc(&mut adj, *a, g.scaled(*s)),
                Op::Transpose(a) => acc(&mut adj, *a, g.transpose()),
                Op::SoftmaxRows(a) => {
                    let y = node.value.as_ref().expect("value");
                    let mut da = Mat::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (j, o) in da.row_mut(r).iter_mut().enumerate() {
                            *o = yr[j] * (gr[j] - dot);
                        }
                    }
                    acc(&mut adj, *a, da);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gamma);
                    let (rows, cols) = g.shape();
                    let mut dx = Mat::zeros(rows, cols);
                    let mut dg = Mat::zeros(1, cols);
                    let mut db = Mat::zeros(1, cols);
                    for r in 0..rows {
                        let mut dxhat = vec![0.0; cols];
                        for j in 0..cols {
                            let gj = g.get(r, j);
                            dxhat[j] = gj * gv.data[j];
                            dg.data[j] += gj * xhat.get(r, j);
                            db.data[j] += gj;
                        }
                        let m1 = dxhat.iter().sum::<f64>() / cols as f64;
                        let m2 = dxhat.iter().enumerate().map(|(j, d)| d * xhat.get(r, j)).sum::<f64>() / cols as f64;
                        for j in 0..cols {
                            dx.set(r, j, inv_std[r] * (dxhat[j] - m1 - xhat.get(r, j) * m2));
                        }
                    }
                    acc(&mut adj, *x, dx);
                    acc(&mut adj, *gamma, dg);
                    acc(&mut adj, *beta, db);
                }
                Op::Gelu(a) => {
                    let xv = self.value(*a);
                    let mut da = g;
                    for (o, x) in da.data.iter_mut().zip(&xv.data) {
                        *o *= gelu_grad(*x);
                    }
                    acc(&mut adj, *a, da);
                }
                Op::SliceCols(a, start) => {
                    let src = self.value(*a);
                    let mut da = Mat::zeros(src.rows, src.cols);
                    for r in 0..g.rows {
                        da.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                    }
                    acc(&mut adj, *a, da);
                }
                Op::SliceRows(a, start) => {
                    let src = self.value(*a);
                    let mut da = Mat::zeros(src.rows, src.cols);
                    da.data[start * src.cols..start * src.cols + g.data.len()].copy_from_slice(&g.data);
                    acc(&mut adj, *a, da);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.value(*p).cols;
                        let mut dp = Mat::zeros(g.rows, w);
                        for r in 0..g.rows {
                            dp.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                        }
                        off += w;
                        acc(&mut adj, *p, dp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let (r, c) = self.value(*p).shape();
                        let dp = Mat::from_vec(r, c, g.data[off..off + r * c].to_vec());
                        off += r * c;
                        acc(&mut adj, *p, dp);
                    }
                }
                Op::LookupSum(lookups) => {
                    for (table, idx) in lookups {
                        let t = self.value(*table);
                        let mut dt = Mat::zeros(t.rows, t.cols);
                        for (r, &k) in idx.iter().enumerate() {
                            if k != NO_ROW {
                                for (o, x) in dt.row_mut(k as usize).iter_mut().zip(g.row(r)) {
                                    *o += x;
                                }
                            }
                        }
                        acc(&mut adj, *table, dt);
                    }
                }
                Op::Rbf { mean, std, dists } => {
                    let (mu, sd) = (self.value(*mean), self.value(*std));
                    let heads = mu.cols;
                    let mut dm = Mat::zeros(1, heads);
                    let mut ds = Mat::zeros(1, heads);
                    for (r, d) in dists.iter().enumerate() {
                        let Some(d) = d else { continue };
                        for h in 0..heads {
                            let s_raw = sd.data[h];
                            let s = s_raw.max(STD_FLOOR);
                            let f = rbf(*d, mu.data[h], s_raw);
                            let diff = d - mu.data[h];
                            let gr = g.get(r, h);
                            dm.data[h] += gr * f * diff / (s * s);
                            if s_raw > STD_FLOOR {
                                ds.data[h] += gr * f * (diff * diff / (s * s * s) - 1.0 / s);
                            }
                        }
                    }
                    acc(&mut adj, *mean, dm);
                    acc(&mut adj, *std, ds);
                }
                Op::ColumnToSquare(a, col) => {
                    let src = self.value(*a);
                    let mut da = Mat::zeros(src.rows, src.cols);
                    for (r, x) in g.data.iter().enumerate() {
                        da.set(r, *col, *x);
                    }
                    acc(&mut adj, *a, da);
                }
                Op::HeadSum { mats, w, b } => {
                    let wv = self.value(*w);
                    let mut dw = Mat::zeros(wv.rows, wv.cols);
                    for (h, m) in mats.iter().enumerate() {
                        let mv = self.value(*m);
                        dw.data[h] = mv.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
                        acc(&mut adj, *m, g.scaled(wv.data[h]));
                    }
                    acc(&mut adj, *w, dw);
                    acc(&mut adj, *b, Mat::row_vector(vec![g.data.iter().sum()]));
                }
                Op::Bce {
                    logits,
                    targets,
                    count,
                } => {
                    let lv = self.value(*logits);
                    let mut dl = Mat::zeros(lv.rows, lv.cols);
                    if *count > 0 {
                        let scale = g.scalar() / *count as f64;
                        for ((o, x), t) in dl.data.iter_mut().zip(&lv.data).zip(targets) {
                            if let Some(y) = t {
                                *o = scale * (sigmoid(*x) - y);
                            }
                        }
                    }
                    acc(&mut adj, *logits, dl);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    inv_temp,
                    probs,
                    count,
                } => {
                    let mut dl = Mat::zeros(probs.rows, probs.cols);
                    if *count > 0 {
                        let scale = g.scalar() * inv_temp / *count as f64;
                        for (r, t) in targets.iter().enumerate() {
                            if let Some(c) = t {
                                for (j, o) in dl.row_mut(r).iter_mut().enumerate() {
                                    let y = if j == *c { 1.0 } else { 0.0 };
                                    *o = scale * (probs.get(r, j) - y);
                                }
                            }
                        }
                    }
                    acc(&mut adj, *logits, dl);
                }
                Op::WeightedSum(terms) => {
                    for (x, c) in terms {
                        acc(&mut adj, *x, Mat::row_vector(vec![g.scalar() * c]));
                    }
                }
            }
        }
        grads
    }
}

fn acc(adj: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut adj[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

/// Normalized Gaussian `exp(−(d−μ)²/(2σ²)) / (√(2π)·σ)` with `σ` floored at
/// [`STD_FLOOR`].
pub fn rbf(dist: f64, mean: f64, std: f64) -> f64 {
    let s = std.max(STD_FLOOR);
    let z = (dist - mean) / s;
    (-0.5 * z * z).exp() / ((2.0 * std::f64::consts::PI).sqrt() * s)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
