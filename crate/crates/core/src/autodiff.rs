//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every value on the [`Tape`] is a 2-D matrix. Sequences of different
//! lengths are packed row-wise into one matrix and described by
//! [`Segment`]s, so attention and pooling never see padding.
//!
//! The op set is deliberately small and fused where the backward pass is
//! easier to write by hand (attention, layer norm, softmax losses, gates).

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use crate::gates::HardConcreteParams;

pub type Matrix = Array2<f64>;

/// Row range `[start, start + len)` of one sequence inside a packed matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

impl Segment {
    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

/// Packs consecutive sequence lengths into segments.
pub fn segments_from_lengths(lengths: impl IntoIterator<Item = usize>) -> Vec<Segment> {
    let mut start = 0;
    lengths
        .into_iter()
        .map(|len| {
            let seg = Segment { start, len };
            start += len;
            seg
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Tanh(Var),
    Abs(Var),
    Dropout(Var, Matrix),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<Segment>,
        heads: usize,
        probs: Vec<Vec<Matrix>>,
    },
    SegmentMean {
        x: Var,
        segments: Vec<Segment>,
    },
    ConcatCols(Vec<Var>),
    Interpolate {
        x: Var,
        z: Var,
        base: Var,
    },
    HardConcrete {
        loc: Var,
        slope: Matrix,
    },
    ProbNonzero {
        loc: Var,
    },
    WeightedSum {
        x: Var,
        weights: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Matrix,
    },
    KlFromLogits {
        logits: Var,
        target: Matrix,
        probs: Matrix,
        floored: Vec<bool>,
    },
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Floor applied to predicted probabilities inside logarithms.
pub const PROB_FLOOR: f64 = 1e-9;

const LN_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Matrix, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|&i| self.needs(i));
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Matrix, trainable: bool) -> Var {
        if trainable {
            self.param(value)
        } else {
            self.constant(value)
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    /// Adds a `1 × m` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row expects a 1 × m row");
        let value = self.value(a) + self.value(row);
        self.push(value, Op::AddRow(a, row), &[a, row])
    }

    /// `x · w + b` with `b` a `1 × m` row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        self.push(value, Op::Scale(a, c), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        self.push(value, Op::Gelu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        self.push(value, Op::Tanh(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::abs);
        self.push(value, Op::Abs(a), &[a])
    }

    /// Elementwise product with a precomputed (already rescaled) keep mask.
    pub fn dropout(&mut self, a: Var, mask: Matrix) -> Var {
        let value = self.value(a) * &mask;
        self.push(value, Op::Dropout(a, mask), &[a])
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` rows.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.dim();
        let mut xhat = Matrix::zeros((rows, cols));
        let mut inv_std = Vec::with_capacity(rows);
        for (r, row) in xv.outer_iter().enumerate() {
            let mean = row.sum() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            xhat.row_mut(r)
                .iter_mut()
                .zip(row.iter())
                .for_each(|(h, v)| *h = (v - mean) * is);
        }
        let value = &xhat * self.value(gamma) + self.value(beta);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// Selects rows of `table` by index.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut value = Matrix::zeros((ids.len(), t.ncols()));
        for (r, &id) in ids.iter().enumerate() {
            value.row_mut(r).assign(&t.row(id));
        }
        self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Multi-head scaled dot-product self-attention restricted to each segment.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[Segment],
        heads: usize,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, dim) = qv.dim();
        assert_eq!(dim % heads, 0, "model dim must divide into heads");
        let dh = dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Matrix::zeros((rows, dim));
        let mut probs = Vec::with_capacity(segments.len());
        for seg in segments {
            let mut per_head = Vec::with_capacity(heads);
            if seg.len == 0 {
                probs.push(per_head);
                continue;
            }
            for h in 0..heads {
                let cols = s![seg.start..seg.end(), h * dh..(h + 1) * dh];
                let qs = qv.slice(cols);
                let ks = kv.slice(cols);
                let vs = vv.slice(cols);
                let mut scores = qs.dot(&ks.t()) * scale;
                softmax_rows_inplace(&mut scores);
                out.slice_mut(cols).assign(&scores.dot(&vs));
                per_head.push(scores);
            }
            probs.push(per_head);
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                segments: segments.to_vec(),
                heads,
                probs,
            },
            &[q, k, v],
        )
    }

    /// Mean over the rows of each segment; empty segments yield zero rows.
    pub fn segment_mean(&mut self, x: Var, segments: &[Segment]) -> Var {
        let xv = self.value(x);
        let mut value = Matrix::zeros((segments.len(), xv.ncols()));
        for (i, seg) in segments.iter().enumerate() {
            if seg.len > 0 {
                let m = xv
                    .slice(s![seg.start..seg.end(), ..])
                    .sum_axis(Axis(0))
                    / seg.len as f64;
                value.row_mut(i).assign(&m);
            }
        }
        self.push(
            value,
            Op::SegmentMean {
                x,
                segments: segments.to_vec(),
            },
            &[x],
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("row counts must agree");
        self.push(value, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// `z_i · x_i + (1 − z_i) · base` for an `n × 1` gate column and `1 × d` base.
    pub fn interpolate(&mut self, x: Var, z: Var, base: Var) -> Var {
        let (xv, zv, bv) = (self.value(x), self.value(z), self.value(base));
        assert_eq!(zv.dim(), (xv.nrows(), 1), "one gate per row");
        let mut value = xv.clone();
        Zip::from(value.rows_mut())
            .and(zv.rows())
            .for_each(|mut row, zr| {
                let g = zr[0];
                Zip::from(&mut row)
                    .and(bv.row(0))
                    .for_each(|o, &b| *o = g * *o + (1.0 - g) * b);
            });
        self.push(value, Op::Interpolate { x, z, base }, &[x, z, base])
    }

    /// Reparametrized Hard Concrete sample for each location given fixed
    /// uniform noise of the same shape.
    pub fn hard_concrete(&mut self, loc: Var, noise: &Matrix, params: &HardConcreteParams) -> Var {
        let lv = self.value(loc);
        assert_eq!(lv.dim(), noise.dim());
        let mut value = Matrix::zeros(lv.dim());
        let mut slope = Matrix::zeros(lv.dim());
        Zip::from(&mut value)
            .and(&mut slope)
            .and(lv)
            .and(noise)
            .for_each(|z, d, &l, &u| {
                let (sample, grad) = params.sample_with_grad(l, u);
                *z = sample;
                *d = grad;
            });
        self.push(value, Op::HardConcrete { loc, slope }, &[loc])
    }

    /// Elementwise probability that a Hard Concrete gate is non-zero.
    pub fn prob_nonzero(&mut self, loc: Var, params: &HardConcreteParams) -> Var {
        let value = self.value(loc).mapv(|l| params.prob_nonzero(l));
        self.push(value, Op::ProbNonzero { loc }, &[loc])
    }

    /// `Σ_i w_i x_i` over an `n × 1` column.
    pub fn weighted_sum(&mut self, x: Var, weights: &[f64]) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.dim(), (weights.len(), 1));
        let total: f64 = xv.iter().zip(weights).map(|(a, w)| a * w).sum();
        self.push(
            Matrix::from_elem((1, 1), total),
            Op::WeightedSum {
                x,
                weights: weights.to_vec(),
            },
            &[x],
        )
    }

    /// Mean cross-entropy of row-wise softmax against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let mut probs = self.value(logits).clone();
        assert_eq!(probs.nrows(), targets.len());
        softmax_rows_inplace(&mut probs);
        let n = targets.len().max(1) as f64;
        let loss = targets
            .iter()
            .enumerate()
            .map(|(r, &t)| -probs[[r, t]].max(PROB_FLOOR).ln())
            .sum::<f64>()
            / n;
        self.push(
            Matrix::from_elem((1, 1), loss),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Mean over rows of `KL(target ‖ softmax(logits))`.
    pub fn kl_from_logits(&mut self, target: &Matrix, logits: Var) -> Var {
        let mut probs = self.value(logits).clone();
        assert_eq!(probs.dim(), target.dim());
        softmax_rows_inplace(&mut probs);
        let floored: Vec<bool> = probs.iter().map(|&q| q < PROB_FLOOR).collect();
        let n = probs.nrows().max(1) as f64;
        let total: f64 = target
            .iter()
            .zip(probs.iter())
            .filter(|(&p, _)| p > 0.0)
            .map(|(&p, &q)| p * (p.ln() - q.max(PROB_FLOOR).ln()))
            .sum();
        self.push(
            Matrix::from_elem((1, 1), total / n),
            Op::KlFromLogits {
                logits,
                target: target.clone(),
                probs,
                floored,
            },
            &[logits],
        )
    }

    /// Runs the backward pass from a scalar node.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).dim(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Matrix::from_elem((1, 1), 1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, delta: Matrix) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => *existing += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, op: &Op, out: &Matrix, g: &Matrix, grads: &mut [Option<Matrix>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, -g);
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.needs(*row) {
                    self.accumulate(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g * *c),
            Op::Gelu(a) => {
                let d = Zip::from(g)
                    .and(self.value(*a))
                    .map_collect(|&gi, &x| gi * gelu_grad(x));
                self.accumulate(grads, *a, d);
            }
            Op::Tanh(a) => {
                let d = Zip::from(g).and(out).map_collect(|&gi, &t| gi * (1.0 - t * t));
                self.accumulate(grads, *a, d);
            }
            Op::Abs(a) => {
                let d = Zip::from(g)
                    .and(self.value(*a))
                    .map_collect(|&gi, &x| gi * sign(x));
                self.accumulate(grads, *a, d);
            }
            Op::Dropout(a, mask) => self.accumulate(grads, *a, g * mask),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                if self.needs(*gamma) {
                    let dg = (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(grads, *gamma, dg);
                }
                if self.needs(*beta) {
                    self.accumulate(grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.needs(*x) {
                    let dxhat = g * self.value(*gamma);
                    let cols = xhat.ncols() as f64;
                    let mut dx = Matrix::zeros(xhat.dim());
                    for r in 0..xhat.nrows() {
                        let dh = dxhat.row(r);
                        let xh = xhat.row(r);
                        let sum_dh = dh.sum();
                        let sum_dh_xh = dh.dot(&xh);
                        let is = inv_std[r];
                        dx.row_mut(r)
                            .iter_mut()
                            .zip(dh.iter().zip(xh.iter()))
                            .for_each(|(o, (&d, &h))| {
                                *o = is / cols * (cols * d - sum_dh - h * sum_dh_xh)
                            });
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Gather { table, ids } => {
                if self.needs(*table) {
                    let mut d = Matrix::zeros(self.value(*table).dim());
                    for (r, &id) in ids.iter().enumerate() {
                        let mut dst = d.row_mut(id);
                        dst += &g.row(r);
                    }
                    self.accumulate(grads, *table, d);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                segments,
                heads,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let dim = qv.ncols();
                let dh = dim / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Matrix::zeros(qv.dim());
                let mut dk = Matrix::zeros(kv.dim());
                let mut dv = Matrix::zeros(vv.dim());
                for (seg, per_head) in segments.iter().zip(probs) {
                    for (h, p) in per_head.iter().enumerate() {
                        let cols = s![seg.start..seg.end(), h * dh..(h + 1) * dh];
                        let go = g.slice(cols);
                        dv.slice_mut(cols).assign(&p.t().dot(&go));
                        let dp = go.dot(&vv.slice(cols).t());
                        let mut ds = Matrix::zeros(p.dim());
                        for r in 0..p.nrows() {
                            let inner = dp.row(r).dot(&p.row(r));
                            ds.row_mut(r)
                                .iter_mut()
                                .zip(dp.row(r).iter().zip(p.row(r).iter()))
                                .for_each(|(o, (&d, &pp))| *o = pp * (d - inner) * scale);
                        }
                        dq.slice_mut(cols).assign(&ds.dot(&kv.slice(cols)));
                        dk.slice_mut(cols).assign(&ds.t().dot(&qv.slice(cols)));
                    }
                }
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dk);
                self.accumulate(grads, *v, dv);
            }
            Op::SegmentMean { x, segments } => {
                if self.needs(*x) {
                    let mut d = Matrix::zeros(self.value(*x).dim());
                    for (i, seg) in segments.iter().enumerate() {
                        if seg.len == 0 {
                            continue;
                        }
                        let row = g.row(i).mapv(|v| v / seg.len as f64);
                        for r in seg.start..seg.end() {
                            d.row_mut(r).assign(&row);
                        }
                    }
                    self.accumulate(grads, *x, d);
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).ncols();
                    self.accumulate(grads, p, g.slice(s![.., offset..offset + w]).to_owned());
                    offset += w;
                }
            }
            Op::Interpolate { x, z, base } => {
                let (xv, zv, bv) = (self.value(*x), self.value(*z), self.value(*base));
                if self.needs(*x) {
                    self.accumulate(grads, *x, g * zv);
                }
                if self.needs(*z) {
                    let diff = xv - bv;
                    let dz = (g * &diff).sum_axis(Axis(1)).insert_axis(Axis(1));
                    self.accumulate(grads, *z, dz);
                }
                if self.needs(*base) {
                    let keep = zv.mapv(|z| 1.0 - z);
                    let db = (g * &keep).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(grads, *base, db);
                }
            }
            Op::HardConcrete { loc, slope } => self.accumulate(grads, *loc, g * slope),
            Op::ProbNonzero { loc } => {
                let d = Zip::from(g).and(out).map_collect(|&gi, &p| gi * p * (1.0 - p));
                self.accumulate(grads, *loc, d);
            }
            Op::WeightedSum { x, weights } => {
                let g0 = g[[0, 0]];
                let d = Matrix::from_shape_fn((weights.len(), 1), |(r, _)| g0 * weights[r]);
                self.accumulate(grads, *x, d);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = targets.len().max(1) as f64;
                let mut d = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    d[[r, t]] -= 1.0;
                }
                self.accumulate(grads, *logits, d * (g[[0, 0]] / n));
            }
            Op::KlFromLogits {
                logits,
                target,
                probs,
                floored,
            } => {
                let n = probs.nrows().max(1) as f64;
                let cols = probs.ncols();
                let mut d = Matrix::zeros(probs.dim());
                for r in 0..probs.nrows() {
                    // d/dlogit_k of -Σ_j y_j ln q_j over unfloored j
                    let mut mass = 0.0;
                    for j in 0..cols {
                        if !floored[r * cols + j] {
                            mass += target[[r, j]];
                        }
                    }
                    for k in 0..cols {
                        let own = if floored[r * cols + k] {
                            0.0
                        } else {
                            target[[r, k]]
                        };
                        d[[r, k]] = probs[[r, k]] * mass - own;
                    }
                }
                self.accumulate(grads, *logits, d * (g[[0, 0]] / n));
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads[v.0].take()
    }
}

pub fn softmax_rows_inplace(m: &mut Matrix) {
    for mut row in m.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
    }

    /// Checks the analytic gradient of `build` w.r.t. each input against
    /// central differences.
    fn check<F>(inputs: Vec<Matrix>, build: F)
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.param(m.clone())).collect();
        let out = build(&mut tape, &vars);
        let grads = tape.backward(out);
        let eval = |inputs: &[Matrix]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = inputs.iter().map(|m| t.param(m.clone())).collect();
            let o = build(&mut t, &vs);
            t.scalar(o)
        };
        let h = 1e-6;
        for (i, input) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Matrix::zeros(input.dim()));
            for idx in 0..input.len() {
                let mut plus = inputs.clone();
                let mut minus = inputs.clone();
                plus[i].as_slice_mut().unwrap()[idx] += h;
                minus[i].as_slice_mut().unwrap()[idx] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.as_slice().unwrap()[idx];
                let err = (a - numeric).abs() / (1e-6 + a.abs().max(numeric.abs()));
                assert!(
                    err < 1e-4 || (a - numeric).abs() < 1e-8,
                    "input {i} elem {idx}: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    /// Reduces a matrix to a scalar with fixed weights so every output
    /// element gets a distinct upstream gradient.
    fn project(tape: &mut Tape, x: Var) -> Var {
        let (r, c) = tape.value(x).dim();
        let w = Matrix::from_shape_fn((r, c), |(i, j)| ((i * c + j) * 7 + 3) as f64 % 11.0 / 5.0 - 1.0);
        let weighted = tape.dropout(x, w);
        let left = tape.constant(Matrix::ones((1, r)));
        let right = tape.constant(Matrix::ones((c, 1)));
        let rows = tape.matmul(left, weighted);
        tape.matmul(rows, right)
    }

    #[test]
    fn matmul_add_row_gelu() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        check(
            vec![random(3, 4, &mut rng), random(4, 2, &mut rng), random(1, 2, &mut rng)],
            |t, v| {
                let y = t.linear(v[0], v[1], v[2]);
                let y = t.gelu(y);
                project(t, y)
            },
        );
    }

    #[test]
    fn tanh_abs_sub_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        check(vec![random(2, 3, &mut rng), random(2, 3, &mut rng)], |t, v| {
            let d = t.sub(v[0], v[1]);
            let a = t.abs(d);
            let th = t.tanh(v[0]);
            let s = t.add(a, th);
            let s = t.scale(s, 0.7);
            project(t, s)
        });
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        check(
            vec![random(3, 5, &mut rng), random(1, 5, &mut rng), random(1, 5, &mut rng)],
            |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2]);
                project(t, y)
            },
        );
    }

    #[test]
    fn attention_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let segs = segments_from_lengths([2, 0, 3]);
        check(
            vec![random(5, 4, &mut rng), random(5, 4, &mut rng), random(5, 4, &mut rng)],
            move |t, v| {
                let y = t.attention(v[0], v[1], v[2], &segs, 2);
                project(t, y)
            },
        );
    }

    #[test]
    fn attention_does_not_cross_segments() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(5, 4, &mut rng);
        let segs = segments_from_lengths([2, 3]);
        let mut t = Tape::new();
        let v = t.constant(x.clone());
        let y = t.attention(v, v, v, &segs, 2);
        let mut x2 = x.clone();
        x2.row_mut(4).fill(9.0);
        let mut t2 = Tape::new();
        let v2 = t2.constant(x2);
        let y2 = t2.attention(v2, v2, v2, &segs, 2);
        assert_eq!(t.value(y).slice(s![0..2, ..]), t2.value(y2).slice(s![0..2, ..]));
    }

    #[test]
    fn gather_mean_concat() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let segs = segments_from_lengths([2, 1, 0]);
        check(vec![random(4, 3, &mut rng)], move |t, v| {
            let g = t.gather(v[0], &[3, 1, 3]);
            let m = t.segment_mean(g, &segs);
            let a = t.abs(m);
            let c = t.concat_cols(&[m, a]);
            project(t, c)
        });
    }

    #[test]
    fn interpolate_and_gates() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = HardConcreteParams::default();
        let noise = Matrix::from_shape_fn((4, 1), |_| rng.gen_range(0.2..0.8));
        check(
            vec![
                random(4, 3, &mut rng),
                random(4, 1, &mut rng) * 0.3,
                random(1, 3, &mut rng),
            ],
            move |t, v| {
                let z = t.hard_concrete(v[1], &noise, &params);
                let y = t.interpolate(v[0], z, v[2]);
                let p = t.prob_nonzero(v[1], &params);
                let l0 = t.weighted_sum(p, &[0.5, 0.25, 1.0, 2.0]);
                let y = project(t, y);
                t.add(y, l0)
            },
        );
    }

    #[test]
    fn losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut target = random(3, 3, &mut rng).mapv(f64::exp);
        softmax_rows_inplace(&mut target);
        check(vec![random(3, 3, &mut rng)], move |t, v| {
            let ce = t.softmax_cross_entropy(v[0], &[0, 2, 1]);
            let kl = t.kl_from_logits(&target, v[0]);
            let kl = t.scale(kl, 2.0);
            t.add(ce, kl)
        });
    }

    #[test]
    fn kl_is_zero_for_matching_distributions() {
        let logits = Matrix::from_shape_vec((1, 3), vec![0.3, -1.0, 2.0]).unwrap();
        let mut target = logits.clone();
        softmax_rows_inplace(&mut target);
        let mut t = Tape::new();
        let l = t.constant(logits);
        let kl = t.kl_from_logits(&target, l);
        assert!(t.scalar(kl).abs() < 1e-15);
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut t = Tape::new();
        let a = t.param(Matrix::ones((2, 2)));
        let b = t.constant(Matrix::ones((2, 2)));
        let c = t.matmul(a, b);
        let ones = t.constant(Matrix::ones((1, 2)));
        let r = t.matmul(ones, c);
        let col = t.constant(Matrix::ones((2, 1)));
        let s = t.matmul(r, col);
        let g = t.backward(s);
        assert!(g.get(a).is_some());
        assert!(g.get(b).is_none());
    }
}
