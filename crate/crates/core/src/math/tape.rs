//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation as it is evaluated. Calling
//! [`Tape::backward`] on a scalar node walks the record in reverse and
//! accumulates gradients for every named parameter leaf. Accumulation order
//! is fixed by node creation order, so gradients are reproducible bit for
//! bit across runs and across the `parallel` feature setting.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::matrix::Matrix;

/// Gradients keyed by parameter name. Parameters the loss never touched are
/// absent; callers treat absence as a zero gradient.
pub type GradMap = BTreeMap<String, Matrix>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Per-relation neighbor lists used by the graph-convolution averaging op.
/// `lists[i]` holds the neighbors of entity `i`, sorted ascending.
#[derive(Clone, Debug)]
pub struct NeighborLists {
    pub lists: Vec<Vec<usize>>,
}

enum Op {
    /// Constant or parameter leaf. Named leaves export their gradient.
    Leaf {
        name: Option<String>,
    },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    /// Broadcast-add a 1 x c row vector onto every row.
    AddRow(Var, Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Log(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    /// Row-wise layer norm: (x, gamma, beta), gamma/beta are 1 x c.
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        src: Var,
        start: usize,
    },
    GatherRows {
        src: Var,
        indices: Vec<usize>,
    },
    GatherEntries {
        src: Var,
        entries: Vec<(usize, usize)>,
    },
    Transpose(Var),
    SumAll(Var),
    /// Column-wise sum: r x c -> 1 x c.
    SumRows(Var),
    /// Relation-normalized neighbor average: row i of the output is the mean
    /// of the input rows listed in `lists[i]` (zero row when empty).
    NeighborAvg {
        src: Var,
        index: Arc<NeighborLists>,
    },
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Recording of one forward evaluation.
pub struct Tape {
    nodes: Vec<Node>,
    /// Smallest |pre-activation| seen by any ReLU during the forward pass.
    /// Finite-difference checks skip perturbations near this kink.
    relu_margin: f64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            relu_margin: f64::INFINITY,
        }
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Smallest |x| fed to any ReLU so far; `INFINITY` if none ran.
    pub fn relu_margin(&self) -> f64 {
        self.relu_margin
    }

    /// Constant leaf: no gradient is exported for it.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf { name: None })
    }

    /// Parameter leaf: its gradient appears in the [`GradMap`] under `name`.
    pub fn param(&mut self, name: &str, value: Matrix) -> Var {
        self.push(
            value,
            Op::Leaf {
                name: Some(name.to_string()),
            },
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).add(self.value(b));
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).sub(self.value(b));
        self.push(value, Op::Sub(a, b))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).hadamard(self.value(b));
        self.push(value, Op::Hadamard(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).scale(k);
        self.push(value, Op::Scale(a, k))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.value(a).shape();
        assert_eq!(self.value(row).shape(), (1, c), "add_row wants a 1x{c} row");
        let mut value = self.value(a).clone();
        for i in 0..r {
            for j in 0..c {
                let v = value.get(i, j) + self.value(row).get(0, j);
                value.set(i, j, v);
            }
        }
        self.push(value, Op::AddRow(a, row))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut margin = self.relu_margin;
        for &v in self.value(a).data() {
            margin = margin.min(v.abs());
        }
        self.relu_margin = margin;
        let value = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(value, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(value, Op::Sigmoid(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        self.push(value, Op::Log(a))
    }

    /// Row-wise softmax with max-subtraction, so the result is invariant to
    /// shifting a row by a constant.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows_value(self.value(a));
        self.push(value, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (r, c) = x.shape();
        let mut value = Matrix::zeros(r, c);
        for i in 0..r {
            let row = x.row(i);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
            for (j, &v) in row.iter().enumerate() {
                value.set(i, j, v - lse);
            }
        }
        self.push(value, Op::LogSoftmaxRows(a))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (r, c) = xv.shape();
        assert_eq!(self.value(gamma).shape(), (1, c));
        assert_eq!(self.value(beta).shape(), (1, c));
        let mut value = Matrix::zeros(r, c);
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (j, &v) in row.iter().enumerate() {
                let norm = (v - mean) * inv;
                value.set(
                    i,
                    j,
                    norm * self.value(gamma).get(0, j) + self.value(beta).get(0, j),
                );
            }
        }
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            },
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Matrix::zeros(rows, total);
        let mut off = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows(), rows, "concat_cols row mismatch");
            for i in 0..rows {
                for j in 0..m.cols() {
                    value.set(i, off + j, m.get(i, j));
                }
            }
            off += m.cols();
        }
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Var {
        let m = self.value(src);
        assert!(start + len <= m.cols());
        let value = Matrix::from_fn(m.rows(), len, |r, c| m.get(r, start + c));
        self.push(value, Op::SliceCols { src, start })
    }

    pub fn gather_rows(&mut self, src: Var, indices: &[usize]) -> Var {
        let m = self.value(src);
        let mut value = Matrix::zeros(indices.len(), m.cols());
        for (out_r, &r) in indices.iter().enumerate() {
            value.row_mut(out_r).copy_from_slice(m.row(r));
        }
        self.push(
            value,
            Op::GatherRows {
                src,
                indices: indices.to_vec(),
            },
        )
    }

    /// Collect scattered entries into a k x 1 column.
    pub fn gather_entries(&mut self, src: Var, entries: &[(usize, usize)]) -> Var {
        let m = self.value(src);
        let mut value = Matrix::zeros(entries.len(), 1);
        for (k, &(r, c)) in entries.iter().enumerate() {
            value.set(k, 0, m.get(r, c));
        }
        self.push(
            value,
            Op::GatherEntries {
                src,
                entries: entries.to_vec(),
            },
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Matrix::from_vec(1, 1, vec![self.value(a).sum()]);
        self.push(value, Op::SumAll(a))
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).col_sums();
        self.push(value, Op::SumRows(a))
    }

    pub fn neighbor_avg(&mut self, src: Var, index: Arc<NeighborLists>) -> Var {
        let m = self.value(src);
        assert_eq!(m.rows(), index.lists.len(), "neighbor index row mismatch");
        let mut value = Matrix::zeros(m.rows(), m.cols());
        for (i, neigh) in index.lists.iter().enumerate() {
            if neigh.is_empty() {
                continue;
            }
            let inv = 1.0 / neigh.len() as f64;
            for &j in neigh {
                for c in 0..m.cols() {
                    let v = value.get(i, c) + m.get(j, c);
                    value.set(i, c, v);
                }
            }
            for c in 0..m.cols() {
                let v = value.get(i, c) * inv;
                value.set(i, c, v);
            }
        }
        self.push(value, Op::NeighborAvg { src, index })
    }

    /// Reverse pass from a 1x1 scalar node. Returns gradients for every named
    /// parameter leaf the scalar depends on.
    pub fn backward(&self, loss: Var) -> GradMap {
        assert_eq!(
            self.value(loss).shape(),
            (1, 1),
            "backward starts from a scalar"
        );
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::from_vec(1, 1, vec![1.0]));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Leaf { .. } => {
                    grads[id] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let bt = self.value(*b).transpose();
                    let at = self.value(*a).transpose();
                    accumulate(&mut grads, a.0, g.matmul(&bt));
                    accumulate(&mut grads, b.0, at.matmul(&g));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, a.0, g.clone());
                    accumulate(&mut grads, b.0, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, a.0, g.clone());
                    accumulate(&mut grads, b.0, g.scale(-1.0));
                }
                Op::Hadamard(a, b) => {
                    accumulate(&mut grads, a.0, g.hadamard(self.value(*b)));
                    accumulate(&mut grads, b.0, g.hadamard(self.value(*a)));
                }
                Op::Scale(a, k) => {
                    accumulate(&mut grads, a.0, g.scale(*k));
                }
                Op::AddRow(a, row) => {
                    accumulate(&mut grads, row.0, g.col_sums());
                    accumulate(&mut grads, a.0, g);
                }
                Op::Relu(a) => {
                    let mask = self.value(*a).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    accumulate(&mut grads, a.0, g.hadamard(&mask));
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[id].value;
                    let d = y.map(|t| 1.0 - t * t);
                    accumulate(&mut grads, a.0, g.hadamard(&d));
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[id].value;
                    let d = y.map(|s| s * (1.0 - s));
                    accumulate(&mut grads, a.0, g.hadamard(&d));
                }
                Op::Log(a) => {
                    let d = self.value(*a).map(|v| 1.0 / v);
                    accumulate(&mut grads, a.0, g.hadamard(&d));
                }
                Op::SoftmaxRows(a) => {
                    let s = &self.nodes[id].value;
                    let (r, c) = s.shape();
                    let mut da = Matrix::zeros(r, c);
                    for i in 0..r {
                        let dot: f64 = (0..c).map(|j| g.get(i, j) * s.get(i, j)).sum();
                        for j in 0..c {
                            da.set(i, j, s.get(i, j) * (g.get(i, j) - dot));
                        }
                    }
                    accumulate(&mut grads, a.0, da);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &self.nodes[id].value;
                    let (r, c) = y.shape();
                    let mut da = Matrix::zeros(r, c);
                    for i in 0..r {
                        let gsum: f64 = (0..c).map(|j| g.get(i, j)).sum();
                        for j in 0..c {
                            da.set(i, j, g.get(i, j) - y.get(i, j).exp() * gsum);
                        }
                    }
                    accumulate(&mut grads, a.0, da);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    eps,
                } => {
                    let xv = self.value(*x);
                    let gv = self.value(*gamma);
                    let (r, c) = xv.shape();
                    let n = c as f64;
                    let mut dx = Matrix::zeros(r, c);
                    let mut dgamma = Matrix::zeros(1, c);
                    let mut dbeta = Matrix::zeros(1, c);
                    for i in 0..r {
                        let row = xv.row(i);
                        let mean = row.iter().sum::<f64>() / n;
                        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let inv = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv).collect();
                        let dxhat: Vec<f64> = (0..c).map(|j| g.get(i, j) * gv.get(0, j)).collect();
                        let mean_dxhat = dxhat.iter().sum::<f64>() / n;
                        let mean_dxhat_xhat =
                            dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n;
                        for j in 0..c {
                            dbeta.set(0, j, dbeta.get(0, j) + g.get(i, j));
                            dgamma.set(0, j, dgamma.get(0, j) + g.get(i, j) * xhat[j]);
                            dx.set(
                                i,
                                j,
                                inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat),
                            );
                        }
                    }
                    accumulate(&mut grads, x.0, dx);
                    accumulate(&mut grads, gamma.0, dgamma);
                    accumulate(&mut grads, beta.0, dbeta);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let pc = self.value(p).cols();
                        let part = Matrix::from_fn(g.rows(), pc, |r2, c2| g.get(r2, off + c2));
                        accumulate(&mut grads, p.0, part);
                        off += pc;
                    }
                }
                Op::SliceCols { src, start } => {
                    let m = self.value(*src);
                    let mut da = Matrix::zeros(m.rows(), m.cols());
                    for r2 in 0..g.rows() {
                        for c2 in 0..g.cols() {
                            da.set(r2, start + c2, g.get(r2, c2));
                        }
                    }
                    accumulate(&mut grads, src.0, da);
                }
                Op::GatherRows { src, indices } => {
                    let m = self.value(*src);
                    let mut da = Matrix::zeros(m.rows(), m.cols());
                    for (out_r, &r2) in indices.iter().enumerate() {
                        for c2 in 0..m.cols() {
                            da.set(r2, c2, da.get(r2, c2) + g.get(out_r, c2));
                        }
                    }
                    accumulate(&mut grads, src.0, da);
                }
                Op::GatherEntries { src, entries } => {
                    let m = self.value(*src);
                    let mut da = Matrix::zeros(m.rows(), m.cols());
                    for (k, &(r2, c2)) in entries.iter().enumerate() {
                        da.set(r2, c2, da.get(r2, c2) + g.get(k, 0));
                    }
                    accumulate(&mut grads, src.0, da);
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads, a.0, g.transpose());
                }
                Op::SumAll(a) => {
                    let m = self.value(*a);
                    accumulate(
                        &mut grads,
                        a.0,
                        Matrix::filled(m.rows(), m.cols(), g.get(0, 0)),
                    );
                }
                Op::SumRows(a) => {
                    let m = self.value(*a);
                    let da = Matrix::from_fn(m.rows(), m.cols(), |_, c2| g.get(0, c2));
                    accumulate(&mut grads, a.0, da);
                }
                Op::NeighborAvg { src, index } => {
                    let m = self.value(*src);
                    let mut da = Matrix::zeros(m.rows(), m.cols());
                    for (i, neigh) in index.lists.iter().enumerate() {
                        if neigh.is_empty() {
                            continue;
                        }
                        let inv = 1.0 / neigh.len() as f64;
                        for &j in neigh {
                            for c2 in 0..m.cols() {
                                da.set(j, c2, da.get(j, c2) + g.get(i, c2) * inv);
                            }
                        }
                    }
                    accumulate(&mut grads, src.0, da);
                }
            }
        }

        let mut out = GradMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { name: Some(name) } = &node.op {
                if let Some(g) = grads[id].take() {
                    merge_grad(&mut out, name, g);
                }
            }
        }
        out
    }
}

fn accumulate(grads: &mut [Option<Matrix>], id: usize, g: Matrix) {
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn merge_grad(out: &mut GradMap, name: &str, g: Matrix) {
    match out.get_mut(name) {
        Some(existing) => existing.add_assign(&g),
        None => {
            out.insert(name.to_string(), g);
        }
    }
}

/// Plain (non-taped) row softmax with max-subtraction.
pub fn softmax_rows_value(x: &Matrix) -> Matrix {
    let (r, c) = x.shape();
    let mut value = Matrix::zeros(r, c);
    for i in 0..r {
        let row = x.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut denom = 0.0;
        for (j, &v) in row.iter().enumerate() {
            let e = (v - max).exp();
            value.set(i, j, e);
            denom += e;
        }
        for j in 0..c {
            let v = value.get(i, j) / denom;
            value.set(i, j, v);
        }
    }
    value
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Central finite differences for a scalar function of one leaf matrix.
    fn fd_grad(f: impl Fn(&Matrix) -> f64, at: &Matrix, h: f64) -> Matrix {
        let mut g = Matrix::zeros(at.rows(), at.cols());
        for r in 0..at.rows() {
            for c in 0..at.cols() {
                let mut plus = at.clone();
                plus.set(r, c, at.get(r, c) + h);
                let mut minus = at.clone();
                minus.set(r, c, at.get(r, c) - h);
                g.set(r, c, (f(&plus) - f(&minus)) / (2.0 * h));
            }
        }
        g
    }

    fn assert_close(a: &Matrix, b: &Matrix, tol: f64) {
        let diff = a.max_abs_diff(b);
        assert!(diff < tol, "gradient mismatch: max abs diff {diff}");
    }

    #[test]
    fn composite_graph_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x0 = rand_matrix(&mut rng, 3, 4);
        let w0 = rand_matrix(&mut rng, 4, 5);
        let b0 = rand_matrix(&mut rng, 1, 5);

        let eval = |x: &Matrix, w: &Matrix, b: &Matrix| -> f64 {
            let mut t = Tape::new();
            let xv = t.param("x", x.clone());
            let wv = t.param("w", w.clone());
            let bv = t.param("b", b.clone());
            let h = t.matmul(xv, wv);
            let h = t.add_row(h, bv);
            let h = t.tanh(h);
            let s = t.softmax_rows(h);
            let l = t.log(s);
            let sum = t.sum_all(l);
            t.scale(sum, -1.0);
            // evaluate
            let out = t.nodes.last().unwrap().value.get(0, 0);
            out
        };

        let mut t = Tape::new();
        let xv = t.param("x", x0.clone());
        let wv = t.param("w", w0.clone());
        let bv = t.param("b", b0.clone());
        let h = t.matmul(xv, wv);
        let h = t.add_row(h, bv);
        let h = t.tanh(h);
        let s = t.softmax_rows(h);
        let l = t.log(s);
        let sum = t.sum_all(l);
        let loss = t.scale(sum, -1.0);
        let grads = t.backward(loss);

        let h = 1e-6;
        assert_close(&grads["x"], &fd_grad(|m| eval(m, &w0, &b0), &x0, h), 1e-7);
        assert_close(&grads["w"], &fd_grad(|m| eval(&x0, m, &b0), &w0, h), 1e-7);
        assert_close(&grads["b"], &fd_grad(|m| eval(&x0, &w0, m), &b0, h), 1e-7);
    }

    #[test]
    fn layer_norm_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = rand_matrix(&mut rng, 4, 6);
        let g0 = rand_matrix(&mut rng, 1, 6);
        let b0 = rand_matrix(&mut rng, 1, 6);

        let eval = |x: &Matrix, ga: &Matrix, be: &Matrix| -> f64 {
            let mut t = Tape::new();
            let xv = t.param("x", x.clone());
            let gv = t.param("g", ga.clone());
            let bv = t.param("b", be.clone());
            let y = t.layer_norm(xv, gv, bv, 1e-5);
            let sq = t.hadamard(y, y);
            let s = t.sum_all(sq);
            t.value(s).get(0, 0)
        };

        let mut t = Tape::new();
        let xv = t.param("x", x0.clone());
        let gv = t.param("g", g0.clone());
        let bv = t.param("b", b0.clone());
        let y = t.layer_norm(xv, gv, bv, 1e-5);
        let sq = t.hadamard(y, y);
        let loss = t.sum_all(sq);
        let grads = t.backward(loss);

        let h = 1e-6;
        assert_close(&grads["x"], &fd_grad(|m| eval(m, &g0, &b0), &x0, h), 1e-6);
        assert_close(&grads["g"], &fd_grad(|m| eval(&x0, m, &b0), &g0, h), 1e-6);
        assert_close(&grads["b"], &fd_grad(|m| eval(&x0, &g0, m), &b0, h), 1e-6);
    }

    #[test]
    fn gather_and_neighbor_avg_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = rand_matrix(&mut rng, 5, 3);
        let index = Arc::new(NeighborLists {
            lists: vec![vec![1, 2], vec![0], vec![], vec![0, 1, 4], vec![3]],
        });

        let eval = |x: &Matrix| -> f64 {
            let mut t = Tape::new();
            let xv = t.param("x", x.clone());
            let avg = t.neighbor_avg(xv, index.clone());
            let picked = t.gather_rows(avg, &[0, 3, 3]);
            let e = t.gather_entries(picked, &[(0, 1), (2, 2)]);
            let sq = t.hadamard(e, e);
            let s = t.sum_all(sq);
            t.value(s).get(0, 0)
        };

        let mut t = Tape::new();
        let xv = t.param("x", x0.clone());
        let avg = t.neighbor_avg(xv, index.clone());
        let picked = t.gather_rows(avg, &[0, 3, 3]);
        let e = t.gather_entries(picked, &[(0, 1), (2, 2)]);
        let sq = t.hadamard(e, e);
        let loss = t.sum_all(sq);
        let grads = t.backward(loss);

        assert_close(&grads["x"], &fd_grad(eval, &x0, 1e-6), 1e-7);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_matrix(&mut rng, 7, 9);
        let s = softmax_rows_value(&x);
        for i in 0..7 {
            let sum: f64 = s.row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
        let shifted = x.map(|v| v + 123.456);
        let s2 = softmax_rows_value(&shifted);
        assert!(s.max_abs_diff(&s2) < 1e-12);
    }
}
