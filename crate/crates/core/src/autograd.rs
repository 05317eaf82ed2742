//! Reverse-mode automatic differentiation over [`Mat`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] on a scalar node walks the tape in reverse and returns
//! the gradient of that scalar with respect to every node that was created
//! with `requires_grad` (directly or through its inputs).

use crate::tensor::{Mat, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which key columns a softmax row may attend to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnMask {
    Full,
    /// Row `i` sees columns `0..=i`.
    Causal,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Mat<T>, inv_std: Vec<T> },
    Softmax(Var),
    Gather { table: Var, ids: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    MeanRows(Var),
    CrossEntropy { logits: Var, probs: Mat<T>, targets: Vec<usize>, weights: Vec<T>, total: T },
    BceLogits { logits: Var, targets: Vec<T> },
}

struct Node<T> {
    value: Mat<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "not a scalar node");
        m.get(0, 0)
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn leaf(&mut self, value: Mat<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Mat<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(v, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_nt(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(v, Op::MatMulNt(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        assert_eq!(v.shape(), self.value(b).shape(), "add shape mismatch");
        v.add_assign(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(v, Op::Add(a, b), ng)
    }

    /// Adds a `1×c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a row vector");
        assert_eq!(r.cols(), self.value(a).cols(), "add_row width mismatch");
        let mut v = self.value(a).clone();
        let bias = r.data().to_vec();
        for i in 0..v.rows() {
            for (x, &b) in v.row_mut(i).iter_mut().zip(&bias) {
                *x += b;
            }
        }
        let ng = self.ng(&[a, row]);
        self.push(v, Op::AddRow(a, row), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "mul shape mismatch");
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let v = Mat::from_vec(x.rows(), x.cols(), data);
        let ng = self.ng(&[a, b]);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x * s);
        let ng = self.ng(&[a]);
        self.push(v, Op::Scale(a, s), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let c = T::from_f64c(GELU_C);
        let k = T::from_f64c(GELU_K);
        let half = T::from_f64c(0.5);
        let v = self.value(a).map(|x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()));
        let ng = self.ng(&[a]);
        self.push(v, Op::Gelu(a), ng)
    }

    /// Row-wise layer normalisation with affine `gamma`/`beta` rows.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.shape();
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        assert_eq!(g.len(), d);
        assert_eq!(b.len(), d);
        let dn = T::from_f64c(d as f64);
        let eps = T::from_f64c(LN_EPS);
        let mut xhat = Mat::zeros(n, d);
        let mut out = Mat::zeros(n, d);
        let mut inv_std = Vec::with_capacity(n);
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat.set(i, j, h);
                out.set(i, j, h * g[j] + b[j]);
            }
        }
        let ng = self.ng(&[x, gamma, beta]);
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, ng)
    }

    pub fn softmax_rows(&mut self, x: Var, mask: AttnMask) -> Var {
        let xv = self.value(x);
        let (n, m) = xv.shape();
        let mut out = Mat::zeros(n, m);
        for i in 0..n {
            let visible = match mask {
                AttnMask::Full => m,
                AttnMask::Causal => (i + 1).min(m),
            };
            let row = &xv.row(i)[..visible];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            let o = out.row_mut(i);
            for j in 0..visible {
                let e = (row[j] - mx).exp();
                o[j] = e;
                z += e;
            }
            for v in &mut o[..visible] {
                *v = *v / z;
            }
        }
        let ng = self.ng(&[x]);
        self.push(out, Op::Softmax(x), ng)
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let d = t.cols();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < t.rows(), "gather id {id} out of range {}", t.rows());
            data.extend_from_slice(t.row(id));
        }
        let v = Mat::from_vec(ids.len(), d, data);
        let ng = self.ng(&[table]);
        self.push(v, Op::Gather { table, ids: ids.to_vec() }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let d = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols(), d, "concat_rows width mismatch");
            data.extend_from_slice(m.data());
            rows += m.rows();
        }
        let ng = self.ng(parts);
        self.push(Mat::from_vec(rows, d, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Mat::zeros(n, total);
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let m = self.value(p);
            assert_eq!(m.rows(), n, "concat_cols height mismatch");
            for i in 0..n {
                out.row_mut(i)[off..off + w].copy_from_slice(m.row(i));
            }
            off += w;
        }
        let ng = self.ng(parts);
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let m = self.value(x);
        assert!(start + len <= m.rows(), "slice_rows out of range");
        let d = m.cols();
        let v = Mat::from_vec(len, d, m.data()[start * d..(start + len) * d].to_vec());
        let ng = self.ng(&[x]);
        self.push(v, Op::SliceRows { x, start }, ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let m = self.value(x);
        assert!(start + len <= m.cols(), "slice_cols out of range");
        let v = Mat::from_fn(m.rows(), len, |r, c| m.get(r, start + c));
        let ng = self.ng(&[x]);
        self.push(v, Op::SliceCols { x, start }, ng)
    }

    /// Column means: `n×d → 1×d`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let m = self.value(x);
        let n = T::from_f64c(m.rows() as f64);
        let v = Mat::from_fn(1, m.cols(), |_, c| (0..m.rows()).map(|r| m.get(r, c)).sum::<T>() / n);
        let ng = self.ng(&[x]);
        self.push(v, Op::MeanRows(x), ng)
    }

    /// Weighted mean next-token cross-entropy. Row `i` of `logits` is scored
    /// against `targets[i]` with weight `weights[i]`; zero-weight rows are ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[T]) -> Var {
        let lv = self.value(logits);
        let (n, v) = lv.shape();
        assert_eq!(targets.len(), n);
        assert_eq!(weights.len(), n);
        let total: T = weights.iter().copied().sum();
        assert!(total > T::zero(), "cross_entropy needs at least one weighted row");
        let mut probs = Mat::zeros(n, v);
        let mut loss = T::zero();
        for i in 0..n {
            let row = lv.row(i);
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&x| (x - mx).exp()).sum();
            let lse = mx + z.ln();
            for j in 0..v {
                probs.set(i, j, (row[j] - lse).exp());
            }
            if weights[i] != T::zero() {
                assert!(targets[i] < v, "target id out of vocabulary");
                loss += weights[i] * (lse - row[targets[i]]);
            }
        }
        let out = Mat::from_vec(1, 1, vec![loss / total]);
        let ng = self.ng(&[logits]);
        self.push(
            out,
            Op::CrossEntropy { logits, probs, targets: targets.to_vec(), weights: weights.to_vec(), total },
            ng,
        )
    }

    /// Mean binary cross-entropy of logits (row-major, any shape) against 0/1 targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.data().len(), targets.len());
        let n = T::from_f64c(targets.len() as f64);
        let mut loss = T::zero();
        for (&x, &t) in lv.data().iter().zip(targets) {
            // max(x,0) - x t + ln(1 + e^{-|x|})
            loss += x.max(T::zero()) - x * t + (T::one() + (-x.abs()).exp()).ln();
        }
        let out = Mat::from_vec(1, 1, vec![loss / n]);
        let ng = self.ng(&[logits]);
        self.push(out, Op::BceLogits { logits, targets: targets.to_vec() }, ng)
    }

    /// Gradients of the scalar `root` with respect to every node that needs one.
    pub fn backward(&self, root: Var) -> Grads<T> {
        assert_eq!(self.value(root).shape(), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Mat<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Mat::from_vec(1, 1, vec![T::one()]));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    fn propagate(&self, node: &Node<T>, g: &Mat<T>, grads: &mut [Option<Mat<T>>]) {
        let acc = |v: Var, delta: Mat<T>, grads: &mut [Option<Mat<T>>]| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if needs(*a) {
                    acc(*a, g.matmul_nt(self.value(*b)), grads);
                }
                if needs(*b) {
                    acc(*b, self.value(*a).matmul_tn(g), grads);
                }
            }
            Op::MatMulNt(a, b) => {
                // y = a bᵀ: da = g b, db = gᵀ a
                if needs(*a) {
                    acc(*a, g.matmul(self.value(*b)), grads);
                }
                if needs(*b) {
                    acc(*b, g.matmul_tn(self.value(*a)), grads);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone(), grads);
                acc(*b, g.clone(), grads);
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone(), grads);
                if needs(*row) {
                    let d = Mat::from_fn(1, g.cols(), |_, c| (0..g.rows()).map(|r| g.get(r, c)).sum());
                    acc(*row, d, grads);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if needs(*a) {
                    let d = g.data().iter().zip(bv.data()).map(|(&p, &q)| p * q).collect();
                    acc(*a, Mat::from_vec(g.rows(), g.cols(), d), grads);
                }
                if needs(*b) {
                    let d = g.data().iter().zip(av.data()).map(|(&p, &q)| p * q).collect();
                    acc(*b, Mat::from_vec(g.rows(), g.cols(), d), grads);
                }
            }
            Op::Scale(a, s) => acc(*a, g.map(|x| x * *s), grads),
            Op::Gelu(a) => {
                let c = T::from_f64c(GELU_C);
                let k = T::from_f64c(GELU_K);
                let half = T::from_f64c(0.5);
                let three = T::from_f64c(3.0);
                let x = self.value(*a);
                let d = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gy)| {
                        let t = (c * (x + k * x * x * x)).tanh();
                        let dydx = half * (T::one() + t)
                            + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x);
                        gy * dydx
                    })
                    .collect();
                acc(*a, Mat::from_vec(g.rows(), g.cols(), d), grads);
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let (n, d) = xhat.shape();
                let gam = self.value(*gamma).data();
                if needs(*gamma) {
                    let dg = Mat::from_fn(1, d, |_, c| (0..n).map(|r| g.get(r, c) * xhat.get(r, c)).sum());
                    acc(*gamma, dg, grads);
                }
                if needs(*beta) {
                    let db = Mat::from_fn(1, d, |_, c| (0..n).map(|r| g.get(r, c)).sum());
                    acc(*beta, db, grads);
                }
                if needs(*x) {
                    let dn = T::from_f64c(d as f64);
                    let mut dx = Mat::zeros(n, d);
                    for i in 0..n {
                        let dxhat: Vec<T> = (0..d).map(|j| g.get(i, j) * gam[j]).collect();
                        let mean_d: T = dxhat.iter().copied().sum::<T>() / dn;
                        let mean_dx: T =
                            dxhat.iter().enumerate().map(|(j, &v)| v * xhat.get(i, j)).sum::<T>() / dn;
                        for j in 0..d {
                            dx.set(i, j, inv_std[i] * (dxhat[j] - mean_d - xhat.get(i, j) * mean_dx));
                        }
                    }
                    acc(*x, dx, grads);
                }
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let (n, m) = y.shape();
                let mut dx = Mat::zeros(n, m);
                for i in 0..n {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    let o = dx.row_mut(i);
                    for j in 0..m {
                        o[j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*x, dx, grads);
            }
            Op::Gather { table, ids } => {
                let t = self.value(*table);
                let mut dt = Mat::zeros(t.rows(), t.cols());
                for (r, &id) in ids.iter().enumerate() {
                    for (o, &v) in dt.row_mut(id).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                acc(*table, dt, grads);
            }
            Op::ConcatRows(parts) => {
                let d = g.cols();
                let mut off = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    if needs(p) {
                        acc(p, Mat::from_vec(r, d, g.data()[off * d..(off + r) * d].to_vec()), grads);
                    }
                    off += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if needs(p) {
                        acc(p, Mat::from_fn(g.rows(), w, |r, c| g.get(r, off + c)), grads);
                    }
                    off += w;
                }
            }
            Op::SliceRows { x, start } => {
                let src = self.value(*x);
                let d = src.cols();
                let mut dx = Mat::zeros(src.rows(), d);
                dx.data_mut()[start * d..(start + g.rows()) * d].copy_from_slice(g.data());
                acc(*x, dx, grads);
            }
            Op::SliceCols { x, start } => {
                let src = self.value(*x);
                let mut dx = Mat::zeros(src.rows(), src.cols());
                for r in 0..g.rows() {
                    dx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                acc(*x, dx, grads);
            }
            Op::MeanRows(x) => {
                let src = self.value(*x);
                let n = T::from_f64c(src.rows() as f64);
                let dx = Mat::from_fn(src.rows(), src.cols(), |_, c| g.get(0, c) / n);
                acc(*x, dx, grads);
            }
            Op::CrossEntropy { logits, probs, targets, weights, total } => {
                let scale = g.get(0, 0) / *total;
                let mut dl = probs.clone();
                for i in 0..dl.rows() {
                    let w = weights[i] * scale;
                    let row = dl.row_mut(i);
                    if weights[i] == T::zero() {
                        row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    row[targets[i]] = row[targets[i]] - T::one();
                    row.iter_mut().for_each(|v| *v *= w);
                }
                acc(*logits, dl, grads);
            }
            Op::BceLogits { logits, targets } => {
                let x = self.value(*logits);
                let n = T::from_f64c(targets.len() as f64);
                let scale = g.get(0, 0) / n;
                let d = x
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&x, &t)| (T::one() / (T::one() + (-x).exp()) - t) * scale)
                    .collect();
                acc(*logits, Mat::from_vec(x.rows(), x.cols(), d), grads);
            }
        }
    }
}

pub struct Grads<T> {
    grads: Vec<Option<Mat<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Mat<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Mat<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central differences on a scalar-valued graph builder.
    fn check_grad(build: impl Fn(&mut Tape<f64>, Var) -> Var, input: Mat<f64>) {
        let mut tape = Tape::new();
        let x = tape.leaf(input.clone(), true);
        let y = build(&mut tape, x);
        let grads = tape.backward(y);
        let analytic = grads.get(x).cloned().unwrap_or_else(|| Mat::zeros(input.rows(), input.cols()));
        let h = 1e-6;
        for i in 0..input.data().len() {
            let eval = |delta: f64| {
                let mut m = input.clone();
                m.data_mut()[i] += delta;
                let mut t = Tape::new();
                let x = t.leaf(m, false);
                let y = build(&mut t, x);
                t.scalar(y)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            assert!(
                (a - numeric).abs() <= 1e-6 + 1e-5 * numeric.abs(),
                "grad mismatch at {i}: analytic {a} numeric {numeric}"
            );
        }
    }

    fn sample(rows: usize, cols: usize, salt: f64) -> Mat<f64> {
        Mat::from_fn(rows, cols, |r, c| ((r * 7 + c * 3) as f64 * 0.37 + salt).sin())
    }

    #[test]
    fn matmul_and_reductions() {
        let w = sample(3, 2, 0.3);
        check_grad(
            |t, x| {
                let w = t.constant(w.clone());
                let y = t.matmul(x, w);
                let y = t.gelu(y);
                let m = t.mean_rows(y);
                let ones = t.constant(Mat::from_vec(2, 1, vec![1.0, -0.5]));
                t.matmul(m, ones)
            },
            sample(4, 3, 0.1),
        );
    }

    #[test]
    fn attention_pieces() {
        let k = sample(5, 4, 1.1);
        check_grad(
            |t, x| {
                let k = t.constant(k.clone());
                let s = t.matmul_nt(x, k);
                let s = t.scale(s, 0.5);
                let p = t.softmax_rows(s, AttnMask::Causal);
                let o = t.matmul(p, k);
                let a = t.slice_cols(o, 1, 2);
                let b = t.slice_rows(o, 0, 5);
                let b = t.slice_cols(b, 0, 2);
                let c = t.concat_cols(&[a, b]);
                let a2 = t.concat_cols(&[a, a]);
                let c = t.concat_rows(&[c, a2]);
                t.cross_entropy(c, &[0, 3, 1, 2, 0, 1, 1, 3, 2, 0], &[1.0, 0.0, 1.0, 2.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0])
            },
            sample(5, 4, 0.7),
        );
    }

    #[test]
    fn layer_norm_and_gather() {
        let gamma = Mat::row_vector(vec![1.2, 0.8, -0.3, 0.5]);
        let beta = Mat::row_vector(vec![0.1, 0.0, 0.2, -0.1]);
        check_grad(
            |t, x| {
                let g = t.constant(gamma.clone());
                let b = t.constant(beta.clone());
                let e = t.gather_rows(x, &[2, 0, 2, 1]);
                let y = t.layer_norm(e, g, b);
                let r = t.constant(Mat::row_vector(vec![0.3, -0.2, 0.1, 0.4]));
                let y = t.add_row(y, r);
                let y2 = t.mul(y, y);
                let z = t.add(y2, y);
                let m = t.mean_rows(z);
                t.bce_with_logits(m, &[1.0, 0.0, 1.0, 0.0])
            },
            sample(3, 4, 0.2),
        );
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Mat::from_fn(3, 3, |r, c| (r + c) as f64));
        let p = t.softmax_rows(x, AttnMask::Causal);
        let v = t.value(p);
        assert_eq!(v.get(0, 0), 1.0);
        assert_eq!(v.get(0, 1), 0.0);
        assert_eq!(v.get(1, 2), 0.0);
        for r in 0..3 {
            assert!((v.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
