//! Reverse-mode gradient tape over dense feature matrices.
//!
//! Coordinates never enter the tape: every op works on the feature matrix
//! of a sparse tensor, and the sparse structure lives in the [`KernelMap`]s
//! and row-index lists captured by the ops.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::nn::conv::{conv_backward, conv_forward, KernelMap};
use crate::nn::real::{sigmoid, softplus, Real};

/// Row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Mat<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data does not match its shape");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn scalar(&self) -> T {
        self.data[0]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv { x: Var, w: Var, b: Option<Var>, map: Rc<KernelMap> },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Scale(Var, T),
    Concat(Vec<Var>),
    Gather { x: Var, rows: Rc<Vec<u32>> },
    Sum(Var),
    BceLogits { logits: Var, targets: Rc<Vec<bool>> },
    FactorizedRate { y: Var, logits: Var, half_range: usize },
}

struct Node<T> {
    value: Mat<T>,
    op: Op<T>,
}

/// Recorded forward computation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every node of a tape.
pub struct Gradients<T> {
    grads: Vec<Option<Mat<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Mat<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn shape_err(msg: String) -> Error {
    Error::Shape(msg)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat<T> {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Mat<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, map: Rc<KernelMap>) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let cin = xv.cols;
        if xv.rows != map.n_in {
            return Err(shape_err(format!("conv input has {} rows, map expects {}", xv.rows, map.n_in)));
        }
        if wv.rows != map.volume() * cin {
            return Err(shape_err(format!(
                "kernel has {} rows, expected {} offsets x {} channels",
                wv.rows,
                map.volume(),
                cin
            )));
        }
        let cout = wv.cols;
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.rows * bv.cols != cout {
                return Err(shape_err("bias does not match output channels".into()));
            }
        }
        let out = conv_forward(
            &xv.data,
            cin,
            &wv.data,
            b.map(|b| self.value(b).data.as_slice()),
            cout,
            &map,
        );
        let rows = map.n_out;
        Ok(self.push(Mat::new(rows, cout, out), Op::Conv { x, w, b, map }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data.iter().map(|&a| a.max(T::zero())).collect();
        let m = Mat::new(v.rows, v.cols, data);
        self.push(m, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data.iter().map(|&a| sigmoid(a)).collect();
        let m = Mat::new(v.rows, v.cols, data);
        self.push(m, Op::Sigmoid(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows != bv.rows || av.cols != bv.cols {
            return Err(shape_err(format!(
                "add of {}x{} and {}x{}",
                av.rows, av.cols, bv.rows, bv.cols
            )));
        }
        let data = av.data.iter().zip(&bv.data).map(|(&x, &y)| x + y).collect();
        let m = Mat::new(av.rows, av.cols, data);
        Ok(self.push(m, Op::Add(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x);
        let m = Mat::new(v.rows, v.cols, v.data.iter().map(|&a| a * c).collect());
        self.push(m, Op::Scale(x, c))
    }

    /// Channel-wise concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows;
        if parts.iter().any(|&p| self.value(p).rows != rows) {
            return Err(shape_err("concat of tensors with different row counts".into()));
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        Ok(self.push(Mat::new(rows, cols, data), Op::Concat(parts.to_vec())))
    }

    /// Selects rows of `x` (rows may repeat).
    pub fn gather(&mut self, x: Var, rows: Rc<Vec<u32>>) -> Result<Var> {
        let v = self.value(x);
        if rows.iter().any(|&r| r as usize >= v.rows) {
            return Err(shape_err("gather row index out of range".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * v.cols);
        for &r in rows.iter() {
            data.extend_from_slice(v.row(r as usize));
        }
        let m = Mat::new(rows.len(), v.cols, data);
        Ok(self.push(m, Op::Gather { x, rows }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().copied().sum();
        self.push(Mat::new(1, 1, vec![s]), Op::Sum(x))
    }

    /// Binary cross-entropy in bits, summed over all entries, taking logits.
    pub fn bce_logits(&mut self, logits: Var, targets: Rc<Vec<bool>>) -> Result<Var> {
        let v = self.value(logits);
        if v.data.len() != targets.len() {
            return Err(shape_err(format!(
                "{} logits for {} targets",
                v.data.len(),
                targets.len()
            )));
        }
        let inv_ln2 = T::from_f64(std::f64::consts::LOG2_E);
        let mut total = T::zero();
        for (&z, &b) in v.data.iter().zip(targets.iter()) {
            // -log p(b) = softplus(z) - b*z
            let nats = if b { softplus(-z) } else { softplus(z) };
            total += nats;
        }
        let m = Mat::new(1, 1, vec![total * inv_ln2]);
        Ok(self.push(m, Op::BceLogits { logits, targets }))
    }

    /// Rate in bits of continuous latents under a per-channel categorical
    /// model over `[-L, L]`, linearly interpolated between integers.
    pub fn factorized_rate(&mut self, y: Var, logits: Var, half_range: usize) -> Result<Var> {
        let (yv, lv) = (self.value(y), self.value(logits));
        let symbols = 2 * half_range + 1;
        if lv.rows != yv.cols || lv.cols != symbols {
            return Err(shape_err(format!(
                "entropy logits are {}x{}, latents have {} channels and {} symbols",
                lv.rows, lv.cols, yv.cols, symbols
            )));
        }
        let pmf = softmax_rows(lv);
        let mut total = T::zero();
        for r in 0..yv.rows {
            for (c, &v) in yv.row(r).iter().enumerate() {
                let (p, _, _, _) = interp(&pmf[c * symbols..(c + 1) * symbols], v, half_range);
                total -= p.ln_det();
            }
        }
        let inv_ln2 = T::from_f64(std::f64::consts::LOG2_E);
        let m = Mat::new(1, 1, vec![total * inv_ln2]);
        Ok(self.push(m, Op::FactorizedRate { y, logits, half_range }))
    }

    /// Propagates gradients of the scalar `loss` back through every op once,
    /// newest first.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::State("backward called before any forward op was recorded".into()));
        }
        let lv = self.value(loss);
        if lv.rows * lv.cols != 1 {
            return Err(Error::State("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Mat<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::new(1, 1, vec![T::one()]));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Conv { x, w, b, map } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let mut gx = vec![T::zero(); xv.data.len()];
                    let mut gw = vec![T::zero(); wv.data.len()];
                    let mut gb = b.map(|_| vec![T::zero(); wv.cols]);
                    conv_backward(
                        &xv.data,
                        xv.cols,
                        &wv.data,
                        wv.cols,
                        map,
                        &g.data,
                        Some(&mut gx),
                        Some(&mut gw),
                        gb.as_deref_mut(),
                    );
                    accumulate(&mut grads, *x, Mat::new(xv.rows, xv.cols, gx));
                    accumulate(&mut grads, *w, Mat::new(wv.rows, wv.cols, gw));
                    if let (Some(b), Some(gb)) = (b, gb) {
                        let bv = self.value(*b);
                        accumulate(&mut grads, *b, Mat::new(bv.rows, bv.cols, gb));
                    }
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let data = xv
                        .data
                        .iter()
                        .zip(&g.data)
                        .map(|(&a, &gv)| if a > T::zero() { gv } else { T::zero() })
                        .collect();
                    accumulate(&mut grads, *x, Mat::new(xv.rows, xv.cols, data));
                }
                Op::Sigmoid(x) => {
                    let data = node
                        .value
                        .data
                        .iter()
                        .zip(&g.data)
                        .map(|(&s, &gv)| gv * s * (T::one() - s))
                        .collect();
                    accumulate(&mut grads, *x, Mat::new(g.rows, g.cols, data));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Scale(x, c) => {
                    let data = g.data.iter().map(|&v| v * *c).collect();
                    accumulate(&mut grads, *x, Mat::new(g.rows, g.cols, data));
                }
                Op::Concat(parts) => {
                    let mut col = 0;
                    for &p in parts {
                        let pc = self.value(p).cols;
                        let mut data = Vec::with_capacity(g.rows * pc);
                        for r in 0..g.rows {
                            data.extend_from_slice(&g.row(r)[col..col + pc]);
                        }
                        accumulate(&mut grads, p, Mat::new(g.rows, pc, data));
                        col += pc;
                    }
                }
                Op::Gather { x, rows } => {
                    let xv = self.value(*x);
                    let mut data = vec![T::zero(); xv.data.len()];
                    for (i, &r) in rows.iter().enumerate() {
                        let dst = &mut data[r as usize * xv.cols..(r as usize + 1) * xv.cols];
                        for (d, &s) in dst.iter_mut().zip(g.row(i)) {
                            *d += s;
                        }
                    }
                    accumulate(&mut grads, *x, Mat::new(xv.rows, xv.cols, data));
                }
                Op::Sum(x) => {
                    let xv = self.value(*x);
                    let s = g.scalar();
                    accumulate(&mut grads, *x, Mat::new(xv.rows, xv.cols, vec![s; xv.data.len()]));
                }
                Op::BceLogits { logits, targets } => {
                    let lv = self.value(*logits);
                    let s = g.scalar() * T::from_f64(std::f64::consts::LOG2_E);
                    let data = lv
                        .data
                        .iter()
                        .zip(targets.iter())
                        .map(|(&z, &b)| {
                            let t = if b { T::one() } else { T::zero() };
                            (sigmoid(z) - t) * s
                        })
                        .collect();
                    accumulate(&mut grads, *logits, Mat::new(lv.rows, lv.cols, data));
                }
                Op::FactorizedRate { y, logits, half_range } => {
                    let (yv, lv) = (self.value(*y), self.value(*logits));
                    let symbols = lv.cols;
                    let pmf = softmax_rows(lv);
                    let s = g.scalar() * T::from_f64(std::f64::consts::LOG2_E);
                    let mut gy = vec![T::zero(); yv.data.len()];
                    // d loss / d pmf, per channel
                    let mut gp = vec![T::zero(); pmf.len()];
                    for r in 0..yv.rows {
                        for (c, &v) in yv.row(r).iter().enumerate() {
                            let probs = &pmf[c * symbols..(c + 1) * symbols];
                            let (p, i0, frac, inside) = interp(probs, v, *half_range);
                            let inv = s / p;
                            if inside && symbols > 1 {
                                gy[r * yv.cols + c] = -(probs[i0 + 1] - probs[i0]) * inv;
                            }
                            gp[c * symbols + i0] -= (T::one() - frac) * inv;
                            if symbols > 1 {
                                gp[c * symbols + i0 + 1] -= frac * inv;
                            }
                        }
                    }
                    let mut gl = vec![T::zero(); lv.data.len()];
                    for c in 0..lv.rows {
                        let probs = &pmf[c * symbols..(c + 1) * symbols];
                        let gpc = &gp[c * symbols..(c + 1) * symbols];
                        let dot: T = probs.iter().zip(gpc).map(|(&p, &q)| p * q).sum();
                        for j in 0..symbols {
                            gl[c * symbols + j] = probs[j] * (gpc[j] - dot);
                        }
                    }
                    accumulate(&mut grads, *y, Mat::new(yv.rows, yv.cols, gy));
                    accumulate(&mut grads, *logits, Mat::new(lv.rows, lv.cols, gl));
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Mat<T>>], v: Var, g: Mat<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data.iter_mut().zip(g.data) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Softmax of every row.
pub(crate) fn softmax_rows<T: Real>(m: &Mat<T>) -> Vec<T> {
    let mut out = Vec::with_capacity(m.data.len());
    for r in 0..m.rows {
        let row = m.row(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp_det()).collect();
        let z: T = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / z));
    }
    out
}

/// Linear interpolation of a pmf over `[-L, L]` at a real position.
/// Returns `(p, lower index, fraction, strictly inside)`.
pub(crate) fn interp<T: Real>(pmf: &[T], v: T, half_range: usize) -> (T, usize, T, bool) {
    let l = T::from_f64(half_range as f64);
    let inside = v > -l && v < l;
    let t = v.max(-l).min(l) + l;
    if pmf.len() == 1 {
        return (pmf[0], 0, T::zero(), false);
    }
    let mut i0 = t.floor().to_usize().unwrap_or(0);
    if i0 >= pmf.len() - 1 {
        i0 = pmf.len() - 2;
    }
    let frac = t - T::from_f64(i0 as f64);
    let p = (T::one() - frac) * pmf[i0] + frac * pmf[i0 + 1];
    (p, i0, frac, inside)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Coord3;

    #[test]
    fn backward_without_forward_is_a_state_error() {
        let tape = Tape::<f32>::new();
        assert!(matches!(tape.backward(Var(0)), Err(Error::State(_))));
    }

    #[test]
    fn backward_needs_scalar() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Mat::new(1, 2, vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::State(_))));
    }

    #[test]
    fn linear_conv_weight_gradient_is_feature_sum() {
        // loss = sum(conv_K1(x)) with one output channel: dL/dW[c] = sum_rows x[:, c]
        let coords = vec![Coord3::new(0, 0, 0), Coord3::new(0, 0, 1), Coord3::new(1, 0, 0)];
        let map = Rc::new(KernelMap::same_scale(&coords, &coords, 1));
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Mat::new(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let w = tape.leaf(Mat::new(2, 1, vec![1.0, 0.0]));
        let y = tape.conv(x, w, None, map).unwrap();
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(w).unwrap().data, vec![9.0, 12.0]);
    }

    #[test]
    fn zero_input_has_zero_input_gradient_through_relu() {
        let coords = vec![Coord3::new(0, 0, 0), Coord3::new(1, 1, 1)];
        let map = Rc::new(KernelMap::same_scale(&coords, &coords, 3));
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Mat::zeros(2, 2));
        let w = tape.leaf(Mat::new(27 * 2, 2, (0..108).map(|i| (i as f64).sin()).collect()));
        let y = tape.conv(x, w, None, map).unwrap();
        let r = tape.relu(y);
        let loss = tape.sum(r);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(x).unwrap().data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uniform_rate_is_log2_of_support() {
        let mut tape = Tape::<f64>::new();
        let y = tape.leaf(Mat::new(2, 3, vec![0.3, -1.7, 4.0, 0.0, 2.2, -9.0]));
        let logits = tape.leaf(Mat::zeros(3, 9));
        let r = tape.factorized_rate(y, logits, 4).unwrap();
        let expect = 6.0 * (9f64).log2();
        assert!((tape.value(r).scalar() - expect).abs() < 1e-12);
    }
}
