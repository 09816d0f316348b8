//! Matrix-granular reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive operation of one forward pass;
//! [`Tape::backward`] replays the record in exact reverse order and
//! accumulates gradients for every recorded value. Parameter counts here are
//! orders of magnitude larger than output counts (a scalar loss), which is
//! the regime where reverse mode wins.
//!
//! A tape is confined to one logical training step. It is not shared across
//! threads.

use crate::error::{Error, Result};
use crate::matrix::{softmax, Matrix};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(ValueId, ValueId),
    Add(ValueId, ValueId),
    Sub(ValueId, ValueId),
    Mul(ValueId, ValueId),
    Scale(ValueId, f64),
    AddScalar(ValueId),
    Tanh(ValueId),
    Sigmoid(ValueId),
    Ln(ValueId),
    Softmax(ValueId),
    Transpose(ValueId),
    ConcatRows(ValueId, ValueId),
    Sum(ValueId),
    Clamp(ValueId, f64, f64),
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Ordered record of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], keyed by [`ValueId`].
pub struct Gradients {
    grads: Vec<Matrix>,
}

impl Gradients {
    pub fn get(&self, id: ValueId) -> &Matrix {
        &self.grads[id.0]
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records an input value (parameter or constant data).
    pub fn input(&mut self, value: Matrix) -> Result<ValueId> {
        value.check_finite("tape input")?;
        Ok(self.push(value, Op::Leaf))
    }

    pub fn value(&self, id: ValueId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Value of a 1x1 node as a plain scalar.
    pub fn scalar(&self, id: ValueId) -> Result<f64> {
        let m = self.value(id);
        if m.shape() != (1, 1) {
            return Err(Error::DimMismatch(format!(
                "expected 1x1 scalar, got {}x{}",
                m.rows(),
                m.cols()
            )));
        }
        Ok(m.get(0, 0))
    }

    fn push(&mut self, value: Matrix, op: Op) -> ValueId {
        self.nodes.push(Node { value, op });
        ValueId(self.nodes.len() - 1)
    }

    fn check(&self, id: ValueId) -> Result<()> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::InvalidArgument("value id not on this tape".into()))
        }
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.check(a)?;
        self.check(b)?;
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.check(a)?;
        self.check(b)?;
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.check(a)?;
        self.check(b)?;
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.check(a)?;
        self.check(b)?;
        let out = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: ValueId, factor: f64) -> Result<ValueId> {
        self.check(a)?;
        if !factor.is_finite() {
            return Err(Error::NonFinite("scale factor".into()));
        }
        let out = self.value(a).scale(factor)?;
        Ok(self.push(out, Op::Scale(a, factor)))
    }

    pub fn add_scalar(&mut self, a: ValueId, offset: f64) -> Result<ValueId> {
        self.check(a)?;
        if !offset.is_finite() {
            return Err(Error::NonFinite("offset".into()));
        }
        let out = self.value(a).map("add_scalar", |v| v + offset)?;
        Ok(self.push(out, Op::AddScalar(a)))
    }

    pub fn tanh(&mut self, a: ValueId) -> Result<ValueId> {
        self.check(a)?;
        let out = self.value(a).tanh()?;
        Ok(self.push(out, Op::Tanh(a)))
    }

    pub fn sigmoid(&mut self, a: ValueId) -> Result<ValueId> {
        self.check(a)?;
        let out = self.value(a).sigmoid()?;
        Ok(self.push(out, Op::Sigmoid(a)))
    }

    /// Natural log; forward fails on non-positive entries.
    pub fn ln(&mut self, a: ValueId) -> Result<ValueId> {
        self.check(a)?;
        let out = self.value(a).map("ln", f64::ln)?;
        Ok(self.push(out, Op::Ln(a)))
    }

    /// Softmax over all entries of a row or column vector.
    pub fn softmax(&mut self, a: ValueId) -> Result<ValueId> {
        self.check(a)?;
        let m = self.value(a);
        if m.rows() != 1 && m.cols() != 1 {
            return Err(Error::DimMismatch(format!(
                "softmax expects a vector, got {}x{}",
                m.rows(),
                m.cols()
            )));
        }
        let p = softmax(m.as_slice())?;
        let out = Matrix::from_vec(m.rows(), m.cols(), p)?;
        Ok(self.push(out, Op::Softmax(a)))
    }

    pub fn transpose(&mut self, a: ValueId) -> Result<ValueId> {
        self.check(a)?;
        let out = self.value(a).transpose();
        Ok(self.push(out, Op::Transpose(a)))
    }

    /// Vertical stack; operands must have equal column counts.
    pub fn concat_rows(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.check(a)?;
        self.check(b)?;
        let (ma, mb) = (self.value(a), self.value(b));
        if ma.cols() != mb.cols() {
            return Err(Error::DimMismatch(format!(
                "concat_rows: {} vs {} columns",
                ma.cols(),
                mb.cols()
            )));
        }
        let mut data = Vec::with_capacity(ma.len() + mb.len());
        data.extend_from_slice(ma.as_slice());
        data.extend_from_slice(mb.as_slice());
        let out = Matrix::from_vec(ma.rows() + mb.rows(), ma.cols(), data)?;
        Ok(self.push(out, Op::ConcatRows(a, b)))
    }

    /// Sum of all entries as a 1x1 value.
    pub fn sum(&mut self, a: ValueId) -> Result<ValueId> {
        self.check(a)?;
        let s = self.value(a).sum();
        let out = Matrix::from_vec(1, 1, vec![s])?;
        Ok(self.push(out, Op::Sum(a)))
    }

    /// Clamp to `[lo, hi]`; gradient is zero outside the open interval.
    pub fn clamp(&mut self, a: ValueId, lo: f64, hi: f64) -> Result<ValueId> {
        self.check(a)?;
        if !(lo < hi) {
            return Err(Error::InvalidArgument(format!("clamp bounds {lo} >= {hi}")));
        }
        let out = self.value(a).map("clamp", |v| v.clamp(lo, hi))?;
        Ok(self.push(out, Op::Clamp(a, lo, hi)))
    }

    /// Runs the backward pass from a 1x1 loss. Every recorded value receives
    /// a gradient; values the loss does not depend on get zeros.
    pub fn backward(&self, loss: ValueId) -> Result<Gradients> {
        self.check(loss)
            .map_err(|_| Error::InvalidArgument("loss not on tape".into()))?;
        let lm = self.value(loss);
        if lm.shape() != (1, 1) {
            return Err(Error::DimMismatch(format!(
                "loss must be 1x1, got {}x{}",
                lm.rows(),
                lm.cols()
            )));
        }
        if !lm.get(0, 0).is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }

        let mut grads: Vec<Matrix> = self
            .nodes
            .iter()
            .map(|n| Matrix::zeros(n.value.rows(), n.value.cols()))
            .collect();
        grads[loss.0].set(0, 0, 1.0);

        // Exact reverse of the recording order: every consumer of a value has
        // contributed to its gradient before that value's own rule reads it.
        // Each node's finished gradient is moved out, propagated in place,
        // and moved back; the training hot path allocates nothing here.
        for idx in (0..=loss.0).rev() {
            let out_grad = std::mem::replace(&mut grads[idx], Matrix::zeros(1, 1));
            match self.nodes[idx].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    grads[a.0].accumulate_nt(&out_grad, self.value(b));
                    grads[b.0].accumulate_tn(self.value(a), &out_grad);
                }
                Op::Add(a, b) => {
                    grads[a.0].add_scaled_assign(&out_grad, 1.0);
                    grads[b.0].add_scaled_assign(&out_grad, 1.0);
                }
                Op::Sub(a, b) => {
                    grads[a.0].add_scaled_assign(&out_grad, 1.0);
                    grads[b.0].add_scaled_assign(&out_grad, -1.0);
                }
                Op::Mul(a, b) => {
                    grads[a.0].accumulate_mapped(&out_grad, self.value(b), |v| v);
                    grads[b.0].accumulate_mapped(&out_grad, self.value(a), |v| v);
                }
                Op::Scale(a, factor) => {
                    grads[a.0].add_scaled_assign(&out_grad, factor);
                }
                Op::AddScalar(a) => {
                    grads[a.0].add_scaled_assign(&out_grad, 1.0);
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[idx].value;
                    grads[a.0].accumulate_mapped(&out_grad, y, |v| 1.0 - v * v);
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[idx].value;
                    grads[a.0].accumulate_mapped(&out_grad, y, |v| v * (1.0 - v));
                }
                Op::Ln(a) => {
                    grads[a.0].accumulate_mapped(&out_grad, self.value(a), |v| 1.0 / v);
                }
                Op::Softmax(a) => {
                    // dx_i = y_i * (dy_i - sum_j dy_j y_j)
                    let y = self.nodes[idx].value.as_slice();
                    let g = out_grad.as_slice();
                    let dot: f64 = y.iter().zip(g).map(|(p, gv)| p * gv).sum();
                    let target = grads[a.0].as_mut_slice();
                    for i in 0..y.len() {
                        target[i] += y[i] * (g[i] - dot);
                    }
                }
                Op::Transpose(a) => {
                    let target = &mut grads[a.0];
                    for r in 0..out_grad.rows() {
                        for c in 0..out_grad.cols() {
                            target.set(c, r, target.get(c, r) + out_grad.get(r, c));
                        }
                    }
                }
                Op::ConcatRows(a, b) => {
                    let split = self.value(a).len();
                    let g = out_grad.as_slice();
                    for (t, &v) in grads[a.0].as_mut_slice().iter_mut().zip(&g[..split]) {
                        *t += v;
                    }
                    for (t, &v) in grads[b.0].as_mut_slice().iter_mut().zip(&g[split..]) {
                        *t += v;
                    }
                }
                Op::Sum(a) => {
                    let g = out_grad.get(0, 0);
                    for t in grads[a.0].as_mut_slice() {
                        *t += g;
                    }
                }
                Op::Clamp(a, lo, hi) => {
                    let src = self.value(a).as_slice();
                    let g = out_grad.as_slice();
                    let target = grads[a.0].as_mut_slice();
                    for i in 0..src.len() {
                        if src[i] > lo && src[i] < hi {
                            target[i] += g[i];
                        }
                    }
                }
            }
            grads[idx] = out_grad;
        }
        Ok(Gradients { grads })
    }
}

/// Compares the tape gradient of a scalar-valued builder against central
/// finite differences, coordinate by coordinate.
///
/// `build` must assemble the same computation whenever it is handed the same
/// parameter values. Returns the maximum of
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn finite_diff_check<F>(build: F, params: &[Matrix], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[ValueId]) -> Result<ValueId>,
{
    if step <= 0.0 {
        return Err(Error::InvalidArgument("step must be positive".into()));
    }

    let eval = |values: &[Matrix]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<ValueId> = values
            .iter()
            .map(|m| tape.input(m.clone()))
            .collect::<Result<_>>()?;
        let loss = build(&mut tape, &ids)?;
        let v = tape.scalar(loss)?;
        if !v.is_finite() {
            return Err(Error::NonFinite("objective output".into()));
        }
        Ok(v)
    };

    // Analytic gradients in one pass.
    let mut tape = Tape::new();
    let ids: Vec<ValueId> = params
        .iter()
        .map(|m| tape.input(m.clone()))
        .collect::<Result<_>>()?;
    let loss = build(&mut tape, &ids)?;
    let grads = tape.backward(loss)?;

    let mut worst = 0.0f64;
    let mut work: Vec<Matrix> = params.to_vec();
    for (pi, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id).clone();
        for idx in 0..params[pi].len() {
            let orig = work[pi].as_slice()[idx];
            work[pi].as_mut_slice()[idx] = orig + step;
            let up = eval(&work)?;
            work[pi].as_mut_slice()[idx] = orig - step;
            let down = eval(&work)?;
            work[pi].as_mut_slice()[idx] = orig;

            let numeric = (up - down) / (2.0 * step);
            let exact = analytic.as_slice()[idx];
            let denom = (exact.abs() + numeric.abs()).max(1e-8);
            worst = worst.max((exact - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = Tape::new();
        let w = tape
            .input(Matrix::from_vec(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap())
            .unwrap();
        let loss = tape.sum(w).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(w).as_slice().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn half_squared_norm_gradient_is_the_matrix() {
        let m = Matrix::from_vec(2, 2, vec![1.0, -2.0, 0.25, 4.0]).unwrap();
        let mut tape = Tape::new();
        let w = tape.input(m.clone()).unwrap();
        let sq = tape.mul(w, w).unwrap();
        let s = tape.sum(sq).unwrap();
        let loss = tape.scale(s, 0.5).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(w).max_abs_diff(&m) < 1e-12);
    }

    #[test]
    fn untouched_parameter_gets_zero_gradient() {
        let mut tape = Tape::new();
        let used = tape.input(Matrix::from_vec(1, 1, vec![2.0]).unwrap()).unwrap();
        let unused = tape.input(Matrix::from_vec(2, 2, vec![1.0; 4]).unwrap()).unwrap();
        let loss = tape.sum(used).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(unused).as_slice().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let w = tape.input(Matrix::zeros(2, 2)).unwrap();
        assert!(tape.backward(w).is_err());
    }

    #[test]
    fn backward_rejects_foreign_id() {
        let mut other = Tape::new();
        let foreign = other.input(Matrix::zeros(1, 1)).unwrap();
        let tape = Tape::new();
        assert!(matches!(
            tape.backward(foreign),
            Err(Error::InvalidArgument(_))
        ));
    }

    /// Two-layer net: loss = sum(sigmoid(W2 tanh(W1 x))), checked against
    /// central differences.
    #[test]
    fn two_layer_net_matches_finite_differences() {
        let x = Matrix::from_vec(3, 1, vec![0.3, -0.7, 1.1]).unwrap();
        let w1 = Matrix::from_vec(4, 3, (0..12).map(|i| (i as f64 * 0.37).sin()).collect())
            .unwrap();
        let w2 =
            Matrix::from_vec(2, 4, (0..8).map(|i| (i as f64 * 0.53).cos()).collect()).unwrap();
        let err = finite_diff_check(
            |tape, ids| {
                let xin = tape.input(x.clone())?;
                let h = tape.matmul(ids[0], xin)?;
                let h = tape.tanh(h)?;
                let o = tape.matmul(ids[1], h)?;
                let o = tape.sigmoid(o)?;
                tape.sum(o)
            },
            &[w1, w2],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn quadratic_check_is_machine_precision() {
        let w = Matrix::from_vec(2, 2, vec![0.5, -1.5, 2.0, 0.1]).unwrap();
        let err = finite_diff_check(
            |tape, ids| {
                let sq = tape.mul(ids[0], ids[0])?;
                tape.sum(sq)
            },
            &[w],
            1e-5,
        )
        .unwrap();
        // central differences are exact for quadratics up to rounding
        assert!(err < 1e-9, "max relative error {err}");
    }

    #[test]
    fn constant_objective_checks_to_zero_error() {
        let w = Matrix::from_vec(1, 2, vec![3.0, -4.0]).unwrap();
        let err = finite_diff_check(
            |tape, ids| {
                let zero = tape.scale(ids[0], 0.0)?;
                tape.sum(zero)
            },
            &[w],
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    /// Every primitive appears in this graph; the whole chain must match
    /// finite differences.
    #[test]
    fn all_primitives_match_finite_differences() {
        let a = Matrix::from_vec(2, 3, vec![0.2, -0.4, 0.6, 1.2, -0.8, 0.3]).unwrap();
        let b = Matrix::from_vec(3, 2, vec![0.9, 0.1, -0.5, 0.7, 0.2, -0.3]).unwrap();
        let c = Matrix::from_vec(2, 2, vec![0.4, -0.6, 0.8, 0.5]).unwrap();
        let err = finite_diff_check(
            |tape, ids| {
                let prod = tape.matmul(ids[0], ids[1])?; // 2x2
                let mixed = tape.mul(prod, ids[2])?;
                let shifted = tape.add_scalar(mixed, 0.25)?;
                let t = tape.tanh(shifted)?;
                let s = tape.sigmoid(t)?;
                let tr = tape.transpose(s)?;
                let summed = tape.add(tr, ids[2])?; // both 2x2
                let diff = tape.sub(summed, ids[2])?;
                let sc = tape.scale(diff, 1.7)?;
                let row = tape.input(Matrix::from_vec(1, 2, vec![0.3, 0.9]).unwrap())?;
                let picked = tape.matmul(row, sc)?; // 1x2
                let sm = tape.softmax(picked)?;
                let cl = tape.clamp(sm, 1e-7, 1.0 - 1e-7)?;
                let lg = tape.ln(cl)?;
                let joined = tape.concat_rows(lg, sm)?;
                tape.sum(joined)
            },
            &[a, b, c],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn softmax_on_tape_is_shift_invariant() {
        let logits = [0.3, -1.2, 2.5, 0.0];
        let shifted: Vec<f64> = logits.iter().map(|v| v + 123.5).collect();
        let mut t1 = Tape::new();
        let a = t1.input(Matrix::from_vec(1, 4, logits.to_vec()).unwrap()).unwrap();
        let p1 = t1.softmax(a).unwrap();
        let mut t2 = Tape::new();
        let b = t2.input(Matrix::from_vec(1, 4, shifted).unwrap()).unwrap();
        let p2 = t2.softmax(b).unwrap();
        assert!(t1.value(p1).max_abs_diff(t2.value(p2)) < 1e-12);
    }
}
