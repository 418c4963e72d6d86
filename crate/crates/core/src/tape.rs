//! Reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation in execution order, which is already a
//! topological order of the computation graph. [`Value::backward`] walks the
//! record in reverse, accumulating vector-Jacobian products. Tapes are
//! single-threaded units; parallel code builds one tape per work item.
//!
//! The only broadcasting rule is bias-row addition: adding a `[1, c]` tensor
//! to an `[n, c]` tensor repeats the row. Everything else requires exact
//! shape agreement and errors out otherwise.

use std::cell::RefCell;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{softmax, Tensor};

#[derive(Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    MulElem(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SelectRows(usize, Vec<usize>),
    SliceCols(usize, usize, usize),
    MeanRows(usize),
    SumAll(usize),
    SoftmaxCrossEntropy { logits: usize, target: usize },
    SigmoidCrossEntropy { logit: usize, target: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    param: bool,
}

/// Records a computation so that gradients can be replayed backwards.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to one node on a tape. Cheap to copy.
#[derive(Clone, Copy)]
pub struct Value<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Value<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Value")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, op: Op, param: bool) -> Value<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, param });
        Value {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf that will not receive a gradient.
    pub fn constant(&self, value: Tensor) -> Value<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that participates in [`Value::backward`]'s gradient map.
    pub fn param(&self, value: &Tensor) -> Value<'_> {
        self.push(value.clone(), Op::Leaf, true)
    }

    /// Stacks values vertically. All inputs must share a column count.
    pub fn concat_rows<'t>(&'t self, parts: &[Value<'t>]) -> Result<Value<'t>> {
        let out = {
            let nodes = self.nodes.borrow();
            let first = parts.first().ok_or_else(|| {
                Error::invalid("concat_rows requires at least one input")
            })?;
            let cols = nodes[first.id].value.cols();
            let mut rows = 0;
            for p in parts {
                let v = &nodes[p.id].value;
                if v.cols() != cols {
                    return Err(Error::Shape {
                        op: "concat_rows",
                        lhs: vec![rows, cols],
                        rhs: v.shape(),
                    });
                }
                rows += v.rows();
            }
            let mut data = Vec::with_capacity(rows * cols);
            for p in parts {
                data.extend_from_slice(nodes[p.id].value.data());
            }
            Tensor::from_vec(rows, cols, data)?
        };
        Ok(self.push(out, Op::ConcatRows(parts.iter().map(|p| p.id).collect()), false))
    }

    /// Joins values horizontally. All inputs must share a row count.
    pub fn concat_cols<'t>(&'t self, parts: &[Value<'t>]) -> Result<Value<'t>> {
        let out = {
            let nodes = self.nodes.borrow();
            let first = parts.first().ok_or_else(|| {
                Error::invalid("concat_cols requires at least one input")
            })?;
            let rows = nodes[first.id].value.rows();
            let mut cols = 0;
            for p in parts {
                let v = &nodes[p.id].value;
                if v.rows() != rows {
                    return Err(Error::Shape {
                        op: "concat_cols",
                        lhs: vec![rows, cols],
                        rhs: v.shape(),
                    });
                }
                cols += v.cols();
            }
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for p in parts {
                    data.extend_from_slice(nodes[p.id].value.row_slice(r));
                }
            }
            Tensor::from_vec(rows, cols, data)?
        };
        Ok(self.push(out, Op::ConcatCols(parts.iter().map(|p| p.id).collect()), false))
    }
}

impl<'t> Value<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    /// Copy of the tensor held by this node.
    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape()
    }

    fn same_tape(&self, other: &Value<'t>) {
        debug_assert!(
            std::ptr::eq(self.tape, other.tape),
            "values belong to different tapes"
        );
    }

    pub fn matmul(self, rhs: Value<'t>) -> Result<Value<'t>> {
        self.same_tape(&rhs);
        let out = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id].value.matmul(&nodes[rhs.id].value)?
        };
        Ok(self.tape.push(out, Op::MatMul(self.id, rhs.id), false))
    }

    /// Elementwise sum. A single-row right operand is broadcast to every
    /// row of the left operand (bias-row addition).
    pub fn add(self, rhs: Value<'t>) -> Result<Value<'t>> {
        self.same_tape(&rhs);
        let out = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let b = &nodes[rhs.id].value;
            if a.rows() == b.rows() && a.cols() == b.cols() {
                a.add(b)?
            } else if b.rows() == 1 && b.cols() == a.cols() && a.rows() > 1 {
                let mut out = a.clone();
                for r in 0..a.rows() {
                    let base = r * a.cols();
                    for c in 0..a.cols() {
                        out.data_mut()[base + c] += b.data()[c];
                    }
                }
                out
            } else {
                return Err(Error::Shape {
                    op: "add",
                    lhs: a.shape(),
                    rhs: b.shape(),
                });
            }
        };
        Ok(self.tape.push(out, Op::Add(self.id, rhs.id), false))
    }

    pub fn mul_elementwise(self, rhs: Value<'t>) -> Result<Value<'t>> {
        self.same_tape(&rhs);
        let out = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let b = &nodes[rhs.id].value;
            if a.rows() != b.rows() || a.cols() != b.cols() {
                return Err(Error::Shape {
                    op: "mul_elementwise",
                    lhs: a.shape(),
                    rhs: b.shape(),
                });
            }
            let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
            Tensor::from_vec(a.rows(), a.cols(), data)?
        };
        Ok(self.tape.push(out, Op::MulElem(self.id, rhs.id), false))
    }

    pub fn scale(self, s: f64) -> Result<Value<'t>> {
        if !s.is_finite() {
            return Err(Error::NonFinite {
                context: "scale factor".to_string(),
            });
        }
        let out = self.tape.nodes.borrow()[self.id].value.scale(s);
        Ok(self.tape.push(out, Op::Scale(self.id, s), false))
    }

    pub fn relu(self) -> Value<'t> {
        let out = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.id].value;
            let data = v.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
            Tensor::from_vec(v.rows(), v.cols(), data).expect("relu preserves finiteness")
        };
        self.tape.push(out, Op::Relu(self.id), false)
    }

    pub fn tanh(self) -> Value<'t> {
        let out = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.id].value;
            let data = v.data().iter().map(|x| x.tanh()).collect();
            Tensor::from_vec(v.rows(), v.cols(), data).expect("tanh preserves finiteness")
        };
        self.tape.push(out, Op::Tanh(self.id), false)
    }

    pub fn sigmoid(self) -> Value<'t> {
        let out = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.id].value;
            let data = v.data().iter().map(|&x| stable_sigmoid(x)).collect();
            Tensor::from_vec(v.rows(), v.cols(), data).expect("sigmoid preserves finiteness")
        };
        self.tape.push(out, Op::Sigmoid(self.id), false)
    }

    /// Gathers rows by index; an index may repeat.
    pub fn select_rows(self, indices: &[usize]) -> Result<Value<'t>> {
        let out = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.id].value;
            if indices.is_empty() {
                return Err(Error::invalid("select_rows requires at least one index"));
            }
            if let Some(&bad) = indices.iter().find(|&&i| i >= v.rows()) {
                return Err(Error::invalid(format!(
                    "select_rows index {bad} out of range for {} rows",
                    v.rows()
                )));
            }
            let mut data = Vec::with_capacity(indices.len() * v.cols());
            for &i in indices {
                data.extend_from_slice(v.row_slice(i));
            }
            Tensor::from_vec(indices.len(), v.cols(), data)?
        };
        Ok(self
            .tape
            .push(out, Op::SelectRows(self.id, indices.to_vec()), false))
    }

    /// Keeps columns `start..end`.
    pub fn slice_cols(self, start: usize, end: usize) -> Result<Value<'t>> {
        let out = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.id].value;
            if start >= end || end > v.cols() {
                return Err(Error::invalid(format!(
                    "slice_cols {start}..{end} invalid for {} columns",
                    v.cols()
                )));
            }
            let mut data = Vec::with_capacity(v.rows() * (end - start));
            for r in 0..v.rows() {
                data.extend_from_slice(&v.row_slice(r)[start..end]);
            }
            Tensor::from_vec(v.rows(), end - start, data)?
        };
        Ok(self
            .tape
            .push(out, Op::SliceCols(self.id, start, end), false))
    }

    /// Column means over the rows: `[n, c]` becomes `[1, c]`.
    pub fn mean_rows(self) -> Result<Value<'t>> {
        let out = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.id].value;
            if v.rows() == 0 {
                return Err(Error::invalid("mean_rows over zero rows"));
            }
            let mut sums = vec![0.0; v.cols()];
            for r in 0..v.rows() {
                for (s, x) in sums.iter_mut().zip(v.row_slice(r)) {
                    *s += x;
                }
            }
            let n = v.rows() as f64;
            Tensor::from_vec(1, v.cols(), sums.into_iter().map(|s| s / n).collect())?
        };
        Ok(self.tape.push(out, Op::MeanRows(self.id), false))
    }

    pub fn sum_all(self) -> Result<Value<'t>> {
        let out = {
            let nodes = self.tape.nodes.borrow();
            Tensor::scalar(nodes[self.id].value.data().iter().sum())?
        };
        Ok(self.tape.push(out, Op::SumAll(self.id), false))
    }

    /// Cross-entropy of the softmax of a `[1, k]` logit row against a class
    /// index, computed with max subtraction so large logits cannot overflow.
    pub fn softmax_cross_entropy(self, target: usize) -> Result<Value<'t>> {
        let out = {
            let nodes = self.tape.nodes.borrow();
            let v = &nodes[self.id].value;
            if v.rows() != 1 || v.cols() == 0 {
                return Err(Error::Shape {
                    op: "softmax_cross_entropy",
                    lhs: v.shape(),
                    rhs: vec![1, 2],
                });
            }
            if target >= v.cols() {
                return Err(Error::invalid(format!(
                    "softmax_cross_entropy target {target} out of range for {} classes",
                    v.cols()
                )));
            }
            let logits = v.data();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            Tensor::scalar(lse - logits[target])?
        };
        Ok(self.tape.push(
            out,
            Op::SoftmaxCrossEntropy {
                logits: self.id,
                target,
            },
            false,
        ))
    }

    /// Binary cross-entropy of a sigmoid over a single logit, in the stable
    /// `max(z,0) - z*t + ln(1 + exp(-|z|))` form.
    pub fn sigmoid_cross_entropy(self, target: f64) -> Result<Value<'t>> {
        if !(0.0..=1.0).contains(&target) {
            return Err(Error::invalid(format!(
                "sigmoid_cross_entropy target {target} outside [0, 1]"
            )));
        }
        let out = {
            let nodes = self.tape.nodes.borrow();
            let z = nodes[self.id].value.item()?;
            Tensor::scalar(z.max(0.0) - z * target + (-z.abs()).exp().ln_1p())?
        };
        Ok(self.tape.push(
            out,
            Op::SigmoidCrossEntropy {
                logit: self.id,
                target,
            },
            false,
        ))
    }

    /// Runs the reverse sweep from this scalar node and returns gradients
    /// for every parameter leaf on the tape (zeros for parameters the loss
    /// does not depend on). Constants receive no entry.
    pub fn backward(self) -> Result<Gradients> {
        let nodes = self.tape.nodes.borrow();
        if nodes[self.id].value.item().is_err() {
            return Err(Error::Shape {
                op: "backward",
                lhs: nodes[self.id].value.shape(),
                rhs: vec![1, 1],
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[self.id] = Some(Tensor::scalar(1.0)?);
        let mut param_grads = HashMap::new();

        for id in (0..=self.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            match &nodes[id].op {
                Op::Leaf => {
                    if nodes[id].param {
                        param_grads.insert(id, g);
                    }
                    continue;
                }
                Op::MatMul(a, b) => {
                    let da = g.matmul(&nodes[*b].value.transpose())?;
                    let db = nodes[*a].value.transpose().matmul(&g)?;
                    accumulate(&mut grads[*a], da);
                    accumulate(&mut grads[*b], db);
                }
                Op::Add(a, b) => {
                    let vb = &nodes[*b].value;
                    if vb.rows() == g.rows() {
                        accumulate(&mut grads[*b], g.clone());
                    } else {
                        // bias-row broadcast: fold the upstream gradient back
                        // into one row
                        let mut sums = vec![0.0; g.cols()];
                        for r in 0..g.rows() {
                            for (s, x) in sums.iter_mut().zip(g.row_slice(r)) {
                                *s += x;
                            }
                        }
                        accumulate(&mut grads[*b], Tensor::from_vec(1, g.cols(), sums)?);
                    }
                    accumulate(&mut grads[*a], g);
                }
                Op::MulElem(a, b) => {
                    let da = hadamard(&g, &nodes[*b].value);
                    let db = hadamard(&g, &nodes[*a].value);
                    accumulate(&mut grads[*a], da);
                    accumulate(&mut grads[*b], db);
                }
                Op::Scale(a, s) => accumulate(&mut grads[*a], g.scale(*s)),
                Op::Relu(a) => {
                    let y = &nodes[id].value;
                    let data = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(gi, yi)| if *yi > 0.0 { *gi } else { 0.0 })
                        .collect();
                    accumulate(&mut grads[*a], Tensor::from_vec(g.rows(), g.cols(), data)?);
                }
                Op::Tanh(a) => {
                    let y = &nodes[id].value;
                    let data = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(gi, yi)| gi * (1.0 - yi * yi))
                        .collect();
                    accumulate(&mut grads[*a], Tensor::from_vec(g.rows(), g.cols(), data)?);
                }
                Op::Sigmoid(a) => {
                    let y = &nodes[id].value;
                    let data = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(gi, yi)| gi * yi * (1.0 - yi))
                        .collect();
                    accumulate(&mut grads[*a], Tensor::from_vec(g.rows(), g.cols(), data)?);
                }
                Op::ConcatRows(parts) => {
                    let mut row = 0;
                    for p in parts {
                        let v = &nodes[*p].value;
                        let mut data = Vec::with_capacity(v.len());
                        for r in row..row + v.rows() {
                            data.extend_from_slice(g.row_slice(r));
                        }
                        row += v.rows();
                        accumulate(&mut grads[*p], Tensor::from_vec(v.rows(), v.cols(), data)?);
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut col = 0;
                    for p in parts {
                        let v = &nodes[*p].value;
                        let mut data = Vec::with_capacity(v.len());
                        for r in 0..g.rows() {
                            data.extend_from_slice(&g.row_slice(r)[col..col + v.cols()]);
                        }
                        col += v.cols();
                        accumulate(&mut grads[*p], Tensor::from_vec(v.rows(), v.cols(), data)?);
                    }
                }
                Op::SelectRows(a, indices) => {
                    let v = &nodes[*a].value;
                    let mut da = Tensor::zeros(v.rows(), v.cols());
                    for (k, &i) in indices.iter().enumerate() {
                        let base = i * v.cols();
                        for (c, x) in g.row_slice(k).iter().enumerate() {
                            da.data_mut()[base + c] += x;
                        }
                    }
                    accumulate(&mut grads[*a], da);
                }
                Op::SliceCols(a, start, _end) => {
                    let v = &nodes[*a].value;
                    let mut da = Tensor::zeros(v.rows(), v.cols());
                    for r in 0..g.rows() {
                        let base = r * v.cols() + start;
                        for (c, x) in g.row_slice(r).iter().enumerate() {
                            da.data_mut()[base + c] += x;
                        }
                    }
                    accumulate(&mut grads[*a], da);
                }
                Op::MeanRows(a) => {
                    let v = &nodes[*a].value;
                    let inv = 1.0 / v.rows() as f64;
                    let mut da = Tensor::zeros(v.rows(), v.cols());
                    for r in 0..v.rows() {
                        let base = r * v.cols();
                        for (c, x) in g.row_slice(0).iter().enumerate() {
                            da.data_mut()[base + c] = x * inv;
                        }
                    }
                    accumulate(&mut grads[*a], da);
                }
                Op::SumAll(a) => {
                    let v = &nodes[*a].value;
                    let s = g.item()?;
                    accumulate(&mut grads[*a], Tensor::filled(v.rows(), v.cols(), s)?);
                }
                Op::SoftmaxCrossEntropy { logits, target } => {
                    let s = g.item()?;
                    let mut p = softmax(nodes[*logits].value.data());
                    p[*target] -= 1.0;
                    let data = p.into_iter().map(|x| x * s).collect();
                    accumulate(
                        &mut grads[*logits],
                        Tensor::from_vec(1, nodes[*logits].value.cols(), data)?,
                    );
                }
                Op::SigmoidCrossEntropy { logit, target } => {
                    let s = g.item()?;
                    let z = nodes[*logit].value.item()?;
                    let dz = s * (stable_sigmoid(z) - target);
                    accumulate(&mut grads[*logit], Tensor::scalar(dz)?);
                }
            }
        }

        for (id, node) in nodes.iter().enumerate() {
            if node.param {
                param_grads
                    .entry(id)
                    .or_insert_with(|| Tensor::zeros(node.value.rows(), node.value.cols()));
            }
        }
        Ok(Gradients { map: param_grads })
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn accumulate(slot: &mut Option<Tensor>, delta: Tensor) {
    match slot {
        Some(t) => t
            .add_assign(&delta)
            .expect("gradient accumulation shape invariant"),
        None => *slot = Some(delta),
    }
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::from_vec(a.rows(), a.cols(), data).expect("hadamard shape invariant")
}

/// Gradient map produced by [`Value::backward`], keyed by parameter node.
pub struct Gradients {
    map: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Value<'_>) -> Option<&Tensor> {
        self.map.get(&v.id)
    }

    pub fn take(&mut self, v: Value<'_>) -> Option<Tensor> {
        self.map.remove(&v.id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Central-difference step used by [`grad_check`].
pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / f64::max(1e-8, analytic.abs() + numeric.abs())
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub pass: bool,
    pub worst_rel_err: f64,
    /// Index of the parameter holding the worst element.
    pub worst_param: usize,
    /// Flat element index within that parameter.
    pub worst_element: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// Identity helper that pins a closure to the signature [`grad_check`]
/// expects; plain closures otherwise fail higher-ranked lifetime inference.
pub fn loss_fn<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape, &[Value<'t>]) -> Result<Value<'t>>,
{
    f
}

/// Compares backward-pass gradients against central differences for every
/// element of every parameter. `build` must construct the same scalar loss
/// for any parameter values it is handed.
pub fn grad_check<F>(build: &F, params: &[Tensor], tol: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Value<'t>]) -> Result<Value<'t>>,
{
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vals: Vec<Value> = params.iter().map(|p| tape.param(p)).collect();
        let loss = build(&tape, &vals)?;
        let grads = loss.backward()?;
        vals.iter()
            .zip(params)
            .map(|(v, p)| {
                grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.rows(), p.cols()))
            })
            .collect()
    };

    let eval = |work: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vals: Vec<Value> = work.iter().map(|p| tape.param(p)).collect();
        build(&tape, &vals)?.value().item()
    };

    let mut report = GradCheckReport {
        pass: true,
        worst_rel_err: 0.0,
        worst_param: 0,
        worst_element: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    let mut work = params.to_vec();
    for pi in 0..params.len() {
        for k in 0..params[pi].len() {
            let orig = work[pi].data()[k];
            work[pi].data_mut()[k] = orig + GRAD_CHECK_STEP;
            let up = eval(&work)?;
            work[pi].data_mut()[k] = orig - GRAD_CHECK_STEP;
            let down = eval(&work)?;
            work[pi].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * GRAD_CHECK_STEP);
            let analytic_val = analytic[pi].data()[k];
            let rel = relative_error(analytic_val, numeric);
            if rel > report.worst_rel_err {
                report.worst_rel_err = rel;
                report.worst_param = pi;
                report.worst_element = k;
                report.worst_analytic = analytic_val;
                report.worst_numeric = numeric;
            }
        }
    }
    report.pass = report.worst_rel_err <= tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        // Rejection keeps relu inputs away from the kink at zero.
        let data = (0..rows * cols)
            .map(|_| loop {
                let x: f64 = rng.gen_range(-2.0..2.0);
                if x.abs() > 1e-3 {
                    break x;
                }
            })
            .collect();
        Tensor::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn relu_forward() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::row(&[-1.0, 2.0]).unwrap());
        assert_eq!(x.relu().value().data(), &[0.0, 2.0]);
    }

    #[test]
    fn mean_rows_forward() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(2, 2, vec![1.0, 3.0, 5.0, 7.0]).unwrap());
        assert_eq!(x.mean_rows().unwrap().value().data(), &[3.0, 5.0]);
    }

    #[test]
    fn bias_row_addition_broadcasts() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.constant(Tensor::row(&[10.0, 20.0]).unwrap());
        let y = x.add(b).unwrap();
        assert_eq!(y.value().data(), &[11.0, 22.0, 13.0, 24.0]);
    }

    #[test]
    fn add_rejects_mismatched_shapes() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(2, 3));
        let y = tape.constant(Tensor::zeros(3, 2));
        let msg = x.add(y).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn softmax_cross_entropy_values() {
        let tape = Tape::new();
        let ln2 = std::f64::consts::LN_2;
        let x = tape.constant(Tensor::row(&[0.0, 0.0]).unwrap());
        let loss = x.softmax_cross_entropy(0).unwrap().value().item().unwrap();
        assert!((loss - ln2).abs() < 1e-12);

        let x = tape.constant(Tensor::row(&[100.0, 0.0]).unwrap());
        let loss = x.softmax_cross_entropy(0).unwrap().value().item().unwrap();
        assert!(loss.is_finite() && loss < 1e-12, "loss = {loss}");

        let x = tape.constant(Tensor::row(&[1.0, 2.0, 3.0]).unwrap());
        let loss = x.softmax_cross_entropy(2).unwrap().value().item().unwrap();
        assert!((loss - 0.40760596444438104).abs() < 1e-12);
    }

    #[test]
    fn softmax_cross_entropy_gradient_at_zero_logits() {
        let tape = Tape::new();
        let logits = Tensor::row(&[0.0, 0.0]).unwrap();
        let w = tape.param(&logits);
        let loss = w.softmax_cross_entropy(0).unwrap();
        let grads = loss.backward().unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[-0.5, 0.5]);
    }

    #[test]
    fn backward_through_linear_map() {
        // loss = sum(a @ b) has d/da = row-sums of b^T replicated, a known closed form.
        let tape = Tape::new();
        let a = Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let va = tape.param(&a);
        let vb = tape.param(&b);
        let loss = va.matmul(vb).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        assert_eq!(grads.get(va).unwrap().data(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(grads.get(vb).unwrap().data(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let tape = Tape::new();
        let a = tape.param(&Tensor::row(&[1.0, 2.0]).unwrap());
        let b = tape.param(&Tensor::row(&[3.0, 4.0]).unwrap());
        let loss = a.sum_all().unwrap();
        let grads = loss.backward().unwrap();
        assert_eq!(grads.get(b).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(grads.len(), 2);
    }

    #[test]
    fn constants_receive_no_gradient_entry() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::row(&[1.0]).unwrap());
        let p = tape.param(&Tensor::row(&[2.0]).unwrap());
        let loss = c.mul_elementwise(p).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap().data(), &[1.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let tape = Tape::new();
        let x = tape.param(&Tensor::zeros(2, 2));
        assert!(x.relu().backward().is_err());
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_tensor(3, 3, &mut rng);
        let grad_of = |af: f64, bf: f64| -> Tensor {
            let tape = Tape::new();
            let v = tape.param(&x);
            let f = v.relu().sum_all().unwrap().scale(af).unwrap();
            let g = v.tanh().sum_all().unwrap().scale(bf).unwrap();
            let loss = f.add(g).unwrap();
            loss.backward().unwrap().take(v).unwrap()
        };
        let gf = grad_of(1.0, 0.0);
        let gg = grad_of(0.0, 1.0);
        let combo = grad_of(2.0, 3.0);
        for i in 0..gf.len() {
            let expect = 2.0 * gf.data()[i] + 3.0 * gg.data()[i];
            assert!((combo.data()[i] - expect).abs() <= 1e-10);
        }
    }

    #[test]
    fn backward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(4, 3, &mut rng);
        let w = rand_tensor(3, 2, &mut rng);
        let run = || -> Vec<f64> {
            let tape = Tape::new();
            let vx = tape.param(&x);
            let vw = tape.param(&w);
            let loss = vx
                .matmul(vw)
                .unwrap()
                .sigmoid()
                .mean_rows()
                .unwrap()
                .sum_all()
                .unwrap();
            let mut grads = loss.backward().unwrap();
            let mut out = grads.take(vx).unwrap().data().to_vec();
            out.extend_from_slice(grads.take(vw).unwrap().data());
            out
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn grad_check_passes_every_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..20 {
            let a = rand_tensor(3, 4, &mut rng);
            let b = rand_tensor(4, 2, &mut rng);
            let c = rand_tensor(3, 4, &mut rng);
            let bias = rand_tensor(1, 2, &mut rng);
            let build = loss_fn(|tape, vals| {
                let (a, b, c, bias) = (vals[0], vals[1], vals[2], vals[3]);
                let prod = a.mul_elementwise(c)?.relu().matmul(b)?.add(bias)?;
                let act = prod.tanh().sigmoid();
                let gathered = act.select_rows(&[0, 2, 0])?;
                let sliced = gathered.slice_cols(0, 2)?;
                let joined = tape.concat_cols(&[sliced, gathered])?;
                let stacked = tape.concat_rows(&[joined, joined])?;
                let pooled = stacked.mean_rows()?;
                let wide = pooled.scale(1.5)?;
                let ce = wide.slice_cols(0, 2)?.softmax_cross_entropy(1)?;
                let bce = wide.slice_cols(0, 1)?.sigmoid_cross_entropy(1.0)?;
                ce.add(bce)?.sum_all()
            });
            let report = grad_check(&build, &[a, b, c, bias], 1e-4).unwrap();
            assert!(
                report.pass,
                "trial {trial}: worst rel err {} at param {} element {}",
                report.worst_rel_err, report.worst_param, report.worst_element
            );
        }
    }

    #[test]
    fn grad_check_accepts_constant_function() {
        let build = loss_fn(|tape, _vals| tape.constant(Tensor::scalar(4.0)?).sum_all());
        let report = grad_check(&build, &[Tensor::zeros(2, 2)], 1e-4).unwrap();
        assert!(report.pass);
        assert_eq!(report.worst_rel_err, 0.0);
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(2, 2, &mut rng);
        let tape = Tape::new();
        let v = tape.param(&x);
        let loss = v.tanh().sum_all().unwrap();
        let mut grads = loss.backward().unwrap();
        let mut analytic = grads.take(v).unwrap();
        analytic.data_mut()[1] += 0.25;

        let mut worst: f64 = 0.0;
        for k in 0..x.len() {
            let mut work = x.clone();
            let orig = work.data()[k];
            let eval = |w: &Tensor| {
                let t = Tape::new();
                t.param(w).tanh().sum_all().unwrap().value().item().unwrap()
            };
            work.data_mut()[k] = orig + GRAD_CHECK_STEP;
            let up = eval(&work);
            work.data_mut()[k] = orig - GRAD_CHECK_STEP;
            let down = eval(&work);
            let numeric = (up - down) / (2.0 * GRAD_CHECK_STEP);
            worst = worst.max(relative_error(analytic.data()[k], numeric));
        }
        assert!(worst > 1e-4, "corruption went unnoticed: {worst}");
    }

    #[test]
    fn select_rows_accumulates_duplicate_indices() {
        let x = Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let tape = Tape::new();
        let v = tape.param(&x);
        let loss = v.select_rows(&[0, 0, 1]).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        assert_eq!(grads.get(v).unwrap().data(), &[2.0, 2.0, 1.0, 1.0]);
    }
}
