use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::array::Array;
use crate::error::{Error, Result};

/// Local derivative of an elementwise op with respect to one operand,
/// laid out in the output's shape.
#[derive(Clone, Debug)]
enum Local {
    Const(f64),
    Arr(Array),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary { a: usize, d: Local },
    Binary { a: usize, b: usize, da: Local, db: Local },
    MatMul { a: usize, b: usize },
    Transpose { a: usize },
    Sum { a: usize },
    HCat { parts: Vec<usize> },
    VCat { parts: Vec<usize> },
    SliceCols { a: usize, start: usize },
    GatherRows { a: usize, idx: Vec<usize> },
    Reshape { a: usize },
    Cholesky { a: usize },
    LogDet { a: usize, chol: Array },
    SolveSpd { a: usize, b: usize, chol: Array },
    SolveLower { l: usize, b: usize },
}

#[derive(Debug)]
struct Node {
    value: Rc<Array>,
    op: Op,
    requires_grad: bool,
}

/// A tape of differentiable operations.
///
/// Nodes are appended in evaluation order, so index order is a topological
/// order and the backward sweep is a single reverse scan.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Array, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf that receives a gradient.
    pub fn param(&self, value: Array) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&self, value: Array) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Array::scalar(value))
    }

    fn value_of(&self, id: usize) -> Rc<Array> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Array>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Array::full(nodes[loss.id].value.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let needs = |p: usize| nodes[p].requires_grad;
            let value = |p: usize| &*nodes[p].value;
            let mut acc = |p: usize, contrib: Array| match &mut grads[p] {
                Some(existing) => existing.add_assign(&contrib),
                slot @ None => *slot = Some(contrib),
            };
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                }
                Op::Unary { a, d } => {
                    if needs(*a) {
                        acc(*a, apply_local(&g, d));
                    }
                }
                Op::Binary { a, b, da, db } => {
                    if needs(*a) {
                        acc(*a, reduce_to(&apply_local(&g, da), value(*a).shape()));
                    }
                    if needs(*b) {
                        acc(*b, reduce_to(&apply_local(&g, db), value(*b).shape()));
                    }
                }
                Op::MatMul { a, b } => {
                    if needs(*a) {
                        acc(*a, g.matmul(&value(*b).transpose())?);
                    }
                    if needs(*b) {
                        acc(*b, value(*a).transpose().matmul(&g)?);
                    }
                }
                Op::Transpose { a } => {
                    if needs(*a) {
                        acc(*a, g.transpose().reshape(value(*a).shape())?);
                    }
                }
                Op::Sum { a } => {
                    if needs(*a) {
                        acc(*a, Array::full(value(*a).shape(), g.item()));
                    }
                }
                Op::HCat { parts } => {
                    let mut start = 0;
                    for &p in parts {
                        let c = value(p).cols();
                        if needs(p) {
                            acc(p, g.select_cols(start, start + c));
                        }
                        start += c;
                    }
                }
                Op::VCat { parts } => {
                    let cols = g.cols();
                    let mut start = 0;
                    for &p in parts {
                        let r = value(p).rows();
                        if needs(p) {
                            let slice = g.data()[start * cols..(start + r) * cols].to_vec();
                            acc(p, Array::matrix(r, cols, slice)?);
                        }
                        start += r;
                    }
                }
                Op::SliceCols { a, start } => {
                    if needs(*a) {
                        let src = value(*a);
                        let mut full = Array::zeros(src.shape());
                        for i in 0..g.rows() {
                            for j in 0..g.cols() {
                                full.set(i, start + j, g.get(i, j));
                            }
                        }
                        acc(*a, full);
                    }
                }
                Op::GatherRows { a, idx } => {
                    if needs(*a) {
                        let src = value(*a);
                        let mut full = Array::zeros(src.shape());
                        let c = src.cols();
                        for (r, &i) in idx.iter().enumerate() {
                            for j in 0..c {
                                let v = full.get(i, j) + g.get(r, j);
                                full.set(i, j, v);
                            }
                        }
                        acc(*a, full);
                    }
                }
                Op::Reshape { a } => {
                    if needs(*a) {
                        acc(*a, g.reshape(value(*a).shape())?);
                    }
                }
                Op::Cholesky { a } => {
                    if needs(*a) {
                        acc(*a, cholesky_backward(&node.value, &g)?);
                    }
                }
                Op::LogDet { a, chol } => {
                    if needs(*a) {
                        let n = chol.rows();
                        let inv = chol.cho_solve(&Array::eye(n))?.symmetrized();
                        acc(*a, inv.scale(g.item()));
                    }
                }
                Op::SolveSpd { a, b, chol } => {
                    let gb = chol.cho_solve(&g)?;
                    if needs(*a) {
                        let ga = gb.matmul(&node.value.transpose())?.scale(-1.0).symmetrized();
                        acc(*a, ga);
                    }
                    if needs(*b) {
                        acc(*b, gb);
                    }
                }
                Op::SolveLower { l, b } => {
                    let gb = value(*l).solve_lower_transpose(&g)?;
                    if needs(*l) {
                        let gl = gb.matmul(&node.value.transpose())?.scale(-1.0).lower_triangle();
                        acc(*l, gl);
                    }
                    if needs(*b) {
                        acc(*b, gb);
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// `L̄ ↦ Ā` for `L = chol(sym(A))`.
fn cholesky_backward(l: &Array, lbar: &Array) -> Result<Array> {
    let n = l.rows();
    // Φ(Lᵀ L̄): lower triangle with halved diagonal.
    let mut p = l.transpose().matmul(lbar)?.lower_triangle();
    for i in 0..n {
        let v = 0.5 * p.get(i, i);
        p.set(i, i, v);
    }
    // L⁻ᵀ P L⁻¹
    let left = l.solve_lower_transpose(&p)?;
    let s = l.solve_lower_transpose(&left.transpose())?.transpose();
    Ok(s.symmetrized())
}

fn apply_local(g: &Array, d: &Local) -> Array {
    match d {
        Local::Const(c) => g.scale(*c),
        Local::Arr(a) => g.zip_map(a, |x, y| x * y).expect("local derivative shape"),
    }
}

/// Sums a gradient in the broadcast output shape back to an operand's shape.
fn reduce_to(g: &Array, shape: &[usize]) -> Array {
    if g.shape() == shape {
        return g.clone();
    }
    let len: usize = shape.iter().product();
    if len == 1 {
        return Array::full(shape, g.sum());
    }
    let (r, c) = (g.rows(), g.cols());
    let mut out = Array::zeros(shape);
    if shape.len() == 2 && shape[0] == 1 && shape[1] == c {
        for i in 0..r {
            for j in 0..c {
                out.data_mut()[j] += g.get(i, j);
            }
        }
    } else {
        // column broadcast [r, 1]
        for i in 0..r {
            for j in 0..c {
                out.data_mut()[i] += g.get(i, j);
            }
        }
    }
    out
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    Scalar,
    Row,
    Col,
}

fn broadcast(op: &'static str, a: &Array, b: &Array) -> Result<(Vec<usize>, Bcast, Bcast)> {
    if a.shape() == b.shape() {
        return Ok((a.shape().to_vec(), Bcast::Same, Bcast::Same));
    }
    // `small` broadcasts into `big`'s shape
    let kind = |small: &Array, big: &Array| -> Option<Bcast> {
        if small.len() == 1 && (big.len() != 1 || !small.is_matrix()) {
            Some(Bcast::Scalar)
        } else if big.is_matrix() && small.is_matrix() {
            if small.rows() == 1 && big.rows() != 1 && small.cols() == big.cols() {
                Some(Bcast::Row)
            } else if small.cols() == 1 && big.cols() != 1 && small.rows() == big.rows() {
                Some(Bcast::Col)
            } else {
                None
            }
        } else {
            None
        }
    };
    if let Some(k) = kind(b, a) {
        return Ok((a.shape().to_vec(), Bcast::Same, k));
    }
    if let Some(k) = kind(a, b) {
        return Ok((b.shape().to_vec(), k, Bcast::Same));
    }
    Err(Error::dim(
        op,
        format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape()),
    ))
}

fn expand(a: &Array, how: Bcast, shape: &[usize]) -> Array {
    match how {
        Bcast::Same => a.clone(),
        Bcast::Scalar => Array::full(shape, a.item()),
        Bcast::Row | Bcast::Col => {
            let (r, c) = (shape[0], shape[1]);
            let mut out = Vec::with_capacity(r * c);
            for i in 0..r {
                for j in 0..c {
                    out.push(if how == Bcast::Row { a.data()[j] } else { a.data()[i] });
                }
            }
            Array::new(shape.to_vec(), out).expect("broadcast shape")
        }
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Array> {
        self.graph.value_of(self.id)
    }

    /// Value of a one-element node.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn rows(&self) -> usize {
        self.value().rows()
    }

    pub fn cols(&self) -> usize {
        self.value().cols()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.needs(self.id)
    }

    fn unary(&self, value: Array, d: impl FnOnce(&Array, &Array) -> Local) -> Var<'g> {
        let rg = self.requires_grad();
        let d = if rg {
            d(&self.value(), &value)
        } else {
            Local::Const(0.0)
        };
        self.graph.push(value, Op::Unary { a: self.id, d }, rg)
    }

    fn binary(
        &self,
        other: &Var<'g>,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        da: impl FnOnce(&Array, &Array) -> Local,
        db: impl FnOnce(&Array, &Array) -> Local,
    ) -> Result<Var<'g>> {
        let (a, b) = (self.value(), other.value());
        let (shape, ka, kb) = broadcast(op, &a, &b)?;
        let ea = expand(&a, ka, &shape);
        let eb = expand(&b, kb, &shape);
        let out = ea.zip_map(&eb, f)?;
        let (ra, rb) = (self.requires_grad(), other.requires_grad());
        let da = if ra { da(&ea, &eb) } else { Local::Const(0.0) };
        let db = if rb { db(&ea, &eb) } else { Local::Const(0.0) };
        Ok(self.graph.push(
            out,
            Op::Binary {
                a: self.id,
                b: other.id,
                da,
                db,
            },
            ra || rb,
        ))
    }

    /// Elementwise sum with scalar / row / column broadcasting.
    pub fn add(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.binary(
            other,
            "add",
            |x, y| x + y,
            |_, _| Local::Const(1.0),
            |_, _| Local::Const(1.0),
        )
    }

    pub fn sub(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.binary(
            other,
            "sub",
            |x, y| x - y,
            |_, _| Local::Const(1.0),
            |_, _| Local::Const(-1.0),
        )
    }

    pub fn mul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.binary(
            other,
            "mul",
            |x, y| x * y,
            |_, b| Local::Arr(b.clone()),
            |a, _| Local::Arr(a.clone()),
        )
    }

    pub fn div(&self, other: &Var<'g>) -> Result<Var<'g>> {
        self.binary(
            other,
            "div",
            |x, y| x / y,
            |_, b| Local::Arr(b.map(|y| 1.0 / y)),
            |a, b| Local::Arr(a.zip_map(b, |x, y| -x / (y * y)).expect("same shape")),
        )
    }

    pub fn neg(&self) -> Var<'g> {
        self.scale(-1.0)
    }

    pub fn scale(&self, c: f64) -> Var<'g> {
        self.unary(self.value().scale(c), |_, _| Local::Const(c))
    }

    pub fn add_scalar(&self, c: f64) -> Var<'g> {
        self.unary(self.value().map(|x| x + c), |_, _| Local::Const(1.0))
    }

    pub fn tanh(&self) -> Var<'g> {
        self.unary(self.value().map(f64::tanh), |_, y| Local::Arr(y.map(|t| 1.0 - t * t)))
    }

    /// Rectifier; the subgradient at zero is zero.
    pub fn relu(&self) -> Var<'g> {
        self.unary(self.value().map(|x| x.max(0.0)), |x, _| {
            Local::Arr(x.map(|v| if v > 0.0 { 1.0 } else { 0.0 }))
        })
    }

    pub fn exp(&self) -> Var<'g> {
        self.unary(self.value().map(f64::exp), |_, y| Local::Arr(y.clone()))
    }

    pub fn ln(&self) -> Var<'g> {
        self.unary(self.value().map(f64::ln), |x, _| Local::Arr(x.map(|v| 1.0 / v)))
    }

    pub fn sqrt(&self) -> Var<'g> {
        self.unary(self.value().map(f64::sqrt), |_, y| Local::Arr(y.map(|v| 0.5 / v)))
    }

    pub fn square(&self) -> Var<'g> {
        self.unary(self.value().map(|x| x * x), |x, _| Local::Arr(x.scale(2.0)))
    }

    /// Elementwise map with a caller-supplied derivative.
    pub fn map_with_derivative(&self, f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64) -> Var<'g> {
        self.unary(self.value().map(f), |x, _| Local::Arr(x.map(df)))
    }

    pub fn matmul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let out = self.value().matmul(&other.value())?;
        Ok(self.graph.push(
            out,
            Op::MatMul {
                a: self.id,
                b: other.id,
            },
            self.requires_grad() || other.requires_grad(),
        ))
    }

    pub fn t(&self) -> Var<'g> {
        let v = self.value();
        let out = if v.is_matrix() { v.transpose() } else { (*v).clone() };
        self.graph.push(out, Op::Transpose { a: self.id }, self.requires_grad())
    }

    pub fn sum(&self) -> Var<'g> {
        let s = self.value().sum();
        self.graph
            .push(Array::scalar(s), Op::Sum { a: self.id }, self.requires_grad())
    }

    pub fn hcat(parts: &[Var<'g>]) -> Result<Var<'g>> {
        let g = parts.first().ok_or_else(|| Error::dim("hcat", "no parts"))?.graph;
        let values: Vec<_> = parts.iter().map(Var::value).collect();
        let refs: Vec<&Array> = values.iter().map(|v| &**v).collect();
        let out = Array::hcat(&refs)?;
        let rg = parts.iter().any(Var::requires_grad);
        Ok(g.push(
            out,
            Op::HCat {
                parts: parts.iter().map(|p| p.id).collect(),
            },
            rg,
        ))
    }

    pub fn vcat(parts: &[Var<'g>]) -> Result<Var<'g>> {
        let g = parts.first().ok_or_else(|| Error::dim("vcat", "no parts"))?.graph;
        let values: Vec<_> = parts.iter().map(Var::value).collect();
        let refs: Vec<&Array> = values.iter().map(|v| &**v).collect();
        let out = Array::vcat(&refs)?;
        let rg = parts.iter().any(Var::requires_grad);
        Ok(g.push(
            out,
            Op::VCat {
                parts: parts.iter().map(|p| p.id).collect(),
            },
            rg,
        ))
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var<'g>> {
        let v = self.value();
        if start > end || end > v.cols() || !v.is_matrix() {
            return Err(Error::dim("slice_cols", format!("{start}..{end} of {:?}", v.shape())));
        }
        let out = v.select_cols(start, end);
        Ok(self
            .graph
            .push(out, Op::SliceCols { a: self.id, start }, self.requires_grad()))
    }

    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<'g>> {
        let v = self.value();
        if idx.iter().any(|&i| i >= v.rows()) || !v.is_matrix() {
            return Err(Error::dim("gather_rows", format!("index out of {:?}", v.shape())));
        }
        let out = v.select_rows(idx);
        Ok(self.graph.push(
            out,
            Op::GatherRows {
                a: self.id,
                idx: idx.to_vec(),
            },
            self.requires_grad(),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g>> {
        let out = self.value().reshape(shape)?;
        Ok(self.graph.push(out, Op::Reshape { a: self.id }, self.requires_grad()))
    }

    /// Lower Cholesky factor of the symmetric part.
    pub fn cholesky(&self) -> Result<Var<'g>> {
        let l = self.value().cholesky()?;
        Ok(self.graph.push(l, Op::Cholesky { a: self.id }, self.requires_grad()))
    }

    /// `log |A|` for symmetric positive-definite `A`.
    pub fn logdet_spd(&self) -> Result<Var<'g>> {
        let chol = self.value().cholesky()?;
        let ld = 2.0 * chol.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Ok(self
            .graph
            .push(Array::scalar(ld), Op::LogDet { a: self.id, chol }, self.requires_grad()))
    }

    /// `A⁻¹ B` for symmetric positive-definite `A = self`.
    pub fn solve_spd(&self, b: &Var<'g>) -> Result<Var<'g>> {
        let chol = self.value().cholesky()?;
        let x = chol.cho_solve(&b.value())?;
        Ok(self.graph.push(
            x,
            Op::SolveSpd {
                a: self.id,
                b: b.id,
                chol,
            },
            self.requires_grad() || b.requires_grad(),
        ))
    }

    /// `L⁻¹ B` for lower-triangular `L = self`.
    pub fn solve_lower(&self, b: &Var<'g>) -> Result<Var<'g>> {
        let x = self.value().solve_lower(&b.value())?;
        Ok(self.graph.push(
            x,
            Op::SolveLower { l: self.id, b: b.id },
            self.requires_grad() || b.requires_grad(),
        ))
    }
}

/// Result of a backward sweep: `∂loss/∂leaf` for every differentiable leaf.
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    pub fn get(&self, v: &Var<'_>) -> Option<&Array> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient of a leaf, zeros if the loss does not depend on it.
    pub fn wrt(&self, v: &Var<'_>) -> Array {
        self.get(v).cloned().unwrap_or_else(|| Array::zeros(v.value().shape()))
    }
}
