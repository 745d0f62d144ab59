//! Minimal reverse-mode gradient tape over [`Tensor`] values.
//!
//! Every primitive appends one node holding its forward value and the ids
//! of its inputs. Inputs always precede their consumers, so a single
//! reverse sweep over the node list visits each record once.

use std::collections::BTreeMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    PoolTokens(Var),
    PoolFeatures(Var),
    ConcatCols(Var, Var),
    ConcatRows(Vec<Var>),
    Transpose(Var),
    Reshape(Var),
    SliceCols(Var, usize),
    Row(Var, usize),
    AddRow(Var, Var),
    Square(Var),
    Mean(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Append-only record of a forward pass.
#[derive(Default)]
pub struct GradTape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

/// Result of a backward sweep.
pub struct Gradients {
    per_node: Vec<Option<Tensor>>,
    shapes: Vec<[usize; 2]>,
    params: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient with respect to any node; zero if the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.per_node[v.0] {
            Some(g) => g.clone(),
            None => {
                let [r, c] = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.params
    }
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Untracked input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Tracked learnable input; its gradient is reported under `name`.
    pub fn param(&mut self, name: impl Into<String>, t: Tensor) -> Var {
        let v = self.push(t, Op::Leaf);
        self.params.push((name.into(), v));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s))
    }

    /// `a + s` elementwise.
    pub fn shift(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v + s);
        self.push(out, Op::Shift(a))
    }

    /// `1 - a` elementwise.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.shift(neg, 1.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).sigmoid();
        self.push(out, Op::Sigmoid(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = self.value(a).softmax_rows();
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn mean_pool_tokens(&mut self, a: Var) -> Var {
        let out = self.value(a).mean_pool_tokens();
        self.push(out, Op::PoolTokens(a))
    }

    pub fn mean_pool_features(&mut self, a: Var) -> Var {
        let out = self.value(a).mean_pool_features();
        self.push(out, Op::PoolFeatures(a))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).concat_cols(self.value(b))?;
        Ok(self.push(out, Op::ConcatCols(a, b)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&values)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let out = self.value(a).reshape(rows, cols)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(a).slice_cols(start, len)?;
        Ok(self.push(out, Op::SliceCols(a, start)))
    }

    pub fn row(&mut self, a: Var, r: usize) -> Result<Var> {
        let out = self.value(a).row_tensor(r)?;
        Ok(self.push(out, Op::Row(a, r)))
    }

    /// Broadcast-add a `1 × D` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.value(a).add_row(self.value(row))?;
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v * v);
        self.push(out, Op::Square(a))
    }

    /// Mean of all elements, as a `1 × 1` node.
    pub fn mean(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).mean());
        self.push(out, Op::Mean(a))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != [1, 1] {
            return Err(Error::Contract(format!(
                "backward needs a 1x1 loss, got {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let ga = g.matmul(&bv.transpose())?;
                    let gb = av.transpose().matmul(&g)?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.scale(-1.0));
                }
                Op::Mul(a, b) => {
                    let ga = g.mul(self.value(*b))?;
                    let gb = g.mul(self.value(*a))?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.scale(*s)),
                Op::Shift(a) => accumulate(&mut grads, *a, g.clone()),
                Op::Sigmoid(a) => {
                    let ga = g.zip_with(&node.value, "sigmoid", |g, y| g * y * (1.0 - y))?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let cols = y.cols();
                    let mut ga = vec![0.0; y.len()];
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let inner: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for c in 0..cols {
                            ga[r * cols + c] = yr[c] * (gr[c] - inner);
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::raw(y.rows(), cols, ga));
                }
                Op::PoolTokens(a) => {
                    let [rows, cols] = self.value(*a).shape();
                    let inv = 1.0 / rows as f64;
                    let row: Vec<f64> = g.data().iter().map(|v| v * inv).collect();
                    let data = row.iter().copied().cycle().take(rows * cols).collect();
                    accumulate(&mut grads, *a, Tensor::raw(rows, cols, data));
                }
                Op::PoolFeatures(a) => {
                    let [rows, cols] = self.value(*a).shape();
                    let inv = 1.0 / cols as f64;
                    let mut data = Vec::with_capacity(rows * cols);
                    for &gv in g.data() {
                        data.extend(std::iter::repeat(gv * inv).take(cols));
                    }
                    accumulate(&mut grads, *a, Tensor::raw(rows, cols, data));
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.value(*a).cols();
                    let cb = self.value(*b).cols();
                    accumulate(&mut grads, *a, g.slice_cols(0, ca)?);
                    accumulate(&mut grads, *b, g.slice_cols(ca, cb)?);
                }
                Op::ConcatRows(parts) => {
                    let cols = g.cols();
                    let mut offset = 0;
                    for p in parts {
                        let rows = self.value(*p).rows();
                        let chunk = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                        accumulate(&mut grads, *p, Tensor::raw(rows, cols, chunk));
                        offset += rows;
                    }
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()),
                Op::Reshape(a) => {
                    let [r, c] = self.value(*a).shape();
                    accumulate(&mut grads, *a, g.reshape(r, c)?);
                }
                Op::SliceCols(a, start) => {
                    let [rows, cols] = self.value(*a).shape();
                    let len = g.cols();
                    let mut data = vec![0.0; rows * cols];
                    for r in 0..rows {
                        data[r * cols + start..r * cols + start + len].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *a, Tensor::raw(rows, cols, data));
                }
                Op::Row(a, r) => {
                    let [rows, cols] = self.value(*a).shape();
                    let mut data = vec![0.0; rows * cols];
                    data[r * cols..(r + 1) * cols].copy_from_slice(g.data());
                    accumulate(&mut grads, *a, Tensor::raw(rows, cols, data));
                }
                Op::AddRow(a, row) => {
                    let pooled = g.mean_pool_tokens().scale(g.rows() as f64);
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *row, pooled);
                }
                Op::Square(a) => {
                    let ga = g.zip_with(self.value(*a), "square", |g, x| 2.0 * g * x)?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Mean(a) => {
                    let [r, c] = self.value(*a).shape();
                    let v = g.data()[0] / (r * c) as f64;
                    accumulate(&mut grads, *a, Tensor::full(r, c, v));
                }
            }
            grads[i] = Some(g);
        }

        let mut params = BTreeMap::new();
        for (name, v) in &self.params {
            let [r, c] = self.value(*v).shape();
            let g = grads[v.0].clone().unwrap_or_else(|| Tensor::zeros(r, c));
            params
                .entry(name.clone())
                .and_modify(|acc: &mut Tensor| acc.add_assign(&g))
                .or_insert(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients {
            per_node: grads,
            shapes,
            params,
        })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
