//! Tape-based reverse-mode autodiff over 2D double-precision arrays.
//!
//! Values are computed eagerly on the forward pass; `backward` walks the
//! tape in reverse creation order. Forward kernels are shared with the
//! graph-free inference path so both produce bitwise-identical values.

use ndarray::{Array2, Axis};

use crate::error::{ItoError, Result};

/// Handle into one graph's tape. Ids from different graphs must not be mixed;
/// shapes are validated per op, provenance is the caller's responsibility.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

impl NodeId {
    /// Position in the node arena; indexes the slots `backward` returns.
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    /// a: n×m plus row vector b: 1×m.
    AddRow(NodeId, NodeId),
    /// a: n×m plus column vector b: n×1.
    AddCol(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Silu(NodeId),
    SoftmaxRows(NodeId),
    Sqrt(NodeId),
    Exp(NodeId),
    Sum(NodeId),
    MeanAll(NodeId),
    RowSums(NodeId),
    Gather(NodeId, Vec<usize>),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    Reshape(NodeId),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

/// Shared forward kernels.
pub mod kernels {
    use super::*;

    pub fn silu(x: &Array2<f64>) -> Array2<f64> {
        x.mapv(|v| v * sigmoid(v))
    }

    pub fn sigmoid(v: f64) -> f64 {
        1.0 / (1.0 + (-v).exp())
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, v| m.max(*v));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        out
    }
}

pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn check_live(&self) -> Result<()> {
        if self.consumed {
            Err(ItoError::GraphConsumed)
        } else {
            Ok(())
        }
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn shape_err(&self, what: &str, expected: String, id: NodeId) -> ItoError {
        let s = self.nodes[id.0].value.shape();
        ItoError::ShapeMismatch {
            what: what.to_string(),
            expected,
            got: format!("{} x {}", s[0], s[1]),
        }
    }

    /// Input or parameter node. `requires_grad` marks parameters.
    pub fn leaf(&mut self, value: Array2<f64>, requires_grad: bool) -> Result<NodeId> {
        self.check_live()?;
        Ok(self.push(value, Op::Leaf, requires_grad))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_live()?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.ncols() != vb.nrows() {
            return Err(self.shape_err("matmul rhs", format!("{} rows", va.ncols()), b));
        }
        let value = va.dot(vb);
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Matmul(a, b), rg))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_live()?;
        let value = self.nodes[a.0].value.t().to_owned();
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    fn binary_same_shape(&mut self, a: NodeId, b: NodeId, sub: bool) -> Result<NodeId> {
        self.check_live()?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            let expected = format!("{} x {}", va.nrows(), va.ncols());
            return Err(self.shape_err("elementwise rhs", expected, b));
        }
        let value = if sub { va - vb } else { va + vb };
        let rg = self.needs(&[a, b]);
        let op = if sub { Op::Sub(a, b) } else { Op::Add(a, b) };
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, false)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, true)
    }

    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_live()?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if vb.nrows() != 1 || vb.ncols() != va.ncols() {
            return Err(self.shape_err("row broadcast", format!("1 x {}", va.ncols()), b));
        }
        let value = va + vb;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::AddRow(a, b), rg))
    }

    pub fn add_col(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_live()?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if vb.ncols() != 1 || vb.nrows() != va.nrows() {
            return Err(self.shape_err("column broadcast", format!("{} x 1", va.nrows()), b));
        }
        let value = va + vb;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::AddCol(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_live()?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            let expected = format!("{} x {}", va.nrows(), va.ncols());
            return Err(self.shape_err("elementwise rhs", expected, b));
        }
        let value = va * vb;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.check_live()?;
        let value = &self.nodes[a.0].value * c;
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Scale(a, c), rg))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.check_live()?;
        let value = &self.nodes[a.0].value + c;
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::AddScalar(a), rg))
    }

    pub fn silu(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_live()?;
        let value = kernels::silu(&self.nodes[a.0].value);
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Silu(a), rg))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_live()?;
        let value = kernels::softmax_rows(&self.nodes[a.0].value);
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::SoftmaxRows(a), rg))
    }

    /// Elementwise square root; inputs must be strictly positive for a
    /// finite gradient.
    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_live()?;
        let value = self.nodes[a.0].value.mapv(f64::sqrt);
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Sqrt(a), rg))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_live()?;
        let value = self.nodes[a.0].value.mapv(f64::exp);
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Exp(a), rg))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_live()?;
        let value = Array2::from_elem((1, 1), self.nodes[a.0].value.sum());
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Sum(a), rg))
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_live()?;
        let v = &self.nodes[a.0].value;
        let value = Array2::from_elem((1, 1), v.sum() / v.len() as f64);
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::MeanAll(a), rg))
    }

    pub fn row_sums(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_live()?;
        let v = &self.nodes[a.0].value;
        let value = v
            .sum_axis(Axis(1))
            .into_shape_with_order((v.nrows(), 1))
            .expect("row sums shape");
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::RowSums(a), rg))
    }

    /// Row gather with scatter-add backward; the embedding-lookup primitive.
    pub fn gather(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        self.check_live()?;
        let v = &self.nodes[table.0].value;
        if let Some(&bad) = indices.iter().find(|&&i| i >= v.nrows()) {
            return Err(ItoError::InvalidInput(format!(
                "gather index {bad} out of range for table with {} rows",
                v.nrows()
            )));
        }
        let mut value = Array2::zeros((indices.len(), v.ncols()));
        for (k, &i) in indices.iter().enumerate() {
            value.row_mut(k).assign(&v.row(i));
        }
        let rg = self.needs(&[table]);
        Ok(self.push(value, Op::Gather(table, indices.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.check_live()?;
        if parts.is_empty() {
            return Err(ItoError::EmptyInput("concat_cols with no parts".to_string()));
        }
        let n = self.nodes[parts[0].0].value.nrows();
        let mut width = 0;
        for p in parts {
            let v = &self.nodes[p.0].value;
            if v.nrows() != n {
                return Err(self.shape_err("concat part", format!("{n} rows"), *p));
            }
            width += v.ncols();
        }
        let mut value = Array2::zeros((n, width));
        let mut col = 0;
        for p in parts {
            let v = &self.nodes[p.0].value;
            value
                .slice_mut(ndarray::s![.., col..col + v.ncols()])
                .assign(v);
            col += v.ncols();
        }
        let rg = self.needs(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.check_live()?;
        let v = &self.nodes[a.0].value;
        if start + len > v.ncols() {
            return Err(ItoError::InvalidInput(format!(
                "slice {start}..{} out of range for {} columns",
                start + len,
                v.ncols()
            )));
        }
        let value = v.slice(ndarray::s![.., start..start + len]).to_owned();
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::SliceCols(a, start, len), rg))
    }

    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        self.check_live()?;
        let v = &self.nodes[a.0].value;
        if v.len() != rows * cols {
            return Err(ItoError::ShapeMismatch {
                what: "reshape".to_string(),
                expected: format!("{} elements", v.len()),
                got: format!("{rows} x {cols}"),
            });
        }
        let value = Array2::from_shape_vec((rows, cols), v.iter().copied().collect())
            .expect("element count checked");
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Reverse pass from a scalar node. Returns one gradient slot per node
    /// id; `None` for nodes the loss does not depend on (or that do not
    /// require gradients). The graph is consumed.
    pub fn backward(&mut self, loss: NodeId) -> Result<Vec<Option<Array2<f64>>>> {
        self.check_live()?;
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(ItoError::ShapeMismatch {
                what: "backward loss".to_string(),
                expected: "1 x 1".to_string(),
                got: format!("{} x {}", lv.nrows(), lv.ncols()),
            });
        }
        self.consumed = true;

        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &self.nodes[idx].op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                op => {
                    let op = op.clone();
                    self.propagate(&op, idx, &g, &mut grads);
                }
            }
        }

        Ok(grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                if matches!(self.nodes[i].op, Op::Leaf) && self.nodes[i].requires_grad {
                    g
                } else {
                    None
                }
            })
            .collect())
    }

    fn accumulate(grads: &mut [Option<Array2<f64>>], id: NodeId, delta: Array2<f64>) {
        match &mut grads[id.0] {
            Some(g) => *g += &delta,
            slot => *slot = Some(delta),
        }
    }

    fn propagate(
        &self,
        op: &Op,
        idx: usize,
        g: &Array2<f64>,
        grads: &mut [Option<Array2<f64>>],
    ) {
        let out = &self.nodes[idx].value;
        let needs = |id: &NodeId| self.nodes[id.0].requires_grad;
        match op {
            Op::Leaf => unreachable!("leaves handled by caller"),
            Op::Matmul(a, b) => {
                if needs(a) {
                    let vb = &self.nodes[b.0].value;
                    Self::accumulate(grads, *a, g.dot(&vb.t()));
                }
                if needs(b) {
                    let va = &self.nodes[a.0].value;
                    Self::accumulate(grads, *b, va.t().dot(g));
                }
            }
            Op::Transpose(a) => {
                if needs(a) {
                    Self::accumulate(grads, *a, g.t().to_owned());
                }
            }
            Op::Add(a, b) => {
                if needs(a) {
                    Self::accumulate(grads, *a, g.clone());
                }
                if needs(b) {
                    Self::accumulate(grads, *b, g.clone());
                }
            }
            Op::AddRow(a, b) => {
                if needs(a) {
                    Self::accumulate(grads, *a, g.clone());
                }
                if needs(b) {
                    let col_sum = g
                        .sum_axis(Axis(0))
                        .into_shape_with_order((1, g.ncols()))
                        .expect("row grad shape");
                    Self::accumulate(grads, *b, col_sum);
                }
            }
            Op::AddCol(a, b) => {
                if needs(a) {
                    Self::accumulate(grads, *a, g.clone());
                }
                if needs(b) {
                    let row_sum = g
                        .sum_axis(Axis(1))
                        .into_shape_with_order((g.nrows(), 1))
                        .expect("col grad shape");
                    Self::accumulate(grads, *b, row_sum);
                }
            }
            Op::Sub(a, b) => {
                if needs(a) {
                    Self::accumulate(grads, *a, g.clone());
                }
                if needs(b) {
                    Self::accumulate(grads, *b, -g);
                }
            }
            Op::Mul(a, b) => {
                if needs(a) {
                    Self::accumulate(grads, *a, g * &self.nodes[b.0].value);
                }
                if needs(b) {
                    Self::accumulate(grads, *b, g * &self.nodes[a.0].value);
                }
            }
            Op::Scale(a, c) => {
                if needs(a) {
                    Self::accumulate(grads, *a, g * *c);
                }
            }
            Op::AddScalar(a) => {
                if needs(a) {
                    Self::accumulate(grads, *a, g.clone());
                }
            }
            Op::Silu(a) => {
                if needs(a) {
                    let x = &self.nodes[a.0].value;
                    let dx = x.mapv(|v| {
                        let s = kernels::sigmoid(v);
                        s * (1.0 + v * (1.0 - s))
                    });
                    Self::accumulate(grads, *a, g * &dx);
                }
            }
            Op::SoftmaxRows(a) => {
                if needs(a) {
                    let y = out;
                    let mut dx = g * y;
                    for (mut row, yrow) in dx.rows_mut().into_iter().zip(y.rows()) {
                        let dot: f64 = row.sum();
                        for (r, yv) in row.iter_mut().zip(yrow) {
                            *r -= dot * yv;
                        }
                    }
                    Self::accumulate(grads, *a, dx);
                }
            }
            Op::Sqrt(a) => {
                if needs(a) {
                    let dx = g / &(out * 2.0);
                    Self::accumulate(grads, *a, dx);
                }
            }
            Op::Exp(a) => {
                if needs(a) {
                    Self::accumulate(grads, *a, g * out);
                }
            }
            Op::Sum(a) => {
                if needs(a) {
                    let v = &self.nodes[a.0].value;
                    Self::accumulate(grads, *a, Array2::from_elem(v.raw_dim(), g[[0, 0]]));
                }
            }
            Op::MeanAll(a) => {
                if needs(a) {
                    let v = &self.nodes[a.0].value;
                    let scale = g[[0, 0]] / v.len() as f64;
                    Self::accumulate(grads, *a, Array2::from_elem(v.raw_dim(), scale));
                }
            }
            Op::RowSums(a) => {
                if needs(a) {
                    let v = &self.nodes[a.0].value;
                    let mut dx = Array2::zeros(v.raw_dim());
                    for (mut row, gv) in dx.rows_mut().into_iter().zip(g.column(0)) {
                        row.fill(*gv);
                    }
                    Self::accumulate(grads, *a, dx);
                }
            }
            Op::Gather(table, indices) => {
                if needs(table) {
                    let v = &self.nodes[table.0].value;
                    let mut dt = Array2::zeros(v.raw_dim());
                    for (k, &i) in indices.iter().enumerate() {
                        let mut row = dt.row_mut(i);
                        row += &g.row(k);
                    }
                    Self::accumulate(grads, *table, dt);
                }
            }
            Op::ConcatCols(parts) => {
                let mut col = 0;
                for p in parts {
                    let w = self.nodes[p.0].value.ncols();
                    if needs(p) {
                        let dp = g.slice(ndarray::s![.., col..col + w]).to_owned();
                        Self::accumulate(grads, *p, dp);
                    }
                    col += w;
                }
            }
            Op::SliceCols(a, start, len) => {
                if needs(a) {
                    let v = &self.nodes[a.0].value;
                    let mut da = Array2::zeros(v.raw_dim());
                    da.slice_mut(ndarray::s![.., *start..start + len]).assign(g);
                    Self::accumulate(grads, *a, da);
                }
            }
            Op::Reshape(a) => {
                if needs(a) {
                    let v = &self.nodes[a.0].value;
                    let da = Array2::from_shape_vec(v.raw_dim(), g.iter().copied().collect())
                        .expect("reshape grad shape");
                    Self::accumulate(grads, *a, da);
                }
            }
        }
    }
}
