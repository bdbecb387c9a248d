//! Forward passes written once against an op trait and interpreted twice:
//! once building the autodiff graph, once evaluating arrays directly. The
//! two interpreters share formulas, so their outputs agree bitwise.

use std::borrow::Cow;
use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView2};

use crate::autodiff::{kernels, Graph, NodeId};
use crate::conditioning::{
    sinusoidal_encode, Annotations, ConditionInputs, FeatureLayout, SinusoidalSpec,
};
use crate::error::{ItoError, Result};
use crate::model::{GradientSet, ModelConfig, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Net {
    Fc,
    Fv,
}

impl Net {
    pub fn prefix(self) -> &'static str {
        match self {
            Net::Fc => "fc",
            Net::Fv => "fv",
        }
    }

    fn n_layers(self, config: &ModelConfig) -> usize {
        match self {
            Net::Fc => config.n_layers_fc,
            Net::Fv => config.n_layers_fv,
        }
    }
}

/// The op vocabulary the forward passes are written in.
pub trait Ops {
    type T: Clone;

    fn param(&mut self, name: &str) -> Result<Self::T>;
    fn constant(&mut self, value: Array2<f64>) -> Result<Self::T>;
    fn matmul(&mut self, a: &Self::T, b: &Self::T) -> Result<Self::T>;
    fn transpose(&mut self, a: &Self::T) -> Result<Self::T>;
    fn add(&mut self, a: &Self::T, b: &Self::T) -> Result<Self::T>;
    fn add_row(&mut self, a: &Self::T, b: &Self::T) -> Result<Self::T>;
    fn scale(&mut self, a: &Self::T, c: f64) -> Result<Self::T>;
    fn silu(&mut self, a: &Self::T) -> Result<Self::T>;
    fn softmax_rows(&mut self, a: &Self::T) -> Result<Self::T>;
    fn slice_cols(&mut self, a: &Self::T, start: usize, len: usize) -> Result<Self::T>;
    fn concat_cols(&mut self, parts: &[Self::T]) -> Result<Self::T>;
    fn reshape(&mut self, a: &Self::T, rows: usize, cols: usize) -> Result<Self::T>;
    fn gather(&mut self, table: &Self::T, indices: &[usize]) -> Result<Self::T>;
    fn check_finite(&self, a: &Self::T, location: &str) -> Result<()>;
}

/// Parameter leaves registered in a graph, by tensor name.
pub struct ParamNodes {
    map: BTreeMap<String, NodeId>,
}

impl ParamNodes {
    pub fn register(graph: &mut Graph, params: &ModelParams) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (name, tensor) in params.tensors() {
            map.insert(name.clone(), graph.leaf(tensor.clone(), true)?);
        }
        Ok(ParamNodes { map })
    }

    pub fn node(&self, name: &str) -> Result<NodeId> {
        self.map.get(name).copied().ok_or_else(|| {
            ItoError::InvalidInput(format!("parameter '{name}' was not registered"))
        })
    }

    /// Maps the per-node gradient slots from `Graph::backward` back onto
    /// tensor names. Parameters the loss never touched get zero gradients.
    pub fn collect_gradients(
        &self,
        params: &ModelParams,
        grads: &[Option<Array2<f64>>],
    ) -> Result<GradientSet> {
        let mut out = BTreeMap::new();
        for (name, id) in &self.map {
            let tensor = params.tensor(name)?;
            let g = grads
                .get(id.index())
                .and_then(|slot| slot.clone())
                .unwrap_or_else(|| Array2::zeros(tensor.raw_dim()));
            if g.raw_dim() != tensor.raw_dim() {
                return Err(ItoError::ShapeMismatch {
                    what: format!("gradient '{name}'"),
                    expected: format!("{} x {}", tensor.nrows(), tensor.ncols()),
                    got: format!("{} x {}", g.nrows(), g.ncols()),
                });
            }
            out.insert(name.clone(), g);
        }
        Ok(GradientSet { tensors: out })
    }
}

/// Graph-building interpreter.
pub struct GraphOps<'g> {
    pub graph: &'g mut Graph,
    pub nodes: &'g ParamNodes,
}

impl Ops for GraphOps<'_> {
    type T = NodeId;

    fn param(&mut self, name: &str) -> Result<NodeId> {
        self.nodes.node(name)
    }
    fn constant(&mut self, value: Array2<f64>) -> Result<NodeId> {
        self.graph.leaf(value, false)
    }
    fn matmul(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        self.graph.matmul(*a, *b)
    }
    fn transpose(&mut self, a: &NodeId) -> Result<NodeId> {
        self.graph.transpose(*a)
    }
    fn add(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        self.graph.add(*a, *b)
    }
    fn add_row(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        self.graph.add_row(*a, *b)
    }
    fn scale(&mut self, a: &NodeId, c: f64) -> Result<NodeId> {
        self.graph.scale(*a, c)
    }
    fn silu(&mut self, a: &NodeId) -> Result<NodeId> {
        self.graph.silu(*a)
    }
    fn softmax_rows(&mut self, a: &NodeId) -> Result<NodeId> {
        self.graph.softmax_rows(*a)
    }
    fn slice_cols(&mut self, a: &NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.graph.slice_cols(*a, start, len)
    }
    fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.graph.concat_cols(parts)
    }
    fn reshape(&mut self, a: &NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        self.graph.reshape(*a, rows, cols)
    }
    fn gather(&mut self, table: &NodeId, indices: &[usize]) -> Result<NodeId> {
        self.graph.gather(*table, indices)
    }
    fn check_finite(&self, _a: &NodeId, _location: &str) -> Result<()> {
        // Training checks the final loss; intermediate checks would force
        // value reads during graph construction for no benefit.
        Ok(())
    }
}

/// Direct-evaluation interpreter. Parameters are borrowed, op results owned,
/// so repeated inference never copies the weights.
pub struct ValueOps<'p> {
    params: &'p ModelParams,
}

impl<'p> ValueOps<'p> {
    pub fn new(params: &'p ModelParams) -> Self {
        ValueOps { params }
    }
}

fn value_shape_err(what: &str, expected: String, got: &Array2<f64>) -> ItoError {
    ItoError::ShapeMismatch {
        what: what.to_string(),
        expected,
        got: format!("{} x {}", got.nrows(), got.ncols()),
    }
}

impl<'p> Ops for ValueOps<'p> {
    type T = Cow<'p, Array2<f64>>;

    fn param(&mut self, name: &str) -> Result<Self::T> {
        Ok(Cow::Borrowed(self.params.tensor(name)?))
    }
    fn constant(&mut self, value: Array2<f64>) -> Result<Self::T> {
        Ok(Cow::Owned(value))
    }
    fn matmul(&mut self, a: &Self::T, b: &Self::T) -> Result<Self::T> {
        let (va, vb) = (a.as_ref(), b.as_ref());
        if va.ncols() != vb.nrows() {
            return Err(value_shape_err("matmul rhs", format!("{} rows", va.ncols()), vb));
        }
        Ok(Cow::Owned(va.dot(vb)))
    }
    fn transpose(&mut self, a: &Self::T) -> Result<Self::T> {
        Ok(Cow::Owned(a.as_ref().t().to_owned()))
    }
    fn add(&mut self, a: &Self::T, b: &Self::T) -> Result<Self::T> {
        let (va, vb) = (a.as_ref(), b.as_ref());
        if va.shape() != vb.shape() {
            let expected = format!("{} x {}", va.nrows(), va.ncols());
            return Err(value_shape_err("elementwise rhs", expected, vb));
        }
        Ok(Cow::Owned(va + vb))
    }
    fn add_row(&mut self, a: &Self::T, b: &Self::T) -> Result<Self::T> {
        let (va, vb) = (a.as_ref(), b.as_ref());
        if vb.nrows() != 1 || vb.ncols() != va.ncols() {
            return Err(value_shape_err(
                "row broadcast",
                format!("1 x {}", va.ncols()),
                vb,
            ));
        }
        Ok(Cow::Owned(va + vb))
    }
    fn scale(&mut self, a: &Self::T, c: f64) -> Result<Self::T> {
        Ok(Cow::Owned(a.as_ref() * c))
    }
    fn silu(&mut self, a: &Self::T) -> Result<Self::T> {
        Ok(Cow::Owned(kernels::silu(a.as_ref())))
    }
    fn softmax_rows(&mut self, a: &Self::T) -> Result<Self::T> {
        Ok(Cow::Owned(kernels::softmax_rows(a.as_ref())))
    }
    fn slice_cols(&mut self, a: &Self::T, start: usize, len: usize) -> Result<Self::T> {
        let v = a.as_ref();
        if start + len > v.ncols() {
            return Err(ItoError::InvalidInput(format!(
                "slice {start}..{} out of range for {} columns",
                start + len,
                v.ncols()
            )));
        }
        Ok(Cow::Owned(v.slice(ndarray::s![.., start..start + len]).to_owned()))
    }
    fn concat_cols(&mut self, parts: &[Self::T]) -> Result<Self::T> {
        if parts.is_empty() {
            return Err(ItoError::EmptyInput("concat_cols with no parts".to_string()));
        }
        let n = parts[0].as_ref().nrows();
        let mut width = 0;
        for p in parts {
            let v = p.as_ref();
            if v.nrows() != n {
                return Err(value_shape_err("concat part", format!("{n} rows"), v));
            }
            width += v.ncols();
        }
        let mut value = Array2::zeros((n, width));
        let mut col = 0;
        for p in parts {
            let v = p.as_ref();
            value
                .slice_mut(ndarray::s![.., col..col + v.ncols()])
                .assign(v);
            col += v.ncols();
        }
        Ok(Cow::Owned(value))
    }
    fn reshape(&mut self, a: &Self::T, rows: usize, cols: usize) -> Result<Self::T> {
        let v = a.as_ref();
        if v.len() != rows * cols {
            return Err(ItoError::ShapeMismatch {
                what: "reshape".to_string(),
                expected: format!("{} elements", v.len()),
                got: format!("{rows} x {cols}"),
            });
        }
        let value = Array2::from_shape_vec((rows, cols), v.iter().copied().collect())
            .expect("element count checked");
        Ok(Cow::Owned(value))
    }
    fn gather(&mut self, table: &Self::T, indices: &[usize]) -> Result<Self::T> {
        let v = table.as_ref();
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
        Ok(Cow::Owned(value))
    }
    fn check_finite(&self, a: &Self::T, location: &str) -> Result<()> {
        if a.as_ref().iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(ItoError::NonFinite {
                location: location.to_string(),
                detail: "non-finite activation".to_string(),
            })
        }
    }
}

fn s_time_spec(config: &ModelConfig) -> SinusoidalSpec {
    // Flow time lives in [0, 1]; period chosen so the slowest channel spans it.
    SinusoidalSpec {
        dim: config.s_sin_dim,
        max_period: 2.0,
    }
}

pub(crate) fn tile_row(row: &Array1<f64>, n: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, row.len()), |(_, j)| row[j])
}

/// Radial-basis expansion of all pairwise distances (rows in i-major,
/// j-minor order to match an n x n reshape) plus the clamped signed
/// sequence separation channel.
pub(crate) fn pair_feature_matrices(
    config: &ModelConfig,
    x: &ArrayView2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let n = x.nrows();
    let bins = config.rbf_bins;
    let spacing = config.r_max / (bins.max(2) - 1) as f64;
    let mut rbf = Array2::zeros((n * n, bins));
    let mut sep = Array2::zeros((n * n, 1));
    for i in 0..n {
        for j in 0..n {
            let mut d2 = 0.0;
            for k in 0..x.ncols() {
                let t = x[[i, k]] - x[[j, k]];
                d2 += t * t;
            }
            let d = d2.sqrt();
            let row = i * n + j;
            for b in 0..bins {
                let t = (d - spacing * b as f64) / spacing;
                rbf[[row, b]] = (-0.5 * t * t).exp();
            }
            sep[[row, 0]] = (j as isize - i as isize).clamp(-8, 8) as f64 / 8.0;
        }
    }
    (rbf, sep)
}

/// Conditioning inputs reduced to table indices and encoded rows, the form
/// both interpreters consume. Validation mirrors the plain assembly path.
pub(crate) struct ResolvedInputs {
    token_indices: Vec<usize>,
    dt_enc: Array1<f64>,
    temp_enc: Array1<f64>,
    external: Option<Array2<f64>>,
    s_idx: Option<usize>,
    c_idx: Option<usize>,
}

fn index_in(vocab: &[String], token: &str, name: &str) -> Result<usize> {
    vocab
        .iter()
        .position(|t| t == token)
        .ok_or_else(|| ItoError::UnknownToken {
            token: token.to_string(),
            vocabulary: name.to_string(),
        })
}

pub(crate) fn resolve_inputs(
    layout: &FeatureLayout,
    inputs: &ConditionInputs,
    n: usize,
) -> Result<ResolvedInputs> {
    if inputs.tokens.len() != n {
        return Err(ItoError::ShapeMismatch {
            what: "conditioning tokens".to_string(),
            expected: format!("{n} tokens"),
            got: format!("{}", inputs.tokens.len()),
        });
    }
    let token_indices = inputs
        .tokens
        .iter()
        .map(|t| index_in(&layout.seq_vocab, t, "seq"))
        .collect::<Result<Vec<_>>>()?;
    let dt_enc = sinusoidal_encode(inputs.delta_t, &layout.dt_sin);
    let temp_enc = sinusoidal_encode(inputs.temperature, &layout.temp_sin);

    let external = match (layout.external_dim, inputs.external) {
        (0, _) => None,
        (d_ext, Some(e)) => {
            e.validate(n)?;
            if e.matrix.ncols() != d_ext {
                return Err(ItoError::LayoutMismatch(format!(
                    "external embedding width {} does not match layout external_dim {d_ext}",
                    e.matrix.ncols()
                )));
            }
            Some(e.matrix.clone())
        }
        (d_ext, None) => {
            return Err(ItoError::LayoutMismatch(format!(
                "layout declares an external channel of width {d_ext} but no embedding was \
                 provided"
            )))
        }
    };

    let defaults = Annotations::default();
    let ann = inputs.annotations.unwrap_or(&defaults);
    let s_idx = if layout.s_llm_vocab.is_empty() {
        None
    } else {
        Some(index_in(&layout.s_llm_vocab, &ann.s_llm, "s_llm")?)
    };
    let c_idx = if layout.c_llm_vocab.is_empty() {
        None
    } else {
        Some(index_in(&layout.c_llm_vocab, &ann.c_llm, "c_llm")?)
    };

    Ok(ResolvedInputs {
        token_indices,
        dt_enc,
        temp_enc,
        external,
        s_idx,
        c_idx,
    })
}

/// Feature assembly with live table lookups, so gathers carry gradients
/// back into the embedding tables. Column order matches the plain path.
fn forward_features<O: Ops>(
    ops: &mut O,
    layout: &FeatureLayout,
    resolved: &ResolvedInputs,
    n: usize,
) -> Result<O::T> {
    let mut parts = Vec::new();
    let seq = ops.param("cond.seq")?;
    parts.push(ops.gather(&seq, &resolved.token_indices)?);
    parts.push(ops.constant(tile_row(&resolved.dt_enc, n))?);
    parts.push(ops.constant(tile_row(&resolved.temp_enc, n))?);
    if let Some(ext) = &resolved.external {
        parts.push(ops.constant(ext.clone())?);
    }
    if let Some(idx) = resolved.s_idx {
        let table = ops.param("cond.s_llm")?;
        parts.push(ops.gather(&table, &vec![idx; n])?);
    }
    if let Some(idx) = resolved.c_idx {
        let table = ops.param("cond.c_llm")?;
        parts.push(ops.gather(&table, &vec![idx; n])?);
    }
    let _ = layout;
    ops.concat_cols(&parts)
}

fn forward_block<O: Ops>(
    ops: &mut O,
    config: &ModelConfig,
    net: Net,
    layer: usize,
    h: &O::T,
    pair: Option<&(O::T, O::T)>,
    n: usize,
) -> Result<O::T> {
    let name = |field: &str| format!("{}.b{layer}.{field}", net.prefix());

    let w1 = ops.param(&name("w1"))?;
    let b1 = ops.param(&name("b1"))?;
    let pre = ops.matmul(h, &w1)?;
    let pre = ops.add_row(&pre, &b1)?;
    let t = ops.silu(&pre)?;

    let wq = ops.param(&name("wq"))?;
    let wk = ops.param(&name("wk"))?;
    let wv = ops.param(&name("wv"))?;
    let q = ops.matmul(&t, &wq)?;
    let k = ops.matmul(&t, &wk)?;
    let v = ops.matmul(&t, &wv)?;

    let bias_mat = match pair {
        Some((rbf, sep)) => {
            let prbf = ops.param(&name("prbf"))?;
            let psep = ops.param(&name("psep"))?;
            let a = ops.matmul(rbf, &prbf)?;
            let b = ops.matmul(sep, &psep)?;
            Some(ops.add(&a, &b)?)
        }
        None => None,
    };

    let heads = config.n_attention_heads;
    let head_dim = config.hidden_dim / heads;
    let inv_sqrt = 1.0 / (head_dim as f64).sqrt();
    let mut head_outputs = Vec::with_capacity(heads);
    for hd in 0..heads {
        let qh = ops.slice_cols(&q, hd * head_dim, head_dim)?;
        let kh = ops.slice_cols(&k, hd * head_dim, head_dim)?;
        let vh = ops.slice_cols(&v, hd * head_dim, head_dim)?;
        let kt = ops.transpose(&kh)?;
        let logits = ops.matmul(&qh, &kt)?;
        let mut score = ops.scale(&logits, inv_sqrt)?;
        if let Some(bm) = &bias_mat {
            let col = ops.slice_cols(bm, hd, 1)?;
            let bh = ops.reshape(&col, n, n)?;
            score = ops.add(&score, &bh)?;
        }
        let attn = ops.softmax_rows(&score)?;
        head_outputs.push(ops.matmul(&attn, &vh)?);
    }
    let cat = ops.concat_cols(&head_outputs)?;
    let wo = ops.param(&name("wo"))?;
    let bo = ops.param(&name("bo"))?;
    let o = ops.matmul(&cat, &wo)?;
    let o = ops.add_row(&o, &bo)?;

    let w2 = ops.param(&name("w2"))?;
    let b2 = ops.param(&name("b2"))?;
    let proj = ops.matmul(&o, &w2)?;
    let proj = ops.add_row(&proj, &b2)?;
    let out = ops.add(h, &proj)?;
    ops.check_finite(&out, &format!("{}.b{layer}", net.prefix()))?;
    Ok(out)
}

fn forward_net<O: Ops>(
    ops: &mut O,
    config: &ModelConfig,
    net: Net,
    input: &O::T,
    coords: &ArrayView2<f64>,
    n: usize,
) -> Result<O::T> {
    let pair = if config.use_pair_bias {
        let (rbf, sep) = pair_feature_matrices(config, coords);
        Some((ops.constant(rbf)?, ops.constant(sep)?))
    } else {
        None
    };
    let w = ops.param(&format!("{}.in.w", net.prefix()))?;
    let b = ops.param(&format!("{}.in.b", net.prefix()))?;
    let h0 = ops.matmul(input, &w)?;
    let mut h = ops.add_row(&h0, &b)?;
    for layer in 0..net.n_layers(config) {
        h = forward_block(ops, config, net, layer, &h, pair.as_ref(), n)?;
    }
    let ow = ops.param(&format!("{}.out.w", net.prefix()))?;
    let ob = ops.param(&format!("{}.out.b", net.prefix()))?;
    let out = ops.matmul(&h, &ow)?;
    let out = ops.add_row(&out, &ob)?;
    ops.check_finite(&out, &format!("{}.out", net.prefix()))?;
    Ok(out)
}

fn check_coords(params: &ModelParams, what: &str, x: &ArrayView2<f64>) -> Result<()> {
    if x.nrows() == 0 {
        return Err(ItoError::EmptyInput(format!("{what} with zero rows")));
    }
    if x.ncols() != params.config.dim {
        return Err(ItoError::ShapeMismatch {
            what: what.to_string(),
            expected: format!("n x {}", params.config.dim),
            got: format!("{} x {}", x.nrows(), x.ncols()),
        });
    }
    Ok(())
}

fn check_flow_time(s: f64) -> Result<()> {
    if !s.is_finite() || !(0.0..=1.0).contains(&s) {
        return Err(ItoError::InvalidInput(format!(
            "flow time s must lie in [0, 1], got {s}"
        )));
    }
    Ok(())
}

/// Per-residue condition vectors from the current state and assembled
/// features. The flow time never enters here.
pub fn cond_forward(
    params: &ModelParams,
    x_t: &ArrayView2<f64>,
    features: &ArrayView2<f64>,
) -> Result<Array2<f64>> {
    check_coords(params, "conditioning coordinates", x_t)?;
    let n = x_t.nrows();
    let width = params.layout.width();
    if features.nrows() != n || features.ncols() != width {
        return Err(ItoError::ShapeMismatch {
            what: "condition features".to_string(),
            expected: format!("{n} x {width}"),
            got: format!("{} x {}", features.nrows(), features.ncols()),
        });
    }
    let mut ops = ValueOps::new(params);
    let xt = ops.constant(x_t.to_owned())?;
    let ft = ops.constant(features.to_owned())?;
    let input = ops.concat_cols(&[xt, ft])?;
    let out = forward_net(&mut ops, &params.config, Net::Fc, &input, x_t, n)?;
    Ok(out.into_owned())
}

/// Velocity field evaluation at flow time `s`.
pub fn velocity_forward(
    params: &ModelParams,
    z: &ArrayView2<f64>,
    s: f64,
    cond: &ArrayView2<f64>,
) -> Result<Array2<f64>> {
    check_coords(params, "flow coordinates", z)?;
    check_flow_time(s)?;
    let n = z.nrows();
    if cond.nrows() != n || cond.ncols() != params.config.cond_dim {
        return Err(ItoError::ShapeMismatch {
            what: "condition vectors".to_string(),
            expected: format!("{n} x {}", params.config.cond_dim),
            got: format!("{} x {}", cond.nrows(), cond.ncols()),
        });
    }
    let enc = tile_row(&sinusoidal_encode(s, &s_time_spec(&params.config)), n);
    let mut ops = ValueOps::new(params);
    let zt = ops.constant(z.to_owned())?;
    let et = ops.constant(enc)?;
    let ct = ops.constant(cond.to_owned())?;
    let input = ops.concat_cols(&[zt, et, ct])?;
    let out = forward_net(&mut ops, &params.config, Net::Fv, &input, z, n)?;
    Ok(out.into_owned())
}

/// Attention bias for one block, one n x n matrix per head.
pub fn pair_bias(
    params: &ModelParams,
    net: Net,
    layer: usize,
    x: &ArrayView2<f64>,
) -> Result<Vec<Array2<f64>>> {
    if !params.config.use_pair_bias {
        return Err(ItoError::InvalidInput(
            "pair bias is disabled in this model config".to_string(),
        ));
    }
    check_coords(params, "pair bias coordinates", x)?;
    let n = x.nrows();
    let (rbf, sep) = pair_feature_matrices(&params.config, x);
    let prbf = params.tensor(&format!("{}.b{layer}.prbf", net.prefix()))?;
    let psep = params.tensor(&format!("{}.b{layer}.psep", net.prefix()))?;
    let bmat = rbf.dot(prbf) + sep.dot(psep);
    let mut out = Vec::with_capacity(params.config.n_attention_heads);
    for hd in 0..params.config.n_attention_heads {
        let col = bmat.column(hd);
        out.push(Array2::from_shape_fn((n, n), |(i, j)| col[i * n + j]));
    }
    Ok(out)
}

/// Builds the conditioning net in `graph` with feature assembly inlined, so
/// the embedding tables receive gradients.
pub fn build_cond_graph(
    graph: &mut Graph,
    nodes: &ParamNodes,
    params: &ModelParams,
    x_t: &ArrayView2<f64>,
    inputs: &ConditionInputs,
) -> Result<NodeId> {
    check_coords(params, "conditioning coordinates", x_t)?;
    let n = x_t.nrows();
    let resolved = resolve_inputs(&params.layout, inputs, n)?;
    let mut ops = GraphOps { graph, nodes };
    let feats = forward_features(&mut ops, &params.layout, &resolved, n)?;
    let xt = ops.constant(x_t.to_owned())?;
    let input = ops.concat_cols(&[xt, feats])?;
    forward_net(&mut ops, &params.config, Net::Fc, &input, x_t, n)
}

pub fn build_velocity_graph(
    graph: &mut Graph,
    nodes: &ParamNodes,
    params: &ModelParams,
    z: &ArrayView2<f64>,
    s: f64,
    cond: NodeId,
) -> Result<NodeId> {
    check_coords(params, "flow coordinates", z)?;
    check_flow_time(s)?;
    let n = z.nrows();
    let enc = tile_row(&sinusoidal_encode(s, &s_time_spec(&params.config)), n);
    let mut ops = GraphOps { graph, nodes };
    let zt = ops.constant(z.to_owned())?;
    let et = ops.constant(enc)?;
    let input = ops.concat_cols(&[zt, et, cond])?;
    forward_net(&mut ops, &params.config, Net::Fv, &input, z, n)
}

/// Full per-sample velocity prediction: condition on `x_t`, evaluate the
/// field at `z` and flow time `s`.
pub fn build_sample_graph(
    graph: &mut Graph,
    nodes: &ParamNodes,
    params: &ModelParams,
    x_t: &ArrayView2<f64>,
    inputs: &ConditionInputs,
    z: &ArrayView2<f64>,
    s: f64,
) -> Result<NodeId> {
    let cond = build_cond_graph(graph, nodes, params, x_t, inputs)?;
    build_velocity_graph(graph, nodes, params, z, s, cond)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::assemble_condition_features;
    use crate::model::test_support::{tiny_config, tiny_layout};
    use crate::model::Precision;
    use crate::rng::derive_rng;
    use ndarray::array;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(StandardNormal))
    }

    fn randomize_head(params: &mut ModelParams, rng: &mut impl Rng) {
        for name in ["fv.out.w", "fv.out.b"] {
            let t = params.tensor_mut(name).unwrap();
            t.mapv_inplace(|_| 0.3 * rng.sample::<f64, _>(StandardNormal));
        }
    }

    fn test_inputs(tokens: &[String]) -> ConditionInputs<'_> {
        ConditionInputs {
            delta_t: 0.31,
            temperature: 1.2,
            tokens,
            external: None,
            annotations: None,
        }
    }

    fn assert_bits_eq(a: &Array2<f64>, b: &Array2<f64>) {
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.to_bits(), y.to_bits(), "{x} vs {y}");
        }
    }

    #[test]
    fn graph_and_lean_forwards_agree_bitwise() {
        let params = ModelParams::init(tiny_config(3, true), tiny_layout(), 11).unwrap();
        let mut rng = derive_rng(5, "fwd-test", &[]);
        let n = 4;
        let x_t = random_matrix(n, 3, &mut rng);
        let z = random_matrix(n, 3, &mut rng);
        let s = 0.37;
        let tokens: Vec<String> = ["a", "b", "a", "b"].iter().map(|t| t.to_string()).collect();
        let inputs = test_inputs(&tokens);

        let tables = params.tables().unwrap();
        let feats =
            assemble_condition_features(&x_t.view(), &inputs, &tables, &params.layout).unwrap();
        let c_lean = cond_forward(&params, &x_t.view(), &feats.view()).unwrap();
        let v_lean = velocity_forward(&params, &z.view(), s, &c_lean.view()).unwrap();

        let mut graph = Graph::new();
        let nodes = ParamNodes::register(&mut graph, &params).unwrap();
        let c_node = build_cond_graph(&mut graph, &nodes, &params, &x_t.view(), &inputs).unwrap();
        let v_node =
            build_velocity_graph(&mut graph, &nodes, &params, &z.view(), s, c_node).unwrap();

        assert_bits_eq(graph.value(c_node), &c_lean);
        assert_bits_eq(graph.value(v_node), &v_lean);
    }

    #[test]
    fn zeroed_output_projection_gives_exactly_zero_condition() {
        let mut params = ModelParams::init(tiny_config(2, false), tiny_layout(), 3).unwrap();
        params.tensor_mut("fc.out.w").unwrap().fill(0.0);
        params.tensor_mut("fc.out.b").unwrap().fill(0.0);
        let x_t = array![[0.4, -0.2], [1.0, 0.3]];
        let tokens: Vec<String> = vec!["a".into(), "b".into()];
        let tables = params.tables().unwrap();
        let feats = assemble_condition_features(
            &x_t.view(),
            &test_inputs(&tokens),
            &tables,
            &params.layout,
        )
        .unwrap();
        let c = cond_forward(&params, &x_t.view(), &feats.view()).unwrap();
        assert!(c.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn freshly_initialized_velocity_field_is_identically_zero() {
        let params = ModelParams::init(tiny_config(2, true), tiny_layout(), 3).unwrap();
        let mut rng = derive_rng(9, "fwd-test", &[]);
        let z = random_matrix(3, 2, &mut rng);
        let c = random_matrix(3, 5, &mut rng);
        let v = velocity_forward(&params, &z.view(), 0.5, &c.view()).unwrap();
        assert!(v.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn velocity_is_continuous_in_flow_time() {
        let mut params = ModelParams::init(tiny_config(2, true), tiny_layout(), 3).unwrap();
        let mut rng = derive_rng(10, "fwd-test", &[]);
        randomize_head(&mut params, &mut rng);
        let z = random_matrix(3, 2, &mut rng);
        let c = random_matrix(3, 5, &mut rng);
        let v0 = velocity_forward(&params, &z.view(), 0.5, &c.view()).unwrap();
        let v1 = velocity_forward(&params, &z.view(), 0.5 + 1e-9, &c.view()).unwrap();
        let scale: f64 = v0.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for (a, b) in v0.iter().zip(v1.iter()) {
            assert!((a - b).abs() <= 1e-6 * scale, "jump in s: {a} vs {b}");
        }
    }

    #[test]
    fn flow_time_outside_unit_interval_is_rejected() {
        let params = ModelParams::init(tiny_config(2, false), tiny_layout(), 3).unwrap();
        let z = array![[0.1, 0.2]];
        let c = Array2::zeros((1, 5));
        for s in [-0.1, 1.1, f64::NAN] {
            assert!(matches!(
                velocity_forward(&params, &z.view(), s, &c.view()),
                Err(ItoError::InvalidInput(_))
            ));
        }
    }

    #[test]
    fn attention_is_permutation_equivariant() {
        // Identical tokens per particle; pair bias stays on because the
        // distance features permute with the coordinates.
        let mut layout = tiny_layout();
        layout.seq_vocab = vec!["a".into()];
        let mut params = ModelParams::init(tiny_config(3, true), layout, 21).unwrap();
        let mut rng = derive_rng(22, "fwd-test", &[]);
        randomize_head(&mut params, &mut rng);
        // Nonzero sep projection would break equivariance; it encodes chain
        // order on purpose. Keep it zero here.
        let n = 5;
        let x = random_matrix(n, 3, &mut rng);
        let tokens: Vec<String> = vec!["a".into(); n];
        let perm = [3usize, 0, 4, 1, 2];

        let tables = params.tables().unwrap();
        let feats = assemble_condition_features(
            &x.view(),
            &test_inputs(&tokens),
            &tables,
            &params.layout,
        )
        .unwrap();
        let c = cond_forward(&params, &x.view(), &feats.view()).unwrap();
        let v = velocity_forward(&params, &x.view(), 0.4, &c.view()).unwrap();

        let xp = Array2::from_shape_fn((n, 3), |(i, j)| x[[perm[i], j]]);
        let featsp = assemble_condition_features(
            &xp.view(),
            &test_inputs(&tokens),
            &tables,
            &params.layout,
        )
        .unwrap();
        let cp = cond_forward(&params, &xp.view(), &featsp.view()).unwrap();
        let vp = velocity_forward(&params, &xp.view(), 0.4, &cp.view()).unwrap();

        for i in 0..n {
            for j in 0..3 {
                let a = v[[perm[i], j]];
                let b = vp[[i, j]];
                assert!(
                    (a - b).abs() <= 1e-12 * (1.0 + a.abs()),
                    "row {i} col {j}: {a} vs {b}"
                );
            }
        }
    }

    #[test]
    fn pair_bias_entries_match_for_equal_distances() {
        let params = ModelParams::init(tiny_config(2, true), tiny_layout(), 3).unwrap();
        // Equilateral triangle: all three pairs at unit distance.
        let x = array![
            [0.0, 0.0],
            [1.0, 0.0],
            [0.5, 3f64.sqrt() / 2.0]
        ];
        let bias = pair_bias(&params, Net::Fc, 0, &x.view()).unwrap();
        assert_eq!(bias.len(), 2);
        for b in &bias {
            assert_eq!(b[[2, 0]].to_bits(), b[[2, 1]].to_bits());
            assert_eq!(b[[0, 1]].to_bits(), b[[1, 2]].to_bits());
            // Symmetric at init because the antisymmetric separation channel
            // starts at zero.
            assert_eq!(b[[0, 2]].to_bits(), b[[2, 0]].to_bits());
        }
    }

    #[test]
    fn unknown_tokens_are_rejected_in_the_graph_path() {
        let params = ModelParams::init(tiny_config(2, false), tiny_layout(), 3).unwrap();
        let x_t = array![[0.0, 0.0]];
        let tokens: Vec<String> = vec!["zzz".into()];
        let mut graph = Graph::new();
        let nodes = ParamNodes::register(&mut graph, &params).unwrap();
        let err = build_cond_graph(&mut graph, &nodes, &params, &x_t.view(), &test_inputs(&tokens))
            .unwrap_err();
        assert!(matches!(err, ItoError::UnknownToken { .. }));
    }

    #[test]
    fn every_parameter_receives_gradient_signal() {
        let mut layout = tiny_layout();
        layout.s_llm_vocab = vec!["yes".into(), "no".into()];
        layout.c_llm_vocab = vec!["high".into(), "low".into()];
        layout.annotation_dim = 2;
        let mut params = ModelParams::init(tiny_config(3, true), layout, 31).unwrap();
        let mut rng = derive_rng(32, "fwd-test", &[]);
        randomize_head(&mut params, &mut rng);

        let n = 4;
        let x_t = random_matrix(n, 3, &mut rng);
        let z = random_matrix(n, 3, &mut rng);
        let tokens: Vec<String> = ["a", "b", "a", "b"].iter().map(|t| t.to_string()).collect();
        let inputs = test_inputs(&tokens);

        let mut graph = Graph::new();
        let nodes = ParamNodes::register(&mut graph, &params).unwrap();
        let v = build_sample_graph(&mut graph, &nodes, &params, &x_t.view(), &inputs, &z.view(), 0.6)
            .unwrap();
        let sq = graph.mul(v, v).unwrap();
        let loss = graph.mean_all(sq).unwrap();
        let grads = graph.backward(loss).unwrap();
        let set = nodes.collect_gradients(&params, &grads).unwrap();
        set.validate_against(&params).unwrap();
        for (name, g) in &set.tensors {
            assert!(
                g.iter().any(|v| *v != 0.0),
                "parameter '{name}' received no gradient"
            );
        }
    }

    #[test]
    fn model_gradients_match_finite_differences() {
        let mut params = ModelParams::init(tiny_config(2, true), tiny_layout(), 41).unwrap();
        assert_eq!(params.config.precision, Precision::Double);
        let mut rng = derive_rng(42, "fwd-test", &[]);
        randomize_head(&mut params, &mut rng);

        let n = 3;
        let x_t = random_matrix(n, 2, &mut rng);
        let z = random_matrix(n, 2, &mut rng);
        let target = random_matrix(n, 2, &mut rng);
        let s = 0.55;
        let tokens: Vec<String> = vec!["a".into(), "b".into(), "a".into()];

        let loss_value = |p: &ModelParams| -> f64 {
            let tables = p.tables().unwrap();
            let inputs = test_inputs(&tokens);
            let feats =
                assemble_condition_features(&x_t.view(), &inputs, &tables, &p.layout).unwrap();
            let c = cond_forward(p, &x_t.view(), &feats.view()).unwrap();
            let v = velocity_forward(p, &z.view(), s, &c.view()).unwrap();
            let d = &v - &target;
            d.iter().map(|x| x * x).sum::<f64>() / d.len() as f64
        };

        let mut graph = Graph::new();
        let nodes = ParamNodes::register(&mut graph, &params).unwrap();
        let inputs = test_inputs(&tokens);
        let v = build_sample_graph(&mut graph, &nodes, &params, &x_t.view(), &inputs, &z.view(), s)
            .unwrap();
        let t_node = graph.leaf(target.clone(), false).unwrap();
        let d = graph.sub(v, t_node).unwrap();
        let sq = graph.mul(d, d).unwrap();
        let loss = graph.mean_all(sq).unwrap();
        let analytic = nodes
            .collect_gradients(&params, &graph.backward(loss).unwrap())
            .unwrap();

        let h = 1e-5;
        let probes = [
            ("cond.seq", (0, 0)),
            ("fc.in.w", (1, 2)),
            ("fc.b0.wq", (3, 1)),
            ("fc.b0.prbf", (1, 1)),
            ("fc.b0.psep", (0, 0)),
            ("fv.b0.w2", (2, 3)),
            ("fv.out.w", (4, 1)),
            ("fv.b0.bo", (0, 2)),
        ];
        for (name, (r, c)) in probes {
            let mut plus = params.clone();
            plus.tensor_mut(name).unwrap()[[r, c]] += h;
            let mut minus = params.clone();
            minus.tensor_mut(name).unwrap()[[r, c]] -= h;
            let fd = (loss_value(&plus) - loss_value(&minus)) / (2.0 * h);
            let a = analytic.tensors[name][[r, c]];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            assert!(rel < 1e-5, "{name}[{r},{c}]: analytic {a} vs fd {fd}");
        }
    }

    #[test]
    fn lean_path_reports_nonfinite_layer() {
        let mut params = ModelParams::init(tiny_config(2, false), tiny_layout(), 3).unwrap();
        params.tensor_mut("fc.b0.w1").unwrap()[[0, 0]] = f64::NAN;
        let x_t = array![[0.1, 0.2]];
        let tokens: Vec<String> = vec!["a".into()];
        let tables = params.tables().unwrap();
        let feats = assemble_condition_features(
            &x_t.view(),
            &test_inputs(&tokens),
            &tables,
            &params.layout,
        )
        .unwrap();
        let err = cond_forward(&params, &x_t.view(), &feats.view()).unwrap_err();
        match err {
            ItoError::NonFinite { location, .. } => assert_eq!(location, "fc.b0"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }
}
