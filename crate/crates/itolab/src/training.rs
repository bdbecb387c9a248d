//! Conditional flow-matching objective and the training loop: sample batch,
//! interpolate, loss, backward, clip, step. Checkpoints resume bit-exactly.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::conditioning::{ConditionInputs, FeatureLayout};
use crate::data::{sample_transition_batch, Dataset, TransitionBatch};
use crate::error::{ItoError, Result};
use crate::model::checkpoint::{append_crc, check_framing, decode_model_body, encode_model};
use crate::model::{
    build_sample_graph, GradientSet, ModelConfig, ModelParams, ParamNodes, Precision,
};
use crate::rng::{derive_rng, RngState};

const ADAM_EPS: f64 = 1e-8;
const MOMENT_MAGIC: &[u8; 8] = b"ITOMOM01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Largest lag, in frames, the sampler may draw.
    pub delta_t_max: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub clip_threshold: f64,
    pub total_steps: u64,
    /// 0 disables periodic checkpoints; a final one is always written when
    /// an output location is given.
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            delta_t_max: 8,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            clip_threshold: 0.1,
            total_steps: 1000,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut violations = Vec::new();
        if self.batch_size == 0 {
            violations.push("batch_size must be >= 1".to_string());
        }
        if self.delta_t_max == 0 {
            violations.push("delta_t_max must be >= 1".to_string());
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            violations.push(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if !(self.clip_threshold > 0.0) || !self.clip_threshold.is_finite() {
            violations.push(format!(
                "clip_threshold must be positive, got {}",
                self.clip_threshold
            ));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                violations.push(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            violations.push(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            ));
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(ItoError::ConfigInvalid { violations })
        }
    }
}

/// Everything needed to continue a run: parameters, both optimizer moments,
/// the step counter, and the batch-sampling RNG position.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub m1: BTreeMap<String, Array2<f64>>,
    pub m2: BTreeMap<String, Array2<f64>>,
    pub step: u64,
    pub rng_state: RngState,
}

pub fn init_train_state(
    model_config: ModelConfig,
    layout: FeatureLayout,
    config: &TrainConfig,
) -> Result<TrainState> {
    config.validate()?;
    let params = ModelParams::init(model_config, layout, config.seed)?;
    let zeros = GradientSet::zeros_like(&params);
    let rng = derive_rng(config.seed, "train", &[]);
    Ok(TrainState {
        m1: zeros.tensors.clone(),
        m2: zeros.tensors,
        params,
        step: 0,
        rng_state: RngState::capture(&rng),
    })
}

/// Per-sample flow times, priors, interpolants, and target velocities.
/// Draw order is fixed: for each sample, s first, then ε row-major.
pub struct Interpolants {
    pub s: Vec<f64>,
    pub eps: Array3<f64>,
    pub z: Array3<f64>,
    pub target: Array3<f64>,
}

pub fn draw_interpolants(batch: &TransitionBatch, rng: &mut ChaCha20Rng) -> Interpolants {
    let (b, n, d) = batch.x_t.dim();
    let mut s = Vec::with_capacity(b);
    let mut eps = Array3::zeros((b, n, d));
    for bi in 0..b {
        s.push(rng.random_range(0.0..1.0));
        for i in 0..n {
            for j in 0..d {
                eps[[bi, i, j]] = rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    let mut z = Array3::zeros((b, n, d));
    let mut target = Array3::zeros((b, n, d));
    for bi in 0..b {
        for i in 0..n {
            for j in 0..d {
                let x1 = batch.x_target[[bi, i, j]];
                let e = eps[[bi, i, j]];
                z[[bi, i, j]] = s[bi] * x1 + (1.0 - s[bi]) * e;
                target[[bi, i, j]] = x1 - e;
            }
        }
    }
    Interpolants { s, eps, z, target }
}

/// Loss value plus the graph it was computed on, ready for one backward pass.
pub struct LossGraph {
    pub loss: f64,
    pub per_sample: Vec<f64>,
    graph: Graph,
    loss_node: NodeId,
    nodes: ParamNodes,
}

impl std::fmt::Debug for LossGraph {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LossGraph")
            .field("loss", &self.loss)
            .field("per_sample", &self.per_sample)
            .finish_non_exhaustive()
    }
}

impl LossGraph {
    pub fn gradients(mut self, params: &ModelParams) -> Result<GradientSet> {
        let slots = self.graph.backward(self.loss_node)?;
        self.nodes.collect_gradients(params, &slots)
    }
}

fn batch_inputs(batch: &TransitionBatch, b: usize) -> ConditionInputs<'_> {
    let meta = &batch.meta[b];
    ConditionInputs {
        delta_t: batch.delta_t_phys[b],
        temperature: batch.temperature[b],
        tokens: &meta.tokens,
        external: meta.external.as_ref(),
        annotations: meta.annotations.as_ref(),
    }
}

pub fn cfm_loss(
    params: &ModelParams,
    batch: &TransitionBatch,
    rng: &mut ChaCha20Rng,
) -> Result<LossGraph> {
    let (b, _, d) = batch.x_t.dim();
    if b == 0 {
        return Err(ItoError::EmptyInput("empty transition batch".to_string()));
    }
    if d != params.config.dim {
        return Err(ItoError::ShapeMismatch {
            what: "batch spatial dimension".to_string(),
            expected: format!("{}", params.config.dim),
            got: format!("{d}"),
        });
    }
    let inter = draw_interpolants(batch, rng);
    let mut graph = Graph::new();
    let nodes = ParamNodes::register(&mut graph, params)?;
    let mut per_sample = Vec::with_capacity(b);
    let mut acc: Option<NodeId> = None;
    for bi in 0..b {
        let x_t = batch.x_t.index_axis(Axis(0), bi);
        let z = inter.z.index_axis(Axis(0), bi);
        let inputs = batch_inputs(batch, bi);
        let v = build_sample_graph(&mut graph, &nodes, params, &x_t, &inputs, &z, inter.s[bi])?;
        let t_node = graph.leaf(inter.target.index_axis(Axis(0), bi).to_owned(), false)?;
        let diff = graph.sub(v, t_node)?;
        let sq = graph.mul(diff, diff)?;
        let sample_loss = graph.mean_all(sq)?;
        let value = graph.value(sample_loss)[[0, 0]];
        if !value.is_finite() {
            return Err(ItoError::NonFinite {
                location: "cfm_loss".to_string(),
                detail: format!("sample {bi} produced a non-finite loss"),
            });
        }
        per_sample.push(value);
        acc = Some(match acc {
            None => sample_loss,
            Some(a) => graph.add(a, sample_loss)?,
        });
    }
    let loss_node = graph.scale(acc.expect("b >= 1"), 1.0 / b as f64)?;
    let loss = graph.value(loss_node)[[0, 0]];
    Ok(LossGraph {
        loss,
        per_sample,
        graph,
        loss_node,
        nodes,
    })
}

/// Graph-free loss evaluation against an arbitrary velocity field. The RNG
/// consumption matches `cfm_loss` exactly, so a cloned generator reproduces
/// the same interpolants. Returns per-sample losses.
pub fn cfm_loss_with<F>(batch: &TransitionBatch, rng: &mut ChaCha20Rng, mut velocity: F) -> Vec<f64>
where
    F: FnMut(&ArrayView2<f64>, f64, usize) -> Array2<f64>,
{
    let inter = draw_interpolants(batch, rng);
    let b = batch.x_t.dim().0;
    let mut out = Vec::with_capacity(b);
    for bi in 0..b {
        let z = inter.z.index_axis(Axis(0), bi);
        let v = velocity(&z, inter.s[bi], bi);
        let diff = &v - &inter.target.index_axis(Axis(0), bi);
        let sq = &diff * &diff;
        out.push(sq.sum() / sq.len() as f64);
    }
    out
}

/// Rescales so the global L2 norm is at most `threshold`; direction is
/// preserved.
pub fn clip_gradients(mut grads: GradientSet, threshold: f64) -> Result<GradientSet> {
    if !(threshold > 0.0) || !threshold.is_finite() {
        return Err(ItoError::InvalidInput(format!(
            "clip threshold must be positive, got {threshold}"
        )));
    }
    let norm = grads.global_norm();
    if norm > threshold {
        let factor = threshold / norm;
        for t in grads.tensors.values_mut() {
            t.mapv_inplace(|v| v * factor);
        }
    }
    Ok(grads)
}

/// Decoupled-weight-decay adaptive-moment update with bias correction.
/// Single-precision models are rounded back to the f32 grid afterwards.
pub fn optimizer_step(
    state: &mut TrainState,
    config: &TrainConfig,
    grads: &GradientSet,
) -> Result<()> {
    grads.validate_against(&state.params)?;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    let lr = config.learning_rate;
    for (name, g) in &grads.tensors {
        let m1 = state.m1.get_mut(name).expect("moment shapes mirror params");
        let m2 = state.m2.get_mut(name).expect("moment shapes mirror params");
        let p = state.params.tensor_mut(name)?;
        ndarray::Zip::from(p)
            .and(m1)
            .and(m2)
            .and(g)
            .for_each(|p, m1, m2, g| {
                *m1 = config.beta1 * *m1 + (1.0 - config.beta1) * g;
                *m2 = config.beta2 * *m2 + (1.0 - config.beta2) * g * g;
                let mhat = *m1 / bc1;
                let vhat = *m2 / bc2;
                *p -= lr * (mhat / (vhat.sqrt() + ADAM_EPS) + config.weight_decay * *p);
            });
    }
    if state.params.config.precision == Precision::Single {
        state.params.round_to_single();
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: u64,
    pub loss: f64,
    /// Pre-clip global gradient norm.
    pub grad_norm: f64,
    pub wallclock_s: f64,
}

/// Filesystem targets for checkpoints and the loss trace.
pub struct TrainOutputs {
    pub checkpoint_dir: PathBuf,
    pub trace_path: PathBuf,
}

impl TrainOutputs {
    fn step_path(&self, step: u64) -> PathBuf {
        self.checkpoint_dir.join(format!("step_{step:07}.ckpt"))
    }

    fn final_path(&self) -> PathBuf {
        self.checkpoint_dir.join("final.ckpt")
    }
}

fn with_step(err: ItoError, step: u64) -> ItoError {
    match err {
        ItoError::NonFinite { location, detail } => ItoError::NonFinite {
            location: format!("step {step}: {location}"),
            detail,
        },
        other => other,
    }
}

/// Runs steps `state.step..config.total_steps`. With `outputs`, appends the
/// loss trace as CSV and writes periodic plus final checkpoints.
pub fn train(
    dataset: &Dataset,
    mut state: TrainState,
    config: &TrainConfig,
    outputs: Option<&TrainOutputs>,
) -> Result<(TrainState, Vec<TraceRow>)> {
    config.validate()?;
    let mut trace_file = match outputs {
        Some(out) => {
            std::fs::create_dir_all(&out.checkpoint_dir)
                .map_err(|e| ItoError::io(out.checkpoint_dir.display().to_string(), e))?;
            let f = std::fs::File::create(&out.trace_path)
                .map_err(|e| ItoError::io(out.trace_path.display().to_string(), e))?;
            let mut w = std::io::BufWriter::new(f);
            writeln!(w, "step,loss,grad_norm,wallclock_s")
                .map_err(|e| ItoError::io(out.trace_path.display().to_string(), e))?;
            Some(w)
        }
        None => None,
    };

    let mut rng = state.rng_state.restore();
    let mut trace = Vec::new();
    let start = Instant::now();
    while state.step < config.total_steps {
        let step_index = state.step + 1;
        let batch = sample_transition_batch(dataset, config.delta_t_max, config.batch_size, &mut rng)?;
        let loss_graph =
            cfm_loss(&state.params, &batch, &mut rng).map_err(|e| with_step(e, step_index))?;
        let loss = loss_graph.loss;
        let grads = loss_graph
            .gradients(&state.params)
            .map_err(|e| with_step(e, step_index))?;
        let grad_norm = grads.global_norm();
        let grads = clip_gradients(grads, config.clip_threshold)?;
        // Capture after all of this step's draws so a checkpoint written
        // below resumes into the next step's stream position.
        state.rng_state = RngState::capture(&rng);
        optimizer_step(&mut state, config, &grads)?;

        let row = TraceRow {
            step: state.step,
            loss,
            grad_norm,
            wallclock_s: start.elapsed().as_secs_f64(),
        };
        if let (Some(w), Some(out)) = (trace_file.as_mut(), outputs) {
            writeln!(w, "{},{},{},{}", row.step, row.loss, row.grad_norm, row.wallclock_s)
                .map_err(|e| ItoError::io(out.trace_path.display().to_string(), e))?;
        }
        trace.push(row);

        if let Some(out) = outputs {
            if config.checkpoint_every > 0 && state.step % config.checkpoint_every == 0 {
                write_train_state(&out.step_path(state.step), &state, config)?;
            }
        }
    }
    if let Some(out) = outputs {
        write_train_state(&out.final_path(), &state, config)?;
    }
    if let (Some(mut w), Some(out)) = (trace_file, outputs) {
        w.flush()
            .map_err(|e| ItoError::io(out.trace_path.display().to_string(), e))?;
    }
    Ok((state, trace))
}

fn truncated(what: &str) -> impl FnOnce(std::io::Error) -> ItoError + '_ {
    move |e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            ItoError::Truncated {
                what: what.to_string(),
            }
        } else {
            ItoError::io("<buffer>", e)
        }
    }
}

/// Model checkpoint plus an optimizer section: submagic, train config JSON,
/// step counter, RNG state, then f64 moment pairs per tensor.
pub fn write_train_state(path: &Path, state: &TrainState, config: &TrainConfig) -> Result<()> {
    let mut bytes = encode_model(&state.params)?;
    bytes.extend_from_slice(MOMENT_MAGIC);
    let cfg = serde_json::to_vec(config)?;
    bytes
        .write_u32::<LittleEndian>(cfg.len() as u32)
        .expect("vec write");
    bytes.extend_from_slice(&cfg);
    bytes.write_u64::<LittleEndian>(state.step).expect("vec write");
    bytes.extend_from_slice(&state.rng_state.seed);
    bytes
        .write_u64::<LittleEndian>(state.rng_state.stream)
        .expect("vec write");
    bytes
        .write_u64::<LittleEndian>(state.rng_state.word_pos_hi)
        .expect("vec write");
    bytes
        .write_u64::<LittleEndian>(state.rng_state.word_pos_lo)
        .expect("vec write");
    bytes
        .write_u32::<LittleEndian>(state.m1.len() as u32)
        .expect("vec write");
    for (name, m1) in &state.m1 {
        let m2 = &state.m2[name];
        bytes
            .write_u32::<LittleEndian>(name.len() as u32)
            .expect("vec write");
        bytes.extend_from_slice(name.as_bytes());
        bytes
            .write_u64::<LittleEndian>(m1.nrows() as u64)
            .expect("vec write");
        bytes
            .write_u64::<LittleEndian>(m1.ncols() as u64)
            .expect("vec write");
        for v in m1.iter() {
            bytes.write_f64::<LittleEndian>(*v).expect("vec write");
        }
        for v in m2.iter() {
            bytes.write_f64::<LittleEndian>(*v).expect("vec write");
        }
    }
    std::fs::write(path, append_crc(bytes)).map_err(|e| ItoError::io(path.display().to_string(), e))
}

pub fn read_train_state(path: &Path) -> Result<(TrainState, TrainConfig)> {
    let bytes = std::fs::read(path).map_err(|e| ItoError::io(path.display().to_string(), e))?;
    let payload = check_framing(&bytes)?;
    let mut cur = std::io::Cursor::new(payload);
    let params = decode_model_body(&mut cur)?;

    let mut magic = [0u8; 8];
    cur.read_exact(&mut magic)
        .map_err(truncated("optimizer section"))?;
    if &magic != MOMENT_MAGIC {
        return Err(ItoError::BadMagic {
            expected: "ITOMOM01",
        });
    }
    let cfg_len = cur
        .read_u32::<LittleEndian>()
        .map_err(truncated("optimizer config"))? as usize;
    let mut cfg_bytes = vec![0u8; cfg_len];
    cur.read_exact(&mut cfg_bytes)
        .map_err(truncated("optimizer config"))?;
    let config: TrainConfig = serde_json::from_slice(&cfg_bytes)?;
    let step = cur
        .read_u64::<LittleEndian>()
        .map_err(truncated("optimizer step"))?;
    let mut seed = [0u8; 32];
    cur.read_exact(&mut seed).map_err(truncated("rng state"))?;
    let stream = cur.read_u64::<LittleEndian>().map_err(truncated("rng state"))?;
    let word_pos_hi = cur.read_u64::<LittleEndian>().map_err(truncated("rng state"))?;
    let word_pos_lo = cur.read_u64::<LittleEndian>().map_err(truncated("rng state"))?;
    let n = cur
        .read_u32::<LittleEndian>()
        .map_err(truncated("moment count"))? as usize;
    let mut m1 = BTreeMap::new();
    let mut m2 = BTreeMap::new();
    for _ in 0..n {
        let name_len = cur
            .read_u32::<LittleEndian>()
            .map_err(truncated("moment name"))? as usize;
        let mut name_bytes = vec![0u8; name_len];
        cur.read_exact(&mut name_bytes)
            .map_err(truncated("moment name"))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| ItoError::InvalidInput("moment name is not UTF-8".to_string()))?;
        let rows = cur.read_u64::<LittleEndian>().map_err(truncated("moment dims"))? as usize;
        let cols = cur.read_u64::<LittleEndian>().map_err(truncated("moment dims"))? as usize;
        let count = rows
            .checked_mul(cols)
            .ok_or_else(|| ItoError::InvalidInput(format!("moment '{name}' dims overflow")))?;
        let mut a = vec![0f64; count];
        cur.read_f64_into::<LittleEndian>(&mut a)
            .map_err(truncated("moment payload"))?;
        let mut b = vec![0f64; count];
        cur.read_f64_into::<LittleEndian>(&mut b)
            .map_err(truncated("moment payload"))?;
        m1.insert(
            name.clone(),
            Array2::from_shape_vec((rows, cols), a).expect("count checked"),
        );
        m2.insert(
            name,
            Array2::from_shape_vec((rows, cols), b).expect("count checked"),
        );
    }
    let state = TrainState {
        params,
        m1,
        m2,
        step,
        rng_state: RngState {
            seed,
            stream,
            word_pos_hi,
            word_pos_lo,
        },
    };
    if state.m1.len() != state.params.tensors().len() {
        return Err(ItoError::ShapeMismatch {
            what: "optimizer moments".to_string(),
            expected: format!("{} tensors", state.params.tensors().len()),
            got: format!("{} tensors", state.m1.len()),
        });
    }
    Ok((state, config))
}
