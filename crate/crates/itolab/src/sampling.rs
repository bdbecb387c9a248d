//! Generates transitions from a trained model by Euler integration of the
//! flow ODE, chains them into trajectories, and runs temperature sweeps.
//!
//! Determinism contract: every draw is tied to an explicit substream, namely
//! `(seed, "sample")` for a lone transition, `(seed, "rollout", step)` inside
//! a trajectory, and `(seed, "ensemble", member)` for the per-member roots.
//! Results therefore never depend on worker count or scheduling.

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

use crate::conditioning::{
    assemble_condition_features, Annotations, ConditionInputs, ConditionTables, ExternalEmbedding,
};
use crate::data::{remove_center_of_gravity, SystemMeta};
use crate::error::{ItoError, Result};
use crate::model::{cond_forward, velocity_forward, ModelParams};
use crate::rng::{derive_rng, derive_u64};
use crate::systems::Trajectory;

/// Flow-ODE discretization plus the conditioning scalars for one transition.
///
/// An empty `time_grid` means the uniform grid `s_i = i/N`. A custom grid
/// must hold exactly `n_ode_steps + 1` strictly increasing points from 0 to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub n_ode_steps: usize,
    pub time_grid: Vec<f64>,
    /// Physical lag fed to the conditioning network; also the frame interval
    /// of generated trajectories.
    pub delta_t: f64,
    pub temperature: f64,
    pub seed: u64,
    /// Shift each generated state back to zero center of gravity, and condition
    /// on the centered current state. Enable iff the training data was centered.
    pub re_center: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            n_ode_steps: 50,
            time_grid: Vec::new(),
            delta_t: 1.0,
            temperature: 1.0,
            seed: 0,
            re_center: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let mut violations = Vec::new();
        if self.n_ode_steps == 0 {
            violations.push("n_ode_steps must be >= 1".to_string());
        }
        if !(self.delta_t > 0.0) || !self.delta_t.is_finite() {
            violations.push(format!("delta_t must be positive, got {}", self.delta_t));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            violations.push(format!(
                "temperature must be positive, got {}",
                self.temperature
            ));
        }
        if !self.time_grid.is_empty() {
            if self.time_grid.len() != self.n_ode_steps + 1 {
                violations.push(format!(
                    "time_grid has {} points; n_ode_steps={} requires {}",
                    self.time_grid.len(),
                    self.n_ode_steps,
                    self.n_ode_steps + 1
                ));
            }
            if self.time_grid.iter().any(|s| !s.is_finite()) {
                violations.push("time_grid contains non-finite points".to_string());
            } else {
                if self.time_grid.first() != Some(&0.0) {
                    violations.push("time_grid must start at exactly 0".to_string());
                }
                if self.time_grid.last() != Some(&1.0) {
                    violations.push("time_grid must end at exactly 1".to_string());
                }
                if self.time_grid.windows(2).any(|w| w[1] <= w[0]) {
                    violations.push("time_grid must be strictly increasing".to_string());
                }
            }
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(ItoError::ConfigInvalid { violations })
        }
    }

    /// The resolved integration grid (uniform when `time_grid` is empty).
    pub fn grid(&self) -> Vec<f64> {
        if self.time_grid.is_empty() {
            let n = self.n_ode_steps;
            (0..=n).map(|i| i as f64 / n as f64).collect()
        } else {
            self.time_grid.clone()
        }
    }
}

/// Static conditioning identity of a system: everything `ConditionInputs`
/// needs except the per-call lag and temperature.
#[derive(Debug, Clone, Copy)]
pub struct CondSource<'a> {
    pub tokens: &'a [String],
    pub external: Option<&'a ExternalEmbedding>,
    pub annotations: Option<&'a Annotations>,
}

impl<'a> CondSource<'a> {
    pub fn from_meta(meta: &'a SystemMeta) -> Self {
        CondSource {
            tokens: &meta.tokens,
            external: meta.external.as_ref(),
            annotations: meta.annotations.as_ref(),
        }
    }

    fn inputs(&self, delta_t: f64, temperature: f64) -> ConditionInputs<'a> {
        ConditionInputs {
            delta_t,
            temperature,
            tokens: self.tokens,
            external: self.external,
            annotations: self.annotations,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionDiagnostics {
    /// Frobenius norm of the velocity field at each ODE step, in step order.
    pub velocity_norms: Vec<f64>,
    /// Center-of-gravity norm of the end state before any re-centering.
    pub centering_drift: f64,
}

/// One generated transition end state with its integration diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Array2<f64>,
    pub diagnostics: TransitionDiagnostics,
}

/// Per-rollout-step summary kept alongside the frame buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub step: u64,
    pub mean_velocity_norm: f64,
    pub max_velocity_norm: f64,
    pub centering_drift: f64,
}

impl StepDiagnostics {
    fn summarize(step: u64, tr: &Transition) -> Self {
        let norms = &tr.diagnostics.velocity_norms;
        let mean = norms.iter().sum::<f64>() / norms.len() as f64;
        let max = norms.iter().cloned().fold(0.0, f64::max);
        StepDiagnostics {
            step,
            mean_velocity_norm: mean,
            max_velocity_norm: max,
            centering_drift: tr.diagnostics.centering_drift,
        }
    }
}

/// A chained trajectory of K+1 frames; frame 0 is the (possibly centered)
/// initial state and all frames are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult {
    pub frames: Vec<Array2<f64>>,
    pub diagnostics: Vec<StepDiagnostics>,
    pub delta_t: f64,
    pub temperature: f64,
}

impl RolloutResult {
    /// Repackages the frames in the reference trajectory format, with the
    /// sampling lag as the frame interval.
    pub fn to_trajectory(&self, system_id: &str) -> Trajectory {
        let n = self.frames[0].nrows();
        let d = self.frames[0].ncols();
        let mut frames = Array3::zeros((self.frames.len(), n, d));
        for (k, fr) in self.frames.iter().enumerate() {
            frames.index_axis_mut(Axis(0), k).assign(fr);
        }
        Trajectory {
            frames,
            frame_interval: self.delta_t,
            system_id: system_id.to_string(),
            temperature: self.temperature,
        }
    }

    /// The last `w` frames (fewer if the rollout is shorter).
    pub fn tail(&self, w: usize) -> &[Array2<f64>] {
        &self.frames[self.frames.len().saturating_sub(w)..]
    }
}

#[derive(Debug)]
pub struct EnsembleMember {
    pub id: usize,
    /// Derived root seed this member's per-step streams hang off.
    pub seed: u64,
    pub outcome: Result<RolloutResult>,
}

/// Outcome of an ensemble run. Individual members may have failed; the
/// ensemble as a whole only errors on invalid configuration.
#[derive(Debug)]
pub struct EnsembleResult {
    pub members: Vec<EnsembleMember>,
}

impl EnsembleResult {
    pub fn n_failed(&self) -> usize {
        self.members.iter().filter(|m| m.outcome.is_err()).count()
    }

    pub fn succeeded(&self) -> impl Iterator<Item = (usize, &RolloutResult)> {
        self.members
            .iter()
            .filter_map(|m| m.outcome.as_ref().ok().map(|r| (m.id, r)))
    }

    /// Last `w` frames of every successful member, flattened. With equal-length
    /// rollouts of at least `w + 1` frames this yields `w * n_ok` samples.
    pub fn tail_frames(&self, w: usize) -> Vec<ArrayView2<'_, f64>> {
        let mut out = Vec::new();
        for (_, r) in self.succeeded() {
            for fr in r.tail(w) {
                out.push(fr.view());
            }
        }
        out
    }
}

/// One ensemble of a temperature sweep. `warning` is set when the requested
/// temperature falls outside the trained conditioning range.
#[derive(Debug)]
pub struct TemperatureEnsemble {
    pub temperature: f64,
    pub warning: Option<String>,
    pub ensemble: EnsembleResult,
}

fn check_state_finite(x: &ArrayView2<f64>) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(ItoError::InvalidInput(
            "initial state contains non-finite coordinates".to_string(),
        ));
    }
    Ok(())
}

fn cog_norm(x: &Array2<f64>) -> f64 {
    let mean = x.mean_axis(Axis(0)).expect("at least one particle");
    mean.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Draws z_0 ~ N(0, I) row-major and applies explicit Euler steps
/// z += (s_i - s_{i-1}) * v(z, s_{i-1}). The caller supplies the velocity
/// field; steps are numbered from 1 in blowup reports.
fn integrate_flow<F>(
    shape: (usize, usize),
    grid: &[f64],
    re_center: bool,
    rng: &mut ChaCha20Rng,
    mut velocity: F,
) -> Result<Transition>
where
    F: FnMut(&ArrayView2<f64>, f64) -> Result<Array2<f64>>,
{
    let data: Vec<f64> = (0..shape.0 * shape.1)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    let mut z = Array2::from_shape_vec(shape, data).expect("shape matches draw count");

    let mut velocity_norms = Vec::with_capacity(grid.len() - 1);
    for i in 1..grid.len() {
        let step = i as u64;
        let s = grid[i - 1];
        let delta = grid[i] - grid[i - 1];
        let v = velocity(&z.view(), s).map_err(|e| match e {
            ItoError::NonFinite { location, detail } => ItoError::IntegrationBlowup {
                step,
                detail: format!("non-finite velocity in {location}: {detail}"),
            },
            other => other,
        })?;
        if v.dim() != shape {
            return Err(ItoError::ShapeMismatch {
                what: "velocity field output".to_string(),
                expected: format!("{} x {}", shape.0, shape.1),
                got: format!("{} x {}", v.nrows(), v.ncols()),
            });
        }
        velocity_norms.push(v.iter().map(|a| a * a).sum::<f64>().sqrt());
        z.scaled_add(delta, &v);
        if z.iter().any(|a| !a.is_finite()) {
            return Err(ItoError::IntegrationBlowup {
                step,
                detail: "state left the finite range".to_string(),
            });
        }
    }

    let centering_drift = cog_norm(&z);
    if re_center {
        z = remove_center_of_gravity(&z.view());
    }
    Ok(Transition {
        state: z,
        diagnostics: TransitionDiagnostics {
            velocity_norms,
            centering_drift,
        },
    })
}

/// Runs one transition from an already-centered (when applicable) state.
/// Conditioning is computed once, not per ODE step.
fn transition_from(
    params: &ModelParams,
    tables: &ConditionTables,
    x_cond: &Array2<f64>,
    cond: &CondSource<'_>,
    cfg: &SamplerConfig,
    grid: &[f64],
    rng: &mut ChaCha20Rng,
) -> Result<Transition> {
    let inputs = cond.inputs(cfg.delta_t, cfg.temperature);
    let features = assemble_condition_features(&x_cond.view(), &inputs, tables, &params.layout)?;
    let c = cond_forward(params, &x_cond.view(), &features.view())?;
    integrate_flow(x_cond.dim(), grid, cfg.re_center, rng, |z, s| {
        velocity_forward(params, z, s, &c.view())
    })
}

/// Draws one sample of x_{t+Δt} given x_0 from the learned transition
/// density. Deterministic for a fixed `cfg.seed`.
pub fn sample_transition(
    params: &ModelParams,
    x_0: &ArrayView2<f64>,
    cond: &CondSource<'_>,
    cfg: &SamplerConfig,
) -> Result<Transition> {
    cfg.validate()?;
    check_state_finite(x_0)?;
    let grid = cfg.grid();
    let tables = params.tables()?;
    let x_cond = if cfg.re_center {
        remove_center_of_gravity(x_0)
    } else {
        x_0.to_owned()
    };
    let mut rng = derive_rng(cfg.seed, "sample", &[]);
    transition_from(params, &tables, &x_cond, cond, cfg, &grid, &mut rng)
}

/// `sample_transition` with the velocity field replaced by a closure of
/// `(z, s, x_cond)`; the RNG is caller-supplied. Exists so integrator
/// behavior can be pinned down independently of any model.
pub fn sample_transition_with<F>(
    x_0: &ArrayView2<f64>,
    cfg: &SamplerConfig,
    rng: &mut ChaCha20Rng,
    velocity: &mut F,
) -> Result<Transition>
where
    F: FnMut(&ArrayView2<f64>, f64, &ArrayView2<f64>) -> Result<Array2<f64>>,
{
    cfg.validate()?;
    check_state_finite(x_0)?;
    let grid = cfg.grid();
    let x_cond = if cfg.re_center {
        remove_center_of_gravity(x_0)
    } else {
        x_0.to_owned()
    };
    integrate_flow(x_0.dim(), &grid, cfg.re_center, rng, |z, s| {
        velocity(z, s, &x_cond.view())
    })
}

/// Re-labels transition failures with the rollout step that hit them. Both
/// source variants already map to the numeric exit class.
fn with_rollout_step(step: u64, e: ItoError) -> ItoError {
    match e {
        ItoError::IntegrationBlowup { step: flow, detail } => ItoError::IntegrationBlowup {
            step,
            detail: format!("flow step {flow}: {detail}"),
        },
        ItoError::NonFinite { location, detail } => ItoError::IntegrationBlowup {
            step,
            detail: format!("non-finite value in {location}: {detail}"),
        },
        other => other,
    }
}

/// Chains `k` transitions, feeding each sample back as the next condition.
/// Step `j` draws from the substream `(cfg.seed, "rollout", j)`.
pub fn rollout(
    params: &ModelParams,
    x_0: &ArrayView2<f64>,
    cond: &CondSource<'_>,
    k: u64,
    cfg: &SamplerConfig,
) -> Result<RolloutResult> {
    cfg.validate()?;
    check_state_finite(x_0)?;
    let grid = cfg.grid();
    let tables = params.tables()?;
    let first = if cfg.re_center {
        remove_center_of_gravity(x_0)
    } else {
        x_0.to_owned()
    };

    let mut frames = Vec::with_capacity(k as usize + 1);
    let mut diagnostics = Vec::with_capacity(k as usize);
    frames.push(first);
    for step in 1..=k {
        let mut rng = derive_rng(cfg.seed, "rollout", &[step]);
        let x_prev = frames.last().expect("frame 0 present");
        let tr = transition_from(params, &tables, x_prev, cond, cfg, &grid, &mut rng)
            .map_err(|e| with_rollout_step(step, e))?;
        diagnostics.push(StepDiagnostics::summarize(step, &tr));
        frames.push(tr.state);
    }
    Ok(RolloutResult {
        frames,
        diagnostics,
        delta_t: cfg.delta_t,
        temperature: cfg.temperature,
    })
}

/// `rollout` with a velocity-field closure of `(z, s, x_cond)` in place of
/// the model, sharing the exact per-step stream layout.
pub fn rollout_with<F>(
    x_0: &ArrayView2<f64>,
    k: u64,
    cfg: &SamplerConfig,
    velocity: &mut F,
) -> Result<RolloutResult>
where
    F: FnMut(&ArrayView2<f64>, f64, &ArrayView2<f64>) -> Result<Array2<f64>>,
{
    cfg.validate()?;
    check_state_finite(x_0)?;
    let grid = cfg.grid();
    let first = if cfg.re_center {
        remove_center_of_gravity(x_0)
    } else {
        x_0.to_owned()
    };

    let mut frames = Vec::with_capacity(k as usize + 1);
    let mut diagnostics = Vec::with_capacity(k as usize);
    frames.push(first);
    for step in 1..=k {
        let mut rng = derive_rng(cfg.seed, "rollout", &[step]);
        let x_prev = frames.last().expect("frame 0 present");
        let tr = integrate_flow(x_prev.dim(), &grid, cfg.re_center, &mut rng, |z, s| {
            velocity(z, s, &x_prev.view())
        })
        .map_err(|e| with_rollout_step(step, e))?;
        diagnostics.push(StepDiagnostics::summarize(step, &tr));
        frames.push(tr.state);
    }
    Ok(RolloutResult {
        frames,
        diagnostics,
        delta_t: cfg.delta_t,
        temperature: cfg.temperature,
    })
}

/// Rolls out one trajectory per initial state on `workers` threads. Member
/// `i` runs under the root `derive_u64(cfg.seed, "ensemble", [i])`, so output
/// depends only on the member index, never on scheduling. Per-member failures
/// are reported in the result instead of aborting the ensemble.
pub fn ensemble_rollout(
    params: &ModelParams,
    initial: &[Array2<f64>],
    cond: &CondSource<'_>,
    k: u64,
    cfg: &SamplerConfig,
    workers: usize,
) -> Result<EnsembleResult> {
    cfg.validate()?;
    if initial.is_empty() {
        return Err(ItoError::EmptyInput(
            "ensemble needs at least one initial state".to_string(),
        ));
    }
    if workers == 0 {
        return Err(ItoError::InvalidInput("workers must be >= 1".to_string()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| ItoError::InvalidInput(format!("cannot build worker pool: {e}")))?;

    let members = pool.install(|| {
        initial
            .par_iter()
            .enumerate()
            .map(|(id, x_0)| {
                let seed = derive_u64(cfg.seed, "ensemble", &[id as u64]);
                let member_cfg = SamplerConfig {
                    seed,
                    ..cfg.clone()
                };
                EnsembleMember {
                    id,
                    seed,
                    outcome: rollout(params, &x_0.view(), cond, k, &member_cfg),
                }
            })
            .collect()
    });
    Ok(EnsembleResult { members })
}

/// Writes the per-member bookkeeping CSV: `trajectory_id,seed,status`.
pub fn write_ensemble_manifest(path: &Path, ensemble: &EnsembleResult) -> Result<()> {
    let io_err = |e| ItoError::io(path.display().to_string(), e);
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    writeln!(out, "trajectory_id,seed,status").map_err(io_err)?;
    for m in &ensemble.members {
        let status = match &m.outcome {
            Ok(_) => "ok".to_string(),
            // Keep the row at three columns whatever the message contains.
            Err(e) => format!("error: {}", e.to_string().replace('\n', " ").replace(',', ";")),
        };
        writeln!(out, "{},{},{}", m.id, m.seed, status).map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// Runs one ensemble per temperature from shared initial states, re-using the
/// same member streams at every temperature (common random numbers). A single
/// temperature therefore reproduces `ensemble_rollout` exactly. Temperatures
/// outside `trained_range` get a warning record, not a failure.
pub fn temperature_sweep(
    params: &ModelParams,
    initial: &[Array2<f64>],
    cond: &CondSource<'_>,
    temperatures: &[f64],
    trained_range: (f64, f64),
    k: u64,
    cfg: &SamplerConfig,
    workers: usize,
) -> Result<Vec<TemperatureEnsemble>> {
    if temperatures.is_empty() {
        return Err(ItoError::EmptyInput(
            "temperature sweep needs at least one temperature".to_string(),
        ));
    }
    let (lo, hi) = trained_range;
    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
        return Err(ItoError::InvalidInput(format!(
            "trained temperature range [{lo}, {hi}] is not a valid interval"
        )));
    }

    let mut out = Vec::with_capacity(temperatures.len());
    for &temperature in temperatures {
        let warning = if temperature < lo || temperature > hi {
            let msg = format!(
                "temperature {temperature} outside trained range [{lo}, {hi}]; \
                 extrapolating the conditioning"
            );
            log::warn!("{msg}");
            Some(msg)
        } else {
            None
        };
        let sweep_cfg = SamplerConfig {
            temperature,
            ..cfg.clone()
        };
        let ensemble = ensemble_rollout(params, initial, cond, k, &sweep_cfg, workers)?;
        out.push(TemperatureEnsemble {
            temperature,
            warning,
            ensemble,
        });
    }
    Ok(out)
}
