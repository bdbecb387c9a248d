//! Run configuration: one JSON document drives every pipeline stage.

use serde::{Deserialize, Serialize};

use crate::error::{ItoError, Result};
use crate::model::{ModelConfig, Precision};
use crate::systems::{Integrator, PotentialKind, PotentialSpec, SystemSpec};
use crate::training::TrainConfig;

/// Reference-simulation block: the potential plus the Langevin protocol the
/// trajectories are generated with. Per-run temperature and seed are filled
/// in by the simulate stage, so they are not part of this section.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub id: String,
    pub potential: PotentialSpec,
    /// Temperatures to simulate reference data at. The trained range is the
    /// min/max of this list.
    pub temperatures: Vec<f64>,
    /// Trajectories per temperature.
    pub n_trajectories: usize,
    pub timestep: f64,
    pub friction: f64,
    #[serde(default = "one")]
    pub k_b: f64,
    pub n_steps: u64,
    #[serde(default = "one_u64")]
    pub save_stride: u64,
    #[serde(default)]
    pub integrator: Integrator,
    /// Initial configuration (n_particles rows of dim entries); zeros if absent.
    #[serde(default)]
    pub x0_base: Option<Vec<Vec<f64>>>,
    /// Std of Gaussian noise added to the base configuration per trajectory.
    #[serde(default = "one")]
    pub x0_scale: f64,
    /// Leading frames of every trajectory dropped before training/analysis.
    #[serde(default)]
    pub burn_in_frames: usize,
    /// Remove the center of gravity from training inputs and targets. Only
    /// sound for translation-invariant potentials.
    #[serde(default)]
    pub center: bool,
    /// Per-particle sequence tokens; defaults to the same token everywhere.
    #[serde(default)]
    pub tokens: Option<Vec<String>>,
}

fn one() -> f64 {
    1.0
}

fn one_u64() -> u64 {
    1
}

impl SystemSection {
    pub fn temp_range(&self) -> (f64, f64) {
        let lo = self.temperatures.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = self.temperatures.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }

    pub fn frame_interval(&self) -> f64 {
        self.timestep * self.save_stride as f64
    }

    pub fn system_spec(&self) -> SystemSpec {
        SystemSpec {
            id: self.id.clone(),
            potential: self.potential.clone(),
            temp_range: self.temp_range(),
        }
    }

    fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if let Err(e) = self.potential.validate() {
            push_prefixed(&mut v, "system.potential", e);
        }
        if self.id.is_empty() {
            v.push("system.id must be non-empty".into());
        }
        if self.temperatures.is_empty() {
            v.push("system.temperatures must list at least one temperature".into());
        }
        for (i, t) in self.temperatures.iter().enumerate() {
            if !(t.is_finite() && *t > 0.0) {
                v.push(format!("system.temperatures[{i}] must be finite and > 0, got {t}"));
            }
        }
        if self.n_trajectories < 1 {
            v.push("system.n_trajectories must be >= 1".into());
        }
        if !(self.timestep > 0.0 && self.timestep.is_finite()) {
            v.push(format!("system.timestep must be finite and > 0, got {}", self.timestep));
        }
        if !(self.friction > 0.0 && self.friction.is_finite()) {
            v.push(format!("system.friction must be finite and > 0, got {}", self.friction));
        }
        if !(self.k_b > 0.0 && self.k_b.is_finite()) {
            v.push(format!("system.k_b must be finite and > 0, got {}", self.k_b));
        }
        if self.n_steps < 1 {
            v.push("system.n_steps must be >= 1".into());
        }
        if self.save_stride < 1 {
            v.push("system.save_stride must be >= 1".into());
        }
        if let Some(base) = &self.x0_base {
            if base.len() != self.potential.n_particles
                || base.iter().any(|row| row.len() != self.potential.dim)
            {
                v.push(format!(
                    "system.x0_base must be {} rows of {} coordinates",
                    self.potential.n_particles, self.potential.dim
                ));
            }
            if base.iter().flatten().any(|x| !x.is_finite()) {
                v.push("system.x0_base entries must be finite".into());
            }
        }
        if !(self.x0_scale >= 0.0 && self.x0_scale.is_finite()) {
            v.push(format!("system.x0_scale must be finite and >= 0, got {}", self.x0_scale));
        }
        let frames_per_traj = self.n_steps / self.save_stride + 1;
        if self.burn_in_frames as u64 + 2 > frames_per_traj {
            v.push(format!(
                "system.burn_in_frames = {} leaves fewer than 2 of the {} saved frames",
                self.burn_in_frames, frames_per_traj
            ));
        }
        if let Some(tokens) = &self.tokens {
            if tokens.len() != self.potential.n_particles {
                v.push(format!(
                    "system.tokens must have one token per particle ({}), got {}",
                    self.potential.n_particles,
                    tokens.len()
                ));
            }
            if tokens.iter().any(|t| t.is_empty()) {
                v.push("system.tokens entries must be non-empty".into());
            }
        }
        v
    }
}

/// Widths of the learned and sinusoidal conditioning features. The encoding
/// periods are derived from the training lag range and temperature range, so
/// they are not free knobs here.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureSection {
    pub token_dim: usize,
    pub dt_sin_dim: usize,
    pub temp_sin_dim: usize,
}

impl Default for FeatureSection {
    fn default() -> Self {
        FeatureSection { token_dim: 4, dt_sin_dim: 6, temp_sin_dim: 4 }
    }
}

impl FeatureSection {
    fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.token_dim < 1 {
            v.push("features.token_dim must be >= 1".into());
        }
        for (name, dim) in [("dt_sin_dim", self.dt_sin_dim), ("temp_sin_dim", self.temp_sin_dim)] {
            if dim < 2 || dim % 2 != 0 {
                v.push(format!("features.{name} must be even and >= 2, got {dim}"));
            }
        }
        v
    }
}

/// Surrogate sampling protocol: one-step draws, rollout length, and the tail
/// window used when pooling near-equilibrium model frames.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSection {
    #[serde(default = "default_ode_steps")]
    pub n_ode_steps: usize,
    /// Physical lag per surrogate step; becomes the model frame interval.
    pub delta_t: f64,
    /// Temperature the surrogate is conditioned on for sample/rollout/analyze.
    pub temperature: f64,
    /// Rollout ensemble size; also the number of one-step draws in `sample`.
    pub ensemble_size: usize,
    /// Rollout length in surrogate steps.
    pub n_steps: u64,
    /// Trailing frames per rollout pooled for equilibrium estimates.
    pub tail_window: usize,
}

fn default_ode_steps() -> usize {
    100
}

impl SampleSection {
    fn violations(&self, frame_interval: f64, delta_t_max: u64) -> Vec<String> {
        let mut v = Vec::new();
        if self.n_ode_steps < 1 {
            v.push("sample.n_ode_steps must be >= 1".into());
        }
        if !(self.delta_t > 0.0 && self.delta_t.is_finite()) {
            v.push(format!("sample.delta_t must be finite and > 0, got {}", self.delta_t));
        } else if frame_interval > 0.0 {
            let max_phys = delta_t_max as f64 * frame_interval;
            if self.delta_t > max_phys * (1.0 + 1e-12) {
                v.push(format!(
                    "sample.delta_t = {} exceeds the trained lag range ({} = train.delta_t_max \
                     frames of {})",
                    self.delta_t, max_phys, frame_interval
                ));
            }
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            v.push(format!("sample.temperature must be finite and > 0, got {}", self.temperature));
        }
        if self.ensemble_size < 1 {
            v.push("sample.ensemble_size must be >= 1".into());
        }
        if self.n_steps < 1 {
            v.push("sample.n_steps must be >= 1".into());
        }
        if self.tail_window < 1 || self.tail_window as u64 > self.n_steps + 1 {
            v.push(format!(
                "sample.tail_window must be in [1, n_steps + 1], got {}",
                self.tail_window
            ));
        }
        v
    }
}

/// Analysis protocol shared by `analyze` and `sweep`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeSection {
    /// TICA lag in reference frames.
    pub tica_lag: usize,
    #[serde(default = "default_tica_components")]
    pub n_tica_components: usize,
    /// Regularization added to the instantaneous covariance; scaled default
    /// when absent.
    #[serde(default)]
    pub tica_epsilon: Option<f64>,
    /// Histogram bins per FES axis; one or two axes.
    pub fes_bins: Vec<usize>,
    /// k-means microstates.
    #[serde(default = "default_clusters")]
    pub n_clusters: usize,
    #[serde(default = "default_kmeans_iters")]
    pub kmeans_max_iter: usize,
    /// MSM lag in frames of whichever trajectory set is being counted.
    pub msm_lag: usize,
    /// Minimum spectral gap for the two-state split.
    #[serde(default = "default_min_gap")]
    pub pcca_min_gap: f64,
    #[serde(default = "default_posterior_samples")]
    pub n_posterior_samples: usize,
}

fn default_tica_components() -> usize {
    4
}

fn default_clusters() -> usize {
    100
}

fn default_kmeans_iters() -> usize {
    200
}

fn default_min_gap() -> f64 {
    0.01
}

fn default_posterior_samples() -> usize {
    100
}

impl AnalyzeSection {
    fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.tica_lag < 1 {
            v.push("analyze.tica_lag must be >= 1".into());
        }
        if self.n_tica_components < 1 {
            v.push("analyze.n_tica_components must be >= 1".into());
        }
        if let Some(eps) = self.tica_epsilon {
            if !(eps >= 0.0 && eps.is_finite()) {
                v.push(format!("analyze.tica_epsilon must be finite and >= 0, got {eps}"));
            }
        }
        if self.fes_bins.is_empty() || self.fes_bins.len() > 2 {
            v.push(format!("analyze.fes_bins must have 1 or 2 axes, got {}", self.fes_bins.len()));
        }
        for (i, b) in self.fes_bins.iter().enumerate() {
            if *b < 2 {
                v.push(format!("analyze.fes_bins[{i}] must be >= 2, got {b}"));
            }
        }
        if self.fes_bins.len() > self.n_tica_components {
            v.push(format!(
                "analyze.fes_bins has {} axes but only {} TICA components are kept",
                self.fes_bins.len(),
                self.n_tica_components
            ));
        }
        if self.n_clusters < 2 {
            v.push("analyze.n_clusters must be >= 2".into());
        }
        if self.kmeans_max_iter < 1 {
            v.push("analyze.kmeans_max_iter must be >= 1".into());
        }
        if self.msm_lag < 1 {
            v.push("analyze.msm_lag must be >= 1".into());
        }
        if !(self.pcca_min_gap >= 0.0 && self.pcca_min_gap.is_finite()) {
            v.push(format!(
                "analyze.pcca_min_gap must be finite and >= 0, got {}",
                self.pcca_min_gap
            ));
        }
        if self.n_posterior_samples < 2 {
            v.push("analyze.n_posterior_samples must be >= 2".into());
        }
        v
    }
}

/// Temperatures for the transferability sweep.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub temperatures: Vec<f64>,
}

impl SweepSection {
    fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (i, t) in self.temperatures.iter().enumerate() {
            if !(t.is_finite() && *t > 0.0) {
                v.push(format!("sweep.temperatures[{i}] must be finite and > 0, got {t}"));
            }
        }
        v
    }
}

/// The whole run in one document. Every stage receives the same config; the
/// root seed is the only source of randomness across the pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemSection,
    #[serde(default)]
    pub features: FeatureSection,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub sample: SampleSection,
    pub analyze: AnalyzeSection,
    #[serde(default)]
    pub sweep: SweepSection,
    pub seed: u64,
}

fn push_prefixed(out: &mut Vec<String>, prefix: &str, err: ItoError) {
    match err {
        ItoError::ConfigInvalid { violations } => {
            out.extend(violations.into_iter().map(|v| format!("{prefix}: {v}")));
        }
        other => out.push(format!("{prefix}: {other}")),
    }
}

impl RunConfig {
    /// Collects every violation across all sections rather than stopping at
    /// the first, so a bad config is fixable in one pass.
    pub fn validate(&self) -> Result<()> {
        let mut v = self.system.violations();
        v.extend(self.features.violations());
        if let Err(e) = self.model.validate() {
            push_prefixed(&mut v, "model", e);
        }
        if self.model.dim != self.potential_dim() {
            v.push(format!(
                "model.dim = {} must match the potential dimension {}",
                self.model.dim,
                self.potential_dim()
            ));
        }
        if let Err(e) = self.train.validate() {
            push_prefixed(&mut v, "train", e);
        }
        v.extend(self.sample.violations(self.system.frame_interval(), self.train.delta_t_max));
        v.extend(self.analyze.violations());
        v.extend(self.sweep.violations());
        if v.is_empty() {
            Ok(())
        } else {
            Err(ItoError::ConfigInvalid { violations: v })
        }
    }

    fn potential_dim(&self) -> usize {
        self.system.potential.dim
    }

    /// Per-particle tokens after applying the all-same default.
    pub fn resolved_tokens(&self) -> Vec<String> {
        match &self.system.tokens {
            Some(t) => t.clone(),
            None => vec!["a".to_string(); self.system.potential.n_particles],
        }
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| ItoError::ConfigInvalid {
            violations: vec![format!("config does not parse: {e}")],
        })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

pub const PRESET_NAMES: [&str; 4] = ["ou", "double_well", "mueller_brown", "bead_chain_8"];

/// Built-in configurations for the toy systems. Each is a complete, valid
/// run; `--preset NAME` uses one in place of a config file.
pub fn preset(name: &str) -> Result<RunConfig> {
    let cfg = match name {
        "ou" => ou_preset(),
        "double_well" => double_well_preset(),
        "mueller_brown" => mueller_brown_preset(),
        "bead_chain_8" => bead_chain_8_preset(),
        other => {
            return Err(ItoError::ConfigInvalid {
                violations: vec![format!(
                    "unknown preset {other:?}; available: {}",
                    PRESET_NAMES.join(", ")
                )],
            })
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

fn base_model(dim: usize) -> ModelConfig {
    ModelConfig {
        dim,
        residue_repr_dim: 16,
        cond_dim: 12,
        hidden_dim: 24,
        n_attention_heads: 2,
        n_layers_fc: 2,
        n_layers_fv: 2,
        use_pair_bias: false,
        s_sin_dim: 6,
        rbf_bins: 8,
        r_max: 4.0,
        precision: Precision::Single,
    }
}

fn ou_preset() -> RunConfig {
    RunConfig {
        system: SystemSection {
            id: "ou".into(),
            potential: PotentialSpec {
                kind: PotentialKind::Harmonic { theta: 1.0, x0: 0.0 },
                n_particles: 1,
                dim: 1,
            },
            temperatures: vec![1.0],
            n_trajectories: 64,
            timestep: 0.01,
            friction: 1.0,
            k_b: 1.0,
            n_steps: 19_998,
            save_stride: 2,
            integrator: Integrator::EulerMaruyama,
            x0_base: None,
            x0_scale: 1.0,
            burn_in_frames: 0,
            center: false,
            tokens: None,
        },
        features: FeatureSection::default(),
        model: ModelConfig { residue_repr_dim: 8, cond_dim: 8, hidden_dim: 16, ..base_model(1) },
        train: TrainConfig {
            batch_size: 64,
            delta_t_max: 32,
            total_steps: 6_000,
            ..TrainConfig::default()
        },
        sample: SampleSection {
            n_ode_steps: 100,
            delta_t: 0.16,
            temperature: 1.0,
            ensemble_size: 64,
            n_steps: 200,
            tail_window: 10,
        },
        analyze: AnalyzeSection {
            tica_lag: 10,
            n_tica_components: 1,
            tica_epsilon: None,
            fes_bins: vec![50],
            n_clusters: 30,
            kmeans_max_iter: 200,
            msm_lag: 10,
            pcca_min_gap: 0.01,
            n_posterior_samples: 100,
        },
        sweep: SweepSection { temperatures: vec![0.7, 1.0, 1.3] },
        seed: 2026,
    }
}

fn double_well_preset() -> RunConfig {
    RunConfig {
        system: SystemSection {
            id: "double_well".into(),
            potential: PotentialSpec {
                kind: PotentialKind::DoubleWell { a: 1.0, b: 1.0 },
                n_particles: 1,
                dim: 1,
            },
            temperatures: vec![0.8, 1.2],
            n_trajectories: 2,
            timestep: 0.005,
            friction: 1.0,
            k_b: 1.0,
            n_steps: 100_000,
            save_stride: 10,
            integrator: Integrator::EulerMaruyama,
            x0_base: Some(vec![vec![1.0]]),
            x0_scale: 0.3,
            burn_in_frames: 100,
            center: false,
            tokens: None,
        },
        features: FeatureSection::default(),
        model: base_model(1),
        train: TrainConfig {
            batch_size: 64,
            delta_t_max: 10,
            learning_rate: 3e-3,
            clip_threshold: 1.0,
            total_steps: 12_000,
            ..TrainConfig::default()
        },
        sample: SampleSection {
            n_ode_steps: 50,
            delta_t: 0.25,
            temperature: 1.0,
            ensemble_size: 200,
            n_steps: 400,
            tail_window: 10,
        },
        analyze: AnalyzeSection {
            tica_lag: 10,
            n_tica_components: 1,
            tica_epsilon: None,
            fes_bins: vec![60],
            n_clusters: 40,
            kmeans_max_iter: 200,
            msm_lag: 4,
            pcca_min_gap: 0.05,
            n_posterior_samples: 100,
        },
        sweep: SweepSection { temperatures: vec![0.6, 0.8, 1.0, 1.2, 1.4] },
        seed: 2026,
    }
}

fn mueller_brown_preset() -> RunConfig {
    RunConfig {
        system: SystemSection {
            id: "mueller_brown".into(),
            potential: PotentialSpec {
                kind: PotentialKind::MuellerBrown,
                n_particles: 1,
                dim: 2,
            },
            temperatures: vec![15.0],
            n_trajectories: 4,
            timestep: 1e-4,
            friction: 1.0,
            k_b: 1.0,
            n_steps: 200_000,
            save_stride: 20,
            integrator: Integrator::EulerMaruyama,
            x0_base: Some(vec![vec![-0.558, 1.442]]),
            x0_scale: 0.05,
            burn_in_frames: 200,
            center: false,
            tokens: None,
        },
        features: FeatureSection::default(),
        model: ModelConfig { r_max: 3.0, ..base_model(2) },
        train: TrainConfig {
            batch_size: 64,
            delta_t_max: 8,
            total_steps: 10_000,
            ..TrainConfig::default()
        },
        sample: SampleSection {
            n_ode_steps: 100,
            delta_t: 0.008,
            temperature: 15.0,
            ensemble_size: 100,
            n_steps: 300,
            tail_window: 10,
        },
        analyze: AnalyzeSection {
            tica_lag: 5,
            n_tica_components: 2,
            tica_epsilon: None,
            fes_bins: vec![40, 40],
            n_clusters: 60,
            kmeans_max_iter: 200,
            msm_lag: 5,
            pcca_min_gap: 0.01,
            n_posterior_samples: 100,
        },
        sweep: SweepSection { temperatures: vec![12.0, 15.0, 18.0] },
        seed: 2026,
    }
}


fn bead_chain_8_preset() -> RunConfig {
    let n = 8;
    RunConfig {
        system: SystemSection {
            id: "bead_chain_8".into(),
            potential: PotentialSpec {
                kind: PotentialKind::BeadChain {
                    k_bond: 50.0,
                    r0: 1.0,
                    contacts: vec![
                        crate::systems::Contact { i: 0, j: n - 1 },
                        crate::systems::Contact { i: 1, j: n - 2 },
                    ],
                    eps_c: 2.0,
                    sigma_c: 0.3,
                    r_c: 1.2,
                },
                n_particles: n,
                dim: 3,
            },
            temperatures: vec![1.0],
            n_trajectories: 2,
            timestep: 0.002,
            friction: 1.0,
            k_b: 1.0,
            n_steps: 100_000,
            save_stride: 10,
            integrator: Integrator::EulerMaruyama,
            x0_base: Some((0..n).map(|i| vec![i as f64, 0.0, 0.0]).collect()),
            x0_scale: 0.05,
            burn_in_frames: 200,
            center: true,
            tokens: Some((0..n).map(|i| if i % 2 == 0 { "a" } else { "b" }.into()).collect()),
        },
        features: FeatureSection::default(),
        model: ModelConfig { use_pair_bias: true, r_max: 8.0, ..base_model(3) },
        train: TrainConfig {
            batch_size: 32,
            delta_t_max: 8,
            total_steps: 8_000,
            ..TrainConfig::default()
        },
        sample: SampleSection {
            n_ode_steps: 50,
            delta_t: 0.08,
            temperature: 1.0,
            ensemble_size: 50,
            n_steps: 200,
            tail_window: 10,
        },
        analyze: AnalyzeSection {
            tica_lag: 10,
            n_tica_components: 2,
            tica_epsilon: None,
            fes_bins: vec![30, 30],
            n_clusters: 50,
            kmeans_max_iter: 200,
            msm_lag: 5,
            pcca_min_gap: 0.0,
            n_posterior_samples: 100,
        },
        sweep: SweepSection { temperatures: vec![0.8, 1.0, 1.2] },
        seed: 2026,
    }
}
