//! Langevin integration of the toy potentials.

use ndarray::{Array2, Array3, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ItoError, Result};
use crate::rng::derive_rng;
use crate::systems::potential::{force, potential_energy, PotentialSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    /// Overdamped Euler-Maruyama: x += (τ/γ)F + sqrt(2 k_B T τ/γ) ξ.
    #[default]
    EulerMaruyama,
    /// Underdamped BAOAB splitting with unit mass.
    Baoab,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LangevinConfig {
    pub timestep: f64,
    pub friction: f64,
    pub temperature: f64,
    #[serde(default = "default_k_b")]
    pub k_b: f64,
    pub seed: u64,
    pub n_steps: u64,
    #[serde(default = "default_save_stride")]
    pub save_stride: u64,
    #[serde(default)]
    pub integrator: Integrator,
}

fn default_k_b() -> f64 {
    1.0
}

fn default_save_stride() -> u64 {
    1
}

impl LangevinConfig {
    pub fn validate(&self) -> Result<()> {
        let mut violations = Vec::new();
        if !(self.timestep > 0.0) {
            violations.push(format!("timestep must be > 0, got {}", self.timestep));
        }
        if !(self.friction > 0.0) {
            violations.push(format!("friction must be > 0, got {}", self.friction));
        }
        if !(self.temperature > 0.0) {
            violations.push(format!("temperature must be > 0, got {}", self.temperature));
        }
        if !(self.k_b > 0.0) {
            violations.push(format!("k_b must be > 0, got {}", self.k_b));
        }
        if self.save_stride < 1 {
            violations.push("save_stride must be >= 1".to_string());
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(ItoError::ConfigInvalid { violations })
        }
    }
}

/// Time-ordered configurations saved every `frame_interval` time units.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// M × n_particles × dim.
    pub frames: Array3<f64>,
    pub frame_interval: f64,
    pub system_id: String,
    pub temperature: f64,
}

impl Trajectory {
    pub fn n_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn n_particles(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn frame(&self, i: usize) -> ArrayView2<'_, f64> {
        self.frames.index_axis(ndarray::Axis(0), i)
    }

    /// Checks the invariants required of training data.
    pub fn validate(&self) -> Result<()> {
        if self.n_frames() < 2 {
            return Err(ItoError::InvalidInput(format!(
                "trajectory '{}' has {} frame(s); at least 2 required",
                self.system_id,
                self.n_frames()
            )));
        }
        if !(self.frame_interval > 0.0) {
            return Err(ItoError::InvalidInput(format!(
                "trajectory '{}' has non-positive frame_interval {}",
                self.system_id, self.frame_interval
            )));
        }
        if let Some((idx, _)) = self.frames.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            let frame = idx / (self.n_particles() * self.dim());
            return Err(ItoError::NonFinite {
                location: format!("trajectory '{}'", self.system_id),
                detail: format!("non-finite coordinate in frame {frame}"),
            });
        }
        Ok(())
    }
}

/// Integrates the configured Langevin scheme and saves every
/// `save_stride`-th step, always including the initial configuration.
pub fn simulate_langevin(
    spec: &PotentialSpec,
    config: &LangevinConfig,
    x0: &ArrayView2<f64>,
    system_id: &str,
) -> Result<Trajectory> {
    spec.validate()?;
    config.validate()?;
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(ItoError::InvalidInput(
            "initial configuration contains non-finite coordinates".to_string(),
        ));
    }
    // Shape check up front so errors surface before integration.
    potential_energy(spec, x0)?;

    let (n, d) = (spec.n_particles, spec.dim);
    let n_frames = (config.n_steps / config.save_stride) as usize + 1;
    let mut frames = Array3::zeros((n_frames, n, d));
    frames.index_axis_mut(ndarray::Axis(0), 0).assign(x0);

    let mut rng = derive_rng(config.seed, "langevin", &[]);
    let mut x = x0.to_owned();
    let tau = config.timestep;
    let kt = config.k_b * config.temperature;

    let mut velocity = match config.integrator {
        Integrator::EulerMaruyama => None,
        Integrator::Baoab => {
            let sigma_v = kt.sqrt();
            Some(Array2::from_shape_fn((n, d), |_| {
                sigma_v * rng.sample::<f64, _>(StandardNormal)
            }))
        }
    };

    let em_noise = (2.0 * kt * tau / config.friction).sqrt();
    let baoab_c1 = (-config.friction * tau).exp();
    let baoab_c2 = (kt * (1.0 - baoab_c1 * baoab_c1)).sqrt();
    let mut f = force(spec, &x.view())?;

    let mut saved = 1usize;
    for step in 1..=config.n_steps {
        match (&config.integrator, velocity.as_mut()) {
            (Integrator::EulerMaruyama, _) => {
                for p in 0..n {
                    for q in 0..d {
                        let xi: f64 = rng.sample(StandardNormal);
                        x[[p, q]] += tau / config.friction * f[[p, q]] + em_noise * xi;
                    }
                }
                check_finite(&x, step)?;
                f = force(spec, &x.view())?;
            }
            (Integrator::Baoab, Some(v)) => {
                for p in 0..n {
                    for q in 0..d {
                        v[[p, q]] += 0.5 * tau * f[[p, q]];
                        x[[p, q]] += 0.5 * tau * v[[p, q]];
                    }
                }
                for p in 0..n {
                    for q in 0..d {
                        let xi: f64 = rng.sample(StandardNormal);
                        v[[p, q]] = baoab_c1 * v[[p, q]] + baoab_c2 * xi;
                        x[[p, q]] += 0.5 * tau * v[[p, q]];
                    }
                }
                check_finite(&x, step)?;
                f = force(spec, &x.view())?;
                for p in 0..n {
                    for q in 0..d {
                        v[[p, q]] += 0.5 * tau * f[[p, q]];
                    }
                }
            }
            (Integrator::Baoab, None) => unreachable!(),
        }

        if step % config.save_stride == 0 {
            let u = potential_energy(spec, &x.view())?;
            if !u.is_finite() {
                return Err(ItoError::IntegrationBlowup {
                    step,
                    detail: format!("potential energy became {u}"),
                });
            }
            frames.index_axis_mut(ndarray::Axis(0), saved).assign(&x);
            saved += 1;
        }
    }

    Ok(Trajectory {
        frames,
        frame_interval: tau * config.save_stride as f64,
        system_id: system_id.to_string(),
        temperature: config.temperature,
    })
}

fn check_finite(x: &Array2<f64>, step: u64) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(ItoError::IntegrationBlowup {
            step,
            detail: "non-finite coordinate after update".to_string(),
        });
    }
    Ok(())
}

/// Analytic conditional moments of the overdamped harmonic (OU) process:
/// mean multiplier e^{−(θ/γ)Δt} and conditional variance
/// (k_B T/θ)(1 − e^{−2(θ/γ)Δt}).
pub fn ou_transition_moments(
    theta: f64,
    gamma: f64,
    k_b: f64,
    temperature: f64,
    delta_t: f64,
) -> Result<(f64, f64)> {
    if !(theta > 0.0 && gamma > 0.0 && k_b > 0.0 && temperature > 0.0 && delta_t >= 0.0) {
        return Err(ItoError::InvalidInput(format!(
            "ou_transition_moments requires positive parameters and delta_t >= 0, got \
             theta={theta}, gamma={gamma}, k_b={k_b}, temperature={temperature}, delta_t={delta_t}"
        )));
    }
    let decay = (-theta / gamma * delta_t).exp();
    let variance = k_b * temperature / theta * (1.0 - decay * decay);
    Ok((decay, variance))
}

/// log μ(x) up to the normalizer: −U(x)/(k_B T).
pub fn boltzmann_log_weight(
    spec: &PotentialSpec,
    x: &ArrayView2<f64>,
    temperature: f64,
    k_b: f64,
) -> Result<f64> {
    if !(temperature > 0.0) {
        return Err(ItoError::InvalidInput(format!(
            "temperature must be > 0, got {temperature}"
        )));
    }
    if !(k_b > 0.0) {
        return Err(ItoError::InvalidInput(format!("k_b must be > 0, got {k_b}")));
    }
    Ok(-potential_energy(spec, x)? / (k_b * temperature))
}
