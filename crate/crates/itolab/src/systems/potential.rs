//! Toy potentials with analytic forces.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{ItoError, Result};

/// Mueller-Brown four-Gaussian surface, standard parameterization.
const MB_A: [f64; 4] = [-200.0, -100.0, -170.0, 15.0];
const MB_AA: [f64; 4] = [-1.0, -1.0, -6.5, 0.7];
const MB_BB: [f64; 4] = [0.0, 0.0, 11.0, 0.6];
const MB_CC: [f64; 4] = [-10.0, -10.0, -6.5, 0.7];
const MB_X0: [f64; 4] = [1.0, 0.0, -0.5, -1.0];
const MB_Y0: [f64; 4] = [0.0, 0.5, 1.5, 1.0];

/// Attractive pair in a bead chain contact map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Contact {
    pub i: usize,
    pub j: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum PotentialKind {
    /// U(x) = θ/2 |x − x0|², x0 broadcast over every coordinate.
    Harmonic { theta: f64, x0: f64 },
    /// U(x) = Σ_i a (x_i² − b)², independent per coordinate. Minima at
    /// x_i = ±√b, barrier height a·b².
    DoubleWell { a: f64, b: f64 },
    /// Standard 2D four-Gaussian surface; requires n_particles=1, dim=2.
    MuellerBrown,
    /// Chain of beads with harmonic bonds between neighbours and Gaussian
    /// contact wells of depth eps_c, width sigma_c, centered at distance r_c.
    BeadChain {
        k_bond: f64,
        r0: f64,
        contacts: Vec<Contact>,
        eps_c: f64,
        sigma_c: f64,
        r_c: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialSpec {
    pub kind: PotentialKind,
    pub n_particles: usize,
    pub dim: usize,
}

impl PotentialSpec {
    pub fn validate(&self) -> Result<()> {
        let mut violations = Vec::new();
        if self.n_particles == 0 {
            violations.push("n_particles must be >= 1".to_string());
        }
        if self.dim == 0 {
            violations.push("dim must be >= 1".to_string());
        }
        match &self.kind {
            PotentialKind::Harmonic { theta, .. } => {
                if *theta <= 0.0 {
                    violations.push("harmonic theta must be > 0".to_string());
                }
            }
            PotentialKind::DoubleWell { a, b } => {
                if *a <= 0.0 {
                    violations.push("double_well a must be > 0".to_string());
                }
                if *b <= 0.0 {
                    violations.push("double_well b must be > 0".to_string());
                }
            }
            PotentialKind::MuellerBrown => {
                if self.n_particles != 1 || self.dim != 2 {
                    violations.push(format!(
                        "mueller_brown requires n_particles=1, dim=2, got n_particles={}, dim={}",
                        self.n_particles, self.dim
                    ));
                }
            }
            PotentialKind::BeadChain {
                k_bond,
                r0,
                contacts,
                eps_c,
                sigma_c,
                r_c,
            } => {
                if self.n_particles < 2 {
                    violations.push("bead_chain requires n_particles >= 2".to_string());
                }
                if *k_bond <= 0.0 || *r0 <= 0.0 {
                    violations.push("bead_chain k_bond and r0 must be > 0".to_string());
                }
                if *eps_c < 0.0 || *sigma_c <= 0.0 || *r_c <= 0.0 {
                    violations
                        .push("bead_chain requires eps_c >= 0, sigma_c > 0, r_c > 0".to_string());
                }
                for c in contacts {
                    if c.i >= c.j || c.j >= self.n_particles {
                        violations.push(format!(
                            "contact ({}, {}) must satisfy i < j < n_particles",
                            c.i, c.j
                        ));
                    }
                }
            }
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(ItoError::ConfigInvalid { violations })
        }
    }

    fn check_shape(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.nrows() != self.n_particles || x.ncols() != self.dim {
            return Err(ItoError::ShapeMismatch {
                what: "configuration".to_string(),
                expected: format!("{} x {}", self.n_particles, self.dim),
                got: format!("{} x {}", x.nrows(), x.ncols()),
            });
        }
        Ok(())
    }
}

pub fn potential_energy(spec: &PotentialSpec, x: &ArrayView2<f64>) -> Result<f64> {
    spec.check_shape(x)?;
    Ok(match &spec.kind {
        PotentialKind::Harmonic { theta, x0 } => {
            0.5 * theta * x.iter().map(|v| (v - x0).powi(2)).sum::<f64>()
        }
        PotentialKind::DoubleWell { a, b } => {
            x.iter().map(|v| a * (v * v - b).powi(2)).sum::<f64>()
        }
        PotentialKind::MuellerBrown => {
            let (px, py) = (x[[0, 0]], x[[0, 1]]);
            let mut u = 0.0;
            for k in 0..4 {
                let dx = px - MB_X0[k];
                let dy = py - MB_Y0[k];
                u += MB_A[k]
                    * (MB_AA[k] * dx * dx + MB_BB[k] * dx * dy + MB_CC[k] * dy * dy).exp();
            }
            u
        }
        PotentialKind::BeadChain {
            k_bond,
            r0,
            contacts,
            eps_c,
            sigma_c,
            r_c,
        } => {
            let mut u = 0.0;
            for i in 0..spec.n_particles - 1 {
                let r = pair_distance(x, i, i + 1);
                u += 0.5 * k_bond * (r - r0).powi(2);
            }
            for c in contacts {
                let r = pair_distance(x, c.i, c.j);
                let g = (r - r_c) / sigma_c;
                u -= eps_c * (-0.5 * g * g).exp();
            }
            u
        }
    })
}

pub fn force(spec: &PotentialSpec, x: &ArrayView2<f64>) -> Result<Array2<f64>> {
    spec.check_shape(x)?;
    let mut f = Array2::zeros((spec.n_particles, spec.dim));
    match &spec.kind {
        PotentialKind::Harmonic { theta, x0 } => {
            f.zip_mut_with(x, |fi, &xi| *fi = -theta * (xi - x0));
        }
        PotentialKind::DoubleWell { a, b } => {
            f.zip_mut_with(x, |fi, &xi| *fi = -4.0 * a * xi * (xi * xi - b));
        }
        PotentialKind::MuellerBrown => {
            let (px, py) = (x[[0, 0]], x[[0, 1]]);
            let (mut gx, mut gy) = (0.0, 0.0);
            for k in 0..4 {
                let dx = px - MB_X0[k];
                let dy = py - MB_Y0[k];
                let e = MB_A[k]
                    * (MB_AA[k] * dx * dx + MB_BB[k] * dx * dy + MB_CC[k] * dy * dy).exp();
                gx += e * (2.0 * MB_AA[k] * dx + MB_BB[k] * dy);
                gy += e * (MB_BB[k] * dx + 2.0 * MB_CC[k] * dy);
            }
            f[[0, 0]] = -gx;
            f[[0, 1]] = -gy;
        }
        PotentialKind::BeadChain {
            k_bond,
            r0,
            contacts,
            eps_c,
            sigma_c,
            r_c,
        } => {
            for i in 0..spec.n_particles - 1 {
                // dU/dr for the bond, applied along the separation vector.
                add_pair_force(&mut f, x, i, i + 1, |r| k_bond * (r - r0));
            }
            for c in contacts {
                add_pair_force(&mut f, x, c.i, c.j, |r| {
                    let g = (r - r_c) / sigma_c;
                    eps_c * g / sigma_c * (-0.5 * g * g).exp()
                });
            }
        }
    }
    Ok(f)
}

fn pair_distance(x: &ArrayView2<f64>, i: usize, j: usize) -> f64 {
    let mut s = 0.0;
    for d in 0..x.ncols() {
        s += (x[[j, d]] - x[[i, d]]).powi(2);
    }
    s.sqrt()
}

/// Adds the force from a radial pair term with radial derivative dU/dr.
/// Coincident beads get zero force: the gradient direction is undefined there
/// and the configuration has measure zero under the dynamics.
fn add_pair_force(
    f: &mut Array2<f64>,
    x: &ArrayView2<f64>,
    i: usize,
    j: usize,
    du_dr: impl Fn(f64) -> f64,
) {
    let r = pair_distance(x, i, j);
    if r < 1e-12 {
        return;
    }
    let scale = du_dr(r) / r;
    for d in 0..x.ncols() {
        let sep = x[[j, d]] - x[[i, d]];
        f[[j, d]] -= scale * sep;
        f[[i, d]] += scale * sep;
    }
}
