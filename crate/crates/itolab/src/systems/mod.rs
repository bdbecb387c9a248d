//! Toy systems and reference Langevin simulation.

pub mod langevin;
pub mod potential;

use serde::{Deserialize, Serialize};

pub use langevin::{
    boltzmann_log_weight, ou_transition_moments, simulate_langevin, Integrator, LangevinConfig,
    Trajectory,
};
pub use potential::{force, potential_energy, Contact, PotentialKind, PotentialSpec};

/// A named toy system with the temperature range its training data covers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub id: String,
    pub potential: PotentialSpec,
    /// Inclusive range of temperatures represented in the reference data;
    /// sampling outside it is allowed but flagged.
    pub temp_range: (f64, f64),
}

impl SystemSpec {
    pub fn validate(&self) -> crate::Result<()> {
        self.potential.validate()?;
        if self.id.is_empty() {
            return Err(crate::ItoError::ConfigInvalid {
                violations: vec!["system id must be nonempty".to_string()],
            });
        }
        if !(self.temp_range.0 > 0.0 && self.temp_range.1 >= self.temp_range.0) {
            return Err(crate::ItoError::ConfigInvalid {
                violations: vec![format!(
                    "temp_range must satisfy 0 < lo <= hi, got ({}, {})",
                    self.temp_range.0, self.temp_range.1
                )],
            });
        }
        Ok(())
    }
}
