//! Two-stage conditioning/velocity model with named parameter tensors.

pub mod checkpoint;
pub mod forward;

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{ConditionTables, FeatureLayout, NominalTable};
use crate::error::{ItoError, Result};
use crate::rng::derive_rng;

pub use forward::{
    build_cond_graph, build_sample_graph, build_velocity_graph, cond_forward, pair_bias,
    velocity_forward, GraphOps, Net, Ops, ParamNodes, ValueOps,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    /// Parameters are kept on the single-precision grid after every update,
    /// so checkpoints round-trip bit-exactly. Arithmetic is still f64.
    #[default]
    Single,
    /// No rounding; used for gradient checking.
    Double,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Spatial dimension of the system the model is built for.
    pub dim: usize,
    pub residue_repr_dim: usize,
    pub cond_dim: usize,
    /// Attention width inside blocks.
    pub hidden_dim: usize,
    pub n_attention_heads: usize,
    pub n_layers_fc: usize,
    pub n_layers_fv: usize,
    pub use_pair_bias: bool,
    /// Sinusoidal width for the flow time s.
    pub s_sin_dim: usize,
    pub rbf_bins: usize,
    /// Upper end of the radial-basis center range.
    pub r_max: f64,
    #[serde(default)]
    pub precision: Precision,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let mut violations = Vec::new();
        for (name, v) in [
            ("dim", self.dim),
            ("residue_repr_dim", self.residue_repr_dim),
            ("cond_dim", self.cond_dim),
            ("hidden_dim", self.hidden_dim),
            ("n_attention_heads", self.n_attention_heads),
            ("n_layers_fc", self.n_layers_fc),
            ("n_layers_fv", self.n_layers_fv),
        ] {
            if v == 0 {
                violations.push(format!("{name} must be >= 1"));
            }
        }
        if self.n_attention_heads > 0 && self.hidden_dim % self.n_attention_heads != 0 {
            violations.push(format!(
                "n_attention_heads={} must divide hidden_dim={}",
                self.n_attention_heads, self.hidden_dim
            ));
        }
        if self.s_sin_dim < 2 || self.s_sin_dim % 2 != 0 {
            violations.push(format!(
                "s_sin_dim must be even and >= 2, got {}",
                self.s_sin_dim
            ));
        }
        if self.use_pair_bias {
            if self.rbf_bins < 2 {
                violations.push(format!(
                    "rbf_bins must be >= 2 with pair bias enabled, got {}",
                    self.rbf_bins
                ));
            }
            if !(self.r_max > 0.0) {
                violations.push(format!("r_max must be > 0, got {}", self.r_max));
            }
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(ItoError::ConfigInvalid { violations })
        }
    }
}

/// Named-tensor inventory implied by a config and feature layout. The init,
/// validation, and checkpoint paths all derive from this single list.
pub fn expected_shapes(
    config: &ModelConfig,
    layout: &FeatureLayout,
) -> Vec<(String, (usize, usize))> {
    let mut shapes = Vec::new();
    shapes.push((
        "cond.seq".to_string(),
        (layout.seq_vocab.len(), layout.token_dim),
    ));
    if !layout.s_llm_vocab.is_empty() {
        shapes.push((
            "cond.s_llm".to_string(),
            (layout.s_llm_vocab.len(), layout.annotation_dim),
        ));
    }
    if !layout.c_llm_vocab.is_empty() {
        shapes.push((
            "cond.c_llm".to_string(),
            (layout.c_llm_vocab.len(), layout.annotation_dim),
        ));
    }

    let r = config.residue_repr_dim;
    let h = config.hidden_dim;
    let mut push_net = |net: &str, n_layers: usize, in_width: usize, out_width: usize| {
        shapes.push((format!("{net}.in.w"), (in_width, r)));
        shapes.push((format!("{net}.in.b"), (1, r)));
        for i in 0..n_layers {
            shapes.push((format!("{net}.b{i}.w1"), (r, h)));
            shapes.push((format!("{net}.b{i}.b1"), (1, h)));
            for proj in ["wq", "wk", "wv", "wo"] {
                shapes.push((format!("{net}.b{i}.{proj}"), (h, h)));
            }
            shapes.push((format!("{net}.b{i}.bo"), (1, h)));
            shapes.push((format!("{net}.b{i}.w2"), (h, r)));
            shapes.push((format!("{net}.b{i}.b2"), (1, r)));
            if config.use_pair_bias {
                shapes.push((
                    format!("{net}.b{i}.prbf"),
                    (config.rbf_bins, config.n_attention_heads),
                ));
                shapes.push((format!("{net}.b{i}.psep"), (1, config.n_attention_heads)));
            }
        }
        shapes.push((format!("{net}.out.w"), (r, out_width)));
        shapes.push((format!("{net}.out.b"), (1, out_width)));
    };

    let fc_in = config.dim + layout.width();
    push_net("fc", config.n_layers_fc, fc_in, config.cond_dim);
    let fv_in = config.dim + config.s_sin_dim + config.cond_dim;
    push_net("fv", config.n_layers_fv, fv_in, config.dim);
    shapes
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub layout: FeatureLayout,
    tensors: BTreeMap<String, Array2<f64>>,
}

impl ModelParams {
    /// Fan-in-uniform init; the f_v output head and the pair
    /// sequence-separation projections start at zero.
    pub fn init(config: ModelConfig, layout: FeatureLayout, seed: u64) -> Result<Self> {
        config.validate()?;
        layout.validate()?;
        let mut rng = derive_rng(seed, "model-init", &[]);
        let mut tensors = BTreeMap::new();
        for (name, (rows, cols)) in expected_shapes(&config, &layout) {
            let zero_init = name == "fv.out.w"
                || name.ends_with(".b")
                || name.ends_with(".b1")
                || name.ends_with(".b2")
                || name.ends_with(".bo")
                || name.ends_with(".psep");
            let tensor = if zero_init {
                Array2::zeros((rows, cols))
            } else if name.starts_with("cond.") {
                Array2::from_shape_fn((rows, cols), |_| rng.random_range(-0.1..0.1))
            } else {
                let bound = 1.0 / (rows as f64).sqrt();
                Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
            };
            tensors.insert(name, tensor);
        }
        let mut params = ModelParams {
            config,
            layout,
            tensors,
        };
        if params.config.precision == Precision::Single {
            params.round_to_single();
        }
        Ok(params)
    }

    pub fn tensor(&self, name: &str) -> Result<&Array2<f64>> {
        self.tensors
            .get(name)
            .ok_or_else(|| ItoError::InvalidInput(format!("unknown parameter tensor '{name}'")))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Array2<f64>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| ItoError::InvalidInput(format!("unknown parameter tensor '{name}'")))
    }

    pub fn tensors(&self) -> &BTreeMap<String, Array2<f64>> {
        &self.tensors
    }

    pub(crate) fn from_tensors(
        config: ModelConfig,
        layout: FeatureLayout,
        tensors: BTreeMap<String, Array2<f64>>,
    ) -> Result<Self> {
        let params = ModelParams {
            config,
            layout,
            tensors,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn n_params(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Snap every parameter onto the f32 grid (kept in f64 storage).
    pub fn round_to_single(&mut self) {
        for tensor in self.tensors.values_mut() {
            tensor.mapv_inplace(|v| v as f32 as f64);
        }
    }

    /// Learnable tables materialized for the plain assembly path.
    pub fn tables(&self) -> Result<ConditionTables> {
        let seq = NominalTable {
            name: "seq".to_string(),
            vocabulary: self.layout.seq_vocab.clone(),
            embedding: self.tensor("cond.seq")?.clone(),
        };
        let s_llm = if self.layout.s_llm_vocab.is_empty() {
            None
        } else {
            Some(NominalTable {
                name: "s_llm".to_string(),
                vocabulary: self.layout.s_llm_vocab.clone(),
                embedding: self.tensor("cond.s_llm")?.clone(),
            })
        };
        let c_llm = if self.layout.c_llm_vocab.is_empty() {
            None
        } else {
            Some(NominalTable {
                name: "c_llm".to_string(),
                vocabulary: self.layout.c_llm_vocab.clone(),
                embedding: self.tensor("cond.c_llm")?.clone(),
            })
        };
        Ok(ConditionTables { seq, s_llm, c_llm })
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.layout.validate()?;
        let expected = expected_shapes(&self.config, &self.layout);
        if expected.len() != self.tensors.len() {
            return Err(ItoError::ShapeMismatch {
                what: "parameter inventory".to_string(),
                expected: format!("{} tensors", expected.len()),
                got: format!("{} tensors", self.tensors.len()),
            });
        }
        for (name, (rows, cols)) in expected {
            let t = self.tensor(&name)?;
            if t.nrows() != rows || t.ncols() != cols {
                return Err(ItoError::ShapeMismatch {
                    what: format!("parameter '{name}'"),
                    expected: format!("{rows} x {cols}"),
                    got: format!("{} x {}", t.nrows(), t.ncols()),
                });
            }
            if t.iter().any(|v| !v.is_finite()) {
                return Err(ItoError::NonFinite {
                    location: format!("parameter '{name}'"),
                    detail: "non-finite entry".to_string(),
                });
            }
        }
        Ok(())
    }
}

/// One gradient tensor per parameter name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradientSet {
    pub tensors: BTreeMap<String, Array2<f64>>,
}

impl GradientSet {
    pub fn zeros_like(params: &ModelParams) -> Self {
        GradientSet {
            tensors: params
                .tensors()
                .iter()
                .map(|(name, t)| (name.clone(), Array2::zeros(t.raw_dim())))
                .collect(),
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors
            .values()
            .map(|t| t.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn validate_against(&self, params: &ModelParams) -> Result<()> {
        if self.tensors.len() != params.tensors().len() {
            return Err(ItoError::ShapeMismatch {
                what: "gradient set".to_string(),
                expected: format!("{} tensors", params.tensors().len()),
                got: format!("{} tensors", self.tensors.len()),
            });
        }
        for (name, g) in &self.tensors {
            let p = params.tensor(name)?;
            if g.raw_dim() != p.raw_dim() {
                return Err(ItoError::ShapeMismatch {
                    what: format!("gradient '{name}'"),
                    expected: format!("{} x {}", p.nrows(), p.ncols()),
                    got: format!("{} x {}", g.nrows(), g.ncols()),
                });
            }
        }
        Ok(())
    }
}
