//! Raw conditioning features: sinusoidal encodings of continuous scalars,
//! nominal embeddings of categorical tokens, and ingested per-particle
//! embedding matrices.

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ItoError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinusoidalSpec {
    pub dim: usize,
    pub max_period: f64,
}

impl SinusoidalSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 || self.dim % 2 != 0 || !(self.max_period > 0.0) {
            return Err(ItoError::ConfigInvalid {
                violations: vec![format!(
                    "sinusoidal spec requires even dim >= 2 and max_period > 0, got dim={}, \
                     max_period={}",
                    self.dim, self.max_period
                )],
            });
        }
        Ok(())
    }

    /// Geometric angular frequencies from 2π/max_period up to 1000× that.
    fn frequencies(&self) -> Vec<f64> {
        let k = self.dim / 2;
        let w_min = 2.0 * std::f64::consts::PI / self.max_period;
        let ratio = 1000.0f64;
        (0..k)
            .map(|i| {
                if k == 1 {
                    w_min
                } else {
                    w_min * ratio.powf(i as f64 / (k - 1) as f64)
                }
            })
            .collect()
    }
}

/// Interleaved (sin(v·ω_k), cos(v·ω_k)) pairs.
pub fn sinusoidal_encode(value: f64, spec: &SinusoidalSpec) -> Array1<f64> {
    let mut out = Array1::zeros(spec.dim);
    for (k, w) in spec.frequencies().into_iter().enumerate() {
        out[2 * k] = (value * w).sin();
        out[2 * k + 1] = (value * w).cos();
    }
    out
}

/// Ordered vocabulary with one learnable row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct NominalTable {
    pub name: String,
    pub vocabulary: Vec<String>,
    /// |vocabulary| × n_dim.
    pub embedding: Array2<f64>,
}

impl NominalTable {
    pub fn new(name: &str, vocabulary: Vec<String>, n_dim: usize, rng: &mut ChaCha20Rng) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for token in &vocabulary {
            if !seen.insert(token.clone()) {
                return Err(ItoError::ConfigInvalid {
                    violations: vec![format!(
                        "vocabulary for table '{name}' repeats token '{token}'"
                    )],
                });
            }
        }
        if vocabulary.is_empty() || n_dim == 0 {
            return Err(ItoError::ConfigInvalid {
                violations: vec![format!(
                    "table '{name}' requires a nonempty vocabulary and n_dim >= 1"
                )],
            });
        }
        let embedding =
            Array2::from_shape_fn((vocabulary.len(), n_dim), |_| rng.random_range(-0.1..0.1));
        Ok(NominalTable {
            name: name.to_string(),
            vocabulary,
            embedding,
        })
    }

    pub fn index_of(&self, token: &str) -> Result<usize> {
        self.vocabulary
            .iter()
            .position(|t| t == token)
            .ok_or_else(|| ItoError::UnknownToken {
                token: token.to_string(),
                vocabulary: format!("{} {:?}", self.name, self.vocabulary),
            })
    }

    pub fn n_dim(&self) -> usize {
        self.embedding.ncols()
    }
}

/// Row per input token, copied out of the table at call time.
pub fn embed_tokens(tokens: &[String], table: &NominalTable) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((tokens.len(), table.n_dim()));
    for (i, token) in tokens.iter().enumerate() {
        let row = table.index_of(token)?;
        out.row_mut(i).assign(&table.embedding.row(row));
    }
    Ok(out)
}

/// Fixed per-particle features ingested from a file; never trained.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalEmbedding {
    pub matrix: Array2<f64>,
    pub source: String,
}

impl ExternalEmbedding {
    pub fn validate(&self, n_particles: usize) -> Result<()> {
        if self.matrix.nrows() != n_particles {
            return Err(ItoError::ShapeMismatch {
                what: format!("external embedding '{}'", self.source),
                expected: format!("{n_particles} rows"),
                got: format!("{} rows", self.matrix.nrows()),
            });
        }
        if self.matrix.iter().any(|v| !v.is_finite()) {
            return Err(ItoError::NonFinite {
                location: format!("external embedding '{}'", self.source),
                detail: "matrix entries must be finite".to_string(),
            });
        }
        Ok(())
    }
}

/// Categorical annotation tokens; defaults match the intended test-time use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotations {
    pub s_llm: String,
    pub c_llm: String,
}

impl Default for Annotations {
    fn default() -> Self {
        Annotations {
            s_llm: "yes".to_string(),
            c_llm: "high".to_string(),
        }
    }
}

/// Serialized description of the assembled feature columns. Stored in
/// checkpoints so sampling reproduces the training layout exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub seq_vocab: Vec<String>,
    pub token_dim: usize,
    pub dt_sin: SinusoidalSpec,
    pub temp_sin: SinusoidalSpec,
    /// 0 when no external embedding channel is configured.
    pub external_dim: usize,
    /// Empty vocabularies disable the annotation channels.
    pub s_llm_vocab: Vec<String>,
    pub c_llm_vocab: Vec<String>,
    pub annotation_dim: usize,
}

impl FeatureLayout {
    pub fn width(&self) -> usize {
        let mut w = self.token_dim + self.dt_sin.dim + self.temp_sin.dim + self.external_dim;
        if !self.s_llm_vocab.is_empty() {
            w += self.annotation_dim;
        }
        if !self.c_llm_vocab.is_empty() {
            w += self.annotation_dim;
        }
        w
    }

    pub fn validate(&self) -> Result<()> {
        self.dt_sin.validate()?;
        self.temp_sin.validate()?;
        let mut violations = Vec::new();
        if self.seq_vocab.is_empty() || self.token_dim == 0 {
            violations.push("sequence vocabulary and token_dim must be nonempty".to_string());
        }
        if (!self.s_llm_vocab.is_empty() || !self.c_llm_vocab.is_empty())
            && self.annotation_dim == 0
        {
            violations.push("annotation channels require annotation_dim >= 1".to_string());
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(ItoError::ConfigInvalid { violations })
        }
    }
}

/// Learnable tables referenced by the layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionTables {
    pub seq: NominalTable,
    pub s_llm: Option<NominalTable>,
    pub c_llm: Option<NominalTable>,
}

/// Per-transition conditioning inputs. `delta_t` is physical time here;
/// integer frame counts are converted at this boundary.
#[derive(Debug, Clone)]
pub struct ConditionInputs<'a> {
    pub delta_t: f64,
    pub temperature: f64,
    pub tokens: &'a [String],
    pub external: Option<&'a ExternalEmbedding>,
    pub annotations: Option<&'a Annotations>,
}

/// Concatenates, per particle:
/// [token embedding | sin(Δt) | sin(T) | external row | annotation rows].
pub fn assemble_condition_features(
    x_t: &ArrayView2<f64>,
    inputs: &ConditionInputs,
    tables: &ConditionTables,
    layout: &FeatureLayout,
) -> Result<Array2<f64>> {
    let n = x_t.nrows();
    if inputs.tokens.len() != n {
        return Err(ItoError::ShapeMismatch {
            what: "conditioning tokens".to_string(),
            expected: format!("{n} tokens"),
            got: format!("{}", inputs.tokens.len()),
        });
    }
    if tables.seq.n_dim() != layout.token_dim {
        return Err(ItoError::LayoutMismatch(format!(
            "sequence table width {} does not match layout token_dim {}",
            tables.seq.n_dim(),
            layout.token_dim
        )));
    }

    let token_rows = embed_tokens(inputs.tokens, &tables.seq)?;
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
            Some(&e.matrix)
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
    let mut ann_rows: Vec<Array1<f64>> = Vec::new();
    for (vocab, table, token) in [
        (&layout.s_llm_vocab, &tables.s_llm, &ann.s_llm),
        (&layout.c_llm_vocab, &tables.c_llm, &ann.c_llm),
    ] {
        if vocab.is_empty() {
            continue;
        }
        let table = table.as_ref().ok_or_else(|| {
            ItoError::LayoutMismatch(
                "layout declares an annotation channel without its table".to_string(),
            )
        })?;
        let row = table.index_of(token)?;
        ann_rows.push(table.embedding.row(row).to_owned());
    }

    let width = layout.width();
    let mut out = Array2::zeros((n, width));
    for i in 0..n {
        let mut col = 0;
        for v in token_rows.row(i) {
            out[[i, col]] = *v;
            col += 1;
        }
        for v in &dt_enc {
            out[[i, col]] = *v;
            col += 1;
        }
        for v in &temp_enc {
            out[[i, col]] = *v;
            col += 1;
        }
        if let Some(e) = external {
            for v in e.row(i) {
                out[[i, col]] = *v;
                col += 1;
            }
        }
        for row in &ann_rows {
            for v in row {
                out[[i, col]] = *v;
                col += 1;
            }
        }
        debug_assert_eq!(col, width);
    }
    Ok(out)
}
