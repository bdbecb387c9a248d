//! Time-lagged independent component analysis.
//!
//! Estimation solves the generalized symmetric eigenproblem
//! C_tau v = lambda (C_0 + eps I) v through a Cholesky reduction, so the
//! returned projection columns are C0-orthonormal by construction.

use nalgebra::linalg::{Cholesky, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView2, Axis};

use super::{to_array2, to_dmatrix};
use crate::error::{ItoError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TicaModel {
    pub mean: Array1<f64>,
    /// Instantaneous covariance including the regularization term.
    pub c0: Array2<f64>,
    /// Symmetrized lagged covariance.
    pub ctau: Array2<f64>,
    /// All eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    /// Feature-space components for the top `n_components` eigenvalues,
    /// one column each.
    pub projection: Array2<f64>,
    pub lag: usize,
}

/// Covariance-level fit, exposed separately so exact synthetic covariance
/// pairs can be fed in without sampling.
pub fn tica_from_covariances(
    mean: Array1<f64>,
    c0: Array2<f64>,
    ctau: Array2<f64>,
    lag: usize,
    n_components: usize,
    epsilon: f64,
) -> Result<TicaModel> {
    let d = mean.len();
    if c0.dim() != (d, d) || ctau.dim() != (d, d) {
        return Err(ItoError::ShapeMismatch {
            what: "tica covariances".to_string(),
            expected: format!("{d} x {d}"),
            got: format!("{:?} and {:?}", c0.dim(), ctau.dim()),
        });
    }
    if n_components == 0 || n_components > d {
        return Err(ItoError::InvalidInput(format!(
            "n_components must lie in 1..={d}, got {n_components}"
        )));
    }
    if !(epsilon >= 0.0) || !epsilon.is_finite() {
        return Err(ItoError::InvalidInput(format!(
            "regularization epsilon must be finite and >= 0, got {epsilon}"
        )));
    }

    let mut c0_reg = c0;
    for i in 0..d {
        c0_reg[[i, i]] += epsilon;
    }
    let sym = (&ctau + &ctau.t()) * 0.5;

    let chol = Cholesky::new(to_dmatrix(&c0_reg.view())).ok_or_else(|| {
        ItoError::IllConditioned(
            "instantaneous covariance is singular; increase the regularization epsilon"
                .to_string(),
        )
    })?;
    let l = chol.l();
    // W = L^-1 S L^-T stays symmetric; the reduction preserves eigenvalues.
    let z = l
        .solve_lower_triangular(&to_dmatrix(&sym.view()))
        .ok_or_else(|| ItoError::IllConditioned("Cholesky factor not invertible".to_string()))?;
    let w = l
        .solve_lower_triangular(&z.transpose())
        .ok_or_else(|| ItoError::IllConditioned("Cholesky factor not invertible".to_string()))?
        .transpose();
    let w = (&w + &w.transpose()) * 0.5;

    let eig = SymmetricEigen::new(w);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());

    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let y = nalgebra::DMatrix::from_fn(d, n_components, |i, j| eig.eigenvectors[(i, order[j])]);
    // Back-transform v = L^-T y, giving v' C0_reg v = I.
    let v = l
        .transpose()
        .solve_upper_triangular(&y)
        .ok_or_else(|| ItoError::IllConditioned("Cholesky factor not invertible".to_string()))?;
    let mut projection = to_array2(&v);
    // Deterministic sign: largest-magnitude entry of each component positive.
    for mut col in projection.columns_mut() {
        let lead = col
            .iter()
            .cloned()
            .max_by(|a, b| a.abs().partial_cmp(&b.abs()).unwrap())
            .unwrap_or(0.0);
        if lead < 0.0 {
            col.mapv_inplace(|x| -x);
        }
    }

    Ok(TicaModel {
        mean,
        c0: c0_reg,
        ctau: sym,
        eigenvalues,
        projection,
        lag,
    })
}

/// Fits a model from raw features (frames x dims) at the given frame lag.
/// `epsilon = None` uses the default 1e-6 * trace(C0) / dim.
pub fn tica_fit(
    features: &ArrayView2<f64>,
    lag: usize,
    n_components: usize,
    epsilon: Option<f64>,
) -> Result<TicaModel> {
    let (m, d) = features.dim();
    if d == 0 {
        return Err(ItoError::EmptyInput("features have zero width".to_string()));
    }
    if lag == 0 {
        return Err(ItoError::InvalidInput("lag must be >= 1 frame".to_string()));
    }
    if m <= lag {
        return Err(ItoError::InvalidInput(format!(
            "need more frames ({m}) than the lag ({lag})"
        )));
    }

    let mean = features.mean_axis(Axis(0)).expect("nonempty features");
    let mut centered = features.to_owned();
    for mut row in centered.rows_mut() {
        row -= &mean;
    }

    let n_pairs = m - lag;
    let c0 = centered.t().dot(&centered) / m as f64;
    let head = centered.slice(ndarray::s![..n_pairs, ..]);
    let tail = centered.slice(ndarray::s![lag.., ..]);
    let ctau = head.t().dot(&tail) / n_pairs as f64;

    let eps = epsilon.unwrap_or_else(|| {
        let trace: f64 = c0.diag().sum();
        1e-6 * trace / d as f64
    });
    tica_from_covariances(mean, c0, ctau, lag, n_components, eps)
}

/// Projects features with the stored mean removed. Deterministic.
pub fn tica_transform(model: &TicaModel, features: &ArrayView2<f64>) -> Result<Array2<f64>> {
    let d = model.mean.len();
    if features.ncols() != d {
        return Err(ItoError::ShapeMismatch {
            what: "tica transform features".to_string(),
            expected: format!("{d} columns"),
            got: format!("{}", features.ncols()),
        });
    }
    let mut centered = features.to_owned();
    for mut row in centered.rows_mut() {
        row -= &model.mean;
    }
    Ok(centered.dot(&model.projection))
}
