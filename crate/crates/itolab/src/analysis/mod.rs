//! Observable estimation over reference and generated ensembles: collective
//! variables, free-energy surfaces, Markov state models, rate fits, and
//! structural alignment.

pub mod arrhenius;
pub mod export;
pub mod features;
pub mod fes;
pub mod kabsch;
pub mod kmeans;
pub mod msm;
pub mod tica;

pub use arrhenius::{arrhenius_fit, ArrheniusFit};
pub use export::{read_csv, write_csv, CsvTable};
pub use features::pairwise_distance_features;
pub use fes::{fes_metrics, free_energy_surface, FesGrid, FesMetrics};
pub use kabsch::{kabsch_align, local_rmsd, KabschAlignment};
pub use kmeans::{kmeans, KMeans};
pub use msm::{
    bayesian_msm, mfpt, msm_estimate, pcca_two_state, stationary_distribution, MsmModel,
    PosteriorSummary, RateEstimate,
};
pub use tica::{tica_fit, tica_from_covariances, tica_transform, TicaModel};

use nalgebra::DMatrix;
use ndarray::Array2;

pub(crate) fn to_dmatrix(a: &ndarray::ArrayView2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

pub(crate) fn to_array2(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}
