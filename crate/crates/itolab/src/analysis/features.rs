//! Collective-variable featurization of trajectories.

use ndarray::{Array2, ArrayView3};

use crate::error::{ItoError, Result};

/// All pairwise Euclidean distances per frame, upper triangle in (i, j)
/// lexicographic order with i < j: an M x L(L-1)/2 matrix.
pub fn pairwise_distance_features(frames: &ArrayView3<f64>) -> Result<Array2<f64>> {
    let (m, l, d) = frames.dim();
    if l < 2 {
        return Err(ItoError::InvalidInput(format!(
            "pairwise distances need at least 2 particles, got {l}"
        )));
    }
    let n_pairs = l * (l - 1) / 2;
    let mut out = Array2::zeros((m, n_pairs));
    for t in 0..m {
        let mut col = 0;
        for i in 0..l {
            for j in (i + 1)..l {
                let mut acc = 0.0;
                for a in 0..d {
                    let diff = frames[[t, i, a]] - frames[[t, j, a]];
                    acc += diff * diff;
                }
                out[[t, col]] = acc.sqrt();
                col += 1;
            }
        }
    }
    Ok(out)
}
