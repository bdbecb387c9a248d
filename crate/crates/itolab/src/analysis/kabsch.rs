//! Kabsch alignment: the proper rotation plus translation that minimizes the
//! RMSD between a mobile frame and a reference over a chosen particle
//! subset. Points are rows, so the transform is x -> x R + t.

use ndarray::{Array1, Array2, ArrayView2};

use super::{to_array2, to_dmatrix};
use crate::error::{ItoError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct KabschAlignment {
    /// The whole mobile frame carried through the subset-fitted transform.
    pub aligned: Array2<f64>,
    /// d x d with determinant +1: reflections are never returned.
    pub rotation: Array2<f64>,
    pub translation: Array1<f64>,
    /// Root-mean-square deviation over the subset after alignment.
    pub rmsd: f64,
}

pub fn kabsch_align(
    mobile: &ArrayView2<f64>,
    reference: &ArrayView2<f64>,
    subset: &[usize],
) -> Result<KabschAlignment> {
    let (l, d) = mobile.dim();
    if reference.dim() != (l, d) {
        return Err(ItoError::ShapeMismatch {
            what: "kabsch frames".to_string(),
            expected: format!("{l} x {d}"),
            got: format!("{:?}", reference.dim()),
        });
    }
    if l == 0 || d == 0 {
        return Err(ItoError::EmptyInput("empty frames".to_string()));
    }
    if subset.is_empty() {
        return Err(ItoError::EmptyInput("empty alignment subset".to_string()));
    }
    if let Some(i) = subset.iter().find(|i| **i >= l) {
        return Err(ItoError::InvalidInput(format!(
            "subset particle {i} outside 0..{l}"
        )));
    }

    let k = subset.len() as f64;
    let mut cm = Array1::zeros(d);
    let mut cr = Array1::zeros(d);
    for &i in subset {
        cm += &mobile.row(i);
        cr += &reference.row(i);
    }
    cm /= k;
    cr /= k;

    // Cross-covariance of the centered subsets.
    let mut h = Array2::zeros((d, d));
    for &i in subset {
        for a in 0..d {
            for b in 0..d {
                h[[a, b]] += (mobile[[i, a]] - cm[a]) * (reference[[i, b]] - cr[b]);
            }
        }
    }

    let rotation = if d == 1 {
        // The 1-d rotation group is trivial.
        Array2::eye(1)
    } else {
        let svd = nalgebra::SVD::new(to_dmatrix(&h.view()), true, true);
        let u = svd.u.as_ref().expect("u requested");
        let v_t = svd.v_t.as_ref().expect("v_t requested");
        let sigma = &svd.singular_values;

        // The rotation is determined only when the subset spans at least
        // d-1 dimensions: at most one singular value may vanish.
        let mut sorted: Vec<f64> = sigma.iter().cloned().collect();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        if sorted[d - 2] <= 1e-12 + 1e-9 * sorted[0] {
            return Err(ItoError::DegenerateAlignment(format!(
                "subset of {} points spans fewer than {} dimensions",
                subset.len(),
                d - 1
            )));
        }

        // Proper rotation: flip the column belonging to the smallest
        // singular value when det(U V^T) is negative.
        let det = (u * v_t).determinant();
        let mut u_fixed = u.clone();
        if det < 0.0 {
            let weakest = (0..d)
                .min_by(|&a, &b| sigma[a].partial_cmp(&sigma[b]).unwrap())
                .unwrap();
            for r in 0..d {
                u_fixed[(r, weakest)] = -u_fixed[(r, weakest)];
            }
        }
        to_array2(&(u_fixed * v_t))
    };

    let translation = &cr - &cm.dot(&rotation);
    let aligned = mobile.dot(&rotation) + &translation;

    let mut sq = 0.0;
    for &i in subset {
        for a in 0..d {
            let diff = aligned[[i, a]] - reference[[i, a]];
            sq += diff * diff;
        }
    }
    let rmsd = (sq / k).sqrt();

    Ok(KabschAlignment {
        aligned,
        rotation,
        translation,
        rmsd,
    })
}

/// RMSD over the subset after optimal alignment on that same subset.
pub fn local_rmsd(
    mobile: &ArrayView2<f64>,
    reference: &ArrayView2<f64>,
    subset: &[usize],
) -> Result<f64> {
    Ok(kabsch_align(mobile, reference, subset)?.rmsd)
}
