//! Free-energy surfaces from histogrammed projections, G_i = -k_B T ln p_i,
//! and the MAE/RMSE/coverage comparison between two surfaces.

use ndarray::ArrayView2;

use crate::error::{ItoError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct FesGrid {
    /// Bin edges per axis, length shape[a] + 1 each.
    pub edges: Vec<Vec<f64>>,
    pub shape: Vec<usize>,
    /// Normalized histogram over counted samples, row-major flat layout.
    pub p: Vec<f64>,
    /// Free energies, finite exactly on occupied bins (infinite elsewhere).
    /// Raw values; alignment happens in `fes_metrics`.
    pub g: Vec<f64>,
    pub occupied: Vec<bool>,
    pub temperature: f64,
    pub k_b: f64,
    pub n_samples: usize,
    pub n_dropped: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FesMetrics {
    pub mae: f64,
    pub rmse: f64,
    pub coverage: f64,
}

/// Histograms the leading `bins.len()` columns of `projections`. Axis ranges
/// default to the data extent (a zero-width axis is widened by 0.5 on each
/// side); samples outside an explicit `range` are dropped and the histogram
/// renormalizes over what remains.
pub fn free_energy_surface(
    projections: &ArrayView2<f64>,
    bins: &[usize],
    temperature: f64,
    k_b: f64,
    range: Option<&[(f64, f64)]>,
) -> Result<FesGrid> {
    let (m, width) = projections.dim();
    if m == 0 {
        return Err(ItoError::EmptyInput("no samples to histogram".to_string()));
    }
    let dims = bins.len();
    if dims == 0 || dims > width {
        return Err(ItoError::InvalidInput(format!(
            "need 1..={width} binned axes for {width}-column projections, got {dims}"
        )));
    }
    if let Some(b) = bins.iter().find(|b| **b < 2) {
        return Err(ItoError::InvalidInput(format!(
            "need at least 2 bins per axis, got {b}"
        )));
    }
    if !(temperature > 0.0 && temperature.is_finite()) || !(k_b > 0.0 && k_b.is_finite()) {
        return Err(ItoError::InvalidInput(format!(
            "temperature and k_b must be positive and finite, got {temperature} and {k_b}"
        )));
    }

    let mut bounds = Vec::with_capacity(dims);
    match range {
        Some(r) => {
            if r.len() != dims {
                return Err(ItoError::InvalidInput(format!(
                    "range has {} axes, bins has {dims}",
                    r.len()
                )));
            }
            for (lo, hi) in r {
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    return Err(ItoError::InvalidInput(format!(
                        "range axis ({lo}, {hi}) is not a finite nonempty interval"
                    )));
                }
                bounds.push((*lo, *hi));
            }
        }
        None => {
            for a in 0..dims {
                let col = projections.column(a);
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                if !lo.is_finite() || !hi.is_finite() {
                    return Err(ItoError::NonFinite {
                        location: format!("projection axis {a}"),
                        detail: "cannot derive a histogram range".to_string(),
                    });
                }
                if lo == hi {
                    bounds.push((lo - 0.5, hi + 0.5));
                } else {
                    bounds.push((lo, hi));
                }
            }
        }
    }

    let edges: Vec<Vec<f64>> = (0..dims)
        .map(|a| {
            let (lo, hi) = bounds[a];
            let n = bins[a];
            (0..=n)
                .map(|i| lo + (hi - lo) * i as f64 / n as f64)
                .collect()
        })
        .collect();

    let n_bins: usize = bins.iter().product();
    let mut counts = vec![0u64; n_bins];
    let mut n_dropped = 0usize;
    'rows: for row in projections.rows() {
        let mut flat = 0usize;
        for a in 0..dims {
            let (lo, hi) = bounds[a];
            let x = row[a];
            if !x.is_finite() || x < lo || x > hi {
                n_dropped += 1;
                continue 'rows;
            }
            let n = bins[a];
            let mut b = ((x - lo) / (hi - lo) * n as f64) as usize;
            if b == n {
                // The last bin is closed on the right.
                b = n - 1;
            }
            flat = flat * n + b;
        }
        counts[flat] += 1;
    }

    let n_counted = m - n_dropped;
    if n_counted == 0 {
        return Err(ItoError::EmptyInput(
            "every sample fell outside the histogram range".to_string(),
        ));
    }

    let mut p = vec![0.0; n_bins];
    let mut g = vec![f64::INFINITY; n_bins];
    let mut occupied = vec![false; n_bins];
    for i in 0..n_bins {
        if counts[i] > 0 {
            p[i] = counts[i] as f64 / n_counted as f64;
            g[i] = -k_b * temperature * p[i].ln();
            occupied[i] = true;
        }
    }

    Ok(FesGrid {
        edges,
        shape: bins.to_vec(),
        p,
        g,
        occupied,
        temperature,
        k_b,
        n_samples: n_counted,
        n_dropped,
    })
}

/// MAE/RMSE over reference-occupied bins after aligning each surface's
/// minimum to zero; a reference bin the model never visited contributes the
/// capped penalty G_cap = -k_B T ln(1 / (10 n_model)), i.e. the free energy
/// of a tenth of one model count. Coverage is the fraction of
/// reference-occupied bins the model also occupies.
pub fn fes_metrics(reference: &FesGrid, model: &FesGrid) -> Result<FesMetrics> {
    if reference.edges != model.edges {
        return Err(ItoError::GridMismatch(
            "reference and model bin edges differ".to_string(),
        ));
    }
    if reference.temperature != model.temperature || reference.k_b != model.k_b {
        return Err(ItoError::GridMismatch(format!(
            "energy scales differ: reference k_B T = {} * {}, model {} * {}",
            reference.k_b, reference.temperature, model.k_b, model.temperature
        )));
    }

    let min_over = |grid: &FesGrid| {
        grid.g
            .iter()
            .zip(&grid.occupied)
            .filter(|(_, occ)| **occ)
            .map(|(g, _)| *g)
            .fold(f64::INFINITY, f64::min)
    };
    let ref_min = min_over(reference);
    if !ref_min.is_finite() {
        return Err(ItoError::EmptyInput(
            "reference surface has no occupied bins".to_string(),
        ));
    }
    let model_min = min_over(model);
    let model_min = if model_min.is_finite() { model_min } else { 0.0 };
    let g_cap =
        model.k_b * model.temperature * (10.0 * model.n_samples.max(1) as f64).ln();

    let mut n_ref = 0usize;
    let mut hits = 0usize;
    let mut abs_sum = 0.0;
    let mut sq_sum = 0.0;
    for i in 0..reference.g.len() {
        if !reference.occupied[i] {
            continue;
        }
        n_ref += 1;
        let ref_g = reference.g[i] - ref_min;
        let d = if model.occupied[i] {
            hits += 1;
            (model.g[i] - model_min - ref_g).abs()
        } else {
            (g_cap - ref_g).abs()
        };
        abs_sum += d;
        sq_sum += d * d;
    }

    Ok(FesMetrics {
        mae: abs_sum / n_ref as f64,
        rmse: (sq_sum / n_ref as f64).sqrt(),
        coverage: hits as f64 / n_ref as f64,
    })
}
