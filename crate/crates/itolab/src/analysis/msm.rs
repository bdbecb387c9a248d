//! Markov state models over discretized trajectories: sliding-window counts,
//! largest-strongly-connected active set, stationary distribution, mean
//! first-passage times, Bayesian posterior sampling, and two-state PCCA.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{ItoError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct MsmModel {
    /// Cluster centers in projection space, when the discretization came
    /// from k-means.
    pub centers: Option<Array2<f64>>,
    /// Full n_states x n_states sliding-window counts.
    pub counts: Array2<f64>,
    /// Row-stochastic transition matrix over the active set only.
    pub transition: Array2<f64>,
    /// Lag in frames.
    pub lag: usize,
    pub stationary: Array1<f64>,
    /// Active position -> original state label, ascending.
    pub active: Vec<usize>,
}

/// Stationary distribution of a row-stochastic matrix by solving piP = pi
/// with the normalization replacing one redundant equation.
pub fn stationary_distribution(p: &ArrayView2<f64>) -> Result<Array1<f64>> {
    let k = p.nrows();
    // Rows of A are the equations (P^T - I) pi = 0; the last is sum pi = 1.
    let mut a = nalgebra::DMatrix::<f64>::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            a[(i, j)] = p[[j, i]] - if i == j { 1.0 } else { 0.0 };
        }
    }
    for j in 0..k {
        a[(k - 1, j)] = 1.0;
    }
    let mut b = nalgebra::DVector::<f64>::zeros(k);
    b[k - 1] = 1.0;
    let pi = a
        .lu()
        .solve(&b)
        .ok_or_else(|| ItoError::IllConditioned("stationary system is singular".to_string()))?;

    let pi = Array1::from_iter(pi.iter().cloned());
    let mut residual = 0.0;
    for j in 0..k {
        let mut acc = -pi[j];
        for i in 0..k {
            acc += pi[i] * p[[i, j]];
        }
        residual += acc.abs();
    }
    if residual >= 1e-10 {
        return Err(ItoError::IllConditioned(format!(
            "stationary distribution residual {residual:.3e} exceeds 1e-10"
        )));
    }
    Ok(pi)
}

/// Counts transitions at the given frame lag and restricts to the largest
/// strongly connected set (ties break toward the smallest state label).
pub fn msm_estimate(dtrajs: &[Vec<usize>], n_states: usize, lag: usize) -> Result<MsmModel> {
    if lag == 0 {
        return Err(ItoError::InvalidInput("lag must be >= 1 frame".to_string()));
    }
    if n_states == 0 {
        return Err(ItoError::InvalidInput("n_states must be >= 1".to_string()));
    }
    for (t, dtraj) in dtrajs.iter().enumerate() {
        if let Some(s) = dtraj.iter().find(|s| **s >= n_states) {
            return Err(ItoError::InvalidInput(format!(
                "trajectory {t} contains state {s}, outside 0..{n_states}"
            )));
        }
    }

    let mut counts = Array2::<f64>::zeros((n_states, n_states));
    for dtraj in dtrajs {
        for t in 0..dtraj.len().saturating_sub(lag) {
            counts[[dtraj[t], dtraj[t + lag]]] += 1.0;
        }
    }
    if counts.sum() == 0.0 {
        return Err(ItoError::EmptyInput(format!(
            "no transition pairs at lag {lag}"
        )));
    }

    // Strongly connected components of the count graph. A singleton only
    // counts as active when it has a self-transition, otherwise its row
    // cannot be normalized.
    let mut graph = petgraph::graph::DiGraph::<(), ()>::new();
    let nodes: Vec<_> = (0..n_states).map(|_| graph.add_node(())).collect();
    for i in 0..n_states {
        for j in 0..n_states {
            if counts[[i, j]] > 0.0 {
                graph.add_edge(nodes[i], nodes[j], ());
            }
        }
    }
    let mut best: Option<Vec<usize>> = None;
    for scc in petgraph::algo::tarjan_scc(&graph) {
        let mut labels: Vec<usize> = scc.iter().map(|n| n.index()).collect();
        labels.sort_unstable();
        if labels.len() == 1 && counts[[labels[0], labels[0]]] == 0.0 {
            continue;
        }
        let better = match &best {
            None => true,
            Some(b) => labels.len() > b.len() || (labels.len() == b.len() && labels[0] < b[0]),
        };
        if better {
            best = Some(labels);
        }
    }
    let active = best.ok_or_else(|| {
        ItoError::EmptyInput("no strongly connected set with transitions".to_string())
    })?;

    let k = active.len();
    let mut transition = Array2::zeros((k, k));
    for (ai, &i) in active.iter().enumerate() {
        let row_sum: f64 = active.iter().map(|&j| counts[[i, j]]).sum();
        for (aj, &j) in active.iter().enumerate() {
            transition[[ai, aj]] = counts[[i, j]] / row_sum;
        }
    }
    let stationary = stationary_distribution(&transition.view())?;

    let model = MsmModel {
        centers: None,
        counts,
        transition,
        lag,
        stationary,
        active,
    };
    model.validate()?;
    Ok(model)
}

impl MsmModel {
    pub fn validate(&self) -> Result<()> {
        let k = self.active.len();
        if self.transition.dim() != (k, k) || self.stationary.len() != k {
            return Err(ItoError::ShapeMismatch {
                what: "msm active set".to_string(),
                expected: format!("{k} x {k} transition and {k} stationary entries"),
                got: format!("{:?} and {}", self.transition.dim(), self.stationary.len()),
            });
        }
        for (i, row) in self.transition.rows().into_iter().enumerate() {
            let s: f64 = row.sum();
            if (s - 1.0).abs() > 1e-12 {
                return Err(ItoError::InvalidInput(format!(
                    "transition row {i} sums to {s}, not 1"
                )));
            }
        }
        if self.stationary.iter().any(|v| *v < 0.0) {
            return Err(ItoError::InvalidInput(
                "stationary distribution has negative entries".to_string(),
            ));
        }
        let total: f64 = self.stationary.sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(ItoError::InvalidInput(format!(
                "stationary distribution sums to {total}, not 1"
            )));
        }
        let mut residual = 0.0;
        for j in 0..k {
            let mut acc = -self.stationary[j];
            for i in 0..k {
                acc += self.stationary[i] * self.transition[[i, j]];
            }
            residual += acc.abs();
        }
        if residual >= 1e-10 {
            return Err(ItoError::InvalidInput(format!(
                "pi P = pi residual {residual:.3e} exceeds 1e-10"
            )));
        }
        Ok(())
    }

    /// MFPT between sets given as original state labels, in physical time
    /// (`frame_interval` is the time between successive frames).
    pub fn mfpt(&self, source: &[usize], target: &[usize], frame_interval: f64) -> Result<f64> {
        let map = |labels: &[usize]| -> Result<Vec<usize>> {
            labels
                .iter()
                .map(|l| {
                    self.active.binary_search(l).map_err(|_| {
                        ItoError::InvalidInput(format!("state {l} is not in the active set"))
                    })
                })
                .collect()
        };
        mfpt(
            &self.transition.view(),
            &self.stationary.view(),
            &map(source)?,
            &map(target)?,
            self.lag as f64 * frame_interval,
        )
    }
}

/// Mean first-passage time from set A to set B in physical units.
///
/// Solves m_i = 0 on B and m_i = lag + sum_j P_ij m_j elsewhere, then
/// averages m over A weighted by the renormalized `stationary` entries.
/// A source that can drift into a closed set avoiding B never arrives, so
/// the result is `f64::INFINITY` (the infinite-MFPT signal).
pub fn mfpt(
    p: &ArrayView2<f64>,
    stationary: &ArrayView1<f64>,
    source: &[usize],
    target: &[usize],
    lag_time: f64,
) -> Result<f64> {
    let k = p.nrows();
    if p.ncols() != k || stationary.len() != k {
        return Err(ItoError::ShapeMismatch {
            what: "mfpt transition matrix".to_string(),
            expected: format!("{k} x {k} with {k} stationary entries"),
            got: format!("{:?} and {}", p.dim(), stationary.len()),
        });
    }
    if source.is_empty() || target.is_empty() {
        return Err(ItoError::EmptyInput(
            "mfpt needs nonempty source and target sets".to_string(),
        ));
    }
    if let Some(s) = source.iter().chain(target).find(|s| **s >= k) {
        return Err(ItoError::InvalidInput(format!(
            "state {s} outside 0..{k}"
        )));
    }
    if !(lag_time > 0.0 && lag_time.is_finite()) {
        return Err(ItoError::InvalidInput(format!(
            "lag time must be positive and finite, got {lag_time}"
        )));
    }

    let in_target = {
        let mut mask = vec![false; k];
        for &b in target {
            mask[b] = true;
        }
        mask
    };

    // Backward reachability of B: states with any path into the target.
    let reaches_target = {
        let mut seen = in_target.clone();
        let mut stack: Vec<usize> = target.to_vec();
        while let Some(j) = stack.pop() {
            for i in 0..k {
                if !seen[i] && p[[i, j]] > 0.0 {
                    seen[i] = true;
                    stack.push(i);
                }
            }
        }
        seen
    };
    // A state whose walk can enter the no-return region never hits B with
    // probability one, so its MFPT is infinite.
    let infinite = {
        let mut seen = vec![false; k];
        let mut stack: Vec<usize> = (0..k).filter(|&i| !reaches_target[i]).collect();
        for &i in &stack {
            seen[i] = true;
        }
        while let Some(j) = stack.pop() {
            for i in 0..k {
                if !seen[i] && !in_target[i] && p[[i, j]] > 0.0 {
                    seen[i] = true;
                    stack.push(i);
                }
            }
        }
        seen
    };

    // Solve on the remaining transient states; they only leak into B.
    let free: Vec<usize> = (0..k).filter(|&i| !in_target[i] && !infinite[i]).collect();
    let mut m = vec![0.0; k];
    if !free.is_empty() {
        let n = free.len();
        let mut a = nalgebra::DMatrix::<f64>::zeros(n, n);
        let mut b = nalgebra::DVector::<f64>::zeros(n);
        for (ai, &i) in free.iter().enumerate() {
            a[(ai, ai)] = 1.0;
            b[ai] = lag_time;
            for (aj, &j) in free.iter().enumerate() {
                a[(ai, aj)] -= p[[i, j]];
            }
        }
        let sol = a.lu().solve(&b).ok_or_else(|| {
            ItoError::IllConditioned("first-passage system is singular".to_string())
        })?;
        let mut residual = 0.0f64;
        for (ai, &i) in free.iter().enumerate() {
            let mut acc = sol[ai] - lag_time;
            for (aj, &j) in free.iter().enumerate() {
                acc -= p[[i, j]] * sol[aj];
            }
            residual = residual.max(acc.abs());
            m[i] = sol[ai];
        }
        if residual >= 1e-10 * lag_time.max(1.0) {
            return Err(ItoError::IllConditioned(format!(
                "first-passage residual {residual:.3e} too large"
            )));
        }
    }

    let total_weight: f64 = source.iter().map(|&s| stationary[s]).sum();
    if !(total_weight > 0.0) {
        return Err(ItoError::InvalidInput(
            "source set carries no stationary weight".to_string(),
        ));
    }
    let mut out = 0.0;
    for &s in source {
        if in_target[s] {
            continue;
        }
        if infinite[s] {
            return Ok(f64::INFINITY);
        }
        out += stationary[s] / total_weight * m[s];
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSummary {
    pub mfpt_mean: f64,
    pub mfpt_std: f64,
    pub pi_mean: Array1<f64>,
    pub pi_std: Array1<f64>,
    pub n_samples: usize,
}

/// Samples transition matrices row-wise from Dirichlet(counts + 1/k),
/// recomputing the stationary distribution and the source->target MFPT for
/// each draw. The prior keeps every entry positive, so each sampled chain
/// is irreducible.
pub fn bayesian_msm(
    counts: &ArrayView2<f64>,
    source: &[usize],
    target: &[usize],
    lag_time: f64,
    n_samples: usize,
    rng: &mut ChaCha20Rng,
) -> Result<PosteriorSummary> {
    let k = counts.nrows();
    if counts.ncols() != k || k == 0 {
        return Err(ItoError::ShapeMismatch {
            what: "bayesian msm counts".to_string(),
            expected: "square, nonempty".to_string(),
            got: format!("{:?}", counts.dim()),
        });
    }
    if n_samples < 2 {
        return Err(ItoError::InvalidInput(format!(
            "need at least 2 posterior samples, got {n_samples}"
        )));
    }
    if counts.iter().any(|c| *c < 0.0 || !c.is_finite()) {
        return Err(ItoError::InvalidInput(
            "counts must be finite and nonnegative".to_string(),
        ));
    }

    let prior = 1.0 / k as f64;
    let mut mfpts = Vec::with_capacity(n_samples);
    let mut pis = Array2::zeros((n_samples, k));
    let mut p = Array2::zeros((k, k));
    for s in 0..n_samples {
        for i in 0..k {
            // Dirichlet via normalized Gamma(alpha_j, 1) draws.
            let mut row_sum = 0.0;
            for j in 0..k {
                let alpha = counts[[i, j]] + prior;
                let g: f64 = Gamma::new(alpha, 1.0)
                    .map_err(|e| ItoError::InvalidInput(format!("gamma({alpha}): {e}")))?
                    .sample(rng);
                // Guard against an underflowed all-zero row at tiny alpha.
                let g = g.max(f64::MIN_POSITIVE);
                p[[i, j]] = g;
                row_sum += g;
            }
            for j in 0..k {
                p[[i, j]] /= row_sum;
            }
        }
        let pi = stationary_distribution(&p.view())?;
        mfpts.push(mfpt(&p.view(), &pi.view(), source, target, lag_time)?);
        pis.row_mut(s).assign(&pi);
    }

    let mean = mfpts.iter().sum::<f64>() / n_samples as f64;
    let var = mfpts.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>()
        / (n_samples - 1) as f64;
    let pi_mean = pis.mean_axis(ndarray::Axis(0)).expect("n_samples >= 2");
    let mut pi_var = Array1::zeros(k);
    for s in 0..n_samples {
        for j in 0..k {
            let d = pis[[s, j]] - pi_mean[j];
            pi_var[j] += d * d;
        }
    }
    pi_var /= (n_samples - 1) as f64;

    Ok(PosteriorSummary {
        mfpt_mean: mean,
        mfpt_std: var.sqrt(),
        pi_mean,
        pi_std: pi_var.mapv(f64::sqrt),
        n_samples,
    })
}

/// Two-cluster PCCA: splits states by the sign of the second right
/// eigenvector. Requires a real second eigenvalue separated from the rest
/// of the spectrum by more than `min_gap`; label 0 goes to the cluster with
/// the larger stationary mass (ties toward the cluster of the highest-pi
/// state, then toward state 0).
pub fn pcca_two_state(
    p: &ArrayView2<f64>,
    stationary: &ArrayView1<f64>,
    min_gap: f64,
) -> Result<Vec<usize>> {
    let k = p.nrows();
    if p.ncols() != k || stationary.len() != k {
        return Err(ItoError::ShapeMismatch {
            what: "pcca transition matrix".to_string(),
            expected: format!("{k} x {k} with {k} stationary entries"),
            got: format!("{:?} and {}", p.dim(), stationary.len()),
        });
    }
    if k < 2 {
        return Err(ItoError::InvalidInput(
            "pcca needs at least two states".to_string(),
        ));
    }

    let eigs = super::to_dmatrix(p).complex_eigenvalues();
    let mut eigs: Vec<nalgebra::Complex<f64>> = eigs.iter().cloned().collect();
    // The Perron eigenvalue is the one closest to 1; order the rest by
    // modulus.
    let perron = (0..eigs.len())
        .min_by(|&a, &b| {
            let da = (eigs[a] - nalgebra::Complex::new(1.0, 0.0)).norm();
            let db = (eigs[b] - nalgebra::Complex::new(1.0, 0.0)).norm();
            da.partial_cmp(&db).unwrap()
        })
        .expect("nonempty spectrum");
    eigs.swap_remove(perron);
    eigs.sort_by(|a, b| b.norm().partial_cmp(&a.norm()).unwrap());

    let lambda2 = eigs[0];
    if lambda2.im.abs() > 1e-8 {
        return Err(ItoError::DegenerateSpectrum(format!(
            "second eigenvalue {} + {}i is not real",
            lambda2.re, lambda2.im
        )));
    }
    let lambda3_norm = if eigs.len() > 1 { eigs[1].norm() } else { 0.0 };
    let gap = lambda2.re - lambda3_norm;
    if gap <= min_gap {
        return Err(ItoError::DegenerateSpectrum(format!(
            "spectral gap {gap:.3e} below {min_gap:.3e}: two-state split is ambiguous"
        )));
    }

    // Second right eigenvector by power iteration on P - 1 pi^T, which
    // removes the Perron component; convergence rate is |lambda3/lambda2|.
    let mut rng = crate::rng::derive_rng(0, "pcca-power", &[]);
    let mut v = Array1::from_shape_fn(k, |_| rng.random::<f64>() - 0.5);
    let deflate = |v: &mut Array1<f64>| {
        let proj: f64 = v
            .iter()
            .zip(stationary.iter())
            .map(|(vi, pi)| vi * pi)
            .sum();
        for vi in v.iter_mut() {
            *vi -= proj;
        }
    };
    deflate(&mut v);
    let norm = |v: &Array1<f64>| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = norm(&v);
    if scale > 0.0 {
        v /= scale;
    }
    let mut converged = false;
    for _ in 0..10_000 {
        let mut next = p.dot(&v);
        deflate(&mut next);
        let scale = norm(&next);
        if scale == 0.0 {
            break;
        }
        next /= scale;
        // Fix the sign so convergence is testable for negative lambda2.
        let lead = next
            .iter()
            .cloned()
            .max_by(|a, b| a.abs().partial_cmp(&b.abs()).unwrap())
            .unwrap();
        if lead < 0.0 {
            next.mapv_inplace(|x| -x);
        }
        let delta = (&next - &v).iter().map(|x| x.abs()).fold(0.0, f64::max);
        v = next;
        if delta < 1e-13 {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(ItoError::DegenerateSpectrum(
            "power iteration for the second eigenvector did not converge".to_string(),
        ));
    }

    let members: Vec<bool> = v.iter().map(|x| *x >= 0.0).collect();
    let mass = |side: bool| -> f64 {
        members
            .iter()
            .zip(stationary.iter())
            .filter(|(m, _)| **m == side)
            .map(|(_, pi)| *pi)
            .sum()
    };
    let (mass_pos, mass_neg) = (mass(true), mass(false));
    let zero_side = if mass_pos > mass_neg {
        true
    } else if mass_neg > mass_pos {
        false
    } else {
        let top = (0..k)
            .max_by(|&a, &b| stationary[a].partial_cmp(&stationary[b]).unwrap())
            .unwrap();
        members[top]
    };
    Ok(members
        .iter()
        .map(|m| if *m == zero_side { 0 } else { 1 })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateEstimate {
    pub mfpt: f64,
    /// k = 1 / MFPT.
    pub rate: f64,
    pub mfpt_std: f64,
    pub temperature: f64,
}

impl RateEstimate {
    pub fn new(mfpt: f64, mfpt_std: f64, temperature: f64) -> Result<Self> {
        if !(mfpt > 0.0) {
            return Err(ItoError::InvalidInput(format!(
                "mfpt must be positive, got {mfpt}"
            )));
        }
        if !(mfpt_std >= 0.0) {
            return Err(ItoError::InvalidInput(format!(
                "mfpt uncertainty must be nonnegative, got {mfpt_std}"
            )));
        }
        Ok(RateEstimate {
            mfpt,
            rate: 1.0 / mfpt,
            mfpt_std,
            temperature,
        })
    }
}
