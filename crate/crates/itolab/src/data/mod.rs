//! Training data: trajectory storage, transition sampling, centering.

pub mod io;

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::conditioning::{Annotations, ExternalEmbedding};
use crate::error::{ItoError, Result};
use crate::systems::Trajectory;

/// Per-system metadata attached to each trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemMeta {
    /// Identity token per particle, in particle order.
    pub tokens: Vec<String>,
    pub external: Option<ExternalEmbedding>,
    pub annotations: Option<Annotations>,
    /// Whether transition endpoints are shifted to zero center of gravity.
    /// Disabled for potentials that pin absolute coordinates.
    pub center: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEntry {
    pub trajectory: Trajectory,
    pub meta: SystemMeta,
}

/// Read-only collection of reference trajectories with their metadata.
#[derive(Debug, Clone)]
pub struct Dataset {
    entries: Vec<DatasetEntry>,
}

impl Dataset {
    pub fn new(entries: Vec<DatasetEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(ItoError::EmptyInput("dataset has no trajectories".to_string()));
        }
        for (i, entry) in entries.iter().enumerate() {
            entry.trajectory.validate()?;
            let n = entry.trajectory.n_particles();
            if entry.meta.tokens.len() != n {
                return Err(ItoError::ShapeMismatch {
                    what: format!(
                        "metadata tokens for trajectory {i} ('{}')",
                        entry.trajectory.system_id
                    ),
                    expected: format!("{n}"),
                    got: format!("{}", entry.meta.tokens.len()),
                });
            }
            if let Some(ext) = &entry.meta.external {
                ext.validate(n)?;
            }
        }
        Ok(Dataset { entries })
    }

    pub fn entries(&self) -> &[DatasetEntry] {
        &self.entries
    }

    pub fn entry(&self, i: usize) -> &DatasetEntry {
        &self.entries[i]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Sampled training tuples. `delta_t` counts frame intervals;
/// `delta_t_phys` is the same lag in physical time.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionBatch {
    pub x_t: Array3<f64>,
    pub x_target: Array3<f64>,
    pub delta_t: Vec<u64>,
    pub delta_t_phys: Vec<f64>,
    pub temperature: Vec<f64>,
    /// Index of the dataset entry each sample came from.
    pub entry_index: Vec<usize>,
    /// Conditioning metadata per sample, so a batch is self-contained.
    pub meta: Vec<SystemMeta>,
}

impl TransitionBatch {
    pub fn len(&self) -> usize {
        self.delta_t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.delta_t.is_empty()
    }
}

/// Shifts the per-dimension mean over particles to zero.
pub fn remove_center_of_gravity(x: &ArrayView2<f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    let mean = x.mean_axis(Axis(0)).expect("at least one particle");
    for mut row in out.rows_mut() {
        row -= &mean;
    }
    out
}

/// Draws (trajectory j, lag Δt, start t) uniformly and copies both endpoints,
/// centering them when the source system asks for it.
pub fn sample_transition_batch(
    dataset: &Dataset,
    delta_t_max: u64,
    batch_size: usize,
    rng: &mut ChaCha20Rng,
) -> Result<TransitionBatch> {
    if delta_t_max < 1 {
        return Err(ItoError::InvalidInput(
            "delta_t_max must be >= 1".to_string(),
        ));
    }
    if batch_size == 0 {
        return Err(ItoError::InvalidInput("batch_size must be >= 1".to_string()));
    }
    let (n, d) = {
        let first = dataset.entry(0);
        (first.trajectory.n_particles(), first.trajectory.dim())
    };
    for (j, entry) in dataset.entries().iter().enumerate() {
        let m = entry.trajectory.n_frames() as u64;
        if m <= delta_t_max {
            return Err(ItoError::Sampling {
                trajectory: format!("{} (index {j})", entry.trajectory.system_id),
                detail: format!(
                    "needs more than delta_t_max={delta_t_max} frames, has {m}"
                ),
            });
        }
        if entry.trajectory.n_particles() != n || entry.trajectory.dim() != d {
            return Err(ItoError::Sampling {
                trajectory: format!("{} (index {j})", entry.trajectory.system_id),
                detail: format!(
                    "mixed shapes in one batch: {}x{} vs {n}x{d}; group batches by system",
                    entry.trajectory.n_particles(),
                    entry.trajectory.dim()
                ),
            });
        }
    }

    let mut x_t = Array3::zeros((batch_size, n, d));
    let mut x_target = Array3::zeros((batch_size, n, d));
    let mut delta_t = Vec::with_capacity(batch_size);
    let mut delta_t_phys = Vec::with_capacity(batch_size);
    let mut temperature = Vec::with_capacity(batch_size);
    let mut entry_index = Vec::with_capacity(batch_size);
    let mut meta = Vec::with_capacity(batch_size);

    for b in 0..batch_size {
        let j = rng.random_range(0..dataset.len());
        let entry = dataset.entry(j);
        let m = entry.trajectory.n_frames() as u64;
        let dt = rng.random_range(1..=delta_t_max);
        // Start frames stop delta_t_max short of the end regardless of the
        // drawn lag, so the t-marginal does not depend on Δt.
        let t = rng.random_range(0..m - delta_t_max) as usize;

        let from = entry.trajectory.frame(t);
        let to = entry.trajectory.frame(t + dt as usize);
        if entry.meta.center {
            x_t.index_axis_mut(Axis(0), b)
                .assign(&remove_center_of_gravity(&from));
            x_target
                .index_axis_mut(Axis(0), b)
                .assign(&remove_center_of_gravity(&to));
        } else {
            x_t.index_axis_mut(Axis(0), b).assign(&from);
            x_target.index_axis_mut(Axis(0), b).assign(&to);
        }
        delta_t.push(dt);
        delta_t_phys.push(dt as f64 * entry.trajectory.frame_interval);
        temperature.push(entry.trajectory.temperature);
        entry_index.push(j);
        meta.push(entry.meta.clone());
    }

    Ok(TransitionBatch {
        x_t,
        x_target,
        delta_t,
        delta_t_phys,
        temperature,
        entry_index,
        meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use approx::assert_abs_diff_eq;
    use ndarray::{arr2, Array3};
    use proptest::prelude::*;

    fn toy_trajectory(frames: Vec<f64>, system_id: &str) -> Trajectory {
        let m = frames.len();
        Trajectory {
            frames: Array3::from_shape_vec((m, 1, 1), frames).unwrap(),
            frame_interval: 0.1,
            system_id: system_id.to_string(),
            temperature: 1.0,
        }
    }

    fn entry(traj: Trajectory, center: bool) -> DatasetEntry {
        let n = traj.n_particles();
        DatasetEntry {
            trajectory: traj,
            meta: SystemMeta {
                tokens: vec!["bead".to_string(); n],
                external: None,
                annotations: None,
                center,
            },
        }
    }

    #[test]
    fn centering_examples() {
        let single = arr2(&[[3.0, 4.0]]);
        assert_eq!(remove_center_of_gravity(&single.view()), arr2(&[[0.0, 0.0]]));

        let pair = arr2(&[[0.0], [2.0]]);
        assert_eq!(remove_center_of_gravity(&pair.view()), arr2(&[[-1.0], [1.0]]));

        let centered = arr2(&[[-1.0, 0.5], [1.0, -0.5]]);
        assert_eq!(remove_center_of_gravity(&centered.view()), centered);
    }

    proptest! {
        #[test]
        fn centering_is_idempotent_and_translation_invariant(
            values in proptest::collection::vec(-1e6f64..1e6, 2..40),
            shift in -1e6f64..1e6,
        ) {
            let n = values.len() / 2;
            let x = Array2::from_shape_vec((n, 2), values[..2 * n].to_vec()).unwrap();
            let shifted = &x + shift;
            // Cancellation error scales with the raw magnitudes, not the
            // centered ones.
            let scale = 1.0 + x.iter().fold(0.0f64, |m, v| m.max(v.abs())) + shift.abs();

            let cx = remove_center_of_gravity(&x.view());
            let cs = remove_center_of_gravity(&shifted.view());
            for (a, b) in cx.iter().zip(cs.iter()) {
                prop_assert!((a - b).abs() <= 1e-12 * scale);
            }

            let ccx = remove_center_of_gravity(&cx.view());
            for (a, b) in cx.iter().zip(ccx.iter()) {
                prop_assert!((a - b).abs() <= 1e-12 * scale);
            }
            for mean in cx.mean_axis(Axis(0)).unwrap() {
                prop_assert!(mean.abs() < 1e-12 * scale);
            }
        }
    }

    #[test]
    fn three_frame_trajectory_forces_the_support() {
        let dataset = Dataset::new(vec![entry(
            toy_trajectory(vec![10.0, 20.0, 30.0], "t"),
            false,
        )])
        .unwrap();
        let mut rng = derive_rng(1, "sample", &[]);
        let mut seen_t = [false, false];
        for _ in 0..200 {
            let batch = sample_transition_batch(&dataset, 1, 4, &mut rng).unwrap();
            for b in 0..batch.len() {
                assert_eq!(batch.delta_t[b], 1);
                let from = batch.x_t[[b, 0, 0]];
                let to = batch.x_target[[b, 0, 0]];
                match from as i64 {
                    10 => {
                        assert_eq!(to, 20.0);
                        seen_t[0] = true;
                    }
                    20 => {
                        assert_eq!(to, 30.0);
                        seen_t[1] = true;
                    }
                    other => panic!("unexpected start frame {other}"),
                }
            }
        }
        assert!(seen_t[0] && seen_t[1], "both start frames must occur");
    }

    #[test]
    fn trajectory_choice_is_uniform() {
        let dataset = Dataset::new(vec![
            entry(toy_trajectory(vec![0.0; 10], "a"), false),
            entry(toy_trajectory(vec![1.0; 10], "b"), false),
        ])
        .unwrap();
        let mut rng = derive_rng(2, "sample", &[]);
        let mut count_a = 0usize;
        let draws = 100_000;
        let batch = sample_transition_batch(&dataset, 2, draws, &mut rng).unwrap();
        for b in 0..draws {
            if batch.entry_index[b] == 0 {
                count_a += 1;
            }
        }
        let sigma = (draws as f64 * 0.25).sqrt();
        assert!(
            (count_a as f64 - draws as f64 / 2.0).abs() < 3.0 * sigma,
            "trajectory a drawn {count_a} times out of {draws}"
        );
    }

    #[test]
    fn delta_t_histogram_is_uniform_by_chi_squared() {
        let dataset = Dataset::new(vec![entry(toy_trajectory(vec![0.0; 50], "t"), false)]).unwrap();
        let mut rng = derive_rng(3, "sample", &[]);
        let draws = 100_000;
        let batch = sample_transition_batch(&dataset, 4, draws, &mut rng).unwrap();
        let mut counts = [0f64; 4];
        for dt in &batch.delta_t {
            counts[(dt - 1) as usize] += 1.0;
        }
        let expected = draws as f64 / 4.0;
        let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
        // df = 3, critical value at the 1% level.
        assert!(chi2 < 11.345, "chi-squared statistic {chi2} too large");
    }

    #[test]
    fn short_trajectory_is_rejected_by_name() {
        let dataset = Dataset::new(vec![
            entry(toy_trajectory(vec![0.0; 10], "long"), false),
            entry(toy_trajectory(vec![0.0; 3], "short"), false),
        ])
        .unwrap();
        let mut rng = derive_rng(4, "sample", &[]);
        let err = sample_transition_batch(&dataset, 3, 1, &mut rng).unwrap_err();
        match err {
            ItoError::Sampling { trajectory, .. } => assert!(trajectory.contains("short")),
            other => panic!("expected sampling error, got {other:?}"),
        }
    }

    #[test]
    fn centering_flag_centers_both_endpoints() {
        let frames = Array3::from_shape_vec(
            (3, 2, 1),
            vec![0.0, 2.0, 1.0, 5.0, -3.0, 4.0],
        )
        .unwrap();
        let traj = Trajectory {
            frames,
            frame_interval: 0.5,
            system_id: "pair".to_string(),
            temperature: 0.8,
        };
        let dataset = Dataset::new(vec![DatasetEntry {
            trajectory: traj,
            meta: SystemMeta {
                tokens: vec!["a".to_string(), "b".to_string()],
                external: None,
                annotations: None,
                center: true,
            },
        }])
        .unwrap();
        let mut rng = derive_rng(5, "sample", &[]);
        let batch = sample_transition_batch(&dataset, 2, 16, &mut rng).unwrap();
        for b in 0..batch.len() {
            let mean_t: f64 = (0..2).map(|p| batch.x_t[[b, p, 0]]).sum::<f64>() / 2.0;
            let mean_y: f64 = (0..2).map(|p| batch.x_target[[b, p, 0]]).sum::<f64>() / 2.0;
            assert_abs_diff_eq!(mean_t, 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(mean_y, 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(
                batch.delta_t_phys[b],
                batch.delta_t[b] as f64 * 0.5,
                epsilon = 1e-15
            );
            assert_eq!(batch.temperature[b], 0.8);
        }
    }

    #[test]
    fn dataset_rejects_token_length_mismatch() {
        let traj = toy_trajectory(vec![0.0, 1.0], "t");
        let bad = DatasetEntry {
            trajectory: traj,
            meta: SystemMeta {
                tokens: vec![],
                external: None,
                annotations: None,
                center: false,
            },
        };
        assert!(matches!(
            Dataset::new(vec![bad]),
            Err(ItoError::ShapeMismatch { .. })
        ));
    }
}
