//! Acceptance suite: nine end-to-end checks covering transition-density
//! fidelity, equilibrium recovery, gradients, the MSM/TICA/FES/Arrhenius
//! oracles, pipeline determinism, and kinetic sanity of the surrogate.
//! Each test prints one `ACCEPT Cn ...: PASS` verdict line (visible with
//! `--nocapture`); the heavy double-well fixture is trained once and shared.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use itolab::analysis::{
    arrhenius_fit, fes_metrics, free_energy_surface, mfpt, stationary_distribution, tica_fit,
    tica_from_covariances, FesGrid,
};
use itolab::cli::config::{preset, RunConfig, SampleSection};
use itolab::cli::stages::{build_layout, cmd_rollout, cmd_simulate};
use itolab::data::io::read_trajectory;
use itolab::data::{sample_transition_batch, Dataset, DatasetEntry, SystemMeta};
use itolab::model::{ModelConfig, ModelParams, Precision};
use itolab::rng::{derive_rng, derive_u64};
use itolab::sampling::{sample_transition, temperature_sweep, CondSource, SamplerConfig};
use itolab::systems::{
    ou_transition_moments, simulate_langevin, Integrator, LangevinConfig, Trajectory,
};
use itolab::training::{cfm_loss, init_train_state, train, write_train_state, TrainConfig, TrainState};

fn ws_dir(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR"))
        .join("acceptance")
        .join(name);
    if dir.exists() {
        fs::remove_dir_all(&dir).unwrap();
    }
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn sorted_traj_files(dir: &Path) -> Vec<PathBuf> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "traj"))
        .collect();
    paths.sort();
    paths
}

/// Reference trajectories as training sees them: burn-in removed.
fn burned_refs(cfg: &RunConfig, out: &Path) -> Vec<Trajectory> {
    let burn = cfg.system.burn_in_frames as usize;
    sorted_traj_files(&out.join("trajectories"))
        .iter()
        .map(|p| {
            let t = read_trajectory(p).unwrap();
            Trajectory {
                frames: t.frames.slice(s![burn.., .., ..]).to_owned(),
                frame_interval: t.frame_interval,
                system_id: t.system_id,
                temperature: t.temperature,
            }
        })
        .collect()
}

fn dataset_from(cfg: &RunConfig, refs: &[Trajectory]) -> Dataset {
    let entries = refs
        .iter()
        .map(|t| DatasetEntry {
            trajectory: t.clone(),
            meta: SystemMeta {
                tokens: cfg.resolved_tokens(),
                external: None,
                annotations: None,
                center: cfg.system.center,
            },
        })
        .collect();
    Dataset::new(entries).unwrap()
}

/// High-rate warmup followed by a low-rate polish; writes the final
/// checkpoint where the rollout stage expects it.
fn two_phase_train(
    cfg: &RunConfig,
    refs: &[Trajectory],
    warm_steps: u64,
    polish_steps: u64,
    out: &Path,
) -> TrainState {
    let dataset = dataset_from(cfg, refs);
    let phase1 = TrainConfig {
        batch_size: cfg.train.batch_size,
        delta_t_max: cfg.train.delta_t_max,
        learning_rate: 3e-3,
        clip_threshold: 1.0,
        total_steps: warm_steps,
        seed: derive_u64(cfg.seed, "acceptance-train", &[]),
        ..TrainConfig::default()
    };
    let state = init_train_state(cfg.model.clone(), build_layout(cfg), &phase1).unwrap();
    let (state, _) = train(&dataset, state, &phase1, None).unwrap();
    let phase2 = TrainConfig {
        learning_rate: 5e-4,
        total_steps: warm_steps + polish_steps,
        ..phase1
    };
    let (state, _) = train(&dataset, state, &phase2, None).unwrap();
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).unwrap();
    write_train_state(&ckpt_dir.join("final.ckpt"), &state, &phase2).unwrap();
    state
}

fn cond_source(meta: &SystemMeta) -> CondSource<'_> {
    CondSource::from_meta(meta)
}

fn system_meta(cfg: &RunConfig) -> SystemMeta {
    SystemMeta {
        tokens: cfg.resolved_tokens(),
        external: None,
        annotations: None,
        center: cfg.system.center,
    }
}

/// Mean-first-passage accumulator over 1D series with symmetric cores
/// A = {x <= -core}, B = {x >= core}. For every frame inside a core it adds
/// the time to the next visit of the opposite core; frames after the last
/// such visit are censored and drop out.
#[derive(Default)]
struct PassageAcc {
    sum_ab: f64,
    n_ab: u64,
    sum_ba: f64,
    n_ba: u64,
}

impl PassageAcc {
    fn add_series(&mut self, x: &[f64], dt: f64, core: f64) {
        let m = x.len();
        let mut to_b = vec![f64::NAN; m];
        let mut to_a = vec![f64::NAN; m];
        let mut tb = f64::NAN;
        let mut ta = f64::NAN;
        for i in (0..m).rev() {
            if x[i] >= core {
                tb = 0.0;
            } else if !tb.is_nan() {
                tb += dt;
            }
            if x[i] <= -core {
                ta = 0.0;
            } else if !ta.is_nan() {
                ta += dt;
            }
            to_b[i] = tb;
            to_a[i] = ta;
        }
        for i in 0..m {
            if x[i] <= -core && to_b[i].is_finite() {
                self.sum_ab += to_b[i];
                self.n_ab += 1;
            }
            if x[i] >= core && to_a[i].is_finite() {
                self.sum_ba += to_a[i];
                self.n_ba += 1;
            }
        }
    }

    fn mfpt_ab(&self) -> f64 {
        self.sum_ab / self.n_ab as f64
    }

    fn mfpt_ba(&self) -> f64 {
        self.sum_ba / self.n_ba as f64
    }
}

fn series_1d(t: &Trajectory) -> Vec<f64> {
    t.frames.iter().cloned().collect()
}

/// Composite Simpson over one bin; 64 panels is far below histogram noise
/// for the smooth weights integrated here.
fn bin_mass(lo: f64, hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    let n = 64usize;
    let h = (hi - lo) / n as f64;
    let mut s = f(lo) + f(hi);
    for j in 1..n {
        let w = if j % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(lo + j as f64 * h);
    }
    s * h / 3.0
}

fn normal(rng: &mut ChaCha20Rng) -> f64 {
    StandardNormal.sample(rng)
}

// ---------------------------------------------------------------------------
// Shared double-well fixture: reference data at T in {0.8, 1.2}, a trained
// surrogate, and 1000 rollouts x 1000 steps at T = 1.0.
// ---------------------------------------------------------------------------

struct DwFixture {
    cfg: RunConfig,
    out: PathBuf,
}

static DW: OnceLock<DwFixture> = OnceLock::new();

fn dw_fixture() -> &'static DwFixture {
    DW.get_or_init(|| {
        let t0 = Instant::now();
        let mut cfg = preset("double_well").unwrap();
        cfg.sample = SampleSection {
            n_ode_steps: 50,
            delta_t: 0.25,
            temperature: 1.0,
            ensemble_size: 1000,
            n_steps: 1000,
            tail_window: 10,
        };
        cfg.seed = 20_202;
        cfg.validate().unwrap();
        let out = ws_dir("double_well");
        cmd_simulate(&cfg, &out, 1).unwrap();
        let refs = burned_refs(&cfg, &out);
        two_phase_train(&cfg, &refs, 5000, 8000, &out);
        cmd_rollout(&cfg, &out, 1).unwrap();
        eprintln!(
            "[fixture] double-well train + 1000x1000 rollout in {:.0} s",
            t0.elapsed().as_secs_f64()
        );
        DwFixture { cfg, out }
    })
}

fn dw_member_series(fx: &DwFixture) -> Vec<Vec<f64>> {
    sorted_traj_files(&fx.out.join("rollouts"))
        .iter()
        .map(|p| series_1d(&read_trajectory(p).unwrap()))
        .collect()
}

// ---------------------------------------------------------------------------
// C1: the surrogate reproduces the closed-form OU transition density.
// ---------------------------------------------------------------------------

#[test]
fn c1_ou_transition_density_fidelity() {
    let t0 = Instant::now();
    let cfg = preset("ou").unwrap();
    let out = ws_dir("ou");
    cmd_simulate(&cfg, &out, 1).unwrap();
    let refs = burned_refs(&cfg, &out);
    assert_eq!(refs.len(), 64);
    assert_eq!(refs[0].n_frames(), 10_000);
    let state = two_phase_train(&cfg, &refs, 4500, 8000, &out);
    let params = &state.params;
    let train_s = t0.elapsed().as_secs_f64();

    let meta = system_meta(&cfg);
    let cond = cond_source(&meta);
    let interval = cfg.system.frame_interval();
    let lags: [u64; 4] = [1, 4, 16, 32];
    let x0s: [f64; 5] = [-1.5, -1.0, 0.5, 1.0, 1.5];
    let n_draws = 10_000usize;

    let mut worst_mean = (0.0f64, 0u64, 0.0f64);
    let mut worst_var = (0.0f64, 0u64, 0.0f64);
    for (li, &lag) in lags.iter().enumerate() {
        let delta_t = lag as f64 * interval;
        let (decay, var_ref) = ou_transition_moments(1.0, 1.0, 1.0, 1.0, delta_t).unwrap();
        for (xi, &x0) in x0s.iter().enumerate() {
            let start = ndarray::arr2(&[[x0]]);
            let base = SamplerConfig {
                n_ode_steps: 100,
                time_grid: Vec::new(),
                delta_t,
                temperature: 1.0,
                seed: 0,
                re_center: false,
            };
            let mut sum = 0.0;
            let mut sumsq = 0.0;
            for i in 0..n_draws {
                let scfg = SamplerConfig {
                    seed: derive_u64(cfg.seed, "acceptance-c1", &[li as u64, xi as u64, i as u64]),
                    ..base.clone()
                };
                let tr = sample_transition(params, &start.view(), &cond, &scfg).unwrap();
                let v = tr.state[[0, 0]];
                sum += v;
                sumsq += v * v;
            }
            let mean = sum / n_draws as f64;
            let var = (sumsq - sum * sum / n_draws as f64) / (n_draws as f64 - 1.0);
            let mean_ref = x0 * decay;
            let mean_err = ((mean - mean_ref) / mean_ref).abs();
            let var_err = ((var - var_ref) / var_ref).abs();
            assert!(
                mean_err < 0.10,
                "lag {lag} frames, x0 {x0}: sampled mean {mean:.4} vs analytic {mean_ref:.4} \
                 ({:.1}% off)",
                mean_err * 100.0
            );
            assert!(
                var_err < 0.10,
                "lag {lag} frames, x0 {x0}: sampled variance {var:.4} vs analytic {var_ref:.4} \
                 ({:.1}% off)",
                var_err * 100.0
            );
            if mean_err > worst_mean.0 {
                worst_mean = (mean_err, lag, x0);
            }
            if var_err > worst_var.0 {
                worst_var = (var_err, lag, x0);
            }
        }
    }
    println!(
        "ACCEPT C1 ou transition density fidelity: PASS (worst mean err {:.1}% at lag {} x0 {}, \
         worst var err {:.1}% at lag {} x0 {}, train {:.0} s, total {:.0} s)",
        worst_mean.0 * 100.0,
        worst_mean.1,
        worst_mean.2,
        worst_var.0 * 100.0,
        worst_var.1,
        worst_var.2,
        train_s,
        t0.elapsed().as_secs_f64()
    );
}

// ---------------------------------------------------------------------------
// C2: tail frames of long rollouts recover the Boltzmann free-energy profile
// of the double well, judged against bin-wise quadrature of exp(-U/kT).
// ---------------------------------------------------------------------------

#[test]
fn c2_double_well_equilibrium_recovery() {
    let t0 = Instant::now();
    let fx = dw_fixture();

    let refs = burned_refs(&fx.cfg, &fx.out);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for t in &refs {
        for &v in t.frames.iter() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }

    let members = dw_member_series(fx);
    assert_eq!(members.len(), 1000);
    let tail: Vec<f64> = members
        .iter()
        .flat_map(|m| m[m.len() - 10..].iter().cloned())
        .collect();
    assert_eq!(tail.len(), 10_000);
    let pool = Array2::from_shape_vec((tail.len(), 1), tail).unwrap();

    let bins = 50usize;
    let model_grid =
        free_energy_surface(&pool.view(), &[bins], 1.0, 1.0, Some(&[(lo, hi)])).unwrap();

    // Quadrature-exact Boltzmann surface on the same edges. A bin counts as
    // occupied when it predicts at least one expected sample at the model
    // pool size; below that the histogram cannot resolve it.
    let temperature = 1.0;
    let u = |x: f64| (x * x - 1.0) * (x * x - 1.0);
    let edges = &model_grid.edges[0];
    let masses: Vec<f64> = (0..bins)
        .map(|i| bin_mass(edges[i], edges[i + 1], |x| (-u(x) / temperature).exp()))
        .collect();
    let z: f64 = masses.iter().sum();
    let n_model = model_grid.n_samples as f64;
    let mut p = vec![0.0; bins];
    let mut g = vec![f64::INFINITY; bins];
    let mut occupied = vec![false; bins];
    for i in 0..bins {
        p[i] = masses[i] / z;
        g[i] = -temperature * p[i].ln();
        occupied[i] = p[i] * n_model >= 1.0;
    }
    let exact = FesGrid {
        edges: model_grid.edges.clone(),
        shape: vec![bins],
        p,
        g,
        occupied,
        temperature,
        k_b: 1.0,
        n_samples: 0,
        n_dropped: 0,
    };

    let n_occ = exact.occupied.iter().filter(|o| **o).count();
    let m = fes_metrics(&exact, &model_grid).unwrap();
    assert!(
        m.mae < 0.5,
        "free-energy MAE {:.3} k_BT over {n_occ} resolvable bins (coverage {:.3})",
        m.mae,
        m.coverage
    );
    assert!(
        m.coverage > 0.9,
        "coverage {:.3} over {n_occ} resolvable bins (MAE {:.3})",
        m.coverage,
        m.mae
    );
    println!(
        "ACCEPT C2 double-well equilibrium recovery: PASS (MAE {:.3} k_BT, RMSE {:.3}, \
         coverage {:.3}, {n_occ}/{bins} bins resolvable, {} dropped samples, {:.0} s)",
        m.mae,
        m.rmse,
        m.coverage,
        model_grid.n_dropped,
        t0.elapsed().as_secs_f64()
    );
}

// ---------------------------------------------------------------------------
// C3: reverse-mode gradients of the training loss match central finite
// differences on a sub-1k-parameter double-precision model.
// ---------------------------------------------------------------------------

#[test]
fn c3_gradient_correctness() {
    // A 3-bead chain keeps every parameter group live: attention scores vary
    // across tokens, distances drive the radial embedding and pair bias.
    let config = ModelConfig {
        dim: 3,
        residue_repr_dim: 6,
        cond_dim: 6,
        hidden_dim: 6,
        n_attention_heads: 2,
        n_layers_fc: 1,
        n_layers_fv: 1,
        use_pair_bias: true,
        s_sin_dim: 4,
        rbf_bins: 4,
        r_max: 3.0,
        precision: Precision::Double,
    };
    let layout = itolab::conditioning::FeatureLayout {
        seq_vocab: vec!["a".to_string(), "b".to_string()],
        token_dim: 2,
        dt_sin: itolab::conditioning::SinusoidalSpec {
            dim: 4,
            max_period: 1.0,
        },
        temp_sin: itolab::conditioning::SinusoidalSpec {
            dim: 4,
            max_period: 4.0,
        },
        external_dim: 0,
        s_llm_vocab: vec![],
        c_llm_vocab: vec![],
        annotation_dim: 0,
    };
    let mut params = ModelParams::init(config, layout, 303).unwrap();
    let n_params = params.n_params();
    assert!(n_params <= 1000, "model has {n_params} parameters");
    // The velocity head starts at zero, which blocks gradient flow upstream;
    // perturb it so the probe point is generic.
    let mut head_rng = derive_rng(303, "acceptance-c3-head", &[]);
    for name in ["fv.out.w", "fv.out.b"] {
        params
            .tensor_mut(name)
            .unwrap()
            .mapv_inplace(|_| 0.3 * normal(&mut head_rng));
    }

    let spec = itolab::systems::PotentialSpec {
        kind: itolab::systems::PotentialKind::BeadChain {
            k_bond: 50.0,
            r0: 1.0,
            contacts: vec![itolab::systems::Contact { i: 0, j: 2 }],
            eps_c: 1.0,
            sigma_c: 0.3,
            r_c: 1.2,
        },
        n_particles: 3,
        dim: 3,
    };
    let lcfg = LangevinConfig {
        timestep: 0.002,
        friction: 1.0,
        temperature: 1.0,
        k_b: 1.0,
        seed: 5,
        n_steps: 1600,
        save_stride: 4,
        integrator: Integrator::EulerMaruyama,
    };
    let x0 = ndarray::arr2(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
    let traj = simulate_langevin(&spec, &lcfg, &x0.view(), "grad-check").unwrap();
    let meta = SystemMeta {
        tokens: vec!["a".to_string(), "b".to_string(), "a".to_string()],
        external: None,
        annotations: None,
        center: true,
    };
    let dataset = Dataset::new(vec![DatasetEntry {
        trajectory: traj,
        meta,
    }])
    .unwrap();

    let mut pick = derive_rng(303, "acceptance-c3-pick", &[]);
    let names: Vec<String> = params.tensors().keys().cloned().collect();
    let mut seen: HashSet<(usize, usize, usize)> = HashSet::new();
    let mut worst = 0.0f64;
    let mut live = 0usize;
    let h = 1e-5;
    for b in 0..5u64 {
        let mut batch_rng = derive_rng(303, "acceptance-c3-batch", &[b]);
        let batch = sample_transition_batch(&dataset, 8, 3, &mut batch_rng).unwrap();
        let loss_rng = derive_rng(303, "acceptance-c3-loss", &[b]);
        let analytic = cfm_loss(&params, &batch, &mut loss_rng.clone())
            .unwrap()
            .gradients(&params)
            .unwrap();
        for _ in 0..4 {
            let (ni, r, c) = loop {
                let ni = pick.random_range(0..names.len());
                let (rows, cols) = params.tensor(&names[ni]).unwrap().dim();
                let r = pick.random_range(0..rows);
                let c = pick.random_range(0..cols);
                if seen.insert((ni, r, c)) {
                    break (ni, r, c);
                }
            };
            let name = &names[ni];
            let mut plus = params.clone();
            plus.tensor_mut(name).unwrap()[[r, c]] += h;
            let mut minus = params.clone();
            minus.tensor_mut(name).unwrap()[[r, c]] -= h;
            let lp = cfm_loss(&plus, &batch, &mut loss_rng.clone()).unwrap().loss;
            let lm = cfm_loss(&minus, &batch, &mut loss_rng.clone()).unwrap().loss;
            let fd = (lp - lm) / (2.0 * h);
            let a = analytic.tensors[name][[r, c]];
            if a.abs() < 1e-12 && fd.abs() < 1e-12 {
                continue;
            }
            live += 1;
            let rel = (a - fd).abs() / a.abs().max(fd.abs());
            assert!(
                rel < 1e-4,
                "batch {b}, {name}[{r},{c}]: backward {a:.9e} vs central difference {fd:.9e} \
                 (rel {rel:.2e})"
            );
            worst = worst.max(rel);
        }
    }
    // The probe must exercise real gradient signal, not dead coordinates.
    assert!(live >= 10, "only {live}/20 probed coordinates had nonzero gradients");
    println!(
        "ACCEPT C3 gradient correctness: PASS ({n_params} parameters, {live}/20 live \
         coordinates, worst rel err {worst:.2e})"
    );
}

// ---------------------------------------------------------------------------
// C4: linear-system MFPT agrees with brute-force Monte-Carlo first passage
// on random dense chains, and the stationary solve is tight.
// ---------------------------------------------------------------------------

fn random_chain(k: usize, rng: &mut ChaCha20Rng) -> Array2<f64> {
    let mut p = Array2::zeros((k, k));
    for i in 0..k {
        let mut row_sum = 0.0;
        for j in 0..k {
            let v = 0.05 + rng.random::<f64>();
            p[[i, j]] = v;
            row_sum += v;
        }
        for j in 0..k {
            p[[i, j]] /= row_sum;
        }
    }
    p
}

fn mc_first_passage(
    p: &Array2<f64>,
    start_weights: &[(usize, f64)],
    target: &HashSet<usize>,
    walks: usize,
    rng: &mut ChaCha20Rng,
) -> f64 {
    let k = p.nrows();
    let mut cum = vec![0.0; k * k];
    for i in 0..k {
        let mut acc = 0.0;
        for j in 0..k {
            acc += p[[i, j]];
            cum[i * k + j] = acc;
        }
        cum[i * k + k - 1] = 1.0;
    }
    let total_w: f64 = start_weights.iter().map(|(_, w)| w).sum();
    let mut total_steps = 0.0f64;
    for _ in 0..walks {
        let mut pick = rng.random::<f64>() * total_w;
        let mut cur = start_weights[0].0;
        for &(s, w) in start_weights {
            cur = s;
            if pick < w {
                break;
            }
            pick -= w;
        }
        let mut steps = 0u64;
        loop {
            let u = rng.random::<f64>();
            let row = &cum[cur * k..(cur + 1) * k];
            cur = row.partition_point(|&c| c < u).min(k - 1);
            steps += 1;
            if target.contains(&cur) {
                break;
            }
        }
        total_steps += steps as f64;
    }
    total_steps / walks as f64
}

#[test]
fn c4_msm_mfpt_oracle_equivalence() {
    let t0 = Instant::now();
    let mut rng = derive_rng(404, "acceptance-c4", &[]);
    let mut worst_rel = 0.0f64;
    let mut worst_resid = 0.0f64;
    for (ci, &k) in [4usize, 5, 6, 7, 8, 6].iter().enumerate() {
        let p = random_chain(k, &mut rng);
        let pi = stationary_distribution(&p.view()).unwrap();
        let mut resid: f64 = 0.0;
        for j in 0..k {
            let mut acc = -pi[j];
            for i in 0..k {
                acc += pi[i] * p[[i, j]];
            }
            resid = resid.max(acc.abs());
        }
        assert!(resid < 1e-10, "chain {ci}: stationary residual {resid:.3e}");
        assert!((pi.sum() - 1.0).abs() < 1e-12);
        worst_resid = worst_resid.max(resid);

        let source: Vec<usize> = if ci % 3 == 2 { vec![0, 1] } else { vec![0] };
        let target = vec![k - 1];
        let analytic = mfpt(&p.view(), &pi.view(), &source, &target, 1.0).unwrap();

        let weights: Vec<(usize, f64)> = source.iter().map(|&s| (s, pi[s])).collect();
        let tgt: HashSet<usize> = target.iter().cloned().collect();
        let mc = mc_first_passage(&p, &weights, &tgt, 1_000_000, &mut rng);
        let rel = (analytic - mc).abs() / analytic;
        assert!(
            rel < 0.02,
            "chain {ci} ({k} states, source {source:?}): linear system {analytic:.4} vs \
             Monte Carlo {mc:.4} (rel {:.2}%)",
            rel * 100.0
        );
        worst_rel = worst_rel.max(rel);
    }
    println!(
        "ACCEPT C4 msm/mfpt oracle equivalence: PASS (6 chains, worst MC deviation {:.2}%, \
         worst stationary residual {:.1e}, {:.1} s)",
        worst_rel * 100.0,
        worst_resid,
        t0.elapsed().as_secs_f64()
    );
}

// ---------------------------------------------------------------------------
// C5: the TICA solver matches construction-exact generalized eigensystems
// and recovers the AR(1) autocorrelation.
// ---------------------------------------------------------------------------

fn random_orthogonal(d: usize, rng: &mut ChaCha20Rng) -> Array2<f64> {
    loop {
        let mut q = Array2::from_shape_fn((d, d), |_| normal(rng));
        let mut ok = true;
        for j in 0..d {
            for i in 0..j {
                let dot = q.column(i).dot(&q.column(j));
                let col_i = q.column(i).to_owned();
                q.column_mut(j).zip_mut_with(&col_i, |a, b| *a -= dot * b);
            }
            let n = q.column(j).dot(&q.column(j)).sqrt();
            if n < 1e-6 {
                ok = false;
                break;
            }
            q.column_mut(j).mapv_inplace(|v| v / n);
        }
        if ok {
            return q;
        }
    }
}

fn spaced_eigenvalues(d: usize, rng: &mut ChaCha20Rng) -> Vec<f64> {
    'outer: loop {
        let mut u: Vec<f64> = (0..d).map(|_| 1.8 * rng.random::<f64>() - 0.9).collect();
        u.sort_by(|a, b| b.partial_cmp(a).unwrap());
        for w in u.windows(2) {
            if w[0] - w[1] < 0.03 {
                continue 'outer;
            }
        }
        return u;
    }
}

#[test]
fn c5_tica_oracle_equivalence() {
    let d = 5usize;
    let mut rng = derive_rng(505, "acceptance-c5", &[]);
    let mut worst_val = 0.0f64;
    let mut worst_vec = 0.0f64;
    let mut worst_resid = 0.0f64;
    for pair in 0..50 {
        let mut l = Array2::zeros((d, d));
        for i in 0..d {
            for j in 0..i {
                l[[i, j]] = 0.3 * normal(&mut rng);
            }
            l[[i, i]] = 0.6 + rng.random::<f64>();
        }
        let c0 = l.dot(&l.t());
        let q = random_orthogonal(d, &mut rng);
        let u = spaced_eigenvalues(d, &mut rng);
        let mut s_mat = Array2::zeros((d, d));
        for i in 0..d {
            let qi = q.column(i);
            for r in 0..d {
                for c in 0..d {
                    s_mat[[r, c]] += u[i] * qi[r] * qi[c];
                }
            }
        }
        let ctau = l.dot(&s_mat).dot(&l.t());

        let model = tica_from_covariances(
            Array1::zeros(d),
            c0.clone(),
            ctau.clone(),
            1,
            d,
            0.0,
        )
        .unwrap();

        for i in 0..d {
            let dv = (model.eigenvalues[i] - u[i]).abs();
            assert!(
                dv < 1e-8,
                "pair {pair}, eigenvalue {i}: {} vs exact {} (diff {dv:.2e})",
                model.eigenvalues[i],
                u[i]
            );
            worst_val = worst_val.max(dv);

            // Exact generalized eigenvector: solve L^T v = q_i backwards.
            let qi = q.column(i);
            let mut v_exact = Array1::zeros(d);
            for r in (0..d).rev() {
                let mut acc = qi[r];
                for j in (r + 1)..d {
                    acc -= l[[j, r]] * v_exact[j];
                }
                v_exact[r] = acc / l[[r, r]];
            }

            let v_mine = model.projection.column(i).to_owned();
            let c0v = c0.dot(&v_mine);
            let norm = v_mine.dot(&c0v).sqrt();
            let sign = if v_mine.dot(&v_exact) >= 0.0 { 1.0 } else { -1.0 };
            for r in 0..d {
                let dvr = (v_mine[r] / norm * sign - v_exact[r]).abs();
                assert!(
                    dvr < 1e-8,
                    "pair {pair}, eigenvector {i} component {r}: diff {dvr:.2e}"
                );
                worst_vec = worst_vec.max(dvr);
            }

            let lam = model.eigenvalues[i];
            let resid_vec = ctau.dot(&v_mine) - lam * &c0v;
            let resid = resid_vec.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(resid < 1e-8, "pair {pair}, component {i}: residual {resid:.2e}");
            worst_resid = worst_resid.max(resid);
        }
    }

    // AR(1): lagged autocorrelation rho is the top eigenvalue.
    let rho = 0.9f64;
    let m = 100_000usize;
    let mut rng = derive_rng(505, "acceptance-c5-ar", &[]);
    let mut feats = Array2::zeros((m, 2));
    let mut x = normal(&mut rng);
    let noise_scale = (1.0 - rho * rho).sqrt();
    for t in 0..m {
        feats[[t, 0]] = x;
        feats[[t, 1]] = normal(&mut rng);
        x = rho * x + noise_scale * normal(&mut rng);
    }
    let model = tica_fit(&feats.view(), 1, 2, None).unwrap();
    let lam1 = model.eigenvalues[0];
    let rel = (lam1 - rho).abs() / rho;
    assert!(
        rel < 0.02,
        "AR(1) top eigenvalue {lam1:.4} vs rho {rho} (rel {:.2}%)",
        rel * 100.0
    );

    println!(
        "ACCEPT C5 tica oracle equivalence: PASS (50 pairs, worst eigenvalue diff {worst_val:.1e}, \
         worst eigenvector diff {worst_vec:.1e}, worst residual {worst_resid:.1e}, \
         AR(1) recovery {:.2}% off)",
        rel * 100.0
    );
}

// ---------------------------------------------------------------------------
// C6: FES metric identities and the 9:1 two-basin free-energy difference.
// ---------------------------------------------------------------------------

#[test]
fn c6_fes_metric_identities() {
    let mut rng = derive_rng(606, "acceptance-c6", &[]);
    let data = Array2::from_shape_fn((5000, 1), |_| normal(&mut rng));
    let a = free_energy_surface(&data.view(), &[32], 1.0, 1.0, None).unwrap();
    let b = free_energy_surface(&data.view(), &[32], 1.0, 1.0, None).unwrap();
    let m = fes_metrics(&a, &b).unwrap();
    assert_eq!(m.mae, 0.0, "identical inputs must give MAE exactly 0");
    assert_eq!(m.rmse, 0.0, "identical inputs must give RMSE exactly 0");
    assert_eq!(m.coverage, 1.0, "identical inputs must give coverage exactly 1");

    // Two sharp basins populated 9:1; the basin free-energy gap is
    // k_B T ln 9 up to counting noise.
    let n = 100_000usize;
    let mut draws = Array2::zeros((n, 1));
    for i in 0..n {
        let basin = if rng.random::<f64>() < 0.9 { -1.0 } else { 1.0 };
        draws[[i, 0]] = basin + 0.08 * normal(&mut rng);
    }
    let grid = free_energy_surface(&draws.view(), &[40], 1.0, 1.0, Some(&[(-2.0, 2.0)])).unwrap();
    assert_eq!(grid.n_dropped, 0);
    let edges = &grid.edges[0];
    let mut p_left = 0.0;
    let mut p_right = 0.0;
    for i in 0..40 {
        let center = 0.5 * (edges[i] + edges[i + 1]);
        if center < 0.0 {
            p_left += grid.p[i];
        } else {
            p_right += grid.p[i];
        }
    }
    let delta_g = (p_left / p_right).ln();
    let expect = 9.0f64.ln();
    let sigma = (1.0 / (p_left * n as f64) + 1.0 / (p_right * n as f64)).sqrt();
    assert!(
        (delta_g - expect).abs() < 3.0 * sigma,
        "basin gap {delta_g:.4} vs ln 9 = {expect:.4} (3 sigma = {:.4})",
        3.0 * sigma
    );
    println!(
        "ACCEPT C6 fes metric identities: PASS (identity exact, basin gap {delta_g:.4} vs \
         {expect:.4}, {:.1} sigma)",
        (delta_g - expect).abs() / sigma
    );
}

// ---------------------------------------------------------------------------
// C7: Arrhenius fits recover synthetic rates exactly and degrade gracefully
// under noise; the surrogate trained across T in {0.6..1.4} shows barrier
// kinetics: MFPT falls monotonically with T and the fitted activation energy
// brackets the double-well barrier height a*b^2 = 1 within a factor of two.
// ---------------------------------------------------------------------------

#[test]
fn c7_arrhenius_recovery() {
    let t0 = Instant::now();
    let temps = [0.6, 0.8, 1.0, 1.2, 1.4];

    // Exact synthetic rates.
    let ln_a_true = 5.0f64.ln();
    let e_a_true = 3.0;
    let exact: Vec<f64> = temps.iter().map(|t| (ln_a_true - e_a_true / t).exp()).collect();
    let fit = arrhenius_fit(&temps, &exact, 1.0).unwrap();
    assert!(
        (fit.ln_a - ln_a_true).abs() < 1e-10 && (fit.e_a - e_a_true).abs() < 1e-10,
        "exact fit drifted: ln A {} vs {ln_a_true}, E_a {} vs {e_a_true}",
        fit.ln_a,
        fit.e_a
    );

    // 1% multiplicative noise, 100 seeds.
    let mut worst_noise = 0.0f64;
    for seed in 0..100u64 {
        let mut rng = derive_rng(707, "acceptance-c7-noise", &[seed]);
        let noisy: Vec<f64> = exact.iter().map(|k| k * (0.01 * normal(&mut rng)).exp()).collect();
        let fit = arrhenius_fit(&temps, &noisy, 1.0).unwrap();
        let rel_e = (fit.e_a - e_a_true).abs() / e_a_true;
        let rel_a = (fit.ln_a - ln_a_true).abs() / ln_a_true;
        assert!(
            rel_e < 0.05 && rel_a < 0.05,
            "seed {seed}: E_a off {:.2}%, ln A off {:.2}%",
            rel_e * 100.0,
            rel_a * 100.0
        );
        worst_noise = worst_noise.max(rel_e.max(rel_a));
    }

    // Surrogate trained across the full temperature range.
    let mut cfg = preset("double_well").unwrap();
    cfg.system.temperatures = temps.to_vec();
    cfg.sample = SampleSection {
        n_ode_steps: 50,
        delta_t: 0.25,
        temperature: 1.0,
        ensemble_size: 128,
        n_steps: 500,
        tail_window: 10,
    };
    cfg.sweep.temperatures = temps.to_vec();
    cfg.seed = 70_707;
    cfg.validate().unwrap();
    let out = ws_dir("c7_sweep");
    cmd_simulate(&cfg, &out, 1).unwrap();
    let refs = burned_refs(&cfg, &out);
    assert_eq!(refs.len(), 10);
    let state = two_phase_train(&cfg, &refs, 5000, 8000, &out);

    let total_frames: usize = refs.iter().map(|t| t.n_frames()).sum();
    let initial: Vec<Array2<f64>> = (0..128usize)
        .map(|i| {
            let mut idx = i * total_frames / 128;
            for t in &refs {
                if idx < t.n_frames() {
                    return t.frames.index_axis(Axis(0), idx).to_owned();
                }
                idx -= t.n_frames();
            }
            unreachable!()
        })
        .collect();

    let meta = system_meta(&cfg);
    let cond = cond_source(&meta);
    let scfg = SamplerConfig {
        n_ode_steps: 50,
        time_grid: Vec::new(),
        delta_t: 0.25,
        temperature: 1.0,
        seed: derive_u64(cfg.seed, "acceptance-c7-sweep", &[]),
        re_center: false,
    };
    let sweeps = temperature_sweep(
        &state.params,
        &initial,
        &cond,
        &temps,
        (0.6, 1.4),
        500,
        &scfg,
        1,
    )
    .unwrap();

    let mut model_mfpts = Vec::new();
    for sw in &sweeps {
        assert!(sw.warning.is_none());
        let failed = sw.ensemble.n_failed();
        assert!(failed <= 6, "T {}: {failed}/128 rollouts failed", sw.temperature);
        let mut acc = PassageAcc::default();
        for (_, r) in sw.ensemble.succeeded() {
            let series: Vec<f64> = r.frames.iter().map(|f| f[[0, 0]]).collect();
            acc.add_series(&series, 0.25, 0.8);
        }
        let m = 0.5 * (acc.mfpt_ab() + acc.mfpt_ba());
        assert!(
            m.is_finite() && m > 0.0,
            "T {}: surrogate MFPT {m} (events {} / {})",
            sw.temperature,
            acc.n_ab,
            acc.n_ba
        );
        model_mfpts.push(m);
    }
    for w in model_mfpts.windows(2) {
        assert!(
            w[1] < w[0],
            "surrogate MFPT not monotone in T: {model_mfpts:?}"
        );
    }
    let rates: Vec<f64> = model_mfpts.iter().map(|m| 1.0 / m).collect();
    let model_fit = arrhenius_fit(&temps, &rates, 1.0).unwrap();
    assert!(
        model_fit.e_a > 0.0 && model_fit.e_a >= 0.5 && model_fit.e_a <= 2.0,
        "surrogate activation energy {:.3} outside [0.5, 2] around the barrier height 1",
        model_fit.e_a
    );

    // Reference-Langevin oracle at the same temperatures, for the record.
    let mut ref_mfpts = Vec::new();
    for (ti, &t) in temps.iter().enumerate() {
        let lcfg = LangevinConfig {
            timestep: 0.005,
            friction: 1.0,
            temperature: t,
            k_b: 1.0,
            seed: derive_u64(cfg.seed, "acceptance-c7-oracle", &[ti as u64]),
            n_steps: 1_000_000,
            save_stride: 10,
            integrator: Integrator::EulerMaruyama,
        };
        let x0 = ndarray::arr2(&[[1.0]]);
        let traj = simulate_langevin(&cfg.system.potential, &lcfg, &x0.view(), "oracle").unwrap();
        let mut acc = PassageAcc::default();
        acc.add_series(&series_1d(&traj), traj.frame_interval, 0.8);
        ref_mfpts.push(0.5 * (acc.mfpt_ab() + acc.mfpt_ba()));
    }
    let ref_rates: Vec<f64> = ref_mfpts.iter().map(|m| 1.0 / m).collect();
    let ref_fit = arrhenius_fit(&temps, &ref_rates, 1.0).unwrap();

    println!(
        "ACCEPT C7 arrhenius recovery: PASS (exact to 1e-10, worst noisy-fit error {:.2}%; \
         surrogate MFPT {:?} monotone, E_a {:.3} vs reference {:.3} and barrier 1.0; {:.0} s)",
        worst_noise * 100.0,
        model_mfpts
            .iter()
            .map(|m| (m * 100.0).round() / 100.0)
            .collect::<Vec<_>>(),
        model_fit.e_a,
        ref_fit.e_a,
        t0.elapsed().as_secs_f64()
    );
}

// ---------------------------------------------------------------------------
// C8: the full double-well preset pipeline is byte-reproducible and
// worker-count independent.
// ---------------------------------------------------------------------------

#[test]
fn c8_determinism_and_reproducibility() {
    let t0 = Instant::now();
    let bin = env!("CARGO_BIN_EXE_itolab");
    let stages = ["simulate", "train", "sample", "rollout", "analyze", "sweep"];
    let mut outs = Vec::new();
    for (tag, workers) in [("one", "1"), ("three", "3")] {
        let out = ws_dir(&format!("c8_{tag}"));
        for stage in stages {
            let status = Command::new(bin)
                .args([
                    "--preset",
                    "double_well",
                    "--seed",
                    "4242",
                    "--workers",
                    workers,
                    "--out",
                ])
                .arg(&out)
                .arg(stage)
                .status()
                .unwrap();
            assert!(status.success(), "{stage} failed with {workers} workers");
        }
        outs.push(out);
    }

    let mut compared = 0usize;
    for sub in ["analysis", "sweep"] {
        let mut names: Vec<String> = fs::read_dir(outs[0].join(sub))
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .filter(|n| n.ends_with(".csv"))
            .collect();
        names.sort();
        assert!(!names.is_empty());
        for name in names {
            let a = fs::read(outs[0].join(sub).join(&name)).unwrap();
            let b = fs::read(outs[1].join(sub).join(&name)).unwrap();
            assert!(a == b, "{sub}/{name} differs between runs");
            compared += 1;
        }
    }
    for stage in stages {
        let read_hash = |o: &Path| -> String {
            let v: serde_json::Value = serde_json::from_str(
                &fs::read_to_string(o.join("manifests").join(format!("{stage}.json"))).unwrap(),
            )
            .unwrap();
            v["config_hash"].as_str().unwrap().to_string()
        };
        assert_eq!(read_hash(&outs[0]), read_hash(&outs[1]));
    }
    println!(
        "ACCEPT C8 determinism and reproducibility: PASS ({compared} CSVs byte-identical \
         across --workers 1 vs 3, {:.0} s)",
        t0.elapsed().as_secs_f64()
    );
}

// ---------------------------------------------------------------------------
// C9: the surrogate's barrier-crossing MFPT lands within one order of
// magnitude of reference Langevin, with the bias direction reported.
// ---------------------------------------------------------------------------

#[test]
fn c9_timescale_bias_direction() {
    let t0 = Instant::now();
    let fx = dw_fixture();

    let mut model_acc = PassageAcc::default();
    for series in dw_member_series(fx) {
        model_acc.add_series(&series, fx.cfg.sample.delta_t, 0.8);
    }

    let lcfg = LangevinConfig {
        timestep: 0.005,
        friction: 1.0,
        temperature: 1.0,
        k_b: 1.0,
        seed: derive_u64(fx.cfg.seed, "acceptance-c9-oracle", &[]),
        n_steps: 2_000_000,
        save_stride: 10,
        integrator: Integrator::EulerMaruyama,
    };
    let x0 = ndarray::arr2(&[[1.0]]);
    let traj = simulate_langevin(&fx.cfg.system.potential, &lcfg, &x0.view(), "oracle").unwrap();
    let mut ref_acc = PassageAcc::default();
    ref_acc.add_series(&series_1d(&traj), traj.frame_interval, 0.8);

    let mut ratios = Vec::new();
    for (dir, m, r) in [
        ("a->b", model_acc.mfpt_ab(), ref_acc.mfpt_ab()),
        ("b->a", model_acc.mfpt_ba(), ref_acc.mfpt_ba()),
    ] {
        assert!(m.is_finite() && m > 0.0, "{dir}: surrogate MFPT {m}");
        let ratio = m / r;
        assert!(
            (0.1..=10.0).contains(&ratio),
            "{dir}: surrogate MFPT {m:.3} vs reference {r:.3} (ratio {ratio:.2} outside one \
             order of magnitude)"
        );
        ratios.push((dir, m, r, ratio));
    }
    let mean_ratio = (ratios[0].3 * ratios[1].3).sqrt();
    let bias = if mean_ratio < 1.0 {
        "surrogate runs fast (underestimates timescales)"
    } else {
        "surrogate runs slow (overestimates timescales)"
    };
    println!(
        "ACCEPT C9 timescale bias direction: PASS (a->b {:.2} vs {:.2}, b->a {:.2} vs {:.2}, \
         mean ratio {mean_ratio:.2}: {bias}; {:.0} s)",
        ratios[0].1,
        ratios[0].2,
        ratios[1].1,
        ratios[1].2,
        t0.elapsed().as_secs_f64()
    );
}
