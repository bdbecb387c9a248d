//! Stage implementations behind the CLI subcommands. Every artifact lands
//! under the output directory passed on the command line, and every random
//! stream derives from the config's root seed by name, so reruns with the
//! same config and inputs reproduce outputs byte for byte regardless of the
//! worker count.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, ArrayView3, Axis};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde_json::json;

use crate::analysis::{
    arrhenius_fit, bayesian_msm, fes_metrics, free_energy_surface, kmeans, local_rmsd,
    msm_estimate, pairwise_distance_features, pcca_two_state, tica_from_covariances,
    tica_transform, write_csv, FesGrid, KMeans, MsmModel, TicaModel,
};
use crate::cli::config::RunConfig;
use crate::cli::manifest::RunManifest;
use crate::conditioning::{FeatureLayout, SinusoidalSpec};
use crate::data::io::{read_trajectory, write_trajectory};
use crate::data::{Dataset, DatasetEntry, SystemMeta};
use crate::error::{ItoError, Result};
use crate::model::checkpoint::ensure_layout_matches;
use crate::model::ModelParams;
use crate::rng::{derive_rng, derive_u64};
use crate::sampling::{
    ensemble_rollout, sample_transition, temperature_sweep, write_ensemble_manifest, CondSource,
    SamplerConfig,
};
use crate::systems::{simulate_langevin, LangevinConfig, Trajectory};
use crate::training::{init_train_state, read_train_state, train, TrainOutputs};

fn traj_dir(out: &Path) -> PathBuf {
    out.join("trajectories")
}

fn ckpt_dir(out: &Path) -> PathBuf {
    out.join("checkpoints")
}

fn rollout_dir(out: &Path) -> PathBuf {
    out.join("rollouts")
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| ItoError::io(dir.display().to_string(), e))
}

fn trajectory_file_name(id: &str, ti: usize, r: usize) -> String {
    format!("{id}_t{ti:02}_r{r:03}.traj")
}

/// The conditioning layout is a pure function of the config, so training and
/// every later stage rebuild the identical layout instead of persisting it.
pub fn build_layout(cfg: &RunConfig) -> FeatureLayout {
    let tokens = cfg.resolved_tokens();
    let vocab: Vec<String> = tokens.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let dt_max_phys = cfg.train.delta_t_max as f64 * cfg.system.frame_interval();
    FeatureLayout {
        seq_vocab: vocab,
        token_dim: cfg.features.token_dim,
        dt_sin: SinusoidalSpec { dim: cfg.features.dt_sin_dim, max_period: 2.0 * dt_max_phys },
        temp_sin: SinusoidalSpec {
            dim: cfg.features.temp_sin_dim,
            max_period: 2.0 * cfg.system.temp_range().1,
        },
        external_dim: 0,
        s_llm_vocab: vec![],
        c_llm_vocab: vec![],
        annotation_dim: 0,
    }
}

fn system_meta(cfg: &RunConfig) -> SystemMeta {
    SystemMeta {
        tokens: cfg.resolved_tokens(),
        external: None,
        annotations: None,
        center: cfg.system.center,
    }
}

fn sampler_config(cfg: &RunConfig, seed: u64) -> SamplerConfig {
    SamplerConfig {
        n_ode_steps: cfg.sample.n_ode_steps,
        time_grid: vec![],
        delta_t: cfg.sample.delta_t,
        temperature: cfg.sample.temperature,
        seed,
        re_center: cfg.system.center,
    }
}

pub fn cmd_simulate(cfg: &RunConfig, out: &Path, _workers: usize) -> Result<RunManifest> {
    let mut man = RunManifest::new("simulate", cfg);
    let t0 = Instant::now();
    let spec = cfg.system.system_spec();
    spec.validate()?;
    let dir = traj_dir(out);
    mkdir(&dir)?;
    let n_p = cfg.system.potential.n_particles;
    let dim = cfg.system.potential.dim;
    for (ti, &temp) in cfg.system.temperatures.iter().enumerate() {
        for r in 0..cfg.system.n_trajectories {
            let seed = derive_u64(cfg.seed, "simulate", &[ti as u64, r as u64]);
            man.record_seed(&format!("simulate[{ti:02}][{r:03}]"), seed);
            let mut x0 = Array2::zeros((n_p, dim));
            if let Some(base) = &cfg.system.x0_base {
                for (i, row) in base.iter().enumerate() {
                    for (j, v) in row.iter().enumerate() {
                        x0[[i, j]] = *v;
                    }
                }
            }
            if cfg.system.x0_scale > 0.0 {
                let mut rng = derive_rng(cfg.seed, "simulate-x0", &[ti as u64, r as u64]);
                for v in x0.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *v += cfg.system.x0_scale * z;
                }
            }
            let lang = LangevinConfig {
                timestep: cfg.system.timestep,
                friction: cfg.system.friction,
                temperature: temp,
                k_b: cfg.system.k_b,
                seed,
                n_steps: cfg.system.n_steps,
                save_stride: cfg.system.save_stride,
                integrator: cfg.system.integrator,
            };
            let traj = simulate_langevin(&cfg.system.potential, &lang, &x0.view(), &cfg.system.id)?;
            let path = dir.join(trajectory_file_name(&cfg.system.id, ti, r));
            write_trajectory(&path, &traj)?;
            man.record_artifact(out, &path);
        }
    }
    man.record_timing("simulate", t0.elapsed().as_secs_f64());
    Ok(man)
}

fn sorted_traj_paths(dir: &Path, missing_hint: &str) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|_| {
        ItoError::InvalidInput(format!("no trajectories under {}; {missing_hint}", dir.display()))
    })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "traj"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(ItoError::InvalidInput(format!(
            "no trajectories under {}; {missing_hint}",
            dir.display()
        )));
    }
    Ok(paths)
}

/// Reference trajectories in filename order with the burn-in head removed.
fn load_reference(cfg: &RunConfig, out: &Path) -> Result<Vec<Trajectory>> {
    let paths = sorted_traj_paths(&traj_dir(out), "run the simulate stage first")?;
    let burn = cfg.system.burn_in_frames;
    paths
        .iter()
        .map(|p| {
            let t = read_trajectory(p)?;
            if t.n_frames() < burn + 2 {
                return Err(ItoError::InvalidInput(format!(
                    "trajectory {} has {} frames; burn_in_frames = {burn} leaves fewer than 2",
                    p.display(),
                    t.n_frames()
                )));
            }
            Ok(Trajectory {
                frames: t.frames.slice(s![burn.., .., ..]).to_owned(),
                frame_interval: t.frame_interval,
                system_id: t.system_id.clone(),
                temperature: t.temperature,
            })
        })
        .collect()
}

fn load_rollouts(out: &Path) -> Result<Vec<Trajectory>> {
    let paths = sorted_traj_paths(&rollout_dir(out), "run the rollout stage first")?;
    paths.iter().map(|p| read_trajectory(p)).collect()
}

/// Pairwise distances for multi-particle systems, raw coordinates otherwise.
/// Single-particle potentials pin absolute positions, so their coordinates
/// are already well-defined features.
fn featurize(frames: &ArrayView3<f64>) -> Result<Array2<f64>> {
    let (m, l, d) = frames.dim();
    if l >= 2 {
        pairwise_distance_features(frames)
    } else {
        let flat: Vec<f64> = frames.iter().cloned().collect();
        Array2::from_shape_vec((m, l * d), flat)
            .map_err(|e| ItoError::InvalidInput(format!("cannot flatten frames: {e}")))
    }
}

/// TICA over several trajectories: one pooled mean and instantaneous
/// covariance, lagged covariance accumulated per trajectory so no pair
/// straddles a trajectory boundary.
fn fit_tica_multi(
    feats: &[Array2<f64>],
    lag: usize,
    n_components: usize,
    epsilon: Option<f64>,
) -> Result<TicaModel> {
    let d = feats.first().map(|f| f.ncols()).unwrap_or(0);
    if d == 0 {
        return Err(ItoError::EmptyInput("no features to fit".to_string()));
    }
    let total: usize = feats.iter().map(|f| f.nrows()).sum();
    if total == 0 {
        return Err(ItoError::EmptyInput("no frames to fit".to_string()));
    }
    let mut mean = Array1::<f64>::zeros(d);
    for f in feats {
        mean += &f.sum_axis(Axis(0));
    }
    mean /= total as f64;
    let mut c0 = Array2::<f64>::zeros((d, d));
    let mut ctau = Array2::<f64>::zeros((d, d));
    let mut n_pairs = 0usize;
    for f in feats {
        let x = f - &mean;
        c0 = c0 + x.t().dot(&x);
        let m = f.nrows();
        if m > lag {
            let a = x.slice(s![..m - lag, ..]);
            let b = x.slice(s![lag.., ..]);
            ctau = ctau + a.t().dot(&b);
            n_pairs += m - lag;
        }
    }
    if n_pairs == 0 {
        return Err(ItoError::InvalidInput(format!(
            "no trajectory has more than {lag} frames; reduce the TICA lag"
        )));
    }
    c0 /= total as f64;
    ctau /= n_pairs as f64;
    let eps = epsilon.unwrap_or_else(|| 1e-6 * c0.diag().sum() / d as f64);
    tica_from_covariances(mean, c0, ctau, lag, n_components, eps)
}

fn nearest_center(row: &ndarray::ArrayView1<f64>, centers: &Array2<f64>) -> usize {
    let mut best = 0usize;
    let mut best_d2 = f64::INFINITY;
    for (i, c) in centers.rows().into_iter().enumerate() {
        let d2: f64 = row.iter().zip(c.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        if d2 < best_d2 {
            best_d2 = d2;
            best = i;
        }
    }
    best
}

fn discretize(proj: &Array2<f64>, centers: &Array2<f64>) -> Vec<usize> {
    proj.rows().into_iter().map(|r| nearest_center(&r, centers)).collect()
}

fn vstack(parts: &[Array2<f64>]) -> Result<Array2<f64>> {
    let views: Vec<ArrayView2<f64>> = parts.iter().map(|p| p.view()).collect();
    concatenate(Axis(0), &views)
        .map_err(|e| ItoError::InvalidInput(format!("cannot stack projections: {e}")))
}

/// Histogram bounds shared by the reference and model grids: reference data
/// min/max per axis, degenerate axes widened. Passing the same explicit
/// bounds to both sides guarantees bitwise-equal bin edges.
fn shared_bounds(pool: &Array2<f64>, dims: usize) -> Result<Vec<(f64, f64)>> {
    let mut bounds = Vec::with_capacity(dims);
    for a in 0..dims {
        let col = pool.column(a);
        let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !lo.is_finite() || !hi.is_finite() {
            return Err(ItoError::NonFinite {
                location: format!("reference projection axis {a}"),
                detail: "cannot derive histogram bounds".to_string(),
            });
        }
        if lo == hi {
            bounds.push((lo - 0.5, hi + 0.5));
        } else {
            bounds.push((lo, hi));
        }
    }
    Ok(bounds)
}

pub fn cmd_train(cfg: &RunConfig, out: &Path, _workers: usize) -> Result<RunManifest> {
    let mut man = RunManifest::new("train", cfg);
    let t0 = Instant::now();
    let trajs = load_reference(cfg, out)?;
    let meta = system_meta(cfg);
    let entries: Vec<DatasetEntry> = trajs
        .into_iter()
        .map(|trajectory| DatasetEntry { trajectory, meta: meta.clone() })
        .collect();
    let dataset = Dataset::new(entries)?;
    let layout = build_layout(cfg);
    layout.validate()?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = derive_u64(cfg.seed, "train", &[]);
    man.record_seed("train", train_cfg.seed);
    let dir = ckpt_dir(out);
    mkdir(&dir)?;
    let outputs = TrainOutputs { checkpoint_dir: dir.clone(), trace_path: dir.join("trace.csv") };
    let state = init_train_state(cfg.model.clone(), layout, &train_cfg)?;
    man.record_timing("setup", t0.elapsed().as_secs_f64());
    let t1 = Instant::now();
    let (_state, trace) = train(&dataset, state, &train_cfg, Some(&outputs))?;
    man.record_timing("train", t1.elapsed().as_secs_f64());
    if let Some(last) = trace.last() {
        man.notes.insert("final_loss".into(), format!("{}", last.loss));
    }
    for entry in std::fs::read_dir(&dir).map_err(|e| ItoError::io(dir.display().to_string(), e))? {
        let p = entry.map_err(|e| ItoError::io(dir.display().to_string(), e))?.path();
        if p.is_file() {
            man.record_artifact(out, &p);
        }
    }
    Ok(man)
}

fn load_params(cfg: &RunConfig, out: &Path) -> Result<ModelParams> {
    let path = ckpt_dir(out).join("final.ckpt");
    if !path.exists() {
        return Err(ItoError::InvalidInput(format!(
            "no checkpoint at {}; run the train stage first",
            path.display()
        )));
    }
    let (state, _train_cfg) = read_train_state(&path)?;
    let params = state.params;
    ensure_layout_matches(&params, &build_layout(cfg))?;
    if params.config != cfg.model {
        return Err(ItoError::ConfigInvalid {
            violations: vec![
                "model section does not match the checkpoint's model configuration".to_string(),
            ],
        });
    }
    Ok(params)
}

/// Initial states for sampling stages: frames drawn at an even stride across
/// the pooled reference trajectories, wrapping when more states than frames
/// are requested.
fn initial_pool(cfg: &RunConfig, trajs: &[Trajectory]) -> Vec<Array2<f64>> {
    let total: usize = trajs.iter().map(|t| t.n_frames()).sum();
    let n = cfg.sample.ensemble_size;
    (0..n)
        .map(|i| {
            let mut idx = ((i as u64 * total as u64) / n as u64) as usize % total;
            for t in trajs {
                if idx < t.n_frames() {
                    return t.frame(idx).to_owned();
                }
                idx -= t.n_frames();
            }
            unreachable!("index within pooled frame count");
        })
        .collect()
}

pub fn cmd_sample(cfg: &RunConfig, out: &Path, _workers: usize) -> Result<RunManifest> {
    let mut man = RunManifest::new("sample", cfg);
    let t0 = Instant::now();
    let params = load_params(cfg, out)?;
    let trajs = load_reference(cfg, out)?;
    let pool = initial_pool(cfg, &trajs);
    let meta = system_meta(cfg);
    let cond = CondSource::from_meta(&meta);
    let n_p = cfg.system.potential.n_particles;
    let dim = cfg.system.potential.dim;
    let mut columns = vec!["draw".to_string()];
    for prefix in ["x0", "x1"] {
        for p in 0..n_p {
            for a in 0..dim {
                columns.push(format!("{prefix}_p{p}_{a}"));
            }
        }
    }
    let mut rows = Vec::with_capacity(pool.len());
    for (i, x0) in pool.iter().enumerate() {
        let seed = derive_u64(cfg.seed, "sample", &[i as u64]);
        man.record_seed(&format!("sample[{i:04}]"), seed);
        let scfg = sampler_config(cfg, seed);
        let tr = sample_transition(&params, &x0.view(), &cond, &scfg)?;
        let mut row = Vec::with_capacity(1 + 2 * n_p * dim);
        row.push(i as f64);
        row.extend(x0.iter().cloned());
        row.extend(tr.state.iter().cloned());
        rows.push(row);
    }
    let dir = out.join("samples");
    mkdir(&dir)?;
    let path = dir.join("transitions.csv");
    let meta_json = json!({
        "delta_t": cfg.sample.delta_t,
        "temperature": cfg.sample.temperature,
        "n_ode_steps": cfg.sample.n_ode_steps,
        "n_particles": n_p,
        "dim": dim,
    });
    let col_refs: Vec<&str> = columns.iter().map(|s| s.as_str()).collect();
    write_csv(&path, &meta_json, &col_refs, &rows)?;
    man.record_artifact(out, &path);
    man.record_timing("sample", t0.elapsed().as_secs_f64());
    Ok(man)
}

pub fn cmd_rollout(cfg: &RunConfig, out: &Path, workers: usize) -> Result<RunManifest> {
    let mut man = RunManifest::new("rollout", cfg);
    let t0 = Instant::now();
    let params = load_params(cfg, out)?;
    let trajs = load_reference(cfg, out)?;
    let pool = initial_pool(cfg, &trajs);
    let meta = system_meta(cfg);
    let cond = CondSource::from_meta(&meta);
    let seed = derive_u64(cfg.seed, "rollout", &[]);
    man.record_seed("rollout", seed);
    let scfg = sampler_config(cfg, seed);
    let ens = ensemble_rollout(&params, &pool, &cond, cfg.sample.n_steps, &scfg, workers)?;
    let dir = rollout_dir(out);
    mkdir(&dir)?;
    for (i, rr) in ens.succeeded() {
        let traj = rr.to_trajectory(&cfg.system.id);
        let path = dir.join(format!("member_{i:04}.traj"));
        write_trajectory(&path, &traj)?;
        man.record_artifact(out, &path);
    }
    let epath = dir.join("ensemble.csv");
    write_ensemble_manifest(&epath, &ens)?;
    man.record_artifact(out, &epath);
    man.notes.insert("n_failed".into(), ens.n_failed().to_string());
    if ens.n_failed() == ens.members.len() {
        let first = ens
            .members
            .iter()
            .find_map(|m| m.outcome.as_ref().err())
            .map(|e| e.to_string())
            .unwrap_or_default();
        return Err(ItoError::Sampling {
            trajectory: "rollout ensemble".to_string(),
            detail: format!("all {} members failed; first error: {first}", ens.members.len()),
        });
    }
    man.record_timing("rollout", t0.elapsed().as_secs_f64());
    Ok(man)
}

/// Reference-side collective coordinates shared by analyze and sweep: TICA
/// model, microstate centers, discrete trajectories, and the reference MSM.
struct RefCoords {
    tica: TicaModel,
    km: KMeans,
    msm: MsmModel,
    pool: Array2<f64>,
    n_components: usize,
}

fn reference_coordinates(
    cfg: &RunConfig,
    trajs: &[Trajectory],
    man: &mut RunManifest,
) -> Result<RefCoords> {
    let feats: Vec<Array2<f64>> =
        trajs.iter().map(|t| featurize(&t.frames.view())).collect::<Result<_>>()?;
    let width = feats[0].ncols();
    let n_components = cfg.analyze.n_tica_components.min(width);
    if n_components < cfg.analyze.n_tica_components {
        man.notes.insert(
            "tica_components".into(),
            format!(
                "requested {} components, feature space has {width}",
                cfg.analyze.n_tica_components
            ),
        );
    }
    let tica = fit_tica_multi(&feats, cfg.analyze.tica_lag, n_components, cfg.analyze.tica_epsilon)?;
    let projs: Vec<Array2<f64>> =
        feats.iter().map(|f| tica_transform(&tica, &f.view())).collect::<Result<_>>()?;
    let pool = vstack(&projs)?;
    let km_seed = derive_u64(cfg.seed, "analyze-kmeans", &[]);
    man.record_seed("analyze-kmeans", km_seed);
    let km = kmeans(&pool.view(), cfg.analyze.n_clusters, km_seed, cfg.analyze.kmeans_max_iter)?;
    let mut dtrajs = Vec::with_capacity(projs.len());
    let mut off = 0usize;
    for p in &projs {
        let m = p.nrows();
        dtrajs.push(km.assignments[off..off + m].to_vec());
        off += m;
    }
    let msm = msm_estimate(&dtrajs, cfg.analyze.n_clusters, cfg.analyze.msm_lag)?;
    Ok(RefCoords { tica, km, msm, pool, n_components })
}

/// Splits PCCA active-state labels into original-label macro sets.
fn macro_sets(msm: &MsmModel, labels: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut a = Vec::new();
    let mut b = Vec::new();
    for (pos, lab) in labels.iter().enumerate() {
        if *lab == 0 {
            a.push(msm.active[pos]);
        } else {
            b.push(msm.active[pos]);
        }
    }
    (a, b)
}

/// MFPT between original-label sets plus a posterior spread from the counts.
/// Source or target sets the chain never visited yield an infinite MFPT
/// rather than an error: the model simply never made the trip.
fn mfpt_and_posterior(
    msm: &MsmModel,
    src: &[usize],
    tgt: &[usize],
    frame_interval: f64,
    n_samples: usize,
    rng: &mut ChaCha20Rng,
) -> Result<(f64, f64)> {
    let src_act: Vec<usize> =
        src.iter().cloned().filter(|s| msm.active.binary_search(s).is_ok()).collect();
    let tgt_act: Vec<usize> =
        tgt.iter().cloned().filter(|s| msm.active.binary_search(s).is_ok()).collect();
    if src_act.is_empty() || tgt_act.is_empty() {
        return Ok((f64::INFINITY, f64::NAN));
    }
    let m = msm.mfpt(&src_act, &tgt_act, frame_interval)?;
    if !m.is_finite() {
        return Ok((m, f64::NAN));
    }
    let ka = msm.active.len();
    let mut counts_a = Array2::<f64>::zeros((ka, ka));
    for (i, &oi) in msm.active.iter().enumerate() {
        for (j, &oj) in msm.active.iter().enumerate() {
            counts_a[[i, j]] = msm.counts[[oi, oj]];
        }
    }
    let to_active = |set: &[usize]| -> Vec<usize> {
        set.iter().map(|s| msm.active.binary_search(s).expect("filtered above")).collect()
    };
    let lag_time = msm.lag as f64 * frame_interval;
    let post = bayesian_msm(
        &counts_a.view(),
        &to_active(&src_act),
        &to_active(&tgt_act),
        lag_time,
        n_samples,
        rng,
    )?;
    Ok((m, post.mfpt_std))
}

fn fes_to_rows(g: &FesGrid) -> (Vec<String>, Vec<Vec<f64>>) {
    let ndim = g.shape.len();
    let mut cols: Vec<String> = (0..ndim).map(|i| format!("bin_{i}")).collect();
    cols.push("p".into());
    cols.push("g".into());
    cols.push("occupied".into());
    let mut rows = Vec::with_capacity(g.p.len());
    for flat in 0..g.p.len() {
        let mut row = vec![0.0; ndim];
        let mut rem = flat;
        for ax in (0..ndim).rev() {
            row[ax] = (rem % g.shape[ax]) as f64;
            rem /= g.shape[ax];
        }
        row.push(g.p[flat]);
        row.push(g.g[flat]);
        row.push(if g.occupied[flat] { 1.0 } else { 0.0 });
        rows.push(row);
    }
    (cols, rows)
}

fn fes_meta(g: &FesGrid) -> serde_json::Value {
    json!({
        "edges": g.edges,
        "shape": g.shape,
        "temperature": g.temperature,
        "k_b": g.k_b,
        "n_samples": g.n_samples,
        "n_dropped": g.n_dropped,
    })
}

fn write_table(
    man: &mut RunManifest,
    out: &Path,
    path: &Path,
    meta: &serde_json::Value,
    cols: &[String],
    rows: &[Vec<f64>],
) -> Result<()> {
    let col_refs: Vec<&str> = cols.iter().map(|s| s.as_str()).collect();
    write_csv(path, meta, &col_refs, rows)?;
    man.record_artifact(out, path);
    Ok(())
}

/// Temperature shared by every reference trajectory, or NaN when the
/// reference data mixes temperatures and no single value applies.
fn reference_temperature(trajs: &[Trajectory]) -> f64 {
    let t0 = trajs[0].temperature;
    if trajs.iter().all(|t| (t.temperature - t0).abs() < 1e-12) {
        t0
    } else {
        f64::NAN
    }
}

pub fn cmd_analyze(cfg: &RunConfig, out: &Path, _workers: usize) -> Result<RunManifest> {
    let mut man = RunManifest::new("analyze", cfg);
    let adir = out.join("analysis");
    mkdir(&adir)?;

    let t0 = Instant::now();
    let trajs = load_reference(cfg, out)?;
    let coords = reference_coordinates(cfg, &trajs, &mut man)?;
    man.record_timing("reference_coordinates", t0.elapsed().as_secs_f64());

    let t1 = Instant::now();
    let members = load_rollouts(out)?;
    let model_projs: Vec<Array2<f64>> = members
        .iter()
        .map(|t| featurize(&t.frames.view()).and_then(|f| tica_transform(&coords.tica, &f.view())))
        .collect::<Result<_>>()?;
    let w = cfg.sample.tail_window;
    let tails: Vec<Array2<f64>> = model_projs
        .iter()
        .map(|p| p.slice(s![p.nrows().saturating_sub(w).., ..]).to_owned())
        .collect();
    let model_tail_pool = vstack(&tails)?;
    man.record_timing("model_projection", t1.elapsed().as_secs_f64());

    let t2 = Instant::now();
    let t_s = cfg.sample.temperature;
    let k_b = cfg.system.k_b;
    let bins = &cfg.analyze.fes_bins;
    let bounds = shared_bounds(&coords.pool, bins.len())?;
    let ref_grid = free_energy_surface(&coords.pool.view(), bins, t_s, k_b, Some(&bounds))?;
    let model_grid =
        free_energy_surface(&model_tail_pool.view(), bins, t_s, k_b, Some(&bounds))?;
    let metrics = fes_metrics(&ref_grid, &model_grid)?;
    man.record_timing("fes", t2.elapsed().as_secs_f64());

    let t3 = Instant::now();
    let dtrajs_model: Vec<Vec<usize>> =
        model_projs.iter().map(|p| discretize(p, &coords.km.centers)).collect();
    let msm_model = msm_estimate(&dtrajs_model, cfg.analyze.n_clusters, cfg.analyze.msm_lag)?;

    let mut pcca_status = "ok".to_string();
    let mut sets: Option<(Vec<usize>, Vec<usize>)> = None;
    match pcca_two_state(
        &coords.msm.transition.view(),
        &coords.msm.stationary.view(),
        cfg.analyze.pcca_min_gap,
    ) {
        Ok(labels) => sets = Some(macro_sets(&coords.msm, &labels)),
        Err(e) => {
            pcca_status = format!("skipped: {e}");
            man.notes.insert("pcca".into(), pcca_status.clone());
        }
    }

    let fi_ref = trajs[0].frame_interval;
    let fi_model = cfg.sample.delta_t;
    let ref_temp = reference_temperature(&trajs);
    let mut rate_rows: Vec<Vec<f64>> = Vec::new();
    if let Some((a, b)) = &sets {
        for (d_idx, (src, tgt)) in [(a, b), (b, a)].into_iter().enumerate() {
            for (is_model, msm, fi, temp) in
                [(0.0, &coords.msm, fi_ref, ref_temp), (1.0, &msm_model, fi_model, t_s)]
            {
                let mut rng =
                    derive_rng(cfg.seed, "analyze-bayes", &[d_idx as u64, is_model as u64]);
                let (m, sd) = mfpt_and_posterior(
                    msm,
                    src,
                    tgt,
                    fi,
                    cfg.analyze.n_posterior_samples,
                    &mut rng,
                )?;
                rate_rows.push(vec![
                    d_idx as f64,
                    is_model,
                    temp,
                    msm.lag as f64 * fi,
                    m,
                    1.0 / m,
                    sd,
                ]);
            }
        }
    }
    man.record_timing("msm", t3.elapsed().as_secs_f64());

    let t4 = Instant::now();
    let n_p = cfg.system.potential.n_particles;
    let dim = cfg.system.potential.dim;
    let mut rmsd_rows: Vec<Vec<f64>> = Vec::new();
    if n_p >= 3 && dim >= 2 {
        let ref0 = trajs[0].frame(0).to_owned();
        let subset: Vec<usize> = (0..n_p).collect();
        'members: for (mi, t) in members.iter().enumerate() {
            let start = t.n_frames().saturating_sub(w);
            for f in start..t.n_frames() {
                match local_rmsd(&t.frame(f), &ref0.view(), &subset) {
                    Ok(r) => rmsd_rows.push(vec![mi as f64, f as f64, r]),
                    Err(e) => {
                        man.notes.insert("rmsd".into(), format!("skipped: {e}"));
                        rmsd_rows.clear();
                        break 'members;
                    }
                }
            }
        }
    }
    man.record_timing("rmsd", t4.elapsed().as_secs_f64());

    let tic_cols: Vec<String> = (0..coords.n_components).map(|i| format!("tic_{i}")).collect();
    let tica_meta = json!({
        "lag": cfg.analyze.tica_lag,
        "eigenvalues": coords.tica.eigenvalues,
        "n_components": coords.n_components,
    });
    let ref_rows: Vec<Vec<f64>> = coords.pool.rows().into_iter().map(|r| r.to_vec()).collect();
    write_table(
        &mut man,
        out,
        &adir.join("tica_reference.csv"),
        &tica_meta,
        &tic_cols,
        &ref_rows,
    )?;
    let model_rows: Vec<Vec<f64>> =
        model_tail_pool.rows().into_iter().map(|r| r.to_vec()).collect();
    write_table(
        &mut man,
        out,
        &adir.join("tica_model.csv"),
        &tica_meta,
        &tic_cols,
        &model_rows,
    )?;

    let (fes_cols, ref_fes_rows) = fes_to_rows(&ref_grid);
    write_table(
        &mut man,
        out,
        &adir.join("fes_reference.csv"),
        &fes_meta(&ref_grid),
        &fes_cols,
        &ref_fes_rows,
    )?;
    let (_, model_fes_rows) = fes_to_rows(&model_grid);
    write_table(
        &mut man,
        out,
        &adir.join("fes_model.csv"),
        &fes_meta(&model_grid),
        &fes_cols,
        &model_fes_rows,
    )?;

    let metrics_meta = json!({
        "tica_eigenvalues": coords.tica.eigenvalues[..coords.n_components],
        "pcca": pcca_status,
        "n_active_reference": coords.msm.active.len(),
        "n_active_model": msm_model.active.len(),
        "n_members": members.len(),
    });
    let metrics_cols: Vec<String> = ["mae", "rmse", "coverage", "n_reference_frames", "n_model_frames"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    write_table(
        &mut man,
        out,
        &adir.join("metrics.csv"),
        &metrics_meta,
        &metrics_cols,
        &[vec![
            metrics.mae,
            metrics.rmse,
            metrics.coverage,
            coords.pool.nrows() as f64,
            model_tail_pool.nrows() as f64,
        ]],
    )?;

    let rates_meta = json!({
        "directions": ["macro0_to_macro1", "macro1_to_macro0"],
        "macro0": sets.as_ref().map(|(a, _)| a.clone()),
        "macro1": sets.as_ref().map(|(_, b)| b.clone()),
        "pcca": pcca_status,
    });
    let rate_cols: Vec<String> =
        ["direction", "is_model", "temperature", "lag_time", "mfpt", "rate", "mfpt_std"]
            .iter()
            .map(|s| s.to_string())
            .collect();
    write_table(&mut man, out, &adir.join("rates.csv"), &rates_meta, &rate_cols, &rate_rows)?;

    if !rmsd_rows.is_empty() {
        let rmsd_cols: Vec<String> =
            ["member", "frame", "rmsd"].iter().map(|s| s.to_string()).collect();
        write_table(
            &mut man,
            out,
            &adir.join("rmsd.csv"),
            &json!({"subset": "all", "reference": "first reference frame"}),
            &rmsd_cols,
            &rmsd_rows,
        )?;
    }

    Ok(man)
}

pub fn cmd_sweep(cfg: &RunConfig, out: &Path, workers: usize) -> Result<RunManifest> {
    if cfg.sweep.temperatures.is_empty() {
        return Err(ItoError::ConfigInvalid {
            violations: vec!["sweep.temperatures must be non-empty for the sweep stage".into()],
        });
    }
    let mut man = RunManifest::new("sweep", cfg);
    let sdir = out.join("sweep");
    mkdir(&sdir)?;

    let t0 = Instant::now();
    let params = load_params(cfg, out)?;
    let trajs = load_reference(cfg, out)?;
    let coords = reference_coordinates(cfg, &trajs, &mut man)?;
    let labels = pcca_two_state(
        &coords.msm.transition.view(),
        &coords.msm.stationary.view(),
        cfg.analyze.pcca_min_gap,
    )?;
    let (set_a, set_b) = macro_sets(&coords.msm, &labels);
    man.record_timing("reference_coordinates", t0.elapsed().as_secs_f64());

    let t1 = Instant::now();
    let pool = initial_pool(cfg, &trajs);
    let meta = system_meta(cfg);
    let cond = CondSource::from_meta(&meta);
    let seed = derive_u64(cfg.seed, "sweep", &[]);
    man.record_seed("sweep", seed);
    let scfg = sampler_config(cfg, seed);
    let sweeps = temperature_sweep(
        &params,
        &pool,
        &cond,
        &cfg.sweep.temperatures,
        cfg.system.temp_range(),
        cfg.sample.n_steps,
        &scfg,
        workers,
    )?;
    man.record_timing("rollouts", t1.elapsed().as_secs_f64());

    let t2 = Instant::now();
    let fi_model = cfg.sample.delta_t;
    // Per temperature: [T, mfpt_ab, rate_ab, std_ab, mfpt_ba, rate_ba, std_ba, n_failed].
    let mut rate_rows: Vec<Vec<f64>> = Vec::new();
    for (tix, te) in sweeps.iter().enumerate() {
        if let Some(warn) = &te.warning {
            man.notes.insert(format!("sweep_T{tix}"), warn.clone());
        }
        let epath = sdir.join(format!("ensemble_T{tix}.csv"));
        write_ensemble_manifest(&epath, &te.ensemble)?;
        man.record_artifact(out, &epath);

        let mut dtrajs: Vec<Vec<usize>> = Vec::new();
        for (_i, rr) in te.ensemble.succeeded() {
            let traj = rr.to_trajectory(&cfg.system.id);
            let feats = featurize(&traj.frames.view())?;
            let proj = tica_transform(&coords.tica, &feats.view())?;
            dtrajs.push(discretize(&proj, &coords.km.centers));
        }
        let mut row = vec![
            te.temperature,
            f64::NAN,
            f64::NAN,
            f64::NAN,
            f64::NAN,
            f64::NAN,
            f64::NAN,
            te.ensemble.n_failed() as f64,
        ];
        if dtrajs.is_empty() {
            man.notes.insert(format!("sweep_T{tix}_msm"), "all members failed".into());
            rate_rows.push(row);
            continue;
        }
        match msm_estimate(&dtrajs, cfg.analyze.n_clusters, cfg.analyze.msm_lag) {
            Ok(msm) => {
                for (d_idx, (src, tgt)) in [(&set_a, &set_b), (&set_b, &set_a)].into_iter().enumerate()
                {
                    let mut rng =
                        derive_rng(cfg.seed, "sweep-bayes", &[tix as u64, d_idx as u64]);
                    let (m, sd) = mfpt_and_posterior(
                        &msm,
                        src,
                        tgt,
                        fi_model,
                        cfg.analyze.n_posterior_samples,
                        &mut rng,
                    )?;
                    row[1 + 3 * d_idx] = m;
                    row[2 + 3 * d_idx] = 1.0 / m;
                    row[3 + 3 * d_idx] = sd;
                }
            }
            Err(e) => {
                man.notes.insert(format!("sweep_T{tix}_msm"), format!("skipped: {e}"));
            }
        }
        rate_rows.push(row);
    }
    man.record_timing("rates", t2.elapsed().as_secs_f64());

    let rate_cols: Vec<String> = [
        "temperature",
        "mfpt_ab",
        "rate_ab",
        "mfpt_std_ab",
        "mfpt_ba",
        "rate_ba",
        "mfpt_std_ba",
        "n_failed",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let rates_meta = json!({
        "macro0": set_a,
        "macro1": set_b,
        "lag": cfg.analyze.msm_lag,
        "delta_t": fi_model,
    });
    write_table(&mut man, out, &sdir.join("rates.csv"), &rates_meta, &rate_cols, &rate_rows)?;

    // Arrhenius fits per direction over the temperatures with finite rates.
    let k_b = cfg.system.k_b;
    let mut fit_summaries = Vec::new();
    let mut fit_cols: Vec<Vec<f64>> = vec![Vec::new(); 4];
    for d_idx in 0..2 {
        let rate_col = 2 + 3 * d_idx;
        let pts: Vec<(f64, f64)> = rate_rows
            .iter()
            .filter(|r| r[rate_col].is_finite() && r[rate_col] > 0.0)
            .map(|r| (r[0], r[rate_col]))
            .collect();
        if pts.len() < 2 {
            man.notes.insert(
                format!("arrhenius_{d_idx}"),
                format!("skipped: only {} usable rates", pts.len()),
            );
            fit_summaries.push(json!(null));
            for r in &rate_rows {
                let _ = r;
                fit_cols[2 * d_idx].push(f64::NAN);
                fit_cols[2 * d_idx + 1].push(f64::NAN);
            }
            continue;
        }
        let (ts, ks): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
        let fit = arrhenius_fit(&ts, &ks, k_b)?;
        fit_summaries.push(json!({"e_a": fit.e_a, "ln_a": fit.ln_a}));
        for r in &rate_rows {
            let t = r[0];
            let predicted = fit.rate(t, k_b);
            fit_cols[2 * d_idx].push(predicted);
            let k = r[rate_col];
            let residual = if k.is_finite() && k > 0.0 {
                k.ln() - predicted.ln()
            } else {
                f64::NAN
            };
            fit_cols[2 * d_idx + 1].push(residual);
        }
    }
    let arr_cols: Vec<String> = [
        "temperature",
        "rate_ab",
        "fit_ab",
        "residual_ab",
        "rate_ba",
        "fit_ba",
        "residual_ba",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let arr_rows: Vec<Vec<f64>> = rate_rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            vec![
                r[0],
                r[2],
                fit_cols[0][i],
                fit_cols[1][i],
                r[5],
                fit_cols[2][i],
                fit_cols[3][i],
            ]
        })
        .collect();
    let arr_meta = json!({
        "ab": fit_summaries[0],
        "ba": fit_summaries[1],
        "k_b": k_b,
        "directions": ["macro0_to_macro1", "macro1_to_macro0"],
    });
    write_table(&mut man, out, &sdir.join("arrhenius.csv"), &arr_meta, &arr_cols, &arr_rows)?;

    Ok(man)
}
