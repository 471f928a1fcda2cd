//! Experiment orchestration: dataset provisioning, training runs, held-out
//! evaluation with burn-in/rollout splits, and the ablation grids.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::codec::InitMode;
use crate::dynamics::SimMode;
use crate::error::{Error, Result};
use crate::estimator::{
    self, EpisodeView, EstimatorModel, GainStrategy, TrainConfig, TrainStats,
};
use crate::harness::dataset::{generate_dataset, load_dataset, load_manifest, DatasetConfig, Episode, Manifest};
use crate::harness::metrics::{fingerprint, MetricsReport};

/// Canonical desk-scale benchmark parameters.
pub mod benchmark {
    pub const TRAIN_EPISODES: usize = 500;
    pub const VAL_EPISODES: usize = 100;
    pub const SEED_2D_TRAIN: u64 = 101;
    pub const SEED_2D_VAL: u64 = 202;
    pub const SEED_3D_TRAIN: u64 = 303;
    pub const SEED_3D_VAL: u64 = 404;
    /// Training seeds averaged by the reported numbers.
    pub const TRAIN_SEEDS: [u64; 3] = [1, 2, 3];
    pub const BURN_IN: usize = 6;
    pub const ROLLOUT: usize = 24;
}

/// Generate a dataset unless a matching one is already on disk.
pub fn ensure_dataset(
    dir: &Path,
    config: &DatasetConfig,
    num_episodes: usize,
    master_seed: u64,
    parallel: bool,
) -> Result<Manifest> {
    if dir.join("manifest.json").exists() {
        let manifest = load_manifest(dir)?;
        if manifest.config != *config
            || manifest.master_seed != master_seed
            || manifest.num_episodes != num_episodes
        {
            return Err(Error::InvalidConfig(format!(
                "dataset at {} exists with different settings",
                dir.display()
            )));
        }
        return Ok(manifest);
    }
    generate_dataset(config, num_episodes, master_seed, dir, parallel)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub train_dataset: PathBuf,
    pub eval_dataset: PathBuf,
    pub init_mode: InitMode,
    pub gain: GainStrategy,
    /// Evaluate with a different strategy than the one trained (for
    /// prediction-only probes of a trained checkpoint).
    pub eval_gain_override: Option<GainStrategy>,
    pub burn_in: usize,
    pub rollout: usize,
    pub train: TrainConfig,
    /// Load this checkpoint instead of training.
    pub checkpoint_in: Option<PathBuf>,
    pub checkpoint_out: Option<PathBuf>,
    pub report_out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.gain.validate()?;
        if let Some(g) = &self.eval_gain_override {
            g.validate()?;
        }
        if self.burn_in == 0 {
            return Err(Error::InvalidConfig("burn-in must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct FingerprintInput<'a> {
    dataset_config: &'a DatasetConfig,
    train_master_seed: u64,
    eval_master_seed: u64,
    init_mode: InitMode,
    gain: String,
    eval_gain: String,
    burn_in: usize,
    rollout: usize,
    steps: usize,
    batch_size: usize,
    learning_rate: f64,
    weight_rec: f64,
    weight_ae: f64,
    weight_obs: f64,
    supervised: bool,
    seed: u64,
}

/// Train a fresh model on the given episodes.
pub fn train_model(
    episodes: &[Episode],
    config: &DatasetConfig,
    init_mode: InitMode,
    strategy: &GainStrategy,
    train_cfg: &TrainConfig,
) -> Result<(EstimatorModel, TrainStats)> {
    if episodes.is_empty() {
        return Err(Error::InvalidConfig("empty training dataset".into()));
    }
    let mut model =
        EstimatorModel::new(config.scene, config.camera, init_mode, strategy, train_cfg.seed)?;
    let views: Vec<EpisodeView> = episodes.iter().map(|e| e.view()).collect();
    let stats = estimator::train(&mut model, strategy, &views, train_cfg)?;
    Ok((model, stats))
}

struct EpisodeErrors {
    /// Absolute rollout error summed per frame offset.
    rollout_abs: Vec<f64>,
    /// Absolute rollout error summed per axis.
    axis_abs: [f64; 3],
    burn_in_abs: f64,
    gain_pos_sum: f64,
    gain_vel_sum: f64,
    gain_count: usize,
}

fn eval_episode(
    model: &EstimatorModel,
    strategy: &GainStrategy,
    episode: &Episode,
    burn_in: usize,
    rollout: usize,
) -> Result<EpisodeErrors> {
    let view = episode.view();
    let eval = estimator::run_episode(model, strategy, &view, burn_in, rollout)?;
    let n = model.scene.num_objects;
    let mut errors = EpisodeErrors {
        rollout_abs: vec![0.0; rollout],
        axis_abs: [0.0; 3],
        burn_in_abs: 0.0,
        gain_pos_sum: 0.0,
        gain_vel_sum: 0.0,
        gain_count: 0,
    };
    for (k, state) in eval.rollout_states.iter().enumerate() {
        let truth = &episode.truth.frames[burn_in + k];
        for (a, b) in state.bodies.iter().zip(truth) {
            let dx = (a.position.x - b.position.x).abs();
            let dy = (a.position.y - b.position.y).abs();
            let dz = (a.position.z - b.position.z).abs();
            errors.rollout_abs[k] += dx + dy + dz;
            errors.axis_abs[0] += dx;
            errors.axis_abs[1] += dy;
            errors.axis_abs[2] += dz;
        }
    }
    for (k, state) in eval.burn_in_states.iter().enumerate() {
        let truth = &episode.truth.frames[k];
        for (a, b) in state.bodies.iter().zip(truth) {
            errors.burn_in_abs += (a.position.x - b.position.x).abs()
                + (a.position.y - b.position.y).abs()
                + (a.position.z - b.position.z).abs();
        }
    }
    for gain in &eval.gains {
        errors.gain_pos_sum += gain[..3 * n].iter().sum::<f64>();
        errors.gain_vel_sum += gain[3 * n..].iter().sum::<f64>();
        errors.gain_count += 3 * n;
    }
    Ok(errors)
}

/// Evaluate a frozen model on held-out episodes: burn-in over the first
/// frames with observations, rollout without, MAE against ground truth.
pub fn evaluate_model(
    model: &EstimatorModel,
    strategy: &GainStrategy,
    episodes: &[Episode],
    burn_in: usize,
    rollout: usize,
    parallel: bool,
) -> Result<MetricsReport> {
    if episodes.is_empty() {
        return Err(Error::InvalidConfig("empty evaluation dataset".into()));
    }
    for ep in episodes {
        if ep.truth.frames.len() < burn_in + rollout {
            return Err(Error::LengthMismatch(format!(
                "episode {} has {} frames, evaluation needs {}",
                ep.index,
                ep.truth.frames.len(),
                burn_in + rollout
            )));
        }
    }
    let results: Vec<Result<EpisodeErrors>> = {
        #[cfg(feature = "parallel")]
        {
            if parallel {
                use rayon::prelude::*;
                episodes
                    .par_iter()
                    .map(|e| eval_episode(model, strategy, e, burn_in, rollout))
                    .collect()
            } else {
                episodes.iter().map(|e| eval_episode(model, strategy, e, burn_in, rollout)).collect()
            }
        }
        #[cfg(not(feature = "parallel"))]
        {
            let _ = parallel;
            episodes.iter().map(|e| eval_episode(model, strategy, e, burn_in, rollout)).collect()
        }
    };

    let n = model.scene.num_objects;
    let coords_per_frame = (episodes.len() * n * 3) as f64;
    let mut per_frame_mae = vec![0.0; rollout];
    let mut axis_abs = [0.0; 3];
    let mut burn_in_abs = 0.0;
    let mut gain_pos = 0.0;
    let mut gain_vel = 0.0;
    let mut gain_count = 0usize;
    for r in results {
        let e = r?;
        for (acc, v) in per_frame_mae.iter_mut().zip(&e.rollout_abs) {
            *acc += v;
        }
        for (acc, v) in axis_abs.iter_mut().zip(&e.axis_abs) {
            *acc += v;
        }
        burn_in_abs += e.burn_in_abs;
        gain_pos += e.gain_pos_sum;
        gain_vel += e.gain_vel_sum;
        gain_count += e.gain_count;
    }
    for v in per_frame_mae.iter_mut() {
        *v /= coords_per_frame;
    }
    // The headline number is by definition the mean of the per-frame series.
    let position_mae_value = per_frame_mae.iter().sum::<f64>() / rollout as f64;
    let per_axis_mae =
        axis_abs.map(|v| v / (episodes.len() * n * rollout) as f64);
    let burn_in_mae = burn_in_abs / (coords_per_frame * burn_in as f64);
    let (mean_gain_position, mean_gain_velocity) = if gain_count > 0 {
        (gain_pos / gain_count as f64, gain_vel / gain_count as f64)
    } else {
        (0.0, 0.0)
    };
    Ok(MetricsReport {
        config_fingerprint: String::new(),
        gain_strategy: strategy.label(),
        init_mode: model.init_mode,
        train_seed: 0,
        burn_in,
        rollout,
        episodes: episodes.len(),
        position_mae: position_mae_value,
        burn_in_mae,
        per_frame_mae,
        per_axis_mae,
        mean_gain_position,
        mean_gain_velocity,
        runtime_seconds: 0.0,
    })
}

/// Train (or load) and evaluate one configuration.
pub fn run_experiment(cfg: &ExperimentConfig, parallel: bool) -> Result<MetricsReport> {
    cfg.validate()?;
    let started = Instant::now();
    let (eval_manifest, eval_episodes) = load_dataset(&cfg.eval_dataset)?;

    let (model, trained_strategy) = if let Some(ckpt) = &cfg.checkpoint_in {
        let (model, strategy) =
            EstimatorModel::load(ckpt, eval_manifest.config.scene, eval_manifest.config.camera)?;
        (model, strategy)
    } else {
        let (train_manifest, train_episodes) = load_dataset(&cfg.train_dataset)?;
        if train_manifest.config != eval_manifest.config {
            return Err(Error::InvalidConfig(
                "training and evaluation datasets were generated with different settings".into(),
            ));
        }
        // Holdout discipline: the two datasets must not share any episode.
        let eval_ids: std::collections::BTreeSet<u64> =
            eval_episodes.iter().map(|e| e.id()).collect();
        if train_episodes.iter().any(|e| eval_ids.contains(&e.id())) {
            return Err(Error::InvalidConfig(
                "training and evaluation datasets share episodes".into(),
            ));
        }
        let (model, stats) = train_model(
            &train_episodes,
            &train_manifest.config,
            cfg.init_mode,
            &cfg.gain,
            &TrainConfig { parallel, ..cfg.train.clone() },
        )?;
        if let Some(out) = &cfg.checkpoint_out {
            model.save(out)?;
            let curve_path = out.with_extension("losses.json");
            let mut json = serde_json::to_string(&stats)?;
            json.push('\n');
            std::fs::write(curve_path, json)?;
        }
        (model, cfg.gain)
    };

    let eval_strategy = cfg.eval_gain_override.unwrap_or(trained_strategy);
    let mut report = evaluate_model(
        &model,
        &eval_strategy,
        &eval_episodes,
        cfg.burn_in,
        cfg.rollout,
        parallel,
    )?;
    let fp_input = FingerprintInput {
        dataset_config: &eval_manifest.config,
        train_master_seed: if cfg.checkpoint_in.is_some() { 0 } else { load_manifest(&cfg.train_dataset)?.master_seed },
        eval_master_seed: eval_manifest.master_seed,
        init_mode: cfg.init_mode,
        gain: cfg.gain.label(),
        eval_gain: eval_strategy.label(),
        burn_in: cfg.burn_in,
        rollout: cfg.rollout,
        steps: cfg.train.steps,
        batch_size: cfg.train.batch_size,
        learning_rate: cfg.train.learning_rate,
        weight_rec: cfg.train.weights.rec,
        weight_ae: cfg.train.weights.ae,
        weight_obs: cfg.train.weights.obs,
        supervised: cfg.train.supervised,
        seed: cfg.train.seed,
    };
    report.config_fingerprint = fingerprint(&serde_json::to_string(&fp_input)?);
    report.train_seed = cfg.train.seed;
    report.init_mode = cfg.init_mode;
    report.runtime_seconds = started.elapsed().as_secs_f64();
    if let Some(out) = &cfg.report_out {
        report.save(out)?;
    }
    Ok(report)
}

/// The two grids from the ablation studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationSuite {
    /// 2D: {with, without} observation loss x {constant 1.0, constant 0.5,
    /// learned} gain.
    Gain2d,
    /// 3D: screen-only vs depth-sample vs ground-truth-z lifting.
    Depth3d,
}

impl std::str::FromStr for AblationSuite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "2d-gain" => Ok(AblationSuite::Gain2d),
            "3d-depth" => Ok(AblationSuite::Depth3d),
            other => Err(Error::InvalidConfig(format!(
                "unknown suite {other:?} (expected 2d-gain or 3d-depth)"
            ))),
        }
    }
}

/// One named cell of an ablation grid.
#[derive(Debug, Clone)]
pub struct AblationCell {
    pub label: String,
    pub seed: u64,
    pub config: ExperimentConfig,
}

/// Build the grid for a suite against datasets under `data_root`.
pub fn ablation_cells(
    suite: AblationSuite,
    data_root: &Path,
    out_dir: &Path,
    seeds: &[u64],
    steps: usize,
) -> Vec<AblationCell> {
    let mut cells = Vec::new();
    let (train_ds, eval_ds) = match suite {
        AblationSuite::Gain2d => (data_root.join("train-2d"), data_root.join("val-2d")),
        AblationSuite::Depth3d => (data_root.join("train-3d"), data_root.join("val-3d")),
    };
    let base_train = TrainConfig { steps, ..TrainConfig::default() };
    let mut push = |label: String, seed: u64, init_mode: InitMode, gain: GainStrategy, weight_obs: f64| {
        let cell_label = format!("{label}-seed{seed}");
        cells.push(AblationCell {
            label: cell_label.clone(),
            seed,
            config: ExperimentConfig {
                train_dataset: train_ds.clone(),
                eval_dataset: eval_ds.clone(),
                init_mode,
                gain,
                eval_gain_override: None,
                burn_in: benchmark::BURN_IN,
                rollout: benchmark::ROLLOUT,
                train: TrainConfig {
                    seed,
                    weights: crate::estimator::LossWeights {
                        obs: weight_obs,
                        ..Default::default()
                    },
                    ..base_train.clone()
                },
                checkpoint_in: None,
                checkpoint_out: Some(out_dir.join(format!("{cell_label}.ckpt"))),
                report_out: Some(out_dir.join(format!("{cell_label}.report.json"))),
            },
        });
    };
    match suite {
        AblationSuite::Gain2d => {
            for &seed in seeds {
                for (tag, gain) in [
                    ("k1.0", GainStrategy::ConstantK(1.0)),
                    ("k0.5", GainStrategy::ConstantK(0.5)),
                    ("learned", GainStrategy::Learned),
                ] {
                    push(format!("2d-{tag}-obs"), seed, InitMode::ScreenOnly, gain, 1.0);
                    push(format!("2d-{tag}-noobs"), seed, InitMode::ScreenOnly, gain, 0.0);
                }
            }
        }
        AblationSuite::Depth3d => {
            for &seed in seeds {
                for (tag, mode) in [
                    ("screen", InitMode::ScreenOnly),
                    ("depth", InitMode::ScreenPlusDepth),
                    ("gtz", InitMode::GroundtruthZ),
                ] {
                    push(format!("3d-{tag}"), seed, mode, GainStrategy::Learned, 1.0);
                }
            }
        }
    }
    cells
}

/// Provision datasets, run every cell of the grid, persist per-cell reports
/// as they finish, and return the outcomes. A failing cell is recorded and
/// does not abort the rest of the grid.
pub fn run_ablation_suite(
    suite: AblationSuite,
    out_dir: &Path,
    seeds: &[u64],
    steps: usize,
    num_train: usize,
    num_val: usize,
    parallel: bool,
) -> Result<Vec<(String, Result<MetricsReport>)>> {
    std::fs::create_dir_all(out_dir)?;
    let data_root = out_dir.join("datasets");
    match suite {
        AblationSuite::Gain2d => {
            let cfg = DatasetConfig::benchmark_2d();
            ensure_dataset(&data_root.join("train-2d"), &cfg, num_train, benchmark::SEED_2D_TRAIN, parallel)?;
            ensure_dataset(&data_root.join("val-2d"), &cfg, num_val, benchmark::SEED_2D_VAL, parallel)?;
        }
        AblationSuite::Depth3d => {
            let cfg = DatasetConfig::benchmark_3d();
            ensure_dataset(&data_root.join("train-3d"), &cfg, num_train, benchmark::SEED_3D_TRAIN, parallel)?;
            ensure_dataset(&data_root.join("val-3d"), &cfg, num_val, benchmark::SEED_3D_VAL, parallel)?;
        }
    }
    let cells = ablation_cells(suite, &data_root, out_dir, seeds, steps);
    let mut outcomes = Vec::with_capacity(cells.len());
    for cell in cells {
        log::info!("ablation cell {}", cell.label);
        let outcome = run_experiment(&cell.config, parallel);
        if let Err(e) = &outcome {
            log::error!("cell {} failed: {e}", cell.label);
        }
        outcomes.push((cell.label, outcome));
    }
    Ok(outcomes)
}

/// Plain-text comparison table of per-cell rollout MAE.
pub fn format_ablation_table(outcomes: &[(String, Result<MetricsReport>)]) -> String {
    let mut out = String::from("cell                                   rollout MAE   burn-in MAE\n");
    for (label, outcome) in outcomes {
        match outcome {
            Ok(r) => out.push_str(&format!(
                "{label:<38} {:>11.4}   {:>11.4}\n",
                r.position_mae, r.burn_in_mae
            )),
            Err(e) => out.push_str(&format!("{label:<38} FAILED: {e}\n")),
        }
    }
    out
}

/// Missing-mode guard used by the CLI: 3D init modes on 2D datasets are
/// almost certainly a mistake.
pub fn check_mode_compat(init_mode: InitMode, scene_mode: SimMode) -> Result<()> {
    if init_mode == InitMode::ScreenPlusDepth && scene_mode == SimMode::TwoD {
        return Err(Error::InvalidConfig(
            "depth-conditioned lifting needs a 3D dataset (2D datasets carry no depth maps)".into(),
        ));
    }
    Ok(())
}
