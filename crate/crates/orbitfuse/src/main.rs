use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use orbitfuse::codec::InitMode;
use orbitfuse::error::{Error, Result};
use orbitfuse::estimator::{EstimatorModel, GainStrategy, LossWeights, TrainConfig};
use orbitfuse::harness::experiment::{self, benchmark};
use orbitfuse::harness::{self, dataset, DatasetConfig};

/// Orbital-dynamics state estimation from noisy screen observations.
#[derive(Parser)]
#[command(name = "orbitfuse", version, about)]
struct Cli {
    /// Disable data-parallel execution even when compiled in.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset of simulated episodes with observations.
    Generate {
        /// Scene variant: 2d or 3d.
        #[arg(long)]
        mode: String,
        #[arg(long)]
        episodes: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Gaussian pixel-noise standard deviation on screen coordinates.
        #[arg(long, default_value_t = 2.0)]
        noise_sigma: f64,
    },
    /// Train an estimator on a dataset and write a checkpoint.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        /// screen | screen-depth | gt-z
        #[arg(long, default_value = "screen")]
        init_mode: String,
        /// learned | constant:<k>
        #[arg(long, default_value = "learned")]
        gain: String,
        #[arg(long, default_value_t = 5000)]
        steps: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        checkpoint_out: PathBuf,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = benchmark::BURN_IN)]
        burn_in: usize,
        #[arg(long, default_value_t = 6)]
        unroll: usize,
        #[arg(long, default_value_t = 1e-3)]
        learning_rate: f64,
        /// Drop the observation-alignment loss term.
        #[arg(long)]
        no_obs_loss: bool,
        /// Add direct state supervision over the burn-in frames.
        #[arg(long)]
        supervised: bool,
    },
    /// Evaluate a checkpoint on a held-out dataset and write a report.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = benchmark::BURN_IN)]
        burn_in: usize,
        #[arg(long, default_value_t = benchmark::ROLLOUT)]
        rollout: usize,
        #[arg(long)]
        report_out: PathBuf,
        /// Evaluate with a different gain than the checkpoint was trained
        /// with (e.g. constant:0 for a prediction-only probe).
        #[arg(long)]
        gain_override: Option<String>,
    },
    /// Run a full ablation grid, persisting one report per cell.
    Ablate {
        /// 2d-gain | 3d-depth
        #[arg(long)]
        suite: String,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = benchmark::TRAIN_SEEDS)]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 5000)]
        steps: usize,
        #[arg(long, default_value_t = benchmark::TRAIN_EPISODES)]
        train_episodes: usize,
        #[arg(long, default_value_t = benchmark::VAL_EPISODES)]
        val_episodes: usize,
    },
    /// Render ground-truth and predicted trajectories of one episode to SVG.
    Plot {
        /// Path to an episode .bin file.
        #[arg(long)]
        episode: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = benchmark::BURN_IN)]
        burn_in: usize,
        #[arg(long, default_value_t = benchmark::ROLLOUT)]
        rollout: usize,
        /// Dataset directory holding the camera settings; defaults to the
        /// standard camera when omitted.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
}

fn parse_init_mode(s: &str) -> Result<InitMode> {
    match s {
        "screen" => Ok(InitMode::ScreenOnly),
        "screen-depth" => Ok(InitMode::ScreenPlusDepth),
        "gt-z" => Ok(InitMode::GroundtruthZ),
        other => Err(Error::InvalidConfig(format!(
            "init mode {other:?} (expected screen, screen-depth, or gt-z)"
        ))),
    }
}

fn run(cli: Cli) -> Result<()> {
    let parallel = !cli.sequential;
    match cli.command {
        Command::Generate { mode, episodes, seed, out, noise_sigma } => {
            let mut config = match mode.as_str() {
                "2d" => DatasetConfig::benchmark_2d(),
                "3d" => DatasetConfig::benchmark_3d(),
                other => {
                    return Err(Error::InvalidConfig(format!("mode {other:?} (expected 2d or 3d)")))
                }
            };
            if !noise_sigma.is_finite() || noise_sigma < 0.0 {
                return Err(Error::InvalidConfig(format!("noise sigma {noise_sigma}")));
            }
            config.noise_sigma = noise_sigma;
            let manifest = dataset::generate_dataset(&config, episodes, seed, &out, parallel)?;
            println!(
                "wrote {} episodes to {} (resampled {})",
                manifest.episodes.len(),
                out.display(),
                manifest.resampled
            );
            Ok(())
        }
        Command::Train {
            dataset: dataset_dir,
            init_mode,
            gain,
            steps,
            seed,
            checkpoint_out,
            batch,
            burn_in,
            unroll,
            learning_rate,
            no_obs_loss,
            supervised,
        } => {
            let init_mode = parse_init_mode(&init_mode)?;
            let strategy: GainStrategy = gain.parse()?;
            let (manifest, episodes) = dataset::load_dataset(&dataset_dir)?;
            experiment::check_mode_compat(init_mode, manifest.config.scene.mode)?;
            let train_cfg = TrainConfig {
                steps,
                batch_size: batch,
                burn_in,
                unroll,
                seed,
                learning_rate,
                weights: LossWeights { obs: if no_obs_loss { 0.0 } else { 1.0 }, ..Default::default() },
                supervised,
                parallel,
            };
            let (model, stats) =
                experiment::train_model(&episodes, &manifest.config, init_mode, &strategy, &train_cfg)?;
            model.save(&checkpoint_out)?;
            let mut curve = serde_json::to_string(&stats)?;
            curve.push('\n');
            std::fs::write(checkpoint_out.with_extension("losses.json"), curve)?;
            println!(
                "trained {} steps; final loss {:.6}; checkpoint {}",
                steps,
                stats.loss_curve.last().copied().unwrap_or(f64::NAN),
                checkpoint_out.display()
            );
            Ok(())
        }
        Command::Eval { dataset: dataset_dir, checkpoint, burn_in, rollout, report_out, gain_override } => {
            let override_strategy: Option<GainStrategy> =
                gain_override.as_deref().map(str::parse).transpose()?;
            let manifest = dataset::load_manifest(&dataset_dir)?;
            // Init mode and gain strategy come from the checkpoint itself.
            let (model, _) = EstimatorModel::load(&checkpoint, manifest.config.scene, manifest.config.camera)?;
            let cfg = experiment::ExperimentConfig {
                train_dataset: PathBuf::new(),
                eval_dataset: dataset_dir,
                init_mode: model.init_mode,
                gain: GainStrategy::Learned,
                eval_gain_override: override_strategy,
                burn_in,
                rollout,
                train: TrainConfig { parallel, ..TrainConfig::default() },
                checkpoint_in: Some(checkpoint),
                checkpoint_out: None,
                report_out: Some(report_out.clone()),
            };
            let report = experiment::run_experiment(&cfg, parallel)?;
            println!(
                "rollout MAE {:.4} (burn-in {:.4}) over {} episodes -> {}",
                report.position_mae,
                report.burn_in_mae,
                report.episodes,
                report_out.display()
            );
            Ok(())
        }
        Command::Ablate { suite, out_dir, seeds, steps, train_episodes, val_episodes } => {
            let suite: experiment::AblationSuite = suite.parse()?;
            let outcomes = experiment::run_ablation_suite(
                suite,
                &out_dir,
                &seeds,
                steps,
                train_episodes,
                val_episodes,
                parallel,
            )?;
            let table = experiment::format_ablation_table(&outcomes);
            print!("{table}");
            std::fs::write(out_dir.join("summary.txt"), &table)?;
            if outcomes.iter().any(|(_, r)| r.is_err()) {
                return Err(Error::InvalidConfig("one or more ablation cells failed".into()));
            }
            Ok(())
        }
        Command::Plot { episode, checkpoint, out, burn_in, rollout, dataset: dataset_dir } => {
            let ep = dataset::read_episode(&episode)?;
            let camera = match &dataset_dir {
                Some(dir) => dataset::load_manifest(dir)?.config.camera,
                None => orbitfuse::camera::CameraConfig::default(),
            };
            let predicted = match &checkpoint {
                Some(ckpt) => {
                    let (model, strategy) = EstimatorModel::load(ckpt, ep.scene, camera)?;
                    let view = ep.view();
                    let eval = orbitfuse::estimator::run_episode(&model, &strategy, &view, burn_in, rollout)?;
                    let mut all = eval.burn_in_states;
                    all.extend(eval.rollout_states);
                    all
                }
                None => Vec::new(),
            };
            harness::plot_trajectories(&ep, &predicted, burn_in.saturating_sub(1), &out)?;
            println!("wrote {}", out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
