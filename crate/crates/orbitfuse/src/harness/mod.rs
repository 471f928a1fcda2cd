//! Dataset generation, metrics, experiment orchestration, and plotting.

pub mod dataset;
pub mod experiment;
pub mod metrics;
pub mod plot;

pub use dataset::{
    generate_dataset, load_dataset, read_episode, write_episode, DatasetConfig, Episode, Manifest,
    EPISODE_FRAMES,
};
pub use experiment::{
    ensure_dataset, evaluate_model, run_ablation_suite, run_experiment, train_model, AblationSuite,
    ExperimentConfig,
};
pub use metrics::{position_mae, MetricsReport};
pub use plot::plot_trajectories;
