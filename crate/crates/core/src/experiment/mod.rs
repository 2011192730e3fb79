//! Configuration, training, checkpoints, gradient checks and ablations.

mod ablation;
mod checkpoint;
mod config;
mod gradcheck;
mod train;

pub use ablation::{run_ablation, variants, AblationResult, AblationRow, Axis, OrderingCheck, SeedScore, Variant};
pub use checkpoint::Checkpoint;
pub use config::{ExperimentConfig, TrainConfig};
pub use gradcheck::{combinations, gradcheck_model, run_gradcheck, ComboReport, GRADCHECK_STEP, GRADCHECK_TOLERANCE};
pub use train::{evaluate, metrics_json, predict, prepare, prepare_scene, scene_loss, train, vocabulary, PreparedScene, TrainOutcome};
