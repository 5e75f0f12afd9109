//! Synthetic scenes with ground truth, MOTChallenge files and the CLEAR-MOT
//! and IDF1 metrics.

pub mod ablation;
pub mod metrics;
pub mod mot;
pub mod scene;

pub use ablation::{ablation_table, run_ablation, AblationRow, AblationSummary};
pub use metrics::{evaluate, frame_range, restrict_frames, MetricsReport};
pub use mot::{read_mot, MotRole, MotRow};
pub use scene::{generate_scene, Scene, SceneConfig};
