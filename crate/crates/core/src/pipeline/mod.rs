//! Data ingestion, augmentation, the training step and loop, optimizer,
//! checkpoints and metrics.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod train;

pub use augment::{augment_two_views, center_crop, AugmentConfig, ImageRef};
pub use config::TrainConfig;
pub use data::{load_cifar10, read_mimg, synthetic, write_mimg, ImageDataset, Split};
pub use metrics::{MetricsWriter, METRICS_HEADER, RESULTS_HEADER};
pub use model::{LossParts, Moca, RoundPlans, StepMetrics, TeacherPass};
pub use optim::{AdamW, Schedule};
pub use train::{batch_indices, make_views, pretrain, schedule, steps_per_epoch, RunOptions};
