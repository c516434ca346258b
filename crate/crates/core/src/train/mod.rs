//! Loss, analytic gradients, optimizer, densification and the training
//! loop.

pub mod adam;
pub mod backward;
pub mod densify;
pub mod gradcheck;
pub mod loss;
pub mod trainer;

pub use backward::{backward_wsr, BackwardOutput, Gradients, ScreenStats};
pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use loss::{loss, loss_with, LossWeights};
pub use adam::{adam_step, AdamState, LearningRates};
pub use densify::{densify, DensifyConfig, DensifyStats};
pub use trainer::{train, train_from, Dataset, InitConfig, MetricRecord, TrainConfig, TrainLog, View};
