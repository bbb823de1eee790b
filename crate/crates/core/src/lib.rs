//! Motion Code: joint sparse Gaussian-process models over collections of
//! noisy, uneven-length time series.
//!
//! Each class `k` gets a kernel `eta_k` and a motion code `z_k`; a shared map
//! `theta` turns codes into the class's most informative timestamps
//! `sigmoid(theta z_k)`. Training maximizes a collection-level variational
//! bound with L-BFGS. The trained model classifies series by the nearest
//! predicted mean signal and forecasts with the same predictive distribution.

pub mod bench;
pub mod cli;
pub mod data_io;
pub mod error;
pub mod evaluate;
pub mod inference;
pub mod kernel;
pub mod objective;
pub mod optimizer;
pub mod oracle;
pub mod synthetic;
pub mod types;

pub use error::{Error, Result};
pub use inference::{classify, fit_posterior, forecast, predict, Classification, Classifier, VariationalPosterior};
pub use kernel::{chol_jittered, kernel_eval, kernel_matrix, CholeskyFactor, KernelParams};
pub use objective::{informative_timestamps, lmax_bound, loss_and_gradient, loss_gradient, total_loss, BoundWorkspace, LossGradient};
pub use optimizer::{init_params, minimize, train, Minimum, StopReason, TrainOutcome};
pub use types::{normalize_timestamps, Collection, Dataset, Hyperparams, ModelParams, Prediction, TimeScale, TimeSeries, ValueScale};
