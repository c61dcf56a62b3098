//! Neuron-level linear transformation (NLT) for few-shot domain adaptation of
//! a crowd-density regressor.

mod conv;
pub mod error;

pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod experiment;
pub mod metrics;
pub mod net;
pub mod nlt;
pub mod optim;
pub mod tensor;
pub mod train;

pub use autodiff::{GradientTape, Var};
pub use checkpoint::Checkpoint;
pub use data::{DomainSpec, Sample};
pub use metrics::MetricsReport;
pub use nlt::{apply_nlt, init_shift_bank, ShiftBank};
pub use train::{Regime, TrainConfig};
pub use error::{NltError, Result};
pub use net::{build_counter, count_from_density, CounterNet, LayerKind, LayerSpec, NetConfig, Params};
pub use optim::AdamState;
pub use tensor::Tensor;
