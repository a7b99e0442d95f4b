//! Toy gated-convolution / linear-attention model trained on set disjointness.

pub mod checkpoint;
mod model;
mod sweep;
mod train;

pub use model::{Batch, ToyConfig, ToyModel, N_LAYERS};
pub use sweep::{
    best_per_point, fig2_sweep, order_gaps, read_rows, run_all, run_one, write_rows, OrderGaps, SweepRow, SweepSpec,
};
pub use train::{accuracy, eval_sliced, train, train_with, AdamState, AdamW, Predictor, SlicedAccuracy, TrainOutcome, TrainRun};
