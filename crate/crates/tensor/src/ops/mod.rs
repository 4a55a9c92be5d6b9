mod basic;
mod conv;
mod norm;
mod spatial;

pub use conv::{conv_output_size, conv_transpose_output_size};
pub use norm::{Mode, RunningStats, BATCH_NORM_EPS, BATCH_NORM_MOMENTUM};
pub use spatial::Axis;
