//! Minimal reverse-mode differentiation and optimization engine.

mod adam;
pub(crate) mod kernels;
mod layers;
mod params;
mod tape;

pub use adam::{adam_update, AdamConfig, AdamState};
pub use layers::{apply_running_updates, kaiming_uniform, BatchNorm, Conv2d, Dense};
pub use params::{read_records, write_records, Param, ParamId, ParamKind, ParamStore, CONTAINER_MAGIC};
pub(crate) use params::{read_exact, read_u32};
pub use tape::{Activation, Mode, RunningUpdate, Tape, Var, BCE_EPS};
pub(crate) use tape::{bce_mean, cross_entropy_mean};
