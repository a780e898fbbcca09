//! Folded ResNets: configuration, layer plan and accounting, execution.

pub mod block;
pub mod config;
pub mod net;
pub mod plan;

pub use block::{block_backward, block_forward, BlockConvs, BlockNorms, Bottleneck, Stage, StageBody};
pub use config::{ArchConfig, BlockKind, Method, Stem};
pub use net::{init_layer, Model};
pub use plan::{count_params, LayerSpec, NetPlan, NormSpec, ParamCount};
