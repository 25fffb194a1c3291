//! Layer tables, their interpreter and the two-stage cascade.

pub mod checkpoint;
pub mod crl;
pub mod network;
pub mod spec;

pub use crl::{
    assemble_stage2_input, forward_crl, forward_stage2, normalize_pair, CrlConfig, CrlModel, CrlOutput,
    MultiscalePrediction, Stage, Stage2Output,
};
pub use network::{Network, ValueScale, LEAKY_SLOPE};
pub use spec::{dispfulnet_spec, dispresnet_spec, LayerKind, LayerSpec, NetSpec};
