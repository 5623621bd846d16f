//! Hybrid filter banks and the network builders that use them.

pub mod arch;
pub mod bank;
pub mod network;
pub mod plan;

pub use arch::{
    build_mobilenets_v1, build_tinynet, round_half_up, scale_channels, ArchSpec, LayerDesc,
    LayerKind,
};
pub use bank::{hybrid_forward, ConvShape, HybridBankLayer};
pub use network::{instantiate, DenseHead, NetLayer, Network};
pub use plan::{ConvSplit, FcPolicy, QuantMode, QuantPlan};
