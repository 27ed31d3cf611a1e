//! Model specifications, parameter accounting and the CPU engine that
//! trains and runs them.

mod backbone;
mod checkpoint;
mod layers;
mod network;
pub(crate) mod ops;
mod optim;
mod simd;
mod spec;
mod winograd;

pub use backbone::{
    build_transfer, transfer_spec, BackboneProvider, BackboneRegistry, BackboneWeights, Pretrained, StandardBackbone,
};
pub use checkpoint::{load_model, save_model, Checkpoint, CHECKPOINT_VERSION};
pub use layers::Tensor;
pub use network::{bce_with_logits, forward, Model};
pub(crate) use optim::Adam;
pub use optim::AdamConfig;
pub use spec::{
    build_baseline, param_count, param_lens, Activation, BackboneKind, BackboneRef, LayerSpec, LayerSummary,
    ModelSpec, Padding, ParamCount, Shape,
};
