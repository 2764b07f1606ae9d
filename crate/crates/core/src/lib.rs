//! Experts weights averaging (EWA) for vision transformers.
//!
//! Training replaces some FFNs of a ViT with mixture-of-experts layers that
//! split tokens across experts by random uniform partition, mixes the expert
//! weights after every optimizer step, and finally averages each MoE layer
//! back into a single FFN so inference runs on a plain ViT.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] / [`autograd`]: `f64` tensors and a tape-based reverse-mode AD.
//! * [`vit`]: the pre-norm ViT encoder, FFN blocks, cross-entropy.
//! * [`moe`]: random-uniform-partition MoE and the top-k routed baseline.
//! * [`ewa`]: the weight-mixing step, share schedules, conversion and expansion.
//! * [`theory`]: numerical checks of the unrolled EWA weight recursion.
//! * [`train`]: optimizers, data, checkpoints, training and benchmarking.

pub mod autograd;
pub mod error;
pub mod ewa;
pub mod moe;
pub mod tensor;
pub mod theory;
pub mod train;
pub mod vit;

pub use autograd::{grad_check, grad_check_coords, Gradients, Graph, Var};
pub use error::{Error, Result};
pub use ewa::{
    build_ewa_model, convert_model, convert_moe_to_ffn, ewa_step, expand_ffn_to_moe, expand_model,
    schedule_beta, Granularity, Placement, ScheduleKind, ShareSchedule,
};
pub use moe::{
    load_balance_loss, moe_rup_forward, moe_topk_forward, router_scores, rup_partition, MoELayer,
    MoeMode, PartitionAssignment, Routing, RoutingStats,
};
pub use tensor::Tensor;
pub use vit::{cross_entropy, ffn_forward, FFNParams, Mode, Model, ViTConfig};

/// Deterministic generator used for every random draw in the crate.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Seed of the generator used for RUP partitions during evaluation of
/// MoE-form models.
pub const EVAL_SEED: u64 = 0x5EED_E7A1;
