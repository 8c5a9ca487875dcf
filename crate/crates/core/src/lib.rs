//! Redundancy-driven expert pruning for Mixture-of-Experts checkpoints.
//!
//! Experts within a layer are compared pairwise by the normalized mutual
//! information of their flattened weight matrices. Per layer, a redundancy
//! limit `ρ = mean + IQR·τ` over the off-diagonal entries decides how many of
//! the most redundant experts are eliminated; the survivors are written to a
//! new checkpoint with routers sliced to match.
//!
//! Numerics are generic over [`Scalar`] (`f32`/`f64`); the checkpoint
//! pipeline runs in `f64`, and the aliases below name those instantiations.

pub mod builder;
pub mod checkpoint;
mod error;
mod hash;
pub mod nmi;
pub mod pruner;
mod scalar;
pub mod sim;

pub use builder::{
    adjust_config, build_simplified, emit_healing_manifest, slice_router, HealingManifest,
    IndexRemap,
};
pub use checkpoint::{
    load_tensor_f64, open_checkpoint, open_checkpoint_as, resolve_expert_blocks, write_checkpoint,
    Architecture, ConfigDoc, Dtype, ExpertBlock, ModelManifest, TensorRecord,
};
pub use error::{Error, Result};
pub use hash::sha256_hex;
pub use nmi::{
    discretize, entropy, expert_redundancy, mutual_information, nmi, Histogram, JointHistogram,
    DEFAULT_BINS,
};
pub use pruner::{build_nmi_matrix, make_plan, prune_block, redundancy_limit, PruningPlan};
pub use scalar::Scalar;
pub use sim::{count_params, flops_per_token, forward, gen_toy, ParamCounts, ToySpec};

/// Scalar type of the checkpoint pipeline.
pub type Real = f64;

pub type Nmi = nmi::Nmi<Real>;
pub type RedundancyScore = nmi::RedundancyScore<Real>;
pub type NmiMatrix = pruner::NmiMatrix<Real>;
pub type LayerPlan = pruner::LayerPlan<Real>;
pub type Removal = pruner::Removal<Real>;
pub type ForwardTrace = sim::ForwardTrace<Real>;
pub type ToyModel = sim::ToyModel<Real>;

pub type NmiMatrixF32 = pruner::NmiMatrix<f32>;
pub type ToyModelF32 = sim::ToyModel<f32>;
