//! Desk-scale verification substrate: synthetic MoE checkpoints with scripted
//! redundancy, a reference top-K forward pass and parameter/FLOP accounting.

mod accounting;
mod forward;
mod toy;

pub use accounting::{count_params, expert_reduction_pct, flops_per_token, ParamCounts};
pub use forward::{forward, probe_inputs, softmax_selected, top_k_indices, ForwardTrace, ToyExpert, ToyLayer, ToyModel};
pub use toy::{gen_toy, Directive, ToySpec};
