//! Two-stream prior over object boxes and frame latents.

mod audit;
mod block;
mod config;
mod masks;
mod prior;
mod stream;

pub use block::{povt_block, BlockParams, ObjKv, SubOp};
pub use config::{Ablations, ModelConfig};
pub use masks::{build_masks, AttnMasks, WindowLayout};
pub use prior::{ForwardOut, ObjOut, Prior};
pub use stream::{collect_patches, PatchSlot, WindowInput};
pub use audit::{audit_config, causality_audit, AuditReport};

#[cfg(test)]
mod tests;
