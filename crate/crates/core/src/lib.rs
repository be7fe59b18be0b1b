//! Desk-scale text-to-image diffusion transformer: a DiT backbone extended with
//! cross-attention and a shared adaLN-single modulation path, checkpoint
//! surgery from class-conditional weights, diffusion samplers, multi-aspect
//! bucketing and caption concept-density statistics.

pub mod dataops;
pub mod diffusion;
pub mod model;
pub mod pipeline;
pub mod reparam;
pub mod tensor;
