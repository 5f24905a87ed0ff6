//! Neural building blocks: embedding, recurrent backbone, descriptor
//! networks, critic bodies and observation normalization.

pub mod backbone;
pub mod descriptor;
pub mod gru;
pub mod init;
pub mod layer_norm;
pub mod linear;
pub mod mlp;
pub mod normalizer;

pub use backbone::Backbone;
pub use descriptor::{DescriptorHead, DescriptorNet};
pub use gru::GruCell;
pub use init::Init;
pub use layer_norm::LayerNorm;
pub use linear::{Linear, SplitLinear};
pub use mlp::Mlp2;
pub use normalizer::RunningNormalizer;
