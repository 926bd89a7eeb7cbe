//! Dense numerical kernels: time embeddings, the residual MLP with its
//! backward pass, and Adam.

pub mod adam;
pub mod embed;
pub mod net;

pub use adam::{AdamConfig, AdamState};
pub use embed::{embed_batch, sinusoidal_embed};
pub use net::{
    net_forward, net_grad, sigmoid, silu, Linear, NetConfig, NetGrad, NetParams, DEFAULT_BLOCKS, DEFAULT_EMBED, DEFAULT_HIDDEN,
};
