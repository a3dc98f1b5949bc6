//! Tensors, layers with analytic backward passes, the encoder-decoder
//! network and its checkpoint format.

mod checkpoint;
pub mod layers;
mod network;
mod scalar;
mod tensor;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, ModelCheckpoint, TrainingMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use layers::Mode;
pub use network::{Gradients, Network, NetworkConfig, ParamView, Trace};
pub use scalar::Scalar;
pub use tensor::{Shape, Tensor4};
