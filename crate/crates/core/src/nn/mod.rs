//! Dense tensors, a reverse-mode tape over the layer set used by the split
//! classifier and the decision network, losses, and plain SGD.

mod loss;
mod params;
mod tape;
mod tensor;

pub use loss::{binary_cross_entropy, cross_entropy, softmax, tempered_sigmoid, PROB_CLAMP};
pub use params::ParamRegistry;
pub use tape::{Gradients, PoolKind, Tape, Var};
pub use tensor::Tensor;
