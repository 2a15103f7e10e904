//! Sparse convolutional layers, a gradient tape, and weight storage.

pub mod conv;
pub mod layers;
pub mod real;
pub mod tape;
pub mod weights;

pub use conv::{down_conv_s2, sparse_conv, up_conv_s2, ConvKernel, KernelMap};
pub use layers::{irn_forward, relu, sigmoid, SameScaleMaps};
pub use real::Real;
pub use tape::{Gradients, Mat, Tape, Var};
pub use weights::{ModelWeights, Nudge, Params};
