//! A small CNN inference engine built from first-principles kernels.
//!
//! The crate assembles SqueezeNet v1.0 from fire modules whose expand
//! branches write straight into channel slices of a shared buffer, runs it
//! through a pre-planned executor that allocates nothing per inference, and
//! offers an 8-bit path whose quantize, requantize and dequantize steps are
//! timed as layers in their own right.
//!
//! Module map:
//! - [`tensor`]: N-C-H-W storage and channel-slice views
//! - [`ops`]: float kernels (convolution, ReLU, pooling, softmax, top-k)
//! - [`quant`]: affine `u8` quantization and the integer convolution
//! - [`graph`]: fire modules, the SqueezeNet builder and the timed executor
//! - [`model_io`]: the TIWF weight container and raw input files
//! - [`bench`]: repeated timed runs and the grouped timing report

pub mod bench;
pub mod error;
pub mod graph;
pub mod model_io;
pub mod ops;
pub mod quant;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{allocation_count, ChannelSliceView, DType, Shape, Tensor};
