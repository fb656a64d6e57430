//! Quantized CNN inference on top of the approximate multipliers.

pub mod engine;
pub mod format;
pub mod model;
pub mod reference;

pub use engine::{conv2d_approx, BiasPolicy, EvalReport, Inference, InferenceConfig, LayerMse, PreparedModel};
pub use format::{load_model, save_model, Dataset, FormatError};
pub use model::{ConvLayer, DenseLayer, Layer, QuantParams, QuantizedModel, QuantizedTensor, Signal};
