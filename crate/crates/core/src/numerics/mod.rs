//! Dense tensors, differentiable kernels and gradient verification.

pub mod attention;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod params;
pub mod tensor;
pub mod tnsr;

pub use attention::{attention_probs, cross_attention, grid_coords, mhsa, AttentionWeights};
pub use gradcheck::{eval_with_grads, grad_check, GradCheckConfig, GradCheckReport, GradResult};
pub use graph::{Gradients, Graph, Var};
pub use kernels::{
    avg_pool2d, depthwise_conv3x3, layer_norm, matmul, resize_bilinear, rope2d, softmax_rows,
};
pub use params::{LayerNormWeights, LinearWeights, ParamTree, TensorParams};
pub use tensor::Tensor;
