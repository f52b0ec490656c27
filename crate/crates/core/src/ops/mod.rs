//! Layer primitives with forward and analytic backward passes.

pub mod conv;
pub mod dense;
pub mod loss;
pub mod optim;
pub mod pool;
pub mod softmax;

pub use conv::{add_channel_bias, channel_bias_grad, conv2d, conv2d_backward};
pub use dense::{linear, linear_backward, relu, relu_backward, LinearGrads};
pub use loss::{
    argmax_rows, cross_entropy_logits, cross_entropy_logits_backward, cross_entropy_probs,
    cross_entropy_probs_backward, one_hot, LOG_CLAMP,
};
pub use optim::sgd_step;
pub use pool::{adaptive_avg_pool, adaptive_avg_pool_backward, global_avg_pool, global_avg_pool_backward};
pub use softmax::{log_softmax, log_softmax_backward, softmax, softmax_backward};
