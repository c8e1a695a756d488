//! Dense linear algebra and the small numeric kernels the model and the
//! analyses are built on.

pub mod adam;
pub mod logistic;
pub mod loss;
pub mod pca;
pub mod tensor;

pub use adam::{adam_step, clip_global_norm, AdamConfig, AdamState, Gradients};
pub use logistic::{logistic_fit, LogisticConfig, LogisticProbe};
pub use loss::{cross_entropy_loss_and_grad, cosine_similarity, softmax};
pub use pca::{pca_fit, spectral_norm, PcaProjection};
pub use tensor::{matmul, Tensor2D};
