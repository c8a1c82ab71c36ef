//! Layer primitives with hand-written gradients.

pub mod activation;
pub mod batchnorm;
pub mod conv;
pub mod dropout;

pub use activation::{relu, relu_grad, softmax_groups, softmax_groups_grad};
pub use batchnorm::{batch_norm, batch_norm_grad, BatchNormGrads, BatchNormState, BN_EPS, BN_MOMENTUM};
pub use conv::{conv2d_dilated, conv2d_dilated_grad, ConvGrads, ConvSpec};
pub use dropout::{dropout, dropout_grad, DropoutMask};

/// Execution mode shared by batch norm and dropout.
///
/// `Mc` is inference with dropout left on: batch norm uses running
/// statistics while dropout samples a fresh mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Eval,
    Mc,
}

impl Mode {
    pub fn dropout_active(self) -> bool {
        matches!(self, Mode::Train | Mode::Mc)
    }

    pub fn uses_batch_stats(self) -> bool {
        matches!(self, Mode::Train)
    }
}
