//! Differentiable models: segmentation generators, domain discriminators,
//! optimizers and the gradient-verification harness.

pub mod checkpoint;
pub mod discriminator;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod segnet;

pub use checkpoint::{load_discriminator, load_segnet, read_manifest, save_discriminator, save_segnet, CheckpointManifest};
pub use discriminator::{DiscForward, Discriminator, DiscriminatorSpec};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport, Objective};
pub use layers::Tensor;
pub use optim::{poly_lr, Adam, Sgd};
pub use segnet::{softmax, softmax_backward, SegForward, SegNet, SegNetSpec, LOGIT_CLAMP};

/// Toy generator with deterministic initialization.
pub fn build_toy_segnet<T: crate::Scalar>(classes: usize, width: usize, seed: u64) -> crate::Result<SegNet<T>> {
    SegNet::new(SegNetSpec { classes, width, seed, aux_head: false })
}

pub fn build_toy_discriminator<T: crate::Scalar>(
    classes: usize,
    seed: u64,
) -> crate::Result<Discriminator<T>> {
    Discriminator::new(DiscriminatorSpec { classes, width: 16, seed })
}
