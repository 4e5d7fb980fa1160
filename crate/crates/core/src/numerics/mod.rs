//! Toy-scale numerical core: patch encoding, the vector-quantized
//! tokenizer and its distillation loss, masked token modeling, and Grad-CAM,
//! each with a finite-difference or brute-force oracle in [`check`].
//!
//! Desk-scale defaults: 32×32 images, 8×8 patches (N = 16), encoder width 32,
//! 2 blocks, codebook 32 × 8, mask ratio 0.4.

pub mod check;
pub mod gradcam;
pub mod matrix;
pub mod mim;
pub mod patch;
pub mod vit;
pub mod vq;

pub use gradcam::{grad_cam, grad_wrt_patch_embeddings, CamMap, ClassHead, Classifier, GradMethod};
pub use matrix::Matrix;
pub use mim::{mim_loss, total_loss, MaskSpec, MimLoss, ToyConfig, ToyPretrainer};
pub use patch::{patchify, unpatchify, PatchSet};
pub use vit::{EncoderOutput, EncoderState};
pub use vq::{quantize, vqkd_loss, Codebook, Quantized, VqkdLoss};
