//! The four transformer variants, their objectives and the masked-modeling
//! tokenizer.

pub mod beit;
pub mod config;
pub mod distill;
pub mod transformer;

pub use beit::{mim_loss, pretrain_mim, transfer_backbone, MaskPlan, MimHead, VqLoss, VqTokenizer, MASK_RATIO};
pub use config::{ModelConfig, Preset, Variant};
pub use distill::hard_distillation_loss;
pub use transformer::{fuse_probabilities, Architecture, Head, Outputs, Teacher, TransformerModel};
