//! Lung segmentation: U-Net with inception/residual blocks, training with a
//! frozen-prefix transfer protocol, and morphological mask clean-up.

pub mod mask_ops;
pub mod train;
pub mod unet;

pub use mask_ops::{
    close, dice, dilate, erode, open, postprocess_mask, MaskPostprocessConfig, MorphOp,
};
pub use train::{
    load_unet, pair_hash, save_unet, train_seg, transfer_finetune, SegCheckpointMeta, SegLoss,
    SegTrainConfig,
};
pub use unet::{build_unet, predict_mask, UNet, UNetSpec};
