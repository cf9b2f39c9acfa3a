//! Sketch conditioning: region geometry, the five-part sketch autoencoder,
//! the decoder from region features to the 8-channel conditioning map, and
//! region-level condition masking.

mod layout;
mod mask;
mod multi_ae;
mod sketch;
mod tau;

pub use layout::{Region, RegionBox, RegionLayout};
pub use mask::{drop_regions, keep_mask, mask_condition, MaskPolicy};
pub use multi_ae::{loss_multi_ae, loss_multi_ae_grad, MultiAe, MultiAeConfig, RegionFeatureBundle};
pub use sketch::{crop_regions, reassemble, ConditioningMap, RegionPatches, SketchBitmap, CONDITION_CHANNELS};
pub use tau::{ConditionDecoder, TauConfig};
