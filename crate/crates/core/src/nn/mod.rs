//! Minimal neural-network plumbing on top of candle: a named parameter
//! store with seeded initialization, the handful of layers the models need,
//! and an Adam optimizer whose state can be checkpointed.

mod adam;
mod conv;
mod layers;
pub(crate) mod params;

pub use adam::{Adam, AdamConfig};
pub use layers::{group_norm_groups, Conv2d, ConvTranspose2d, GroupNorm, Linear};
pub use params::{Init, ParamSource, Params, Scope};

pub(crate) use conv::upsample_nearest;

use candle_core::{DType, Device, Tensor};

use crate::error::Result;

pub(crate) fn device() -> Device {
    Device::Cpu
}

pub(crate) fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok(a.sub(b)?.sqr()?.mean_all()?)
}

pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
