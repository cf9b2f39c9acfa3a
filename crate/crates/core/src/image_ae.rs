//! Pixel <-> latent codec. Images are `(3, H, W)` in `[-1, 1]`; latents
//! are `(3, H/4, W/4)`.

use candle_core::{DType, Tensor};
use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::LatentTensor;
use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, Params, Scope};

pub use crate::training::train_image_ae;

/// Spatial downsampling factor between pixels and latents.
pub const DOWNSAMPLE: usize = 4;
pub const LATENT_CHANNELS: usize = 3;

/// The latent code of an image.
pub type LatentCode = LatentTensor;

/// RGB image, channel-first, values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor(Array3<f32>);

impl ImageTensor {
    pub fn new(data: Array3<f32>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c != 3 || h != w || h == 0 {
            return Err(Error::InvalidInput(format!(
                "image must be (3, N, N), got ({c}, {h}, {w})"
            )));
        }
        if data.iter().any(|v| !v.is_finite() || v.abs() > 1.0 + 1e-6) {
            return Err(Error::InvalidInput("image values must be finite and within [-1, 1]".into()));
        }
        Ok(Self(data))
    }

    pub fn filled(size: usize, rgb: [f32; 3]) -> Self {
        Self(Array3::from_shape_fn((3, size, size), |(c, _, _)| rgb[c]))
    }

    pub fn size(&self) -> usize {
        self.0.dim().1
    }

    pub fn as_array(&self) -> &Array3<f32> {
        &self.0
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Result<Self> {
        let (w, h) = img.dimensions();
        let arr = Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
            img.get_pixel(x as u32, y as u32)[c] as f32 / 127.5 - 1.0
        });
        Self::new(arr)
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let n = self.size() as u32;
        image::RgbImage::from_fn(n, n, |x, y| {
            let px = |c: usize| {
                let v = self.0[[c, y as usize, x as usize]];
                ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
            };
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    /// Luminance in `[0, 1]`, row-major.
    pub fn luminance(&self) -> Vec<f32> {
        let n = self.size();
        let mut out = Vec::with_capacity(n * n);
        for y in 0..n {
            for x in 0..n {
                let c = |i: usize| (self.0[[i, y, x]] + 1.0) * 0.5;
                out.push(0.299 * c(0) + 0.587 * c(1) + 0.114 * c(2));
            }
        }
        out
    }

    pub(crate) fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        let (c, h, w) = self.0.dim();
        let data: Vec<f32> = self.0.iter().copied().collect();
        Ok(Tensor::from_vec(data, (1, c, h, w), &nn::device())?.to_dtype(dtype)?)
    }

    /// Stacks images into a `(batch, 3, H, W)` tensor.
    pub fn stack(images: &[&ImageTensor], dtype: DType) -> Result<Tensor> {
        let ts = images
            .iter()
            .map(|i| i.to_tensor(dtype))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&ts, 0)?)
    }

    /// Reads item `index` of a `(batch, 3, H, W)` tensor, clamping to
    /// `[-1, 1]`.
    pub(crate) fn from_tensor(t: &Tensor, index: usize) -> Result<Self> {
        let t = t.get(index)?.to_dtype(DType::F32)?.clamp(-1f32, 1f32)?;
        let (c, h, w) = t.dims3()?;
        let data = t.flatten_all()?.to_vec1::<f32>()?;
        let arr = Array3::from_shape_vec((c, h, w), data).expect("shape from tensor");
        Self::new(arr)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageAeConfig {
    /// Channel width of the first stage; the second stage doubles it.
    pub width: usize,
}

impl Default for ImageAeConfig {
    fn default() -> Self {
        Self { width: 32 }
    }
}

impl ImageAeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::InvalidConfig("image_ae.width must be positive".into()));
        }
        Ok(())
    }
}

/// Convolutional autoencoder with two stride-2 stages each way. All wide
/// convolutions run at half resolution or below.
#[derive(Debug, Clone)]
pub struct ImageCodec {
    enc: [Conv2d; 5],
    dec: [Conv2d; 5],
    /// Multiplier applied to raw encoder outputs so latents have roughly
    /// unit variance.
    latent_scale: f64,
    dtype: DType,
}

pub(crate) const PARAM_ROOT: &str = "image_ae";

impl ImageCodec {
    fn build(scope: &mut Scope, config: &ImageAeConfig) -> Result<([Conv2d; 5], [Conv2d; 5])> {
        let w = config.width;
        let enc = {
            let mut s = scope.pp("enc");
            [
                Conv2d::new(&mut s.pp(0), 3, w, 3, 2, 1)?,
                Conv2d::same(&mut s.pp(1), w, w)?,
                Conv2d::new(&mut s.pp(2), w, 2 * w, 3, 2, 1)?,
                Conv2d::same(&mut s.pp(3), 2 * w, 2 * w)?,
                Conv2d::same(&mut s.pp(4), 2 * w, LATENT_CHANNELS)?,
            ]
        };
        let dec = {
            let mut s = scope.pp("dec");
            [
                Conv2d::same(&mut s.pp(0), LATENT_CHANNELS, 2 * w)?,
                Conv2d::same(&mut s.pp(1), 2 * w, 2 * w)?,
                Conv2d::same(&mut s.pp(2), 2 * w, w)?,
                Conv2d::same(&mut s.pp(3), w, w)?,
                Conv2d::same(&mut s.pp(4), w, 3)?,
            ]
        };
        Ok((enc, dec))
    }

    /// Fresh, seeded parameters.
    pub fn init(config: &ImageAeConfig, seed: u64, dtype: DType) -> Result<(Self, Params)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ((enc, dec), params) =
            nn::params::build_module(PARAM_ROOT, None, dtype, &mut rng, |s| Self::build(s, config))?;
        Ok((
            Self {
                enc,
                dec,
                latent_scale: 1.0,
                dtype,
            },
            params,
        ))
    }

    pub fn from_params(
        config: &ImageAeConfig,
        params: &Params,
        latent_scale: f64,
        dtype: DType,
    ) -> Result<(Self, Params)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ((enc, dec), params) = nn::params::build_module(
            PARAM_ROOT,
            Some(params),
            dtype,
            &mut rng,
            |s| Self::build(s, config),
        )?;
        Ok((
            Self {
                enc,
                dec,
                latent_scale,
                dtype,
            },
            params,
        ))
    }

    pub fn latent_scale(&self) -> f64 {
        self.latent_scale
    }

    pub fn set_latent_scale(&mut self, scale: f64) {
        self.latent_scale = scale;
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Raw encoder on a `(batch, 3, H, W)` batch, without latent scaling.
    pub(crate) fn encode_raw(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, conv) in self.enc.iter().enumerate() {
            h = conv.forward(&h)?;
            if i + 1 < self.enc.len() {
                h = h.silu()?;
            }
        }
        Ok(h)
    }

    /// Raw decoder, no clamping.
    pub(crate) fn decode_raw(&self, z: &Tensor) -> Result<Tensor> {
        let mut h = self.dec[0].forward(z)?.silu()?;
        h = self.dec[1].forward(&h)?.silu()?;
        let (_, _, zh, zw) = h.dims4()?;
        h = nn::upsample_nearest(&h, zh * 2, zw * 2)?;
        h = self.dec[2].forward(&h)?.silu()?;
        h = self.dec[3].forward(&h)?.silu()?;
        // Only the thin output conv runs at full resolution.
        h = nn::upsample_nearest(&h, zh * 4, zw * 4)?;
        self.dec[4].forward(&h)
    }

    /// Scaled latents for a batch.
    pub fn encode_tensor(&self, x: &Tensor) -> Result<Tensor> {
        Ok((self.encode_raw(x)? * self.latent_scale)?)
    }

    /// Images for a batch of scaled latents, clamped to `[-1, 1]`.
    pub(crate) fn decode_tensor(&self, z: &Tensor) -> Result<Tensor> {
        let raw = self.decode_raw(&(z / self.latent_scale)?)?;
        Ok(raw.clamp(-1.0, 1.0)?)
    }

    pub fn encode_image(&self, x: &ImageTensor) -> Result<LatentCode> {
        let n = x.size();
        if n % DOWNSAMPLE != 0 {
            return Err(Error::InvalidInput(format!(
                "image size {n} not divisible by {DOWNSAMPLE}"
            )));
        }
        let z = self.encode_tensor(&x.to_tensor(self.dtype)?)?;
        latent_from_tensor(&z, 0)
    }

    pub fn decode_image(&self, z: &LatentCode) -> Result<ImageTensor> {
        let (c, h, w) = z.shape();
        if c != LATENT_CHANNELS || h != w {
            return Err(Error::ShapeMismatch {
                expected: vec![LATENT_CHANNELS, h, h],
                got: vec![c, h, w],
            });
        }
        let img = self.decode_tensor(&latent_to_tensor(z, self.dtype)?)?;
        ImageTensor::from_tensor(&img, 0)
    }
}

pub(crate) fn latent_to_tensor(z: &LatentTensor, dtype: DType) -> Result<Tensor> {
    let (c, h, w) = z.shape();
    Ok(Tensor::from_vec(z.to_vec(), (1, c, h, w), &nn::device())?.to_dtype(dtype)?)
}

pub(crate) fn latent_from_tensor(t: &Tensor, index: usize) -> Result<LatentTensor> {
    let t = t.get(index)?.to_dtype(DType::F64)?;
    let (c, h, w) = t.dims3()?;
    LatentTensor::from_vec((c, h, w), t.flatten_all()?.to_vec1::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image(n: usize) -> ImageTensor {
        ImageTensor::new(Array3::from_shape_fn((3, n, n), |(c, y, x)| {
            ((x + 2 * y + c) as f32 / (4 * n) as f32) * 2.0 - 1.0
        }))
        .unwrap()
    }

    #[test]
    fn shape_contract() {
        let (codec, _) = ImageCodec::init(&ImageAeConfig { width: 4 }, 0, DType::F32).unwrap();
        let x = gradient_image(256);
        let z = codec.encode_image(&x).unwrap();
        assert_eq!(z.shape(), (3, 64, 64));
        let back = codec.decode_image(&z).unwrap();
        assert_eq!(back.as_array().dim(), x.as_array().dim());
        assert_eq!(codec.encode_image(&x).unwrap(), z);
    }

    #[test]
    fn decode_is_clamped_and_finite() {
        let (codec, _) = ImageCodec::init(&ImageAeConfig { width: 8 }, 1, DType::F32).unwrap();
        let big = LatentTensor::filled((3, 4, 4), 50.0);
        let img = codec.decode_image(&big).unwrap();
        assert!(img.as_array().iter().all(|v| v.is_finite() && v.abs() <= 1.0));
        let zero = codec.decode_image(&LatentTensor::zeros((3, 4, 4))).unwrap();
        assert!(zero.as_array().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn rejects_bad_inputs() {
        let (codec, _) = ImageCodec::init(&ImageAeConfig { width: 4 }, 0, DType::F32).unwrap();
        assert!(ImageTensor::new(Array3::zeros((1, 8, 8))).is_err());
        assert!(ImageTensor::new(Array3::from_elem((3, 8, 8), 2.0)).is_err());
        assert!(codec.encode_image(&ImageTensor::filled(10, [0.0; 3])).is_err());
        assert!(codec.decode_image(&LatentTensor::zeros((8, 4, 4))).is_err());
    }

    #[test]
    fn rgb8_round_trip() {
        let img = gradient_image(16);
        let back = ImageTensor::from_rgb8(&img.to_rgb8()).unwrap();
        for (a, b) in img.as_array().iter().zip(back.as_array()) {
            assert!((a - b).abs() <= 1.0 / 127.5);
        }
    }
}
