use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ConditioningMap, RegionFeatureBundle, CONDITION_CHANNELS};
use crate::error::{ensure_shape, Error, Result};
use crate::nn::{self, Conv2d, ConvTranspose2d, Linear, Params, Scope};

pub(crate) const PARAM_ROOT: &str = "tau";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TauConfig {
    pub width: usize,
    /// Upper bound on transposed-convolution stages; the actual count is
    /// the largest that keeps the starting grid at least 4x4.
    #[serde(default = "default_max_up")]
    pub max_upsamples: usize,
}

fn default_max_up() -> usize {
    4
}

impl Default for TauConfig {
    fn default() -> Self {
        Self {
            width: 64,
            max_upsamples: default_max_up(),
        }
    }
}

impl TauConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::InvalidConfig("tau.width must be positive".into()));
        }
        Ok(())
    }
}

fn upsample_count(latent: usize, max: usize) -> usize {
    let mut k = 0;
    while k < max && latent % (1 << (k + 1)) == 0 && latent >> (k + 1) >= 4 {
        k += 1;
    }
    k
}

/// Decodes a region feature bundle into the 8-channel conditioning map at
/// latent resolution.
#[derive(Debug, Clone)]
pub struct ConditionDecoder {
    fc: Linear,
    ups: Vec<ConvTranspose2d>,
    out: Conv2d,
    width: usize,
    base: usize,
    bundle_len: usize,
    latent: usize,
    dtype: DType,
}

impl ConditionDecoder {
    fn build(
        scope: &mut Scope,
        config: &TauConfig,
        bundle_len: usize,
        latent: usize,
        dtype: DType,
    ) -> Result<Self> {
        let n_up = upsample_count(latent, config.max_upsamples);
        let base = latent >> n_up;
        let w = config.width;
        let fc = Linear::new(&mut scope.pp("fc"), bundle_len, w * base * base)?;
        let ups = (0..n_up)
            .map(|i| ConvTranspose2d::upsample2(&mut scope.pp(format!("up{i}")), w, w))
            .collect::<Result<Vec<_>>>()?;
        let out = Conv2d::same(&mut scope.pp("out"), w, CONDITION_CHANNELS)?;
        Ok(Self {
            fc,
            ups,
            out,
            width: w,
            base,
            bundle_len,
            latent,
            dtype,
        })
    }

    pub fn init(
        config: &TauConfig,
        bundle_len: usize,
        latent: usize,
        seed: u64,
        dtype: DType,
    ) -> Result<(Self, Params)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        nn::params::build_module(PARAM_ROOT, None, dtype, &mut rng, |s| {
            Self::build(s, config, bundle_len, latent, dtype)
        })
    }

    pub fn from_params(
        config: &TauConfig,
        bundle_len: usize,
        latent: usize,
        params: &Params,
        dtype: DType,
    ) -> Result<(Self, Params)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        nn::params::build_module(PARAM_ROOT, Some(params), dtype, &mut rng, |s| {
            Self::build(s, config, bundle_len, latent, dtype)
        })
    }

    pub fn latent_size(&self) -> usize {
        self.latent
    }

    /// `(batch, bundle_len)` to `(batch, 8, h, w)`.
    pub fn forward(&self, bundle: &Tensor) -> Result<Tensor> {
        let (b, n) = bundle.dims2()?;
        ensure_shape(&[self.bundle_len], &[n])?;
        let mut h = self
            .fc
            .forward(bundle)?
            .silu()?
            .reshape((b, self.width, self.base, self.base))?;
        for up in &self.ups {
            h = up.forward(&h)?.silu()?;
        }
        self.out.forward(&h)
    }

    pub fn decode_condition(&self, bundle: &RegionFeatureBundle) -> Result<ConditioningMap> {
        let t = self.forward(&bundle.to_tensor(self.dtype)?)?;
        ConditioningMap::from_tensor(&t, 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsample_plan() {
        assert_eq!(upsample_count(64, 4), 4);
        assert_eq!(upsample_count(8, 4), 1);
        assert_eq!(upsample_count(4, 4), 0);
        assert_eq!(upsample_count(6, 4), 0);
        assert_eq!(upsample_count(64, 2), 2);
    }

    #[test]
    fn default_shape_and_determinism() {
        let cfg = TauConfig {
            width: 8,
            max_upsamples: 4,
        };
        let (tau, _) = ConditionDecoder::init(&cfg, 2560, 64, 3, DType::F32).unwrap();
        let bundle = RegionFeatureBundle::new(std::array::from_fn(|i| vec![0.01 * i as f32; 512])).unwrap();
        let m = tau.decode_condition(&bundle).unwrap();
        assert_eq!(m.shape(), (8, 64, 64));
        assert_eq!(m, tau.decode_condition(&bundle).unwrap());
        assert!(tau.decode_condition(&RegionFeatureBundle::zeros(16)).is_err());
    }
}
