//! Noise predictor: a convolutional encoder-decoder with skip connections
//! over the 11-channel concatenation of noisy latent and conditioning map.

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{ConditioningMap, CONDITION_CHANNELS};
use crate::diffusion::LatentTensor;
use crate::error::{Error, Result};
use crate::image_ae::{latent_from_tensor, latent_to_tensor, LATENT_CHANNELS};
use crate::nn::{self, Conv2d, GroupNorm, Linear, Params, Scope};

pub(crate) const PARAM_ROOT: &str = "unet";

pub const UNET_IN_CHANNELS: usize = LATENT_CHANNELS + CONDITION_CHANNELS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    #[serde(default = "default_in")]
    pub in_channels: usize,
    #[serde(default = "default_out")]
    pub out_channels: usize,
    pub base_width: usize,
    /// Number of stride-2 downsamplings.
    pub depth: usize,
    pub time_embed_dim: usize,
}

fn default_in() -> usize {
    UNET_IN_CHANNELS
}

fn default_out() -> usize {
    LATENT_CHANNELS
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl UNetConfig {
    pub fn toy() -> Self {
        Self::new(32, 2)
    }

    pub fn full() -> Self {
        Self::new(128, 3)
    }

    pub fn new(base_width: usize, depth: usize) -> Self {
        Self {
            in_channels: UNET_IN_CHANNELS,
            out_channels: LATENT_CHANNELS,
            base_width,
            depth,
            time_embed_dim: 4 * base_width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels != UNET_IN_CHANNELS || self.out_channels != LATENT_CHANNELS {
            return Err(Error::InvalidConfig(format!(
                "unet channels must be {UNET_IN_CHANNELS} in / {LATENT_CHANNELS} out, got {} / {}",
                self.in_channels, self.out_channels
            )));
        }
        if self.base_width == 0 || self.time_embed_dim == 0 {
            return Err(Error::InvalidConfig("unet widths must be positive".into()));
        }
        if self.base_width % 2 != 0 {
            return Err(Error::InvalidConfig("unet.base_width must be even".into()));
        }
        if self.depth > 6 {
            return Err(Error::InvalidConfig("unet.depth must be at most 6".into()));
        }
        Ok(())
    }

    /// Channel width at each resolution level, `depth + 1` entries.
    pub fn level_channels(&self) -> Vec<usize> {
        (0..=self.depth)
            .map(|i| self.base_width << i.min(2))
            .collect()
    }

    /// Spatial sizes must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }
}

/// Sinusoidal embedding of integer timesteps, `(batch, dim)`.
pub fn timestep_embedding(ts: &[usize], dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let start = out.len();
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            out.push((t as f64 * freq).sin() as f32);
        }
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            out.push((t as f64 * freq).cos() as f32);
        }
        out.resize(start + dim, 0.0);
    }
    out
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(scope: &mut Scope, in_ch: usize, out_ch: usize, temb_dim: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(&mut scope.pp("norm1"), in_ch)?,
            conv1: Conv2d::same(&mut scope.pp("conv1"), in_ch, out_ch)?,
            temb: Linear::new(&mut scope.pp("temb"), temb_dim, out_ch)?,
            norm2: GroupNorm::new(&mut scope.pp("norm2"), out_ch)?,
            conv2: Conv2d::same(&mut scope.pp("conv2"), out_ch, out_ch)?,
            skip: if in_ch != out_ch {
                Some(Conv2d::new(&mut scope.pp("skip"), in_ch, out_ch, 1, 1, 0)?)
            } else {
                None
            },
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let t = self.temb.forward(temb)?.unsqueeze(2)?.unsqueeze(3)?;
        let h = h.broadcast_add(&t)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let s = match &self.skip {
            Some(c) => c.forward(x)?,
            None => x.clone(),
        };
        Ok((h + s)?)
    }
}

#[derive(Debug, Clone)]
pub struct UNet {
    config: UNetConfig,
    time1: Linear,
    time2: Linear,
    conv_in: Conv2d,
    down: Vec<(ResBlock, Conv2d)>,
    mid: ResBlock,
    up: Vec<(Conv2d, ResBlock)>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
    dtype: DType,
}

impl UNet {
    fn build(scope: &mut Scope, config: &UNetConfig, dtype: DType) -> Result<Self> {
        let e = config.time_embed_dim;
        let ch = config.level_channels();
        let time1 = Linear::new(&mut scope.pp("time1"), config.base_width, e)?;
        let time2 = Linear::new(&mut scope.pp("time2"), e, e)?;
        let conv_in = Conv2d::same(&mut scope.pp("conv_in"), config.in_channels, ch[0])?;
        let mut down = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let mut s = scope.pp(format!("down{i}"));
            let res = ResBlock::new(&mut s.pp("res"), ch[i], ch[i], e)?;
            let ds = Conv2d::new(&mut s.pp("downsample"), ch[i], ch[i + 1], 3, 2, 1)?;
            down.push((res, ds));
        }
        let last = ch[config.depth];
        let mid = ResBlock::new(&mut scope.pp("mid"), last, last, e)?;
        let mut up = Vec::with_capacity(config.depth);
        for i in (0..config.depth).rev() {
            let mut s = scope.pp(format!("up{i}"));
            let us = Conv2d::same(&mut s.pp("upsample"), ch[i + 1], ch[i])?;
            let res = ResBlock::new(&mut s.pp("res"), 2 * ch[i], ch[i], e)?;
            up.push((us, res));
        }
        let norm_out = GroupNorm::new(&mut scope.pp("norm_out"), ch[0])?;
        let conv_out = Conv2d::same(&mut scope.pp("conv_out"), ch[0], config.out_channels)?;
        Ok(Self {
            config: config.clone(),
            time1,
            time2,
            conv_in,
            down,
            mid,
            up,
            norm_out,
            conv_out,
            dtype,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Batched forward: `z_t` is `(b, 3, h, w)`, `cond` is `(b, 8, h, w)`,
    /// one timestep per item. Returns `(b, 3, h, w)`.
    pub fn forward(&self, z_t: &Tensor, ts: &[usize], cond: &Tensor) -> Result<Tensor> {
        let (b, zc, h, w) = z_t.dims4()?;
        let (cb, cc, ch, cw) = cond.dims4()?;
        if zc != LATENT_CHANNELS || cc != CONDITION_CHANNELS || (b, h, w) != (cb, ch, cw) {
            return Err(Error::ShapeMismatch {
                expected: vec![b, CONDITION_CHANNELS, h, w],
                got: vec![cb, cc, ch, cw],
            });
        }
        let m = self.config.size_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::InvalidInput(format!(
                "latent size {h}x{w} not divisible by {m}"
            )));
        }
        if ts.len() != b {
            return Err(Error::InvalidInput(format!("{} timesteps for batch of {b}", ts.len())));
        }
        let emb = timestep_embedding(ts, self.config.base_width);
        let emb = Tensor::from_vec(emb, (b, self.config.base_width), &nn::device())?.to_dtype(self.dtype)?;
        let temb = self.time2.forward(&self.time1.forward(&emb)?.silu()?)?.silu()?;

        let x = Tensor::cat(&[z_t, cond], 1)?;
        let mut hcur = self.conv_in.forward(&x)?;
        let mut skips = Vec::with_capacity(self.down.len());
        for (res, ds) in &self.down {
            hcur = res.forward(&hcur, &temb)?;
            skips.push(hcur.clone());
            hcur = ds.forward(&hcur)?;
        }
        hcur = self.mid.forward(&hcur, &temb)?;
        for (us, res) in &self.up {
            let skip = skips.pop().expect("one skip per level");
            let (_, _, sh, sw) = skip.dims4()?;
            hcur = us.forward(&nn::upsample_nearest(&hcur, sh, sw)?)?;
            hcur = res.forward(&Tensor::cat(&[&hcur, &skip], 1)?, &temb)?;
        }
        self.conv_out.forward(&self.norm_out.forward(&hcur)?.silu()?)
    }
}

/// Fresh parameters from `seed`.
pub fn init_unet(config: &UNetConfig, seed: u64, dtype: DType) -> Result<(UNet, Params)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    nn::params::build_module(PARAM_ROOT, None, dtype, &mut rng, |s| UNet::build(s, config, dtype))
}

pub fn unet_from_params(config: &UNetConfig, params: &Params, dtype: DType) -> Result<(UNet, Params)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    nn::params::build_module(PARAM_ROOT, Some(params), dtype, &mut rng, |s| {
        UNet::build(s, config, dtype)
    })
}

/// Single-sample noise prediction. `steps` is the schedule length T.
pub fn unet_predict(
    unet: &UNet,
    z_t: &LatentTensor,
    t: usize,
    cond: &ConditioningMap,
    steps: usize,
) -> Result<LatentTensor> {
    if t == 0 || t > steps {
        return Err(Error::TimestepOutOfRange { t, steps });
    }
    let (zc, zh, zw) = z_t.shape();
    if zc != LATENT_CHANNELS || cond.shape() != (CONDITION_CHANNELS, zh, zw) {
        let (cc, ch, cw) = cond.shape();
        return Err(Error::ShapeMismatch {
            expected: vec![LATENT_CHANNELS, zh, zw, CONDITION_CHANNELS, zh, zw],
            got: vec![zc, zh, zw, cc, ch, cw],
        });
    }
    let z = latent_to_tensor(z_t, unet.dtype)?;
    let c = cond.to_tensor(unet.dtype)?;
    let out = unet.forward(&z, &[t], &c)?;
    latent_from_tensor(&out, 0)
}
