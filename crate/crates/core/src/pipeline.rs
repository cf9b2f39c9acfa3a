//! Sketch-to-image synthesis from a trained stage-2 checkpoint.

use std::path::Path;

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{
    drop_regions, keep_mask, ConditionDecoder, ConditioningMap, MultiAe, Region, RegionFeatureBundle, RegionLayout,
    SketchBitmap,
};
use crate::diffusion::{reverse_step, sampling_timesteps, LatentTensor, NoiseSchedule, Sampler};
use crate::error::{Error, Result};
use crate::image_ae::{latent_from_tensor, ImageCodec, ImageTensor, DOWNSAMPLE, LATENT_CHANNELS};
use crate::nn;
use crate::training::{codec_from_checkpoint, load_checkpoint, multi_ae_from_checkpoint, Checkpoint, CheckpointKind};
use crate::unet::{unet_from_params, UNet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisOptions {
    pub steps: usize,
    pub sampler: Sampler,
    pub seed: u64,
    /// Regions removed from the condition before sampling.
    #[serde(default)]
    pub masked_regions: Vec<Region>,
}

impl SynthesisOptions {
    /// Deterministic DDIM (`eta = 0`).
    pub fn ddim(steps: usize, seed: u64) -> Self {
        Self {
            steps,
            sampler: Sampler::Ddim { eta: 0.0 },
            seed,
            masked_regions: Vec::new(),
        }
    }
}

/// The frozen inference stack: sketch encoder, condition decoder, denoiser
/// and image codec.
pub struct Synthesizer {
    multi_ae: MultiAe,
    tau: ConditionDecoder,
    unet: UNet,
    codec: ImageCodec,
    schedule: NoiseSchedule,
    layout: RegionLayout,
    identity: String,
}

impl std::fmt::Debug for Synthesizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Synthesizer")
            .field("canvas", &self.canvas())
            .field("steps", &self.schedule.steps())
            .field("identity", &self.identity)
            .finish()
    }
}

impl Synthesizer {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.meta.kind != CheckpointKind::Stage2 {
            return Err(Error::Checkpoint(format!(
                "synthesis needs a stage 2 checkpoint, got {:?}",
                ckpt.meta.kind
            )));
        }
        let missing = |what: &str| Error::Checkpoint(format!("checkpoint lacks {what}"));
        let (multi_ae, _) = multi_ae_from_checkpoint(ckpt, DType::F32)?;
        let layout = multi_ae.layout().clone();
        let codec = codec_from_checkpoint(ckpt, DType::F32)?;
        let latent = layout.canvas() / DOWNSAMPLE;
        let tau_cfg = ckpt.meta.tau.as_ref().ok_or_else(|| missing("a tau config"))?;
        let (tau, _) = ConditionDecoder::from_params(
            tau_cfg,
            multi_ae.bundle_len(),
            latent,
            &ckpt.params("tau", DType::F32)?,
            DType::F32,
        )?;
        let unet_cfg = ckpt.meta.unet.as_ref().ok_or_else(|| missing("a unet config"))?;
        let (unet, _) = unet_from_params(unet_cfg, &ckpt.params("unet", DType::F32)?, DType::F32)?;
        let schedule = ckpt.meta.schedule.clone().ok_or_else(|| missing("a noise schedule"))?;
        Ok(Self {
            multi_ae,
            tau,
            unet,
            codec,
            schedule,
            layout,
            identity: ckpt.hash()?,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&load_checkpoint(path)?)
    }

    pub fn canvas(&self) -> usize {
        self.layout.canvas()
    }

    pub fn layout(&self) -> &RegionLayout {
        &self.layout
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// Content hash of the checkpoint this was loaded from.
    pub fn identity(&self) -> &str {
        &self.identity
    }

    pub fn encode_sketch(&self, sketch: &SketchBitmap) -> Result<RegionFeatureBundle> {
        self.check_sketch(sketch)?;
        self.multi_ae.encode_sketch(sketch)
    }

    /// The conditioning map for `sketch` with `masked` regions zeroed.
    pub fn condition(&self, sketch: &SketchBitmap, masked: &[Region]) -> Result<ConditioningMap> {
        let map = self.tau.decode_condition(&self.encode_sketch(sketch)?)?;
        drop_regions(&map, &self.layout, masked)
    }

    fn check_sketch(&self, sketch: &SketchBitmap) -> Result<()> {
        if sketch.size() != self.canvas() {
            return Err(Error::InvalidInput(format!(
                "sketch is {0}x{0}, the model expects {1}x{1}",
                sketch.size(),
                self.canvas()
            )));
        }
        Ok(())
    }

    pub fn synthesize(&self, sketch: &SketchBitmap, opts: &SynthesisOptions) -> Result<ImageTensor> {
        Ok(self.synthesize_batch(std::slice::from_ref(sketch), opts)?.remove(0))
    }

    /// Samples one image per sketch, running the denoiser on the whole batch
    /// at every step. Item `i` draws its noise from stream `i` of
    /// `opts.seed`, so item 0 matches a single `synthesize` call.
    pub fn synthesize_batch(&self, sketches: &[SketchBitmap], opts: &SynthesisOptions) -> Result<Vec<ImageTensor>> {
        if sketches.is_empty() {
            return Ok(Vec::new());
        }
        for s in sketches {
            self.check_sketch(s)?;
        }
        let b = sketches.len();
        let latent = self.canvas() / DOWNSAMPLE;
        let shape = (LATENT_CHANNELS, latent, latent);
        let timesteps = sampling_timesteps(self.schedule.steps(), opts.steps)?;

        let bundles = self.multi_ae.encode_tensor(&SketchBitmap::stack(&sketches.iter().collect::<Vec<_>>(), DType::F32)?)?;
        let mut dropped = [false; 5];
        for r in &opts.masked_regions {
            dropped[r.index()] = true;
        }
        let keep = keep_mask(&self.layout, latent, &dropped)?;
        let keep = Tensor::from_vec(keep.iter().copied().collect::<Vec<_>>(), (1, 1, latent, latent), &nn::device())?;
        let cond = self.tau.forward(&bundles)?.broadcast_mul(&keep)?;

        let mut rngs: Vec<ChaCha8Rng> = (0..b)
            .map(|i| {
                let mut r = ChaCha8Rng::seed_from_u64(opts.seed);
                r.set_stream(i as u64);
                r
            })
            .collect();
        let mut z: Vec<LatentTensor> = rngs.iter_mut().map(|r| LatentTensor::randn(shape, r)).collect();
        for (k, &t) in timesteps.iter().enumerate() {
            let t_prev = timesteps.get(k + 1).copied().unwrap_or(0);
            let eps = self.unet.forward(&stack_latents(&z)?, &vec![t; b], &cond)?;
            for (i, (zi, rng)) in z.iter_mut().zip(rngs.iter_mut()).enumerate() {
                let e = latent_from_tensor(&eps, i)?;
                *zi = reverse_step(opts.sampler, opts.steps, zi, t, t_prev, &e, &self.schedule, rng)?;
            }
        }
        let images = self.codec.decode_tensor(&stack_latents(&z)?)?;
        (0..b).map(|i| ImageTensor::from_tensor(&images, i)).collect()
    }
}

fn stack_latents(z: &[LatentTensor]) -> Result<Tensor> {
    let (c, h, w) = z[0].shape();
    let data: Vec<f32> = z.iter().flat_map(|l| l.as_array().iter().map(|v| *v as f32)).collect();
    Ok(Tensor::from_vec(data, (z.len(), c, h, w), &nn::device())?)
}
