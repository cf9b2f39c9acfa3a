use std::cell::RefCell;
use std::collections::BTreeMap;

use candle_core::{DType, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::codec::codec_from_checkpoint;
use super::stage1::multi_ae_from_checkpoint;
use super::{check_resume, Checkpoint, CheckpointKind, CheckpointMeta, Loop, SketchSource, Stage, TrainConfig, TrainOptions, TrainOutcome};
use crate::conditioning::{keep_mask, ConditionDecoder, Region, SketchBitmap};
use crate::dataset::{sra_choice, LoadedSample};
use crate::error::{Error, Result};
use crate::image_ae::{ImageTensor, LATENT_CHANNELS};
use crate::nn::{self, Adam, Params};
use crate::unet::{init_unet, unet_from_params};

/// `count` timesteps drawn uniformly from `[1, steps]`.
pub fn sample_timesteps<R: Rng + ?Sized>(rng: &mut R, steps: usize, count: usize) -> Vec<usize> {
    (0..count).map(|_| rng.random_range(1..=steps)).collect()
}

fn encode_bundles(ae: &crate::conditioning::MultiAe, sketches: &[&SketchBitmap]) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(sketches.len());
    for chunk in sketches.chunks(32) {
        let f = ae.encode_tensor(&SketchBitmap::stack(chunk, DType::F32)?)?;
        out.extend(f.to_vec2::<f32>()?);
    }
    Ok(out)
}

/// Trains the condition decoder and the denoiser jointly on the latent
/// noise-prediction loss. The sketch encoder and the image codec stay
/// frozen; their fingerprints are checked before returning.
pub fn train_stage2(
    samples: &[LoadedSample],
    stage1: &Checkpoint,
    codec_ckpt: &Checkpoint,
    config: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    config.validate()?;
    if config.stage != Stage::Two {
        return Err(Error::InvalidConfig(format!("expected a stage 2 config, got {:?}", config.stage)));
    }
    if stage1.meta.kind != CheckpointKind::Stage1 && stage1.meta.kind != CheckpointKind::Stage2 {
        return Err(Error::Checkpoint(format!("{:?} checkpoint has no sketch encoder", stage1.meta.kind)));
    }
    let start = check_resume(opts.resume, CheckpointKind::Stage2)?;
    let (multi_ae, zeta) = multi_ae_from_checkpoint(stage1, DType::F32)?;
    let layout = multi_ae.layout().clone();
    let codec = codec_from_checkpoint(codec_ckpt, DType::F32)?;
    let codec_params = codec_ckpt.params("image_ae", DType::F32)?;
    let zeta_before = zeta.fingerprint()?;
    let codec_before = codec_params.fingerprint()?;
    if let Some(r) = opts.resume {
        for (name, fp) in [("multi_ae", &zeta_before), ("image_ae", &codec_before)] {
            if r.meta.frozen.get(name) != Some(fp) {
                return Err(Error::Checkpoint(format!(
                    "resume checkpoint was trained against a different {name}"
                )));
            }
        }
    }
    let canvas = layout.canvas();
    if let Some(s) = samples.iter().find(|s| s.image.size() != canvas) {
        return Err(Error::InvalidInput(format!(
            "sample {} is {} px, the sketch encoder expects {canvas}",
            s.id,
            s.image.size()
        )));
    }
    let schedule = config.model.diffusion.build()?;
    let t_max = schedule.steps();
    let latent = canvas / crate::image_ae::DOWNSAMPLE;

    // Frozen quantities are computed once up front.
    let images: Vec<&ImageTensor> = samples.iter().map(|s| &s.image).collect();
    let mut z0 = Vec::new();
    for chunk in images.chunks(32) {
        z0.push(codec.encode_tensor(&ImageTensor::stack(chunk, DType::F32)?)?);
    }
    let z0 = Tensor::cat(&z0, 0)?.detach();
    let level_bundles: Vec<Vec<Vec<f32>>> = (0..3)
        .map(|l| encode_bundles(&multi_ae, &samples.iter().map(|s| &s.levels[l]).collect::<Vec<_>>()))
        .collect::<Result<_>>()?;
    let stored_sra: Vec<Vec<Vec<f32>>> = samples
        .iter()
        .map(|s| encode_bundles(&multi_ae, &s.sra.iter().collect::<Vec<_>>()))
        .collect::<Result<_>>()?;
    let dim = multi_ae.config().latent_dim;

    let bundle_len = multi_ae.bundle_len();
    let (tau, tau_params) = match opts.resume {
        Some(c) => ConditionDecoder::from_params(&config.model.tau, bundle_len, latent, &c.params("tau", DType::F32)?, DType::F32)?,
        None => ConditionDecoder::init(&config.model.tau, bundle_len, latent, config.seed ^ 0x7a75, DType::F32)?,
    };
    let (unet, unet_params) = match opts.resume {
        Some(c) => unet_from_params(&config.model.unet, &c.params("unet", DType::F32)?, DType::F32)?,
        None => init_unet(&config.model.unet, config.seed, DType::F32)?,
    };
    let mut trainable = Params::new(DType::F32);
    trainable.extend(&tau_params);
    trainable.extend(&unet_params);
    let adam = {
        let mut a = Adam::new(config.optimizer, trainable.iter())?;
        if let Some(c) = opts.resume {
            a.import_state(c.meta.step, &c.optimizer_state())?;
        }
        RefCell::new(a)
    };
    let dev = nn::device();
    let alpha_bars: Vec<f64> = (1..=t_max).map(|t| schedule.alpha_bar(t)).collect();

    let step_fn = |_: u64, batch: &[usize], rng: &mut rand_chacha::ChaCha8Rng| -> Result<f64> {
        let b = batch.len();
        let mut bundles = Vec::with_capacity(b * bundle_len);
        let mut ts = Vec::with_capacity(b);
        let mut masks = Vec::with_capacity(b * latent * latent);
        let mut eps = Vec::with_capacity(b * LATENT_CHANNELS * latent * latent);
        for &i in batch {
            match config.sketches {
                SketchSource::Sra => {
                    let prov = sra_choice(rng.random());
                    for r in Region::ALL {
                        let v = &level_bundles[prov.level(r).index()][i];
                        bundles.extend_from_slice(&v[r.index() * dim..(r.index() + 1) * dim]);
                    }
                }
                SketchSource::All => {
                    let k = rng.random_range(0..3 + stored_sra[i].len());
                    let v = if k < 3 { &level_bundles[k][i] } else { &stored_sra[i][k - 3] };
                    bundles.extend_from_slice(v);
                }
                fixed => {
                    let level = fixed.fixed_level().expect("fixed level");
                    bundles.extend_from_slice(&level_bundles[level.index()][i]);
                }
            }
            ts.extend(sample_timesteps(rng, t_max, 1));
            let dropped = config.mask.draw(rng);
            masks.extend(keep_mask(&layout, latent, &dropped)?.iter().copied());
            for _ in 0..LATENT_CHANNELS * latent * latent {
                let v: f32 = StandardNormal.sample(rng);
                eps.push(v);
            }
        }
        let bundle_t = Tensor::from_vec(bundles, (b, bundle_len), &dev)?;
        let mask_t = Tensor::from_vec(masks, (b, 1, latent, latent), &dev)?;
        let eps_t = Tensor::from_vec(eps, (b, LATENT_CHANNELS, latent, latent), &dev)?;
        let idx = Tensor::from_vec(batch.iter().map(|i| *i as u32).collect::<Vec<_>>(), b, &dev)?;
        let z0_b = z0.index_select(&idx, 0)?;
        let sa: Vec<f32> = ts.iter().map(|t| alpha_bars[t - 1].sqrt() as f32).collect();
        let sb: Vec<f32> = ts.iter().map(|t| (1.0 - alpha_bars[t - 1]).sqrt() as f32).collect();
        let sa = Tensor::from_vec(sa, (b, 1, 1, 1), &dev)?;
        let sb = Tensor::from_vec(sb, (b, 1, 1, 1), &dev)?;
        let z_t = (z0_b.broadcast_mul(&sa)? + eps_t.broadcast_mul(&sb)?)?;
        let cond = tau.forward(&bundle_t)?.broadcast_mul(&mask_t)?;
        let pred = unet.forward(&z_t, &ts, &cond)?;
        let loss = nn::mse(&pred, &eps_t)?;
        let value = nn::scalar(&loss)?;
        if value.is_finite() {
            adam.borrow_mut().step(&loss.backward()?)?;
        }
        Ok(value)
    };

    let frozen: BTreeMap<String, String> = [
        ("multi_ae".to_string(), zeta_before.clone()),
        ("image_ae".to_string(), codec_before.clone()),
    ]
    .into();
    let snapshot = |step: u64, metrics: &[super::EpochMetrics]| -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(CheckpointMeta {
            kind: CheckpointKind::Stage2,
            step,
            config: config.clone(),
            layout: Some(layout.clone()),
            schedule: Some(schedule.clone()),
            image_ae: codec_ckpt.meta.image_ae.clone(),
            latent_scale: Some(codec.latent_scale()),
            multi_ae: Some(multi_ae.config().clone()),
            tau: Some(config.model.tau.clone()),
            unet: Some(config.model.unet.clone()),
            metrics: metrics.to_vec(),
            frozen: frozen.clone(),
        });
        ck.insert_params(&zeta)?;
        ck.insert_params(&codec_params)?;
        ck.insert_params(&trainable)?;
        ck.insert_optimizer(adam.borrow().export_state()?);
        Ok(ck)
    };

    let lp = Loop {
        stage: "stage2",
        config,
        n_items: samples.len(),
        opts,
    };
    let outcome = lp.run(
        start,
        opts.resume.map(|c| c.meta.metrics.clone()).unwrap_or_default(),
        step_fn,
        snapshot,
    )?;
    assert_eq!(zeta.fingerprint()?, zeta_before, "stage 2 modified the frozen sketch encoder");
    assert_eq!(codec_params.fingerprint()?, codec_before, "stage 2 modified the frozen image codec");
    Ok(outcome)
}

/// A stage 2 checkpoint with every module freshly initialized from
/// `config.seed`. Sampling from it yields noise, but it exercises the full
/// inference path without any training.
pub fn untrained_stage2(config: &TrainConfig, layout: &crate::conditioning::RegionLayout) -> Result<Checkpoint> {
    config.validate()?;
    let m = &config.model;
    let (multi_ae, zeta) = crate::conditioning::MultiAe::init(&m.multi_ae, layout, config.seed, DType::F32)?;
    let (_, codec) = crate::image_ae::ImageCodec::init(&m.image_ae, config.seed, DType::F32)?;
    let latent = layout.canvas() / crate::image_ae::DOWNSAMPLE;
    let (_, tau) = ConditionDecoder::init(&m.tau, multi_ae.bundle_len(), latent, config.seed ^ 0x7a75, DType::F32)?;
    let (_, unet) = init_unet(&m.unet, config.seed, DType::F32)?;
    let mut stage2 = config.clone();
    stage2.stage = Stage::Two;
    let mut ck = Checkpoint::new(CheckpointMeta {
        kind: CheckpointKind::Stage2,
        step: 0,
        config: stage2,
        layout: Some(layout.clone()),
        schedule: Some(m.diffusion.build()?),
        image_ae: Some(m.image_ae.clone()),
        latent_scale: Some(1.0),
        multi_ae: Some(m.multi_ae.clone()),
        tau: Some(m.tau.clone()),
        unet: Some(m.unet.clone()),
        metrics: Vec::new(),
        frozen: [
            ("multi_ae".to_string(), zeta.fingerprint()?),
            ("image_ae".to_string(), codec.fingerprint()?),
        ]
        .into(),
    });
    for p in [&zeta, &codec, &tau, &unet] {
        ck.insert_params(p)?;
    }
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    #[test]
    fn timesteps_are_uniform() {
        let t = 50;
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = vec![0usize; t];
        for s in sample_timesteps(&mut rng, t, n) {
            assert!((1..=t).contains(&s));
            counts[s - 1] += 1;
        }
        let expected = n as f64 / t as f64;
        let chi2: f64 = counts.iter().map(|c| (*c as f64 - expected).powi(2) / expected).sum();
        let p = 1.0 - ChiSquared::new((t - 1) as f64).unwrap().cdf(chi2);
        assert!(p > 0.001, "chi2 {chi2}, p {p}");
    }
}
