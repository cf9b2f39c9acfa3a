use std::collections::BTreeMap;

use candle_core::DType;

use super::{check_resume, Checkpoint, CheckpointKind, CheckpointMeta, Loop, Stage, TrainConfig, TrainOptions, TrainOutcome};
use crate::error::{Error, Result};
use crate::image_ae::{ImageCodec, ImageTensor, DOWNSAMPLE};
use crate::nn::{self, Adam};

/// Trains the pixel/latent codec on reconstruction MSE, then sets the
/// latent scale to the inverse standard deviation of the encoder outputs.
pub fn train_image_ae(images: &[ImageTensor], config: &TrainConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    config.validate()?;
    if config.stage != Stage::ImageAe {
        return Err(Error::InvalidConfig(format!("expected an image_ae config, got stage {:?}", config.stage)));
    }
    if let Some(img) = images.iter().find(|i| i.size() % DOWNSAMPLE != 0 || i.size() != images[0].size()) {
        return Err(Error::InvalidInput(format!("image size {} unusable for the codec", img.size())));
    }
    let start = check_resume(opts.resume, CheckpointKind::ImageAe)?;
    let ae_cfg = &config.model.image_ae;
    let (codec, params) = match opts.resume {
        Some(c) => ImageCodec::from_params(ae_cfg, &c.params("image_ae", DType::F32)?, 1.0, DType::F32)?,
        None => ImageCodec::init(ae_cfg, config.seed, DType::F32)?,
    };
    let mut adam = Adam::new(config.optimizer, params.iter())?;
    if let Some(c) = opts.resume {
        adam.import_state(c.meta.step, &c.optimizer_state())?;
    }
    let all: Vec<&ImageTensor> = images.iter().collect();

    let snapshot = |adam: &Adam, step: u64, metrics: &[super::EpochMetrics]| {
        let mut ck = Checkpoint::new(CheckpointMeta {
            kind: CheckpointKind::ImageAe,
            step,
            config: config.clone(),
            layout: None,
            schedule: None,
            image_ae: Some(ae_cfg.clone()),
            latent_scale: None,
            multi_ae: None,
            tau: None,
            unet: None,
            metrics: metrics.to_vec(),
            frozen: BTreeMap::new(),
        });
        ck.insert_params(&params)?;
        ck.insert_optimizer(adam.export_state()?);
        Ok::<_, Error>(ck)
    };

    let lp = Loop {
        stage: "image_ae",
        config,
        n_items: images.len(),
        opts,
    };
    let adam_cell = std::cell::RefCell::new(adam);
    let mut outcome = lp.run(
        start,
        opts.resume.map(|c| c.meta.metrics.clone()).unwrap_or_default(),
        |_, batch, _| {
            let x = ImageTensor::stack(&batch.iter().map(|i| all[*i]).collect::<Vec<_>>(), DType::F32)?;
            let recon = codec.decode_raw(&codec.encode_raw(&x)?)?;
            let loss = nn::mse(&recon, &x)?;
            let value = nn::scalar(&loss)?;
            if value.is_finite() {
                adam_cell.borrow_mut().step(&loss.backward()?)?;
            }
            Ok(value)
        },
        |step, metrics| snapshot(&adam_cell.borrow(), step, metrics),
    )?;
    let scale = latent_scale(&codec, &all)?;
    outcome.checkpoint.meta.latent_scale = Some(scale);
    if let Some(path) = opts.checkpoint_path {
        super::save_checkpoint(&outcome.checkpoint, path)?;
    }
    Ok(outcome)
}

fn latent_scale(codec: &ImageCodec, images: &[&ImageTensor]) -> Result<f64> {
    let mut values = Vec::new();
    for chunk in images.chunks(32) {
        let z = codec.encode_raw(&ImageTensor::stack(chunk, DType::F32)?)?;
        values.extend(z.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if !(var.is_finite() && var > 1e-12) {
        return Err(Error::Diverged(format!("degenerate latent variance {var}")));
    }
    Ok(1.0 / var.sqrt())
}

/// Rebuilds the codec stored in a checkpoint.
pub fn codec_from_checkpoint(ckpt: &Checkpoint, dtype: DType) -> Result<ImageCodec> {
    let cfg = ckpt
        .meta
        .image_ae
        .as_ref()
        .ok_or_else(|| Error::Checkpoint("checkpoint lacks image_ae config".into()))?;
    let scale = ckpt
        .meta
        .latent_scale
        .ok_or_else(|| Error::Checkpoint("checkpoint lacks latent_scale".into()))?;
    Ok(ImageCodec::from_params(cfg, &ckpt.params("image_ae", DType::F32)?, scale, dtype)?.0)
}
