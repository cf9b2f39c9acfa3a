use std::collections::BTreeMap;

use candle_core::DType;

use super::{check_resume, Checkpoint, CheckpointKind, CheckpointMeta, Loop, SketchSource, Stage, TrainConfig, TrainOptions, TrainOutcome};
use crate::conditioning::{MultiAe, RegionLayout, SketchBitmap};
use crate::dataset::LoadedSample;
use crate::error::{Error, Result};
use crate::nn::{self, Adam};

/// The sketches stage 1 trains on for a given source.
pub fn stage1_sketches(samples: &[LoadedSample], source: SketchSource) -> Vec<SketchBitmap> {
    let mut out = Vec::new();
    for s in samples {
        match source.fixed_level() {
            Some(level) => out.push(s.level(level).clone()),
            None => {
                out.extend(s.levels.iter().cloned());
                out.extend(s.sra.iter().cloned());
            }
        }
    }
    out
}

/// Pre-trains the five-part sketch autoencoder on the summed
/// reconstruction MSE.
pub fn train_stage1(
    sketches: &[SketchBitmap],
    layout: &RegionLayout,
    config: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    config.validate()?;
    if config.stage != Stage::One {
        return Err(Error::InvalidConfig(format!("expected a stage 1 config, got {:?}", config.stage)));
    }
    if let Some(s) = sketches.iter().find(|s| s.size() != layout.canvas()) {
        return Err(Error::InvalidInput(format!(
            "sketch size {} does not match the {} canvas",
            s.size(),
            layout.canvas()
        )));
    }
    let start = check_resume(opts.resume, CheckpointKind::Stage1)?;
    let ae_cfg = &config.model.multi_ae;
    let (ae, params) = match opts.resume {
        Some(c) => MultiAe::from_params(ae_cfg, layout, &c.params("multi_ae", DType::F32)?, DType::F32)?,
        None => MultiAe::init(ae_cfg, layout, config.seed, DType::F32)?,
    };
    let adam = {
        let mut a = Adam::new(config.optimizer, params.iter())?;
        if let Some(c) = opts.resume {
            a.import_state(c.meta.step, &c.optimizer_state())?;
        }
        std::cell::RefCell::new(a)
    };
    let refs: Vec<&SketchBitmap> = sketches.iter().collect();
    let lp = Loop {
        stage: "stage1",
        config,
        n_items: sketches.len(),
        opts,
    };
    lp.run(
        start,
        opts.resume.map(|c| c.meta.metrics.clone()).unwrap_or_default(),
        |_, batch, _| {
            let x = SketchBitmap::stack(&batch.iter().map(|i| refs[*i]).collect::<Vec<_>>(), DType::F32)?;
            let loss = nn::mse(&ae.forward(&x)?, &x)?;
            let value = nn::scalar(&loss)?;
            if value.is_finite() {
                adam.borrow_mut().step(&loss.backward()?)?;
            }
            Ok(value)
        },
        |step, metrics| {
            let mut ck = Checkpoint::new(CheckpointMeta {
                kind: CheckpointKind::Stage1,
                step,
                config: config.clone(),
                layout: Some(layout.clone()),
                schedule: None,
                image_ae: None,
                latent_scale: None,
                multi_ae: Some(ae_cfg.clone()),
                tau: None,
                unet: None,
                metrics: metrics.to_vec(),
                frozen: BTreeMap::new(),
            });
            ck.insert_params(&params)?;
            ck.insert_optimizer(adam.borrow().export_state()?);
            Ok(ck)
        },
    )
}

pub fn multi_ae_from_checkpoint(ckpt: &Checkpoint, dtype: DType) -> Result<(MultiAe, crate::nn::Params)> {
    let cfg = ckpt
        .meta
        .multi_ae
        .as_ref()
        .ok_or_else(|| Error::Checkpoint("checkpoint lacks multi_ae config".into()))?;
    let layout = ckpt
        .meta
        .layout
        .as_ref()
        .ok_or_else(|| Error::Checkpoint("checkpoint lacks a region layout".into()))?;
    MultiAe::from_params(cfg, layout, &ckpt.params("multi_ae", DType::F32)?, dtype)
}
