use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{embed_for_fid, fid_score, perceptual_distance, rec_score, EmbedderConfig, LinearEmbedder, DEFAULT_REC_TOLERANCE};
use crate::dataset::{AbstractionLevel, LoadedSample};
use crate::diffusion::Sampler;
use crate::error::{Error, Result};
use crate::image_ae::ImageTensor;
use crate::pipeline::{SynthesisOptions, Synthesizer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub steps: usize,
    pub sampler: Sampler,
    pub seed: u64,
    #[serde(default = "default_tolerance")]
    pub rec_tolerance: usize,
    #[serde(default)]
    pub embedder: EmbedderConfig,
    /// Weights for the perceptual distance; LPIPS is reported as null
    /// without them.
    #[serde(default)]
    pub lpips_weights: Option<PathBuf>,
    /// Sketches sampled together per denoiser call.
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

fn default_tolerance() -> usize {
    DEFAULT_REC_TOLERANCE
}

fn default_batch() -> usize {
    16
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            // Ancestral: deterministic DDIM drifts on lightly trained denoisers.
            sampler: Sampler::Ddpm,
            seed: 0,
            rec_tolerance: DEFAULT_REC_TOLERANCE,
            embedder: EmbedderConfig::default(),
            lpips_weights: None,
            batch_size: default_batch(),
        }
    }
}

impl EvalConfig {
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelReport {
    pub level: AbstractionLevel,
    pub samples: usize,
    /// Samples whose sketch had ink, i.e. entered the REC means.
    pub rec_samples: usize,
    pub rec: Option<f64>,
    /// REC of each sketch against the image synthesized from another
    /// sketch, under a seeded cyclic permutation.
    pub rec_permuted: Option<f64>,
    pub fid: Option<f64>,
    pub lpips: Option<f64>,
    /// Per-sample REC in test-split order, `None` for blank sketches.
    pub rec_per_sample: Vec<Option<f64>>,
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub levels: Vec<LevelReport>,
    pub config_hash: String,
    pub checkpoint: String,
    pub embedder: String,
    pub rec_tolerance: usize,
    /// REC re-extracts edges with the built-in extractor.
    pub edge_extractor: String,
}

impl MetricReport {
    pub fn level(&self, level: AbstractionLevel) -> Option<&LevelReport> {
        self.levels.iter().find(|l| l.level == level)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// A random permutation with no fixed points (Sattolo's algorithm).
pub(crate) fn cyclic_permutation(n: usize, seed: u64) -> Vec<usize> {
    use rand::Rng;
    let mut p: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.random_range(0..i);
        p.swap(i, j);
    }
    p
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Synthesizes an image for every test sketch at each abstraction level and
/// scores it. A failing metric is recorded in that level's `errors` and the
/// sweep carries on.
pub fn eval_sweep(synth: &Synthesizer, samples: &[LoadedSample], config: &EvalConfig) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("test split is empty".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::InvalidConfig("eval batch_size must be positive".into()));
    }
    let canvas = synth.canvas();
    let embedder = config.embedder.build(canvas)?;
    let lpips = config
        .lpips_weights
        .as_deref()
        .map(LinearEmbedder::from_file)
        .transpose()?;
    let real: Vec<ImageTensor> = samples.iter().map(|s| s.image.clone()).collect();
    let real_features = embed_for_fid(&real, embedder.as_ref());
    let perm = cyclic_permutation(samples.len(), config.seed ^ 0x7065_726d);

    let mut levels = Vec::new();
    for level in AbstractionLevel::ALL {
        let mut report = LevelReport {
            level,
            samples: samples.len(),
            rec_samples: 0,
            rec: None,
            rec_permuted: None,
            fid: None,
            lpips: None,
            rec_per_sample: Vec::new(),
            errors: Vec::new(),
        };
        let sketches: Vec<_> = samples.iter().map(|s| s.level(level).clone()).collect();
        let mut images = Vec::with_capacity(samples.len());
        let mut failed = None;
        for (k, chunk) in sketches.chunks(config.batch_size).enumerate() {
            let opts = SynthesisOptions {
                steps: config.steps,
                sampler: config.sampler,
                seed: config.seed.wrapping_add(k as u64),
                masked_regions: Vec::new(),
            };
            match synth.synthesize_batch(chunk, &opts) {
                Ok(mut imgs) => images.append(&mut imgs),
                Err(e) => {
                    failed = Some(e);
                    break;
                }
            }
        }
        if let Some(e) = failed {
            report.errors.push(format!("synthesis: {e}"));
            levels.push(report);
            continue;
        }

        let mut matched = Vec::new();
        let mut permuted = Vec::new();
        for (i, s) in sketches.iter().enumerate() {
            match rec_score(s, &images[i], config.rec_tolerance) {
                Ok(r) => {
                    matched.push(r);
                    report.rec_per_sample.push(Some(r));
                    match rec_score(s, &images[perm[i]], config.rec_tolerance) {
                        Ok(p) => permuted.push(p),
                        Err(e) => report.errors.push(format!("rec (permuted) {}: {e}", samples[i].id)),
                    }
                }
                Err(Error::UndefinedMetric(_)) => report.rec_per_sample.push(None),
                Err(e) => {
                    report.rec_per_sample.push(None);
                    report.errors.push(format!("rec {}: {e}", samples[i].id));
                }
            }
        }
        report.rec_samples = matched.len();
        report.rec = mean(matched.into_iter());
        report.rec_permuted = mean(permuted.into_iter());
        if report.rec.is_none() {
            report.errors.push("rec: every sketch is blank".into());
        }

        match &real_features {
            Ok(rf) => match embed_for_fid(&images, embedder.as_ref()).and_then(|sf| fid_score(rf, &sf)) {
                Ok(f) => report.fid = Some(f),
                Err(e) => report.errors.push(format!("fid: {e}")),
            },
            Err(e) => report.errors.push(format!("fid: {e}")),
        }
        if let Some(p) = &lpips {
            let d: Result<Vec<f64>> = real.iter().zip(&images).map(|(a, b)| perceptual_distance(a, b, p)).collect();
            match d {
                Ok(d) => report.lpips = mean(d.into_iter()),
                Err(e) => report.errors.push(format!("lpips: {e}")),
            }
        }
        levels.push(report);
    }
    Ok(MetricReport {
        levels,
        config_hash: config.hash(),
        checkpoint: synth.identity().to_string(),
        embedder: embedder.identity(),
        rec_tolerance: config.rec_tolerance,
        edge_extractor: "internal difference-of-Gaussians, mid level".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permutation_has_no_fixed_points() {
        for n in 2..30 {
            let p = cyclic_permutation(n, n as u64);
            let mut sorted = p.clone();
            sorted.sort();
            assert_eq!(sorted, (0..n).collect::<Vec<_>>());
            assert!(p.iter().enumerate().all(|(i, j)| i != *j));
        }
        assert_eq!(cyclic_permutation(1, 0), vec![0]);
    }

    #[test]
    fn config_round_trips_and_hashes() {
        let c = EvalConfig::default();
        let back: EvalConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        let other = EvalConfig { seed: 1, ..c.clone() };
        assert_ne!(other.hash(), c.hash());
        assert!(serde_json::from_str::<EvalConfig>(r#"{"steps":5,"sampler":{"kind":"ddpm"},"seed":0,"bogus":1}"#).is_err());
    }
}
