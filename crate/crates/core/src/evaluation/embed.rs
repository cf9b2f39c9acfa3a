use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::FeatureSet;
use crate::error::{Error, Result};
use crate::image_ae::ImageTensor;

/// Maps an image to a fixed-length feature vector.
pub trait Embedder: Send + Sync {
    /// Recorded in reports so numbers from different embedders are never
    /// compared by accident.
    fn identity(&self) -> String;
    fn dim(&self) -> usize;
    fn embed(&self, image: &ImageTensor) -> Result<Vec<f64>>;
}

/// An affine map over flattened RGB pixels.
#[derive(Debug, Clone)]
pub struct LinearEmbedder {
    name: String,
    input_size: usize,
    weights: Array2<f64>,
    bias: Array1<f64>,
}

#[derive(Deserialize)]
struct WeightsFile {
    name: String,
    input_size: usize,
    dim: usize,
    weights: Vec<f64>,
    #[serde(default)]
    bias: Option<Vec<f64>>,
}

impl LinearEmbedder {
    /// Fixed Gaussian projection scaled by `1/sqrt(inputs)`.
    pub fn random_projection(dim: usize, input_size: usize, seed: u64) -> Result<Self> {
        if dim == 0 || input_size == 0 {
            return Err(Error::InvalidConfig("embedder dim and input size must be positive".into()));
        }
        let inputs = 3 * input_size * input_size;
        let scale = 1.0 / (inputs as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = Array2::from_shape_simple_fn((dim, inputs), || {
            let v: f64 = StandardNormal.sample(&mut rng);
            v * scale
        });
        Ok(Self {
            name: format!("random-projection(dim={dim}, size={input_size}, seed={seed})"),
            input_size,
            weights,
            bias: Array1::zeros(dim),
        })
    }

    /// Loads a JSON file with `name`, `input_size`, `dim`, row-major
    /// `weights` of length `dim * 3 * input_size^2` and optional `bias`.
    pub fn from_file(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let f: WeightsFile = serde_json::from_slice(&std::fs::read(path)?)?;
        let inputs = 3 * f.input_size * f.input_size;
        if f.dim == 0 || f.weights.len() != f.dim * inputs {
            return Err(Error::InvalidConfig(format!(
                "{}: expected {} weights for dim {}, found {}",
                path.display(),
                f.dim * inputs,
                f.dim,
                f.weights.len()
            )));
        }
        let bias = f.bias.unwrap_or_else(|| vec![0.0; f.dim]);
        if bias.len() != f.dim {
            return Err(Error::InvalidConfig(format!("{}: bias length {}", path.display(), bias.len())));
        }
        Ok(Self {
            name: f.name,
            input_size: f.input_size,
            weights: Array2::from_shape_vec((f.dim, inputs), f.weights).expect("length checked"),
            bias: Array1::from(bias),
        })
    }
}

impl Embedder for LinearEmbedder {
    fn identity(&self) -> String {
        self.name.clone()
    }

    fn dim(&self) -> usize {
        self.weights.nrows()
    }

    fn embed(&self, image: &ImageTensor) -> Result<Vec<f64>> {
        if image.size() != self.input_size {
            return Err(Error::InvalidInput(format!(
                "embedder expects {0}x{0} images, got {1}x{1}",
                self.input_size,
                image.size()
            )));
        }
        let x: Array1<f64> = image.as_array().iter().map(|v| *v as f64).collect();
        Ok((self.weights.dot(&x) + &self.bias).to_vec())
    }
}

/// Which embedder computes FID features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EmbedderConfig {
    RandomProjection { dim: usize, seed: u64 },
    External { weights: PathBuf },
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig::RandomProjection { dim: 16, seed: 0 }
    }
}

impl EmbedderConfig {
    pub fn build(&self, input_size: usize) -> Result<Box<dyn Embedder>> {
        Ok(match self {
            EmbedderConfig::RandomProjection { dim, seed } => {
                Box::new(LinearEmbedder::random_projection(*dim, input_size, *seed)?)
            }
            EmbedderConfig::External { weights } => Box::new(LinearEmbedder::from_file(weights)?),
        })
    }
}

/// One feature row per image.
pub fn embed_for_fid(images: &[ImageTensor], embedder: &dyn Embedder) -> Result<FeatureSet> {
    if images.is_empty() {
        return Err(Error::InvalidInput("no images to embed".into()));
    }
    let d = embedder.dim();
    let mut out = Array2::zeros((images.len(), d));
    for (i, img) in images.iter().enumerate() {
        let v = embedder.embed(img)?;
        if v.len() != d {
            return Err(Error::ShapeMismatch {
                expected: vec![d],
                got: vec![v.len()],
            });
        }
        out.row_mut(i).assign(&Array1::from(v));
    }
    Ok(out)
}

/// Perceptual distance in the feature space of an external embedder:
/// mean squared difference of unit-normalized features. There is no
/// built-in default because meaningful weights cannot be shipped.
pub fn perceptual_distance(a: &ImageTensor, b: &ImageTensor, embedder: &dyn Embedder) -> Result<f64> {
    let unit = |v: Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.into_iter().map(move |x| x / n)
    };
    let (fa, fb) = (embedder.embed(a)?, embedder.embed(b)?);
    let d = fa.len() as f64;
    Ok(unit(fa).zip(unit(fb)).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::fid_score;
    use ndarray::Array3;

    fn images(n: usize, seed: u64, noise: f32) -> Vec<ImageTensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                ImageTensor::new(Array3::from_shape_fn((3, 8, 8), |(c, y, x)| {
                    let base = ((x + y + c + i) % 5) as f32 / 5.0 - 0.5;
                    let e: f32 = StandardNormal.sample(&mut rng);
                    (base + noise * e).clamp(-1.0, 1.0)
                }))
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn deterministic_with_configured_dim() {
        let e = EmbedderConfig::RandomProjection { dim: 12, seed: 4 }.build(8).unwrap();
        let imgs = images(3, 1, 0.1);
        let a = embed_for_fid(&imgs, e.as_ref()).unwrap();
        let b = embed_for_fid(&imgs, e.as_ref()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), (3, 12));
        assert!(embed_for_fid(&[], e.as_ref()).is_err());
        assert!(e.embed(&ImageTensor::filled(16, [0.0; 3])).is_err());
    }

    #[test]
    fn fid_grows_with_corruption() {
        let e = LinearEmbedder::random_projection(8, 8, 0).unwrap();
        let clean = embed_for_fid(&images(200, 1, 0.05), &e).unwrap();
        assert!(fid_score(&clean, &clean).unwrap() < 1e-6);
        let mut prev = 0.0;
        for level in 1..=5 {
            let noisy = embed_for_fid(&images(200, 2, 0.05 + 0.2 * level as f32), &e).unwrap();
            let f = fid_score(&clean, &noisy).unwrap();
            assert!(f > prev, "level {level}: {f} <= {prev}");
            prev = f;
        }
    }

    #[test]
    fn external_weights() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("none.json");
        assert!(matches!(
            EmbedderConfig::External { weights: missing }.build(2),
            Err(Error::MissingArtifact(_))
        ));
        let path = dir.path().join("w.json");
        let w: Vec<f64> = (0..24).map(|i| i as f64).collect();
        std::fs::write(
            &path,
            serde_json::json!({"name": "ext", "input_size": 2, "dim": 2, "weights": w, "bias": [1.0, 0.0]}).to_string(),
        )
        .unwrap();
        let e = LinearEmbedder::from_file(&path).unwrap();
        assert_eq!(e.identity(), "ext");
        let v = e.embed(&ImageTensor::filled(2, [1.0; 3])).unwrap();
        assert_eq!(v, vec![(0..12).sum::<i32>() as f64 + 1.0, (12..24).sum::<i32>() as f64]);
        let img = ImageTensor::filled(2, [0.5; 3]);
        assert_eq!(perceptual_distance(&img, &img, &e).unwrap(), 0.0);
        std::fs::write(&path, r#"{"name":"x","input_size":2,"dim":2,"weights":[1.0]}"#).unwrap();
        assert!(matches!(LinearEmbedder::from_file(&path), Err(Error::InvalidConfig(_))));
    }
}
