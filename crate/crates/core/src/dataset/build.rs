use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{extract_edges_with, remove_background, sra_recombine, AbstractionLevel, EdgeConfig, SraProvenance};
use crate::conditioning::{RegionLayout, SketchBitmap};
use crate::error::{Error, Result};
use crate::image_ae::ImageTensor;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// Side of stored images and sketches.
    pub canvas: usize,
    /// Seamed variants per image.
    pub sra_variants: usize,
    /// Train / val / test fractions.
    pub split: [f64; 3],
    #[serde(default)]
    pub edges: EdgeConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            canvas: 256,
            sra_variants: 2,
            split: [0.8, 0.1, 0.1],
            edges: EdgeConfig::default(),
        }
    }
}

impl DatasetConfig {
    pub fn toy() -> Self {
        Self {
            canvas: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.canvas < 8 || self.canvas % 4 != 0 {
            return Err(Error::InvalidConfig(format!(
                "canvas {} must be a multiple of 4 and at least 8",
                self.canvas
            )));
        }
        let sum: f64 = self.split.iter().sum();
        if self.split.iter().any(|f| !(0.0..=1.0).contains(f)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!("split {:?} must be fractions summing to 1", self.split)));
        }
        self.edges.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelSketches {
    pub low: String,
    pub mid: String,
    pub high: String,
}

impl LevelSketches {
    pub fn get(&self, level: AbstractionLevel) -> &str {
        match level {
            AbstractionLevel::Low => &self.low,
            AbstractionLevel::Mid => &self.mid,
            AbstractionLevel::High => &self.high,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SraSketch {
    pub path: String,
    pub provenance: SraProvenance,
}

/// One image with its sketches. Paths are relative to the dataset root.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairedSample {
    pub id: String,
    pub image: String,
    pub sketches: LevelSketches,
    pub sra: Vec<SraSketch>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            _ => Err(Error::InvalidInput(format!("unknown split {s:?}"))),
        }
    }
}

impl Split {
    pub fn ids(&self, which: SplitName) -> &[String] {
        match which {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub config: DatasetConfig,
    pub layout: RegionLayout,
    pub records: Vec<PairedSample>,
    pub split: Split,
}

impl DatasetManifest {
    pub fn canvas(&self) -> usize {
        self.config.canvas
    }

    pub fn record(&self, id: &str) -> Option<&PairedSample> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        if !path.exists() {
            return Err(Error::MissingArtifact(path));
        }
        let m: Self = serde_json::from_slice(&std::fs::read(&path)?)?;
        if m.version != 1 {
            return Err(Error::InvalidInput(format!("unsupported manifest version {}", m.version)));
        }
        m.config.validate()?;
        Ok(m)
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        std::fs::write(root.join(MANIFEST_FILE), bytes)?;
        Ok(())
    }
}

/// Seeded shuffle of `ids`, cut at rounded fractions. Each part is sorted.
pub fn split_ids(ids: &[String], fractions: [f64; 3], seed: u64) -> Split {
    let mut shuffled = ids.to_vec();
    shuffled.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    shuffled.shuffle(&mut rng);
    let n = shuffled.len();
    let n_train = ((n as f64 * fractions[0]).round() as usize).min(n);
    let n_val = ((n as f64 * fractions[1]).round() as usize).min(n - n_train);
    let mut test = shuffled.split_off(n_train + n_val);
    let mut val = shuffled.split_off(n_train);
    let mut train = shuffled;
    train.sort();
    val.sort();
    test.sort();
    Split { train, val, test }
}

fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::MissingArtifact(dir.to_path_buf()));
    }
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    out.sort();
    Ok(out)
}

fn load_matte(path: &Path, size: u32) -> Result<Array2<f32>> {
    let m = image::open(path)?.to_luma8();
    let m = if m.dimensions() != (size, size) {
        imageops::resize(&m, size, size, FilterType::Triangle)
    } else {
        m
    };
    Ok(Array2::from_shape_fn((size as usize, size as usize), |(y, x)| {
        m.get_pixel(x as u32, y as u32)[0] as f32 / 255.0
    }))
}

/// Everything derived from one source photo.
pub struct ProcessedImage {
    /// Background-cleaned image at canvas size.
    pub image: ImageTensor,
    /// Sketches at low, mid, high.
    pub levels: [SketchBitmap; 3],
    pub sra: Vec<(SketchBitmap, SraProvenance)>,
}

/// Cleans one image and extracts its sketches. `source` keeps its own
/// resolution for extraction so the low level can use real detail.
pub fn process_image(
    source: &ImageTensor,
    matte: Option<&Array2<f32>>,
    config: &DatasetConfig,
    layout: &RegionLayout,
    sra_seeds: &[u64],
) -> Result<ProcessedImage> {
    let clean = match matte {
        Some(m) => remove_background(source, m)?,
        None => source.clone(),
    };
    let levels = AbstractionLevel::ALL.map(|l| extract_edges_with(&clean, l, config.canvas, &config.edges));
    let [a, b, c] = levels;
    let levels = [a?, b?, c?];
    let sra = sra_seeds
        .iter()
        .map(|s| sra_recombine(&levels, layout, *s))
        .collect::<Result<Vec<_>>>()?;
    let n = config.canvas as u32;
    let rgb = clean.to_rgb8();
    let image = if rgb.dimensions() != (n, n) {
        ImageTensor::from_rgb8(&imageops::resize(&rgb, n, n, FilterType::Triangle))?
    } else {
        clean
    };
    Ok(ProcessedImage { image, levels, sra })
}

/// Builds a paired dataset under `out_dir` from the PNGs in `image_dir`.
/// Mattes, when given, are matched by file name; images without a readable
/// matte are skipped.
pub fn build_dataset(
    image_dir: &Path,
    matte_dir: Option<&Path>,
    out_dir: &Path,
    config: &DatasetConfig,
    seed: u64,
) -> Result<DatasetManifest> {
    config.validate()?;
    let layout = RegionLayout::default_for_canvas(config.canvas)?;
    let files = list_pngs(image_dir)?;
    for sub in ["images", "sketches/low", "sketches/mid", "sketches/high", "sketches/sra"] {
        std::fs::create_dir_all(out_dir.join(sub))?;
    }
    let mut records = Vec::new();
    for (index, path) in files.iter().enumerate() {
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let loaded = (|| -> Result<ProcessedImage> {
            let rgb = image::open(path)?.to_rgb8();
            let (w, h) = rgb.dimensions();
            if w != h {
                return Err(Error::InvalidInput(format!("image is {w}x{h}, expected square")));
            }
            let source = ImageTensor::from_rgb8(&rgb)?;
            let matte = match matte_dir {
                Some(d) => Some(load_matte(&d.join(path.file_name().expect("file name")), w)?),
                None => None,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(index as u64);
            let seeds: Vec<u64> = (0..config.sra_variants).map(|_| rng.random()).collect();
            process_image(&source, matte.as_ref(), config, &layout, &seeds)
        })();
        let processed = match loaded {
            Ok(p) => p,
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                continue;
            }
        };
        let image_rel = format!("images/{id}.png");
        processed.image.to_rgb8().save(out_dir.join(&image_rel))?;
        let mut level_paths: BTreeMap<AbstractionLevel, String> = BTreeMap::new();
        for (level, sketch) in AbstractionLevel::ALL.iter().zip(&processed.levels) {
            let rel = format!("sketches/{}/{id}.png", level.name());
            sketch.to_luma8().save(out_dir.join(&rel))?;
            level_paths.insert(*level, rel);
        }
        let mut sra = Vec::new();
        for (k, (sketch, provenance)) in processed.sra.into_iter().enumerate() {
            let rel = format!("sketches/sra/{id}_{k}.png");
            sketch.to_luma8().save(out_dir.join(&rel))?;
            sra.push(SraSketch { path: rel, provenance });
        }
        records.push(PairedSample {
            id,
            image: image_rel,
            sketches: LevelSketches {
                low: level_paths.remove(&AbstractionLevel::Low).expect("low"),
                mid: level_paths.remove(&AbstractionLevel::Mid).expect("mid"),
                high: level_paths.remove(&AbstractionLevel::High).expect("high"),
            },
            sra,
        });
    }
    if records.is_empty() {
        return Err(Error::EmptyDataset(format!("no usable images in {}", image_dir.display())));
    }
    let ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
    let manifest = DatasetManifest {
        version: 1,
        seed,
        config: config.clone(),
        layout,
        split: split_ids(&ids, config.split, seed),
        records,
    };
    manifest.save(out_dir)?;
    Ok(manifest)
}

/// A dataset split held in memory.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub id: String,
    pub image: ImageTensor,
    /// Low, mid, high.
    pub levels: [SketchBitmap; 3],
    pub sra: Vec<SketchBitmap>,
}

impl LoadedSample {
    pub fn level(&self, level: AbstractionLevel) -> &SketchBitmap {
        &self.levels[level.index()]
    }
}

fn load_sketch(root: &Path, rel: &str) -> Result<SketchBitmap> {
    let path = root.join(rel);
    if !path.exists() {
        return Err(Error::MissingArtifact(path));
    }
    SketchBitmap::from_luma8(&image::open(&path)?.to_luma8())
}

pub fn load_samples(root: &Path, manifest: &DatasetManifest, ids: &[String]) -> Result<Vec<LoadedSample>> {
    ids.iter()
        .map(|id| {
            let rec = manifest
                .record(id)
                .ok_or_else(|| Error::InvalidInput(format!("id {id} not in manifest")))?;
            let img_path = root.join(&rec.image);
            if !img_path.exists() {
                return Err(Error::MissingArtifact(img_path));
            }
            let image = ImageTensor::from_rgb8(&image::open(&img_path)?.to_rgb8())?;
            let levels = [
                load_sketch(root, &rec.sketches.low)?,
                load_sketch(root, &rec.sketches.mid)?,
                load_sketch(root, &rec.sketches.high)?,
            ];
            let sra = rec
                .sra
                .iter()
                .map(|s| load_sketch(root, &s.path))
                .collect::<Result<Vec<_>>>()?;
            Ok(LoadedSample {
                id: id.clone(),
                image,
                levels,
                sra,
            })
        })
        .collect()
}

pub fn load_split(root: &Path, which: SplitName) -> Result<(DatasetManifest, Vec<LoadedSample>)> {
    let manifest = DatasetManifest::load(root)?;
    let ids = manifest.split.ids(which).to_vec();
    let samples = load_samples(root, &manifest, &ids)?;
    Ok((manifest, samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_scale_split_sizes() {
        let ids: Vec<String> = (0..10_000).map(|i| format!("{i:05}")).collect();
        let s = split_ids(&ids, [0.8, 0.1, 0.1], 3);
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8000, 1000, 1000));
    }

    proptest::proptest! {
        #[test]
        fn splits_partition_ids(n in 0usize..300, seed in 0u64..100, a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let (a, b) = (a.min(b), a.max(b));
            let ids: Vec<String> = (0..n).map(|i| format!("{i}")).collect();
            let s = split_ids(&ids, [a, b - a, 1.0 - b], seed);
            let mut all: Vec<String> = s.train.iter().chain(&s.val).chain(&s.test).cloned().collect();
            all.sort();
            let mut want = ids.clone();
            want.sort();
            proptest::prop_assert_eq!(all, want);
        }
    }

    #[test]
    fn config_validation() {
        assert!(DatasetConfig::default().validate().is_ok());
        let bad = DatasetConfig {
            split: [0.5, 0.1, 0.1],
            ..DatasetConfig::toy()
        };
        assert!(bad.validate().is_err());
        let bad = DatasetConfig {
            canvas: 30,
            ..DatasetConfig::toy()
        };
        assert!(bad.validate().is_err());
    }
}
