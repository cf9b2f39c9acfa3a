use image::{imageops, ImageBuffer, Luma};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::conditioning::SketchBitmap;
use crate::error::{Error, Result};
use crate::image_ae::ImageTensor;

type GrayF = ImageBuffer<Luma<f32>, Vec<f32>>;

/// Coarseness of an extracted edge map, set by the resolution the extractor
/// runs at relative to the canvas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AbstractionLevel {
    /// Twice the canvas (512 for a 256 canvas).
    Low,
    /// The canvas itself.
    Mid,
    /// Half the canvas.
    High,
}

impl AbstractionLevel {
    pub const ALL: [AbstractionLevel; 3] = [Self::Low, Self::Mid, Self::High];

    pub fn name(self) -> &'static str {
        match self {
            Self::Low => "low",
            Self::Mid => "mid",
            Self::High => "high",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Extraction resolution for a given canvas.
    pub fn resolution(self, canvas: usize) -> usize {
        match self {
            Self::Low => canvas * 2,
            Self::Mid => canvas,
            Self::High => (canvas / 2).max(1),
        }
    }
}

impl std::fmt::Display for AbstractionLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for AbstractionLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown abstraction level {s:?}")))
    }
}

/// Difference-of-Gaussians parameters. `sigma` is in pixels of the level's
/// own resolution, so coarser levels see a wider blur in canvas terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeConfig {
    pub sigma: f64,
    /// Ratio of the wide to the narrow Gaussian.
    pub k: f64,
    /// Responses below this (in luminance units) never count as ink.
    pub min_response: f64,
}

impl Default for EdgeConfig {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            k: 1.6,
            min_response: 0.02,
        }
    }
}

impl EdgeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.k > 1.0 && self.min_response >= 0.0) {
            return Err(Error::InvalidConfig(format!("bad edge config {self:?}")));
        }
        Ok(())
    }
}

/// Replaces background with white: `out = m * x + (1 - m) * 1`.
pub fn remove_background(image: &ImageTensor, matte: &Array2<f32>) -> Result<ImageTensor> {
    let n = image.size();
    if matte.dim() != (n, n) {
        return Err(Error::ShapeMismatch {
            expected: vec![n, n],
            got: matte.shape().to_vec(),
        });
    }
    if matte.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidInput("matte values must be within [0, 1]".into()));
    }
    let x = image.as_array();
    let out = Array3::from_shape_fn((3, n, n), |(c, y, xx)| {
        let m = matte[[y, xx]];
        m * x[[c, y, xx]] + (1.0 - m)
    });
    ImageTensor::new(out)
}

fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let r = (3.0 * sigma).ceil().max(1.0) as i64;
    let w: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| (v / s) as f32).collect()
}

/// Separable Gaussian blur with clamp-to-edge borders.
pub(crate) fn gaussian_blur(img: &Array2<f32>, sigma: f64) -> Array2<f32> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w) = img.dim();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let horiz: Array2<f32> = Array2::from_shape_fn((h, w), |(y, x)| {
        k.iter()
            .enumerate()
            .map(|(i, kv)| kv * img[[y, clamp(x as isize + i as isize - r, w)]])
            .sum::<f32>()
    });
    Array2::from_shape_fn((h, w), |(y, x)| {
        k.iter()
            .enumerate()
            .map(|(i, kv)| kv * horiz[[clamp(y as isize + i as isize - r, h), x]])
            .sum::<f32>()
    })
}

/// Otsu's threshold over `values` (assumed in `[0, max]`), 256 bins.
pub(crate) fn otsu_threshold(values: &[f32]) -> f32 {
    let max = values.iter().copied().fold(0f32, f32::max);
    if max <= 0.0 || values.is_empty() {
        return 0.0;
    }
    let mut hist = [0usize; 256];
    for &v in values {
        let b = ((v / max) * 255.0).round().clamp(0.0, 255.0) as usize;
        hist[b] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, c)| i as f64 * *c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_t) = (-1.0, 0usize);
    for (t, &c) in hist.iter().enumerate() {
        w0 += c as f64;
        sum0 += t as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best {
            best = between;
            best_t = t;
        }
    }
    (best_t as f32 + 0.5) / 255.0 * max
}

/// Max-pools when shrinking so no stroke is lost; nearest when growing.
fn to_canvas(binary: &Array2<bool>, canvas: usize) -> Array2<bool> {
    let n = binary.dim().0;
    Array2::from_shape_fn((canvas, canvas), |(y, x)| {
        if n >= canvas {
            let f = n / canvas;
            (0..f).any(|dy| (0..f).any(|dx| binary[[y * f + dy, x * f + dx]]))
        } else {
            binary[[y * n / canvas, x * n / canvas]]
        }
    })
}

/// Zhang-Suen thinning to one-pixel-wide strokes.
pub(crate) fn thin(mut img: Array2<bool>) -> Array2<bool> {
    let (h, w) = img.dim();
    let at = |img: &Array2<bool>, y: isize, x: isize| -> u8 {
        (y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && img[[y as usize, x as usize]]) as u8
    };
    loop {
        let mut changed = false;
        for pass in 0..2 {
            let mut remove = Vec::new();
            for y in 0..h as isize {
                for x in 0..w as isize {
                    if at(&img, y, x) == 0 {
                        continue;
                    }
                    // P2..P9 clockwise from north.
                    let p = [
                        at(&img, y - 1, x),
                        at(&img, y - 1, x + 1),
                        at(&img, y, x + 1),
                        at(&img, y + 1, x + 1),
                        at(&img, y + 1, x),
                        at(&img, y + 1, x - 1),
                        at(&img, y, x - 1),
                        at(&img, y - 1, x - 1),
                    ];
                    let b: u8 = p.iter().sum();
                    let a = (0..8).filter(|&i| p[i] == 0 && p[(i + 1) % 8] == 1).count();
                    let (c1, c2) = if pass == 0 {
                        (p[0] * p[2] * p[4], p[2] * p[4] * p[6])
                    } else {
                        (p[0] * p[2] * p[6], p[0] * p[4] * p[6])
                    };
                    if (2..=6).contains(&b) && a == 1 && c1 == 0 && c2 == 0 {
                        remove.push((y as usize, x as usize));
                    }
                }
            }
            changed |= !remove.is_empty();
            for (y, x) in remove {
                img[[y, x]] = false;
            }
        }
        if !changed {
            return img;
        }
    }
}

fn to_gray(a: &Array2<f32>) -> GrayF {
    let (h, w) = a.dim();
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([a[[y as usize, x as usize]]]))
}

fn from_gray(g: &GrayF) -> Array2<f32> {
    let (w, h) = g.dimensions();
    Array2::from_shape_fn((h as usize, w as usize), |(y, x)| g.get_pixel(x as u32, y as u32)[0])
}

fn resize(a: &Array2<f32>, n: usize) -> Array2<f32> {
    if a.dim() == (n, n) {
        return a.clone();
    }
    from_gray(&imageops::resize(&to_gray(a), n as u32, n as u32, imageops::FilterType::Triangle))
}

fn luminance(image: &ImageTensor) -> Array2<f32> {
    let n = image.size();
    Array2::from_shape_vec((n, n), image.luminance()).expect("square luminance")
}

/// Edge map at `level`, returned on a `canvas`-sized grid. The input image
/// may have any square size.
pub fn extract_edges(image: &ImageTensor, level: AbstractionLevel, canvas: usize) -> Result<SketchBitmap> {
    extract_edges_with(image, level, canvas, &EdgeConfig::default())
}

pub fn extract_edges_with(
    image: &ImageTensor,
    level: AbstractionLevel,
    canvas: usize,
    config: &EdgeConfig,
) -> Result<SketchBitmap> {
    config.validate()?;
    if canvas < 2 {
        return Err(Error::InvalidInput(format!("canvas {canvas} too small")));
    }
    let res = level.resolution(canvas);
    let gray = resize(&luminance(image), res);
    let sigma = config.sigma;
    let narrow = gaussian_blur(&gray, sigma);
    let wide = gaussian_blur(&gray, sigma * config.k);
    // Positive where a pixel is darker than its surround: the dark side of
    // an edge, which is where a pen stroke would go.
    let response = (&wide - &narrow).mapv(|v| v.max(0.0));
    // Otsu on the square root: strong hair or iris edges otherwise pull the
    // threshold above the face outline.
    let flat: Vec<f32> = response.iter().map(|v| v.sqrt()).collect();
    let threshold = otsu_threshold(&flat).powi(2).max(config.min_response as f32);
    let binary = response.mapv(|v| v > threshold);
    let back = to_canvas(&binary, canvas);
    SketchBitmap::new(thin(back).mapv(|v| v as u8 as f32))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn disc_image(n: usize, r: f32) -> ImageTensor {
        let c = n as f32 / 2.0;
        ImageTensor::new(Array3::from_shape_fn((3, n, n), |(_, y, x)| {
            let d = ((x as f32 + 0.5 - c).powi(2) + (y as f32 + 0.5 - c).powi(2)).sqrt();
            if d < r {
                -0.8
            } else {
                0.9
            }
        }))
        .unwrap()
    }

    #[test]
    fn background_removal_cases() {
        let img = disc_image(8, 3.0);
        let ones = Array2::ones((8, 8));
        assert_eq!(remove_background(&img, &ones).unwrap(), img);
        let white = remove_background(&img, &Array2::zeros((8, 8))).unwrap();
        assert!(white.as_array().iter().all(|v| *v == 1.0));
        let checker = Array2::from_shape_fn((8, 8), |(y, x)| if (x + y) % 2 == 0 { 1.0 } else { 0.25 });
        let out = remove_background(&img, &checker).unwrap();
        for ((c, y, x), v) in out.as_array().indexed_iter() {
            let m = checker[[y, x]];
            let expect = m * img.as_array()[[c, y, x]] + (1.0 - m) * 1.0;
            assert!((v - expect).abs() < 1e-7);
        }
        assert!(remove_background(&img, &Array2::ones((4, 4))).is_err());
        assert!(remove_background(&img, &Array2::from_elem((8, 8), 1.5)).is_err());
    }

    #[test]
    fn kernel_is_normalized_and_symmetric() {
        for s in [0.5, 1.0, 2.3] {
            let k = gaussian_kernel(s);
            assert!((k.iter().sum::<f32>() - 1.0).abs() < 1e-6);
            for i in 0..k.len() / 2 {
                assert_eq!(k[i], k[k.len() - 1 - i]);
            }
        }
    }

    #[test]
    fn otsu_splits_bimodal_data() {
        let mut v = vec![0.1f32; 100];
        v.extend(std::iter::repeat_n(0.9f32, 50));
        let t = otsu_threshold(&v);
        assert!(t > 0.1 && t < 0.9, "{t}");
        assert_eq!(otsu_threshold(&[0.0; 10]), 0.0);
    }

    #[test]
    fn constant_image_gives_blank_sketch() {
        for level in AbstractionLevel::ALL {
            let img = ImageTensor::filled(32, [0.3, -0.2, 0.5]);
            assert_eq!(extract_edges(&img, level, 32).unwrap().ink_count(), 0);
        }
    }

    #[test]
    fn extraction_is_deterministic_and_sized() {
        let img = disc_image(64, 14.0);
        for level in AbstractionLevel::ALL {
            let a = extract_edges(&img, level, 32).unwrap();
            assert_eq!(a.size(), 32);
            assert!(a.ink_count() > 0, "{level}");
            assert_eq!(a, extract_edges(&img, level, 32).unwrap());
        }
    }

    #[test]
    fn ink_sits_on_the_dark_side_of_the_boundary() {
        let img = disc_image(32, 8.0);
        let s = extract_edges(&img, AbstractionLevel::Mid, 32).unwrap();
        for ((y, x), v) in s.as_array().indexed_iter() {
            if *v > 0.5 {
                let d = ((x as f32 + 0.5 - 16.0).powi(2) + (y as f32 + 0.5 - 16.0).powi(2)).sqrt();
                assert!(d < 8.0 && d > 4.0, "ink at distance {d}");
            }
        }
    }

    #[test]
    fn level_names_round_trip() {
        for l in AbstractionLevel::ALL {
            assert_eq!(l.name().parse::<AbstractionLevel>().unwrap(), l);
        }
        assert!("extreme".parse::<AbstractionLevel>().is_err());
        assert_eq!(AbstractionLevel::Low.resolution(256), 512);
        assert_eq!(AbstractionLevel::High.resolution(256), 128);
    }
}
