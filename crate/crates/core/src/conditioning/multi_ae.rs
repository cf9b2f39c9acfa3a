use candle_core::{DType, Tensor};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Region, RegionLayout, SketchBitmap};
use crate::error::{ensure_shape, Error, Result};
use crate::nn::{self, Conv2d, Linear, Params, Scope};

pub(crate) const PARAM_ROOT: &str = "multi_ae";
const MAX_STAGES: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultiAeConfig {
    /// Feature dimension of every partial encoder.
    pub latent_dim: usize,
    /// Channel width of the first convolution; doubles per stage up to 8x.
    pub width: usize,
}

impl Default for MultiAeConfig {
    fn default() -> Self {
        Self {
            latent_dim: 512,
            width: 16,
        }
    }
}

impl MultiAeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.width == 0 {
            return Err(Error::InvalidConfig("multi_ae dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Five per-region feature vectors in `[leye, reye, nose, mouth, face]`
/// order.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionFeatureBundle {
    vectors: [Vec<f32>; 5],
}

impl RegionFeatureBundle {
    pub fn new(vectors: [Vec<f32>; 5]) -> Result<Self> {
        let d = vectors[0].len();
        if d == 0 || vectors.iter().any(|v| v.len() != d) {
            return Err(Error::InvalidInput("bundle vectors must share a nonzero length".into()));
        }
        if vectors.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("bundle has non-finite entries".into()));
        }
        Ok(Self { vectors })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            vectors: std::array::from_fn(|_| vec![0.0; dim]),
        }
    }

    pub fn dim(&self) -> usize {
        self.vectors[0].len()
    }

    pub fn vector(&self, region: Region) -> &[f32] {
        &self.vectors[region.index()]
    }

    pub fn concat(&self) -> Vec<f32> {
        self.vectors.concat()
    }

    pub(crate) fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        let v = self.concat();
        let n = v.len();
        Ok(Tensor::from_vec(v, (1, n), &nn::device())?.to_dtype(dtype)?)
    }

    pub(crate) fn from_tensor(t: &Tensor, index: usize) -> Result<Self> {
        let flat = t.get(index)?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
        let d = flat.len() / 5;
        Self::new(std::array::from_fn(|i| flat[i * d..(i + 1) * d].to_vec()))
    }
}

/// One region's autoencoder. Component regions see only their box; the
/// face region sees the full canvas with the boxes zeroed. Decoder output
/// is confined to the same support.
#[derive(Debug, Clone)]
struct PartAe {
    /// `(y0, x0)` of the patch on the canvas.
    origin: (usize, usize),
    canvas: usize,
    /// Unpadded patch size.
    crop: (usize, usize),
    /// Spatial size per stage, input first. The input is zero-padded so every
    /// stage halves exactly.
    sizes: Vec<(usize, usize)>,
    channels: Vec<usize>,
    enc_in: Conv2d,
    enc_down: Vec<Conv2d>,
    enc_fc: Linear,
    dec_fc: Linear,
    dec_up: Vec<Conv2d>,
    dec_out: Conv2d,
    /// `(1, 1, H, W)` face-support mask; only set for the face region.
    support: Option<Tensor>,
}

impl PartAe {
    fn build(
        scope: &mut Scope,
        region: Region,
        layout: &RegionLayout,
        config: &MultiAeConfig,
        dtype: DType,
    ) -> Result<Self> {
        let canvas = layout.canvas();
        let (origin, size) = match layout.component_box(region) {
            Some(b) => ((b.y0, b.x0), (b.height(), b.width())),
            None => ((0, 0), (canvas, canvas)),
        };
        let mut stages = 0;
        let (mut h, mut w) = size;
        while stages < MAX_STAGES && h.min(w) > 4 {
            (h, w) = (h.div_ceil(2), w.div_ceil(2));
            stages += 1;
        }
        let sizes: Vec<_> = (0..=stages).map(|i| (h << (stages - i), w << (stages - i))).collect();
        let channels: Vec<_> = (0..=stages).map(|i| config.width * (1 << i).min(8)).collect();
        let (lh, lw) = sizes[stages];
        let flat = channels[stages] * lh * lw;

        let enc_in = Conv2d::same(&mut scope.pp("enc_in"), 1, config.width)?;
        let enc_down = (0..stages)
            .map(|i| Conv2d::new(&mut scope.pp(format!("enc_down{i}")), channels[i], channels[i + 1], 3, 2, 1))
            .collect::<Result<Vec<_>>>()?;
        let enc_fc = Linear::new(&mut scope.pp("enc_fc"), flat, config.latent_dim)?;
        let dec_fc = Linear::new(&mut scope.pp("dec_fc"), config.latent_dim, flat)?;
        let dec_up = (0..stages)
            .map(|i| Conv2d::same(&mut scope.pp(format!("dec_up{i}")), channels[i + 1], channels[i]))
            .collect::<Result<Vec<_>>>()?;
        let dec_out = Conv2d::same(&mut scope.pp("dec_out"), config.width, 1)?;

        let support = if region == Region::Face {
            let m = layout.region_mask(Region::Face);
            let data: Vec<f32> = m.iter().copied().collect();
            Some(Tensor::from_vec(data, (1, 1, canvas, canvas), &nn::device())?.to_dtype(dtype)?)
        } else {
            None
        };
        Ok(Self {
            origin,
            canvas,
            crop: size,
            sizes,
            channels,
            enc_in,
            enc_down,
            enc_fc,
            dec_fc,
            dec_up,
            dec_out,
            support,
        })
    }

    fn patch(&self, x: &Tensor) -> Result<Tensor> {
        let x = match &self.support {
            Some(mask) => x.broadcast_mul(mask)?,
            None => x.clone(),
        };
        let (h, w) = self.crop;
        let (ph, pw) = self.sizes[0];
        Ok(x
            .narrow(2, self.origin.0, h)?
            .narrow(3, self.origin.1, w)?
            .pad_with_zeros(2, 0, ph - h)?
            .pad_with_zeros(3, 0, pw - w)?)
    }

    fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.enc_in.forward(&self.patch(x)?)?.silu()?;
        for conv in &self.enc_down {
            h = conv.forward(&h)?.silu()?;
        }
        self.enc_fc.forward(&h.flatten_from(1)?)
    }

    /// Decodes features to a full-canvas `(batch, 1, H, W)` contribution.
    fn decode(&self, f: &Tensor) -> Result<Tensor> {
        let b = f.dim(0)?;
        let stages = self.sizes.len() - 1;
        let (lh, lw) = self.sizes[stages];
        let mut h = self
            .dec_fc
            .forward(f)?
            .silu()?
            .reshape((b, self.channels[stages], lh, lw))?;
        for i in (0..stages).rev() {
            let (th, tw) = self.sizes[i];
            h = nn::upsample_nearest(&h, th, tw)?;
            h = self.dec_up[i].forward(&h)?.silu()?;
        }
        let (ch, cw) = self.crop;
        let (y0, x0) = self.origin;
        let out = self
            .dec_out
            .forward(&h)?
            .narrow(2, 0, ch)?
            .narrow(3, 0, cw)?
            .pad_with_zeros(2, y0, self.canvas - y0 - ch)?
            .pad_with_zeros(3, x0, self.canvas - x0 - cw)?;
        match &self.support {
            Some(mask) => Ok(out.broadcast_mul(mask)?),
            None => Ok(out),
        }
    }
}

/// The region-partitioned sketch autoencoder.
#[derive(Debug, Clone)]
pub struct MultiAe {
    config: MultiAeConfig,
    layout: RegionLayout,
    parts: Vec<PartAe>,
    dtype: DType,
}

impl MultiAe {
    fn build_parts(
        scope: &mut Scope,
        layout: &RegionLayout,
        config: &MultiAeConfig,
        dtype: DType,
    ) -> Result<Vec<PartAe>> {
        Region::ALL
            .iter()
            .map(|r| PartAe::build(&mut scope.pp(r.name()), *r, layout, config, dtype))
            .collect()
    }

    pub fn init(
        config: &MultiAeConfig,
        layout: &RegionLayout,
        seed: u64,
        dtype: DType,
    ) -> Result<(Self, Params)> {
        config.validate()?;
        layout.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (parts, params) = nn::params::build_module(PARAM_ROOT, None, dtype, &mut rng, |s| {
            Self::build_parts(s, layout, config, dtype)
        })?;
        Ok((
            Self {
                config: config.clone(),
                layout: layout.clone(),
                parts,
                dtype,
            },
            params,
        ))
    }

    pub fn from_params(
        config: &MultiAeConfig,
        layout: &RegionLayout,
        params: &Params,
        dtype: DType,
    ) -> Result<(Self, Params)> {
        config.validate()?;
        layout.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (parts, params) = nn::params::build_module(PARAM_ROOT, Some(params), dtype, &mut rng, |s| {
            Self::build_parts(s, layout, config, dtype)
        })?;
        Ok((
            Self {
                config: config.clone(),
                layout: layout.clone(),
                parts,
                dtype,
            },
            params,
        ))
    }

    pub fn config(&self) -> &MultiAeConfig {
        &self.config
    }

    pub fn layout(&self) -> &RegionLayout {
        &self.layout
    }

    pub fn bundle_len(&self) -> usize {
        5 * self.config.latent_dim
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        let n = self.layout.canvas();
        ensure_shape(&[1, n, n], &[c, h, w])
    }

    /// `(batch, 1, H, W)` sketches to `(batch, 5 * latent_dim)` features.
    pub fn encode_tensor(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let feats = self
            .parts
            .iter()
            .map(|p| p.encode(x))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&feats, 1)?)
    }

    /// Per-region canvas contributions for a `(batch, 5 * latent_dim)`
    /// bundle.
    pub(crate) fn decode_parts(&self, bundle: &Tensor) -> Result<Vec<Tensor>> {
        let d = self.config.latent_dim;
        let (_, n) = bundle.dims2()?;
        ensure_shape(&[5 * d], &[n])?;
        self.parts
            .iter()
            .enumerate()
            .map(|(i, p)| p.decode(&bundle.narrow(1, i * d, d)?))
            .collect()
    }

    /// Unclamped sum of the five partial reconstructions.
    pub(crate) fn reconstruct_tensor(&self, bundle: &Tensor) -> Result<Tensor> {
        let parts = self.decode_parts(bundle)?;
        let mut sum = parts[0].clone();
        for p in &parts[1..] {
            sum = (sum + p)?;
        }
        Ok(sum)
    }

    /// Batched reconstruction of `(batch, 1, H, W)` sketches, unclamped.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.reconstruct_tensor(&self.encode_tensor(x)?)
    }

    pub fn encode_sketch(&self, s: &SketchBitmap) -> Result<RegionFeatureBundle> {
        let f = self.encode_tensor(&s.to_tensor(self.dtype)?)?;
        RegionFeatureBundle::from_tensor(&f, 0)
    }

    /// Sum of the five decoded patches, clamped to `[0, 1]`.
    pub fn reconstruct_sketch(&self, bundle: &RegionFeatureBundle) -> Result<SketchBitmap> {
        if bundle.dim() != self.config.latent_dim {
            return Err(Error::ShapeMismatch {
                expected: vec![5, self.config.latent_dim],
                got: vec![5, bundle.dim()],
            });
        }
        let r = self.reconstruct_tensor(&bundle.to_tensor(self.dtype)?)?;
        SketchBitmap::from_tensor(&r, 0)
    }

    /// One region's decoded contribution on the full canvas.
    pub fn reconstruct_region(&self, bundle: &RegionFeatureBundle, region: Region) -> Result<Array2<f32>> {
        let parts = self.decode_parts(&bundle.to_tensor(self.dtype)?)?;
        let t = parts[region.index()].get(0)?.get(0)?.to_dtype(DType::F32)?;
        let n = self.layout.canvas();
        Ok(Array2::from_shape_vec((n, n), t.flatten_all()?.to_vec1::<f32>()?).expect("canvas shape"))
    }
}

/// Mean squared error between a sketch and its reconstruction.
pub fn loss_multi_ae(s: &SketchBitmap, reconstruction: &SketchBitmap) -> Result<f64> {
    ensure_shape(&[s.size()], &[reconstruction.size()])?;
    let n = (s.size() * s.size()) as f64;
    Ok(s.as_array()
        .iter()
        .zip(reconstruction.as_array())
        .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
        .sum::<f64>()
        / n)
}

/// Gradient of [`loss_multi_ae`] with respect to the reconstruction.
pub fn loss_multi_ae_grad(s: &SketchBitmap, reconstruction: &SketchBitmap) -> Result<Array2<f64>> {
    ensure_shape(&[s.size()], &[reconstruction.size()])?;
    let n = (s.size() * s.size()) as f64;
    Ok(ndarray::Zip::from(s.as_array())
        .and(reconstruction.as_array())
        .map_collect(|a, b| 2.0 * (*b as f64 - *a as f64) / n))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (MultiAe, RegionLayout) {
        let layout = RegionLayout::default_for_canvas(32).unwrap();
        let cfg = MultiAeConfig {
            latent_dim: 16,
            width: 4,
        };
        (MultiAe::init(&cfg, &layout, 7, DType::F32).unwrap().0, layout)
    }

    fn sketch_with(points: &[(usize, usize)]) -> SketchBitmap {
        let mut a = Array2::zeros((32, 32));
        for &(x, y) in points {
            a[[y, x]] = 1.0;
        }
        SketchBitmap::new(a).unwrap()
    }

    #[test]
    fn deterministic_encoding() {
        let (ae, _) = tiny();
        let s = sketch_with(&[(3, 3), (10, 12), (16, 26)]);
        let a = ae.encode_sketch(&s).unwrap();
        assert_eq!(a, ae.encode_sketch(&s).unwrap());
        assert_eq!(a.dim(), 16);
        assert_eq!(a.concat().len(), 80);
    }

    #[test]
    fn mouth_edit_changes_only_mouth_vector() {
        let (ae, layout) = tiny();
        let b = layout.component_box(Region::Mouth).unwrap();
        let base = sketch_with(&[(3, 3), (10, 12)]);
        let edited = sketch_with(&[(3, 3), (10, 12), (b.x0 + 1, b.y0 + 1)]);
        let (f0, f1) = (ae.encode_sketch(&base).unwrap(), ae.encode_sketch(&edited).unwrap());
        for r in Region::ALL {
            assert_eq!(f0.vector(r) == f1.vector(r), r != Region::Mouth, "{r:?}");
        }
    }

    #[test]
    fn decoders_respect_region_support() {
        let (ae, layout) = tiny();
        let s = sketch_with(&[(12, 20), (5, 5)]);
        let bundle = ae.encode_sketch(&s).unwrap();
        let nose = ae.reconstruct_region(&bundle, Region::Nose).unwrap();
        let b = layout.component_box(Region::Nose).unwrap();
        for ((y, x), v) in nose.indexed_iter() {
            if !b.contains(x, y) {
                assert_eq!(*v, 0.0);
            }
        }
        let face = ae.reconstruct_region(&bundle, Region::Face).unwrap();
        for ((y, x), v) in face.indexed_iter() {
            if layout.region_at(x, y) != Region::Face {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn zero_bundle_decodes_to_finite_sketch() {
        let (ae, _) = tiny();
        let s = ae.reconstruct_sketch(&RegionFeatureBundle::zeros(16)).unwrap();
        assert!(s.as_array().iter().all(|v| v.is_finite()));
        assert!(ae.reconstruct_sketch(&RegionFeatureBundle::zeros(8)).is_err());
    }

    #[test]
    fn loss_values() {
        let ink = SketchBitmap::new(Array2::ones((2, 2))).unwrap();
        let blank = SketchBitmap::blank(2);
        assert_eq!(loss_multi_ae(&ink, &ink).unwrap(), 0.0);
        assert_eq!(loss_multi_ae(&ink, &blank).unwrap(), 1.0);
        assert!(loss_multi_ae(&ink, &SketchBitmap::blank(3)).is_err());
    }

    #[test]
    fn loss_gradient_matches_central_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut gen = || SketchBitmap::new(Array2::from_shape_fn((4, 4), |_| rng.random_range(51u8..205) as f32 / 256.0)).unwrap();
        let (s, r) = (gen(), gen());
        let g = loss_multi_ae_grad(&s, &r).unwrap();
        // Grid values and a power-of-two step keep the perturbation exact in f32.
        let h = 1.0 / 64.0f32;
        for y in 0..4 {
            for x in 0..4 {
                let at = |d: f32| {
                    let mut a = r.as_array().clone();
                    a[[y, x]] += d;
                    loss_multi_ae(&s, &SketchBitmap::new(a).unwrap()).unwrap()
                };
                let fd = (at(h) - at(-h)) / (2.0 * h as f64);
                assert!((fd - g[[y, x]]).abs() <= 1e-5 * g[[y, x]].abs().max(1e-2), "{fd} vs {}", g[[y, x]]);
            }
        }
    }

    #[test]
    fn loss_equals_direct_sum_of_parts() {
        let (ae, _) = tiny();
        let s = sketch_with(&[(3, 3), (10, 12), (16, 26), (20, 12)]);
        let bundle = ae.encode_sketch(&s).unwrap();
        let via_api = loss_multi_ae(&s, &ae.reconstruct_sketch(&bundle).unwrap()).unwrap();
        let mut sum = Array2::<f32>::zeros((32, 32));
        for r in Region::ALL {
            sum += &ae.reconstruct_region(&bundle, r).unwrap();
        }
        let direct = ndarray::Zip::from(&sum)
            .and(s.as_array())
            .fold(0.0f64, |acc, r, x| acc + (r.clamp(0.0, 1.0) as f64 - *x as f64).powi(2))
            / 1024.0;
        assert!((via_api - direct).abs() < 1e-9, "{via_api} vs {direct}");
    }
}
