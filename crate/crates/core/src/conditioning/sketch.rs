use candle_core::{DType, Tensor};
use ndarray::{s, Array2, Array3};

use super::{Region, RegionLayout};
use crate::error::{Error, Result};
use crate::nn;

/// Single-channel sketch, `1.0` = ink. On disk sketches are black strokes on
/// white, so PNG luma `v` maps to ink `1 - v / 255`.
#[derive(Debug, Clone, PartialEq)]
pub struct SketchBitmap(Array2<f32>);

impl SketchBitmap {
    pub fn new(data: Array2<f32>) -> Result<Self> {
        let (h, w) = data.dim();
        if h != w || h == 0 {
            return Err(Error::InvalidInput(format!("sketch must be square, got {h}x{w}")));
        }
        if data.iter().any(|v| !v.is_finite() || *v < -1e-6 || *v > 1.0 + 1e-6) {
            return Err(Error::InvalidInput("sketch values must lie in [0, 1]".into()));
        }
        Ok(Self(data))
    }

    pub fn blank(size: usize) -> Self {
        Self(Array2::zeros((size, size)))
    }

    pub fn size(&self) -> usize {
        self.0.dim().0
    }

    pub fn as_array(&self) -> &Array2<f32> {
        &self.0
    }

    pub fn into_array(self) -> Array2<f32> {
        self.0
    }

    /// Pixels with ink above one half.
    pub fn ink_count(&self) -> usize {
        self.0.iter().filter(|v| **v > 0.5).count()
    }

    pub fn binarized(&self) -> Array2<bool> {
        self.0.mapv(|v| v > 0.5)
    }

    pub fn from_luma8(img: &image::GrayImage) -> Result<Self> {
        let (w, h) = img.dimensions();
        let arr = Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
            1.0 - img.get_pixel(x as u32, y as u32)[0] as f32 / 255.0
        });
        Self::new(arr)
    }

    pub fn to_luma8(&self) -> image::GrayImage {
        let n = self.size() as u32;
        image::GrayImage::from_fn(n, n, |x, y| {
            let ink = self.0[[y as usize, x as usize]];
            image::Luma([((1.0 - ink) * 255.0).round().clamp(0.0, 255.0) as u8])
        })
    }

    pub(crate) fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        let n = self.size();
        let data: Vec<f32> = self.0.iter().copied().collect();
        Ok(Tensor::from_vec(data, (1, 1, n, n), &nn::device())?.to_dtype(dtype)?)
    }

    pub fn stack(sketches: &[&SketchBitmap], dtype: DType) -> Result<Tensor> {
        let ts = sketches
            .iter()
            .map(|s| s.to_tensor(dtype))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&ts, 0)?)
    }

    /// Item `index` of a `(batch, 1, H, W)` tensor, clamped to `[0, 1]`.
    pub(crate) fn from_tensor(t: &Tensor, index: usize) -> Result<Self> {
        let t = t.get(index)?.get(0)?.to_dtype(DType::F32)?.clamp(0f32, 1f32)?;
        let (h, w) = t.dims2()?;
        let data = t.flatten_all()?.to_vec1::<f32>()?;
        Self::new(Array2::from_shape_vec((h, w), data).expect("shape from tensor"))
    }
}

/// The output of [`crop_regions`]: four component patches and the face
/// canvas with the component boxes zeroed.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionPatches {
    pub components: [Array2<f32>; 4],
    pub face: Array2<f32>,
}

impl RegionPatches {
    pub fn patch(&self, region: Region) -> &Array2<f32> {
        match region {
            Region::Face => &self.face,
            r => &self.components[r.index()],
        }
    }
}

fn check_canvas(s: &SketchBitmap, layout: &RegionLayout) -> Result<()> {
    if s.size() != layout.canvas() {
        return Err(Error::InvalidLayout(format!(
            "sketch is {0}x{0} but the layout canvas is {1}",
            s.size(),
            layout.canvas()
        )));
    }
    Ok(())
}

pub fn crop_regions(s: &SketchBitmap, layout: &RegionLayout) -> Result<RegionPatches> {
    check_canvas(s, layout)?;
    let mut face = s.0.clone();
    let components = Region::COMPONENTS.map(|r| {
        let b = layout.component_box(r).expect("component region");
        face.slice_mut(s![b.y0..b.y1, b.x0..b.x1]).fill(0.0);
        s.0.slice(s![b.y0..b.y1, b.x0..b.x1]).to_owned()
    });
    Ok(RegionPatches { components, face })
}

/// Re-embeds patches at their canvas positions and sums them.
pub fn reassemble(patches: &RegionPatches, layout: &RegionLayout) -> Result<SketchBitmap> {
    let mut out = patches.face.clone();
    if out.dim() != (layout.canvas(), layout.canvas()) {
        return Err(Error::InvalidLayout("face patch does not match the canvas".into()));
    }
    for r in Region::COMPONENTS {
        let b = layout.component_box(r).expect("component region");
        let p = patches.patch(r);
        if p.dim() != (b.height(), b.width()) {
            return Err(Error::InvalidLayout(format!("{} patch has the wrong size", r.name())));
        }
        let mut dst = out.slice_mut(s![b.y0..b.y1, b.x0..b.x1]);
        dst += p;
    }
    SketchBitmap::new(out)
}

/// Real `(8, h, w)` conditioning map at latent resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningMap(Array3<f32>);

pub const CONDITION_CHANNELS: usize = 8;

impl ConditioningMap {
    pub fn new(data: Array3<f32>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c != CONDITION_CHANNELS {
            return Err(Error::ShapeMismatch {
                expected: vec![CONDITION_CHANNELS, h, w],
                got: vec![c, h, w],
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("conditioning map has non-finite entries".into()));
        }
        Ok(Self(data))
    }

    pub fn zeros(size: usize) -> Self {
        Self(Array3::zeros((CONDITION_CHANNELS, size, size)))
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.0.dim()
    }

    pub fn as_array(&self) -> &Array3<f32> {
        &self.0
    }

    pub(crate) fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        let (c, h, w) = self.0.dim();
        let data: Vec<f32> = self.0.iter().copied().collect();
        Ok(Tensor::from_vec(data, (1, c, h, w), &nn::device())?.to_dtype(dtype)?)
    }

    pub(crate) fn from_tensor(t: &Tensor, index: usize) -> Result<Self> {
        let t = t.get(index)?.to_dtype(DType::F32)?;
        let (c, h, w) = t.dims3()?;
        let data = t.flatten_all()?.to_vec1::<f32>()?;
        Self::new(Array3::from_shape_vec((c, h, w), data).expect("shape from tensor"))
    }

    /// Multiplies every channel by a `(h, w)` spatial mask.
    pub(crate) fn masked(&self, mask: &Array2<f32>) -> Self {
        let mut out = self.0.clone();
        for mut ch in out.outer_iter_mut() {
            ch *= mask;
        }
        Self(out)
    }
}
