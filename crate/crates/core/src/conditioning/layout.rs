use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The five facial regions, in bundle order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Leye,
    Reye,
    Nose,
    Mouth,
    Face,
}

impl Region {
    pub const ALL: [Region; 5] = [Region::Leye, Region::Reye, Region::Nose, Region::Mouth, Region::Face];
    pub const COMPONENTS: [Region; 4] = [Region::Leye, Region::Reye, Region::Nose, Region::Mouth];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Region::Leye => "leye",
            Region::Reye => "reye",
            Region::Nose => "nose",
            Region::Mouth => "mouth",
            Region::Face => "face",
        }
    }
}

impl std::str::FromStr for Region {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Region::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown region {s:?}")))
    }
}

/// Half-open pixel rectangle `[x0, x1) x [y0, y1)`, serialized as
/// `[x0, y0, x1, y1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[usize; 4]", into = "[usize; 4]")]
pub struct RegionBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl From<[usize; 4]> for RegionBox {
    fn from([x0, y0, x1, y1]: [usize; 4]) -> Self {
        Self { x0, y0, x1, y1 }
    }
}

impl From<RegionBox> for [usize; 4] {
    fn from(b: RegionBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl RegionBox {
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..self.x1).contains(&x) && (self.y0..self.y1).contains(&y)
    }

    fn overlaps(&self, o: &RegionBox) -> bool {
        self.x0 < o.x1 && o.x0 < self.x1 && self.y0 < o.y1 && o.y0 < self.y1
    }

    fn scaled(&self, canvas: usize) -> RegionBox {
        let s = |v: usize| (v * canvas + 128) / 256;
        RegionBox {
            x0: s(self.x0),
            y0: s(self.y0),
            x1: s(self.x1),
            y1: s(self.y1),
        }
    }
}

/// Four component boxes on a square canvas; the face region is everything
/// outside them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "LayoutRepr", into = "LayoutRepr")]
pub struct RegionLayout {
    canvas: usize,
    boxes: [RegionBox; 4],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayoutRepr {
    canvas: usize,
    leye: RegionBox,
    reye: RegionBox,
    nose: RegionBox,
    mouth: RegionBox,
}

impl TryFrom<LayoutRepr> for RegionLayout {
    type Error = Error;

    fn try_from(r: LayoutRepr) -> Result<Self> {
        RegionLayout::new(r.canvas, [r.leye, r.reye, r.nose, r.mouth])
    }
}

impl From<RegionLayout> for LayoutRepr {
    fn from(l: RegionLayout) -> Self {
        let [leye, reye, nose, mouth] = l.boxes;
        LayoutRepr {
            canvas: l.canvas,
            leye,
            reye,
            nose,
            mouth,
        }
    }
}

const REFERENCE_BOXES: [[usize; 4]; 4] = [
    [52, 78, 116, 142],
    [140, 78, 204, 142],
    [100, 146, 156, 190],
    [84, 190, 172, 238],
];

impl RegionLayout {
    pub fn new(canvas: usize, boxes: [RegionBox; 4]) -> Result<Self> {
        let layout = Self { canvas, boxes };
        layout.validate()?;
        Ok(layout)
    }

    /// Component windows for aligned faces, defined on a 256 canvas and
    /// rescaled to `canvas`.
    pub fn default_for_canvas(canvas: usize) -> Result<Self> {
        let boxes = REFERENCE_BOXES.map(|b| RegionBox::from(b).scaled(canvas));
        Self::new(canvas, boxes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.canvas == 0 {
            return Err(Error::InvalidLayout("canvas size must be positive".into()));
        }
        for (i, b) in self.boxes.iter().enumerate() {
            let name = Region::COMPONENTS[i].name();
            if b.x0 >= b.x1 || b.y0 >= b.y1 {
                return Err(Error::InvalidLayout(format!("{name} box is empty: {b:?}")));
            }
            if b.x1 > self.canvas || b.y1 > self.canvas {
                return Err(Error::InvalidLayout(format!(
                    "{name} box {b:?} exceeds the {} canvas",
                    self.canvas
                )));
            }
        }
        for i in 0..4 {
            for j in i + 1..4 {
                if self.boxes[i].overlaps(&self.boxes[j]) {
                    return Err(Error::InvalidLayout(format!(
                        "{} and {} boxes overlap",
                        Region::COMPONENTS[i].name(),
                        Region::COMPONENTS[j].name()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn canvas(&self) -> usize {
        self.canvas
    }

    /// Box of a component region; `None` for the face.
    pub fn component_box(&self, region: Region) -> Option<RegionBox> {
        match region {
            Region::Face => None,
            r => Some(self.boxes[r.index()]),
        }
    }

    pub fn region_at(&self, x: usize, y: usize) -> Region {
        Region::COMPONENTS
            .into_iter()
            .find(|r| self.boxes[r.index()].contains(x, y))
            .unwrap_or(Region::Face)
    }

    /// Region membership at `resolution` (a divisor of the canvas), using
    /// the canvas pixel at the centre of each cell.
    pub fn region_map(&self, resolution: usize) -> Result<Array2<Region>> {
        if resolution == 0 || self.canvas % resolution != 0 {
            return Err(Error::InvalidLayout(format!(
                "resolution {resolution} does not divide canvas {}",
                self.canvas
            )));
        }
        let f = self.canvas / resolution;
        Ok(Array2::from_shape_fn((resolution, resolution), |(y, x)| {
            self.region_at(x * f + f / 2, y * f + f / 2)
        }))
    }

    /// 0/1 mask of `region` at canvas resolution.
    pub fn region_mask(&self, region: Region) -> Array2<f32> {
        Array2::from_shape_fn((self.canvas, self.canvas), |(y, x)| {
            (self.region_at(x, y) == region) as u8 as f32
        })
    }
}
