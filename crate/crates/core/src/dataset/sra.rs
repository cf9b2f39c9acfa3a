use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::AbstractionLevel;
use crate::conditioning::{Region, RegionLayout, SketchBitmap};
use crate::error::{Error, Result};

/// Which level each region was taken from, in region order, and the seed
/// that drove the choice.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SraProvenance {
    pub levels: [AbstractionLevel; 5],
    pub seed: u64,
}

impl SraProvenance {
    pub fn level(&self, region: Region) -> AbstractionLevel {
        self.levels[region.index()]
    }
}

/// Draws one level per region from `seed`.
pub fn sra_choice(seed: u64) -> SraProvenance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SraProvenance {
        levels: std::array::from_fn(|_| AbstractionLevel::ALL[rng.random_range(0..3)]),
        seed,
    }
}

/// Stitches a new sketch from the same-identity `levels` (indexed low, mid,
/// high) by taking each region from a randomly chosen level.
pub fn sra_recombine(
    levels: &[SketchBitmap; 3],
    layout: &RegionLayout,
    seed: u64,
) -> Result<(SketchBitmap, SraProvenance)> {
    let prov = sra_choice(seed);
    Ok((stitch(levels, layout, &prov)?, prov))
}

/// Applies a given provenance.
pub fn stitch(levels: &[SketchBitmap; 3], layout: &RegionLayout, prov: &SraProvenance) -> Result<SketchBitmap> {
    let n = layout.canvas();
    for s in levels {
        if s.size() != n {
            return Err(Error::InvalidLayout(format!(
                "sketch size {} does not match layout canvas {n}",
                s.size()
            )));
        }
    }
    let map = layout.region_map(n)?;
    let out = Array2::from_shape_fn((n, n), |(y, x)| {
        let level = prov.levels[map[[y, x]].index()];
        levels[level.index()].as_array()[[y, x]]
    });
    SketchBitmap::new(out)
}
