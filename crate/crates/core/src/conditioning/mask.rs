use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ConditioningMap, Region, RegionLayout};
use crate::error::{Error, Result};

/// Region-level dropout of the conditioning map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskPolicy {
    /// Independent drop probability of each region.
    pub p_region: f64,
    /// Probability of zeroing the whole map.
    pub p_all: f64,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        Self {
            p_region: 0.2,
            p_all: 0.1,
        }
    }
}

impl MaskPolicy {
    pub const NONE: MaskPolicy = MaskPolicy {
        p_region: 0.0,
        p_all: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_region", self.p_region), ("p_all", self.p_all)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidRange(format!("{name} = {p} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Draws which regions to drop. Always consumes six uniforms so the
    /// stream position does not depend on the outcome.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> [bool; 5] {
        let all = rng.random::<f64>() < self.p_all;
        let regions: [bool; 5] = std::array::from_fn(|_| rng.random::<f64>() < self.p_region);
        if all {
            [true; 5]
        } else {
            regions
        }
    }
}

/// Spatial keep-mask at `resolution`: 0 over dropped regions, 1 elsewhere.
pub fn keep_mask(layout: &RegionLayout, resolution: usize, dropped: &[bool; 5]) -> Result<Array2<f32>> {
    let map = layout.region_map(resolution)?;
    Ok(map.mapv(|r| if dropped[r.index()] { 0.0 } else { 1.0 }))
}

/// Zeroes the support of the given regions across all channels.
pub fn drop_regions(
    map: &ConditioningMap,
    layout: &RegionLayout,
    regions: &[Region],
) -> Result<ConditioningMap> {
    let mut dropped = [false; 5];
    for r in regions {
        dropped[r.index()] = true;
    }
    let (_, h, _) = map.shape();
    Ok(map.masked(&keep_mask(layout, h, &dropped)?))
}

/// Randomly drops regions of `map` according to `policy`.
pub fn mask_condition<R: Rng + ?Sized>(
    map: &ConditioningMap,
    layout: &RegionLayout,
    policy: &MaskPolicy,
    rng: &mut R,
) -> Result<ConditioningMap> {
    policy.validate()?;
    let dropped = policy.draw(rng);
    let (_, h, _) = map.shape();
    Ok(map.masked(&keep_mask(layout, h, &dropped)?))
}
