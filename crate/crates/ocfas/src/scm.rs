//! Pseudo spoof cue map synthesis: zero maps for live prompts, position-keyed
//! binary square masks for spoof and hybrid prompts.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompt::{Family, Position, Prompt};

/// C x H x W real-valued map, row-major within each channel. Pseudo targets
/// are binary; predicted maps are unconstrained reals.
#[derive(Debug, Clone, PartialEq)]
pub struct SpoofCueMap {
    pub shape: (usize, usize, usize),
    pub data: Vec<f64>,
}

impl SpoofCueMap {
    pub fn new(shape: (usize, usize, usize), data: Vec<f64>) -> Result<SpoofCueMap> {
        let (c, h, w) = shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Argument(format!("non-positive map shape {shape:?}")));
        }
        if data.len() != c * h * w {
            return Err(Error::Argument(format!(
                "map data length {} does not match shape {shape:?}",
                data.len()
            )));
        }
        Ok(SpoofCueMap { shape, data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn get(&self, c: usize, h: usize, w: usize) -> f64 {
        let (_, hh, ww) = self.shape;
        self.data[c * hh * ww + h * ww + w]
    }

    /// Row-major 0/1 bytes for binary maps, the golden-file interchange form.
    pub fn to_binary_bytes(&self) -> Result<Vec<u8>> {
        if !self.is_binary() {
            return Err(Error::Argument("map is not binary".into()));
        }
        Ok(self.data.iter().map(|&v| v as u8).collect())
    }
}

/// Half-open pixel rectangle `[r0, r1) x [c0, c1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub r0: usize,
    pub r1: usize,
    pub c0: usize,
    pub c1: usize,
}

impl Region {
    pub fn contains(&self, r: usize, c: usize) -> bool {
        r >= self.r0 && r < self.r1 && c >= self.c0 && c < self.c1
    }
}

/// Region table in pixel coordinates for an H x W map: halves for the four
/// side positions, quadrants for the corners, the central half-window for
/// `center`, the full map for `whole`.
pub fn region_for(position: Position, h: usize, w: usize) -> Region {
    let (hm, wm) = (h / 2, w / 2);
    match position {
        Position::Upper => Region { r0: 0, r1: hm, c0: 0, c1: w },
        Position::Lower => Region { r0: hm, r1: h, c0: 0, c1: w },
        Position::Left => Region { r0: 0, r1: h, c0: 0, c1: wm },
        Position::Right => Region { r0: 0, r1: h, c0: wm, c1: w },
        Position::Center => Region { r0: h / 4, r1: h - h / 4, c0: w / 4, c1: w - w / 4 },
        Position::UpperLeft => Region { r0: 0, r1: hm, c0: 0, c1: wm },
        Position::UpperRight => Region { r0: 0, r1: hm, c0: wm, c1: w },
        Position::LowerLeft => Region { r0: hm, r1: h, c0: 0, c1: wm },
        Position::LowerRight => Region { r0: hm, r1: h, c0: wm, c1: w },
        Position::Whole => Region { r0: 0, r1: h, c0: 0, c1: w },
    }
}

/// Mask placement request: a square sized as a fraction of `min(H, W)` at a
/// named position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub position: Position,
    pub size_fraction: f64,
}

/// Bounds for the random square size, as fractions of `min(H, W)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SizeFractionBounds {
    pub min_frac: f64,
    pub max_frac: f64,
}

impl Default for SizeFractionBounds {
    fn default() -> Self {
        SizeFractionBounds { min_frac: 0.25, max_frac: 0.75 }
    }
}

/// All-zero map of the given shape.
pub fn zero_scm(shape: (usize, usize, usize)) -> Result<SpoofCueMap> {
    let (c, h, w) = shape;
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::Argument(format!("non-positive map shape {shape:?}")));
    }
    SpoofCueMap::new(shape, vec![0.0; c * h * w])
}

/// Binary map with a square of side `round(size_fraction * min(H, W))`
/// anchored uniformly at random inside the position's region and clipped to
/// that region. Identical across channels. `whole` yields the all-ones map.
pub fn pseudo_scm(
    spec: &MaskSpec,
    shape: (usize, usize, usize),
    rng: &mut ChaCha8Rng,
) -> Result<SpoofCueMap> {
    let (c, h, w) = shape;
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::Argument(format!("non-positive map shape {shape:?}")));
    }
    if !(spec.size_fraction.is_finite() && spec.size_fraction > 0.0) {
        return Err(Error::Argument(format!(
            "invalid size fraction {}",
            spec.size_fraction
        )));
    }
    let mut data = vec![0.0; c * h * w];
    if spec.position == Position::Whole {
        data.fill(1.0);
        return SpoofCueMap::new(shape, data);
    }
    let region = region_for(spec.position, h, w);
    let side = ((spec.size_fraction * h.min(w) as f64).round() as usize).max(1);
    let ar = rng.random_range(region.r0..region.r1);
    let ac = rng.random_range(region.c0..region.c1);
    let r1 = (ar + side).min(region.r1);
    let c1 = (ac + side).min(region.c1);
    for ch in 0..c {
        for r in ar..r1 {
            for cl in ac..c1 {
                data[ch * h * w + r * w + cl] = 1.0;
            }
        }
    }
    SpoofCueMap::new(shape, data)
}

/// Pseudo map for a prompt: zero for live, a position-keyed mask with a size
/// drawn uniformly from `bounds` for spoof/hybrid. Content prompts carry no map.
pub fn scm_for_prompt(
    p: &Prompt,
    shape: (usize, usize, usize),
    bounds: SizeFractionBounds,
    rng: &mut ChaCha8Rng,
) -> Result<SpoofCueMap> {
    match p.family {
        Family::Live => zero_scm(shape),
        Family::Spoof | Family::Hybrid => {
            let position = p
                .position
                .ok_or_else(|| Error::Argument("spoof/hybrid prompt without a position".into()))?;
            let size_fraction = if bounds.min_frac == bounds.max_frac {
                bounds.min_frac
            } else {
                rng.random_range(bounds.min_frac..bounds.max_frac)
            };
            pseudo_scm(&MaskSpec { position, size_fraction }, shape, rng)
        }
        Family::Content => Err(Error::Argument(
            "content prompts carry no spoof cue map".into(),
        )),
    }
}
