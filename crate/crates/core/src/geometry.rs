//! Central cropping, multi-scale tile grids and tile adjacency.
//!
//! All coordinates are integer cell units with half-open ranges.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest crop fraction accepted per side.
pub const MAX_CROP_FRAC: f64 = 0.25;

// Guards floor() against products like 0.29 * 100 = 28.999999999999996.
const FLOOR_EPS: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("empty rect {0:?}")]
    EmptyRect(Rect),
    #[error("crop fraction {0} outside [0, {MAX_CROP_FRAC}]")]
    CropFraction(f64),
    #[error("cropping {frac} per side empties a {width}x{height} rect")]
    DegenerateCrop { frac: f64, width: u32, height: u32 },
    #[error("grid scale must be at least 1")]
    ZeroScale,
    #[error("grid scale {scale} exceeds region size {width}x{height}")]
    ScaleTooLarge { scale: u32, width: u32, height: u32 },
    #[error("overlap fraction {0} outside [0, 0.5)")]
    Overlap(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl Rect {
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Result<Self, GeometryError> {
        let r = Self { x0, y0, x1, y1 };
        if x0 >= x1 || y0 >= y1 {
            return Err(GeometryError::EmptyRect(r));
        }
        Ok(r)
    }

    /// `width` x `height` rect anchored at the origin.
    pub fn sized(width: u32, height: u32) -> Result<Self, GeometryError> {
        Self::new(0, 0, width, height)
    }

    pub fn width(&self) -> u32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> u32 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> u64 {
        u64::from(self.width()) * u64::from(self.height())
    }

    pub fn contains_cell(&self, x: u32, y: u32) -> bool {
        (self.x0..self.x1).contains(&x) && (self.y0..self.y1).contains(&y)
    }

    pub fn contains(&self, other: &Rect) -> bool {
        other.x0 >= self.x0 && other.y0 >= self.y0 && other.x1 <= self.x1 && other.y1 <= self.y1
    }

    fn is_empty(&self) -> bool {
        self.x0 >= self.x1 || self.y0 >= self.y1
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropSpec {
    frac: f64,
}

impl CropSpec {
    pub fn new(frac: f64) -> Result<Self, GeometryError> {
        if !(0.0..=MAX_CROP_FRAC).contains(&frac) {
            return Err(GeometryError::CropFraction(frac));
        }
        Ok(Self { frac })
    }

    /// Crop given as a percentage per side, e.g. `10.0` for 10 %.
    pub fn from_percent(pct: f64) -> Result<Self, GeometryError> {
        Self::new(pct / 100.0)
    }

    pub fn frac(&self) -> f64 {
        self.frac
    }
}

impl Default for CropSpec {
    fn default() -> Self {
        Self { frac: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    scale: u32,
    overlap_frac: f64,
}

impl GridSpec {
    pub fn new(scale: u32, overlap_frac: f64) -> Result<Self, GeometryError> {
        if scale == 0 {
            return Err(GeometryError::ZeroScale);
        }
        if !(0.0..0.5).contains(&overlap_frac) {
            return Err(GeometryError::Overlap(overlap_frac));
        }
        Ok(Self {
            scale,
            overlap_frac,
        })
    }

    pub fn disjoint(scale: u32) -> Result<Self, GeometryError> {
        Self::new(scale, 0.0)
    }

    pub fn scale(&self) -> u32 {
        self.scale
    }

    pub fn overlap_frac(&self) -> f64 {
        self.overlap_frac
    }
}

/// Position of a tile in its grid, independent of where the grid sits.
///
/// Tiles from crops of different sizes share keys, which is what lets
/// bagging line them up.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TileKey {
    pub scale: u32,
    pub row: u32,
    pub col: u32,
}

impl TileKey {
    pub fn new(scale: u32, row: u32, col: u32) -> Self {
        Self { scale, row, col }
    }

    /// Every key of an `n`x`n` grid, row-major.
    pub fn grid(scale: u32) -> impl Iterator<Item = TileKey> {
        (0..scale).flat_map(move |row| (0..scale).map(move |col| TileKey { scale, row, col }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TileRef {
    pub scale: u32,
    pub row: u32,
    pub col: u32,
    pub rect: Rect,
}

impl TileRef {
    pub fn key(&self) -> TileKey {
        TileKey {
            scale: self.scale,
            row: self.row,
            col: self.col,
        }
    }
}

fn floor_frac(frac: f64, len: u32) -> u32 {
    (frac * f64::from(len) + FLOOR_EPS).floor() as u32
}

pub fn central_crop(image: Rect, spec: CropSpec) -> Result<Rect, GeometryError> {
    if image.is_empty() {
        return Err(GeometryError::EmptyRect(image));
    }
    let dx = floor_frac(spec.frac, image.width());
    let dy = floor_frac(spec.frac, image.height());
    let out = Rect {
        x0: image.x0 + dx,
        y0: image.y0 + dy,
        x1: image.x1 - dx,
        y1: image.y1 - dy,
    };
    if 2 * dx >= image.width() || 2 * dy >= image.height() {
        return Err(GeometryError::DegenerateCrop {
            frac: spec.frac,
            width: image.width(),
            height: image.height(),
        });
    }
    Ok(out)
}

/// Floor-boundary offsets `floor(i * len / n)` for `i = 0..=n`.
fn boundaries(len: u32, n: u32) -> Vec<u32> {
    (0..=n)
        .map(|i| (u64::from(i) * u64::from(len) / u64::from(n)) as u32)
        .collect()
}

/// Split `region` into `scale`² tiles, row-major.
///
/// Without overlap the tiles partition the region exactly. With overlap each
/// tile grows by `floor(overlap_frac * tile_size)` on every side, clamped to
/// the region.
pub fn tile_grid(region: Rect, spec: GridSpec) -> Result<Vec<TileRef>, GeometryError> {
    if region.is_empty() {
        return Err(GeometryError::EmptyRect(region));
    }
    let n = spec.scale;
    if n > region.width().min(region.height()) {
        return Err(GeometryError::ScaleTooLarge {
            scale: n,
            width: region.width(),
            height: region.height(),
        });
    }
    let xs = boundaries(region.width(), n);
    let ys = boundaries(region.height(), n);
    let mut tiles = Vec::with_capacity((n * n) as usize);
    for row in 0..n as usize {
        for col in 0..n as usize {
            let (tx0, tx1) = (region.x0 + xs[col], region.x0 + xs[col + 1]);
            let (ty0, ty1) = (region.y0 + ys[row], region.y0 + ys[row + 1]);
            let ex = floor_frac(spec.overlap_frac, tx1 - tx0);
            let ey = floor_frac(spec.overlap_frac, ty1 - ty0);
            let rect = Rect {
                x0: tx0.saturating_sub(ex).max(region.x0),
                y0: ty0.saturating_sub(ey).max(region.y0),
                x1: (tx1 + ex).min(region.x1),
                y1: (ty1 + ey).min(region.y1),
            };
            tiles.push(TileRef {
                scale: n,
                row: row as u32,
                col: col as u32,
                rect,
            });
        }
    }
    Ok(tiles)
}

/// 4-adjacent neighbours of `tile` within its own grid, in key order.
pub fn neighbors(tile: TileKey) -> Vec<TileKey> {
    let TileKey { scale, row, col } = tile;
    let mut out = Vec::with_capacity(4);
    if row > 0 {
        out.push(TileKey {
            scale,
            row: row - 1,
            col,
        });
    }
    if col > 0 {
        out.push(TileKey {
            scale,
            row,
            col: col - 1,
        });
    }
    if col + 1 < scale {
        out.push(TileKey {
            scale,
            row,
            col: col + 1,
        });
    }
    if row + 1 < scale {
        out.push(TileKey {
            scale,
            row: row + 1,
            col,
        });
    }
    out
}
