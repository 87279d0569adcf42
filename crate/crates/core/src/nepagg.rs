//! Neighborhood pixel aggregation: split a parent raster into fixed-size
//! core tiles, give each tile a k-pixel margin read from the parent, and
//! crop outputs back to the core before loss or stitching.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{GeoTransform, Raster};

/// Grid position (row index, column index) in the row-major tile order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TileId {
    pub row: usize,
    pub col: usize,
}

impl TileId {
    pub fn file_stem(&self) -> String {
        format!("tile_{}_{}", self.row, self.col)
    }
}

/// Placement of one core tile inside its parent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileRecord {
    pub tile_id: TileId,
    /// Top-left of the core in parent pixel coordinates.
    pub origin_row: usize,
    pub origin_col: usize,
    pub core_h: usize,
    pub core_w: usize,
    pub margin: usize,
    /// Core pixels that lie inside the parent; smaller than the core on ragged edge tiles.
    pub valid_h: usize,
    pub valid_w: usize,
}

impl TileRecord {
    pub fn augmented_h(&self) -> usize {
        self.core_h + 2 * self.margin
    }

    pub fn augmented_w(&self) -> usize {
        self.core_w + 2 * self.margin
    }

    /// Ragged tiles are zero-padded up to the full core size.
    pub fn is_ragged(&self) -> bool {
        self.valid_h < self.core_h || self.valid_w < self.core_w
    }
}

/// Row-major grid of non-overlapping `core_w`×`core_h` cores covering the parent.
pub fn split_raster<T>(parent: &Raster<T>, core_w: usize, core_h: usize, margin: usize) -> Result<Vec<TileRecord>>
where
    T: Copy + Default,
{
    split_extents(parent.height(), parent.width(), core_w, core_h, margin)
}

pub fn split_extents(
    parent_h: usize,
    parent_w: usize,
    core_w: usize,
    core_h: usize,
    margin: usize,
) -> Result<Vec<TileRecord>> {
    if core_w == 0 || core_h == 0 {
        return Err(Error::invalid(format!("core extents must be positive, got {core_w}×{core_h}")));
    }
    if parent_h == 0 || parent_w == 0 {
        return Err(Error::invalid("parent raster is empty"));
    }
    let rows = parent_h.div_ceil(core_h);
    let cols = parent_w.div_ceil(core_w);
    let mut out = Vec::with_capacity(rows * cols);
    for row in 0..rows {
        for col in 0..cols {
            let origin_row = row * core_h;
            let origin_col = col * core_w;
            out.push(TileRecord {
                tile_id: TileId { row, col },
                origin_row,
                origin_col,
                core_h,
                core_w,
                margin,
                valid_h: core_h.min(parent_h - origin_row),
                valid_w: core_w.min(parent_w - origin_col),
            });
        }
    }
    Ok(out)
}

/// The (W+2k)×(H+2k) window centred on the core, zero wherever it leaves
/// the parent (which also pads ragged cores).
pub fn augment_tile<T: Copy + Default>(parent: &Raster<T>, rec: &TileRecord) -> Result<Raster<T>> {
    let k = rec.margin as isize;
    let mut out = parent.window(
        rec.origin_row as isize - k,
        rec.origin_col as isize - k,
        rec.augmented_h(),
        rec.augmented_w(),
    )?;
    out.geotransform = None;
    Ok(out)
}

/// Removes `k` pixels from every side.
pub fn crop_core<T: Copy + Default>(augmented: &Raster<T>, k: usize) -> Result<Raster<T>> {
    if augmented.height() < 2 * k + 1 || augmented.width() < 2 * k + 1 {
        return Err(Error::invalid(format!(
            "cannot crop {k} pixels per side from a {}×{} raster",
            augmented.height(),
            augmented.width()
        )));
    }
    augmented.window(
        k as isize,
        k as isize,
        augmented.height() - 2 * k,
        augmented.width() - 2 * k,
    )
}

/// Writes each core back at its origin; padding of ragged tiles is dropped.
/// Every tile of the grid must be present exactly once.
pub fn stitch<T: Copy + Default>(tiles: &[(TileRecord, Raster<T>)]) -> Result<Raster<T>> {
    let (first, first_raster) = tiles.first().ok_or_else(|| Error::invalid("nothing to stitch"))?;
    let channels = first_raster.channels();
    let mut seen = BTreeMap::new();
    let mut height = 0;
    let mut width = 0;
    for (rec, raster) in tiles {
        if seen.insert(rec.tile_id, ()).is_some() {
            return Err(Error::invalid(format!("duplicate tile {:?}", rec.tile_id)));
        }
        if (rec.core_h, rec.core_w) != (first.core_h, first.core_w) {
            return Err(Error::invalid("tiles come from different splits"));
        }
        if raster.height() != rec.core_h || raster.width() != rec.core_w || raster.channels() != channels {
            return Err(Error::invalid(format!(
                "tile {:?} is {}×{}, expected its {}×{} core",
                rec.tile_id,
                raster.height(),
                raster.width(),
                rec.core_h,
                rec.core_w
            )));
        }
        height = height.max(rec.origin_row + rec.valid_h);
        width = width.max(rec.origin_col + rec.valid_w);
    }
    let rows = height.div_ceil(first.core_h);
    let cols = width.div_ceil(first.core_w);
    for row in 0..rows {
        for col in 0..cols {
            if !seen.contains_key(&TileId { row, col }) {
                return Err(Error::invalid(format!("missing tile ({row}, {col})")));
            }
        }
    }
    if seen.len() != rows * cols {
        return Err(Error::invalid("tile ids outside the grid"));
    }
    let mut out = Raster::new(height, width, channels)?;
    for (rec, raster) in tiles {
        let valid = raster.window(0, 0, rec.valid_h, rec.valid_w)?;
        out.paste(&valid, rec.origin_row, rec.origin_col)?;
    }
    Ok(out)
}

/// JSON description of a tiling written next to the tile PNGs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileManifest {
    pub parent_height: usize,
    pub parent_width: usize,
    pub channels: usize,
    pub core_w: usize,
    pub core_h: usize,
    pub margin: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geotransform: Option<GeoTransform>,
    pub tiles: Vec<TileEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileEntry {
    #[serde(flatten)]
    pub record: TileRecord,
    pub file: String,
}

impl TileManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&raw).map_err(|e| Error::json(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parent(h: usize, w: usize) -> Raster<u16> {
        Raster::from_vec(h, w, 1, (0..h * w).map(|i| i as u16 + 1).collect()).unwrap()
    }

    #[test]
    fn exact_division_origins() {
        let recs = split_extents(1024, 1024, 512, 512, 0).unwrap();
        let origins: Vec<_> = recs.iter().map(|r| (r.origin_row, r.origin_col)).collect();
        assert_eq!(origins, vec![(0, 0), (0, 512), (512, 0), (512, 512)]);
        assert!(recs.iter().all(|r| !r.is_ragged()));
        assert_eq!(split_extents(650, 650, 650, 650, 83).unwrap().len(), 1);
    }

    #[test]
    fn full_scale_augmented_sizes() {
        let r = split_extents(650, 650, 650, 650, 83).unwrap()[0];
        assert_eq!((r.augmented_h(), r.augmented_w()), (816, 816));
        let r = split_extents(512, 512, 512, 512, 64).unwrap()[0];
        assert_eq!((r.augmented_h(), r.augmented_w()), (640, 640));
    }

    #[test]
    fn ragged_tiles_cover_parent_once() {
        let recs = split_extents(700, 700, 512, 512, 0).unwrap();
        assert_eq!(recs.len(), 4);
        let mut cover = vec![0u8; 700 * 700];
        for r in &recs {
            for row in r.origin_row..r.origin_row + r.valid_h {
                for col in r.origin_col..r.origin_col + r.valid_w {
                    cover[row * 700 + col] += 1;
                }
            }
        }
        assert!(cover.iter().all(|&c| c == 1));
        assert_eq!(recs.iter().filter(|r| r.is_ragged()).count(), 3);
    }

    #[test]
    fn zero_core_rejected() {
        assert!(split_extents(10, 10, 0, 5, 0).unwrap_err().is_invalid_argument());
        // a core larger than the parent gives one padded tile
        let recs = split_extents(10, 10, 16, 16, 2).unwrap();
        assert_eq!(recs.len(), 1);
        assert!(recs[0].is_ragged());
    }

    #[test]
    fn zero_margin_augment_is_core_crop() {
        let p = parent(8, 8);
        let recs = split_raster(&p, 4, 4, 0).unwrap();
        let t = augment_tile(&p, &recs[3]).unwrap();
        assert_eq!(t, p.window(4, 4, 4, 4).unwrap());
    }

    #[test]
    fn margin_reads_neighbours_and_zero_outside() {
        let p = parent(8, 8);
        let recs = split_raster(&p, 4, 4, 2).unwrap();
        let t = augment_tile(&p, &recs[0]).unwrap();
        assert_eq!((t.height(), t.width()), (8, 8));
        assert_eq!(t.get(0, 0, 0), 0);
        assert_eq!(t.get(2, 2, 0), p.get(0, 0, 0));
        assert_eq!(t.get(7, 7, 0), p.get(5, 5, 0));
    }

    #[test]
    fn crop_sizes_and_errors() {
        let r: Raster<u8> = Raster::new(816, 816, 1).unwrap();
        let c = crop_core(&r, 83).unwrap();
        assert_eq!((c.height(), c.width()), (650, 650));
        assert_eq!(crop_core(&r, 0).unwrap(), r);
        let small: Raster<u8> = Raster::new(4, 4, 1).unwrap();
        assert!(crop_core(&small, 2).unwrap_err().is_invalid_argument());
    }

    #[test]
    fn stitch_rejects_missing_and_duplicate() {
        let p = parent(8, 8);
        let recs = split_raster(&p, 4, 4, 0).unwrap();
        let tiles: Vec<_> = recs.iter().map(|r| (*r, augment_tile(&p, r).unwrap())).collect();
        assert_eq!(stitch(&tiles).unwrap(), p);
        assert!(stitch(&tiles[..3]).is_err());
        let mut dup = tiles.clone();
        dup.push(tiles[0].clone());
        assert!(stitch(&dup).is_err());
        assert_eq!(stitch(&tiles[..1]).unwrap(), p.window(0, 0, 4, 4).unwrap());
    }
}
