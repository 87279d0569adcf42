//! Polygon ↔ raster conversion, edge masks, and pixel-set IoU.
//!
//! Pixel (r, c) covers the unit square [r, r+1)×[c, c+1); it belongs to a
//! polygon when its centre (r+0.5, c+0.5) is inside under the even-odd rule.
//! Crossings are half-open, so a centre lying exactly on a boundary is
//! claimed by the polygon whose top/left edge it sits on, never by both.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Mask;

/// Vertices are (row, col) in pixel coordinates; rings are stored open.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    exterior: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    holes: Vec<Vec<[f64; 2]>>,
}

fn normalize_ring(mut ring: Vec<[f64; 2]>) -> Result<Vec<[f64; 2]>> {
    if ring.len() > 1 && ring.first() == ring.last() {
        ring.pop();
    }
    if ring.iter().any(|v| !v[0].is_finite() || !v[1].is_finite()) {
        return Err(Error::invalid("polygon vertex is not finite"));
    }
    let mut distinct = ring.clone();
    distinct.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(Error::invalid(format!(
            "polygon ring needs at least 3 distinct vertices, got {}",
            distinct.len()
        )));
    }
    Ok(ring)
}

impl Polygon {
    pub fn new(exterior: Vec<[f64; 2]>) -> Result<Self> {
        Self::with_holes(exterior, Vec::new())
    }

    pub fn with_holes(exterior: Vec<[f64; 2]>, holes: Vec<Vec<[f64; 2]>>) -> Result<Self> {
        Ok(Polygon {
            exterior: normalize_ring(exterior)?,
            holes: holes.into_iter().map(normalize_ring).collect::<Result<_>>()?,
        })
    }

    /// Axis-aligned rectangle covering rows [r0, r1) and columns [c0, c1).
    pub fn rect(r0: f64, c0: f64, r1: f64, c1: f64) -> Result<Self> {
        Self::new(vec![[r0, c0], [r1, c0], [r1, c1], [r0, c1]])
    }

    pub fn exterior(&self) -> &[[f64; 2]] {
        &self.exterior
    }

    pub fn holes(&self) -> &[Vec<[f64; 2]>] {
        &self.holes
    }

    /// Exterior with the first vertex repeated at the end.
    pub fn closed_exterior(&self) -> Vec<[f64; 2]> {
        let mut ring = self.exterior.clone();
        ring.push(ring[0]);
        ring
    }

    pub fn translate(&self, dr: f64, dc: f64) -> Polygon {
        let shift = |ring: &Vec<[f64; 2]>| ring.iter().map(|v| [v[0] + dr, v[1] + dc]).collect();
        Polygon {
            exterior: shift(&self.exterior),
            holes: self.holes.iter().map(shift).collect(),
        }
    }

    /// (min_row, min_col, max_row, max_col) of the exterior.
    pub fn bounds(&self) -> [f64; 4] {
        let mut b = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
        for v in &self.exterior {
            b[0] = b[0].min(v[0]);
            b[1] = b[1].min(v[1]);
            b[2] = b[2].max(v[0]);
            b[3] = b[3].max(v[1]);
        }
        b
    }

    fn rings(&self) -> Vec<&[[f64; 2]]> {
        std::iter::once(self.exterior.as_slice())
            .chain(self.holes.iter().map(|h| h.as_slice()))
            .collect()
    }

    /// Signed shoelace area in (row, col) coordinates; positive for rings
    /// that run counter-clockwise on screen (rows growing downwards).
    pub fn signed_area(&self) -> f64 {
        let n = self.exterior.len();
        let mut s = 0.0;
        for i in 0..n {
            let a = self.exterior[i];
            let b = self.exterior[(i + 1) % n];
            s += a[0] * b[1] - b[0] * a[1];
        }
        s / 2.0
    }
}

/// Calls `emit(row, c0, c1)` for every run of columns [c0, c1) whose pixel
/// centres are inside the even-odd union of `rings`, restricted to the
/// given row and column ranges.
fn scan_rings(rings: &[&[[f64; 2]]], rows: (i64, i64), cols: (i64, i64), mut emit: impl FnMut(i64, i64, i64)) {
    let mut ymin = f64::INFINITY;
    let mut ymax = f64::NEG_INFINITY;
    for ring in rings {
        for v in ring.iter() {
            ymin = ymin.min(v[0]);
            ymax = ymax.max(v[0]);
        }
    }
    if !ymin.is_finite() {
        return;
    }
    let r_lo = ((ymin - 0.5).ceil() as i64).max(rows.0);
    let r_hi = ((ymax - 0.5).ceil() as i64).min(rows.1);
    let mut xs: Vec<f64> = Vec::new();
    for r in r_lo..r_hi {
        let y = r as f64 + 0.5;
        xs.clear();
        for ring in rings {
            let n = ring.len();
            for i in 0..n {
                let [ya, xa] = ring[i];
                let [yb, xb] = ring[(i + 1) % n];
                if (ya <= y && y < yb) || (yb <= y && y < ya) {
                    xs.push(xa + (y - ya) * (xb - xa) / (yb - ya));
                }
            }
        }
        xs.sort_by(f64::total_cmp);
        for pair in xs.chunks_exact(2) {
            let c0 = ((pair[0] - 0.5).ceil() as i64).max(cols.0);
            let c1 = ((pair[1] - 0.5).ceil() as i64).min(cols.1);
            if c0 < c1 {
                emit(r, c0, c1);
            }
        }
    }
}

/// Union of the polygons' pixel sets; parts outside the grid are clipped.
pub fn rasterize(polygons: &[Polygon], height: usize, width: usize) -> Result<Mask> {
    let mut mask = Mask::new(height, width, 1)?;
    for p in polygons {
        scan_rings(&p.rings(), (0, height as i64), (0, width as i64), |r, c0, c1| {
            let row = r as usize * width;
            mask.data_mut()[row + c0 as usize..row + c1 as usize].fill(1);
        });
    }
    Ok(mask)
}

/// Foreground pixels within chessboard distance `edge_width` of the
/// background. Pixels beyond the grid do not count as background.
pub fn edge_mask(polygons: &[Polygon], height: usize, width: usize, edge_width: usize) -> Result<Mask> {
    if edge_width == 0 {
        return Err(Error::invalid("edge_width must be at least 1"));
    }
    let building = rasterize(polygons, height, width)?;
    Ok(mask_edges(&building, edge_width))
}

/// Edge band of an existing binary mask (see [`edge_mask`]).
pub fn mask_edges(building: &Mask, edge_width: usize) -> Mask {
    let (h, w) = (building.height(), building.width());
    let dist = chessboard_distance(building);
    let mut out = building.map(|_| 0u8);
    for i in 0..h * w {
        if building.data()[i] != 0 && dist[i] <= edge_width as u32 {
            out.data_mut()[i] = 1;
        }
    }
    out
}

/// Exact chessboard distance from each pixel to the nearest zero pixel
/// (two-pass chamfer with unit weights). `u32::MAX` when there is none.
fn chessboard_distance(mask: &Mask) -> Vec<u32> {
    let (h, w) = (mask.height(), mask.width());
    let inf = u32::MAX;
    let mut d: Vec<u32> = mask.data().iter().map(|&v| if v == 0 { 0 } else { inf }).collect();
    let at = |d: &Vec<u32>, r: isize, c: isize| -> u32 {
        if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
            inf
        } else {
            d[r as usize * w + c as usize]
        }
    };
    for r in 0..h as isize {
        for c in 0..w as isize {
            let i = r as usize * w + c as usize;
            if d[i] == 0 {
                continue;
            }
            let m = at(&d, r - 1, c - 1)
                .min(at(&d, r - 1, c))
                .min(at(&d, r - 1, c + 1))
                .min(at(&d, r, c - 1));
            d[i] = d[i].min(m.saturating_add(1));
        }
    }
    for r in (0..h as isize).rev() {
        for c in (0..w as isize).rev() {
            let i = r as usize * w + c as usize;
            if d[i] == 0 {
                continue;
            }
            let m = at(&d, r + 1, c + 1)
                .min(at(&d, r + 1, c))
                .min(at(&d, r + 1, c - 1))
                .min(at(&d, r, c + 1));
            d[i] = d[i].min(m.saturating_add(1));
        }
    }
    d
}

/// Non-empty set of pixels, kept sorted in row-major order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelRegion {
    pixels: Vec<(u32, u32)>,
    /// (min_row, min_col, max_row, max_col), inclusive.
    bbox: [u32; 4],
}

impl PixelRegion {
    pub fn from_pixels(mut pixels: Vec<(u32, u32)>) -> Result<Self> {
        if pixels.is_empty() {
            return Err(Error::invalid("a pixel region cannot be empty"));
        }
        pixels.sort_unstable();
        pixels.dedup();
        let mut bbox = [u32::MAX, u32::MAX, 0, 0];
        for &(r, c) in &pixels {
            bbox[0] = bbox[0].min(r);
            bbox[1] = bbox[1].min(c);
            bbox[2] = bbox[2].max(r);
            bbox[3] = bbox[3].max(c);
        }
        Ok(PixelRegion { pixels, bbox })
    }

    /// Every foreground pixel of `mask` as one region (`None` if empty).
    pub fn from_mask(mask: &Mask) -> Option<Self> {
        let w = mask.width();
        let px: Vec<_> = (0..mask.height() * w)
            .filter(|&i| mask.data()[i] != 0)
            .map(|i| ((i / w) as u32, (i % w) as u32))
            .collect();
        Self::from_pixels(px).ok()
    }

    pub fn pixels(&self) -> &[(u32, u32)] {
        &self.pixels
    }

    pub fn area(&self) -> usize {
        self.pixels.len()
    }

    pub fn bbox(&self) -> [u32; 4] {
        self.bbox
    }

    /// Top-most, then left-most pixel: the canonical ordering key.
    pub fn key(&self) -> (u32, u32) {
        self.pixels[0]
    }

    pub fn contains(&self, r: u32, c: u32) -> bool {
        self.pixels.binary_search(&(r, c)).is_ok()
    }

    /// Shifted copy; pixels pushed below zero are dropped.
    pub fn translate(&self, dr: i64, dc: i64) -> Option<Self> {
        let px: Vec<_> = self
            .pixels
            .iter()
            .filter_map(|&(r, c)| {
                let (r, c) = (r as i64 + dr, c as i64 + dc);
                (r >= 0 && c >= 0).then_some((r as u32, c as u32))
            })
            .collect();
        Self::from_pixels(px).ok()
    }

    pub fn is_connected8(&self) -> bool {
        let mut seen = vec![false; self.pixels.len()];
        let mut stack = vec![0usize];
        seen[0] = true;
        let mut count = 1;
        while let Some(i) = stack.pop() {
            let (r, c) = self.pixels[i];
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                    if nr < 0 || nc < 0 {
                        continue;
                    }
                    if let Ok(j) = self.pixels.binary_search(&(nr as u32, nc as u32)) {
                        if !seen[j] {
                            seen[j] = true;
                            count += 1;
                            stack.push(j);
                        }
                    }
                }
            }
        }
        count == self.pixels.len()
    }

    /// Region as a mask of the given size (pixels outside are dropped).
    pub fn to_mask(&self, height: usize, width: usize) -> Result<Mask> {
        let mut m = Mask::new(height, width, 1)?;
        for &(r, c) in &self.pixels {
            if (r as usize) < height && (c as usize) < width {
                m.set(r as usize, c as usize, 0, 1);
            }
        }
        Ok(m)
    }
}

/// Pixels of a single polygon over its own bounding box (no grid needed).
/// Pixels with negative coordinates are dropped; `None` if nothing remains.
pub fn polygon_region(polygon: &Polygon) -> Option<PixelRegion> {
    let b = polygon.bounds();
    let rows = ((b[0].floor() as i64).max(0), (b[2].ceil() as i64).max(0));
    let cols = ((b[1].floor() as i64).max(0), (b[3].ceil() as i64).max(0));
    let mut px = Vec::new();
    scan_rings(&polygon.rings(), rows, cols, |r, c0, c1| {
        px.extend((c0..c1).map(|c| (r as u32, c as u32)));
    });
    PixelRegion::from_pixels(px).ok()
}

fn bboxes_disjoint(a: &PixelRegion, b: &PixelRegion) -> bool {
    a.bbox[2] < b.bbox[0] || b.bbox[2] < a.bbox[0] || a.bbox[3] < b.bbox[1] || b.bbox[3] < a.bbox[1]
}

/// |a ∩ b| by merging the sorted pixel lists.
pub fn intersection_area(a: &PixelRegion, b: &PixelRegion) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.pixels.len() && j < b.pixels.len() {
        match a.pixels[i].cmp(&b.pixels[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

pub fn region_iou(a: &PixelRegion, b: &PixelRegion) -> f64 {
    if bboxes_disjoint(a, b) {
        return 0.0;
    }
    let inter = intersection_area(a, b);
    inter as f64 / (a.area() + b.area() - inter) as f64
}

#[derive(Serialize, Deserialize)]
struct FeatureCollection {
    #[serde(rename = "type")]
    kind: String,
    features: Vec<Feature>,
}

#[derive(Serialize, Deserialize)]
struct Feature {
    #[serde(rename = "type")]
    kind: String,
    geometry: Geometry,
    #[serde(default)]
    properties: serde_json::Map<String, serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
struct Geometry {
    #[serde(rename = "type")]
    kind: String,
    coordinates: Vec<Vec<[f64; 2]>>,
}

fn swap(ring: &[[f64; 2]]) -> Vec<[f64; 2]> {
    ring.iter().map(|v| [v[1], v[0]]).collect()
}

/// GeoJSON FeatureCollection text; coordinates are written as (col, row).
pub fn polygons_to_geojson(polygons: &[Polygon]) -> String {
    let features = polygons
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut coords = vec![swap(&p.closed_exterior())];
            for h in &p.holes {
                let mut ring = swap(h);
                ring.push(ring[0]);
                coords.push(ring);
            }
            let mut properties = serde_json::Map::new();
            properties.insert("id".into(), i.into());
            Feature {
                kind: "Feature".into(),
                geometry: Geometry {
                    kind: "Polygon".into(),
                    coordinates: coords,
                },
                properties,
            }
        })
        .collect();
    let fc = FeatureCollection {
        kind: "FeatureCollection".into(),
        features,
    };
    serde_json::to_string_pretty(&fc).expect("geojson serializes")
}

pub fn polygons_from_geojson(text: &str) -> Result<Vec<Polygon>> {
    let fc: FeatureCollection =
        serde_json::from_str(text).map_err(|e| Error::Data(format!("malformed GeoJSON: {e}")))?;
    if fc.kind != "FeatureCollection" {
        return Err(Error::Data(format!("expected a FeatureCollection, got {}", fc.kind)));
    }
    fc.features
        .into_iter()
        .map(|f| {
            if f.geometry.kind != "Polygon" {
                return Err(Error::Data(format!("unsupported geometry type {}", f.geometry.kind)));
            }
            let mut rings = f.geometry.coordinates.into_iter().map(|r| swap(&r));
            let ext = rings.next().ok_or_else(|| Error::Data("polygon without rings".into()))?;
            Polygon::with_holes(ext, rings.collect()).map_err(|e| Error::Data(e.to_string()))
        })
        .collect()
}

pub fn write_geojson(path: &Path, polygons: &[Polygon]) -> Result<()> {
    std::fs::write(path, polygons_to_geojson(polygons)).map_err(|e| Error::io(path, e))
}

pub fn read_geojson(path: &Path) -> Result<Vec<Polygon>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    polygons_from_geojson(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}
