//! Probability map → ordered set of building polygons.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Mask, Raster};
use crate::rastergeo::{intersection_area, polygon_region, PixelRegion, Polygon};

const NEIGHBOURS8: [(i64, i64); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];

/// `prob ≥ threshold` per pixel.
pub fn binarize(prob: &Raster<f64>, threshold: f64) -> Result<Mask> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::invalid(format!("threshold must lie in [0, 1], got {threshold}")));
    }
    Ok(prob.map(|p| (p >= threshold) as u8))
}

fn single_channel(mask: &Mask) -> Result<()> {
    if mask.channels() != 1 {
        return Err(Error::invalid("expected a single-channel mask"));
    }
    Ok(())
}

/// Labels 8-connected foreground regions; label 0 is background, labels
/// are assigned in row-major discovery order starting at 1.
fn label_components(mask: &Mask) -> (Vec<u32>, u32) {
    let (h, w) = (mask.height() as i64, mask.width() as i64);
    let mut labels = vec![0u32; (h * w) as usize];
    let mut next = 0;
    let mut stack = Vec::new();
    for start in 0..(h * w) as usize {
        if mask.data()[start] == 0 || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (r, c) = (i as i64 / w, i as i64 % w);
            for (dr, dc) in NEIGHBOURS8 {
                let (nr, nc) = (r + dr, c + dc);
                if nr < 0 || nc < 0 || nr >= h || nc >= w {
                    continue;
                }
                let j = (nr * w + nc) as usize;
                if mask.data()[j] != 0 && labels[j] == 0 {
                    labels[j] = next;
                    stack.push(j);
                }
            }
        }
    }
    (labels, next)
}

fn regions_from_labels(labels: &[u32], count: u32, width: usize) -> Vec<PixelRegion> {
    let mut buckets: Vec<Vec<(u32, u32)>> = vec![Vec::new(); count as usize];
    for (i, &l) in labels.iter().enumerate() {
        if l != 0 {
            buckets[l as usize - 1].push(((i / width) as u32, (i % width) as u32));
        }
    }
    let mut regions: Vec<PixelRegion> = buckets
        .into_iter()
        .filter(|b| !b.is_empty())
        .map(|b| PixelRegion::from_pixels(b).expect("bucket is non-empty"))
        .collect();
    regions.sort_by_key(|r| r.key());
    regions
}

/// Maximal 8-connected foreground regions in canonical order.
pub fn connected_components(mask: &Mask) -> Result<Vec<PixelRegion>> {
    single_channel(mask)?;
    let (labels, n) = label_components(mask);
    Ok(regions_from_labels(&labels, n, mask.width()))
}

/// Local bitmap over a region's bounding box with a one-pixel border.
struct Patch {
    r0: i64,
    c0: i64,
    h: i64,
    w: i64,
    bits: Vec<bool>,
}

impl Patch {
    fn new(region: &PixelRegion) -> Self {
        let b = region.bbox();
        let (r0, c0) = (b[0] as i64 - 1, b[1] as i64 - 1);
        let (h, w) = (b[2] as i64 - r0 + 2, b[3] as i64 - c0 + 2);
        let mut bits = vec![false; (h * w) as usize];
        for &(r, c) in region.pixels() {
            bits[((r as i64 - r0) * w + (c as i64 - c0)) as usize] = true;
        }
        Patch { r0, c0, h, w, bits }
    }

    fn get(&self, r: i64, c: i64) -> bool {
        let (lr, lc) = (r - self.r0, c - self.c0);
        lr >= 0 && lc >= 0 && lr < self.h && lc < self.w && self.bits[(lr * self.w + lc) as usize]
    }
}

/// Adds every background pixel not 4-connected to the outside.
pub fn fill_holes(region: &PixelRegion) -> PixelRegion {
    let patch = Patch::new(region);
    let (h, w) = (patch.h, patch.w);
    let mut outside = vec![false; (h * w) as usize];
    let mut stack = vec![0usize];
    outside[0] = true;
    while let Some(i) = stack.pop() {
        let (r, c) = (i as i64 / w, i as i64 % w);
        for (dr, dc) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
            let (nr, nc) = (r + dr, c + dc);
            if nr < 0 || nc < 0 || nr >= h || nc >= w {
                continue;
            }
            let j = (nr * w + nc) as usize;
            if !outside[j] && !patch.bits[j] {
                outside[j] = true;
                stack.push(j);
            }
        }
    }
    if outside.iter().filter(|&&o| !o).count() == region.area() {
        return region.clone();
    }
    let px = (0..(h * w) as usize)
        .filter(|&i| !outside[i])
        .map(|i| ((i as i64 / w + patch.r0) as u32, (i as i64 % w + patch.c0) as u32))
        .collect();
    PixelRegion::from_pixels(px).expect("filled region contains the original")
}

/// Outer boundary as a ring of pixel corners, counter-clockwise on screen
/// (region on the left of travel), one vertex per direction change.
/// Holes are filled first, so `polygon_region` of the result equals
/// `fill_holes(region)`.
pub fn trace_boundary(region: &PixelRegion) -> Polygon {
    let filled = fill_holes(region);
    let patch = Patch::new(&filled);
    let inside = |r: i64, c: i64| patch.get(r, c);

    // headings as (drow, dcol), ordered so that +1 is a right turn on screen
    const DIRS: [(i64, i64); 4] = [(0, 1), (1, 0), (0, -1), (-1, 0)];
    const WEST: usize = 2;
    // pixels ahead-left and ahead-right of vertex (r, c) for each heading
    let ahead = |r: i64, c: i64, d: usize| -> ((i64, i64), (i64, i64)) {
        match d {
            0 => ((r - 1, c), (r, c)),
            1 => ((r, c), (r, c - 1)),
            2 => ((r, c - 1), (r - 1, c - 1)),
            _ => ((r - 1, c - 1), (r - 1, c)),
        }
    };

    let (sr, sc) = filled.key();
    let start = (sr as i64, sc as i64 + 1);
    let (mut pos, mut dir) = (start, WEST);
    let mut vertices = Vec::new();
    loop {
        pos = (pos.0 + DIRS[dir].0, pos.1 + DIRS[dir].1);
        let (left, right) = ahead(pos.0, pos.1, dir);
        let next = if inside(right.0, right.1) {
            (dir + 1) % 4
        } else if inside(left.0, left.1) {
            dir
        } else {
            (dir + 3) % 4
        };
        if next != dir {
            vertices.push([pos.0 as f64, pos.1 as f64]);
        }
        dir = next;
        if pos == start && dir == WEST {
            break;
        }
    }
    Polygon::new(vertices).expect("a traced boundary has at least four corners")
}

/// Regions paired with their traced outlines, in canonical order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PolygonSet {
    entries: Vec<(PixelRegion, Polygon)>,
}

impl PolygonSet {
    /// Sorts by canonical key; regions must be pairwise disjoint.
    pub fn new(mut entries: Vec<(PixelRegion, Polygon)>) -> Result<Self> {
        entries.sort_by_key(|(r, _)| r.key());
        let mut all: Vec<(u32, u32)> = entries.iter().flat_map(|(r, _)| r.pixels().iter().copied()).collect();
        let total = all.len();
        all.sort_unstable();
        all.dedup();
        if all.len() != total {
            return Err(Error::Data("polygon regions overlap".into()));
        }
        Ok(PolygonSet { entries })
    }

    pub fn from_regions(regions: Vec<PixelRegion>) -> Result<Self> {
        Self::new(regions.into_iter().map(|r| (r.clone(), trace_boundary(&r))).collect())
    }

    /// Rasterizes each polygon on its own bounding box; polygons covering
    /// no pixel centre are dropped.
    pub fn from_polygons(polygons: &[Polygon]) -> Result<Self> {
        Self::new(
            polygons
                .iter()
                .filter_map(|p| polygon_region(p).map(|r| (r, p.clone())))
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(PixelRegion, Polygon)] {
        &self.entries
    }

    pub fn regions(&self) -> impl Iterator<Item = &PixelRegion> {
        self.entries.iter().map(|(r, _)| r)
    }

    pub fn polygons(&self) -> Vec<Polygon> {
        self.entries.iter().map(|(_, p)| p.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractOptions {
    pub threshold: f64,
    /// Regions smaller than this many pixels are discarded.
    pub min_area: usize,
    /// When set, building pixels whose edge probability is ≥ this value are
    /// removed before labeling and then regrown from the surviving cores.
    pub edge_threshold: Option<f64>,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        ExtractOptions {
            threshold: 0.5,
            min_area: 0,
            edge_threshold: None,
        }
    }
}

/// binarize → connected_components → trace_boundary.
pub fn extract(prob: &Raster<f64>, threshold: f64) -> Result<PolygonSet> {
    extract_with(
        prob,
        None,
        &ExtractOptions {
            threshold,
            ..Default::default()
        },
    )
}

pub fn extract_with(prob: &Raster<f64>, edge_prob: Option<&Raster<f64>>, opts: &ExtractOptions) -> Result<PolygonSet> {
    let mask = binarize(prob, opts.threshold)?;
    single_channel(&mask)?;
    let regions = match (opts.edge_threshold, edge_prob) {
        (None, _) => connected_components(&mask)?,
        (Some(t), Some(edge)) => split_on_edges(&mask, &binarize(edge, t)?)?,
        (Some(_), None) => return Err(Error::invalid("edge splitting needs an edge probability map")),
    };
    finalize(regions, opts.min_area)
}

/// Separates touching buildings: building pixels under the edge mask are
/// removed, the remaining cores are labeled, and the removed pixels are
/// handed back to the nearest core by breadth-first growth so that
/// footprints keep their full extent. Building components with no core at
/// all are kept whole.
pub fn split_on_edges(building: &Mask, edges: &Mask) -> Result<Vec<PixelRegion>> {
    single_channel(building)?;
    if (edges.height(), edges.width()) != (building.height(), building.width()) {
        return Err(Error::invalid("edge map and building map differ in size"));
    }
    let (h, w) = (building.height() as i64, building.width() as i64);
    let seeds = Mask::from_vec(
        building.height(),
        building.width(),
        1,
        building
            .data()
            .iter()
            .zip(edges.data())
            .map(|(&b, &e)| (b != 0 && e == 0) as u8)
            .collect(),
    )?;
    let (mut labels, mut n) = label_components(&seeds);
    let mut queue: VecDeque<usize> = (0..labels.len()).filter(|&i| labels[i] != 0).collect();
    while let Some(i) = queue.pop_front() {
        let (r, c) = (i as i64 / w, i as i64 % w);
        for (dr, dc) in NEIGHBOURS8 {
            let (nr, nc) = (r + dr, c + dc);
            if nr < 0 || nc < 0 || nr >= h || nc >= w {
                continue;
            }
            let j = (nr * w + nc) as usize;
            if building.data()[j] != 0 && labels[j] == 0 {
                labels[j] = labels[i];
                queue.push_back(j);
            }
        }
    }
    let leftover = Mask::from_vec(
        building.height(),
        building.width(),
        1,
        building
            .data()
            .iter()
            .zip(&labels)
            .map(|(&b, &l)| (b != 0 && l == 0) as u8)
            .collect(),
    )?;
    let (rest, m) = label_components(&leftover);
    for (l, &x) in labels.iter_mut().zip(&rest) {
        if x != 0 {
            *l = n + x;
        }
    }
    n += m;
    Ok(regions_from_labels(&labels, n, building.width()))
}

/// Fills holes; regions whose filled areas overlap are merged and refilled.
/// Split regions may touch diagonally, so one can reach into another's hole
/// through its 8-connected outline.
fn finalize(regions: Vec<PixelRegion>, min_area: usize) -> Result<PolygonSet> {
    let mut filled: Vec<PixelRegion> = regions.iter().map(fill_holes).collect();
    filled.sort_by_key(|r| (std::cmp::Reverse(r.area()), r.key()));
    let mut kept: Vec<PixelRegion> = Vec::new();
    for mut cur in filled {
        while let Some(j) = kept.iter().position(|k| intersection_area(k, &cur) > 0) {
            let other = kept.swap_remove(j);
            let mut px = other.pixels().to_vec();
            px.extend_from_slice(cur.pixels());
            cur = fill_holes(&PixelRegion::from_pixels(px)?);
        }
        kept.push(cur);
    }
    PolygonSet::new(
        kept.into_iter()
            .filter(|r| r.area() >= min_area)
            .map(|r| {
                let poly = trace_boundary(&r);
                (r, poly)
            })
            .collect(),
    )
}
