//! Seeded synthetic scenes: noisy imagery with axis-aligned rectangular
//! buildings and their exact outlines.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{write_png, Raster};
use crate::rastergeo::{rasterize, write_geojson, Polygon};

/// How buildings are placed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    /// Independent rejection sampling anywhere in the scene.
    Scatter,
    /// Rows of buildings packed with gaps drawn from [min_gap, max_gap].
    Packed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    /// For the packed layout, 0 means "fill the scene".
    pub building_count: usize,
    /// Inclusive side-length range.
    pub size_min: usize,
    pub size_max: usize,
    /// Background pixels required between two buildings (chessboard).
    pub min_gap: usize,
    /// Upper gap bound for the packed layout.
    pub max_gap: usize,
    pub layout: Layout,
    pub background: [u8; 3],
    pub building: [u8; 3],
    /// Per-building brightness offset drawn from ±this.
    pub building_jitter: u8,
    /// Per-pixel uniform noise amplitude.
    pub noise: u8,
    /// Fraction of buildings forced across an interior core boundary.
    pub straddle_fraction: f64,
    /// Core tile size (w, h) the straddle constraint refers to.
    pub core: (usize, usize),
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            height: 128,
            width: 128,
            building_count: 8,
            size_min: 8,
            size_max: 18,
            min_gap: 8,
            max_gap: 8,
            layout: Layout::Scatter,
            background: [70, 80, 60],
            building: [170, 160, 150],
            building_jitter: 25,
            noise: 40,
            straddle_fraction: 0.0,
            core: (64, 64),
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::invalid("scene extents must be positive"));
        }
        if self.size_min == 0 || self.size_min > self.size_max {
            return Err(Error::invalid("building size range must satisfy 1 ≤ min ≤ max"));
        }
        if self.min_gap == 0 {
            return Err(Error::invalid("min_gap must be at least 1 so buildings stay separate"));
        }
        if self.layout == Layout::Packed && self.max_gap < self.min_gap {
            return Err(Error::invalid("max_gap must not be below min_gap"));
        }
        if !(0.0..=1.0).contains(&self.straddle_fraction) {
            return Err(Error::invalid("straddle_fraction must lie in [0, 1]"));
        }
        if self.straddle_fraction > 0.0 && (self.core.0 == 0 || self.core.1 == 0) {
            return Err(Error::invalid("straddling needs positive core extents"));
        }
        Ok(())
    }
}

/// Half-open pixel rectangle rows [r0, r1) × cols [c0, c1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub r0: usize,
    pub c0: usize,
    pub r1: usize,
    pub c1: usize,
}

impl Rect {
    /// Background pixels separating two rectangles along the wider axis
    /// (chessboard gap); 0 when they touch or overlap.
    pub fn gap(&self, o: &Rect) -> usize {
        let dr = o.r0.saturating_sub(self.r1).max(self.r0.saturating_sub(o.r1));
        let dc = o.c0.saturating_sub(self.c1).max(self.c0.saturating_sub(o.c1));
        dr.max(dc)
    }

    pub fn polygon(&self) -> Polygon {
        Polygon::rect(self.r0 as f64, self.c0 as f64, self.r1 as f64, self.c1 as f64).expect("non-empty rectangle")
    }

    /// Whether the rectangle spans an interior vertical or horizontal core boundary.
    pub fn crosses_core_boundary(&self, core_w: usize, core_h: usize) -> bool {
        let spans = |lo: usize, hi: usize, step: usize| (lo / step) != ((hi - 1) / step);
        spans(self.c0, self.c1, core_w) || spans(self.r0, self.r1, core_h)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: Raster<u8>,
    pub buildings: Vec<Rect>,
}

impl Scene {
    pub fn polygons(&self) -> Vec<Polygon> {
        self.buildings.iter().map(Rect::polygon).collect()
    }
}

const ATTEMPTS_PER_BUILDING: usize = 2000;

fn scatter(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Rect>> {
    let forced = (spec.straddle_fraction * spec.building_count as f64).ceil() as usize;
    let (core_w, core_h) = spec.core;
    let v_lines: Vec<usize> = (1..spec.width.div_ceil(core_w.max(1))).map(|i| i * core_w).collect();
    let h_lines: Vec<usize> = (1..spec.height.div_ceil(core_h.max(1))).map(|i| i * core_h).collect();
    if forced > 0 && v_lines.is_empty() && h_lines.is_empty() {
        return Err(Error::invalid("scene has no interior core boundary to straddle"));
    }
    let mut placed: Vec<Rect> = Vec::with_capacity(spec.building_count);
    let mut attempts = 0;
    while placed.len() < spec.building_count {
        attempts += 1;
        if attempts > ATTEMPTS_PER_BUILDING * spec.building_count.max(1) {
            return Err(Error::Data(format!(
                "placed only {} of {} buildings; lower the density or the gap",
                placed.len(),
                spec.building_count
            )));
        }
        let h = rng.random_range(spec.size_min..=spec.size_max);
        let w = rng.random_range(spec.size_min..=spec.size_max);
        if h > spec.height || w > spec.width {
            continue;
        }
        let (r0, c0) = if placed.len() < forced {
            // pick a boundary and make the rectangle span it
            let vertical = if h_lines.is_empty() {
                true
            } else if v_lines.is_empty() {
                false
            } else {
                rng.random_bool(0.5)
            };
            if vertical {
                if w < 2 {
                    continue;
                }
                let x = v_lines[rng.random_range(0..v_lines.len())];
                let c0 = rng.random_range(x.saturating_sub(w - 1)..x);
                (rng.random_range(0..=spec.height - h), c0)
            } else {
                if h < 2 {
                    continue;
                }
                let y = h_lines[rng.random_range(0..h_lines.len())];
                let r0 = rng.random_range(y.saturating_sub(h - 1)..y);
                (r0, rng.random_range(0..=spec.width - w))
            }
        } else {
            (rng.random_range(0..=spec.height - h), rng.random_range(0..=spec.width - w))
        };
        let cand = Rect {
            r0,
            c0,
            r1: r0 + h,
            c1: c0 + w,
        };
        if cand.r1 > spec.height || cand.c1 > spec.width {
            continue;
        }
        if placed.iter().all(|p| p.gap(&cand) >= spec.min_gap) {
            placed.push(cand);
        }
    }
    Ok(placed)
}

fn packed(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Rect>> {
    let fill = spec.building_count == 0;
    let target = if fill { usize::MAX } else { spec.building_count };
    let mut placed = Vec::new();
    let border = spec.max_gap;
    let mut r = border;
    'rows: while placed.len() < target {
        let h = rng.random_range(spec.size_min..=spec.size_max);
        if r + h + border > spec.height {
            break;
        }
        let mut c = border + rng.random_range(0..=spec.max_gap);
        loop {
            let w = rng.random_range(spec.size_min..=spec.size_max);
            if c + w + border > spec.width {
                break;
            }
            // rows have uneven heights; stagger the top edge a little
            let dr = rng.random_range(0..=1usize).min(h - 1);
            let rect = Rect {
                r0: r + dr,
                c0: c,
                r1: r + h,
                c1: c + w,
            };
            placed.push(rect);
            if placed.len() == target {
                break 'rows;
            }
            c += w + rng.random_range(spec.min_gap..=spec.max_gap);
        }
        r += h + rng.random_range(spec.min_gap..=spec.max_gap);
    }
    if !fill && placed.len() < target {
        return Err(Error::Data(format!(
            "only {} of {} packed buildings fit; lower the count",
            placed.len(),
            spec.building_count
        )));
    }
    Ok(placed)
}

/// Deterministic scene for a spec (its seed included).
pub fn generate(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let buildings = match spec.layout {
        Layout::Scatter => scatter(spec, &mut rng)?,
        Layout::Packed => packed(spec, &mut rng)?,
    };
    let mut image = Raster::new(spec.height, spec.width, 3)?;
    for r in 0..spec.height {
        for c in 0..spec.width {
            for ch in 0..3 {
                image.set(r, c, ch, spec.background[ch]);
            }
        }
    }
    // paint each footprint through the rasterizer so GT and pixels agree
    for b in &buildings {
        let j = spec.building_jitter as i32;
        let offset = if j > 0 { rng.random_range(-j..=j) } else { 0 };
        let mask = rasterize(&[b.polygon()], spec.height, spec.width)?;
        for r in b.r0..b.r1 {
            for c in b.c0..b.c1 {
                if mask.get(r, c, 0) == 1 {
                    for ch in 0..3 {
                        image.set(r, c, ch, (spec.building[ch] as i32 + offset).clamp(0, 255) as u8);
                    }
                }
            }
        }
    }
    let n = spec.noise as i32;
    if n > 0 {
        for v in image.data_mut() {
            *v = (*v as i32 + rng.random_range(-n..=n)).clamp(0, 255) as u8;
        }
    }
    Ok(Scene { image, buildings })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "lowercase")]
pub enum SuiteKind {
    Sparse,
    Dense,
    Straddle,
}

impl std::str::FromStr for SuiteKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sparse" => Ok(SuiteKind::Sparse),
            "dense" => Ok(SuiteKind::Dense),
            "straddle" => Ok(SuiteKind::Straddle),
            other => Err(Error::invalid(format!("unknown suite kind {other:?} (sparse, dense, straddle)"))),
        }
    }
}

/// Scene parameters of a suite; `scene_spec` derives per-scene seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteSpec {
    pub kind: SuiteKind,
    pub scenes: usize,
    pub base: SceneSpec,
}

impl SuiteSpec {
    pub fn new(kind: SuiteKind, seed: u64) -> Self {
        let base = match kind {
            SuiteKind::Sparse => SceneSpec {
                seed,
                ..SceneSpec::default()
            },
            SuiteKind::Dense => SceneSpec {
                building_count: 0,
                size_min: 10,
                size_max: 16,
                min_gap: 1,
                max_gap: 2,
                layout: Layout::Packed,
                seed,
                ..SceneSpec::default()
            },
            SuiteKind::Straddle => SceneSpec {
                building_count: 10,
                size_min: 10,
                size_max: 20,
                min_gap: 4,
                max_gap: 4,
                straddle_fraction: 0.6,
                // heavy noise: a pixel's class only shows over a neighbourhood
                noise: 140,
                seed,
                ..SceneSpec::default()
            },
        };
        SuiteSpec { kind, scenes: 4, base }
    }

    pub fn scene_spec(&self, index: usize) -> SceneSpec {
        SceneSpec {
            seed: self.base.seed.wrapping_mul(1_000_003).wrapping_add(index as u64),
            ..self.base.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteScene {
    pub id: String,
    pub image: String,
    pub polygons: String,
    pub spec: SceneSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteManifest {
    pub kind: SuiteKind,
    pub seed: u64,
    pub scenes: Vec<SuiteScene>,
}

pub fn generate_suite(spec: &SuiteSpec) -> Result<Vec<(String, SceneSpec, Scene)>> {
    (0..spec.scenes)
        .map(|i| {
            let s = spec.scene_spec(i);
            let scene = generate(&s)?;
            Ok((format!("scene_{i:03}"), s, scene))
        })
        .collect()
}

/// Writes `<id>.png`, `<id>.geojson` and `manifest.json` into `dir`.
pub fn write_suite(spec: &SuiteSpec, dir: &Path) -> Result<SuiteManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut scenes = Vec::new();
    for (id, s, scene) in generate_suite(spec)? {
        let image = format!("{id}.png");
        let polygons = format!("{id}.geojson");
        write_png(&dir.join(&image), &scene.image)?;
        write_geojson(&dir.join(&polygons), &scene.polygons())?;
        scenes.push(SuiteScene {
            id,
            image,
            polygons,
            spec: s,
        });
    }
    let manifest = SuiteManifest {
        kind: spec.kind,
        seed: spec.base.seed,
        scenes,
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_suite_manifest(dir: &Path) -> Result<SuiteManifest> {
    let path = dir.join("manifest.json");
    let raw = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_slice(&raw).map_err(|e| Error::json(&path, e))
}
