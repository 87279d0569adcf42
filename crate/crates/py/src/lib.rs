//! Python bindings: polygons, rasterization, extraction, matching, tiling,
//! synthetic suites and the model (train / predict / save / load).

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use tfnet_core::evaluator::{match_polygons as core_match, Label, Metrics};
use tfnet_core::nepagg::split_extents as core_split_extents;
use tfnet_core::polygonize::{extract_with, ExtractOptions, PolygonSet};
use tfnet_core::raster::Raster;
use tfnet_core::rastergeo::{rasterize as core_rasterize, Polygon};
use tfnet_core::synthgen::{generate_suite, write_suite, SuiteKind, SuiteSpec};
use tfnet_core::tfnet::{TFNetConfig, TFNetParams};
use tfnet_core::trainer::{fit, make_samples, predict as core_predict, SceneInput, TrainConfig};

fn py_err(e: tfnet_core::Error) -> PyErr {
    match e {
        tfnet_core::Error::InvalidArgument(m) => PyValueError::new_err(m),
        e @ tfnet_core::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

fn grid_raster<T: Copy + Default>(rows: &[Vec<T>]) -> PyResult<Raster<T>> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    Raster::from_vec(h, w, 1, rows.concat()).map_err(py_err)
}

fn raster_grid<T: Copy + Default>(r: &Raster<T>) -> Vec<Vec<T>> {
    r.data().chunks(r.width() * r.channels()).map(<[T]>::to_vec).collect()
}

/// Image as rows of [r, g, b] (or [v]) pixels.
type PyImage = Vec<Vec<Vec<u8>>>;

fn image_raster(img: &PyImage) -> PyResult<Raster<u8>> {
    let h = img.len();
    let w = img.first().map_or(0, Vec::len);
    let c = img.first().and_then(|r| r.first()).map_or(0, Vec::len);
    if img.iter().any(|r| r.len() != w || r.iter().any(|p| p.len() != c)) {
        return Err(PyValueError::new_err("image must be a rectangular height × width × channels list"));
    }
    let data = img.iter().flat_map(|r| r.iter().flatten().copied()).collect();
    Raster::from_vec(h, w, c, data).map_err(py_err)
}

fn raster_image(r: &Raster<u8>) -> PyImage {
    (0..r.height())
        .map(|row| (0..r.width()).map(|col| r.pixel(row, col).to_vec()).collect())
        .collect()
}

/// Polygon in pixel-edge coordinates, vertices as (row, col).
#[pyclass(name = "Polygon", module = "tfnet", from_py_object)]
#[derive(Clone)]
struct PyPolygon(Polygon);

#[pymethods]
impl PyPolygon {
    #[new]
    #[pyo3(signature = (exterior, holes = Vec::new()))]
    fn new(exterior: Vec<(f64, f64)>, holes: Vec<Vec<(f64, f64)>>) -> PyResult<Self> {
        let ring = |r: Vec<(f64, f64)>| r.into_iter().map(|(a, b)| [a, b]).collect::<Vec<_>>();
        Polygon::with_holes(ring(exterior), holes.into_iter().map(ring).collect())
            .map(Self)
            .map_err(py_err)
    }

    #[staticmethod]
    fn rect(r0: f64, c0: f64, r1: f64, c1: f64) -> PyResult<Self> {
        Polygon::rect(r0, c0, r1, c1).map(Self).map_err(py_err)
    }

    #[getter]
    fn exterior(&self) -> Vec<(f64, f64)> {
        self.0.exterior().iter().map(|p| (p[0], p[1])).collect()
    }

    #[getter]
    fn holes(&self) -> Vec<Vec<(f64, f64)>> {
        self.0
            .holes()
            .iter()
            .map(|h| h.iter().map(|p| (p[0], p[1])).collect())
            .collect()
    }

    fn signed_area(&self) -> f64 {
        self.0.signed_area()
    }

    fn translate(&self, dr: f64, dc: f64) -> Self {
        Self(self.0.translate(dr, dc))
    }

    fn __repr__(&self) -> String {
        format!("Polygon({} vertices, {} holes)", self.0.exterior().len(), self.0.holes().len())
    }
}

fn polys(ps: &[PyPolygon]) -> Vec<Polygon> {
    ps.iter().map(|p| p.0.clone()).collect()
}

/// 0/1 mask of pixels whose centres fall inside any polygon.
#[pyfunction]
fn rasterize(polygons: Vec<PyPolygon>, height: usize, width: usize) -> PyResult<Vec<Vec<u8>>> {
    core_rasterize(&polys(&polygons), height, width)
        .map(|m| raster_grid(&m))
        .map_err(py_err)
}

/// Building polygons from a probability grid, optionally split along an edge map.
#[pyfunction]
#[pyo3(signature = (prob, threshold = 0.5, edge = None, edge_threshold = None, min_area = 0))]
fn extract(
    prob: Vec<Vec<f64>>,
    threshold: f64,
    edge: Option<Vec<Vec<f64>>>,
    edge_threshold: Option<f64>,
    min_area: usize,
) -> PyResult<Vec<PyPolygon>> {
    let p = grid_raster(&prob)?;
    let e = edge.as_deref().map(grid_raster).transpose()?;
    let opts = ExtractOptions {
        threshold,
        min_area,
        edge_threshold,
    };
    let set = extract_with(&p, e.as_ref(), &opts).map_err(py_err)?;
    Ok(set.polygons().into_iter().map(PyPolygon).collect())
}

/// Greedy matching; returns TP/FP/FN counts, per-prediction labels and metrics.
#[pyfunction]
#[pyo3(signature = (preds, gts, iou = 0.5))]
fn match_polygons<'py>(py: Python<'py>, preds: Vec<PyPolygon>, gts: Vec<PyPolygon>, iou: f64) -> PyResult<Bound<'py, PyDict>> {
    let p = PolygonSet::from_polygons(&polys(&preds)).map_err(py_err)?;
    let g = PolygonSet::from_polygons(&polys(&gts)).map_err(py_err)?;
    let r = core_match(&p, &g, iou).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("tp", r.tp)?;
    d.set_item("fp", r.fp)?;
    d.set_item("fn", r.fn_)?;
    let labels: Vec<&str> = r
        .predictions
        .iter()
        .map(|m| if m.label == Label::TP { "TP" } else { "FP" })
        .collect();
    d.set_item("labels", labels)?;
    d.set_item("scores", r.predictions.iter().map(|m| m.score).collect::<Vec<_>>())?;
    let m = Metrics::from_counts(r.tp, r.fp, r.fn_);
    d.set_item("precision", m.precision)?;
    d.set_item("recall", m.recall)?;
    d.set_item("f1", m.f1_standard)?;
    Ok(d)
}

/// (precision, recall, f1_standard, f1_paper_literal) from counts.
#[pyfunction]
fn metrics(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64, f64) {
    let m = Metrics::from_counts(tp, fp, fn_);
    (m.precision, m.recall, m.f1_standard, m.f1_paper_literal)
}

/// Tile grid of a parent raster: one dict per tile.
#[pyfunction]
fn split_extents<'py>(
    py: Python<'py>,
    height: usize,
    width: usize,
    core_w: usize,
    core_h: usize,
    margin: usize,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let recs = core_split_extents(height, width, core_w, core_h, margin).map_err(py_err)?;
    recs.iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("row", r.tile_id.row)?;
            d.set_item("col", r.tile_id.col)?;
            d.set_item("origin_row", r.origin_row)?;
            d.set_item("origin_col", r.origin_col)?;
            d.set_item("augmented_h", r.augmented_h())?;
            d.set_item("augmented_w", r.augmented_w())?;
            d.set_item("valid_h", r.valid_h)?;
            d.set_item("valid_w", r.valid_w)?;
            Ok(d)
        })
        .collect()
}

fn suite_kind(kind: &str) -> PyResult<SuiteKind> {
    kind.parse().map_err(py_err)
}

/// One synthetic scene: (image rows of pixels, ground-truth polygons).
#[pyfunction]
#[pyo3(signature = (kind, seed, index = 0))]
fn synth_scene(kind: &str, seed: u64, index: usize) -> PyResult<(PyImage, Vec<PyPolygon>)> {
    let mut spec = SuiteSpec::new(suite_kind(kind)?, seed);
    spec.scenes = index + 1;
    let (_, _, scene) = generate_suite(&spec).map_err(py_err)?.swap_remove(index);
    Ok((raster_image(&scene.image), scene.polygons().into_iter().map(PyPolygon).collect()))
}

/// Writes a suite directory; returns the scene ids.
#[pyfunction]
#[pyo3(signature = (kind, seed, out, scenes = 4))]
fn write_synth_suite(kind: &str, seed: u64, out: PathBuf, scenes: usize) -> PyResult<Vec<String>> {
    let mut spec = SuiteSpec::new(suite_kind(kind)?, seed);
    spec.scenes = scenes;
    let m = write_suite(&spec, &out).map_err(py_err)?;
    Ok(m.scenes.into_iter().map(|s| s.id).collect())
}

/// Network weights plus the tiling used to train them.
#[pyclass(name = "Model", module = "tfnet")]
struct PyModel {
    params: TFNetParams,
    core: (usize, usize),
    margin: usize,
}

#[pymethods]
impl PyModel {
    /// Untrained desk-scale network.
    #[new]
    #[pyo3(signature = (seed = 0, edge_head = true, tiny = false))]
    fn new(seed: u64, edge_head: bool, tiny: bool) -> PyResult<Self> {
        let mut cfg = if tiny { TFNetConfig::tiny() } else { TFNetConfig::desk_scale() };
        cfg.edge_head = edge_head;
        let t = TrainConfig::desk_scale();
        Ok(Self {
            params: TFNetParams::build(cfg, seed).map_err(py_err)?,
            core: (t.core_w, t.core_h),
            margin: t.margin,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (dir, stem = "model", core = 64, margin = 8))]
    fn load(dir: PathBuf, stem: &str, core: usize, margin: usize) -> PyResult<Self> {
        let (params, _) = TFNetParams::load(&dir, stem).map_err(py_err)?;
        Ok(Self {
            params,
            core: (core, core),
            margin,
        })
    }

    #[pyo3(signature = (dir, stem = "model"))]
    fn save(&self, dir: PathBuf, stem: &str) -> PyResult<()> {
        self.params.save(&dir, stem, Default::default()).map_err(py_err)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.params.param_count()
    }

    #[getter]
    fn edge_head(&self) -> bool {
        self.params.config().edge_head
    }

    /// Trains in place on (image, polygons) scenes; returns the per-step totals.
    #[pyo3(signature = (scenes, steps = 100, learning_rate = None, seed = 0, margin = None))]
    fn train(
        &mut self,
        py: Python<'_>,
        scenes: Vec<(PyImage, Vec<PyPolygon>)>,
        steps: usize,
        learning_rate: Option<f64>,
        seed: u64,
        margin: Option<usize>,
    ) -> PyResult<Vec<f64>> {
        let inputs = scenes
            .iter()
            .enumerate()
            .map(|(i, (img, ps))| {
                Ok(SceneInput {
                    id: format!("scene_{i:03}"),
                    image: image_raster(img)?,
                    polygons: polys(ps),
                })
            })
            .collect::<PyResult<Vec<_>>>()?;
        let mut cfg = TrainConfig {
            core_w: self.core.0,
            core_h: self.core.1,
            margin: margin.unwrap_or(self.margin),
            epochs: steps.max(1),
            max_steps: Some(steps),
            seed,
            model: self.params.config().clone(),
            ..TrainConfig::desk_scale()
        };
        if let Some(lr) = learning_rate {
            cfg.learning_rate = lr;
        }
        if cfg.model.output_stride != TrainConfig::desk_scale().model.output_stride {
            // smaller networks get smaller tiles
            cfg.core_w = 16;
            cfg.core_h = 16;
            cfg.margin = margin.unwrap_or(2);
        }
        let params = &mut self.params;
        let history = py
            .detach(|| {
                let samples = make_samples(&inputs, &cfg)?;
                fit(params, &samples, &cfg, None)
            })
            .map_err(py_err)?;
        self.core = (cfg.core_w, cfg.core_h);
        self.margin = cfg.margin;
        Ok(history.iter().map(|r| r.losses.total).collect())
    }

    /// Building and (when present) edge probability grids for one image.
    #[pyo3(signature = (image, margin = None))]
    fn predict(&self, py: Python<'_>, image: PyImage, margin: Option<usize>) -> PyResult<(Vec<Vec<f64>>, Option<Vec<Vec<f64>>>)> {
        let img = image_raster(&image)?;
        let k = margin.unwrap_or(self.margin);
        let p = py
            .detach(|| core_predict(&self.params, &img, self.core.0, self.core.1, k))
            .map_err(py_err)?;
        Ok((raster_grid(&p.building), p.edge.as_ref().map(raster_grid)))
    }

    fn __repr__(&self) -> String {
        format!(
            "Model({} parameters, edge_head={}, core={:?}, margin={})",
            self.params.param_count(),
            self.params.config().edge_head,
            self.core,
            self.margin
        )
    }
}

#[pymodule]
fn tfnet(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPolygon>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(rasterize, m)?)?;
    m.add_function(wrap_pyfunction!(extract, m)?)?;
    m.add_function(wrap_pyfunction!(match_polygons, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(split_extents, m)?)?;
    m.add_function(wrap_pyfunction!(synth_scene, m)?)?;
    m.add_function(wrap_pyfunction!(write_synth_suite, m)?)?;
    Ok(())
}
