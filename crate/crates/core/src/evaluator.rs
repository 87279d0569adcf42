//! Greedy polygon matching and precision / recall / F1.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::polygonize::PolygonSet;
use crate::rastergeo::{region_iou, PixelRegion};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    TP,
    FP,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionMatch {
    /// Best IoU against the ground truths still unmatched at this point.
    pub score: f64,
    /// Index of that ground truth (lowest index on ties); `None` when no
    /// ground truth remained.
    pub best_gt: Option<usize>,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub predictions: Vec<PredictionMatch>,
    /// Ground truths never matched, ascending.
    pub unmatched_gts: Vec<usize>,
    #[serde(rename = "TP")]
    pub tp: usize,
    #[serde(rename = "FP")]
    pub fp: usize,
    #[serde(rename = "FN")]
    pub fn_: usize,
}

fn check_threshold(t: f64) -> Result<()> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::invalid(format!("IoU threshold must lie in (0, 1], got {t}")));
    }
    Ok(())
}

/// Predictions are visited in the given order; each takes the remaining
/// ground truth of highest IoU and keeps it when the IoU reaches the threshold.
pub fn match_regions(preds: &[&PixelRegion], gts: &[&PixelRegion], iou_threshold: f64) -> Result<MatchReport> {
    check_threshold(iou_threshold)?;
    let mut remaining = vec![true; gts.len()];
    let mut predictions = Vec::with_capacity(preds.len());
    for p in preds {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if !remaining[j] {
                continue;
            }
            let s = region_iou(p, g);
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((j, s));
            }
        }
        let score = best.map_or(0.0, |(_, s)| s);
        let label = match best {
            Some((j, s)) if s >= iou_threshold => {
                remaining[j] = false;
                Label::TP
            }
            _ => Label::FP,
        };
        predictions.push(PredictionMatch {
            score,
            best_gt: best.map(|(j, _)| j),
            label,
        });
    }
    let tp = predictions.iter().filter(|m| m.label == Label::TP).count();
    let unmatched_gts: Vec<usize> = (0..gts.len()).filter(|&j| remaining[j]).collect();
    Ok(MatchReport {
        tp,
        fp: preds.len() - tp,
        fn_: unmatched_gts.len(),
        predictions,
        unmatched_gts,
    })
}

pub fn match_polygons(preds: &PolygonSet, gts: &PolygonSet, iou_threshold: f64) -> Result<MatchReport> {
    let p: Vec<_> = preds.regions().collect();
    let g: Vec<_> = gts.regions().collect();
    match_regions(&p, &g, iou_threshold)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1_standard: f64,
    /// `2PR / (P + R − PR)`; not bounded by 1.
    pub f1_paper_literal: f64,
}

impl Metrics {
    /// Empty output against non-empty truth scores 0; nothing against
    /// nothing scores 1 everywhere.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let (m, n) = (tp + fp, tp + fn_);
        if m == 0 && n == 0 {
            return Metrics {
                precision: 1.0,
                recall: 1.0,
                f1_standard: 1.0,
                f1_paper_literal: 1.0,
            };
        }
        let precision = if m == 0 { 0.0 } else { tp as f64 / m as f64 };
        let recall = if n == 0 { 0.0 } else { tp as f64 / n as f64 };
        Self::from_pr(precision, recall)
    }

    pub fn from_pr(precision: f64, recall: f64) -> Self {
        let (p, r) = (precision, recall);
        let f1_standard = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        let lit_den = p + r - p * r;
        let f1_paper_literal = if lit_den == 0.0 { 0.0 } else { 2.0 * p * r / lit_den };
        Metrics {
            precision,
            recall,
            f1_standard,
            f1_paper_literal,
        }
    }
}

pub fn metrics(report: &MatchReport) -> Metrics {
    Metrics::from_counts(report.tp, report.fp, report.fn_)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CountsReport {
    #[serde(rename = "TP")]
    pub tp: usize,
    #[serde(rename = "FP")]
    pub fp: usize,
    #[serde(rename = "FN")]
    pub fn_: usize,
    #[serde(flatten)]
    pub metrics: Metrics,
}

impl CountsReport {
    pub fn new(tp: usize, fp: usize, fn_: usize) -> Self {
        CountsReport {
            tp,
            fp,
            fn_,
            metrics: Metrics::from_counts(tp, fp, fn_),
        }
    }
}

/// One parent raster's predictions and (possibly missing) ground truth.
#[derive(Debug, Clone)]
pub struct RasterInput {
    pub id: String,
    pub preds: PolygonSet,
    pub gts: Option<PolygonSet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub iou_threshold: f64,
    pub per_raster: BTreeMap<String, CountsReport>,
    /// Micro-average: counts summed over rasters before computing metrics.
    pub aggregate: CountsReport,
    /// Rasters without ground truth.
    pub skipped: Vec<String>,
}

pub fn evaluate_dataset(inputs: &[RasterInput], iou_threshold: f64) -> Result<DatasetReport> {
    check_threshold(iou_threshold)?;
    let mut ids: Vec<&str> = inputs.iter().map(|i| i.id.as_str()).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::invalid("duplicate raster id"));
    }
    let reports: Vec<(String, Option<MatchReport>)> = inputs
        .par_iter()
        .map(|inp| {
            let rep = match &inp.gts {
                Some(g) => Some(match_polygons(&inp.preds, g, iou_threshold)?),
                None => None,
            };
            Ok((inp.id.clone(), rep))
        })
        .collect::<Result<_>>()?;
    let mut per_raster = BTreeMap::new();
    let mut skipped = Vec::new();
    for (id, rep) in reports {
        match rep {
            Some(r) => {
                per_raster.insert(id, CountsReport::new(r.tp, r.fp, r.fn_));
            }
            None => skipped.push(id),
        }
    }
    skipped.sort();
    let (tp, fp, fn_) = per_raster
        .values()
        .fold((0, 0, 0), |(a, b, c), r| (a + r.tp, b + r.fp, c + r.fn_));
    Ok(DatasetReport {
        iou_threshold,
        per_raster,
        aggregate: CountsReport::new(tp, fp, fn_),
        skipped,
    })
}
