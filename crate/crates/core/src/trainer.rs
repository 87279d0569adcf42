//! Training loop: augmented tiles in, both heads cropped to the core,
//! summed focal losses, plain SGD.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nepagg::{augment_tile, split_raster, stitch, TileRecord};
use crate::raster::Raster;
use crate::rastergeo::{edge_mask, rasterize, Polygon};
use crate::tensor::{ops, sgd_step, FocalParams, Tape, Tensor, Var};
use crate::tfnet::{tfnet_forward, BoundParams, TFNetConfig, TFNetParams};

/// Missing JSON fields fall back to [`TrainConfig::desk_scale`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub core_w: usize,
    pub core_h: usize,
    /// Neighbourhood margin k added on every side of a core tile.
    pub margin: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stops early once this many optimizer steps have run.
    pub max_steps: Option<usize>,
    pub learning_rate: f64,
    pub focal: FocalParams,
    pub edge_width: usize,
    pub seed: u64,
    /// Write a checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
    /// Weights of the (building, edge) losses in the total.
    pub loss_weights: [f64; 2],
    pub model: TFNetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk_scale()
    }
}

impl TrainConfig {
    pub fn desk_scale() -> Self {
        TrainConfig {
            core_w: 64,
            core_h: 64,
            margin: 8,
            batch_size: 4,
            epochs: 100,
            max_steps: Some(400),
            learning_rate: 0.5,
            focal: FocalParams::default(),
            edge_width: 2,
            seed: 0,
            checkpoint_every: 0,
            loss_weights: [1.0, 1.0],
            model: TFNetConfig::desk_scale(),
        }
    }

    /// 650-pixel cores with k = 83, batch 8, 150 epochs at lr 1e-4.
    pub fn full_scale() -> Self {
        TrainConfig {
            core_w: 650,
            core_h: 650,
            margin: 83,
            batch_size: 8,
            epochs: 150,
            max_steps: None,
            learning_rate: 1e-4,
            ..Self::desk_scale()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.core_w == 0 || self.core_h == 0 || self.batch_size == 0 || self.edge_width == 0 {
            return Err(Error::invalid("core size, batch_size and edge_width must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.loss_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("loss weights must be finite and non-negative"));
        }
        self.focal.validate()?;
        self.model.validate()?;
        let s = self.model.output_stride;
        let (ah, aw) = (self.core_h + 2 * self.margin, self.core_w + 2 * self.margin);
        if ah % s != 0 || aw % s != 0 {
            return Err(Error::invalid(format!(
                "augmented tile {aw}×{ah} is not divisible by the model's output stride {s}"
            )));
        }
        Ok(())
    }
}

/// A parent raster and its ground-truth footprints.
#[derive(Debug, Clone)]
pub struct SceneInput {
    pub id: String,
    pub image: Raster<u8>,
    pub polygons: Vec<Polygon>,
}

#[derive(Debug, Clone)]
pub struct TrainSample {
    pub scene: String,
    pub record: TileRecord,
    /// (C, H+2k, W+2k).
    pub image: Tensor,
    /// (1, H, W) each.
    pub building: Tensor,
    pub edge: Tensor,
}

/// CHW tensor scaled to [-0.5, 0.5].
pub fn image_to_tensor(image: &Raster<u8>) -> Tensor {
    let (h, w, c) = (image.height(), image.width(), image.channels());
    let data = image.data();
    Tensor::from_fn(&[c, h, w], |i| {
        let (ch, rest) = (i / (h * w), i % (h * w));
        data[rest * c + ch] as f64 / 255.0 - 0.5
    })
}

fn mask_tensor(mask: &Raster<u8>) -> Tensor {
    Tensor::from_fn(&[1, mask.height(), mask.width()], |i| mask.data()[i] as f64)
}

/// Tiles every scene; masks are built on the whole parent and cut to each core.
pub fn make_samples(scenes: &[SceneInput], cfg: &TrainConfig) -> Result<Vec<TrainSample>> {
    cfg.validate()?;
    let per_scene: Vec<Vec<TrainSample>> = scenes
        .par_iter()
        .map(|scene| {
            if scene.image.channels() != cfg.model.input_channels {
                return Err(Error::Data(format!(
                    "{}: image has {} channels, model expects {}",
                    scene.id,
                    scene.image.channels(),
                    cfg.model.input_channels
                )));
            }
            let (h, w) = (scene.image.height(), scene.image.width());
            let building = rasterize(&scene.polygons, h, w)?;
            let edges = edge_mask(&scene.polygons, h, w, cfg.edge_width)?;
            split_raster(&scene.image, cfg.core_w, cfg.core_h, cfg.margin)?
                .into_iter()
                .map(|rec| {
                    let (r, c) = (rec.origin_row as isize, rec.origin_col as isize);
                    Ok(TrainSample {
                        scene: scene.id.clone(),
                        record: rec,
                        image: image_to_tensor(&augment_tile(&scene.image, &rec)?),
                        building: mask_tensor(&building.window(r, c, rec.core_h, rec.core_w)?),
                        edge: mask_tensor(&edges.window(r, c, rec.core_h, rec.core_w)?),
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(per_scene.into_iter().flatten().collect())
}

fn stack(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::invalid("empty batch"))?;
    if parts.iter().any(|t| t.shape() != first.shape()) {
        return Err(Error::invalid("samples in a batch differ in shape"));
    }
    let mut shape = vec![parts.len()];
    shape.extend_from_slice(first.shape());
    Tensor::new(shape, parts.iter().flat_map(|t| t.data().iter().copied()).collect())
}

/// Losses of one step; `total = w_b·building + w_e·edge`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub loss_building: f64,
    pub loss_edge: f64,
    pub total: f64,
}

/// A recorded forward pass through loss, ready for `backward`.
pub struct LossGraph {
    pub tape: Tape,
    pub bound: BoundParams,
    pub building: Var,
    pub edge: Option<Var>,
    pub total: Var,
}

impl LossGraph {
    pub fn losses(&self) -> StepLosses {
        let v = |x: Var| self.tape.value(x).data()[0];
        StepLosses {
            loss_building: v(self.building),
            loss_edge: self.edge.map_or(0.0, v),
            total: v(self.total),
        }
    }
}

/// Forward on the augmented batch, crop both heads to the core, focal loss each.
pub fn record_losses(params: &TFNetParams, batch: &[&TrainSample], cfg: &TrainConfig) -> Result<LossGraph> {
    if batch.is_empty() {
        return Err(Error::invalid("batch must not be empty"));
    }
    let images = stack(&batch.iter().map(|s| &s.image).collect::<Vec<_>>())?;
    let building_t = stack(&batch.iter().map(|s| &s.building).collect::<Vec<_>>())?;
    let edge_t = stack(&batch.iter().map(|s| &s.edge).collect::<Vec<_>>())?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let x = tape.leaf(images);
    let heads = tfnet_forward(params, &bound, &mut tape, x)?;
    let k = cfg.margin;
    let b_logits = tape.crop_core(heads.building, k)?;
    let building = tape.focal_loss(b_logits, &building_t, cfg.focal)?;
    let mut terms = vec![(building, cfg.loss_weights[0])];
    let edge = match heads.edge {
        Some(e) => {
            let e_logits = tape.crop_core(e, k)?;
            let l = tape.focal_loss(e_logits, &edge_t, cfg.focal)?;
            terms.push((l, cfg.loss_weights[1]));
            Some(l)
        }
        None => None,
    };
    let total = tape.weighted_sum(&terms)?;
    Ok(LossGraph {
        tape,
        bound,
        building,
        edge,
        total,
    })
}

/// One SGD update; parameters are left untouched when the loss is not finite.
pub fn train_step(params: &mut TFNetParams, batch: &[&TrainSample], cfg: &TrainConfig) -> Result<StepLosses> {
    let mut graph = record_losses(params, batch, cfg)?;
    let losses = graph.losses();
    if ![losses.loss_building, losses.loss_edge, losses.total].iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteLoss {
            step: 0,
            loss_building: losses.loss_building,
            loss_edge: losses.loss_edge,
            total: losses.total,
        });
    }
    let grads = graph.tape.backward(graph.total)?;
    params.zero_grads();
    params.accumulate_grads(&graph.bound, &grads)?;
    sgd_step(params.tensors_mut().iter_mut(), cfg.learning_rate)?;
    Ok(losses)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    #[serde(flatten)]
    pub losses: StepLosses,
}

/// Sample order of one epoch, derived only from (seed, epoch).
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    order
}

pub fn checkpoint_stem(step: usize) -> String {
    format!("ckpt_{step:06}")
}

/// Trains from scratch; see [`fit_from`].
pub fn fit(
    params: &mut TFNetParams,
    samples: &[TrainSample],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<Vec<StepRecord>> {
    fit_from(params, samples, cfg, out_dir, 0)
}

/// Runs steps `start_step..` of the schedule (epochs × batches, capped by
/// `max_steps`). Checkpoints named by [`checkpoint_stem`] land in `out_dir`
/// every `checkpoint_every` steps; returns the losses of the steps run.
pub fn fit_from(
    params: &mut TFNetParams,
    samples: &[TrainSample],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    start_step: usize,
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    if params.config() != &cfg.model {
        return Err(Error::invalid("model parameters do not match the configured architecture"));
    }
    if samples.is_empty() {
        return Err(Error::invalid("training needs at least one sample"));
    }
    let per_epoch = samples.len().div_ceil(cfg.batch_size);
    let limit = (cfg.epochs * per_epoch).min(cfg.max_steps.unwrap_or(usize::MAX));
    let mut history = Vec::new();
    let mut step = start_step;
    while step < limit {
        let epoch = step / per_epoch;
        let order = epoch_order(samples.len(), cfg.seed, epoch);
        let chunk = &order.chunks(cfg.batch_size).collect::<Vec<_>>()[step % per_epoch];
        let batch: Vec<&TrainSample> = chunk.iter().map(|&i| &samples[i]).collect();
        let losses = train_step(params, &batch, cfg).map_err(|e| match e {
            Error::NonFiniteLoss {
                loss_building,
                loss_edge,
                total,
                ..
            } => Error::NonFiniteLoss {
                step,
                loss_building,
                loss_edge,
                total,
            },
            other => other,
        })?;
        history.push(StepRecord { step, losses });
        step += 1;
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
                let mut meta = BTreeMap::new();
                meta.insert("step".to_string(), serde_json::json!(step));
                params.save(dir, &checkpoint_stem(step), meta)?;
            }
        }
    }
    Ok(history)
}

/// Parameters and step count stored by a checkpoint.
pub fn load_checkpoint_step(dir: &Path, stem: &str) -> Result<(TFNetParams, usize)> {
    let (params, meta) = TFNetParams::load(dir, stem)?;
    let step = meta
        .get("step")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Data(format!("checkpoint {stem} has no step")))?;
    Ok((params, step as usize))
}

pub fn write_loss_csv(path: &Path, history: &[StepRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let mut write = || -> std::io::Result<()> {
        writeln!(f, "step,loss_building,loss_edge,total")?;
        for r in history {
            writeln!(
                f,
                "{},{},{},{}",
                r.step, r.losses.loss_building, r.losses.loss_edge, r.losses.total
            )?;
        }
        f.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

/// Parent-sized probability maps.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub building: Raster<f64>,
    pub edge: Option<Raster<f64>>,
}

fn core_raster(logits: &Tensor, k: usize) -> Result<Raster<f64>> {
    let core = ops::crop_core(&ops::sigmoid(logits), k)?;
    let [_, _, h, w] = core.dims4()?;
    Raster::from_vec(h, w, 1, core.into_data())
}

/// tile → augment → forward → sigmoid → crop → stitch, for both heads.
/// Tiles run in parallel on the current rayon pool; results do not depend
/// on the pool size.
pub fn predict(params: &TFNetParams, image: &Raster<u8>, core_w: usize, core_h: usize, margin: usize) -> Result<Prediction> {
    let recs = split_raster(image, core_w, core_h, margin)?;
    let tiles: Vec<(TileRecord, Raster<f64>, Option<Raster<f64>>)> = recs
        .par_iter()
        .map(|rec| {
            let aug = augment_tile(image, rec)?;
            let t = image_to_tensor(&aug);
            let shape = t.shape().to_vec();
            let x = Tensor::new(vec![1, shape[0], shape[1], shape[2]], t.into_data())?;
            let (b, e) = params.infer(&x)?;
            let e = e.map(|e| core_raster(&e, margin)).transpose()?;
            Ok((*rec, core_raster(&b, margin)?, e))
        })
        .collect::<Result<_>>()?;
    let building = stitch(&tiles.iter().map(|(r, b, _)| (*r, b.clone())).collect::<Vec<_>>())?;
    let edge = if params.config().edge_head {
        Some(stitch(
            &tiles
                .iter()
                .map(|(r, _, e)| (*r, e.clone().expect("edge head present")))
                .collect::<Vec<_>>(),
        )?)
    } else {
        None
    };
    Ok(Prediction {
        building: with_geo(building, image),
        edge: edge.map(|e| with_geo(e, image)),
    })
}

fn with_geo(mut r: Raster<f64>, like: &Raster<u8>) -> Raster<f64> {
    r.geotransform = like.geotransform;
    r
}
