//! The tuning-fork segmentation network: one dilated residual encoder whose
//! features feed two architecturally identical ASPP decoders, one emitting
//! building-mask logits and the other edge-mask logits.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{load_checkpoint, save_checkpoint, ConvSpec, Gradients, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TFNetConfig {
    pub input_channels: usize,
    pub stem_channels: usize,
    pub stem_stride: usize,
    pub stage_channels: Vec<usize>,
    pub stage_strides: Vec<usize>,
    pub stage_dilations: Vec<usize>,
    /// Rate 1 is a 1×1 branch; larger rates are 3×3 dilated branches.
    pub aspp_rates: Vec<usize>,
    pub decoder_channels: usize,
    pub low_level_channels: usize,
    pub output_stride: usize,
    /// `false` drops the edge decoder (single-decoder ablation).
    #[serde(default = "default_true")]
    pub edge_head: bool,
}

fn default_true() -> bool {
    true
}

impl Default for TFNetConfig {
    fn default() -> Self {
        Self::desk_scale()
    }
}

impl TFNetConfig {
    /// Stride-2 stem, residual stages (16, 32, 64) with the last one dilated
    /// instead of strided, ASPP rates (1, 3, 6) plus image pooling.
    pub fn desk_scale() -> Self {
        TFNetConfig {
            input_channels: 3,
            stem_channels: 16,
            stem_stride: 2,
            stage_channels: vec![16, 32, 64],
            stage_strides: vec![2, 2, 1],
            stage_dilations: vec![1, 1, 2],
            aspp_rates: vec![1, 3, 6],
            decoder_channels: 16,
            low_level_channels: 8,
            output_stride: 8,
            edge_head: true,
        }
    }

    /// A few channels per layer; small enough for exhaustive finite differences.
    pub fn tiny() -> Self {
        TFNetConfig {
            input_channels: 3,
            stem_channels: 4,
            stem_stride: 2,
            stage_channels: vec![4, 8],
            stage_strides: vec![2, 1],
            stage_dilations: vec![1, 2],
            aspp_rates: vec![1, 2],
            decoder_channels: 4,
            low_level_channels: 2,
            output_stride: 4,
            edge_head: true,
        }
    }

    pub fn without_edge_head(mut self) -> Self {
        self.edge_head = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_channels", self.input_channels),
            ("stem_channels", self.stem_channels),
            ("stem_stride", self.stem_stride),
            ("decoder_channels", self.decoder_channels),
            ("low_level_channels", self.low_level_channels),
            ("output_stride", self.output_stride),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be positive")));
        }
        let n = self.stage_channels.len();
        if n == 0 || self.stage_strides.len() != n || self.stage_dilations.len() != n {
            return Err(Error::invalid(
                "stage_channels, stage_strides and stage_dilations must be non-empty and equally long",
            ));
        }
        if self
            .stage_channels
            .iter()
            .chain(&self.stage_strides)
            .chain(&self.stage_dilations)
            .any(|&v| v == 0)
        {
            return Err(Error::invalid("stage channels, strides and dilations must be positive"));
        }
        if self.aspp_rates.is_empty() || self.aspp_rates.contains(&0) {
            return Err(Error::invalid("aspp_rates must be a non-empty list of positive rates"));
        }
        let total: usize = self.stem_stride * self.stage_strides.iter().product::<usize>();
        if total != self.output_stride {
            return Err(Error::invalid(format!(
                "stem and stage strides multiply to {total}, not the declared output stride {}",
                self.output_stride
            )));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn num_heads(&self) -> usize {
        if self.edge_head {
            2
        } else {
            1
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ConvLayer {
    spec: ConvSpec,
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct ResBlock {
    conv1: ConvLayer,
    conv2: ConvLayer,
    shortcut: Option<ConvLayer>,
}

#[derive(Debug, Clone, PartialEq)]
struct EncoderLayout {
    stem: ConvLayer,
    stages: Vec<ResBlock>,
}

#[derive(Debug, Clone, PartialEq)]
struct DecoderLayout {
    branches: Vec<ConvLayer>,
    pool: ConvLayer,
    project: ConvLayer,
    low_level: ConvLayer,
    refine: ConvLayer,
    classifier: ConvLayer,
}

/// Which decoder of the fork.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Building = 0,
    Edge = 1,
}

impl Head {
    fn name(self) -> &'static str {
        match self {
            Head::Building => "building",
            Head::Edge => "edge",
        }
    }
}

/// Weights of a [`TFNetConfig`], stored flat with a layout describing how
/// layers index into them.
#[derive(Debug, Clone, PartialEq)]
pub struct TFNetParams {
    config: TFNetConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    encoder: EncoderLayout,
    decoders: Vec<DecoderLayout>,
}

struct LayoutBuilder {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
}

impl LayoutBuilder {
    fn conv(&mut self, name: &str, spec: ConvSpec) -> ConvLayer {
        self.names.push(format!("{name}.weight"));
        self.shapes.push(spec.weight_shape().to_vec());
        self.names.push(format!("{name}.bias"));
        self.shapes.push(vec![spec.out_channels]);
        ConvLayer {
            spec,
            weight: self.names.len() - 2,
            bias: self.names.len() - 1,
        }
    }

    fn decoder(&mut self, cfg: &TFNetConfig, head: Head) -> DecoderLayout {
        let deep = *cfg.stage_channels.last().expect("validated");
        let dc = cfg.decoder_channels;
        let prefix = format!("decoder.{}", head.name());
        let branches = cfg
            .aspp_rates
            .iter()
            .enumerate()
            .map(|(i, &rate)| {
                let spec = if rate == 1 {
                    ConvSpec::new(deep, dc, 1)
                } else {
                    ConvSpec::new(deep, dc, 3).dilation(rate).same_padding()
                };
                self.conv(&format!("{prefix}.aspp.{i}"), spec)
            })
            .collect();
        let pool = self.conv(&format!("{prefix}.aspp.pool"), ConvSpec::new(deep, dc, 1));
        let n_branches = cfg.aspp_rates.len() + 1;
        let project = self.conv(&format!("{prefix}.aspp.project"), ConvSpec::new(n_branches * dc, dc, 1));
        let low_level = self.conv(
            &format!("{prefix}.low_level"),
            ConvSpec::new(cfg.stem_channels, cfg.low_level_channels, 1),
        );
        let refine = self.conv(
            &format!("{prefix}.refine"),
            ConvSpec::new(dc + cfg.low_level_channels, dc, 3).same_padding(),
        );
        let classifier = self.conv(&format!("{prefix}.classifier"), ConvSpec::new(dc, 1, 1));
        DecoderLayout {
            branches,
            pool,
            project,
            low_level,
            refine,
            classifier,
        }
    }
}

fn layout(cfg: &TFNetConfig) -> (Vec<String>, Vec<Vec<usize>>, EncoderLayout, Vec<DecoderLayout>) {
    let mut b = LayoutBuilder {
        names: Vec::new(),
        shapes: Vec::new(),
    };
    let stem = b.conv(
        "encoder.stem",
        ConvSpec::new(cfg.input_channels, cfg.stem_channels, 3)
            .stride(cfg.stem_stride)
            .same_padding(),
    );
    let mut in_c = cfg.stem_channels;
    let mut stages = Vec::new();
    for (i, ((&out_c, &s), &d)) in cfg
        .stage_channels
        .iter()
        .zip(&cfg.stage_strides)
        .zip(&cfg.stage_dilations)
        .enumerate()
    {
        let name = format!("encoder.stage{}", i + 1);
        let conv1 = b.conv(
            &format!("{name}.conv1"),
            ConvSpec::new(in_c, out_c, 3).stride(s).dilation(d).same_padding(),
        );
        let conv2 = b.conv(
            &format!("{name}.conv2"),
            ConvSpec::new(out_c, out_c, 3).dilation(d).same_padding(),
        );
        let shortcut = (s != 1 || in_c != out_c)
            .then(|| b.conv(&format!("{name}.shortcut"), ConvSpec::new(in_c, out_c, 1).stride(s)));
        stages.push(ResBlock {
            conv1,
            conv2,
            shortcut,
        });
        in_c = out_c;
    }
    let mut decoders = vec![b.decoder(cfg, Head::Building)];
    if cfg.edge_head {
        decoders.push(b.decoder(cfg, Head::Edge));
    }
    (b.names, b.shapes, EncoderLayout { stem, stages }, decoders)
}

/// Variables for every parameter tensor recorded on one tape.
#[derive(Debug, Clone)]
pub struct BoundParams(Vec<Var>);

impl BoundParams {
    fn get(&self, idx: usize) -> Var {
        self.0[idx]
    }

    /// Routes parameter `idx` through `var` instead of its bound leaf.
    pub fn replace(&mut self, idx: usize, var: Var) {
        self.0[idx] = var;
    }

    pub fn var(&self, idx: usize) -> Var {
        self.0[idx]
    }
}

/// Deep and low-level encoder outputs.
#[derive(Debug, Clone, Copy)]
pub struct EncoderFeatures {
    pub deep: Var,
    pub low_level: Var,
}

/// Logits of both heads; `edge` is absent for the single-decoder ablation.
#[derive(Debug, Clone, Copy)]
pub struct HeadLogits {
    pub building: Var,
    pub edge: Option<Var>,
}

impl TFNetParams {
    /// He-normal conv weights (std √(2/fan_in)) and zero biases from a seeded generator.
    pub fn build(config: TFNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (names, shapes, encoder, decoders) = layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = names
            .iter()
            .zip(&shapes)
            .map(|(name, shape)| {
                if name.ends_with(".bias") {
                    Tensor::zeros(shape)
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                    Tensor::from_fn(shape, |_| normal.sample(&mut rng))
                }
            })
            .collect();
        Ok(TFNetParams {
            config,
            names,
            tensors,
            encoder,
            decoders,
        })
    }

    /// Rebuilds a model from named tensors; names and shapes must match the config's layout.
    pub fn from_named(config: TFNetConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let (names, shapes, encoder, decoders) = layout(&config);
        let mut by_name: BTreeMap<String, Tensor> = named.into_iter().collect();
        let mut tensors = Vec::with_capacity(names.len());
        for (name, shape) in names.iter().zip(&shapes) {
            let t = by_name
                .remove(name)
                .ok_or_else(|| Error::Data(format!("checkpoint lacks tensor {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Data(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            tensors.push(t);
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Data(format!("checkpoint has unexpected tensor {extra}")));
        }
        Ok(TFNetParams {
            config,
            names,
            tensors,
            encoder,
            decoders,
        })
    }

    pub fn config(&self) -> &TFNetConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(move |i| &mut self.tensors[i])
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Copies the building decoder's weights into the edge decoder.
    pub fn mirror_decoders(&mut self) -> Result<()> {
        let [building, edge] = self.decoders.as_slice() else {
            return Err(Error::State("model has a single decoder".into()));
        };
        let pairs = decoder_params(building).into_iter().zip(decoder_params(edge));
        for (src, dst) in pairs.collect::<Vec<_>>() {
            self.tensors[dst] = self.tensors[src].detached();
        }
        Ok(())
    }

    /// Records every parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        BoundParams(self.tensors.iter().map(|t| tape.leaf(t.clone())).collect())
    }

    /// Adds tape gradients into each parameter's gradient buffer. Parameters
    /// the loss does not reach receive zeros.
    pub fn accumulate_grads(&mut self, bound: &BoundParams, grads: &Gradients) -> Result<()> {
        for (t, &v) in self.tensors.iter_mut().zip(&bound.0) {
            match grads.get(v) {
                Some(g) => t.accumulate_grad(g)?,
                None => t.accumulate_grad(&vec![0.0; t.numel()])?,
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::clear_grad);
    }

    /// Writes `<dir>/config.json` plus the weight checkpoint `<dir>/<stem>.json|.bin`.
    pub fn save(&self, dir: &Path, stem: &str, metadata: BTreeMap<String, serde_json::Value>) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg_path = dir.join("config.json");
        let json = serde_json::to_vec_pretty(&self.config).map_err(|e| Error::json(&cfg_path, e))?;
        std::fs::write(&cfg_path, json).map_err(|e| Error::io(&cfg_path, e))?;
        let named: Vec<(&str, &Tensor)> = self
            .names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter())
            .collect();
        save_checkpoint(&dir.join(format!("{stem}.json")), &self.config.hash(), &named, metadata)
    }

    /// Loads a model saved by [`TFNetParams::save`]; the checkpoint must match the config hash.
    pub fn load(dir: &Path, stem: &str) -> Result<(Self, BTreeMap<String, serde_json::Value>)> {
        let cfg_path = dir.join("config.json");
        let raw = std::fs::read(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let config: TFNetConfig = serde_json::from_slice(&raw).map_err(|e| Error::json(&cfg_path, e))?;
        let (manifest, named) = load_checkpoint(&dir.join(format!("{stem}.json")), Some(&config.hash()))?;
        Ok((Self::from_named(config, named)?, manifest.metadata))
    }

    /// Inference without keeping gradients: building logits and, when present, edge logits.
    pub fn infer(&self, x: &Tensor) -> Result<(Tensor, Option<Tensor>)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let heads = tfnet_forward(self, &bound, &mut tape, xv)?;
        let building = tape.value(heads.building).detached();
        let edge = heads.edge.map(|e| tape.value(e).detached());
        Ok((building, edge))
    }
}

fn decoder_params(d: &DecoderLayout) -> Vec<usize> {
    d.branches
        .iter()
        .chain([&d.pool, &d.project, &d.low_level, &d.refine, &d.classifier])
        .flat_map(|c| [c.weight, c.bias])
        .collect()
}

fn conv(tape: &mut Tape, bound: &BoundParams, layer: &ConvLayer, x: Var) -> Result<Var> {
    tape.conv2d(x, bound.get(layer.weight), bound.get(layer.bias), layer.spec)
}

fn conv_relu(tape: &mut Tape, bound: &BoundParams, layer: &ConvLayer, x: Var) -> Result<Var> {
    let y = conv(tape, bound, layer, x)?;
    Ok(tape.relu(y))
}

/// Stem plus residual stages. The low-level tap is the stem output.
pub fn encoder_forward(
    params: &TFNetParams,
    bound: &BoundParams,
    tape: &mut Tape,
    x: Var,
) -> Result<EncoderFeatures> {
    let [_, c, h, w] = tape.value(x).dims4()?;
    let cfg = &params.config;
    if c != cfg.input_channels {
        return Err(Error::invalid(format!(
            "model expects {} input channels, got {c}",
            cfg.input_channels
        )));
    }
    if h % cfg.output_stride != 0 || w % cfg.output_stride != 0 {
        return Err(Error::invalid(format!(
            "input {h}×{w} is not divisible by the output stride {}",
            cfg.output_stride
        )));
    }
    tape.count("encoder");
    let low_level = conv_relu(tape, bound, &params.encoder.stem, x)?;
    let mut feat = low_level;
    for block in &params.encoder.stages {
        let a = conv_relu(tape, bound, &block.conv1, feat)?;
        let b = conv(tape, bound, &block.conv2, a)?;
        let skip = match &block.shortcut {
            Some(layer) => conv(tape, bound, layer, feat)?,
            None => feat,
        };
        let sum = tape.add(b, skip)?;
        feat = tape.relu(sum);
    }
    Ok(EncoderFeatures {
        deep: feat,
        low_level,
    })
}

/// ASPP over the deep features, fused with the low-level tap, refined and
/// upsampled back to the input resolution. Returns one-channel logits.
pub fn aspp_decoder_forward(
    params: &TFNetParams,
    bound: &BoundParams,
    tape: &mut Tape,
    head: Head,
    features: EncoderFeatures,
) -> Result<Var> {
    let cfg = &params.config;
    let dec = params
        .decoders
        .get(head as usize)
        .ok_or_else(|| Error::invalid(format!("model has no {} decoder", head.name())))?;
    tape.count("decoder");
    let [_, _, dh, dw] = tape.value(features.deep).dims4()?;
    let [_, _, lh, lw] = tape.value(features.low_level).dims4()?;
    let up = cfg.output_stride / cfg.stem_stride;
    if dh * up != lh || dw * up != lw {
        return Err(Error::invalid(format!(
            "deep features {dh}×{dw} and low-level features {lh}×{lw} are inconsistent with the config"
        )));
    }

    let mut branches = Vec::with_capacity(dec.branches.len() + 1);
    for layer in &dec.branches {
        branches.push(conv_relu(tape, bound, layer, features.deep)?);
    }
    let pooled = tape.global_avg_pool(features.deep)?;
    let pooled = conv_relu(tape, bound, &dec.pool, pooled)?;
    branches.push(tape.broadcast_spatial(pooled, dh, dw)?);
    let cat = tape.concat_channels(&branches)?;
    let aspp = conv_relu(tape, bound, &dec.project, cat)?;

    let aspp_up = tape.upsample(aspp, up)?;
    let low = conv_relu(tape, bound, &dec.low_level, features.low_level)?;
    let fused = tape.concat_channels(&[aspp_up, low])?;
    let refined = conv_relu(tape, bound, &dec.refine, fused)?;
    let logits = conv(tape, bound, &dec.classifier, refined)?;
    tape.upsample(logits, cfg.stem_stride)
}

/// Runs the encoder once and each decoder once on the shared features.
pub fn tfnet_forward(params: &TFNetParams, bound: &BoundParams, tape: &mut Tape, x: Var) -> Result<HeadLogits> {
    let features = encoder_forward(params, bound, tape, x)?;
    let building = aspp_decoder_forward(params, bound, tape, Head::Building, features)?;
    let edge = if params.config.edge_head {
        Some(aspp_decoder_forward(params, bound, tape, Head::Edge, features)?)
    } else {
        None
    };
    Ok(HeadLogits { building, edge })
}
