use std::collections::BTreeMap;

use super::ops::{self, ConvSpec, FocalParams};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, spec: ConvSpec },
    Relu(Var),
    Sigmoid(Var),
    Upsample { x: Var, factor: usize },
    GlobalAvgPool(Var),
    Broadcast { x: Var, height: usize, width: usize },
    Concat(Vec<Var>),
    Add(Var, Var),
    Crop { x: Var, k: usize },
    Focal { logits: Var, target: Tensor, params: FocalParams },
    WeightedSum(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records one forward pass so its gradient can be taken once.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    counters: BTreeMap<String, usize>,
    consumed: bool,
}

/// Gradients of a scalar with respect to every node of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Bumps a named invocation counter (used to audit how often a block runs).
    pub fn count(&mut self, name: &str) {
        *self.counters.entry(name.to_string()).or_default() += 1;
    }

    pub fn counter(&self, name: &str) -> usize {
        self.counters.get(name).copied().unwrap_or(0)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value.detached(), Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, spec: ConvSpec) -> Result<Var> {
        let y = ops::conv2d(self.value(x), self.value(w), self.value(b), &spec)?;
        Ok(self.push(y, Op::Conv2d { x, w, b, spec }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = ops::relu(self.value(x));
        self.push(y, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = ops::sigmoid(self.value(x));
        self.push(y, Op::Sigmoid(x))
    }

    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let y = ops::bilinear_upsample(self.value(x), factor)?;
        Ok(self.push(y, Op::Upsample { x, factor }))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let y = ops::global_avg_pool(self.value(x))?;
        Ok(self.push(y, Op::GlobalAvgPool(x)))
    }

    pub fn broadcast_spatial(&mut self, x: Var, height: usize, width: usize) -> Result<Var> {
        let y = ops::broadcast_spatial(self.value(x), height, width)?;
        Ok(self.push(y, Op::Broadcast { x, height, width }))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = xs.iter().map(|&v| self.value(v)).collect();
        let y = ops::concat_channels(&values)?;
        Ok(self.push(y, Op::Concat(xs.to_vec())))
    }

    pub fn add(&mut self, x: Var, y: Var) -> Result<Var> {
        let z = ops::add(self.value(x), self.value(y))?;
        Ok(self.push(z, Op::Add(x, y)))
    }

    pub fn crop_core(&mut self, x: Var, k: usize) -> Result<Var> {
        let y = ops::crop_core(self.value(x), k)?;
        Ok(self.push(y, Op::Crop { x, k }))
    }

    pub fn focal_loss(&mut self, logits: Var, target: &Tensor, params: FocalParams) -> Result<Var> {
        let loss = ops::focal_loss(self.value(logits), target, &params)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Focal {
                logits,
                target: target.detached(),
                params,
            },
        ))
    }

    /// `Σ weight_i · term_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, w) in terms {
            total += w * self.value(v).item()?;
        }
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec())))
    }

    /// Reverse pass from a single-element node. A tape supports one backward.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::State("backward already ran on this tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid("backward needs a scalar output"));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let mut send = |v: Var, contrib: Vec<f64>| match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                slot @ None => *slot = Some(contrib),
            };
            match &node.op {
                Op::Leaf => {}
                Op::Conv2d { x, w, b, spec } => {
                    let (gx, gw, gb) = ops::conv2d_backward(
                        &self.nodes[x.0].value,
                        &self.nodes[w.0].value,
                        &self.nodes[b.0].value,
                        spec,
                        &g,
                    )?;
                    send(*x, gx);
                    send(*w, gw);
                    send(*b, gb);
                }
                Op::Relu(x) => send(*x, ops::relu_backward(&self.nodes[x.0].value, &g)),
                Op::Sigmoid(x) => send(*x, ops::sigmoid_backward(&node.value, &g)),
                Op::Upsample { x, factor } => send(
                    *x,
                    ops::bilinear_upsample_backward(self.nodes[x.0].value.shape(), *factor, &g),
                ),
                Op::GlobalAvgPool(x) => {
                    send(*x, ops::global_avg_pool_backward(self.nodes[x.0].value.shape(), &g))
                }
                Op::Broadcast { x, height, width } => {
                    send(*x, ops::broadcast_spatial_backward(&g, *height, *width))
                }
                Op::Concat(xs) => {
                    let shapes: Vec<&[usize]> =
                        xs.iter().map(|v| self.nodes[v.0].value.shape()).collect();
                    for (v, part) in xs.iter().zip(ops::split_channels(&shapes, &g)) {
                        send(*v, part);
                    }
                }
                Op::Add(x, y) => {
                    send(*x, g.clone());
                    send(*y, g.clone());
                }
                Op::Crop { x, k } => {
                    send(*x, ops::crop_core_backward(self.nodes[x.0].value.shape(), *k, &g))
                }
                Op::Focal {
                    logits,
                    target,
                    params,
                } => {
                    let local = ops::focal_loss_backward(&self.nodes[logits.0].value, target, params)?;
                    send(*logits, local.into_iter().map(|d| d * g[0]).collect());
                }
                Op::WeightedSum(terms) => {
                    for &(v, w) in terms {
                        send(v, vec![w * g[0]]);
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }
}
