//! Chains of differentiable blocks, three-way splitting and grafting.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Layer, LayerCache, LayerSpec, Shape3, Tensor};

/// Named group of layers; the unit of splitting.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub name: String,
    pub layers: Vec<Layer>,
}

impl Block {
    pub fn new(name: impl Into<String>, layers: Vec<Layer>) -> Self {
        Self {
            name: name.into(),
            layers,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }
}

/// Serializable architecture of a block, without weights.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub name: String,
    pub layers: Vec<LayerSpec>,
}

/// Per-parameter-tensor gradients, in [`BlockChain::params`] order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients(pub Vec<Vec<f64>>);

impl Gradients {
    pub fn l2_norm(&self) -> f64 {
        self.0
            .iter()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }
}

/// Activations recorded by a forward pass, consumed by the backward pass.
#[derive(Debug)]
pub struct Tape {
    caches: Vec<LayerCache>,
}

/// Ordered chain of blocks with a fixed per-sample input shape.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockChain {
    input: Shape3,
    blocks: Vec<Block>,
}

impl BlockChain {
    /// Builds a chain, checking that every layer accepts its predecessor's output.
    pub fn new(input: Shape3, blocks: Vec<Block>) -> Result<Self> {
        let chain = Self { input, blocks };
        chain.output_shape()?;
        Ok(chain)
    }

    /// A chain with no blocks; it maps its input to itself.
    pub fn empty(input: Shape3) -> Self {
        Self {
            input,
            blocks: Vec::new(),
        }
    }

    /// Freshly initialized chain from an architecture description.
    pub fn from_specs(input: Shape3, specs: &[BlockSpec], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = specs
            .iter()
            .map(|b| {
                Block::new(
                    b.name.clone(),
                    b.layers
                        .iter()
                        .map(|s| Layer::init(s.clone(), &mut rng))
                        .collect(),
                )
            })
            .collect();
        Self::new(input, blocks)
    }

    pub fn input_shape(&self) -> Shape3 {
        self.input
    }

    pub fn output_shape(&self) -> Result<Shape3> {
        self.layers()
            .try_fold(self.input, |s, l| l.spec().output_shape(s))
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn specs(&self) -> Vec<BlockSpec> {
        self.blocks
            .iter()
            .map(|b| BlockSpec {
                name: b.name.clone(),
                layers: b.layers.iter().map(|l| l.spec().clone()).collect(),
            })
            .collect()
    }

    pub fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.blocks.iter().flat_map(|b| b.layers.iter())
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Layer> {
        self.blocks.iter_mut().flat_map(|b| b.layers.iter_mut())
    }

    pub fn param_counts(&self) -> Vec<usize> {
        self.blocks.iter().map(Block::param_count).collect()
    }

    pub fn params(&self) -> Vec<&[f64]> {
        self.layers().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers_mut().flat_map(Layer::params_mut).collect()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let got = Shape3::of(x);
        if got != self.input {
            return Err(Error::shape(
                "chain input",
                &self.input.to_vec(),
                &got.to_vec(),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in self.layers() {
            h = layer.forward(&h, false)?.0;
        }
        Ok(h)
    }

    /// Forward pass that records the activations needed for backpropagation.
    pub fn forward_train(&self, x: &Tensor) -> Result<(Tensor, Tape)> {
        self.check_input(x)?;
        let mut h = x.clone();
        let mut caches = Vec::new();
        for layer in self.layers() {
            let (y, c) = layer.forward(&h, true)?;
            caches.push(c.expect("cache requested"));
            h = y;
        }
        Ok((h, Tape { caches }))
    }

    fn backward_impl(
        &self,
        tape: &Tape,
        grad_out: &Tensor,
        want_input: bool,
        want_params: bool,
    ) -> Result<(Option<Tensor>, Gradients)> {
        let layers: Vec<&Layer> = self.layers().collect();
        if layers.len() != tape.caches.len() {
            return Err(Error::Invalid("tape was recorded by a different chain".into()));
        }
        let mut grad = grad_out.clone();
        let mut per_layer = Vec::with_capacity(layers.len());
        for (i, (layer, cache)) in layers.iter().zip(&tape.caches).enumerate().rev() {
            // The first layer only needs an input gradient if the caller asked for one.
            let need_dx = want_input || i > 0;
            let (dx, grads) = layer.backward(cache, &grad, need_dx, want_params)?;
            per_layer.push(grads);
            if let Some(dx) = dx {
                grad = dx;
            }
        }
        per_layer.reverse();
        let grads = Gradients(per_layer.into_iter().flatten().collect());
        Ok((want_input.then_some(grad), grads))
    }

    /// Parameter gradients of this chain.
    pub fn backward(&self, tape: &Tape, grad_out: &Tensor) -> Result<Gradients> {
        Ok(self.backward_impl(tape, grad_out, false, true)?.1)
    }

    /// Gradient with respect to the chain input only; no parameter
    /// gradients are formed.
    pub fn backward_input(&self, tape: &Tape, grad_out: &Tensor) -> Result<Tensor> {
        let (dx, _) = self.backward_impl(tape, grad_out, true, false)?;
        Ok(dx.expect("input gradient requested"))
    }

    /// Both the input gradient and parameter gradients.
    pub fn backward_full(&self, tape: &Tape, grad_out: &Tensor) -> Result<(Tensor, Gradients)> {
        let (dx, g) = self.backward_impl(tape, grad_out, true, true)?;
        Ok((dx.expect("input gradient requested"), g))
    }
}

/// Block indices splitting a chain into front `[0, front)`, middle
/// `[front, mid_end)` and remaining `[mid_end, len)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SplitSpec {
    pub front: usize,
    pub mid_end: usize,
}

impl SplitSpec {
    pub const fn new(front: usize, mid_end: usize) -> Self {
        Self { front, mid_end }
    }

    pub fn validate(&self, len: usize) -> Result<()> {
        if self.front == 0 {
            return Err(Error::Range {
                name: "front",
                value: 0,
                valid: format!("1..={len} (empty front end)"),
            });
        }
        if self.front > len {
            return Err(Error::Range {
                name: "front",
                value: self.front,
                valid: format!("1..={len}"),
            });
        }
        if self.mid_end < self.front || self.mid_end > len {
            return Err(Error::Range {
                name: "mid_end",
                value: self.mid_end,
                valid: format!("{}..={len}", self.front),
            });
        }
        Ok(())
    }
}

/// The three consecutive parts of a split chain.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitParts {
    pub front: BlockChain,
    pub mid: BlockChain,
    pub last: BlockChain,
}

pub fn split(chain: &BlockChain, spec: SplitSpec) -> Result<SplitParts> {
    spec.validate(chain.len())?;
    let front_blocks = chain.blocks[..spec.front].to_vec();
    let mid_blocks = chain.blocks[spec.front..spec.mid_end].to_vec();
    let last_blocks = chain.blocks[spec.mid_end..].to_vec();
    let front = BlockChain::new(chain.input, front_blocks)?;
    let mid = BlockChain::new(front.output_shape()?, mid_blocks)?;
    let last = BlockChain::new(mid.output_shape()?, last_blocks)?;
    Ok(SplitParts { front, mid, last })
}

/// New front end mirroring `template`, with the first parameterized layer
/// reading `in_channels` input channels. Deterministic for a given seed.
pub fn build_grafted_frontend(
    template: &BlockChain,
    in_channels: usize,
    seed: u64,
) -> Result<BlockChain> {
    if in_channels == 0 {
        return Err(Error::Config("in_channels must be at least 1".into()));
    }
    if template.layers().next().is_none() {
        return Err(Error::Invalid("front-end template has no layers".into()));
    }
    let input = Shape3::new(in_channels, template.input.height, template.input.width);
    let mut specs = template.specs();
    let mut replaced = false;
    'outer: for block in &mut specs {
        for layer in &mut block.layers {
            match layer {
                LayerSpec::Conv2d { in_channels: c, .. } => {
                    *c = in_channels;
                    replaced = true;
                    break 'outer;
                }
                LayerSpec::Linear { in_features, .. } => {
                    *in_features = input.numel();
                    replaced = true;
                    break 'outer;
                }
                _ => {}
            }
        }
    }
    if !replaced {
        return Err(Error::Invalid(
            "front-end template has no parameterized layer".into(),
        ));
    }
    BlockChain::from_specs(input, &specs, seed)
}

pub fn count_params(chain: &BlockChain) -> usize {
    chain.param_counts().iter().sum()
}

/// Parameter count of `chain` and its share of `total`.
pub fn param_fraction(chain: &BlockChain, total: usize) -> (usize, f64) {
    let n = count_params(chain);
    let frac = if total == 0 { 0.0 } else { n as f64 / total as f64 };
    (n, frac)
}

/// A trainable front end feeding the frozen middle and remaining parts of
/// a pretrained chain. The frozen parts are behind `Arc` and never exposed
/// mutably.
#[derive(Clone, Debug)]
pub struct GraftedModel {
    pub gn_front: BlockChain,
    mid: Arc<BlockChain>,
    last: Arc<BlockChain>,
}

pub fn graft(gn_front: BlockChain, mid: Arc<BlockChain>, last: Arc<BlockChain>) -> Result<GraftedModel> {
    let out = gn_front.output_shape()?;
    if out != mid.input_shape() {
        return Err(Error::shape(
            "grafted front-end output vs middle-net input",
            &mid.input_shape().to_vec(),
            &out.to_vec(),
        ));
    }
    let mid_out = mid.output_shape()?;
    if mid_out != last.input_shape() {
        return Err(Error::shape(
            "middle-net output vs remaining-layers input",
            &last.input_shape().to_vec(),
            &mid_out.to_vec(),
        ));
    }
    Ok(GraftedModel {
        gn_front,
        mid,
        last,
    })
}

impl GraftedModel {
    pub fn mid(&self) -> &BlockChain {
        &self.mid
    }

    pub fn last(&self) -> &BlockChain {
        &self.last
    }

    pub fn mid_shared(&self) -> Arc<BlockChain> {
        Arc::clone(&self.mid)
    }

    pub fn last_shared(&self) -> Arc<BlockChain> {
        Arc::clone(&self.last)
    }

    pub fn forward(&self, v: &Tensor) -> Result<Tensor> {
        let h = self.gn_front.forward(v)?;
        let r = self.mid.forward(&h)?;
        self.last.forward(&r)
    }

    pub fn trainable_params(&self) -> usize {
        count_params(&self.gn_front)
    }

    pub fn total_params(&self) -> usize {
        count_params(&self.gn_front) + count_params(&self.mid) + count_params(&self.last)
    }
}

/// LeNet-5 for 1x28x28 inputs: two conv+pool blocks then three FC blocks.
pub fn lenet5(in_channels: usize, seed: u64) -> BlockChain {
    BlockChain::from_specs(Shape3::new(in_channels, 28, 28), &lenet5_specs(in_channels), seed)
        .expect("LeNet-5 block shapes are consistent")
}

pub fn lenet5_specs(in_channels: usize) -> Vec<BlockSpec> {
    let block = |name: &str, layers: Vec<LayerSpec>| BlockSpec {
        name: name.to_string(),
        layers,
    };
    vec![
        block(
            "conv1",
            vec![
                LayerSpec::conv(in_channels, 6, 5, 2),
                LayerSpec::Relu,
                LayerSpec::MaxPool2d { size: 2 },
            ],
        ),
        block(
            "conv2",
            vec![
                LayerSpec::conv(6, 16, 5, 0),
                LayerSpec::Relu,
                LayerSpec::MaxPool2d { size: 2 },
            ],
        ),
        block("fc1", vec![LayerSpec::linear(400, 120), LayerSpec::Relu]),
        block("fc2", vec![LayerSpec::linear(120, 84), LayerSpec::Relu]),
        block("fc3", vec![LayerSpec::linear(84, 10)]),
    ]
}

/// Both conv blocks in the front end, the first FC block as middle net.
pub const LENET_DEFAULT_SPLIT: SplitSpec = SplitSpec::new(2, 3);

/// The six (front depth x middle depth) variants of the reference backbone:
/// front depths 1..=3, middle depths 1..=2.
pub fn lenet_split_variants() -> Vec<SplitSpec> {
    let mut out = Vec::new();
    for front in 1..=3 {
        for mid in 1..=2 {
            out.push(SplitSpec::new(front, front + mid));
        }
    }
    out
}
