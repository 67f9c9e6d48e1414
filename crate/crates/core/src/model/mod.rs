//! The RAGNet_v2 encoder/classifier and its VGG baselines.
//!
//! Networks are represented as an explicit layer DAG
//! ([`ArchitectureGraph`]) interpreted by a small executor. The graph
//! carries propagated output shapes so architecture audits and shape
//! checks need no forward pass; parameters live outside the graph in
//! [`ModelParameters`] so the same graph drives f32 training and f64
//! gradient checking.

pub mod bundle;
pub mod ops;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::BScan;
use crate::scalar::Scalar;
use crate::tensor::Tensor3;
use bundle::WeightBundle;
use ops::{Activation, ConvSpec};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unknown backbone '{0}'")]
    UnknownBackbone(String),
    #[error("input shape {0}x{1} cannot be reduced through the backbone")]
    UnsupportedInputShape(usize, usize),
    #[error("non-finite logit")]
    NonFiniteLogit,
    #[error("empty batch")]
    EmptyBatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    Vgg16,
    Vgg19,
}

impl Backbone {
    /// Convolutions per block.
    pub fn block_depths(self) -> [usize; 5] {
        match self {
            Backbone::Vgg16 => [2, 2, 3, 3, 3],
            Backbone::Vgg19 => [2, 2, 4, 4, 4],
        }
    }
}

impl std::str::FromStr for Backbone {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "vgg16" => Ok(Backbone::Vgg16),
            "vgg19" => Ok(Backbone::Vgg19),
            other => Err(ModelError::UnknownBackbone(other.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchVariant {
    RagnetV2,
    VggBaseline,
}

/// Structural configuration; the canonical sizes come from the production
/// setting, the reduced ones exist for desk-scale experiments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub backbone: Backbone,
    pub variant: ArchVariant,
    /// Input image shape (rows, cols); fed as 3 replicated channels.
    pub input_shape: (usize, usize),
    pub block_channels: [usize; 5],
    pub embedding_channels: usize,
}

impl ArchConfig {
    pub fn canonical(variant: ArchVariant, backbone: Backbone) -> Self {
        Self {
            backbone,
            variant,
            input_shape: crate::dataset::CANONICAL_SHAPE,
            block_channels: [64, 128, 256, 512, 512],
            embedding_channels: 60,
        }
    }

    /// Small configuration for CPU desk runs (same topology).
    pub fn reduced(variant: ArchVariant, backbone: Backbone, input_shape: (usize, usize)) -> Self {
        Self {
            backbone,
            variant,
            input_shape,
            block_channels: [12, 16, 24, 32, 32],
            embedding_channels: 12,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Map { h: usize, w: usize, c: usize },
    Vector { d: usize },
}

impl Shape {
    pub fn map(self) -> (usize, usize, usize) {
        match self {
            Shape::Map { h, w, c } => (h, w, c),
            Shape::Vector { .. } => panic!("expected map shape"),
        }
    }

    pub fn vector(self) -> usize {
        match self {
            Shape::Vector { d } => d,
            Shape::Map { .. } => panic!("expected vector shape"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LayerOp {
    Input { h: usize, w: usize, c: usize },
    Conv(ConvSpec),
    MaxPool { size: usize, stride: usize },
    Concat,
    Mul,
    GlobalAvgPool,
    Dense { in_dim: usize, out_dim: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNode {
    pub name: String,
    pub op: LayerOp,
    pub inputs: Vec<usize>,
    pub out_shape: Shape,
    /// Parameters of this layer are excluded from training.
    pub frozen: bool,
}

impl LayerNode {
    pub fn has_params(&self) -> bool {
        matches!(self.op, LayerOp::Conv(_) | LayerOp::Dense { .. })
    }
}

/// Ordered layer DAG with named probe points for traces and CAM.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureGraph {
    pub config: ArchConfig,
    pub nodes: Vec<LayerNode>,
    pub pre_gap: usize,
    pub attention_mask: Option<usize>,
    pub gap: usize,
    pub output: usize,
}

impl ArchitectureGraph {
    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.nodes[0].out_shape.map()
    }

    pub fn pre_gap_shape(&self) -> (usize, usize, usize) {
        self.nodes[self.pre_gap].out_shape.map()
    }

    pub fn embedding_dim(&self) -> usize {
        self.nodes[self.gap].out_shape.vector()
    }

    pub fn node_index(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }
}

/// Per-layer weight and bias arrays aligned with the graph's node indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams<T> {
    pub weights: Vec<T>,
    pub bias: Vec<T>,
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParameters<T> {
    pub layers: Vec<Option<LayerParams<T>>>,
}

impl<T: Scalar> ModelParameters<T> {
    pub fn n_trainable_scalars(&self) -> usize {
        self.layers
            .iter()
            .flatten()
            .filter(|l| !l.frozen)
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// Layer indices whose parameters are frozen.
    pub fn frozen_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.as_ref().filter(|l| l.frozen).map(|_| i))
            .collect()
    }
}

/// Intermediate results of one sample's forward evaluation.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T> {
    pub feature_volume: Tensor3<T>,
    pub attention_mask: Option<Tensor3<T>>,
    pub embedding: Vec<T>,
    pub logits: Vec<T>,
    pub probabilities: Vec<T>,
}

// ---------------------------------------------------------------------------
// graph construction
// ---------------------------------------------------------------------------

struct GraphBuilder {
    nodes: Vec<LayerNode>,
}

impl GraphBuilder {
    fn push(
        &mut self,
        name: &str,
        op: LayerOp,
        inputs: Vec<usize>,
        frozen: bool,
    ) -> Result<usize, ModelError> {
        let input_shapes: Vec<Shape> = inputs.iter().map(|&i| self.nodes[i].out_shape).collect();
        let out_shape = propagate_shape(&op, &input_shapes)
            .map_err(|e| ModelError::ShapeMismatch(format!("{name}: {e}")))?;
        self.nodes.push(LayerNode {
            name: name.to_string(),
            op,
            inputs,
            out_shape,
            frozen,
        });
        Ok(self.nodes.len() - 1)
    }
}

/// Output shape of a single op given its input shapes. Kept separate so
/// tests can re-derive every stored shape independently.
pub fn propagate_shape(op: &LayerOp, inputs: &[Shape]) -> Result<Shape, String> {
    match op {
        LayerOp::Input { h, w, c } => Ok(Shape::Map {
            h: *h,
            w: *w,
            c: *c,
        }),
        LayerOp::Conv(spec) => {
            let (h, w, c) = require_map(inputs, 0)?;
            if c != spec.in_ch {
                return Err(format!("conv expects {} channels, got {c}", spec.in_ch));
            }
            if h + 2 * spec.pad_h < spec.kh || w + 2 * spec.pad_w < spec.kw {
                return Err("kernel larger than padded input".into());
            }
            let (oh, ow) = spec.out_hw(h, w);
            if oh == 0 || ow == 0 {
                return Err("degenerate conv output".into());
            }
            Ok(Shape::Map {
                h: oh,
                w: ow,
                c: spec.out_ch,
            })
        }
        LayerOp::MaxPool { size, stride } => {
            let (h, w, c) = require_map(inputs, 0)?;
            if h < *size || w < *size {
                return Err("pool window larger than input".into());
            }
            Ok(Shape::Map {
                h: (h - size) / stride + 1,
                w: (w - size) / stride + 1,
                c,
            })
        }
        LayerOp::Concat => {
            let (h, w, ca) = require_map(inputs, 0)?;
            let (h2, w2, cb) = require_map(inputs, 1)?;
            if (h, w) != (h2, w2) {
                return Err("concat spatial mismatch".into());
            }
            Ok(Shape::Map { h, w, c: ca + cb })
        }
        LayerOp::Mul => {
            let a = require_map(inputs, 0)?;
            let b = require_map(inputs, 1)?;
            if a != b {
                return Err("mul shape mismatch".into());
            }
            Ok(Shape::Map {
                h: a.0,
                w: a.1,
                c: a.2,
            })
        }
        LayerOp::GlobalAvgPool => {
            let (_, _, c) = require_map(inputs, 0)?;
            Ok(Shape::Vector { d: c })
        }
        LayerOp::Dense { in_dim, out_dim } => {
            match inputs.first() {
                Some(Shape::Vector { d }) if d == in_dim => {}
                other => return Err(format!("dense expects vector of {in_dim}, got {other:?}")),
            }
            Ok(Shape::Vector { d: *out_dim })
        }
    }
}

fn require_map(inputs: &[Shape], i: usize) -> Result<(usize, usize, usize), String> {
    match inputs.get(i) {
        Some(Shape::Map { h, w, c }) => Ok((*h, *w, *c)),
        other => Err(format!("expected feature-map input, got {other:?}")),
    }
}

fn conv3x3(in_ch: usize, out_ch: usize) -> LayerOp {
    LayerOp::Conv(ConvSpec {
        kh: 3,
        kw: 3,
        stride_h: 1,
        stride_w: 1,
        pad_h: 1,
        pad_w: 1,
        in_ch,
        out_ch,
        activation: Activation::Relu,
    })
}

fn conv1x1(in_ch: usize, out_ch: usize, activation: Activation) -> LayerOp {
    LayerOp::Conv(ConvSpec {
        kh: 1,
        kw: 1,
        stride_h: 1,
        stride_w: 1,
        pad_h: 0,
        pad_w: 0,
        in_ch,
        out_ch,
        activation,
    })
}

/// Padding in {0, 1} such that a stride-2 convolution of the given kernel
/// extent reproduces the floor(n/2) reduction of a 2x2 max-pool.
fn pool_match_pad(extent: usize, kernel: usize) -> Result<usize, ModelError> {
    for pad in 0..=1usize {
        if extent + 2 * pad >= kernel {
            let out = (extent + 2 * pad - kernel) / 2 + 1;
            if out == extent / 2 && out > 0 {
                return Ok(pad);
            }
        }
    }
    Err(ModelError::ShapeMismatch(format!(
        "no stride-2 padding matches pooling for extent {extent}, kernel {kernel}"
    )))
}

/// Push the VGG backbone; returns (block3_output, block5_output).
fn push_backbone(
    b: &mut GraphBuilder,
    config: &ArchConfig,
    input: usize,
) -> Result<(usize, usize), ModelError> {
    let depths = config.backbone.block_depths();
    let mut prev = input;
    let mut in_ch = 3;
    let mut block3_out = 0;
    for (block, (&depth, &out_ch)) in depths.iter().zip(&config.block_channels).enumerate() {
        for conv in 0..depth {
            let name = format!("b{}c{}", block + 1, conv + 1);
            // blocks 1-3 keep their pretrained coefficients fixed
            prev = b.push(&name, conv3x3(in_ch, out_ch), vec![prev], block < 3)?;
            in_ch = out_ch;
        }
        prev = b.push(
            &format!("pool{}", block + 1),
            LayerOp::MaxPool { size: 2, stride: 2 },
            vec![prev],
            false,
        )?;
        if block == 2 {
            block3_out = prev;
        }
    }
    Ok((block3_out, prev))
}

/// Build the full RAGNet_v2 graph: frozen VGG blocks 1-3, trainable
/// blocks 4-5, a 3x1 residual branch from the block-3 output, a 1x1
/// attention autoencoder over the fused features, and a GAP + 3-way head.
pub fn build_graph(config: &ArchConfig) -> Result<ArchitectureGraph, ModelError> {
    let (in_h, in_w) = config.input_shape;
    if in_h < 32 || in_w < 32 {
        return Err(ModelError::UnsupportedInputShape(in_h, in_w));
    }
    let mut b = GraphBuilder { nodes: Vec::new() };
    let input = b.push(
        "input",
        LayerOp::Input {
            h: in_h,
            w: in_w,
            c: 3,
        },
        vec![],
        false,
    )?;
    let (block3, block5) = push_backbone(&mut b, config, input)?;
    let c5 = config.block_channels[4];

    let (pre_gap, attention_mask) = match config.variant {
        ArchVariant::VggBaseline => (block5, None),
        ArchVariant::RagnetV2 => {
            // residual branch: two 3x1 convolutions, each strided to mirror
            // one pooling stage, so the branch lands on the block-5 resolution
            let (h3, w3, _) = b.nodes[block3].out_shape.map();
            let spec1 = ConvSpec {
                kh: 3,
                kw: 1,
                stride_h: 2,
                stride_w: 2,
                pad_h: pool_match_pad(h3, 3)?,
                pad_w: pool_match_pad(w3, 1)?,
                in_ch: config.block_channels[2],
                out_ch: config.block_channels[3],
                activation: Activation::Relu,
            };
            let res1 = b.push("res1", LayerOp::Conv(spec1), vec![block3], false)?;
            let (h4, w4, _) = b.nodes[res1].out_shape.map();
            let spec2 = ConvSpec {
                kh: 3,
                kw: 1,
                stride_h: 2,
                stride_w: 2,
                pad_h: pool_match_pad(h4, 3)?,
                pad_w: pool_match_pad(w4, 1)?,
                in_ch: config.block_channels[3],
                out_ch: c5,
                activation: Activation::Relu,
            };
            let res2 = b.push("res2", LayerOp::Conv(spec2), vec![res1], false)?;

            // fuse main branch and residual branch (main branch first)
            let concat_res = b.push("concat_res", LayerOp::Concat, vec![block5, res2], false)?;
            let reduce = b.push(
                "reduce",
                conv1x1(2 * c5, c5, Activation::Relu),
                vec![concat_res],
                false,
            )?;

            // 1x1 convolutional autoencoder; the sigmoid reconstruction
            // recalibrates the fused features through an identity shortcut
            let bottleneck = (c5 / 4).max(1);
            let attn_enc = b.push(
                "attn_enc",
                conv1x1(c5, bottleneck, Activation::Relu),
                vec![reduce],
                false,
            )?;
            let attn_dec = b.push(
                "attn_dec",
                conv1x1(bottleneck, c5, Activation::Sigmoid),
                vec![attn_enc],
                false,
            )?;
            let attn_mul = b.push("attn_mul", LayerOp::Mul, vec![attn_dec, reduce], false)?;
            let concat_attn = b.push("concat_attn", LayerOp::Concat, vec![reduce, attn_mul], false)?;
            let embed = b.push(
                "embed",
                conv1x1(2 * c5, config.embedding_channels, Activation::Relu),
                vec![concat_attn],
                false,
            )?;
            (embed, Some(attn_dec))
        }
    };

    let gap = b.push("gap", LayerOp::GlobalAvgPool, vec![pre_gap], false)?;
    let emb_dim = b.nodes[gap].out_shape.vector();
    let output = b.push(
        "fc",
        LayerOp::Dense {
            in_dim: emb_dim,
            out_dim: 3,
        },
        vec![gap],
        false,
    )?;

    Ok(ArchitectureGraph {
        config: config.clone(),
        nodes: b.nodes,
        pre_gap,
        attention_mask,
        gap,
        output,
    })
}

/// Seeded uniform fan-in initialization; biases start at zero. When a
/// pretrained bundle is supplied its arrays override the drawn values.
pub fn init_parameters<T: Scalar>(
    graph: &ArchitectureGraph,
    pretrained: Option<&WeightBundle>,
    seed: u64,
) -> Result<ModelParameters<T>, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers: Vec<Option<LayerParams<T>>> = Vec::with_capacity(graph.nodes.len());
    for node in &graph.nodes {
        let lp = match &node.op {
            LayerOp::Conv(spec) => {
                // He-uniform: keeps activation variance stable through the
                // ReLU stack (essential with 12+ conv layers)
                let fan_in = spec.kh * spec.kw * spec.in_ch;
                let bound = (6.0 / fan_in as f64).sqrt();
                let weights = (0..spec.weight_len())
                    .map(|_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
                    .collect();
                Some(LayerParams {
                    weights,
                    bias: vec![T::zero(); spec.out_ch],
                    frozen: node.frozen,
                })
            }
            LayerOp::Dense { in_dim, out_dim } => {
                // Glorot-uniform for the linear head
                let bound = (6.0 / (*in_dim + *out_dim) as f64).sqrt();
                let weights = (0..in_dim * out_dim)
                    .map(|_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
                    .collect();
                Some(LayerParams {
                    weights,
                    bias: vec![T::zero(); *out_dim],
                    frozen: node.frozen,
                })
            }
            _ => None,
        };
        layers.push(lp);
    }
    let mut params = ModelParameters { layers };
    if let Some(bundle) = pretrained {
        bundle.apply_to(graph, &mut params)?;
    }
    Ok(params)
}

pub fn build_ragnet_v2<T: Scalar>(
    backbone: Backbone,
    pretrained: Option<&WeightBundle>,
    seed: u64,
) -> Result<(ArchitectureGraph, ModelParameters<T>), ModelError> {
    let graph = build_graph(&ArchConfig::canonical(ArchVariant::RagnetV2, backbone))?;
    let params = init_parameters(&graph, pretrained, seed)?;
    Ok((graph, params))
}

pub fn build_vgg_baseline<T: Scalar>(
    backbone: Backbone,
    pretrained: Option<&WeightBundle>,
    seed: u64,
) -> Result<(ArchitectureGraph, ModelParameters<T>), ModelError> {
    let graph = build_graph(&ArchConfig::canonical(ArchVariant::VggBaseline, backbone))?;
    let params = init_parameters(&graph, pretrained, seed)?;
    Ok((graph, params))
}

/// Build a graph and freshly initialized parameters for any configuration.
pub fn build_model<T: Scalar>(
    config: &ArchConfig,
    pretrained: Option<&WeightBundle>,
    seed: u64,
) -> Result<(ArchitectureGraph, ModelParameters<T>), ModelError> {
    let graph = build_graph(config)?;
    let params = init_parameters(&graph, pretrained, seed)?;
    Ok((graph, params))
}

// ---------------------------------------------------------------------------
// execution
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub(crate) enum Value<T> {
    Map(Tensor3<T>),
    Vector(Vec<T>),
    Unset,
}

impl<T: Scalar> Value<T> {
    fn map(&self) -> &Tensor3<T> {
        match self {
            Value::Map(t) => t,
            _ => panic!("expected map value"),
        }
    }

    fn vector(&self) -> &[T] {
        match self {
            Value::Vector(v) => v,
            _ => panic!("expected vector value"),
        }
    }
}

/// All node outputs of one sample's forward pass.
pub struct Activations<T> {
    pub(crate) values: Vec<Value<T>>,
    pool_argmax: Vec<Option<Vec<u32>>>,
}

impl<T: Scalar> Activations<T> {
    pub fn logits(&self, graph: &ArchitectureGraph) -> &[T] {
        self.values[graph.output].vector()
    }
}

/// Replicate a grayscale scan into the 3-channel input tensor.
pub fn scan_to_input<T: Scalar>(scan: &BScan) -> Tensor3<T> {
    let mut t = Tensor3::zeros(scan.rows, scan.cols, 3);
    for (i, &p) in scan.pixels.iter().enumerate() {
        let v = T::from_f64_lossy(p as f64);
        t.data[i * 3] = v;
        t.data[i * 3 + 1] = v;
        t.data[i * 3 + 2] = v;
    }
    t
}

pub fn run_forward<T: Scalar>(
    graph: &ArchitectureGraph,
    params: &ModelParameters<T>,
    input: Tensor3<T>,
) -> Result<Activations<T>, ModelError> {
    let (ih, iw, ic) = graph.input_shape();
    if input.shape() != (ih, iw, ic) {
        return Err(ModelError::ShapeMismatch(format!(
            "input {:?}, graph expects {:?}",
            input.shape(),
            (ih, iw, ic)
        )));
    }
    let mut values: Vec<Value<T>> = Vec::with_capacity(graph.nodes.len());
    let mut pool_argmax: Vec<Option<Vec<u32>>> = vec![None; graph.nodes.len()];
    for (i, node) in graph.nodes.iter().enumerate() {
        let value = match &node.op {
            LayerOp::Input { .. } => Value::Map(input.clone()),
            LayerOp::Conv(spec) => {
                let lp = params.layers[i].as_ref().expect("conv params");
                Value::Map(ops::conv_forward(
                    values[node.inputs[0]].map(),
                    spec,
                    &lp.weights,
                    &lp.bias,
                ))
            }
            LayerOp::MaxPool { size, stride } => {
                let (out, argmax) =
                    ops::maxpool_forward(values[node.inputs[0]].map(), *size, *stride);
                pool_argmax[i] = Some(argmax);
                Value::Map(out)
            }
            LayerOp::Concat => Value::Map(ops::concat_channels(
                values[node.inputs[0]].map(),
                values[node.inputs[1]].map(),
            )),
            LayerOp::Mul => Value::Map(ops::mul_forward(
                values[node.inputs[0]].map(),
                values[node.inputs[1]].map(),
            )),
            LayerOp::GlobalAvgPool => {
                Value::Vector(values[node.inputs[0]].map().channel_means())
            }
            LayerOp::Dense { out_dim, .. } => {
                let lp = params.layers[i].as_ref().expect("dense params");
                Value::Vector(ops::dense_forward(
                    values[node.inputs[0]].vector(),
                    &lp.weights,
                    &lp.bias,
                    *out_dim,
                ))
            }
        };
        values.push(value);
    }
    Ok(Activations {
        values,
        pool_argmax,
    })
}

/// Numerically stable (max-shifted) softmax.
pub fn softmax<T: Scalar>(logits: &[T]) -> Result<Vec<T>, ModelError> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFiniteLogit);
    }
    let max = logits.iter().cloned().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: T = exps.iter().cloned().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Forward-evaluate a batch, producing one [`ForwardTrace`] per scan in
/// input order. Parameters are shared read-only across worker threads.
pub fn forward<T: Scalar>(
    params: &ModelParameters<T>,
    graph: &ArchitectureGraph,
    batch: &[BScan],
) -> Result<Vec<ForwardTrace<T>>, ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    batch
        .par_iter()
        .map(|scan| {
            let acts = run_forward(graph, params, scan_to_input::<T>(scan))?;
            trace_from_activations(graph, &acts)
        })
        .collect()
}

pub fn trace_from_activations<T: Scalar>(
    graph: &ArchitectureGraph,
    acts: &Activations<T>,
) -> Result<ForwardTrace<T>, ModelError> {
    let logits = acts.values[graph.output].vector().to_vec();
    let probabilities = softmax(&logits)?;
    Ok(ForwardTrace {
        feature_volume: acts.values[graph.pre_gap].map().clone(),
        attention_mask: graph
            .attention_mask
            .map(|i| acts.values[i].map().clone()),
        embedding: acts.values[graph.gap].vector().to_vec(),
        logits,
        probabilities,
    })
}

/// Per-layer parameter gradients, aligned with [`ModelParameters::layers`].
#[derive(Clone, Debug)]
pub struct LayerGrads<T> {
    pub d_weights: Vec<T>,
    pub d_bias: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct Gradients<T> {
    pub layers: Vec<Option<LayerGrads<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(params: &ModelParameters<T>) -> Self {
        Gradients {
            layers: params
                .layers
                .iter()
                .map(|l| {
                    l.as_ref().filter(|l| !l.frozen).map(|l| LayerGrads {
                        d_weights: vec![T::zero(); l.weights.len()],
                        d_bias: vec![T::zero(); l.bias.len()],
                    })
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients<T>) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if let (Some(a), Some(b)) = (a.as_mut(), b.as_ref()) {
                for (x, &y) in a.d_weights.iter_mut().zip(&b.d_weights) {
                    *x += y;
                }
                for (x, &y) in a.d_bias.iter_mut().zip(&b.d_bias) {
                    *x += y;
                }
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for l in self.layers.iter_mut().flatten() {
            for v in l.d_weights.iter_mut().chain(l.d_bias.iter_mut()) {
                *v = *v * factor;
            }
        }
    }
}

/// Node indices whose output gradient is required: a node needs a gradient
/// if its own parameters are trainable or any upstream node's are.
fn reaches_trainable(graph: &ArchitectureGraph, params: &ModelParameters<impl Scalar>) -> Vec<bool> {
    let mut reach = vec![false; graph.nodes.len()];
    for (i, node) in graph.nodes.iter().enumerate() {
        let own = params.layers[i].as_ref().map_or(false, |l| !l.frozen);
        reach[i] = own || node.inputs.iter().any(|&j| reach[j]);
    }
    reach
}

/// Back-propagate the loss gradient at the logits through the graph,
/// returning parameter gradients for every trainable layer. Gradient flow
/// stops at the frozen frontier (nothing upstream of it is trainable).
pub fn run_backward<T: Scalar>(
    graph: &ArchitectureGraph,
    params: &ModelParameters<T>,
    acts: &Activations<T>,
    d_logits: &[T],
) -> Gradients<T> {
    let reach = reaches_trainable(graph, params);
    let mut grads = Gradients::zeros_like(params);
    let mut d_values: Vec<Value<T>> = (0..graph.nodes.len()).map(|_| Value::Unset).collect();
    d_values[graph.output] = Value::Vector(d_logits.to_vec());

    for i in (0..graph.nodes.len()).rev() {
        let node = &graph.nodes[i];
        match (&node.op, &d_values[i]) {
            (_, Value::Unset) => continue,
            (LayerOp::Input { .. }, _) => {}
            (LayerOp::Conv(spec), Value::Map(d_out)) => {
                let src = node.inputs[0];
                let lp = params.layers[i].as_ref().expect("conv params");
                let want_input = reach[src];
                let cg = ops::conv_backward(
                    acts.values[src].map(),
                    acts.values[i].map(),
                    spec,
                    &lp.weights,
                    d_out,
                    want_input,
                );
                if let Some(g) = grads.layers[i].as_mut() {
                    for (a, b) in g.d_weights.iter_mut().zip(&cg.d_weights) {
                        *a += *b;
                    }
                    for (a, b) in g.d_bias.iter_mut().zip(&cg.d_bias) {
                        *a += *b;
                    }
                }
                if let Some(d_in) = cg.d_input {
                    accumulate_map(&mut d_values[src], d_in);
                }
            }
            (LayerOp::MaxPool { .. }, Value::Map(d_out)) => {
                let src = node.inputs[0];
                if reach[src] {
                    let shape = acts.values[src].map().shape();
                    let argmax = acts.pool_argmax[i].as_ref().expect("pool argmax");
                    let d_in = ops::maxpool_backward(shape, argmax, d_out);
                    accumulate_map(&mut d_values[src], d_in);
                }
            }
            (LayerOp::Concat, Value::Map(d_out)) => {
                let (a, bsrc) = (node.inputs[0], node.inputs[1]);
                let ca = acts.values[a].map().c;
                let cb = acts.values[bsrc].map().c;
                let (d_a, d_b) = ops::concat_backward(d_out, ca, cb);
                if reach[a] {
                    accumulate_map(&mut d_values[a], d_a);
                }
                if reach[bsrc] {
                    accumulate_map(&mut d_values[bsrc], d_b);
                }
            }
            (LayerOp::Mul, Value::Map(d_out)) => {
                let (a, bsrc) = (node.inputs[0], node.inputs[1]);
                let d_a = reach[a].then(|| ops::mul_forward(d_out, acts.values[bsrc].map()));
                let d_b = reach[bsrc].then(|| ops::mul_forward(d_out, acts.values[a].map()));
                if let Some(d_a) = d_a {
                    accumulate_map(&mut d_values[a], d_a);
                }
                if let Some(d_b) = d_b {
                    accumulate_map(&mut d_values[bsrc], d_b);
                }
            }
            (LayerOp::GlobalAvgPool, Value::Vector(d_z)) => {
                let src = node.inputs[0];
                if reach[src] {
                    let d_in = ops::gap_backward(acts.values[src].map().shape(), d_z);
                    accumulate_map(&mut d_values[src], d_in);
                }
            }
            (LayerOp::Dense { out_dim, .. }, Value::Vector(d_out)) => {
                let src = node.inputs[0];
                let lp = params.layers[i].as_ref().expect("dense params");
                let (dw, db, d_in) =
                    ops::dense_backward(acts.values[src].vector(), &lp.weights, d_out, *out_dim);
                if let Some(g) = grads.layers[i].as_mut() {
                    for (a, b) in g.d_weights.iter_mut().zip(&dw) {
                        *a += *b;
                    }
                    for (a, b) in g.d_bias.iter_mut().zip(&db) {
                        *a += *b;
                    }
                }
                if reach[src] {
                    match &mut d_values[src] {
                        v @ Value::Unset => *v = Value::Vector(d_in),
                        Value::Vector(existing) => {
                            for (a, b) in existing.iter_mut().zip(&d_in) {
                                *a += *b;
                            }
                        }
                        _ => unreachable!(),
                    }
                }
            }
            _ => unreachable!("op/gradient kind mismatch at node {}", node.name),
        }
    }
    grads
}

fn accumulate_map<T: Scalar>(slot: &mut Value<T>, incoming: Tensor3<T>) {
    match slot {
        Value::Unset => *slot = Value::Map(incoming),
        Value::Map(existing) => {
            for (a, b) in existing.data.iter_mut().zip(&incoming.data) {
                *a += *b;
            }
        }
        Value::Vector(_) => unreachable!(),
    }
}

#[cfg(test)]
mod tests;
