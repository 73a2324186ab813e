//! Network descriptions, builtin model generators, seeded tensors, DRAM
//! layout and the per-layer reference executor.
//!
//! Network JSON schema:
//!
//! ```json
//! { "name": "tiny",
//!   "input": { "n": 1, "h": 8, "w": 8, "c": 3 },
//!   "layers": [
//!     { "kind": "conv", "name": "c1", "n": 1, "h": 8, "w": 8, "c": 3, "k": 16,
//!       "kh": 3, "kw": 3, "stride": 1, "pad": 1, "activation": "relu" },
//!     { "kind": "max_pool", "name": "p1", "n": 1, "h": 8, "w": 8, "c": 16,
//!       "kh": 2, "kw": 2, "stride": 2, "pad": 0 },
//!     { "kind": "matmul", "name": "fc", "m": 1, "n": 10, "k": 256 },
//!     { "kind": "residual_add", "name": "r", "input": 2, "link": 2 } ] }
//! ```
//!
//! Every layer reads the previous layer's output unless `input` names an
//! earlier layer index. Conv and pool layers state their input shape, which
//! must match. A matmul reads its input as a row-major `m x k` matrix and
//! produces an `m x n` tensor (shape `[m, 1, 1, n]`). `scale` is the
//! requantization factor applied before the activation; when absent it
//! defaults to `1 / (128 * sqrt(K))` for reduction depth K. Matmuls may carry
//! `softmax: [rows, cols]`, a host-side softmax charged before the layer.

use std::fmt;

use ndarray::{Array2, ArrayView2, ArrayView4, ArrayViewD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ValidatedConfig;
use crate::func::{self, scale_act, Activation, FuncError, Scale, WindowGeom};
use crate::mapper::{self, ConvAddrs, Epilogue, Gemm, GemmAddrs, MapError, MapOptions};
use crate::mmu::PageTable;
use crate::program::{HostOp, HostTask, Program};
use crate::sim::host::HostKernel;
use crate::sim::DramImage;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WorkloadError {
    #[error("layer {layer} (`{name}`): {msg}")]
    ShapeIncompatible { layer: usize, name: String, msg: String },
    #[error("unknown model `{0}` (known: resnet50-like, alexnet-like, bert-like)")]
    UnknownModel(String),
    #[error("line {line}, column {column}: {msg}")]
    ParseError { line: usize, column: usize, msg: String },
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Func(#[from] FuncError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TensorShape {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl TensorShape {
    pub fn new(n: usize, h: usize, w: usize, c: usize) -> TensorShape {
        TensorShape { n, h, w, c }
    }

    pub fn elems(&self) -> usize {
        self.n * self.h * self.w * self.c
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.h, self.w, self.c]
    }
}

impl fmt::Display for TensorShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.h, self.w, self.c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvShape {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    /// Output channels.
    pub k: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvShape {
    pub fn geom(&self) -> WindowGeom {
        WindowGeom {
            n: self.n,
            h: self.h,
            w: self.w,
            c: self.c,
            kh: self.kh,
            kw: self.kw,
            stride: self.stride,
            pad: self.pad,
        }
    }

    pub fn input(&self) -> TensorShape {
        TensorShape::new(self.n, self.h, self.w, self.c)
    }

    pub fn output(&self) -> Result<TensorShape, FuncError> {
        let (oh, ow) = self.geom().out_hw()?;
        Ok(TensorShape::new(self.n, oh, ow, self.k))
    }

    /// Reduction depth of the lowered GEMM.
    pub fn depth(&self) -> usize {
        self.kh * self.kw * self.c
    }

    pub fn weight_elems(&self) -> usize {
        self.depth() * self.k
    }

    pub fn macs(&self) -> u64 {
        self.output().map_or(0, |o| (o.elems() * self.depth()) as u64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PoolShape {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl PoolShape {
    pub fn geom(&self) -> WindowGeom {
        WindowGeom {
            n: self.n,
            h: self.h,
            w: self.w,
            c: self.c,
            kh: self.kh,
            kw: self.kw,
            stride: self.stride,
            pad: self.pad,
        }
    }

    pub fn input(&self) -> TensorShape {
        TensorShape::new(self.n, self.h, self.w, self.c)
    }

    pub fn output(&self) -> Result<TensorShape, FuncError> {
        let (oh, ow) = self.geom().out_hw()?;
        Ok(TensorShape::new(self.n, oh, ow, self.c))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerDescriptor {
    Conv {
        name: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        input: Option<usize>,
        #[serde(flatten)]
        shape: ConvShape,
        #[serde(default)]
        activation: Activation,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        scale: Option<f64>,
    },
    Matmul {
        name: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        input: Option<usize>,
        m: usize,
        n: usize,
        k: usize,
        #[serde(default)]
        activation: Activation,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        scale: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        softmax: Option<[u64; 2]>,
    },
    ResidualAdd {
        name: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        input: Option<usize>,
        link: usize,
        #[serde(default)]
        activation: Activation,
    },
    MaxPool {
        name: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        input: Option<usize>,
        #[serde(flatten)]
        shape: PoolShape,
    },
}

impl LayerDescriptor {
    pub fn name(&self) -> &str {
        match self {
            LayerDescriptor::Conv { name, .. }
            | LayerDescriptor::Matmul { name, .. }
            | LayerDescriptor::ResidualAdd { name, .. }
            | LayerDescriptor::MaxPool { name, .. } => name,
        }
    }

    pub fn input(&self) -> Option<usize> {
        match self {
            LayerDescriptor::Conv { input, .. }
            | LayerDescriptor::Matmul { input, .. }
            | LayerDescriptor::ResidualAdd { input, .. }
            | LayerDescriptor::MaxPool { input, .. } => *input,
        }
    }

    fn set_input(&mut self, to: Option<usize>) {
        match self {
            LayerDescriptor::Conv { input, .. }
            | LayerDescriptor::Matmul { input, .. }
            | LayerDescriptor::ResidualAdd { input, .. }
            | LayerDescriptor::MaxPool { input, .. } => *input = to,
        }
    }

    /// Weight elements (`[kh, kw, c, k]` or `k x n`), if the layer has any.
    pub fn weight_elems(&self) -> Option<usize> {
        match self {
            LayerDescriptor::Conv { shape, .. } => Some(shape.weight_elems()),
            LayerDescriptor::Matmul { n, k, .. } => Some(n * k),
            _ => None,
        }
    }

    /// Requantization factor applied to the accumulator.
    pub fn scale(&self) -> Scale {
        let (scale, depth) = match self {
            LayerDescriptor::Conv { scale, shape, .. } => (*scale, shape.depth()),
            LayerDescriptor::Matmul { scale, k, .. } => (*scale, *k),
            _ => return Scale::ONE,
        };
        Scale::from_f64(scale.unwrap_or_else(|| 1.0 / (128.0 * (depth as f64).sqrt())))
    }

    pub fn activation(&self) -> Activation {
        match self {
            LayerDescriptor::Conv { activation, .. }
            | LayerDescriptor::Matmul { activation, .. }
            | LayerDescriptor::ResidualAdd { activation, .. } => *activation,
            LayerDescriptor::MaxPool { .. } => Activation::None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkDesc {
    pub name: String,
    pub input: TensorShape,
    pub layers: Vec<LayerDescriptor>,
}

/// Source tensor of a layer: the network input or an earlier layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Input,
    Layer(usize),
}

impl NetworkDesc {
    pub fn source(&self, i: usize) -> Source {
        match self.layers[i].input() {
            Some(j) => Source::Layer(j),
            None if i == 0 => Source::Input,
            None => Source::Layer(i - 1),
        }
    }

    /// Output shape of every layer, checking each against its inputs.
    pub fn validate(&self) -> Result<Vec<TensorShape>, WorkloadError> {
        let mut shapes: Vec<TensorShape> = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let err = |msg: String| WorkloadError::ShapeIncompatible { layer: i, name: l.name().to_string(), msg };
            let src = match self.source(i) {
                Source::Input => self.input,
                Source::Layer(j) if j < i => shapes[j],
                Source::Layer(j) => return Err(err(format!("input refers to layer {j}, which is not earlier"))),
            };
            let out = match l {
                LayerDescriptor::Conv { shape, .. } => {
                    if shape.input() != src {
                        return Err(err(format!("expects input {}, got {src}", shape.input())));
                    }
                    if shape.k == 0 {
                        return Err(err("zero output channels".into()));
                    }
                    shape.output().map_err(|e| err(e.to_string()))?
                }
                LayerDescriptor::MaxPool { shape, .. } => {
                    if shape.input() != src {
                        return Err(err(format!("expects input {}, got {src}", shape.input())));
                    }
                    if shape.pad >= shape.kh || shape.pad >= shape.kw {
                        return Err(err("padding as wide as the window".into()));
                    }
                    shape.output().map_err(|e| err(e.to_string()))?
                }
                LayerDescriptor::Matmul { m, n, k, .. } => {
                    if m * k != src.elems() || *m == 0 || *n == 0 || *k == 0 {
                        return Err(err(format!("{m}x{k} operand from a {src} tensor")));
                    }
                    TensorShape::new(*m, 1, 1, *n)
                }
                LayerDescriptor::ResidualAdd { link, .. } => {
                    if *link >= i {
                        return Err(err(format!("link {link} is not an earlier layer")));
                    }
                    if shapes[*link] != src {
                        return Err(err(format!("adds {src} to {} from layer {link}", shapes[*link])));
                    }
                    src
                }
            };
            shapes.push(out);
        }
        Ok(shapes)
    }

    /// The first `n` layers.
    pub fn prefix(&self, n: usize) -> NetworkDesc {
        NetworkDesc {
            name: format!("{}[..{n}]", self.name),
            input: self.input,
            layers: self.layers[..n.min(self.layers.len())].to_vec(),
        }
    }

    /// Number of layers of each kind: conv, matmul, residual, pool.
    pub fn kind_counts(&self) -> [usize; 4] {
        let mut c = [0; 4];
        for l in &self.layers {
            c[match l {
                LayerDescriptor::Conv { .. } => 0,
                LayerDescriptor::Matmul { .. } => 1,
                LayerDescriptor::ResidualAdd { .. } => 2,
                LayerDescriptor::MaxPool { .. } => 3,
            }] += 1;
        }
        c
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("network serializes")
    }
}

pub fn parse_network(text: &str) -> Result<NetworkDesc, WorkloadError> {
    let net: NetworkDesc = serde_json::from_str(text).map_err(|e| WorkloadError::ParseError {
        line: e.line(),
        column: e.column(),
        msg: e.to_string(),
    })?;
    net.validate()?;
    Ok(net)
}

// ---------------------------------------------------------------------------
// Builtin models

/// Tunable sizes of the builtin generators.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuiltinParams {
    pub batch: usize,
    /// Square input resolution of the CNNs.
    pub input_hw: usize,
    /// BERT-like sequence length, hidden size, head count and block count.
    pub seq_len: usize,
    pub hidden: usize,
    pub heads: usize,
    pub blocks: usize,
}

impl Default for BuiltinParams {
    fn default() -> Self {
        BuiltinParams { batch: 1, input_hw: 224, seq_len: 128, hidden: 768, heads: 12, blocks: 12 }
    }
}

pub const BUILTIN_MODELS: [&str; 3] = ["resnet50-like", "alexnet-like", "bert-like"];

struct Builder {
    layers: Vec<LayerDescriptor>,
    shapes: Vec<TensorShape>,
    input: TensorShape,
}

impl Builder {
    fn new(input: TensorShape) -> Builder {
        Builder { layers: Vec::new(), shapes: Vec::new(), input }
    }

    fn shape_of(&self, src: Option<usize>) -> TensorShape {
        match src {
            Some(j) => self.shapes[j],
            None => self.shapes.last().copied().unwrap_or(self.input),
        }
    }

    fn push(&mut self, mut l: LayerDescriptor, src: Option<usize>, out: TensorShape) -> usize {
        let prev = self.layers.len().checked_sub(1);
        l.set_input(if src == prev { None } else { src });
        self.layers.push(l);
        self.shapes.push(out);
        self.layers.len() - 1
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        name: String,
        src: Option<usize>,
        k: usize,
        kh: usize,
        stride: usize,
        pad: usize,
        act: Activation,
    ) -> usize {
        let s = self.shape_of(src);
        let shape = ConvShape { n: s.n, h: s.h, w: s.w, c: s.c, k, kh, kw: kh, stride, pad };
        let out = shape.output().expect("builtin geometry is valid");
        self.push(LayerDescriptor::Conv { name, input: None, shape, activation: act, scale: None }, src, out)
    }

    fn pool(&mut self, name: String, kh: usize, stride: usize, pad: usize) -> usize {
        let s = self.shape_of(None);
        let shape = PoolShape { n: s.n, h: s.h, w: s.w, c: s.c, kh, kw: kh, stride, pad };
        let out = shape.output().expect("builtin geometry is valid");
        let prev = self.layers.len().checked_sub(1);
        self.push(LayerDescriptor::MaxPool { name, input: None, shape }, prev, out)
    }

    fn residual(&mut self, name: String, src: usize, link: usize, act: Activation) -> usize {
        let out = self.shapes[src];
        self.push(LayerDescriptor::ResidualAdd { name, input: None, link, activation: act }, Some(src), out)
    }

    #[allow(clippy::too_many_arguments)]
    fn matmul(
        &mut self,
        name: String,
        src: Option<usize>,
        m: usize,
        n: usize,
        act: Activation,
        softmax: Option<[u64; 2]>,
    ) -> usize {
        let s = self.shape_of(src);
        let k = s.elems() / m;
        let src = src.or(self.layers.len().checked_sub(1));
        self.push(
            LayerDescriptor::Matmul { name, input: None, m, n, k, activation: act, scale: None, softmax },
            src,
            TensorShape::new(m, 1, 1, n),
        )
    }

    fn finish(self, name: &str) -> NetworkDesc {
        NetworkDesc { name: name.to_string(), input: self.input, layers: self.layers }
    }
}

/// ResNet-50 v1.5 topology: 53 convolutions, 16 residual additions and a
/// fully connected head applied at every final spatial position (the global
/// average pool that precedes it runs on the host and is not modeled).
pub fn resnet50_like(p: &BuiltinParams) -> NetworkDesc {
    let relu = Activation::Relu;
    let mut b = Builder::new(TensorShape::new(p.batch, p.input_hw, p.input_hw, 3));
    b.conv("conv1".into(), None, 64, 7, 2, 3, relu);
    b.pool("pool1".into(), 3, 2, 1);
    let stages = [(3, 64), (4, 128), (6, 256), (3, 512)];
    for (si, &(count, width)) in stages.iter().enumerate() {
        for bi in 0..count {
            let block_in = b.layers.len() - 1;
            let stride = if si > 0 && bi == 0 { 2 } else { 1 };
            let tag = format!("s{}b{}", si + 1, bi + 1);
            b.conv(format!("{tag}_a"), Some(block_in), width, 1, 1, 0, relu);
            b.conv(format!("{tag}_b"), None, width, 3, stride, 1, relu);
            let main = b.conv(format!("{tag}_c"), None, width * 4, 1, 1, 0, Activation::None);
            let shortcut = if bi == 0 {
                let s = b.shape_of(Some(block_in));
                let shape = ConvShape { n: s.n, h: s.h, w: s.w, c: s.c, k: width * 4, kh: 1, kw: 1, stride, pad: 0 };
                if stride == 1 {
                    b.conv(format!("{tag}_ds"), Some(block_in), width * 4, 1, 1, 0, Activation::None)
                } else {
                    let out = shape.output().expect("builtin geometry is valid");
                    b.push(
                        LayerDescriptor::Conv {
                            name: format!("{tag}_ds"),
                            input: None,
                            shape,
                            activation: Activation::None,
                            scale: None,
                        },
                        Some(block_in),
                        out,
                    )
                }
            } else {
                block_in
            };
            b.residual(format!("{tag}_add"), main, shortcut, relu);
        }
    }
    let last = b.shapes[b.shapes.len() - 1];
    b.matmul("fc".into(), None, last.n * last.h * last.w, 1000, Activation::None, None);
    b.finish("resnet50-like")
}

/// AlexNet topology with its three fully connected layers as matmuls.
pub fn alexnet_like(p: &BuiltinParams) -> NetworkDesc {
    let relu = Activation::Relu;
    let mut b = Builder::new(TensorShape::new(p.batch, p.input_hw, p.input_hw, 3));
    b.conv("conv1".into(), None, 64, 11, 4, 2, relu);
    b.pool("pool1".into(), 3, 2, 0);
    b.conv("conv2".into(), None, 192, 5, 1, 2, relu);
    b.pool("pool2".into(), 3, 2, 0);
    b.conv("conv3".into(), None, 384, 3, 1, 1, relu);
    b.conv("conv4".into(), None, 256, 3, 1, 1, relu);
    b.conv("conv5".into(), None, 256, 3, 1, 1, relu);
    b.pool("pool5".into(), 3, 2, 0);
    b.matmul("fc6".into(), None, p.batch, 4096, relu, None);
    b.matmul("fc7".into(), None, p.batch, 4096, relu, None);
    b.matmul("fc8".into(), None, p.batch, 1000, Activation::None, None);
    b.finish("alexnet-like")
}

/// Encoder blocks of {attention projection + residual, two-layer FFN +
/// residual}. Attention scores and softmax run on the host.
pub fn bert_like(p: &BuiltinParams) -> NetworkDesc {
    let (s, h) = (p.seq_len * p.batch, p.hidden);
    let mut b = Builder::new(TensorShape::new(s, 1, 1, h));
    for blk in 0..p.blocks {
        let x = b.layers.len().checked_sub(1);
        let softmax = Some([(p.heads * s) as u64, p.seq_len as u64]);
        let attn = b.matmul(format!("e{blk}_attn"), x, s, h, Activation::None, softmax);
        let r1 = match x {
            Some(x) => b.residual(format!("e{blk}_add1"), attn, x, Activation::None),
            None => attn,
        };
        b.matmul(format!("e{blk}_ffn1"), Some(r1), s, 4 * h, Activation::Relu, None);
        let f2 = b.matmul(format!("e{blk}_ffn2"), None, s, h, Activation::None, None);
        b.residual(format!("e{blk}_add2"), f2, r1, Activation::None);
    }
    b.finish("bert-like")
}

pub fn builtin_network(name: &str, p: &BuiltinParams) -> Result<NetworkDesc, WorkloadError> {
    match name {
        "resnet50-like" => Ok(resnet50_like(p)),
        "alexnet-like" => Ok(alexnet_like(p)),
        "bert-like" => Ok(bert_like(p)),
        other => Err(WorkloadError::UnknownModel(other.to_string())),
    }
}

/// Weights of every layer (empty for layers without weights).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Weights(pub Vec<Vec<i8>>);

/// Uniform int8 weights from ChaCha8 seeded with `seed`, layer by layer.
pub fn gen_weights(net: &NetworkDesc, seed: u64) -> Weights {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Weights(net.layers.iter().map(|l| random_i8(&mut rng, l.weight_elems().unwrap_or(0))).collect())
}

/// Uniform int8 input tensor; uses a separate ChaCha8 stream from weights.
pub fn gen_input(shape: TensorShape, seed: u64) -> Vec<i8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    random_i8(&mut rng, shape.elems())
}

pub fn random_i8(rng: &mut impl Rng, len: usize) -> Vec<i8> {
    (0..len).map(|_| rng.random::<i8>()).collect()
}

pub fn builtin(name: &str, seed: u64) -> Result<(NetworkDesc, Weights), WorkloadError> {
    let net = builtin_network(name, &BuiltinParams::default())?;
    let w = gen_weights(&net, seed);
    Ok((net, w))
}

// ---------------------------------------------------------------------------
// Deployment

/// Page-aligned bump allocator over a virtual region.
#[derive(Clone, Debug)]
pub struct Allocator {
    next: u64,
    page: u64,
    ranges: Vec<(u64, u64)>,
}

impl Allocator {
    pub fn new(base: u64, page: u64) -> Allocator {
        Allocator { next: base.next_multiple_of(page), page, ranges: Vec::new() }
    }

    pub fn alloc(&mut self, bytes: u64) -> u64 {
        let at = self.next;
        let len = bytes.max(1).next_multiple_of(self.page);
        self.next += len;
        match self.ranges.last_mut() {
            Some(r) if r.1 == at => r.1 = at + len,
            _ => self.ranges.push((at, at + len)),
        }
        at
    }

    /// Mapped `[start, end)` ranges.
    pub fn ranges(&self) -> &[(u64, u64)] {
        &self.ranges
    }
}

/// Virtual addresses of a compiled network's tensors.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub input: u64,
    pub outputs: Vec<u64>,
    pub weights: Vec<Option<u64>>,
    pub scratch: Vec<Option<u64>>,
    pub shapes: Vec<TensorShape>,
    pub ranges: Vec<(u64, u64)>,
}

impl Layout {
    fn source_addr(&self, net: &NetworkDesc, i: usize) -> u64 {
        match net.source(i) {
            Source::Input => self.input,
            Source::Layer(j) => self.outputs[j],
        }
    }
}

/// Address space reserved per core so concurrent instances never alias.
pub const CORE_REGION_BYTES: u64 = 1 << 36;

/// Lower every layer and allocate its tensors starting at `base`.
pub fn compile(
    net: &NetworkDesc,
    cfg: &ValidatedConfig,
    opts: &MapOptions,
    base: u64,
) -> Result<(Program, Layout), WorkloadError> {
    let shapes = net.validate()?;
    let mut alloc = Allocator::new(base, cfg.page_bytes);
    let mut layout =
        Layout { input: alloc.alloc(net.input.elems() as u64), shapes: shapes.clone(), ..Default::default() };
    for (i, l) in net.layers.iter().enumerate() {
        layout.weights.push(l.weight_elems().map(|e| alloc.alloc(e as u64)));
        layout.outputs.push(alloc.alloc(shapes[i].elems() as u64));
        let scratch = match l {
            LayerDescriptor::Conv { shape, .. }
                if mapper::im2col_site(shape, cfg, opts) == mapper::Im2colSite::Host =>
            {
                Some(alloc.alloc(mapper::im2col_scratch_bytes(shape)))
            }
            _ => None,
        };
        layout.scratch.push(scratch);
    }
    let mut program = Program::new();
    for (i, l) in net.layers.iter().enumerate() {
        let src = layout.source_addr(net, i);
        let out = layout.outputs[i];
        let epi = Epilogue { scale: l.scale(), activation: l.activation() };
        let p = match l {
            LayerDescriptor::Conv { name, shape, .. } => {
                let addrs = ConvAddrs {
                    input: src,
                    weights: layout.weights[i].expect("conv has weights"),
                    output: out,
                    scratch: layout.scratch[i],
                };
                mapper::lower_conv(name, shape, epi, &addrs, cfg, opts)?
            }
            LayerDescriptor::Matmul { name, m, n, k, softmax, .. } => {
                let g = Gemm {
                    m: *m,
                    n: *n,
                    k: *k,
                    addrs: GemmAddrs::packed(src, layout.weights[i].expect("matmul has weights"), out, *n, *k),
                    epilogue: epi,
                    dataflow: opts.dataflow,
                };
                let t = match opts.tiling {
                    Some((a, b, c)) => mapper::Tiling::new(a, b, c),
                    None => mapper::pick_tiling(*m, *n, *k, cfg)?,
                };
                let mut p = mapper::lower_matmul(name, &g, &t, cfg)?;
                if let Some([r, c]) = softmax {
                    p.push_host(HostTask { kernel: HostKernel::Softmax, shape: vec![*r, *c], op: HostOp::None });
                }
                p
            }
            LayerDescriptor::ResidualAdd { name, link, activation, .. } => {
                mapper::lower_residual(name, shapes[i].elems(), src, layout.outputs[*link], out, *activation, cfg)?
            }
            LayerDescriptor::MaxPool { name, shape, .. } => mapper::lower_pool(name, shape, src, out, cfg, opts)?,
        };
        program.append(p);
    }
    layout.ranges = alloc.ranges().to_vec();
    Ok((program, layout))
}

/// Page table mapping exactly the ranges of the given layouts.
pub fn page_table(layouts: &[&Layout]) -> PageTable {
    PageTable::IdentityRanges(layouts.iter().flat_map(|l| l.ranges.iter().copied()).collect())
}

/// Write weights and input into DRAM at their layout addresses.
pub fn load(dram: &mut DramImage, layout: &Layout, weights: &Weights, input: &[i8]) {
    dram.write_i8(layout.input, input);
    for (addr, w) in layout.weights.iter().zip(&weights.0) {
        if let Some(a) = addr {
            dram.write_i8(*a, w);
        }
    }
}

/// Output tensor of every layer as stored in DRAM.
pub fn read_outputs(dram: &DramImage, layout: &Layout) -> Vec<Vec<i8>> {
    layout.outputs.iter().zip(&layout.shapes).map(|(&a, s)| dram.read_i8(a, s.elems())).collect()
}

/// Naive reference execution: output of every layer.
pub fn reference(
    net: &NetworkDesc,
    weights: &Weights,
    input: &[i8],
    relu6_shift: u32,
) -> Result<Vec<Vec<i8>>, WorkloadError> {
    let shapes = net.validate()?;
    let mut outs: Vec<Vec<i8>> = Vec::with_capacity(net.layers.len());
    for (i, l) in net.layers.iter().enumerate() {
        let x: &[i8] = match net.source(i) {
            Source::Input => input,
            Source::Layer(j) => &outs[j],
        };
        let epi = |acc: &mut dyn Iterator<Item = i32>| -> Vec<i8> {
            acc.map(|v| scale_act(v, l.scale(), l.activation(), relu6_shift)).collect()
        };
        let y = match l {
            LayerDescriptor::Conv { shape, .. } => {
                let xin = ArrayView4::from_shape(shape.input().dims(), x).expect("validated shape");
                let w = ArrayView4::from_shape((shape.kh, shape.kw, shape.c, shape.k), &weights.0[i])
                    .expect("weight length");
                let acc = func::conv2d_direct(xin, w, shape.stride, shape.pad)?;
                epi(&mut acc.iter().copied())
            }
            LayerDescriptor::Matmul { m, n, k, .. } => {
                let a = ArrayView2::from_shape((*m, *k), x).expect("validated shape");
                let b = ArrayView2::from_shape((*k, *n), &weights.0[i]).expect("weight length");
                epi(&mut naive_matmul(a, b).iter().copied())
            }
            LayerDescriptor::ResidualAdd { link, activation, .. } => {
                let dims = IxDyn(&[x.len()]);
                let a = ArrayViewD::from_shape(dims.clone(), x).expect("flat").to_owned();
                let b = ArrayViewD::from_shape(dims, &outs[*link]).expect("flat").to_owned();
                func::residual_add(&a, &b)?
                    .iter()
                    .map(|&v| scale_act(v as i32, Scale::ONE, *activation, relu6_shift))
                    .collect()
            }
            LayerDescriptor::MaxPool { shape, .. } => {
                let xin = ArrayView4::from_shape(shape.input().dims(), x).expect("validated shape");
                func::maxpool(xin, shape.kh, shape.kw, shape.stride, shape.pad)?.iter().copied().collect()
            }
        };
        debug_assert_eq!(y.len(), shapes[i].elems());
        outs.push(y);
    }
    Ok(outs)
}

/// Triple-loop int32 matmul with wrapping accumulation.
pub fn naive_matmul(a: ArrayView2<i8>, b: ArrayView2<i8>) -> Array2<i32> {
    let (m, k) = a.dim();
    let n = b.ncols();
    let mut c = Array2::<i32>::zeros((m, n));
    for i in 0..m {
        for j in 0..n {
            let mut s = 0i32;
            for t in 0..k {
                s = s.wrapping_add(a[[i, t]] as i32 * b[[t, j]] as i32);
            }
            c[[i, j]] = s;
        }
    }
    c
}
