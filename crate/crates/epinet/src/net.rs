//! Netbuilder: parse the flat sectioned config format into an ordered layer
//! stack, run forward/backward across the stack, and checkpoint parameters
//! bit-exactly.

use std::io::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::epitome::{
    epitomic_backward, epitomic_forward, topographic_backward, topographic_forward, ArgmaxMap,
    EpitomeBank, TopographicBank,
};
use crate::error::{Error, Result};
use crate::layers::{
    bias_relu_backward, bias_relu_forward, conv_backward, conv_forward, dropout_backward,
    dropout_forward, fc_backward, fc_forward, lrn_backward, lrn_forward, maxpool_backward,
    maxpool_forward, softmax_loss, ConvBank, LrnParams, PoolArgmax,
};
use crate::optim::ParamState;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Dropout toggles on this.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Parsed body of one `[layer <name>]` section.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Epitomic {
        epitomes: usize,
        epitome: usize,
        filter: usize,
        stride: usize,
        epitome_stride: usize,
        normalize: bool,
        lambda: f64,
    },
    Topographic {
        epitomes: usize,
        epitome: usize,
        filter: usize,
        stride: usize,
        epitome_stride: usize,
        pool: usize,
        normalize: bool,
        lambda: f64,
    },
    Conv {
        channels: usize,
        filter: usize,
        stride: usize,
    },
    Maxpool {
        pool: usize,
        pool_stride: usize,
    },
    Relu,
    Lrn(LrnParams),
    Dropout {
        rate: f64,
    },
    Fc {
        channels: usize,
    },
    Softmax {
        classes: usize,
    },
}

#[derive(Debug, Clone)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
}

#[derive(Debug, Clone)]
pub struct NetworkConfig {
    /// (C, H, W) of a single input image.
    pub input: (usize, usize, usize),
    pub layers: Vec<LayerSpec>,
    /// Whitespace-normalized config text; hashed for the checkpoint
    /// fingerprint.
    pub canonical: String,
}

impl NetworkConfig {
    pub fn classes(&self) -> usize {
        match self.layers.last() {
            Some(LayerSpec {
                kind: LayerKind::Softmax { classes },
                ..
            }) => *classes,
            _ => 0,
        }
    }

    pub fn fingerprint(&self) -> u64 {
        fnv1a64(self.canonical.as_bytes())
    }
}

/// 64-bit FNV-1a over a byte string.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Strip comments, trim lines, collapse internal whitespace runs, drop blank
/// lines. Two configs differing only in layout hash identically.
pub fn canonicalize(text: &str) -> String {
    let mut out = String::new();
    for line in text.lines() {
        let line = match line.find('#') {
            Some(i) => &line[..i],
            None => line,
        };
        let mut words = line.split_whitespace();
        if let Some(first) = words.next() {
            if !out.is_empty() {
                out.push('\n');
            }
            out.push_str(first);
            for w in words {
                out.push(' ');
                out.push_str(w);
            }
        }
    }
    out
}

const ALL_KEYS: &[&str] = &[
    "type",
    "channels",
    "epitomes",
    "epitome",
    "filter",
    "stride",
    "epitome_stride",
    "pool",
    "pool_stride",
    "normalize",
    "lambda",
    "dropout",
    "lrn_n",
    "lrn_alpha",
    "lrn_beta",
    "lrn_k",
    "classes",
    "input",
];

struct Section {
    name: String,
    line: usize,
    entries: Vec<(String, String, usize)>,
}

impl Section {
    fn get(&self, key: &str) -> Option<(&str, usize)> {
        self.entries
            .iter()
            .find(|(k, _, _)| k == key)
            .map(|(_, v, l)| (v.as_str(), *l))
    }

    fn require(&self, key: &str) -> Result<(&str, usize)> {
        self.get(key).ok_or(Error::ConfigParse {
            line: self.line,
            message: format!("section `{}` is missing required key `{key}`", self.name),
        })
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let (v, line) = self.require(key)?;
        v.parse().map_err(|_| Error::ConfigParse {
            line,
            message: format!("invalid value `{v}` for key `{key}`"),
        })
    }

    fn parse_or<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some((v, line)) => v.parse().map_err(|_| Error::ConfigParse {
                line,
                message: format!("invalid value `{v}` for key `{key}`"),
            }),
        }
    }

    /// Error if any key outside `allowed` (plus `type`) is present.
    fn restrict(&self, allowed: &[&str]) -> Result<()> {
        for (k, _, line) in &self.entries {
            if k != "type" && !allowed.contains(&k.as_str()) {
                return Err(Error::ConfigParse {
                    line: *line,
                    message: format!(
                        "key `{k}` is not valid in section `{}` (allowed: {})",
                        self.name,
                        allowed.join(", ")
                    ),
                });
            }
        }
        Ok(())
    }
}

fn parse_sections(text: &str) -> Result<Vec<Section>> {
    let mut sections: Vec<Section> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = match raw.find('#') {
            Some(j) => &raw[..j],
            None => raw,
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(inner) = line.strip_prefix('[') {
            let inner = inner.strip_suffix(']').ok_or(Error::ConfigParse {
                line: lineno,
                message: "unterminated section header".into(),
            })?;
            let name = if inner.trim() == "net" {
                "net".to_string()
            } else if let Some(rest) = inner.trim().strip_prefix("layer ") {
                let name = rest.trim();
                if name.is_empty() {
                    return Err(Error::ConfigParse {
                        line: lineno,
                        message: "layer section needs a name: `[layer <name>]`".into(),
                    });
                }
                name.to_string()
            } else {
                return Err(Error::ConfigParse {
                    line: lineno,
                    message: format!("unknown section header `[{}]`", inner.trim()),
                });
            };
            if sections.iter().any(|s| s.name == name) {
                return Err(Error::ConfigParse {
                    line: lineno,
                    message: format!("duplicate section `{name}`"),
                });
            }
            sections.push(Section {
                name,
                line: lineno,
                entries: Vec::new(),
            });
            continue;
        }
        let (key, value) = line.split_once('=').ok_or(Error::ConfigParse {
            line: lineno,
            message: "expected `key = value`".into(),
        })?;
        let key = key.trim();
        let value = value.trim();
        if !ALL_KEYS.contains(&key) {
            return Err(Error::ConfigParse {
                line: lineno,
                message: format!("unknown key `{key}`"),
            });
        }
        match sections.last_mut() {
            Some(s) => s.entries.push((key.to_string(), value.to_string(), lineno)),
            None => {
                return Err(Error::ConfigParse {
                    line: lineno,
                    message: "key outside any section".into(),
                })
            }
        }
    }
    Ok(sections)
}

fn parse_input_dims(v: &str, line: usize) -> Result<(usize, usize, usize)> {
    let parts: Vec<&str> = v.split('x').collect();
    let err = || Error::ConfigParse {
        line,
        message: format!("input must be CxHxW, got `{v}`"),
    };
    if parts.len() != 3 {
        return Err(err());
    }
    let c = parts[0].parse().map_err(|_| err())?;
    let h = parts[1].parse().map_err(|_| err())?;
    let w = parts[2].parse().map_err(|_| err())?;
    if c == 0 || h == 0 || w == 0 {
        return Err(err());
    }
    Ok((c, h, w))
}

fn parse_bool(s: &Section, key: &str, default: bool) -> Result<bool> {
    match s.get(key) {
        None => Ok(default),
        Some(("true", _)) => Ok(true),
        Some(("false", _)) => Ok(false),
        Some((v, line)) => Err(Error::ConfigParse {
            line,
            message: format!("key `{key}` must be true or false, got `{v}`"),
        }),
    }
}

fn parse_layer(s: &Section) -> Result<LayerSpec> {
    let (ty, ty_line) = s.require("type")?;
    let kind = match ty {
        "epitomic" | "topographic" => {
            let mut allowed = vec![
                "epitomes",
                "epitome",
                "filter",
                "stride",
                "epitome_stride",
                "normalize",
                "lambda",
            ];
            if ty == "topographic" {
                allowed.push("pool");
            }
            s.restrict(&allowed)?;
            let normalize = parse_bool(s, "normalize", false)?;
            if !normalize && s.get("lambda").is_some() {
                return Err(Error::ConfigParse {
                    line: s.get("lambda").unwrap().1,
                    message: "lambda is only meaningful with normalize = true".into(),
                });
            }
            let lambda = s.parse_or("lambda", 0.01)?;
            let epitomes = s.parse("epitomes")?;
            let epitome = s.parse("epitome")?;
            let filter = s.parse("filter")?;
            let stride = s.parse("stride")?;
            let epitome_stride = s.parse_or("epitome_stride", 1)?;
            if ty == "epitomic" {
                LayerKind::Epitomic {
                    epitomes,
                    epitome,
                    filter,
                    stride,
                    epitome_stride,
                    normalize,
                    lambda,
                }
            } else {
                LayerKind::Topographic {
                    epitomes,
                    epitome,
                    filter,
                    stride,
                    epitome_stride,
                    pool: s.parse("pool")?,
                    normalize,
                    lambda,
                }
            }
        }
        "conv" => {
            s.restrict(&["channels", "filter", "stride"])?;
            LayerKind::Conv {
                channels: s.parse("channels")?,
                filter: s.parse("filter")?,
                stride: s.parse_or("stride", 1)?,
            }
        }
        "maxpool" => {
            s.restrict(&["pool", "pool_stride"])?;
            let pool = s.parse("pool")?;
            LayerKind::Maxpool {
                pool,
                pool_stride: s.parse_or("pool_stride", pool)?,
            }
        }
        "relu" => {
            s.restrict(&[])?;
            LayerKind::Relu
        }
        "lrn" => {
            s.restrict(&["lrn_n", "lrn_alpha", "lrn_beta", "lrn_k"])?;
            let d = LrnParams::default();
            LayerKind::Lrn(LrnParams {
                n: s.parse_or("lrn_n", d.n)?,
                alpha: s.parse_or("lrn_alpha", d.alpha)?,
                beta: s.parse_or("lrn_beta", d.beta)?,
                k: s.parse_or("lrn_k", d.k)?,
            })
        }
        "dropout" => {
            s.restrict(&["dropout"])?;
            let rate: f64 = s.parse("dropout")?;
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::ConfigParse {
                    line: s.get("dropout").unwrap().1,
                    message: format!("dropout rate {rate} outside [0, 1)"),
                });
            }
            LayerKind::Dropout { rate }
        }
        "fc" => {
            s.restrict(&["channels"])?;
            LayerKind::Fc {
                channels: s.parse("channels")?,
            }
        }
        "softmax" => {
            s.restrict(&["classes"])?;
            LayerKind::Softmax {
                classes: s.parse("classes")?,
            }
        }
        other => {
            return Err(Error::ConfigParse {
                line: ty_line,
                message: format!("unknown layer type `{other}`"),
            })
        }
    };
    Ok(LayerSpec {
        name: s.name.clone(),
        kind,
    })
}

/// Output shape of one layer given its input shape, or a ShapeChain error
/// naming both sides.
fn chain_shape(
    prev_name: &str,
    spec: &LayerSpec,
    shape: (usize, usize, usize),
) -> Result<(usize, usize, usize)> {
    let (c, h, w) = shape;
    let err = |message: String| Error::ShapeChain {
        from: prev_name.to_string(),
        to: spec.name.clone(),
        message,
    };
    let spatial = |filter: usize, stride: usize| -> Result<(usize, usize)> {
        if filter > h || filter > w {
            return Err(err(format!("window {filter} exceeds input {h}x{w}")));
        }
        if stride == 0 {
            return Err(err("stride must be positive".into()));
        }
        Ok(((h - filter) / stride + 1, (w - filter) / stride + 1))
    };
    match &spec.kind {
        LayerKind::Epitomic {
            epitomes,
            epitome,
            filter,
            stride,
            epitome_stride,
            normalize,
            lambda,
        } => {
            // Validate the bank geometry with the same rules the runtime uses.
            EpitomeBank::<f32>::new(
                *epitomes,
                *epitome,
                *filter,
                c,
                *epitome_stride,
                *normalize,
                *lambda as f32,
            )
            .map_err(|e| err(e.to_string()))?;
            let (oh, ow) = spatial(*filter, *stride)?;
            Ok((*epitomes, oh, ow))
        }
        LayerKind::Topographic {
            epitomes,
            epitome,
            filter,
            stride,
            epitome_stride,
            pool,
            normalize,
            lambda,
        } => {
            let bank = EpitomeBank::<f32>::new(
                *epitomes,
                *epitome,
                *filter,
                c,
                *epitome_stride,
                *normalize,
                *lambda as f32,
            )
            .map_err(|e| err(e.to_string()))?;
            let bank = TopographicBank::new(bank, *pool).map_err(|e| err(e.to_string()))?;
            let (oh, ow) = spatial(*filter, *stride)?;
            Ok((bank.output_channels(), oh, ow))
        }
        LayerKind::Conv {
            channels,
            filter,
            stride,
        } => {
            let (oh, ow) = spatial(*filter, *stride)?;
            Ok((*channels, oh, ow))
        }
        LayerKind::Maxpool { pool, pool_stride } => {
            let (oh, ow) = spatial(*pool, *pool_stride)?;
            Ok((c, oh, ow))
        }
        LayerKind::Relu | LayerKind::Lrn(_) | LayerKind::Dropout { .. } => Ok(shape),
        LayerKind::Fc { channels } => Ok((*channels, 1, 1)),
        LayerKind::Softmax { classes } => Ok((*classes, 1, 1)),
    }
}

/// Per-layer output shapes for the whole stack, starting from the configured
/// input.
pub fn infer_shapes(cfg: &NetworkConfig) -> Result<Vec<(usize, usize, usize)>> {
    let mut shapes = Vec::with_capacity(cfg.layers.len());
    let mut shape = cfg.input;
    let mut prev = "input".to_string();
    for spec in &cfg.layers {
        shape = chain_shape(&prev, spec, shape)?;
        shapes.push(shape);
        prev = spec.name.clone();
    }
    Ok(shapes)
}

/// Parse and fully validate a config: sections, key restrictions, exactly one
/// terminal softmax, and a complete shape-inference pass.
pub fn parse_config(text: &str) -> Result<NetworkConfig> {
    let sections = parse_sections(text)?;
    let net = sections
        .iter()
        .find(|s| s.name == "net")
        .ok_or(Error::ConfigParse {
            line: 1,
            message: "missing [net] section".into(),
        })?;
    net.restrict(&["input"])?;
    let (input_str, input_line) = net.require("input")?;
    let input = parse_input_dims(input_str, input_line)?;

    let mut layers = Vec::new();
    for s in sections.iter().filter(|s| s.name != "net") {
        layers.push(parse_layer(s)?);
    }
    if layers.is_empty() {
        return Err(Error::ConfigParse {
            line: 1,
            message: "no layer sections".into(),
        });
    }
    let softmax_count = layers
        .iter()
        .filter(|l| matches!(l.kind, LayerKind::Softmax { .. }))
        .count();
    if softmax_count != 1 || !matches!(layers.last().unwrap().kind, LayerKind::Softmax { .. }) {
        return Err(Error::ConfigParse {
            line: 1,
            message: "network must end in exactly one softmax layer".into(),
        });
    }
    let cfg = NetworkConfig {
        input,
        layers,
        canonical: canonicalize(text),
    };
    infer_shapes(&cfg)?;
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// Layer stack
// ---------------------------------------------------------------------------

/// Mutable view of one named parameter tensor and its gradient accumulator.
pub struct ParamRef<'a, F: Scalar> {
    pub name: String,
    pub dims: Vec<usize>,
    pub value: &'a mut [F],
    pub grad: &'a mut [F],
    /// False for mean+contrast-normalized weights (weight decay off) and for
    /// biases.
    pub decay: bool,
}

pub trait Layer<F: Scalar>: Send {
    fn name(&self) -> &str;
    fn forward(&mut self, input: &Tensor<F>, mode: Mode, rng: &mut ChaCha8Rng)
        -> Result<Tensor<F>>;
    fn backward(&mut self, grad_out: &Tensor<F>) -> Result<Tensor<F>>;
    fn params(&mut self) -> Vec<ParamRef<'_, F>>;
    /// Winner-vs-runner-up gap of the last forward's argmax decisions
    /// (infinite for smooth layers); the gradient checker's kink guard.
    fn min_margin(&self) -> f64 {
        f64::INFINITY
    }
}

fn no_forward<F: Scalar>(name: &str) -> Error {
    Error::dim(name, "backward called without a preceding forward")
}

struct EpitomicLayer<F: Scalar> {
    name: String,
    bank: EpitomeBank<F>,
    input_stride: usize,
    grad_weights: Vec<F>,
    cache: Option<(Tensor<F>, ArgmaxMap)>,
    last_margin: f64,
}

impl<F: Scalar> Layer<F> for EpitomicLayer<F> {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&mut self, input: &Tensor<F>, _: Mode, _: &mut ChaCha8Rng) -> Result<Tensor<F>> {
        let (out, argmax) = epitomic_forward(input, &self.bank, self.input_stride)?;
        self.last_margin = argmax.min_margin;
        self.cache = Some((input.clone(), argmax));
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor<F>) -> Result<Tensor<F>> {
        let (input, argmax) = self.cache.take().ok_or_else(|| no_forward::<F>(&self.name))?;
        let (gi, grads) =
            epitomic_backward(grad_out, &input, &self.bank, &argmax, self.input_stride)?;
        for (acc, g) in self.grad_weights.iter_mut().zip(grads.weights.iter()) {
            *acc = *acc + *g;
        }
        Ok(gi)
    }

    fn params(&mut self) -> Vec<ParamRef<'_, F>> {
        vec![ParamRef {
            name: format!("{}.weights", self.name),
            dims: vec![
                self.bank.count,
                self.bank.channels,
                self.bank.epitome_side,
                self.bank.epitome_side,
            ],
            value: &mut self.bank.weights,
            grad: &mut self.grad_weights,
            decay: !self.bank.normalize,
        }]
    }

    fn min_margin(&self) -> f64 {
        self.last_margin
    }
}

struct TopographicLayer<F: Scalar> {
    name: String,
    bank: TopographicBank<F>,
    input_stride: usize,
    grad_weights: Vec<F>,
    cache: Option<(Tensor<F>, ArgmaxMap)>,
    last_margin: f64,
}

impl<F: Scalar> Layer<F> for TopographicLayer<F> {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&mut self, input: &Tensor<F>, _: Mode, _: &mut ChaCha8Rng) -> Result<Tensor<F>> {
        let (out, argmax) = topographic_forward(input, &self.bank, self.input_stride)?;
        self.last_margin = argmax.min_margin;
        self.cache = Some((input.clone(), argmax));
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor<F>) -> Result<Tensor<F>> {
        let (input, argmax) = self.cache.take().ok_or_else(|| no_forward::<F>(&self.name))?;
        let (gi, grads) =
            topographic_backward(grad_out, &input, &self.bank, &argmax, self.input_stride)?;
        for (acc, g) in self.grad_weights.iter_mut().zip(grads.weights.iter()) {
            *acc = *acc + *g;
        }
        Ok(gi)
    }

    fn params(&mut self) -> Vec<ParamRef<'_, F>> {
        vec![ParamRef {
            name: format!("{}.weights", self.name),
            dims: vec![
                self.bank.bank.count,
                self.bank.bank.channels,
                self.bank.bank.epitome_side,
                self.bank.bank.epitome_side,
            ],
            value: &mut self.bank.bank.weights,
            grad: &mut self.grad_weights,
            decay: !self.bank.bank.normalize,
        }]
    }

    fn min_margin(&self) -> f64 {
        self.last_margin
    }
}

struct ConvLayer<F: Scalar> {
    name: String,
    bank: ConvBank<F>,
    grad_weights: Vec<F>,
    cache: Option<Tensor<F>>,
}

impl<F: Scalar> Layer<F> for ConvLayer<F> {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&mut self, input: &Tensor<F>, _: Mode, _: &mut ChaCha8Rng) -> Result<Tensor<F>> {
        let out = conv_forward(input, &self.bank)?;
        self.cache = Some(input.clone());
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor<F>) -> Result<Tensor<F>> {
        let input = self.cache.take().ok_or_else(|| no_forward::<F>(&self.name))?;
        let (gi, gw) = conv_backward(grad_out, &input, &self.bank)?;
        for (acc, g) in self.grad_weights.iter_mut().zip(gw.iter()) {
            *acc = *acc + *g;
        }
        Ok(gi)
    }

    fn params(&mut self) -> Vec<ParamRef<'_, F>> {
        vec![ParamRef {
            name: format!("{}.weights", self.name),
            dims: vec![
                self.bank.count,
                self.bank.channels,
                self.bank.filter_side,
                self.bank.filter_side,
            ],
            value: &mut self.bank.weights,
            grad: &mut self.grad_weights,
            decay: true,
        }]
    }
}

struct MaxpoolLayer<F: Scalar> {
    name: String,
    pool: usize,
    stride: usize,
    cache: Option<(PoolArgmax, (usize, usize, usize, usize))>,
    last_margin: f64,
    _marker: std::marker::PhantomData<F>,
}

impl<F: Scalar> Layer<F> for MaxpoolLayer<F> {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&mut self, input: &Tensor<F>, _: Mode, _: &mut ChaCha8Rng) -> Result<Tensor<F>> {
        let (out, argmax) = maxpool_forward(input, self.pool, self.stride)?;
        self.last_margin = argmax.min_margin;
        self.cache = Some((argmax, input.dims()));
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor<F>) -> Result<Tensor<F>> {
        let (argmax, dims) = self.cache.take().ok_or_else(|| no_forward::<F>(&self.name))?;
        maxpool_backward(grad_out, &argmax, dims, self.pool, self.stride)
    }

    fn params(&mut self) -> Vec<ParamRef<'_, F>> {
        Vec::new()
    }

    fn min_margin(&self) -> f64 {
        self.last_margin
    }
}

/// ReLU owns the per-channel biases of the preceding linear map:
/// y = max(x + beta_c, 0).
struct ReluLayer<F: Scalar> {
    name: String,
    biases: Vec<F>,
    grad_biases: Vec<F>,
    cache: Option<Tensor<F>>,
    last_margin: f64,
}

impl<F: Scalar> Layer<F> for ReluLayer<F> {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&mut self, input: &Tensor<F>, _: Mode, _: &mut ChaCha8Rng) -> Result<Tensor<F>> {
        let out = bias_relu_forward(input, &self.biases)?;
        // Distance of each pre-activation from the ReLU kink at zero.
        let mut margin = f64::INFINITY;
        let plane = input.h * input.w;
        for im in 0..input.n {
            for c in 0..input.c {
                let base = input.idx(im, c, 0, 0);
                let b = Scalar::to_f64(self.biases[c]);
                for v in &input.data()[base..base + plane] {
                    let m = (Scalar::to_f64(*v) + b).abs();
                    if m < margin {
                        margin = m;
                    }
                }
            }
        }
        self.last_margin = margin;
        self.cache = Some(out.clone());
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor<F>) -> Result<Tensor<F>> {
        let output = self.cache.take().ok_or_else(|| no_forward::<F>(&self.name))?;
        let (gi, gb) = bias_relu_backward(grad_out, &output)?;
        for (acc, g) in self.grad_biases.iter_mut().zip(gb.iter()) {
            *acc = *acc + *g;
        }
        Ok(gi)
    }

    fn params(&mut self) -> Vec<ParamRef<'_, F>> {
        vec![ParamRef {
            name: format!("{}.biases", self.name),
            dims: vec![self.biases.len()],
            value: &mut self.biases,
            grad: &mut self.grad_biases,
            decay: false,
        }]
    }

    fn min_margin(&self) -> f64 {
        self.last_margin
    }
}

struct LrnLayer<F: Scalar> {
    name: String,
    lrn: LrnParams,
    cache: Option<Tensor<F>>,
}

impl<F: Scalar> Layer<F> for LrnLayer<F> {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&mut self, input: &Tensor<F>, _: Mode, _: &mut ChaCha8Rng) -> Result<Tensor<F>> {
        let out = lrn_forward(input, &self.lrn)?;
        self.cache = Some(input.clone());
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor<F>) -> Result<Tensor<F>> {
        let input = self.cache.take().ok_or_else(|| no_forward::<F>(&self.name))?;
        lrn_backward(grad_out, &input, &self.lrn)
    }

    fn params(&mut self) -> Vec<ParamRef<'_, F>> {
        Vec::new()
    }
}

struct DropoutLayer<F: Scalar> {
    name: String,
    rate: f64,
    cache: Option<(Vec<bool>, bool)>,
    _marker: std::marker::PhantomData<F>,
}

impl<F: Scalar> Layer<F> for DropoutLayer<F> {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&mut self, input: &Tensor<F>, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Tensor<F>> {
        let train = mode == Mode::Train;
        let (out, mask) = dropout_forward(input, self.rate, train, rng)?;
        self.cache = Some((mask, train));
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor<F>) -> Result<Tensor<F>> {
        let (mask, train) = self.cache.take().ok_or_else(|| no_forward::<F>(&self.name))?;
        if train {
            dropout_backward(grad_out, &mask, self.rate)
        } else {
            Ok(grad_out.clone())
        }
    }

    fn params(&mut self) -> Vec<ParamRef<'_, F>> {
        Vec::new()
    }
}

/// Affine map onto `out_dim` units. Used for both `fc` sections and the
/// classifier stage of the terminal `softmax` section.
struct FcLayer<F: Scalar> {
    name: String,
    in_dim: usize,
    out_dim: usize,
    weights: Vec<F>,
    biases: Vec<F>,
    grad_weights: Vec<F>,
    grad_biases: Vec<F>,
    cache: Option<Tensor<F>>,
}

impl<F: Scalar> Layer<F> for FcLayer<F> {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&mut self, input: &Tensor<F>, _: Mode, _: &mut ChaCha8Rng) -> Result<Tensor<F>> {
        let out = fc_forward(input, &self.weights, &self.biases)?;
        self.cache = Some(input.clone());
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor<F>) -> Result<Tensor<F>> {
        let input = self.cache.take().ok_or_else(|| no_forward::<F>(&self.name))?;
        let (gi, gw, gb) = fc_backward(grad_out, &input, &self.weights)?;
        for (acc, g) in self.grad_weights.iter_mut().zip(gw.iter()) {
            *acc = *acc + *g;
        }
        for (acc, g) in self.grad_biases.iter_mut().zip(gb.iter()) {
            *acc = *acc + *g;
        }
        Ok(gi)
    }

    fn params(&mut self) -> Vec<ParamRef<'_, F>> {
        vec![
            ParamRef {
                name: format!("{}.weights", self.name),
                dims: vec![self.out_dim, self.in_dim],
                value: &mut self.weights,
                grad: &mut self.grad_weights,
                decay: true,
            },
            ParamRef {
                name: format!("{}.biases", self.name),
                dims: vec![self.out_dim],
                value: &mut self.biases,
                grad: &mut self.grad_biases,
                decay: false,
            },
        ]
    }
}

// ---------------------------------------------------------------------------
// Network
// ---------------------------------------------------------------------------

pub struct Network<F: Scalar> {
    pub config: NetworkConfig,
    pub fingerprint: u64,
    pub input_shape: (usize, usize, usize),
    pub classes: usize,
    layers: Vec<Box<dyn Layer<F>>>,
    logits: Option<(Tensor<F>, Vec<usize>)>,
}

/// Gaussian weight fill. Hidden layers use fan-in-scaled He initialization
/// (std = sqrt(2 / fan_in)) so signals neither vanish nor explode through
/// the stack; the terminal classifier uses a small fixed std, which keeps
/// the untrained loss at ln(classes).
fn init_weights<F: Scalar>(w: &mut [F], std: f64, rng: &mut ChaCha8Rng) {
    let normal = Normal::new(0.0f64, std).expect("valid normal");
    for v in w.iter_mut() {
        *v = F::from_f64(normal.sample(rng));
    }
}

fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

impl<F: Scalar> Network<F> {
    /// Build the layer stack from a validated config, initializing weights
    /// from the supplied RNG (callers use the master seed's stream 0).
    pub fn build(cfg: &NetworkConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let shapes = infer_shapes(cfg)?;
        let mut layers: Vec<Box<dyn Layer<F>>> = Vec::with_capacity(cfg.layers.len());
        let mut shape = cfg.input;
        for (spec, &out_shape) in cfg.layers.iter().zip(shapes.iter()) {
            let (c, h, w) = shape;
            match &spec.kind {
                LayerKind::Epitomic {
                    epitomes,
                    epitome,
                    filter,
                    stride,
                    epitome_stride,
                    normalize,
                    lambda,
                } => {
                    let mut bank = EpitomeBank::new(
                        *epitomes,
                        *epitome,
                        *filter,
                        c,
                        *epitome_stride,
                        *normalize,
                        F::from_f64(*lambda),
                    )?;
                    init_weights(&mut bank.weights, he_std(c * *filter * *filter), rng);
                    let n = bank.weights.len();
                    layers.push(Box::new(EpitomicLayer {
                        name: spec.name.clone(),
                        bank,
                        input_stride: *stride,
                        grad_weights: vec![F::zero(); n],
                        cache: None,
                        last_margin: f64::INFINITY,
                    }));
                }
                LayerKind::Topographic {
                    epitomes,
                    epitome,
                    filter,
                    stride,
                    epitome_stride,
                    pool,
                    normalize,
                    lambda,
                } => {
                    let mut bank = EpitomeBank::new(
                        *epitomes,
                        *epitome,
                        *filter,
                        c,
                        *epitome_stride,
                        *normalize,
                        F::from_f64(*lambda),
                    )?;
                    init_weights(&mut bank.weights, he_std(c * *filter * *filter), rng);
                    let n = bank.weights.len();
                    layers.push(Box::new(TopographicLayer {
                        name: spec.name.clone(),
                        bank: TopographicBank::new(bank, *pool)?,
                        input_stride: *stride,
                        grad_weights: vec![F::zero(); n],
                        cache: None,
                        last_margin: f64::INFINITY,
                    }));
                }
                LayerKind::Conv {
                    channels,
                    filter,
                    stride,
                } => {
                    let mut bank = ConvBank::new(*channels, *filter, c, *stride);
                    init_weights(&mut bank.weights, he_std(c * *filter * *filter), rng);
                    let n = bank.weights.len();
                    layers.push(Box::new(ConvLayer {
                        name: spec.name.clone(),
                        bank,
                        grad_weights: vec![F::zero(); n],
                        cache: None,
                    }));
                }
                LayerKind::Maxpool { pool, pool_stride } => {
                    layers.push(Box::new(MaxpoolLayer {
                        name: spec.name.clone(),
                        pool: *pool,
                        stride: *pool_stride,
                        cache: None,
                        last_margin: f64::INFINITY,
                        _marker: std::marker::PhantomData,
                    }));
                }
                LayerKind::Relu => {
                    layers.push(Box::new(ReluLayer {
                        name: spec.name.clone(),
                        biases: vec![F::zero(); c],
                        grad_biases: vec![F::zero(); c],
                        cache: None,
                        last_margin: f64::INFINITY,
                    }));
                }
                LayerKind::Lrn(p) => {
                    layers.push(Box::new(LrnLayer {
                        name: spec.name.clone(),
                        lrn: *p,
                        cache: None,
                    }));
                }
                LayerKind::Dropout { rate } => {
                    layers.push(Box::new(DropoutLayer {
                        name: spec.name.clone(),
                        rate: *rate,
                        cache: None,
                        _marker: std::marker::PhantomData,
                    }));
                }
                LayerKind::Fc { channels } | LayerKind::Softmax { classes: channels } => {
                    let in_dim = c * h * w;
                    let out_dim = *channels;
                    let std = if matches!(spec.kind, LayerKind::Softmax { .. }) {
                        0.01
                    } else {
                        he_std(in_dim)
                    };
                    let mut weights = vec![F::zero(); out_dim * in_dim];
                    init_weights(&mut weights, std, rng);
                    layers.push(Box::new(FcLayer {
                        name: spec.name.clone(),
                        in_dim,
                        out_dim,
                        weights,
                        biases: vec![F::zero(); out_dim],
                        grad_weights: vec![F::zero(); out_dim * in_dim],
                        grad_biases: vec![F::zero(); out_dim],
                        cache: None,
                    }));
                }
            }
            shape = out_shape;
        }
        Ok(Network {
            fingerprint: cfg.fingerprint(),
            input_shape: cfg.input,
            classes: cfg.classes(),
            config: cfg.clone(),
            layers,
            logits: None,
        })
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn layer_name(&self, i: usize) -> &str {
        self.layers[i].name()
    }

    /// Run the stack, returning the class logits.
    pub fn forward_logits(
        &mut self,
        batch: &Tensor<F>,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor<F>> {
        let (c, h, w) = self.input_shape;
        if (batch.c, batch.h, batch.w) != (c, h, w) {
            return Err(Error::dim(
                "Network::forward",
                format!(
                    "batch shape {}x{}x{} does not match configured input {c}x{h}x{w}",
                    batch.c, batch.h, batch.w
                ),
            ));
        }
        let mut x = batch.clone();
        for layer in self.layers.iter_mut() {
            x = layer.forward(&x, mode, rng)?;
        }
        Ok(x)
    }

    /// Forward plus softmax log-loss; caches the logits and labels for the
    /// next backward call.
    pub fn forward_loss(
        &mut self,
        batch: &Tensor<F>,
        labels: &[usize],
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64> {
        let logits = self.forward_logits(batch, mode, rng)?;
        let (loss, _) = softmax_loss(&logits, labels)?;
        self.logits = Some((logits, labels.to_vec()));
        Ok(loss)
    }

    /// Backpropagate from the cached loss through the whole stack,
    /// accumulating parameter gradients. Returns the gradient with respect
    /// to the input batch.
    pub fn backward(&mut self) -> Result<Tensor<F>> {
        let (logits, labels) = self
            .logits
            .take()
            .ok_or_else(|| Error::dim("Network::backward", "backward without forward"))?;
        let (_, mut grad) = softmax_loss(&logits, &labels)?;
        for layer in self.layers.iter_mut().rev() {
            grad = layer.backward(&grad)?;
        }
        Ok(grad)
    }

    /// Eval-mode argmax class per image. Deterministic (dropout off).
    pub fn predict(&mut self, batch: &Tensor<F>) -> Result<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits = self.forward_logits(batch, Mode::Eval, &mut rng)?;
        let classes = logits.c;
        let mut out = Vec::with_capacity(logits.n);
        for i in 0..logits.n {
            let row = &logits.data()[i * classes..(i + 1) * classes];
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            out.push(best);
        }
        Ok(out)
    }

    pub fn zero_grads(&mut self) {
        for p in self.params() {
            for g in p.grad.iter_mut() {
                *g = F::zero();
            }
        }
    }

    /// All parameter tensors in stack order.
    pub fn params(&mut self) -> Vec<ParamRef<'_, F>> {
        let mut out = Vec::new();
        for layer in self.layers.iter_mut() {
            out.extend(layer.params());
        }
        out
    }

    /// Parameters of one layer by name (empty if the layer has none).
    pub fn layer_params(&mut self, name: &str) -> Result<Vec<ParamRef<'_, F>>> {
        let layer = self
            .layers
            .iter_mut()
            .find(|l| l.name() == name)
            .ok_or_else(|| Error::dim("Network::layer_params", format!("no layer named `{name}`")))?;
        Ok(layer.params())
    }

    /// Smallest argmax margin across all layers in the last forward pass.
    pub fn min_margin(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.min_margin())
            .fold(f64::INFINITY, f64::min)
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DEPN";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Optimizer and schedule position that travels with the parameters.
#[derive(Debug, Clone)]
pub struct TrainState<F: Scalar> {
    /// One velocity buffer per parameter tensor, in `Network::params` order.
    pub velocities: Vec<ParamState<F>>,
    /// Epochs completed.
    pub epoch: u32,
    /// Master seed; per-epoch RNG streams are derived from it, so resuming
    /// reconstructs the identical shuffle/dropout sequence.
    pub master_seed: [u8; 32],
}

impl<F: Scalar> TrainState<F> {
    pub fn new(net: &mut Network<F>, master_seed: [u8; 32]) -> Self {
        let velocities = net
            .params()
            .iter()
            .map(|p| ParamState::new(p.value.len(), p.decay))
            .collect();
        TrainState {
            velocities,
            epoch: 0,
            master_seed,
        }
    }
}

pub fn save_checkpoint(
    net: &mut Network<f32>,
    state: &TrainState<f32>,
    path: &Path,
) -> Result<()> {
    let fingerprint = net.fingerprint;
    let params = net.params();
    if params.len() != state.velocities.len() {
        return Err(Error::Checkpoint(
            "velocity count does not match parameter count".into(),
        ));
    }
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&fingerprint.to_le_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in &params {
        let name = p.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(p.dims.len() as u8);
        for &d in &p.dims {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.value.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    for (p, st) in params.iter().zip(state.velocities.iter()) {
        if st.velocity.len() != p.value.len() {
            return Err(Error::Checkpoint(format!(
                "velocity length mismatch for `{}`",
                p.name
            )));
        }
        for &v in st.velocity.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf.extend_from_slice(&state.epoch.to_le_bytes());
    buf.extend_from_slice(&state.master_seed);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated checkpoint file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, out: &mut [f32]) -> Result<()> {
        let bytes = self.take(n * 4)?;
        for (i, v) in out.iter_mut().enumerate() {
            *v = f32::from_le_bytes(bytes[i * 4..i * 4 + 4].try_into().unwrap());
        }
        Ok(())
    }
}

/// Load parameters and optimizer state into an already-built network. The
/// network must have been built from the identical config (fingerprint
/// check).
pub fn load_checkpoint(net: &mut Network<f32>, path: &Path) -> Result<TrainState<f32>> {
    let bytes = std::fs::read(path)?;
    let mut cur = Cursor {
        buf: &bytes,
        pos: 0,
    };
    if cur.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic bytes (not a checkpoint)".into()));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let fingerprint = cur.u64()?;
    if fingerprint != net.fingerprint {
        return Err(Error::Checkpoint(format!(
            "config fingerprint mismatch: file {fingerprint:#018x}, network {:#018x}",
            net.fingerprint
        )));
    }
    let count = cur.u32()? as usize;
    let mut params = net.params();
    if count != params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {count} tensors, network has {}",
            params.len()
        )));
    }
    for p in params.iter_mut() {
        let name_len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::Checkpoint("non-UTF-8 tensor name".into()))?;
        if name != p.name {
            return Err(Error::Checkpoint(format!(
                "tensor order mismatch: file has `{name}`, network expects `{}`",
                p.name
            )));
        }
        let rank = cur.take(1)?[0] as usize;
        if rank != p.dims.len() {
            return Err(Error::Checkpoint(format!("rank mismatch for `{name}`")));
        }
        for &expected in &p.dims {
            let d = cur.u32()? as usize;
            if d != expected {
                return Err(Error::Checkpoint(format!("dims mismatch for `{name}`")));
            }
        }
        cur.f32s(p.value.len(), p.value)?;
    }
    let mut velocities = Vec::with_capacity(params.len());
    for p in params.iter() {
        let mut st = ParamState::new(p.value.len(), p.decay);
        cur.f32s(st.velocity.len(), &mut st.velocity)?;
        velocities.push(st);
    }
    let epoch = cur.u32()?;
    let mut master_seed = [0u8; 32];
    master_seed.copy_from_slice(cur.take(32)?);
    if cur.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after checkpoint".into()));
    }
    Ok(TrainState {
        velocities,
        epoch,
        master_seed,
    })
}
