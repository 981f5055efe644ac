//! Backbone CNNs with named insertion points for EWAS modules.
//!
//! Every model is a flat list of layers over a single parameter store.
//! Insertion points are named taps in the forward pass; an attached EWAS
//! module at a tap replaces the activation with its scaled version.
//!
//! | arch            | insertion points                         |
//! |-----------------|------------------------------------------|
//! | `small_cnn`     | `block1`..`block4` (after each ReLU)     |
//! | `resnet18_like` | `layer1`..`layer17` (conv ordinals)      |
//! | `linear`        | none                                     |
//!
//! In `resnet18_like`, `layer1` is the stem conv. Each basic block owns two
//! ordinals: the tap for its first conv sits after that conv's BN+ReLU, the
//! tap for its second conv sits on the block output (after the residual
//! add and ReLU). Shortcut projections are not counted.

mod checkpoint;

pub use checkpoint::{
    decode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, Precision,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ewas::{ewas_forward, ActivationShape, MaskMode};
use crate::tensor::{BatchStats, BnForward, Graph, Tensor, Var};

/// Running statistics momentum.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    SmallCnn,
    Resnet18Like,
    Linear,
}

/// Fixed per-channel input normalization applied inside the model, so
/// attacks keep operating on raw `[0, 1]` pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

fn default_width() -> usize {
    8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    #[serde(default = "default_width")]
    pub width: usize,
    /// Hosts of attached EWAS modules, in attachment order.
    #[serde(default)]
    pub insertion_points: Vec<String>,
    #[serde(rename = "K")]
    pub num_classes: usize,
    /// `[C, H, W]` of one input image.
    pub input_shape: [usize; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<Normalization>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Clone, Debug)]
struct ConvLayer {
    weight: usize,
    bias: Option<usize>,
    stride: usize,
    padding: usize,
}

#[derive(Clone, Debug)]
struct BnLayer {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Clone, Debug)]
struct BasicBlock {
    conv1: ConvLayer,
    bn1: BnLayer,
    tap1: String,
    conv2: ConvLayer,
    bn2: BnLayer,
    shortcut: Option<(ConvLayer, BnLayer)>,
    tap2: String,
}

#[derive(Clone, Debug)]
enum Layer {
    /// Fixed 1×1 conv with constant weights (normalization).
    FixedConv {
        weight: Tensor,
        bias: Tensor,
    },
    Conv(ConvLayer),
    BatchNorm(BnLayer),
    Relu,
    Tap(String),
    Block(Box<BasicBlock>),
    GlobalAvgPool,
    Flatten,
    Linear {
        weight: usize,
        bias: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct EwasModule {
    pub host: String,
    pub shape: ActivationShape,
    param: usize,
}

impl EwasModule {
    /// Index of the ALC weight matrix in [`Model::params`].
    pub fn param_index(&self) -> usize {
        self.param
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    seed: u64,
    params: Vec<NamedTensor>,
    buffers: Vec<NamedTensor>,
    layers: Vec<Layer>,
    insertion_points: Vec<String>,
    conv_names: Vec<String>,
    ewas: Vec<EwasModule>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; the pass reports them for an optional commit.
    Train,
    /// Running statistics.
    Eval,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions<'a> {
    pub bn: BnMode,
    pub mask: MaskMode,
    /// Required when `mask` is [`MaskMode::Training`].
    pub labels: Option<&'a [usize]>,
    /// Bind parameters as differentiable leaves.
    pub track_params: bool,
    /// Record activations at every hook.
    pub capture: bool,
}

impl<'a> ForwardOptions<'a> {
    /// Deployed path: running BN statistics, argmax masks, frozen params.
    pub fn inference() -> Self {
        Self {
            bn: BnMode::Eval,
            mask: MaskMode::Inference,
            labels: None,
            track_params: false,
            capture: false,
        }
    }

    /// Outer training step: batch statistics, label masks, tracked params.
    pub fn training(labels: &'a [usize]) -> Self {
        Self {
            bn: BnMode::Train,
            mask: MaskMode::Training,
            labels: Some(labels),
            track_params: true,
            capture: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AlcOutput {
    pub host: String,
    pub scores: Var,
    pub classes: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct BnUpdate {
    mean: usize,
    var: usize,
    stats: BatchStats,
}

#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub logits: Var,
    pub alc: Vec<AlcOutput>,
    /// Graph handle of every parameter, indexed like [`Model::params`].
    pub params: Vec<Var>,
    pub bn_updates: Vec<BnUpdate>,
    pub taps: Vec<(String, Var)>,
}

/// Tap name for the input of global average pooling.
pub const PENULTIMATE: &str = "penultimate";

fn he_uniform(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<f64> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

fn fan_in_uniform(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
    })
}

struct Builder {
    rng: ChaCha8Rng,
    params: Vec<NamedTensor>,
    buffers: Vec<NamedTensor>,
    layers: Vec<Layer>,
    insertion_points: Vec<String>,
    conv_names: Vec<String>,
}

impl Builder {
    fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: Vec::new(),
            buffers: Vec::new(),
            layers: Vec::new(),
            insertion_points: Vec::new(),
            conv_names: Vec::new(),
        }
    }

    fn param(&mut self, name: String, t: Tensor) -> usize {
        self.params.push(NamedTensor {
            name,
            tensor: t.with_requires_grad(true),
        });
        self.params.len() - 1
    }

    fn buffer(&mut self, name: String, t: Tensor) -> usize {
        self.buffers.push(NamedTensor { name, tensor: t });
        self.buffers.len() - 1
    }

    fn conv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> ConvLayer {
        let fan_in = cin * k * k;
        let data = he_uniform(&mut self.rng, cout * fan_in, fan_in);
        let weight = self.param(
            format!("{name}.weight"),
            Tensor::new([cout, cin, k, k], data).expect("conv weight shape"),
        );
        ConvLayer {
            weight,
            bias: None,
            stride,
            padding,
        }
    }

    fn bn(&mut self, name: &str, c: usize) -> BnLayer {
        BnLayer {
            gamma: self.param(format!("{name}.gamma"), Tensor::full([c], 1.0)),
            beta: self.param(format!("{name}.beta"), Tensor::zeros([c])),
            mean: self.buffer(format!("{name}.running_mean"), Tensor::zeros([c])),
            var: self.buffer(format!("{name}.running_var"), Tensor::full([c], 1.0)),
        }
    }

    fn tap(&mut self, name: &str) {
        self.insertion_points.push(name.to_string());
        self.layers.push(Layer::Tap(name.to_string()));
    }

    fn linear(&mut self, name: &str, fan_in: usize, out: usize) {
        let w = fan_in_uniform(&mut self.rng, fan_in * out, fan_in);
        let b = fan_in_uniform(&mut self.rng, out, fan_in);
        let weight = self.param(
            format!("{name}.weight"),
            Tensor::new([fan_in, out], w).expect("linear shape"),
        );
        let bias = self.param(
            format!("{name}.bias"),
            Tensor::new([out], b).expect("bias shape"),
        );
        self.layers.push(Layer::Linear { weight, bias });
    }

    fn normalization(&mut self, norm: &Normalization, channels: usize) -> Result<()> {
        if norm.mean.len() != channels || norm.std.len() != channels {
            return Err(Error::Config(format!(
                "normalization needs {channels} means and stds, got {} and {}",
                norm.mean.len(),
                norm.std.len()
            )));
        }
        if norm.std.iter().any(|&s| s <= 0.0) {
            return Err(Error::Config("normalization std must be positive".into()));
        }
        let mut w = vec![0.0; channels * channels];
        for c in 0..channels {
            w[c * channels + c] = 1.0 / norm.std[c];
        }
        let b = norm
            .mean
            .iter()
            .zip(&norm.std)
            .map(|(m, s)| -m / s)
            .collect();
        self.layers.push(Layer::FixedConv {
            weight: Tensor::new([channels, channels, 1, 1], w)?,
            bias: Tensor::new([channels], b)?,
        });
        Ok(())
    }
}

impl Model {
    /// Builds the configured backbone and attaches the configured EWAS
    /// modules. All random initialization derives from `seed`.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Model> {
        let mut base = ModelConfig {
            insertion_points: Vec::new(),
            ..config.clone()
        };
        if base.num_classes < 2 {
            return Err(Error::Config(format!(
                "K must be at least 2, got {}",
                base.num_classes
            )));
        }
        let mut b = Builder::new(seed);
        let [c, h, w] = config.input_shape;
        if c == 0 {
            return Err(Error::Config("input must have at least one channel".into()));
        }
        if let Some(norm) = &config.normalization {
            b.normalization(norm, c)?;
        }
        match config.arch {
            Arch::SmallCnn => build_small_cnn_layers(
                &mut b,
                config.input_shape,
                config.num_classes,
                config.width,
            )?,
            Arch::Resnet18Like => {
                build_resnet_layers(&mut b, config.input_shape, config.num_classes, config.width)?
            }
            Arch::Linear => {
                b.tap("input");
                b.layers.push(Layer::Flatten);
                b.linear("head", c * h * w, config.num_classes);
            }
        }
        base.width = config.width;
        let mut model = Model {
            config: base,
            seed,
            params: b.params,
            buffers: b.buffers,
            layers: b.layers,
            insertion_points: b.insertion_points,
            conv_names: b.conv_names,
            ewas: Vec::new(),
        };
        for host in &config.insertion_points {
            model.insert_ewas(host)?;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.config.input_shape
    }

    pub fn insertion_points(&self) -> &[String] {
        &self.insertion_points
    }

    /// Ordinal conv names followed by the classifier head.
    pub fn layer_names(&self) -> Vec<String> {
        let mut names = self.conv_names.clone();
        names.push("head".into());
        names
    }

    /// Valid activation hook names for capture.
    pub fn hooks(&self) -> Vec<String> {
        let mut hooks = self.insertion_points.clone();
        hooks.extend(self.ewas.iter().map(|m| format!("{}:scaled", m.host)));
        if self
            .layers
            .iter()
            .any(|l| matches!(l, Layer::GlobalAvgPool))
        {
            hooks.push(PENULTIMATE.into());
        }
        hooks
    }

    pub fn ewas_modules(&self) -> &[EwasModule] {
        &self.ewas
    }

    pub fn has_ewas(&self) -> bool {
        !self.ewas.is_empty()
    }

    pub fn params(&self) -> &[NamedTensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedTensor] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[NamedTensor] {
        &self.buffers
    }

    pub(crate) fn buffers_mut(&mut self) -> &mut [NamedTensor] {
        &mut self.buffers
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Attaches an EWAS module at `host`, sized from a dry-run forward.
    pub fn insert_ewas(&mut self, host: &str) -> Result<()> {
        if !self.insertion_points.iter().any(|p| p == host) {
            return Err(Error::Config(format!(
                "unknown insertion point `{host}`; valid points: [{}]",
                self.insertion_points.join(", ")
            )));
        }
        if self.ewas.iter().any(|m| m.host == host) {
            return Err(Error::Config(format!(
                "an EWAS module is already attached at `{host}`"
            )));
        }
        let [c, h, w] = self.config.input_shape;
        let mut g = Graph::new();
        let x = g.input(&[1, c, h, w], vec![0.0; c * h * w], false)?;
        let pass = self.forward(
            &mut g,
            x,
            &ForwardOptions {
                capture: true,
                ..ForwardOptions::inference()
            },
        )?;
        let z = pass
            .taps
            .iter()
            .find(|(name, _)| name == host)
            .map(|(_, v)| *v)
            .expect("insertion point is tapped");
        let [_, ch, hh, ww] = *g.shape(z) else {
            return Err(Error::shape(
                "insert_ewas",
                format!("activation at `{host}` is not 4-d"),
            ));
        };
        let shape = ActivationShape {
            channels: ch,
            height: hh,
            width: ww,
        };
        let k = self.config.num_classes;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(host.as_bytes()));
        let data = fan_in_uniform(&mut rng, shape.numel() * k, shape.numel());
        self.params.push(NamedTensor {
            name: format!("ewas.{host}.alc"),
            tensor: Tensor::new([shape.numel(), k], data)?.with_requires_grad(true),
        });
        self.ewas.push(EwasModule {
            host: host.to_string(),
            shape,
            param: self.params.len() - 1,
        });
        self.config.insertion_points.push(host.to_string());
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Adds the gradients of a finished backward pass into the parameters.
    pub fn accumulate_grads(&mut self, g: &Graph, pass: &ForwardPass) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(&pass.params) {
            if let Some(grad) = g.grad(v) {
                p.tensor.accumulate_grad(grad)?;
            }
        }
        Ok(())
    }

    /// Folds train-mode batch statistics into the running statistics.
    pub fn commit_bn_stats(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            let n = u.stats.count as f64;
            let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let mean = self.buffers[u.mean].tensor.data_mut();
            for (m, b) in mean.iter_mut().zip(&u.stats.mean) {
                *m = (1.0 - BN_MOMENTUM) * *m + BN_MOMENTUM * b;
            }
            let var = self.buffers[u.var].tensor.data_mut();
            for (v, b) in var.iter_mut().zip(&u.stats.var) {
                *v = (1.0 - BN_MOMENTUM) * *v + BN_MOMENTUM * b * unbias;
            }
        }
    }

    /// Records one forward pass of `x` (B×C×H×W) on `g`.
    pub fn forward(&self, g: &mut Graph, x: Var, opts: &ForwardOptions<'_>) -> Result<ForwardPass> {
        let expected = self.config.input_shape;
        match *g.shape(x) {
            [_, c, h, w] if [c, h, w] == expected => {}
            ref s => {
                return Err(Error::shape(
                    "model input",
                    format!(
                        "expected B×{}×{}×{}, got {s:?}",
                        expected[0], expected[1], expected[2]
                    ),
                ))
            }
        }
        if opts.mask == MaskMode::Training && opts.labels.is_none() && self.has_ewas() {
            return Err(Error::Mode("training-mode masks need labels".into()));
        }
        let params = self
            .params
            .iter()
            .map(|p| {
                if opts.track_params {
                    g.leaf(&p.tensor)
                } else {
                    g.constant(&p.tensor)
                }
            })
            .collect();
        let mut pass = ForwardPass {
            logits: x,
            alc: Vec::new(),
            params,
            bn_updates: Vec::new(),
            taps: Vec::new(),
        };
        let mut h = x;
        for layer in &self.layers {
            h = self.run_layer(g, layer, h, opts, &mut pass)?;
        }
        pass.logits = h;
        Ok(pass)
    }

    fn run_layer(
        &self,
        g: &mut Graph,
        layer: &Layer,
        h: Var,
        opts: &ForwardOptions<'_>,
        pass: &mut ForwardPass,
    ) -> Result<Var> {
        Ok(match layer {
            Layer::FixedConv { weight, bias } => {
                let w = g.constant(weight);
                let b = g.constant(bias);
                g.conv2d(h, w, Some(b), 1, 0)?
            }
            Layer::Conv(conv) => self.conv(g, conv, h, pass)?,
            Layer::BatchNorm(bn) => self.bn(g, bn, h, opts, pass)?,
            Layer::Relu => g.relu(h),
            Layer::Tap(name) => self.tap(g, name, h, opts, pass)?,
            Layer::Block(block) => {
                let mut y = self.conv(g, &block.conv1, h, pass)?;
                y = self.bn(g, &block.bn1, y, opts, pass)?;
                y = g.relu(y);
                y = self.tap(g, &block.tap1, y, opts, pass)?;
                y = self.conv(g, &block.conv2, y, pass)?;
                y = self.bn(g, &block.bn2, y, opts, pass)?;
                let skip = match &block.shortcut {
                    Some((conv, bn)) => {
                        let s = self.conv(g, conv, h, pass)?;
                        self.bn(g, bn, s, opts, pass)?
                    }
                    None => h,
                };
                let sum = g.add(y, skip)?;
                let out = g.relu(sum);
                self.tap(g, &block.tap2, out, opts, pass)?
            }
            Layer::GlobalAvgPool => {
                if opts.capture {
                    pass.taps.push((PENULTIMATE.into(), h));
                }
                g.global_avg_pool(h)?
            }
            Layer::Flatten => {
                let b = g.shape(h)[0];
                let rest = g.value(h).len() / b.max(1);
                g.reshape(h, &[b, rest])?
            }
            Layer::Linear { weight, bias } => {
                let y = g.matmul(h, pass.params[*weight])?;
                g.add_row_bias(y, pass.params[*bias])?
            }
        })
    }

    fn conv(&self, g: &mut Graph, conv: &ConvLayer, h: Var, pass: &ForwardPass) -> Result<Var> {
        g.conv2d(
            h,
            pass.params[conv.weight],
            conv.bias.map(|b| pass.params[b]),
            conv.stride,
            conv.padding,
        )
    }

    fn bn(
        &self,
        g: &mut Graph,
        bn: &BnLayer,
        h: Var,
        opts: &ForwardOptions<'_>,
        pass: &mut ForwardPass,
    ) -> Result<Var> {
        let (gamma, beta) = (pass.params[bn.gamma], pass.params[bn.beta]);
        match opts.bn {
            BnMode::Train => {
                let (y, stats) = g.batch_norm2d(h, gamma, beta, BnForward::Train)?;
                pass.bn_updates.push(BnUpdate {
                    mean: bn.mean,
                    var: bn.var,
                    stats: stats.expect("train mode reports statistics"),
                });
                Ok(y)
            }
            BnMode::Eval => {
                let mode = BnForward::Eval {
                    mean: self.buffers[bn.mean].tensor.data(),
                    var: self.buffers[bn.var].tensor.data(),
                };
                Ok(g.batch_norm2d(h, gamma, beta, mode)?.0)
            }
        }
    }

    fn tap(
        &self,
        g: &mut Graph,
        name: &str,
        z: Var,
        opts: &ForwardOptions<'_>,
        pass: &mut ForwardPass,
    ) -> Result<Var> {
        if opts.capture {
            pass.taps.push((name.to_string(), z));
        }
        let Some(module) = self.ewas.iter().find(|m| m.host == name) else {
            return Ok(z);
        };
        let out = ewas_forward(
            g,
            z,
            pass.params[module.param],
            opts.labels,
            opts.mask,
            name,
        )?;
        pass.alc.push(AlcOutput {
            host: name.to_string(),
            scores: out.scores,
            classes: out.classes,
        });
        if opts.capture {
            pass.taps.push((format!("{name}:scaled"), out.scaled));
        }
        Ok(out.scaled)
    }

    /// Eval-mode logits (B×K) for a batch tensor.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x);
        let pass = self.forward(&mut g, xv, &ForwardOptions::inference())?;
        Ok(g.to_tensor(pass.logits))
    }

    /// Eval-mode predicted classes for a batch tensor.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        self.logits(x)?.argmax_rows()
    }
}

fn build_small_cnn_layers(
    b: &mut Builder,
    input: [usize; 3],
    k: usize,
    width: usize,
) -> Result<()> {
    let [c, h, w] = input;
    if h < 8 || w < 8 {
        return Err(Error::shape(
            "small_cnn",
            format!("input spatial size {h}×{w} is below the 8×8 minimum"),
        ));
    }
    if width == 0 {
        return Err(Error::Config("small_cnn width must be positive".into()));
    }
    let plan = [
        ("block1", c, width, 1),
        ("block2", width, 2 * width, 2),
        ("block3", 2 * width, 2 * width, 1),
        ("block4", 2 * width, 4 * width, 2),
    ];
    for (name, cin, cout, stride) in plan {
        let conv = b.conv(&format!("{name}.conv"), cin, cout, 3, stride, 1);
        b.conv_names.push(format!("{name}.conv"));
        b.layers.push(Layer::Conv(conv));
        let bn = b.bn(&format!("{name}.bn"), cout);
        b.layers.push(Layer::BatchNorm(bn));
        b.layers.push(Layer::Relu);
        b.tap(name);
    }
    b.layers.push(Layer::GlobalAvgPool);
    b.linear("head", 4 * width, k);
    Ok(())
}

fn build_resnet_layers(b: &mut Builder, input: [usize; 3], k: usize, width: usize) -> Result<()> {
    if width < 4 {
        return Err(Error::Config(format!(
            "resnet18_like width must be at least 4, got {width}"
        )));
    }
    let [c, h, w] = input;
    if h < 8 || w < 8 {
        return Err(Error::shape(
            "resnet18_like",
            format!("input spatial size {h}×{w} is below the 8×8 minimum"),
        ));
    }
    let stem = b.conv("layer1", c, width, 3, 1, 1);
    b.conv_names.push("layer1".into());
    b.layers.push(Layer::Conv(stem));
    let bn = b.bn("layer1.bn", width);
    b.layers.push(Layer::BatchNorm(bn));
    b.layers.push(Layer::Relu);
    b.tap("layer1");

    let mut ordinal = 2;
    let mut cin = width;
    for (stage, mult) in [1usize, 2, 4, 8].into_iter().enumerate() {
        let cout = width * mult;
        for block in 0..2 {
            let stride = if stage > 0 && block == 0 { 2 } else { 1 };
            let n1 = format!("layer{ordinal}");
            let n2 = format!("layer{}", ordinal + 1);
            let conv1 = b.conv(&n1, cin, cout, 3, stride, 1);
            let bn1 = b.bn(&format!("{n1}.bn"), cout);
            let conv2 = b.conv(&n2, cout, cout, 3, 1, 1);
            let bn2 = b.bn(&format!("{n2}.bn"), cout);
            let shortcut = (stride != 1 || cin != cout).then(|| {
                let conv = b.conv(&format!("{n1}.shortcut"), cin, cout, 1, stride, 0);
                let bn = b.bn(&format!("{n1}.shortcut.bn"), cout);
                (conv, bn)
            });
            b.conv_names.push(n1.clone());
            b.conv_names.push(n2.clone());
            b.insertion_points.push(n1.clone());
            b.insertion_points.push(n2.clone());
            b.layers.push(Layer::Block(Box::new(BasicBlock {
                conv1,
                bn1,
                tap1: n1,
                conv2,
                bn2,
                shortcut,
                tap2: n2,
            })));
            cin = cout;
            ordinal += 2;
        }
    }
    b.layers.push(Layer::GlobalAvgPool);
    b.linear("head", cin, k);
    Ok(())
}

/// SmallCNN: four conv→BN→ReLU blocks (two with stride 2), global
/// average pooling and a linear head.
pub fn build_small_cnn(
    input_shape: [usize; 3],
    num_classes: usize,
    width: usize,
    seed: u64,
) -> Result<Model> {
    Model::build(
        &ModelConfig {
            arch: Arch::SmallCnn,
            width,
            insertion_points: Vec::new(),
            num_classes,
            input_shape,
            normalization: None,
        },
        seed,
    )
}

/// Width-scaled ResNet-18 (2 basic blocks in each of 4 stages).
pub fn build_resnet18_like(
    input_shape: [usize; 3],
    num_classes: usize,
    width: usize,
    seed: u64,
) -> Result<Model> {
    Model::build(
        &ModelConfig {
            arch: Arch::Resnet18Like,
            width,
            insertion_points: Vec::new(),
            num_classes,
            input_shape,
            normalization: None,
        },
        seed,
    )
}
