//! The hierarchical multichannel residual network.
//!
//! Data flows through three stages:
//!
//! 1. one deep 1D ResNet per input channel (stacked MCFEU units, each three
//!    conv + batch-norm + ReLU blocks with 32/64/64 feature maps and a
//!    residual shortcut), reduced by global average pooling to 64 features;
//! 2. one bottleneck MLP per sensor that fuses that sensor's channel
//!    features into a 1000-wide vector (two ReLU layers with dropout);
//! 3. a decision stage that views the concatenated sensor vectors as a
//!    single-channel sequence, runs it through another MCFEU ResNet + GAP,
//!    and classifies with a three-layer MLP ending in softmax.
//!
//! All learned tensors live in one name-keyed map so that optimizers,
//! serialization and gradient checks can treat the model uniformly.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datapipe::NormStats;
use crate::error::{Error, Result};
use crate::exec::{map_indexed, Execution};
use crate::layers::{
    argmax, batchnorm1d_backward, batchnorm1d_forward, conv1d_batch, conv1d_batch_grad, dense_backward,
    dense_forward, dropout, dropout_backward, gap_backward, gap_forward, relu, relu_backward, softmax,
    softmax_xent, Activation, BnContext, BnStats, DenseContext, DropoutContext, Mode, ReluContext,
};
use crate::tensor::Tensor;

pub const FEATURE_MAPS: [usize; 3] = [32, 64, 64];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensorSpec {
    pub name: String,
    pub channels: Vec<String>,
}

impl SensorSpec {
    pub fn new(name: impl Into<String>, channels: &[&str]) -> Self {
        Self {
            name: name.into(),
            channels: channels.iter().map(|c| c.to_string()).collect(),
        }
    }
}

/// How raw channels are fed to the feature-level ResNets.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelMode {
    /// One ResNet per scalar channel, input `1 × L`.
    #[default]
    PerChannel,
    /// One ResNet per sensor over all its channels, input `C × L`.
    PerSensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub sensors: Vec<SensorSpec>,
    pub window_length: usize,
    pub channel_mode: ChannelMode,
    pub mcfeu_stack_depth: usize,
    pub decision_stack_depth: usize,
    pub kernel_sizes: [usize; 3],
    pub feature_maps: [usize; 3],
    pub bottleneck_widths: [usize; 2],
    pub decision_hidden_widths: [usize; 2],
    pub class_count: usize,
    pub dropout_rate: f64,
    pub bn_epsilon: f64,
    pub bn_momentum: f64,
    pub init_sigma2: f64,
}

impl ModelConfig {
    pub fn new(sensors: Vec<SensorSpec>, window_length: usize, class_count: usize) -> Self {
        Self {
            sensors,
            window_length,
            channel_mode: ChannelMode::PerChannel,
            mcfeu_stack_depth: 3,
            decision_stack_depth: 1,
            kernel_sizes: [9, 5, 3],
            feature_maps: FEATURE_MAPS,
            bottleneck_widths: [1000, 1000],
            decision_hidden_widths: [1000, 1000],
            class_count,
            dropout_rate: 0.3,
            bn_epsilon: 1e-5,
            bn_momentum: 0.9,
            init_sigma2: 0.05,
        }
    }

    pub fn total_channels(&self) -> usize {
        self.sensors.iter().map(|s| s.channels.len()).sum()
    }

    /// Length of the concatenated sensor vectors fed to the decision stage.
    pub fn fused_length(&self) -> usize {
        self.bottleneck_widths[1] * self.sensors.len()
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.sensors.is_empty() {
            bad.push("at least one sensor is required".to_string());
        }
        for s in &self.sensors {
            if s.name.is_empty() || s.name.contains('/') {
                bad.push(format!("sensor name {:?} must be non-empty and contain no '/'", s.name));
            }
            if s.channels.is_empty() {
                bad.push(format!("sensor {:?} has no channels", s.name));
            }
            for c in &s.channels {
                if c.is_empty() || c.contains('/') {
                    bad.push(format!("channel name {c:?} must be non-empty and contain no '/'"));
                }
            }
            let mut seen = s.channels.clone();
            seen.sort();
            seen.dedup();
            if seen.len() != s.channels.len() {
                bad.push(format!("sensor {:?} repeats a channel name", s.name));
            }
        }
        let mut names: Vec<_> = self.sensors.iter().map(|s| &s.name).collect();
        names.sort();
        names.dedup();
        if names.len() != self.sensors.len() {
            bad.push("sensor names must be unique".into());
        }
        if self.window_length == 0 {
            bad.push("window_length must be >= 1".into());
        }
        if self.mcfeu_stack_depth == 0 {
            bad.push("mcfeu_stack_depth must be >= 1".into());
        }
        if self.decision_stack_depth == 0 {
            bad.push("decision_stack_depth must be >= 1".into());
        }
        if let Some(k) = self.kernel_sizes.iter().find(|&&k| k == 0 || k % 2 == 0) {
            bad.push(format!("kernel sizes must be odd and positive, got {k}"));
        }
        if self.feature_maps != FEATURE_MAPS {
            bad.push(format!(
                "feature_maps must be {FEATURE_MAPS:?}, got {:?}",
                self.feature_maps
            ));
        }
        if self.bottleneck_widths.contains(&0) || self.decision_hidden_widths.contains(&0) {
            bad.push("hidden widths must be >= 1".into());
        }
        if self.class_count < 2 {
            bad.push(format!("class_count must be >= 2, got {}", self.class_count));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            bad.push(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate));
        }
        if !(self.bn_epsilon > 0.0) {
            bad.push("bn_epsilon must be > 0".into());
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            bad.push("bn_momentum must lie in [0, 1)".into());
        }
        if !(self.init_sigma2 > 0.0 && self.init_sigma2.is_finite()) {
            bad.push("init_sigma2 must be a positive finite number".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }
}

// ---------------------------------------------------------------------------
// parameter storage

/// Named gradients, one entry per learned tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients(BTreeMap<String, Tensor>);

impl Gradients {
    pub fn get(&self, key: &str) -> Option<&Tensor> {
        self.0.get(key)
    }

    pub fn insert(&mut self, key: impl Into<String>, grad: Tensor) {
        self.0.insert(key.into(), grad);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn merge(&mut self, other: Gradients) {
        self.0.extend(other.0);
    }

    /// `self += alpha * other`, key by key.
    pub fn add_scaled(&mut self, alpha: f64, other: &Gradients) -> Result<()> {
        for (k, g) in &other.0 {
            match self.0.get_mut(k) {
                Some(t) => t.add_scaled(alpha, g)?,
                None => {
                    let mut t = Tensor::zeros(g.shape());
                    t.add_scaled(alpha, g)?;
                    self.0.insert(k.clone(), t);
                }
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        for t in self.0.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= alpha);
        }
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

#[derive(Default)]
struct Registry {
    params: BTreeMap<String, (Vec<usize>, Init)>,
    state: BTreeMap<String, Tensor>,
}

impl Registry {
    fn param(&mut self, key: &str, shape: &[usize], init: Init) -> String {
        self.params.insert(key.to_string(), (shape.to_vec(), init));
        key.to_string()
    }
}

// ---------------------------------------------------------------------------
// building blocks

#[derive(Clone, Debug)]
struct BasicBlock {
    cin: usize,
    weight: String,
    bias: String,
    gamma: String,
    beta: String,
    running_mean: String,
    running_var: String,
}

impl BasicBlock {
    fn register(reg: &mut Registry, prefix: &str, cin: usize, cout: usize, kernel: usize) -> Self {
        let mean = format!("{prefix}/bn.running_mean");
        let var = format!("{prefix}/bn.running_var");
        let stats = BnStats::new(cout);
        reg.state.insert(mean.clone(), stats.mean);
        reg.state.insert(var.clone(), stats.var);
        Self {
            cin,
            weight: reg.param(&format!("{prefix}/conv.weight"), &[cout, cin, kernel], Init::Normal),
            bias: reg.param(&format!("{prefix}/conv.bias"), &[cout], Init::Zeros),
            gamma: reg.param(&format!("{prefix}/bn.gamma"), &[cout], Init::Ones),
            beta: reg.param(&format!("{prefix}/bn.beta"), &[cout], Init::Zeros),
            running_mean: mean,
            running_var: var,
        }
    }
}

#[derive(Clone, Debug)]
struct Projection {
    weight: String,
    bias: String,
}

/// Multilayer convolution feature extractor unit with its shortcut.
#[derive(Clone, Debug)]
struct Mcfeu {
    blocks: Vec<BasicBlock>,
    projection: Option<Projection>,
}

impl Mcfeu {
    fn register(reg: &mut Registry, prefix: &str, cin: usize, kernels: [usize; 3]) -> Self {
        let mut blocks = Vec::with_capacity(3);
        let mut c = cin;
        for (i, (&k, &maps)) in kernels.iter().zip(FEATURE_MAPS.iter()).enumerate() {
            blocks.push(BasicBlock::register(reg, &format!("{prefix}/block{i}"), c, maps, k));
            c = maps;
        }
        let out = FEATURE_MAPS[2];
        let projection = (cin != out).then(|| Projection {
            weight: reg.param(&format!("{prefix}/shortcut.weight"), &[out, cin, 1], Init::Normal),
            bias: reg.param(&format!("{prefix}/shortcut.bias"), &[out], Init::Zeros),
        });
        Self { blocks, projection }
    }
}

#[derive(Clone, Debug)]
struct ResNet {
    units: Vec<Mcfeu>,
}

impl ResNet {
    fn register(reg: &mut Registry, prefix: &str, cin: usize, depth: usize, kernels: [usize; 3]) -> Self {
        let units = (0..depth)
            .map(|u| {
                let c = if u == 0 { cin } else { FEATURE_MAPS[2] };
                Mcfeu::register(reg, &format!("{prefix}/unit{u}"), c, kernels)
            })
            .collect();
        Self { units }
    }

    fn input_channels(&self) -> usize {
        self.units[0].blocks[0].cin
    }
}

#[derive(Clone, Debug)]
struct DenseSpec {
    weight: String,
    bias: String,
    activation: Activation,
    dropout: bool,
}

#[derive(Clone, Debug)]
struct Mlp {
    layers: Vec<DenseSpec>,
}

impl Mlp {
    fn register(reg: &mut Registry, prefix: &str, input: usize, widths: &[(usize, Activation, bool)]) -> Self {
        let mut n = input;
        let layers = widths
            .iter()
            .enumerate()
            .map(|(i, &(m, activation, dropout))| {
                let spec = DenseSpec {
                    weight: reg.param(&format!("{prefix}/dense{i}.weight"), &[m, n], Init::Normal),
                    bias: reg.param(&format!("{prefix}/dense{i}.bias"), &[m], Init::Zeros),
                    activation,
                    dropout,
                };
                n = m;
                spec
            })
            .collect();
        Self { layers }
    }

    fn dropout_layers(&self) -> usize {
        self.layers.iter().filter(|l| l.dropout).count()
    }
}

// ---------------------------------------------------------------------------
// forward contexts

#[derive(Clone, Debug)]
struct BlockCtx {
    input: Tensor,
    bn: BnContext,
    relu: ReluContext,
}

#[derive(Clone, Debug)]
struct UnitCtx {
    blocks: Vec<BlockCtx>,
    out: ReluContext,
}

#[derive(Clone, Debug)]
struct ResNetCtx {
    units: Vec<UnitCtx>,
    len: usize,
}

#[derive(Clone, Debug)]
struct MlpCtx {
    layers: Vec<(DenseContext, Option<DropoutContext>)>,
}

/// Everything a backward pass needs from the matching forward.
#[derive(Clone, Debug)]
pub struct ForwardContext {
    mode: Mode,
    batch: usize,
    features: Vec<ResNetCtx>,
    feature_widths: Vec<usize>,
    bottlenecks: Vec<MlpCtx>,
    decision_net: ResNetCtx,
    decision_mlp: MlpCtx,
    logits: Tensor,
    probabilities: Tensor,
}

impl ForwardContext {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    /// `[B × K]` pre-softmax scores.
    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    /// `[B × K]` class probabilities.
    pub fn probabilities(&self) -> &Tensor {
        &self.probabilities
    }

    pub fn predictions(&self) -> Vec<usize> {
        (0..self.batch).map(|i| argmax(self.probabilities.outer(i))).collect()
    }

    /// Mean categorical cross-entropy over the batch and its gradient with
    /// respect to the logits.
    pub fn loss(&self, targets: &[usize]) -> Result<(f64, Tensor)> {
        if targets.len() != self.batch {
            return Err(Error::shape(
                "loss",
                format!("{} targets for a batch of {}", targets.len(), self.batch),
            ));
        }
        let k = self.logits.dim(1);
        let inv = 1.0 / self.batch as f64;
        let mut total = 0.0;
        let mut d = Vec::with_capacity(self.batch * k);
        for (i, &t) in targets.iter().enumerate() {
            let r = softmax_xent(&Tensor::vector(self.logits.outer(i).to_vec()), t).map_err(|e| match e {
                Error::Label { label, classes, .. } => Error::Label {
                    index: i,
                    label,
                    classes,
                },
                other => other,
            })?;
            total += r.loss;
            d.extend(r.d_logits.data().iter().map(|v| v * inv));
        }
        Ok((total * inv, Tensor::new(vec![self.batch, k], d)?))
    }

    /// Sign pattern of every ReLU in the network, in a fixed order. Two
    /// contexts with equal patterns lie on the same linear piece.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        let mut net = |n: &ResNetCtx| {
            for u in &n.units {
                for b in &u.blocks {
                    out.extend_from_slice(b.relu.active());
                }
                out.extend_from_slice(u.out.active());
            }
        };
        self.features.iter().for_each(&mut net);
        net(&self.decision_net);
        for m in self.bottlenecks.iter().chain(std::iter::once(&self.decision_mlp)) {
            for (d, _) in &m.layers {
                if let Some(r) = d.relu() {
                    out.extend_from_slice(r.active());
                }
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// model

/// Per-channel windows for a batch: entry `i` is `[B × 1 × L]` for the
/// `i`-th channel in sensor-then-channel order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    windows: Vec<Tensor>,
}

impl ModelInput {
    pub fn new(windows: Vec<Tensor>) -> Result<Self> {
        let first = windows
            .first()
            .ok_or_else(|| Error::InvalidArgument("model input has no channels".into()))?;
        let [b, 1, l] = *first.shape() else {
            return Err(Error::shape(
                "model input",
                format!("channel windows must be [B x 1 x L], got {:?}", first.shape()),
            ));
        };
        if let Some(bad) = windows.iter().find(|w| w.shape() != [b, 1, l]) {
            return Err(Error::shape(
                "model input",
                format!("channel windows disagree: {:?} vs {:?}", bad.shape(), first.shape()),
            ));
        }
        Ok(Self { windows })
    }

    /// A batch of one from `[1 × L]` channel windows.
    pub fn single(channels: &[Tensor]) -> Result<Self> {
        let windows = channels
            .iter()
            .map(|w| match *w.shape() {
                [1, l] => w.clone().reshape(&[1, 1, l]),
                ref s => Err(Error::shape("model input", format!("window must be [1 x L], got {s:?}"))),
            })
            .collect::<Result<_>>()?;
        Self::new(windows)
    }

    pub fn batch_size(&self) -> usize {
        self.windows[0].dim(0)
    }

    pub fn window_length(&self) -> usize {
        self.windows[0].dim(2)
    }

    pub fn channels(&self) -> &[Tensor] {
        &self.windows
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub class: usize,
    pub probabilities: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct HmresnetModel {
    config: ModelConfig,
    params: BTreeMap<String, Tensor>,
    state: BTreeMap<String, Tensor>,
    features: Vec<ResNet>,
    /// For each sensor, the indices into `features` it fuses.
    sensor_features: Vec<Vec<usize>>,
    bottlenecks: Vec<Mlp>,
    decision_net: ResNet,
    decision_mlp: Mlp,
    exec: Execution,
    metadata: ModelMetadata,
}

/// Data-side facts a trained model needs at prediction time.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMetadata {
    /// Empty when the classes are unnamed.
    pub class_names: Vec<String>,
    /// Statistics the training windows were z-scored with.
    pub normalization: Option<NormStats>,
}

impl HmresnetModel {
    /// Builds a model with weights drawn from `N(0, init_sigma2)`, zero
    /// biases, unit batch-norm scales and zero shifts.
    pub fn build<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (mut model, specs) = Self::skeleton(config)?;
        let std = model.config.init_sigma2.sqrt();
        for (key, (shape, init)) in specs {
            let t = match init {
                Init::Normal => Tensor::randn(&shape, std, rng),
                Init::Zeros => Tensor::zeros(&shape),
                Init::Ones => Tensor::filled(&shape, 1.0),
            };
            model.params.insert(key, t);
        }
        Ok(model)
    }

    fn skeleton(config: ModelConfig) -> Result<(Self, BTreeMap<String, (Vec<usize>, Init)>)> {
        config.validate()?;
        let mut reg = Registry::default();
        let k = config.kernel_sizes;
        let mut features = Vec::new();
        let mut sensor_features = Vec::new();
        let mut bottlenecks = Vec::new();
        let out = FEATURE_MAPS[2];
        let [h1, h2] = config.bottleneck_widths;
        for sensor in &config.sensors {
            let mut idx = Vec::new();
            match config.channel_mode {
                ChannelMode::PerChannel => {
                    for ch in &sensor.channels {
                        idx.push(features.len());
                        features.push(ResNet::register(
                            &mut reg,
                            &format!("feature/{}/{}", sensor.name, ch),
                            1,
                            config.mcfeu_stack_depth,
                            k,
                        ));
                    }
                }
                ChannelMode::PerSensor => {
                    idx.push(features.len());
                    features.push(ResNet::register(
                        &mut reg,
                        &format!("feature/{}", sensor.name),
                        sensor.channels.len(),
                        config.mcfeu_stack_depth,
                        k,
                    ));
                }
            }
            bottlenecks.push(Mlp::register(
                &mut reg,
                &format!("bottleneck/{}", sensor.name),
                out * idx.len(),
                &[(h1, Activation::Relu, true), (h2, Activation::Relu, true)],
            ));
            sensor_features.push(idx);
        }
        let decision_net = ResNet::register(&mut reg, "decision/resnet", 1, config.decision_stack_depth, k);
        let [d1, d2] = config.decision_hidden_widths;
        let decision_mlp = Mlp::register(
            &mut reg,
            "decision/mlp",
            out,
            &[
                (d1, Activation::Relu, true),
                (d2, Activation::Relu, true),
                (config.class_count, Activation::Identity, false),
            ],
        );
        let model = Self {
            config,
            params: BTreeMap::new(),
            state: reg.state,
            features,
            sensor_features,
            bottlenecks,
            decision_net,
            decision_mlp,
            exec: Execution::default(),
            metadata: ModelMetadata::default(),
        };
        Ok((model, reg.params))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn metadata(&self) -> &ModelMetadata {
        &self.metadata
    }

    pub fn set_metadata(&mut self, metadata: ModelMetadata) -> Result<()> {
        let k = metadata.class_names.len();
        if k != 0 && k != self.config.class_count {
            return Err(Error::InvalidArgument(format!(
                "{k} class names for a model with {} classes",
                self.config.class_count
            )));
        }
        self.metadata = metadata;
        Ok(())
    }

    /// Name of class `c`, or its index when the classes are unnamed.
    pub fn class_name(&self, c: usize) -> String {
        self.metadata.class_names.get(c).cloned().unwrap_or_else(|| c.to_string())
    }

    pub fn execution(&self) -> Execution {
        self.exec
    }

    pub fn set_execution(&mut self, exec: Execution) {
        self.exec = exec;
    }

    /// Learned tensors keyed by name.
    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.params
    }

    /// Non-learned buffers (batch-norm running statistics).
    pub fn state(&self) -> &BTreeMap<String, Tensor> {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.state
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    fn p(&self, key: &str) -> &Tensor {
        &self.params[key]
    }

    fn bn_stats(&self, block: &BasicBlock) -> BnStats {
        BnStats {
            mean: self.state[&block.running_mean].clone(),
            var: self.state[&block.running_var].clone(),
        }
    }

    // -- feature level ------------------------------------------------------

    fn resnet_forward(&self, net: &ResNet, x: Tensor, mode: Mode) -> Result<(Tensor, ResNetCtx)> {
        let eps = self.config.bn_epsilon;
        let mut h = x;
        let mut units = Vec::with_capacity(net.units.len());
        for unit in &net.units {
            let shortcut = match &unit.projection {
                Some(p) => conv1d_batch(&h, self.p(&p.weight), self.p(&p.bias), self.exec)?,
                None => h.clone(),
            };
            let mut blocks = Vec::with_capacity(unit.blocks.len());
            let mut a = h;
            for block in &unit.blocks {
                let z = conv1d_batch(&a, self.p(&block.weight), self.p(&block.bias), self.exec)?;
                let (y, bn) = batchnorm1d_forward(
                    &z,
                    self.p(&block.gamma),
                    self.p(&block.beta),
                    &self.bn_stats(block),
                    mode,
                    eps,
                )?;
                let (next, r) = relu(&y);
                blocks.push(BlockCtx { input: a, bn, relu: r });
                a = next;
            }
            a.add_scaled(1.0, &shortcut)?;
            let (out, r) = relu(&a);
            units.push(UnitCtx { blocks, out: r });
            h = out;
        }
        let len = h.dim(2);
        Ok((gap_forward(&h)?, ResNetCtx { units, len }))
    }

    fn resnet_backward(&self, net: &ResNet, ctx: &ResNetCtx, upstream: &Tensor, grads: &mut Gradients) -> Result<Tensor> {
        let mut d = gap_backward(upstream, ctx.len)?;
        for (unit, uctx) in net.units.iter().zip(&ctx.units).rev() {
            let d_sum = relu_backward(&uctx.out, &d)?;
            let unit_input = &uctx.blocks[0].input;
            let d_short = match &unit.projection {
                Some(p) => {
                    let g = conv1d_batch_grad(unit_input, self.p(&p.weight), &d_sum, self.exec)?;
                    grads.insert(p.weight.clone(), g.kernels);
                    grads.insert(p.bias.clone(), g.bias);
                    g.input
                }
                None => d_sum.clone(),
            };
            let mut dh = d_sum;
            for (block, bctx) in unit.blocks.iter().zip(&uctx.blocks).rev() {
                let dy = relu_backward(&bctx.relu, &dh)?;
                let bn = batchnorm1d_backward(&bctx.bn, self.p(&block.gamma), &dy)?;
                grads.insert(block.gamma.clone(), bn.gamma);
                grads.insert(block.beta.clone(), bn.beta);
                let conv = conv1d_batch_grad(&bctx.input, self.p(&block.weight), &bn.input, self.exec)?;
                grads.insert(block.weight.clone(), conv.kernels);
                grads.insert(block.bias.clone(), conv.bias);
                dh = conv.input;
            }
            dh.add_scaled(1.0, &d_short)?;
            d = dh;
        }
        Ok(d)
    }

    fn commit_resnet_stats(&mut self, net: &ResNet, ctx: &ResNetCtx) {
        let momentum = self.config.bn_momentum;
        for (unit, uctx) in net.units.iter().zip(&ctx.units) {
            for (block, bctx) in unit.blocks.iter().zip(&uctx.blocks) {
                let mut stats = self.bn_stats(block);
                stats.update(&bctx.bn, momentum);
                self.state.insert(block.running_mean.clone(), stats.mean);
                self.state.insert(block.running_var.clone(), stats.var);
            }
        }
    }

    fn mlp_forward(&self, mlp: &Mlp, x: Tensor, mode: Mode, seeds: &[u64]) -> Result<(Tensor, MlpCtx)> {
        let mut h = x;
        let mut layers = Vec::with_capacity(mlp.layers.len());
        let mut seeds = seeds.iter();
        for layer in &mlp.layers {
            let (y, dctx) = dense_forward(&h, self.p(&layer.weight), self.p(&layer.bias), layer.activation, self.exec)?;
            if layer.dropout {
                let seed = seeds.next().copied().unwrap_or(0);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let (y, drop) = dropout(&y, self.config.dropout_rate, mode, &mut rng)?;
                layers.push((dctx, Some(drop)));
                h = y;
            } else {
                layers.push((dctx, None));
                h = y;
            }
        }
        Ok((h, MlpCtx { layers }))
    }

    fn mlp_backward(&self, mlp: &Mlp, ctx: &MlpCtx, upstream: &Tensor, grads: &mut Gradients) -> Result<Tensor> {
        let mut d = upstream.clone();
        for (layer, (dctx, drop)) in mlp.layers.iter().zip(&ctx.layers).rev() {
            if let Some(drop) = drop {
                d = dropout_backward(drop, &d)?;
            }
            let g = dense_backward(dctx, self.p(&layer.weight), &d, self.exec)?;
            grads.insert(layer.weight.clone(), g.weights);
            grads.insert(layer.bias.clone(), g.bias);
            d = g.input;
        }
        Ok(d)
    }

    fn feature_inputs(&self, input: &ModelInput) -> Result<Vec<Tensor>> {
        let expected = self.config.total_channels();
        if input.windows.len() != expected {
            return Err(Error::shape(
                "forward",
                format!("model expects {expected} channel windows, got {}", input.windows.len()),
            ));
        }
        if input.window_length() != self.config.window_length {
            return Err(Error::shape(
                "forward",
                format!(
                    "window length {} does not match the configured {}",
                    input.window_length(),
                    self.config.window_length
                ),
            ));
        }
        Ok(match self.config.channel_mode {
            ChannelMode::PerChannel => input.windows.clone(),
            ChannelMode::PerSensor => {
                let (b, l) = (input.batch_size(), input.window_length());
                let mut offset = 0;
                self.config
                    .sensors
                    .iter()
                    .map(|s| {
                        let c = s.channels.len();
                        let mut data = Vec::with_capacity(b * c * l);
                        for i in 0..b {
                            for ch in 0..c {
                                data.extend_from_slice(input.windows[offset + ch].outer(i));
                            }
                        }
                        offset += c;
                        Tensor::new(vec![b, c, l], data)
                    })
                    .collect::<Result<_>>()?
            }
        })
    }

    /// Feature vector of one channel's ResNet for a single `[1 × L]`
    /// window, in inference mode.
    pub fn channel_resnet_forward(&self, feature: usize, window: &Tensor) -> Result<Tensor> {
        let net = self
            .features
            .get(feature)
            .ok_or_else(|| Error::InvalidArgument(format!("no feature network {feature}")))?;
        let c = net.input_channels();
        let [wc, l] = *window.shape() else {
            return Err(Error::shape("channel_resnet", format!("window {:?}", window.shape())));
        };
        if wc != c || l != self.config.window_length {
            return Err(Error::shape(
                "channel_resnet",
                format!("expected [{c} x {}], got [{wc} x {l}]", self.config.window_length),
            ));
        }
        let (out, _) = self.resnet_forward(net, window.clone().reshape(&[1, c, l])?, Mode::Infer)?;
        out.reshape(&[FEATURE_MAPS[2]])
    }

    /// Fuses one sensor's channel feature vectors through its bottleneck MLP.
    pub fn bottleneck_fuse<R: Rng + ?Sized>(
        &self,
        sensor: usize,
        features: &[Tensor],
        mode: Mode,
        rng: &mut R,
    ) -> Result<Tensor> {
        if features.is_empty() {
            return Err(Error::InvalidArgument("bottleneck_fuse needs at least one feature vector".into()));
        }
        let mlp = self
            .bottlenecks
            .get(sensor)
            .ok_or_else(|| Error::InvalidArgument(format!("no sensor {sensor}")))?;
        let flat: Vec<f64> = features.iter().flat_map(|f| f.data().iter().copied()).collect();
        let n = flat.len();
        let seeds: Vec<u64> = (0..mlp.dropout_layers()).map(|_| rng.gen()).collect();
        let (out, _) = self.mlp_forward(mlp, Tensor::new(vec![1, n], flat)?, mode, &seeds)?;
        out.reshape(&[self.config.bottleneck_widths[1]])
    }

    /// Classifies a fused sensor vector; returns probabilities and argmax.
    pub fn decision_forward<R: Rng + ?Sized>(&self, fused: &Tensor, mode: Mode, rng: &mut R) -> Result<(Tensor, usize)> {
        let n = self.config.fused_length();
        if fused.shape() != [n] {
            return Err(Error::shape(
                "decision_forward",
                format!("fused vector {:?}, expected [{n}]", fused.shape()),
            ));
        }
        let seeds: Vec<u64> = (0..self.decision_mlp.dropout_layers()).map(|_| rng.gen()).collect();
        let (pooled, _) = self.resnet_forward(&self.decision_net, fused.clone().reshape(&[1, 1, n])?, mode)?;
        let (logits, _) = self.mlp_forward(&self.decision_mlp, pooled, mode, &seeds)?;
        let p = softmax(logits.data());
        let class = argmax(&p);
        Ok((Tensor::vector(p), class))
    }

    /// Full forward pass over a batch without touching running statistics.
    pub fn forward_batch<R: Rng + ?Sized>(
        &self,
        input: &ModelInput,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ForwardContext> {
        let inputs = self.feature_inputs(input)?;
        let b = input.batch_size();
        let sensor_seeds: Vec<Vec<u64>> = self
            .bottlenecks
            .iter()
            .map(|m| (0..m.dropout_layers()).map(|_| rng.gen()).collect())
            .collect();
        let decision_seeds: Vec<u64> = (0..self.decision_mlp.dropout_layers()).map(|_| rng.gen()).collect();

        let feats = map_indexed(self.exec, self.features.len(), |i| {
            self.resnet_forward(&self.features[i], inputs[i].clone(), mode)
        });
        let mut features = Vec::with_capacity(feats.len());
        let mut pooled = Vec::with_capacity(feats.len());
        for r in feats {
            let (p, c) = r?;
            pooled.push(p);
            features.push(c);
        }

        let fused_parts = map_indexed(self.exec, self.bottlenecks.len(), |s| {
            let idx = &self.sensor_features[s];
            let width: usize = idx.iter().map(|&i| pooled[i].dim(1)).sum();
            let mut data = Vec::with_capacity(b * width);
            for row in 0..b {
                for &i in idx {
                    data.extend_from_slice(pooled[i].outer(row));
                }
            }
            let x = Tensor::new(vec![b, width], data)?;
            self.mlp_forward(&self.bottlenecks[s], x, mode, &sensor_seeds[s])
        });
        let mut bottlenecks = Vec::with_capacity(fused_parts.len());
        let mut fused_rows = Vec::with_capacity(fused_parts.len());
        for r in fused_parts {
            let (f, c) = r?;
            fused_rows.push(f);
            bottlenecks.push(c);
        }
        let n = self.config.fused_length();
        let mut fused = Vec::with_capacity(b * n);
        for row in 0..b {
            for f in &fused_rows {
                fused.extend_from_slice(f.outer(row));
            }
        }
        let fused = Tensor::new(vec![b, 1, n], fused)?;
        let (dpooled, decision_net) = self.resnet_forward(&self.decision_net, fused, mode)?;
        let (logits, decision_mlp) = self.mlp_forward(&self.decision_mlp, dpooled, mode, &decision_seeds)?;
        let k = self.config.class_count;
        let mut probs = Vec::with_capacity(b * k);
        for row in 0..b {
            probs.extend(softmax(logits.outer(row)));
        }
        Ok(ForwardContext {
            mode,
            batch: b,
            feature_widths: pooled.iter().map(|p| p.dim(1)).collect(),
            features,
            bottlenecks,
            decision_net,
            decision_mlp,
            logits,
            probabilities: Tensor::new(vec![b, k], probs)?,
        })
    }

    /// Single-sample forward from `[1 × L]` channel windows.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        sample: &[Tensor],
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Prediction, ForwardContext)> {
        let ctx = self.forward_batch(&ModelInput::single(sample)?, mode, rng)?;
        let probabilities = ctx.probabilities.outer(0).to_vec();
        Ok((
            Prediction {
                class: argmax(&probabilities),
                probabilities,
            },
            ctx,
        ))
    }

    /// Inference-mode predictions for every sample of the batch.
    pub fn predict(&self, input: &ModelInput) -> Result<Vec<Prediction>> {
        // dropout is inactive in inference, so the rng is never consulted
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ctx = self.forward_batch(input, Mode::Infer, &mut rng)?;
        Ok((0..ctx.batch)
            .map(|i| {
                let p = ctx.probabilities.outer(i).to_vec();
                Prediction {
                    class: argmax(&p),
                    probabilities: p,
                }
            })
            .collect())
    }

    /// Folds the batch statistics of a train-mode forward into the running
    /// statistics.
    pub fn commit_batch_stats(&mut self, ctx: &ForwardContext) {
        if ctx.mode != Mode::Train {
            return;
        }
        let features = std::mem::take(&mut self.features);
        for (net, c) in features.iter().zip(&ctx.features) {
            self.commit_resnet_stats(net, c);
        }
        self.features = features;
        let decision = self.decision_net.clone();
        self.commit_resnet_stats(&decision, &ctx.decision_net);
    }

    /// Gradients of the mean cross-entropy for `targets`.
    pub fn backward(&self, ctx: &ForwardContext, targets: &[usize]) -> Result<Gradients> {
        let (_, d_logits) = ctx.loss(targets)?;
        self.backward_logits(ctx, &d_logits)
    }

    /// Gradients of `Σ d_logits ⊙ logits` for an arbitrary upstream.
    pub fn backward_logits(&self, ctx: &ForwardContext, d_logits: &Tensor) -> Result<Gradients> {
        if ctx.mode != Mode::Train {
            return Err(Error::InferContext { op: "backward" });
        }
        let b = ctx.batch;
        if d_logits.shape() != ctx.logits.shape() {
            return Err(Error::shape(
                "backward",
                format!("upstream {:?} vs logits {:?}", d_logits.shape(), ctx.logits.shape()),
            ));
        }
        let mut grads = Gradients::default();
        let d_pooled = self.mlp_backward(&self.decision_mlp, &ctx.decision_mlp, d_logits, &mut grads)?;
        let d_fused = self.resnet_backward(&self.decision_net, &ctx.decision_net, &d_pooled, &mut grads)?;

        let n = self.config.fused_length();
        let w = self.config.bottleneck_widths[1];
        let d_fused = d_fused.reshape(&[b, n])?;
        let sensor_parts = map_indexed(self.exec, self.bottlenecks.len(), |s| -> Result<(Gradients, Tensor)> {
            let mut data = Vec::with_capacity(b * w);
            for row in 0..b {
                data.extend_from_slice(&d_fused.outer(row)[s * w..(s + 1) * w]);
            }
            let mut g = Gradients::default();
            let d = self.mlp_backward(&self.bottlenecks[s], &ctx.bottlenecks[s], &Tensor::new(vec![b, w], data)?, &mut g)?;
            Ok((g, d))
        });
        let mut d_features: Vec<Option<Tensor>> = vec![None; self.features.len()];
        for (s, part) in sensor_parts.into_iter().enumerate() {
            let (g, d) = part?;
            grads.merge(g);
            let idx = &self.sensor_features[s];
            let width = d.dim(1);
            let mut offset = 0;
            for &i in idx {
                let fw = ctx.feature_widths[i];
                let mut data = Vec::with_capacity(b * fw);
                for row in 0..b {
                    data.extend_from_slice(&d.outer(row)[offset..offset + fw]);
                }
                offset += fw;
                d_features[i] = Some(Tensor::new(vec![b, fw], data)?);
            }
            debug_assert_eq!(offset, width);
        }

        let feature_parts = map_indexed(self.exec, self.features.len(), |i| -> Result<Gradients> {
            let mut g = Gradients::default();
            let up = d_features[i].as_ref().expect("every feature net feeds a sensor");
            self.resnet_backward(&self.features[i], &ctx.features[i], up, &mut g)?;
            Ok(g)
        });
        for part in feature_parts {
            grads.merge(part?);
        }
        Ok(grads)
    }
}

// ---------------------------------------------------------------------------
// serialization

pub const MODEL_MAGIC: [u8; 4] = *b"HMRN";
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileHeader {
    config: ModelConfig,
    metadata: ModelMetadata,
}

impl HmresnetModel {
    /// Model file: magic, version, canonical config JSON, then every learned
    /// tensor and running statistic by name, then a CRC-32 of all preceding
    /// bytes.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let json = serde_json::to_vec(&FileHeader {
            config: self.config.clone(),
            metadata: self.metadata.clone(),
        })?;
        let tensors = self.params.iter().chain(self.state.iter());
        Ok(crate::codec::encode(MODEL_MAGIC, MODEL_FORMAT_VERSION, &json, tensors))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let decoded = crate::codec::decode(bytes, MODEL_MAGIC, MODEL_FORMAT_VERSION)?;
        let header: FileHeader = serde_json::from_slice(&decoded.header)?;
        let (mut model, specs) = Self::skeleton(header.config)?;
        model
            .set_metadata(header.metadata)
            .map_err(|e| Error::Malformed(e.to_string()))?;
        let mut tensors = decoded.tensors;
        for (key, (shape, _)) in specs {
            let t = tensors
                .remove(&key)
                .ok_or_else(|| Error::Malformed(format!("missing parameter {key}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Malformed(format!(
                    "parameter {key} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            model.params.insert(key, t);
        }
        for (key, slot) in model.state.iter_mut() {
            let t = tensors
                .remove(key)
                .ok_or_else(|| Error::Malformed(format!("missing state tensor {key}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Malformed(format!("state tensor {key} has the wrong shape")));
            }
            *slot = t;
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Malformed(format!("unexpected tensor {extra}")));
        }
        Ok(model)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::codec::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ModelConfig {
        let mut c = ModelConfig::new(
            vec![SensorSpec::new("a", &["x", "y"]), SensorSpec::new("b", &["x", "y"])],
            16,
            3,
        );
        c.mcfeu_stack_depth = 1;
        c.bottleneck_widths = [8, 8];
        c.decision_hidden_widths = [8, 8];
        c
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_input(cfg: &ModelConfig, batch: usize, seed: u64) -> ModelInput {
        let mut r = rng(seed);
        ModelInput::new(
            (0..cfg.total_channels())
                .map(|_| Tensor::randn(&[batch, 1, cfg.window_length], 1.0, &mut r))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn config_validation_lists_every_violation() {
        let mut c = tiny_config();
        c.class_count = 1;
        c.mcfeu_stack_depth = 0;
        c.feature_maps = [16, 32, 32];
        let Err(Error::Config(v)) = c.validate() else { panic!() };
        assert_eq!(v.len(), 3, "{v:?}");
    }

    #[test]
    fn build_is_deterministic() {
        let a = HmresnetModel::build(tiny_config(), &mut rng(1)).unwrap();
        let b = HmresnetModel::build(tiny_config(), &mut rng(1)).unwrap();
        assert_eq!(a.params, b.params);
        let c = HmresnetModel::build(tiny_config(), &mut rng(2)).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn build_initial_values() {
        let m = HmresnetModel::build(tiny_config(), &mut rng(1)).unwrap();
        for (k, t) in m.params() {
            if k.ends_with(".bias") || k.ends_with("bn.beta") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{k}");
            } else if k.ends_with("bn.gamma") {
                assert!(t.data().iter().all(|&v| v == 1.0), "{k}");
            }
        }
    }

    #[test]
    fn six_class_output_layer_shape() {
        let cfg = ModelConfig::new(vec![SensorSpec::new("phone", &["ax"])], 32, 6);
        let m = HmresnetModel::build(cfg, &mut rng(0)).unwrap();
        assert_eq!(m.params()["decision/mlp/dense2.weight"].shape(), &[6, 1000]);
    }

    #[test]
    fn zero_window_propagates_to_zero_features() {
        let m = HmresnetModel::build(tiny_config(), &mut rng(3)).unwrap();
        let f = m.channel_resnet_forward(0, &Tensor::zeros(&[1, 16])).unwrap();
        assert_eq!(f.shape(), &[64]);
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gap_fixes_feature_width() {
        for depth in [1, 2] {
            let mut c = tiny_config();
            c.mcfeu_stack_depth = depth;
            let m = HmresnetModel::build(c, &mut rng(3)).unwrap();
            let w = Tensor::randn(&[1, 16], 1.0, &mut rng(4));
            assert_eq!(m.channel_resnet_forward(1, &w).unwrap().shape(), &[64]);
        }
    }

    #[test]
    fn removing_the_shortcut_changes_features() {
        let mut m = HmresnetModel::build(tiny_config(), &mut rng(17)).unwrap();
        // move running statistics away from the identity so inference is non-trivial
        let input = random_input(m.config(), 4, 5);
        let ctx = m.forward_batch(&input, Mode::Train, &mut rng(1)).unwrap();
        m.commit_batch_stats(&ctx);
        let w = Tensor::randn(&[1, 16], 1.0, &mut rng(17));
        let with = m.channel_resnet_forward(0, &w).unwrap();
        for key in ["feature/a/x/unit0/shortcut.weight", "feature/a/x/unit0/shortcut.bias"] {
            m.params_mut().get_mut(key).unwrap().data_mut().fill(0.0);
        }
        let without = m.channel_resnet_forward(0, &w).unwrap();
        assert!(with.max_abs_diff(&without) > 1e-6);
    }

    #[test]
    fn residual_identity_when_blocks_are_zeroed() {
        let mut c = tiny_config();
        c.mcfeu_stack_depth = 2;
        let mut m = HmresnetModel::build(c, &mut rng(2)).unwrap();
        for (k, t) in m.params_mut().iter_mut() {
            if k.starts_with("feature/a/x/unit1/") && (k.ends_with("conv.weight") || k.ends_with("bn.gamma")) {
                t.data_mut().fill(0.0);
            }
        }
        let net = m.features[0].clone();
        let x = Tensor::randn(&[2, 64, 16], 1.0, &mut rng(9));
        let single = ResNet {
            units: vec![net.units[1].clone()],
        };
        let (pooled, _) = m.resnet_forward(&single, x.clone(), Mode::Train).unwrap();
        let expected = gap_forward(&relu(&x).0).unwrap();
        assert!(pooled.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn bottleneck_examples() {
        let m = HmresnetModel::build(tiny_config(), &mut rng(5)).unwrap();
        let feats = vec![Tensor::zeros(&[64]), Tensor::zeros(&[64])];
        let out = m.bottleneck_fuse(0, &feats, Mode::Train, &mut rng(1)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        let feats = vec![Tensor::randn(&[64], 1.0, &mut rng(2)), Tensor::randn(&[64], 1.0, &mut rng(3))];
        let a = m.bottleneck_fuse(0, &feats, Mode::Infer, &mut rng(1)).unwrap();
        let b = m.bottleneck_fuse(0, &feats, Mode::Infer, &mut rng(99)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[8]);
        assert!(m.bottleneck_fuse(0, &[], Mode::Infer, &mut rng(1)).is_err());
    }

    #[test]
    fn three_channel_sensor_flattens_to_192() {
        let cfg = ModelConfig::new(vec![SensorSpec::new("imu", &["x", "y", "z"])], 16, 4);
        let m = HmresnetModel::build(cfg, &mut rng(0)).unwrap();
        assert_eq!(m.params()["bottleneck/imu/dense0.weight"].shape(), &[1000, 192]);
    }

    #[test]
    fn decision_forward_checks_length_and_sums_to_one() {
        let m = HmresnetModel::build(tiny_config(), &mut rng(5)).unwrap();
        let fused = Tensor::randn(&[16], 1.0, &mut rng(6));
        let (p, class) = m.decision_forward(&fused, Mode::Infer, &mut rng(0)).unwrap();
        assert!((p.sum() - 1.0).abs() < 1e-9);
        assert_eq!(class, argmax(p.data()));
        assert!(m.decision_forward(&Tensor::zeros(&[15]), Mode::Infer, &mut rng(0)).is_err());
    }

    #[test]
    fn forward_shape_law_and_determinism() {
        let m = HmresnetModel::build(tiny_config(), &mut rng(5)).unwrap();
        let input = random_input(m.config(), 3, 1);
        let a = m.forward_batch(&input, Mode::Infer, &mut rng(1)).unwrap();
        let b = m.forward_batch(&input, Mode::Infer, &mut rng(2)).unwrap();
        assert_eq!(a.probabilities(), b.probabilities());
        assert_eq!(a.probabilities().shape(), &[3, 3]);
        for i in 0..3 {
            assert!((a.probabilities().outer(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let short = ModelInput::new(input.channels()[..3].to_vec()).unwrap();
        assert!(m.forward_batch(&short, Mode::Infer, &mut rng(1)).is_err());
    }

    #[test]
    fn second_sensor_input_reaches_output() {
        let m = HmresnetModel::build(tiny_config(), &mut rng(5)).unwrap();
        let input = random_input(m.config(), 2, 1);
        let mut windows = input.channels().to_vec();
        windows[3] = windows[3].map(|v| v * 3.0 + 1.0);
        let changed = ModelInput::new(windows).unwrap();
        let a = m.forward_batch(&input, Mode::Infer, &mut rng(1)).unwrap();
        let b = m.forward_batch(&changed, Mode::Infer, &mut rng(1)).unwrap();
        assert!(a.logits().max_abs_diff(b.logits()) > 1e-9);
    }

    #[test]
    fn backward_covers_every_parameter() {
        let m = HmresnetModel::build(tiny_config(), &mut rng(5)).unwrap();
        let input = random_input(m.config(), 2, 1);
        let ctx = m.forward_batch(&input, Mode::Train, &mut rng(1)).unwrap();
        let g = m.backward(&ctx, &[0, 2]).unwrap();
        assert_eq!(g.len(), m.params().len());
        for (k, t) in m.params() {
            assert_eq!(g.get(k).unwrap().shape(), t.shape(), "{k}");
        }
        // the first-layer kernels of every channel net receive signal
        for k in m.params().keys().filter(|k| k.starts_with("feature/") && k.ends_with("block0/conv.weight")) {
            assert!(g.get(k).unwrap().data().iter().any(|&v| v != 0.0), "{k}");
        }
        let ictx = m.forward_batch(&input, Mode::Infer, &mut rng(1)).unwrap();
        assert!(matches!(m.backward(&ictx, &[0, 2]), Err(Error::InferContext { .. })));
    }

    #[test]
    fn confident_prediction_has_vanishing_gradient() {
        let mut m = HmresnetModel::build(tiny_config(), &mut rng(5)).unwrap();
        m.params_mut().get_mut("decision/mlp/dense2.weight").unwrap().data_mut().fill(0.0);
        m.params_mut().get_mut("decision/mlp/dense2.bias").unwrap().data_mut()[1] = 60.0;
        let input = random_input(m.config(), 2, 1);
        let ctx = m.forward_batch(&input, Mode::Train, &mut rng(1)).unwrap();
        let g = m.backward(&ctx, &[1, 1]).unwrap();
        let worst = g.iter().flat_map(|(_, t)| t.data().iter()).fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(worst < 1e-20, "{worst}");
    }

    #[test]
    fn sequential_and_parallel_agree_bitwise() {
        let mut m = HmresnetModel::build(tiny_config(), &mut rng(5)).unwrap();
        let input = random_input(m.config(), 3, 1);
        m.set_execution(Execution::Sequential);
        let a = m.forward_batch(&input, Mode::Train, &mut rng(1)).unwrap();
        let ga = m.backward(&a, &[0, 1, 2]).unwrap();
        m.set_execution(Execution::Parallel);
        let b = m.forward_batch(&input, Mode::Train, &mut rng(1)).unwrap();
        let gb = m.backward(&b, &[0, 1, 2]).unwrap();
        assert_eq!(a.logits(), b.logits());
        assert_eq!(ga, gb);
    }

    #[test]
    fn per_sensor_mode_runs() {
        let mut c = tiny_config();
        c.channel_mode = ChannelMode::PerSensor;
        let m = HmresnetModel::build(c, &mut rng(5)).unwrap();
        assert!(m.params().contains_key("feature/a/unit0/block0/conv.weight"));
        assert_eq!(m.params()["feature/a/unit0/block0/conv.weight"].shape(), &[32, 2, 9]);
        let input = random_input(m.config(), 2, 1);
        let ctx = m.forward_batch(&input, Mode::Train, &mut rng(1)).unwrap();
        let g = m.backward(&ctx, &[0, 1]).unwrap();
        assert_eq!(g.len(), m.params().len());
    }

    #[test]
    fn running_stats_only_move_in_train_mode() {
        let mut m = HmresnetModel::build(tiny_config(), &mut rng(5)).unwrap();
        let input = random_input(m.config(), 2, 1);
        let before = m.state().clone();
        let ctx = m.forward_batch(&input, Mode::Infer, &mut rng(1)).unwrap();
        m.commit_batch_stats(&ctx);
        assert_eq!(&before, m.state());
        let ctx = m.forward_batch(&input, Mode::Train, &mut rng(1)).unwrap();
        m.commit_batch_stats(&ctx);
        assert_ne!(&before, m.state());
        assert!(m
            .state()
            .iter()
            .filter(|(k, _)| k.ends_with("running_var"))
            .all(|(_, t)| t.data().iter().all(|&v| v >= 0.0)));
    }

    #[test]
    fn file_roundtrip_keeps_everything() {
        let mut m = HmresnetModel::build(tiny_config(), &mut rng(5)).unwrap();
        let input = random_input(m.config(), 4, 6);
        let ctx = m.forward_batch(&input, Mode::Train, &mut rng(7)).unwrap();
        m.commit_batch_stats(&ctx);
        m.set_metadata(ModelMetadata {
            class_names: vec!["a".into(), "b".into(), "c".into()],
            normalization: Some(NormStats {
                channels: vec!["a/x".into()],
                mean: vec![0.1 + 0.2],
                std: vec![1.0 / 3.0],
            }),
        })
        .unwrap();
        let bytes = m.to_bytes().unwrap();
        let back = HmresnetModel::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.metadata(), m.metadata());
        assert_eq!(back.state(), m.state());
        assert_eq!(back.predict(&input).unwrap(), m.predict(&input).unwrap());
        assert_eq!(back.class_name(2), "c");

        let mut bad = bytes.clone();
        let mid = bad.len() / 2;
        bad[mid] ^= 1;
        assert!(matches!(HmresnetModel::from_bytes(&bad), Err(Error::Checksum { .. })));
        assert!(m.clone().set_metadata(ModelMetadata { class_names: vec!["x".into()], normalization: None }).is_err());
    }
}
