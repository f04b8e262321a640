//! Central finite-difference verification of every hand-written backward
//! pass.
//!
//! Each layer is probed through a scalar loss `Σ r ⊙ y` with a fixed random
//! projection `r`; the full network is probed through its mean
//! cross-entropy. Coordinates whose perturbation flips a ReLU are skipped,
//! since the loss is not differentiable across that kink.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::layers::{self, Activation, BnStats, Mode};
use crate::model::{HmresnetModel, ModelConfig, ModelInput, SensorSpec};
use crate::tensor::{self, Tensor};

pub const LAYERS: [&str; 9] = [
    "conv1d",
    "conv1d_batch",
    "batchnorm",
    "relu",
    "dropout",
    "dense",
    "gap",
    "softmax_xent",
    "hmresnet",
];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Depth 1, widths 8, window 16, 2 sensors x 2 channels, 3 classes.
    #[default]
    Tiny,
    /// Depth 2, widths 16, window 24, 2 sensors x 3 channels, 4 classes.
    Small,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Self::Tiny),
            "small" => Ok(Self::Small),
            other => Err(Error::InvalidArgument(format!("unknown gradcheck preset {other:?} (tiny, small)"))),
        }
    }
}

/// The end-to-end configuration of a preset.
pub fn preset_config(preset: Preset) -> ModelConfig {
    let mut c = match preset {
        Preset::Tiny => ModelConfig::new(
            vec![SensorSpec::new("a", &["x", "y"]), SensorSpec::new("b", &["x", "y"])],
            16,
            3,
        ),
        Preset::Small => ModelConfig::new(
            vec![SensorSpec::new("a", &["x", "y", "z"]), SensorSpec::new("b", &["x", "y", "z"])],
            24,
            4,
        ),
    };
    let (depth, width) = match preset {
        Preset::Tiny => (1, 8),
        Preset::Small => (2, 16),
    };
    c.mcfeu_stack_depth = depth;
    c.bottleneck_widths = [width; 2];
    c.decision_hidden_widths = [width; 2];
    c
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub preset: Preset,
    pub seed: u64,
    /// Finite-difference step.
    pub step: f64,
    /// Worst relative error allowed per layer.
    pub tolerance: f64,
    /// Denominator floor of the relative error, so that coordinates with a
    /// near-zero gradient are judged by absolute error.
    pub floor: f64,
    /// Coordinates sampled per probed tensor (all of them when smaller).
    pub coords_per_tensor: usize,
    pub batch_size: usize,
    /// Test hook: perturbs the analytic gradient of this layer.
    pub corrupt: Option<String>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Tiny,
            seed: 0,
            step: 1e-5,
            tolerance: 1e-5,
            floor: 1e-6,
            coords_per_tensor: 12,
            batch_size: 3,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: String,
    pub worst_rel_err: f64,
    /// Tensor and coordinate of the worst error.
    pub worst_at: String,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub layers: Vec<LayerReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.layers.iter().all(|l| l.passed)
    }

    pub fn worst(&self) -> f64 {
        self.layers.iter().map(|l| l.worst_rel_err).fold(0.0, f64::max)
    }
}

struct Tally {
    worst: f64,
    worst_at: String,
    checked: usize,
    skipped: usize,
}

type Eval<'a> = dyn FnMut(&Tensor) -> Result<(f64, Vec<bool>)> + 'a;

struct Checker<'c> {
    cfg: &'c GradcheckConfig,
    rng: ChaCha8Rng,
    corrupt_pending: bool,
}

impl Checker<'_> {
    /// Compares `analytic` with central differences of `eval` around `base`.
    fn probe(&mut self, tally: &mut Tally, name: &str, base: &Tensor, analytic: &Tensor, eval: &mut Eval) -> Result<()> {
        if base.shape() != analytic.shape() {
            return Err(Error::shape("gradcheck", format!("{name}: gradient {:?} vs value {:?}", analytic.shape(), base.shape())));
        }
        let mut analytic = analytic.clone();
        if self.corrupt_pending {
            let a = &mut analytic.data_mut()[0];
            *a = *a * 1.5 + 1e-3;
            self.corrupt_pending = false;
        }
        let n = base.len();
        let mut coords: Vec<usize> = if n <= self.cfg.coords_per_tensor {
            (0..n).collect()
        } else {
            sample(&mut self.rng, n - 1, self.cfg.coords_per_tensor - 1)
                .into_iter()
                .map(|i| i + 1)
                .collect()
        };
        if !coords.contains(&0) {
            coords.insert(0, 0);
        }
        coords.sort_unstable();
        let (_, pattern) = eval(base)?;
        let h = self.cfg.step;
        for i in coords {
            let mut x = base.clone();
            x.data_mut()[i] = base.data()[i] + h;
            let (fp, pp) = eval(&x)?;
            x.data_mut()[i] = base.data()[i] - h;
            let (fm, pm) = eval(&x)?;
            if pp != pattern || pm != pattern {
                tally.skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(self.cfg.floor);
            tally.checked += 1;
            if rel > tally.worst || tally.worst_at.is_empty() {
                tally.worst = tally.worst.max(rel);
                tally.worst_at = format!("{name}[{i}]");
            }
        }
        Ok(())
    }
}

fn projection(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Values bounded away from zero so a ReLU cannot flip under a small step.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f64 = rng.gen_range(0.1..1.0);
            if rng.gen::<bool>() { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

fn no_pattern(v: f64) -> Result<(f64, Vec<bool>)> {
    Ok((v, Vec::new()))
}

fn layer(ck: &mut Checker, name: &str, run: impl FnOnce(&mut Checker, &mut Tally) -> Result<()>) -> Result<LayerReport> {
    ck.corrupt_pending = ck.cfg.corrupt.as_deref() == Some(name);
    let mut tally = Tally {
        worst: 0.0,
        worst_at: String::new(),
        checked: 0,
        skipped: 0,
    };
    run(ck, &mut tally)?;
    Ok(LayerReport {
        layer: name.to_string(),
        passed: tally.worst < ck.cfg.tolerance && tally.checked > 0,
        worst_rel_err: tally.worst,
        worst_at: tally.worst_at,
        checked: tally.checked,
        skipped_kinks: tally.skipped,
    })
}

pub fn run(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if let Some(c) = &cfg.corrupt {
        if !LAYERS.contains(&c.as_str()) {
            return Err(Error::InvalidArgument(format!("unknown layer {c:?}; layers: {}", LAYERS.join(", "))));
        }
    }
    if !(cfg.step > 0.0) || !(cfg.tolerance > 0.0) || cfg.coords_per_tensor == 0 || cfg.batch_size < 2 {
        return Err(Error::InvalidArgument("gradcheck needs a positive step and tolerance, >= 1 coordinate and batch >= 2".into()));
    }
    let mut ck = Checker {
        cfg,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        corrupt_pending: false,
    };
    let exec = Execution::default();
    let mut layers = Vec::new();

    layers.push(layer(&mut ck, "conv1d", |ck, t| {
        let x = projection(&mut ck.rng, &[2, 12]);
        let k = projection(&mut ck.rng, &[3, 2, 5]);
        let b = projection(&mut ck.rng, &[3]);
        let r = projection(&mut ck.rng, &[3, 12]);
        let g = tensor::conv1d_grad(&x, &k, &r)?;
        ck.probe(t, "input", &x, &g.input, &mut |v| no_pattern(dot(&tensor::conv1d(v, &k, &b)?, &r)))?;
        ck.probe(t, "kernels", &k, &g.kernels, &mut |v| no_pattern(dot(&tensor::conv1d(&x, v, &b)?, &r)))?;
        ck.probe(t, "bias", &b, &g.bias, &mut |v| no_pattern(dot(&tensor::conv1d(&x, &k, v)?, &r)))
    })?);

    layers.push(layer(&mut ck, "conv1d_batch", |ck, t| {
        let x = projection(&mut ck.rng, &[cfg.batch_size, 2, 10]);
        let k = projection(&mut ck.rng, &[4, 2, 3]);
        let b = projection(&mut ck.rng, &[4]);
        let r = projection(&mut ck.rng, &[cfg.batch_size, 4, 10]);
        let g = layers::conv1d_batch_grad(&x, &k, &r, exec)?;
        let f = |x: &Tensor, k: &Tensor, b: &Tensor| -> Result<(f64, Vec<bool>)> {
            no_pattern(dot(&layers::conv1d_batch(x, k, b, exec)?, &r))
        };
        ck.probe(t, "input", &x, &g.input, &mut |v| f(v, &k, &b))?;
        ck.probe(t, "kernels", &k, &g.kernels, &mut |v| f(&x, v, &b))?;
        ck.probe(t, "bias", &b, &g.bias, &mut |v| f(&x, &k, v))
    })?);

    layers.push(layer(&mut ck, "batchnorm", |ck, t| {
        let x = projection(&mut ck.rng, &[cfg.batch_size, 3, 7]);
        let gamma = projection(&mut ck.rng, &[3]);
        let beta = projection(&mut ck.rng, &[3]);
        let r = projection(&mut ck.rng, &[cfg.batch_size, 3, 7]);
        let stats = BnStats::new(3);
        let eps = 1e-5;
        let f = |x: &Tensor, g: &Tensor, b: &Tensor| -> Result<(f64, Vec<bool>)> {
            let (y, _) = layers::batchnorm1d_forward(x, g, b, &stats, Mode::Train, eps)?;
            no_pattern(dot(&y, &r))
        };
        let (_, ctx) = layers::batchnorm1d_forward(&x, &gamma, &beta, &stats, Mode::Train, eps)?;
        let g = layers::batchnorm1d_backward(&ctx, &gamma, &r)?;
        ck.probe(t, "input", &x, &g.input, &mut |v| f(v, &gamma, &beta))?;
        ck.probe(t, "gamma", &gamma, &g.gamma, &mut |v| f(&x, v, &beta))?;
        ck.probe(t, "beta", &beta, &g.beta, &mut |v| f(&x, &gamma, v))
    })?);

    layers.push(layer(&mut ck, "relu", |ck, t| {
        let x = away_from_zero(&mut ck.rng, &[cfg.batch_size, 2, 6]);
        let r = projection(&mut ck.rng, &[cfg.batch_size, 2, 6]);
        let (_, ctx) = layers::relu(&x);
        let g = layers::relu_backward(&ctx, &r)?;
        ck.probe(t, "input", &x, &g, &mut |v| {
            let (y, c) = layers::relu(v);
            Ok((dot(&y, &r), c.active().to_vec()))
        })
    })?);

    layers.push(layer(&mut ck, "dropout", |ck, t| {
        let x = projection(&mut ck.rng, &[cfg.batch_size, 9]);
        let r = projection(&mut ck.rng, &[cfg.batch_size, 9]);
        let mask_seed: u64 = ck.rng.gen();
        let f = |v: &Tensor| layers::dropout(v, 0.3, Mode::Train, &mut ChaCha8Rng::seed_from_u64(mask_seed));
        let (_, ctx) = f(&x)?;
        let g = layers::dropout_backward(&ctx, &r)?;
        ck.probe(t, "input", &x, &g, &mut |v| no_pattern(dot(&f(v)?.0, &r)))
    })?);

    layers.push(layer(&mut ck, "dense", |ck, t| {
        let x = projection(&mut ck.rng, &[cfg.batch_size, 6]);
        let w = projection(&mut ck.rng, &[5, 6]);
        let b = projection(&mut ck.rng, &[5]);
        let r = projection(&mut ck.rng, &[cfg.batch_size, 5]);
        for act in [Activation::Relu, Activation::Identity] {
            let f = |x: &Tensor, w: &Tensor, b: &Tensor| -> Result<(f64, Vec<bool>)> {
                let (y, c) = layers::dense_forward(x, w, b, act, exec)?;
                Ok((dot(&y, &r), c.relu().map(|r| r.active().to_vec()).unwrap_or_default()))
            };
            let (_, ctx) = layers::dense_forward(&x, &w, &b, act, exec)?;
            let g = layers::dense_backward(&ctx, &w, &r, exec)?;
            let tag = format!("{act:?}").to_lowercase();
            ck.probe(t, &format!("{tag}.input"), &x, &g.input, &mut |v| f(v, &w, &b))?;
            ck.probe(t, &format!("{tag}.weights"), &w, &g.weights, &mut |v| f(&x, v, &b))?;
            ck.probe(t, &format!("{tag}.bias"), &b, &g.bias, &mut |v| f(&x, &w, v))?;
        }
        Ok(())
    })?);

    layers.push(layer(&mut ck, "gap", |ck, t| {
        let x = projection(&mut ck.rng, &[cfg.batch_size, 3, 8]);
        let r = projection(&mut ck.rng, &[cfg.batch_size, 3]);
        let g = layers::gap_backward(&r, 8)?;
        ck.probe(t, "input", &x, &g, &mut |v| no_pattern(dot(&layers::gap_forward(v)?, &r)))
    })?);

    layers.push(layer(&mut ck, "softmax_xent", |ck, t| {
        for target in 0..3 {
            let z = projection(&mut ck.rng, &[4]);
            let g = layers::softmax_xent(&z, target)?.d_logits;
            ck.probe(t, &format!("logits(target {target})"), &z, &g, &mut |v| {
                no_pattern(layers::softmax_xent(v, target)?.loss)
            })?;
        }
        Ok(())
    })?);

    layers.push(layer(&mut ck, "hmresnet", |ck, t| {
        let config = preset_config(cfg.preset);
        let mut model = HmresnetModel::build(config.clone(), &mut ck.rng)?;
        model.set_execution(exec);
        let b = cfg.batch_size;
        let input = ModelInput::new(
            (0..config.total_channels())
                .map(|_| projection(&mut ck.rng, &[b, 1, config.window_length]))
                .collect(),
        )?;
        let targets: Vec<usize> = (0..b).map(|i| i % config.class_count).collect();
        let fwd_seed: u64 = ck.rng.gen();
        let forward = |m: &HmresnetModel| -> Result<(f64, Vec<bool>, crate::model::ForwardContext)> {
            let ctx = m.forward_batch(&input, Mode::Train, &mut ChaCha8Rng::seed_from_u64(fwd_seed))?;
            let (loss, _) = ctx.loss(&targets)?;
            Ok((loss, ctx.relu_pattern(), ctx))
        };
        let (_, _, ctx) = forward(&model)?;
        let grads: BTreeMap<String, Tensor> = model.backward(&ctx, &targets)?.into_map();
        for (key, g) in &grads {
            let base = model.params()[key].clone();
            let model_ref = &mut model;
            ck.probe(t, key, &base, g, &mut |v| {
                model_ref.params_mut().insert(key.clone(), v.clone());
                let (loss, pattern, _) = forward(model_ref)?;
                Ok((loss, pattern))
            })?;
            model.params_mut().insert(key.clone(), base);
        }
        if grads.len() != model.params().len() {
            return Err(Error::Malformed(format!(
                "backward produced {} gradients for {} parameters",
                grads.len(),
                model.params().len()
            )));
        }
        Ok(())
    })?);

    Ok(GradcheckReport {
        tolerance: cfg.tolerance,
        layers,
    })
}
