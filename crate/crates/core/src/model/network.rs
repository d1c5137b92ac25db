use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::codec::{AccelClass, ModelMode, RegressionTargets, TargetEncoding};
use super::config::{ModelConfig, VELOCITY_SCALE_MPH};
use crate::autodiff::{BatchStats, BnMode, Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::vehicle::ControlCommand;

pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl RunningStats {
    fn new(c: usize) -> Self {
        Self { mean: vec![0.0; c], var: vec![1.0; c] }
    }

    pub fn update(&mut self, batch: &BatchStats, momentum: f64) {
        for (r, &b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = ((1.0 - momentum) * *r as f64 + momentum * b) as f32;
        }
        for (r, &b) in self.var.iter_mut().zip(&batch.var_unbiased) {
            *r = ((1.0 - momentum) * *r as f64 + momentum * b) as f32;
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvBn {
    conv: usize,
    gamma: usize,
    beta: usize,
    bn: usize,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone)]
struct Block {
    a: ConvBn,
    b: ConvBn,
    shortcut: Option<ConvBn>,
}

#[derive(Debug, Clone)]
enum HeadParams {
    Classification { steer: (usize, usize), accel: (usize, usize) },
    Regression((usize, usize)),
}

#[derive(Debug, Clone)]
struct Arch {
    stem: ConvBn,
    stem_pool: bool,
    blocks: Vec<Block>,
    fc1: (usize, usize),
    heads: HeadParams,
}

/// Graph handles for the model outputs.
#[derive(Debug, Clone, Copy)]
pub enum Heads {
    Classification { steer: Var, accel: Var },
    Regression(Var),
}

pub struct ForwardPass {
    pub heads: Heads,
    /// Parameter leaves, in the model's parameter order.
    pub params: Vec<Var>,
    /// Batch statistics per batchnorm layer (training phase only).
    pub batch_stats: Vec<BatchStats>,
}

/// Model outputs for a batch.
#[derive(Debug, Clone, PartialEq)]
pub enum Predictions {
    Classification { steer: Tensor<f32>, accel: Tensor<f32> },
    Regression(Tensor<f32>),
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl Predictions {
    pub fn len(&self) -> usize {
        match self {
            Predictions::Classification { steer, .. } => steer.shape[0],
            Predictions::Regression(t) => t.shape[0],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn steer_logits(&self, i: usize) -> Option<&[f32]> {
        match self {
            Predictions::Classification { steer, .. } => {
                let c = steer.shape[1];
                Some(&steer.data[i * c..(i + 1) * c])
            }
            Predictions::Regression(_) => None,
        }
    }

    pub fn accel_logits(&self, i: usize) -> Option<&[f32]> {
        match self {
            Predictions::Classification { accel, .. } => {
                let c = accel.shape[1];
                Some(&accel.data[i * c..(i + 1) * c])
            }
            Predictions::Regression(_) => None,
        }
    }

    /// The predicted encoding of sample `i` (argmax per head; ties to the lowest index).
    pub fn encoding(&self, i: usize) -> TargetEncoding {
        match self {
            Predictions::Classification { .. } => TargetEncoding::Classification {
                steering_bucket: argmax(self.steer_logits(i).expect("classification")),
                accel: AccelClass::from_index(argmax(self.accel_logits(i).expect("classification")))
                    .expect("three acceleration classes"),
            },
            Predictions::Regression(t) => {
                let d = &t.data[i * 3..i * 3 + 3];
                TargetEncoding::Regression([d[0] as f64, d[1] as f64, d[2] as f64])
            }
        }
    }

    pub fn decode(&self, i: usize, scale: RegressionTargets) -> ControlCommand {
        super::codec::decode_targets(&self.encoding(i), scale)
    }

    pub fn all_finite(&self) -> bool {
        match self {
            Predictions::Classification { steer, accel } => steer.all_finite() && accel.all_finite(),
            Predictions::Regression(t) => t.all_finite(),
        }
    }
}

struct Builder {
    names: Vec<String>,
    params: Vec<Tensor<f32>>,
    bn_names: Vec<String>,
    running: Vec<RunningStats>,
    rng: ChaCha8Rng,
}

impl Builder {
    fn push(&mut self, name: String, t: Tensor<f32>) -> usize {
        self.names.push(name);
        self.params.push(t);
        self.params.len() - 1
    }

    /// He-normal initialization over the fan-in.
    fn kaiming(&mut self, name: String, shape: &[usize], fan_in: usize) -> usize {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(&mut self.rng) as f32).collect();
        self.push(name, Tensor { shape: shape.to_vec(), data })
    }

    fn conv_bn(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize) -> ConvBn {
        let conv = self.kaiming(format!("{name}.conv.w"), &[c_out, c_in, k, k], c_in * k * k);
        let gamma = self.push(format!("{name}.bn.gamma"), Tensor::full(&[c_out], 1.0));
        let beta = self.push(format!("{name}.bn.beta"), Tensor::zeros(&[c_out]));
        self.bn_names.push(format!("{name}.bn"));
        self.running.push(RunningStats::new(c_out));
        ConvBn { conv, gamma, beta, bn: self.running.len() - 1, stride, pad }
    }

    fn linear(&mut self, name: &str, out: usize, inp: usize, zero: bool) -> (usize, usize) {
        let w = if zero {
            self.push(format!("{name}.w"), Tensor::zeros(&[out, inp]))
        } else {
            self.kaiming(format!("{name}.w"), &[out, inp], inp)
        };
        let b = self.push(format!("{name}.b"), Tensor::zeros(&[out]));
        (w, b)
    }
}

/// Residual convolutional driving policy.
#[derive(Debug, Clone)]
pub struct DrivingModel {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor<f32>>,
    bn_names: Vec<String>,
    running: Vec<RunningStats>,
    arch: Arch,
}

impl DrivingModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            names: Vec::new(),
            params: Vec::new(),
            bn_names: Vec::new(),
            running: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, "model/init")),
        };
        let base = config.base_channels;
        let stem_pool = config.uses_strided_stem();
        let stem = b.conv_bn("stem", 1, base, 3, if stem_pool { 2 } else { 1 }, 1);
        let mut blocks = Vec::new();
        let mut c_in = base;
        for (s, &count) in config.stage_blocks.iter().enumerate() {
            let c_out = base << s;
            for i in 0..count {
                let stride = if s > 0 && i == 0 { 2 } else { 1 };
                let name = format!("stage{}.{}", s + 1, i);
                let a = b.conv_bn(&format!("{name}.a"), c_in, c_out, 3, stride, 1);
                let bb = b.conv_bn(&format!("{name}.b"), c_out, c_out, 3, 1, 1);
                let shortcut = (stride != 1 || c_in != c_out)
                    .then(|| b.conv_bn(&format!("{name}.shortcut"), c_in, c_out, 1, stride, 0));
                blocks.push(Block { a, b: bb, shortcut });
                c_in = c_out;
            }
        }
        let features = c_in + config.velocity_input as usize;
        let fc1 = b.linear("fc1", config.hidden_units, features, false);
        let heads = match config.mode {
            ModelMode::Classification => HeadParams::Classification {
                steer: b.linear("head.steer", config.steering_classes, config.hidden_units, true),
                accel: b.linear("head.accel", config.accel_classes, config.hidden_units, true),
            },
            ModelMode::Regression => HeadParams::Regression(b.linear("head.regression", 3, config.hidden_units, true)),
        };
        Ok(Self {
            config,
            names: b.names,
            params: b.params,
            bn_names: b.bn_names,
            running: b.running,
            arch: Arch { stem, stem_pool, blocks, fc1, heads },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<f32>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.params
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        self.params.iter().map(Tensor::numel).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn running_stats(&self) -> &[RunningStats] {
        &self.running
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.params[i])
    }

    /// Parameters and batchnorm running statistics under stable names.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<f32>)> {
        let mut out: Vec<(String, Tensor<f32>)> = self.names.iter().cloned().zip(self.params.iter().cloned()).collect();
        for (name, r) in self.bn_names.iter().zip(&self.running) {
            let n = r.mean.len();
            out.push((format!("{name}.running_mean"), Tensor { shape: vec![n], data: r.mean.clone() }));
            out.push((format!("{name}.running_var"), Tensor { shape: vec![n], data: r.var.clone() }));
        }
        out
    }

    pub fn load_named(&mut self, lookup: &dyn Fn(&str) -> Option<Tensor<f32>>) -> Result<()> {
        let fetch = |name: &str, shape: &[usize]| -> Result<Vec<f32>> {
            let t = lookup(name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape != shape {
                return Err(Error::Mismatch(format!("tensor {name} has shape {:?}, model expects {shape:?}", t.shape)));
            }
            Ok(t.data)
        };
        for (name, p) in self.names.iter().zip(self.params.iter_mut()) {
            p.data = fetch(name, &p.shape)?;
        }
        for (name, r) in self.bn_names.iter().zip(self.running.iter_mut()) {
            let n = [r.mean.len()];
            r.mean = fetch(&format!("{name}.running_mean"), &n)?;
            r.var = fetch(&format!("{name}.running_var"), &n)?;
        }
        Ok(())
    }

    fn check_inputs(&self, frames: &[usize], velocity: Option<usize>) -> Result<usize> {
        let c = &self.config;
        if frames.len() != 4 || frames[1] != 1 || frames[2] != c.input_height || frames[3] != c.input_width {
            return Err(Error::Mismatch(format!(
                "model expects frames [N, 1, {}, {}], got {frames:?}",
                c.input_height, c.input_width
            )));
        }
        let n = frames[0];
        match (c.velocity_input, velocity) {
            (true, Some(v)) if v == n => Ok(n),
            (true, Some(v)) => Err(Error::Mismatch(format!("{n} frames but {v} velocities"))),
            (true, None) => Err(Error::Mismatch("model needs velocity input".into())),
            (false, None) => Ok(n),
            (false, Some(_)) => Err(Error::Mismatch("model was built without velocity input".into())),
        }
    }

    /// Records the forward pass on `g`. `frames` is [N, 1, H, W] normalized
    /// pixels; `velocity_mph` is [N, 1] raw speed.
    pub fn forward_graph<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        frames: Var,
        velocity_mph: Option<Var>,
        phase: Phase,
        params_require_grad: bool,
    ) -> Result<ForwardPass> {
        self.check_inputs(g.shape(frames), velocity_mph.map(|v| g.shape(v)[0]))?;
        let params: Vec<Var> = self.params.iter().map(|p| g.leaf(p.cast(), params_require_grad)).collect();
        let running: Vec<(Vec<T>, Vec<T>)> = match phase {
            Phase::Train => Vec::new(),
            Phase::Eval => self
                .running
                .iter()
                .map(|r| {
                    (
                        r.mean.iter().map(|&v| T::from_f64(v as f64)).collect(),
                        r.var.iter().map(|&v| T::from_f64(v as f64)).collect(),
                    )
                })
                .collect(),
        };
        let mut stats = Vec::new();
        let mut conv_bn = |g: &mut Graph<T>, x: Var, l: &ConvBn| -> Result<Var> {
            let c = g.conv2d(x, params[l.conv], None, l.stride, l.pad)?;
            let mode = match phase {
                Phase::Train => BnMode::Train,
                Phase::Eval => BnMode::Eval { mean: &running[l.bn].0, var: &running[l.bn].1 },
            };
            let (y, s) = g.batchnorm2d(c, params[l.gamma], params[l.beta], mode)?;
            stats.extend(s);
            Ok(y)
        };

        let a = &self.arch;
        let x = conv_bn(g, frames, &a.stem)?;
        let mut x = g.relu(x);
        if a.stem_pool {
            x = g.max_pool2d(x, 3, 2, 1)?;
        }
        for block in &a.blocks {
            let h = conv_bn(g, x, &block.a)?;
            let h = g.relu(h);
            let h = conv_bn(g, h, &block.b)?;
            let skip = match &block.shortcut {
                Some(s) => conv_bn(g, x, s)?,
                None => x,
            };
            let sum = g.add(h, skip)?;
            x = g.relu(sum);
        }
        let mut feat = g.global_avg_pool(x)?;
        if let Some(v) = velocity_mph {
            let v = g.scale(v, 1.0 / VELOCITY_SCALE_MPH);
            feat = g.concat(&[feat, v])?;
        }
        let h = g.linear(feat, params[a.fc1.0], Some(params[a.fc1.1]))?;
        let h = g.relu(h);
        let heads = match a.heads {
            HeadParams::Classification { steer, accel } => Heads::Classification {
                steer: g.linear(h, params[steer.0], Some(params[steer.1]))?,
                accel: g.linear(h, params[accel.0], Some(params[accel.1]))?,
            },
            HeadParams::Regression((w, b)) => Heads::Regression(g.linear(h, params[w], Some(params[b]))?),
        };
        Ok(ForwardPass { heads, params, batch_stats: stats })
    }

    /// Scalar training loss for the recorded heads.
    pub fn loss_graph<T: Scalar>(&self, g: &mut Graph<T>, heads: Heads, targets: &[TargetEncoding]) -> Result<Var> {
        match heads {
            Heads::Classification { steer, accel } => {
                let mut steer_t = Vec::with_capacity(targets.len());
                let mut accel_t = Vec::with_capacity(targets.len());
                for t in targets {
                    match *t {
                        TargetEncoding::Classification { steering_bucket, accel } => {
                            steer_t.push(steering_bucket);
                            accel_t.push(accel.index());
                        }
                        TargetEncoding::Regression(_) => {
                            return Err(Error::Mismatch("regression targets for a classification model".into()))
                        }
                    }
                }
                let ls = g.softmax_cross_entropy(steer, &steer_t)?;
                let la = g.softmax_cross_entropy(accel, &accel_t)?;
                let ls = g.scale(ls, self.config.steer_loss_weight);
                let la = g.scale(la, self.config.accel_loss_weight);
                g.add(ls, la)
            }
            Heads::Regression(out) => {
                let mut data = Vec::with_capacity(targets.len() * 3);
                for t in targets {
                    match t {
                        TargetEncoding::Regression(v) => data.extend(v.iter().map(|&x| T::from_f64(x))),
                        TargetEncoding::Classification { .. } => {
                            return Err(Error::Mismatch("classification targets for a regression model".into()))
                        }
                    }
                }
                let target = Tensor::new(vec![targets.len(), 3], data)?;
                g.mse(out, &target)
            }
        }
    }

    fn inputs(g: &mut Graph<f32>, frames: &Tensor<f32>, velocity_mph: &[f32], use_velocity: bool) -> (Var, Option<Var>) {
        let f = g.input(frames.clone());
        let v = use_velocity.then(|| g.input(Tensor { shape: vec![velocity_mph.len(), 1], data: velocity_mph.to_vec() }));
        (f, v)
    }

    fn collect(g: &Graph<f32>, heads: Heads) -> Predictions {
        match heads {
            Heads::Classification { steer, accel } => {
                Predictions::Classification { steer: g.value(steer).clone(), accel: g.value(accel).clone() }
            }
            Heads::Regression(v) => Predictions::Regression(g.value(v).clone()),
        }
    }

    /// Velocities are required iff the model takes them; an empty slice means none.
    fn velocity_arg(&self, velocity_mph: &[f32]) -> Option<usize> {
        (self.config.velocity_input || !velocity_mph.is_empty()).then_some(velocity_mph.len())
    }

    /// Inference with running batchnorm statistics.
    pub fn forward_eval(&self, frames: &Tensor<f32>, velocity_mph: &[f32]) -> Result<Predictions> {
        self.check_inputs(&frames.shape, self.velocity_arg(velocity_mph))?;
        let mut g = Graph::new();
        let (f, v) = Self::inputs(&mut g, frames, velocity_mph, self.config.velocity_input);
        let pass = self.forward_graph(&mut g, f, v, Phase::Eval, false)?;
        let preds = Self::collect(&g, pass.heads);
        if !preds.all_finite() {
            return Err(Error::NonFiniteOutput);
        }
        Ok(preds)
    }

    /// Eval-mode loss and predictions.
    pub fn eval_loss(&self, frames: &Tensor<f32>, velocity_mph: &[f32], targets: &[TargetEncoding]) -> Result<(f64, Predictions)> {
        self.check_inputs(&frames.shape, self.velocity_arg(velocity_mph))?;
        let mut g = Graph::new();
        let (f, v) = Self::inputs(&mut g, frames, velocity_mph, self.config.velocity_input);
        let pass = self.forward_graph(&mut g, f, v, Phase::Eval, false)?;
        let loss = self.loss_graph(&mut g, pass.heads, targets)?;
        Ok((g.value(loss).item() as f64, Self::collect(&g, pass.heads)))
    }

    /// Training-mode forward and backward. Updates the running batchnorm
    /// statistics and returns the loss and one gradient per parameter.
    pub fn train_step(
        &mut self,
        frames: &Tensor<f32>,
        velocity_mph: &[f32],
        targets: &[TargetEncoding],
    ) -> Result<(f64, Vec<Vec<f32>>)> {
        self.check_inputs(&frames.shape, self.velocity_arg(velocity_mph))?;
        let mut g = Graph::new();
        let (f, v) = Self::inputs(&mut g, frames, velocity_mph, self.config.velocity_input);
        let pass = self.forward_graph(&mut g, f, v, Phase::Train, true)?;
        let loss = self.loss_graph(&mut g, pass.heads, targets)?;
        let value = g.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(Error::NonFiniteOutput);
        }
        let mut grads = g.backward(loss)?;
        let out = pass.params.iter().map(|&p| grads.take(p).expect("every parameter receives a gradient")).collect();
        for (r, s) in self.running.iter_mut().zip(&pass.batch_stats) {
            r.update(s, BN_MOMENTUM);
        }
        Ok((value, out))
    }
}
