//! The four network architectures (generator, discriminator, classifier,
//! autoencoder), their parameter containers, graph-building forwards, and
//! the self-describing checkpoint format.
//!
//! Parameters live as raw f64 tensors; a forward pass binds them as leaves
//! into a fresh [`Graph`] so gradients can be requested per step. Layouts:
//! plain conv weights are `[out_ch, in_ch, kh, kw]`, upsampling (transposed)
//! conv weights are `[in_ch, out_ch, kh, kw]`, linear weights are
//! `[out_features, in_features]`.

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;

use autodiff::{ConvGeom, Graph, NodeId, Tensor};
use ndarray::{Array2, ArrayD, Axis, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("shape mismatch for {what}: expected {expected:?}, got {got:?}")]
    ShapeMismatch { what: String, expected: Vec<usize>, got: Vec<usize> },
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Whether a forward pass uses batch statistics (training) or running
/// statistics (inference) in the generator's normalization layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Architecture hyperparameters. A profile fully determines every parameter
/// shape, so it doubles as the compatibility key stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub name: String,
    pub img_size: usize,
    pub channels: usize,
    pub classes: usize,
    pub noise_dim: usize,
    pub embed_dim: usize,
    /// Spatial side of the generator's seed tensor; each block doubles it.
    pub seed_spatial: usize,
    pub gen_seed_channels: usize,
    /// Output channel counts per generator block; the last equals `channels`.
    pub gen_kernels: Vec<usize>,
    pub disc_kernels: Vec<usize>,
    pub cls_kernels: Vec<usize>,
    pub leaky_slope: f64,
    pub weight_sd: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Profile {
    /// Full-size profile: 64x64 images, four up/down blocks.
    pub fn full(channels: usize, classes: usize) -> Self {
        Profile {
            name: "full".into(),
            img_size: 64,
            channels,
            classes,
            noise_dim: 128,
            embed_dim: 32,
            seed_spatial: 4,
            gen_seed_channels: 256,
            gen_kernels: vec![128, 128, 64, channels],
            disc_kernels: vec![64, 128, 128, 256],
            cls_kernels: vec![32, 32, 128, 256],
            leaky_slope: 0.2,
            weight_sd: 0.02,
            bn_eps: 1e-5,
            bn_momentum: 0.9,
        }
    }

    /// Reduced-width profile on 32x32 images; sized so a full ablation sweep
    /// fits in minutes on one core.
    pub fn desk(channels: usize, classes: usize) -> Self {
        Profile {
            name: "desk".into(),
            img_size: 32,
            channels,
            classes,
            noise_dim: 128,
            embed_dim: 32,
            seed_spatial: 2,
            gen_seed_channels: 48,
            gen_kernels: vec![24, 16, 12, channels],
            disc_kernels: vec![8, 16, 16, 32],
            cls_kernels: vec![6, 8, 12, 24],
            leaky_slope: 0.2,
            weight_sd: 0.02,
            bn_eps: 1e-5,
            bn_momentum: 0.9,
        }
    }

    /// Minimal profile for unit tests: 8x8 images, two blocks.
    pub fn tiny(channels: usize, classes: usize) -> Self {
        Profile {
            name: "tiny".into(),
            img_size: 8,
            channels,
            classes,
            noise_dim: 16,
            embed_dim: 8,
            seed_spatial: 2,
            gen_seed_channels: 16,
            gen_kernels: vec![12, channels],
            disc_kernels: vec![8, 12],
            cls_kernels: vec![6, 8],
            leaky_slope: 0.2,
            weight_sd: 0.02,
            bn_eps: 1e-5,
            bn_momentum: 0.9,
        }
    }

    pub fn by_name(name: &str, channels: usize, classes: usize) -> Option<Profile> {
        match name {
            "full" => Some(Profile::full(channels, classes)),
            "desk" => Some(Profile::desk(channels, classes)),
            "tiny" => Some(Profile::tiny(channels, classes)),
            _ => None,
        }
    }

    pub fn blocks(&self) -> usize {
        self.gen_kernels.len()
    }

    /// Width of the classifier's flattened penultimate activation, which is
    /// the feature vector used for distribution metrics.
    pub fn feature_dim(&self) -> usize {
        self.cls_kernels.last().unwrap() * self.seed_spatial * self.seed_spatial
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        let b = self.blocks();
        if b == 0 {
            return Err(NetworkError::InvalidProfile("at least one block is required".into()));
        }
        if self.disc_kernels.len() != b || self.cls_kernels.len() != b {
            return Err(NetworkError::InvalidProfile(
                "generator, discriminator, and classifier must have equal block counts".into(),
            ));
        }
        if self.img_size != self.seed_spatial << b {
            return Err(NetworkError::InvalidProfile(format!(
                "img_size {} must equal seed_spatial {} doubled {} times",
                self.img_size, self.seed_spatial, b
            )));
        }
        if *self.gen_kernels.last().unwrap() != self.channels {
            return Err(NetworkError::InvalidProfile(
                "last generator kernel count must equal the image channel count".into(),
            ));
        }
        if !matches!(self.channels, 1 | 3) {
            return Err(NetworkError::InvalidProfile("channels must be 1 or 3".into()));
        }
        if self.classes < 2 {
            return Err(NetworkError::InvalidProfile("need at least two classes".into()));
        }
        if self.noise_dim == 0 || self.embed_dim == 0 || self.seed_spatial == 0 {
            return Err(NetworkError::InvalidProfile("dimensions must be positive".into()));
        }
        Ok(())
    }
}

fn normal_tensor(shape: &[usize], sd: f64, rng: &mut impl Rng) -> Tensor {
    let dist = Normal::new(0.0, sd).expect("valid normal");
    ArrayD::from_shape_fn(IxDyn(shape), |_| dist.sample(rng))
}

/// Scale/shift normalization state for one generator block.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub run_mean: Tensor,
    pub run_var: Tensor,
}

impl BatchNorm {
    fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: ArrayD::ones(IxDyn(&[channels])),
            beta: ArrayD::zeros(IxDyn(&[channels])),
            run_mean: ArrayD::zeros(IxDyn(&[channels])),
            run_var: ArrayD::ones(IxDyn(&[channels])),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GenBlock {
    /// Upsampling conv weight `[in_ch, out_ch, 4, 4]`.
    pub w: Tensor,
    pub b: Tensor,
    /// Present on every block except the output block.
    pub bn: Option<BatchNorm>,
}

/// Conditional generator: label embedding concatenated to noise, linear seed
/// projection, then doubling upsample blocks ending in tanh.
#[derive(Debug, Clone)]
pub struct Generator {
    pub profile: Profile,
    pub embed_w: Tensor,
    pub embed_b: Tensor,
    pub seed_w: Tensor,
    pub seed_b: Tensor,
    pub blocks: Vec<GenBlock>,
}

#[derive(Debug, Clone)]
pub struct ConvBlock {
    /// Downsampling conv weight `[out_ch, in_ch, 4, 4]`.
    pub w: Tensor,
    pub b: Tensor,
}

/// Conditional discriminator: label planes are concatenated to the image as
/// extra input channels, then downsampling conv blocks feed a sigmoid head.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub profile: Profile,
    pub blocks: Vec<ConvBlock>,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

/// Image classifier; its flattened penultimate activation doubles as the
/// feature map for distribution metrics.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub profile: Profile,
    pub blocks: Vec<ConvBlock>,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

/// Convolutional encoder used only during pretraining.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub profile: Profile,
    pub blocks: Vec<ConvBlock>,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

/// Label-conditioned autoencoder; the decoder shares the generator
/// architecture exactly so its weights can seed the generator.
#[derive(Debug, Clone)]
pub struct Autoencoder {
    pub encoder: Encoder,
    pub decoder: Generator,
}

const KERNEL: usize = 4;
const STRIDE: usize = 2;
const PAD: usize = 1;

impl Generator {
    pub fn init(profile: &Profile, rng: &mut impl Rng) -> Self {
        profile.validate().expect("profile must be valid");
        let sd = profile.weight_sd;
        let seed_len = profile.gen_seed_channels * profile.seed_spatial * profile.seed_spatial;
        let in_dim = profile.noise_dim + profile.embed_dim;
        let mut blocks = Vec::new();
        let mut cin = profile.gen_seed_channels;
        let last = profile.blocks() - 1;
        for (i, &cout) in profile.gen_kernels.iter().enumerate() {
            blocks.push(GenBlock {
                w: normal_tensor(&[cin, cout, KERNEL, KERNEL], sd, rng),
                b: ArrayD::zeros(IxDyn(&[cout])),
                bn: if i < last { Some(BatchNorm::new(cout)) } else { None },
            });
            cin = cout;
        }
        Generator {
            profile: profile.clone(),
            embed_w: normal_tensor(&[profile.embed_dim, profile.classes], sd, rng),
            embed_b: ArrayD::zeros(IxDyn(&[profile.embed_dim])),
            seed_w: normal_tensor(&[seed_len, in_dim], sd, rng),
            seed_b: ArrayD::zeros(IxDyn(&[seed_len])),
            blocks,
        }
    }

    pub fn trainable(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.embed_w, &self.embed_b, &self.seed_w, &self.seed_b];
        for bl in &self.blocks {
            out.push(&bl.w);
            out.push(&bl.b);
            if let Some(bn) = &bl.bn {
                out.push(&bn.gamma);
                out.push(&bn.beta);
            }
        }
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.embed_w,
            &mut self.embed_b,
            &mut self.seed_w,
            &mut self.seed_b,
        ];
        for bl in &mut self.blocks {
            out.push(&mut bl.w);
            out.push(&mut bl.b);
            if let Some(bn) = &mut bl.bn {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
        }
        out
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("g.embed.w".to_string(), &self.embed_w),
            ("g.embed.b".to_string(), &self.embed_b),
            ("g.seed.w".to_string(), &self.seed_w),
            ("g.seed.b".to_string(), &self.seed_b),
        ];
        for (i, bl) in self.blocks.iter().enumerate() {
            out.push((format!("g.block{i}.w"), &bl.w));
            out.push((format!("g.block{i}.b"), &bl.b));
            if let Some(bn) = &bl.bn {
                out.push((format!("g.block{i}.bn.gamma"), &bn.gamma));
                out.push((format!("g.block{i}.bn.beta"), &bn.beta));
                out.push((format!("g.block{i}.bn.mean"), &bn.run_mean));
                out.push((format!("g.block{i}.bn.var"), &bn.run_var));
            }
        }
        out
    }

    pub fn bind(&self, g: &mut Graph) -> BoundGenerator {
        let embed_w = g.input(self.embed_w.clone());
        let embed_b = g.input(self.embed_b.clone());
        let seed_w = g.input(self.seed_w.clone());
        let seed_b = g.input(self.seed_b.clone());
        let mut order = vec![embed_w, embed_b, seed_w, seed_b];
        let mut blocks = Vec::new();
        for bl in &self.blocks {
            let w = g.input(bl.w.clone());
            let b = g.input(bl.b.clone());
            order.push(w);
            order.push(b);
            let bn = bl.bn.as_ref().map(|bn| {
                let gamma = g.input(bn.gamma.clone());
                let beta = g.input(bn.beta.clone());
                order.push(gamma);
                order.push(beta);
                (gamma, beta)
            });
            blocks.push(BoundGenBlock { w, b, bn });
        }
        BoundGenerator { embed_w, embed_b, seed_w, seed_b, blocks, order }
    }

    /// Builds the generator forward pass on `graph`. `z` is `[n, noise_dim]`
    /// and `y` is `[n, classes]` one-hot; both may be constants or upstream
    /// nodes. In train mode the per-block batch statistics are returned so
    /// the caller can fold them into the running averages.
    pub fn forward(
        &self,
        graph: &mut Graph,
        bound: &BoundGenerator,
        z: NodeId,
        y: NodeId,
        mode: Mode,
    ) -> GenForward {
        let p = &self.profile;
        let n = graph.value(z).shape()[0];
        let emb = {
            let prod = graph.matmul(y, bound.embed_w, false, true);
            graph.add_row_bias(prod, bound.embed_b)
        };
        let h = graph.concat(&[z, emb], 1);
        let seed = {
            let prod = graph.matmul(h, bound.seed_w, false, true);
            graph.add_row_bias(prod, bound.seed_b)
        };
        let mut x = graph.reshape(
            seed,
            &[n, p.gen_seed_channels, p.seed_spatial, p.seed_spatial],
        );
        let mut spatial = p.seed_spatial;
        let mut cin = p.gen_seed_channels;
        let mut stats = Vec::new();
        for (i, bl) in self.blocks.iter().enumerate() {
            let cout = p.gen_kernels[i];
            // the geometry names the downsampling direction, so the block
            // output (2 * spatial) is its `in_*` side
            let geom =
                ConvGeom::new(cout, cin, KERNEL, KERNEL, STRIDE, PAD, 2 * spatial, 2 * spatial);
            x = graph.conv_input_grad(x, bound.blocks[i].w, geom);
            x = graph.add_chan_bias(x, bound.blocks[i].b);
            spatial *= 2;
            if let Some((gamma, beta)) = bound.blocks[i].bn {
                let bn = bl.bn.as_ref().expect("bound bn implies param bn");
                let (normalized, stat) = batch_norm(
                    graph,
                    x,
                    gamma,
                    beta,
                    bn,
                    p.bn_eps,
                    mode,
                    [n, cout, spatial, spatial],
                );
                x = graph.leaky_relu(normalized, p.leaky_slope);
                if let Some(s) = stat {
                    stats.push(s);
                }
            } else {
                x = graph.tanh(x);
            }
            cin = cout;
        }
        GenForward { images: x, bn_batch_stats: stats }
    }

    /// Folds batch statistics from a train-mode forward into the running
    /// averages: `run = momentum * run + (1 - momentum) * batch`.
    pub fn apply_bn_updates(&mut self, stats: &[(Tensor, Tensor)]) {
        let momentum = self.profile.bn_momentum;
        let mut it = stats.iter();
        for bl in &mut self.blocks {
            if let Some(bn) = &mut bl.bn {
                let (mean, var) = it.next().expect("one stat pair per normalized block");
                bn.run_mean = bn.run_mean.mapv(|v| v * momentum) + &mean.mapv(|v| v * (1.0 - momentum));
                bn.run_var = bn.run_var.mapv(|v| v * momentum) + &var.mapv(|v| v * (1.0 - momentum));
            }
        }
        assert!(it.next().is_none(), "stat count mismatch");
    }
}

pub struct BoundGenBlock {
    pub w: NodeId,
    pub b: NodeId,
    pub bn: Option<(NodeId, NodeId)>,
}

pub struct BoundGenerator {
    pub embed_w: NodeId,
    pub embed_b: NodeId,
    pub seed_w: NodeId,
    pub seed_b: NodeId,
    pub blocks: Vec<BoundGenBlock>,
    /// All trainable leaves in the same order as [`Generator::trainable`].
    pub order: Vec<NodeId>,
}

pub struct GenForward {
    pub images: NodeId,
    /// `(mean, var)` per normalized block, `[channels]` each; empty in eval
    /// mode.
    pub bn_batch_stats: Vec<(Tensor, Tensor)>,
}

/// Normalizes `x` over the batch and spatial axes. Returns the output node
/// and, in train mode, the batch statistics as raw `[channels]` tensors.
#[allow(clippy::too_many_arguments)]
fn batch_norm(
    graph: &mut Graph,
    x: NodeId,
    gamma: NodeId,
    beta: NodeId,
    bn: &BatchNorm,
    eps: f64,
    mode: Mode,
    shape: [usize; 4],
) -> (NodeId, Option<(Tensor, Tensor)>) {
    let [n, c, h, w] = shape;
    let count = (n * h * w) as f64;
    let full: Vec<usize> = shape.to_vec();
    let (mean, var, stats) = match mode {
        Mode::Train => {
            let sum = graph.sum_keep(x, &[0, 2, 3]);
            let mean = graph.scale(sum, 1.0 / count);
            let mean_b = graph.broadcast_to(mean, &full);
            let centered = graph.sub(x, mean_b);
            let sq = graph.mul(centered, centered);
            let sq_sum = graph.sum_keep(sq, &[0, 2, 3]);
            let var = graph.scale(sq_sum, 1.0 / count);
            let mean_val =
                graph.value(mean).to_shape(IxDyn(&[c])).expect("mean reshape").to_owned();
            let var_val = graph.value(var).to_shape(IxDyn(&[c])).expect("var reshape").to_owned();
            (mean, var, Some((mean_val, var_val)))
        }
        Mode::Eval => {
            let mean = graph.input(
                bn.run_mean.to_shape(IxDyn(&[1, c, 1, 1])).expect("run mean reshape").to_owned(),
            );
            let var = graph.input(
                bn.run_var.to_shape(IxDyn(&[1, c, 1, 1])).expect("run var reshape").to_owned(),
            );
            (mean, var, None)
        }
    };
    let mean_b = graph.broadcast_to(mean, &full);
    let centered = graph.sub(x, mean_b);
    let var_eps = graph.add_scalar(var, eps);
    let denom = graph.sqrt(var_eps);
    let denom_b = graph.broadcast_to(denom, &full);
    let normalized = graph.div(centered, denom_b);
    let gamma4 = graph.reshape(gamma, &[1, c, 1, 1]);
    let gamma_b = graph.broadcast_to(gamma4, &full);
    let beta4 = graph.reshape(beta, &[1, c, 1, 1]);
    let beta_b = graph.broadcast_to(beta4, &full);
    let scaled = graph.mul(normalized, gamma_b);
    (graph.add(scaled, beta_b), stats)
}

/// Shared trunk of downsampling conv blocks followed by a linear head.
/// Returns `(head_out, flattened_features)`.
fn conv_trunk(
    graph: &mut Graph,
    x: NodeId,
    blocks: &[NodeId],
    head_w: NodeId,
    head_b: NodeId,
    kernels: &[usize],
    in_channels: usize,
    img_size: usize,
    slope: f64,
) -> (NodeId, NodeId) {
    let n = graph.value(x).shape()[0];
    let mut cin = in_channels;
    let mut spatial = img_size;
    let mut cur = x;
    for (i, &cout) in kernels.iter().enumerate() {
        let geom = ConvGeom::new(cin, cout, KERNEL, KERNEL, STRIDE, PAD, spatial, spatial);
        cur = graph.conv(cur, blocks[2 * i], geom);
        cur = graph.add_chan_bias(cur, blocks[2 * i + 1]);
        cur = graph.leaky_relu(cur, slope);
        cin = cout;
        spatial /= 2;
    }
    let flat = graph.reshape(cur, &[n, cin * spatial * spatial]);
    let prod = graph.matmul(flat, head_w, false, true);
    let head = graph.add_row_bias(prod, head_b);
    (head, flat)
}

macro_rules! impl_conv_net {
    ($net:ident, $prefix:literal, $kernels:ident, $in_channels:expr, $head_out:expr) => {
        impl $net {
            pub fn init(profile: &Profile, rng: &mut impl Rng) -> Self {
                profile.validate().expect("profile must be valid");
                let sd = profile.weight_sd;
                let mut blocks = Vec::new();
                let mut cin = $in_channels(profile);
                for &cout in &profile.$kernels {
                    blocks.push(ConvBlock {
                        w: normal_tensor(&[cout, cin, KERNEL, KERNEL], sd, rng),
                        b: ArrayD::zeros(IxDyn(&[cout])),
                    });
                    cin = cout;
                }
                let feat = cin * profile.seed_spatial * profile.seed_spatial;
                let head_out = $head_out(profile);
                $net {
                    profile: profile.clone(),
                    blocks,
                    head_w: normal_tensor(&[head_out, feat], sd, rng),
                    head_b: ArrayD::zeros(IxDyn(&[head_out])),
                }
            }

            pub fn trainable(&self) -> Vec<&Tensor> {
                let mut out = Vec::new();
                for bl in &self.blocks {
                    out.push(&bl.w);
                    out.push(&bl.b);
                }
                out.push(&self.head_w);
                out.push(&self.head_b);
                out
            }

            pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
                let mut out = Vec::new();
                for bl in &mut self.blocks {
                    out.push(&mut bl.w);
                    out.push(&mut bl.b);
                }
                out.push(&mut self.head_w);
                out.push(&mut self.head_b);
                out
            }

            pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
                let mut out = Vec::new();
                for (i, bl) in self.blocks.iter().enumerate() {
                    out.push((format!(concat!($prefix, ".block{}.w"), i), &bl.w));
                    out.push((format!(concat!($prefix, ".block{}.b"), i), &bl.b));
                }
                out.push((concat!($prefix, ".head.w").to_string(), &self.head_w));
                out.push((concat!($prefix, ".head.b").to_string(), &self.head_b));
                out
            }

            /// Binds all trainable tensors as graph leaves, trunk blocks
            /// first (w, b per block), then the head.
            pub fn bind(&self, g: &mut Graph) -> BoundConvNet {
                let mut order = Vec::new();
                for bl in &self.blocks {
                    order.push(g.input(bl.w.clone()));
                    order.push(g.input(bl.b.clone()));
                }
                let head_w = g.input(self.head_w.clone());
                let head_b = g.input(self.head_b.clone());
                order.push(head_w);
                order.push(head_b);
                BoundConvNet { head_w, head_b, order }
            }
        }
    };
}

fn disc_in_channels(p: &Profile) -> usize {
    p.channels + p.classes
}
fn img_in_channels(p: &Profile) -> usize {
    p.channels
}
fn one_output(_p: &Profile) -> usize {
    1
}
fn class_output(p: &Profile) -> usize {
    p.classes
}
fn noise_output(p: &Profile) -> usize {
    p.noise_dim
}

impl_conv_net!(Discriminator, "d", disc_kernels, disc_in_channels, one_output);
impl_conv_net!(Classifier, "c", cls_kernels, img_in_channels, class_output);
impl_conv_net!(Encoder, "e", disc_kernels, img_in_channels, noise_output);

pub struct BoundConvNet {
    pub head_w: NodeId,
    pub head_b: NodeId,
    /// All trainable leaves: (w, b) per block, then head w, head b.
    pub order: Vec<NodeId>,
}

impl Discriminator {
    /// Forward from an already-conditioned input node
    /// `[n, channels + classes, img, img]` to per-row real probabilities `[n]`.
    pub fn forward(&self, graph: &mut Graph, bound: &BoundConvNet, xcond: NodeId) -> NodeId {
        let p = &self.profile;
        let n = graph.value(xcond).shape()[0];
        let (logit, _) = conv_trunk(
            graph,
            xcond,
            &bound.order,
            bound.head_w,
            bound.head_b,
            &p.disc_kernels,
            p.channels + p.classes,
            p.img_size,
            p.leaky_slope,
        );
        let prob = graph.sigmoid(logit);
        graph.reshape(prob, &[n])
    }
}

pub struct ClsForward {
    pub probs: NodeId,
    pub features: NodeId,
}

impl Classifier {
    /// Forward to `(probs [n, classes], features [n, feature_dim])`.
    /// The softmax subtracts each row's max as a constant, which leaves the
    /// gradient untouched and keeps the exponentials bounded.
    pub fn forward(&self, graph: &mut Graph, bound: &BoundConvNet, x: NodeId) -> ClsForward {
        let p = &self.profile;
        let n = graph.value(x).shape()[0];
        let (logits, features) = conv_trunk(
            graph,
            x,
            &bound.order,
            bound.head_w,
            bound.head_b,
            &p.cls_kernels,
            p.channels,
            p.img_size,
            p.leaky_slope,
        );
        let k = p.classes;
        let mut row_max = ArrayD::zeros(IxDyn(&[n, 1]));
        {
            let lv = graph.value(logits);
            for i in 0..n {
                let mut m = f64::NEG_INFINITY;
                for j in 0..k {
                    m = m.max(lv[[i, j]]);
                }
                row_max[[i, 0]] = m;
            }
        }
        let max_node = graph.input(row_max);
        let max_b = graph.broadcast_to(max_node, &[n, k]);
        let shifted = graph.sub(logits, max_b);
        let expd = graph.exp(shifted);
        let denom = graph.sum_keep(expd, &[1]);
        let denom_b = graph.broadcast_to(denom, &[n, k]);
        let probs = graph.div(expd, denom_b);
        ClsForward { probs, features }
    }
}

impl Encoder {
    /// Forward to latent codes `[n, noise_dim]`.
    pub fn forward(&self, graph: &mut Graph, bound: &BoundConvNet, x: NodeId) -> NodeId {
        let p = &self.profile;
        let (latent, _) = conv_trunk(
            graph,
            x,
            &bound.order,
            bound.head_w,
            bound.head_b,
            &p.disc_kernels,
            p.channels,
            p.img_size,
            p.leaky_slope,
        );
        latent
    }
}

impl Autoencoder {
    pub fn init(profile: &Profile, rng: &mut impl Rng) -> Self {
        Autoencoder {
            encoder: Encoder::init(profile, rng),
            decoder: Generator::init(profile, rng),
        }
    }
}

/// Copies the pretrained decoder into a fresh generator, value for value.
pub fn init_generator_from_decoder(ae: &Autoencoder) -> Generator {
    ae.decoder.clone()
}

/// Stacks per-row label planes onto images: output `[n, c + classes, h, w]`
/// where plane `c + k` is filled with `y[row, k]`.
pub fn condition_images(x: &Tensor, y: &Array2<f64>) -> Tensor {
    let s = x.shape();
    assert_eq!(s.len(), 4, "expected [n, c, h, w]");
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    assert_eq!(y.nrows(), n, "label rows must match batch");
    let k = y.ncols();
    let mut out = ArrayD::zeros(IxDyn(&[n, c + k, h, w]));
    for i in 0..n {
        let mut row = out.index_axis_mut(Axis(0), i);
        row.slice_mut(ndarray::s![..c, .., ..]).assign(&x.index_axis(Axis(0), i));
        for kk in 0..k {
            row.slice_mut(ndarray::s![c + kk, .., ..]).fill(y[[i, kk]]);
        }
    }
    out
}

fn check_matrix(what: &str, m: &Array2<f64>, rows: Option<usize>, cols: usize) -> Result<(), NetworkError> {
    if let Some(r) = rows {
        if m.nrows() != r || m.ncols() != cols {
            return Err(NetworkError::ShapeMismatch {
                what: what.into(),
                expected: vec![r, cols],
                got: vec![m.nrows(), m.ncols()],
            });
        }
    } else if m.ncols() != cols {
        return Err(NetworkError::ShapeMismatch {
            what: what.into(),
            expected: vec![m.nrows(), cols],
            got: vec![m.nrows(), m.ncols()],
        });
    }
    Ok(())
}

fn check_images(what: &str, x: &Tensor, p: &Profile) -> Result<usize, NetworkError> {
    let s = x.shape();
    if s.len() != 4 || s[1] != p.channels || s[2] != p.img_size || s[3] != p.img_size {
        return Err(NetworkError::ShapeMismatch {
            what: what.into(),
            expected: vec![0, p.channels, p.img_size, p.img_size],
            got: s.to_vec(),
        });
    }
    Ok(s[0])
}

/// Generates images from noise and one-hot labels, using running statistics
/// in the normalization layers. Output is `[n, channels, img, img]` in
/// (-1, 1).
pub fn generator_forward(
    gen: &Generator,
    z: &Array2<f64>,
    y: &Array2<f64>,
) -> Result<Tensor, NetworkError> {
    let p = &gen.profile;
    check_matrix("generator noise", z, None, p.noise_dim)?;
    check_matrix("generator labels", y, Some(z.nrows()), p.classes)?;
    let mut graph = Graph::new();
    let bound = gen.bind(&mut graph);
    let zn = graph.input(z.clone().into_dyn());
    let yn = graph.input(y.clone().into_dyn());
    let fwd = gen.forward(&mut graph, &bound, zn, yn, Mode::Eval);
    Ok(graph.value(fwd.images).clone())
}

/// Scores images with their claimed labels; returns one real-probability per
/// row.
pub fn discriminator_forward(
    disc: &Discriminator,
    x: &Tensor,
    y: &Array2<f64>,
) -> Result<Vec<f64>, NetworkError> {
    let p = &disc.profile;
    let n = check_images("discriminator input", x, p)?;
    check_matrix("discriminator labels", y, Some(n), p.classes)?;
    let mut graph = Graph::new();
    let bound = disc.bind(&mut graph);
    let xc = graph.input(condition_images(x, y));
    let prob = disc.forward(&mut graph, &bound, xc);
    Ok(graph.value(prob).iter().copied().collect())
}

/// Classifies images; returns `(probs [n, classes], features [n, feature_dim])`.
pub fn classifier_forward(
    cls: &Classifier,
    x: &Tensor,
) -> Result<(Array2<f64>, Array2<f64>), NetworkError> {
    let p = &cls.profile;
    let n = check_images("classifier input", x, p)?;
    let mut graph = Graph::new();
    let bound = cls.bind(&mut graph);
    let xn = graph.input(x.clone());
    let fwd = cls.forward(&mut graph, &bound, xn);
    let probs = graph
        .value(fwd.probs)
        .to_shape((n, p.classes))
        .expect("probs shape")
        .to_owned();
    let features = graph
        .value(fwd.features)
        .to_shape((n, p.feature_dim()))
        .expect("features shape")
        .to_owned();
    Ok((probs, features))
}

// ---- checkpoints -----------------------------------------------------------

/// A self-describing parameter container: profile, epoch counter, and an
/// ordered list of named tensors (stored as little-endian f32).
pub struct Checkpoint {
    pub profile: Profile,
    pub epoch: u64,
    pub tensors: Vec<(String, Tensor)>,
}

const CKPT_MAGIC: &[u8; 8] = b"TRGCKPT1";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    profile: Profile,
    epoch: u64,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

impl Checkpoint {
    /// Writes atomically: the file appears either complete or not at all.
    pub fn save(&self, path: &Path) -> Result<(), NetworkError> {
        let header = CheckpointHeader {
            profile: self.profile.clone(),
            epoch: self.epoch,
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry { name: name.clone(), shape: t.shape().to_vec() })
                .collect(),
        };
        let header_json = serde_json::to_vec(&header)
            .map_err(|e| NetworkError::CorruptCheckpoint(e.to_string()))?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(CKPT_MAGIC)?;
            f.write_all(&(header_json.len() as u64).to_le_bytes())?;
            f.write_all(&header_json)?;
            let mut buf = Vec::new();
            for (_, t) in &self.tensors {
                buf.clear();
                buf.reserve(t.len() * 4);
                for &v in t.iter() {
                    buf.extend_from_slice(&(v as f32).to_le_bytes());
                }
                f.write_all(&buf)?;
            }
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint, NetworkError> {
        let mut f = fs::File::open(path)?;
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)
            .map_err(|_| NetworkError::CorruptCheckpoint("file too short".into()))?;
        if &magic != CKPT_MAGIC {
            return Err(NetworkError::CorruptCheckpoint("bad magic".into()));
        }
        let mut len_bytes = [0u8; 8];
        f.read_exact(&mut len_bytes)
            .map_err(|_| NetworkError::CorruptCheckpoint("truncated header length".into()))?;
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        if header_len > 16 << 20 {
            return Err(NetworkError::CorruptCheckpoint("implausible header size".into()));
        }
        let mut header_json = vec![0u8; header_len];
        f.read_exact(&mut header_json)
            .map_err(|_| NetworkError::CorruptCheckpoint("truncated header".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(&header_json)
            .map_err(|e| NetworkError::CorruptCheckpoint(format!("bad header: {e}")))?;
        let mut rest = Vec::new();
        f.read_to_end(&mut rest)?;
        let expected: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        if rest.len() != expected * 4 {
            return Err(NetworkError::CorruptCheckpoint(format!(
                "payload holds {} bytes, header promises {}",
                rest.len(),
                expected * 4
            )));
        }
        let mut tensors = Vec::new();
        let mut off = 0usize;
        for entry in header.tensors {
            let count: usize = entry.shape.iter().product();
            let mut data = Vec::with_capacity(count);
            for i in 0..count {
                let b = &rest[off + 4 * i..off + 4 * i + 4];
                data.push(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
            }
            off += 4 * count;
            let t = ArrayD::from_shape_vec(IxDyn(&entry.shape), data)
                .map_err(|e| NetworkError::CorruptCheckpoint(e.to_string()))?;
            tensors.push((entry.name, t));
        }
        Ok(Checkpoint { profile: header.profile, epoch: header.epoch, tensors })
    }

    /// Pulls one tensor by name, checking its shape against `expected`.
    pub fn take(&mut self, name: &str, expected: &[usize]) -> Result<Tensor, NetworkError> {
        let pos = self.tensors.iter().position(|(n, _)| n == name).ok_or_else(|| {
            NetworkError::CorruptCheckpoint(format!("missing tensor {name}"))
        })?;
        let (_, t) = self.tensors.remove(pos);
        if t.shape() != expected {
            return Err(NetworkError::ShapeMismatch {
                what: name.into(),
                expected: expected.to_vec(),
                got: t.shape().to_vec(),
            });
        }
        Ok(t)
    }
}

/// Overwrites a network's tensors from checkpoint entries with the given
/// prefix. The network must already have the right architecture.
pub fn load_into<'a>(
    ckpt: &mut Checkpoint,
    named_shapes: Vec<(String, &'a mut Tensor)>,
) -> Result<(), NetworkError> {
    for (name, slot) in named_shapes {
        let t = ckpt.take(&name, slot.shape())?;
        *slot = t;
    }
    Ok(())
}

impl Generator {
    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("g.embed.w".to_string(), &mut self.embed_w),
            ("g.embed.b".to_string(), &mut self.embed_b),
            ("g.seed.w".to_string(), &mut self.seed_w),
            ("g.seed.b".to_string(), &mut self.seed_b),
        ];
        for (i, bl) in self.blocks.iter_mut().enumerate() {
            out.push((format!("g.block{i}.w"), &mut bl.w));
            out.push((format!("g.block{i}.b"), &mut bl.b));
            if let Some(bn) = &mut bl.bn {
                out.push((format!("g.block{i}.bn.gamma"), &mut bn.gamma));
                out.push((format!("g.block{i}.bn.beta"), &mut bn.beta));
                out.push((format!("g.block{i}.bn.mean"), &mut bn.run_mean));
                out.push((format!("g.block{i}.bn.var"), &mut bn.run_var));
            }
        }
        out
    }
}

macro_rules! impl_named_mut {
    ($net:ident, $prefix:literal) => {
        impl $net {
            pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
                let mut out = Vec::new();
                for (i, bl) in self.blocks.iter_mut().enumerate() {
                    out.push((format!(concat!($prefix, ".block{}.w"), i), &mut bl.w));
                    out.push((format!(concat!($prefix, ".block{}.b"), i), &mut bl.b));
                }
                out.push((concat!($prefix, ".head.w").to_string(), &mut self.head_w));
                out.push((concat!($prefix, ".head.b").to_string(), &mut self.head_b));
                out
            }
        }
    };
}

impl_named_mut!(Discriminator, "d");
impl_named_mut!(Classifier, "c");
impl_named_mut!(Encoder, "e");

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_images(n: usize, p: &Profile, r: &mut ChaCha8Rng) -> Tensor {
        ArrayD::from_shape_fn(IxDyn(&[n, p.channels, p.img_size, p.img_size]), |_| {
            r.random::<f64>() * 2.0 - 1.0
        })
    }

    fn random_noise(n: usize, p: &Profile, r: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((n, p.noise_dim), |_| r.random::<f64>() * 2.0 - 1.0)
    }

    fn labels(n: usize, p: &Profile) -> Array2<f64> {
        let idx: Vec<usize> = (0..n).map(|i| i % p.classes).collect();
        crate::data::one_hot(&idx, p.classes)
    }

    #[test]
    fn profiles_validate() {
        Profile::full(3, 10).validate().unwrap();
        Profile::desk(1, 3).validate().unwrap();
        Profile::tiny(1, 3).validate().unwrap();

        let mut bad = Profile::tiny(1, 3);
        bad.img_size = 16;
        assert!(bad.validate().is_err());
        let mut bad = Profile::tiny(1, 3);
        bad.gen_kernels = vec![12, 2];
        assert!(bad.validate().is_err());
    }

    #[test]
    fn generator_output_geometry_and_range() {
        let p = Profile::tiny(1, 3);
        let gen = Generator::init(&p, &mut rng(1));
        let mut r = rng(2);
        let z = random_noise(5, &p, &mut r);
        let y = labels(5, &p);
        let out = generator_forward(&gen, &z, &y).unwrap();
        assert_eq!(out.shape(), &[5, 1, 8, 8]);
        assert!(out.iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn generator_rejects_bad_noise_width() {
        let p = Profile::tiny(1, 3);
        let gen = Generator::init(&p, &mut rng(1));
        let z = Array2::zeros((4, p.noise_dim + 1));
        let y = labels(4, &p);
        assert!(matches!(
            generator_forward(&gen, &z, &y),
            Err(NetworkError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn discriminator_scores_are_probabilities() {
        let p = Profile::tiny(1, 3);
        let disc = Discriminator::init(&p, &mut rng(3));
        let mut r = rng(4);
        let x = random_images(6, &p, &mut r);
        let y = labels(6, &p);
        let probs = discriminator_forward(&disc, &x, &y).unwrap();
        assert_eq!(probs.len(), 6);
        assert!(probs.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn classifier_probs_normalize_and_features_match_width() {
        let p = Profile::tiny(1, 4);
        let cls = Classifier::init(&p, &mut rng(5));
        let mut r = rng(6);
        let x = random_images(7, &p, &mut r);
        let (probs, features) = classifier_forward(&cls, &x).unwrap();
        assert_eq!(probs.dim(), (7, 4));
        assert_eq!(features.dim(), (7, p.feature_dim()));
        for row in probs.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn classifier_softmax_survives_huge_logits() {
        let p = Profile::tiny(1, 3);
        let mut cls = Classifier::init(&p, &mut rng(7));
        cls.head_w.mapv_inplace(|v| v * 1e4);
        let mut r = rng(8);
        let x = random_images(3, &p, &mut r);
        let (probs, _) = classifier_forward(&cls, &x).unwrap();
        assert!(probs.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn condition_images_appends_constant_label_planes() {
        let x = ArrayD::from_elem(IxDyn(&[2, 1, 4, 4]), 0.5);
        let y = crate::data::one_hot(&[1, 0], 2);
        let out = condition_images(&x, &y);
        assert_eq!(out.shape(), &[2, 3, 4, 4]);
        assert_eq!(out[[0, 0, 2, 2]], 0.5);
        assert_eq!(out[[0, 1, 2, 2]], 0.0);
        assert_eq!(out[[0, 2, 2, 2]], 1.0);
        assert_eq!(out[[1, 1, 0, 0]], 1.0);
        assert_eq!(out[[1, 2, 0, 0]], 0.0);
    }

    /// Central finite differences (step 1e-3) against analytic gradients on
    /// a random parameter subset. A perturbation segment that crosses a
    /// leaky-relu kink makes the difference quotient itself wrong by O(step),
    /// so each pick is first screened with a half-step estimate: the two
    /// quotients agree only on smooth segments. At least half the picks must
    /// survive screening.
    fn fd_vs_analytic<Net, FwdFn>(
        net: &mut Net,
        trainable_len: usize,
        forward: FwdFn,
        picks: &[(usize, usize)],
    ) where
        FwdFn: Fn(&Net) -> (f64, Vec<Tensor>),
        Net: Clone + Bumpable,
    {
        let (_, grads) = forward(net);
        assert_eq!(grads.len(), trainable_len);
        let step = 1e-3;
        let mut checked = 0;
        for &(pi, ei) in picks {
            let fd_at = |h: f64| {
                let mut plus = net.clone();
                let mut minus = net.clone();
                bump::<Net>(&mut plus, pi, ei, h);
                bump::<Net>(&mut minus, pi, ei, -h);
                (forward(&plus).0 - forward(&minus).0) / (2.0 * h)
            };
            let fd = fd_at(step);
            let fd_half = fd_at(step / 2.0);
            let scale = fd.abs().max(fd_half.abs()).max(1e-3);
            if ((fd - fd_half) / scale).abs() > 1e-5 {
                continue; // kink inside the sampled segment
            }
            let analytic = grads[pi].as_slice().unwrap()[ei];
            let denom = analytic.abs().max(fd.abs()).max(1e-4);
            assert!(
                ((analytic - fd) / denom).abs() < 1e-3,
                "param {pi}[{ei}]: analytic {analytic} vs fd {fd}"
            );
            checked += 1;
        }
        assert!(checked * 2 >= picks.len(), "too many picks rejected as non-smooth");
    }

    trait Bumpable {
        fn slot(&mut self, pi: usize) -> &mut Tensor;
    }
    impl Bumpable for Generator {
        fn slot(&mut self, pi: usize) -> &mut Tensor {
            self.trainable_mut().into_iter().nth(pi).unwrap()
        }
    }
    impl Bumpable for Discriminator {
        fn slot(&mut self, pi: usize) -> &mut Tensor {
            self.trainable_mut().into_iter().nth(pi).unwrap()
        }
    }
    impl Bumpable for Classifier {
        fn slot(&mut self, pi: usize) -> &mut Tensor {
            self.trainable_mut().into_iter().nth(pi).unwrap()
        }
    }
    fn bump<Net: Bumpable>(net: &mut Net, pi: usize, ei: usize, delta: f64) {
        net.slot(pi).as_slice_mut().unwrap()[ei] += delta;
    }

    fn pick_elements(shapes: &[usize], per: usize, seed: u64) -> Vec<(usize, usize)> {
        let mut r = rng(seed);
        let mut picks = Vec::new();
        for _ in 0..per {
            let pi = r.random_range(0..shapes.len());
            let ei = r.random_range(0..shapes[pi]);
            picks.push((pi, ei));
        }
        picks
    }

    #[test]
    fn generator_parameter_gradients_match_finite_differences() {
        let p = Profile::tiny(1, 3);
        let mut gen = Generator::init(&p, &mut rng(10));
        let mut r = rng(11);
        let z = random_noise(3, &p, &mut r);
        let y = labels(3, &p);
        let w = ArrayD::from_shape_fn(IxDyn(&[3, 1, 8, 8]), |_| r.random::<f64>() - 0.5);

        let forward = |g: &Generator| {
            let mut graph = Graph::new();
            let bound = g.bind(&mut graph);
            let zn = graph.input(z.clone().into_dyn());
            let yn = graph.input(y.clone().into_dyn());
            let fwd = g.forward(&mut graph, &bound, zn, yn, Mode::Train);
            let wn = graph.input(w.clone());
            let prod = graph.mul(fwd.images, wn);
            let loss = graph.sum_all(prod);
            let grads = graph
                .grad_full(loss, &bound.order)
                .into_iter()
                .map(|id| graph.value(id).clone())
                .collect();
            (graph.scalar(loss), grads)
        };
        let sizes: Vec<usize> = gen.trainable().iter().map(|t| t.len()).collect();
        let picks = pick_elements(&sizes, 10, 12);
        let n = sizes.len();
        fd_vs_analytic(&mut gen, n, forward, &picks);
    }

    #[test]
    fn discriminator_parameter_gradients_match_finite_differences() {
        let p = Profile::tiny(1, 3);
        let mut disc = Discriminator::init(&p, &mut rng(13));
        let mut r = rng(14);
        let x = random_images(3, &p, &mut r);
        let y = labels(3, &p);
        let xc = condition_images(&x, &y);
        let w: Vec<f64> = (0..3).map(|_| r.random::<f64>() - 0.5).collect();

        let forward = |d: &Discriminator| {
            let mut graph = Graph::new();
            let bound = d.bind(&mut graph);
            let xn = graph.input(xc.clone());
            let prob = d.forward(&mut graph, &bound, xn);
            let wn = graph.input(ArrayD::from_shape_vec(IxDyn(&[3]), w.clone()).unwrap());
            let prod = graph.mul(prob, wn);
            let loss = graph.sum_all(prod);
            let grads = graph
                .grad_full(loss, &bound.order)
                .into_iter()
                .map(|id| graph.value(id).clone())
                .collect();
            (graph.scalar(loss), grads)
        };
        let sizes: Vec<usize> = disc.trainable().iter().map(|t| t.len()).collect();
        let picks = pick_elements(&sizes, 10, 15);
        let n = sizes.len();
        fd_vs_analytic(&mut disc, n, forward, &picks);
    }

    #[test]
    fn classifier_parameter_gradients_match_finite_differences() {
        let p = Profile::tiny(1, 3);
        let mut cls = Classifier::init(&p, &mut rng(16));
        let mut r = rng(17);
        let x = random_images(3, &p, &mut r);
        let w = Array2::from_shape_fn((3, 3), |_| r.random::<f64>() - 0.5);

        let forward = |c: &Classifier| {
            let mut graph = Graph::new();
            let bound = c.bind(&mut graph);
            let xn = graph.input(x.clone());
            let fwd = c.forward(&mut graph, &bound, xn);
            let wn = graph.input(w.clone().into_dyn());
            let prod = graph.mul(fwd.probs, wn);
            let loss = graph.sum_all(prod);
            let grads = graph
                .grad_full(loss, &bound.order)
                .into_iter()
                .map(|id| graph.value(id).clone())
                .collect();
            (graph.scalar(loss), grads)
        };
        let sizes: Vec<usize> = cls.trainable().iter().map(|t| t.len()).collect();
        let picks = pick_elements(&sizes, 10, 18);
        let n = sizes.len();
        fd_vs_analytic(&mut cls, n, forward, &picks);
    }

    #[test]
    fn decoder_copy_reproduces_outputs_bitwise() {
        let p = Profile::tiny(1, 3);
        let ae = Autoencoder::init(&p, &mut rng(20));
        let gen = init_generator_from_decoder(&ae);
        let mut r = rng(21);
        for _ in 0..10 {
            let z = random_noise(2, &p, &mut r);
            let y = labels(2, &p);
            let from_gen = generator_forward(&gen, &z, &y).unwrap();
            let from_dec = generator_forward(&ae.decoder, &z, &y).unwrap();
            assert!(
                from_gen.iter().zip(from_dec.iter()).all(|(a, b)| a.to_bits() == b.to_bits()),
                "outputs differ bitwise"
            );
        }
    }

    #[test]
    fn bn_running_stats_move_toward_batch_stats() {
        let p = Profile::tiny(1, 3);
        let mut gen = Generator::init(&p, &mut rng(22));
        let mut r = rng(23);
        let z = random_noise(8, &p, &mut r);
        let y = labels(8, &p);
        let mut graph = Graph::new();
        let bound = gen.bind(&mut graph);
        let zn = graph.input(z.into_dyn());
        let yn = graph.input(y.into_dyn());
        let fwd = gen.forward(&mut graph, &bound, zn, yn, Mode::Train);
        assert_eq!(fwd.bn_batch_stats.len(), 1);
        let (batch_mean, _) = fwd.bn_batch_stats[0].clone();
        let before = gen.blocks[0].bn.as_ref().unwrap().run_mean.clone();
        gen.apply_bn_updates(&fwd.bn_batch_stats);
        let after = &gen.blocks[0].bn.as_ref().unwrap().run_mean;
        for ((b, a), m) in before.iter().zip(after.iter()).zip(batch_mean.iter()) {
            let expect = 0.9 * b + 0.1 * m;
            assert!((a - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_mode_uses_running_stats_deterministically() {
        let p = Profile::tiny(1, 3);
        let gen = Generator::init(&p, &mut rng(24));
        let mut r = rng(25);
        let z = random_noise(4, &p, &mut r);
        let y = labels(4, &p);
        let a = generator_forward(&gen, &z, &y).unwrap();
        let b = generator_forward(&gen, &z, &y).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_round_trip_preserves_structure() {
        let p = Profile::tiny(1, 3);
        let gen = Generator::init(&p, &mut rng(30));
        let disc = Discriminator::init(&p, &mut rng(31));
        let mut tensors: Vec<(String, Tensor)> = Vec::new();
        for (n, t) in gen.named_tensors() {
            tensors.push((n, t.clone()));
        }
        for (n, t) in disc.named_tensors() {
            tensors.push((n, t.clone()));
        }
        let ckpt = Checkpoint { profile: p.clone(), epoch: 42, tensors };

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        ckpt.save(&path).unwrap();
        let mut loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.epoch, 42);
        assert_eq!(loaded.profile, p);

        let mut gen2 = Generator::init(&p, &mut rng(99));
        load_into(&mut loaded, gen2.named_tensors_mut()).unwrap();
        for (a, b) in gen.trainable().iter().zip(gen2.trainable().iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() <= (*x as f32 as f64 - x).abs() + 1e-7);
                assert_eq!(*y, *y as f32 as f64, "loaded values must be f32-representable");
            }
        }
    }

    #[test]
    fn corrupt_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOTACKPT").unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(NetworkError::CorruptCheckpoint(_))
        ));

        let p = Profile::tiny(1, 3);
        let gen = Generator::init(&p, &mut rng(40));
        let tensors: Vec<(String, Tensor)> =
            gen.named_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect();
        let ckpt = Checkpoint { profile: p, epoch: 1, tensors };
        let good = dir.path().join("good.ckpt");
        ckpt.save(&good).unwrap();
        let bytes = std::fs::read(&good).unwrap();
        std::fs::write(&good, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(
            Checkpoint::load(&good),
            Err(NetworkError::CorruptCheckpoint(_))
        ));
    }

    #[test]
    fn bound_order_matches_trainable_order() {
        let p = Profile::tiny(1, 3);
        let gen = Generator::init(&p, &mut rng(50));
        let mut graph = Graph::new();
        let bound = gen.bind(&mut graph);
        let params = gen.trainable();
        assert_eq!(bound.order.len(), params.len());
        for (id, t) in bound.order.iter().zip(params.iter()) {
            assert_eq!(graph.value(*id).shape(), t.shape());
            assert_eq!(graph.value(*id), *t);
        }

        let disc = Discriminator::init(&p, &mut rng(51));
        let mut graph = Graph::new();
        let bound = disc.bind(&mut graph);
        let params = disc.trainable();
        assert_eq!(bound.order.len(), params.len());
        for (id, t) in bound.order.iter().zip(params.iter()) {
            assert_eq!(graph.value(*id), *t);
        }
    }
}
