//! The three training objectives and their building blocks: wrong-label
//! assignment for the discriminator's mislabel term, the interpolated
//! gradient penalty, and the discriminator / generator / classifier losses.
//!
//! All losses are built on a [`Graph`] and returned as node ids so callers
//! can both read the value and request parameter gradients. Generated images
//! enter the discriminator and classifier losses as constants; gradients
//! reach the generator only through [`generator_loss`].

use autodiff::{Graph, NodeId, Tensor};
use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::data::one_hot;
use crate::networks::{condition_images, BoundConvNet, Classifier, Discriminator, Generator, Mode};

/// Floor applied to every logarithm argument; hitting it is logged.
pub const LOG_FLOOR: f64 = 1e-12;
/// Floor under the squared gradient norm before the square root, so a zero
/// gradient cannot produce a NaN derivative.
const NORM_FLOOR: f64 = 1e-24;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("mislabel sampling needs at least two classes")]
    DegenerateLabelSpace,
    #[error("gradient penalty saw a non-finite interpolation gradient")]
    NonFiniteGradient,
    #[error("{0} loss evaluated non-finite")]
    NonFiniteLoss(&'static str),
}

/// Noise vectors paired with the labels the generator should realize.
#[derive(Debug, Clone)]
pub struct ConditionedNoise {
    pub z: Array2<f64>,
    pub labels: Vec<usize>,
    pub y: Array2<f64>,
}

impl ConditionedNoise {
    /// `n` standard-normal noise rows with uniformly drawn labels.
    pub fn sample(n: usize, noise_dim: usize, classes: usize, rng: &mut ChaCha8Rng) -> Self {
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        Self::for_labels(labels, noise_dim, classes, rng)
    }

    /// Standard-normal noise rows for a fixed label sequence.
    pub fn for_labels(
        labels: Vec<usize>,
        noise_dim: usize,
        classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let z = Array2::from_shape_fn((labels.len(), noise_dim), |_| {
            StandardNormal.sample(rng)
        });
        let y = one_hot(&labels, classes);
        ConditionedNoise { z, labels, y }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Deliberately wrong labels for real images, used by the discriminator's
/// mislabel term.
#[derive(Debug, Clone)]
pub struct MislabelAssignment {
    pub labels: Vec<usize>,
    pub y: Array2<f64>,
}

/// Draws, per row, a label uniform over all classes except the true one.
pub fn sample_mislabels(
    labels: &[usize],
    classes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<MislabelAssignment, LossError> {
    if classes < 2 {
        return Err(LossError::DegenerateLabelSpace);
    }
    let wrong: Vec<usize> = labels
        .iter()
        .map(|&l| {
            debug_assert!(l < classes);
            // a uniform draw over the other classes, as an offset from l
            (l + 1 + rng.random_range(0..classes - 1)) % classes
        })
        .collect();
    let y = one_hot(&wrong, classes);
    Ok(MislabelAssignment { labels: wrong, y })
}

/// The per-sample interpolation coefficients behind one penalty evaluation.
#[derive(Debug, Clone)]
pub struct InterpolationDraw {
    pub alpha: Vec<f64>,
}

/// A built gradient-penalty term.
pub struct GradientPenalty {
    pub node: NodeId,
    pub draw: InterpolationDraw,
}

/// Core of the penalty, generic over the scoring function so the scorer can
/// be the discriminator in production and an analytic map in tests. `score`
/// receives the conditioned interpolate `[n, c + classes, h, w]` as a leaf
/// and must return per-row scores `[n]`. The penalty is the mean of
/// `(|grad_x score| - 1)^2` over rows, with the gradient taken with respect
/// to the full conditioned input (image and label planes together).
pub fn gradient_penalty_with<F>(
    graph: &mut Graph,
    score: F,
    x_actual: &Tensor,
    x_generated: &Tensor,
    y: &Array2<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<GradientPenalty, LossError>
where
    F: FnOnce(&mut Graph, NodeId) -> NodeId,
{
    assert_eq!(x_actual.shape(), x_generated.shape(), "interpolation pairs rows by index");
    let n = x_actual.shape()[0];
    assert_eq!(y.nrows(), n, "one label row per interpolated sample");

    let alpha: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let mut x_hat = x_generated.clone();
    for (i, &a) in alpha.iter().enumerate() {
        let mut row = x_hat.index_axis_mut(ndarray::Axis(0), i);
        let actual = x_actual.index_axis(ndarray::Axis(0), i);
        row.zip_mut_with(&actual, |g, &r| *g = a * r + (1.0 - a) * *g);
    }

    let cond = graph.input(condition_images(&x_hat, y));
    let scores = score(graph, cond);
    debug_assert_eq!(graph.value(scores).shape(), [n]);

    // summing the per-row scores gives per-row input gradients in one pass
    // because no score row depends on another row's input
    let total = graph.sum_all(scores);
    let grad = graph
        .grad(total, &[cond])
        .pop()
        .flatten()
        .expect("score must depend on its input");
    if graph.value(grad).iter().any(|v| !v.is_finite()) {
        return Err(LossError::NonFiniteGradient);
    }
    let sq = graph.mul(grad, grad);
    let per_row = graph.sum_keep(sq, &[1, 2, 3]);
    let flat = graph.reshape(per_row, &[n]);
    let safe = graph.clamp_min(flat, NORM_FLOOR);
    let norm = graph.sqrt(safe);
    let dev = graph.add_scalar(norm, -1.0);
    let dev_sq = graph.mul(dev, dev);
    let node = graph.mean_all(dev_sq);
    Ok(GradientPenalty { node, draw: InterpolationDraw { alpha } })
}

/// Production penalty: scores interpolates with the discriminator under the
/// actual labels.
pub fn gradient_penalty(
    graph: &mut Graph,
    disc: &Discriminator,
    bound: &BoundConvNet,
    x_actual: &Tensor,
    x_generated: &Tensor,
    y_actual: &Array2<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<GradientPenalty, LossError> {
    gradient_penalty_with(
        graph,
        |g, cond| disc.forward(g, bound, cond),
        x_actual,
        x_generated,
        y_actual,
        rng,
    )
}

/// Runs the generator outside the loss graph and returns plain image values.
/// Training-mode batch statistics are used but never committed here.
pub fn fake_images(gen: &Generator, noise: &ConditionedNoise, mode: Mode) -> Tensor {
    let mut g = Graph::new();
    let bound = gen.bind(&mut g);
    let z = g.input(noise.z.clone().into_dyn());
    let y = g.input(noise.y.clone().into_dyn());
    let fwd = gen.forward(&mut g, &bound, z, y, mode);
    g.value(fwd.images).clone()
}

/// `ln(max(x, floor))`, counting clamped elements into `events`.
fn ln_clamped(graph: &mut Graph, x: NodeId, events: &mut usize) -> NodeId {
    *events += graph.value(x).iter().filter(|&&v| v < LOG_FLOOR).count();
    let safe = graph.clamp_min(x, LOG_FLOOR);
    graph.ln(safe)
}

/// `-mean(ln(max(p, floor)))`.
fn neg_mean_log(graph: &mut Graph, p: NodeId, events: &mut usize) -> NodeId {
    let lp = ln_clamped(graph, p, events);
    let m = graph.mean_all(lp);
    graph.neg(m)
}

/// `-mean(ln(max(1 - p, floor)))`.
fn neg_mean_log_one_minus(graph: &mut Graph, p: NodeId, events: &mut usize) -> NodeId {
    let negp = graph.neg(p);
    let one_minus = graph.add_scalar(negp, 1.0);
    neg_mean_log(graph, one_minus, events)
}

/// Cross entropy of one-hot targets against probability rows:
/// `-mean(sum(y * ln(max(p, floor)), axis 1))`.
fn cross_entropy(graph: &mut Graph, probs: NodeId, y: &Array2<f64>, events: &mut usize) -> NodeId {
    let lp = ln_clamped(graph, probs, events);
    let yn = graph.input(y.clone().into_dyn());
    let picked = graph.mul(yn, lp);
    let per_row = graph.sum_keep(picked, &[1]);
    let m = graph.mean_all(per_row);
    graph.neg(m)
}

/// A built discriminator loss.
pub struct DiscriminatorLoss {
    pub total: NodeId,
    /// The penalty term, present when the full objective is in effect.
    pub penalty: Option<GradientPenalty>,
    /// How many log arguments hit the floor while building the loss.
    pub clamp_events: usize,
}

/// Discriminator objective: real images under true labels score high; fakes
/// under their generation labels, and real images under wrong labels, score
/// low. With `full_objective` the mislabel term and the gradient penalty
/// (weighted by `lambda`) are included; without it only the first two terms
/// remain. The generator output enters as a constant. `rng` drives the
/// penalty's interpolation coefficients.
#[allow(clippy::too_many_arguments)]
pub fn discriminator_loss(
    graph: &mut Graph,
    disc: &Discriminator,
    bound: &BoundConvNet,
    gen: &Generator,
    x_actual: &Tensor,
    labels_actual: &[usize],
    noise: &ConditionedNoise,
    mislabels: &MislabelAssignment,
    lambda: f64,
    full_objective: bool,
    rng: &mut ChaCha8Rng,
) -> Result<DiscriminatorLoss, LossError> {
    let classes = disc.profile.classes;
    assert_eq!(x_actual.shape()[0], labels_actual.len());
    assert_eq!(noise.len(), labels_actual.len(), "one fake per real sample");
    let mut events = 0usize;

    let y_actual = one_hot(labels_actual, classes);
    let x_fake = fake_images(gen, noise, Mode::Train);

    let real_in = graph.input(condition_images(x_actual, &y_actual));
    let p_real = disc.forward(graph, bound, real_in);
    let t_real = neg_mean_log(graph, p_real, &mut events);

    let fake_in = graph.input(condition_images(&x_fake, &noise.y));
    let p_fake = disc.forward(graph, bound, fake_in);
    let t_fake = neg_mean_log_one_minus(graph, p_fake, &mut events);

    let mut total = graph.add(t_real, t_fake);
    let mut penalty = None;
    if full_objective {
        assert_eq!(mislabels.labels.len(), labels_actual.len());
        let mis_in = graph.input(condition_images(x_actual, &mislabels.y));
        let p_mis = disc.forward(graph, bound, mis_in);
        let t_mis = neg_mean_log_one_minus(graph, p_mis, &mut events);
        total = graph.add(total, t_mis);

        let gp = gradient_penalty(graph, disc, bound, x_actual, &x_fake, &y_actual, rng)?;
        let weighted = graph.scale(gp.node, lambda);
        total = graph.add(total, weighted);
        penalty = Some(gp);
    }
    if events > 0 {
        log::warn!("discriminator loss clamped {events} log arguments at {LOG_FLOOR}");
    }
    if !graph.scalar(total).is_finite() {
        return Err(LossError::NonFiniteLoss("discriminator"));
    }
    Ok(DiscriminatorLoss { total, penalty, clamp_events: events })
}

/// A built generator loss.
pub struct GeneratorLoss {
    pub total: NodeId,
    /// The generated images node, differentiable back to the generator.
    pub images: NodeId,
    /// Batch statistics from the train-mode forward, to fold into running
    /// averages after the update.
    pub bn_stats: Vec<(Tensor, Tensor)>,
    pub clamp_events: usize,
}

/// Generator objective: fakes should score real under the discriminator
/// and, when `with_classifier_term` is set, be recognized as their target
/// class by the classifier. Discriminator and classifier parameters enter
/// as constants.
pub fn generator_loss(
    graph: &mut Graph,
    gen: &Generator,
    gbound: &crate::networks::BoundGenerator,
    disc: &Discriminator,
    cls: &Classifier,
    noise: &ConditionedNoise,
    with_classifier_term: bool,
) -> Result<GeneratorLoss, LossError> {
    assert!(!noise.is_empty(), "generator loss needs at least one noise row");
    let mut events = 0usize;
    let z = graph.input(noise.z.clone().into_dyn());
    let y = graph.input(noise.y.clone().into_dyn());
    let fwd = gen.forward(graph, gbound, z, y, Mode::Train);

    // label planes are constants; concatenation keeps the image part
    // differentiable
    let n = noise.len();
    let p = &gen.profile;
    let mut planes = ArrayD::zeros(IxDyn(&[n, p.classes, p.img_size, p.img_size]));
    for i in 0..n {
        for k in 0..p.classes {
            planes
                .index_axis_mut(ndarray::Axis(0), i)
                .index_axis_mut(ndarray::Axis(0), k)
                .fill(noise.y[[i, k]]);
        }
    }
    let planes_node = graph.input(planes);
    let cond = graph.concat(&[fwd.images, planes_node], 1);

    let dbound = disc.bind(graph);
    let p_fake = disc.forward(graph, &dbound, cond);
    let mut total = neg_mean_log(graph, p_fake, &mut events);

    if with_classifier_term {
        let cbound = cls.bind(graph);
        let cls_fwd = cls.forward(graph, &cbound, fwd.images);
        let ce = cross_entropy(graph, cls_fwd.probs, &noise.y, &mut events);
        total = graph.add(total, ce);
    }
    if events > 0 {
        log::warn!("generator loss clamped {events} log arguments at {LOG_FLOOR}");
    }
    if !graph.scalar(total).is_finite() {
        return Err(LossError::NonFiniteLoss("generator"));
    }
    Ok(GeneratorLoss {
        total,
        images: fwd.images,
        bn_stats: fwd.bn_batch_stats,
        clamp_events: events,
    })
}

/// A built classifier loss.
pub struct ClassifierLoss {
    pub total: NodeId,
    pub clamp_events: usize,
}

/// Classifier objective: cross entropy on the actual sub-batch plus cross
/// entropy on the generated sub-batch, each averaged over its own rows.
/// Either sub-batch may be absent (but not both); generated images are
/// constants here.
pub fn classifier_loss(
    graph: &mut Graph,
    cls: &Classifier,
    bound: &BoundConvNet,
    actual: Option<(&Tensor, &Array2<f64>)>,
    generated: Option<(&Tensor, &Array2<f64>)>,
) -> Result<ClassifierLoss, LossError> {
    assert!(
        actual.is_some() || generated.is_some(),
        "classifier loss needs at least one sub-batch"
    );
    let mut events = 0usize;
    let mut total: Option<NodeId> = None;
    for (x, y) in [actual, generated].into_iter().flatten() {
        assert_eq!(x.shape()[0], y.nrows(), "one label row per image");
        let xn = graph.input(x.clone());
        let fwd = cls.forward(graph, bound, xn);
        let ce = cross_entropy(graph, fwd.probs, y, &mut events);
        total = Some(match total {
            None => ce,
            Some(t) => graph.add(t, ce),
        });
    }
    let total = total.expect("at least one sub-batch");
    if events > 0 {
        log::warn!("classifier loss clamped {events} log arguments at {LOG_FLOOR}");
    }
    if !graph.scalar(total).is_finite() {
        return Err(LossError::NonFiniteLoss("classifier"));
    }
    Ok(ClassifierLoss { total, clamp_events: events })
}
