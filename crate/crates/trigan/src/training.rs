//! End-to-end training: autoencoder pretraining, decoder-to-generator
//! transfer, and the alternating per-epoch optimization of discriminator,
//! generator, and classifier on balanced batches.
//!
//! Every epoch draws its randomness from a stream keyed by (seed, stage,
//! epoch index), so a run resumed from a checkpoint at epoch `e` consumes
//! exactly the streams the uninterrupted run would have.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use autodiff::{Adam, Graph, Tensor};
use ndarray::{ArrayD, Axis, IxDyn};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{
    assemble_balanced_batch, compute_generation_counts, one_hot, sample_actual_batch, Batch,
    DataError, ImbalanceSpec, Origin, Sample,
};
use crate::evaluation::{
    evaluate_classifier, extract_features, fid, EvalError, MetricsRecord,
};
use crate::losses::{
    classifier_loss, discriminator_loss, fake_images, generator_loss, sample_mislabels,
    ConditionedNoise, LossError,
};
use crate::networks::{
    init_generator_from_decoder, Autoencoder, Checkpoint, Classifier, Discriminator, Generator,
    Mode, NetworkError, Profile,
};
use crate::seeds::{self, tag};

/// How many times a classifier batch may be redrawn before giving up on
/// finding one whose majority count is the per-class maximum.
const MAX_BATCH_REDRAWS: usize = 100;
/// Generation and feature extraction run in slices of this many rows to
/// bound graph memory.
const GEN_CHUNK: usize = 128;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("{what} loss became non-finite at epoch {epoch}")]
    DivergedTraining { what: &'static str, epoch: usize },
    #[error("no batch with the majority class at maximum count in {attempts} draws")]
    BatchNotBalanceable { attempts: usize },
    #[error("checkpoint was written for a different architecture profile")]
    ProfileMismatch,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Which parts of the method are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationVariant {
    /// Classifier trained on raw imbalanced batches; no generation at all.
    Baseline,
    /// Conditional generation for batch balancing only: no classifier term
    /// in the generator loss, no mislabel or penalty terms.
    V1,
    /// V1 plus the classifier term in the generator loss.
    V2,
    /// Full method: V2 plus the mislabel term and the gradient penalty.
    V3,
}

impl AblationVariant {
    pub fn name(&self) -> &'static str {
        match self {
            AblationVariant::Baseline => "baseline",
            AblationVariant::V1 => "v1",
            AblationVariant::V2 => "v2",
            AblationVariant::V3 => "v3",
        }
    }

    pub fn by_name(name: &str) -> Option<AblationVariant> {
        match name {
            "baseline" => Some(AblationVariant::Baseline),
            "v1" => Some(AblationVariant::V1),
            "v2" => Some(AblationVariant::V2),
            "v3" => Some(AblationVariant::V3),
            _ => None,
        }
    }

    /// Whether the generator loss includes the classifier cross entropy.
    pub fn with_classifier_term(&self) -> bool {
        matches!(self, AblationVariant::V2 | AblationVariant::V3)
    }

    /// Whether the discriminator loss includes the mislabel term and the
    /// gradient penalty.
    pub fn with_mislabel_and_gp(&self) -> bool {
        matches!(self, AblationVariant::V3)
    }

    /// Whether generator and discriminator train at all.
    pub fn uses_gan(&self) -> bool {
        !matches!(self, AblationVariant::Baseline)
    }
}

impl std::fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Everything a run needs besides the data itself.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub profile: Profile,
    pub variant: AblationVariant,
    pub seed: u64,
    /// Pretraining epochs for the autoencoder.
    pub p_epochs: usize,
    /// Alternating-optimization epochs.
    pub a_epochs: usize,
    pub batch_size: usize,
    /// Gradient-penalty weight.
    pub lambda: f64,
    pub learning_rate: f64,
    pub momentum1: f64,
    pub momentum2: f64,
    /// Discriminator updates per generator update.
    pub d_steps_per_g_step: usize,
    /// Alternating iterations per epoch; `None` means one full pass,
    /// ceil(train len / batch size).
    pub iterations_per_epoch: Option<usize>,
    /// Evaluate on the test set (and checkpoint) every this many epochs.
    pub eval_every: usize,
    /// Features per side and class for the distribution distance.
    pub fid_samples: usize,
    /// When set, checkpoints and CSV logs are written here.
    pub output_dir: Option<PathBuf>,
    /// Overrides the variant name in the metrics CSV; sampling-method runs
    /// train the classifier as a baseline but report under their own label.
    pub metrics_label: Option<String>,
}

impl TrainConfig {
    /// Published defaults; batch size and epoch counts stay configurable.
    pub fn new(profile: Profile, variant: AblationVariant, seed: u64) -> Self {
        TrainConfig {
            profile,
            variant,
            seed,
            p_epochs: 300,
            a_epochs: 300,
            batch_size: 100,
            lambda: 10.0,
            learning_rate: 2e-4,
            momentum1: 0.5,
            momentum2: 0.9,
            d_steps_per_g_step: 10,
            iterations_per_epoch: None,
            eval_every: 10,
            fid_samples: 1500,
            output_dir: None,
            metrics_label: None,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.profile.validate().map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be positive".into()));
        }
        if self.d_steps_per_g_step == 0 {
            return Err(TrainError::InvalidConfig("d_steps_per_g_step must be positive".into()));
        }
        if self.eval_every == 0 {
            return Err(TrainError::InvalidConfig("eval_every must be positive".into()));
        }
        if self.iterations_per_epoch == Some(0) {
            return Err(TrainError::InvalidConfig("iterations_per_epoch must be positive".into()));
        }
        if self.fid_samples < 2 {
            return Err(TrainError::InvalidConfig("fid_samples must be at least 2".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(TrainError::InvalidConfig("lambda must be non-negative".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::InvalidConfig(format!(
                "learning_rate out of range: {}",
                self.learning_rate
            )));
        }
        for (name, v) in [("momentum1", self.momentum1), ("momentum2", self.momentum2)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(TrainError::InvalidConfig(format!("{name} out of range: {v}")));
            }
        }
        Ok(())
    }

    fn iterations(&self, train_len: usize) -> usize {
        let m = self.batch_size.min(train_len).max(1);
        self.iterations_per_epoch.unwrap_or(train_len.div_ceil(m))
    }
}

/// One epoch's scalar record. Losses are means over that epoch's updates;
/// the macro metrics are present only on evaluation epochs. Baseline runs
/// log zeros for the generator and discriminator columns.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_d: f64,
    pub loss_g: f64,
    pub loss_c: f64,
    pub grad_norm_g: f64,
    pub macro_precision: Option<f64>,
    pub macro_recall: Option<f64>,
    pub macro_f: Option<f64>,
}

/// The three players, their optimizer states, and the run log.
pub struct TrainState {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub classifier: Classifier,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub opt_c: Adam,
    /// Completed alternating epochs.
    pub epoch: usize,
    pub log: Vec<EpochLog>,
    pub d_updates: u64,
    pub g_updates: u64,
    pub c_updates: u64,
}

impl TrainState {
    /// Fresh parameters from the config's init streams. For variants that
    /// pretrain, the generator is replaced by the decoder copy afterwards.
    pub fn init(cfg: &TrainConfig) -> TrainState {
        let p = &cfg.profile;
        let adam =
            || Adam::new(cfg.learning_rate, cfg.momentum1, cfg.momentum2, 1e-8);
        TrainState {
            generator: Generator::init(p, &mut seeds::stream(cfg.seed, tag::INIT, 0)),
            discriminator: Discriminator::init(p, &mut seeds::stream(cfg.seed, tag::INIT, 1)),
            classifier: Classifier::init(p, &mut seeds::stream(cfg.seed, tag::INIT, 2)),
            opt_g: adam(),
            opt_d: adam(),
            opt_c: adam(),
            epoch: 0,
            log: Vec::new(),
            d_updates: 0,
            g_updates: 0,
            c_updates: 0,
        }
    }
}

// ---- pretraining ------------------------------------------------------------

/// Trains encoder and decoder to reconstruct training images (pixel MSE),
/// conditioning the decoder on the true label. Returns the autoencoder so
/// the decoder can seed the generator. With `p_epochs = 0` the freshly
/// initialized autoencoder is returned untouched. The last tenth of `train`
/// is held out and its reconstruction error logged per epoch.
pub fn pretrain_autoencoder(
    train: &[Sample],
    cfg: &TrainConfig,
) -> Result<Autoencoder, TrainError> {
    assert!(!train.is_empty(), "pretraining needs data");
    let p = &cfg.profile;
    let mut ae = Autoencoder::init(p, &mut seeds::stream(cfg.seed, tag::PRETRAIN, 0));
    if cfg.p_epochs == 0 {
        return Ok(ae);
    }
    let holdout = train.len() / 10;
    let fit = &train[..train.len() - holdout];
    let held = &train[train.len() - holdout..];
    let m = cfg.batch_size.min(fit.len()).max(1);
    let mut opt = Adam::new(cfg.learning_rate, cfg.momentum1, cfg.momentum2, 1e-8);

    for e in 0..cfg.p_epochs {
        let mut rng = seeds::stream(cfg.seed, tag::PRETRAIN, 1 + e as u64);
        let iterations = fit.len().div_ceil(m);
        let mut epoch_mse = 0.0;
        for _ in 0..iterations {
            let batch = sample_actual_batch(fit, m, &mut rng)?;
            let y = one_hot(&batch.labels, p.classes);
            let mut graph = Graph::new();
            let ebound = ae.encoder.bind(&mut graph);
            let gbound = ae.decoder.bind(&mut graph);
            let x = graph.input(batch.images.clone());
            let latent = ae.encoder.forward(&mut graph, &ebound, x);
            let yn = graph.input(y.into_dyn());
            let fwd = ae.decoder.forward(&mut graph, &gbound, latent, yn, Mode::Train);
            let diff = graph.sub(fwd.images, x);
            let sq = graph.mul(diff, diff);
            let mse = graph.mean_all(sq);

            let mut order = ebound.order.clone();
            order.extend_from_slice(&gbound.order);
            let gids = graph.grad_full(mse, &order);
            let grads: Vec<&Tensor> = gids.iter().map(|&id| graph.value(id)).collect();
            let mut params = ae.encoder.trainable_mut();
            params.extend(ae.decoder.trainable_mut());
            opt.step(&mut params, &grads);
            ae.decoder.apply_bn_updates(&fwd.bn_batch_stats);
            epoch_mse += graph.scalar(mse);
        }
        epoch_mse /= iterations as f64;
        if !epoch_mse.is_finite() {
            return Err(TrainError::DivergedTraining { what: "reconstruction", epoch: e });
        }
        if held.is_empty() {
            log::debug!("pretraining epoch {e}: fit mse {epoch_mse:.6}");
        } else {
            let held_mse = reconstruction_mse(&ae, held)?;
            log::debug!(
                "pretraining epoch {e}: fit mse {epoch_mse:.6}, holdout mse {held_mse:.6}"
            );
        }
    }
    Ok(ae)
}

/// Eval-mode reconstruction error of the autoencoder on `samples`.
pub fn reconstruction_mse(ae: &Autoencoder, samples: &[Sample]) -> Result<f64, TrainError> {
    assert!(!samples.is_empty());
    let p = &ae.decoder.profile;
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in samples.chunks(GEN_CHUNK) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let batch = Batch::from_samples(&refs, Origin::Actual);
        let y = one_hot(&batch.labels, p.classes);
        let mut graph = Graph::new();
        let ebound = ae.encoder.bind(&mut graph);
        let gbound = ae.decoder.bind(&mut graph);
        let x = graph.input(batch.images.clone());
        let latent = ae.encoder.forward(&mut graph, &ebound, x);
        let yn = graph.input(y.into_dyn());
        let fwd = ae.decoder.forward(&mut graph, &gbound, latent, yn, Mode::Eval);
        let diff = graph.sub(fwd.images, x);
        let sq = graph.mul(diff, diff);
        let sum = graph.sum_all(sq);
        total += graph.scalar(sum);
        count += batch.images.len();
    }
    Ok(total / count as f64)
}

// ---- single-player updates --------------------------------------------------

fn d_update(
    state: &mut TrainState,
    train: &[Sample],
    cfg: &TrainConfig,
    m: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64, TrainError> {
    let k = cfg.profile.classes;
    let batch = sample_actual_batch(train, m, rng)?;
    let noise = ConditionedNoise::sample(m, cfg.profile.noise_dim, k, rng);
    let mis = sample_mislabels(&batch.labels, k, rng)?;
    let mut graph = Graph::new();
    let bound = state.discriminator.bind(&mut graph);
    let out = discriminator_loss(
        &mut graph,
        &state.discriminator,
        &bound,
        &state.generator,
        &batch.images,
        &batch.labels,
        &noise,
        &mis,
        cfg.lambda,
        cfg.variant.with_mislabel_and_gp(),
        rng,
    )
    .map_err(|e| diverged(e, "discriminator", state.epoch))?;
    let value = graph.scalar(out.total);
    let gids = graph.grad_full(out.total, &bound.order);
    let grads: Vec<&Tensor> = gids.iter().map(|&id| graph.value(id)).collect();
    let mut params = state.discriminator.trainable_mut();
    state.opt_d.step(&mut params, &grads);
    state.d_updates += 1;
    Ok(value)
}

/// Returns (loss value, gradient norm over all generator parameters).
fn g_update(
    state: &mut TrainState,
    cfg: &TrainConfig,
    m: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64), TrainError> {
    let noise = ConditionedNoise::sample(m, cfg.profile.noise_dim, cfg.profile.classes, rng);
    let mut graph = Graph::new();
    let bound = state.generator.bind(&mut graph);
    let out = generator_loss(
        &mut graph,
        &state.generator,
        &bound,
        &state.discriminator,
        &state.classifier,
        &noise,
        cfg.variant.with_classifier_term(),
    )
    .map_err(|e| diverged(e, "generator", state.epoch))?;
    let value = graph.scalar(out.total);
    let gids = graph.grad_full(out.total, &bound.order);
    let grads: Vec<&Tensor> = gids.iter().map(|&id| graph.value(id)).collect();
    let norm = grads
        .iter()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    let mut params = state.generator.trainable_mut();
    state.opt_g.step(&mut params, &grads);
    state.generator.apply_bn_updates(&out.bn_stats);
    state.g_updates += 1;
    Ok((value, norm))
}

fn c_update(
    state: &mut TrainState,
    train: &[Sample],
    spec: &ImbalanceSpec,
    cfg: &TrainConfig,
    m: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64, TrainError> {
    let k = cfg.profile.classes;
    let (actual, generated) = if cfg.variant.uses_gan() {
        let (actual, generated, _) =
            balanced_classifier_batch(train, spec, m, &state.generator, rng)?;
        (actual, generated)
    } else {
        (sample_actual_batch(train, m, rng)?, None)
    };
    let y_a = one_hot(&actual.labels, k);
    let gen_pair = generated
        .as_ref()
        .map(|b| (&b.images, one_hot(&b.labels, k)));
    let mut graph = Graph::new();
    let bound = state.classifier.bind(&mut graph);
    let out = classifier_loss(
        &mut graph,
        &state.classifier,
        &bound,
        Some((&actual.images, &y_a)),
        gen_pair.as_ref().map(|(x, y)| (*x, y)),
    )
    .map_err(|e| diverged(e, "classifier", state.epoch))?;
    let value = graph.scalar(out.total);
    let gids = graph.grad_full(out.total, &bound.order);
    let grads: Vec<&Tensor> = gids.iter().map(|&id| graph.value(id)).collect();
    let mut params = state.classifier.trainable_mut();
    state.opt_c.step(&mut params, &grads);
    state.c_updates += 1;
    Ok(value)
}

fn diverged(e: LossError, what: &'static str, epoch: usize) -> TrainError {
    match e {
        LossError::NonFiniteLoss(_) | LossError::NonFiniteGradient => {
            TrainError::DivergedTraining { what, epoch }
        }
        other => TrainError::Loss(other),
    }
}

/// Draws an actual batch whose majority-class count is the per-class
/// maximum (redrawing up to a cap), generates enough minority images to
/// balance it, and verifies the union is exactly balanced. Returns the
/// actual batch, the generated batch (when anything was generated), and the
/// verified union.
pub fn balanced_classifier_batch(
    train: &[Sample],
    spec: &ImbalanceSpec,
    m: usize,
    gen: &Generator,
    rng: &mut ChaCha8Rng,
) -> Result<(Batch, Option<Batch>, Batch), TrainError> {
    let k = gen.profile.classes;
    let mut batch = None;
    for _ in 0..MAX_BATCH_REDRAWS {
        let candidate = sample_actual_batch(train, m, rng)?;
        let counts = candidate.class_counts();
        let max = counts.values().copied().max().unwrap_or(0);
        if counts.get(&spec.majority_class).copied().unwrap_or(0) == max {
            batch = Some(candidate);
            break;
        }
    }
    let actual = batch.ok_or(TrainError::BatchNotBalanceable { attempts: MAX_BATCH_REDRAWS })?;

    let counts = compute_generation_counts(&actual.labels, k, &spec.minority_classes);
    let gen_labels: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(class, &n)| std::iter::repeat_n(class, n))
        .collect();
    let generated = if gen_labels.is_empty() {
        None
    } else {
        let noise = ConditionedNoise::for_labels(gen_labels, gen.profile.noise_dim, k, rng);
        let images = fake_images(gen, &noise, Mode::Train);
        Some(Batch {
            images,
            labels: noise.labels,
            origin: vec![Origin::Generated; noise.y.nrows()],
        })
    };
    let empty = Batch::empty(
        gen.profile.channels,
        gen.profile.img_size,
        gen.profile.img_size,
    );
    let union = assemble_balanced_batch(&actual, generated.as_ref().unwrap_or(&empty))?;
    Ok((actual, generated, union))
}

// ---- the epoch loop ----------------------------------------------------------

/// One alternating epoch: per iteration, `d_steps_per_g_step` discriminator
/// updates, one generator update, one classifier update on a balanced
/// batch. The baseline variant skips the first two and feeds the classifier
/// the raw imbalanced batch. Appends one log entry.
pub fn train_step(
    state: &mut TrainState,
    train: &[Sample],
    spec: &ImbalanceSpec,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(), TrainError> {
    let m = cfg.batch_size.min(train.len()).max(1);
    let iterations = cfg.iterations(train.len());
    let mut sum_d = 0.0;
    let mut sum_g = 0.0;
    let mut sum_c = 0.0;
    let mut sum_norm = 0.0;
    for _ in 0..iterations {
        if cfg.variant.uses_gan() {
            let mut iter_d = 0.0;
            for _ in 0..cfg.d_steps_per_g_step {
                iter_d += d_update(state, train, cfg, m, rng)?;
            }
            sum_d += iter_d / cfg.d_steps_per_g_step as f64;
            let (lg, norm) = g_update(state, cfg, m, rng)?;
            sum_g += lg;
            sum_norm += norm;
        }
        sum_c += c_update(state, train, spec, cfg, m, rng)?;
    }
    state.epoch += 1;
    let n = iterations as f64;
    state.log.push(EpochLog {
        epoch: state.epoch,
        loss_d: sum_d / n,
        loss_g: sum_g / n,
        loss_c: sum_c / n,
        grad_norm_g: sum_norm / n,
        macro_precision: None,
        macro_recall: None,
        macro_f: None,
    });
    Ok(())
}

// ---- checkpointing -----------------------------------------------------------

fn push_adam(tensors: &mut Vec<(String, Tensor)>, prefix: &str, opt: &Adam) {
    let s = opt.snapshot();
    tensors.push((
        format!("adam.{prefix}.t"),
        ArrayD::from_elem(IxDyn(&[1]), s.t as f64),
    ));
    for (i, (m, v)) in s.m.iter().zip(&s.v).enumerate() {
        tensors.push((format!("adam.{prefix}.m.{i:03}"), m.clone()));
        tensors.push((format!("adam.{prefix}.v.{i:03}"), v.clone()));
    }
}

fn take_adam(
    ckpt: &mut Checkpoint,
    prefix: &str,
    opt: &mut Adam,
    shapes: &[Vec<usize>],
) -> Result<(), TrainError> {
    let t = ckpt.take(&format!("adam.{prefix}.t"), &[1])?[[0]] as u64;
    if t == 0 {
        return Ok(());
    }
    let mut m = Vec::with_capacity(shapes.len());
    let mut v = Vec::with_capacity(shapes.len());
    for (i, shape) in shapes.iter().enumerate() {
        m.push(ckpt.take(&format!("adam.{prefix}.m.{i:03}"), shape)?);
        v.push(ckpt.take(&format!("adam.{prefix}.v.{i:03}"), shape)?);
    }
    opt.restore(autodiff::AdamState { t, m, v });
    Ok(())
}

/// Writes all three players plus optimizer moments, atomically.
pub fn save_checkpoint(state: &TrainState, profile: &Profile, path: &Path) -> Result<(), TrainError> {
    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    for (name, t) in state.generator.named_tensors() {
        tensors.push((name, t.clone()));
    }
    for (name, t) in state.discriminator.named_tensors() {
        tensors.push((name, t.clone()));
    }
    for (name, t) in state.classifier.named_tensors() {
        tensors.push((name, t.clone()));
    }
    push_adam(&mut tensors, "g", &state.opt_g);
    push_adam(&mut tensors, "d", &state.opt_d);
    push_adam(&mut tensors, "c", &state.opt_c);
    let ckpt = Checkpoint { profile: profile.clone(), epoch: state.epoch as u64, tensors };
    ckpt.save(path)?;
    Ok(())
}

/// Rebuilds a state from a checkpoint. The in-memory log starts empty; the
/// epoch counter continues from the checkpoint, so subsequent epochs use
/// the same random streams an uninterrupted run would.
pub fn load_checkpoint_state(cfg: &TrainConfig, path: &Path) -> Result<TrainState, TrainError> {
    let mut ckpt = Checkpoint::load(path)?;
    if ckpt.profile != cfg.profile {
        return Err(TrainError::ProfileMismatch);
    }
    let mut state = TrainState::init(cfg);
    crate::networks::load_into(&mut ckpt, state.generator.named_tensors_mut())?;
    crate::networks::load_into(&mut ckpt, state.discriminator.named_tensors_mut())?;
    crate::networks::load_into(&mut ckpt, state.classifier.named_tensors_mut())?;
    let shapes = |ts: Vec<&Tensor>| -> Vec<Vec<usize>> {
        ts.iter().map(|t| t.shape().to_vec()).collect()
    };
    let g_shapes = shapes(state.generator.trainable());
    let d_shapes = shapes(state.discriminator.trainable());
    let c_shapes = shapes(state.classifier.trainable());
    take_adam(&mut ckpt, "g", &mut state.opt_g, &g_shapes)?;
    take_adam(&mut ckpt, "d", &mut state.opt_d, &d_shapes)?;
    take_adam(&mut ckpt, "c", &mut state.opt_c, &c_shapes)?;
    state.epoch = ckpt.epoch as usize;
    Ok(state)
}

/// Loads only the generator from a checkpoint, for sampling images outside
/// of training.
pub fn load_generator(path: &Path) -> Result<Generator, TrainError> {
    let mut ckpt = Checkpoint::load(path)?;
    let mut generator = Generator::init(&ckpt.profile, &mut seeds::stream(0, tag::INIT, 0));
    crate::networks::load_into(&mut ckpt, generator.named_tensors_mut())?;
    Ok(generator)
}

// ---- full runs ----------------------------------------------------------------

/// Initialization plus pretraining: for generating variants the autoencoder
/// is trained and its decoder copied into the generator.
pub fn init_state(train: &[Sample], cfg: &TrainConfig) -> Result<TrainState, TrainError> {
    let mut state = TrainState::init(cfg);
    if cfg.variant.uses_gan() && cfg.p_epochs > 0 {
        let ae = pretrain_autoencoder(train, cfg)?;
        state.generator = init_generator_from_decoder(&ae);
    }
    Ok(state)
}

/// Runs epochs `state.epoch .. a_epochs`, evaluating on the cadence and at
/// the end, then computes final metrics (with per-class distribution
/// distances for generating variants) and writes logs and checkpoints when
/// an output directory is configured.
pub fn run(
    mut state: TrainState,
    train: &[Sample],
    test: &[Sample],
    spec: &ImbalanceSpec,
    cfg: &TrainConfig,
) -> Result<(TrainState, MetricsRecord), TrainError> {
    let resumed = state.epoch > 0;
    if let Some(dir) = &cfg.output_dir {
        fs::create_dir_all(dir.join("checkpoints"))?;
    }
    while state.epoch < cfg.a_epochs {
        let mut rng = seeds::stream(cfg.seed, tag::TRAIN, state.epoch as u64);
        train_step(&mut state, train, spec, cfg, &mut rng)?;
        let done = state.epoch == cfg.a_epochs;
        if state.epoch % cfg.eval_every == 0 || done {
            let metrics = evaluate_classifier(&state.classifier, test)?;
            if let Some(entry) = state.log.last_mut() {
                entry.macro_precision = Some(metrics.macro_precision);
                entry.macro_recall = Some(metrics.macro_recall);
                entry.macro_f = Some(metrics.macro_f);
            }
            log::info!(
                "epoch {}: macro F {:.4} (variant {})",
                state.epoch,
                metrics.macro_f,
                cfg.variant
            );
            if let Some(dir) = &cfg.output_dir {
                let path = dir.join("checkpoints").join(format!("epoch{:05}.ckpt", state.epoch));
                save_checkpoint(&state, &cfg.profile, &path)?;
            }
        }
    }
    let mut final_metrics = evaluate_classifier(&state.classifier, test)?;
    if cfg.variant.uses_gan() {
        attach_fid(&mut final_metrics, &state, train, test, cfg)?;
    }
    if let Some(dir) = &cfg.output_dir {
        write_training_log(&dir.join("training_log.csv"), &state.log, resumed)?;
        write_metrics_csv(&dir.join("metrics.csv"), &final_metrics, spec, cfg)?;
        save_checkpoint(&state, &cfg.profile, &dir.join("checkpoints").join("final.ckpt"))?;
    }
    Ok((state, final_metrics))
}

/// Pretraining, the epoch loop, and final evaluation in one call.
pub fn train(
    train_samples: &[Sample],
    test_samples: &[Sample],
    spec: &ImbalanceSpec,
    cfg: &TrainConfig,
) -> Result<(TrainState, MetricsRecord), TrainError> {
    cfg.validate()?;
    spec.validate()?;
    let state = init_state(train_samples, cfg)?;
    run(state, train_samples, test_samples, spec, cfg)
}

// ---- evaluation helpers --------------------------------------------------------

/// Generates `count` images of `class` in eval mode, in bounded slices.
pub fn generate_class_images(
    gen: &Generator,
    class: usize,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Tensor {
    let p = &gen.profile;
    let mut chunks: Vec<Tensor> = Vec::new();
    let mut left = count;
    while left > 0 {
        let n = left.min(GEN_CHUNK);
        let noise = ConditionedNoise::for_labels(vec![class; n], p.noise_dim, p.classes, rng);
        chunks.push(fake_images(gen, &noise, Mode::Eval));
        left -= n;
    }
    let views: Vec<_> = chunks.iter().map(|c| c.view()).collect();
    ndarray::concatenate(Axis(0), &views).expect("chunks share geometry")
}

/// Optimizer steps for the feature probe behind the distribution distance.
const PROBE_STEPS: usize = 150;
const PROBE_BATCH: usize = 30;
const PROBE_LR: f64 = 1e-3;

/// Trains the feature extractor used by the distribution distance on a
/// class-balanced subset of the real training samples. The probe depends
/// only on the data, the profile, and the seed, never on the ablation
/// variant, so distances from runs sharing a seed are measured in one
/// feature space and can be compared across variants.
fn fid_probe_classifier(train: &[Sample], cfg: &TrainConfig) -> Result<Classifier, TrainError> {
    use rand::seq::SliceRandom;
    let p = &cfg.profile;
    let mut by_class: std::collections::BTreeMap<usize, Vec<&Sample>> =
        std::collections::BTreeMap::new();
    for s in train {
        by_class.entry(s.label).or_default().push(s);
    }
    let cap = by_class.values().map(|v| v.len()).min().unwrap_or(0);
    let mut subset: Vec<Sample> = Vec::new();
    for (class, mut members) in by_class {
        members.shuffle(&mut seeds::stream(cfg.seed, tag::PROBE, 1001 + class as u64));
        subset.extend(members.into_iter().take(cap).cloned());
    }
    let mut cls = Classifier::init(p, &mut seeds::stream(cfg.seed, tag::PROBE, 1000));
    let mut opt = Adam::new(PROBE_LR, 0.9, 0.999, 1e-8);
    let m = PROBE_BATCH.min(subset.len()).max(1);
    let mut rng = seeds::stream(cfg.seed, tag::PROBE, 1100);
    for _ in 0..PROBE_STEPS {
        let batch = sample_actual_batch(&subset, m, &mut rng)?;
        let y = one_hot(&batch.labels, p.classes);
        let mut graph = Graph::new();
        let bound = cls.bind(&mut graph);
        let out =
            classifier_loss(&mut graph, &cls, &bound, Some((&batch.images, &y)), None)
                .map_err(|e| diverged(e, "distance probe", 0))?;
        let gids = graph.grad_full(out.total, &bound.order);
        let grads: Vec<&Tensor> = gids.iter().map(|&id| graph.value(id)).collect();
        let mut params = cls.trainable_mut();
        opt.step(&mut params, &grads);
    }
    Ok(cls)
}

/// Computes the per-class distance between real-image features and
/// generated-image features and stores it in the metrics record. Features
/// come from a probe classifier trained on real data only (see
/// [`fid_probe_classifier`]), not from the run's own classifier, which
/// differs across variants. The real side pools train and test samples of
/// the class, capped at `cfg.fid_samples`; the generated side is exactly
/// `cfg.fid_samples` fresh draws.
fn attach_fid(
    metrics: &mut MetricsRecord,
    state: &TrainState,
    train: &[Sample],
    test: &[Sample],
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    let p = &cfg.profile;
    let probe = fid_probe_classifier(train, cfg)?;
    for class in 0..p.classes {
        let real: Vec<&Sample> = train
            .iter()
            .chain(test.iter())
            .filter(|s| s.label == class)
            .take(cfg.fid_samples)
            .collect();
        if real.len() < cfg.fid_samples {
            log::warn!(
                "class {class}: only {} real samples for the distribution distance (wanted {})",
                real.len(),
                cfg.fid_samples
            );
        }
        if real.len() < 2 {
            log::warn!("class {class}: too few real samples, skipping distance");
            continue;
        }
        let real_batch = Batch::from_samples(&real, Origin::Actual);
        let real_features = extract_features(&probe, &real_batch.images)?;
        let mut rng = seeds::stream(cfg.seed, tag::EVAL, class as u64);
        let gen_images =
            generate_class_images(&state.generator, class, cfg.fid_samples, &mut rng);
        let gen_features = extract_features(&probe, &gen_images)?;
        let d = fid(&real_features, &gen_features)?;
        if let Some(entry) = metrics.per_class.iter_mut().find(|c| c.class == class) {
            entry.fid = Some(d);
        }
    }
    Ok(())
}

// ---- CSV emission ---------------------------------------------------------------

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Appends (or creates with a header) one row per logged epoch. A resumed
/// run appends only its own epochs, continuing the existing file.
fn write_training_log(path: &Path, log: &[EpochLog], append: bool) -> Result<(), std::io::Error> {
    let fresh = !append || !path.exists();
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(!fresh)
        .write(true)
        .truncate(fresh)
        .open(path)?;
    if fresh {
        writeln!(f, "epoch,loss_d,loss_g,loss_c,grad_norm_g,macro_precision,macro_recall,macro_f")?;
    }
    for e in log {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{}",
            e.epoch,
            e.loss_d,
            e.loss_g,
            e.loss_c,
            e.grad_norm_g,
            fmt_opt(e.macro_precision),
            fmt_opt(e.macro_recall),
            fmt_opt(e.macro_f),
        )?;
    }
    f.sync_all()
}

/// Final per-class metrics for one run, one row per class.
pub fn write_metrics_csv(
    path: &Path,
    metrics: &MetricsRecord,
    spec: &ImbalanceSpec,
    cfg: &TrainConfig,
) -> Result<(), std::io::Error> {
    let mut f = fs::File::create(path)?;
    let label = cfg.metrics_label.clone().unwrap_or_else(|| cfg.variant.to_string());
    writeln!(f, "variant,seed,balanced_ratio,class,precision,recall,f_score,fid")?;
    for c in &metrics.per_class {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{}",
            label,
            cfg.seed,
            spec.balanced_ratio,
            c.class,
            c.precision,
            c.recall,
            c.f_score,
            fmt_opt(c.fid),
        )?;
    }
    f.sync_all()
}
