//! Dataset ingestion, imbalanced split construction, batch sampling, and
//! balanced-batch assembly.
//!
//! Images live in memory as `[channels, height, width]` tensors with values
//! in [-1, 1]. On disk a dataset is a directory with a `manifest.tsv` file
//! (one `relative_path<TAB>label` record per line) next to the image files;
//! train/test splits are persisted in the same format.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use autodiff::Tensor;
use ndarray::{Array2, ArrayD, Axis, IxDyn};
use rand::seq::index::sample as index_sample;
use rand::Rng;
use thiserror::Error;

/// One labeled image, values in [-1, 1], layout `[channels, height, width]`.
/// `id` is a stable identity (manifest path or synthetic tag) used for
/// leakage checks and logging.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Tensor,
    pub label: usize,
    pub id: String,
}

/// Whether a batch row came from the dataset or from the generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Actual,
    Generated,
}

/// A stack of images with per-row labels and origin flags.
#[derive(Debug, Clone)]
pub struct Batch {
    /// Shape `[n, channels, height, width]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub origin: Vec<Origin>,
}

/// Prescription for carving an imbalanced training split out of a balanced
/// dataset.
#[derive(Debug, Clone)]
pub struct ImbalanceSpec {
    pub majority_class: usize,
    pub minority_classes: Vec<usize>,
    /// Minority training count per class = round(ratio * majority_count),
    /// unless `minority_count` overrides it.
    pub balanced_ratio: f64,
    pub majority_count: usize,
    /// Explicit per-minority-class training count. Takes precedence over
    /// `balanced_ratio` when set, for reproducing setups quoted as absolute
    /// counts rather than ratios.
    pub minority_count: Option<usize>,
    pub seed: u64,
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid imbalance spec: {0}")]
    InvalidSpec(String),
    #[error("class {class} needs {need} samples but the dataset has {have}")]
    InsufficientData { class: usize, need: usize, have: usize },
    #[error("batch size {requested} exceeds the {available} available samples")]
    BatchTooLarge { requested: usize, available: usize },
    #[error("balanced assembly failed: class {class} has {count} rows, expected {expected}")]
    ImbalancedAssembly { class: usize, count: usize, expected: usize },
    #[error("manifest {path}: line {line}: {msg}")]
    BadManifest { path: PathBuf, line: usize, msg: String },
    #[error("image {path}: {msg}")]
    BadImage { path: PathBuf, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ImbalanceSpec {
    /// Effective per-minority-class training count.
    pub fn minority_count(&self) -> usize {
        match self.minority_count {
            Some(n) => n,
            None => (self.balanced_ratio * self.majority_count as f64).round() as usize,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if !(self.balanced_ratio > 0.0 && self.balanced_ratio <= 1.0) {
            return Err(DataError::InvalidSpec(format!(
                "balanced_ratio must lie in (0, 1], got {}",
                self.balanced_ratio
            )));
        }
        if self.majority_count == 0 {
            return Err(DataError::InvalidSpec("majority_count must be positive".into()));
        }
        if self.minority_classes.is_empty() {
            return Err(DataError::InvalidSpec("at least one minority class is required".into()));
        }
        if self.minority_classes.contains(&self.majority_class) {
            return Err(DataError::InvalidSpec(format!(
                "class {} cannot be both majority and minority",
                self.majority_class
            )));
        }
        let mut sorted = self.minority_classes.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.minority_classes.len() {
            return Err(DataError::InvalidSpec("minority classes must be distinct".into()));
        }
        if self.minority_count() == 0 {
            return Err(DataError::InvalidSpec(
                "effective minority count is zero; raise the ratio or the majority count".into(),
            ));
        }
        Ok(())
    }

    /// All classes that participate in the experiment, sorted.
    pub fn involved_classes(&self) -> Vec<usize> {
        let mut all = self.minority_classes.clone();
        all.push(self.majority_class);
        all.sort_unstable();
        all
    }
}

impl Batch {
    /// An empty batch with the given image geometry.
    pub fn empty(channels: usize, height: usize, width: usize) -> Self {
        Batch {
            images: ArrayD::zeros(IxDyn(&[0, channels, height, width])),
            labels: Vec::new(),
            origin: Vec::new(),
        }
    }

    pub fn from_samples(samples: &[&Sample], origin: Origin) -> Self {
        assert!(!samples.is_empty(), "from_samples needs at least one sample");
        let shape = samples[0].image.shape().to_vec();
        let mut images = ArrayD::zeros(IxDyn(&[samples.len(), shape[0], shape[1], shape[2]]));
        for (i, s) in samples.iter().enumerate() {
            images.index_axis_mut(Axis(0), i).assign(&s.image);
        }
        Batch {
            images,
            labels: samples.iter().map(|s| s.label).collect(),
            origin: vec![origin; samples.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-class row counts, keyed by label.
    pub fn class_counts(&self) -> BTreeMap<usize, usize> {
        let mut counts = BTreeMap::new();
        for &l in &self.labels {
            *counts.entry(l).or_insert(0) += 1;
        }
        counts
    }

    /// Rows whose origin matches `which`, as a new batch. Returns `None`
    /// when no row matches.
    pub fn filter_origin(&self, which: Origin) -> Option<Batch> {
        let idx: Vec<usize> =
            (0..self.len()).filter(|&i| self.origin[i] == which).collect();
        if idx.is_empty() {
            return None;
        }
        let shape = self.images.shape();
        let mut images = ArrayD::zeros(IxDyn(&[idx.len(), shape[1], shape[2], shape[3]]));
        for (dst, &src) in idx.iter().enumerate() {
            images
                .index_axis_mut(Axis(0), dst)
                .assign(&self.images.index_axis(Axis(0), src));
        }
        Some(Batch {
            images,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            origin: vec![which; idx.len()],
        })
    }
}

/// One-hot encodes labels into an `[n, classes]` matrix.
pub fn one_hot(labels: &[usize], classes: usize) -> Array2<f64> {
    let mut y = Array2::zeros((labels.len(), classes));
    for (i, &l) in labels.iter().enumerate() {
        assert!(l < classes, "label {l} out of range for {classes} classes");
        y[[i, l]] = 1.0;
    }
    y
}

/// Splits a dataset into an imbalanced train set and a test set holding
/// everything else. Only classes named in the spec participate; other
/// classes are dropped entirely. Selection within a class is a seeded
/// shuffle, so the split is deterministic in (dataset order, spec).
pub fn build_imbalanced_split(
    dataset: &[Sample],
    spec: &ImbalanceSpec,
) -> Result<(Vec<Sample>, Vec<Sample>), DataError> {
    spec.validate()?;
    let minority_count = spec.minority_count();

    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in dataset.iter().enumerate() {
        by_class.entry(s.label).or_default().push(i);
    }

    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in spec.involved_classes() {
        let need = if class == spec.majority_class { spec.majority_count } else { minority_count };
        let indices = by_class.get(&class).cloned().unwrap_or_default();
        if indices.len() < need {
            return Err(DataError::InsufficientData { class, need, have: indices.len() });
        }
        let mut rng = crate::seeds::stream(spec.seed, crate::seeds::tag::SPLIT, class as u64);
        let mut order = indices;
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        for (pos, &idx) in order.iter().enumerate() {
            if pos < need {
                train.push(dataset[idx].clone());
            } else {
                test.push(dataset[idx].clone());
            }
        }
    }
    // keep deterministic, class-major order but restore dataset order inside
    // each destination for readability of persisted manifests
    train.sort_by(|a, b| a.id.cmp(&b.id));
    test.sort_by(|a, b| a.id.cmp(&b.id));
    Ok((train, test))
}

/// Draws `m` distinct samples uniformly without replacement.
pub fn sample_actual_batch(
    train: &[Sample],
    m: usize,
    rng: &mut impl Rng,
) -> Result<Batch, DataError> {
    if m == 0 {
        return Err(DataError::BatchTooLarge { requested: 0, available: train.len() });
    }
    if m > train.len() {
        return Err(DataError::BatchTooLarge { requested: m, available: train.len() });
    }
    let picked = index_sample(rng, train.len(), m);
    let refs: Vec<&Sample> = picked.iter().map(|i| &train[i]).collect();
    Ok(Batch::from_samples(&refs, Origin::Actual))
}

/// How many samples to generate per class so every class in the batch
/// reaches the current maximum per-class count. Majority and absent classes
/// get zero only if they already sit at the maximum; classes outside
/// `minority_classes` are never topped up.
pub fn compute_generation_counts(
    labels: &[usize],
    classes: usize,
    minority_classes: &[usize],
) -> Vec<usize> {
    let mut counts = vec![0usize; classes];
    for &l in labels {
        assert!(l < classes, "label {l} out of range for {classes} classes");
        counts[l] += 1;
    }
    let max_count = counts.iter().copied().max().unwrap_or(0);
    let mut out = vec![0usize; classes];
    for &c in minority_classes {
        out[c] = max_count - counts[c];
    }
    out
}

/// Concatenates an actual batch with generated rows and verifies the result
/// is exactly balanced over the classes it contains.
pub fn assemble_balanced_batch(actual: &Batch, generated: &Batch) -> Result<Batch, DataError> {
    let images = if generated.is_empty() {
        actual.images.clone()
    } else {
        ndarray::concatenate(Axis(0), &[actual.images.view(), generated.images.view()])
            .expect("actual and generated batches must share image geometry")
    };
    let mut labels = actual.labels.clone();
    labels.extend_from_slice(&generated.labels);
    let mut origin = actual.origin.clone();
    origin.extend_from_slice(&generated.origin);
    let merged = Batch { images, labels, origin };

    let counts = merged.class_counts();
    let expected = counts.values().copied().max().unwrap_or(0);
    for (&class, &count) in &counts {
        if count != expected {
            return Err(DataError::ImbalancedAssembly { class, count, expected });
        }
    }
    Ok(merged)
}

/// Loads the full dataset under `root` (expects `root/manifest.tsv`), with
/// every image resized to `img_size` x `img_size` and normalized to [-1, 1].
pub fn load_dataset(root: &Path, img_size: usize, channels: usize) -> Result<Vec<Sample>, DataError> {
    load_manifest_file(root, &root.join("manifest.tsv"), img_size, channels)
}

/// Loads the samples listed in one split manifest. Paths in the manifest are
/// relative to the dataset `root`.
pub fn load_manifest_file(
    root: &Path,
    manifest: &Path,
    img_size: usize,
    channels: usize,
) -> Result<Vec<Sample>, DataError> {
    let text = fs::read_to_string(manifest).map_err(|e| DataError::BadManifest {
        path: manifest.to_path_buf(),
        line: 0,
        msg: e.to_string(),
    })?;
    let mut samples = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let (rel, label_str) = line.split_once('\t').ok_or_else(|| DataError::BadManifest {
            path: manifest.to_path_buf(),
            line: lineno + 1,
            msg: "expected `path<TAB>label`".into(),
        })?;
        let label: usize = label_str.trim().parse().map_err(|_| DataError::BadManifest {
            path: manifest.to_path_buf(),
            line: lineno + 1,
            msg: format!("bad label `{label_str}`"),
        })?;
        let image = load_image(&root.join(rel), img_size, channels)?;
        samples.push(Sample { image, label, id: rel.to_string() });
    }
    Ok(samples)
}

/// Writes a split manifest (`relative_path<TAB>label` per line).
pub fn write_manifest(path: &Path, samples: &[Sample]) -> Result<(), DataError> {
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    for s in samples {
        writeln!(w, "{}\t{}", s.id, s.label)?;
    }
    w.flush()?;
    Ok(())
}

/// Decodes one image file, resizes with bilinear filtering, and maps pixel
/// values to [-1, 1].
pub fn load_image(path: &Path, img_size: usize, channels: usize) -> Result<Tensor, DataError> {
    let img = image::open(path)
        .map_err(|e| DataError::BadImage { path: path.to_path_buf(), msg: e.to_string() })?;
    let img = img.resize_exact(
        img_size as u32,
        img_size as u32,
        image::imageops::FilterType::Triangle,
    );
    let mut out = ArrayD::zeros(IxDyn(&[channels, img_size, img_size]));
    match channels {
        1 => {
            let gray = img.to_luma8();
            for (x, y, p) in gray.enumerate_pixels() {
                out[[0, y as usize, x as usize]] = p.0[0] as f64 / 127.5 - 1.0;
            }
        }
        3 => {
            let rgb = img.to_rgb8();
            for (x, y, p) in rgb.enumerate_pixels() {
                for c in 0..3 {
                    out[[c, y as usize, x as usize]] = p.0[c] as f64 / 127.5 - 1.0;
                }
            }
        }
        other => {
            return Err(DataError::BadImage {
                path: path.to_path_buf(),
                msg: format!("unsupported channel count {other}"),
            })
        }
    }
    Ok(out)
}

/// Encodes a `[channels, h, w]` tensor in [-1, 1] back to an 8-bit image.
pub fn save_image(path: &Path, image: &Tensor) -> Result<(), DataError> {
    let shape = image.shape();
    assert_eq!(shape.len(), 3, "expected [channels, h, w]");
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let to_u8 = |v: f64| ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
    match c {
        1 => {
            let mut buf = image::GrayImage::new(w as u32, h as u32);
            for y in 0..h {
                for x in 0..w {
                    buf.put_pixel(x as u32, y as u32, image::Luma([to_u8(image[[0, y, x]])]));
                }
            }
            buf.save(path)
                .map_err(|e| DataError::BadImage { path: path.to_path_buf(), msg: e.to_string() })
        }
        3 => {
            let mut buf = image::RgbImage::new(w as u32, h as u32);
            for y in 0..h {
                for x in 0..w {
                    let px = image::Rgb([
                        to_u8(image[[0, y, x]]),
                        to_u8(image[[1, y, x]]),
                        to_u8(image[[2, y, x]]),
                    ]);
                    buf.put_pixel(x as u32, y as u32, px);
                }
            }
            buf.save(path)
                .map_err(|e| DataError::BadImage { path: path.to_path_buf(), msg: e.to_string() })
        }
        other => Err(DataError::BadImage {
            path: path.to_path_buf(),
            msg: format!("unsupported channel count {other}"),
        }),
    }
}

/// Human-readable split summary: per-class counts and the realized
/// minority/majority ratio.
pub fn split_summary(train: &[Sample], test: &[Sample], spec: &ImbalanceSpec) -> String {
    let count = |set: &[Sample]| {
        let mut m: BTreeMap<usize, usize> = BTreeMap::new();
        for s in set {
            *m.entry(s.label).or_insert(0) += 1;
        }
        m
    };
    let train_counts = count(train);
    let test_counts = count(test);
    let mut out = String::new();
    let _ = writeln!(out, "class\ttrain\ttest");
    for class in spec.involved_classes() {
        let _ = writeln!(
            out,
            "{class}\t{}\t{}",
            train_counts.get(&class).copied().unwrap_or(0),
            test_counts.get(&class).copied().unwrap_or(0)
        );
    }
    let majority = train_counts.get(&spec.majority_class).copied().unwrap_or(0);
    if majority > 0 {
        for &c in &spec.minority_classes {
            let mc = train_counts.get(&c).copied().unwrap_or(0);
            let _ = writeln!(out, "realized ratio class {c}: {:.4}", mc as f64 / majority as f64);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_image(fill: f64) -> Tensor {
        ArrayD::from_elem(IxDyn(&[1, 4, 4]), fill)
    }

    fn balanced_dataset(classes: usize, per_class: usize) -> Vec<Sample> {
        let mut out = Vec::new();
        for c in 0..classes {
            for i in 0..per_class {
                out.push(Sample {
                    image: tiny_image((i % 5) as f64 / 5.0),
                    label: c,
                    id: format!("c{c}/img{i:05}.png"),
                });
            }
        }
        out
    }

    fn spec(ratio: f64, majority_count: usize) -> ImbalanceSpec {
        ImbalanceSpec {
            majority_class: 0,
            minority_classes: vec![1, 2],
            balanced_ratio: ratio,
            majority_count,
            minority_count: None,
            seed: 7,
        }
    }

    fn class_counts(set: &[Sample]) -> BTreeMap<usize, usize> {
        let mut m = BTreeMap::new();
        for s in set {
            *m.entry(s.label).or_insert(0) += 1;
        }
        m
    }

    #[test]
    fn split_counts_match_ratio() {
        let data = balanced_dataset(3, 1000);
        let (train, test) = build_imbalanced_split(&data, &spec(0.10, 800)).unwrap();
        let tc = class_counts(&train);
        assert_eq!(tc[&0], 800);
        assert_eq!(tc[&1], 80);
        assert_eq!(tc[&2], 80);
        let ec = class_counts(&test);
        assert_eq!(ec[&0], 200);
        assert_eq!(ec[&1], 920);
        assert_eq!(ec[&2], 920);
    }

    #[test]
    fn ratio_one_keeps_classes_balanced() {
        let data = balanced_dataset(3, 1000);
        let (train, _) = build_imbalanced_split(&data, &spec(1.0, 800)).unwrap();
        let tc = class_counts(&train);
        assert_eq!(tc[&0], 800);
        assert_eq!(tc[&1], 800);
        assert_eq!(tc[&2], 800);
    }

    #[test]
    fn thirty_percent_of_larger_majority() {
        let data = balanced_dataset(3, 1500);
        let (train, _) = build_imbalanced_split(&data, &spec(0.30, 1000)).unwrap();
        let tc = class_counts(&train);
        assert_eq!(tc[&0], 1000);
        assert_eq!(tc[&1], 300);
        assert_eq!(tc[&2], 300);
    }

    #[test]
    fn explicit_minority_count_overrides_ratio() {
        let data = balanced_dataset(3, 1000);
        let mut s = spec(0.10, 800);
        s.minority_count = Some(123);
        let (train, _) = build_imbalanced_split(&data, &s).unwrap();
        assert_eq!(class_counts(&train)[&1], 123);
    }

    #[test]
    fn split_is_deterministic() {
        let data = balanced_dataset(3, 200);
        let s = spec(0.25, 100);
        let (t1, e1) = build_imbalanced_split(&data, &s).unwrap();
        let (t2, e2) = build_imbalanced_split(&data, &s).unwrap();
        let ids = |v: &[Sample]| v.iter().map(|s| s.id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&t1), ids(&t2));
        assert_eq!(ids(&e1), ids(&e2));
    }

    #[test]
    fn insufficient_data_is_reported() {
        let data = balanced_dataset(3, 100);
        let err = build_imbalanced_split(&data, &spec(0.10, 800)).unwrap_err();
        match err {
            DataError::InsufficientData { class: 0, need: 800, have: 100 } => {}
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn zero_minority_count_is_rejected() {
        let s = ImbalanceSpec { balanced_ratio: 0.001, ..spec(0.1, 100) };
        assert!(matches!(s.validate(), Err(DataError::InvalidSpec(_))));
    }

    #[test]
    fn minority_count_rounds_to_nearest() {
        let s = ImbalanceSpec { balanced_ratio: 0.125, ..spec(0.1, 100) };
        // 12.5 rounds half away from zero
        assert_eq!(s.minority_count(), 13);
    }

    proptest! {
        #[test]
        fn split_never_leaks_and_respects_ratio(
            per_class in 20usize..60,
            majority_count in 10usize..20,
            ratio in 0.15f64..1.0,
            seed in 0u64..1000,
        ) {
            let data = balanced_dataset(3, per_class);
            let s = ImbalanceSpec { balanced_ratio: ratio, seed, ..spec(ratio, majority_count) };
            if s.minority_count() > per_class { return Ok(()); }
            let (train, test) = build_imbalanced_split(&data, &s).unwrap();

            let train_ids: std::collections::BTreeSet<_> =
                train.iter().map(|x| x.id.clone()).collect();
            prop_assert_eq!(train_ids.len(), train.len());
            for t in &test {
                prop_assert!(!train_ids.contains(&t.id));
            }
            prop_assert_eq!(train.len() + test.len(), data.len());

            let tc = class_counts(&train);
            let mc = tc[&1];
            let realized = mc as f64 / majority_count as f64;
            prop_assert!((realized - ratio).abs() <= 1.0 / majority_count as f64 + 1e-12);
        }
    }

    #[test]
    fn batch_sampling_draws_without_replacement() {
        let data = balanced_dataset(2, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = sample_actual_batch(&data, 20, &mut rng).unwrap();
        assert_eq!(batch.len(), 20);
        // drawing the whole set must produce a permutation: counts match exactly
        let counts = batch.class_counts();
        assert_eq!(counts[&0], 10);
        assert_eq!(counts[&1], 10);
    }

    #[test]
    fn batch_sampling_is_deterministic() {
        let data = balanced_dataset(3, 30);
        let a = sample_actual_batch(&data, 12, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_actual_batch(&data, 12, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.images, b.images);
    }

    #[test]
    fn oversized_batch_is_rejected() {
        let data = balanced_dataset(1, 5);
        let err = sample_actual_batch(&data, 6, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, DataError::BatchTooLarge { requested: 6, available: 5 }));
    }

    #[test]
    fn generation_counts_top_up_minorities() {
        // labels {0:3, 1:1, 2:0} with minorities {1,2} -> need {0, 2, 3}
        let labels = [0, 0, 0, 1];
        assert_eq!(compute_generation_counts(&labels, 3, &[1, 2]), vec![0, 2, 3]);
        // balanced batch needs nothing
        let labels = [0, 1, 2];
        assert_eq!(compute_generation_counts(&labels, 3, &[1, 2]), vec![0, 0, 0]);
        // majority absent from the batch: top up to the running max only
        let labels = [1, 1, 2];
        assert_eq!(compute_generation_counts(&labels, 3, &[1, 2]), vec![0, 0, 1]);
    }

    fn batch_of(labels: &[usize], origin: Origin) -> Batch {
        let n = labels.len();
        Batch {
            images: ArrayD::zeros(IxDyn(&[n, 1, 4, 4])),
            labels: labels.to_vec(),
            origin: vec![origin; n],
        }
    }

    #[test]
    fn assembly_accepts_exact_balance() {
        let actual = batch_of(&[0, 0, 1], Origin::Actual);
        let generated = batch_of(&[1], Origin::Generated);
        let merged = assemble_balanced_batch(&actual, &generated).unwrap();
        assert_eq!(merged.len(), 4);
        let counts = merged.class_counts();
        assert_eq!(counts[&0], 2);
        assert_eq!(counts[&1], 2);
        assert_eq!(merged.origin.iter().filter(|o| **o == Origin::Generated).count(), 1);
    }

    #[test]
    fn assembly_rejects_residual_imbalance() {
        let actual = batch_of(&[0, 0, 1], Origin::Actual);
        let generated = batch_of(&[1, 1], Origin::Generated);
        let err = assemble_balanced_batch(&actual, &generated).unwrap_err();
        assert!(matches!(err, DataError::ImbalancedAssembly { class: 0, count: 2, expected: 3 }));
    }

    #[test]
    fn assembly_with_empty_generated_requires_balanced_actual() {
        let actual = batch_of(&[0, 1, 2], Origin::Actual);
        let empty = Batch::empty(1, 4, 4);
        assert!(assemble_balanced_batch(&actual, &empty).is_ok());

        let skewed = batch_of(&[0, 0, 1], Origin::Actual);
        assert!(assemble_balanced_batch(&skewed, &empty).is_err());
    }

    #[test]
    fn balanced_pipeline_reaches_zero_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data = balanced_dataset(3, 50);
        let s = ImbalanceSpec { seed: 5, ..spec(0.2, 40) };
        let (train, _) = build_imbalanced_split(&data, &s).unwrap();
        for _ in 0..50 {
            let actual = sample_actual_batch(&train, 16, &mut rng).unwrap();
            let need = compute_generation_counts(&actual.labels, 3, &s.minority_classes);
            if actual.labels.iter().filter(|&&l| l == 0).count()
                != *actual.class_counts().values().max().unwrap()
            {
                continue; // training redraws such batches; counts cannot balance
            }
            let mut gen_labels = Vec::new();
            for (c, &n) in need.iter().enumerate() {
                gen_labels.extend(std::iter::repeat_n(c, n));
            }
            let generated = if gen_labels.is_empty() {
                Batch::empty(1, 4, 4)
            } else {
                batch_of(&gen_labels, Origin::Generated)
            };
            let merged = assemble_balanced_batch(&actual, &generated).unwrap();
            let counts: Vec<usize> = merged.class_counts().values().copied().collect();
            let mean = counts.iter().sum::<usize>() as f64 / counts.len() as f64;
            let var = counts.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>()
                / counts.len() as f64;
            assert_eq!(var, 0.0);
        }
    }

    #[test]
    fn one_hot_rows_sum_to_one() {
        let y = one_hot(&[0, 2, 1], 3);
        assert_eq!(y[[0, 0]], 1.0);
        assert_eq!(y[[1, 2]], 1.0);
        assert_eq!(y[[2, 1]], 1.0);
        assert_eq!(y.sum(), 3.0);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let samples = balanced_dataset(2, 3);
        let path = dir.path().join("train.manifest");
        write_manifest(&path, &samples).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 6);
        assert!(text.lines().next().unwrap().ends_with("\t0"));
    }

    #[test]
    fn image_round_trip_preserves_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let mut img = ArrayD::zeros(IxDyn(&[1, 8, 8]));
        for y in 0..8 {
            for x in 0..8 {
                img[[0, y, x]] = ((y * 8 + x) as f64 / 63.0) * 2.0 - 1.0;
            }
        }
        save_image(&path, &img).unwrap();
        let back = load_image(&path, 8, 1).unwrap();
        for (a, b) in img.iter().zip(back.iter()) {
            assert!((a - b).abs() < 1.0 / 127.0, "round trip drifted: {a} vs {b}");
        }
    }
}
