//! Classifier metrics (confusion matrix, precision, recall, F-score) and the
//! feature-space distribution distance used to judge generated samples.
//!
//! The distance between two feature sets is the Frechet distance of their
//! Gaussian summaries: `|mu_a - mu_g|^2 + tr(S_a + S_g - 2 (S_a S_g)^(1/2))`,
//! computed through a symmetric eigendecomposition so no general matrix
//! square root is needed.

use std::io::Write as _;
use std::path::Path;

use ndarray::Array2;
use thiserror::Error;

use crate::data::{Origin, Sample};
use crate::linalg::{sym_eig, sym_sqrt};
use crate::networks::{classifier_forward, Classifier, NetworkError};
use autodiff::conv::matmul_view;
use autodiff::Tensor;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("degenerate features: {0}")]
    DegenerateFeatures(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Row = true class, column = predicted class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: Array2<usize>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix { counts: Array2::zeros((classes, classes)) }
    }

    pub fn from_pairs(truth: &[usize], predicted: &[usize], classes: usize) -> Self {
        assert_eq!(truth.len(), predicted.len(), "pair lists must align");
        let mut cm = ConfusionMatrix::new(classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            cm.counts[[t, p]] += 1;
        }
        cm
    }

    pub fn classes(&self) -> usize {
        self.counts.nrows()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Rows with at least one true sample.
    pub fn present_classes(&self) -> Vec<usize> {
        (0..self.classes()).filter(|&c| self.counts.row(c).sum() > 0).collect()
    }
}

/// Per-class precision and recall. A zero denominator (no predictions for
/// the class, or no true samples) yields 0 and logs the event rather than
/// producing NaN.
pub fn precision_recall(cm: &ConfusionMatrix, class: usize) -> (f64, f64) {
    let tp = cm.counts[[class, class]] as f64;
    let predicted: usize = cm.counts.column(class).sum();
    let actual: usize = cm.counts.row(class).sum();
    let precision = if predicted == 0 {
        log::warn!("class {class}: no predictions, precision defined as 0");
        0.0
    } else {
        tp / predicted as f64
    };
    let recall = if actual == 0 {
        log::warn!("class {class}: no true samples, recall defined as 0");
        0.0
    } else {
        tp / actual as f64
    };
    (precision, recall)
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Mean and covariance of a feature set. The covariance uses the n-1
/// divisor and is stored exactly symmetric.
#[derive(Debug, Clone)]
pub struct GaussianSummary {
    pub mean: Vec<f64>,
    pub cov: Array2<f64>,
}

impl GaussianSummary {
    /// Summarizes `features` rows. Needs at least two rows and finite values.
    pub fn from_features(features: &Array2<f64>) -> Result<GaussianSummary, EvalError> {
        let n = features.nrows();
        let d = features.ncols();
        if n < 2 {
            return Err(EvalError::DegenerateFeatures(format!(
                "need at least 2 feature rows, got {n}"
            )));
        }
        if d == 0 {
            return Err(EvalError::DegenerateFeatures("feature width is zero".into()));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(EvalError::DegenerateFeatures("non-finite feature values".into()));
        }
        let mean: Vec<f64> = (0..d).map(|j| features.column(j).sum() / n as f64).collect();
        let mut centered = features.clone();
        for (j, m) in mean.iter().enumerate() {
            centered.column_mut(j).mapv_inplace(|v| v - m);
        }
        let mut cov = matmul_view(centered.t(), centered.view());
        cov.mapv_inplace(|v| v / (n - 1) as f64);
        // the Gram construction is symmetric up to rounding; make it exact
        for i in 0..d {
            for j in 0..i {
                let s = 0.5 * (cov[[i, j]] + cov[[j, i]]);
                cov[[i, j]] = s;
                cov[[j, i]] = s;
            }
        }
        Ok(GaussianSummary { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Frechet distance between two Gaussian summaries. Tiny negative results
/// from rounding clamp to zero.
pub fn fid_from_summaries(a: &GaussianSummary, g: &GaussianSummary) -> Result<f64, EvalError> {
    if a.dim() != g.dim() {
        return Err(EvalError::DegenerateFeatures(format!(
            "summary dimensions differ: {} vs {}",
            a.dim(),
            g.dim()
        )));
    }
    let mean_term: f64 = a.mean.iter().zip(&g.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let tr_a: f64 = a.cov.diag().sum();
    let tr_g: f64 = g.cov.diag().sum();

    // tr((S_a S_g)^(1/2)) = tr((S_a^(1/2) S_g S_a^(1/2))^(1/2)); the inner
    // matrix is symmetric PSD, so its eigenvalues give the trace directly
    let root_a = sym_sqrt(&a.cov).map_err(EvalError::Numerical)?;
    let inner = matmul_view(matmul_view(root_a.view(), g.cov.view()).view(), root_a.view());
    let eig = sym_eig(&inner).map_err(EvalError::Numerical)?;
    let tr_sqrt: f64 = eig.values.iter().map(|&l| l.max(0.0).sqrt()).sum();

    let fid = mean_term + tr_a + tr_g - 2.0 * tr_sqrt;
    if !fid.is_finite() {
        return Err(EvalError::Numerical(format!("distance evaluated to {fid}")));
    }
    if fid < -1e-6 {
        log::warn!("distance {fid} more negative than rounding can explain; clamping to 0");
    }
    Ok(fid.max(0.0))
}

/// Frechet distance between two feature sets (rows = samples).
pub fn fid(real: &Array2<f64>, generated: &Array2<f64>) -> Result<f64, EvalError> {
    if real.ncols() != generated.ncols() {
        return Err(EvalError::DegenerateFeatures(format!(
            "feature widths differ: {} vs {}",
            real.ncols(),
            generated.ncols()
        )));
    }
    let a = GaussianSummary::from_features(real)?;
    let g = GaussianSummary::from_features(generated)?;
    fid_from_summaries(&a, &g)
}

/// Scores for one class in one evaluation.
#[derive(Debug, Clone)]
pub struct ClassMetrics {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    /// Feature-distribution distance for this class's synthetic samples,
    /// when the evaluated method produces any.
    pub fid: Option<f64>,
}

/// Full evaluation result: per-class scores plus macro averages over the
/// classes that actually appear in the evaluated set.
#[derive(Debug, Clone)]
pub struct MetricsRecord {
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f: f64,
    pub confusion: ConfusionMatrix,
}

impl MetricsRecord {
    pub fn class(&self, class: usize) -> Option<&ClassMetrics> {
        self.per_class.iter().find(|m| m.class == class)
    }
}

/// Predicted class per row: argmax of class probabilities, lowest index on
/// ties.
pub fn argmax_rows(probs: &Array2<f64>) -> Vec<usize> {
    probs
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            let mut best_v = row[0];
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > best_v {
                    best = j;
                    best_v = v;
                }
            }
            best
        })
        .collect()
}

const EVAL_CHUNK: usize = 128;

/// Runs the classifier over a labeled set and scores it. Per-class rows are
/// emitted for the classes present in the set; macro averages run over the
/// same classes. The distribution-distance slot stays empty here.
pub fn evaluate_classifier(cls: &Classifier, test: &[Sample]) -> Result<MetricsRecord, EvalError> {
    if test.is_empty() {
        return Err(EvalError::DegenerateFeatures("empty evaluation set".into()));
    }
    let classes = cls.profile.classes;
    let mut truth = Vec::with_capacity(test.len());
    let mut predicted = Vec::with_capacity(test.len());
    for chunk in test.chunks(EVAL_CHUNK) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let batch = crate::data::Batch::from_samples(&refs, Origin::Actual);
        let (probs, _) = classifier_forward(cls, &batch.images)?;
        truth.extend(chunk.iter().map(|s| s.label));
        predicted.extend(argmax_rows(&probs));
    }
    let confusion = ConfusionMatrix::from_pairs(&truth, &predicted, classes);
    Ok(metrics_from_confusion(confusion))
}

/// Builds the scores record from a filled confusion matrix.
pub fn metrics_from_confusion(confusion: ConfusionMatrix) -> MetricsRecord {
    let present = confusion.present_classes();
    let mut per_class = Vec::new();
    for &c in &present {
        let (p, r) = precision_recall(&confusion, c);
        per_class.push(ClassMetrics { class: c, precision: p, recall: r, f_score: f_score(p, r), fid: None });
    }
    let k = per_class.len().max(1) as f64;
    let macro_precision = per_class.iter().map(|m| m.precision).sum::<f64>() / k;
    let macro_recall = per_class.iter().map(|m| m.recall).sum::<f64>() / k;
    let macro_f = per_class.iter().map(|m| m.f_score).sum::<f64>() / k;
    MetricsRecord { per_class, macro_precision, macro_recall, macro_f, confusion }
}

/// Extracts classifier features for a batch of images, chunked to bound
/// graph size.
pub fn extract_features(cls: &Classifier, images: &Tensor) -> Result<Array2<f64>, EvalError> {
    let n = images.shape()[0];
    let mut out = Array2::zeros((n, cls.profile.feature_dim()));
    let mut row = 0;
    for start in (0..n).step_by(EVAL_CHUNK) {
        let len = EVAL_CHUNK.min(n - start);
        let chunk = images
            .slice_axis(ndarray::Axis(0), ndarray::Slice::from(start..start + len))
            .to_owned();
        let (_, feats) = classifier_forward(cls, &chunk)?;
        out.slice_mut(ndarray::s![row..row + len, ..]).assign(&feats);
        row += len;
    }
    Ok(out)
}

/// Writes one TSV row per sample: feature values, then the label, then the
/// origin flag (`actual` or `generated`).
pub fn export_features(
    cls: &Classifier,
    samples: &[Sample],
    origins: &[Origin],
    path: &Path,
) -> Result<(), EvalError> {
    assert_eq!(samples.len(), origins.len(), "one origin flag per sample");
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    for (s, origin) in samples.iter().zip(origins) {
        let image = s.image.clone().insert_axis(ndarray::Axis(0));
        let (_, feats) = classifier_forward(cls, &image)?;
        let mut line = String::new();
        for v in feats.row(0).iter() {
            line.push_str(&format!("{v:.9}\t"));
        }
        line.push_str(&format!("{}\t{}", s.label, match origin {
            Origin::Actual => "actual",
            Origin::Generated => "generated",
        }));
        writeln!(w, "{line}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn confusion_matrix_orientation() {
        // truth [0,0,1,1,2], predicted [0,1,1,1,0]
        let cm = ConfusionMatrix::from_pairs(&[0, 0, 1, 1, 2], &[0, 1, 1, 1, 0], 3);
        assert_eq!(cm.counts[[0, 0]], 1);
        assert_eq!(cm.counts[[0, 1]], 1);
        assert_eq!(cm.counts[[1, 1]], 2);
        assert_eq!(cm.counts[[2, 0]], 1);
        assert_eq!(cm.total(), 5);
    }

    #[test]
    fn precision_recall_hand_example() {
        let cm = ConfusionMatrix::from_pairs(&[0, 0, 1, 1, 2], &[0, 1, 1, 1, 0], 3);
        let (p0, r0) = precision_recall(&cm, 0);
        assert!((p0 - 0.5).abs() < 1e-15);
        assert!((r0 - 0.5).abs() < 1e-15);
        let (p1, r1) = precision_recall(&cm, 1);
        assert!((p1 - 2.0 / 3.0).abs() < 1e-15);
        assert!((r1 - 1.0).abs() < 1e-15);
        // class 2 never predicted: precision falls back to 0
        let (p2, r2) = precision_recall(&cm, 2);
        assert_eq!(p2, 0.0);
        assert_eq!(r2, 0.0);
    }

    #[test]
    fn f_score_cases() {
        assert_eq!(f_score(0.0, 0.0), 0.0);
        assert!((f_score(1.0, 1.0) - 1.0).abs() < 1e-15);
        assert!((f_score(0.5, 1.0) - 2.0 / 3.0).abs() < 1e-15);
        // harmonic mean is symmetric
        assert_eq!(f_score(0.3, 0.7), f_score(0.7, 0.3));
    }

    proptest! {
        #[test]
        fn f_score_bounded_by_min_and_max(p in 0.0f64..=1.0, r in 0.0f64..=1.0) {
            let f = f_score(p, r);
            prop_assert!(f >= 0.0 && f <= 1.0);
            prop_assert!(f <= p.max(r) + 1e-15);
            if p > 0.0 && r > 0.0 {
                prop_assert!(f >= (p.min(r) * 2.0 * p.max(r) / (p + r)) - 1e-15);
            }
        }
    }

    #[test]
    fn summary_matches_hand_computation() {
        // rows (-1, 0), (1, 2): mean (0, 1), cov [[2, 2], [2, 2]] with n-1
        let f = array![[-1.0, 0.0], [1.0, 2.0]];
        let s = GaussianSummary::from_features(&f).unwrap();
        assert_eq!(s.mean, vec![0.0, 1.0]);
        assert!((s.cov[[0, 0]] - 2.0).abs() < 1e-12);
        assert!((s.cov[[0, 1]] - 2.0).abs() < 1e-12);
        assert!((s.cov[[1, 1]] - 2.0).abs() < 1e-12);
        assert_eq!(s.cov[[0, 1]], s.cov[[1, 0]]);
    }

    #[test]
    fn summary_rejects_degenerate_input() {
        let one_row = Array2::from_shape_vec((1, 3), vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(
            GaussianSummary::from_features(&one_row),
            Err(EvalError::DegenerateFeatures(_))
        ));
        let with_nan = array![[1.0, f64::NAN], [0.0, 1.0]];
        assert!(GaussianSummary::from_features(&with_nan).is_err());
    }

    #[test]
    fn identical_sets_have_zero_distance() {
        let mut rng = crate::seeds::stream(1, 99, 0);
        use rand::Rng;
        let f = Array2::from_shape_fn((20, 4), |_| rng.random::<f64>());
        let d = fid(&f, &f.clone()).unwrap();
        assert!(d.abs() <= 1e-9, "identical sets gave {d}");
    }

    #[test]
    fn unit_mean_shift_gives_unit_distance() {
        // means 0 and 1, equal variance: distance is exactly 1
        let a = array![[-1.0], [1.0]];
        let g = array![[0.0], [2.0]];
        let d = fid(&a, &g).unwrap();
        assert!((d - 1.0).abs() <= 1e-6, "got {d}");
    }

    #[test]
    fn diagonal_two_dim_case() {
        // equal means, covariances I and 4I: 2 + 8 - 2 tr(2I) = 2
        let a = GaussianSummary { mean: vec![0.0, 0.0], cov: Array2::eye(2) };
        let g = GaussianSummary { mean: vec![0.0, 0.0], cov: Array2::eye(2) * 4.0 };
        let d = fid_from_summaries(&a, &g).unwrap();
        assert!((d - 2.0).abs() <= 1e-6, "got {d}");
    }

    #[test]
    fn distance_is_symmetric() {
        let mut rng = crate::seeds::stream(2, 99, 0);
        use rand::Rng;
        let a = Array2::from_shape_fn((30, 5), |_| rng.random::<f64>() * 2.0);
        let b = Array2::from_shape_fn((25, 5), |_| rng.random::<f64>() - 1.0);
        let d1 = fid(&a, &b).unwrap();
        let d2 = fid(&b, &a).unwrap();
        assert!((d1 - d2).abs() < 1e-9, "{d1} vs {d2}");
        assert!(d1 > 0.0);
    }

    proptest! {
        /// For diagonal covariances the distance has the closed form
        /// sum((sqrt(va) - sqrt(vg))^2) + |mu_a - mu_g|^2.
        #[test]
        fn diagonal_summaries_match_closed_form(
            va in proptest::collection::vec(0.01f64..4.0, 3),
            vg in proptest::collection::vec(0.01f64..4.0, 3),
            ma in proptest::collection::vec(-2.0f64..2.0, 3),
            mg in proptest::collection::vec(-2.0f64..2.0, 3),
        ) {
            let a = GaussianSummary {
                mean: ma.clone(),
                cov: Array2::from_diag(&ndarray::Array1::from_vec(va.clone())),
            };
            let g = GaussianSummary {
                mean: mg.clone(),
                cov: Array2::from_diag(&ndarray::Array1::from_vec(vg.clone())),
            };
            let expect: f64 = va.iter().zip(&vg).map(|(x, y)| (x.sqrt() - y.sqrt()).powi(2)).sum::<f64>()
                + ma.iter().zip(&mg).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
            let d = fid_from_summaries(&a, &g).unwrap();
            prop_assert!((d - expect).abs() < 1e-8, "{} vs {}", d, expect);
        }
    }

    #[test]
    fn covariance_eigenvalues_stay_nonnegative() {
        let mut rng = crate::seeds::stream(3, 99, 0);
        use rand::Rng;
        let f = Array2::from_shape_fn((10, 6), |_| rng.random::<f64>());
        let s = GaussianSummary::from_features(&f).unwrap();
        let eig = sym_eig(&s.cov).unwrap();
        for l in eig.values {
            assert!(l >= -1e-8, "covariance eigenvalue {l}");
        }
    }

    #[test]
    fn argmax_breaks_ties_low() {
        let probs = array![[0.4, 0.4, 0.2], [0.1, 0.2, 0.7]];
        assert_eq!(argmax_rows(&probs), vec![0, 2]);
    }

    #[test]
    fn evaluate_classifier_on_tiny_net() {
        use crate::networks::{Classifier, Profile};
        use ndarray::{ArrayD, IxDyn};
        let p = Profile::tiny(1, 3);
        let cls = Classifier::init(&p, &mut crate::seeds::stream(4, 99, 0));
        let samples: Vec<Sample> = (0..9)
            .map(|i| Sample {
                image: ArrayD::from_elem(IxDyn(&[1, 8, 8]), (i % 3) as f64 / 3.0),
                label: i % 3,
                id: format!("s{i}"),
            })
            .collect();
        let rec = evaluate_classifier(&cls, &samples).unwrap();
        assert_eq!(rec.confusion.total(), 9);
        assert_eq!(rec.per_class.len(), 3);
        assert!(rec.macro_f >= 0.0 && rec.macro_f <= 1.0);
    }

    #[test]
    fn export_features_writes_one_row_per_sample() {
        use crate::networks::{Classifier, Profile};
        use ndarray::{ArrayD, IxDyn};
        let p = Profile::tiny(1, 3);
        let cls = Classifier::init(&p, &mut crate::seeds::stream(5, 99, 0));
        let samples: Vec<Sample> = (0..4)
            .map(|i| Sample {
                image: ArrayD::from_elem(IxDyn(&[1, 8, 8]), 0.1 * i as f64),
                label: i % 3,
                id: format!("s{i}"),
            })
            .collect();
        let origins = vec![Origin::Actual, Origin::Actual, Origin::Generated, Origin::Actual];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("features.tsv");
        export_features(&cls, &samples, &origins, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        for (i, line) in lines.iter().enumerate() {
            let fields: Vec<&str> = line.split('\t').collect();
            assert_eq!(fields.len(), p.feature_dim() + 2);
            assert_eq!(fields[p.feature_dim()], (i % 3).to_string());
        }
        assert!(lines[2].ends_with("generated"));
    }
}
