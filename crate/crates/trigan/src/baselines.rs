//! Interpolation-based oversampling baselines operating on flattened pixel
//! vectors: plain nearest-neighbor interpolation, its borderline variant
//! (type 1) that only expands points near the class boundary, and the
//! adaptive variant that allocates more synthetic points where the other
//! classes crowd in.
//!
//! All three report which parent rows produced each synthetic point, so
//! tests can verify segment geometry independently of the sampling code.

use ndarray::{Array2, ArrayView1, Axis};
use rand::Rng;
use thiserror::Error;

use crate::data::Sample;
use crate::seeds::{self, tag};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("{side} side has {have} points, need at least {need}")]
    TooFewPoints { side: &'static str, have: usize, need: usize },
    #[error("point matrices disagree on dimension: {0} vs {1}")]
    DimensionMismatch(usize, usize),
}

/// Inputs for plain oversampling within one minority class.
#[derive(Debug, Clone)]
pub struct OversampleRequest {
    /// Flattened minority points, one row per sample.
    pub points: Array2<f64>,
    /// Neighbor count; clamped to n-1 (with a warning) when the class is
    /// smaller than requested.
    pub k: usize,
    pub n_synthetic: usize,
    pub seed: u64,
}

impl OversampleRequest {
    /// Default neighbor count per the published setup.
    pub const DEFAULT_K: usize = 5;

    pub fn new(points: Array2<f64>, n_synthetic: usize, seed: u64) -> Self {
        OversampleRequest { points, k: Self::DEFAULT_K, n_synthetic, seed }
    }
}

/// Synthetic points plus, per row, the indices of the base and partner
/// parents in the originating minority matrix and the interpolation
/// coefficient.
#[derive(Debug, Clone)]
pub struct SynthesisOutput {
    pub points: Array2<f64>,
    pub parents: Vec<(usize, usize)>,
    pub u: Vec<f64>,
}

/// Neighborhood role of a minority point relative to the other classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointKind {
    /// Fewer than half of the nearest neighbors belong to other classes.
    Safe,
    /// Half or more, but not all: the point sits near the boundary.
    Danger,
    /// Every nearest neighbor belongs to other classes.
    Noise,
}

fn clamp_k(k: usize, candidates: usize, what: &str) -> usize {
    let eff = k.min(candidates);
    if eff < k {
        log::warn!("{what}: only {candidates} candidate neighbors, clamping k from {k}");
    }
    eff.max(1)
}

/// Indices of the `k` nearest rows of `points` to `query` by Euclidean
/// distance, skipping `exclude`; ties resolve to the lowest index.
fn k_nearest(points: &Array2<f64>, query: ArrayView1<f64>, k: usize, exclude: Option<usize>) -> Vec<usize> {
    let mut dists: Vec<(f64, usize)> = points
        .rows()
        .into_iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != exclude)
        .map(|(i, row)| {
            let d = row
                .iter()
                .zip(query.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
            (d, i)
        })
        .collect();
    dists.sort_unstable_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    dists.into_iter().take(k).map(|(_, i)| i).collect()
}

/// `base + u * (partner - base)` over one row pair.
pub fn interpolate_rows(base: ArrayView1<f64>, partner: ArrayView1<f64>, u: f64) -> Vec<f64> {
    base.iter().zip(partner.iter()).map(|(a, b)| a + u * (b - a)).collect()
}

fn synthesize(
    points: &Array2<f64>,
    bases: &[usize],
    neighbors: &[Vec<usize>],
    alloc: impl Iterator<Item = usize>,
    n_synthetic: usize,
    rng: &mut impl Rng,
) -> SynthesisOutput {
    let d = points.ncols();
    let mut out = Array2::zeros((n_synthetic, d));
    let mut parents = Vec::with_capacity(n_synthetic);
    let mut us = Vec::with_capacity(n_synthetic);
    let mut row = 0usize;
    for (slot, count) in alloc.enumerate() {
        let base = bases[slot];
        for _ in 0..count {
            let nb = &neighbors[slot];
            let partner = nb[rng.random_range(0..nb.len())];
            let u: f64 = rng.random();
            let s = interpolate_rows(points.row(base), points.row(partner), u);
            out.row_mut(row).assign(&ndarray::ArrayView1::from(&s));
            parents.push((base, partner));
            us.push(u);
            row += 1;
        }
    }
    debug_assert_eq!(row, n_synthetic);
    SynthesisOutput { points: out, parents, u: us }
}

/// Splits `n_synthetic` over `bases` by cycling: slot i gets the count of
/// indices j in 0..n with j % bases == i.
fn cycled_counts(bases: usize, n_synthetic: usize) -> Vec<usize> {
    let mut alloc = vec![n_synthetic / bases; bases];
    for slot in alloc.iter_mut().take(n_synthetic % bases) {
        *slot += 1;
    }
    alloc
}

/// Plain oversampling: every synthetic point interpolates between a base
/// minority point (bases cycled uniformly) and one of its k nearest
/// minority neighbors, at a uniform coefficient.
pub fn smote_detailed(req: &OversampleRequest) -> Result<SynthesisOutput, BaselineError> {
    let n = req.points.nrows();
    if n < 2 {
        return Err(BaselineError::TooFewPoints { side: "minority", have: n, need: 2 });
    }
    let k = clamp_k(req.k, n - 1, "oversampling neighbors");
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| k_nearest(&req.points, req.points.row(i), k, Some(i)))
        .collect();
    let bases: Vec<usize> = (0..n).collect();
    let alloc = cycled_counts(n, req.n_synthetic);
    let mut rng = seeds::stream(req.seed, tag::OVERSAMPLE, 0);
    Ok(synthesize(&req.points, &bases, &neighbors, alloc.into_iter(), req.n_synthetic, &mut rng))
}

pub fn smote(req: &OversampleRequest) -> Result<Array2<f64>, BaselineError> {
    smote_detailed(req).map(|o| o.points)
}

/// Classifies each minority point by its k nearest neighbors over the union
/// of both matrices (self excluded).
pub fn borderline_census(
    minority: &Array2<f64>,
    majority: &Array2<f64>,
    k: usize,
) -> Result<Vec<PointKind>, BaselineError> {
    if majority.nrows() == 0 {
        return Err(BaselineError::TooFewPoints { side: "majority", have: 0, need: 1 });
    }
    if minority.ncols() != majority.ncols() {
        return Err(BaselineError::DimensionMismatch(minority.ncols(), majority.ncols()));
    }
    let n = minority.nrows();
    let full = ndarray::concatenate(Axis(0), &[minority.view(), majority.view()])
        .expect("same dimension checked above");
    let k = clamp_k(k, full.nrows() - 1, "boundary census neighbors");
    Ok((0..n)
        .map(|i| {
            let nb = k_nearest(&full, minority.row(i), k, Some(i));
            let majority_count = nb.iter().filter(|&&j| j >= n).count();
            if majority_count == k {
                PointKind::Noise
            } else if 2 * majority_count >= k {
                PointKind::Danger
            } else {
                PointKind::Safe
            }
        })
        .collect())
}

/// Borderline variant (type 1): only danger points serve as interpolation
/// bases; partners are minority neighbors. Falls back to plain oversampling
/// when no point qualifies as danger.
pub fn borderline_smote_detailed(
    minority: &Array2<f64>,
    majority: &Array2<f64>,
    k: usize,
    n_synthetic: usize,
    seed: u64,
) -> Result<SynthesisOutput, BaselineError> {
    let n = minority.nrows();
    if n < 2 {
        return Err(BaselineError::TooFewPoints { side: "minority", have: n, need: 2 });
    }
    let census = borderline_census(minority, majority, k)?;
    let danger: Vec<usize> = census
        .iter()
        .enumerate()
        .filter(|(_, kind)| **kind == PointKind::Danger)
        .map(|(i, _)| i)
        .collect();
    if danger.is_empty() {
        log::warn!("no danger points at the boundary; falling back to plain oversampling");
        return smote_detailed(&OversampleRequest {
            points: minority.clone(),
            k,
            n_synthetic,
            seed,
        });
    }
    let k_min = clamp_k(k, n - 1, "oversampling neighbors");
    let neighbors: Vec<Vec<usize>> = danger
        .iter()
        .map(|&i| k_nearest(minority, minority.row(i), k_min, Some(i)))
        .collect();
    let alloc = cycled_counts(danger.len(), n_synthetic);
    let mut rng = seeds::stream(seed, tag::OVERSAMPLE, 1);
    Ok(synthesize(minority, &danger, &neighbors, alloc.into_iter(), n_synthetic, &mut rng))
}

pub fn borderline_smote(
    minority: &Array2<f64>,
    majority: &Array2<f64>,
    k: usize,
    n_synthetic: usize,
    seed: u64,
) -> Result<Array2<f64>, BaselineError> {
    borderline_smote_detailed(minority, majority, k, n_synthetic, seed).map(|o| o.points)
}

/// Turns normalized weights into integer counts summing to `n_synthetic`:
/// round each, then give leftovers to the highest-weight slots (or take the
/// excess from the lowest-weight non-empty slots), lowest index first on
/// ties.
pub fn adasyn_allocation(weights: &[f64], n_synthetic: usize) -> Vec<usize> {
    let mut alloc: Vec<usize> =
        weights.iter().map(|w| (w * n_synthetic as f64).round() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        weights[b].partial_cmp(&weights[a]).unwrap().then(a.cmp(&b))
    });
    let mut total: usize = alloc.iter().sum();
    let mut cursor = 0usize;
    while total < n_synthetic {
        alloc[order[cursor % order.len()]] += 1;
        cursor += 1;
        total += 1;
    }
    let mut cursor = 0usize;
    while total > n_synthetic {
        let idx = order[order.len() - 1 - (cursor % order.len())];
        if alloc[idx] > 0 {
            alloc[idx] -= 1;
            total -= 1;
        }
        cursor += 1;
    }
    alloc
}

/// Adaptive variant: point i's share of the synthetic budget grows with the
/// fraction of other-class points among its k nearest neighbors. Falls back
/// to plain oversampling when every weight is zero.
pub fn adasyn_detailed(
    minority: &Array2<f64>,
    majority: &Array2<f64>,
    k: usize,
    n_synthetic: usize,
    seed: u64,
) -> Result<SynthesisOutput, BaselineError> {
    let n = minority.nrows();
    if n < 2 {
        return Err(BaselineError::TooFewPoints { side: "minority", have: n, need: 2 });
    }
    if majority.nrows() == 0 {
        return Err(BaselineError::TooFewPoints { side: "majority", have: 0, need: 1 });
    }
    if minority.ncols() != majority.ncols() {
        return Err(BaselineError::DimensionMismatch(minority.ncols(), majority.ncols()));
    }
    let full = ndarray::concatenate(Axis(0), &[minority.view(), majority.view()])
        .expect("same dimension checked above");
    let k_full = clamp_k(k, full.nrows() - 1, "adaptive weight neighbors");
    let raw: Vec<f64> = (0..n)
        .map(|i| {
            let nb = k_nearest(&full, minority.row(i), k_full, Some(i));
            nb.iter().filter(|&&j| j >= n).count() as f64 / k_full as f64
        })
        .collect();
    let sum: f64 = raw.iter().sum();
    if sum == 0.0 {
        log::warn!("all adaptive weights are zero; falling back to plain oversampling");
        return smote_detailed(&OversampleRequest {
            points: minority.clone(),
            k,
            n_synthetic,
            seed,
        });
    }
    let weights: Vec<f64> = raw.iter().map(|r| r / sum).collect();
    let alloc = adasyn_allocation(&weights, n_synthetic);

    let k_min = clamp_k(k, n - 1, "oversampling neighbors");
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| k_nearest(minority, minority.row(i), k_min, Some(i)))
        .collect();
    let bases: Vec<usize> = (0..n).collect();
    let mut rng = seeds::stream(seed, tag::OVERSAMPLE, 2);
    Ok(synthesize(minority, &bases, &neighbors, alloc.into_iter(), n_synthetic, &mut rng))
}

pub fn adasyn(
    minority: &Array2<f64>,
    majority: &Array2<f64>,
    k: usize,
    n_synthetic: usize,
    seed: u64,
) -> Result<Array2<f64>, BaselineError> {
    adasyn_detailed(minority, majority, k, n_synthetic, seed).map(|o| o.points)
}

// ---- dataset-level augmentation ------------------------------------------------

/// Which oversampler to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingMethod {
    Smote,
    BorderlineSmote,
    Adasyn,
}

impl SamplingMethod {
    pub fn name(&self) -> &'static str {
        match self {
            SamplingMethod::Smote => "smote",
            SamplingMethod::BorderlineSmote => "b-smote",
            SamplingMethod::Adasyn => "adasyn",
        }
    }

    pub fn by_name(name: &str) -> Option<SamplingMethod> {
        match name {
            "smote" => Some(SamplingMethod::Smote),
            "b-smote" => Some(SamplingMethod::BorderlineSmote),
            "adasyn" => Some(SamplingMethod::Adasyn),
            _ => None,
        }
    }
}

fn flatten_class(samples: &[&Sample]) -> Array2<f64> {
    let d = samples.first().map(|s| s.image.len()).unwrap_or(0);
    let mut out = Array2::zeros((samples.len(), d));
    for (i, s) in samples.iter().enumerate() {
        for (slot, &v) in out.row_mut(i).iter_mut().zip(s.image.iter()) {
            *slot = v;
        }
    }
    out
}

/// Brings every class up to the size of the largest class by synthesizing
/// flattened-pixel samples, and returns the augmented training set (real
/// samples first, then synthetic ones, labeled by class). The borderline
/// and adaptive methods treat all other classes as the opposing side.
pub fn oversample_to_balance(
    train: &[Sample],
    method: SamplingMethod,
    k: usize,
    seed: u64,
) -> Result<Vec<Sample>, BaselineError> {
    assert!(!train.is_empty(), "augmentation needs data");
    let shape = train[0].image.shape().to_vec();
    let classes: std::collections::BTreeMap<usize, Vec<&Sample>> =
        train.iter().fold(Default::default(), |mut m, s| {
            m.entry(s.label).or_default().push(s);
            m
        });
    let target = classes.values().map(|v| v.len()).max().unwrap_or(0);

    let mut out: Vec<Sample> = train.to_vec();
    for (&class, members) in &classes {
        let need = target - members.len();
        if need == 0 {
            continue;
        }
        let minority = flatten_class(members);
        let rest: Vec<&Sample> = train.iter().filter(|s| s.label != class).collect();
        let majority = flatten_class(&rest);
        let synth = match method {
            SamplingMethod::Smote => smote(&OversampleRequest {
                points: minority,
                k,
                n_synthetic: need,
                seed: seed ^ class as u64,
            })?,
            SamplingMethod::BorderlineSmote => {
                borderline_smote(&minority, &majority, k, need, seed ^ class as u64)?
            }
            SamplingMethod::Adasyn => {
                adasyn(&minority, &majority, k, need, seed ^ class as u64)?
            }
        };
        for (i, row) in synth.rows().into_iter().enumerate() {
            let image = ndarray::ArrayD::from_shape_vec(
                ndarray::IxDyn(&shape),
                row.iter().copied().collect(),
            )
            .expect("flattened length matches image shape");
            out.push(Sample {
                image,
                label: class,
                id: format!("synth-{}-c{class}-{i:05}.png", method.name()),
            });
        }
    }
    Ok(out)
}
