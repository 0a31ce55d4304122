//! Initializations for the reconstructed inputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Dataset;
use crate::numcore::{Matrix, RngStream};

/// λ-weights of `λ₂(λ₁·x_GT + (1−λ₁)·x_part) + (1−λ₂)·x_rnd`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixScheme {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl MixScheme {
    pub fn new(lambda1: f64, lambda2: f64) -> Result<Self> {
        for (name, v) in [("lambda1", lambda1), ("lambda2", lambda2)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(Self { lambda1, lambda2 })
    }
}

/// The three matrices a mix is built from.
#[derive(Debug, Clone, Copy)]
pub struct MixSources<'a> {
    pub ground_truth: &'a Matrix,
    pub partition: &'a Matrix,
    pub random: &'a Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitKind {
    /// Entries drawn from U(0, 1).
    Uniform01,
    /// Entries drawn from N(0, σ²).
    Gaussian { sigma: f64 },
    GroundTruth,
    /// Held-out samples, one per slot, matched by label where possible.
    Partition,
    Mix(MixScheme),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitScheme {
    pub kind: InitKind,
    pub seed: u64,
    /// Run index used to derive the random stream.
    pub run_index: u64,
}

impl InitScheme {
    pub fn new(kind: InitKind, seed: u64) -> Self {
        Self { kind, seed, run_index: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            InitKind::Gaussian { sigma } if !(sigma > 0.0) => {
                Err(Error::Config(format!("Gaussian init needs sigma > 0, got {sigma}")))
            }
            InitKind::Mix(m) => MixScheme::new(m.lambda1, m.lambda2).map(|_| ()),
            _ => Ok(()),
        }
    }
}

/// Data an initialization may draw from.
#[derive(Debug, Clone, Copy, Default)]
pub struct InitSources<'a> {
    pub ground_truth: Option<&'a Dataset>,
    pub partition: Option<&'a Dataset>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitOutput {
    pub x0: Matrix,
    /// Holdout row used for every slot (partition and mix schemes).
    pub assignment: Option<Vec<usize>>,
}

/// Assigns one distinct holdout row to every slot, preferring rows whose
/// label matches the slot's label; the order is a seeded shuffle.
pub fn assign_partition(labels: &[f64], holdout: &Dataset, rng: &mut RngStream) -> Result<Vec<usize>> {
    if holdout.len() < labels.len() {
        return Err(Error::Config(format!(
            "partition has {} samples, {} slots need filling",
            holdout.len(),
            labels.len()
        )));
    }
    let order = rng.permutation(holdout.len());
    let mut used = vec![false; holdout.len()];
    let mut out = vec![usize::MAX; labels.len()];
    for (slot, &y) in labels.iter().enumerate() {
        if let Some(&j) = order.iter().find(|&&j| !used[j] && holdout.labels[j] == y) {
            used[j] = true;
            out[slot] = j;
        }
    }
    for slot in out.iter_mut().filter(|s| **s == usize::MAX) {
        let j = *order.iter().find(|&&j| !used[j]).expect("holdout is at least as large as the slot count");
        used[j] = true;
        *slot = j;
    }
    Ok(out)
}

/// Builds `x⁰` of shape `(n, k)`.
///
/// Slot labels come from the ground-truth set when present. Deterministic
/// given the scheme's seed and run index.
pub fn make_init(scheme: &InitScheme, shape: (usize, usize), sources: InitSources<'_>) -> Result<InitOutput> {
    scheme.validate()?;
    let (n, k) = shape;
    let mut rng = RngStream::for_stage(scheme.seed, "init", scheme.run_index);
    let need_gt = || {
        let gt = sources
            .ground_truth
            .ok_or_else(|| Error::Config("this initialization needs the ground-truth training set".into()))?;
        if gt.inputs.shape() != (n, k) {
            return Err(Error::Shape(format!("ground truth is {:?}, expected {:?}", gt.inputs.shape(), (n, k))));
        }
        Ok(gt)
    };
    let need_partition = || {
        let p = sources
            .partition
            .ok_or_else(|| Error::Config("this initialization needs a held-out partition".into()))?;
        if p.dim() != k {
            return Err(Error::Shape(format!("partition has {} columns, expected {k}", p.dim())));
        }
        Ok(p)
    };
    let slot_labels = |gt: Option<&Dataset>| gt.map_or_else(|| vec![0.0; n], |g| g.labels.clone());

    match &scheme.kind {
        InitKind::Uniform01 => Ok(InitOutput { x0: rng.uniform_matrix(n, k), assignment: None }),
        InitKind::Gaussian { sigma } => Ok(InitOutput { x0: rng.normal_matrix(n, k, *sigma), assignment: None }),
        InitKind::GroundTruth => Ok(InitOutput { x0: need_gt()?.inputs.clone(), assignment: None }),
        InitKind::Partition => {
            let part = need_partition()?;
            let idx = assign_partition(&slot_labels(sources.ground_truth), part, &mut rng)?;
            Ok(InitOutput { x0: part.inputs.select_rows(&idx), assignment: Some(idx) })
        }
        InitKind::Mix(m) => {
            let gt = need_gt()?;
            let part = need_partition()?;
            let idx = assign_partition(&gt.labels, part, &mut rng)?;
            let x_part = part.inputs.select_rows(&idx);
            let x_rnd = rng.uniform_matrix(n, k);
            let x0 = mix_init(m, MixSources { ground_truth: &gt.inputs, partition: &x_part, random: &x_rnd })?;
            Ok(InitOutput { x0, assignment: Some(idx) })
        }
    }
}

/// `λ₂(λ₁·x_GT + (1−λ₁)·x_part) + (1−λ₂)·x_rnd`, entrywise.
pub fn mix_init(m: &MixScheme, src: MixSources<'_>) -> Result<Matrix> {
    let shape = src.ground_truth.shape();
    if src.partition.shape() != shape || src.random.shape() != shape {
        return Err(Error::Shape(format!(
            "mix sources differ in shape: {:?}, {:?}, {:?}",
            shape,
            src.partition.shape(),
            src.random.shape()
        )));
    }
    let (l1, l2) = (m.lambda1, m.lambda2);
    let data = src
        .ground_truth
        .as_slice()
        .iter()
        .zip(src.partition.as_slice())
        .zip(src.random.as_slice())
        .map(|((g, p), r)| l2 * (l1 * g + (1.0 - l1) * p) + (1.0 - l2) * r)
        .collect();
    Matrix::from_vec(shape.0, shape.1, data)
}

pub const DEFAULT_LAMBDAS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

/// Cartesian product of the λ values, `λ₁` varying slowest.
pub fn grid(values: &[f64]) -> Result<Vec<MixScheme>> {
    if values.is_empty() {
        return Err(Error::Config("the λ grid needs at least one value".into()));
    }
    values
        .iter()
        .flat_map(|&l1| values.iter().map(move |&l2| MixScheme::new(l1, l2)))
        .collect()
}
