//! Controlled correlation-bias datasets with planted ground-truth slices.
//!
//! Every class `y` has one dominant attribute (`mapping[a] == a`, so
//! attribute `y` dominates class `y`). Samples of cell `(y, a)` are drawn as
//!
//! ```text
//! x = core_scale * e_y + spurious_ease * spur_scale * e_{K + a} + noise_sigma * N(0, I)
//! z = P_class[:, y] + P_attr[:, a] + embed_noise_sigma * N(0, I)
//! ```
//!
//! where `e_i` are coordinate axes of the feature space (so class centers are
//! `core_separation` apart and attribute centers `spurious_separation` apart
//! before the ease multiplier) and `P_*` are random unit-norm columns. The
//! embedding view shares no randomness with the feature view beyond the cell
//! identity.
//!
//! Cell counts are allocated exactly. With `c = (1 - β) / (K - 1)` and `N`
//! the pool size, attribute `a` gets `T_a = (n_{M(a)} - c N) / (β - c)`
//! carriers; every conflicting cell of `a` receives `round(c T_a)` samples
//! (at least one when `β < 1`) and the aligned cell takes the rest of its
//! class. The pool is split 80/20 into train/val within each cell; the test
//! split is drawn separately with `test_per_cell` samples in every cell.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Provenance, Sample, Split};
use crate::error::{Error, Result};
use crate::rng::Rng;

fn default_val_fraction() -> f64 {
    0.2
}

fn default_test_per_cell() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub num_attributes: usize,
    /// Fraction of each attribute's carriers that carry the dictated label.
    pub correlation: f64,
    /// Train+val pool size per class.
    pub class_sizes: Vec<usize>,
    pub core_separation: f64,
    pub spurious_separation: f64,
    pub spurious_ease: f64,
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub noise_sigma: f64,
    pub embed_noise_sigma: f64,
    #[serde(default = "default_test_per_cell")]
    pub test_per_cell: usize,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    pub seed: u64,
}

impl SynthConfig {
    /// Six classes, β = 0.95, largest/smallest class ratio 3.8; the pool has
    /// 8,000 samples and the group-balanced test split 1,800.
    pub fn nico95_like(seed: u64) -> Self {
        Self {
            num_classes: 6,
            num_attributes: 6,
            correlation: 0.95,
            class_sizes: imbalanced_sizes(8000, 6, 3.8),
            core_separation: 3.0,
            spurious_separation: 3.0,
            spurious_ease: 2.0,
            feature_dim: 16,
            embed_dim: 16,
            noise_sigma: 0.4,
            embed_noise_sigma: 0.01,
            test_per_cell: 50,
            val_fraction: 0.2,
            seed,
        }
    }

    /// Two classes, β = 0.95, imbalance 2.9.
    pub fn waterbirds_like(seed: u64) -> Self {
        Self {
            num_classes: 2,
            num_attributes: 2,
            class_sizes: imbalanced_sizes(6000, 2, 2.9),
            ..Self::nico95_like(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.num_classes < 2 {
            return bad(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.num_attributes != self.num_classes {
            return bad(format!(
                "num_attributes ({}) must equal num_classes ({})",
                self.num_attributes, self.num_classes
            ));
        }
        if !(self.correlation > 0.0 && self.correlation <= 1.0) {
            return bad(format!("correlation must lie in (0, 1], got {}", self.correlation));
        }
        if self.correlation * self.num_classes as f64 <= 1.0 {
            return bad(format!(
                "correlation {} does not exceed chance 1/{}",
                self.correlation, self.num_classes
            ));
        }
        if self.class_sizes.len() != self.num_classes {
            return bad(format!(
                "class_sizes has {} entries for {} classes",
                self.class_sizes.len(),
                self.num_classes
            ));
        }
        if self.class_sizes.iter().any(|&n| n < self.num_attributes) {
            return bad(format!(
                "every class size must be >= num_attributes ({})",
                self.num_attributes
            ));
        }
        if !(self.spurious_ease > 1.0) {
            return bad(format!("spurious_ease must exceed 1, got {}", self.spurious_ease));
        }
        if self.core_separation < 0.0 || self.spurious_separation < 0.0 {
            return bad("separations must be nonnegative".into());
        }
        if !(self.noise_sigma > 0.0) || !(self.embed_noise_sigma > 0.0) {
            return bad("noise sigmas must be positive".into());
        }
        if self.feature_dim < self.num_classes + self.num_attributes {
            return bad(format!(
                "feature_dim must be >= num_classes + num_attributes ({})",
                self.num_classes + self.num_attributes
            ));
        }
        if self.embed_dim == 0 {
            return bad("embed_dim must be positive".into());
        }
        if !(self.val_fraction >= 0.0 && self.val_fraction < 1.0) {
            return bad(format!("val_fraction must lie in [0, 1), got {}", self.val_fraction));
        }
        Ok(())
    }
}

/// Geometric class sizes from largest to smallest with the given
/// largest/smallest ratio, summing to `total` (remainder goes to the largest).
pub fn imbalanced_sizes(total: usize, classes: usize, ratio: f64) -> Vec<usize> {
    assert!(classes >= 1 && ratio >= 1.0);
    let step = if classes > 1 {
        libm::pow(ratio, 1.0 / (classes - 1) as f64)
    } else {
        1.0
    };
    let weights: Vec<f64> = (0..classes).map(|i| libm::pow(step, -(i as f64))).collect();
    let sum: f64 = weights.iter().sum();
    let mut sizes: Vec<usize> = weights
        .iter()
        .map(|w| libm::floor(total as f64 * w / sum) as usize)
        .collect();
    let assigned: usize = sizes.iter().sum();
    sizes[0] += total - assigned;
    sizes
}

/// Exact per-cell pool counts: `counts[y][a]`.
pub fn allocate_counts(config: &SynthConfig) -> Result<Vec<Vec<usize>>> {
    config.validate()?;
    let k = config.num_classes;
    let beta = config.correlation;
    let mapping = identity_mapping(k);
    let mut counts = vec![vec![0usize; k]; k];
    let mut conflicting = vec![0usize; k];
    if beta < 1.0 {
        let c = (1.0 - beta) / (k - 1) as f64;
        let total: usize = config.class_sizes.iter().sum();
        for a in 0..k {
            let carriers = (config.class_sizes[mapping[a]] as f64 - c * total as f64) / (beta - c);
            if !(carriers > 0.0) {
                return Err(Error::InsufficientCounts {
                    attribute: a,
                    requested: beta,
                    realized: 0.0,
                });
            }
            conflicting[a] = (libm::round(c * carriers) as usize).max(1);
        }
    }
    for y in 0..k {
        let dominant = mapping.iter().position(|&m| m == y).unwrap_or(y);
        let mut incoming = 0usize;
        for a in 0..k {
            if a != dominant {
                counts[y][a] = conflicting[a];
                incoming += conflicting[a];
            }
        }
        if incoming >= config.class_sizes[y] {
            return Err(Error::InsufficientCounts {
                attribute: dominant,
                requested: beta,
                realized: 0.0,
            });
        }
        counts[y][dominant] = config.class_sizes[y] - incoming;
    }
    for a in 0..k {
        let carriers: usize = (0..k).map(|y| counts[y][a]).sum();
        let realized = counts[mapping[a]][a] as f64 / carriers as f64;
        if (realized - beta).abs() > 0.01 {
            return Err(Error::InsufficientCounts {
                attribute: a,
                requested: beta,
                realized,
            });
        }
    }
    Ok(counts)
}

fn identity_mapping(k: usize) -> Vec<usize> {
    (0..k).collect()
}

struct CellDraw {
    label: usize,
    attribute: usize,
    split: Split,
    features: Vec<f32>,
    embedding: Vec<f32>,
}

pub fn generate(config: &SynthConfig) -> Result<Dataset> {
    let counts = allocate_counts(config)?;
    let k = config.num_classes;
    let mapping = identity_mapping(k);
    let mut rng = Rng::new(config.seed);

    // Embedding structure: unit-norm random columns for classes and attributes.
    let columns = |rng: &mut Rng| -> Vec<Vec<f64>> {
        (0..k)
            .map(|_| {
                let mut v: Vec<f64> = (0..config.embed_dim).map(|_| rng.normal()).collect();
                let norm = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>()).max(1e-12);
                v.iter_mut().for_each(|x| *x /= norm);
                v
            })
            .collect()
    };
    let class_cols = columns(&mut rng);
    let attr_cols = columns(&mut rng);

    let core_scale = config.core_separation / core::f64::consts::SQRT_2;
    let spur_scale = config.spurious_ease * config.spurious_separation / core::f64::consts::SQRT_2;

    let draw = |rng: &mut Rng, y: usize, a: usize| -> (Vec<f32>, Vec<f32>) {
        let mut x: Vec<f64> = (0..config.feature_dim)
            .map(|_| config.noise_sigma * rng.normal())
            .collect();
        x[y] += core_scale;
        x[k + a] += spur_scale;
        let z: Vec<f64> = (0..config.embed_dim)
            .map(|d| class_cols[y][d] + attr_cols[a][d] + config.embed_noise_sigma * rng.normal())
            .collect();
        (
            x.into_iter().map(|v| v as f32).collect(),
            z.into_iter().map(|v| v as f32).collect(),
        )
    };

    let mut cells: Vec<CellDraw> = Vec::new();
    for y in 0..k {
        for a in 0..k {
            let n = counts[y][a];
            let mut pool: Vec<(Vec<f32>, Vec<f32>)> = (0..n).map(|_| draw(&mut rng, y, a)).collect();
            rng.shuffle(&mut pool);
            let n_val = libm::round(config.val_fraction * n as f64) as usize;
            for (i, (features, embedding)) in pool.into_iter().enumerate() {
                let split = if i < n_val { Split::Val } else { Split::Train };
                cells.push(CellDraw {
                    label: y,
                    attribute: a,
                    split,
                    features,
                    embedding,
                });
            }
            for _ in 0..config.test_per_cell {
                let (features, embedding) = draw(&mut rng, y, a);
                cells.push(CellDraw {
                    label: y,
                    attribute: a,
                    split: Split::Test,
                    features,
                    embedding,
                });
            }
        }
    }
    rng.shuffle(&mut cells);

    let width = format!("{}", cells.len()).len().max(5);
    let samples = cells
        .into_iter()
        .enumerate()
        .map(|(i, c)| Sample {
            id: format!("s{:0width$}", i, width = width),
            split: c.split,
            features: c.features,
            embedding: c.embedding,
            logits: None,
            label: c.label,
            attribute: Some(c.attribute),
            bias_conflicting: Some(mapping[c.attribute] != c.label),
        })
        .collect();

    Ok(Dataset {
        samples,
        num_classes: k,
        mapping: Some(mapping),
        provenance: Provenance::Synthetic(config.clone()),
    })
}

/// Fraction of `attribute` carriers whose label is `label`.
pub fn correlation_strength<'a>(
    samples: impl IntoIterator<Item = &'a Sample>,
    attribute: usize,
    label: usize,
) -> Result<f64> {
    let (mut carriers, mut matching) = (0usize, 0usize);
    for s in samples {
        match s.attribute {
            Some(a) if a == attribute => {
                carriers += 1;
                if s.label == label {
                    matching += 1;
                }
            }
            Some(_) => {}
            None => return Err(Error::MissingAnnotations("attribute")),
        }
    }
    if carriers == 0 {
        return Err(Error::UndefinedCorrelation(attribute));
    }
    Ok(matching as f64 / carriers as f64)
}

/// A planted bias-conflicting cell `s(a, y)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellSlice {
    pub attribute: usize,
    pub label: usize,
    pub ids: BTreeSet<String>,
}

/// Nonempty bias-conflicting cells, ordered by `(label, attribute)`,
/// restricted to `split` when given.
pub fn ground_truth_slices(dataset: &Dataset, split: Option<Split>) -> Result<Vec<CellSlice>> {
    let mapping = dataset
        .mapping
        .as_ref()
        .ok_or(Error::MissingAnnotations("attribute mapping"))?;
    let mut cells: alloc::collections::BTreeMap<(usize, usize), BTreeSet<String>> =
        Default::default();
    for s in &dataset.samples {
        if split.is_some_and(|sp| sp != s.split) {
            continue;
        }
        let a = s.attribute.ok_or(Error::MissingAnnotations("attribute"))?;
        let dictated = *mapping
            .get(a)
            .ok_or(Error::InvalidConfig(format!("attribute {a} outside mapping")))?;
        if dictated != s.label {
            cells.entry((s.label, a)).or_default().insert(s.id.clone());
        }
    }
    Ok(cells
        .into_iter()
        .map(|((label, attribute), ids)| CellSlice {
            attribute,
            label,
            ids,
        })
        .collect())
}
