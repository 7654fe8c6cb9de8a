use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::synth::SynthConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl core::fmt::Display for Split {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One row of a dataset. Empty `features` / `embedding` mean the block is
/// absent; `logits` are only present when exported by an external model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub split: Split,
    pub features: Vec<f32>,
    pub embedding: Vec<f32>,
    pub logits: Option<Vec<f32>>,
    pub label: usize,
    pub attribute: Option<usize>,
    pub bias_conflicting: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Synthetic(SynthConfig),
    External(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub num_classes: usize,
    /// `mapping[a]` is the label dictated by attribute `a`.
    pub mapping: Option<Vec<usize>>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn feature_dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.features.len())
    }

    pub fn embed_dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.embedding.len())
    }

    pub fn logit_dim(&self) -> Option<usize> {
        self.samples
            .first()
            .and_then(|s| s.logits.as_ref().map(|l| l.len()))
    }

    pub fn has_attributes(&self) -> bool {
        !self.samples.is_empty() && self.samples.iter().all(|s| s.attribute.is_some())
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Checks id uniqueness, per-row dimension agreement, finiteness, label
    /// range and annotation consistency against the mapping.
    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        let (fd, ed, ld) = (self.feature_dim(), self.embed_dim(), self.logit_dim());
        for s in &self.samples {
            if !ids.insert(s.id.as_str()) {
                return Err(Error::InvalidConfig(format!("duplicate sample id {}", s.id)));
            }
            if s.features.len() != fd {
                return Err(Error::DimensionMismatch {
                    what: "features",
                    expected: fd,
                    got: s.features.len(),
                });
            }
            if s.embedding.len() != ed {
                return Err(Error::DimensionMismatch {
                    what: "embedding",
                    expected: ed,
                    got: s.embedding.len(),
                });
            }
            if s.logits.as_ref().map(|l| l.len()) != ld {
                return Err(Error::InvalidConfig(format!(
                    "sample {} disagrees with the dataset on logits presence or width",
                    s.id
                )));
            }
            let finite = s.features.iter().chain(&s.embedding).all(|v| v.is_finite())
                && s.logits.iter().flatten().all(|v| v.is_finite());
            if !finite {
                return Err(Error::InvalidConfig(format!("sample {} has non-finite values", s.id)));
            }
            if s.label >= self.num_classes {
                return Err(Error::InvalidConfig(format!(
                    "sample {} label {} out of range",
                    s.id, s.label
                )));
            }
            match (s.attribute, s.bias_conflicting, &self.mapping) {
                (Some(a), Some(bc), Some(m)) => {
                    let dictated = *m.get(a).ok_or_else(|| {
                        Error::InvalidConfig(format!("sample {} attribute {} out of range", s.id, a))
                    })?;
                    if bc != (dictated != s.label) {
                        return Err(Error::InvalidConfig(format!(
                            "sample {} bias_conflicting flag disagrees with mapping",
                            s.id
                        )));
                    }
                }
                (Some(_), None, _) => {
                    return Err(Error::InvalidConfig(format!(
                        "sample {} has an attribute but no bias_conflicting flag",
                        s.id
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Features and labels of one split, ready for training.
    pub fn labeled(&self, split: Split) -> Result<LabeledSplit> {
        let idx = self.split_indices(split);
        if self.feature_dim() == 0 {
            return Err(Error::Empty("features block"));
        }
        Ok(self.labeled_with(&idx, |s| s.features.as_slice()))
    }

    fn labeled_with<'a>(&'a self, idx: &[usize], view: impl Fn(&'a Sample) -> &'a [f32]) -> LabeledSplit {
        let dim = idx.first().map_or(0, |&i| view(&self.samples[i]).len());
        let mut data = Vec::with_capacity(idx.len() * dim);
        for &i in idx {
            data.extend(view(&self.samples[i]).iter().map(|&v| f64::from(v)));
        }
        LabeledSplit {
            ids: idx.iter().map(|&i| self.samples[i].id.clone()).collect(),
            x: Matrix::from_vec(idx.len(), dim, data),
            y: idx.iter().map(|&i| self.samples[i].label).collect(),
            bias_conflicting: idx.iter().map(|&i| self.samples[i].bias_conflicting).collect(),
            num_classes: self.num_classes,
        }
    }
}

/// A split in matrix form: row `i` of `x` is sample `ids[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSplit {
    pub ids: Vec<String>,
    pub x: Matrix,
    pub y: Vec<usize>,
    pub bias_conflicting: Vec<Option<bool>>,
    pub num_classes: usize,
}

impl LabeledSplit {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn class_indices(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.y[i] == class).collect()
    }

    pub fn distinct_classes(&self) -> usize {
        self.y.iter().collect::<BTreeSet<_>>().len()
    }

    /// Same rows with features restricted to `columns`.
    pub fn with_columns(&self, columns: &[usize]) -> Self {
        let mut data = Vec::with_capacity(self.len() * columns.len());
        for r in self.x.iter_rows() {
            data.extend(columns.iter().map(|&c| r[c]));
        }
        Self {
            x: Matrix::from_vec(self.len(), columns.len(), data),
            ..self.clone()
        }
    }
}
