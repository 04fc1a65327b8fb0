//! Subject-level records and the per-modality matrices the model consumes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor2;

pub const N_MODALITIES: usize = 4;

/// Number of binary metadata inputs (priming, sex).
pub const N_META: usize = 2;

/// Missing Task-2 label.
pub const MISSING_LABEL: i8 = -1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Antibody,
    Cytokine,
    Cell,
    Gene,
}

/// Measurement scale of a raw assay, which decides the fold-change form.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Linear,
    Log,
}

impl Modality {
    pub const ALL: [Modality; N_MODALITIES] = [
        Modality::Antibody,
        Modality::Cytokine,
        Modality::Cell,
        Modality::Gene,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Modality {
        Modality::ALL[i]
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Antibody => "antibody",
            Modality::Cytokine => "cytokine",
            Modality::Cell => "cell",
            Modality::Gene => "gene",
        }
    }

    pub fn scale(self) -> Scale {
        match self {
            Modality::Antibody | Modality::Cell => Scale::Linear,
            Modality::Cytokine | Modality::Gene => Scale::Log,
        }
    }

    /// Days used as model inputs: baseline first, then the fold-change days.
    pub fn input_days(self) -> &'static [u32] {
        match self {
            Modality::Antibody => &[0, 3, 7, 30],
            Modality::Cytokine => &[0, 1, 7, 14],
            Modality::Cell => &[0, 1, 3, 14],
            Modality::Gene => &[0, 7, 14],
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "antibody" => Ok(Modality::Antibody),
            "cytokine" => Ok(Modality::Cytokine),
            "cell" | "cell_freq" | "cell_frequency" => Ok(Modality::Cell),
            "gene" | "gene_expr" | "gene_expression" => Ok(Modality::Gene),
            other => Err(Error::data(format!("unknown modality '{other}'"))),
        }
    }
}

/// Presence bit per modality, indexed by [`Modality::index`].
pub type PresenceMask = [bool; N_MODALITIES];

pub fn mask_count(mask: &PresenceMask) -> usize {
    mask.iter().filter(|&&b| b).count()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fold {
    Train,
    Val,
    Test,
}

impl Fold {
    pub fn name(self) -> &'static str {
        match self {
            Fold::Train => "train",
            Fold::Val => "val",
            Fold::Test => "test",
        }
    }
}

impl FromStr for Fold {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Fold::Train),
            "val" => Ok(Fold::Val),
            "test" => Ok(Fold::Test),
            other => Err(Error::data(format!("unknown fold '{other}'"))),
        }
    }
}

/// Childhood pertussis priming.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Priming {
    #[serde(rename = "wP")]
    WholeCell,
    #[serde(rename = "aP")]
    Acellular,
}

impl FromStr for Priming {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wP" => Ok(Priming::WholeCell),
            "aP" => Ok(Priming::Acellular),
            other => Err(Error::data(format!("infancy_vac must be wP or aP, got '{other}'"))),
        }
    }
}

impl Priming {
    pub fn code(self) -> &'static str {
        match self {
            Priming::WholeCell => "wP",
            Priming::Acellular => "aP",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sex {
    Female,
    Male,
}

impl FromStr for Sex {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "female" | "f" => Ok(Sex::Female),
            "male" | "m" => Ok(Sex::Male),
            other => Err(Error::data(format!("unknown sex '{other}'"))),
        }
    }
}

impl Sex {
    pub fn code(self) -> &'static str {
        match self {
            Sex::Female => "Female",
            Sex::Male => "Male",
        }
    }
}

/// One modeled subject.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: String,
    pub cohort_year: Option<i32>,
    pub infancy_vac: Priming,
    pub sex: Sex,
    pub y1: u8,
    /// 0, 1, or [`MISSING_LABEL`].
    pub y2: i8,
    pub present: PresenceMask,
    pub fold: Fold,
}

impl SubjectRecord {
    /// Binary metadata vector: wP = 1, male = 1.
    pub fn metadata(&self) -> [f64; N_META] {
        [
            if self.infancy_vac == Priming::WholeCell { 1.0 } else { 0.0 },
            if self.sex == Sex::Male { 1.0 } else { 0.0 },
        ]
    }

    pub fn has_y2(&self) -> bool {
        self.y2 != MISSING_LABEL
    }
}

/// Numeric table for one modality, row-aligned to the cohort's subjects.
/// Rows of absent subjects hold placeholder values that are never read by
/// the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityMatrix {
    pub modality: Modality,
    pub values: Tensor2,
}

impl ModalityMatrix {
    pub fn dim(&self) -> usize {
        self.values.cols()
    }
}

/// Everything the trainer and evaluators need: records plus four matrices.
#[derive(Clone, Debug)]
pub struct Cohort {
    pub subjects: Vec<SubjectRecord>,
    pub modalities: [ModalityMatrix; N_MODALITIES],
}

impl Cohort {
    pub fn new(subjects: Vec<SubjectRecord>, modalities: [ModalityMatrix; N_MODALITIES]) -> Result<Self> {
        for (m, mat) in modalities.iter().enumerate() {
            if mat.modality.index() != m {
                return Err(Error::config(format!(
                    "modality matrix {m} is labeled {}",
                    mat.modality
                )));
            }
            if mat.values.rows() != subjects.len() {
                return Err(Error::data(format!(
                    "{} matrix has {} rows for {} subjects",
                    mat.modality,
                    mat.values.rows(),
                    subjects.len()
                )));
            }
        }
        for s in &subjects {
            if s.y1 > 1 {
                return Err(Error::data(format!("subject {}: y1 must be 0/1", s.id)));
            }
            if !(s.y2 == MISSING_LABEL || s.y2 == 0 || s.y2 == 1) {
                return Err(Error::data(format!("subject {}: y2 must be -1/0/1", s.id)));
            }
        }
        Ok(Cohort {
            subjects,
            modalities,
        })
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn dims(&self) -> [usize; N_MODALITIES] {
        std::array::from_fn(|m| self.modalities[m].dim())
    }

    pub fn fold_indices(&self, fold: Fold) -> Vec<usize> {
        self.subjects
            .iter()
            .enumerate()
            .filter(|(_, s)| s.fold == fold)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn y1(&self, idx: &[usize]) -> Vec<u8> {
        idx.iter().map(|&i| self.subjects[i].y1).collect()
    }

    pub fn y2(&self, idx: &[usize]) -> Vec<i8> {
        idx.iter().map(|&i| self.subjects[i].y2).collect()
    }

    /// Per-modality missing fraction over `idx`.
    pub fn missing_rates(&self, idx: &[usize]) -> [f64; N_MODALITIES] {
        std::array::from_fn(|m| {
            let miss = idx.iter().filter(|&&i| !self.subjects[i].present[m]).count();
            miss as f64 / idx.len().max(1) as f64
        })
    }

    /// Replaces both label vectors (used by the permutation test).
    pub fn with_labels(&self, y1: &[u8], y2: &[i8]) -> Cohort {
        let mut out = self.clone();
        for (s, (&a, &b)) in out.subjects.iter_mut().zip(y1.iter().zip(y2)) {
            s.y1 = a;
            s.y2 = b;
        }
        out
    }
}
