//! Data model for visits and medical codes, JSON-Lines ingestion, the
//! basic/extra feature partition, and a synthetic cohort generator with an
//! exact naive-Bayes scoring oracle.

mod synthetic;

pub use synthetic::{bayes_optimal_scores, generate_synthetic, Scenario, SyntheticConfig};

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const COHORT_FORMAT: &str = "hypercare-cohort-v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Basic,
    Extra,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    BasicOnly,
    Extra,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    PretrainTrain,
    FinetuneTrain,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 4] = [
        Split::PretrainTrain,
        Split::FinetuneTrain,
        Split::Validation,
        Split::Test,
    ];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Split::PretrainTrain => "pretrain_train",
            Split::FinetuneTrain => "finetune_train",
            Split::Validation => "validation",
            Split::Test => "test",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MedicalCode {
    pub id: usize,
    pub name: String,
    pub tier: Tier,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Visit {
    pub visit_id: u64,
    /// Sorted, duplicate-free code ids.
    pub codes: Vec<usize>,
    /// One 0/1 entry per prediction target.
    pub labels: Vec<u8>,
    pub group: Group,
    pub split: Split,
}

/// Immutable collection of visits over a fixed code vocabulary.
///
/// Basic-tier codes occupy ids `[0, num_basic)`, extra-tier codes the rest;
/// every referenced code id exists, and splits partition the visits.
#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    pub codes: Vec<MedicalCode>,
    pub visits: Vec<Visit>,
    pub num_labels: usize,
}

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("cohort has no visit records")]
    EmptyCohort,
    #[error("line {line}: visit references unknown code id {code_id} (|C| = {vocab})")]
    UnknownCode {
        line: usize,
        code_id: usize,
        vocab: usize,
    },
    #[error("line {line}: label vector has length {got}, expected {expected}")]
    RaggedLabels {
        line: usize,
        got: usize,
        expected: usize,
    },
    #[error("line {line}: malformed record: {msg}")]
    MalformedRecord { line: usize, msg: String },
    #[error("visit {visit_id} has no basic-tier codes; masking would empty it")]
    EmptyAfterMask { visit_id: u64 },
    #[error("infeasible synthetic config: {0}")]
    InfeasibleConfig(String),
    #[error("cohort/config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("invalid cohort: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    format: String,
    num_labels: usize,
    codes: Vec<MedicalCode>,
}

#[derive(Serialize, Deserialize)]
struct VisitLine {
    visit_id: u64,
    codes: Vec<usize>,
    labels: Vec<u8>,
    group: Group,
    split: Split,
}

impl Cohort {
    pub fn num_codes(&self) -> usize {
        self.codes.len()
    }

    /// Number of basic-tier codes; they always precede extra-tier ones.
    pub fn num_basic(&self) -> usize {
        self.codes.iter().filter(|c| c.tier == Tier::Basic).count()
    }

    pub fn num_extra(&self) -> usize {
        self.codes.len() - self.num_basic()
    }

    pub fn is_basic(&self, code_id: usize) -> bool {
        code_id < self.num_basic()
    }

    pub fn visits_in(&self, split: Split) -> impl Iterator<Item = &Visit> {
        self.visits.iter().filter(move |v| v.split == split)
    }

    /// Validates every type invariant; loaders and the generator call this
    /// before handing a cohort out.
    pub fn validate(&self) -> Result<(), CohortError> {
        if self.visits.is_empty() {
            return Err(CohortError::EmptyCohort);
        }
        if self.num_labels == 0 {
            return Err(CohortError::Invalid("num_labels must be >= 1".into()));
        }
        for (i, code) in self.codes.iter().enumerate() {
            if code.id != i {
                return Err(CohortError::Invalid(format!(
                    "code ids must be contiguous from 0; position {i} holds id {}",
                    code.id
                )));
            }
        }
        let num_basic = self.num_basic();
        if self.codes[..num_basic].iter().any(|c| c.tier != Tier::Basic)
            || self.codes[num_basic..].iter().any(|c| c.tier != Tier::Extra)
        {
            return Err(CohortError::Invalid(
                "basic-tier codes must precede all extra-tier codes".into(),
            ));
        }
        let mut seen_ids = std::collections::BTreeSet::new();
        let mut any_extra_visit = false;
        for v in &self.visits {
            if !seen_ids.insert(v.visit_id) {
                return Err(CohortError::Invalid(format!(
                    "duplicate visit id {}",
                    v.visit_id
                )));
            }
            if v.codes.is_empty() {
                return Err(CohortError::Invalid(format!(
                    "visit {} has an empty code set",
                    v.visit_id
                )));
            }
            if v.codes.windows(2).any(|w| w[0] >= w[1]) {
                return Err(CohortError::Invalid(format!(
                    "visit {} code set is not sorted/unique",
                    v.visit_id
                )));
            }
            if let Some(&max) = v.codes.last() {
                if max >= self.codes.len() {
                    return Err(CohortError::Invalid(format!(
                        "visit {} references unknown code {max}",
                        v.visit_id
                    )));
                }
            }
            if v.labels.len() != self.num_labels {
                return Err(CohortError::Invalid(format!(
                    "visit {} has {} labels, cohort declares {}",
                    v.visit_id,
                    v.labels.len(),
                    self.num_labels
                )));
            }
            if v.labels.iter().any(|&l| l > 1) {
                return Err(CohortError::Invalid(format!(
                    "visit {} has a label outside {{0,1}}",
                    v.visit_id
                )));
            }
            if v.group == Group::BasicOnly && v.codes.iter().any(|&c| c >= num_basic) {
                return Err(CohortError::Invalid(format!(
                    "basic-only visit {} carries extra-tier codes",
                    v.visit_id
                )));
            }
            any_extra_visit |= v.group == Group::Extra;
        }
        if self.num_extra() > 0 && !any_extra_visit {
            return Err(CohortError::Invalid(
                "extra-tier codes exist but no visit has group=extra".into(),
            ));
        }
        Ok(())
    }
}

/// Reads the JSON-Lines cohort format: a header record followed by one
/// visit record per line.
pub fn load_cohort(path: &Path) -> Result<Cohort, CohortError> {
    let file = fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let header_text = lines
        .next()
        .ok_or(CohortError::EmptyCohort)?
        .map_err(CohortError::Io)?;
    let header: HeaderLine =
        serde_json::from_str(&header_text).map_err(|e| CohortError::MalformedRecord {
            line: 1,
            msg: e.to_string(),
        })?;
    if header.format != COHORT_FORMAT {
        return Err(CohortError::MalformedRecord {
            line: 1,
            msg: format!("unsupported format {:?}", header.format),
        });
    }
    let vocab = header.codes.len();

    let mut visits = Vec::new();
    let mut num_labels: Option<usize> = None;
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let text = line.map_err(CohortError::Io)?;
        if text.trim().is_empty() {
            continue;
        }
        let record: VisitLine =
            serde_json::from_str(&text).map_err(|e| CohortError::MalformedRecord {
                line: line_no,
                msg: e.to_string(),
            })?;
        for &c in &record.codes {
            if c >= vocab {
                return Err(CohortError::UnknownCode {
                    line: line_no,
                    code_id: c,
                    vocab,
                });
            }
        }
        let expected = *num_labels.get_or_insert(record.labels.len());
        if record.labels.len() != expected {
            return Err(CohortError::RaggedLabels {
                line: line_no,
                got: record.labels.len(),
                expected,
            });
        }
        let mut codes = record.codes;
        codes.sort_unstable();
        codes.dedup();
        visits.push(Visit {
            visit_id: record.visit_id,
            codes,
            labels: record.labels,
            group: record.group,
            split: record.split,
        });
    }
    if visits.is_empty() {
        return Err(CohortError::EmptyCohort);
    }
    let inferred = num_labels.unwrap_or(header.num_labels);
    if inferred != header.num_labels {
        return Err(CohortError::RaggedLabels {
            line: 2,
            got: inferred,
            expected: header.num_labels,
        });
    }
    let cohort = Cohort {
        codes: header.codes,
        visits,
        num_labels: inferred,
    };
    cohort.validate()?;
    Ok(cohort)
}

/// Writes the canonical JSON-Lines form; `load_cohort(save_cohort(c)) == c`.
pub fn save_cohort(cohort: &Cohort, path: &Path) -> Result<(), CohortError> {
    let mut out = fs::File::create(path)?;
    let header = HeaderLine {
        format: COHORT_FORMAT.to_string(),
        num_labels: cohort.num_labels,
        codes: cohort.codes.clone(),
    };
    writeln!(out, "{}", serde_json::to_string(&header).expect("header serializes"))?;
    for v in &cohort.visits {
        let line = VisitLine {
            visit_id: v.visit_id,
            codes: v.codes.clone(),
            labels: v.labels.clone(),
            group: v.group,
            split: v.split,
        };
        writeln!(out, "{}", serde_json::to_string(&line).expect("visit serializes"))?;
    }
    Ok(())
}

/// Intersects every visit's code set with the basic tier. Group tags,
/// labels and the vocabulary are unchanged; extra codes simply become
/// incident to no visit.
pub fn mask_to_basic(cohort: &Cohort) -> Result<Cohort, CohortError> {
    let num_basic = cohort.num_basic();
    let mut masked = cohort.clone();
    for v in &mut masked.visits {
        v.codes.retain(|&c| c < num_basic);
        if v.codes.is_empty() {
            return Err(CohortError::EmptyAfterMask {
                visit_id: v.visit_id,
            });
        }
    }
    Ok(masked)
}

/// The seven headline rows of the dataset statistics table plus the full
/// split-by-group matrix. Feature counts are *incident* codes (codes that
/// appear in at least one visit), so a masked cohort reports zero extra
/// features.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CohortStats {
    pub basic_features: usize,
    pub extra_features: usize,
    pub health_records: usize,
    pub train_basic_only: usize,
    pub train_extra: usize,
    pub validation: usize,
    pub test: usize,
    pub per_split_group: BTreeMap<String, usize>,
}

pub fn cohort_stats(cohort: &Cohort) -> CohortStats {
    let num_basic = cohort.num_basic();
    let mut incident = vec![false; cohort.num_codes()];
    for v in &cohort.visits {
        for &c in &v.codes {
            incident[c] = true;
        }
    }
    let basic_features = incident[..num_basic].iter().filter(|&&b| b).count();
    let extra_features = incident[num_basic..].iter().filter(|&&b| b).count();

    let mut per_split_group = BTreeMap::new();
    let mut count = |split: Split, group: Group| {
        let n = cohort
            .visits
            .iter()
            .filter(|v| v.split == split && v.group == group)
            .count();
        let tag = match group {
            Group::BasicOnly => "basic_only",
            Group::Extra => "extra",
        };
        per_split_group.insert(format!("{split}/{tag}"), n);
        n
    };
    let train_basic_only =
        count(Split::PretrainTrain, Group::BasicOnly) + count(Split::FinetuneTrain, Group::BasicOnly);
    let train_extra =
        count(Split::PretrainTrain, Group::Extra) + count(Split::FinetuneTrain, Group::Extra);
    let validation =
        count(Split::Validation, Group::BasicOnly) + count(Split::Validation, Group::Extra);
    let test = count(Split::Test, Group::BasicOnly) + count(Split::Test, Group::Extra);

    CohortStats {
        basic_features,
        extra_features,
        health_records: cohort.visits.len(),
        train_basic_only,
        train_extra,
        validation,
        test,
        per_split_group,
    }
}
