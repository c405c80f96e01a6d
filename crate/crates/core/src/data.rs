//! Synthetic datasets, client splits and the plain-text dataset format.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, TrainingSet};
use crate::rng;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset file, line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("split plan infeasible: {0}")]
    PlanInfeasible(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Row-major features with optional labels. Unlabeled datasets stand for
/// the public split as the federation sees it.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Option<Vec<usize>>,
    dim: usize,
    classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<f64>, labels: Option<Vec<usize>>, dim: usize, classes: usize) -> Result<Self, DataError> {
        if dim == 0 || classes < 2 {
            return Err(DataError::Invalid(format!("need d >= 1 and c >= 2, got d={dim} c={classes}")));
        }
        if features.is_empty() || features.len() % dim != 0 {
            return Err(DataError::Invalid(format!(
                "{} feature values do not form rows of {dim}",
                features.len()
            )));
        }
        if let Some(i) = features.iter().position(|v| !v.is_finite()) {
            return Err(DataError::Invalid(format!("non-finite feature in row {}", i / dim)));
        }
        let rows = features.len() / dim;
        if let Some(l) = &labels {
            if l.len() != rows {
                return Err(DataError::Invalid(format!("{} labels for {rows} rows", l.len())));
            }
            if let Some(bad) = l.iter().find(|&&y| y >= classes) {
                return Err(DataError::Invalid(format!("label {bad} outside [0, {classes})")));
            }
        }
        Ok(Self { features, labels, dim, classes })
    }

    pub fn len(&self) -> usize {
        self.features.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        let labels = self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect());
        Self { features, labels, ..*self }
    }

    pub fn without_labels(&self) -> Self {
        Self { features: self.features.clone(), labels: None, ..*self }
    }

    /// One-hot training targets. Fails on an unlabeled dataset.
    pub fn training_set(&self) -> Result<TrainingSet, ModelError> {
        let labels = self.labels.as_ref().ok_or(ModelError::EmptyDataset)?;
        TrainingSet::from_labels(self.features.clone(), labels, self.dim, self.classes)
    }

    /// Text form: a header `M d c`, then per row the `d` features and the
    /// label, or `?` when unlabeled.
    pub fn to_text(&self) -> String {
        let mut out = format!("{} {} {}\n", self.len(), self.dim, self.classes);
        for i in 0..self.len() {
            for v in self.row(i) {
                write!(out, "{v} ").unwrap();
            }
            match &self.labels {
                Some(l) => writeln!(out, "{}", l[i]).unwrap(),
                None => out.push_str("?\n"),
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, DataError> {
        let err = |line: usize, message: String| DataError::Parse { line, message };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l)).filter(|(_, l)| !l.trim().is_empty());
        let (line, header) = lines.next().ok_or_else(|| err(1, "missing header".into()))?;
        let head: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| err(line, format!("invalid header value `{t}`"))))
            .collect::<Result<_, _>>()?;
        let [rows, dim, classes] = head[..] else {
            return Err(err(line, "header must be `M d c`".into()));
        };
        if rows == 0 || dim == 0 || classes < 2 {
            return Err(err(line, format!("need M >= 1, d >= 1, c >= 2, got {rows} {dim} {classes}")));
        }
        let mut features = Vec::with_capacity(rows * dim);
        let mut labels = Vec::with_capacity(rows);
        let mut labeled = None;
        let mut seen = 0;
        for (line, l) in lines {
            seen += 1;
            if seen > rows {
                return Err(err(line, format!("more than {rows} rows")));
            }
            let tokens: Vec<&str> = l.split_whitespace().collect();
            if tokens.len() != dim + 1 {
                return Err(err(line, format!("expected {} values, got {}", dim + 1, tokens.len())));
            }
            for t in &tokens[..dim] {
                let v: f64 = t.parse().map_err(|_| err(line, format!("invalid number `{t}`")))?;
                if !v.is_finite() {
                    return Err(err(line, format!("non-finite feature `{t}`")));
                }
                features.push(v);
            }
            let last = tokens[dim];
            let is_labeled = last != "?";
            if *labeled.get_or_insert(is_labeled) != is_labeled {
                return Err(err(line, "rows mix labeled and unlabeled".into()));
            }
            if is_labeled {
                let y: usize = last.parse().map_err(|_| err(line, format!("invalid label `{last}`")))?;
                if y >= classes {
                    return Err(err(line, format!("label {y} outside [0, {classes})")));
                }
                labels.push(y);
            }
        }
        if seen != rows {
            return Err(err(text.lines().count() + 1, format!("expected {rows} rows, got {seen}")));
        }
        let labels = (labeled == Some(true)).then_some(labels);
        Self::new(features, labels, dim, classes)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, DataError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        Ok(std::fs::write(path, self.to_text())?)
    }
}

/// Isotropic Gaussian clusters, one per class.
///
/// Centers are random directions scaled to unit norm, drawn from the seed,
/// so pairwise class distances differ. Rows are ordered class by class.
pub fn make_blobs(classes: usize, dim: usize, per_class: usize, spread: f64, seed: u64) -> Result<Dataset, DataError> {
    if classes < 2 || dim < 2 || per_class == 0 {
        return Err(DataError::Invalid(format!(
            "need c >= 2, d >= 2 and a positive class count, got c={classes} d={dim} n={per_class}"
        )));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(DataError::Invalid(format!("spread must be non-negative, got {spread}")));
    }
    let mut rng = rng::stream(&[rng::domain::DATA, seed]);
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= norm);
            v
        })
        .collect();
    let mut features = Vec::with_capacity(classes * per_class * dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    for (k, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            for c in center {
                let z: f64 = StandardNormal.sample(&mut rng);
                features.push(c + spread * z);
            }
            labels.push(k);
        }
    }
    Dataset::new(features, Some(labels), dim, classes)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub clients: usize,
    pub private: f64,
    pub public: f64,
    pub validation: f64,
    pub test: f64,
    pub seed: u64,
}

impl SplitPlan {
    /// Sizes of (private total, public, validation, test) for `m` rows.
    pub fn counts(&self, m: usize) -> Result<[usize; 4], DataError> {
        let fractions = [self.private, self.public, self.validation, self.test];
        if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(DataError::PlanInfeasible(format!("fractions must lie in [0, 1]: {fractions:?}")));
        }
        let total: f64 = fractions.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(DataError::PlanInfeasible(format!("fractions sum to {total}, not 1")));
        }
        if self.clients == 0 {
            return Err(DataError::PlanInfeasible("no clients".into()));
        }
        let public = (self.public * m as f64).round() as usize;
        let validation = (self.validation * m as f64).round() as usize;
        let test = (self.test * m as f64).round() as usize;
        let private = m
            .checked_sub(public + validation + test)
            .ok_or_else(|| DataError::PlanInfeasible(format!("{m} rows are too few for the plan")))?;
        for (name, n) in [("public", public), ("validation", validation), ("test", test)] {
            if n == 0 {
                return Err(DataError::PlanInfeasible(format!("{name} split of {m} rows is empty")));
            }
        }
        if private < self.clients {
            return Err(DataError::PlanInfeasible(format!(
                "{private} private rows for {} clients",
                self.clients
            )));
        }
        Ok([private, public, validation, test])
    }
}

/// Row indices of every split into the original dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub private: Vec<Vec<usize>>,
    pub public: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle of `0..m` cut into the plan's splits. Private rows are
/// shared evenly, the first `r` clients taking one extra when `N` does
/// not divide them.
pub fn split_indices(m: usize, plan: &SplitPlan) -> Result<SplitIndices, DataError> {
    let [private, public, validation, test] = plan.counts(m)?;
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut rng::stream(&[rng::domain::SPLIT, plan.seed]));
    let (test_idx, rest) = order.split_at(test);
    let (val_idx, rest) = rest.split_at(validation);
    let (pub_idx, rest) = rest.split_at(public);
    let n = plan.clients;
    let (base, extra) = (private / n, private % n);
    let mut clients = Vec::with_capacity(n);
    let mut start = 0;
    for i in 0..n {
        let len = base + usize::from(i < extra);
        clients.push(rest[start..start + len].to_vec());
        start += len;
    }
    Ok(SplitIndices {
        private: clients,
        public: pub_idx.to_vec(),
        validation: val_idx.to_vec(),
        test: test_idx.to_vec(),
    })
}

/// The federation's view of a dataset. `public` keeps its labels for
/// metrics only; clients and the server are handed its features.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub private: Vec<Dataset>,
    pub public: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

pub fn split(ds: &Dataset, plan: &SplitPlan) -> Result<Splits, DataError> {
    if ds.labels().is_none() {
        return Err(DataError::Invalid("cannot split an unlabeled dataset".into()));
    }
    let idx = split_indices(ds.len(), plan)?;
    Ok(Splits {
        private: idx.private.iter().map(|c| ds.subset(c)).collect(),
        public: ds.subset(&idx.public),
        validation: ds.subset(&idx.validation),
        test: ds.subset(&idx.test),
    })
}
