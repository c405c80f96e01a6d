//! Byzantine prediction generators.
//!
//! Byzantine clients see every honest prediction before answering and they
//! collude: all of them send the same vector for a given sample. The FD
//! attacks here map the honest predictions at one public sample to that
//! vector; the two FedAvg attacks replace a client's parameter vector.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{loss_between, LossKind, ModelParams};
use crate::rng;
use crate::simplex::{self, ProbVector, SimplexError};

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("no honest predictions to attack")]
    EmptyInput,
    #[error("similarity needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("noise scale must be positive, got {0}")]
    InvalidScale(f64),
    #[error("invalid attack specification: {0}")]
    InvalidSpec(String),
    #[error("invalid similarity matrix: {0}")]
    InvalidMatrix(String),
    #[error("similarity file, line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Simplex(#[from] SimplexError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttackKind {
    #[serde(rename = "NONE")]
    None,
    #[serde(rename = "RLF")]
    Rlf,
    #[serde(rename = "LMA")]
    Lma,
    #[serde(rename = "CPA")]
    Cpa,
    #[serde(rename = "HIPS_LMA")]
    HipsLma,
    #[serde(rename = "HIPS_CPA")]
    HipsCpa,
    #[serde(rename = "FEDAVG_GAUSS")]
    FedavgGauss,
    #[serde(rename = "FEDAVG_TAKEOVER")]
    FedavgTakeover,
}

impl AttackKind {
    pub const ALL: [AttackKind; 8] = [
        AttackKind::None,
        AttackKind::Rlf,
        AttackKind::Lma,
        AttackKind::Cpa,
        AttackKind::HipsLma,
        AttackKind::HipsCpa,
        AttackKind::FedavgGauss,
        AttackKind::FedavgTakeover,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::None => "NONE",
            AttackKind::Rlf => "RLF",
            AttackKind::Lma => "LMA",
            AttackKind::Cpa => "CPA",
            AttackKind::HipsLma => "HIPS_LMA",
            AttackKind::HipsCpa => "HIPS_CPA",
            AttackKind::FedavgGauss => "FEDAVG_GAUSS",
            AttackKind::FedavgTakeover => "FEDAVG_TAKEOVER",
        }
    }

    pub fn uses_loss(self) -> bool {
        matches!(self, AttackKind::Lma | AttackKind::HipsLma)
    }

    pub fn uses_similarity(self) -> bool {
        matches!(self, AttackKind::Cpa | AttackKind::HipsCpa)
    }

    /// Attacks that replace parameters rather than predictions.
    pub fn is_fedavg(self) -> bool {
        matches!(self, AttackKind::FedavgGauss | AttackKind::FedavgTakeover)
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttackKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown attack kind `{s}`"))
    }
}

/// Where CPA gets its class similarity matrix from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SimilaritySource {
    /// Covariance of predictions made by a model trained centrally on the
    /// full training split before the run.
    Pretrained,
    /// A matrix file in the plain-text similarity format.
    File(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    /// Required by LMA and HIPS_LMA only.
    pub loss: Option<LossKind>,
    /// Required by CPA and HIPS_CPA only.
    pub similarity: Option<SimilaritySource>,
    /// Standard deviation of the FEDAVG_GAUSS noise.
    pub noise_scale: Option<f64>,
    pub seed: u64,
}

impl AttackSpec {
    pub fn none() -> Self {
        Self {
            kind: AttackKind::None,
            loss: None,
            similarity: None,
            noise_scale: None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        let bad = |m: String| Err(AttackError::InvalidSpec(m));
        if self.kind.uses_loss() != self.loss.is_some() {
            return bad(format!(
                "a loss kind is required for LMA/HIPS_LMA and not allowed for {}",
                self.kind
            ));
        }
        if self.kind.uses_similarity() != self.similarity.is_some() {
            return bad(format!(
                "a similarity source is required for CPA/HIPS_CPA and not allowed for {}",
                self.kind
            ));
        }
        match (self.kind, self.noise_scale) {
            (AttackKind::FedavgGauss, Some(s)) if s > 0.0 && s.is_finite() => Ok(()),
            (AttackKind::FedavgGauss, Some(s)) => Err(AttackError::InvalidScale(s)),
            (AttackKind::FedavgGauss, None) => bad("FEDAVG_GAUSS needs a noise scale".into()),
            (_, Some(_)) => bad(format!("noise scale is not used by {}", self.kind)),
            (_, None) => Ok(()),
        }
    }
}

/// Symmetric class-similarity matrix used by CPA.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    classes: usize,
    data: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn new(classes: usize, data: Vec<f64>) -> Result<Self, AttackError> {
        if classes < 2 {
            return Err(AttackError::InvalidMatrix(format!("need at least 2 classes, got {classes}")));
        }
        if data.len() != classes * classes {
            return Err(AttackError::InvalidMatrix(format!(
                "expected {} entries, got {}",
                classes * classes,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(AttackError::InvalidMatrix("non-finite entry".into()));
        }
        for i in 0..classes {
            for j in 0..i {
                if (data[i * classes + j] - data[j * classes + i]).abs() > 1e-9 {
                    return Err(AttackError::InvalidMatrix(format!("not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Self { classes, data })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.classes + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.classes..(i + 1) * self.classes]
    }

    /// Parses the text format: a line holding `c`, then `c` rows of `c`
    /// whitespace-separated reals.
    pub fn parse(text: &str) -> Result<Self, AttackError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty());
        let (line, header) = lines.next().ok_or(AttackError::Parse {
            line: 1,
            message: "missing class count".into(),
        })?;
        let classes: usize = header.parse().map_err(|_| AttackError::Parse {
            line,
            message: format!("invalid class count `{header}`"),
        })?;
        let mut data = Vec::with_capacity(classes * classes);
        let mut rows = 0;
        for (line, l) in lines {
            let row: Vec<f64> = l
                .split_whitespace()
                .map(|t| {
                    t.parse().map_err(|_| AttackError::Parse {
                        line,
                        message: format!("invalid number `{t}`"),
                    })
                })
                .collect::<Result<_, _>>()?;
            if row.len() != classes {
                return Err(AttackError::Parse {
                    line,
                    message: format!("expected {classes} values, got {}", row.len()),
                });
            }
            rows += 1;
            if rows > classes {
                return Err(AttackError::Parse {
                    line,
                    message: format!("more than {classes} rows"),
                });
            }
            data.extend(row);
        }
        if rows != classes {
            return Err(AttackError::Parse {
                line: rows + 2,
                message: format!("expected {classes} rows, got {rows}"),
            });
        }
        Self::new(classes, data)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{}\n", self.classes);
        for i in 0..self.classes {
            let row: Vec<String> = self.row(i).iter().map(|v| v.to_string()).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, AttackError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), AttackError> {
        Ok(std::fs::write(path, self.to_text())?)
    }
}

fn raw_mean(points: &[&[f64]]) -> Vec<f64> {
    let c = points[0].len();
    let mut mean = vec![0.0; c];
    for p in points {
        for (m, v) in mean.iter_mut().zip(*p) {
            *m += v;
        }
    }
    let inv = 1.0 / points.len() as f64;
    mean.iter_mut().for_each(|m| *m *= inv);
    mean
}

/// Arithmetic mean of the honest predictions at one sample.
pub fn honest_mean(points: &[&[f64]]) -> Result<ProbVector, AttackError> {
    if points.is_empty() {
        return Err(AttackError::EmptyInput);
    }
    Ok(ProbVector::new(raw_mean(points))?)
}

/// Random label flip: one uniformly drawn class per `(seed, sample)`.
pub fn rlf(classes: usize, seed: u64, sample: usize) -> ProbVector {
    let mut rng = rng::stream(&[rng::domain::ATTACK, seed, sample as u64]);
    ProbVector::vertex(classes, rng.random_range(0..classes))
}

/// Server loss when the byzantine fraction `alpha` sends `candidate` and the
/// honest clients average to `honest_mean`; the quantity LMA maximizes.
pub fn lma_objective(honest_mean: &[f64], candidate: &[f64], alpha: f64, kind: LossKind) -> f64 {
    let mixed: Vec<f64> = honest_mean
        .iter()
        .zip(candidate)
        .map(|(h, b)| (1.0 - alpha) * h + alpha * b)
        .collect();
    loss_between(kind, &mixed, honest_mean)
}

/// Loss maximization attack: the one-hot vector on the least likely class
/// of the honest mean. This maximizes [`lma_objective`] over the whole
/// simplex for both losses, for any `alpha` in `(0, 1)`.
pub fn lma(honest_mean: &ProbVector, _kind: LossKind) -> ProbVector {
    ProbVector::vertex(honest_mean.classes(), honest_mean.argmin())
}

/// Population covariance of a reference model's predictions over the
/// public set, `C = 1/n sum (Y - mean)(Y - mean)^T`.
pub fn build_similarity(predictions: &[&[f64]]) -> Result<SimilarityMatrix, AttackError> {
    if predictions.len() < 2 {
        return Err(AttackError::TooFewSamples(predictions.len()));
    }
    let c = predictions[0].len();
    let mean = raw_mean(predictions);
    let mut cov = vec![0.0; c * c];
    for p in predictions {
        for i in 0..c {
            let di = p[i] - mean[i];
            for j in i..c {
                cov[i * c + j] += di * (p[j] - mean[j]);
            }
        }
    }
    let inv = 1.0 / predictions.len() as f64;
    for i in 0..c {
        for j in i..c {
            let v = cov[i * c + j] * inv;
            cov[i * c + j] = v;
            cov[j * c + i] = v;
        }
    }
    SimilarityMatrix::new(c, cov)
}

/// Class prior attack: one-hot on the class least similar to the honest
/// mean's most likely class. The diagonal entry takes part in the argmin.
pub fn cpa(honest_mean: &ProbVector, similarity: &SimilarityMatrix) -> ProbVector {
    let row = similarity.row(honest_mean.argmax());
    ProbVector::vertex(honest_mean.classes(), simplex::argmin(row))
}

/// Candidate vertices of the convex hull of the honest predictions: the
/// predictions themselves with exact-duplicate (1e-12) repeats removed.
pub fn hips_hull(points: &[&[f64]]) -> Vec<ProbVector> {
    let mut out: Vec<ProbVector> = Vec::with_capacity(points.len());
    for p in points {
        if out.iter().all(|q| simplex::l2(q.as_slice(), p) > 1e-12) {
            out.push(ProbVector::new(p.to_vec()).expect("honest predictions lie in the simplex"));
        }
    }
    out
}

/// LMA restricted to the hull of honest predictions: the honest prediction
/// with the largest [`lma_objective`], lowest client index on ties.
pub fn hips_lma(points: &[&[f64]], honest_mean: &ProbVector, alpha: f64, kind: LossKind) -> ProbVector {
    assert!(alpha > 0.0 && alpha < 0.5, "alpha must lie in (0, 0.5)");
    let best = best_by(points, |p| lma_objective(honest_mean.as_slice(), p, alpha, kind));
    ProbVector::new(points[best].to_vec()).expect("honest predictions lie in the simplex")
}

/// CPA restricted to the hull: minimizes `y . C_i` over the honest
/// predictions, `i` being the honest mean's most likely class.
pub fn hips_cpa(points: &[&[f64]], honest_mean: &ProbVector, similarity: &SimilarityMatrix) -> ProbVector {
    let row = similarity.row(honest_mean.argmax());
    let best = best_by(points, |p| -dot(p, row));
    ProbVector::new(points[best].to_vec()).expect("honest predictions lie in the simplex")
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Index maximizing `score`, first index on ties.
fn best_by(points: &[&[f64]], score: impl Fn(&[f64]) -> f64) -> usize {
    assert!(!points.is_empty(), "no honest predictions");
    let mut best = 0;
    let mut best_score = score(points[0]);
    for (i, p) in points.iter().enumerate().skip(1) {
        let s = score(p);
        if s > best_score {
            best = i;
            best_score = s;
        }
    }
    best
}

/// Everything an FD attack may look at for one public sample.
pub struct SampleView<'a> {
    pub honest: &'a [&'a [f64]],
    pub sample: usize,
    pub alpha: f64,
    pub round_seed: u64,
    pub similarity: Option<&'a SimilarityMatrix>,
}

/// The byzantine clients' shared prediction for one sample.
///
/// Returns `None` for [`AttackKind::None`] and for parameter attacks, in
/// which case byzantine clients answer with their own model.
pub fn byzantine_prediction(spec: &AttackSpec, view: &SampleView<'_>) -> Result<Option<ProbVector>, AttackError> {
    let needs_similarity = || {
        view.similarity
            .ok_or_else(|| AttackError::InvalidSpec("CPA needs a similarity matrix".into()))
    };
    if view.honest.is_empty() {
        return Err(AttackError::EmptyInput);
    }
    let classes = view.honest[0].len();
    let out = match spec.kind {
        AttackKind::None | AttackKind::FedavgGauss | AttackKind::FedavgTakeover => return Ok(None),
        AttackKind::Rlf => rlf(classes, view.round_seed, view.sample),
        AttackKind::Lma => lma(&honest_mean(view.honest)?, loss_of(spec)?),
        AttackKind::Cpa => cpa(&honest_mean(view.honest)?, needs_similarity()?),
        AttackKind::HipsLma => hips_lma(view.honest, &honest_mean(view.honest)?, view.alpha, loss_of(spec)?),
        AttackKind::HipsCpa => hips_cpa(view.honest, &honest_mean(view.honest)?, needs_similarity()?),
    };
    Ok(Some(out))
}

fn loss_of(spec: &AttackSpec) -> Result<LossKind, AttackError> {
    spec.loss
        .ok_or_else(|| AttackError::InvalidSpec(format!("{} needs a loss kind", spec.kind)))
}

/// I.i.d. `N(0, scale^2)` parameters in place of a trained model.
pub fn fedavg_gauss(count: usize, scale: f64, seed: u64) -> Result<Vec<f64>, AttackError> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(AttackError::InvalidScale(scale));
    }
    let normal = Normal::new(0.0, scale).map_err(|_| AttackError::InvalidScale(scale))?;
    let mut rng = rng::stream(&[rng::domain::FEDAVG_NOISE, seed]);
    Ok((0..count).map(|_| normal.sample(&mut rng)).collect())
}

/// Parameters `N * target - sum(others)` so that the mean over all `N`
/// clients equals `target`. `others` must hold the other `N - 1` updates.
pub fn fedavg_takeover(target: &ModelParams, others: &[&ModelParams], clients: usize) -> ModelParams {
    assert_eq!(others.len() + 1, clients, "takeover needs every other update");
    let mut sum = vec![0.0; target.len()];
    for o in others {
        for (s, v) in sum.iter_mut().zip(o.values()) {
            *s += v;
        }
    }
    let n = clients as f64;
    let values = target
        .values()
        .iter()
        .zip(&sum)
        .map(|(t, s)| t * n - s)
        .collect();
    ModelParams::from_values(target.arch().clone(), values).expect("same architecture")
}
