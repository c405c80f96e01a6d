//! Aggregation of client predictions on the public set.
//!
//! The per-sample rules (mean, geometric median, Cronus) each reduce one
//! column of a [`PredictionSet`] to a single label. ExpGuard instead keeps a
//! weight per client across rounds and returns the weighted mean, scoring
//! clients with one of the per-sample rules.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::simplex::{self, PredictionSet, ProbVector, SimplexError};

pub const GM_TOLERANCE: f64 = 1e-9;
pub const GM_MAX_ITER: usize = 500;
const GM_EPSILON: f64 = 1e-12;
const POWER_TOLERANCE: f64 = 1e-10;
const POWER_MAX_ITER: usize = 1000;
/// Covariance traces below this are treated as all clients agreeing.
const DEGENERATE_TRACE: f64 = 1e-24;

#[derive(Debug, Error)]
pub enum DefenceError {
    #[error("no client predictions to aggregate")]
    EmptyInput,
    #[error("need at least {needed} clients, got {got}")]
    TooFewClients { needed: usize, got: usize },
    #[error("expected {expected} weights or scores, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("invalid weight or score {value} at client {index}")]
    InvalidValue { index: usize, value: f64 },
    #[error("invalid defence specification: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Simplex(#[from] SimplexError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DefenceKind {
    Mean,
    Gm,
    Cronus,
    FilterScore,
}

impl DefenceKind {
    pub fn name(self) -> &'static str {
        match self {
            DefenceKind::Mean => "MEAN",
            DefenceKind::Gm => "GM",
            DefenceKind::Cronus => "CRONUS",
            DefenceKind::FilterScore => "FILTER_SCORE",
        }
    }
}

impl FromStr for DefenceKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [DefenceKind::Mean, DefenceKind::Gm, DefenceKind::Cronus, DefenceKind::FilterScore]
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown defence kind `{s}`"))
    }
}

/// How summed outlier scores are rescaled before the exponential update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreScale {
    /// Divide by the largest score, so scores lie in `[0, 1]`.
    Max,
    /// Subtract the smallest score, then divide by the range. The least
    /// suspicious client keeps its weight and the most suspicious loses a
    /// factor `e` per round, whatever the spread of the raw scores.
    #[default]
    MinMax,
    /// Divide by the number of public samples: the per-sample average.
    PerSample,
    /// Summed scores as they are.
    Raw,
}

impl ScoreScale {
    pub fn name(self) -> &'static str {
        match self {
            ScoreScale::Max => "max",
            ScoreScale::MinMax => "min_max",
            ScoreScale::PerSample => "per_sample",
            ScoreScale::Raw => "raw",
        }
    }
}

impl FromStr for ScoreScale {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [ScoreScale::Max, ScoreScale::MinMax, ScoreScale::PerSample, ScoreScale::Raw]
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown score scale `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DefenceSpec {
    pub kind: DefenceKind,
    pub expguard: bool,
    #[serde(default)]
    pub scale: ScoreScale,
}

impl DefenceSpec {
    pub const fn plain(kind: DefenceKind) -> Self {
        Self { kind, expguard: false, scale: ScoreScale::MinMax }
    }

    pub const fn expguard(kind: DefenceKind) -> Self {
        Self { kind, expguard: true, scale: ScoreScale::MinMax }
    }

    pub fn validate(&self) -> Result<(), DefenceError> {
        match (self.kind, self.expguard) {
            (DefenceKind::FilterScore, false) => Err(DefenceError::InvalidSpec(
                "FILTER_SCORE is only a scoring rule and needs expguard on".into(),
            )),
            (DefenceKind::Mean, true) => Err(DefenceError::InvalidSpec(
                "expguard needs a robust base (GM, CRONUS or FILTER_SCORE)".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Short label used in summaries: MEAN, GM, CRONUS, EG_GM, EG_CRONUS, EGF.
    pub fn label(&self) -> &'static str {
        match (self.kind, self.expguard) {
            (DefenceKind::Mean, _) => "MEAN",
            (DefenceKind::Gm, false) => "GM",
            (DefenceKind::Cronus, false) => "CRONUS",
            (DefenceKind::Gm, true) => "EG_GM",
            (DefenceKind::Cronus, true) => "EG_CRONUS",
            (DefenceKind::FilterScore, _) => "EGF",
        }
    }

    /// Minimum number of clients the defence can handle.
    pub fn min_clients(&self) -> usize {
        match (self.kind, self.expguard) {
            (DefenceKind::Cronus, _) => 4,
            (_, true) => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for DefenceSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for DefenceSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let spec = match s.to_ascii_uppercase().as_str() {
            "MEAN" => Self::plain(DefenceKind::Mean),
            "GM" => Self::plain(DefenceKind::Gm),
            "CRONUS" => Self::plain(DefenceKind::Cronus),
            "EG_GM" => Self::expguard(DefenceKind::Gm),
            "EG_CRONUS" => Self::expguard(DefenceKind::Cronus),
            "EGF" | "FILTER_SCORE" => Self::expguard(DefenceKind::FilterScore),
            _ => return Err(format!("unknown defence `{s}`")),
        };
        Ok(spec)
    }
}

/// ExpGuard's per-client weights.
///
/// Weights are kept as logarithms; [`AggregatorState::weights`] rescales
/// them to sum to the number of clients. Only ratios enter the weighted
/// mean, so this never changes an aggregate, and no weight can underflow
/// to zero however many rounds are played.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatorState {
    log_weights: Vec<f64>,
    round: usize,
}

impl AggregatorState {
    pub fn new(clients: usize) -> Self {
        Self { log_weights: vec![0.0; clients], round: 0 }
    }

    pub fn from_weights(weights: &[f64], round: usize) -> Result<Self, DefenceError> {
        for (index, &value) in weights.iter().enumerate() {
            if !(value > 0.0 && value.is_finite()) {
                return Err(DefenceError::InvalidValue { index, value });
            }
        }
        Ok(Self { log_weights: weights.iter().map(|w| w.ln()).collect(), round })
    }

    pub fn clients(&self) -> usize {
        self.log_weights.len()
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    /// Weights scaled to sum to the number of clients.
    pub fn weights(&self) -> Vec<f64> {
        let n = self.log_weights.len() as f64;
        let top = self.log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let raw: Vec<f64> = self.log_weights.iter().map(|l| (l - top).exp()).collect();
        let total: f64 = raw.iter().sum();
        raw.iter().map(|r| r * n / total).collect()
    }

    /// Fraction of the total weight held by `clients`.
    pub fn share(&self, clients: &[usize]) -> f64 {
        let w = self.weights();
        let total: f64 = w.iter().sum();
        clients.iter().map(|&i| w[i]).sum::<f64>() / total
    }
}

fn check_points(points: &[&[f64]]) -> Result<usize, DefenceError> {
    let first = points.first().ok_or(DefenceError::EmptyInput)?;
    let c = first.len();
    for p in points {
        if p.len() != c {
            return Err(SimplexError::DimensionMismatch { left: c, right: p.len() }.into());
        }
    }
    Ok(c)
}

/// Weighted arithmetic mean of the predictions; unweighted when `weights`
/// is `None`. Weights must be non-negative with a positive total.
pub fn mean_agg(points: &[&[f64]], weights: Option<&[f64]>) -> Result<ProbVector, DefenceError> {
    let c = check_points(points)?;
    let mut out = vec![0.0; c];
    match weights {
        None => {
            for p in points {
                out.iter_mut().zip(*p).for_each(|(o, v)| *o += v);
            }
            let inv = 1.0 / points.len() as f64;
            out.iter_mut().for_each(|o| *o *= inv);
        }
        Some(w) => {
            if w.len() != points.len() {
                return Err(DefenceError::LengthMismatch { expected: points.len(), got: w.len() });
            }
            for (index, &value) in w.iter().enumerate() {
                if !(value >= 0.0 && value.is_finite()) {
                    return Err(DefenceError::InvalidValue { index, value });
                }
            }
            let total: f64 = w.iter().sum();
            if total <= 0.0 {
                return Err(DefenceError::InvalidValue { index: 0, value: total });
            }
            for (p, wi) in points.iter().zip(w) {
                out.iter_mut().zip(*p).for_each(|(o, v)| *o += wi * v);
            }
            out.iter_mut().for_each(|o| *o /= total);
        }
    }
    Ok(ProbVector::new(out)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeometricMedian {
    pub point: ProbVector,
    pub iterations: usize,
    /// False when `max_iter` ran out; `point` is then the best iterate seen.
    pub converged: bool,
}

/// Sum of Euclidean distances from `y` to every point.
pub fn gm_objective(points: &[&[f64]], y: &[f64]) -> f64 {
    points.iter().map(|p| simplex::l2(p, y)).sum()
}

/// Weiszfeld iteration started at the mean.
pub fn geometric_median(points: &[&[f64]], tol: f64, max_iter: usize) -> Result<GeometricMedian, DefenceError> {
    let c = check_points(points)?;
    let mut y = mean_agg(points, None)?.into_inner();
    let mut best = y.clone();
    let mut best_obj = gm_objective(points, &y);
    let mut next = vec![0.0; c];
    for it in 1..=max_iter {
        next.iter_mut().for_each(|v| *v = 0.0);
        let mut total = 0.0;
        for p in points {
            let w = 1.0 / simplex::l2(p, &y).max(GM_EPSILON);
            total += w;
            next.iter_mut().zip(*p).for_each(|(n, v)| *n += w * v);
        }
        next.iter_mut().for_each(|n| *n /= total);
        let step = simplex::l2(&next, &y);
        std::mem::swap(&mut y, &mut next);
        let obj = gm_objective(points, &y);
        if obj < best_obj {
            best_obj = obj;
            best.copy_from_slice(&y);
        }
        if step < tol {
            return Ok(GeometricMedian { point: ProbVector::new(best)?, iterations: it, converged: true });
        }
    }
    Ok(GeometricMedian { point: ProbVector::new(best)?, iterations: max_iter, converged: false })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterStats {
    pub mean: Vec<f64>,
    /// Unit leading eigenvector of the client covariance.
    pub direction: Vec<f64>,
    /// `<Y_i - mean, direction>` per client.
    pub projections: Vec<f64>,
    /// Set when all clients agree; projections are then all zero.
    pub degenerate: bool,
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

fn mat_vec(m: &[f64], v: &[f64], out: &mut [f64]) {
    let c = v.len();
    for (i, o) in out.iter_mut().enumerate() {
        *o = m[i * c..(i + 1) * c].iter().zip(v).map(|(a, b)| a * b).sum();
    }
}

fn fix_sign(v: &mut [f64]) {
    let mut k = 0;
    for i in 1..v.len() {
        if v[i].abs() > v[k].abs() {
            k = i;
        }
    }
    if v[k] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Leading eigenvector of a symmetric PSD matrix by power iteration.
///
/// Covariances of simplex points always have the all-ones direction in
/// their null space, so the start vector is mostly annihilated after one
/// product. If what survives is numerically zero the iteration restarts
/// from the coordinate axis with the largest variance.
pub(crate) fn leading_eigenvector(m: &[f64], c: usize) -> Vec<f64> {
    let trace: f64 = (0..c).map(|i| m[i * c + i]).sum();
    let mut v = vec![1.0; c];
    v[0] += 1e-3;
    normalize(&mut v);
    let mut next = vec![0.0; c];
    mat_vec(m, &v, &mut next);
    if normalize(&mut next) <= 1e-8 * trace {
        let axis = (0..c)
            .max_by(|&a, &b| m[a * c + a].total_cmp(&m[b * c + b]).then(b.cmp(&a)))
            .unwrap_or(0);
        next.iter_mut().enumerate().for_each(|(i, x)| *x = if i == axis { 1.0 } else { 0.0 });
    }
    std::mem::swap(&mut v, &mut next);
    fix_sign(&mut v);
    for _ in 0..POWER_MAX_ITER {
        mat_vec(m, &v, &mut next);
        if normalize(&mut next) == 0.0 {
            break;
        }
        fix_sign(&mut next);
        let change = simplex::l2(&next, &v);
        std::mem::swap(&mut v, &mut next);
        if change < POWER_TOLERANCE {
            break;
        }
    }
    v
}

/// Mean, leading covariance direction and per-client projections.
pub fn filter_stats(points: &[&[f64]]) -> Result<FilterStats, DefenceError> {
    let c = check_points(points)?;
    if points.len() < 2 {
        return Err(DefenceError::TooFewClients { needed: 2, got: points.len() });
    }
    let n = points.len() as f64;
    let mut mean = vec![0.0; c];
    for p in points {
        mean.iter_mut().zip(*p).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut cov = vec![0.0; c * c];
    let mut dev = vec![0.0; c];
    for p in points {
        dev.iter_mut().zip(p.iter().zip(&mean)).for_each(|(d, (v, m))| *d = v - m);
        for i in 0..c {
            for j in i..c {
                cov[i * c + j] += dev[i] * dev[j];
            }
        }
    }
    for i in 0..c {
        for j in i..c {
            cov[i * c + j] /= n;
            cov[j * c + i] = cov[i * c + j];
        }
    }
    let trace: f64 = (0..c).map(|i| cov[i * c + i]).sum();
    if trace < DEGENERATE_TRACE {
        let mut direction = vec![0.0; c];
        direction[0] = 1.0;
        return Ok(FilterStats { mean, direction, projections: vec![0.0; points.len()], degenerate: true });
    }
    let direction = leading_eigenvector(&cov, c);
    let projections = points
        .iter()
        .map(|p| p.iter().zip(&mean).zip(&direction).map(|((y, m), v)| (y - m) * v).sum())
        .collect();
    Ok(FilterStats { mean, direction, projections, degenerate: false })
}

/// Clients Cronus keeps: drop the `ceil(N/4)` largest `|s_i|`, recompute,
/// and repeat until `ceil(N/2)` remain. Ties drop the lower index first.
/// Returned in increasing client order.
pub fn cronus_survivors(points: &[&[f64]]) -> Result<Vec<usize>, DefenceError> {
    check_points(points)?;
    let n = points.len();
    if n < 4 {
        return Err(DefenceError::TooFewClients { needed: 4, got: n });
    }
    let chunk = n.div_ceil(4);
    let keep = n.div_ceil(2);
    let mut active: Vec<usize> = (0..n).collect();
    while active.len() > keep {
        let column: Vec<&[f64]> = active.iter().map(|&i| points[i]).collect();
        let stats = filter_stats(&column)?;
        let mut order: Vec<usize> = (0..active.len()).collect();
        order.sort_by(|&a, &b| {
            stats.projections[b]
                .abs()
                .total_cmp(&stats.projections[a].abs())
                .then(active[a].cmp(&active[b]))
        });
        let remove = chunk.min(active.len() - keep);
        let mut dropped: Vec<usize> = order[..remove].to_vec();
        dropped.sort_unstable();
        for k in dropped.into_iter().rev() {
            active.remove(k);
        }
    }
    Ok(active)
}

pub fn cronus_agg(points: &[&[f64]]) -> Result<ProbVector, DefenceError> {
    let survivors = cronus_survivors(points)?;
    let kept: Vec<&[f64]> = survivors.iter().map(|&i| points[i]).collect();
    mean_agg(&kept, None)
}

/// Per-sample diagnostics gathered while aggregating a round.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregationStats {
    pub gm_unconverged: usize,
    pub degenerate_covariance: usize,
}

/// Summed outlier scores per client, before rescaling.
pub fn raw_scores(preds: &PredictionSet, base: DefenceKind) -> Result<(Vec<f64>, AggregationStats), DefenceError> {
    let n = preds.clients();
    if n < 2 {
        return Err(DefenceError::TooFewClients { needed: 2, got: n });
    }
    let per_sample: Vec<(Vec<f64>, AggregationStats)> = (0..preds.samples())
        .into_par_iter()
        .map(|x| {
            let column = preds.column(x);
            let mut stats = AggregationStats::default();
            let scores = match base {
                DefenceKind::FilterScore => {
                    let f = filter_stats(&column)?;
                    stats.degenerate_covariance += f.degenerate as usize;
                    f.projections.iter().map(|s| s.abs()).collect()
                }
                DefenceKind::Gm | DefenceKind::Cronus => {
                    let robust = if base == DefenceKind::Gm {
                        let gm = geometric_median(&column, GM_TOLERANCE, GM_MAX_ITER)?;
                        stats.gm_unconverged += !gm.converged as usize;
                        gm.point
                    } else {
                        cronus_agg(&column)?
                    };
                    column.iter().map(|p| simplex::l2(p, robust.as_slice())).collect()
                }
                DefenceKind::Mean => {
                    return Err(DefenceError::InvalidSpec("MEAN has no outlier score".into()));
                }
            };
            Ok((scores, stats))
        })
        .collect::<Result<_, DefenceError>>()?;
    let mut totals = vec![0.0; n];
    let mut stats = AggregationStats::default();
    for (scores, s) in per_sample {
        totals.iter_mut().zip(&scores).for_each(|(t, v)| *t += v);
        stats.gm_unconverged += s.gm_unconverged;
        stats.degenerate_covariance += s.degenerate_covariance;
    }
    Ok((totals, stats))
}

/// Rescales summed scores. All-zero scores stay zero.
pub fn scale_scores(raw: &[f64], samples: usize, scale: ScoreScale) -> Vec<f64> {
    let max = raw.iter().cloned().fold(0.0, f64::max);
    let min = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    match scale {
        _ if max <= 0.0 => vec![0.0; raw.len()],
        ScoreScale::Max => raw.iter().map(|s| s / max).collect(),
        ScoreScale::MinMax if max - min <= 0.0 => vec![0.0; raw.len()],
        ScoreScale::MinMax => raw.iter().map(|s| (s - min) / (max - min)).collect(),
        ScoreScale::PerSample => raw.iter().map(|s| s / samples.max(1) as f64).collect(),
        ScoreScale::Raw => raw.to_vec(),
    }
}

/// Outlier scores `sigma_i` for one round, rescaled.
pub fn expguard_scores(preds: &PredictionSet, base: DefenceKind, scale: ScoreScale) -> Result<Vec<f64>, DefenceError> {
    let (raw, _) = raw_scores(preds, base)?;
    Ok(scale_scores(&raw, preds.samples(), scale))
}

/// `p_i <- p_i * exp(-sigma_i)`, then advances the round counter.
pub fn expguard_update(state: &AggregatorState, scores: &[f64]) -> Result<AggregatorState, DefenceError> {
    if scores.len() != state.clients() {
        return Err(DefenceError::LengthMismatch { expected: state.clients(), got: scores.len() });
    }
    for (index, &value) in scores.iter().enumerate() {
        if !(value >= 0.0 && value.is_finite()) {
            return Err(DefenceError::InvalidValue { index, value });
        }
    }
    let mut log_weights: Vec<f64> = state.log_weights.iter().zip(scores).map(|(l, s)| l - s).collect();
    // keep the largest log-weight at zero so values stay bounded
    let top = log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    log_weights.iter_mut().for_each(|l| *l -= top);
    Ok(AggregatorState { log_weights, round: state.round + 1 })
}

/// Weighted mean of every sample's predictions under the state's weights.
pub fn expguard_aggregate(preds: &PredictionSet, state: &AggregatorState) -> Result<Vec<ProbVector>, DefenceError> {
    if state.clients() != preds.clients() {
        return Err(DefenceError::LengthMismatch { expected: preds.clients(), got: state.clients() });
    }
    let weights = state.weights();
    (0..preds.samples())
        .into_par_iter()
        .map(|x| mean_agg(&preds.column(x), Some(&weights)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregation {
    pub labels: Vec<ProbVector>,
    /// Rescaled scores of this round; `None` without ExpGuard.
    pub scores: Option<Vec<f64>>,
    pub stats: AggregationStats,
}

/// One round of server-side aggregation. With ExpGuard the state is scored,
/// updated and then used for the weighted mean, in that order.
pub fn aggregate(
    spec: &DefenceSpec,
    preds: &PredictionSet,
    state: &mut AggregatorState,
) -> Result<Aggregation, DefenceError> {
    spec.validate()?;
    let needed = spec.min_clients();
    if preds.clients() < needed {
        return Err(DefenceError::TooFewClients { needed, got: preds.clients() });
    }
    if spec.expguard {
        let (raw, stats) = raw_scores(preds, spec.kind)?;
        let scores = scale_scores(&raw, preds.samples(), spec.scale);
        *state = expguard_update(state, &scores)?;
        let labels = expguard_aggregate(preds, state)?;
        return Ok(Aggregation { labels, scores: Some(scores), stats });
    }
    let per_sample: Vec<(ProbVector, bool)> = (0..preds.samples())
        .into_par_iter()
        .map(|x| {
            let column = preds.column(x);
            match spec.kind {
                DefenceKind::Gm => {
                    let gm = geometric_median(&column, GM_TOLERANCE, GM_MAX_ITER)?;
                    Ok((gm.point, !gm.converged))
                }
                DefenceKind::Cronus => Ok((cronus_agg(&column)?, false)),
                _ => Ok((mean_agg(&column, None)?, false)),
            }
        })
        .collect::<Result<_, DefenceError>>()?;
    state.round += 1;
    let stats = AggregationStats {
        gm_unconverged: per_sample.iter().filter(|(_, u)| *u).count(),
        degenerate_covariance: 0,
    };
    Ok(Aggregation { labels: per_sample.into_iter().map(|(p, _)| p).collect(), scores: None, stats })
}
