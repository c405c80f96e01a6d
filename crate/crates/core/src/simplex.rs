//! Probability vectors on the simplex and per-client prediction tables.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Maximum allowed deviation of a probability vector's sum from one.
pub const SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimplexError {
    #[error("entry {index} is negative ({value})")]
    NegativeEntry { index: usize, value: f64 },
    #[error("entries sum to {sum}, deviating from 1 by {deviation:e}")]
    SumNotOne { sum: f64, deviation: f64 },
    #[error("entry {index} is not finite")]
    NonFinite { index: usize },
    #[error("a probability vector needs at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("prediction table is not rectangular: expected {expected} values, got {actual}")]
    NotRectangular { expected: usize, actual: usize },
}

/// A point of the probability simplex: non-negative entries summing to one.
///
/// Construction validates; inputs are never silently renormalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(entries: Vec<f64>) -> Result<Self, SimplexError> {
        check_entries(&entries)?;
        Ok(Self(entries))
    }

    /// The one-hot vector at `index`.
    pub fn vertex(classes: usize, index: usize) -> Self {
        assert!(classes >= 2 && index < classes);
        let mut v = vec![0.0; classes];
        v[index] = 1.0;
        Self(v)
    }

    pub fn uniform(classes: usize) -> Self {
        assert!(classes >= 2);
        Self(vec![1.0 / classes as f64; classes])
    }

    pub fn classes(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Index of the largest entry, lowest index on ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    /// Index of the smallest entry, lowest index on ties.
    pub fn argmin(&self) -> usize {
        argmin(&self.0)
    }
}

impl TryFrom<Vec<f64>> for ProbVector {
    type Error = SimplexError;

    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<ProbVector> for Vec<f64> {
    fn from(v: ProbVector) -> Self {
        v.0
    }
}

impl AsRef<[f64]> for ProbVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

fn check_entries(v: &[f64]) -> Result<(), SimplexError> {
    if v.len() < 2 {
        return Err(SimplexError::TooFewClasses(v.len()));
    }
    for (index, &value) in v.iter().enumerate() {
        if !value.is_finite() {
            return Err(SimplexError::NonFinite { index });
        }
        if value < 0.0 {
            return Err(SimplexError::NegativeEntry { index, value });
        }
    }
    let sum: f64 = v.iter().sum();
    let deviation = (sum - 1.0).abs();
    if deviation > SUM_TOLERANCE {
        return Err(SimplexError::SumNotOne { sum, deviation });
    }
    Ok(())
}

/// Checks a raw vector against the simplex invariants.
pub fn validate(v: &[f64]) -> Result<ProbVector, SimplexError> {
    ProbVector::new(v.to_vec())
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x < v[best] {
            best = i;
        }
    }
    best
}

/// `(1 - alpha) * honest + alpha * byzantine`, the aggregate seen by a mean
/// server when an `alpha` fraction of clients sends `byzantine`.
pub fn mix(honest: &ProbVector, byzantine: &ProbVector, alpha: f64) -> ProbVector {
    assert_eq!(honest.classes(), byzantine.classes());
    assert!((0.0..1.0).contains(&alpha), "alpha must lie in [0, 1)");
    let entries = honest
        .0
        .iter()
        .zip(&byzantine.0)
        .map(|(h, b)| (1.0 - alpha) * h + alpha * b)
        .collect();
    ProbVector(entries)
}

pub fn l2_distance(a: &[f64], b: &[f64]) -> Result<f64, SimplexError> {
    if a.len() != b.len() {
        return Err(SimplexError::DimensionMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(l2(a, b))
}

#[inline]
pub(crate) fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Per-coordinate median (mean of the two middle values for even counts).
///
/// The result is deliberately returned as a raw vector: it need not lie in
/// the simplex, which is why it is not offered as an aggregator.
pub fn coordwise_median<P: AsRef<[f64]>>(points: &[P]) -> Result<Vec<f64>, SimplexError> {
    let first = points.first().ok_or(SimplexError::EmptyInput)?.as_ref();
    let c = first.len();
    for p in points {
        if p.as_ref().len() != c {
            return Err(SimplexError::DimensionMismatch {
                left: c,
                right: p.as_ref().len(),
            });
        }
    }
    let n = points.len();
    let mut column = Vec::with_capacity(n);
    let median = (0..c)
        .map(|k| {
            column.clear();
            column.extend(points.iter().map(|p| p.as_ref()[k]));
            column.sort_by(f64::total_cmp);
            if n % 2 == 1 {
                column[n / 2]
            } else {
                0.5 * (column[n / 2 - 1] + column[n / 2])
            }
        })
        .collect();
    Ok(median)
}

/// Predictions of `clients` clients on `samples` public samples, stored
/// client-major in one dense buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    clients: usize,
    samples: usize,
    classes: usize,
    data: Vec<f64>,
}

impl PredictionSet {
    /// Builds a table from a flat client-major buffer, validating every cell.
    pub fn new(
        clients: usize,
        samples: usize,
        classes: usize,
        data: Vec<f64>,
    ) -> Result<Self, SimplexError> {
        let expected = clients * samples * classes;
        if data.len() != expected {
            return Err(SimplexError::NotRectangular {
                expected,
                actual: data.len(),
            });
        }
        if clients == 0 || samples == 0 {
            return Err(SimplexError::EmptyInput);
        }
        for cell in data.chunks_exact(classes) {
            check_entries(cell)?;
        }
        Ok(Self {
            clients,
            samples,
            classes,
            data,
        })
    }

    /// Builds a table from one row of predictions per client.
    pub fn from_rows(rows: Vec<Vec<ProbVector>>) -> Result<Self, SimplexError> {
        let clients = rows.len();
        let samples = rows.first().map_or(0, Vec::len);
        let classes = rows
            .first()
            .and_then(|r| r.first())
            .map_or(0, ProbVector::classes);
        if clients == 0 || samples == 0 {
            return Err(SimplexError::EmptyInput);
        }
        let mut data = Vec::with_capacity(clients * samples * classes);
        for row in rows {
            if row.len() != samples {
                return Err(SimplexError::NotRectangular {
                    expected: samples,
                    actual: row.len(),
                });
            }
            for cell in row {
                if cell.classes() != classes {
                    return Err(SimplexError::DimensionMismatch {
                        left: classes,
                        right: cell.classes(),
                    });
                }
                data.extend(cell.0);
            }
        }
        Ok(Self {
            clients,
            samples,
            classes,
            data,
        })
    }

    pub fn clients(&self) -> usize {
        self.clients
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn cell(&self, client: usize, sample: usize) -> &[f64] {
        let start = (client * self.samples + sample) * self.classes;
        &self.data[start..start + self.classes]
    }

    /// All clients' predictions on one sample, in client order.
    pub fn column(&self, sample: usize) -> Vec<&[f64]> {
        (0..self.clients).map(|i| self.cell(i, sample)).collect()
    }

    /// Column restricted to a subset of clients.
    pub fn column_of(&self, sample: usize, clients: &[usize]) -> Vec<&[f64]> {
        clients.iter().map(|&i| self.cell(i, sample)).collect()
    }

    /// A copy with the clients reordered: row `k` of the result is row
    /// `order[k]` of `self`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        assert_eq!(order.len(), self.clients);
        let row = self.samples * self.classes;
        let mut data = Vec::with_capacity(self.data.len());
        for &i in order {
            data.extend_from_slice(&self.data[i * row..(i + 1) * row]);
        }
        Self { data, ..*self }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn validate_examples() {
        assert!(validate(&[0.7, 0.2, 0.1]).is_ok());
        assert!(validate(&[1.0, 0.0, 0.0]).is_ok());
        match validate(&[0.7, 0.1, 0.1]) {
            Err(SimplexError::SumNotOne { deviation, .. }) => {
                assert_abs_diff_eq!(deviation, 0.1, epsilon = 1e-12)
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            validate(&[1.1, -0.1]),
            Err(SimplexError::NegativeEntry { index: 1, .. })
        ));
        assert!(matches!(validate(&[1.0]), Err(SimplexError::TooFewClasses(1))));
        assert!(matches!(
            validate(&[f64::NAN, 1.0]),
            Err(SimplexError::NonFinite { index: 0 })
        ));
    }

    #[test]
    fn sum_tolerance_is_not_renormalized() {
        let v = validate(&[0.5, 0.5 + 5e-10]).unwrap();
        assert_eq!(v.as_slice(), &[0.5, 0.5 + 5e-10]);
        assert!(validate(&[0.5, 0.5 + 2e-9]).is_err());
    }

    #[test]
    fn mix_reproduces_attack_figure() {
        let h = ProbVector::new(vec![0.77, 0.08, 0.15]).unwrap();
        let alpha = 3.0 / 7.0;
        let cpa = mix(&h, &ProbVector::vertex(3, 1), alpha);
        let lma = mix(&h, &ProbVector::vertex(3, 2), alpha);
        for (got, want) in cpa.as_slice().iter().zip([0.44, 0.474, 0.086]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-3);
        }
        for (got, want) in lma.as_slice().iter().zip([0.44, 0.046, 0.514]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-3);
        }
        assert_eq!(mix(&h, &ProbVector::vertex(3, 0), 0.0), h);
    }

    #[test]
    fn distances() {
        let e1 = ProbVector::vertex(3, 0);
        let e2 = ProbVector::vertex(3, 1);
        assert_abs_diff_eq!(
            l2_distance(e1.as_slice(), e2.as_slice()).unwrap(),
            2f64.sqrt()
        );
        assert_eq!(l2_distance(e1.as_slice(), e1.as_slice()).unwrap(), 0.0);
        assert_abs_diff_eq!(
            l2_distance(&[0.5, 0.5, 0.0], &[0.0, 0.5, 0.5]).unwrap(),
            0.5f64.sqrt()
        );
        assert!(matches!(
            l2_distance(&[1.0, 0.0], &[1.0, 0.0, 0.0]),
            Err(SimplexError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn coordwise_median_leaves_the_simplex() {
        let triple = [[0.7, 0.2, 0.1], [0.8, 0.1, 0.1], [0.0, 0.0, 1.0]];
        let m = coordwise_median(&triple).unwrap();
        assert_eq!(m, vec![0.7, 0.1, 0.1]);
        assert!(matches!(validate(&m), Err(SimplexError::SumNotOne { .. })));

        let same = [[0.2, 0.3, 0.5]; 3];
        assert_eq!(coordwise_median(&same).unwrap(), vec![0.2, 0.3, 0.5]);
        let majority = [[1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        assert_eq!(coordwise_median(&majority).unwrap(), vec![1.0, 0.0, 0.0]);
        assert!(matches!(
            coordwise_median::<[f64; 3]>(&[]),
            Err(SimplexError::EmptyInput)
        ));
    }

    #[test]
    fn prediction_set_layout() {
        let rows = vec![
            vec![ProbVector::vertex(2, 0), ProbVector::uniform(2)],
            vec![ProbVector::vertex(2, 1), ProbVector::vertex(2, 0)],
        ];
        let set = PredictionSet::from_rows(rows).unwrap();
        assert_eq!(set.cell(1, 0), &[0.0, 1.0]);
        assert_eq!(set.column(1), vec![&[0.5, 0.5][..], &[1.0, 0.0][..]]);
        let swapped = set.permuted(&[1, 0]);
        assert_eq!(swapped.cell(0, 0), &[0.0, 1.0]);
        assert!(PredictionSet::new(1, 1, 2, vec![0.5, 0.6]).is_err());
        assert!(PredictionSet::new(1, 2, 2, vec![0.5, 0.5]).is_err());
    }

    fn simplex_point(c: usize) -> impl Strategy<Value = ProbVector> {
        prop::collection::vec(0.0f64..1.0, c).prop_map(|raw| {
            let total: f64 = raw.iter().sum::<f64>() + 1e-9;
            let mut v: Vec<f64> = raw.iter().map(|x| (x + 1e-9 / raw.len() as f64) / total).collect();
            let s: f64 = v.iter().sum();
            v.iter_mut().for_each(|x| *x /= s);
            ProbVector::new(v).unwrap()
        })
    }

    proptest! {
        #[test]
        fn mix_stays_in_simplex(
            (a, b) in (2usize..12).prop_flat_map(|c| (simplex_point(c), simplex_point(c))),
            alpha in 0.0f64..0.999,
        ) {
            let m = mix(&a, &b, alpha);
            prop_assert!(validate(m.as_slice()).is_ok());
        }

        #[test]
        fn distance_is_bounded_by_diameter(
            (a, b) in (2usize..12).prop_flat_map(|c| (simplex_point(c), simplex_point(c))),
        ) {
            let d = l2_distance(a.as_slice(), b.as_slice()).unwrap();
            prop_assert!(d >= 0.0);
            prop_assert!(d <= 2f64.sqrt() + 1e-12);
        }
    }
}
