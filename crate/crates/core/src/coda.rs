//! Compositional algebra: sequential binary partitions, balance bases,
//! closure with zero replacement, and the isometric log-ratio transform.
//!
//! All logarithms are natural logarithms.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance used when checking that a composition sums to one.
pub const SIMPLEX_TOL: f64 = 1e-12;

/// Default count-level zero replacement.
pub const DEFAULT_ZERO_REPLACEMENT: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CodaError {
    #[error("entry (row {}, column {}) = {value} is not in {{-1, 0, +1}}", .row + 1, .column + 1)]
    NonBinaryEntry { row: usize, column: usize, value: i64 },
    #[error("column {} lacks a +1 or a -1 side", .column + 1)]
    EmptySide { column: usize },
    #[error("column {} does not split exactly one unsplit group of the partition", .column + 1)]
    NotATree { column: usize },
    #[error("partition leaves {unresolved} group(s) with more than one part")]
    IncompleteTree { unresolved: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("count vector has no positive entry")]
    AllZero,
    #[error("count at position {index} is negative ({value})")]
    NegativeCount { index: usize, value: f64 },
    #[error("zero replacement must be positive and finite, got {0}")]
    InvalidZeroReplacement(f64),
    #[error("invalid composition: {0}")]
    InvalidComposition(String),
    #[error("pivot order is not a permutation of 0..{0}")]
    BadOrder(usize),
}

impl CodaError {
    /// Short machine-readable rule name.
    pub fn rule(&self) -> &'static str {
        match self {
            CodaError::NonBinaryEntry { .. } => "NonBinaryEntry",
            CodaError::EmptySide { .. } => "EmptySide",
            CodaError::NotATree { .. } => "NotATree",
            CodaError::IncompleteTree { .. } => "IncompleteTree",
            CodaError::DimensionMismatch(_) => "DimensionMismatch",
            CodaError::AllZero => "AllZero",
            CodaError::NegativeCount { .. } => "NegativeCount",
            CodaError::InvalidZeroReplacement(_) => "InvalidZeroReplacement",
            CodaError::InvalidComposition(_) => "InvalidComposition",
            CodaError::BadOrder(_) => "BadOrder",
        }
    }

    /// Zero-based column index the error refers to, if any.
    pub fn column(&self) -> Option<usize> {
        match self {
            CodaError::NonBinaryEntry { column, .. }
            | CodaError::EmptySide { column }
            | CodaError::NotATree { column } => Some(*column),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, CodaError>;

/// A validated sequential binary partition of `J + 1` parts into `J` balances.
///
/// Rows are parts, columns are balances. Every column splits exactly one
/// group produced by the preceding columns; the first column splits the
/// whole composition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SbpMatrix {
    entries: DMatrix<i8>,
    part_labels: Vec<String>,
    balance_labels: Vec<String>,
}

impl SbpMatrix {
    pub fn entries(&self) -> &DMatrix<i8> {
        &self.entries
    }

    pub fn part_labels(&self) -> &[String] {
        &self.part_labels
    }

    pub fn balance_labels(&self) -> &[String] {
        &self.balance_labels
    }

    pub fn num_parts(&self) -> usize {
        self.entries.nrows()
    }

    pub fn num_balances(&self) -> usize {
        self.entries.ncols()
    }

    /// Sizes `(n+, n-)` of the two sides of balance `k`.
    pub fn side_sizes(&self, k: usize) -> (usize, usize) {
        let col = self.entries.column(k);
        let plus = col.iter().filter(|&&e| e > 0).count();
        let minus = col.iter().filter(|&&e| e < 0).count();
        (plus, minus)
    }

    /// Rows as a vector of vectors, mostly useful for serialization.
    pub fn rows(&self) -> Vec<Vec<i8>> {
        (0..self.num_parts())
            .map(|j| self.entries.row(j).iter().copied().collect())
            .collect()
    }
}

fn default_balance_labels(n: usize) -> Vec<String> {
    (1..=n).map(|k| format!("M{k}")).collect()
}

/// Validate an integer matrix (given row-major) as a sequential binary partition.
///
/// Errors identify the first violated rule. Checks run in this order:
/// shape, entry values, then columns left to right (side emptiness, tree
/// property), and finally completeness.
pub fn validate_sbp(
    rows: &[Vec<i64>],
    part_labels: Vec<String>,
    balance_labels: Option<Vec<String>>,
) -> Result<SbpMatrix> {
    let nrows = rows.len();
    if nrows < 2 {
        return Err(CodaError::DimensionMismatch(format!(
            "need at least 2 parts, got {nrows}"
        )));
    }
    let ncols = rows[0].len();
    if let Some((j, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != ncols) {
        return Err(CodaError::DimensionMismatch(format!(
            "row {j} has {} entries, expected {ncols}",
            r.len()
        )));
    }
    if ncols == 0 || ncols >= nrows {
        return Err(CodaError::DimensionMismatch(format!(
            "{nrows} parts need at most {} balances, got {ncols}",
            nrows - 1
        )));
    }
    if part_labels.len() != nrows {
        return Err(CodaError::DimensionMismatch(format!(
            "{} part labels for {nrows} rows",
            part_labels.len()
        )));
    }
    let balance_labels = balance_labels.unwrap_or_else(|| default_balance_labels(ncols));
    if balance_labels.len() != ncols {
        return Err(CodaError::DimensionMismatch(format!(
            "{} balance labels for {ncols} columns",
            balance_labels.len()
        )));
    }

    for (j, r) in rows.iter().enumerate() {
        for (k, &v) in r.iter().enumerate() {
            if !(-1..=1).contains(&v) {
                return Err(CodaError::NonBinaryEntry {
                    row: j,
                    column: k,
                    value: v,
                });
            }
        }
    }

    // Unsplit groups, as sorted row-index sets.
    let mut groups: Vec<Vec<usize>> = vec![(0..nrows).collect()];
    for k in 0..ncols {
        let plus: Vec<usize> = (0..nrows).filter(|&j| rows[j][k] > 0).collect();
        let minus: Vec<usize> = (0..nrows).filter(|&j| rows[j][k] < 0).collect();
        if plus.is_empty() || minus.is_empty() {
            return Err(CodaError::EmptySide { column: k });
        }
        let support: Vec<usize> = (0..nrows).filter(|&j| rows[j][k] != 0).collect();
        let pos = groups
            .iter()
            .position(|g| g.len() >= 2 && *g == support)
            .ok_or(CodaError::NotATree { column: k })?;
        groups.swap_remove(pos);
        groups.push(plus);
        groups.push(minus);
    }

    let unresolved = groups.iter().filter(|g| g.len() > 1).count();
    if unresolved > 0 {
        return Err(CodaError::IncompleteTree { unresolved });
    }

    let entries = DMatrix::from_fn(nrows, ncols, |j, k| rows[j][k] as i8);
    Ok(SbpMatrix {
        entries,
        part_labels,
        balance_labels,
    })
}

/// Pivotal partition: balance `k` contrasts ordered part `k` against all
/// later parts. `order[i]` is the original part index placed at position `i`.
pub fn pivotal_sbp(num_parts: usize, order: &[usize], part_labels: Vec<String>) -> Result<SbpMatrix> {
    if num_parts < 2 {
        return Err(CodaError::DimensionMismatch(format!(
            "pivotal partition needs at least 2 parts, got {num_parts}"
        )));
    }
    let mut seen = vec![false; num_parts];
    if order.len() != num_parts
        || order
            .iter()
            .any(|&i| i >= num_parts || std::mem::replace(&mut seen[i], true))
    {
        return Err(CodaError::BadOrder(num_parts));
    }
    let j = num_parts - 1;
    let mut rows = vec![vec![0i64; j]; num_parts];
    for k in 0..j {
        rows[order[k]][k] = 1;
        for &later in &order[k + 1..] {
            rows[later][k] = -1;
        }
    }
    validate_sbp(&rows, part_labels, None)
}

/// Generic part labels `P1..Pn`.
pub fn default_part_labels(n: usize) -> Vec<String> {
    (1..=n).map(|j| format!("P{j}")).collect()
}

/// Draw a random partition tree over `num_parts` parts by recursively
/// splitting a random unsplit group at a random non-trivial cut.
pub fn random_sbp<R: Rng + ?Sized>(num_parts: usize, rng: &mut R) -> Result<SbpMatrix> {
    if num_parts < 2 {
        return Err(CodaError::DimensionMismatch(format!(
            "need at least 2 parts, got {num_parts}"
        )));
    }
    let j = num_parts - 1;
    let mut rows = vec![vec![0i64; j]; num_parts];
    let mut all: Vec<usize> = (0..num_parts).collect();
    all.shuffle(rng);
    let mut splittable: Vec<Vec<usize>> = vec![all];
    for k in 0..j {
        let idx = if k == 0 { 0 } else { rng.random_range(0..splittable.len()) };
        let mut group = splittable.swap_remove(idx);
        group.shuffle(rng);
        let cut = rng.random_range(1..group.len());
        let (plus, minus) = group.split_at(cut);
        for &p in plus {
            rows[p][k] = 1;
        }
        for &m in minus {
            rows[m][k] = -1;
        }
        for side in [plus, minus] {
            if side.len() > 1 {
                splittable.push(side.to_vec());
            }
        }
    }
    validate_sbp(&rows, default_part_labels(num_parts), None)
}

/// Orthonormal contrast matrix derived from a partition.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastBasis {
    v: DMatrix<f64>,
    source: SbpMatrix,
}

impl ContrastBasis {
    /// The `(J+1) x J` matrix `V`.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.v
    }

    pub fn sbp(&self) -> &SbpMatrix {
        &self.source
    }

    pub fn num_parts(&self) -> usize {
        self.v.nrows()
    }

    pub fn num_balances(&self) -> usize {
        self.v.ncols()
    }
}

/// Build the balance basis `V`: `+sqrt(n+ n- / (n+ + n-)) / n+` on the
/// positive side of each balance, `-sqrt(..) / n-` on the negative side.
pub fn basis_from_sbp(sbp: &SbpMatrix) -> ContrastBasis {
    let (rows, cols) = sbp.entries.shape();
    let mut v = DMatrix::<f64>::zeros(rows, cols);
    for k in 0..cols {
        let (np, nm) = sbp.side_sizes(k);
        let (np, nm) = (np as f64, nm as f64);
        let scale = (np * nm / (np + nm)).sqrt();
        for j in 0..rows {
            v[(j, k)] = match sbp.entries[(j, k)] {
                1 => scale / np,
                -1 => -scale / nm,
                _ => 0.0,
            };
        }
    }
    ContrastBasis {
        v,
        source: sbp.clone(),
    }
}

/// A strictly positive vector of proportions summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Composition(Vec<f64>);

impl Composition {
    /// Checks strict positivity and unit sum.
    pub fn new(proportions: Vec<f64>) -> Result<Self> {
        if proportions.len() < 2 {
            return Err(CodaError::InvalidComposition(
                "a composition needs at least 2 parts".into(),
            ));
        }
        if let Some(p) = proportions.iter().find(|p| !(p.is_finite() && **p > 0.0)) {
            return Err(CodaError::InvalidComposition(format!(
                "part {p} is not strictly positive"
            )));
        }
        let sum: f64 = proportions.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(CodaError::InvalidComposition(format!(
                "parts sum to {sum}"
            )));
        }
        Ok(Composition(proportions))
    }

    /// Closure of an arbitrary strictly positive vector.
    pub fn close(values: &[f64]) -> Result<Self> {
        if let Some(p) = values.iter().find(|p| !(p.is_finite() && **p > 0.0)) {
            return Err(CodaError::InvalidComposition(format!(
                "part {p} is not strictly positive"
            )));
        }
        let sum: f64 = values.iter().sum();
        Composition::new(values.iter().map(|v| v / sum).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// ilr coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IlrVector(Vec<f64>);

impl IlrVector {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(CodaError::InvalidComposition(
                "ilr coordinates must be finite".into(),
            ));
        }
        Ok(IlrVector(coords))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

fn check_zero_replacement(r: f64) -> Result<()> {
    if r.is_finite() && r > 0.0 {
        Ok(())
    } else {
        Err(CodaError::InvalidZeroReplacement(r))
    }
}

/// Replace zero counts by `zero_replacement`, then close to unit sum.
pub fn close_counts(counts: &[f64], zero_replacement: f64) -> Result<Composition> {
    check_zero_replacement(zero_replacement)?;
    if let Some((index, &value)) = counts
        .iter()
        .enumerate()
        .find(|(_, c)| !c.is_finite() || **c < 0.0)
    {
        return Err(CodaError::NegativeCount { index, value });
    }
    if counts.iter().all(|&c| c == 0.0) {
        return Err(CodaError::AllZero);
    }
    let replaced: Vec<f64> = counts
        .iter()
        .map(|&c| if c == 0.0 { zero_replacement } else { c })
        .collect();
    let sum: f64 = replaced.iter().sum();
    Ok(Composition(replaced.into_iter().map(|c| c / sum).collect()))
}

/// Integer-count convenience wrapper around [`close_counts`].
pub fn close_int_counts(counts: &[u64], zero_replacement: f64) -> Result<Composition> {
    let as_f: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    close_counts(&as_f, zero_replacement)
}

/// `ilr(p) = V^T log(p)`.
pub fn ilr_forward(p: &Composition, basis: &ContrastBasis) -> Result<IlrVector> {
    if p.len() != basis.num_parts() {
        return Err(CodaError::DimensionMismatch(format!(
            "composition has {} parts, basis expects {}",
            p.len(),
            basis.num_parts()
        )));
    }
    let logp = DVector::from_iterator(p.len(), p.0.iter().map(|x| x.ln()));
    let m = basis.v.tr_mul(&logp);
    Ok(IlrVector(m.iter().copied().collect()))
}

/// `closure(exp(V m))`.
pub fn ilr_inverse(m: &IlrVector, basis: &ContrastBasis) -> Result<Composition> {
    if m.len() != basis.num_balances() {
        return Err(CodaError::DimensionMismatch(format!(
            "ilr vector has {} coordinates, basis expects {}",
            m.len(),
            basis.num_balances()
        )));
    }
    let mv = DVector::from_column_slice(&m.0);
    let clr = &basis.v * mv;
    // Shift by the max before exponentiating so that large coordinates do
    // not overflow; closure removes the shift.
    let shift = clr.max();
    let e: Vec<f64> = clr.iter().map(|c| (c - shift).exp()).collect();
    let sum: f64 = e.iter().sum();
    Ok(Composition(e.into_iter().map(|x| x / sum).collect()))
}

/// Orthogonal matrix `P = V2^T V1` mapping ilr coordinates under `b1` to
/// ilr coordinates under `b2`.
pub fn basis_rotation(b1: &ContrastBasis, b2: &ContrastBasis) -> Result<DMatrix<f64>> {
    if b1.num_parts() != b2.num_parts() {
        return Err(CodaError::DimensionMismatch(format!(
            "bases over {} and {} parts",
            b1.num_parts(),
            b2.num_parts()
        )));
    }
    Ok(b2.v.tr_mul(&b1.v))
}

/// ilr coordinates for every row of a count table (`n x (J+1)`), returned
/// as an `n x J` matrix.
pub fn ilr_counts_matrix(
    counts: &DMatrix<f64>,
    basis: &ContrastBasis,
    zero_replacement: f64,
) -> Result<DMatrix<f64>> {
    if counts.ncols() != basis.num_parts() {
        return Err(CodaError::DimensionMismatch(format!(
            "count table has {} columns, basis expects {}",
            counts.ncols(),
            basis.num_parts()
        )));
    }
    let mut logs = DMatrix::<f64>::zeros(counts.nrows(), counts.ncols());
    let mut row = Vec::with_capacity(counts.ncols());
    for i in 0..counts.nrows() {
        row.clear();
        row.extend(counts.row(i).iter().copied());
        let p = close_counts(&row, zero_replacement)?;
        for (j, x) in p.0.iter().enumerate() {
            logs[(i, j)] = x.ln();
        }
    }
    Ok(logs * &basis.v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn taxonomy_rows() -> Vec<Vec<i64>> {
        vec![
            vec![1, 0, 0, 0],
            vec![-1, 1, 1, 0],
            vec![-1, 1, -1, 0],
            vec![-1, -1, 0, 1],
            vec![-1, -1, 0, -1],
        ]
    }

    fn labels(n: usize) -> Vec<String> {
        default_part_labels(n)
    }

    /// Balance form of a single coordinate: scaled log-ratio of geometric means.
    fn balance_form(p: &[f64], sbp: &SbpMatrix) -> Vec<f64> {
        (0..sbp.num_balances())
            .map(|k| {
                let col = sbp.entries().column(k);
                let plus: Vec<f64> = (0..p.len()).filter(|&j| col[j] > 0).map(|j| p[j]).collect();
                let minus: Vec<f64> = (0..p.len()).filter(|&j| col[j] < 0).map(|j| p[j]).collect();
                let gm = |v: &[f64]| (v.iter().map(|x| x.ln()).sum::<f64>() / v.len() as f64).exp();
                let (np, nm) = (plus.len() as f64, minus.len() as f64);
                (np * nm / (np + nm)).sqrt() * (gm(&plus) / gm(&minus)).ln()
            })
            .collect()
    }

    #[test]
    fn taxonomy_matrix_is_valid() {
        let sbp = validate_sbp(&taxonomy_rows(), labels(5), None).unwrap();
        assert_eq!(sbp.num_parts(), 5);
        assert_eq!(sbp.num_balances(), 4);
    }

    #[test]
    fn zero_column_is_empty_side() {
        let rows = vec![vec![1, 0], vec![-1, 0], vec![-1, 0]];
        let err = validate_sbp(&rows, labels(3), None).unwrap_err();
        assert_eq!(err, CodaError::EmptySide { column: 1 });
        assert_eq!(err.rule(), "EmptySide");
        assert_eq!(err.column(), Some(1));
    }

    #[test]
    fn displayed_pivotal_pattern_is_valid() {
        let rows = vec![
            vec![1, 0, 0, 0],
            vec![-1, 1, 0, 0],
            vec![-1, -1, 1, 0],
            vec![-1, -1, -1, 1],
            vec![-1, -1, -1, -1],
        ];
        let sbp = validate_sbp(&rows, labels(5), None).unwrap();
        let piv = pivotal_sbp(5, &[0, 1, 2, 3, 4], labels(5)).unwrap();
        assert_eq!(sbp, piv);
    }

    #[test]
    fn validation_errors() {
        let rows = vec![vec![2, 0], vec![-1, 1], vec![-1, -1]];
        assert!(matches!(
            validate_sbp(&rows, labels(3), None),
            Err(CodaError::NonBinaryEntry { row: 0, column: 0, value: 2 })
        ));
        // first column leaves a part out
        let rows = vec![vec![1, 0], vec![-1, 1], vec![0, -1]];
        assert_eq!(
            validate_sbp(&rows, labels(3), None),
            Err(CodaError::NotATree { column: 0 })
        );
        // second column straddles the first split
        let rows = vec![vec![1, 1, 0], vec![1, 0, 1], vec![-1, -1, -1], vec![-1, 0, 0]];
        assert_eq!(
            validate_sbp(&rows, labels(4), None),
            Err(CodaError::NotATree { column: 1 })
        );
        // splitting an already split group again
        let rows = vec![vec![1, 1], vec![-1, -1], vec![-1, 1]];
        assert_eq!(
            validate_sbp(&rows, labels(3), None),
            Err(CodaError::NotATree { column: 1 })
        );
        // too few columns
        let rows = vec![vec![1, 0], vec![-1, 1], vec![-1, -1], vec![-1, -1]];
        assert_eq!(
            validate_sbp(&rows, labels(4), None),
            Err(CodaError::IncompleteTree { unresolved: 1 })
        );
        // too many columns
        let rows = vec![vec![1, 1], vec![-1, -1]];
        assert!(matches!(
            validate_sbp(&rows, labels(2), None),
            Err(CodaError::DimensionMismatch(_))
        ));
        // ragged
        let rows = vec![vec![1], vec![-1, 0]];
        assert!(matches!(
            validate_sbp(&rows, labels(2), None),
            Err(CodaError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn pivotal_small_cases() {
        let p2 = pivotal_sbp(2, &[0, 1], labels(2)).unwrap();
        assert_eq!(p2.rows(), vec![vec![1], vec![-1]]);
        let p3 = pivotal_sbp(3, &[0, 1, 2], labels(3)).unwrap();
        assert_eq!(p3.rows(), vec![vec![1, 0], vec![-1, 1], vec![-1, -1]]);
        assert!(pivotal_sbp(1, &[0], labels(1)).is_err());
        assert_eq!(pivotal_sbp(3, &[0, 0, 2], labels(3)), Err(CodaError::BadOrder(3)));
        let rev = pivotal_sbp(3, &[2, 1, 0], labels(3)).unwrap();
        assert_eq!(rev.rows(), vec![vec![-1, -1], vec![-1, 1], vec![1, 0]]);
    }

    #[test]
    fn two_part_basis() {
        let b = basis_from_sbp(&pivotal_sbp(2, &[0, 1], labels(2)).unwrap());
        let h = 1.0 / 2f64.sqrt();
        assert!((b.matrix()[(0, 0)] - h).abs() < 1e-15);
        assert!((b.matrix()[(1, 0)] + h).abs() < 1e-15);
    }

    #[test]
    fn five_part_pivot_first_column() {
        let b = basis_from_sbp(&pivotal_sbp(5, &[0, 1, 2, 3, 4], labels(5)).unwrap());
        // sqrt(1*4/5) * 1 and sqrt(4/5) * (-1/4)
        let top = (4.0f64 / 5.0).sqrt();
        let expected = [top, -top / 4.0, -top / 4.0, -top / 4.0, -top / 4.0];
        for (j, e) in expected.iter().enumerate() {
            assert!((b.matrix()[(j, 0)] - e).abs() < 1e-15);
        }
        assert!((b.matrix()[(0, 0)] - 0.894427).abs() < 1e-6);
        assert!((b.matrix()[(1, 0)] + 0.223607).abs() < 1e-6);
    }

    #[test]
    fn closure_examples() {
        let p = close_counts(&[10.0, 0.0, 10.0], 0.5).unwrap();
        let expect = [10.0 / 20.5, 0.5 / 20.5, 10.0 / 20.5];
        for (a, b) in p.as_slice().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        let p = close_int_counts(&[1, 1, 1, 1], 0.5).unwrap();
        assert!(p.as_slice().iter().all(|&x| (x - 0.25).abs() < 1e-15));
        assert_eq!(close_counts(&[0.0, 0.0, 0.0], 0.5), Err(CodaError::AllZero));
        assert!(matches!(
            close_counts(&[1.0, -1.0], 0.5),
            Err(CodaError::NegativeCount { index: 1, .. })
        ));
        assert!(close_counts(&[1.0, 0.0], 0.0).is_err());
    }

    #[test]
    fn ilr_known_values() {
        let sbp = pivotal_sbp(3, &[0, 1, 2], labels(3)).unwrap();
        let b = basis_from_sbp(&sbp);
        let p = Composition::new(vec![0.5, 0.25, 0.25]).unwrap();
        let m = ilr_forward(&p, &b).unwrap();
        let m1 = (2.0f64 / 3.0).sqrt() * 2f64.ln();
        assert!((m.as_slice()[0] - m1).abs() < 1e-12);
        assert!((m.as_slice()[0] - 0.565952).abs() < 1e-6);
        assert!(m.as_slice()[1].abs() < 1e-12);
        let back = ilr_inverse(&m, &b).unwrap();
        for (a, b) in back.as_slice().iter().zip(p.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_maps_to_origin() {
        let b = basis_from_sbp(&validate_sbp(&taxonomy_rows(), labels(5), None).unwrap());
        let u = Composition::new(vec![0.2; 5]).unwrap();
        assert!(ilr_forward(&u, &b).unwrap().as_slice().iter().all(|c| c.abs() < 1e-12));
        let back = ilr_inverse(&IlrVector::new(vec![0.0; 4]).unwrap(), &b).unwrap();
        assert!(back.as_slice().iter().all(|c| (c - 0.2).abs() < 1e-15));
    }

    #[test]
    fn dimension_checks() {
        let b = basis_from_sbp(&pivotal_sbp(3, &[0, 1, 2], labels(3)).unwrap());
        let p = Composition::new(vec![0.5, 0.5]).unwrap();
        assert!(matches!(ilr_forward(&p, &b), Err(CodaError::DimensionMismatch(_))));
        let m = IlrVector::new(vec![0.0]).unwrap();
        assert!(matches!(ilr_inverse(&m, &b), Err(CodaError::DimensionMismatch(_))));
        let b4 = basis_from_sbp(&pivotal_sbp(4, &[0, 1, 2, 3], labels(4)).unwrap());
        assert!(basis_rotation(&b, &b4).is_err());
    }

    #[test]
    fn matrix_and_balance_forms_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let sbp = validate_sbp(&taxonomy_rows(), labels(5), None).unwrap();
        let b = basis_from_sbp(&sbp);
        for _ in 0..100 {
            let raw: Vec<f64> = (0..5).map(|_| rng.random_range(0.01..1.0)).collect();
            let p = Composition::close(&raw).unwrap();
            let m = ilr_forward(&p, &b).unwrap();
            let oracle = balance_form(p.as_slice(), &sbp);
            for (a, o) in m.as_slice().iter().zip(&oracle) {
                assert!((a - o).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn rotation_between_taxonomy_and_pivot() {
        let tax = basis_from_sbp(&validate_sbp(&taxonomy_rows(), labels(5), None).unwrap());
        let piv = basis_from_sbp(&pivotal_sbp(5, &[0, 1, 2, 3, 4], labels(5)).unwrap());
        let same = basis_rotation(&tax, &tax).unwrap();
        assert!((same - DMatrix::<f64>::identity(4, 4)).abs().max() < 1e-12);
        let p = basis_rotation(&tax, &piv).unwrap();
        assert!((p.transpose() * &p - DMatrix::<f64>::identity(4, 4)).abs().max() < 1e-10);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let raw: Vec<f64> = (0..5).map(|_| rng.random_range(0.01..1.0)).collect();
            let comp = Composition::close(&raw).unwrap();
            let m1 = DVector::from_vec(ilr_forward(&comp, &tax).unwrap().into_vec());
            let m2 = DVector::from_vec(ilr_forward(&comp, &piv).unwrap().into_vec());
            assert!((&p * m1 - m2).abs().max() < 1e-10);

            let g = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
            let bt = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
            let rotated = (&p * &g).dot(&(&p * &bt));
            assert!((rotated - g.dot(&bt)).abs() < 1e-12);
        }
    }

    #[test]
    fn count_matrix_matches_rowwise() {
        let b = basis_from_sbp(&validate_sbp(&taxonomy_rows(), labels(5), None).unwrap());
        let counts = DMatrix::from_row_slice(2, 5, &[10.0, 0.0, 3.0, 4.0, 5.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        let m = ilr_counts_matrix(&counts, &b, 0.5).unwrap();
        let r0 = ilr_forward(&close_counts(&[10.0, 0.0, 3.0, 4.0, 5.0], 0.5).unwrap(), &b).unwrap();
        for k in 0..4 {
            assert!((m[(0, k)] - r0.as_slice()[k]).abs() < 1e-14);
            assert!(m[(1, k)].abs() < 1e-14);
        }
    }
}
