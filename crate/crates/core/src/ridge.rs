//! Ridge-regression readout.
//!
//! `W = ((XᵀX + λI)⁻¹ XᵀY)ᵀ` with one-hot `{0, 1}` targets, solved by
//! Cholesky factorisation. The Gram matrix and cross product are computed
//! once per dataset so that sweeping λ only repeats the factorisation.
//!
//! Model file layout, little-endian:
//!
//! ```text
//! "DLRW" | version u16 | Q u16 | N u32 | λ f64 | reservoir_hash u64
//! Q × label u16 | Q×N weights f32, row-major
//! ```

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::counter::{tally, MacCounter, Phase};
use crate::error::{Error, Result};
use crate::linalg::{cross, dot, gram, Cholesky, Matrix};
use crate::reservoir::StateVector;

const MAGIC: &[u8; 4] = b"DLRW";
const VERSION: u16 = 1;
pub const DEFAULT_LAMBDA: f64 = 1e-2;

/// Bytes of a serialized model preceding the weights.
pub fn header_bytes(q: usize) -> usize {
    4 + 2 + 2 + 4 + 8 + 8 + 2 * q
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightModel {
    /// `Q × N` readout.
    pub w: Matrix,
    pub labels: Vec<u16>,
    pub lambda: f64,
    pub transform_id: String,
    pub reservoir_hash: u64,
    pub trained_on: usize,
}

impl WeightModel {
    pub fn q(&self) -> usize {
        self.w.rows()
    }

    pub fn n(&self) -> usize {
        self.w.cols()
    }

    /// Trainable parameters, `Q·N`.
    pub fn parameter_count(&self) -> usize {
        self.q() * self.n()
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.w.rows() {
            return Err(Error::Dimension { expected: self.w.rows(), actual: self.labels.len() });
        }
        if self.labels.len() < 2 {
            return Err(Error::InvalidInput("a readout needs at least two classes".into()));
        }
        let mut sorted = self.labels.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.labels.len() {
            return Err(Error::InvalidInput("duplicate labels in readout".into()));
        }
        if !self.w.is_finite() {
            return Err(Error::Numeric("readout has non-finite weights".into()));
        }
        Ok(())
    }

    /// Scores `W·x`.
    pub fn scores(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n() {
            return Err(Error::Dimension { expected: self.n(), actual: x.len() });
        }
        Ok(self.w.mul_vec(x))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (q, n) = (self.q(), self.n());
        let mut out = Vec::with_capacity(header_bytes(q) + 4 * q * n);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(q as u16).to_le_bytes());
        out.extend_from_slice(&(n as u32).to_le_bytes());
        out.extend_from_slice(&self.lambda.to_le_bytes());
        out.extend_from_slice(&self.reservoir_hash.to_le_bytes());
        for l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        for v in self.w.as_slice() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        let fmt = |m: &str| Error::Format(format!("weight model: {m}"));
        if b.len() < header_bytes(0) {
            return Err(fmt("header truncated"));
        }
        if &b[..4] != MAGIC {
            return Err(fmt("bad magic"));
        }
        if u16::from_le_bytes([b[4], b[5]]) != VERSION {
            return Err(fmt("unsupported version"));
        }
        let q = u16::from_le_bytes([b[6], b[7]]) as usize;
        let n = u32::from_le_bytes(b[8..12].try_into().unwrap()) as usize;
        let lambda = f64::from_le_bytes(b[12..20].try_into().unwrap());
        let reservoir_hash = u64::from_le_bytes(b[20..28].try_into().unwrap());
        let hdr = header_bytes(q);
        if b.len() != hdr + 4 * q * n {
            return Err(fmt("payload length does not match header"));
        }
        let labels = (0..q).map(|i| u16::from_le_bytes([b[28 + 2 * i], b[29 + 2 * i]])).collect();
        let w = b[hdr..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let m = WeightModel {
            w: Matrix::from_vec(q, n, w)?,
            labels,
            lambda,
            transform_id: String::new(),
            reservoir_hash,
            trained_on: 0,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Sorted distinct labels and the `B × Q` one-hot target matrix.
pub fn one_hot(labels: &[u16]) -> (Vec<u16>, Matrix) {
    let mut classes = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let mut y = Matrix::zeros(labels.len(), classes.len());
    for (i, l) in labels.iter().enumerate() {
        let j = classes.binary_search(l).expect("label present");
        y[(i, j)] = 1.0;
    }
    (classes, y)
}

/// Closed-form ridge solution `((XᵀX + λI)⁻¹XᵀY)ᵀ`, shape `Q × N`.
pub fn fit_rr(x: &Matrix, y: &Matrix, lambda: f64, counter: Option<&MacCounter>) -> Result<Matrix> {
    RidgeProblem::from_targets(x, y, counter)?.solve(lambda, counter)
}

/// Sufficient statistics `XᵀX` and `XᵀY` of one training set.
#[derive(Debug, Clone)]
pub struct RidgeProblem {
    pub gram: Matrix,
    pub xty: Matrix,
    pub samples: usize,
}

impl RidgeProblem {
    pub fn from_targets(x: &Matrix, y: &Matrix, counter: Option<&MacCounter>) -> Result<Self> {
        if x.rows() == 0 {
            return Err(Error::InvalidInput("ridge fit needs at least one sample".into()));
        }
        if !x.is_finite() {
            return Err(Error::Numeric("state matrix has non-finite entries".into()));
        }
        let (g, m1) = gram(x);
        let (xty, m2) = cross(x, y)?;
        tally(counter, Phase::Fit, m1 + m2);
        Ok(Self { gram: g, xty, samples: x.rows() })
    }

    /// Solves for one λ. Multiplies: Cholesky plus `N²·Q` for the solves.
    pub fn solve(&self, lambda: f64, counter: Option<&MacCounter>) -> Result<Matrix> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be finite and non-negative, got {lambda}")));
        }
        let mut a = self.gram.clone();
        for i in 0..a.rows() {
            a[(i, i)] += lambda;
        }
        let (ch, m1) = Cholesky::factor(&a).map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!("singular ridge system at lambda={lambda}: {m}")),
            other => other,
        })?;
        let (wt, m2) = ch.solve(&self.xty)?;
        tally(counter, Phase::Fit, m1 + m2);
        if !wt.is_finite() {
            return Err(Error::Numeric("ridge solution is not finite".into()));
        }
        Ok(wt.transpose())
    }
}

/// Exact multiply count of [`fit_rr`] for `B` samples, `N` features and `Q`
/// classes.
pub fn fit_mac_count(b: usize, n: usize, q: usize) -> u64 {
    let (b, n, q) = (b as u64, n as u64, q as u64);
    let chol: u64 = (0..n).map(|j| j + (n - j - 1) * j).sum();
    b * n * n + b * n * q + chol + q * n * n.saturating_sub(1)
}

/// Trains a readout on labelled states.
pub fn train_readout(
    x: &Matrix,
    labels: &[u16],
    lambda: f64,
    reservoir_hash: u64,
    transform_id: &str,
    counter: Option<&MacCounter>,
) -> Result<WeightModel> {
    if labels.len() != x.rows() {
        return Err(Error::Dimension { expected: x.rows(), actual: labels.len() });
    }
    let (classes, y) = one_hot(labels);
    let w = fit_rr(x, &y, lambda, counter)?;
    let m = WeightModel {
        w,
        labels: classes,
        lambda,
        transform_id: transform_id.to_string(),
        reservoir_hash,
        trained_on: x.rows(),
    };
    m.validate()?;
    Ok(m)
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Predicted class and score vector.
pub fn predict(model: &WeightModel, x: &StateVector) -> Result<(u16, Vec<f64>)> {
    if x.reservoir_hash != model.reservoir_hash {
        return Err(Error::HashMismatch { model: model.reservoir_hash, state: x.reservoir_hash });
    }
    let scores = model.scores(&x.x)?;
    Ok((model.labels[argmax(&scores)], scores))
}

/// Predicted labels for every row of `x`.
pub fn predict_batch(model: &WeightModel, x: &Matrix, counter: Option<&MacCounter>) -> Result<Vec<u16>> {
    if x.cols() != model.n() {
        return Err(Error::Dimension { expected: model.n(), actual: x.cols() });
    }
    tally(counter, Phase::Inference, (x.rows() * model.parameter_count()) as u64);
    Ok((0..x.rows())
        .into_par_iter()
        .map(|i| {
            let r = x.row(i);
            let scores: Vec<f64> = model.w.row_iter().map(|w| dot(w, r)).collect();
            model.labels[argmax(&scores)]
        })
        .collect())
}

/// Fraction of matching labels.
pub fn accuracy(predicted: &[u16], truth: &[u16]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    predicted.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64
}

/// Test accuracy for each λ, reusing one Gram matrix.
pub fn lambda_sweep(
    train: &Matrix,
    train_labels: &[u16],
    test: &Matrix,
    test_labels: &[u16],
    lambdas: &[f64],
) -> Result<Vec<f64>> {
    let (classes, y) = one_hot(train_labels);
    let problem = RidgeProblem::from_targets(train, &y, None)?;
    lambdas
        .iter()
        .map(|&l| {
            let w = problem.solve(l, None)?;
            let m = WeightModel {
                w,
                labels: classes.clone(),
                lambda: l,
                transform_id: String::new(),
                reservoir_hash: 0,
                trained_on: train.rows(),
            };
            Ok(accuracy(&predict_batch(&m, test, None)?, test_labels))
        })
        .collect()
}

/// Reservoir and transform hyper-parameters of one grid point; λ is swept
/// separately because it does not require recomputing states.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    pub eta: f64,
    pub nu: f64,
    pub n: usize,
    pub k: usize,
    pub transform: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchSpace {
    pub lambdas: Vec<f64>,
    pub etas: Vec<f64>,
    pub nus: Vec<f64>,
    pub ns: Vec<usize>,
    pub ks: Vec<usize>,
    pub transforms: Vec<String>,
    /// Run a second pass around the coarse optimum.
    pub refine: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub point: GridPoint,
    pub lambda: f64,
    pub accuracy: f64,
    pub refined: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridOutcome {
    pub best: GridRow,
    pub table: Vec<GridRow>,
}

fn better(a: &GridRow, b: &GridRow) -> bool {
    if a.accuracy != b.accuracy {
        return a.accuracy > b.accuracy;
    }
    if a.point.n != b.point.n {
        return a.point.n < b.point.n;
    }
    a.point.k > b.point.k
}

fn neighbours<T: Copy + PartialOrd + Into<f64>>(grid: &[T], at: f64, geometric: bool) -> Vec<f64> {
    let mut v: Vec<f64> = grid.iter().map(|&x| x.into()).collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let i = v.iter().position(|&x| x == at).unwrap_or(0);
    let mid = |a: f64, b: f64| if geometric && a > 0.0 && b > 0.0 { (a * b).sqrt() } else { 0.5 * (a + b) };
    let mut out = Vec::new();
    if i > 0 {
        out.push(mid(v[i - 1], at));
    }
    out.push(at);
    if i + 1 < v.len() {
        out.push(mid(at, v[i + 1]));
    }
    out
}

/// Hierarchical grid search.
///
/// `evaluate(point, lambdas)` returns one validation accuracy per λ. The
/// coarse pass covers the full product grid; the optional refined pass
/// re-evaluates midpoints of η, ν and λ around the incumbent. The best row
/// has the highest accuracy, ties going to smaller `N`, then larger `k`,
/// then earlier evaluation order.
pub fn grid_search<F>(space: &SearchSpace, evaluate: F) -> Result<GridOutcome>
where
    F: Fn(&GridPoint, &[f64]) -> Result<Vec<f64>> + Sync,
{
    let mut points = Vec::new();
    for t in &space.transforms {
        for &n in &space.ns {
            for &k in &space.ks {
                for &eta in &space.etas {
                    for &nu in &space.nus {
                        points.push(GridPoint { eta, nu, n, k, transform: t.clone() });
                    }
                }
            }
        }
    }
    if points.is_empty() || space.lambdas.is_empty() {
        return Err(Error::Config("empty search grid".into()));
    }
    let run = |pts: &[GridPoint], lambdas: &[f64], refined: bool| -> Result<Vec<GridRow>> {
        let per_point: Vec<Vec<f64>> = pts.par_iter().map(|p| evaluate(p, lambdas)).collect::<Result<_>>()?;
        let mut rows = Vec::new();
        for (p, accs) in pts.iter().zip(per_point) {
            if accs.len() != lambdas.len() {
                return Err(Error::Dimension { expected: lambdas.len(), actual: accs.len() });
            }
            for (&lambda, accuracy) in lambdas.iter().zip(accs) {
                rows.push(GridRow { point: p.clone(), lambda, accuracy, refined });
            }
        }
        Ok(rows)
    };
    let pick = |rows: &[GridRow]| -> GridRow {
        let mut best = &rows[0];
        for r in &rows[1..] {
            if better(r, best) {
                best = r;
            }
        }
        best.clone()
    };

    let mut table = run(&points, &space.lambdas, false)?;
    let mut best = pick(&table);
    if space.refine {
        let inc = best.point.clone();
        let lambdas = neighbours(&space.lambdas, best.lambda, true);
        let mut fine = Vec::new();
        for eta in neighbours(&space.etas, inc.eta, false) {
            for nu in neighbours(&space.nus, inc.nu, false) {
                fine.push(GridPoint { eta, nu, ..inc.clone() });
            }
        }
        let rows = run(&fine, &lambdas, true)?;
        let cand = pick(&rows);
        if better(&cand, &best) {
            best = cand;
        }
        table.extend(rows);
    }
    Ok(GridOutcome { best, table })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_systems() {
        let i2 = Matrix::identity(2);
        let w = fit_rr(&i2, &i2, 0.0, None).unwrap();
        assert!(w.max_abs_diff(&i2) < 1e-15);
        let w = fit_rr(&i2, &i2, 1.0, None).unwrap();
        assert!((w[(0, 0)] - 0.5).abs() < 1e-15 && w[(0, 1)] == 0.0);
    }

    #[test]
    fn singular_without_regularisation_fails() {
        let x = Matrix::from_vec(2, 2, vec![1.0, 1.0, 2.0, 2.0]).unwrap();
        let err = fit_rr(&x, &Matrix::identity(2), 0.0, None).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert!(fit_rr(&x, &Matrix::identity(2), 1e-3, None).is_ok());
        assert!(fit_rr(&x, &Matrix::identity(2), -1.0, None).is_err());
    }

    #[test]
    fn counted_macs_match_formula() {
        let x = Matrix::from_vec(7, 3, (0..21).map(|i| (i as f64 * 0.7).sin()).collect()).unwrap();
        let labels = [0, 1, 2, 3, 0, 1, 2];
        let counter = MacCounter::new();
        train_readout(&x, &labels, 0.1, 0, "", Some(&counter)).unwrap();
        assert_eq!(counter.get(Phase::Fit), fit_mac_count(7, 3, 4));
    }

    #[test]
    fn predict_tie_and_hash_rules() {
        let m = WeightModel {
            w: Matrix::identity(2),
            labels: vec![4, 9],
            lambda: 0.0,
            transform_id: String::new(),
            reservoir_hash: 5,
            trained_on: 2,
        };
        let s = |x: Vec<f64>, h| StateVector { x, reservoir_hash: h };
        assert_eq!(predict(&m, &s(vec![0.9, 0.1], 5)).unwrap().0, 4);
        assert_eq!(predict(&m, &s(vec![0.1, 0.9], 5)).unwrap().0, 9);
        assert_eq!(predict(&m, &s(vec![0.0, 0.0], 5)).unwrap().0, 4);
        assert!(matches!(predict(&m, &s(vec![0.0, 0.0], 6)), Err(Error::HashMismatch { .. })));
        assert!(matches!(predict(&m, &s(vec![0.0], 5)), Err(Error::Dimension { .. })));
    }

    #[test]
    fn model_bytes_round_trip() {
        let m = WeightModel {
            w: Matrix::from_vec(2, 3, vec![0.5, -1.0, 2.0, 0.25, 0.0, 3.5]).unwrap(),
            labels: vec![3, 11],
            lambda: 0.01,
            transform_id: String::new(),
            reservoir_hash: 0xdead_beef,
            trained_on: 0,
        };
        let b = m.to_bytes();
        assert_eq!(b.len(), header_bytes(2) + 4 * 6);
        assert_eq!(WeightModel::from_bytes(&b).unwrap(), m);
        let mut bad = b.clone();
        bad[1] = b'X';
        assert!(matches!(WeightModel::from_bytes(&bad), Err(Error::Format(_))));
        assert!(matches!(WeightModel::from_bytes(&b[..b.len() - 1]), Err(Error::Format(_))));
    }

    #[test]
    fn one_hot_orders_labels() {
        let (c, y) = one_hot(&[5, 2, 5]);
        assert_eq!(c, vec![2, 5]);
        assert_eq!(y.as_slice(), &[0.0, 1.0, 1.0, 0.0, 0.0, 1.0]);
    }

    fn space() -> SearchSpace {
        SearchSpace {
            lambdas: vec![1e-3, 1e-1],
            etas: vec![0.5, 1.0],
            nus: vec![0.5],
            ns: vec![10, 20],
            ks: vec![1, 2],
            transforms: vec!["fft".into()],
            refine: false,
        }
    }

    #[test]
    fn grid_single_point_and_ties() {
        let one = SearchSpace {
            lambdas: vec![0.1],
            etas: vec![1.0],
            nus: vec![0.2],
            ns: vec![5],
            ks: vec![1],
            transforms: vec!["amp".into()],
            refine: true,
        };
        let out = grid_search(&one, |_, l| Ok(vec![0.5; l.len()])).unwrap();
        assert_eq!(out.best.point.n, 5);
        assert_eq!(out.best.lambda, 0.1);
        // All equal: smallest N, then largest k wins.
        let out = grid_search(&space(), |_, l| Ok(vec![0.7; l.len()])).unwrap();
        assert_eq!((out.best.point.n, out.best.point.k), (10, 2));
        assert_eq!(out.table.len(), 16);
    }

    #[test]
    fn grid_finds_dominant_point_and_refines() {
        let mut s = space();
        s.refine = true;
        let out = grid_search(&s, |p, l| {
            Ok(l.iter().map(|&lam| if p.eta == 1.0 && p.n == 20 && lam == 1e-1 { 0.9 } else { 0.3 }).collect())
        })
        .unwrap();
        assert_eq!((out.best.point.eta, out.best.point.n, out.best.lambda), (1.0, 20, 1e-1));
        assert!(out.table.iter().any(|r| r.refined && r.point.eta == 0.75));
        assert!(grid_search(&SearchSpace { ns: vec![], ..space() }, |_, l| Ok(vec![0.0; l.len()])).is_err());
    }
}
