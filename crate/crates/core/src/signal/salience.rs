//! Accuracy of a plain ridge readout on every sub-window of the burst.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{dot, Cholesky, Matrix};
use crate::ridge::{accuracy, argmax, one_hot, RidgeProblem};

#[derive(Debug, Clone, PartialEq)]
pub struct SalienceMap {
    pub stride: usize,
    /// `(start, end, accuracy)` for every window, `end` exclusive.
    pub cells: Vec<(usize, usize, f64)>,
    pub best: (usize, usize, f64),
}

impl SalienceMap {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("start,end,accuracy\n");
        for (a, b, acc) in &self.cells {
            s.push_str(&format!("{a},{b},{acc:.6}\n"));
        }
        s
    }
}

/// Evaluates every window `[start, end)` whose bounds lie on the stride grid
/// (the last bound is the burst length). Rows of `train` and `test` are
/// real-valued datapoints, normally amplitudes.
///
/// The best window is the shortest one attaining the maximum accuracy, ties
/// going to the smallest start.
pub fn build_salience_map(
    train: &Matrix,
    train_labels: &[u16],
    test: &Matrix,
    test_labels: &[u16],
    lambda: f64,
    stride: usize,
) -> Result<SalienceMap> {
    let len = train.cols();
    if stride == 0 || len == 0 {
        return Err(Error::InvalidInput("empty salience grid".into()));
    }
    if test.cols() != len {
        return Err(Error::Dimension { expected: len, actual: test.cols() });
    }
    let mut bounds: Vec<usize> = (0..len).step_by(stride).collect();
    bounds.push(len);
    let mut windows = Vec::new();
    for (i, &a) in bounds.iter().enumerate() {
        for &b in &bounds[i + 1..] {
            windows.push((a, b));
        }
    }
    let (classes, y) = one_hot(train_labels);
    let full = RidgeProblem::from_targets(train, &y, None)?;
    let q = classes.len();
    let cells: Vec<(usize, usize, f64)> = windows
        .par_iter()
        .map(|&(a, b)| -> Result<(usize, usize, f64)> {
            let w = b - a;
            let mut g = Matrix::zeros(w, w);
            let mut xty = Matrix::zeros(w, q);
            for i in 0..w {
                for j in 0..w {
                    g[(i, j)] = full.gram[(a + i, a + j)];
                }
                g[(i, i)] += lambda;
                xty.row_mut(i).copy_from_slice(full.xty.row(a + i));
            }
            let (ch, _) = Cholesky::factor(&g)?;
            let (wt, _) = ch.solve(&xty)?;
            let wm = wt.transpose();
            let pred: Vec<u16> = test
                .row_iter()
                .map(|r| {
                    let scores: Vec<f64> = wm.row_iter().map(|wr| dot(wr, &r[a..b])).collect();
                    classes[argmax(&scores)]
                })
                .collect();
            Ok((a, b, accuracy(&pred, test_labels)))
        })
        .collect::<Result<_>>()?;
    let mut best = cells[0];
    for &c in &cells[1..] {
        let (len_c, len_b) = (c.1 - c.0, best.1 - best.0);
        if c.2 > best.2 || (c.2 == best.2 && (len_c < len_b || (len_c == len_b && c.0 < best.0))) {
            best = c;
        }
    }
    Ok(SalienceMap { stride, cells, best })
}
