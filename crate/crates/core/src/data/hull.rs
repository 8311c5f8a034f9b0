//! Split of evaluation inputs into training samples, interpolation points
//! and extrapolation points.

use std::collections::HashSet;

use minilp::{ComparisonOp, OptimizationDirection, Problem};
use serde::{Deserialize, Serialize};

use crate::ndiff::Array;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitLabel {
    Sample,
    InHull,
    OutOfHull,
}

impl SplitLabel {
    pub const ALL: [SplitLabel; 3] = [SplitLabel::Sample, SplitLabel::InHull, SplitLabel::OutOfHull];

    pub fn name(self) -> &'static str {
        match self {
            SplitLabel::Sample => "sample",
            SplitLabel::InHull => "in_hull",
            SplitLabel::OutOfHull => "out_of_hull",
        }
    }
}

/// Residual allowed in the convex-combination feasibility problem, in
/// coordinates rescaled to the training bounding box.
pub const HULL_TOLERANCE: f64 = 1e-9;

fn row_key(r: &[f64]) -> Vec<u64> {
    r.iter().map(|v| v.to_bits()).collect()
}

fn full_dimensional(x: &Array) -> bool {
    let (n, m) = (x.rows(), x.cols());
    if n <= m {
        return false;
    }
    let mean: Vec<f64> = (0..m).map(|j| x.column_vec(j).iter().sum::<f64>() / n as f64).collect();
    let centered = x.zip_row(&mean, |a, b| a - b).expect("shapes agree");
    let sv = centered.to_nalgebra().singular_values();
    let top = sv.iter().cloned().fold(0.0, f64::max);
    top > 0.0 && sv.iter().filter(|s| **s > 1e-10 * top).count() == m
}

/// Smallest L1 residual of `point` against convex combinations of `rows`.
fn hull_residual(rows: &[Vec<f64>], point: &[f64]) -> f64 {
    let m = point.len();
    let mut lp = Problem::new(OptimizationDirection::Minimize);
    let lambdas: Vec<_> = rows.iter().map(|_| lp.add_var(0.0, (0.0, f64::INFINITY))).collect();
    let slack: Vec<_> = (0..m)
        .map(|_| {
            (
                lp.add_var(1.0, (0.0, f64::INFINITY)),
                lp.add_var(1.0, (0.0, f64::INFINITY)),
            )
        })
        .collect();
    for j in 0..m {
        let mut expr: Vec<_> = lambdas.iter().zip(rows).map(|(v, r)| (*v, r[j])).collect();
        expr.push((slack[j].0, 1.0));
        expr.push((slack[j].1, -1.0));
        lp.add_constraint(&expr[..], ComparisonOp::Eq, point[j]);
    }
    let ones: Vec<_> = lambdas.iter().map(|v| (*v, 1.0)).collect();
    lp.add_constraint(&ones[..], ComparisonOp::Eq, 1.0);
    match lp.solve() {
        Ok(sol) => sol.objective(),
        Err(_) => f64::INFINITY,
    }
}

/// Label each row of `eval_x` relative to the main training inputs.
/// Exact training inputs are `Sample`; the rest are decided by LP
/// feasibility, or all `OutOfHull` when the training inputs do not span
/// the input space.
pub fn hull_split(train_x: &Array, eval_x: &Array) -> Vec<SplitLabel> {
    let m = train_x.cols();
    let seen: HashSet<Vec<u64>> = (0..train_x.rows()).map(|i| row_key(train_x.row_slice(i))).collect();
    let spans = full_dimensional(train_x);
    let lo: Vec<f64> = (0..m)
        .map(|j| train_x.column_vec(j).into_iter().fold(f64::INFINITY, f64::min))
        .collect();
    let width: Vec<f64> = (0..m)
        .map(|j| {
            let hi = train_x.column_vec(j).into_iter().fold(f64::NEG_INFINITY, f64::max);
            let w = hi - lo[j];
            if w > 0.0 {
                w
            } else {
                1.0
            }
        })
        .collect();
    let scale = |r: &[f64]| -> Vec<f64> { r.iter().enumerate().map(|(j, v)| (v - lo[j]) / width[j]).collect() };
    let rows: Vec<Vec<f64>> = (0..train_x.rows()).map(|i| scale(train_x.row_slice(i))).collect();
    (0..eval_x.rows())
        .map(|i| {
            let r = eval_x.row_slice(i);
            if seen.contains(&row_key(r)) {
                SplitLabel::Sample
            } else if !spans {
                SplitLabel::OutOfHull
            } else {
                let p = scale(r);
                // Outside the bounding box is outside the hull.
                if p.iter().any(|v| *v < -HULL_TOLERANCE || *v > 1.0 + HULL_TOLERANCE) {
                    SplitLabel::OutOfHull
                } else if hull_residual(&rows, &p) <= HULL_TOLERANCE {
                    SplitLabel::InHull
                } else {
                    SplitLabel::OutOfHull
                }
            }
        })
        .collect()
}
