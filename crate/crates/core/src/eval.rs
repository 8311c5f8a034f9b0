//! Prediction metrics and their per-split summaries.

use serde::{Deserialize, Serialize};

use rand::Rng;

use crate::data::{Dataset, SplitLabel};
use crate::error::{Error, Result};
use crate::models::{self, ModelState};
use crate::ndiff::Array;

/// Relative ridge added to the sample covariance of draws.
pub const COVARIANCE_JITTER: f64 = 1e-8;
/// Relative ridge added to both covariance blocks in canonical correlation.
pub const CCA_RIDGE: f64 = 1e-10;

fn check_draws(y_true: &[f64], samples: &Array, op: &'static str) -> Result<()> {
    if !samples.is_matrix() || samples.cols() != y_true.len() {
        return Err(Error::dim(
            op,
            format!("truth of length {} vs draws {:?}", y_true.len(), samples.shape()),
        ));
    }
    if samples.rows() == 0 {
        return Err(Error::Contract(format!("{op} needs at least one draw")));
    }
    Ok(())
}

fn column_means(a: &Array) -> Vec<f64> {
    let n = a.rows() as f64;
    (0..a.cols()).map(|j| a.column_vec(j).iter().sum::<f64>() / n).collect()
}

/// Sample covariance of the rows of `a` (divisor `n − 1`).
fn covariance(a: &Array) -> Result<Array> {
    let centered = a.zip_row(&column_means(a), |v, m| v - m)?;
    Ok(centered
        .transpose()
        .matmul(&centered)?
        .scale(1.0 / (a.rows() as f64 - 1.0)))
}

/// `‖y − mean(draws)‖₂`.
pub fn bias(y_true: &[f64], samples: &Array) -> Result<f64> {
    check_draws(y_true, samples, "bias")?;
    let mu = column_means(samples);
    Ok(y_true.iter().zip(&mu).map(|(y, m)| (y - m).powi(2)).sum::<f64>().sqrt())
}

/// `((1/k) dᵀ V⁻¹ d)^{1/2}` with `d = y − mean(draws)` and `V` the sample
/// covariance of the draws plus `1e-8 · tr(V)/k · I`.
pub fn standardized_error(y_true: &[f64], samples: &Array) -> Result<f64> {
    check_draws(y_true, samples, "standardized_error")?;
    let k = y_true.len();
    let mu = column_means(samples);
    let d: Vec<f64> = y_true.iter().zip(&mu).map(|(y, m)| y - m).collect();
    if d.iter().all(|v| *v == 0.0) {
        return Ok(0.0);
    }
    if samples.rows() < 2 {
        return Err(Error::Contract("standardized error needs at least two draws".into()));
    }
    let mut v = covariance(samples)?;
    let jitter = COVARIANCE_JITTER * v.trace() / k as f64;
    for i in 0..k {
        v.set(i, i, v.get(i, i) + jitter);
    }
    let solved = v.solve_spd(&Array::column(&d)).map_err(|e| Error::Numerical {
        context: "standardized_error".into(),
        detail: format!("draw covariance is singular after regularization: {e}"),
    })?;
    let q: f64 = d.iter().zip(solved.data()).map(|(a, b)| a * b).sum();
    Ok((q.max(0.0) / k as f64).sqrt())
}

fn regularized_covariance(a: &Array, label: &str) -> Result<Array> {
    let mut s = covariance(a)?;
    let p = s.rows();
    let tr = s.trace();
    if !(tr > 0.0) {
        return Err(Error::Numerical {
            context: "canonical_correlation".into(),
            detail: format!("{label} has no variance"),
        });
    }
    let ridge = CCA_RIDGE * tr / p as f64;
    for i in 0..p {
        s.set(i, i, s.get(i, i) + ridge);
    }
    Ok(s)
}

/// Largest canonical correlation between the columns of `x` and `y`:
/// the top singular value of `Lx⁻¹ Sxy Ly⁻ᵀ` with `S = L Lᵀ`.
pub fn canonical_correlation(x: &Array, y: &Array) -> Result<f64> {
    if x.rows() != y.rows() || !x.is_matrix() || !y.is_matrix() {
        return Err(Error::dim(
            "canonical_correlation",
            format!("{:?} vs {:?}", x.shape(), y.shape()),
        ));
    }
    if x.rows() < 2 || x.cols() == 0 || y.cols() == 0 {
        return Err(Error::Contract(
            "canonical correlation needs two rows and non-empty blocks".into(),
        ));
    }
    let wrap = |label: &'static str| {
        move |e: Error| Error::Numerical {
            context: "canonical_correlation".into(),
            detail: format!("{label} covariance is rank deficient: {e}"),
        }
    };
    let lx = regularized_covariance(x, "X")?.cholesky().map_err(wrap("X"))?;
    let ly = regularized_covariance(y, "Y")?.cholesky().map_err(wrap("Y"))?;
    let xc = x.zip_row(&column_means(x), |v, m| v - m)?;
    let yc = y.zip_row(&column_means(y), |v, m| v - m)?;
    let sxy = xc.transpose().matmul(&yc)?.scale(1.0 / (x.rows() as f64 - 1.0));
    let left = lx.solve_lower(&sxy)?;
    let whitened = ly.solve_lower(&left.transpose())?;
    let sv = whitened.to_nalgebra().singular_values();
    Ok(sv.iter().cloned().fold(0.0, f64::max))
}

/// Metrics of one evaluation point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub point: usize,
    pub split: SplitLabel,
    pub bias: f64,
    pub standardized_error: f64,
}

pub fn metrics_record(point: usize, split: SplitLabel, y_true: &[f64], samples: &Array) -> Result<MetricsRecord> {
    Ok(MetricsRecord {
        point,
        split,
        bias: bias(y_true, samples)?,
        standardized_error: standardized_error(y_true, samples)?,
    })
}

/// Posterior draws of the main modality at every evaluation input of
/// `dataset`, scored against the recorded truth.
pub fn evaluate_model<R: Rng + ?Sized>(
    model: &ModelState,
    dataset: &Dataset,
    n_samples: usize,
    rng: &mut R,
) -> Result<Vec<MetricsRecord>> {
    let training = dataset.training_data()?;
    let pred = models::predict(model, &training, &dataset.eval.x, n_samples, rng)?;
    pred.samples
        .iter()
        .enumerate()
        .map(|(i, s)| metrics_record(i, dataset.eval.labels[i], dataset.eval.truth[0].row_slice(i), s))
        .collect()
}

/// Canonical correlation between the main modality and all auxiliaries
/// stacked, over the evaluation inputs.
pub fn dataset_canonical_correlation(dataset: &Dataset) -> Result<f64> {
    if dataset.modalities.len() < 2 {
        return Err(Error::Contract(format!(
            "dataset `{}` has no auxiliary modality",
            dataset.name
        )));
    }
    canonical_correlation(&dataset.eval.truth[0], &dataset.stacked_aux_truth()?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub split: SplitLabel,
    pub count: usize,
    pub mean_bias: f64,
    pub median_bias: f64,
    pub mean_standardized_error: f64,
    pub median_standardized_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    /// Non-empty splits in `Sample, InHull, OutOfHull` order.
    pub splits: Vec<SplitSummary>,
    /// Splits with no records.
    pub empty: Vec<SplitLabel>,
}

impl Aggregate {
    pub fn get(&self, split: SplitLabel) -> Option<&SplitSummary> {
        self.splits.iter().find(|s| s.split == split)
    }
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Means and medians per split.
pub fn aggregate(records: &[MetricsRecord]) -> Aggregate {
    let mut splits = vec![];
    let mut empty = vec![];
    for split in SplitLabel::ALL {
        let rows: Vec<&MetricsRecord> = records.iter().filter(|r| r.split == split).collect();
        if rows.is_empty() {
            empty.push(split);
            continue;
        }
        let b: Vec<f64> = rows.iter().map(|r| r.bias).collect();
        let e: Vec<f64> = rows.iter().map(|r| r.standardized_error).collect();
        splits.push(SplitSummary {
            split,
            count: rows.len(),
            mean_bias: mean(&b),
            median_bias: median(&b),
            mean_standardized_error: mean(&e),
            median_standardized_error: median(&e),
        });
    }
    Aggregate { splits, empty }
}
