//! Principal component reduction and per-column standardization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndiff::Array;

/// Variance threshold used by every reduced modality.
pub const PCA_THRESHOLD: f64 = 0.95;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaRecord {
    /// Column means of the training rows.
    pub mean: Vec<f64>,
    /// Orthonormal components as columns, `[k, c]`.
    pub components: Array,
    pub retained: usize,
    /// Fraction of variance of every component, in descending order.
    pub variance_ratios: Vec<f64>,
    /// Fraction of variance explained by the retained components.
    pub explained: f64,
}

/// Principal components of `y` (`[n, k]`, `n ≥ 2`), keeping the fewest
/// leading components whose explained variance reaches `threshold`.
pub fn pca_fit(y: &Array, threshold: f64) -> Result<PcaRecord> {
    let (n, k) = (y.rows(), y.cols());
    if n < 2 {
        return Err(Error::Contract(format!("PCA needs at least two rows, got {n}")));
    }
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Contract(format!("PCA threshold {threshold} is not in (0, 1]")));
    }
    let mean: Vec<f64> = (0..k).map(|j| y.column_vec(j).iter().sum::<f64>() / n as f64).collect();
    let centered = y.zip_row(&mean, |v, m| v - m)?;
    let svd = centered.to_nalgebra().svd(false, true);
    let v_t = svd.v_t.expect("requested V");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|a, b| svd.singular_values[*b].total_cmp(&svd.singular_values[*a]));
    let power: Vec<f64> = order.iter().map(|&i| svd.singular_values[i].powi(2)).collect();
    let total: f64 = power.iter().sum();
    if !(total > 0.0) {
        log::warn!("PCA input has zero variance; no components retained");
        return Ok(PcaRecord {
            mean,
            components: Array::zeros(&[k, 0]),
            retained: 0,
            variance_ratios: vec![0.0; power.len()],
            explained: 0.0,
        });
    }
    let ratios: Vec<f64> = power.iter().map(|p| p / total).collect();
    let mut cum = 0.0;
    let mut c = ratios.len();
    for (i, r) in ratios.iter().enumerate() {
        cum += r;
        if cum >= threshold - 1e-12 {
            c = i + 1;
            break;
        }
    }
    let mut comps = Array::zeros(&[k, c]);
    for (col, &i) in order.iter().take(c).enumerate() {
        let row = v_t.row(i);
        // Sign fixed so the largest-magnitude loading is positive.
        let pivot = (0..k)
            .max_by(|a, b| row[*a].abs().total_cmp(&row[*b].abs()))
            .unwrap_or(0);
        let sign = if row[pivot] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..k {
            comps.set(j, col, sign * row[j]);
        }
    }
    Ok(PcaRecord {
        mean,
        components: comps,
        retained: c,
        explained: ratios[..c].iter().sum(),
        variance_ratios: ratios,
    })
}

/// Coefficients `(y − mean) C`, shape `[·, c]`.
pub fn pca_project(record: &PcaRecord, y: &Array) -> Result<Array> {
    if y.cols() != record.mean.len() {
        return Err(Error::dim(
            "pca_project",
            format!("{} columns, record has {}", y.cols(), record.mean.len()),
        ));
    }
    let centered = y.zip_row(&record.mean, |a, m| a - m)?;
    centered.matmul(&record.components)
}

/// `coeffs Cᵀ + mean`, shape `[·, k]`.
pub fn pca_reconstruct(record: &PcaRecord, coeffs: &Array) -> Result<Array> {
    if coeffs.cols() != record.retained {
        return Err(Error::dim(
            "pca_reconstruct",
            format!("{} coefficients, record keeps {}", coeffs.cols(), record.retained),
        ));
    }
    coeffs
        .matmul(&record.components.transpose())?
        .zip_row(&record.mean, |a, m| a + m)
}

/// Per-column affine map fit on training rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl Standardization {
    pub fn identity(k: usize) -> Self {
        Standardization {
            mean: vec![0.0; k],
            sd: vec![1.0; k],
        }
    }

    /// Column means and sample standard deviations of `train`; `label`
    /// names the data in the zero-variance error.
    pub fn fit(label: &str, train: &Array) -> Result<Self> {
        let n = train.rows();
        if n < 2 {
            return Err(Error::ZeroVariance(format!(
                "{label}: need at least two training rows, got {n}"
            )));
        }
        let mut mean = vec![];
        let mut sd = vec![];
        for j in 0..train.cols() {
            let col = train.column_vec(j);
            let m = col.iter().sum::<f64>() / n as f64;
            let s = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
            if !(s > 0.0) {
                return Err(Error::ZeroVariance(format!("{label} column {j}")));
            }
            mean.push(m);
            sd.push(s);
        }
        Ok(Standardization { mean, sd })
    }

    pub fn apply(&self, y: &Array) -> Result<Array> {
        self.check(y)?;
        Ok(self.map_rows(y, |v, m, s| (v - m) / s))
    }

    pub fn invert(&self, z: &Array) -> Result<Array> {
        self.check(z)?;
        Ok(self.map_rows(z, |v, m, s| v * s + m))
    }

    fn check(&self, y: &Array) -> Result<()> {
        if y.cols() != self.mean.len() {
            return Err(Error::dim(
                "standardize",
                format!("{} columns, fitted on {}", y.cols(), self.mean.len()),
            ));
        }
        Ok(())
    }

    fn map_rows(&self, y: &Array, f: impl Fn(f64, f64, f64) -> f64) -> Array {
        let k = y.cols();
        let mut out = y.clone();
        for (idx, v) in out.data_mut().iter_mut().enumerate() {
            let j = idx % k;
            *v = f(*v, self.mean[j], self.sd[j]);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::standard_normal;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn max_diff(a: &Array, b: &Array) -> f64 {
        a.sub(b).unwrap().max_abs()
    }

    #[test]
    fn rank_one_data_needs_one_component() {
        let t: Vec<f64> = (0..10).map(|i| i as f64 * 0.3 - 1.0).collect();
        let y = Array::from_rows(
            &t.iter()
                .map(|s| vec![1.0 + 2.0 * s, -s, 0.5 + 3.0 * s])
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let rec = pca_fit(&y, PCA_THRESHOLD).unwrap();
        assert_eq!(rec.retained, 1);
        let back = pca_reconstruct(&rec, &pca_project(&rec, &y).unwrap()).unwrap();
        assert!(max_diff(&back, &y) < 1e-10);
    }

    #[test]
    fn components_are_orthonormal_and_ratios_sorted() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let base = standard_normal(&mut rng, &[50, 6]);
        let y = base.matmul(&Array::diag(&[3.0, 2.0, 1.0, 0.5, 0.2, 0.1])).unwrap();
        let rec = pca_fit(&y, 0.99).unwrap();
        let gram = rec.components.transpose().matmul(&rec.components).unwrap();
        assert!(max_diff(&gram, &Array::eye(rec.retained)) < 1e-10);
        assert!(rec.variance_ratios.windows(2).all(|w| w[0] >= w[1]));
        assert!(rec.explained >= 0.99);
        let partial: f64 = rec.variance_ratios[..rec.retained - 1].iter().sum();
        assert!(partial < 0.99);
        let coeffs = standard_normal(&mut rng, &[4, rec.retained]);
        let round = pca_project(&rec, &pca_reconstruct(&rec, &coeffs).unwrap()).unwrap();
        assert!(max_diff(&round, &coeffs) < 1e-10);
    }

    #[test]
    fn constant_data_keeps_nothing() {
        let y = Array::full(&[5, 3], 2.0);
        let rec = pca_fit(&y, PCA_THRESHOLD).unwrap();
        assert_eq!(rec.retained, 0);
        assert_eq!(pca_project(&rec, &y).unwrap().shape(), &[5, 0]);
    }

    #[test]
    fn standardization_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let train = standard_normal(&mut rng, &[30, 3]).map(|v| 4.0 * v + 7.0);
        let st = Standardization::fit("y", &train).unwrap();
        let z = st.apply(&train).unwrap();
        for j in 0..3 {
            let c = z.column_vec(j);
            let m = c.iter().sum::<f64>() / 30.0;
            let s = (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 29.0).sqrt();
            assert!(m.abs() < 1e-12 && (s - 1.0).abs() < 1e-12);
        }
        assert!(max_diff(&st.invert(&z).unwrap(), &train) < 1e-12);
    }

    #[test]
    fn evaluation_rows_use_training_statistics() {
        let train = Array::column(&[0.0, 2.0, 4.0]);
        let shifted = Array::column(&[100.0, 102.0]);
        let st = Standardization::fit("y", &train).unwrap();
        assert_eq!(st.apply(&shifted).unwrap().data(), &[49.0, 50.0]);
    }

    #[test]
    fn zero_variance_column_is_named() {
        let train = Array::from_rows(&[vec![1.0, 5.0], vec![2.0, 5.0]]).unwrap();
        match Standardization::fit("aux", &train) {
            Err(Error::ZeroVariance(msg)) => assert!(msg.contains("aux column 1"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }
}
