//! Closed-form benchmark functions.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const BRANIN_A: f64 = 1.0;
const BRANIN_R: f64 = 6.0;
const BRANIN_S: f64 = 10.0;

fn branin_b() -> f64 {
    5.1 / (4.0 * PI * PI)
}

fn branin_c() -> f64 {
    5.0 / PI
}

fn branin_t() -> f64 {
    1.0 / (8.0 * PI)
}

/// The polynomial part `a (x₂ − b x₁² + c x₁ − r)²`.
pub fn branin_polynomial(x1: f64, x2: f64) -> f64 {
    BRANIN_A * (x2 - branin_b() * x1 * x1 + branin_c() * x1 - BRANIN_R).powi(2)
}

pub fn branin(x1: f64, x2: f64) -> f64 {
    branin_polynomial(x1, x2) + BRANIN_S * (1.0 - branin_t()) * x1.cos() + BRANIN_S
}

/// Lower-fidelity Branin with the polynomial weight reduced by `A₁ + 0.5`.
pub fn branin_low(x1: f64, x2: f64, a1: f64) -> f64 {
    branin(x1, x2) - (a1 + 0.5) * branin_polynomial(x1, x2)
}

/// Fidelity parameters of the three auxiliary Branin modalities.
pub const BRANIN_A1: [f64; 3] = [0.0, 0.514, 1.0];

fn inverse_product(x: &[f64]) -> Result<f64> {
    if let Some(i) = x.iter().position(|v| *v == 0.0) {
        return Err(Error::Domain {
            func: "paciorek",
            detail: format!("coordinate {i} is zero"),
        });
    }
    Ok(x.iter().map(|v| v.recip()).product())
}

pub fn paciorek(x: &[f64]) -> Result<f64> {
    Ok(inverse_product(x)?.sin())
}

pub fn paciorek_low(x: &[f64], a2: f64) -> Result<f64> {
    let p = inverse_product(x)?;
    Ok(p.sin() - 9.0 * a2 * a2 * p.cos())
}

/// Auxiliary fidelity sets for the three Paciorek variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PaciorekVariant {
    Base,
    High,
    Low,
}

impl PaciorekVariant {
    pub fn a2(self) -> [f64; 4] {
        match self {
            PaciorekVariant::Base => [0.25, 0.5, 0.75, 1.0],
            PaciorekVariant::High => [0.125, 0.25, 0.375, 0.5],
            PaciorekVariant::Low => [0.625, 0.75, 0.875, 1.0],
        }
    }
}

/// Amplitude of the periodic term in generated series.
pub const SERIES_BETA: f64 = 0.25;
/// Standard deviation of the additive series noise.
pub const SERIES_NOISE_SD: f64 = 0.05;
/// Resolution of the grid used for summaries.
pub const SUMMARY_GRID: usize = 10_001;
/// Series length used by the benchmark datasets.
pub const SERIES_LENGTH: usize = 200;

/// `t^α + β cos(2πt/γ + δ)`.
pub fn series_value(t: f64, alpha: f64, beta: f64, gamma: f64, delta: f64) -> f64 {
    t.powf(alpha) + beta * (2.0 * PI * t / gamma + delta).cos()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesParams {
    pub alpha: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl SeriesParams {
    pub fn new(alpha: f64, gamma: f64, delta: f64) -> Result<Self> {
        if !(alpha > 0.0 && gamma > 0.0 && delta > -PI && delta < PI) {
            return Err(Error::Domain {
                func: "series",
                detail: format!("need α > 0, γ > 0, −π < δ < π; got ({alpha}, {gamma}, {delta})"),
            });
        }
        Ok(SeriesParams { alpha, gamma, delta })
    }

    /// Parameters from the grid coordinates `(log α, log γ, atanh δ)`.
    pub fn from_grid(u: &[f64]) -> Result<Self> {
        if u.len() != 3 {
            return Err(Error::dim(
                "series",
                format!("grid point has {} coordinates, need 3", u.len()),
            ));
        }
        Self::new(u[0].exp(), u[1].exp(), u[2].tanh())
    }

    pub fn value(&self, t: f64, beta: f64) -> f64 {
        series_value(t, self.alpha, beta, self.gamma, self.delta)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesSummaries {
    pub total_distance: f64,
    pub average_slope: f64,
    pub argmax_location: f64,
}

impl SeriesSummaries {
    pub fn to_vec(self) -> [f64; 3] {
        [self.total_distance, self.average_slope, self.argmax_location]
    }
}

/// Summaries of the noiseless curve on a uniform grid over `[0, 1]`. Total
/// distance is the variation of the curve over the grid, which converges
/// to `∫|f′|`.
pub fn series_summaries(p: &SeriesParams, beta: f64) -> SeriesSummaries {
    let step = 1.0 / (SUMMARY_GRID - 1) as f64;
    let mut prev = p.value(0.0, beta);
    let (mut dist, mut best, mut best_t) = (0.0, prev, 0.0);
    for i in 1..SUMMARY_GRID {
        let t = i as f64 * step;
        let v = p.value(t, beta);
        dist += (v - prev).abs();
        if v > best {
            best = v;
            best_t = t;
        }
        prev = v;
    }
    SeriesSummaries {
        total_distance: dist,
        average_slope: p.value(1.0, beta) - p.value(0.0, beta),
        argmax_location: best_t,
    }
}

/// Noisy series of length `n` at `tᵢ = i/(n−1)` plus noiseless summaries.
pub fn timeseries_sample<R: Rng + ?Sized>(
    p: &SeriesParams,
    n: usize,
    rng: &mut R,
) -> Result<(Vec<f64>, SeriesSummaries)> {
    if n < 2 {
        return Err(Error::Domain {
            func: "timeseries_sample",
            detail: format!("length {n} < 2"),
        });
    }
    let noise = Normal::new(0.0, SERIES_NOISE_SD).expect("positive sd");
    let series = (0..n)
        .map(|i| p.value(i as f64 / (n - 1) as f64, SERIES_BETA) + noise.sample(rng))
        .collect();
    Ok((series, series_summaries(p, SERIES_BETA)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn branin_reference_points() {
        assert!((branin(PI, 2.275) - 10.0 / (8.0 * PI)).abs() < 1e-12);
        assert!((branin(PI, 2.275) - 0.397887).abs() < 1e-6);
        // the known global minima
        for (a, b) in [(-PI, 12.275), (9.42478, 2.475)] {
            assert!((branin(a, b) - 0.397887).abs() < 1e-5);
        }
    }

    #[test]
    fn low_fidelity_agrees_where_polynomial_vanishes() {
        for x1 in [-4.0, -1.0, 0.5, 3.0, 8.0] {
            let x2 = branin_b() * x1 * x1 - branin_c() * x1 + BRANIN_R;
            for a in [0.0, 0.514, 1.0, 0.3] {
                assert!((branin_low(x1, x2, a) - branin(x1, x2)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn branin_matches_independent_expansion() {
        // Expanded form written out term by term.
        let other = |x1: f64, x2: f64| {
            let b = 5.1 / (4.0 * PI * PI);
            let c = 5.0 / PI;
            let inner = x2 - b * x1.powi(2) + c * x1 - 6.0;
            inner * inner + 10.0 * (1.0 - 1.0 / (8.0 * PI)) * x1.cos() + 10.0
        };
        for x1 in [-2.0, -0.5, 1.0, 4.0, 5.5, 7.0] {
            for x2 in [3.0, 4.5, 6.0, 9.0, 10.5, 12.0] {
                assert!((branin(x1, x2) - other(x1, x2)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn main_is_a_combination_of_auxiliaries() {
        for (x1, x2) in [(-3.0, 2.0), (1.5, 7.0), (8.0, 13.0)] {
            let combo = 1.5 * branin_low(x1, x2, 0.0) - 0.5 * branin_low(x1, x2, 1.0);
            assert!((combo - branin(x1, x2)).abs() < 1e-9);
        }
    }

    #[test]
    fn paciorek_values() {
        assert!((paciorek(&[1.0; 4]).unwrap() - 1f64.sin()).abs() < 1e-15);
        assert!((paciorek(&[1.0; 4]).unwrap() - 0.841471).abs() < 1e-6);
        let x = [0.4, 0.6, 0.9, 0.7];
        assert_eq!(paciorek_low(&x, 0.0).unwrap(), paciorek(&x).unwrap());
        assert!(matches!(paciorek(&[0.5, 0.0]), Err(Error::Domain { .. })));
        assert_eq!(PaciorekVariant::High.a2(), [0.125, 0.25, 0.375, 0.5]);
    }

    #[test]
    fn series_endpoint_checks() {
        let p = SeriesParams::new(1.0, 1e9, 0.3).unwrap();
        let s = series_summaries(&p, 0.0);
        assert!((s.average_slope - 1.0).abs() < 1e-12);
        assert!((s.total_distance - 1.0).abs() < 1e-9);
        assert!((s.argmax_location - 1.0).abs() < 1e-12);
        for delta in [-2.0, 0.0, 1.2] {
            let q = SeriesParams::new(0.7, 0.4, delta).unwrap();
            assert!((q.value(0.0, SERIES_BETA) - 0.25 * f64::cos(delta)).abs() < 1e-15);
        }
        assert!(SeriesParams::new(-1.0, 1.0, 0.0).is_err());
        assert!(SeriesParams::new(1.0, 1.0, 4.0).is_err());
    }

    #[test]
    fn total_distance_matches_derivative_quadrature() {
        let p = SeriesParams::new(2.0, 0.3, 0.5).unwrap();
        let d = |t: f64| 2.0 * t - SERIES_BETA * 2.0 * PI / 0.3 * (2.0 * PI * t / 0.3 + 0.5).sin();
        let n = 400_000;
        let h = 1.0 / n as f64;
        let quad: f64 = (0..n).map(|i| d((i as f64 + 0.5) * h).abs() * h).sum();
        let s = series_summaries(&p, SERIES_BETA);
        assert!((s.total_distance - quad).abs() < 1e-6, "{} vs {quad}", s.total_distance);
    }

    #[test]
    fn series_sample_shape_and_noise() {
        let p = SeriesParams::from_grid(&[0.5, -1.5, -1.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (y, _) = timeseries_sample(&p, SERIES_LENGTH, &mut rng).unwrap();
        assert_eq!(y.len(), 200);
        let resid: Vec<f64> = y
            .iter()
            .enumerate()
            .map(|(i, v)| v - p.value(i as f64 / 199.0, SERIES_BETA))
            .collect();
        let sd = (resid.iter().map(|r| r * r).sum::<f64>() / 200.0).sqrt();
        assert!((sd - 0.05).abs() < 0.01, "{sd}");
        let mut again = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(timeseries_sample(&p, 200, &mut again).unwrap().0, y);
    }
}
