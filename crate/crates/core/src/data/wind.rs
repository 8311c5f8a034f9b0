//! Hourly wind table ingestion.

use std::path::Path;

use chrono::{DateTime, Datelike, NaiveDate, NaiveDateTime, TimeDelta, Timelike};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndiff::Array;

/// Column holding ISO-8601 timestamps.
pub const TIMESTAMP_COLUMN: &str = "timestamp";
/// Main-modality variable.
pub const WIND_MAIN: &str = "obs_Spd10m";
/// Scalar variables kept as they are.
pub const WIND_SCALARS: [&str; 9] = [
    "obs_Spd10m",
    "obs_Spd60m",
    "era_Spd10m",
    "era_Spd60m",
    "era_Spd100m",
    "era_u10m",
    "era_v10m",
    "era_u100m",
    "era_v100m",
];
/// Directions in degrees, each replaced by a sine and a cosine column.
pub const WIND_DIRECTIONS: [&str; 4] = ["obs_Dir10m", "obs_Dir60m", "era_Dir10m", "era_Dir100m"];
/// Months whose days form the main-modality training set in daily mode.
pub const DAILY_MAIN_MONTHS: [u32; 6] = [2, 4, 6, 7, 9, 11];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindMode {
    Hourly,
    Daily,
}

/// Seventeen hourly variables on a gap-free hourly clock. Missing cells
/// are NaN.
#[derive(Clone, Debug, PartialEq)]
pub struct WindTable {
    pub start: NaiveDateTime,
    pub variables: Vec<String>,
    /// `values[v][h]` is variable `v` at hour `h` after `start`.
    pub values: Vec<Vec<f64>>,
}

fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(t.naive_utc());
    }
    [
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M",
    ]
    .iter()
    .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
}

/// Direction in degrees to `(sin, cos)`.
pub fn direction_components(degrees: f64) -> (f64, f64) {
    let r = degrees.to_radians();
    (r.sin(), r.cos())
}

/// Names of the seventeen derived variables, scalars first.
pub fn wind_variables() -> Vec<String> {
    let mut out: Vec<String> = WIND_SCALARS.iter().map(|s| s.to_string()).collect();
    for d in WIND_DIRECTIONS {
        out.push(format!("{d}_sin"));
        out.push(format!("{d}_cos"));
    }
    out
}

impl WindTable {
    pub fn read(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::from_reader(file)
    }

    pub fn from_reader<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let find = |name: &str| headers.iter().position(|h| h == name);
        let required: Vec<&str> = std::iter::once(TIMESTAMP_COLUMN)
            .chain(WIND_SCALARS)
            .chain(WIND_DIRECTIONS)
            .collect();
        let missing: Vec<&str> = required.iter().copied().filter(|n| find(n).is_none()).collect();
        if !missing.is_empty() {
            return Err(Error::Schema(format!(
                "wind table lacks columns: {}",
                missing.join(", ")
            )));
        }
        let ts_col = find(TIMESTAMP_COLUMN).expect("checked");
        let scalar_cols: Vec<usize> = WIND_SCALARS.iter().map(|n| find(n).expect("checked")).collect();
        let dir_cols: Vec<usize> = WIND_DIRECTIONS.iter().map(|n| find(n).expect("checked")).collect();
        let variables = wind_variables();
        let mut values: Vec<Vec<f64>> = vec![vec![]; variables.len()];
        let mut times = vec![];
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let row = line + 2;
            let t = parse_timestamp(&rec[ts_col])
                .ok_or_else(|| Error::Ingestion(format!("row {row}: bad timestamp {:?}", &rec[ts_col])))?;
            times.push(t);
            let cell = |c: usize| -> Result<f64> {
                let s = rec.get(c).unwrap_or("");
                if s.is_empty() {
                    return Ok(f64::NAN);
                }
                s.parse::<f64>()
                    .map_err(|_| Error::Ingestion(format!("row {row}: {:?} is not a number", s)))
            };
            for (v, &c) in scalar_cols.iter().enumerate() {
                values[v].push(cell(c)?);
            }
            for (d, &c) in dir_cols.iter().enumerate() {
                let (s, co) = direction_components(cell(c)?);
                values[WIND_SCALARS.len() + 2 * d].push(s);
                values[WIND_SCALARS.len() + 2 * d + 1].push(co);
            }
        }
        let start = *times
            .first()
            .ok_or_else(|| Error::Ingestion("wind table has no rows".into()))?;
        let gaps: Vec<String> = times
            .windows(2)
            .filter(|w| w[1] - w[0] != TimeDelta::hours(1))
            .map(|w| format!("{} -> {}", w[0], w[1]))
            .collect();
        if !gaps.is_empty() {
            return Err(Error::Ingestion(format!(
                "timestamps are not hourly: {}",
                gaps.join("; ")
            )));
        }
        Ok(WindTable {
            start,
            variables,
            values,
        })
    }

    pub fn hours(&self) -> usize {
        self.values.first().map_or(0, |v| v.len())
    }

    fn index(&self, name: &str) -> Result<usize> {
        self.variables
            .iter()
            .position(|v| v == name)
            .ok_or_else(|| Error::Schema(format!("unknown wind variable {name}")))
    }

    /// Midnight of the first day in the table; hourly inputs count days
    /// from here.
    pub fn origin(&self) -> NaiveDateTime {
        self.start.date().and_hms_opt(0, 0, 0).expect("midnight exists")
    }

    /// Observed `(days since origin, value)` pairs of one variable.
    pub fn hourly(&self, name: &str) -> Result<(Vec<f64>, Vec<f64>)> {
        let v = self.index(name)?;
        let offset = (self.start - self.origin()).num_minutes() as f64 / 1440.0;
        Ok(self.values[v]
            .iter()
            .enumerate()
            .filter(|(_, y)| y.is_finite())
            .map(|(h, y)| (offset + h as f64 / 24.0, *y))
            .unzip())
    }

    /// Complete days of one variable as `(date, [days, 24])`; a day with
    /// any missing hour is dropped.
    pub fn daily(&self, name: &str) -> Result<(Vec<NaiveDate>, Array)> {
        let v = self.index(name)?;
        let skip = (24 - self.start.hour() as usize) % 24;
        let mut dates = vec![];
        let mut rows: Vec<f64> = vec![];
        let mut h = skip;
        while h + 24 <= self.hours() {
            let day = &self.values[v][h..h + 24];
            if day.iter().all(|x| x.is_finite()) {
                dates.push((self.start + TimeDelta::hours(h as i64)).date());
                rows.extend_from_slice(day);
            }
            h += 24;
        }
        let n = dates.len();
        Ok((dates, Array::matrix(n, 24, rows)?))
    }
}

/// One modality as read from the table, before any transform.
#[derive(Clone, Debug, PartialEq)]
pub struct WindModality {
    pub name: String,
    pub is_main: bool,
    /// Hourly mode: `[n, 1]` days since origin. Daily mode: `[n, 1]` days
    /// since the first calendar day of the table.
    pub x: Array,
    pub y: Array,
}

/// Every variable of the table as a modality, main first.
pub fn wind_ingest(path: &Path, mode: WindMode) -> Result<Vec<WindModality>> {
    let table = WindTable::read(path)?;
    wind_modalities(&table, mode)
}

pub fn wind_modalities(table: &WindTable, mode: WindMode) -> Result<Vec<WindModality>> {
    let first_day = table.origin().date();
    let mut names = table.variables.clone();
    let main_pos = names
        .iter()
        .position(|n| n == WIND_MAIN)
        .expect("main variable present");
    names.swap(0, main_pos);
    names
        .iter()
        .map(|name| {
            let (x, y) = match mode {
                WindMode::Hourly => {
                    let (t, v) = table.hourly(name)?;
                    (Array::column(&t), Array::column(&v))
                }
                WindMode::Daily => {
                    let (dates, y) = table.daily(name)?;
                    let x: Vec<f64> = dates.iter().map(|d| (*d - first_day).num_days() as f64).collect();
                    (Array::column(&x), y)
                }
            };
            Ok(WindModality {
                name: name.clone(),
                is_main: name == WIND_MAIN,
                x,
                y,
            })
        })
        .collect()
}

/// Whether a daily input (days since `first_day`) falls in a main month.
pub fn is_main_training_day(first_day: NaiveDate, x: f64) -> bool {
    let d = first_day + TimeDelta::days(x.round() as i64);
    DAILY_MAIN_MONTHS.contains(&d.month())
}

/// Natural cubic spline through strictly increasing knots.
#[derive(Clone, Debug, PartialEq)]
pub struct NaturalSpline {
    x: Vec<f64>,
    y: Vec<f64>,
    /// Second derivatives at the knots.
    m: Vec<f64>,
}

impl NaturalSpline {
    pub fn fit(x: &[f64], y: &[f64]) -> Result<Self> {
        let n = x.len();
        if n != y.len() || n < 2 {
            return Err(Error::Contract(format!(
                "spline needs ≥ 2 matching knots, got {n} and {}",
                y.len()
            )));
        }
        if x.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Contract("spline knots must increase strictly".into()));
        }
        let mut m = vec![0.0; n];
        if n > 2 {
            // Thomas algorithm on the interior second derivatives.
            let k = n - 2;
            let mut diag = vec![0.0; k];
            let mut upper = vec![0.0; k];
            let mut rhs = vec![0.0; k];
            for i in 0..k {
                let (h0, h1) = (x[i + 1] - x[i], x[i + 2] - x[i + 1]);
                diag[i] = 2.0 * (h0 + h1);
                upper[i] = h1;
                rhs[i] = 6.0 * ((y[i + 2] - y[i + 1]) / h1 - (y[i + 1] - y[i]) / h0);
            }
            for i in 1..k {
                let lower = x[i + 1] - x[i];
                let w = lower / diag[i - 1];
                diag[i] -= w * upper[i - 1];
                rhs[i] -= w * rhs[i - 1];
            }
            m[k] = rhs[k - 1] / diag[k - 1];
            for i in (0..k - 1).rev() {
                m[i + 1] = (rhs[i] - upper[i] * m[i + 2]) / diag[i];
            }
        }
        Ok(NaturalSpline {
            x: x.to_vec(),
            y: y.to_vec(),
            m,
        })
    }

    /// Value at `t`; outside the knots the end pieces are extended.
    pub fn eval(&self, t: f64) -> f64 {
        let n = self.x.len();
        let i = match self.x.partition_point(|v| *v <= t) {
            0 => 0,
            p if p >= n => n - 2,
            p => p - 1,
        };
        let h = self.x[i + 1] - self.x[i];
        let a = (self.x[i + 1] - t) / h;
        let b = (t - self.x[i]) / h;
        a * self.y[i]
            + b * self.y[i + 1]
            + ((a.powi(3) - a) * self.m[i] + (b.powi(3) - b) * self.m[i + 1]) * h * h / 6.0
    }
}
