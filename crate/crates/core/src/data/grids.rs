//! Design points for every benchmark.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndiff::Array;

/// Training inputs for the main and auxiliary modalities. The evaluation
/// set is every input that carries auxiliary data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grids {
    pub main: Array,
    pub aux: Array,
}

impl Grids {
    pub fn eval(&self) -> &Array {
        &self.aux
    }
}

/// Cartesian product of per-axis levels, last axis varying fastest.
pub fn cartesian(axes: &[&[f64]]) -> Array {
    let m = axes.len();
    let mut rows: Vec<Vec<f64>> = vec![vec![]];
    for axis in axes {
        rows = rows
            .into_iter()
            .flat_map(|r| {
                axis.iter().map(move |v| {
                    let mut next = r.clone();
                    next.push(*v);
                    next
                })
            })
            .collect();
    }
    let n = rows.len();
    Array::matrix(n, m, rows.concat()).expect("consistent rows")
}

fn power(levels: &[f64], d: usize) -> Array {
    let axes: Vec<&[f64]> = std::iter::repeat(levels).take(d).collect();
    cartesian(&axes)
}

const BRANIN_MAIN_X1: [f64; 6] = [-2.0, -0.5, 1.0, 4.0, 5.5, 7.0];
const BRANIN_MAIN_X2: [f64; 6] = [3.0, 4.5, 6.0, 9.0, 10.5, 12.0];
const BRANIN_AUX_X1: [f64; 9] = [-3.5, -2.0, -0.5, 1.0, 2.5, 4.0, 5.5, 7.0, 8.5];
const BRANIN_AUX_X2: [f64; 9] = [1.5, 3.0, 4.5, 6.0, 7.5, 9.0, 10.5, 12.0, 13.5];
const PACIOREK_MAIN: [f64; 4] = [0.475, 0.5625, 0.7375, 0.825];
const PACIOREK_EXTRA: [f64; 5] = [0.3875, 0.51875, 0.65, 0.71825, 0.9125];
/// Dimension of the Paciorek input.
pub const PACIOREK_DIM: usize = 4;
const SERIES_MAIN: [f64; 6] = [-1.5, -1.0, -0.5, 0.5, 1.0, 1.5];
const SERIES_AUX: [f64; 9] = [-2.0, -1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5, 2.0];

/// `{k + i/20 : i = 0..20, k ∈ days}`, deduplicated and sorted.
pub fn wind_hours(days: &[u32]) -> Vec<f64> {
    let mut ticks: Vec<u32> = days.iter().flat_map(|k| (0..=20).map(move |i| 20 * k + i)).collect();
    ticks.sort_unstable();
    ticks.dedup();
    ticks.into_iter().map(|t| t as f64 / 20.0).collect()
}

pub const WIND_MAIN_DAYS: [u32; 3] = [2, 4, 6];
pub const WIND_AUX_DAYS: [u32; 6] = [1, 2, 3, 4, 5, 6];

/// Grids for a dataset name. `wind_daily` depends on the calendar covered
/// by the input file and is built during ingestion instead.
pub fn make_grids(name: &str) -> Result<Grids> {
    Ok(match name {
        "branin" => Grids {
            main: cartesian(&[&BRANIN_MAIN_X1, &BRANIN_MAIN_X2]),
            aux: cartesian(&[&BRANIN_AUX_X1, &BRANIN_AUX_X2]),
        },
        "paciorek" | "paciorek_high" | "paciorek_low" => {
            let main = power(&PACIOREK_MAIN, PACIOREK_DIM);
            let extra = power(&PACIOREK_EXTRA, PACIOREK_DIM);
            let aux = Array::vcat(&[&main, &extra])?;
            Grids { main, aux }
        }
        "timeseries" | "timeseries_1d" => Grids {
            main: power(&SERIES_MAIN, 3),
            aux: power(&SERIES_AUX, 3),
        },
        "wind" => Grids {
            main: Array::column(&wind_hours(&WIND_MAIN_DAYS)),
            aux: Array::column(&wind_hours(&WIND_AUX_DAYS)),
        },
        other => return Err(Error::UnknownDataset(other.to_string())),
    })
}

/// Row index in `superset` of every row of `subset`, by exact equality.
pub fn locate_rows(subset: &Array, superset: &Array) -> Result<Vec<usize>> {
    use std::collections::HashMap;
    let key = |r: &[f64]| r.iter().map(|v| v.to_bits()).collect::<Vec<u64>>();
    let index: HashMap<Vec<u64>, usize> = (0..superset.rows()).map(|i| (key(superset.row_slice(i)), i)).collect();
    (0..subset.rows())
        .map(|i| {
            index
                .get(&key(subset.row_slice(i)))
                .copied()
                .ok_or_else(|| Error::Contract(format!("row {i} of the main grid is missing from the auxiliary grid")))
        })
        .collect()
}
