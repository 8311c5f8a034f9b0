//! Benchmark datasets: generation, reduction, standardization, evaluation
//! splits and an on-disk cache.

pub mod functions;
pub mod grids;
pub mod hull;
pub mod transform;
pub mod wind;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ModalityData, TrainingData};
use crate::ndiff::Array;

use functions::{PaciorekVariant, SeriesParams, SERIES_LENGTH};
pub use hull::{hull_split, SplitLabel};
pub use transform::{pca_fit, pca_project, pca_reconstruct, PcaRecord, Standardization, PCA_THRESHOLD};
use wind::{NaturalSpline, WindMode, WindTable};

/// Every dataset name understood by [`generate`] and [`generate_wind`].
pub const DATASETS: [&str; 8] = [
    "branin",
    "paciorek",
    "paciorek_high",
    "paciorek_low",
    "timeseries",
    "timeseries_1d",
    "wind",
    "wind_daily",
];

pub fn needs_wind_table(name: &str) -> bool {
    matches!(name, "wind" | "wind_daily")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Main,
    Auxiliary,
}

/// Training data of one modality, in model space (reduced, then
/// standardized), with the transforms needed to map back.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityDataset {
    pub name: String,
    pub role: Role,
    pub x_raw: Array,
    pub x: Array,
    pub y: Array,
    pub standardization: Standardization,
    pub pca: Option<PcaRecord>,
}

/// Evaluation inputs with split labels and every modality's value there.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSet {
    pub x_raw: Array,
    pub x: Array,
    pub labels: Vec<SplitLabel>,
    /// Model-space values per modality, main first.
    pub truth: Vec<Array>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub seed: u64,
    pub input_standardization: Standardization,
    /// Main modality first.
    pub modalities: Vec<ModalityDataset>,
    pub eval: EvalSet,
}

impl Dataset {
    pub fn main(&self) -> &ModalityDataset {
        &self.modalities[0]
    }

    pub fn training_data(&self) -> Result<TrainingData> {
        let conv = |m: &ModalityDataset| ModalityData::new(m.name.clone(), m.x.clone(), m.y.clone());
        Ok(TrainingData {
            main: conv(self.main())?,
            aux: self.modalities[1..].iter().map(conv).collect::<Result<_>>()?,
        })
    }

    /// Evaluation values of all auxiliary modalities side by side.
    pub fn stacked_aux_truth(&self) -> Result<Array> {
        let parts: Vec<&Array> = self.eval.truth[1..].iter().collect();
        Array::hcat(&parts)
    }
}

/// One modality before reduction and standardization.
#[derive(Clone, Debug)]
pub struct RawModality {
    pub name: String,
    pub x: Array,
    pub y: Array,
    /// Values at the evaluation inputs.
    pub y_eval: Array,
    /// Replace responses by principal-component coefficients.
    pub reduce: bool,
}

/// Reduce, standardize and label raw modalities (main first).
pub fn assemble(name: &str, seed: u64, raw: Vec<RawModality>, x_eval: Array) -> Result<Dataset> {
    let first = raw
        .first()
        .ok_or_else(|| Error::Contract("a dataset needs a main modality".into()))?;
    let all_x: Vec<&Array> = raw.iter().map(|m| &m.x).collect();
    let input_standardization = Standardization::fit(&format!("{name} inputs"), &Array::vcat(&all_x)?)?;
    let labels = hull_split(&first.x, &x_eval);
    let mut modalities = vec![];
    let mut truth = vec![];
    for (i, m) in raw.into_iter().enumerate() {
        if m.y.rows() != m.x.rows() || m.y_eval.rows() != x_eval.rows() || m.y_eval.cols() != m.y.cols() {
            return Err(Error::dim(
                "assemble",
                format!("modality {} has inconsistent shapes", m.name),
            ));
        }
        let (pca, y, y_eval) = if m.reduce {
            let rec = pca_fit(&m.y, PCA_THRESHOLD)?;
            if rec.retained == 0 {
                return Err(Error::ZeroVariance(format!(
                    "{}: no principal component retained",
                    m.name
                )));
            }
            let y = pca_project(&rec, &m.y)?;
            let y_eval = pca_project(&rec, &m.y_eval)?;
            (Some(rec), y, y_eval)
        } else {
            (None, m.y, m.y_eval)
        };
        let st = Standardization::fit(&m.name, &y)?;
        truth.push(st.apply(&y_eval)?);
        modalities.push(ModalityDataset {
            role: if i == 0 { Role::Main } else { Role::Auxiliary },
            x: input_standardization.apply(&m.x)?,
            y: st.apply(&y)?,
            x_raw: m.x,
            standardization: st,
            pca,
            name: m.name,
        });
    }
    Ok(Dataset {
        name: name.to_string(),
        seed,
        eval: EvalSet {
            x: input_standardization.apply(&x_eval)?,
            x_raw: x_eval,
            labels,
            truth,
        },
        input_standardization,
        modalities,
    })
}

fn eval_rows(x: &Array, f: impl Fn(&[f64]) -> Result<f64>) -> Result<Array> {
    let v = (0..x.rows()).map(|i| f(x.row_slice(i))).collect::<Result<Vec<_>>>()?;
    Ok(Array::column(&v))
}

fn scalar_modality(
    name: String,
    main: &Array,
    aux: &Array,
    as_main: bool,
    f: impl Fn(&[f64]) -> Result<f64>,
) -> Result<RawModality> {
    let x = if as_main { main.clone() } else { aux.clone() };
    Ok(RawModality {
        name,
        y: eval_rows(&x, &f)?,
        y_eval: eval_rows(aux, &f)?,
        x,
        reduce: false,
    })
}

/// Build a synthetic benchmark. `seed` drives the series noise and is
/// recorded for every dataset.
pub fn generate(name: &str, seed: u64) -> Result<Dataset> {
    if needs_wind_table(name) {
        return Err(Error::Contract(format!("dataset {name} is built from a wind table")));
    }
    let g = grids::make_grids(name)?;
    let raw = match name {
        "branin" => {
            let mut raw = vec![scalar_modality("branin".into(), &g.main, &g.aux, true, |r| {
                Ok(functions::branin(r[0], r[1]))
            })?];
            for a in functions::BRANIN_A1 {
                raw.push(scalar_modality(
                    format!("branin_low_{a}"),
                    &g.main,
                    &g.aux,
                    false,
                    |r| Ok(functions::branin_low(r[0], r[1], a)),
                )?);
            }
            raw
        }
        "paciorek" | "paciorek_high" | "paciorek_low" => {
            let variant = match name {
                "paciorek" => PaciorekVariant::Base,
                "paciorek_high" => PaciorekVariant::High,
                _ => PaciorekVariant::Low,
            };
            let mut raw = vec![scalar_modality(
                "paciorek".into(),
                &g.main,
                &g.aux,
                true,
                functions::paciorek,
            )?];
            for a in variant.a2() {
                raw.push(scalar_modality(
                    format!("paciorek_low_{a}"),
                    &g.main,
                    &g.aux,
                    false,
                    |r| functions::paciorek_low(r, a),
                )?);
            }
            raw
        }
        _ => series_modalities(name, &g, seed)?,
    };
    assemble(name, seed, raw, g.aux.clone())
}

fn series_modalities(name: &str, g: &grids::Grids, seed: u64) -> Result<Vec<RawModality>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = g.aux.rows();
    let mut series = Vec::with_capacity(n * SERIES_LENGTH);
    let mut summaries = vec![vec![]; 3];
    for i in 0..n {
        let p = SeriesParams::from_grid(g.aux.row_slice(i))?;
        let (y, s) = functions::timeseries_sample(&p, SERIES_LENGTH, &mut rng)?;
        series.extend(y);
        for (col, v) in summaries.iter_mut().zip(s.to_vec()) {
            col.push(v);
        }
    }
    let series = Array::matrix(n, SERIES_LENGTH, series)?;
    let main_rows = grids::locate_rows(&g.main, &g.aux)?;
    let names = ["total_distance", "average_slope", "argmax_location"];
    let modality = |label: &str, y: &Array, is_main: bool, reduce: bool| RawModality {
        name: label.to_string(),
        x: if is_main { g.main.clone() } else { g.aux.clone() },
        y: if is_main { y.select_rows(&main_rows) } else { y.clone() },
        y_eval: y.clone(),
        reduce,
    };
    let summary = |j: usize| Array::column(&summaries[j]);
    Ok(if name == "timeseries" {
        let mut raw = vec![modality("series", &series, true, true)];
        for (j, label) in names.iter().enumerate() {
            raw.push(modality(label, &summary(j), false, false));
        }
        raw
    } else {
        vec![
            modality(names[0], &summary(0), true, false),
            modality("series", &series, false, true),
            modality(names[1], &summary(1), false, false),
            modality(names[2], &summary(2), false, false),
        ]
    })
}

fn spline_at(x: &[f64], y: &[f64], at: &Array, label: &str) -> Result<Array> {
    let (lo, hi) = (
        x.first().copied().unwrap_or(f64::NAN),
        x.last().copied().unwrap_or(f64::NAN),
    );
    let s = NaturalSpline::fit(x, y)?;
    let out = at
        .data()
        .iter()
        .map(|t| {
            if *t < lo || *t > hi {
                Err(Error::Ingestion(format!(
                    "{label}: day {t} is outside the table ({lo} to {hi})"
                )))
            } else {
                Ok(s.eval(*t))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Array::column(&out))
}

/// Build `wind` (hourly, spline-interpolated) or `wind_daily` (PCA-reduced
/// 24-vectors) from an ingested table.
pub fn generate_wind(name: &str, table: &WindTable, seed: u64) -> Result<Dataset> {
    match name {
        "wind" => {
            let g = grids::make_grids("wind")?;
            let mods = wind::wind_modalities(table, WindMode::Hourly)?;
            let raw = mods
                .iter()
                .map(|m| {
                    let (x, y) = (m.x.data(), m.y.data());
                    let at = if m.is_main { &g.main } else { &g.aux };
                    Ok(RawModality {
                        name: m.name.clone(),
                        x: at.clone(),
                        y: spline_at(x, y, at, &m.name)?,
                        y_eval: spline_at(x, y, &g.aux, &m.name)?,
                        reduce: false,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            assemble(name, seed, raw, g.aux)
        }
        "wind_daily" => {
            let mods = wind::wind_modalities(table, WindMode::Daily)?;
            let first_day = table.origin().date();
            // Evaluate on days where every modality is complete.
            let mut days: Vec<f64> = mods[0].x.data().to_vec();
            for m in &mods[1..] {
                days.retain(|d| m.x.data().contains(d));
            }
            let x_eval = Array::column(&days);
            let raw = mods
                .iter()
                .map(|m| {
                    let pick = |keep: &dyn Fn(f64) -> bool| -> Vec<usize> {
                        (0..m.x.rows()).filter(|&i| keep(m.x.get(i, 0))).collect()
                    };
                    let train = if m.is_main {
                        pick(&|d| wind::is_main_training_day(first_day, d))
                    } else {
                        pick(&|_| true)
                    };
                    let eval = pick(&|d| days.contains(&d));
                    Ok(RawModality {
                        name: m.name.clone(),
                        x: m.x.select_rows(&train),
                        y: m.y.select_rows(&train),
                        y_eval: m.y.select_rows(&eval),
                        reduce: true,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            assemble(name, seed, raw, x_eval)
        }
        other => Err(Error::UnknownDataset(other.to_string())),
    }
}

// --------------------------------------------------------------------- cache

/// Version of the on-disk dataset layout.
pub const CACHE_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";

#[derive(Serialize, Deserialize)]
struct CacheManifest {
    format_version: u32,
    dataset: serde_json::Value,
}

fn is_array(map: &serde_json::Map<String, serde_json::Value>) -> bool {
    map.len() == 2 && map.contains_key("shape") && map.contains_key("data")
}

fn externalize(v: &mut serde_json::Value, dir: &Path, counter: &mut usize, arrays: &[Array]) -> Result<()> {
    use serde_json::Value;
    match v {
        Value::Object(map) if is_array(map) => {
            let file = format!("array_{:04}.f64", *counter);
            let arr = &arrays[*counter];
            *counter += 1;
            let bytes: Vec<u8> = arr.data().iter().flat_map(|x| x.to_le_bytes()).collect();
            std::fs::write(dir.join(&file), bytes)?;
            let shape = map.remove("shape").expect("checked");
            map.clear();
            map.insert("file".into(), Value::String(file));
            map.insert("shape".into(), shape);
        }
        Value::Object(map) => {
            for (_, child) in map.iter_mut() {
                externalize(child, dir, counter, arrays)?;
            }
        }
        Value::Array(items) => {
            for child in items {
                externalize(child, dir, counter, arrays)?;
            }
        }
        _ => {}
    }
    Ok(())
}

fn internalize(v: &mut serde_json::Value, dir: &Path) -> Result<()> {
    use serde_json::Value;
    match v {
        Value::Object(map) if map.len() == 2 && map.contains_key("file") && map.contains_key("shape") => {
            let file = map["file"]
                .as_str()
                .ok_or_else(|| Error::Schema("array file is not a string".into()))?;
            let path = dir.join(file);
            let bytes = std::fs::read(&path)?;
            if bytes.len() % 8 != 0 {
                return Err(Error::Format {
                    path,
                    detail: "length is not a multiple of 8".into(),
                });
            }
            let data: Vec<Value> = bytes
                .chunks_exact(8)
                .map(|c| {
                    let x = f64::from_le_bytes(c.try_into().expect("8 bytes"));
                    serde_json::Number::from_f64(x)
                        .map(Value::Number)
                        .unwrap_or(Value::Null)
                })
                .collect();
            if data.iter().any(Value::is_null) {
                return Err(Error::Format {
                    path,
                    detail: "non-finite value in cached array".into(),
                });
            }
            map.remove("file");
            map.insert("data".into(), Value::Array(data));
        }
        Value::Object(map) => {
            for (_, child) in map.iter_mut() {
                internalize(child, dir)?;
            }
        }
        Value::Array(items) => {
            for child in items {
                internalize(child, dir)?;
            }
        }
        _ => {}
    }
    Ok(())
}

fn collect_arrays(v: &serde_json::Value, out: &mut Vec<Array>) -> Result<()> {
    use serde_json::Value;
    match v {
        Value::Object(map) if is_array(map) => out.push(serde_json::from_value(v.clone())?),
        Value::Object(map) => {
            for (_, child) in map {
                collect_arrays(child, out)?;
            }
        }
        Value::Array(items) => {
            for child in items {
                collect_arrays(child, out)?;
            }
        }
        _ => {}
    }
    Ok(())
}

/// Write `dataset` as `manifest.json` plus one little-endian `f64` file per
/// array. The output depends only on the dataset.
pub fn write_cache(dataset: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut value = serde_json::to_value(dataset)?;
    let mut arrays = vec![];
    collect_arrays(&value, &mut arrays)?;
    let mut counter = 0;
    externalize(&mut value, dir, &mut counter, &arrays)?;
    let manifest = CacheManifest {
        format_version: CACHE_VERSION,
        dataset: value,
    };
    std::fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_cache(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path)?;
    let mut manifest: CacheManifest = serde_json::from_str(&text)?;
    if manifest.format_version != CACHE_VERSION {
        return Err(Error::Schema(format!(
            "dataset cache version {} is not supported (expected {CACHE_VERSION})",
            manifest.format_version
        )));
    }
    internalize(&mut manifest.dataset, dir)?;
    Ok(serde_json::from_value(manifest.dataset)?)
}
