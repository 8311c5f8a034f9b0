//! Experiment files.
//!
//! An experiment is a TOML document. Every key is optional except
//! `dataset`; missing values come from the selected profile.
//!
//! ```toml
//! dataset = "branin"                 # branin, paciorek, paciorek_high, paciorek_low,
//!                                    # timeseries, timeseries_1d, wind, wind_daily
//! model = ["unimodal", "layered"]    # one name or a list; default: all three
//! seed = 7                           # base seed
//! dataset_seed = 7                   # default: the base seed
//! replicates = 5                     # replicate i uses seed + i ...
//! seeds = [11, 12, 13, 14, 15]       # ... unless the seeds are listed
//! samples = 500                      # posterior draws per evaluation point
//! output = "runs/branin"
//! wind_csv = "data/wind.csv"         # required for wind and wind_daily
//! inject_nan = [1]                   # replicates whose first training input becomes NaN
//!
//! [architecture]
//! layers = 2
//! width = 64
//! activation = "tanh"                # or "relu"
//!
//! [fit]
//! learning_rate = 0.01
//! max_epochs = 1500
//! n_mc = 1
//! window = 50
//! significance = 0.05
//! ```
//!
//! Command-line flags win over the file, and the file wins over the profile.

use std::fmt;
use std::ops::Range;
use std::path::{Path, PathBuf};

use mmbnn::bnn::Activation;
use mmbnn::data::{needs_wind_table, DATASETS};
use mmbnn::models::{Architecture, FitConfig, ModelKind};
use serde::de::{self, Deserializer, SeqAccess, Visitor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::Spanned;

use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// 2×64 networks, 5 replicates, at most 1500 epochs.
    #[default]
    Desk,
    /// 2×256 networks, 20 replicates, at most 5000 epochs.
    Paper,
}

impl Profile {
    fn layers(self) -> usize {
        2
    }

    fn width(self) -> usize {
        match self {
            Profile::Desk => 64,
            Profile::Paper => 256,
        }
    }

    fn replicates(self) -> usize {
        match self {
            Profile::Desk => 5,
            Profile::Paper => 20,
        }
    }

    fn max_epochs(self) -> usize {
        match self {
            Profile::Desk => 1500,
            Profile::Paper => 5000,
        }
    }
}

/// Values given on the command line.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub profile: Profile,
    pub out: Option<PathBuf>,
}

/// A fully resolved experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub dataset: String,
    pub models: Vec<ModelKind>,
    pub architecture: Architecture,
    /// Optimizer settings; the seed is replaced per replicate.
    pub fit: FitConfig,
    pub dataset_seed: u64,
    pub replicate_seeds: Vec<u64>,
    pub samples: usize,
    pub wind_csv: Option<PathBuf>,
    pub inject_nan: Vec<usize>,
    pub profile: Profile,
    /// Where results go; not part of the hash, so moving a run keeps it.
    #[serde(skip)]
    pub output: PathBuf,
}

impl Experiment {
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            line: 0,
            column: 0,
            message: format!("cannot read experiment file: {e}"),
        })?;
        Self::parse(&text, path, overrides)
    }

    pub fn parse(text: &str, path: &Path, overrides: &Overrides) -> Result<Self> {
        let at = |span: Option<Range<usize>>, message: String| {
            let (line, column) = span.map(|s| line_col(text, s.start)).unwrap_or((1, 1));
            CliError::Config {
                path: path.to_path_buf(),
                line,
                column,
                message,
            }
        };
        let raw: RawConfig = toml::from_str(text).map_err(|e| at(e.span(), e.message().to_string()))?;
        let profile = overrides.profile;

        let dataset = raw.dataset.get_ref().clone();
        if !DATASETS.contains(&dataset.as_str()) {
            return Err(at(
                Some(raw.dataset.span()),
                format!("unknown dataset `{dataset}`, expected one of {}", DATASETS.join(", ")),
            ));
        }
        if needs_wind_table(&dataset) && raw.wind_csv.is_none() {
            return Err(at(
                Some(raw.dataset.span()),
                format!("dataset `{dataset}` reads measurements from a file: set `wind_csv`"),
            ));
        }

        let models = match raw.model {
            Some(m) => {
                let span = m.span();
                let list = m.into_inner().0;
                if list.is_empty() {
                    return Err(at(Some(span), "`model` lists no model".into()));
                }
                let mut unique: Vec<ModelKind> = Vec::new();
                for k in list {
                    if unique.contains(&k) {
                        return Err(at(Some(span), format!("model `{}` is listed twice", k.name())));
                    }
                    unique.push(k);
                }
                unique
            }
            None => vec![ModelKind::Unimodal, ModelKind::Joint, ModelKind::Layered],
        };

        let seed = overrides.seed.or(raw.seed).unwrap_or(0);
        let dataset_seed = raw.dataset_seed.unwrap_or(seed);
        let replicate_seeds = match (&raw.seeds, &raw.replicates) {
            (Some(seeds), replicates) => {
                if seeds.get_ref().is_empty() {
                    return Err(at(
                        Some(seeds.span()),
                        "`seeds` is empty: at least one replicate is needed".into(),
                    ));
                }
                if let Some(r) = replicates {
                    if *r.get_ref() != seeds.get_ref().len() {
                        return Err(at(
                            Some(seeds.span()),
                            format!(
                                "{} seeds listed but `replicates` is {}",
                                seeds.get_ref().len(),
                                r.get_ref()
                            ),
                        ));
                    }
                }
                let mut sorted = seeds.get_ref().clone();
                sorted.sort_unstable();
                sorted.dedup();
                if sorted.len() != seeds.get_ref().len() {
                    return Err(at(Some(seeds.span()), "`seeds` contains duplicates".into()));
                }
                seeds.get_ref().clone()
            }
            (None, Some(r)) if *r.get_ref() == 0 => {
                return Err(at(Some(r.span()), "`replicates` must be at least 1".into()));
            }
            (None, r) => {
                let count = r.as_ref().map(|r| *r.get_ref()).unwrap_or_else(|| profile.replicates());
                (0..count as u64).map(|i| seed.wrapping_add(i)).collect()
            }
        };

        let samples = match raw.samples {
            Some(s) if *s.get_ref() < 2 => {
                return Err(at(Some(s.span()), "`samples` must be at least 2".into()));
            }
            Some(s) => s.into_inner(),
            None => 500,
        };

        let inject_nan = match raw.inject_nan {
            Some(list) => {
                if let Some(bad) = list.get_ref().iter().find(|&&i| i >= replicate_seeds.len()) {
                    return Err(at(
                        Some(list.span()),
                        format!(
                            "`inject_nan` names replicate {bad}, but there are {}",
                            replicate_seeds.len()
                        ),
                    ));
                }
                list.into_inner()
            }
            None => Vec::new(),
        };

        let arch_raw = raw.architecture.unwrap_or_default();
        let positive = |v: Option<Spanned<usize>>, key: &str, default: usize| -> Result<usize> {
            match v {
                Some(v) if *v.get_ref() == 0 => Err(at(Some(v.span()), format!("`{key}` must be positive"))),
                Some(v) => Ok(v.into_inner()),
                None => Ok(default),
            }
        };
        let layers = positive(arch_raw.layers, "layers", profile.layers())?;
        let width = positive(arch_raw.width, "width", profile.width())?;
        let architecture = Architecture {
            hidden: vec![width; layers],
            activation: arch_raw.activation.unwrap_or(Activation::Tanh),
        };

        let fit_raw = raw.fit.unwrap_or_default();
        let defaults = FitConfig::default();
        let learning_rate = match fit_raw.learning_rate {
            Some(v) if !(*v.get_ref() > 0.0 && v.get_ref().is_finite()) => {
                return Err(at(Some(v.span()), "`learning_rate` must be positive".into()));
            }
            Some(v) => v.into_inner(),
            None => defaults.learning_rate,
        };
        let significance = match fit_raw.significance {
            Some(v) if !(*v.get_ref() > 0.0 && *v.get_ref() < 1.0) => {
                return Err(at(Some(v.span()), "`significance` must lie in (0, 1)".into()));
            }
            Some(v) => v.into_inner(),
            None => defaults.significance,
        };
        let window = match fit_raw.window {
            Some(v) if *v.get_ref() < 3 => {
                return Err(at(Some(v.span()), "`window` must be at least 3".into()));
            }
            Some(v) => v.into_inner(),
            None => defaults.window,
        };
        let fit = FitConfig {
            learning_rate,
            max_epochs: positive(fit_raw.max_epochs, "max_epochs", profile.max_epochs())?,
            n_mc: positive(fit_raw.n_mc, "n_mc", defaults.n_mc)?,
            window,
            significance,
            seed,
        };

        let output = overrides
            .out
            .clone()
            .or(raw.output)
            .unwrap_or_else(|| PathBuf::from("runs").join(&dataset));

        Ok(Experiment {
            dataset,
            models,
            architecture,
            fit,
            dataset_seed,
            replicate_seeds,
            samples,
            wind_csv: raw.wind_csv,
            inject_nan,
            profile,
            output,
        })
    }

    /// SHA-256 of the canonical JSON form, as lowercase hex.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("experiment serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Optimizer settings for one replicate.
    pub fn fit_for(&self, seed: u64) -> FitConfig {
        FitConfig {
            seed,
            ..self.fit.clone()
        }
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map(|s| s.chars().count()).unwrap_or(0) + 1;
    (line, column)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    dataset: Spanned<String>,
    model: Option<Spanned<ModelList>>,
    seed: Option<u64>,
    dataset_seed: Option<u64>,
    replicates: Option<Spanned<usize>>,
    seeds: Option<Spanned<Vec<u64>>>,
    samples: Option<Spanned<usize>>,
    output: Option<PathBuf>,
    wind_csv: Option<PathBuf>,
    inject_nan: Option<Spanned<Vec<usize>>>,
    architecture: Option<RawArchitecture>,
    fit: Option<RawFit>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawArchitecture {
    layers: Option<Spanned<usize>>,
    width: Option<Spanned<usize>>,
    activation: Option<Activation>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFit {
    learning_rate: Option<Spanned<f64>>,
    max_epochs: Option<Spanned<usize>>,
    n_mc: Option<Spanned<usize>>,
    window: Option<Spanned<usize>>,
    significance: Option<Spanned<f64>>,
}

/// `model = "joint"` or `model = ["joint", "layered"]`.
struct ModelList(Vec<ModelKind>);

impl<'de> Deserialize<'de> for ModelList {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;

        fn kind<E: de::Error>(s: &str) -> std::result::Result<ModelKind, E> {
            match s {
                "unimodal" => Ok(ModelKind::Unimodal),
                "joint" => Ok(ModelKind::Joint),
                "layered" => Ok(ModelKind::Layered),
                other => Err(E::custom(format!(
                    "unknown model `{other}`, expected unimodal, joint or layered"
                ))),
            }
        }

        impl<'de> Visitor<'de> for V {
            type Value = ModelList;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a model name or a list of model names")
            }

            fn visit_str<E: de::Error>(self, s: &str) -> std::result::Result<ModelList, E> {
                Ok(ModelList(vec![kind(s)?]))
            }

            fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> std::result::Result<ModelList, A::Error> {
                let mut out = Vec::new();
                while let Some(s) = seq.next_element::<String>()? {
                    out.push(kind(&s)?);
                }
                Ok(ModelList(out))
            }
        }

        d.deserialize_any(V)
    }
}
