use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mmbnn::data::wind::{TIMESTAMP_COLUMN, WIND_DIRECTIONS, WIND_SCALARS};
use mmbnn::data::SplitLabel;
use mmbnn::eval::aggregate;
use mmbnn_cli::commands::{
    read_csv, read_records, AggregateRow, CcaRow, ComparisonRow, FitOutcome, FitStatus, Report, RunManifest,
};
use tempfile::TempDir;

fn mmbnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmbnn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "command failed\nstdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn err(out: Output) -> String {
    assert!(!out.status.success(), "command unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

/// A small, fast experiment in a fresh directory.
struct Run {
    _dir: TempDir,
    config: PathBuf,
    out: PathBuf,
}

impl Run {
    fn new(body: &str) -> Run {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        let config = dir.path().join("exp.toml");
        fs::write(&config, body).unwrap();
        Run { _dir: dir, config, out }
    }

    fn small(extra: &str) -> Run {
        Run::new(&format!(
            "dataset = \"branin\"\nsamples = 30\n{extra}\n[architecture]\nwidth = 8\n[fit]\nmax_epochs = 60\n"
        ))
    }

    fn cmd(&self, sub: &str) -> Output {
        self.cmd_with(sub, &[])
    }

    fn cmd_with(&self, sub: &str, extra: &[&str]) -> Output {
        let mut args = vec![
            sub,
            "--config",
            self.config.to_str().unwrap(),
            "--out",
            self.out.to_str().unwrap(),
        ];
        args.extend_from_slice(extra);
        mmbnn(&args)
    }

    fn all(&self) {
        for c in ["generate", "fit", "evaluate", "report"] {
            ok(self.cmd(c));
        }
    }
}

fn files_under(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn generate_is_byte_stable() {
    let run = Run::small("");
    ok(run.cmd("generate"));
    let first = files_under(&run.out.join("data"));
    ok(run.cmd("generate"));
    let second = files_under(&run.out.join("data"));
    assert!(!first.is_empty());
    assert_eq!(first, second);

    ok(run.cmd_with("generate", &["--seed", "5"]));
    let manifest: RunManifest =
        serde_json::from_str(&fs::read_to_string(run.out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.dataset_seed, 5);
}

#[test]
fn wind_without_csv_is_a_config_error() {
    let run = Run::new("dataset = \"wind\"\n");
    let msg = err(run.cmd("generate"));
    assert!(msg.contains("exp.toml:1:"), "{msg}");
    assert!(msg.contains("wind_csv"), "{msg}");
}

#[test]
fn bad_config_reports_the_line() {
    let run = Run::new("dataset = \"branin\"\n\n[fit]\nlearning_rate = -1.0\n");
    let msg = err(run.cmd("generate"));
    assert!(msg.contains("exp.toml:4:"), "{msg}");
}

#[test]
fn wind_generates_from_a_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("wind.csv");
    let mut s = String::from(TIMESTAMP_COLUMN);
    for c in WIND_SCALARS.iter().chain(WIND_DIRECTIONS.iter()) {
        s.push(',');
        s.push_str(c);
    }
    s.push('\n');
    let days = [(1, 29), (1, 30), (1, 31), (2, 1), (2, 2), (2, 3), (2, 4), (2, 5)];
    for (d, (month, day)) in days.iter().enumerate() {
        for hour in 0..24 {
            let h = d * 24 + hour;
            s.push_str(&format!("2019-{month:02}-{day:02}T{hour:02}:00:00"));
            for j in 0..WIND_SCALARS.len() {
                s.push_str(&format!(",{}", 3.0 + j as f64 + (h as f64 * 0.26 + j as f64).sin()));
            }
            for j in 0..WIND_DIRECTIONS.len() {
                s.push_str(&format!(",{}", (h * 17 + 40 * j) % 360));
            }
            s.push('\n');
        }
    }
    fs::write(&csv, s).unwrap();
    let run = Run::new(&format!("dataset = \"wind\"\nwind_csv = {:?}\n", csv.to_str().unwrap()));
    let stdout = ok(run.cmd("generate"));
    assert!(stdout.contains("17 training modalities"), "{stdout}");
}

#[test]
fn timeseries_cache_records_the_pca() {
    let run = Run::new("dataset = \"timeseries\"\n");
    ok(run.cmd("generate"));
    let d = mmbnn::data::read_cache(&run.out.join("data")).unwrap();
    let pca = d.main().pca.as_ref().expect("series are reduced");
    assert!((5..=9).contains(&pca.retained), "{} components", pca.retained);
    assert!(pca.explained >= 0.95);
}

#[test]
fn commands_need_a_cache() {
    let run = Run::small("");
    let msg = err(run.cmd("fit"));
    assert!(msg.contains("generate"), "{msg}");
}

#[test]
fn fit_writes_one_checkpoint_per_replicate_and_reruns_identically() {
    let run = Run::small("model = \"unimodal\"\nreplicates = 2");
    ok(run.cmd("generate"));
    ok(run.cmd("fit"));
    let fits = run.out.join("fits").join("unimodal");
    let checkpoints: Vec<_> = fs::read_dir(&fits)
        .unwrap()
        .map(|e| e.unwrap().path().join("checkpoint.json"))
        .filter(|p| p.exists())
        .collect();
    assert_eq!(checkpoints.len(), 2);
    let trace = |i: usize| fs::read(fits.join(format!("rep_{i:02}")).join("loss_trace.csv")).unwrap();
    let before = (trace(0), trace(1));
    assert_ne!(before.0, before.1, "different seeds give different traces");
    ok(run.cmd("fit"));
    assert_eq!(before, (trace(0), trace(1)));
}

#[test]
fn injected_nan_fails_one_replicate_only() {
    let run = Run::small("model = \"joint\"\nreplicates = 3\ninject_nan = [1]");
    ok(run.cmd("generate"));
    let stdout = ok(run.cmd("fit"));
    assert!(stdout.contains("FAILED joint replicate 1"), "{stdout}");
    let summary: Vec<FitOutcome> =
        serde_json::from_str(&fs::read_to_string(run.out.join("fits/summary.json")).unwrap()).unwrap();
    let statuses: Vec<_> = summary.iter().map(|o| o.status).collect();
    assert_eq!(statuses, vec![FitStatus::Ok, FitStatus::Failed, FitStatus::Ok]);
    assert!(summary[1].error.as_deref().unwrap().contains("seed 1"));
    assert!(!run.out.join("fits/joint/rep_01/checkpoint.json").exists());

    ok(run.cmd("evaluate"));
    let rows: Vec<AggregateRow> = read_csv(&run.out.join("eval/aggregates.csv")).unwrap();
    let mut reps: Vec<_> = rows.iter().map(|r| r.replicate).collect();
    reps.dedup();
    assert_eq!(reps, vec![0, 2]);
}

#[test]
fn evaluation_records_and_aggregates_agree() {
    let run = Run::small("model = [\"unimodal\", \"layered\"]\nreplicates = 2");
    run.all();
    let n_eval = mmbnn::data::read_cache(&run.out.join("data")).unwrap().eval.x.rows();
    let all_rows: Vec<AggregateRow> = read_csv(&run.out.join("eval/aggregates.csv")).unwrap();
    let mut checked = 0;
    for model in ["unimodal", "layered"] {
        let mut total = 0;
        for rep in 0..2 {
            let dir = run.out.join("eval").join(model).join(format!("rep_{rep:02}"));
            let records = read_records(&dir.join("records.jsonl")).unwrap();
            total += records.len();
            let emitted: Vec<AggregateRow> = read_csv(&dir.join("aggregates.csv")).unwrap();
            let metrics: Vec<_> = records.iter().map(|r| r.metrics()).collect();
            let recomputed = aggregate(&metrics);
            assert_eq!(recomputed.splits.len(), emitted.len());
            for (a, e) in recomputed.splits.iter().zip(&emitted) {
                assert_eq!(a.split, e.split);
                assert_eq!(a.count, e.count);
                for (x, y) in [
                    (a.mean_bias, e.mean_bias),
                    (a.median_bias, e.median_bias),
                    (a.mean_standardized_error, e.mean_standardized_error),
                    (a.median_standardized_error, e.median_standardized_error),
                ] {
                    assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
                }
                assert!(all_rows.contains(e));
                checked += 1;
            }
        }
        assert_eq!(total, n_eval * 2);
    }
    assert_eq!(checked, all_rows.len());
}

#[test]
fn report_formats_agree_and_branin_cca_is_one() {
    let run = Run::small("model = [\"unimodal\", \"joint\"]\nreplicates = 1");
    run.all();
    let stdout = ok(run.cmd("report"));
    assert!(stdout.contains("branin         1.0000"), "{stdout}");

    let dir = run.out.join("report");
    let json: Report = serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    let csv_rows: Vec<ComparisonRow> = read_csv(&dir.join("report.csv")).unwrap();
    let cca_rows: Vec<CcaRow> = read_csv(&dir.join("cca.csv")).unwrap();
    assert_eq!(json.comparison, csv_rows);
    assert_eq!(json.canonical_correlation, cca_rows);
    assert_eq!(format!("{:.4}", cca_rows[0].canonical_correlation), "1.0000");
    assert!(json.comparison.iter().any(|r| r.split == SplitLabel::OutOfHull));

    let manifest: RunManifest =
        serde_json::from_str(&fs::read_to_string(run.out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.config_hash, json.config_hash);
    assert_eq!(manifest.replicates[0].seed, 0);
    assert!(["generate", "fit", "evaluate", "report"]
        .iter()
        .all(|s| manifest.steps.contains_key(*s)));
}

#[test]
fn report_without_replicates_is_an_error() {
    let run = Run::small("model = \"unimodal\"\nreplicates = 1");
    ok(run.cmd("generate"));
    let msg = err(run.cmd("report"));
    assert!(msg.contains("nothing to report"), "{msg}");
}

#[test]
fn pipeline_is_deterministic_end_to_end() {
    let a = Run::small("model = [\"unimodal\", \"layered\"]\nreplicates = 2\nseed = 11");
    let b = Run::small("model = [\"unimodal\", \"layered\"]\nreplicates = 2\nseed = 11");
    a.all();
    b.all();
    for sub in ["data", "fits", "eval", "report"] {
        let fa = files_under(&a.out.join(sub));
        let fb = files_under(&b.out.join(sub));
        assert!(!fa.is_empty());
        assert_eq!(fa, fb, "{sub} differs");
    }
}
