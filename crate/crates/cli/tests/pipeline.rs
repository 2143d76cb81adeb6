use std::fs;
use std::path::Path;
use std::process::Command;

use stcast_cli::map::read_map;
use stcast_cli::tables::*;
use stcast_cli::{cmd_fit_grid, cmd_forecast, cmd_map, cmd_simulate, CliError, MapPeriod, RunConfig};
use stcast_core::forecast::{ScoreSet, UNDEFINED_RR_ZERO};

const CONFIG: &str = r#"
seed = 5
[data]
cases = "data/cases.csv"
population = "data/population.csv"
covariates = ["data/covariates/rain.csv"]
neighbors = "data/neighbors.csv"
geometry = "data/regions.geojson"
[windows]
train = "2000-01..2005-12"
test = "2006-01..2006-03"
[grid]
structures = ["independent", "icar"]
[diagnostics]
samples = 300
[forecast]
samples = 300
[simulate]
n_regions = 6
n_months = 75
seed = 5
"#;

/// `grid` lands in the `[grid]` table; `tail` is appended to the file.
fn setup(root: &Path, grid: &str, tail: &str) -> RunConfig {
    let text = CONFIG.replace("[grid]\n", &format!("[grid]\n{grid}")) + tail;
    let cfg = RunConfig::from_toml(&text, root).unwrap();
    if !root.join("data/cases.csv").exists() {
        cmd_simulate(&cfg, &root.join("data")).unwrap();
    }
    cfg
}

/// Zeroes one region's cases over the test window.
fn zero_test_cases(path: &Path, region: &str) {
    let text = fs::read_to_string(path).unwrap();
    let out: Vec<String> = text
        .lines()
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f[0] == region && f[1] == "2006" {
                format!("{},{},{},0", f[0], f[1], f[2])
            } else {
                l.to_string()
            }
        })
        .collect();
    fs::write(path, out.join("\n") + "\n").unwrap();
}

#[test]
fn pipeline_outputs_have_expected_shape_and_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = setup(root, "", "");
    zero_test_cases(&root.join("data/cases.csv"), "R03");
    let out = root.join("run");
    let (rows, _) = cmd_fit_grid(&cfg, &out).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.is_ok() && r.dic.unwrap().is_finite()));
    let back: Vec<ComparisonRow> = read_csv(&out.join("comparison.csv"), COMPARISON_HEADER).unwrap();
    assert_eq!(back, rows);

    cmd_forecast(&cfg, &out, None).unwrap();
    let fc: Vec<ForecastRecord> = read_csv(&out.join("forecasts.csv"), FORECAST_HEADER).unwrap();
    assert_eq!(fc.len(), 6 * 3);
    assert!(fc.iter().all(|r| r.rr_lo <= r.rr_mean && r.rr_mean <= r.rr_hi));
    assert_eq!(fc.iter().map(|r| r.horizon).take(3).collect::<Vec<_>>(), [1, 2, 3]);

    let scores: Vec<ScoreRecord> = read_csv(&out.join("scores.csv"), SCORE_HEADER).unwrap();
    assert_eq!(scores.len(), 12);
    let flagged: Vec<&ScoreRecord> = scores.iter().filter(|s| s.flag.is_some()).collect();
    assert_eq!(flagged.len(), 1);
    assert_eq!(flagged[0].region, "R03");
    assert_eq!(flagged[0].set, ScoreSet::Test);
    assert_eq!(flagged[0].flag.as_deref(), Some(UNDEFINED_RR_ZERO));
    assert!(flagged[0].nrmse.is_none() && flagged[0].nis.is_none());

    let base: Vec<BaselineRecord> = read_csv(&out.join("baselines.csv"), BASELINE_HEADER).unwrap();
    assert_eq!(base.len(), 6);
    for b in &base {
        let defined = b.region != "R03";
        assert_eq!(b.naive_nrmse.is_some(), defined);
        assert_eq!(b.null_nis.is_some(), defined);
    }

    let report = cmd_map(&cfg, &out, None, MapPeriod::Test).unwrap();
    let features = read_map(&out.join(&report.outputs[0])).unwrap();
    assert_eq!(features.len(), 6);
    assert!(features.iter().all(|f| f.values.len() == 6));
    let r3 = features.iter().find(|f| f.region == "R03").unwrap();
    assert_eq!(r3.values["ape_2006-02"], None);
    assert!(r3.values["rr_mean_2006-02"].is_some());

    let report = cmd_map(&cfg, &out, Some(&rows[0].model_id), MapPeriod::Year(2004)).unwrap();
    let features = read_map(&out.join(&report.outputs[0])).unwrap();
    assert!(features.iter().all(|f| f.values.len() == 24));
}

#[test]
fn grid_isolation_and_failure_rows() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let full = setup(root, "include_null = true\n", "");
    let (all, _) = cmd_fit_grid(&full, &root.join("full")).unwrap();
    let reduced = setup(root, "", "");
    let (fewer, _) = cmd_fit_grid(&reduced, &root.join("reduced")).unwrap();
    assert_eq!(all.len(), 3);
    for r in &fewer {
        let same = all.iter().find(|a| a.model_id == r.model_id).unwrap();
        assert_eq!((same.dic, same.cv_log_score, &same.status), (r.dic, r.cv_log_score, &r.status));
        let a = fs::read(root.join("full/fits").join(&r.model_id).join("precision.mtx")).unwrap();
        let b = fs::read(root.join("reduced/fits").join(&r.model_id).join("precision.mtx")).unwrap();
        assert_eq!(a, b);
    }

    // A variant that cannot be assembled becomes a status row.
    let broken = setup(
        root,
        "",
        "[[grid.extra]]\nid = \"bad\"\ncovariate_names = [\"humidity\"]\n",
    );
    let (rows, _) = cmd_fit_grid(&broken, &root.join("broken")).unwrap();
    let bad = rows.last().unwrap();
    assert_eq!(bad.model_id, "bad");
    assert!(bad.status.starts_with("invalid"), "{}", bad.status);
    assert!(bad.dic.is_none() && !bad.best_dic);
    assert_eq!(rows.iter().filter(|r| r.is_ok()).count(), 2);
}

#[test]
fn errors_are_classified() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = setup(root, "", "");
    let err = cmd_forecast(&cfg, &root.join("nothing"), Some("linear_independent")).unwrap_err();
    assert!(matches!(err, CliError::Data(ref m) if m.contains("fit bundle")), "{err}");

    fs::write(root.join("data/regions.geojson"), r#"{"type":"FeatureCollection","features":[]}"#).unwrap();
    let out = root.join("run");
    cmd_fit_grid(&cfg, &out).unwrap();
    let err = cmd_map(&cfg, &out, None, MapPeriod::Test).unwrap_err();
    assert!(matches!(err, CliError::Data(ref m) if m.contains("R01")), "{err}");
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let bin = env!("CARGO_BIN_EXE_stcast");
    let cfg_path = root.join("run.toml");
    fs::write(&cfg_path, CONFIG).unwrap();
    let run = |args: &[&str]| Command::new(bin).args(args).output().unwrap().status.code();
    let cfg = cfg_path.to_str().unwrap();
    let data = root.join("data");
    assert_eq!(run(&["simulate", "--config", cfg, "--out", data.to_str().unwrap()]), Some(0));
    assert!(data.join("truth.json").exists());

    fs::write(root.join("bad.toml"), "seed = \"x\"\n").unwrap();
    let bad = root.join("bad.toml");
    assert_eq!(run(&["fit-grid", "--config", bad.to_str().unwrap(), "--out", "x"]), Some(2));

    fs::write(data.join("cases.csv"), "region,year,month,cases\nR01,2000,1,-4\n").unwrap();
    let out = root.join("out");
    assert_eq!(run(&["fit-grid", "--config", cfg, "--out", out.to_str().unwrap()]), Some(3));
}
