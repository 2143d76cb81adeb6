//! Row types for the emitted CSV files, with matching readers.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use stcast_core::forecast::{ForecastRow, ScoreSet};

use crate::error::CliError;

pub const STATUS_OK: &str = "ok";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model_id: String,
    pub basis: String,
    pub proximity: String,
    pub structure: String,
    pub dic: Option<f64>,
    pub pd: Option<f64>,
    pub cv_log_score: Option<f64>,
    pub log_marginal: Option<f64>,
    pub cpo_flagged: Option<usize>,
    /// Lowest DIC among the rows sharing this basis.
    pub best_dic: bool,
    /// Lowest CV log score among the rows sharing this basis.
    pub best_cv: bool,
    pub status: String,
}

impl ComparisonRow {
    pub fn is_ok(&self) -> bool {
        self.status == STATUS_OK
    }
}

/// Sorts by DIC (failed rows last, by id) and sets the per-basis markers.
pub fn rank_comparison(rows: &mut [ComparisonRow]) {
    rows.sort_by(|a, b| match (a.dic, b.dic) {
        (Some(x), Some(y)) => x.total_cmp(&y).then_with(|| a.model_id.cmp(&b.model_id)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.model_id.cmp(&b.model_id),
    });
    let best = |rows: &[ComparisonRow], basis: &str, key: fn(&ComparisonRow) -> Option<f64>| {
        rows.iter()
            .filter(|r| r.basis == basis)
            .filter_map(|r| key(r).map(|v| (v, r.model_id.clone())))
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .map(|(_, id)| id)
    };
    let bases: Vec<String> = rows.iter().map(|r| r.basis.clone()).collect();
    let marks: Vec<(Option<String>, Option<String>)> = bases
        .iter()
        .map(|b| (best(rows, b, |r| r.dic), best(rows, b, |r| r.cv_log_score)))
        .collect();
    for (r, (d, c)) in rows.iter_mut().zip(marks) {
        r.best_dic = d.as_deref() == Some(r.model_id.as_str());
        r.best_cv = c.as_deref() == Some(r.model_id.as_str());
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastRecord {
    pub region: String,
    pub year: i32,
    pub month: u8,
    pub horizon: usize,
    pub rr_mean: f64,
    pub rr_lo: f64,
    pub rr_hi: f64,
    pub cases_mean: f64,
    pub cases_lo: f64,
    pub cases_hi: f64,
}

impl From<&ForecastRow> for ForecastRecord {
    fn from(r: &ForecastRow) -> Self {
        Self {
            region: r.region.clone(),
            year: r.month.year,
            month: r.month.month,
            horizon: r.horizon,
            rr_mean: r.rr.mean,
            rr_lo: r.rr.lo,
            rr_hi: r.rr.hi,
            cases_mean: r.cases.mean,
            cases_lo: r.cases.lo,
            cases_hi: r.cases.hi,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub region: String,
    pub set: ScoreSet,
    pub nrmse: Option<f64>,
    pub nis: Option<f64>,
    pub flag: Option<String>,
}

/// Test-window baselines per region: the naive monthly mean (NRMSE only)
/// and the negative-binomial null model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRecord {
    pub region: String,
    pub naive_nrmse: Option<f64>,
    pub null_nrmse: Option<f64>,
    pub null_nis: Option<f64>,
    pub flag: Option<String>,
}

pub fn write_csv<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<(), CliError> {
    let err = |e: csv::Error| CliError::io(path, e);
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(err)?;
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.serialize(r).map_err(err)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_csv<T: DeserializeOwned>(path: &Path, header: &[&str]) -> Result<Vec<T>, CliError> {
    let text = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let mut r = csv::Reader::from_reader(text.as_slice());
    let found = r.headers().map_err(|e| CliError::io(path, e))?;
    if found.iter().ne(header.iter().copied()) {
        return Err(CliError::io(
            path,
            format!("expected header `{}`", header.join(",")),
        ));
    }
    r.deserialize()
        .collect::<Result<Vec<T>, _>>()
        .map_err(|e| CliError::io(path, e))
}

pub const COMPARISON_HEADER: &[&str] = &[
    "model_id",
    "basis",
    "proximity",
    "structure",
    "dic",
    "pd",
    "cv_log_score",
    "log_marginal",
    "cpo_flagged",
    "best_dic",
    "best_cv",
    "status",
];

pub const FORECAST_HEADER: &[&str] = &[
    "region",
    "year",
    "month",
    "horizon",
    "rr_mean",
    "rr_lo",
    "rr_hi",
    "cases_mean",
    "cases_lo",
    "cases_hi",
];

pub const SCORE_HEADER: &[&str] = &["region", "set", "nrmse", "nis", "flag"];

pub const BASELINE_HEADER: &[&str] = &["region", "naive_nrmse", "null_nrmse", "null_nis", "flag"];

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: &str, basis: &str, dic: Option<f64>, cv: Option<f64>) -> ComparisonRow {
        ComparisonRow {
            model_id: id.into(),
            basis: basis.into(),
            proximity: String::new(),
            structure: String::new(),
            dic,
            pd: dic.map(|_| 1.5),
            cv_log_score: cv,
            log_marginal: None,
            cpo_flagged: Some(0),
            best_dic: false,
            best_cv: false,
            status: if dic.is_some() { STATUS_OK.into() } else { "failed: x, y".into() },
        }
    }

    #[test]
    fn ranking_and_markers() {
        let mut rows = vec![
            row("a", "linear", Some(10.0), Some(2.0)),
            row("b", "linear", Some(5.0), Some(3.0)),
            row("c", "nonlinear", None, None),
            row("d", "nonlinear", Some(7.0), Some(1.0)),
        ];
        rank_comparison(&mut rows);
        let ids: Vec<&str> = rows.iter().map(|r| r.model_id.as_str()).collect();
        assert_eq!(ids, ["b", "d", "a", "c"]);
        let dic: Vec<bool> = rows.iter().map(|r| r.best_dic).collect();
        let cv: Vec<bool> = rows.iter().map(|r| r.best_cv).collect();
        assert_eq!(dic, [true, true, false, false]);
        assert_eq!(cv, [false, true, true, false]);
    }

    #[test]
    fn csv_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        let mut rows = vec![
            row("a", "linear", Some(0.1 + 0.2), Some(-1.0 / 3.0)),
            row("c", "linear", None, None),
        ];
        rank_comparison(&mut rows);
        write_csv(&path, COMPARISON_HEADER, &rows).unwrap();
        let back: Vec<ComparisonRow> = read_csv(&path, COMPARISON_HEADER).unwrap();
        assert_eq!(back, rows);
        let scores = vec![ScoreRecord {
            region: "R01".into(),
            set: ScoreSet::Test,
            nrmse: None,
            nis: None,
            flag: Some("undefined_rr_zero".into()),
        }];
        let p = dir.path().join("s.csv");
        write_csv(&p, SCORE_HEADER, &scores).unwrap();
        assert!(fs::read_to_string(&p).unwrap().starts_with("region,set,nrmse,nis,flag\nR01,test,,,undefined_rr_zero"));
        assert_eq!(read_csv::<ScoreRecord>(&p, SCORE_HEADER).unwrap(), scores);
        assert!(read_csv::<ScoreRecord>(&p, FORECAST_HEADER).is_err());
    }
}
