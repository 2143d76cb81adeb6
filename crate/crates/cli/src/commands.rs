use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use stcast_core::forecast::{
    derive_seed, naive_monthly_mean, nrmse, null_model_forecast, predict, score_fitted,
    score_forecast, score_series, summarize_at, ForecastConfig, ForecastPanel, ScoreSet,
};
use stcast_core::infer::{
    diagnose, fit, read_fit_bundle, sample_latent, write_fit_bundle, FitBundle, PosteriorFit,
    RiskSummary,
};
use stcast_core::model::{assemble, AssembledModel, ModelData, ModelSpec};
use stcast_core::panel::{compute_expected_counts, load_and_align, observed_relative_risk, Panels};
use stcast_core::simulate::{simulate, write_dataset};
use stcast_core::structures::{
    adjacency_from_neighbor_list, distance_threshold_matrix, read_distances, read_neighbors,
    ProximityKind,
};
use stcast_core::{ExpectedPanel, Month, ProximityMatrix, RiskPanel};

use crate::config::{proximity_label, RunConfig, Windows};
use crate::error::CliError;
use crate::map::{build_map, read_geometry, write_map, MapPeriod};
use crate::tables::*;

/// Files written by one command, relative to its output directory.
#[derive(Debug, Clone, Default)]
pub struct Report {
    pub outputs: Vec<PathBuf>,
    pub notes: Vec<String>,
}

/// Inputs shared by the fitting, forecasting and mapping verbs.
pub struct Study {
    pub panels: Panels,
    pub expected: ExpectedPanel,
    pub observed: RiskPanel,
    pub neighbor: Option<ProximityMatrix>,
    pub distance: Option<ProximityMatrix>,
    pub windows: Windows,
}

pub fn load_study(cfg: &RunConfig) -> Result<Study, CliError> {
    let data = cfg.data()?;
    let windows = cfg.windows()?;
    let panels = load_and_align(&data.cases, &data.population, &data.covariates)?;
    let span = panels.cases.span();
    if !(span.contains(windows.train.first) && span.contains(windows.test.last)) {
        return Err(CliError::Data(format!(
            "case panel covers {span}, windows need {}..{}",
            windows.train.first, windows.test.last
        )));
    }
    let expected = compute_expected_counts(&panels.cases, &panels.population, windows.train)?;
    let observed = observed_relative_risk(&panels.cases, &expected)?;
    let regions = panels.cases.regions();
    let open = |p: &Path| fs::File::open(p).map_err(|e| CliError::io(p, e));
    let neighbor = match &data.neighbors {
        Some(p) => Some(adjacency_from_neighbor_list(
            &read_neighbors(open(p)?, &p.display().to_string())?,
            regions,
        )?),
        None => None,
    };
    let distance = match &data.distances {
        Some(p) => Some(distance_threshold_matrix(
            &read_distances(open(p)?, &p.display().to_string(), regions)?,
            regions,
        )?),
        None => None,
    };
    Ok(Study {
        panels,
        expected,
        observed,
        neighbor,
        distance,
        windows,
    })
}

impl Study {
    pub fn covariate_names(&self) -> Vec<String> {
        self.panels.covariates.iter().map(|c| c.name().to_string()).collect()
    }

    pub fn regions(&self) -> &[String] {
        self.panels.cases.regions()
    }

    pub fn assemble(&self, spec: &ModelSpec) -> Result<AssembledModel, CliError> {
        let proximity = match spec.proximity {
            Some(ProximityKind::Neighbor) => Some(self.neighbor.as_ref().ok_or_else(|| {
                CliError::Config(format!("`{}` needs a neighbors file", spec.id))
            })?),
            Some(ProximityKind::Distance) => Some(self.distance.as_ref().ok_or_else(|| {
                CliError::Config(format!("`{}` needs a distances file", spec.id))
            })?),
            None => None,
        };
        Ok(assemble(
            spec,
            &ModelData {
                cases: &self.panels.cases,
                expected: &self.expected,
                covariates: &self.panels.covariates,
                proximity,
                train: self.windows.train,
            },
        )?)
    }

    pub fn spec(&self, cfg: &RunConfig, model_id: &str) -> Result<ModelSpec, CliError> {
        cfg.model_grid(&self.covariate_names())?
            .into_iter()
            .find(|s| s.id == model_id)
            .ok_or_else(|| CliError::Config(format!("model `{model_id}` is not in the grid")))
    }
}

/// Stable per-model seed: depends on the run seed and the model id only,
/// so grid entries do not influence each other.
pub fn model_seed(seed: u64, model_id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in model_id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    derive_seed(seed, &[h as i64])
}

// ---------------------------------------------------------------------------
// Manifest

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    /// Per verb: output path -> SHA-256 of its bytes.
    pub verbs: BTreeMap<String, BTreeMap<String, String>>,
}

fn record_manifest(out: &Path, cfg: &RunConfig, verb: &str, files: &[PathBuf]) -> Result<(), CliError> {
    let path = out.join("manifest.json");
    let mut m: Manifest = fs::read_to_string(&path)
        .ok()
        .and_then(|s| serde_json::from_str(&s).ok())
        .unwrap_or_default();
    m.config_hash = cfg.hash();
    m.seed = cfg.seed;
    let mut entry = BTreeMap::new();
    for f in files {
        let bytes = fs::read(out.join(f)).map_err(|e| CliError::io(f, e))?;
        entry.insert(f.display().to_string(), hex::encode(Sha256::digest(&bytes)));
    }
    m.verbs.insert(verb.to_string(), entry);
    let json = serde_json::to_string_pretty(&m).expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(|e| CliError::io(&path, e))
}

fn create_dir(p: &Path) -> Result<(), CliError> {
    fs::create_dir_all(p).map_err(|e| CliError::io(p, e))
}

// ---------------------------------------------------------------------------
// simulate

pub fn cmd_simulate(cfg: &RunConfig, out: &Path) -> Result<Report, CliError> {
    let sim = cfg
        .simulate
        .clone()
        .ok_or_else(|| CliError::Config("missing [simulate] section".into()))?;
    let data = simulate(&sim)?;
    write_dataset(out, &data)?;
    let mut files: Vec<PathBuf> = [
        "cases.csv",
        "population.csv",
        "neighbors.csv",
        "distances.csv",
        "regions.geojson",
        "truth.json",
    ]
    .iter()
    .map(PathBuf::from)
    .collect();
    for c in &data.covariates {
        files.push(Path::new("covariates").join(format!("{}.csv", c.name())));
    }
    record_manifest(out, cfg, "simulate", &files)?;
    Ok(Report {
        notes: vec![format!(
            "{} regions x {} months, {} cases",
            data.cases.n_regions(),
            data.cases.n_months(),
            data.cases.counts().iter().sum::<u64>()
        )],
        outputs: files,
    })
}

// ---------------------------------------------------------------------------
// fit-grid

fn status_row(spec: &ModelSpec, status: String) -> ComparisonRow {
    ComparisonRow {
        model_id: spec.id.clone(),
        basis: if spec.null_model { "none".into() } else { spec.basis_kind.label().into() },
        proximity: spec.proximity.map(proximity_label).unwrap_or("none").into(),
        structure: if spec.null_model { "none".into() } else { spec.spatial.label().into() },
        dic: None,
        pd: None,
        cv_log_score: None,
        log_marginal: None,
        cpo_flagged: None,
        best_dic: false,
        best_cv: false,
        status,
    }
}

type GridOutcome = (ComparisonRow, Option<(FitBundle, PosteriorFit)>);

fn fit_entry(study: &Study, cfg: &RunConfig, spec: &ModelSpec, hash: &str) -> GridOutcome {
    let model = match study.assemble(spec) {
        Ok(m) => m,
        Err(e) => return (status_row(spec, format!("invalid: {e}")), None),
    };
    let seed = model_seed(cfg.seed, &spec.id);
    let fit_cfg = stcast_core::infer::FitConfig {
        seed,
        ..cfg.fit_config()
    };
    let f = match fit(&model, &fit_cfg) {
        Ok(f) => f,
        Err(e) => return (status_row(spec, format!("failed: {e}")), None),
    };
    let mut row = status_row(spec, STATUS_OK.into());
    row.log_marginal = Some(f.log_marginal);
    let diag = match diagnose(&f, &model, cfg.diagnostics.samples, seed) {
        Ok(d) => d,
        Err(e) => {
            row.status = format!("failed: diagnostics: {e}");
            return (row, Some((FitBundle::new(&f, &model, hash, None), f)));
        }
    };
    row.dic = Some(diag.dic);
    row.pd = Some(diag.pd);
    row.cv_log_score = Some(diag.cv_log_score);
    row.cpo_flagged = Some(diag.cpo_flagged.len());
    let bundle = FitBundle::new(&f, &model, hash, Some(diag));
    (row, Some((bundle, f)))
}

pub fn cmd_fit_grid(cfg: &RunConfig, out: &Path) -> Result<(Vec<ComparisonRow>, Report), CliError> {
    let study = load_study(cfg)?;
    let specs = cfg.model_grid(&study.covariate_names())?;
    let hash = cfg.hash();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| CliError::Config(format!("worker pool: {e}")))?;
    let outcomes: Vec<GridOutcome> = pool.install(|| {
        specs
            .par_iter()
            .map(|s| fit_entry(&study, cfg, s, &hash))
            .collect()
    });
    create_dir(out)?;
    let mut files = Vec::new();
    let mut rows = Vec::with_capacity(outcomes.len());
    for (row, fitted) in outcomes {
        if let Some((bundle, f)) = fitted {
            let rel = Path::new("fits").join(&row.model_id);
            write_fit_bundle(&out.join(&rel), &bundle, &f)?;
            files.push(rel.join("fit.json"));
            files.push(rel.join("precision.mtx"));
        }
        rows.push(row);
    }
    rank_comparison(&mut rows);
    write_csv(&out.join("comparison.csv"), COMPARISON_HEADER, &rows)?;
    files.insert(0, PathBuf::from("comparison.csv"));
    record_manifest(out, cfg, "fit-grid", &files)?;
    let ok = rows.iter().filter(|r| r.is_ok()).count();
    let notes = vec![format!("{ok}/{} grid entries fitted", rows.len())];
    Ok((rows, Report { outputs: files, notes }))
}

// ---------------------------------------------------------------------------
// forecast

/// `model_id`, or the lowest-DIC fitted row of `comparison.csv`.
pub fn resolve_model_id(out: &Path, model_id: Option<&str>) -> Result<String, CliError> {
    if let Some(id) = model_id {
        return Ok(id.to_string());
    }
    let path = out.join("comparison.csv");
    let rows: Vec<ComparisonRow> = read_csv(&path, COMPARISON_HEADER)?;
    rows.into_iter()
        .find(|r| r.is_ok())
        .map(|r| r.model_id)
        .ok_or_else(|| CliError::Data(format!("{}: no successfully fitted model", path.display())))
}

pub struct Loaded {
    pub study: Study,
    pub model: AssembledModel,
    pub fit: PosteriorFit,
}

pub fn load_fit(cfg: &RunConfig, out: &Path, model_id: &str) -> Result<Loaded, CliError> {
    let study = load_study(cfg)?;
    let spec = study.spec(cfg, model_id)?;
    let model = study.assemble(&spec)?;
    let dir = out.join("fits").join(model_id);
    if !dir.join("fit.json").exists() {
        return Err(CliError::Data(format!(
            "missing fit bundle {}; run fit-grid first",
            dir.display()
        )));
    }
    let (_, fit) = read_fit_bundle(&dir, &model)?;
    if !fit.converged {
        return Err(CliError::Numerical(format!("fit `{model_id}` did not converge")));
    }
    Ok(Loaded { study, model, fit })
}

pub fn forecast_config(cfg: &RunConfig, model_id: &str) -> ForecastConfig {
    ForecastConfig {
        n_samples: cfg.forecast.samples,
        alpha: cfg.forecast.alpha,
        seed: model_seed(cfg.seed, model_id),
        carry_forward_spatial: cfg.forecast.carry_forward_spatial,
    }
}

/// Posterior RR summaries over the training cells at the run's alpha.
pub fn fitted_summaries(cfg: &RunConfig, l: &Loaded) -> Result<Vec<RiskSummary>, CliError> {
    let seed = model_seed(cfg.seed, &l.fit.model_id);
    let samples = sample_latent(&l.fit, cfg.forecast.samples, seed)?;
    let etas: Vec<Vec<f64>> = samples.iter().map(|x| l.model.eta(x)).collect();
    Ok((0..l.model.n_cells())
        .map(|c| {
            let mut rr: Vec<f64> = etas.iter().map(|e| (e[c] - l.model.offset[c]).exp()).collect();
            summarize_at(&mut rr, cfg.forecast.alpha)
        })
        .collect())
}

pub fn run_forecast(cfg: &RunConfig, l: &Loaded) -> Result<ForecastPanel, CliError> {
    let fc = forecast_config(cfg, &l.fit.model_id);
    Ok(predict(&l.fit, &l.model, l.study.windows.test, &fc)?)
}

fn observed_window(observed: &RiskPanel, region: usize, months: &[Month]) -> Result<Vec<f64>, CliError> {
    months
        .iter()
        .map(|&m| {
            observed
                .month_index(m)
                .map(|t| observed.get(region, t))
                .ok_or_else(|| CliError::Data(format!("{m} is outside the case panel")))
        })
        .collect()
}

fn baselines(cfg: &RunConfig, l: &Loaded) -> Result<Vec<BaselineRecord>, CliError> {
    let s = &l.study;
    let test = s.windows.test;
    let months: Vec<Month> = test.months().collect();
    let naive = naive_monthly_mean(&s.observed, s.windows.train.last, cfg.forecast.naive_lookback_years, &months)?;
    let fc = forecast_config(cfg, "null");
    let fit_cfg = stcast_core::infer::FitConfig {
        seed: fc.seed,
        ..cfg.fit_config()
    };
    let (_, null) = null_model_forecast(
        &s.panels.cases,
        &s.expected,
        s.windows.train,
        test,
        cfg.forecast.null_lookback_years,
        &fit_cfg,
        &fc,
    )?;
    let mut out = Vec::with_capacity(s.regions().len());
    for (i, region) in s.regions().iter().enumerate() {
        let obs = observed_window(&s.observed, i, &months)?;
        let rows: Vec<_> = null.region_rows(region).collect();
        let mean: Vec<f64> = rows.iter().map(|r| r.rr.mean).collect();
        let lo: Vec<f64> = rows.iter().map(|r| r.rr.lo).collect();
        let hi: Vec<f64> = rows.iter().map(|r| r.rr.hi).collect();
        let score = score_series(region, ScoreSet::Test, &obs, &mean, &lo, &hi, fc.alpha)
            .map_err(|e| CliError::Data(format!("{region}: {e}")))?;
        out.push(BaselineRecord {
            region: region.clone(),
            naive_nrmse: nrmse(&obs, &naive[i]).ok(),
            null_nrmse: score.nrmse,
            null_nis: score.nis,
            flag: score.flag,
        });
    }
    Ok(out)
}

pub fn cmd_forecast(cfg: &RunConfig, out: &Path, model_id: Option<&str>) -> Result<Report, CliError> {
    let id = resolve_model_id(out, model_id)?;
    let l = load_fit(cfg, out, &id)?;
    let panel = run_forecast(cfg, &l)?;
    let forecasts: Vec<ForecastRecord> = panel.rows.iter().map(ForecastRecord::from).collect();
    write_csv(&out.join("forecasts.csv"), FORECAST_HEADER, &forecasts)?;

    let fitted = fitted_summaries(cfg, &l)?;
    let train = score_fitted(&l.model, &fitted, cfg.forecast.alpha)?;
    let test = score_forecast(&panel, &l.study.observed, l.study.regions())?;
    let scores: Vec<ScoreRecord> = train
        .into_iter()
        .chain(test.regions)
        .map(|s| ScoreRecord {
            region: s.region,
            set: s.set,
            nrmse: s.nrmse,
            nis: s.nis,
            flag: s.flag,
        })
        .collect();
    write_csv(&out.join("scores.csv"), SCORE_HEADER, &scores)?;
    write_csv(&out.join("baselines.csv"), BASELINE_HEADER, &baselines(cfg, &l)?)?;

    let files: Vec<PathBuf> = ["forecasts.csv", "scores.csv", "baselines.csv"]
        .iter()
        .map(PathBuf::from)
        .collect();
    record_manifest(out, cfg, "forecast", &files)?;
    Ok(Report {
        outputs: files,
        notes: vec![format!("model `{id}`, {} forecast rows", forecasts.len())],
    })
}

// ---------------------------------------------------------------------------
// map

pub fn cmd_map(
    cfg: &RunConfig,
    out: &Path,
    model_id: Option<&str>,
    period: MapPeriod,
) -> Result<Report, CliError> {
    let geometry_path = cfg
        .data()?
        .geometry
        .ok_or_else(|| CliError::Config("[data] has no geometry file".into()))?;
    let id = resolve_model_id(out, model_id)?;
    let l = load_fit(cfg, out, &id)?;
    let geometry = read_geometry(&geometry_path)?;
    let values = match period {
        MapPeriod::Test => {
            let panel = run_forecast(cfg, &l)?;
            panel
                .rows
                .iter()
                .map(|r| ((r.region.clone(), r.month), r.rr.mean))
                .collect()
        }
        MapPeriod::Year(y) => {
            let fitted = fitted_summaries(cfg, &l)?;
            let mut v = BTreeMap::new();
            for (c, &(i, t)) in l.model.cell_index.iter().enumerate() {
                let m = l.model.first_month.offset(t as i64);
                if m.year == y {
                    v.insert((l.model.regions[i].clone(), m), fitted[c].mean);
                }
            }
            if v.is_empty() {
                return Err(CliError::Config(format!("{y} has no fitted training months")));
            }
            v
        }
    };
    let months = period.months(&l.study.windows);
    let map = build_map(&geometry, l.study.regions(), &months, &values, &l.study.observed, &id, &cfg.hash())?;
    let rel = Path::new("maps").join(format!("{id}_{}.geojson", period.label()));
    create_dir(&out.join("maps"))?;
    write_map(&out.join(&rel), &map)?;
    record_manifest(out, cfg, &format!("map {}", period.label()), std::slice::from_ref(&rel))?;
    Ok(Report {
        outputs: vec![rel],
        notes: vec![format!("{} features", l.study.regions().len())],
    })
}
