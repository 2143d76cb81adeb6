//! Synthetic datasets drawn from the model with known truth: cases,
//! population, covariates, neighbor and distance files, square-cell region
//! polygons and a truth manifest.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forecast::draw_negative_binomial;
use crate::lagbasis::{BasisError, LagWindow, NaturalSpline};
use crate::model::AssembledModel;
use crate::panel::{
    write_cases, write_covariate, write_population, CasePanel, CovariatePanel, Month, PanelError,
    PopulationPanel,
};
use crate::structures::{adjacency_from_neighbor_list, SpatialStructure, StructureError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid generator parameter: {0}")]
    Invalid(String),
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error(transparent)]
    Structure(#[from] StructureError),
    #[error(transparent)]
    Panel(#[from] PanelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Graph {
    /// Region `i` neighbors `i ± 1` (wrapping).
    Ring,
    /// Rook adjacency on a grid with `cols` columns.
    Lattice { cols: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimCovariate {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    /// AR(1) coefficient of the standardized anomaly.
    pub autocorrelation: f64,
    /// Seasonal amplitude in sd units.
    pub seasonal_amplitude: f64,
    /// Same series in every region (ENSO-like).
    pub region_constant: bool,
    /// True coefficients on the lag spline basis of the raw covariate (one
    /// per basis column); empty means no effect.
    pub lag_coefficients: Vec<f64>,
}

impl Default for SimCovariate {
    fn default() -> Self {
        Self {
            name: "rain".into(),
            mean: 20.0,
            sd: 5.0,
            autocorrelation: 0.6,
            seasonal_amplitude: 1.0,
            region_constant: false,
            lag_coefficients: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n_regions: usize,
    pub graph: Graph,
    pub first_year: i32,
    pub n_months: usize,
    /// Cases per person per month.
    pub base_rate: f64,
    /// Region populations are drawn log-uniformly in this range.
    pub population_range: (f64, f64),
    pub annual_growth: f64,
    pub intercept: f64,
    pub kappa: f64,
    pub lag_min: usize,
    pub lag_max: usize,
    pub lag_knots: usize,
    pub covariates: Vec<SimCovariate>,
    /// Variance of the cyclic monthly effect; `None` disables it.
    pub sigma2_phi: Option<f64>,
    pub spatial: SpatialStructure,
    /// Precision of the yearly spatial effect; `None` disables it.
    pub tau_theta: Option<f64>,
    pub tau_v: Option<f64>,
    pub d: Option<f64>,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_regions: 8,
            graph: Graph::Ring,
            first_year: 2000,
            n_months: 72,
            base_rate: 1e-3,
            population_range: (10_000.0, 40_000.0),
            annual_growth: 0.01,
            intercept: 0.0,
            kappa: 5.0,
            lag_min: 3,
            lag_max: 12,
            lag_knots: 2,
            covariates: vec![SimCovariate {
                lag_coefficients: vec![0.02, 0.015, 0.01],
                ..SimCovariate::default()
            }],
            sigma2_phi: Some(0.1),
            spatial: SpatialStructure::Icar,
            tau_theta: Some(4.0),
            tau_v: None,
            d: None,
            seed: 1,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Invalid(m.into()));
        if self.n_regions < 2 {
            return bad("n_regions must be at least 2");
        }
        if self.n_months <= self.lag_max {
            return bad("n_months must exceed lag_max");
        }
        if let Graph::Lattice { cols } = self.graph {
            if cols == 0 || !self.n_regions.is_multiple_of(cols) {
                return bad("lattice cols must divide n_regions");
            }
        }
        if !(self.base_rate > 0.0) || !(self.kappa > 0.0) {
            return bad("base_rate and kappa must be positive");
        }
        let (lo, hi) = self.population_range;
        if !(lo > 0.0 && hi >= lo) {
            return bad("population_range must be positive and ordered");
        }
        if self.spatial == SpatialStructure::ProperCar && !self.d.is_some_and(|d| d > 0.0) {
            return bad("proper CAR needs d > 0");
        }
        if self.spatial == SpatialStructure::Bym && self.tau_v.is_none() {
            return bad("BYM needs tau_v");
        }
        for p in [self.sigma2_phi, self.tau_theta, self.tau_v].into_iter().flatten() {
            if !(p > 0.0) {
                return bad("variances and precisions must be positive");
            }
        }
        let df = LagWindow::new(self.lag_min, self.lag_max)?
            .default_lag_spline(self.lag_knots)?
            .df();
        for c in &self.covariates {
            if !c.lag_coefficients.is_empty() && c.lag_coefficients.len() != df {
                return Err(SimError::Invalid(format!(
                    "covariate `{}` needs {df} lag coefficients",
                    c.name
                )));
            }
            if !(c.sd > 0.0) || c.autocorrelation.abs() >= 1.0 {
                return Err(SimError::Invalid(format!("covariate `{}` has invalid sd/autocorrelation", c.name)));
            }
        }
        Ok(())
    }

    pub fn region_names(&self) -> Vec<String> {
        let w = self.n_regions.to_string().len().max(2);
        (1..=self.n_regions).map(|k| format!("R{k:0w$}")).collect()
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        let n = self.n_regions;
        match self.graph {
            Graph::Ring if n == 2 => vec![(0, 1)],
            Graph::Ring => (0..n).map(|i| (i, (i + 1) % n)).collect(),
            Graph::Lattice { cols } => {
                let mut e = Vec::new();
                for i in 0..n {
                    if (i + 1) % cols != 0 {
                        e.push((i, i + 1));
                    }
                    if i + cols < n {
                        e.push((i, i + cols));
                    }
                }
                e
            }
        }
    }

    /// Cell centre used for polygons and distances (km).
    fn centre(&self, i: usize) -> (f64, f64) {
        match self.graph {
            Graph::Ring => {
                let a = 2.0 * std::f64::consts::PI * i as f64 / self.n_regions as f64;
                let r = 10.0 * self.n_regions as f64 / (2.0 * std::f64::consts::PI);
                (r * a.cos(), r * a.sin())
            }
            Graph::Lattice { cols } => (10.0 * (i % cols) as f64, 10.0 * (i / cols) as f64),
        }
    }
}

/// Known truth behind a simulated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTruth {
    pub config: SimConfig,
    pub regions: Vec<String>,
    pub intercept: f64,
    pub kappa: f64,
    pub base_rate: f64,
    /// `(name, coefficients)` on the raw-covariate lag basis.
    pub lag_coefficients: Vec<(String, Vec<f64>)>,
    /// `[region][calendar month]`.
    pub phi: Vec<Vec<f64>>,
    /// `[year][region]`, spatial plus unstructured.
    pub spatial: Vec<Vec<f64>>,
    /// True log relative risk per cell, region-major.
    pub log_rr: Vec<f64>,
}

impl SimTruth {
    /// True fixed effects expressed in `model`'s parameterization (its
    /// covariate standardization and fitted reference rate `fitted_rate`).
    /// Covariates without a true effect map to zeros.
    pub fn fixed_effects_for(&self, model: &AssembledModel, fitted_rate: f64) -> Vec<f64> {
        let mut out = vec![0.0; model.n_fixed()];
        out[0] = self.intercept + (self.base_rate / fitted_rate).ln();
        for term in &model.terms {
            let Some((_, beta)) = self.lag_coefficients.iter().find(|(n, _)| *n == term.name) else {
                continue;
            };
            let spline = NaturalSpline::new(&term.lag).expect("fitted lag spline is valid");
            let sums: Vec<f64> = (0..beta.len())
                .map(|k| model.spec.lag_window.lags().map(|l| spline.eval(l as f64)[k]).sum())
                .collect();
            for (k, b) in beta.iter().enumerate() {
                out[term.columns.start + k] = term.scale * b;
                out[0] += term.center * b * sums[k];
            }
        }
        out
    }
}

/// A simulated dataset in memory.
#[derive(Debug, Clone)]
pub struct SimDataset {
    pub cases: CasePanel,
    pub population: PopulationPanel,
    pub covariates: Vec<CovariatePanel>,
    pub neighbors: Vec<(String, String)>,
    /// Symmetric centre-to-centre distances (km).
    pub distances: DMatrix<f64>,
    pub truth: SimTruth,
}

/// Zero-mean draw with precision `scale * q`, with null-space directions
/// (removed by sum-to-zero constraints) dropped.
fn draw_gmrf(q: &DMatrix<f64>, scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let eig = SymmetricEigen::new(q.clone());
    let top = eig.eigenvalues.iter().copied().fold(0.0f64, f64::max);
    let mut x = vec![0.0; q.nrows()];
    for (k, &l) in eig.eigenvalues.iter().enumerate() {
        if l > 1e-9 * top {
            let z: f64 = rng.sample(StandardNormal);
            let s = z / (scale * l).sqrt();
            for (xi, u) in x.iter_mut().zip(eig.eigenvectors.column(k).iter()) {
                *xi += s * u;
            }
        }
    }
    x
}

pub fn simulate(cfg: &SimConfig) -> Result<SimDataset, SimError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let nr = cfg.n_regions;
    let nm = cfg.n_months;
    let regions = cfg.region_names();
    let first = Month::new(cfg.first_year, 1).expect("January");
    let n_years = nm.div_ceil(12);

    let edges = cfg.edges();
    let neighbors: Vec<(String, String)> = edges
        .iter()
        .map(|&(a, b)| (regions[a].clone(), regions[b].clone()))
        .collect();
    let prox = adjacency_from_neighbor_list(&neighbors, &regions)?;
    let distances = DMatrix::from_fn(nr, nr, |i, j| {
        let (a, b) = (cfg.centre(i), cfg.centre(j));
        ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
    });

    let (plo, phi_) = cfg.population_range;
    let base_pop: Vec<f64> = (0..nr)
        .map(|_| (plo.ln() + rng.random::<f64>() * (phi_ / plo).ln()).exp().round())
        .collect();
    let mut pop_values = Vec::with_capacity(nr * n_years);
    for p in &base_pop {
        for y in 0..n_years {
            pop_values.push((p * (1.0 + cfg.annual_growth).powi(y as i32)).round());
        }
    }
    let population = PopulationPanel::new(regions.clone(), cfg.first_year, n_years, pop_values.clone())?;

    // Covariates with a `lag_max` burn-in before the panel.
    let burn = cfg.lag_max;
    let total = nm + burn;
    let window = LagWindow::new(cfg.lag_min, cfg.lag_max)?;
    let spline = NaturalSpline::new(&window.default_lag_spline(cfg.lag_knots)?)?;
    let lag_basis: Vec<Vec<f64>> = window.lags().map(|l| spline.eval(l as f64)).collect();
    let mut covariates = Vec::with_capacity(cfg.covariates.len());
    let mut effect = vec![0.0; nr * nm];
    for c in &cfg.covariates {
        let series_for = |rng: &mut ChaCha8Rng, phase: f64| -> Vec<f64> {
            let mut z = rng.sample::<f64, _>(StandardNormal);
            let innov = (1.0 - c.autocorrelation * c.autocorrelation).sqrt();
            (0..total)
                .map(|t| {
                    z = c.autocorrelation * z + innov * rng.sample::<f64, _>(StandardNormal);
                    let m0 = (t as i64 - burn as i64).rem_euclid(12) as f64;
                    let season = c.seasonal_amplitude * (2.0 * std::f64::consts::PI * m0 / 12.0 + phase).sin();
                    c.mean + c.sd * (season + z)
                })
                .collect()
        };
        let full: Vec<Vec<f64>> = if c.region_constant {
            let s = series_for(&mut rng, 0.0);
            vec![s; nr]
        } else {
            (0..nr)
                .map(|_| {
                    let phase = rng.random::<f64>() * 0.5;
                    series_for(&mut rng, phase)
                })
                .collect()
        };
        if !c.lag_coefficients.is_empty() {
            for (i, s) in full.iter().enumerate() {
                for t in 0..nm {
                    let mut e = 0.0;
                    for (l, b) in window.lags().zip(&lag_basis) {
                        let x = s[t + burn - l];
                        e += x * b.iter().zip(&c.lag_coefficients).map(|(u, v)| u * v).sum::<f64>();
                    }
                    effect[i * nm + t] += e;
                }
            }
        }
        let values: Vec<f64> = full.iter().flat_map(|s| s[burn..].iter().copied()).collect();
        covariates.push(CovariatePanel::new(c.name.clone(), nr, nm, values)?);
    }

    let phi: Vec<Vec<f64>> = match cfg.sigma2_phi {
        Some(s2) => {
            let q = crate::structures::cyclic_rw1_precision(12)?.q.to_dense();
            (0..nr).map(|_| draw_gmrf(&q, 1.0 / s2, &mut rng)).collect()
        }
        None => vec![vec![0.0; 12]; nr],
    };
    let spatial: Vec<Vec<f64>> = match cfg.tau_theta {
        Some(tau) => {
            let lap = prox.laplacian().to_dense();
            let q = match cfg.spatial {
                SpatialStructure::Independent => DMatrix::identity(nr, nr),
                SpatialStructure::Icar | SpatialStructure::Bym => lap,
                SpatialStructure::ProperCar => lap + DMatrix::identity(nr, nr) * cfg.d.expect("validated"),
            };
            (0..n_years)
                .map(|_| {
                    let mut th = draw_gmrf(&q, tau, &mut rng);
                    if let (SpatialStructure::Bym, Some(tv)) = (cfg.spatial, cfg.tau_v) {
                        for t in th.iter_mut() {
                            *t += rng.sample::<f64, _>(StandardNormal) / tv.sqrt();
                        }
                    }
                    th
                })
                .collect()
        }
        None => vec![vec![0.0; nr]; n_years],
    };

    let mut log_rr = Vec::with_capacity(nr * nm);
    let mut counts = Vec::with_capacity(nr * nm);
    for i in 0..nr {
        for t in 0..nm {
            let m = first.offset(t as i64);
            let y = (m.year - cfg.first_year) as usize;
            let lrr = cfg.intercept + effect[i * nm + t] + phi[i][m.month0()] + spatial[y][i];
            let e0 = pop_values[i * n_years + y] * cfg.base_rate;
            log_rr.push(lrr);
            counts.push(draw_negative_binomial(&mut rng, e0 * lrr.exp(), cfg.kappa) as u64);
        }
    }
    let cases = CasePanel::new(regions.clone(), first, nm, counts)?;
    let truth = SimTruth {
        config: cfg.clone(),
        regions: regions.clone(),
        intercept: cfg.intercept,
        kappa: cfg.kappa,
        base_rate: cfg.base_rate,
        lag_coefficients: cfg
            .covariates
            .iter()
            .filter(|c| !c.lag_coefficients.is_empty())
            .map(|c| (c.name.clone(), c.lag_coefficients.clone()))
            .collect(),
        phi,
        spatial,
        log_rr,
    };
    Ok(SimDataset {
        cases,
        population,
        covariates,
        neighbors,
        distances,
        truth,
    })
}

/// GeoJSON FeatureCollection of square cells keyed by `region`.
pub fn region_polygons(cfg: &SimConfig) -> serde_json::Value {
    let features: Vec<serde_json::Value> = cfg
        .region_names()
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let (x, y) = cfg.centre(i);
            let (lon, lat) = (-84.0 + x / 100.0, 10.0 + y / 100.0);
            let h = 0.04;
            serde_json::json!({
                "type": "Feature",
                "properties": { "region": r },
                "geometry": {
                    "type": "Polygon",
                    "coordinates": [[
                        [lon - h, lat - h], [lon + h, lat - h], [lon + h, lat + h],
                        [lon - h, lat + h], [lon - h, lat - h]
                    ]]
                }
            })
        })
        .collect();
    serde_json::json!({ "type": "FeatureCollection", "features": features })
}

/// Writes `cases.csv`, `population.csv`, `covariates/<name>.csv`,
/// `neighbors.csv`, `distances.csv`, `regions.geojson` and `truth.json`.
pub fn write_dataset(dir: &Path, data: &SimDataset) -> Result<(), SimError> {
    fs::create_dir_all(dir.join("covariates"))?;
    write_cases(fs::File::create(dir.join("cases.csv"))?, &data.cases)?;
    write_population(fs::File::create(dir.join("population.csv"))?, &data.population)?;
    for c in &data.covariates {
        write_covariate(
            fs::File::create(dir.join("covariates").join(format!("{}.csv", c.name())))?,
            &data.cases,
            c,
        )?;
    }
    let mut w = csv::Writer::from_path(dir.join("neighbors.csv")).map_err(std::io::Error::other)?;
    w.write_record(["region_a", "region_b"]).map_err(std::io::Error::other)?;
    for (a, b) in &data.neighbors {
        w.write_record([a, b]).map_err(std::io::Error::other)?;
    }
    w.flush()?;
    let regions = data.cases.regions();
    let mut w = csv::Writer::from_path(dir.join("distances.csv")).map_err(std::io::Error::other)?;
    w.write_record(["region_a", "region_b", "km"]).map_err(std::io::Error::other)?;
    for i in 0..regions.len() {
        for j in (i + 1)..regions.len() {
            w.write_record([&regions[i], &regions[j], &format!("{:.3}", data.distances[(i, j)])])
                .map_err(std::io::Error::other)?;
        }
    }
    w.flush()?;
    let geo = serde_json::to_string_pretty(&region_polygons(&data.truth.config))?;
    fs::write(dir.join("regions.geojson"), geo + "\n")?;
    let mut f = fs::File::create(dir.join("truth.json"))?;
    f.write_all(serde_json::to_string_pretty(&data.truth)?.as_bytes())?;
    f.write_all(b"\n")?;
    Ok(())
}
