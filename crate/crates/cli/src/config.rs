use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use stcast_core::infer::FitConfig;
use stcast_core::lagbasis::LagWindow;
use stcast_core::model::{BasisKind, ModelSpec};
use stcast_core::simulate::SimConfig;
use stcast_core::structures::{ProximityKind, SpatialStructure};
use stcast_core::MonthWindow;

use crate::error::CliError;

/// One run, as read from a TOML file. Relative paths resolve against the
/// directory holding the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Grid fits run on this many threads; 0 means one per core.
    #[serde(default)]
    pub workers: usize,
    #[serde(default)]
    pub data: Option<DataConfig>,
    #[serde(default)]
    pub windows: Option<Windows>,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub inference: FitConfig,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
    #[serde(default)]
    pub forecast: ForecastSettings,
    #[serde(default)]
    pub simulate: Option<SimConfig>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub cases: PathBuf,
    pub population: PathBuf,
    #[serde(default)]
    pub covariates: Vec<PathBuf>,
    #[serde(default)]
    pub neighbors: Option<PathBuf>,
    #[serde(default)]
    pub distances: Option<PathBuf>,
    /// Polygon GeoJSON keyed by a `region` property.
    #[serde(default)]
    pub geometry: Option<PathBuf>,
}

impl DataConfig {
    /// Points every file at `dir` using the layout written by `simulate`.
    pub fn standard_layout(dir: &Path, covariates: &[String]) -> Self {
        Self {
            cases: dir.join("cases.csv"),
            population: dir.join("population.csv"),
            covariates: covariates
                .iter()
                .map(|c| dir.join("covariates").join(format!("{c}.csv")))
                .collect(),
            neighbors: Some(dir.join("neighbors.csv")),
            distances: Some(dir.join("distances.csv")),
            geometry: Some(dir.join("regions.geojson")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Windows {
    pub train: MonthWindow,
    pub test: MonthWindow,
}

/// Cross product `bases x (independent + proximities x CAR structures)`,
/// plus an optional null model and explicit extra specs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub bases: Vec<BasisKind>,
    pub proximities: Vec<ProximityKind>,
    pub structures: Vec<SpatialStructure>,
    /// Covariate names; empty means every supplied covariate file.
    pub covariates: Vec<String>,
    pub lag_min: usize,
    pub lag_max: usize,
    pub lag_knots: usize,
    pub include_monthly_effect: bool,
    pub include_null: bool,
    pub extra: Vec<ModelSpec>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            bases: vec![BasisKind::Linear],
            proximities: vec![ProximityKind::Neighbor],
            structures: vec![SpatialStructure::Independent, SpatialStructure::Icar],
            covariates: Vec::new(),
            lag_min: 3,
            lag_max: 12,
            lag_knots: 2,
            include_monthly_effect: true,
            include_null: false,
            extra: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsConfig {
    /// Posterior draws behind DIC and the CPO log score.
    pub samples: usize,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self { samples: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecastSettings {
    pub samples: usize,
    pub alpha: f64,
    pub naive_lookback_years: usize,
    pub null_lookback_years: usize,
    pub carry_forward_spatial: bool,
}

impl Default for ForecastSettings {
    fn default() -> Self {
        Self {
            samples: 1000,
            alpha: 0.05,
            naive_lookback_years: 5,
            null_lookback_years: 5,
            carry_forward_spatial: false,
        }
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl RunConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, CliError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
        Self::from_toml(&text, &base)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if let Some(w) = &self.windows {
            if w.test.first != w.train.last.offset(1) {
                return Err(config_err(format!(
                    "test window {} must start the month after the training window {} ends",
                    w.test, w.train
                )));
            }
            if w.test.len() > self.grid.lag_min {
                return Err(config_err(format!(
                    "test window has {} months; at most lag_min = {} can be forecast",
                    w.test.len(),
                    self.grid.lag_min
                )));
            }
        }
        LagWindow::new(self.grid.lag_min, self.grid.lag_max).map_err(|e| config_err(e.to_string()))?;
        let f = &self.forecast;
        if !(f.alpha > 0.0 && f.alpha < 1.0) {
            return Err(config_err("forecast.alpha must lie in (0, 1)"));
        }
        if f.samples < 2 || self.diagnostics.samples < 2 {
            return Err(config_err("sample counts must be at least 2"));
        }
        let mut seen = BTreeSet::new();
        for s in &self.grid.extra {
            if !seen.insert(s.id.as_str()) {
                return Err(config_err(format!("duplicate extra model id `{}`", s.id)));
            }
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn data(&self) -> Result<DataConfig, CliError> {
        let d = self.data.as_ref().ok_or_else(|| config_err("missing [data] section"))?;
        let opt = |p: &Option<PathBuf>| p.as_ref().map(|p| self.resolve(p));
        Ok(DataConfig {
            cases: self.resolve(&d.cases),
            population: self.resolve(&d.population),
            covariates: d.covariates.iter().map(|p| self.resolve(p)).collect(),
            neighbors: opt(&d.neighbors),
            distances: opt(&d.distances),
            geometry: opt(&d.geometry),
        })
    }

    pub fn windows(&self) -> Result<Windows, CliError> {
        self.windows.ok_or_else(|| config_err("missing [windows] section"))
    }

    pub fn fit_config(&self) -> FitConfig {
        FitConfig {
            seed: self.seed,
            ..self.inference.clone()
        }
    }

    /// Grid specs in a fixed order; `available` supplies covariate names
    /// when the grid leaves them implicit.
    pub fn model_grid(&self, available: &[String]) -> Result<Vec<ModelSpec>, CliError> {
        let g = &self.grid;
        let covs = if g.covariates.is_empty() {
            available.to_vec()
        } else {
            g.covariates.clone()
        };
        let window = LagWindow::new(g.lag_min, g.lag_max).map_err(|e| config_err(e.to_string()))?;
        let make = |id: String, basis: BasisKind, spatial, proximity| ModelSpec {
            lag_window: window,
            lag_knots: g.lag_knots,
            include_monthly_effect: g.include_monthly_effect,
            ..ModelSpec::new(id, basis, spatial, proximity, covs.clone())
        };
        let mut specs = Vec::new();
        if g.include_null {
            specs.push(ModelSpec::null("null"));
        }
        for &basis in &g.bases {
            for &s in &g.structures {
                if s.needs_proximity() {
                    for &p in &g.proximities {
                        let id = format!("{}_{}_{}", basis.label(), proximity_label(p), s.label());
                        specs.push(make(id, basis, s, Some(p)));
                    }
                } else {
                    specs.push(make(format!("{}_{}", basis.label(), s.label()), basis, s, None));
                }
            }
        }
        specs.extend(g.extra.iter().cloned());
        let mut ids = BTreeSet::new();
        for s in &specs {
            if !ids.insert(s.id.clone()) {
                return Err(config_err(format!("model id `{}` appears twice in the grid", s.id)));
            }
        }
        Ok(specs)
    }

    /// SHA-256 over the canonical JSON form of the effective settings.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

pub fn proximity_label(p: ProximityKind) -> &'static str {
    match p {
        ProximityKind::Neighbor => "neighbor",
        ProximityKind::Distance => "distance",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
seed = 3
[data]
cases = "d/cases.csv"
population = "d/population.csv"
[windows]
train = "2000-01..2005-12"
test = "2006-01..2006-03"
"#;

    #[test]
    fn parses_and_resolves() {
        let cfg = RunConfig::from_toml(BASE, Path::new("/runs")).unwrap();
        assert_eq!(cfg.data().unwrap().cases, PathBuf::from("/runs/d/cases.csv"));
        assert_eq!(cfg.fit_config().seed, 3);
        assert_eq!(cfg.forecast.alpha, 0.05);
    }

    #[test]
    fn rejects_bad_windows() {
        let gap = BASE.replace("2006-01..2006-03", "2006-02..2006-03");
        assert!(matches!(RunConfig::from_toml(&gap, Path::new("")), Err(CliError::Config(_))));
        let long = BASE.replace("2006-01..2006-03", "2006-01..2006-04");
        assert!(matches!(RunConfig::from_toml(&long, Path::new("")), Err(CliError::Config(_))));
        let typo = format!("{BASE}\n[grid]\nbasis = [\"linear\"]\n");
        assert!(matches!(RunConfig::from_toml(&typo, Path::new("")), Err(CliError::Config(_))));
    }

    #[test]
    fn full_grid_has_fourteen_entries() {
        let text = format!(
            "{BASE}\n[grid]\nbases = [\"linear\", \"nonlinear\"]\nproximities = [\"neighbor\", \"distance\"]\n\
             structures = [\"independent\", \"icar\", \"proper_car\", \"bym\"]\n"
        );
        let cfg = RunConfig::from_toml(&text, Path::new("")).unwrap();
        let grid = cfg.model_grid(&["rain".into()]).unwrap();
        assert_eq!(grid.len(), 14);
        assert_eq!(grid[0].id, "linear_independent");
        assert_eq!(grid[1].id, "linear_neighbor_icar");
        assert!(grid.iter().all(|s| s.validate().is_ok()));
    }

    #[test]
    fn hash_tracks_settings() {
        let a = RunConfig::from_toml(BASE, Path::new("")).unwrap();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 4;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
