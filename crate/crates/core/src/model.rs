//! Assembly of one model variant into a latent Gaussian problem with a
//! negative-binomial observation layer, and the joint log posterior with its
//! exact gradient and sparse Hessian in the latent field.

use std::f64::consts::PI;
use std::ops::Range;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lagbasis::{BasisError, CrossBasisEvaluator, ExposureBasis, LagWindow, SplineSpec};
use crate::panel::{CasePanel, CovariatePanel, ExpectedPanel, Month, MonthWindow};
use crate::sparse::SparseSym;
use crate::stats::{ln_gamma, mean, variance};
use crate::structures::{
    cyclic_rw1_precision, iid_precision, icar_precision, MultiplierRole, PrecisionStructure,
    ProximityKind, ProximityMatrix, SpatialStructure, StructureError,
};

/// Name of the autoregressive term, whose exposure series is
/// `log((Y + 0.5) / E)`.
pub const AUTOREGRESSIVE_TERM: &str = "log_rr";
pub const CONTINUITY_CORRECTION: f64 = 0.5;
pub const FIXED_EFFECT_VARIANCE: f64 = 1000.0;
pub const HYPERPRIOR_SHAPE: f64 = 1.0;
pub const HYPERPRIOR_RATE: f64 = 5e-5;
pub const MONTHS_PER_YEAR: usize = 12;
const EXPOSURE_KNOT_PROBS: [f64; 2] = [0.33, 0.66];
const NONE: usize = usize::MAX;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model specification: {0}")]
    InvalidSpec(String),
    #[error("model `{0}` needs a proximity matrix")]
    MissingProximity(String),
    #[error("proximity matrix is {found:?}, model asks for {wanted:?}")]
    ProximityKindMismatch {
        wanted: ProximityKind,
        found: ProximityKind,
    },
    #[error("no usable rows: training window leaves no month with full lag history")]
    EmptyUsableRows,
    #[error("training window {0} is not inside the case panel")]
    WindowOutsidePanel(MonthWindow),
    #[error("covariate `{0}` not supplied")]
    MissingCovariate(String),
    #[error("covariate `{0}` is constant over the training window")]
    DegenerateCovariate(String),
    #[error("covariate `{0}` does not match the case panel shape")]
    CovariateShape(String),
    #[error("the autoregressive term needs a minimum lag of at least 1")]
    AutoregressiveLagZero,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite input to {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error(transparent)]
    Structure(#[from] StructureError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BasisKind {
    #[default]
    Linear,
    Nonlinear,
}

impl BasisKind {
    pub fn label(self) -> &'static str {
        match self {
            BasisKind::Linear => "linear",
            BasisKind::Nonlinear => "nonlinear",
        }
    }
}

fn default_window() -> LagWindow {
    LagWindow {
        lag_min: 3,
        lag_max: 12,
    }
}

fn default_spatial() -> SpatialStructure {
    SpatialStructure::Independent
}

fn default_lag_knots() -> usize {
    2
}

fn yes() -> bool {
    true
}

/// Declarative description of one model variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub id: String,
    #[serde(default)]
    pub basis_kind: BasisKind,
    #[serde(default = "default_window")]
    pub lag_window: LagWindow,
    #[serde(default)]
    pub proximity: Option<ProximityKind>,
    #[serde(default = "default_spatial")]
    pub spatial: SpatialStructure,
    #[serde(default)]
    pub covariate_names: Vec<String>,
    #[serde(default = "yes")]
    pub include_monthly_effect: bool,
    #[serde(default)]
    pub null_model: bool,
    /// Fixes the proper CAR offset instead of estimating it.
    #[serde(default)]
    pub fixed_d: Option<f64>,
    #[serde(default = "default_lag_knots")]
    pub lag_knots: usize,
    /// Standardize covariates over the training window before expansion.
    #[serde(default = "yes")]
    pub standardize: bool,
}

impl ModelSpec {
    /// `log RR = alpha`.
    pub fn null(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            basis_kind: BasisKind::Linear,
            lag_window: default_window(),
            proximity: None,
            spatial: SpatialStructure::Independent,
            covariate_names: Vec::new(),
            include_monthly_effect: false,
            null_model: true,
            fixed_d: None,
            lag_knots: default_lag_knots(),
            standardize: true,
        }
    }

    pub fn new(
        id: impl Into<String>,
        basis_kind: BasisKind,
        spatial: SpatialStructure,
        proximity: Option<ProximityKind>,
        covariate_names: Vec<String>,
    ) -> Self {
        Self {
            id: id.into(),
            basis_kind,
            lag_window: default_window(),
            proximity,
            spatial,
            covariate_names,
            include_monthly_effect: true,
            null_model: false,
            fixed_d: None,
            lag_knots: default_lag_knots(),
            standardize: true,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidSpec(format!("{}: {m}", self.id)));
        if self.null_model {
            if !self.covariate_names.is_empty() || self.include_monthly_effect {
                return bad("the null model admits no covariates or monthly effect");
            }
            return Ok(());
        }
        if self.covariate_names.is_empty() {
            return bad("covariate list is empty");
        }
        if self.lag_window.lag_min > self.lag_window.lag_max {
            return bad("lag_min exceeds lag_max");
        }
        if self.spatial.needs_proximity() && self.proximity.is_none() {
            return bad("CAR-family structures need a proximity kind");
        }
        if let Some(d) = self.fixed_d {
            if !(d > 0.0 && d.is_finite()) {
                return bad("fixed_d must be positive");
            }
        }
        if self.lag_knots == 0 {
            return bad("lag_knots must be at least 1");
        }
        Ok(())
    }
}

/// Observation family. The Gaussian family (with `kappa` as the noise
/// precision) exists for closed-form checks of the inference machinery.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    #[default]
    NegativeBinomial,
    Gaussian,
}

/// Hyperparameters on the log scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub log_kappa: f64,
    pub log_sigma2_phi: Option<f64>,
    pub log_tau_theta: Option<f64>,
    pub log_tau_v: Option<f64>,
    pub log_d: Option<f64>,
}

impl HyperParams {
    pub fn kappa(&self) -> f64 {
        self.log_kappa.exp()
    }

    pub fn sigma2_phi(&self) -> Option<f64> {
        self.log_sigma2_phi.map(f64::exp)
    }

    pub fn tau_theta(&self) -> Option<f64> {
        self.log_tau_theta.map(f64::exp)
    }

    pub fn tau_v(&self) -> Option<f64> {
        self.log_tau_v.map(f64::exp)
    }

    pub fn d(&self) -> Option<f64> {
        self.log_d.map(f64::exp)
    }

    pub fn multiplier(&self, role: MultiplierRole) -> f64 {
        match role {
            MultiplierRole::TauTheta => self.tau_theta().expect("tau_theta present"),
            MultiplierRole::TauV => self.tau_v().expect("tau_v present"),
            MultiplierRole::PhiPrecision => (-self.log_sigma2_phi.expect("sigma2_phi present")).exp(),
        }
    }
}

/// Log density of the log-gamma hyperprior on a log precision.
pub fn log_precision_prior(rho: f64) -> f64 {
    let (a, b) = (HYPERPRIOR_SHAPE, HYPERPRIOR_RATE);
    a * rho - b * rho.exp() + a * b.ln() - ln_gamma(a)
}

/// `lgamma(y + k) - lgamma(k)`, summed exactly for small integer `y` so the
/// Poisson limit stays accurate.
fn lgamma_ratio(y: f64, kappa: f64) -> f64 {
    if y == y.trunc() && y <= 64.0 {
        (0..y as usize).map(|j| (kappa + j as f64).ln()).sum()
    } else {
        ln_gamma(y + kappa) - ln_gamma(kappa)
    }
}

/// Negative-binomial log pmf with mean `mu` and size `kappa`
/// (`Var = mu + mu^2 / kappa`).
pub fn nb_log_pmf(y: f64, mu: f64, kappa: f64) -> Result<f64, ModelError> {
    if !(y.is_finite() && mu.is_finite() && kappa.is_finite()) || mu <= 0.0 || kappa <= 0.0 || y < 0.0
    {
        return Err(ModelError::NonFinite("nb_log_pmf"));
    }
    Ok(nb_eta(y, mu.ln(), kappa, ln_gamma(y + 1.0)).0)
}

/// Log pmf and its first two derivatives in `eta = log mu`.
pub fn nb_log_pmf_eta(y: f64, eta: f64, kappa: f64) -> (f64, f64, f64) {
    nb_eta(y, eta, kappa, ln_gamma(y + 1.0))
}

#[inline]
fn nb_eta(y: f64, eta: f64, kappa: f64, log_fact: f64) -> (f64, f64, f64) {
    let mu = eta.exp();
    let log_km = (kappa + mu).ln();
    let value = lgamma_ratio(y, kappa) - log_fact - kappa * (mu / kappa).ln_1p()
        + y * (eta - log_km);
    let denom = kappa + mu;
    let d1 = kappa * (y - mu) / denom;
    let d2 = -kappa * mu * (kappa + y) / (denom * denom);
    (value, d1, d2)
}

#[inline]
fn gaussian_eta(y: f64, eta: f64, prec: f64) -> (f64, f64, f64) {
    let r = y - eta;
    (
        0.5 * prec.ln() - 0.5 * (2.0 * PI).ln() - 0.5 * prec * r * r,
        prec * r,
        -prec,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Fixed,
    Monthly,
    Spatial,
    Unstructured,
}

/// One contiguous latent block.
#[derive(Debug, Clone)]
pub struct LatentBlock {
    pub name: String,
    pub kind: BlockKind,
    pub start: usize,
    pub size: usize,
    /// Replicated structure (absent for the fixed effects). For the proper
    /// CAR this is `D - W`; the offset `d I` is added at evaluation.
    pub structure: Option<PrecisionStructure>,
    pub copies: usize,
    pub proper_offset: bool,
    log_pdet: f64,
}

impl LatentBlock {
    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.size
    }
}

/// Partition of the latent vector into blocks, with all linear constraints.
#[derive(Debug, Clone)]
pub struct LatentLayout {
    pub blocks: Vec<LatentBlock>,
    pub dim: usize,
    /// Sparse constraint rows `(index, weight)`; the latent field satisfies
    /// `A x = 0`.
    pub constraints: Vec<Vec<(usize, f64)>>,
}

impl LatentLayout {
    pub fn block(&self, kind: BlockKind) -> Option<&LatentBlock> {
        self.blocks.iter().find(|b| b.kind == kind)
    }

    pub fn n_fixed(&self) -> usize {
        self.blocks[0].size
    }

    /// Constraint residuals `A x`.
    pub fn constraint_residual(&self, x: &[f64]) -> Vec<f64> {
        self.constraints
            .iter()
            .map(|c| c.iter().map(|&(i, w)| w * x[i]).sum())
            .collect()
    }
}

/// One covariate's cross-basis term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateTerm {
    pub name: String,
    /// Standardization `(x - center) / scale` over the training window.
    pub center: f64,
    pub scale: f64,
    pub exposure: ExposureBasis,
    pub lag: SplineSpec,
    pub columns: Range<usize>,
}

/// Inputs to [`assemble`].
pub struct ModelData<'a> {
    pub cases: &'a CasePanel,
    pub expected: &'a ExpectedPanel,
    pub covariates: &'a [CovariatePanel],
    pub proximity: Option<&'a ProximityMatrix>,
    pub train: MonthWindow,
}

#[derive(Debug, Clone)]
struct HessianPlan {
    pattern: SparseSym,
    /// Lower-triangle fixed-by-fixed slots, `j * p + k` for `k <= j`.
    fixed: Vec<usize>,
    /// `(r - p) * p + j` -> slot of `(r, j)`.
    rand_fixed: Vec<usize>,
    /// Per cell: diagonal slots of its random indices then pair slots
    /// (0,1), (0,2), (1,2).
    cell: Vec<[usize; 6]>,
    /// Per block: `(slot, q value)` over the replicated structure.
    prior: Vec<Vec<(usize, f64)>>,
    diag: Vec<usize>,
}

/// A model variant bound to data.
#[derive(Debug, Clone)]
pub struct AssembledModel {
    pub spec: ModelSpec,
    pub family: Family,
    /// Fixed-effect design (intercept then cross-basis blocks), one row per
    /// usable training cell.
    pub design: DMatrix<f64>,
    pub offset: Vec<f64>,
    pub response: Vec<f64>,
    /// `(region, month index)` per row.
    pub cell_index: Vec<(usize, usize)>,
    pub layout: LatentLayout,
    pub terms: Vec<CovariateTerm>,
    pub regions: Vec<String>,
    pub first_month: Month,
    pub n_months: usize,
    pub train: MonthWindow,
    /// Years with a spatial replicate.
    pub years: Vec<i32>,
    /// Eigenvalues of `D - W` (proper CAR only).
    pub car_eigenvalues: Vec<f64>,
    /// Base (single-copy) spatial structure for prior draws.
    pub spatial_base: Option<PrecisionStructure>,
    evaluators: Vec<CrossBasisEvaluator>,
    series: Vec<Vec<f64>>,
    log_expected: Vec<f64>,
    rows: Vec<f64>,
    cell_random: Vec<[usize; 3]>,
    log_fact: Vec<f64>,
    block_q: Vec<Option<SparseSym>>,
    plan: HessianPlan,
}

fn month_offset(first: Month, m: Month) -> i64 {
    m.ordinal() - first.ordinal()
}

pub fn assemble(spec: &ModelSpec, data: &ModelData) -> Result<AssembledModel, ModelError> {
    spec.validate()?;
    let cases = data.cases;
    let (nr, nm) = (cases.n_regions(), cases.n_months());
    let (Some(t0), Some(t1)) = (
        cases.month_index(data.train.first),
        cases.month_index(data.train.last),
    ) else {
        return Err(ModelError::WindowOutsidePanel(data.train));
    };
    if data.expected.n_regions() != nr || data.expected.n_months() != nm {
        return Err(ModelError::DimensionMismatch {
            expected: nr * nm,
            got: data.expected.values().len(),
        });
    }
    let mut log_expected = Vec::with_capacity(nr * nm);
    for i in 0..nr {
        for t in 0..nm {
            log_expected.push(data.expected.get(i, t).ln());
        }
    }

    let window = spec.lag_window;
    let mut terms = Vec::new();
    let mut evaluators = Vec::new();
    let mut series = Vec::new();
    let mut p = 1;
    if !spec.null_model {
        let lag = window.default_lag_spline(spec.lag_knots)?;
        for name in &spec.covariate_names {
            let raw: Vec<f64> = if name == AUTOREGRESSIVE_TERM {
                if window.lag_min == 0 {
                    return Err(ModelError::AutoregressiveLagZero);
                }
                (0..nr)
                    .flat_map(|i| (0..nm).map(move |t| (i, t)))
                    .map(|(i, t)| {
                        ((cases.count(i, t) as f64 + CONTINUITY_CORRECTION)
                            / data.expected.get(i, t))
                        .ln()
                    })
                    .collect()
            } else {
                let cov = data
                    .covariates
                    .iter()
                    .find(|c| c.name() == name)
                    .ok_or_else(|| ModelError::MissingCovariate(name.clone()))?;
                if cov.n_regions() != nr || cov.n_months() != nm {
                    return Err(ModelError::CovariateShape(name.clone()));
                }
                (0..nr).flat_map(|i| cov.series(i).to_vec()).collect()
            };
            let train_vals: Vec<f64> = (0..nr)
                .flat_map(|i| raw[i * nm + t0..=i * nm + t1].to_vec())
                .collect();
            if train_vals.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::NonFinite("covariate"));
            }
            let sd = if train_vals.len() > 1 { variance(&train_vals).sqrt() } else { 0.0 };
            if !(sd > 0.0) {
                return Err(ModelError::DegenerateCovariate(name.clone()));
            }
            let (center, scale) = if spec.standardize {
                (mean(&train_vals), sd)
            } else {
                (0.0, 1.0)
            };
            let std_series: Vec<f64> = raw.iter().map(|v| (v - center) / scale).collect();
            let exposure = match spec.basis_kind {
                BasisKind::Linear => ExposureBasis::Linear,
                BasisKind::Nonlinear => {
                    let std_train: Vec<f64> =
                        train_vals.iter().map(|v| (v - center) / scale).collect();
                    ExposureBasis::Spline(SplineSpec::from_quantiles(
                        &std_train,
                        &EXPOSURE_KNOT_PROBS,
                    )?)
                }
            };
            let eval = CrossBasisEvaluator::new(name, window, &exposure, &lag)?;
            let cols = p..p + eval.ncols();
            p += eval.ncols();
            terms.push(CovariateTerm {
                name: name.clone(),
                center,
                scale,
                exposure,
                lag: lag.clone(),
                columns: cols,
            });
            evaluators.push(eval);
            series.push(std_series);
        }
    }

    let first_usable = if spec.null_model { t0 } else { t0.max(window.lag_max) };
    let mut cell_index = Vec::new();
    for i in 0..nr {
        for t in first_usable..=t1 {
            cell_index.push((i, t));
        }
    }
    if cell_index.is_empty() {
        return Err(ModelError::EmptyUsableRows);
    }
    let mut years: Vec<i32> = cell_index.iter().map(|&(_, t)| cases.month(t).year).collect();
    years.sort_unstable();
    years.dedup();

    // Latent layout.
    let mut blocks = vec![LatentBlock {
        name: "fixed".into(),
        kind: BlockKind::Fixed,
        start: 0,
        size: p,
        structure: None,
        copies: 1,
        proper_offset: false,
        log_pdet: 0.0,
    }];
    let mut next = p;
    let mut push = |blocks: &mut Vec<LatentBlock>,
                    name: &str,
                    kind: BlockKind,
                    base: PrecisionStructure,
                    copies: usize,
                    proper: bool| {
        let log_pdet = if proper { 0.0 } else { base.log_pdet() * copies as f64 };
        let rep = base.replicate(copies);
        let size = rep.size();
        blocks.push(LatentBlock {
            name: name.into(),
            kind,
            start: next,
            size,
            structure: Some(rep),
            copies,
            proper_offset: proper,
            log_pdet,
        });
        next += size;
    };
    let mut car_eigenvalues = Vec::new();
    let mut spatial_base = None;
    if !spec.null_model {
        if spec.include_monthly_effect {
            push(
                &mut blocks,
                "monthly",
                BlockKind::Monthly,
                cyclic_rw1_precision(MONTHS_PER_YEAR)?,
                nr,
                false,
            );
        }
        let prox = if spec.spatial.needs_proximity() {
            let prox = data
                .proximity
                .ok_or_else(|| ModelError::MissingProximity(spec.id.clone()))?;
            let wanted = spec.proximity.expect("validated");
            if prox.kind() != wanted {
                return Err(ModelError::ProximityKindMismatch {
                    wanted,
                    found: prox.kind(),
                });
            }
            if prox.n() != nr {
                return Err(ModelError::DimensionMismatch {
                    expected: nr,
                    got: prox.n(),
                });
            }
            Some(prox)
        } else {
            None
        };
        let copies = years.len();
        match spec.spatial {
            SpatialStructure::Independent => {
                let base = iid_precision(nr, MultiplierRole::TauTheta);
                spatial_base = Some(base.clone());
                push(&mut blocks, "spatial", BlockKind::Spatial, base, copies, false);
            }
            SpatialStructure::Icar => {
                let base = icar_precision(prox.unwrap())?;
                spatial_base = Some(base.clone());
                push(&mut blocks, "spatial", BlockKind::Spatial, base, copies, false);
            }
            SpatialStructure::ProperCar => {
                let prox = prox.unwrap();
                prox.require_connected()?;
                let base = PrecisionStructure {
                    q: prox.laplacian(),
                    rank_deficiency: 0,
                    constraints: Vec::new(),
                    multiplier_role: MultiplierRole::TauTheta,
                };
                car_eigenvalues = base.eigenvalues();
                spatial_base = Some(base.clone());
                push(&mut blocks, "spatial", BlockKind::Spatial, base, copies, true);
            }
            SpatialStructure::Bym => {
                let base = icar_precision(prox.unwrap())?;
                spatial_base = Some(base.clone());
                push(&mut blocks, "spatial", BlockKind::Spatial, base, copies, false);
                push(
                    &mut blocks,
                    "unstructured",
                    BlockKind::Unstructured,
                    iid_precision(nr, MultiplierRole::TauV),
                    copies,
                    false,
                );
            }
        }
    }
    let dim = next;
    let mut constraints = Vec::new();
    for b in &blocks {
        if let Some(s) = &b.structure {
            for c in &s.constraints {
                constraints.push(
                    c.iter()
                        .enumerate()
                        .filter(|(_, w)| **w != 0.0)
                        .map(|(k, w)| (b.start + k, *w))
                        .collect(),
                );
            }
        }
    }
    let layout = LatentLayout {
        blocks,
        dim,
        constraints,
    };

    // Rows.
    let n_cells = cell_index.len();
    let mut rows = vec![0.0; n_cells * p];
    let mut offset = Vec::with_capacity(n_cells);
    let mut response = Vec::with_capacity(n_cells);
    let mut cell_random = Vec::with_capacity(n_cells);
    let year_pos = |y: i32| years.binary_search(&y).expect("year of a usable cell");
    let phi = layout.block(BlockKind::Monthly).map(|b| b.start);
    let theta = layout.block(BlockKind::Spatial).map(|b| b.start);
    let v = layout.block(BlockKind::Unstructured).map(|b| b.start);
    for (c, &(i, t)) in cell_index.iter().enumerate() {
        let row = &mut rows[c * p..(c + 1) * p];
        row[0] = 1.0;
        for (term, (eval, s)) in terms.iter().zip(evaluators.iter().zip(&series)) {
            let vals = eval
                .row(&s[i * nm..(i + 1) * nm], t)
                .expect("usable rows have full history");
            row[term.columns.clone()].copy_from_slice(&vals);
        }
        offset.push(log_expected[i * nm + t]);
        response.push(cases.count(i, t) as f64);
        let m = cases.month(t);
        let yk = year_pos(m.year);
        cell_random.push([
            phi.map_or(NONE, |s| s + i * MONTHS_PER_YEAR + m.month0()),
            theta.map_or(NONE, |s| s + yk * nr + i),
            v.map_or(NONE, |s| s + yk * nr + i),
        ]);
    }
    let design = DMatrix::from_row_slice(n_cells, p, &rows);
    let log_fact = response.iter().map(|y| ln_gamma(y + 1.0)).collect();
    let block_q: Vec<Option<SparseSym>> = layout
        .blocks
        .iter()
        .map(|b| b.structure.as_ref().map(|s| s.q.clone()))
        .collect();
    let plan = build_plan(&layout, &cell_random, &block_q);

    Ok(AssembledModel {
        spec: spec.clone(),
        family: Family::NegativeBinomial,
        design,
        offset,
        response,
        cell_index,
        layout,
        terms,
        regions: cases.regions().to_vec(),
        first_month: cases.first_month(),
        n_months: nm,
        train: data.train,
        years,
        car_eigenvalues,
        spatial_base,
        evaluators,
        series,
        log_expected,
        rows,
        cell_random,
        log_fact,
        block_q,
        plan,
    })
}

fn build_plan(
    layout: &LatentLayout,
    cell_random: &[[usize; 3]],
    block_q: &[Option<SparseSym>],
) -> HessianPlan {
    let p = layout.n_fixed();
    let dim = layout.dim;
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for j in 0..p {
        for k in 0..=j {
            pairs.push((j, k));
        }
    }
    for (b, q) in layout.blocks.iter().zip(block_q) {
        if let Some(q) = q {
            pairs.extend(q.iter().map(|(i, j, _)| (b.start + i, b.start + j)));
        }
    }
    let mut has_data = vec![false; dim];
    let mut seen_pairs = std::collections::BTreeSet::new();
    for r in cell_random {
        let present: Vec<usize> = r.iter().copied().filter(|&k| k != NONE).collect();
        for (a, &ra) in present.iter().enumerate() {
            has_data[ra] = true;
            for &rb in &present[..a] {
                seen_pairs.insert((ra.max(rb), ra.min(rb)));
            }
        }
    }
    for r in p..dim {
        if has_data[r] {
            pairs.extend((0..p).map(|j| (r, j)));
        }
    }
    pairs.extend(seen_pairs.iter().copied());
    let pattern = SparseSym::pattern(dim, pairs);
    let slot = |i: usize, j: usize| pattern.slot(i, j).expect("pattern entry");

    let mut fixed = vec![NONE; p * p];
    for j in 0..p {
        for k in 0..=j {
            fixed[j * p + k] = slot(j, k);
        }
    }
    let mut rand_fixed = vec![NONE; (dim - p) * p];
    for r in p..dim {
        if has_data[r] {
            for j in 0..p {
                rand_fixed[(r - p) * p + j] = slot(r, j);
            }
        }
    }
    let cell = cell_random
        .iter()
        .map(|r| {
            let s = |a: usize, b: usize| {
                if r[a] == NONE || r[b] == NONE {
                    NONE
                } else {
                    slot(r[a], r[b])
                }
            };
            [s(0, 0), s(1, 1), s(2, 2), s(0, 1), s(0, 2), s(1, 2)]
        })
        .collect();
    let prior = layout
        .blocks
        .iter()
        .zip(block_q)
        .map(|(b, q)| match q {
            Some(q) => q
                .iter()
                .map(|(i, j, v)| (slot(b.start + i, b.start + j), v))
                .collect(),
            None => Vec::new(),
        })
        .collect();
    let diag = (0..dim).map(|k| slot(k, k)).collect();
    HessianPlan {
        pattern,
        fixed,
        rand_fixed,
        cell,
        prior,
        diag,
    }
}

/// Per-cell likelihood derivatives in the linear predictor.
pub struct LikelihoodTerms {
    pub value: f64,
    pub d1: Vec<f64>,
    /// Negative second derivatives (non-negative curvature weights).
    pub w: Vec<f64>,
}

impl AssembledModel {
    pub fn n_cells(&self) -> usize {
        self.response.len()
    }

    pub fn dim(&self) -> usize {
        self.layout.dim
    }

    pub fn n_fixed(&self) -> usize {
        self.layout.n_fixed()
    }

    pub fn with_family(mut self, family: Family) -> Self {
        self.family = family;
        self
    }

    /// Replaces the response (e.g. with Gaussian observations in tests).
    pub fn with_response(mut self, response: Vec<f64>) -> Self {
        assert_eq!(response.len(), self.n_cells());
        self.log_fact = response
            .iter()
            .map(|y| if *y >= 0.0 { ln_gamma(y + 1.0) } else { 0.0 })
            .collect();
        self.response = response;
        self
    }

    /// Same model with all expected counts multiplied by `c`.
    pub fn with_scaled_offset(mut self, c: f64) -> Self {
        let l = c.ln();
        self.offset.iter_mut().for_each(|o| *o += l);
        self.log_expected.iter_mut().for_each(|o| *o += l);
        self
    }

    pub fn month_index(&self, m: Month) -> Option<usize> {
        let k = month_offset(self.first_month, m);
        (k >= 0 && (k as usize) < self.n_months).then_some(k as usize)
    }

    pub fn month(&self, t: usize) -> Month {
        self.first_month.offset(t as i64)
    }

    pub fn log_expected(&self, region: usize, t: usize) -> f64 {
        self.log_expected[region * self.n_months + t]
    }

    /// Fixed-effect design row for any panel cell with full lag history.
    /// Reads covariates only at lags `t - lag_max ..= t - lag_min`.
    pub fn design_row(&self, region: usize, t: usize) -> Option<Vec<f64>> {
        let mut row = vec![0.0; self.n_fixed()];
        row[0] = 1.0;
        let nm = self.n_months;
        for (term, (eval, s)) in self.terms.iter().zip(self.evaluators.iter().zip(&self.series)) {
            let vals = eval.row(&s[region * nm..(region + 1) * nm], t)?;
            row[term.columns.clone()].copy_from_slice(&vals);
        }
        Some(row)
    }

    pub fn phi_index(&self, region: usize, month0: usize) -> Option<usize> {
        self.layout
            .block(BlockKind::Monthly)
            .map(|b| b.start + region * MONTHS_PER_YEAR + month0)
    }

    pub fn theta_index(&self, region: usize, year: i32) -> Option<usize> {
        let k = self.years.binary_search(&year).ok()?;
        self.layout
            .block(BlockKind::Spatial)
            .map(|b| b.start + k * self.regions.len() + region)
    }

    pub fn v_index(&self, region: usize, year: i32) -> Option<usize> {
        let k = self.years.binary_search(&year).ok()?;
        self.layout
            .block(BlockKind::Unstructured)
            .map(|b| b.start + k * self.regions.len() + region)
    }

    // -- hyperparameters ---------------------------------------------------

    pub fn has_monthly(&self) -> bool {
        self.layout.block(BlockKind::Monthly).is_some()
    }

    pub fn has_spatial(&self) -> bool {
        self.layout.block(BlockKind::Spatial).is_some()
    }

    pub fn is_proper_car(&self) -> bool {
        self.layout
            .block(BlockKind::Spatial)
            .is_some_and(|b| b.proper_offset)
    }

    pub fn initial_hyper(&self) -> HyperParams {
        HyperParams {
            log_kappa: 0.0,
            log_sigma2_phi: self.has_monthly().then_some(0.0),
            log_tau_theta: self.has_spatial().then_some(0.0),
            log_tau_v: self.layout.block(BlockKind::Unstructured).map(|_| 0.0),
            log_d: self
                .is_proper_car()
                .then(|| self.spec.fixed_d.unwrap_or(1.0).ln()),
        }
    }

    fn d_is_free(&self) -> bool {
        self.is_proper_car() && self.spec.fixed_d.is_none()
    }

    /// Names of the free (optimized) log hyperparameters, in vector order.
    pub fn free_hyper_names(&self) -> Vec<&'static str> {
        let h = self.initial_hyper();
        let mut out = vec!["log_kappa"];
        if h.log_sigma2_phi.is_some() {
            out.push("log_sigma2_phi");
        }
        if h.log_tau_theta.is_some() {
            out.push("log_tau_theta");
        }
        if h.log_tau_v.is_some() {
            out.push("log_tau_v");
        }
        if self.d_is_free() {
            out.push("log_d");
        }
        out
    }

    pub fn free_from_hyper(&self, h: &HyperParams) -> Vec<f64> {
        let mut out = vec![h.log_kappa];
        out.extend(h.log_sigma2_phi);
        out.extend(h.log_tau_theta);
        out.extend(h.log_tau_v);
        if self.d_is_free() {
            out.extend(h.log_d);
        }
        out
    }

    pub fn hyper_from_free(&self, v: &[f64]) -> HyperParams {
        let mut h = self.initial_hyper();
        let mut it = v.iter().copied();
        h.log_kappa = it.next().expect("kappa");
        if h.log_sigma2_phi.is_some() {
            h.log_sigma2_phi = it.next();
        }
        if h.log_tau_theta.is_some() {
            h.log_tau_theta = it.next();
        }
        if h.log_tau_v.is_some() {
            h.log_tau_v = it.next();
        }
        if self.d_is_free() {
            h.log_d = it.next();
        }
        h
    }

    /// Hyperprior over the free hyperparameters.
    pub fn hyper_log_prior(&self, h: &HyperParams) -> f64 {
        let mut lp = log_precision_prior(h.log_kappa);
        if let Some(s) = h.log_sigma2_phi {
            lp += log_precision_prior(-s);
        }
        if let Some(t) = h.log_tau_theta {
            lp += log_precision_prior(t);
        }
        if let Some(t) = h.log_tau_v {
            lp += log_precision_prior(t);
        }
        if self.d_is_free() {
            lp += log_precision_prior(h.log_d.expect("d"));
        }
        lp
    }

    // -- latent field --------------------------------------------------------

    fn check_dim(&self, x: &[f64]) -> Result<(), ModelError> {
        if x.len() != self.dim() {
            return Err(ModelError::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Linear predictor per cell (offset included).
    pub fn eta(&self, x: &[f64]) -> Vec<f64> {
        let p = self.n_fixed();
        (0..self.n_cells())
            .map(|c| {
                let row = &self.rows[c * p..(c + 1) * p];
                let mut e = self.offset[c] + row.iter().zip(&x[..p]).map(|(a, b)| a * b).sum::<f64>();
                for &r in &self.cell_random[c] {
                    if r != NONE {
                        e += x[r];
                    }
                }
                e
            })
            .collect()
    }

    #[inline]
    fn cell_terms(&self, c: usize, eta: f64, kappa: f64) -> (f64, f64, f64) {
        match self.family {
            Family::NegativeBinomial => nb_eta(self.response[c], eta, kappa, self.log_fact[c]),
            Family::Gaussian => gaussian_eta(self.response[c], eta, kappa),
        }
    }

    /// Log likelihood of one cell at linear predictor `eta`.
    pub fn cell_log_likelihood(&self, c: usize, eta: f64, kappa: f64) -> f64 {
        self.cell_terms(c, eta, kappa).0
    }

    pub fn log_likelihood(&self, eta: &[f64], h: &HyperParams) -> f64 {
        let kappa = h.kappa();
        eta.iter()
            .enumerate()
            .map(|(c, &e)| self.cell_terms(c, e, kappa).0)
            .sum()
    }

    pub fn likelihood_terms(&self, eta: &[f64], h: &HyperParams) -> LikelihoodTerms {
        let kappa = h.kappa();
        let n = self.n_cells();
        let (mut value, mut d1, mut w) = (0.0, Vec::with_capacity(n), Vec::with_capacity(n));
        for (c, &e) in eta.iter().enumerate() {
            let (l, a, b) = self.cell_terms(c, e, kappa);
            value += l;
            d1.push(a);
            w.push(-b);
        }
        LikelihoodTerms { value, d1, w }
    }

    fn block_multiplier(&self, b: &LatentBlock, h: &HyperParams) -> f64 {
        h.multiplier(b.structure.as_ref().expect("structured").multiplier_role)
    }

    /// Gaussian log prior of the latent field, normalizing constants included
    /// (intrinsic blocks are normalized on their constraint subspace).
    pub fn latent_log_prior(&self, x: &[f64], h: &HyperParams) -> f64 {
        let ln2pi = (2.0 * PI).ln();
        let mut lp = 0.0;
        for (b, q) in self.layout.blocks.iter().zip(&self.block_q) {
            let xb = &x[b.range()];
            match q {
                None => {
                    lp += xb
                        .iter()
                        .map(|v| {
                            -0.5 * (ln2pi + FIXED_EFFECT_VARIANCE.ln())
                                - 0.5 * v * v / FIXED_EFFECT_VARIANCE
                        })
                        .sum::<f64>();
                }
                Some(q) => {
                    let m = self.block_multiplier(b, h);
                    let s = b.structure.as_ref().unwrap();
                    let rank = s.rank() as f64;
                    let mut quad = q.quad_form(xb);
                    let log_det = if b.proper_offset {
                        let d = h.d().expect("d");
                        quad += d * xb.iter().map(|v| v * v).sum::<f64>();
                        b.copies as f64 * self.car_eigenvalues.iter().map(|l| (l + d).ln()).sum::<f64>()
                    } else {
                        b.log_pdet
                    };
                    lp += -0.5 * rank * ln2pi + 0.5 * rank * m.ln() + 0.5 * log_det - 0.5 * m * quad;
                }
            }
        }
        lp
    }

    /// `Q(h) x` for the latent prior precision.
    pub fn prior_precision_mul(&self, x: &[f64], h: &HyperParams) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for (b, q) in self.layout.blocks.iter().zip(&self.block_q) {
            let r = b.range();
            match q {
                None => {
                    for k in r {
                        out[k] = x[k] / FIXED_EFFECT_VARIANCE;
                    }
                }
                Some(q) => {
                    let m = self.block_multiplier(b, h);
                    let qx = q.mul_vec(&x[r.clone()]);
                    let d = if b.proper_offset { h.d().expect("d") } else { 0.0 };
                    for (k, v) in r.zip(qx) {
                        out[k] = m * (v + d * x[k]);
                    }
                }
            }
        }
        out
    }

    /// Joint log posterior: likelihood + latent prior + hyperprior.
    pub fn joint_log_posterior(&self, x: &[f64], h: &HyperParams) -> Result<f64, ModelError> {
        self.check_dim(x)?;
        let eta = self.eta(x);
        Ok(self.log_likelihood(&eta, h) + self.latent_log_prior(x, h) + self.hyper_log_prior(h))
    }

    /// Gradient from precomputed likelihood derivatives.
    pub fn gradient_from(&self, x: &[f64], d1: &[f64], h: &HyperParams) -> Vec<f64> {
        let p = self.n_fixed();
        let mut g: Vec<f64> = self.prior_precision_mul(x, h).iter().map(|v| -v).collect();
        for (c, &d) in d1.iter().enumerate() {
            let row = &self.rows[c * p..(c + 1) * p];
            for j in 0..p {
                g[j] += d * row[j];
            }
            for &r in &self.cell_random[c] {
                if r != NONE {
                    g[r] += d;
                }
            }
        }
        g
    }

    pub fn gradient(&self, x: &[f64], h: &HyperParams) -> Result<Vec<f64>, ModelError> {
        self.check_dim(x)?;
        let t = self.likelihood_terms(&self.eta(x), h);
        Ok(self.gradient_from(x, &t.d1, h))
    }

    /// Sparsity pattern shared by every negative Hessian of this model.
    pub fn hessian_pattern(&self) -> &SparseSym {
        &self.plan.pattern
    }

    /// Values (in pattern slot order) of `A^T W A + Q(h)`.
    pub fn neg_hessian_values(&self, w: &[f64], h: &HyperParams) -> Vec<f64> {
        let plan = &self.plan;
        let p = self.n_fixed();
        let mut vals = vec![0.0; plan.pattern.nnz()];
        let mut xtwx = vec![0.0; p * p];
        for (c, &wc) in w.iter().enumerate() {
            let row = &self.rows[c * p..(c + 1) * p];
            for j in 0..p {
                let a = wc * row[j];
                for k in 0..=j {
                    xtwx[j * p + k] += a * row[k];
                }
            }
            let rnd = &self.cell_random[c];
            for &r in rnd {
                if r != NONE {
                    let base = (r - p) * p;
                    for j in 0..p {
                        vals[plan.rand_fixed[base + j]] += wc * row[j];
                    }
                }
            }
            for &s in &plan.cell[c] {
                if s != NONE {
                    vals[s] += wc;
                }
            }
        }
        for j in 0..p {
            for k in 0..=j {
                vals[plan.fixed[j * p + k]] += xtwx[j * p + k];
            }
            vals[plan.diag[j]] += 1.0 / FIXED_EFFECT_VARIANCE;
        }
        for (bi, b) in self.layout.blocks.iter().enumerate() {
            if b.structure.is_none() {
                continue;
            }
            let m = self.block_multiplier(b, h);
            for &(s, q) in &plan.prior[bi] {
                vals[s] += m * q;
            }
            if b.proper_offset {
                let md = m * h.d().expect("d");
                for k in b.range() {
                    vals[plan.diag[k]] += md;
                }
            }
        }
        vals
    }

    /// Negative Hessian of the joint log posterior in the latent field.
    pub fn neg_hessian(&self, x: &[f64], h: &HyperParams) -> Result<SparseSym, ModelError> {
        self.check_dim(x)?;
        let t = self.likelihood_terms(&self.eta(x), h);
        let mut m = self.plan.pattern.clone();
        m.values_mut().copy_from_slice(&self.neg_hessian_values(&t.w, h));
        Ok(m)
    }

    /// Prior precision `Q(h)` on the Hessian pattern.
    pub fn prior_precision(&self, h: &HyperParams) -> SparseSym {
        let mut m = self.plan.pattern.clone();
        let zeros = vec![0.0; self.n_cells()];
        m.values_mut().copy_from_slice(&self.neg_hessian_values(&zeros, h));
        m
    }

    /// Starting latent vector: intercept at the log crude rate, zeros elsewhere.
    pub fn initial_latent(&self) -> Vec<f64> {
        let mut x = vec![0.0; self.dim()];
        x[0] = match self.family {
            Family::NegativeBinomial => {
                let y: f64 = self.response.iter().sum();
                let e: f64 = self.offset.iter().map(|o| o.exp()).sum();
                ((y.max(0.5)) / e).ln()
            }
            Family::Gaussian => mean(
                &self
                    .response
                    .iter()
                    .zip(&self.offset)
                    .map(|(y, o)| y - o)
                    .collect::<Vec<_>>(),
            ),
        };
        x
    }

    /// Random latent indices `[phi, theta, v]` of a cell (`usize::MAX` when
    /// absent).
    pub fn cell_random(&self, c: usize) -> [usize; 3] {
        self.cell_random[c]
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::panel::{CasePanel, CovariatePanel, ExpectedPanel, Month, MonthWindow};
    use crate::structures::adjacency_from_neighbor_list;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal, Poisson};

    pub(crate) struct Fixture {
        pub cases: CasePanel,
        pub expected: ExpectedPanel,
        pub covs: Vec<CovariatePanel>,
        pub prox: ProximityMatrix,
        pub train: MonthWindow,
    }

    pub(crate) fn fixture(nr: usize, nm: usize, seed: u64) -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let regions: Vec<String> = (0..nr).map(|i| format!("R{i}")).collect();
        let first = Month::new(2000, 1).unwrap();
        let pairs: Vec<(String, String)> = (0..nr)
            .map(|i| (regions[i].clone(), regions[(i + 1) % nr].clone()))
            .collect();
        let prox = adjacency_from_neighbor_list(&pairs, &regions).unwrap();
        let normal = Normal::new(0.0, 1.0).unwrap();
        let x: Vec<f64> = (0..nr * nm).map(|_| 20.0 + 5.0 * normal.sample(&mut rng)).collect();
        let z: Vec<f64> = (0..nr * nm).map(|_| normal.sample(&mut rng)).collect();
        let e: Vec<f64> = (0..nr * nm).map(|_| rng.random_range(2.0..8.0)).collect();
        let counts: Vec<u64> = e
            .iter()
            .map(|&m| Poisson::new(m).unwrap().sample(&mut rng) as u64)
            .collect();
        let cases = CasePanel::new(regions.clone(), first, nm, counts).unwrap();
        let expected = ExpectedPanel::from_values(nr, nm, e).unwrap();
        let covs = vec![
            CovariatePanel::new("rain", nr, nm, x).unwrap(),
            CovariatePanel::new("ndvi", nr, nm, z).unwrap(),
        ];
        let train = MonthWindow::new(first, first.offset(nm as i64 - 1)).unwrap();
        Fixture {
            cases,
            expected,
            covs,
            prox,
            train,
        }
    }

    pub(crate) fn build(f: &Fixture, spec: &ModelSpec) -> AssembledModel {
        assemble(
            spec,
            &ModelData {
                cases: &f.cases,
                expected: &f.expected,
                covariates: &f.covs,
                proximity: Some(&f.prox),
                train: f.train,
            },
        )
        .unwrap()
    }

    fn spec(spatial: SpatialStructure, basis: BasisKind, covs: &[&str]) -> ModelSpec {
        ModelSpec::new(
            "m",
            basis,
            spatial,
            spatial.needs_proximity().then_some(ProximityKind::Neighbor),
            covs.iter().map(|s| s.to_string()).collect(),
        )
    }

    #[test]
    fn nb_anchors() {
        assert!((nb_log_pmf(0.0, 1.0, 1.0).unwrap() + 2f64.ln()).abs() < 1e-12);
        let poisson = 3.0 * 2f64.ln() - 2.0 - 6f64.ln();
        assert!((nb_log_pmf(3.0, 2.0, 1e8).unwrap() - poisson).abs() < 1e-6);
        let (_, d1, _) = nb_log_pmf_eta(4.0, 4f64.ln(), 2.5);
        assert_eq!(d1, 0.0);
        assert!(nb_log_pmf(1.0, f64::NAN, 1.0).is_err());
        assert!(nb_log_pmf(1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn nb_derivatives_match_differences() {
        for &(y, eta, k) in &[(0.0, 0.3, 1.7), (7.0, 1.2, 0.4), (120.0, 4.0, 30.0)] {
            let (_, d1, d2) = nb_log_pmf_eta(y, eta, k);
            let h = 1e-5;
            let f = |e: f64| nb_log_pmf_eta(y, e, k).0;
            let fd1 = (f(eta + h) - f(eta - h)) / (2.0 * h);
            let fd2 = (f(eta + h) - 2.0 * f(eta) + f(eta - h)) / (h * h);
            assert!((fd1 - d1).abs() < 1e-6 * d1.abs().max(1.0));
            assert!((fd2 - d2).abs() < 1e-3 * d2.abs().max(1.0));
        }
    }

    #[test]
    fn null_model_layout() {
        let f = fixture(2, 24, 1);
        let m = build(&f, &ModelSpec::null("null"));
        assert_eq!(m.design.ncols(), 1);
        assert_eq!(m.dim(), 1);
        assert_eq!(m.n_cells(), 48);
        assert_eq!(m.free_hyper_names(), vec!["log_kappa"]);
        let h = m.initial_hyper();
        let x = vec![0.0];
        let direct: f64 = (0..48)
            .map(|c| {
                let (i, t) = m.cell_index[c];
                nb_log_pmf(f.cases.count(i, t) as f64, f.expected.get(i, t), 1.0).unwrap()
            })
            .sum();
        let prior = -0.5 * ((2.0 * PI).ln() + FIXED_EFFECT_VARIANCE.ln()) + m.hyper_log_prior(&h);
        assert!((m.joint_log_posterior(&x, &h).unwrap() - direct - prior).abs() < 1e-9);
    }

    #[test]
    fn six_linear_covariates_layout() {
        let mut f = fixture(4, 40, 2);
        for k in 0..4 {
            let mut c = f.covs[0].clone();
            c.values_mut().iter_mut().enumerate().for_each(|(i, v)| *v += (i * (k + 3) % 7) as f64);
            f.covs.push(CovariatePanel::new(format!("c{k}"), 4, 40, c.values().to_vec()).unwrap());
        }
        let names = ["rain", "ndvi", "c0", "c1", "c2", "c3"];
        let m = build(&f, &spec(SpatialStructure::Icar, BasisKind::Linear, &names));
        assert_eq!(m.n_fixed(), 1 + 18);
        let monthly = m.layout.block(BlockKind::Monthly).unwrap();
        assert_eq!(monthly.size, 12 * 4);
        let spatial = m.layout.block(BlockKind::Spatial).unwrap();
        assert_eq!(spatial.size, 4 * m.years.len());
        assert_eq!(m.dim(), 19 + 48 + 4 * m.years.len());
        assert_eq!(m.n_cells(), 4 * (40 - 12));
        let nl = build(&f, &spec(SpatialStructure::Icar, BasisKind::Nonlinear, &names));
        assert_eq!(nl.n_fixed(), 1 + 54);
    }

    #[test]
    fn independent_structure_is_identity() {
        let f = fixture(4, 40, 3);
        let m = build(&f, &spec(SpatialStructure::Independent, BasisKind::Linear, &["rain"]));
        let b = m.layout.block(BlockKind::Spatial).unwrap();
        let s = b.structure.as_ref().unwrap();
        assert_eq!(s.q.to_dense(), DMatrix::identity(b.size, b.size));
        assert!(s.constraints.is_empty());
        assert_eq!(m.layout.constraints.len(), 4);
    }

    #[test]
    fn autoregressive_term_needs_positive_lag() {
        let f = fixture(3, 30, 4);
        let mut s = spec(SpatialStructure::Independent, BasisKind::Linear, &[AUTOREGRESSIVE_TERM]);
        s.lag_window = LagWindow::new(0, 12).unwrap();
        let r = assemble(
            &s,
            &ModelData {
                cases: &f.cases,
                expected: &f.expected,
                covariates: &f.covs,
                proximity: None,
                train: f.train,
            },
        );
        assert_eq!(r.unwrap_err(), ModelError::AutoregressiveLagZero);
    }

    fn random_point(m: &AssembledModel, rng: &mut ChaCha8Rng) -> (Vec<f64>, HyperParams) {
        let x: Vec<f64> = (0..m.dim()).map(|_| rng.random_range(-0.3..0.3)).collect();
        let free: Vec<f64> = m
            .free_hyper_names()
            .iter()
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        (x, m.hyper_from_free(&free))
    }

    pub(crate) fn check_derivatives(m: &AssembledModel, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, h) = random_point(m, &mut rng);
        let f = |x: &[f64]| m.joint_log_posterior(x, &h).unwrap();
        let g = m.gradient(&x, &h).unwrap();
        let step = 1e-5;
        let scale = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let mut xp = x.clone();
        for k in 0..m.dim() {
            xp[k] = x[k] + step;
            let up = f(&xp);
            xp[k] = x[k] - step;
            let dn = f(&xp);
            xp[k] = x[k];
            let fd = (up - dn) / (2.0 * step);
            assert!(
                (fd - g[k]).abs() <= 1e-6 * scale.max(1.0),
                "gradient {k}: fd {fd} vs {}",
                g[k]
            );
        }
        let hess = m.neg_hessian(&x, &h).unwrap().to_dense();
        let hscale = hess.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for k in 0..m.dim() {
            xp[k] = x[k] + step;
            let gu = m.gradient(&xp, &h).unwrap();
            xp[k] = x[k] - step;
            let gd = m.gradient(&xp, &h).unwrap();
            xp[k] = x[k];
            for j in 0..m.dim() {
                let fd = -(gu[j] - gd[j]) / (2.0 * step);
                assert!(
                    (fd - hess[(j, k)]).abs() <= 1e-6 * hscale,
                    "hessian ({j},{k}): fd {fd} vs {}",
                    hess[(j, k)]
                );
            }
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let f = fixture(4, 40, 5);
        for (s, spatial) in [
            SpatialStructure::Icar,
            SpatialStructure::ProperCar,
            SpatialStructure::Bym,
            SpatialStructure::Independent,
        ]
        .into_iter()
        .enumerate()
        {
            let m = build(&f, &spec(spatial, BasisKind::Nonlinear, &["rain", AUTOREGRESSIVE_TERM]));
            check_derivatives(&m, s as u64);
        }
    }

    #[test]
    fn hessian_pattern_is_likelihood_plus_prior() {
        let f = fixture(4, 40, 6);
        let m = build(&f, &spec(SpatialStructure::Bym, BasisKind::Linear, &["rain"]));
        let h = m.initial_hyper();
        let x = vec![0.0; m.dim()];
        let hess = m.neg_hessian(&x, &h).unwrap().to_dense();
        // Dense A (design + random indicators).
        let mut a = DMatrix::zeros(m.n_cells(), m.dim());
        for c in 0..m.n_cells() {
            for j in 0..m.n_fixed() {
                a[(c, j)] = m.design[(c, j)];
            }
            for r in m.cell_random(c) {
                if r != NONE {
                    a[(c, r)] = 1.0;
                }
            }
        }
        let ata = a.transpose() * &a;
        let q = m.prior_precision(&h).to_dense();
        for i in 0..m.dim() {
            for j in 0..m.dim() {
                let expected = ata[(i, j)] != 0.0 || q[(i, j)] != 0.0;
                assert_eq!(hess[(i, j)] != 0.0, expected, "({i},{j})");
            }
        }
    }

    #[test]
    fn doubling_a_multiplier() {
        let f = fixture(4, 40, 7);
        let m = build(&f, &spec(SpatialStructure::Icar, BasisKind::Linear, &["rain"]));
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (x, h) = random_point(&m, &mut rng);
        let b = m.layout.block(BlockKind::Spatial).unwrap();
        let s = b.structure.as_ref().unwrap();
        let tau = h.tau_theta().unwrap();
        let quad = s.q.quad_form(&x[b.range()]);
        let mut h2 = h;
        h2.log_tau_theta = Some((2.0 * tau).ln());
        let diff = m.latent_log_prior(&x, &h2) - m.latent_log_prior(&x, &h);
        let predicted = 0.5 * s.rank() as f64 * 2f64.ln() - 0.5 * tau * quad;
        assert!((diff - predicted).abs() < 1e-10);
    }

    #[test]
    fn offset_scaling_is_absorbed_by_intercept() {
        let f = fixture(4, 40, 9);
        let m = build(&f, &spec(SpatialStructure::Icar, BasisKind::Linear, &["rain"]));
        let c = 3.7;
        let scaled = m.clone().with_scaled_offset(c);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (x, h) = random_point(&m, &mut rng);
        let mut xs = x.clone();
        xs[0] -= c.ln();
        let a = m.log_likelihood(&m.eta(&x), &h);
        let b = scaled.log_likelihood(&scaled.eta(&xs), &h);
        assert!((a - b).abs() < 1e-10 * a.abs().max(1.0));
    }

    #[test]
    fn design_row_matches_assembled_rows() {
        let f = fixture(3, 30, 11);
        let m = build(&f, &spec(SpatialStructure::Icar, BasisKind::Nonlinear, &["rain", "ndvi"]));
        for c in [0, 5, m.n_cells() - 1] {
            let (i, t) = m.cell_index[c];
            let row = m.design_row(i, t).unwrap();
            for j in 0..m.n_fixed() {
                assert_eq!(row[j], m.design[(c, j)]);
            }
        }
        assert!(m.design_row(0, 5).is_none());
    }

    #[test]
    fn hyper_vector_round_trip() {
        let f = fixture(4, 40, 12);
        let mut s = spec(SpatialStructure::ProperCar, BasisKind::Linear, &["rain"]);
        let m = build(&f, &s);
        assert_eq!(
            m.free_hyper_names(),
            vec!["log_kappa", "log_sigma2_phi", "log_tau_theta", "log_d"]
        );
        let v = vec![0.1, 0.2, 0.3, 0.4];
        assert_eq!(m.free_from_hyper(&m.hyper_from_free(&v)), v);
        s.fixed_d = Some(2.0);
        let m = build(&f, &s);
        assert_eq!(m.free_hyper_names().len(), 3);
        assert!((m.initial_hyper().d().unwrap() - 2.0).abs() < 1e-15);
    }
}
