//! Predictive distributions for months just past the training window, the
//! forecast scores (NRMSE, normalized interval score, absolute percentage
//! error) and the two baseline forecasters.

use nalgebra::{DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::infer::{fit, FitConfig, GaussianApprox, InferError, PosteriorFit, RiskSummary};
use crate::model::{assemble, AssembledModel, HyperParams, ModelData, ModelError, ModelSpec};
use crate::panel::{CasePanel, ExpectedPanel, Month, MonthWindow, RiskPanel};
use crate::stats::{mean, quantile_sorted};

/// Flag emitted instead of a score when the observed RR window is all zero.
pub const UNDEFINED_RR_ZERO: &str = "undefined_rr_zero";

#[derive(Debug, Error)]
pub enum ForecastError {
    #[error("{month} is {horizon} months after the training end; horizons must lie in 1..={lag_min}")]
    Horizon {
        month: Month,
        horizon: i64,
        lag_min: usize,
    },
    #[error("{month} is outside the data panel")]
    OutsidePanel { month: Month },
    #[error("region `{region}` lacks covariate history for {month}")]
    InsufficientHistory { region: String, month: Month },
    #[error("calendar month {month} has fewer than {needed} complete years of history before {before}")]
    NaiveHistory { month: u8, needed: usize, before: Month },
    #[error("the scoring window is empty")]
    EmptyWindow,
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Infer(#[from] InferError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum MetricError {
    #[error("observed relative risks are all zero")]
    UndefinedRrZero,
    #[error("series lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("empty series")]
    Empty,
    #[error("interval limits cross at position {0}")]
    CrossingLimits(usize),
    #[error("non-finite value at position {0}")]
    NonFinite(usize),
}

impl MetricError {
    /// The flag written to score tables, when the error is a flag rather than
    /// a hard failure.
    pub fn flag(self) -> Option<&'static str> {
        matches!(self, MetricError::UndefinedRrZero).then_some(UNDEFINED_RR_ZERO)
    }
}

fn check_pair(obs: &[f64], pred: &[f64]) -> Result<f64, MetricError> {
    if obs.len() != pred.len() {
        return Err(MetricError::LengthMismatch(obs.len(), pred.len()));
    }
    if obs.is_empty() {
        return Err(MetricError::Empty);
    }
    for (k, (a, b)) in obs.iter().zip(pred).enumerate() {
        if !a.is_finite() || !b.is_finite() {
            return Err(MetricError::NonFinite(k));
        }
    }
    let rr_bar = mean(obs);
    if rr_bar <= 0.0 {
        return Err(MetricError::UndefinedRrZero);
    }
    Ok(rr_bar)
}

/// `sqrt(sum (RR - RRhat)^2 / (m * RRbar))`.
pub fn nrmse(observed: &[f64], predicted: &[f64]) -> Result<f64, MetricError> {
    let rr_bar = check_pair(observed, predicted)?;
    let ss: f64 = observed.iter().zip(predicted).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((ss / (observed.len() as f64 * rr_bar)).sqrt())
}

/// Sum over the window of interval width plus `2 / (1 - alpha)`-scaled
/// exceedances (strict inequalities).
pub fn interval_score(observed: &[f64], lower: &[f64], upper: &[f64], alpha: f64) -> Result<f64, MetricError> {
    if lower.len() != upper.len() {
        return Err(MetricError::LengthMismatch(lower.len(), upper.len()));
    }
    check_pair(observed, lower).or_else(|e| match e {
        MetricError::UndefinedRrZero => Ok(0.0),
        e => Err(e),
    })?;
    let c = 2.0 / (1.0 - alpha);
    let mut s = 0.0;
    for (k, ((&rr, &l), &u)) in observed.iter().zip(lower).zip(upper).enumerate() {
        if !u.is_finite() {
            return Err(MetricError::NonFinite(k));
        }
        if l > u {
            return Err(MetricError::CrossingLimits(k));
        }
        s += u - l;
        if rr < l {
            s += c * (l - rr);
        }
        if rr > u {
            s += c * (rr - u);
        }
    }
    Ok(s)
}

/// [`interval_score`] divided by `m * RRbar`.
pub fn normalized_interval_score(
    observed: &[f64],
    lower: &[f64],
    upper: &[f64],
    alpha: f64,
) -> Result<f64, MetricError> {
    let raw = interval_score(observed, lower, upper, alpha)?;
    let rr_bar = check_pair(observed, lower)?;
    Ok(raw / (observed.len() as f64 * rr_bar))
}

/// `100 |RR - RRhat| / RR` per cell; `None` where `RR = 0`.
pub fn absolute_percentage_error(observed: &[f64], predicted: &[f64]) -> Vec<Option<f64>> {
    observed
        .iter()
        .zip(predicted)
        .map(|(&rr, &p)| (rr > 0.0).then(|| 100.0 * (rr - p).abs() / rr))
        .collect()
}

/// Empirical summary with limits at `alpha / 2` and `1 - alpha / 2`.
pub fn summarize_at(values: &mut [f64], alpha: f64) -> RiskSummary {
    let m = mean(values);
    values.sort_by(f64::total_cmp);
    RiskSummary {
        mean: m,
        lo: quantile_sorted(values, alpha / 2.0),
        hi: quantile_sorted(values, 1.0 - alpha / 2.0),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForecastConfig {
    pub n_samples: usize,
    pub alpha: f64,
    pub seed: u64,
    /// Reuse the last fitted year's spatial effect instead of a prior draw.
    pub carry_forward_spatial: bool,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        Self {
            n_samples: 1000,
            alpha: 0.05,
            seed: 0,
            carry_forward_spatial: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastRow {
    pub region: String,
    pub month: Month,
    pub horizon: usize,
    pub expected: f64,
    /// Latent-scale relative risk `exp(eta) / E`.
    pub rr: RiskSummary,
    /// Predictive counts including negative-binomial noise.
    pub cases: RiskSummary,
}

impl ForecastRow {
    /// Count interval on the RR scale (`cases / E`).
    pub fn count_rr_interval(&self) -> (f64, f64) {
        (self.cases.lo / self.expected, self.cases.hi / self.expected)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastPanel {
    pub alpha: f64,
    pub test: MonthWindow,
    /// Region-major, months ascending.
    pub rows: Vec<ForecastRow>,
}

impl ForecastPanel {
    pub fn region_rows(&self, region: &str) -> impl Iterator<Item = &ForecastRow> + '_ {
        let region = region.to_string();
        self.rows.iter().filter(move |r| r.region == region)
    }
}

/// Mixes a seed with integer keys (splitmix64 finalizer per key).
pub fn derive_seed(seed: u64, keys: &[i64]) -> u64 {
    let mut z = seed;
    for &k in keys {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(k as u64);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Zero-mean draws from a single year's spatial prior at fixed
/// hyperparameters (constrained directions removed).
struct SpatialPrior {
    modes: Vec<(f64, DVector<f64>)>,
    tau_v: Option<f64>,
}

impl SpatialPrior {
    fn new(model: &AssembledModel, h: &HyperParams) -> Option<Self> {
        let base = model.spatial_base.as_ref()?;
        let mut q = base.q.to_dense();
        if model.is_proper_car() {
            let d = h.d().expect("proper CAR has d");
            for k in 0..q.nrows() {
                q[(k, k)] += d;
            }
        }
        let tau = h.tau_theta().expect("spatial block has tau");
        let eig = SymmetricEigen::new(q);
        let top = eig.eigenvalues.iter().copied().fold(0.0f64, f64::max);
        let modes = eig
            .eigenvalues
            .iter()
            .enumerate()
            .filter(|(_, l)| **l > 1e-9 * top)
            .map(|(k, l)| (1.0 / (tau * l).sqrt(), eig.eigenvectors.column(k).into_owned()))
            .collect();
        Some(Self {
            modes,
            tau_v: h.tau_v(),
        })
    }

    /// Returns `(theta, v)` draws.
    fn draw(&self, rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<f64>) {
        let mut theta = vec![0.0; n];
        for (s, u) in &self.modes {
            let z: f64 = rng.sample(StandardNormal);
            for (t, ui) in theta.iter_mut().zip(u.iter()) {
                *t += s * z * ui;
            }
        }
        let v = match self.tau_v {
            Some(tv) => (0..n)
                .map(|_| rng.sample::<f64, _>(StandardNormal) / tv.sqrt())
                .collect(),
            None => vec![0.0; n],
        };
        (theta, v)
    }
}

/// Draws `y ~ NB(mu, kappa)` as a gamma–Poisson mixture.
pub fn draw_negative_binomial(rng: &mut ChaCha8Rng, mu: f64, kappa: f64) -> f64 {
    if !(mu > 0.0) {
        return 0.0;
    }
    let lambda = match Gamma::new(kappa, mu / kappa) {
        Ok(g) => g.sample(rng),
        Err(_) => mu,
    };
    if !(lambda > 0.0) {
        return 0.0;
    }
    Poisson::new(lambda).map(|p| p.sample(rng)).unwrap_or(lambda.round())
}

/// Predictive distributions for every region and month of `test`, which
/// must start within `lag_min` months after the training end.
pub fn predict(
    fit: &PosteriorFit,
    model: &AssembledModel,
    test: MonthWindow,
    cfg: &ForecastConfig,
) -> Result<ForecastPanel, ForecastError> {
    let lag_min = model.spec.lag_window.lag_min;
    let months: Vec<Month> = test.months().collect();
    let mut steps = Vec::with_capacity(months.len());
    for &m in &months {
        let horizon = m.ordinal() - model.train.last.ordinal();
        if horizon < 1 || horizon > lag_min as i64 {
            return Err(ForecastError::Horizon {
                month: m,
                horizon,
                lag_min,
            });
        }
        let t = model
            .month_index(m)
            .ok_or(ForecastError::OutsidePanel { month: m })?;
        steps.push((m, horizon as usize, t));
    }
    let g = GaussianApprox::new(fit)?;
    let n = cfg.n_samples.max(1);
    let samples = g.sample(n, cfg.seed);
    let h = &fit.hyper_hat;
    let nr = model.regions.len();

    // Spatial contribution per test year, per sample: `[sample][region]`.
    let prior = SpatialPrior::new(model, h);
    let mut years: Vec<i32> = months.iter().map(|m| m.year).collect();
    years.dedup();
    let mut spatial: Vec<(i32, Vec<Vec<f64>>)> = Vec::new();
    for &year in &years {
        let Some(prior) = &prior else {
            spatial.push((year, vec![vec![0.0; nr]; n]));
            continue;
        };
        let fitted_year = if model.years.binary_search(&year).is_ok() {
            Some(year)
        } else if cfg.carry_forward_spatial {
            model.years.last().copied()
        } else {
            None
        };
        let draws = match fitted_year {
            Some(y) => samples
                .iter()
                .map(|x| {
                    (0..nr)
                        .map(|i| {
                            model.theta_index(i, y).map_or(0.0, |k| x[k])
                                + model.v_index(i, y).map_or(0.0, |k| x[k])
                        })
                        .collect()
                })
                .collect(),
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[1, year as i64]));
                (0..n)
                    .map(|_| {
                        let (t, v) = prior.draw(&mut rng, nr);
                        t.iter().zip(&v).map(|(a, b)| a + b).collect()
                    })
                    .collect()
            }
        };
        spatial.push((year, draws));
    }

    let kappa = h.kappa();
    let nf = model.n_fixed();
    let mut rows = Vec::with_capacity(nr * months.len());
    for i in 0..nr {
        for &(m, horizon, t) in &steps {
            let design = model
                .design_row(i, t)
                .ok_or_else(|| ForecastError::InsufficientHistory {
                    region: model.regions[i].clone(),
                    month: m,
                })?;
            let log_e = model.log_expected(i, t);
            let phi = model.phi_index(i, m.month0());
            let sp = &spatial.iter().find(|(y, _)| *y == m.year).expect("year present").1;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[2, i as i64, m.ordinal()]));
            let mut rr = Vec::with_capacity(n);
            let mut cases = Vec::with_capacity(n);
            for (s, x) in samples.iter().enumerate() {
                let mut eta = log_e + sp[s][i];
                eta += design.iter().zip(&x[..nf]).map(|(a, b)| a * b).sum::<f64>();
                if let Some(k) = phi {
                    eta += x[k];
                }
                rr.push((eta - log_e).exp());
                cases.push(draw_negative_binomial(&mut rng, eta.exp(), kappa));
            }
            rows.push(ForecastRow {
                region: model.regions[i].clone(),
                month: m,
                horizon,
                expected: log_e.exp(),
                rr: summarize_at(&mut rr, cfg.alpha),
                cases: summarize_at(&mut cases, cfg.alpha),
            });
        }
    }
    Ok(ForecastPanel {
        alpha: cfg.alpha,
        test,
        rows,
    })
}

/// Calendar-month mean of observed RR over the last `lookback_years`
/// complete years ending at or before `before`, per region and test month
/// (`[region][month]`).
pub fn naive_monthly_mean(
    history: &RiskPanel,
    before: Month,
    lookback_years: usize,
    test_months: &[Month],
) -> Result<Vec<Vec<f64>>, ForecastError> {
    let last_year = if before.month == 12 { before.year } else { before.year - 1 };
    let first_year = last_year - lookback_years as i32 + 1;
    let mut out = vec![Vec::with_capacity(test_months.len()); history.n_regions()];
    for &m in test_months {
        let idx: Vec<usize> = (first_year..=last_year)
            .filter_map(|y| history.month_index(Month::new(y, m.month).expect("valid month")))
            .collect();
        if idx.len() < lookback_years || lookback_years == 0 {
            return Err(ForecastError::NaiveHistory {
                month: m.month,
                needed: lookback_years,
                before,
            });
        }
        for (i, o) in out.iter_mut().enumerate() {
            o.push(idx.iter().map(|&t| history.get(i, t)).sum::<f64>() / idx.len() as f64);
        }
    }
    Ok(out)
}

/// Fits the intercept-only model on the last `lookback_years` of training
/// and predicts `test` with full predictive uncertainty.
pub fn null_model_forecast(
    cases: &CasePanel,
    expected: &ExpectedPanel,
    train: MonthWindow,
    test: MonthWindow,
    lookback_years: usize,
    fit_cfg: &FitConfig,
    cfg: &ForecastConfig,
) -> Result<(PosteriorFit, ForecastPanel), ForecastError> {
    let first = train
        .last
        .offset(1 - 12 * lookback_years as i64)
        .max_by_ordinal(train.first);
    let window = MonthWindow::new(first, train.last).map_err(|e| ModelError::InvalidSpec(e.to_string()))?;
    let model = assemble(
        &ModelSpec::null("null"),
        &ModelData {
            cases,
            expected,
            covariates: &[],
            proximity: None,
            train: window,
        },
    )?;
    let f = fit(&model, fit_cfg)?;
    let panel = predict(&f, &model, test, cfg)?;
    Ok((f, panel))
}

trait MaxByOrdinal {
    fn max_by_ordinal(self, other: Self) -> Self;
}

impl MaxByOrdinal for Month {
    fn max_by_ordinal(self, other: Self) -> Self {
        if self.ordinal() >= other.ordinal() {
            self
        } else {
            other
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreSet {
    Train,
    Test,
}

impl ScoreSet {
    pub fn label(self) -> &'static str {
        match self {
            ScoreSet::Train => "train",
            ScoreSet::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionScore {
    pub region: String,
    pub set: ScoreSet,
    pub nrmse: Option<f64>,
    pub nis: Option<f64>,
    pub flag: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellError {
    pub region: String,
    pub month: Month,
    pub observed: f64,
    pub predicted: f64,
    pub ape: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoreReport {
    pub regions: Vec<RegionScore>,
    pub cells: Vec<CellError>,
}

/// NRMSE and NIS for one region's window; a zero-RR window yields the flag
/// and no values.
pub fn score_series(
    region: &str,
    set: ScoreSet,
    observed: &[f64],
    mean_rr: &[f64],
    lower: &[f64],
    upper: &[f64],
    alpha: f64,
) -> Result<RegionScore, MetricError> {
    let score = |e: MetricError| -> Result<RegionScore, MetricError> {
        match e.flag() {
            Some(flag) => Ok(RegionScore {
                region: region.to_string(),
                set,
                nrmse: None,
                nis: None,
                flag: Some(flag.to_string()),
            }),
            None => Err(e),
        }
    };
    let nrmse_v = match nrmse(observed, mean_rr) {
        Ok(v) => v,
        Err(e) => return score(e),
    };
    let nis_v = normalized_interval_score(observed, lower, upper, alpha)?;
    Ok(RegionScore {
        region: region.to_string(),
        set,
        nrmse: Some(nrmse_v),
        nis: Some(nis_v),
        flag: None,
    })
}

/// Test-window scores of a forecast against observed RR.
pub fn score_forecast(panel: &ForecastPanel, observed: &RiskPanel, regions: &[String]) -> Result<ScoreReport, ForecastError> {
    if panel.rows.is_empty() {
        return Err(ForecastError::EmptyWindow);
    }
    let mut report = ScoreReport::default();
    for (i, region) in regions.iter().enumerate() {
        let rows: Vec<&ForecastRow> = panel.region_rows(region).collect();
        let mut obs = Vec::with_capacity(rows.len());
        for r in &rows {
            let t = observed
                .month_index(r.month)
                .ok_or(ForecastError::OutsidePanel { month: r.month })?;
            obs.push(observed.get(i, t));
        }
        let mean_rr: Vec<f64> = rows.iter().map(|r| r.rr.mean).collect();
        let lo: Vec<f64> = rows.iter().map(|r| r.rr.lo).collect();
        let hi: Vec<f64> = rows.iter().map(|r| r.rr.hi).collect();
        report
            .regions
            .push(score_series(region, ScoreSet::Test, &obs, &mean_rr, &lo, &hi, panel.alpha)?);
        for ((r, o), ape) in rows.iter().zip(&obs).zip(absolute_percentage_error(&obs, &mean_rr)) {
            report.cells.push(CellError {
                region: region.clone(),
                month: r.month,
                observed: *o,
                predicted: r.rr.mean,
                ape,
            });
        }
    }
    Ok(report)
}

/// Training-window scores from fitted RR summaries (one per model cell).
pub fn score_fitted(
    model: &AssembledModel,
    fitted: &[RiskSummary],
    alpha: f64,
) -> Result<Vec<RegionScore>, ForecastError> {
    let nr = model.regions.len();
    let mut per: Vec<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> = vec![Default::default(); nr];
    for (c, &(i, _)) in model.cell_index.iter().enumerate() {
        let obs = (model.response[c] / model.offset[c].exp()).max(0.0);
        let p = &mut per[i];
        p.0.push(obs);
        p.1.push(fitted[c].mean);
        p.2.push(fitted[c].lo);
        p.3.push(fitted[c].hi);
    }
    per.iter()
        .zip(&model.regions)
        .map(|((o, m, l, u), region)| Ok(score_series(region, ScoreSet::Train, o, m, l, u, alpha)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::{build, fixture};
    use crate::model::BasisKind;
    use crate::structures::{ProximityKind, SpatialStructure};

    #[test]
    fn metric_hand_cases() {
        assert!((nrmse(&[1.0, 3.0], &[2.0, 2.0]).unwrap() - 0.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(nrmse(&[1.0, 3.0], &[1.0, 3.0]).unwrap(), 0.0);
        assert_eq!(nrmse(&[0.0, 0.0], &[1.0, 2.0]), Err(MetricError::UndefinedRrZero));
        let v = normalized_interval_score(&[1.0], &[0.5], &[1.5], 0.05).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
        let raw = interval_score(&[2.0], &[0.5], &[1.5], 0.05).unwrap();
        assert!((raw - (1.0 + 2.0 / 0.95 * 0.5)).abs() < 1e-12);
        let v = normalized_interval_score(&[2.0], &[0.5], &[1.5], 0.05).unwrap();
        assert!((v - raw / 2.0).abs() < 1e-12);
        // Observation on the upper limit carries no penalty.
        let v = normalized_interval_score(&[1.5], &[0.5], &[1.5], 0.05).unwrap();
        assert!((v - 1.0 / 1.5).abs() < 1e-12);
        assert_eq!(
            normalized_interval_score(&[1.0], &[2.0], &[1.0], 0.05),
            Err(MetricError::CrossingLimits(0))
        );
        assert_eq!(
            normalized_interval_score(&[0.0], &[0.0], &[1.0], 0.05).unwrap_err().flag(),
            Some(UNDEFINED_RR_ZERO)
        );
        let ape = absolute_percentage_error(&[2.0, 1.0, 0.0], &[1.5, 1.0, 3.0]);
        assert_eq!(ape, vec![Some(25.0), Some(0.0), None]);
    }

    #[test]
    fn widening_adds_normalized_width() {
        let obs = [1.0, 2.0, 1.5];
        let lo = [0.5, 1.0, 1.0];
        let hi = [1.5, 2.5, 2.0];
        let a = normalized_interval_score(&obs, &lo, &hi, 0.05).unwrap();
        let hi2: Vec<f64> = hi.iter().map(|h| h + 0.3).collect();
        let b = normalized_interval_score(&obs, &lo, &hi2, 0.05).unwrap();
        assert!((b - a - 0.9 / (3.0 * 1.5)).abs() < 1e-12);
    }

    #[test]
    fn scores_ignore_ordering() {
        let obs = [1.0, 2.0, 0.5, 3.0];
        let m = [1.2, 1.7, 0.9, 2.2];
        let lo = [0.5, 1.0, 0.1, 2.5];
        let hi = [1.5, 2.5, 0.8, 3.5];
        let p = [2, 0, 3, 1];
        let perm = |v: &[f64]| p.iter().map(|&k| v[k]).collect::<Vec<_>>();
        assert!((nrmse(&obs, &m).unwrap() - nrmse(&perm(&obs), &perm(&m)).unwrap()).abs() < 1e-12);
        let a = normalized_interval_score(&obs, &lo, &hi, 0.05).unwrap();
        let b = normalized_interval_score(&perm(&obs), &perm(&lo), &perm(&hi), 0.05).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn true_quantiles_score_better_than_shifted_ones() {
        // Log-normal outcomes; true 95% quantiles vs a mis-centered interval.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = 1.959963984540054;
        let (lo, hi) = ((-z * 0.4f64).exp(), (z * 0.4f64).exp());
        let obs: Vec<f64> = (0..10_000)
            .map(|_| (0.4 * rng.sample::<f64, _>(StandardNormal)).exp())
            .collect();
        let n = obs.len();
        let good = normalized_interval_score(&obs, &vec![lo; n], &vec![hi; n], 0.05).unwrap();
        let bad = normalized_interval_score(&obs, &vec![lo * 1.6; n], &vec![hi * 1.6; n], 0.05).unwrap();
        assert!(good < bad);
    }

    fn history() -> RiskPanel {
        // Two regions, 2015-01 .. 2020-12; January of year y has RR = y - 2015.
        let first = Month::new(2015, 1).unwrap();
        let nm: usize = 72;
        let mut v = Vec::new();
        for i in 0..2 {
            for t in 0..nm {
                let m = first.offset(t as i64);
                v.push(if m.month == 1 { (m.year - 2015) as f64 + i as f64 * 10.0 } else { 7.0 });
            }
        }
        RiskPanel::new(2, first, nm, v).unwrap()
    }

    #[test]
    fn naive_mean_uses_last_complete_years() {
        let h = history();
        let before = Month::new(2020, 12).unwrap();
        let test = [Month::new(2021, 1).unwrap(), Month::new(2021, 2).unwrap()];
        let p = naive_monthly_mean(&h, before, 5, &test).unwrap();
        // Januaries 2016..2020 -> 1..5.
        assert_eq!(p[0], vec![3.0, 7.0]);
        assert_eq!(p[1], vec![13.0, 7.0]);
        assert!(naive_monthly_mean(&h, before, 7, &test).is_err());
        // Mid-year cutoff drops the incomplete year.
        let p = naive_monthly_mean(&h, Month::new(2020, 6).unwrap(), 5, &test).unwrap();
        assert_eq!(p[0][0], 2.0);
    }

    /// 4 regions, 2000-01..2003-12, trained through 2003-09.
    fn fitted() -> (AssembledModel, PosteriorFit, crate::model::tests::Fixture) {
        let mut f = fixture(4, 48, 3);
        f.train = MonthWindow::new(f.train.first, Month::new(2003, 9).unwrap()).unwrap();
        let spec = ModelSpec::new(
            "icar",
            BasisKind::Linear,
            SpatialStructure::Icar,
            Some(ProximityKind::Neighbor),
            vec!["rain".into()],
        );
        let m = build(&f, &spec);
        let fit = fit(&m, &FitConfig { restarts: 1, ..FitConfig::default() }).unwrap();
        (m, fit, f)
    }

    fn test_window() -> MonthWindow {
        MonthWindow::new(Month::new(2003, 10).unwrap(), Month::new(2003, 12).unwrap()).unwrap()
    }

    #[test]
    fn horizon_beyond_lag_min_is_rejected() {
        let (m, f, _) = fitted();
        let w = MonthWindow::new(Month::new(2003, 10).unwrap(), Month::new(2004, 1).unwrap()).unwrap();
        assert!(matches!(
            predict(&f, &m, w, &ForecastConfig::default()),
            Err(ForecastError::Horizon { horizon: 4, lag_min: 3, .. })
        ));
    }

    #[test]
    fn forecast_shape_and_order() {
        let (m, f, _) = fitted();
        let p = predict(&f, &m, test_window(), &ForecastConfig::default()).unwrap();
        assert_eq!(p.rows.len(), 12);
        assert_eq!(p.rows[0].horizon, 1);
        assert_eq!(p.rows[2].horizon, 3);
        for r in &p.rows {
            assert!(r.rr.lo <= r.rr.mean && r.rr.mean <= r.rr.hi);
            assert!(r.cases.lo <= r.cases.mean && r.cases.mean <= r.cases.hi);
        }
    }

    #[test]
    fn point_mass_fit_collapses_intervals() {
        let (m, mut f, _) = fitted();
        for v in f.latent_precision.values_mut() {
            *v *= 1e14;
        }
        // 2003 is a fitted year, so no spatial prior draw enters.
        let p = predict(&f, &m, test_window(), &ForecastConfig::default()).unwrap();
        for (k, r) in p.rows.iter().enumerate() {
            let i = k / 3;
            let t = m.month_index(r.month).unwrap();
            let row = m.design_row(i, t).unwrap();
            let mut eta: f64 = row.iter().zip(&f.latent_mode).map(|(a, b)| a * b).sum();
            eta += f.latent_mode[m.phi_index(i, r.month.month0()).unwrap()];
            eta += f.latent_mode[m.theta_index(i, 2003).unwrap()];
            let plug = eta.exp();
            assert!((r.rr.lo - plug).abs() < 1e-6 * plug && (r.rr.hi - plug).abs() < 1e-6 * plug);
        }
    }

    #[test]
    fn forecast_ignores_data_after_the_cutoff() {
        let (m, f, fx) = fitted();
        let cfg = ForecastConfig::default();
        let base = predict(&f, &m, test_window(), &cfg).unwrap();
        let mut poisoned = fx;
        let nm = poisoned.cases.n_months();
        for i in 0..4 {
            for t in 45..nm {
                poisoned.cases.counts_mut()[i * nm + t] = 999_999;
            }
        }
        // Covariates after (last test month - lag_min) = 2003-09.
        for c in &mut poisoned.covs {
            for i in 0..4 {
                for t in 45..nm {
                    c.values_mut()[i * nm + t] = -1e9;
                }
            }
        }
        let m2 = build(&poisoned, &m.spec);
        let f2 = fit(&m2, &FitConfig { restarts: 1, ..FitConfig::default() }).unwrap();
        let again = predict(&f2, &m2, test_window(), &cfg).unwrap();
        assert_eq!(base, again);
    }

    #[test]
    fn negative_binomial_draws_have_the_right_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (mu, kappa) = (6.0, 2.5);
        let d: Vec<f64> = (0..40_000).map(|_| draw_negative_binomial(&mut rng, mu, kappa)).collect();
        let m = mean(&d);
        let v = crate::stats::variance(&d);
        assert!((m - mu).abs() < 0.1);
        assert!((v / (mu + mu * mu / kappa) - 1.0).abs() < 0.05);
    }
}
