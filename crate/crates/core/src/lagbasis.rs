//! Distributed-lag cross-basis construction.
//!
//! A covariate enters the linear predictor through a tensor product of an
//! exposure basis (identity, or a natural cubic spline in the exposure value)
//! and a natural cubic spline over the lag axis, summed over the lag window.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::panel::CovariatePanel;
use crate::stats::quantile;

#[derive(Debug, Error, PartialEq)]
pub enum BasisError {
    #[error("invalid spline knots: {0}")]
    InvalidKnots(String),
    #[error("need at least two distinct finite values to build a basis")]
    DegenerateInput,
    #[error("non-finite exposure value {0}")]
    NonFinite(f64),
    #[error("invalid lag window {lag_min}..{lag_max}")]
    InvalidWindow { lag_min: usize, lag_max: usize },
    #[error("series of {n_months} months is too short for a maximum lag of {lag_max}")]
    InsufficientHistory { n_months: usize, lag_max: usize },
    #[error("coefficient vector has length {got}, block has {expected} columns")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Knot placement for a natural cubic spline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineSpec {
    pub interior_knots: Vec<f64>,
    pub boundary_knots: (f64, f64),
}

impl SplineSpec {
    pub fn new(interior_knots: Vec<f64>, boundary_knots: (f64, f64)) -> Result<Self, BasisError> {
        let spec = Self {
            interior_knots,
            boundary_knots,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), BasisError> {
        let (lo, hi) = self.boundary_knots;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(BasisError::InvalidKnots(format!(
                "boundary knots ({lo}, {hi}) must be finite and increasing"
            )));
        }
        let mut prev = lo;
        for &k in &self.interior_knots {
            if !(k > prev && k < hi) {
                return Err(BasisError::InvalidKnots(format!(
                    "interior knot {k} must be strictly increasing inside ({lo}, {hi})"
                )));
            }
            prev = k;
        }
        Ok(())
    }

    /// Knots at the given empirical quantiles of `x`, boundaries at its range.
    pub fn from_quantiles(x: &[f64], probs: &[f64]) -> Result<Self, BasisError> {
        if let Some(v) = x.iter().find(|v| !v.is_finite()) {
            return Err(BasisError::NonFinite(*v));
        }
        let mut sorted = x.to_vec();
        sorted.sort_by(f64::total_cmp);
        sorted.dedup();
        if sorted.len() < 2 {
            return Err(BasisError::DegenerateInput);
        }
        let interior = probs.iter().map(|&p| quantile(x, p)).collect();
        Self::new(interior, (sorted[0], sorted[sorted.len() - 1]))
    }

    /// Natural-spline degrees of freedom without an intercept.
    pub fn df(&self) -> usize {
        self.interior_knots.len() + 1
    }
}

/// B-spline basis of `degree` on knot vector `t`, differentiated `deriv` times.
fn bspline(x: f64, t: &[f64], degree: usize, deriv: usize) -> Vec<f64> {
    let n = t.len() - degree - 1;
    if deriv > 0 {
        let lower = bspline(x, t, degree - 1, deriv - 1);
        let d = degree as f64;
        return (0..n)
            .map(|i| {
                let a = t[i + degree] - t[i];
                let b = t[i + degree + 1] - t[i + 1];
                let left = if a > 0.0 { lower[i] / a } else { 0.0 };
                let right = if b > 0.0 { lower[i + 1] / b } else { 0.0 };
                d * (left - right)
            })
            .collect();
    }
    // Degree-0 indicators; the right end of the last non-empty span is closed.
    let m = t.len() - 1;
    let mut last_span = 0;
    for i in 0..m {
        if t[i] < t[i + 1] {
            last_span = i;
        }
    }
    let mut b: Vec<f64> = (0..m)
        .map(|i| {
            let inside = t[i] <= x && x < t[i + 1];
            let closing = i == last_span && x == t[i + 1];
            if inside || closing {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    for k in 1..=degree {
        for i in 0..(m - k) {
            let a = t[i + k] - t[i];
            let c = t[i + k + 1] - t[i + 1];
            let left = if a > 0.0 { (x - t[i]) / a * b[i] } else { 0.0 };
            let right = if c > 0.0 { (t[i + k + 1] - x) / c * b[i + 1] } else { 0.0 };
            b[i] = left + right;
        }
    }
    b.truncate(n);
    b
}

/// Orthonormal basis of the null space of `c` (rows are constraints), taken
/// from the trailing columns of a complete Householder QR of `c^T`.
fn null_space(c: &DMatrix<f64>) -> DMatrix<f64> {
    let n = c.ncols();
    let k = c.nrows();
    let mut a = c.transpose();
    let mut q = DMatrix::<f64>::identity(n, n);
    for j in 0..k {
        let norm = (j..n).map(|i| a[(i, j)] * a[(i, j)]).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if a[(j, j)] > 0.0 { -norm } else { norm };
        let mut v = vec![0.0; n];
        for i in j..n {
            v[i] = a[(i, j)];
        }
        v[j] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        // a <- H a, q <- q H
        for col in 0..k {
            let dot: f64 = (j..n).map(|i| v[i] * a[(i, col)]).sum();
            for i in j..n {
                a[(i, col)] -= 2.0 * v[i] * dot / vnorm2;
            }
        }
        for row in 0..n {
            let dot: f64 = (j..n).map(|i| q[(row, i)] * v[i]).sum();
            for i in j..n {
                q[(row, i)] -= 2.0 * dot * v[i] / vnorm2;
            }
        }
    }
    q.columns(k, n - k).into_owned()
}

/// Natural cubic spline basis without intercept: every function is zero at
/// the lower boundary knot, has zero second derivative at both boundaries and
/// is linear beyond them.
#[derive(Debug, Clone)]
pub struct NaturalSpline {
    spec: SplineSpec,
    knots: Vec<f64>,
    projection: DMatrix<f64>,
    lower: (Vec<f64>, Vec<f64>),
    upper: (Vec<f64>, Vec<f64>),
}

impl NaturalSpline {
    pub fn new(spec: &SplineSpec) -> Result<Self, BasisError> {
        spec.validate()?;
        let (lo, hi) = spec.boundary_knots;
        let mut knots = vec![lo; 4];
        knots.extend_from_slice(&spec.interior_knots);
        knots.extend_from_slice(&[hi; 4]);
        let n_bs = knots.len() - 4;
        // Drop the first B-spline: the only one that is non-zero at `lo`.
        let d2 = |x: f64| bspline(x, &knots, 3, 2)[1..].to_vec();
        let mut c = DMatrix::zeros(2, n_bs - 1);
        for (row, x) in [lo, hi].into_iter().enumerate() {
            for (j, v) in d2(x).into_iter().enumerate() {
                c[(row, j)] = v;
            }
        }
        let projection = null_space(&c);
        let mut me = Self {
            spec: spec.clone(),
            knots,
            projection,
            lower: (Vec::new(), Vec::new()),
            upper: (Vec::new(), Vec::new()),
        };
        me.lower = (me.interior(lo, 0), me.interior(lo, 1));
        me.upper = (me.interior(hi, 0), me.interior(hi, 1));
        Ok(me)
    }

    pub fn spec(&self) -> &SplineSpec {
        &self.spec
    }

    pub fn df(&self) -> usize {
        self.projection.ncols()
    }

    fn interior(&self, x: f64, deriv: usize) -> Vec<f64> {
        let b = bspline(x, &self.knots, 3, deriv);
        let p = &self.projection;
        (0..p.ncols())
            .map(|j| (0..p.nrows()).map(|i| b[i + 1] * p[(i, j)]).sum())
            .collect()
    }

    /// Writes the basis at `x` into `out` (length `df`).
    pub fn eval_into(&self, x: f64, out: &mut [f64]) {
        let (lo, hi) = self.spec.boundary_knots;
        if x < lo {
            for (j, o) in out.iter_mut().enumerate() {
                *o = self.lower.0[j] + (x - lo) * self.lower.1[j];
            }
        } else if x > hi {
            for (j, o) in out.iter_mut().enumerate() {
                *o = self.upper.0[j] + (x - hi) * self.upper.1[j];
            }
        } else {
            out.copy_from_slice(&self.interior(x, 0));
        }
    }

    pub fn eval(&self, x: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.df()];
        self.eval_into(x, &mut out);
        out
    }
}

/// Evaluates the natural cubic spline basis at every `x`.
pub fn natural_cubic_basis(x: &[f64], spec: &SplineSpec) -> Result<DMatrix<f64>, BasisError> {
    if let Some(v) = x.iter().find(|v| !v.is_finite()) {
        return Err(BasisError::NonFinite(*v));
    }
    let mut distinct = x.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(BasisError::DegenerateInput);
    }
    let spline = NaturalSpline::new(spec)?;
    let mut out = DMatrix::zeros(x.len(), spline.df());
    let mut row = vec![0.0; spline.df()];
    for (i, &xi) in x.iter().enumerate() {
        spline.eval_into(xi, &mut row);
        for (j, v) in row.iter().enumerate() {
            out[(i, j)] = *v;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LagWindow {
    pub lag_min: usize,
    pub lag_max: usize,
}

impl LagWindow {
    pub fn new(lag_min: usize, lag_max: usize) -> Result<Self, BasisError> {
        if lag_min > lag_max {
            return Err(BasisError::InvalidWindow { lag_min, lag_max });
        }
        Ok(Self { lag_min, lag_max })
    }

    pub fn lags(&self) -> std::ops::RangeInclusive<usize> {
        self.lag_min..=self.lag_max
    }

    /// Lag-axis spline with `n_knots` interior knots equally spaced on the
    /// `log(1 + lag - lag_min)` scale.
    pub fn default_lag_spline(&self, n_knots: usize) -> Result<SplineSpec, BasisError> {
        let span = (self.lag_max - self.lag_min) as f64;
        if span <= 0.0 {
            return Err(BasisError::InvalidWindow {
                lag_min: self.lag_min,
                lag_max: self.lag_max,
            });
        }
        let top = (span + 1.0).ln();
        let knots = (1..=n_knots)
            .map(|k| self.lag_min as f64 + (top * k as f64 / (n_knots + 1) as f64).exp() - 1.0)
            .collect();
        SplineSpec::new(knots, (self.lag_min as f64, self.lag_max as f64))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExposureBasis {
    Linear,
    Spline(SplineSpec),
}

impl ExposureBasis {
    pub fn df(&self) -> usize {
        match self {
            ExposureBasis::Linear => 1,
            ExposureBasis::Spline(s) => s.df(),
        }
    }
}

#[derive(Debug, Clone)]
enum ExposureEval {
    Linear,
    Spline(NaturalSpline),
}

impl ExposureEval {
    fn new(basis: &ExposureBasis) -> Result<Self, BasisError> {
        Ok(match basis {
            ExposureBasis::Linear => ExposureEval::Linear,
            ExposureBasis::Spline(spec) => ExposureEval::Spline(NaturalSpline::new(spec)?),
        })
    }

    fn eval_into(&self, x: f64, out: &mut [f64]) {
        match self {
            ExposureEval::Linear => out[0] = x,
            ExposureEval::Spline(s) => s.eval_into(x, out),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnMeta {
    pub covariate: String,
    pub exposure_index: usize,
    pub lag_index: usize,
}

/// Cross-basis block for one covariate over all region-month cells.
#[derive(Debug, Clone)]
pub struct CrossBasis {
    /// One row per cell, region-major; rows before `valid_from` are NaN.
    pub columns: DMatrix<f64>,
    pub column_meta: Vec<ColumnMeta>,
    pub valid_from: usize,
    pub n_regions: usize,
    pub n_months: usize,
}

impl CrossBasis {
    pub fn ncols(&self) -> usize {
        self.columns.ncols()
    }

    pub fn is_usable(&self, t: usize) -> bool {
        t >= self.valid_from
    }

    pub fn row(&self, region: usize, t: usize) -> Vec<f64> {
        self.columns.row(region * self.n_months + t).iter().copied().collect()
    }
}

/// Evaluates cross-basis rows for one covariate configuration.
#[derive(Debug, Clone)]
pub struct CrossBasisEvaluator {
    name: String,
    window: LagWindow,
    exposure: ExposureEval,
    exposure_df: usize,
    /// `lag_values[l - lag_min][k] = B_lag_k(l)`.
    lag_values: Vec<Vec<f64>>,
    lag_df: usize,
}

impl CrossBasisEvaluator {
    pub fn new(
        name: &str,
        window: LagWindow,
        exposure: &ExposureBasis,
        lag: &SplineSpec,
    ) -> Result<Self, BasisError> {
        let lag_spline = NaturalSpline::new(lag)?;
        let lag_values = window.lags().map(|l| lag_spline.eval(l as f64)).collect();
        Ok(Self {
            name: name.to_string(),
            window,
            exposure: ExposureEval::new(exposure)?,
            exposure_df: exposure.df(),
            lag_values,
            lag_df: lag_spline.df(),
        })
    }

    pub fn ncols(&self) -> usize {
        self.exposure_df * self.lag_df
    }

    pub fn column_meta(&self) -> Vec<ColumnMeta> {
        (0..self.exposure_df)
            .flat_map(|j| {
                (0..self.lag_df).map(move |k| ColumnMeta {
                    covariate: self.name.clone(),
                    exposure_index: j,
                    lag_index: k,
                })
            })
            .collect()
    }

    /// Row at month `t` of a single-region series, or `None` when the lag
    /// history is incomplete. Reads only `series[t - lag_max ..= t - lag_min]`.
    pub fn row(&self, series: &[f64], t: usize) -> Option<Vec<f64>> {
        if t < self.window.lag_max || t >= series.len() {
            return None;
        }
        let mut out = vec![0.0; self.ncols()];
        let mut b = vec![0.0; self.exposure_df];
        for (li, l) in self.window.lags().enumerate() {
            self.exposure.eval_into(series[t - l], &mut b);
            let lv = &self.lag_values[li];
            for j in 0..self.exposure_df {
                for k in 0..self.lag_df {
                    out[j * self.lag_df + k] += b[j] * lv[k];
                }
            }
        }
        Some(out)
    }

    /// Sum over the lag window of the lag basis, per lag column.
    pub fn lag_sums(&self) -> Vec<f64> {
        (0..self.lag_df)
            .map(|k| self.lag_values.iter().map(|v| v[k]).sum())
            .collect()
    }

    pub fn build(&self, cov: &CovariatePanel) -> Result<CrossBasis, BasisError> {
        let n_months = cov.n_months();
        if self.window.lag_max >= n_months {
            return Err(BasisError::InsufficientHistory {
                n_months,
                lag_max: self.window.lag_max,
            });
        }
        let n_rows = cov.n_regions() * n_months;
        let mut columns = DMatrix::from_element(n_rows, self.ncols(), f64::NAN);
        for i in 0..cov.n_regions() {
            let series = cov.series(i);
            for t in self.window.lag_max..n_months {
                let row = self.row(series, t).expect("history checked");
                for (c, v) in row.into_iter().enumerate() {
                    columns[(i * n_months + t, c)] = v;
                }
            }
        }
        Ok(CrossBasis {
            columns,
            column_meta: self.column_meta(),
            valid_from: self.window.lag_max,
            n_regions: cov.n_regions(),
            n_months,
        })
    }
}

/// Cross-basis of `cov` over `window`.
pub fn cross_basis(
    cov: &CovariatePanel,
    window: LagWindow,
    exposure: &ExposureBasis,
    lag: &SplineSpec,
) -> Result<CrossBasis, BasisError> {
    CrossBasisEvaluator::new(cov.name(), window, exposure, lag)?.build(cov)
}

/// Total log-RR contribution of holding the exposure at each `x` over the
/// whole lag window.
pub fn cumulative_exposure_response(
    coefficients: &[f64],
    window: LagWindow,
    exposure: &ExposureBasis,
    lag: &SplineSpec,
    x_grid: &[f64],
) -> Result<Vec<f64>, BasisError> {
    let eval = CrossBasisEvaluator::new("", window, exposure, lag)?;
    if coefficients.len() != eval.ncols() {
        return Err(BasisError::DimensionMismatch {
            expected: eval.ncols(),
            got: coefficients.len(),
        });
    }
    let sums = eval.lag_sums();
    let mut b = vec![0.0; eval.exposure_df];
    Ok(x_grid
        .iter()
        .map(|&x| {
            eval.exposure.eval_into(x, &mut b);
            let mut total = 0.0;
            for j in 0..eval.exposure_df {
                for k in 0..eval.lag_df {
                    total += coefficients[j * eval.lag_df + k] * b[j] * sums[k];
                }
            }
            total
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lag_spec() -> SplineSpec {
        LagWindow::new(3, 12).unwrap().default_lag_spline(2).unwrap()
    }

    #[test]
    fn lag_knots_are_log_spaced() {
        let s = lag_spec();
        assert_eq!(s.boundary_knots, (3.0, 12.0));
        let k0 = 3.0 + 10f64.powf(1.0 / 3.0) - 1.0;
        let k1 = 3.0 + 10f64.powf(2.0 / 3.0) - 1.0;
        assert!((s.interior_knots[0] - k0).abs() < 1e-12);
        assert!((s.interior_knots[1] - k1).abs() < 1e-12);
    }

    #[test]
    fn basis_is_zero_at_lower_boundary_and_linear_outside() {
        let spec = SplineSpec::new(vec![0.3, 0.6], (0.0, 1.0)).unwrap();
        let s = NaturalSpline::new(&spec).unwrap();
        assert_eq!(s.df(), 3);
        assert!(s.eval(0.0).iter().all(|v| v.abs() < 1e-14));
        let h = 1e-3;
        for x in [-2.0, -0.5, 1.5, 3.0] {
            let (a, b, c) = (s.eval(x - h), s.eval(x), s.eval(x + h));
            for j in 0..3 {
                let d2 = (a[j] - 2.0 * b[j] + c[j]) / (h * h);
                assert!(d2.abs() < 1e-6, "x={x} col={j} d2={d2}");
            }
        }
    }

    #[test]
    fn second_derivative_continuous_at_knots() {
        let spec = SplineSpec::new(vec![0.3, 0.6], (0.0, 1.0)).unwrap();
        let s = NaturalSpline::new(&spec).unwrap();
        let h = 1e-4;
        for knot in [0.3, 0.6] {
            let d2 = |x: f64| {
                let (a, b, c) = (s.eval(x - h), s.eval(x), s.eval(x + h));
                (0..3).map(|j| (a[j] - 2.0 * b[j] + c[j]) / (h * h)).collect::<Vec<_>>()
            };
            // Piecewise cubic: extrapolate the linear second derivative of
            // each side to the knot.
            let (l1, l2) = (d2(knot - 10.0 * h), d2(knot - 20.0 * h));
            let (r1, r2) = (d2(knot + 10.0 * h), d2(knot + 20.0 * h));
            for j in 0..3 {
                let left = 2.0 * l1[j] - l2[j];
                let right = 2.0 * r1[j] - r2[j];
                assert!((left - right).abs() < 1e-4, "knot {knot}: {left} vs {right}");
            }
        }
    }

    #[test]
    fn spec_validation() {
        assert!(SplineSpec::new(vec![0.5, 0.4], (0.0, 1.0)).is_err());
        assert!(SplineSpec::new(vec![1.0], (0.0, 1.0)).is_err());
        assert!(SplineSpec::new(vec![], (1.0, 1.0)).is_err());
        let spec = SplineSpec::new(vec![0.5], (0.0, 1.0)).unwrap();
        assert_eq!(
            natural_cubic_basis(&[1.0, 1.0], &spec),
            Err(BasisError::DegenerateInput)
        );
        assert!(matches!(
            natural_cubic_basis(&[0.0, f64::NAN], &spec),
            Err(BasisError::NonFinite(_))
        ));
    }

    #[test]
    fn column_counts() {
        let cov = CovariatePanel::new("x", 1, 20, (0..20).map(|v| v as f64).collect()).unwrap();
        let w = LagWindow::new(3, 12).unwrap();
        let lin = cross_basis(&cov, w, &ExposureBasis::Linear, &lag_spec()).unwrap();
        assert_eq!(lin.ncols(), 3);
        let exp = SplineSpec::new(vec![6.0, 12.0], (0.0, 19.0)).unwrap();
        let nl = cross_basis(&cov, w, &ExposureBasis::Spline(exp), &lag_spec()).unwrap();
        assert_eq!(nl.ncols(), 9);
        assert_eq!(nl.column_meta[4].exposure_index, 1);
        assert_eq!(nl.column_meta[4].lag_index, 1);
        assert_eq!(nl.valid_from, 12);
        assert!(nl.columns[(11, 0)].is_nan());
    }

    #[test]
    fn constant_series_gives_constant_columns() {
        let c = 2.5;
        let cov = CovariatePanel::new("x", 2, 30, vec![c; 60]).unwrap();
        let w = LagWindow::new(3, 12).unwrap();
        let cb = cross_basis(&cov, w, &ExposureBasis::Linear, &lag_spec()).unwrap();
        let s = NaturalSpline::new(&lag_spec()).unwrap();
        let sums: Vec<f64> = (0..3).map(|k| (3..=12).map(|l| s.eval(l as f64)[k]).sum()).collect();
        for i in 0..2 {
            for t in 12..30 {
                for k in 0..3 {
                    assert!((cb.columns[(i * 30 + t, k)] - c * sums[k]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn impulse_traces_lag_basis() {
        let n = 40;
        let t0 = 15;
        let mut x = vec![0.0; n];
        x[t0] = 1.0;
        let cov = CovariatePanel::new("x", 1, n, x).unwrap();
        let w = LagWindow::new(3, 12).unwrap();
        let cb = cross_basis(&cov, w, &ExposureBasis::Linear, &lag_spec()).unwrap();
        let s = NaturalSpline::new(&lag_spec()).unwrap();
        for t in 12..n {
            let l = t as i64 - t0 as i64;
            for k in 0..3 {
                let expected = if (3..=12).contains(&l) { s.eval(l as f64)[k] } else { 0.0 };
                assert!((cb.columns[(t, k)] - expected).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn insufficient_history() {
        let cov = CovariatePanel::new("x", 1, 12, vec![0.0; 12]).unwrap();
        let w = LagWindow::new(3, 12).unwrap();
        assert!(matches!(
            cross_basis(&cov, w, &ExposureBasis::Linear, &lag_spec()),
            Err(BasisError::InsufficientHistory { .. })
        ));
    }

    #[test]
    fn cumulative_response_cases() {
        let w = LagWindow::new(3, 12).unwrap();
        let lag = lag_spec();
        let grid = [-1.0, 0.0, 0.5, 2.0];
        let zero = cumulative_exposure_response(&[0.0; 3], w, &ExposureBasis::Linear, &lag, &grid)
            .unwrap();
        assert!(zero.iter().all(|v| *v == 0.0));

        // beta proportional to the lag sums, scaled so sum_k beta_k S_k = 1.
        let s = NaturalSpline::new(&lag).unwrap();
        let sums: Vec<f64> = (0..3).map(|k| (3..=12).map(|l| s.eval(l as f64)[k]).sum()).collect();
        let norm: f64 = sums.iter().map(|v| v * v).sum();
        let beta: Vec<f64> = sums.iter().map(|v| v / norm).collect();
        let eff =
            cumulative_exposure_response(&beta, w, &ExposureBasis::Linear, &lag, &grid).unwrap();
        for (x, e) in grid.iter().zip(&eff) {
            assert!((x - e).abs() < 1e-12);
        }
        let at0 = cumulative_exposure_response(&[0.3, -2.0, 7.0], w, &ExposureBasis::Linear, &lag, &[0.0])
            .unwrap();
        assert_eq!(at0[0], 0.0);
        assert!(matches!(
            cumulative_exposure_response(&[0.0; 2], w, &ExposureBasis::Linear, &lag, &grid),
            Err(BasisError::DimensionMismatch { expected: 3, got: 2 })
        ));
    }
}
