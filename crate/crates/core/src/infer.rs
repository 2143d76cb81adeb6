//! Empirical-Bayes Laplace inference: constrained Newton for the latent mode,
//! Nelder–Mead over log hyperparameters on the Laplace-approximate marginal
//! posterior, Gaussian sampling, DIC and CPO-based CV log-score.

use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AssembledModel, BlockKind, CovariateTerm, HyperParams, ModelError, ModelSpec};
use crate::sparse::{Cholesky, SparseError, SparseSym, Symbolic};
use crate::stats::{log_sum_exp, quantile_sorted};

pub const FIT_FORMAT_VERSION: u32 = 1;
const HYPER_BOUND: f64 = 25.0;

#[derive(Debug, Error)]
pub enum InferError {
    #[error("Newton iterations did not converge (gradient norm trace {trace:?})")]
    NotConverged { trace: Vec<f64> },
    #[error("fit for `{0}` did not converge")]
    UnconvergedFit(String),
    #[error("latent precision is not positive definite: {0}")]
    NotPositiveDefinite(#[from] SparseError),
    #[error("no hyperparameter value gave a finite Laplace objective")]
    NoFiniteObjective,
    #[error("CPO accumulation overflowed at cell {cell}")]
    CpoOverflow { cell: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("fit bundle: {0}")]
    Bundle(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Inference settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub grad_tol: f64,
    pub max_newton: usize,
    pub simplex_tol: f64,
    pub max_evals: usize,
    pub restarts: usize,
    pub jitter: f64,
    pub seed: u64,
    /// Skip hyperparameter optimization and use these values.
    pub fixed_hyper: Option<HyperParams>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            grad_tol: 1e-8,
            max_newton: 100,
            simplex_tol: 1e-4,
            max_evals: 400,
            restarts: 3,
            jitter: 0.5,
            seed: 0,
            fixed_hyper: None,
        }
    }
}

/// Dense helpers for the (few) linear constraints.
#[derive(Debug, Clone)]
struct ConstraintSet {
    rows: Vec<Vec<(usize, f64)>>,
    aat: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
    log_det_aat: f64,
}

impl ConstraintSet {
    fn new(rows: Vec<Vec<(usize, f64)>>) -> Self {
        let k = rows.len();
        if k == 0 {
            return Self {
                rows,
                aat: None,
                log_det_aat: 0.0,
            };
        }
        let aat = DMatrix::from_fn(k, k, |a, b| sparse_dot(&rows[a], &rows[b]));
        let chol = aat.cholesky().expect("constraints are linearly independent");
        let log_det_aat = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Self {
            rows,
            aat: Some(chol),
            log_det_aat,
        }
    }

    fn len(&self) -> usize {
        self.rows.len()
    }

    fn apply(&self, v: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            self.rows.len(),
            self.rows.iter().map(|r| r.iter().map(|&(i, w)| w * v[i]).sum::<f64>()),
        )
    }

    /// Orthogonal projection onto `{x : A x = 0}`.
    fn project(&self, v: &[f64]) -> Vec<f64> {
        let mut out = v.to_vec();
        if let Some(chol) = &self.aat {
            let s = chol.solve(&self.apply(v));
            for (r, sk) in self.rows.iter().zip(s.iter()) {
                for &(i, w) in r {
                    out[i] -= w * sk;
                }
            }
        }
        out
    }
}

fn sparse_dot(a: &[(usize, f64)], b: &[(usize, f64)]) -> f64 {
    let mut s = 0.0;
    for &(i, wa) in a {
        for &(j, wb) in b {
            if i == j {
                s += wa * wb;
            }
        }
    }
    s
}

/// `H + C^T C`: agrees with `H` on `{x : C x = 0}` and is positive definite
/// whenever `H` is positive definite there, which makes intrinsic priors
/// factorizable without changing the constrained Gaussian.
struct Augmented {
    /// Pattern of `H` union `C^T C`, values holding `C^T C`.
    base: SparseSym,
    /// Slot of each `H` entry in `base`.
    map: Vec<usize>,
}

impl Augmented {
    fn new(pattern: &SparseSym, cons: &ConstraintSet) -> Self {
        let mut trip: Vec<(usize, usize, f64)> = pattern.iter().map(|(i, j, _)| (i, j, 0.0)).collect();
        for r in &cons.rows {
            for &(i, a) in r {
                for &(j, b) in r {
                    if i >= j {
                        trip.push((i, j, a * b));
                    }
                }
            }
        }
        let base = SparseSym::from_triplets(pattern.n(), &trip);
        let map = pattern
            .iter()
            .map(|(i, j, _)| base.slot(i, j).expect("pattern entry present"))
            .collect();
        Self { base, map }
    }

    fn values(&self, h: &[f64]) -> Vec<f64> {
        let mut v = self.base.values().to_vec();
        for (&s, x) in self.map.iter().zip(h) {
            v[s] += x;
        }
        v
    }
}

/// Conditioning-by-kriging data for a factorized precision `H`.
struct Kriging {
    /// `H^{-1} A^T`, one column per constraint.
    u: Vec<Vec<f64>>,
    au: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
    log_det_au: f64,
}

impl Kriging {
    fn new(chol: &Cholesky, cons: &ConstraintSet, n: usize) -> Result<Self, InferError> {
        let k = cons.len();
        if k == 0 {
            return Ok(Self {
                u: Vec::new(),
                au: None,
                log_det_au: 0.0,
            });
        }
        let u: Vec<Vec<f64>> = cons
            .rows
            .iter()
            .map(|r| {
                let mut e = vec![0.0; n];
                for &(i, w) in r {
                    e[i] = w;
                }
                chol.solve(&e)
            })
            .collect();
        let au = DMatrix::from_fn(k, k, |a, b| cons.rows[a].iter().map(|&(i, w)| w * u[b][i]).sum());
        let au = au.cholesky().ok_or(InferError::NotPositiveDefinite(
            SparseError::NotPositiveDefinite {
                column: 0,
                pivot: f64::NAN,
            },
        ))?;
        let log_det_au = 2.0 * au.l().diagonal().iter().map(|v: &f64| v.ln()).sum::<f64>();
        Ok(Self {
            u,
            au: Some(au),
            log_det_au,
        })
    }

    /// `v - H^{-1} A^T (A H^{-1} A^T)^{-1} A v`.
    fn correct(&self, v: &mut [f64], cons: &ConstraintSet) {
        if let Some(au) = &self.au {
            let s = au.solve(&cons.apply(v));
            for (uk, sk) in self.u.iter().zip(s.iter()) {
                for (vi, ui) in v.iter_mut().zip(uk) {
                    *vi -= ui * sk;
                }
            }
        }
    }
}

/// Latent mode at fixed hyperparameters.
struct Mode {
    x: Vec<f64>,
    eta: Vec<f64>,
    log_lik: f64,
    log_prior: f64,
    hessian: Vec<f64>,
    log_det_c: f64,
    grad_norm: f64,
    iterations: usize,
    trace: Vec<f64>,
}

/// Reusable per-model solver state.
pub struct Solver<'m> {
    model: &'m AssembledModel,
    symbolic: Symbolic,
    augmented: Augmented,
    cons: ConstraintSet,
    cfg: FitConfig,
}

impl<'m> Solver<'m> {
    pub fn new(model: &'m AssembledModel, cfg: FitConfig) -> Self {
        let cons = ConstraintSet::new(model.layout.constraints.clone());
        let augmented = Augmented::new(model.hessian_pattern(), &cons);
        Self {
            model,
            symbolic: Symbolic::analyze(&augmented.base),
            augmented,
            cons,
            cfg,
        }
    }

    fn penalized(&self, x: &[f64], h: &HyperParams) -> (f64, f64, Vec<f64>) {
        let eta = self.model.eta(x);
        let ll = self.model.log_likelihood(&eta, h);
        let lp = self.model.latent_log_prior(x, h);
        (ll, lp, eta)
    }

    /// Constrained Newton ascent on the joint log posterior.
    fn mode(&self, h: &HyperParams, x0: &[f64]) -> Result<Mode, InferError> {
        let m = self.model;
        let n = m.dim();
        let mut x = self.cons.project(x0);
        let mut trace = Vec::new();
        let (mut ll, mut lp, mut eta) = self.penalized(&x, h);
        let mut iterations = 0;
        loop {
            let terms = m.likelihood_terms(&eta, h);
            let g = m.gradient_from(&x, &terms.d1, h);
            let pg = self.cons.project(&g);
            let gnorm = pg.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            trace.push(gnorm);
            let hessian = self.augmented.values(&m.neg_hessian_values(&terms.w, h));
            let chol = self.symbolic.factor(&hessian)?;
            let kr = Kriging::new(&chol, &self.cons, n)?;
            let mut delta = chol.solve(&g);
            kr.correct(&mut delta, &self.cons);
            let decrement: f64 = delta.iter().zip(&g).map(|(a, b)| a * b).sum();
            let f = ll + lp;
            if gnorm < self.cfg.grad_tol {
                let log_det_c = chol.log_det() + kr.log_det_au - self.cons.log_det_aat;
                return Ok(Mode {
                    x,
                    eta,
                    log_lik: ll,
                    log_prior: lp,
                    hessian,
                    log_det_c,
                    grad_norm: gnorm,
                    iterations,
                    trace,
                });
            }
            if iterations >= self.cfg.max_newton {
                return Err(InferError::NotConverged { trace });
            }
            iterations += 1;
            let mut step = 1.0;
            let mut accepted = false;
            for _ in 0..60 {
                let xn: Vec<f64> = x.iter().zip(&delta).map(|(a, d)| a + step * d).collect();
                let (lln, lpn, etan) = self.penalized(&xn, h);
                let fn_ = lln + lpn;
                // A full Newton step whose change is lost in roundoff is kept.
                let within_roundoff = step == 1.0 && f - fn_ <= 1e-12 * f.abs().max(1.0);
                if fn_.is_finite() && (fn_ >= f || within_roundoff) {
                    x = xn;
                    ll = lln;
                    lp = lpn;
                    eta = etan;
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                // Remaining ascent is below working precision.
                if decrement.abs() <= 1e-12 * f.abs().max(1.0) {
                    let log_det_c = chol.log_det() + kr.log_det_au - self.cons.log_det_aat;
                    return Ok(Mode {
                        x,
                        eta,
                        log_lik: ll,
                        log_prior: lp,
                        hessian,
                        log_det_c,
                        grad_norm: gnorm,
                        iterations,
                        trace,
                    });
                }
                return Err(InferError::NotConverged { trace });
            }
        }
    }

    /// Laplace approximation of `log p(y | h)` (normalizing constants included).
    fn laplace(&self, mode: &Mode) -> f64 {
        let free = (self.model.dim() - self.cons.len()) as f64;
        mode.log_lik + mode.log_prior + 0.5 * free * (2.0 * PI).ln() - 0.5 * mode.log_det_c
    }

    pub fn log_marginal(&self, h: &HyperParams) -> Result<f64, InferError> {
        let mode = self.mode(h, &self.model.initial_latent())?;
        Ok(self.laplace(&mode))
    }

    pub fn fit(&self) -> Result<PosteriorFit, InferError> {
        let m = self.model;
        let x_init = m.initial_latent();
        let (h_hat, evals) = match &self.cfg.fixed_hyper {
            Some(h) => (*h, 0),
            None => self.optimize_hyper(&x_init)?,
        };
        let mode = self.mode(&h_hat, &x_init)?;
        let log_marginal = self.laplace(&mode);
        let mut precision = self.augmented.base.clone();
        precision.values_mut().copy_from_slice(&mode.hessian);
        Ok(PosteriorFit {
            model_id: m.spec.id.clone(),
            converged: true,
            objective: log_marginal + m.hyper_log_prior(&h_hat),
            log_marginal,
            hyper_hat: h_hat,
            fitted_eta: mode.eta.clone(),
            grad_norm: mode.grad_norm,
            grad_trace: mode.trace,
            newton_iterations: mode.iterations,
            outer_evaluations: evals,
            constraints: m.layout.constraints.clone(),
            latent_precision: precision,
            latent_mode: mode.x,
        })
    }

    fn optimize_hyper(&self, x_init: &[f64]) -> Result<(HyperParams, usize), InferError> {
        let m = self.model;
        let start = m.free_from_hyper(&m.initial_hyper());
        let mut warm = x_init.to_vec();
        let objective = |v: &[f64], warm: &mut Vec<f64>| -> f64 {
            if v.iter().any(|a| !a.is_finite() || a.abs() > HYPER_BOUND) {
                return f64::INFINITY;
            }
            let h = m.hyper_from_free(v);
            match self.mode(&h, warm) {
                Ok(mode) => {
                    let val = self.laplace(&mode) + m.hyper_log_prior(&h);
                    if val.is_finite() {
                        *warm = mode.x;
                        -val
                    } else {
                        f64::INFINITY
                    }
                }
                Err(_) => f64::INFINITY,
            }
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        let mut best: Option<(Vec<f64>, f64)> = None;
        let mut evals = 0;
        for r in 0..self.cfg.restarts.max(1) {
            let x0: Vec<f64> = if r == 0 {
                start.clone()
            } else {
                start
                    .iter()
                    .map(|s| s + self.cfg.jitter * rng.random_range(-1.0..1.0))
                    .collect()
            };
            let mut w = x_init.to_vec();
            let res = nelder_mead(
                |v| objective(v, &mut w),
                &x0,
                0.5,
                self.cfg.simplex_tol,
                self.cfg.max_evals,
            );
            evals += res.evaluations;
            if res.value.is_finite() && best.as_ref().is_none_or(|b| res.value < b.1) {
                best = Some((res.x, res.value));
            }
        }
        warm.clear();
        let (v, _) = best.ok_or(InferError::NoFiniteObjective)?;
        Ok((m.hyper_from_free(&v), evals))
    }
}

/// Result of [`nelder_mead`].
#[derive(Debug, Clone)]
pub struct SimplexResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub evaluations: usize,
}

/// Derivative-free minimization; stops once every vertex lies within `tol`
/// (max-norm) of the best one.
pub fn nelder_mead(
    mut f: impl FnMut(&[f64]) -> f64,
    x0: &[f64],
    step: f64,
    tol: f64,
    max_evals: usize,
) -> SimplexResult {
    let n = x0.len();
    let mut evals = 0;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    let v0 = eval(x0, &mut evals);
    simplex.push((x0.to_vec(), v0));
    for k in 0..n {
        let mut x = x0.to_vec();
        x[k] += step;
        let v = eval(&x, &mut evals);
        simplex.push((x, v));
    }
    loop {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = &simplex[0].0;
        let spread = simplex[1..]
            .iter()
            .map(|(x, _)| x.iter().zip(best).fold(0.0f64, |a, (u, v)| a.max((u - v).abs())))
            .fold(0.0f64, f64::max);
        if spread < tol || evals >= max_evals {
            break;
        }
        let centroid: Vec<f64> = (0..n)
            .map(|k| simplex[..n].iter().map(|(x, _)| x[k]).sum::<f64>() / n as f64)
            .collect();
        let worst = simplex[n].clone();
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&worst.0)
                .map(|(c, w)| c + t * (w - c))
                .collect()
        };
        let xr = along(-1.0);
        let fr = eval(&xr, &mut evals);
        if fr < simplex[0].1 {
            let xe = along(-2.0);
            let fe = eval(&xe, &mut evals);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
            continue;
        }
        let (xc, fc) = if fr < worst.1 {
            let xc = along(-0.5);
            let fc = eval(&xc, &mut evals);
            (xc, fc)
        } else {
            let xc = along(0.5);
            let fc = eval(&xc, &mut evals);
            (xc, fc)
        };
        if fc < worst.1.min(fr) {
            simplex[n] = (xc, fc);
            continue;
        }
        let b = simplex[0].0.clone();
        for item in simplex.iter_mut().skip(1) {
            let x: Vec<f64> = b.iter().zip(&item.0).map(|(u, v)| u + 0.5 * (v - u)).collect();
            let v = eval(&x, &mut evals);
            *item = (x, v);
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, value) = simplex.swap_remove(0);
    SimplexResult {
        x,
        value,
        evaluations: evals,
    }
}

/// Fitted latent Gaussian approximation at the optimized hyperparameters.
#[derive(Debug, Clone)]
pub struct PosteriorFit {
    pub model_id: String,
    pub latent_mode: Vec<f64>,
    /// Negative Hessian of the joint at the mode plus `C^T C`; identical to
    /// the Hessian on the constraint subspace.
    pub latent_precision: SparseSym,
    pub constraints: Vec<Vec<(usize, f64)>>,
    pub hyper_hat: HyperParams,
    /// Laplace approximation of `log p(y | hyper_hat)`.
    pub log_marginal: f64,
    /// `log_marginal` plus the hyperprior: the maximized outer objective.
    pub objective: f64,
    pub fitted_eta: Vec<f64>,
    pub converged: bool,
    pub grad_norm: f64,
    /// Projected-gradient max-norm per Newton iteration at `hyper_hat`.
    pub grad_trace: Vec<f64>,
    pub newton_iterations: usize,
    pub outer_evaluations: usize,
}

/// Fits `model` with empirical-Bayes Laplace inference.
pub fn fit(model: &AssembledModel, cfg: &FitConfig) -> Result<PosteriorFit, InferError> {
    Solver::new(model, cfg.clone()).fit()
}

/// Factorized Gaussian approximation used for sampling and variances.
pub struct GaussianApprox<'a> {
    fit: &'a PosteriorFit,
    chol: Cholesky,
    cons: ConstraintSet,
    kriging: Kriging,
}

impl<'a> GaussianApprox<'a> {
    pub fn new(fit: &'a PosteriorFit) -> Result<Self, InferError> {
        if !fit.converged {
            return Err(InferError::UnconvergedFit(fit.model_id.clone()));
        }
        let sym = Symbolic::analyze(&fit.latent_precision);
        let chol = sym.factor(fit.latent_precision.values())?;
        let cons = ConstraintSet::new(fit.constraints.clone());
        let kriging = Kriging::new(&chol, &cons, fit.latent_mode.len())?;
        Ok(Self {
            fit,
            chol,
            cons,
            kriging,
        })
    }

    /// One draw from `z ~ N(0, I)`.
    pub fn draw_from_standard(&self, z: &[f64]) -> Vec<f64> {
        let mut x = self.chol.sample_from_standard(z);
        self.kriging.correct(&mut x, &self.cons);
        for (xi, m) in x.iter_mut().zip(&self.fit.latent_mode) {
            *xi += m;
        }
        x
    }

    pub fn sample(&self, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = self.fit.latent_mode.len();
        (0..n)
            .map(|_| {
                let z: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                self.draw_from_standard(&z)
            })
            .collect()
    }

    /// Constrained posterior covariance column `k`.
    pub fn covariance_column(&self, k: usize) -> Vec<f64> {
        let mut e = vec![0.0; self.fit.latent_mode.len()];
        e[k] = 1.0;
        let mut c = self.chol.solve(&e);
        self.kriging.correct(&mut c, &self.cons);
        c
    }

    pub fn marginal_variance(&self, k: usize) -> f64 {
        self.covariance_column(k)[k]
    }
}

/// `n` draws from the constrained Gaussian approximation.
pub fn sample_latent(fit: &PosteriorFit, n: usize, seed: u64) -> Result<Vec<Vec<f64>>, InferError> {
    Ok(GaussianApprox::new(fit)?.sample(n, seed))
}

/// Posterior standard deviations of the given latent coordinates.
pub fn posterior_sd(fit: &PosteriorFit, indices: &[usize]) -> Result<Vec<f64>, InferError> {
    let g = GaussianApprox::new(fit)?;
    Ok(indices.iter().map(|&k| g.marginal_variance(k).sqrt()).collect())
}

/// Deviance and CV diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub dic: f64,
    pub pd: f64,
    pub mean_deviance: f64,
    pub cv_log_score: f64,
    pub cpo: Vec<f64>,
    /// Cells whose harmonic-mean weights have coefficient of variation > 1.
    pub cpo_flagged: Vec<usize>,
}

fn deviance(model: &AssembledModel, eta: &[f64], h: &HyperParams) -> f64 {
    -2.0 * model.log_likelihood(eta, h)
}

/// `(dic, pd)` from posterior draws; the plug-in deviance is taken at the
/// approximation's mean, i.e. the mode.
pub fn dic(fit: &PosteriorFit, model: &AssembledModel, samples: &[Vec<f64>]) -> Result<(f64, f64), InferError> {
    if !fit.converged {
        return Err(InferError::UnconvergedFit(fit.model_id.clone()));
    }
    let h = &fit.hyper_hat;
    let dbar = samples
        .iter()
        .map(|x| deviance(model, &model.eta(x), h))
        .sum::<f64>()
        / samples.len() as f64;
    let pd = dbar - deviance(model, &fit.fitted_eta, h);
    Ok((dbar + pd, pd))
}

/// Harmonic-mean CPO per cell and `-mean(log CPO)`.
pub fn cv_log_score(
    fit: &PosteriorFit,
    model: &AssembledModel,
    samples: &[Vec<f64>],
) -> Result<(f64, Vec<f64>, Vec<usize>), InferError> {
    if !fit.converged {
        return Err(InferError::UnconvergedFit(fit.model_id.clone()));
    }
    let etas: Vec<Vec<f64>> = samples.iter().map(|x| model.eta(x)).collect();
    cpo_from_etas(fit, model, &etas)
}

fn cpo_from_etas(
    fit: &PosteriorFit,
    model: &AssembledModel,
    etas: &[Vec<f64>],
) -> Result<(f64, Vec<f64>, Vec<usize>), InferError> {
    let kappa = fit.hyper_hat.kappa();
    let s = etas.len() as f64;
    let mut cpo = Vec::with_capacity(model.n_cells());
    let mut flagged = Vec::new();
    let mut total = 0.0;
    let mut neg_ll = vec![0.0; etas.len()];
    for c in 0..model.n_cells() {
        for (v, eta) in neg_ll.iter_mut().zip(etas) {
            *v = -model.cell_log_likelihood(c, eta[c], kappa);
        }
        let lse = log_sum_exp(&neg_ll);
        if !lse.is_finite() {
            return Err(InferError::CpoOverflow { cell: c });
        }
        let log_cpo = -(lse - s.ln());
        let mx = neg_ll.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = neg_ll.iter().map(|v| (v - mx).exp()).collect();
        let mw = w.iter().sum::<f64>() / s;
        let sd = (w.iter().map(|v| (v - mw) * (v - mw)).sum::<f64>() / (s - 1.0).max(1.0)).sqrt();
        if sd / mw > 1.0 {
            flagged.push(c);
        }
        total += log_cpo;
        cpo.push(log_cpo.exp());
    }
    Ok((-total / model.n_cells() as f64, cpo, flagged))
}

/// DIC and CV log-score from one set of `n` posterior draws.
pub fn diagnose(
    fit: &PosteriorFit,
    model: &AssembledModel,
    n: usize,
    seed: u64,
) -> Result<FitDiagnostics, InferError> {
    let samples = sample_latent(fit, n, seed)?;
    let etas: Vec<Vec<f64>> = samples.iter().map(|x| model.eta(x)).collect();
    let h = &fit.hyper_hat;
    let mean_deviance = etas.iter().map(|e| deviance(model, e, h)).sum::<f64>() / n as f64;
    let pd = mean_deviance - deviance(model, &fit.fitted_eta, h);
    let (cv_log_score, cpo, cpo_flagged) = cpo_from_etas(fit, model, &etas)?;
    Ok(FitDiagnostics {
        dic: mean_deviance + pd,
        pd,
        mean_deviance,
        cv_log_score,
        cpo,
        cpo_flagged,
    })
}

/// Posterior summary of a relative risk.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskSummary {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Summary of draws at the 2.5% / 97.5% empirical quantiles.
pub fn summarize(values: &mut [f64]) -> RiskSummary {
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    values.sort_by(f64::total_cmp);
    RiskSummary {
        mean,
        lo: quantile_sorted(values, 0.025),
        hi: quantile_sorted(values, 0.975),
    }
}

/// Per-cell posterior RR = `exp(eta - log E)` summaries.
pub fn fitted_relative_risk(
    fit: &PosteriorFit,
    model: &AssembledModel,
    samples: &[Vec<f64>],
) -> Result<Vec<RiskSummary>, InferError> {
    if !fit.converged {
        return Err(InferError::UnconvergedFit(fit.model_id.clone()));
    }
    let etas: Vec<Vec<f64>> = samples.iter().map(|x| model.eta(x)).collect();
    Ok((0..model.n_cells())
        .map(|c| {
            let mut rr: Vec<f64> = etas.iter().map(|e| (e[c] - model.offset[c]).exp()).collect();
            summarize(&mut rr)
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Fit bundle: `fit.json` + `precision.mtx`

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSummary {
    pub name: String,
    pub kind: BlockKind,
    pub start: usize,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitBundle {
    pub format_version: u32,
    pub model_id: String,
    pub config_hash: String,
    pub spec: ModelSpec,
    pub hyper_hat: HyperParams,
    pub latent_mode: Vec<f64>,
    pub log_marginal: f64,
    pub objective: f64,
    pub converged: bool,
    pub grad_norm: f64,
    pub grad_trace: Vec<f64>,
    pub newton_iterations: usize,
    pub outer_evaluations: usize,
    pub layout: Vec<BlockSummary>,
    pub constraints: Vec<Vec<(usize, f64)>>,
    pub terms: Vec<CovariateTerm>,
    pub years: Vec<i32>,
    #[serde(default)]
    pub diagnostics: Option<FitDiagnostics>,
}

pub fn write_matrix_market<W: Write>(out: W, m: &SparseSym) -> std::io::Result<()> {
    let mut w = BufWriter::new(out);
    writeln!(w, "%%MatrixMarket matrix coordinate real symmetric")?;
    writeln!(w, "{} {} {}", m.n(), m.n(), m.nnz())?;
    for (i, j, v) in m.iter() {
        writeln!(w, "{} {} {v:e}", i + 1, j + 1)?;
    }
    w.flush()
}

pub fn read_matrix_market<R: std::io::Read>(input: R) -> Result<SparseSym, InferError> {
    let bad = |m: String| InferError::Bundle(format!("precision.mtx: {m}"));
    let mut lines = BufReader::new(input).lines();
    let header = lines.next().ok_or_else(|| bad("empty".into()))??;
    if !header.starts_with("%%MatrixMarket matrix coordinate real symmetric") {
        return Err(bad(format!("unsupported header `{header}`")));
    }
    let mut size: Option<usize> = None;
    let mut triplets = Vec::new();
    for line in lines {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('%') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if size.is_none() {
            size = Some(f[0].parse().map_err(|_| bad(format!("bad size line `{line}`")))?);
            continue;
        }
        if f.len() != 3 {
            return Err(bad(format!("bad entry `{line}`")));
        }
        let parse_idx = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad index `{s}`")));
        let i = parse_idx(f[0])?;
        let j = parse_idx(f[1])?;
        let v: f64 = f[2].parse().map_err(|_| bad(format!("bad value `{}`", f[2])))?;
        triplets.push((i - 1, j - 1, v));
    }
    Ok(SparseSym::from_triplets(size.ok_or_else(|| bad("no size line".into()))?, &triplets))
}

impl FitBundle {
    pub fn new(
        fit: &PosteriorFit,
        model: &AssembledModel,
        config_hash: &str,
        diagnostics: Option<FitDiagnostics>,
    ) -> Self {
        Self {
            format_version: FIT_FORMAT_VERSION,
            model_id: fit.model_id.clone(),
            config_hash: config_hash.to_string(),
            spec: model.spec.clone(),
            hyper_hat: fit.hyper_hat,
            latent_mode: fit.latent_mode.clone(),
            log_marginal: fit.log_marginal,
            objective: fit.objective,
            converged: fit.converged,
            grad_norm: fit.grad_norm,
            grad_trace: fit.grad_trace.clone(),
            newton_iterations: fit.newton_iterations,
            outer_evaluations: fit.outer_evaluations,
            layout: model
                .layout
                .blocks
                .iter()
                .map(|b| BlockSummary {
                    name: b.name.clone(),
                    kind: b.kind,
                    start: b.start,
                    size: b.size,
                })
                .collect(),
            constraints: fit.constraints.clone(),
            terms: model.terms.clone(),
            years: model.years.clone(),
            diagnostics,
        }
    }
}

pub fn write_fit_bundle(dir: &Path, bundle: &FitBundle, fit: &PosteriorFit) -> Result<(), InferError> {
    fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(bundle).map_err(|e| InferError::Bundle(e.to_string()))?;
    fs::write(dir.join("fit.json"), json + "\n")?;
    write_matrix_market(fs::File::create(dir.join("precision.mtx"))?, &fit.latent_precision)?;
    Ok(())
}

/// Reads a bundle and rebuilds the fit; `model` must be the re-assembled
/// model it was fitted on.
pub fn read_fit_bundle(dir: &Path, model: &AssembledModel) -> Result<(FitBundle, PosteriorFit), InferError> {
    let text = fs::read_to_string(dir.join("fit.json"))?;
    let bundle: FitBundle = serde_json::from_str(&text).map_err(|e| InferError::Bundle(e.to_string()))?;
    if bundle.format_version != FIT_FORMAT_VERSION {
        return Err(InferError::Bundle(format!(
            "unsupported format version {}",
            bundle.format_version
        )));
    }
    if bundle.latent_mode.len() != model.dim() || bundle.spec != model.spec || bundle.terms != model.terms {
        return Err(InferError::Bundle(format!(
            "bundle for `{}` does not match the assembled model",
            bundle.model_id
        )));
    }
    let precision = read_matrix_market(fs::File::open(dir.join("precision.mtx"))?)?;
    if precision.n() != model.dim() {
        return Err(InferError::Bundle("precision dimension does not match the model".into()));
    }
    let fit = PosteriorFit {
        model_id: bundle.model_id.clone(),
        fitted_eta: model.eta(&bundle.latent_mode),
        latent_mode: bundle.latent_mode.clone(),
        latent_precision: precision,
        constraints: bundle.constraints.clone(),
        hyper_hat: bundle.hyper_hat,
        log_marginal: bundle.log_marginal,
        objective: bundle.objective,
        converged: bundle.converged,
        grad_norm: bundle.grad_norm,
        grad_trace: bundle.grad_trace.clone(),
        newton_iterations: bundle.newton_iterations,
        outer_evaluations: bundle.outer_evaluations,
    };
    Ok((bundle, fit))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::{build, fixture};
    use crate::model::{assemble, BasisKind, Family, ModelData};
    use crate::panel::{CasePanel, ExpectedPanel, Month, MonthWindow};
    use crate::structures::{ProximityKind, SpatialStructure};

    fn single_cell(y: u64) -> AssembledModel {
        let first = Month::new(2020, 1).unwrap();
        let cases = CasePanel::new(vec!["A".into()], first, 1, vec![y]).unwrap();
        let expected = ExpectedPanel::from_values(1, 1, vec![1.0]).unwrap();
        assemble(
            &ModelSpec::null("null"),
            &ModelData {
                cases: &cases,
                expected: &expected,
                covariates: &[],
                proximity: None,
                train: MonthWindow::new(first, first).unwrap(),
            },
        )
        .unwrap()
    }

    #[test]
    fn single_cell_intercept() {
        let m = single_cell(3);
        let mut h = m.initial_hyper();
        h.log_kappa = 10f64.ln();
        let cfg = FitConfig {
            fixed_hyper: Some(h),
            ..FitConfig::default()
        };
        let f = fit(&m, &cfg).unwrap();
        assert!(f.converged);
        assert!((f.latent_mode[0] - 3f64.ln()).abs() < 1e-3);
    }

    #[test]
    fn nelder_mead_quadratic() {
        let r = nelder_mead(
            |x| (x[0] - 1.0).powi(2) + 3.0 * (x[1] + 2.0).powi(2),
            &[0.0, 0.0],
            0.5,
            1e-7,
            2000,
        );
        assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] + 2.0).abs() < 1e-6);
    }

    fn gaussian_toy(spatial: SpatialStructure) -> AssembledModel {
        let f = fixture(3, 20, 21);
        let spec = ModelSpec::new(
            "toy",
            BasisKind::Linear,
            spatial,
            spatial.needs_proximity().then_some(ProximityKind::Neighbor),
            vec!["rain".into()],
        );
        let m = build(&f, &spec).with_family(Family::Gaussian);
        let y: Vec<f64> = m
            .offset
            .iter()
            .enumerate()
            .map(|(c, o)| o + ((c * 7919) % 13) as f64 / 13.0 - 0.5)
            .collect();
        m.with_response(y)
    }

    /// Closed-form evidence of the linear-Gaussian toy: y - offset ~
    /// N(0, A S A^T + I / kappa) with S the constrained prior covariance.
    fn exact_evidence(m: &AssembledModel, h: &HyperParams) -> f64 {
        let n = m.dim();
        let q = m.prior_precision(h).to_dense();
        let k = m.layout.constraints.len();
        let mut c = DMatrix::zeros(k.max(1), n);
        for (r, row) in m.layout.constraints.iter().enumerate() {
            for &(i, w) in row {
                c[(r, i)] = w;
            }
        }
        // Orthonormal basis V of null(C).
        let v = if k == 0 {
            DMatrix::identity(n, n)
        } else {
            let svd = c.transpose().svd(true, false);
            let u = svd.u.unwrap();
            let qr = nalgebra::QR::new(
                DMatrix::from_fn(n, n, |i, j| if j < k { u[(i, j)] } else if i == j { 1.0 } else { 0.0 }),
            );
            qr.q().columns(k, n - k).into_owned()
        };
        let s = &v * (v.transpose() * &q * &v).try_inverse().unwrap() * v.transpose();
        let mut a = DMatrix::zeros(m.n_cells(), n);
        for cell in 0..m.n_cells() {
            for j in 0..m.n_fixed() {
                a[(cell, j)] = m.design[(cell, j)];
            }
            for r in m.cell_random(cell) {
                if r != usize::MAX {
                    a[(cell, r)] = 1.0;
                }
            }
        }
        let cov = &a * s * a.transpose() + DMatrix::identity(m.n_cells(), m.n_cells()) / h.kappa();
        let r = DVector::from_iterator(
            m.n_cells(),
            m.response.iter().zip(&m.offset).map(|(y, o)| y - o),
        );
        let chol = cov.cholesky().unwrap();
        let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let quad = r.dot(&chol.solve(&r));
        -0.5 * (m.n_cells() as f64 * (2.0 * PI).ln() + log_det + quad)
    }

    #[test]
    fn laplace_is_exact_for_gaussian_toy() {
        for spatial in [SpatialStructure::Icar, SpatialStructure::Independent, SpatialStructure::ProperCar] {
            let m = gaussian_toy(spatial);
            let mut h = m.hyper_from_free(&vec![0.3; m.free_hyper_names().len()]);
            h.log_kappa = 1.5;
            let solver = Solver::new(&m, FitConfig::default());
            let approx = solver.log_marginal(&h).unwrap();
            let exact = exact_evidence(&m, &h);
            assert!((approx - exact).abs() < 1e-6, "{spatial:?}: {approx} vs {exact}");
        }
    }

    fn icar_fit() -> (AssembledModel, PosteriorFit) {
        let f = fixture(4, 40, 31);
        let spec = ModelSpec::new(
            "icar",
            BasisKind::Linear,
            SpatialStructure::Icar,
            Some(ProximityKind::Neighbor),
            vec!["rain".into()],
        );
        let m = build(&f, &spec);
        let cfg = FitConfig {
            restarts: 1,
            ..FitConfig::default()
        };
        let fit = fit(&m, &cfg).unwrap();
        (m, fit)
    }

    #[test]
    fn fit_converges_and_is_deterministic() {
        let (m, a) = icar_fit();
        assert!(a.converged);
        assert!(a.grad_norm < 1e-6);
        let b = fit(&m, &FitConfig { restarts: 1, ..FitConfig::default() }).unwrap();
        assert_eq!(a.latent_mode, b.latent_mode);
        assert_eq!(a.hyper_hat, b.hyper_hat);
        let r = m.layout.constraint_residual(&a.latent_mode);
        assert!(r.iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn sampler_moments_and_constraints() {
        let (m, f) = icar_fit();
        let n = 10_000;
        let g = GaussianApprox::new(&f).unwrap();
        let s = g.sample(n, 7);
        let dim = m.dim();
        for k in 0..dim {
            let mean = s.iter().map(|x| x[k]).sum::<f64>() / n as f64;
            let sd = g.marginal_variance(k).sqrt();
            assert!((mean - f.latent_mode[k]).abs() < 3.0 * sd / (n as f64).sqrt() + 1e-12, "coordinate {k}");
        }
        for x in &s {
            assert!(m.layout.constraint_residual(x).iter().all(|v| v.abs() < 1e-10));
        }
        // Five fixed coordinates: sample covariance vs dense constrained inverse.
        let idx: Vec<usize> = (0..4).chain([m.n_fixed()]).collect();
        let dense = f.latent_precision.to_dense().try_inverse().unwrap();
        let mut c = DMatrix::zeros(dim, m.layout.constraints.len());
        for (r, row) in m.layout.constraints.iter().enumerate() {
            for &(i, w) in row {
                c[(i, r)] = w;
            }
        }
        let hc = &dense * &c;
        let cov = &dense - &hc * (c.transpose() * &hc).try_inverse().unwrap() * hc.transpose();
        for &a in &idx {
            for &b in &idx {
                let ma = f.latent_mode[a];
                let mb = f.latent_mode[b];
                let sc = s.iter().map(|x| (x[a] - ma) * (x[b] - mb)).sum::<f64>() / n as f64;
                let scale = (cov[(a, a)] * cov[(b, b)]).sqrt();
                assert!((sc - cov[(a, b)]).abs() < 0.1 * scale, "cov ({a},{b}) {sc} vs {}", cov[(a, b)]);
            }
        }
    }

    #[test]
    fn point_mass_limits() {
        let (m, mut f) = icar_fit();
        for v in f.latent_precision.values_mut() {
            *v *= 1e14;
        }
        let s = sample_latent(&f, 200, 3).unwrap();
        let (dic_v, pd) = dic(&f, &m, &s).unwrap();
        let d_mode = -2.0 * m.log_likelihood(&f.fitted_eta, &f.hyper_hat);
        assert!(pd.abs() < 1e-4);
        assert!((dic_v - d_mode).abs() < 1e-4);
        let rr = fitted_relative_risk(&f, &m, &s).unwrap();
        for (c, r) in rr.iter().enumerate() {
            let plug = (f.fitted_eta[c] - m.offset[c]).exp();
            assert!((r.lo - plug).abs() < 1e-5 * plug && (r.hi - plug).abs() < 1e-5 * plug);
            assert!(r.lo <= r.mean && r.mean <= r.hi);
        }
    }

    #[test]
    fn identical_cells_have_identical_cpo() {
        let first = Month::new(2020, 1).unwrap();
        let cases = CasePanel::new(vec!["A".into(), "B".into()], first, 10, vec![4; 20]).unwrap();
        let expected = ExpectedPanel::from_values(2, 10, vec![3.0; 20]).unwrap();
        let m = assemble(
            &ModelSpec::null("null"),
            &ModelData {
                cases: &cases,
                expected: &expected,
                covariates: &[],
                proximity: None,
                train: MonthWindow::new(first, first.offset(9)).unwrap(),
            },
        )
        .unwrap();
        let f = fit(&m, &FitConfig::default()).unwrap();
        let d = diagnose(&f, &m, 2000, 1).unwrap();
        assert!(d.cpo.iter().all(|c| (c - d.cpo[0]).abs() < 1e-6 && *c > 0.0 && *c <= 1.0));
        let mean_log = d.cpo.iter().map(|c| c.ln()).sum::<f64>() / 20.0;
        assert!((d.cv_log_score + mean_log).abs() < 1e-12);
    }

    #[test]
    fn unconverged_fit_is_rejected() {
        let (m, mut f) = icar_fit();
        f.converged = false;
        assert!(matches!(sample_latent(&f, 1, 0), Err(InferError::UnconvergedFit(_))));
        assert!(dic(&f, &m, &[]).is_err());
    }

    #[test]
    fn bundle_round_trip() {
        let (m, f) = icar_fit();
        let dir = tempfile::tempdir().unwrap();
        let bundle = FitBundle::new(&f, &m, "abc", None);
        write_fit_bundle(dir.path(), &bundle, &f).unwrap();
        let (b2, f2) = read_fit_bundle(dir.path(), &m).unwrap();
        assert_eq!(b2, bundle);
        assert_eq!(f2.latent_mode, f.latent_mode);
        assert_eq!(f2.latent_precision, f.latent_precision);
        assert_eq!(f2.fitted_eta, f.fitted_eta);
    }

    #[test]
    fn standardization_does_not_change_fitted_values() {
        let f = fixture(6, 72, 41);
        let mut spec = ModelSpec::new(
            "s",
            BasisKind::Linear,
            SpatialStructure::Icar,
            Some(ProximityKind::Neighbor),
            vec!["rain".into()],
        );
        let a = build(&f, &spec);
        spec.standardize = false;
        let b = build(&f, &spec);
        let cfg = FitConfig {
            fixed_hyper: Some(a.initial_hyper()),
            ..FitConfig::default()
        };
        let fa = fit(&a, &cfg).unwrap();
        let fb = fit(&b, &cfg).unwrap();
        for (x, y) in fa.fitted_eta.iter().zip(&fb.fitted_eta) {
            assert!((x - y).abs() < 1e-4, "{x} vs {y}");
        }
    }
}
