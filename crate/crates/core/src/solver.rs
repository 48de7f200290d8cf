//! Penalized GLM path solver.
//!
//! Minimizes, for each `lambda` on a decreasing path,
//!
//! ```text
//! loss(b0, beta) + lambda * sum_j w_j * (alpha * |beta_j| + (1 - alpha) / 2 * beta_j^2)
//! ```
//!
//! where `loss` is `1/(2n) * RSS` (gaussian) or the mean negative
//! log-likelihood (binomial), subject to per-coordinate sign constraints.
//! Features are used as given (no standardization); the intercept is always
//! present and unpenalized, and a zero penalty weight leaves a coordinate
//! unpenalized.
//!
//! Cyclic coordinate descent is run along the centered direction of each
//! feature, which updates the coordinate and the intercept jointly. The
//! binomial family wraps it in an IRLS loop.

use std::io::Write;

use ndarray::{Array2, ArrayView1, ShapeBuilder};

use crate::error::{PrsError, Result};
use crate::linalg::{dot, sigmoid};
use crate::univariate::WEIGHT_FLOOR;
use crate::Family;

/// Sign constraint for one coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Constraint {
    Free,
    NonNegative,
    NonPositive,
}

impl Constraint {
    #[inline]
    pub fn clip(self, v: f64) -> f64 {
        match self {
            Constraint::Free => v,
            Constraint::NonNegative => v.max(0.0),
            Constraint::NonPositive => v.min(0.0),
        }
    }

    pub fn admits(self, v: f64) -> bool {
        match self {
            Constraint::Free => true,
            Constraint::NonNegative => v >= 0.0,
            Constraint::NonPositive => v <= 0.0,
        }
    }
}

/// One second-stage problem. Immutable once built and safe to share.
#[derive(Debug, Clone)]
pub struct PenalizedProblem {
    features: Array2<f64>,
    response: Vec<f64>,
    family: Family,
    penalty_weight: Vec<f64>,
    constraint: Vec<Constraint>,
    alpha: f64,
}

impl PenalizedProblem {
    /// `features` is `n x m`; it is stored column-major.
    pub fn new(
        features: Array2<f64>,
        response: Vec<f64>,
        family: Family,
        penalty_weight: Vec<f64>,
        constraint: Vec<Constraint>,
        alpha: f64,
    ) -> Result<Self> {
        let (n, m) = features.dim();
        if response.len() != n {
            return Err(PrsError::dimension(format!("{n} feature rows but {} responses", response.len())));
        }
        if penalty_weight.len() != m || constraint.len() != m {
            return Err(PrsError::dimension("penalty weights and constraints must have one entry per feature"));
        }
        if n == 0 {
            return Err(PrsError::dimension("problem has no observations"));
        }
        if penalty_weight.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(PrsError::invalid("penalty weights must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(PrsError::invalid(format!("alpha must lie in [0, 1], got {alpha}")));
        }
        if features.iter().chain(&response).any(|v| !v.is_finite()) {
            return Err(PrsError::invalid("features and response must be finite"));
        }
        if family == Family::Binomial && response.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(PrsError::invalid("binomial response must be coded 0/1"));
        }
        let features = if features.t().is_standard_layout() {
            features
        } else {
            let mut f = Array2::zeros((n, m).f());
            f.assign(&features);
            f
        };
        Ok(PenalizedProblem {
            features,
            response,
            family,
            penalty_weight,
            constraint,
            alpha,
        })
    }

    /// Lasso with free signs and unit weights.
    pub fn lasso(features: Array2<f64>, response: Vec<f64>, family: Family) -> Result<Self> {
        let m = features.ncols();
        Self::new(features, response, family, vec![1.0; m], vec![Constraint::Free; m], 1.0)
    }

    pub fn n_obs(&self) -> usize {
        self.features.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn penalty_weight(&self) -> &[f64] {
        &self.penalty_weight
    }

    pub fn constraint(&self) -> &[Constraint] {
        &self.constraint
    }

    pub fn response(&self) -> &[f64] {
        &self.response
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    fn column(&self, j: usize) -> &[f64] {
        self.features
            .column(j)
            .to_slice()
            .expect("features are stored column-major")
    }

    /// Linear predictor `b0 + X beta`.
    pub fn linear_predictor(&self, intercept: f64, beta: &[f64]) -> Vec<f64> {
        let mut eta = vec![intercept; self.n_obs()];
        for (j, &b) in beta.iter().enumerate() {
            if b != 0.0 {
                for (e, x) in eta.iter_mut().zip(self.column(j)) {
                    *e += b * x;
                }
            }
        }
        eta
    }

    /// Mean loss (half mean squared error, or mean negative log-likelihood).
    pub fn loss(&self, eta: &[f64]) -> f64 {
        let n = self.n_obs() as f64;
        match self.family {
            Family::Gaussian => {
                self.response.iter().zip(eta).map(|(y, e)| (y - e) * (y - e)).sum::<f64>() / (2.0 * n)
            }
            Family::Binomial => {
                self.response
                    .iter()
                    .zip(eta)
                    .map(|(&y, &e)| softplus(e) - y * e)
                    .sum::<f64>()
                    / n
            }
        }
    }

    /// Deviance: RSS for gaussian, `-2 log L` for binomial.
    pub fn deviance(&self, eta: &[f64]) -> f64 {
        2.0 * self.n_obs() as f64 * self.loss(eta)
    }

    pub fn penalty(&self, beta: &[f64], lambda: f64) -> f64 {
        beta.iter()
            .zip(&self.penalty_weight)
            .map(|(b, w)| w * (self.alpha * b.abs() + 0.5 * (1.0 - self.alpha) * b * b))
            .sum::<f64>()
            * lambda
    }

    pub fn objective(&self, intercept: f64, beta: &[f64], lambda: f64) -> f64 {
        self.loss(&self.linear_predictor(intercept, beta)) + self.penalty(beta, lambda)
    }

    fn mean_response(&self, eta: f64) -> f64 {
        match self.family {
            Family::Gaussian => eta,
            Family::Binomial => sigmoid(eta),
        }
    }

    /// Loss gradient `g_j = -(1/n) sum_i x_ij (y_i - mu_i)` and the intercept
    /// component `-(1/n) sum_i (y_i - mu_i)`.
    pub fn gradient(&self, intercept: f64, beta: &[f64]) -> (f64, Vec<f64>) {
        let n = self.n_obs() as f64;
        let resid: Vec<f64> = self
            .linear_predictor(intercept, beta)
            .iter()
            .zip(&self.response)
            .map(|(&e, &y)| y - self.mean_response(e))
            .collect();
        let g0 = -resid.iter().sum::<f64>() / n;
        let g = (0..self.n_features()).map(|j| -dot(self.column(j), &resid) / n).collect();
        (g0, g)
    }

    fn has_penalized(&self) -> bool {
        self.penalty_weight.iter().any(|&w| w > 0.0)
    }
}

fn softplus(e: f64) -> f64 {
    if e > 0.0 {
        e + (-e).exp().ln_1p()
    } else {
        e.exp().ln_1p()
    }
}

#[inline]
fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Effective l1 mixing used to anchor the path when `alpha` is (near) zero.
const ALPHA_FLOOR: f64 = 1e-3;

/// Decreasing sequence of penalty levels.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaPath {
    lambdas: Vec<f64>,
    min_ratio: f64,
}

impl LambdaPath {
    /// `n_points` values spaced geometrically from `lambda_max` down to
    /// `min_ratio * lambda_max`.
    pub fn geometric(lambda_max: f64, n_points: usize, min_ratio: f64) -> Result<Self> {
        if !(lambda_max > 0.0 && lambda_max.is_finite()) {
            return Err(PrsError::invalid(format!("lambda_max must be positive, got {lambda_max}")));
        }
        if n_points == 0 {
            return Err(PrsError::invalid("a path needs at least one point"));
        }
        if !(min_ratio > 0.0 && min_ratio < 1.0) && n_points > 1 {
            return Err(PrsError::invalid(format!("min_ratio must lie in (0, 1), got {min_ratio}")));
        }
        let lambdas = if n_points == 1 {
            vec![lambda_max]
        } else {
            let step = min_ratio.ln() / (n_points - 1) as f64;
            (0..n_points).map(|k| lambda_max * (step * k as f64).exp()).collect()
        };
        Ok(LambdaPath { lambdas, min_ratio })
    }

    pub fn from_values(lambdas: Vec<f64>) -> Result<Self> {
        if lambdas.is_empty() {
            return Err(PrsError::invalid("a path needs at least one point"));
        }
        if lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(PrsError::invalid("lambdas must be finite and non-negative"));
        }
        if lambdas.windows(2).any(|w| w[1] >= w[0]) {
            return Err(PrsError::invalid("lambdas must be strictly decreasing"));
        }
        let min_ratio = lambdas[lambdas.len() - 1] / lambdas[0];
        Ok(LambdaPath { lambdas, min_ratio })
    }

    /// Default grid: 100 points, `min_ratio` 0.01 when `n < m`, else 1e-4.
    pub fn default_for(problem: &PenalizedProblem) -> Result<Self> {
        let min_ratio = if problem.n_obs() < problem.n_features() { 1e-2 } else { 1e-4 };
        Self::geometric(lambda_max(problem)?, 100, min_ratio)
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn len(&self) -> usize {
        self.lambdas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambdas.is_empty()
    }

    pub fn min_ratio(&self) -> f64 {
        self.min_ratio
    }

    /// The first `k + 1` points.
    pub fn truncated(&self, k: usize) -> LambdaPath {
        let lambdas = self.lambdas[..=k.min(self.lambdas.len() - 1)].to_vec();
        let min_ratio = lambdas[lambdas.len() - 1] / lambdas[0];
        LambdaPath { lambdas, min_ratio }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    /// Convergence threshold on the largest per-coordinate objective decrease
    /// in a sweep, as a fraction of the null deviance scale.
    pub tol: f64,
    /// Maximum coordinate-descent sweeps per lambda.
    pub max_iter: usize,
    /// Maximum IRLS refreshes per lambda (binomial).
    pub max_outer: usize,
    /// Required KKT violation relative to `max_j |g_j|` at the unpenalized
    /// fit; `None` skips the refinement and only reports the violation.
    pub kkt_tol: Option<f64>,
    /// Record the penalized objective after every sweep.
    pub record_objective: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            tol: 1e-7,
            max_iter: 100_000,
            max_outer: 25,
            kkt_tol: Some(1e-6),
            record_objective: false,
        }
    }
}

/// Solution and diagnostics at one lambda.
#[derive(Debug, Clone, PartialEq)]
pub struct PathPoint {
    pub lambda: f64,
    pub intercept: f64,
    /// Non-zero coefficients as `(feature, value)`, ascending by feature.
    pub coefficients: Vec<(usize, f64)>,
    /// Coordinate-descent sweeps used at this lambda.
    pub iterations: usize,
    pub outer_iterations: usize,
    /// Absolute maximum KKT violation.
    pub kkt_violation: f64,
    pub converged: bool,
    pub objective: f64,
    pub deviance: f64,
    /// Non-zero penalized coefficients.
    pub n_nonzero: usize,
    /// Objective after each sweep, when requested.
    pub objective_trace: Vec<f64>,
}

impl PathPoint {
    pub fn beta(&self, m: usize) -> Vec<f64> {
        let mut beta = vec![0.0; m];
        for &(j, b) in &self.coefficients {
            beta[j] = b;
        }
        beta
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathFit {
    pub points: Vec<PathPoint>,
    pub n_features: usize,
    /// `max_j |g_j|` over penalized coordinates at the unpenalized fit.
    pub gradient_scale: f64,
    pub null_deviance: f64,
}

impl PathFit {
    pub fn all_converged(&self) -> bool {
        self.points.iter().all(|p| p.converged)
    }

    /// Diagnostics as CSV: lambda, n_nonzero, deviance, kkt_violation, iterations.
    pub fn write_diagnostics<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["lambda", "n_nonzero", "deviance", "kkt_violation", "iterations"])?;
        for p in &self.points {
            out.write_record([
                p.lambda.to_string(),
                p.n_nonzero.to_string(),
                p.deviance.to_string(),
                p.kkt_violation.to_string(),
                p.iterations.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Maximum stationarity violation of `(intercept, beta)` at `lambda`.
pub fn kkt_check(problem: &PenalizedProblem, intercept: f64, beta: &[f64], lambda: f64) -> f64 {
    let (g0, g) = problem.gradient(intercept, beta);
    kkt_from_gradient(problem, g0, &g, beta, lambda)
}

fn kkt_from_gradient(problem: &PenalizedProblem, g0: f64, g: &[f64], beta: &[f64], lambda: f64) -> f64 {
    (0..beta.len()).fold(g0.abs(), |worst, j| {
        worst.max(coordinate_violation(problem, j, g[j], beta[j], lambda))
    })
}

fn coordinate_violation(problem: &PenalizedProblem, j: usize, g: f64, b: f64, lambda: f64) -> f64 {
    let w = problem.penalty_weight[j];
    let l1 = lambda * problem.alpha * w;
    let l2 = lambda * (1.0 - problem.alpha) * w;
    let smooth = g + l2 * b;
    if b != 0.0 {
        (smooth + l1 * b.signum()).abs()
    } else {
        match problem.constraint[j] {
            Constraint::Free => (smooth.abs() - l1).max(0.0),
            // zero is optimal unless moving into the feasible side helps
            Constraint::NonNegative => (-smooth - l1).max(0.0),
            Constraint::NonPositive => (smooth - l1).max(0.0),
        }
    }
}

/// How strongly the loss pulls coordinate `j` away from zero in a feasible
/// direction.
fn feasible_push(constraint: Constraint, g: f64) -> f64 {
    match constraint {
        Constraint::Free => g.abs(),
        Constraint::NonNegative => (-g).max(0.0),
        Constraint::NonPositive => g.max(0.0),
    }
}

#[derive(Debug, Default)]
struct SolveStats {
    sweeps: usize,
    outer: usize,
    trace: Vec<f64>,
}

/// Working state of coordinate descent on one problem.
struct Engine<'a> {
    problem: &'a PenalizedProblem,
    config: SolverConfig,
    beta: Vec<f64>,
    intercept: f64,
    weights: Vec<f64>,
    working: Vec<f64>,
    resid: Vec<f64>,
    wsum: f64,
    col_mean: Vec<f64>,
    curvature: Vec<f64>,
    /// Weight generation each column's moments were computed under.
    moment_version: Vec<u64>,
    version: u64,
    penalized: Vec<usize>,
    unpenalized: Vec<usize>,
    null_scale: f64,
}

impl<'a> Engine<'a> {
    fn new(problem: &'a PenalizedProblem, config: SolverConfig) -> Self {
        let n = problem.n_obs();
        let m = problem.n_features();
        let ybar = problem.response.iter().sum::<f64>() / n as f64;
        let var = problem.response.iter().map(|y| (y - ybar) * (y - ybar)).sum::<f64>() / n as f64;
        let (penalized, unpenalized) = (0..m).partition(|&j| problem.penalty_weight[j] > 0.0);
        let mut engine = Engine {
            problem,
            config,
            beta: vec![0.0; m],
            intercept: 0.0,
            weights: vec![1.0; n],
            working: problem.response.clone(),
            resid: problem.response.clone(),
            wsum: n as f64,
            col_mean: vec![0.0; m],
            curvature: vec![0.0; m],
            moment_version: vec![0; m],
            version: 1,
            penalized,
            unpenalized,
            null_scale: if var > 0.0 { var } else { 1.0 },
        };
        if problem.family == Family::Binomial {
            let p = ybar.clamp(1e-6, 1.0 - 1e-6);
            engine.intercept = (p / (1.0 - p)).ln();
        }
        engine.refresh();
        engine
    }

    fn n(&self) -> f64 {
        self.problem.n_obs() as f64
    }

    /// Rebuilds the residual (and, for binomial, the weights and working
    /// response) at the current coefficients, then re-centres the intercept.
    /// Column moments under new weights are recomputed on first use.
    fn refresh(&mut self) {
        let problem = self.problem;
        let eta = problem.linear_predictor(self.intercept, &self.beta);
        match problem.family {
            Family::Gaussian => {
                for i in 0..eta.len() {
                    self.resid[i] = problem.response[i] - eta[i];
                }
            }
            Family::Binomial => {
                for i in 0..eta.len() {
                    let p = sigmoid(eta[i]);
                    let w = (p * (1.0 - p)).max(WEIGHT_FLOOR);
                    self.weights[i] = w;
                    self.working[i] = eta[i] + (problem.response[i] - p) / w;
                    self.resid[i] = (problem.response[i] - p) / w;
                }
                self.wsum = self.weights.iter().sum();
                self.version += 1;
            }
        }
        self.recenter();
    }

    fn ensure_moments(&mut self, j: usize) {
        if self.moment_version[j] == self.version {
            return;
        }
        let x = self.problem.column(j);
        let (sx, sxx) = match self.problem.family {
            Family::Gaussian => (x.iter().sum::<f64>(), dot(x, x)),
            Family::Binomial => weighted_sums(x, &self.weights),
        };
        let m = sx / self.wsum;
        self.col_mean[j] = m;
        self.curvature[j] = ((sxx - self.wsum * m * m) / self.n()).max(0.0);
        self.moment_version[j] = self.version;
    }

    fn recenter(&mut self) {
        let shift = dot(&self.weights, &self.resid) / self.wsum;
        self.intercept += shift;
        for r in &mut self.resid {
            *r -= shift;
        }
    }

    /// One cyclic pass over `coords`; returns the largest `a_j * delta^2`.
    fn sweep(&mut self, coords: &[usize], lambda: f64) -> f64 {
        let problem = self.problem;
        let n = self.n();
        let alpha = problem.alpha;
        let gaussian = problem.family == Family::Gaussian;
        let mut max_dec = 0.0f64;
        for &j in coords {
            self.ensure_moments(j);
            let a = self.curvature[j];
            let old = self.beta[j];
            if a <= 0.0 {
                // constant column: absorbed by the intercept
                if old != 0.0 {
                    self.beta[j] = 0.0;
                }
                continue;
            }
            let x = problem.column(j);
            let grad = if gaussian {
                dot(x, &self.resid)
            } else {
                crate::linalg::dot3(x, &self.weights, &self.resid)
            } / n;
            let w = problem.penalty_weight[j];
            let c = grad + a * old;
            let new = problem.constraint[j].clip(soft_threshold(c, lambda * alpha * w) / (a + lambda * (1.0 - alpha) * w));
            let delta = new - old;
            if delta != 0.0 {
                self.beta[j] = new;
                let m = self.col_mean[j];
                for (r, xi) in self.resid.iter_mut().zip(x) {
                    *r -= delta * (xi - m);
                }
                self.intercept -= delta * m;
                max_dec = max_dec.max(a * delta * delta);
            }
        }
        max_dec
    }

    fn active_set(&self) -> Vec<usize> {
        let mut active: Vec<usize> = self
            .penalized
            .iter()
            .copied()
            .filter(|&j| self.beta[j] != 0.0)
            .chain(self.unpenalized.iter().copied())
            .collect();
        active.sort_unstable();
        active
    }

    /// Coordinate descent on the current quadratic model until the full
    /// sweep decrease falls below `thr`. Returns sweeps used and whether the
    /// budget was respected.
    fn inner(&mut self, coords: &[usize], lambda: f64, thr: f64, budget: usize, trace: &mut Vec<f64>) -> (usize, bool) {
        let mut sweeps = 0;
        let record = self.config.record_objective;
        loop {
            let dec = self.sweep(coords, lambda);
            sweeps += 1;
            if record {
                trace.push(self.problem.objective(self.intercept, &self.beta, lambda));
            }
            if dec < thr {
                return (sweeps, true);
            }
            if sweeps >= budget {
                return (sweeps, false);
            }
            let active = self.active_set();
            loop {
                let dec = self.sweep(&active, lambda);
                sweeps += 1;
                if record {
                    trace.push(self.problem.objective(self.intercept, &self.beta, lambda));
                }
                if dec < thr {
                    break;
                }
                if sweeps >= budget {
                    return (sweeps, false);
                }
            }
        }
    }

    /// Loss gradient at the current state for `coords` (aligned with it),
    /// plus the intercept component.
    fn restricted_gradient(&self, coords: &[usize]) -> (f64, Vec<f64>) {
        let problem = self.problem;
        let n = self.n();
        let resid: Vec<f64> = problem
            .linear_predictor(self.intercept, &self.beta)
            .iter()
            .zip(&problem.response)
            .map(|(&e, &y)| y - problem.mean_response(e))
            .collect();
        let g0 = -resid.iter().sum::<f64>() / n;
        (g0, coords.iter().map(|&j| -dot(problem.column(j), &resid) / n).collect())
    }

    /// Coordinate descent over `coords`, tightening the sweep threshold until
    /// the KKT violation restricted to `coords` is at most `target`. With a
    /// finite target the KKT condition alone decides convergence; an IRLS
    /// loop that hits its outer cap gets another round at a tighter threshold.
    fn solve_on(&mut self, coords: &[usize], lambda: f64, target: f64, stats: &mut SolveStats) -> bool {
        let mut thr = self.config.tol * self.null_scale;
        loop {
            let converged = match self.problem.family {
                Family::Gaussian => {
                    let budget = self.config.max_iter.saturating_sub(stats.sweeps).max(1);
                    let (s, ok) = self.inner(coords, lambda, thr, budget, &mut stats.trace);
                    stats.sweeps += s;
                    stats.outer += 1;
                    ok
                }
                Family::Binomial => self.irls(coords, lambda, thr, stats),
            };
            if !target.is_finite() {
                return converged;
            }
            let (g0, g) = self.restricted_gradient(coords);
            let kkt = coords
                .iter()
                .zip(&g)
                .fold(g0.abs(), |w, (&j, &gj)| w.max(coordinate_violation(self.problem, j, gj, self.beta[j], lambda)));
            if kkt <= target {
                return true;
            }
            if stats.sweeps >= self.config.max_iter || thr < 1e-30 {
                return false;
            }
            thr *= 1e-2;
        }
    }

    /// Solves at `lambda`, warm-started from the current state.
    ///
    /// Coordinates start from a sequential strong-rule working set built
    /// from `gradient` (the full loss gradient at the warm start) and
    /// `screen_lambda`; any coordinate outside it that violates the KKT
    /// conditions afterwards is added and the solve repeated. Returns the
    /// point and the full gradient at the solution.
    fn solve(&mut self, lambda: f64, screen_lambda: f64, gradient: &[f64], gradient_scale: f64) -> (PathPoint, Vec<f64>) {
        let problem = self.problem;
        let m = problem.n_features();
        let target = match self.config.kkt_tol {
            Some(t) => t * gradient_scale,
            None => f64::INFINITY,
        };
        let screen = if target.is_finite() { target } else { 1e-6 * gradient_scale };
        let mut in_set: Vec<bool> = (0..m)
            .map(|j| {
                let w = problem.penalty_weight[j];
                w == 0.0
                    || self.beta[j] != 0.0
                    || feasible_push(problem.constraint[j], gradient[j]) >= problem.alpha * w * screen_lambda
            })
            .collect();
        let mut stats = SolveStats::default();
        loop {
            let working: Vec<usize> = (0..m).filter(|&j| in_set[j]).collect();
            let converged = self.solve_on(&working, lambda, target, &mut stats);
            let (g0, g) = problem.gradient(self.intercept, &self.beta);
            let mut added = false;
            for j in 0..m {
                if !in_set[j] && coordinate_violation(problem, j, g[j], self.beta[j], lambda) > screen {
                    in_set[j] = true;
                    added = true;
                }
            }
            if !added || !converged || stats.sweeps >= self.config.max_iter {
                let kkt = kkt_from_gradient(problem, g0, &g, &self.beta, lambda);
                let point = self.point(lambda, stats, converged && kkt <= target);
                return (PathPoint { kkt_violation: kkt, ..point }, g);
            }
        }
    }

    fn point(&self, lambda: f64, stats: SolveStats, converged: bool) -> PathPoint {
        let problem = self.problem;
        let eta = problem.linear_predictor(self.intercept, &self.beta);
        let coefficients: Vec<(usize, f64)> = self
            .beta
            .iter()
            .enumerate()
            .filter(|(_, &b)| b != 0.0)
            .map(|(j, &b)| (j, b))
            .collect();
        PathPoint {
            lambda,
            intercept: self.intercept,
            n_nonzero: coefficients.iter().filter(|(j, _)| problem.penalty_weight[*j] > 0.0).count(),
            coefficients,
            iterations: stats.sweeps,
            outer_iterations: stats.outer,
            kkt_violation: f64::NAN,
            converged,
            objective: problem.loss(&eta) + problem.penalty(&self.beta, lambda),
            deviance: problem.deviance(&eta),
            objective_trace: stats.trace,
        }
    }

    /// IRLS outer loop with step halving on objective increase.
    fn irls(
        &mut self,
        coords: &[usize],
        lambda: f64,
        thr: f64,
        stats: &mut SolveStats,
    ) -> bool {
        let problem = self.problem;
        let mut prev_obj = problem.objective(self.intercept, &self.beta, lambda);
        for _ in 0..self.config.max_outer {
            stats.outer += 1;
            let old_beta = self.beta.clone();
            let old_intercept = self.intercept;
            self.refresh();
            let budget = self.config.max_iter.saturating_sub(stats.sweeps).max(1);
            let (s, ok) = self.inner(coords, lambda, thr, budget, &mut stats.trace);
            stats.sweeps += s;
            let mut obj = problem.objective(self.intercept, &self.beta, lambda);
            let mut halvings = 0;
            while obj > prev_obj + 1e-12 * prev_obj.abs() && halvings < 30 {
                for (b, o) in self.beta.iter_mut().zip(&old_beta) {
                    *b = 0.5 * (*b + o);
                }
                self.intercept = 0.5 * (self.intercept + old_intercept);
                obj = problem.objective(self.intercept, &self.beta, lambda);
                halvings += 1;
            }
            let max_change = self
                .beta
                .iter()
                .zip(&old_beta)
                .enumerate()
                .map(|(j, (b, o))| self.curvature[j] * (b - o) * (b - o))
                .fold((self.intercept - old_intercept).powi(2) * 0.25, f64::max);
            let rel = (prev_obj - obj).abs() / prev_obj.abs().max(1e-300);
            prev_obj = obj;
            if !ok {
                return false;
            }
            if max_change < thr && rel < self.config.tol.max(1e-14) {
                // leave weights consistent with the final coefficients
                return true;
            }
        }
        false
    }
}

fn weighted_sums(x: &[f64], w: &[f64]) -> (f64, f64) {
    let mut s = [0.0f64; 2];
    let mut q = [0.0f64; 2];
    let chunks = x.len() / 2;
    for k in 0..chunks {
        let i = 2 * k;
        let a = w[i] * x[i];
        let b = w[i + 1] * x[i + 1];
        s[0] += a;
        s[1] += b;
        q[0] += a * x[i];
        q[1] += b * x[i + 1];
    }
    let (mut ts, mut tq) = (0.0, 0.0);
    for i in 2 * chunks..x.len() {
        ts += w[i] * x[i];
        tq += w[i] * x[i] * x[i];
    }
    (s[0] + s[1] + ts, q[0] + q[1] + tq)
}

/// Fit of intercept and unpenalized coordinates with every penalized
/// coefficient at zero, plus the loss gradient there.
struct NullFit {
    intercept: f64,
    beta: Vec<f64>,
    gradient: Vec<f64>,
    gradient_scale: f64,
    lambda_max: f64,
    null_deviance: f64,
}

fn null_fit(problem: &PenalizedProblem) -> Result<NullFit> {
    if !problem.has_penalized() {
        return Err(PrsError::invalid("every penalty weight is zero"));
    }
    let config = SolverConfig {
        tol: 1e-16,
        max_iter: 10_000,
        max_outer: 100,
        kkt_tol: None,
        record_objective: false,
    };
    let mut engine = Engine::new(problem, config);
    if !engine.unpenalized.is_empty() {
        let coords = engine.unpenalized.clone();
        engine.solve_on(&coords, 0.0, f64::INFINITY, &mut SolveStats::default());
    } else if problem.family == Family::Binomial {
        engine.refresh();
    }
    let (_, gradient) = problem.gradient(engine.intercept, &engine.beta);
    let alpha = problem.alpha.max(ALPHA_FLOOR);
    let mut lambda_max = 0.0f64;
    let mut gradient_scale = 0.0f64;
    for &j in &engine.penalized {
        let g = gradient[j];
        gradient_scale = gradient_scale.max(g.abs());
        // descent direction is -g; a constrained coordinate only activates
        // when that direction is feasible
        let push = match problem.constraint[j] {
            Constraint::Free => g.abs(),
            Constraint::NonNegative => (-g).max(0.0),
            Constraint::NonPositive => g.max(0.0),
        };
        lambda_max = lambda_max.max(push / (alpha * problem.penalty_weight[j]));
    }
    let eta = problem.linear_predictor(engine.intercept, &engine.beta);
    Ok(NullFit {
        intercept: engine.intercept,
        beta: engine.beta,
        gradient,
        gradient_scale: if gradient_scale > 0.0 { gradient_scale } else { 1.0 },
        // rounding slack so that the first path point is exactly sparse
        lambda_max: lambda_max * (1.0 + 1e-10),
        null_deviance: problem.deviance(&eta),
    })
}

/// Smallest lambda at which every penalized coefficient is zero.
pub fn lambda_max(problem: &PenalizedProblem) -> Result<f64> {
    Ok(null_fit(problem)?.lambda_max)
}

/// Gradient of the loss at the unpenalized fit (all penalized coefficients zero).
pub fn null_gradient(problem: &PenalizedProblem) -> Result<Vec<f64>> {
    Ok(null_fit(problem)?.gradient)
}

/// Solves the problem along `path`, warm-starting each lambda from the
/// previous solution.
pub fn fit_path(problem: &PenalizedProblem, path: &LambdaPath, config: &SolverConfig) -> Result<PathFit> {
    let null = null_fit(problem)?;
    let mut engine = Engine::new(problem, *config);
    engine.beta.clone_from(&null.beta);
    engine.intercept = null.intercept;
    engine.refresh();
    let mut gradient = null.gradient.clone();
    let mut previous = null.lambda_max;
    let mut points = Vec::with_capacity(path.len());
    for &lambda in path.lambdas() {
        let (point, g) = engine.solve(lambda, 2.0 * lambda - previous, &gradient, null.gradient_scale);
        points.push(point);
        gradient = g;
        previous = lambda;
    }
    Ok(PathFit {
        points,
        n_features: problem.n_features(),
        gradient_scale: null.gradient_scale,
        null_deviance: null.null_deviance,
    })
}

/// Solves a single lambda from a cold start.
pub fn fit_single(problem: &PenalizedProblem, lambda: f64, config: &SolverConfig) -> Result<PathPoint> {
    let path = LambdaPath::from_values(vec![lambda])?;
    Ok(fit_path(problem, &path, config)?.points.remove(0))
}

/// `intercept + features * beta` for a dense coefficient vector.
pub fn predict_dense(features: &Array2<f64>, intercept: f64, beta: ArrayView1<f64>) -> Vec<f64> {
    let mut eta = features.dot(&beta);
    eta.mapv_inplace(|v| v + intercept);
    eta.to_vec()
}
