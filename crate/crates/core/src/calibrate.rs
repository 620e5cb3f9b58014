//! Fits of the detector model families to measured curves or to stated
//! operating targets.
//!
//! Two model families are covered: the sum-of-exponentials afterpulse
//! decay (fit either to a measured p_ap(dt) curve or to a set of
//! integral constraint targets) and the exponential dark-count versus
//! efficiency curve (single series or a joint fit sharing one slope
//! across two temperature series).
//!
//! The afterpulse fits use variable projection: for fixed lifetimes the
//! amplitudes solve a non-negative weighted least-squares problem, so
//! the nonlinear search runs over log-lifetimes only, from a
//! deterministic log-uniform multistart, with a Levenberg-Marquardt
//! polish over the full parameter set.

use crate::detector::{AfterpulseModel, AfterpulseTerm, DarkCountModel, DetectorError};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Multistart lifetime search range, seconds.
const LIFETIME_RANGE_S: (f64, f64) = (10e-9, 100e-6);
/// Random multistart points per fitted term.
const STARTS_PER_TERM: usize = 8;
/// Seed for the deterministic multistart draws.
const MULTISTART_SEED: u64 = 0x5EED_CA1B;

#[derive(Debug, Error)]
pub enum CalibrateError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("fit failed to converge: {message} (best chi2 so far: {best_chi2})")]
    FitFailure { message: String, best_chi2: f64 },
    #[error("no model satisfies the constraint targets; violated: {}", violations.join("; "))]
    Infeasible { violations: Vec<String> },
    #[error(transparent)]
    Detector(#[from] DetectorError),
}

type Result<T> = std::result::Result<T, CalibrateError>;

/// One measured afterpulse probability point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApPoint {
    pub dt_s: f64,
    pub p_ap: f64,
    /// Counting uncertainty; used for inverse-variance weighting when
    /// present on every point.
    pub std_error: Option<f64>,
}

/// A measured p_ap(dt) curve, held sorted by delay.
#[derive(Debug, Clone, PartialEq)]
pub struct AfterpulseDataset {
    points: Vec<ApPoint>,
}

impl AfterpulseDataset {
    /// Points are sorted by delay on construction, so the fit result is
    /// independent of input order. Delays must be positive and
    /// distinct; probabilities in [0, 1].
    pub fn new(mut points: Vec<ApPoint>) -> Result<Self> {
        for p in &points {
            if !(p.dt_s.is_finite() && p.dt_s > 0.0) {
                return Err(CalibrateError::InvalidData(format!(
                    "delay must be > 0, got {}",
                    p.dt_s
                )));
            }
            if !(0.0..=1.0).contains(&p.p_ap) {
                return Err(CalibrateError::InvalidData(format!(
                    "afterpulse probability {} outside [0, 1]",
                    p.p_ap
                )));
            }
            if let Some(se) = p.std_error {
                if !(se.is_finite() && se > 0.0) {
                    return Err(CalibrateError::InvalidData(format!(
                        "standard error must be > 0, got {se}"
                    )));
                }
            }
        }
        points.sort_by(|a, b| a.dt_s.total_cmp(&b.dt_s));
        if points.windows(2).any(|w| w[0].dt_s == w[1].dt_s) {
            return Err(CalibrateError::InvalidData(
                "duplicate delay values in dataset".into(),
            ));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[ApPoint] {
        &self.points
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitDiagnostics {
    pub chi2: f64,
    pub dof: usize,
    pub chi2_per_dof: f64,
    /// chi2 normalized by the weighted sum of squared observations; a
    /// scale-free measure of residual size.
    pub relative_chi2: f64,
}

// ---------------------------------------------------------------------------
// Small numerical kernels.
// ---------------------------------------------------------------------------

fn lstsq(x: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    x.clone()
        .svd(true, true)
        .solve(y, 1e-14)
        .unwrap_or_else(|_| DVector::zeros(x.ncols()))
}

/// Non-negative least squares for the handful of amplitude columns,
/// Lawson-Hanson style active set.
fn nnls(x: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    let n = x.ncols();
    let mut passive = vec![false; n];
    let mut a = DVector::zeros(n);
    for _ in 0..(4 * n + 8) {
        let resid = y - x * &a;
        let grad = x.transpose() * &resid;
        let mut enter: Option<(usize, f64)> = None;
        for i in 0..n {
            if !passive[i] && grad[i] > 1e-12 && enter.is_none_or(|(_, g)| grad[i] > g) {
                enter = Some((i, grad[i]));
            }
        }
        let Some((enter, _)) = enter else { break };
        passive[enter] = true;
        loop {
            let idx: Vec<usize> = (0..n).filter(|&i| passive[i]).collect();
            if idx.is_empty() {
                break;
            }
            let xp = x.select_columns(idx.iter());
            let s = lstsq(&xp, y);
            if s.iter().all(|&v| v > 0.0) {
                a.fill(0.0);
                for (k, &i) in idx.iter().enumerate() {
                    a[i] = s[k];
                }
                break;
            }
            let mut alpha = 1.0f64;
            for (k, &i) in idx.iter().enumerate() {
                if s[k] <= 0.0 && a[i] - s[k] > 0.0 {
                    alpha = alpha.min(a[i] / (a[i] - s[k]));
                }
            }
            for (k, &i) in idx.iter().enumerate() {
                a[i] += alpha * (s[k] - a[i]);
                if a[i] <= 1e-15 {
                    a[i] = 0.0;
                    passive[i] = false;
                }
            }
        }
    }
    a
}

struct NelderMead {
    max_evals: usize,
    f_tol: f64,
    x_tol: f64,
}

impl NelderMead {
    fn minimize<F: FnMut(&[f64]) -> f64>(
        &self,
        mut f: F,
        x0: &[f64],
        step: f64,
    ) -> (Vec<f64>, f64) {
        let n = x0.len();
        let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
        simplex.push((x0.to_vec(), f(x0)));
        for i in 0..n {
            let mut x = x0.to_vec();
            x[i] += step;
            let fx = f(&x);
            simplex.push((x, fx));
        }
        let mut evals = n + 1;
        while evals < self.max_evals {
            simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
            let best = simplex[0].1;
            let worst = simplex[n].1;
            let spread: f64 = (0..n)
                .map(|i| {
                    let (lo, hi) = simplex
                        .iter()
                        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| {
                            (lo.min(s.0[i]), hi.max(s.0[i]))
                        });
                    hi - lo
                })
                .fold(0.0f64, f64::max);
            if (worst - best).abs() <= self.f_tol * (1.0 + best.abs()) && spread <= self.x_tol {
                break;
            }
            let centroid: Vec<f64> = (0..n)
                .map(|i| simplex[..n].iter().map(|s| s.0[i]).sum::<f64>() / n as f64)
                .collect();
            let at = |t: f64| -> Vec<f64> {
                (0..n)
                    .map(|i| centroid[i] + t * (simplex[n].0[i] - centroid[i]))
                    .collect()
            };
            let reflected = at(-1.0);
            let fr = f(&reflected);
            evals += 1;
            if fr < simplex[0].1 {
                let expanded = at(-2.0);
                let fe = f(&expanded);
                evals += 1;
                simplex[n] = if fe < fr {
                    (expanded, fe)
                } else {
                    (reflected, fr)
                };
            } else if fr < simplex[n - 1].1 {
                simplex[n] = (reflected, fr);
            } else {
                let contracted = if fr < simplex[n].1 { at(-0.5) } else { at(0.5) };
                let fc = f(&contracted);
                evals += 1;
                if fc < simplex[n].1.min(fr) {
                    simplex[n] = (contracted, fc);
                } else {
                    // Shrink toward the best vertex.
                    let best_x = simplex[0].0.clone();
                    for vertex in simplex.iter_mut().skip(1) {
                        for i in 0..n {
                            vertex.0[i] = best_x[i] + 0.5 * (vertex.0[i] - best_x[i]);
                        }
                        vertex.1 = f(&vertex.0);
                        evals += 1;
                    }
                }
            }
        }
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        simplex.swap_remove(0).into()
    }
}

// ---------------------------------------------------------------------------
// Afterpulse curve fitting.
// ---------------------------------------------------------------------------

struct WeightedCurve {
    t: Vec<f64>,
    y: Vec<f64>,
    /// sqrt of the fit weights.
    sw: Vec<f64>,
}

impl WeightedCurve {
    fn from_dataset(data: &AfterpulseDataset) -> Self {
        let use_errors = data.points().iter().all(|p| p.std_error.is_some());
        let t: Vec<f64> = data.points().iter().map(|p| p.dt_s).collect();
        let y: Vec<f64> = data.points().iter().map(|p| p.p_ap).collect();
        let sw: Vec<f64> = data
            .points()
            .iter()
            .map(|p| {
                if use_errors {
                    1.0 / p.std_error.unwrap()
                } else {
                    1.0
                }
            })
            .collect();
        Self { t, y, sw }
    }

    fn design(&self, lifetimes: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(self.t.len(), lifetimes.len(), |i, j| {
            self.sw[i] * (-self.t[i] / lifetimes[j]).exp()
        })
    }

    fn weighted_y(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.y.len(),
            self.y.iter().zip(&self.sw).map(|(y, sw)| y * sw),
        )
    }

    fn chi2(&self, amplitudes: &[f64], lifetimes: &[f64]) -> f64 {
        self.t
            .iter()
            .zip(self.y.iter().zip(&self.sw))
            .map(|(&t, (&y, &sw))| {
                let m: f64 = amplitudes
                    .iter()
                    .zip(lifetimes)
                    .map(|(&a, &tau)| a * (-t / tau).exp())
                    .sum();
                (sw * (y - m)).powi(2)
            })
            .sum()
    }

    /// Variable projection objective: best non-negative amplitudes for
    /// the given log-lifetimes.
    fn varpro(&self, log_lifetimes: &[f64]) -> (Vec<f64>, f64) {
        let lifetimes: Vec<f64> = log_lifetimes.iter().map(|&u| u.exp()).collect();
        let x = self.design(&lifetimes);
        let a = nnls(&x, &self.weighted_y());
        let amps: Vec<f64> = a.iter().copied().collect();
        let chi2 = self.chi2(&amps, &lifetimes);
        (amps, chi2)
    }

    /// Levenberg-Marquardt refinement over (amplitudes, log-lifetimes)
    /// jointly, with amplitudes projected onto >= 0.
    fn lm_polish(&self, amplitudes: &mut Vec<f64>, lifetimes: &mut Vec<f64>) -> f64 {
        let k = lifetimes.len();
        let m = self.t.len();
        let mut chi2 = self.chi2(amplitudes, lifetimes);
        let mut lambda = 1e-3;
        for _ in 0..400 {
            let mut jac = DMatrix::zeros(m, 2 * k);
            let mut resid = DVector::zeros(m);
            for i in 0..m {
                let mut model = 0.0;
                for j in 0..k {
                    let e = (-self.t[i] / lifetimes[j]).exp();
                    model += amplitudes[j] * e;
                    jac[(i, j)] = self.sw[i] * e;
                    jac[(i, k + j)] = self.sw[i] * amplitudes[j] * e * (self.t[i] / lifetimes[j]);
                }
                resid[i] = self.sw[i] * (self.y[i] - model);
            }
            let jt = jac.transpose();
            let jtj = &jt * &jac;
            let g = &jt * &resid;
            let mut improved = false;
            for _ in 0..25 {
                let mut h = jtj.clone();
                for d in 0..2 * k {
                    h[(d, d)] += lambda * jtj[(d, d)].max(1e-30);
                }
                let Some(delta) = h.lu().solve(&g) else {
                    lambda *= 10.0;
                    continue;
                };
                let mut new_a = amplitudes.clone();
                let mut new_tau = lifetimes.clone();
                for j in 0..k {
                    new_a[j] = (new_a[j] + delta[j]).max(0.0);
                    new_tau[j] *= delta[k + j].clamp(-2.0, 2.0).exp();
                }
                let new_chi2 = self.chi2(&new_a, &new_tau);
                if new_chi2.is_finite() && new_chi2 < chi2 {
                    let gain = chi2 - new_chi2;
                    *amplitudes = new_a;
                    *lifetimes = new_tau;
                    chi2 = new_chi2;
                    lambda = (lambda / 3.0).max(1e-14);
                    improved = true;
                    if gain <= 1e-18 * (1.0 + chi2) {
                        return chi2;
                    }
                    break;
                }
                lambda *= 10.0;
                if lambda > 1e12 {
                    return chi2;
                }
            }
            if !improved {
                break;
            }
        }
        chi2
    }
}

fn multistart_lifetimes(n_terms: usize, t_min: f64, t_max: f64) -> Vec<Vec<f64>> {
    let lo = LIFETIME_RANGE_S.0.max(t_min / 3.0).ln();
    let hi = LIFETIME_RANGE_S.1.min(t_max * 3.0).max(t_min).ln();
    let mut starts = Vec::new();
    // Structured starts: log-evenly spread over the data span, at three
    // packing densities.
    for spread in [1.0, 0.5, 0.25] {
        let center = 0.5 * (lo + hi);
        let half = 0.5 * (hi - lo) * spread;
        let start: Vec<f64> = (0..n_terms)
            .map(|j| {
                if n_terms == 1 {
                    center
                } else {
                    center - half + 2.0 * half * j as f64 / (n_terms - 1) as f64
                }
            })
            .collect();
        starts.push(start);
    }
    // Deterministically seeded random starts, log-uniform.
    let mut rng = ChaCha8Rng::seed_from_u64(MULTISTART_SEED);
    for _ in 0..(STARTS_PER_TERM * n_terms) {
        let mut start: Vec<f64> = (0..n_terms).map(|_| rng.gen_range(lo..hi)).collect();
        start.sort_by(f64::total_cmp);
        starts.push(start);
    }
    starts
}

/// Sort terms ascending in lifetime and nudge exact ties apart so the
/// ordering convention (strictly ascending lifetimes) always holds.
fn ordered_terms(amplitudes: &[f64], lifetimes: &[f64]) -> Vec<AfterpulseTerm> {
    let mut pairs: Vec<(f64, f64)> = amplitudes
        .iter()
        .zip(lifetimes)
        .map(|(&a, &tau)| (if a < 1e-12 { 0.0 } else { a }, tau))
        .collect();
    pairs.sort_by(|x, y| x.1.total_cmp(&y.1));
    for i in 1..pairs.len() {
        if pairs[i].1 <= pairs[i - 1].1 {
            pairs[i].1 = pairs[i - 1].1 * (1.0 + 1e-9);
        }
    }
    pairs
        .into_iter()
        .map(|(a, tau)| AfterpulseTerm::new(a, tau).expect("validated parameters"))
        .collect()
}

/// Fit a sum of `n_terms` decaying exponentials to a measured
/// afterpulse curve by weighted least squares.
pub fn fit_afterpulse(
    data: &AfterpulseDataset,
    n_terms: usize,
) -> Result<(AfterpulseModel, FitDiagnostics)> {
    if n_terms < 1 {
        return Err(CalibrateError::InvalidArgument(
            "at least one exponential term is required".into(),
        ));
    }
    if data.points().len() < 2 * n_terms {
        return Err(CalibrateError::InvalidArgument(format!(
            "{} points cannot determine {} terms (need at least {})",
            data.points().len(),
            n_terms,
            2 * n_terms
        )));
    }

    let curve = WeightedCurve::from_dataset(data);
    let t_max = *curve.t.last().expect("non-empty dataset");
    let horizon = crate::detector::DEFAULT_HORIZON_S.max(t_max * (1.0 + 1e-9));

    let make_dijson = |chi2: f64| {
        let dof = curve.t.len().saturating_sub(2 * n_terms).max(1);
        let ss: f64 = curve
            .y
            .iter()
            .zip(&curve.sw)
            .map(|(y, sw)| (y * sw).powi(2))
            .sum();
        FitDiagnostics {
            chi2,
            dof,
            chi2_per_dof: chi2 / dof as f64,
            relative_chi2: if ss > 0.0 { chi2 / ss } else { chi2 },
        }
    };

    // All-zero data needs no search: zero amplitudes fit exactly.
    if curve.y.iter().all(|&y| y == 0.0) {
        let lifetimes: Vec<f64> = (0..n_terms).map(|j| 1e-6 * 10f64.powi(j as i32)).collect();
        let amps = vec![0.0; n_terms];
        let model = AfterpulseModel::new(ordered_terms(&amps, &lifetimes), horizon)?;
        return Ok((model, make_dijson(0.0)));
    }

    let t_min = curve.t[0];
    let starts = multistart_lifetimes(n_terms, t_min, t_max);
    let nm = NelderMead {
        max_evals: 700,
        f_tol: 1e-12,
        x_tol: 1e-8,
    };

    let mut candidates: Vec<(f64, Vec<f64>)> = Vec::new();
    for start in &starts {
        let (solution, chi2) = nm.minimize(|u| curve.varpro(u).1, start, 0.35);
        candidates.push((chi2, solution));
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut best: Option<(f64, Vec<f64>, Vec<f64>)> = None;
    for (_, log_tau) in candidates.iter().take(4) {
        let (mut amps, _) = curve.varpro(log_tau);
        let mut lifetimes: Vec<f64> = log_tau.iter().map(|&u| u.exp()).collect();
        let chi2 = curve.lm_polish(&mut amps, &mut lifetimes);
        if best.as_ref().is_none_or(|(c, _, _)| chi2 < *c) {
            best = Some((chi2, amps, lifetimes));
        }
    }

    let (chi2, amps, lifetimes) = best.expect("at least one candidate");
    if !chi2.is_finite() {
        return Err(CalibrateError::FitFailure {
            message: "objective became non-finite across the multistart budget".into(),
            best_chi2: chi2,
        });
    }
    let total: f64 = amps.iter().sum();
    let amps = if total > 1.0 {
        // Rescale pathological fits whose trigger probability at zero
        // delay would exceed 1.
        amps.iter().map(|a| a / total).collect()
    } else {
        amps
    };
    let model = AfterpulseModel::new(ordered_terms(&amps, &lifetimes), horizon)?;
    Ok((model, make_dijson(chi2)))
}

// ---------------------------------------------------------------------------
// Constraint-target fitting.
// ---------------------------------------------------------------------------

/// Equality target on the cumulated afterpulse sum at one gate rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CumulativeTarget {
    pub f_rep_hz: f64,
    pub total: f64,
    /// Absolute tolerance (0.001 = 0.1 percentage point by default).
    pub abs_tolerance: f64,
}

/// Upper bound on the cumulated afterpulse sum at one gate rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CumulativeBound {
    pub f_rep_hz: f64,
    pub max_total: f64,
}

/// Exact hold-off requirement: the minimum skip count at `f_rep_hz`
/// for `budget` must equal `expected_skip`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SkipTarget {
    pub f_rep_hz: f64,
    pub budget: f64,
    pub expected_skip: u32,
}

/// Anchor on the decay curve at a single short delay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShortDtTarget {
    pub dt_s: f64,
    pub p_ap: f64,
    /// Relative tolerance (0.20 by default).
    pub rel_tolerance: f64,
}

/// Bound on the raw decay value at a long delay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HorizonBound {
    pub dt_s: f64,
    pub max_p: f64,
}

/// The target set for a constrained afterpulse fit.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConstraintTargets {
    pub short_dt: Option<ShortDtTarget>,
    pub cumulative: Vec<CumulativeTarget>,
    pub cumulative_bounds: Vec<CumulativeBound>,
    pub skip: Vec<SkipTarget>,
    pub horizon_bound: Option<HorizonBound>,
    pub horizon_s: f64,
}

/// The operating targets that generate the shipped Epitaxx afterpulse
/// defaults: the decay magnitude at 100 ns, the cumulated sum at 1 MHz,
/// the exact hold-off counts at 1 and 2 MHz, negligible carryover at
/// 10 kHz, and a quiet tail at the 100 us memory horizon.
pub fn epitaxx_constraint_targets() -> ConstraintTargets {
    ConstraintTargets {
        short_dt: Some(ShortDtTarget {
            dt_s: 100e-9,
            p_ap: 1e-2,
            rel_tolerance: 0.20,
        }),
        cumulative: vec![CumulativeTarget {
            f_rep_hz: 1e6,
            total: 0.014,
            abs_tolerance: 0.001,
        }],
        cumulative_bounds: vec![CumulativeBound {
            f_rep_hz: 10e3,
            max_total: 1e-4,
        }],
        skip: vec![
            SkipTarget {
                f_rep_hz: 1e6,
                budget: 1e-2,
                expected_skip: 2,
            },
            SkipTarget {
                f_rep_hz: 2e6,
                budget: 1e-2,
                expected_skip: 14,
            },
        ],
        horizon_bound: Some(HorizonBound {
            dt_s: 100e-6,
            max_p: 1e-4,
        }),
        horizon_s: crate::detector::DEFAULT_HORIZON_S,
    }
}

/// Raw decay sum (no horizon clamp) for penalty evaluation.
fn raw_decay(amps: &[f64], taus: &[f64], dt: f64) -> f64 {
    amps.iter()
        .zip(taus)
        .map(|(&a, &tau)| a * (-dt / tau).exp())
        .sum()
}

/// Cumulated sum of the decay over gates n_skip+1 .. horizon.
fn raw_cumulative(amps: &[f64], taus: &[f64], horizon: f64, f_rep: f64, n_skip: u32) -> f64 {
    let dt = 1.0 / f_rep;
    let mut total = 0.0;
    let mut n = u64::from(n_skip) + 1;
    while (n as f64) * dt < horizon {
        total += raw_decay(amps, taus, n as f64 * dt);
        n += 1;
    }
    total
}

fn constraint_penalty(targets: &ConstraintTargets, amps: &[f64], taus: &[f64]) -> f64 {
    // Hinge slack factors: steer the optimizer to half of each stated
    // tolerance, and demand a 1.5% relative margin on either side of
    // the exact skip boundaries so the integer checks are not left on
    // a knife edge.
    const SKIP_MARGIN: f64 = 0.015;
    const BIG: f64 = 1e6;
    let horizon = targets.horizon_s;
    let mut pen = 0.0;

    if let Some(t) = &targets.short_dt {
        let v = raw_decay(amps, taus, t.dt_s);
        let err = (v - t.p_ap).abs() / t.p_ap;
        pen += BIG * (err - 0.5 * t.rel_tolerance).max(0.0).powi(2);
    }
    for t in &targets.cumulative {
        let s = raw_cumulative(amps, taus, horizon, t.f_rep_hz, 0);
        let err = (s - t.total).abs();
        pen += BIG * ((err - 0.5 * t.abs_tolerance).max(0.0) / t.abs_tolerance).powi(2);
    }
    for b in &targets.cumulative_bounds {
        let s = raw_cumulative(amps, taus, horizon, b.f_rep_hz, 0);
        pen += BIG * ((s - 0.5 * b.max_total).max(0.0) / b.max_total.max(1e-12)).powi(2);
    }
    let mut tail_preference = 0.0;
    for t in &targets.skip {
        let c_after = raw_cumulative(amps, taus, horizon, t.f_rep_hz, t.expected_skip);
        pen += BIG
            * ((c_after - t.budget * (1.0 - SKIP_MARGIN)).max(0.0) / t.budget).powi(2);
        if t.expected_skip > 0 {
            let c_before =
                raw_cumulative(amps, taus, horizon, t.f_rep_hz, t.expected_skip - 1);
            pen += BIG
                * ((t.budget * (1.0 + SKIP_MARGIN) - c_before).max(0.0) / t.budget).powi(2);
        }
        // Among feasible models, prefer the smallest residual sum after
        // the hold-off: it is the error contribution that survives.
        tail_preference += 0.5 * c_after / t.budget;
    }
    if let Some(h) = &targets.horizon_bound {
        let v = raw_decay(amps, taus, h.dt_s);
        pen += BIG * ((v - 0.5 * h.max_p).max(0.0) / h.max_p).powi(2);
    }
    pen + tail_preference
}

/// Check every target exactly against a constructed model; returns the
/// list of violations (empty when all targets hold).
pub fn check_targets(targets: &ConstraintTargets, model: &AfterpulseModel) -> Vec<String> {
    let mut violations = Vec::new();
    if let Some(t) = &targets.short_dt {
        match model.probability_at(t.dt_s) {
            Ok(v) if (v - t.p_ap).abs() <= t.rel_tolerance * t.p_ap => {}
            Ok(v) => violations.push(format!(
                "p_ap({:.3e} s) = {v:.4e}, outside {:.0}% of {:.3e}",
                t.dt_s,
                t.rel_tolerance * 100.0,
                t.p_ap
            )),
            Err(e) => violations.push(e.to_string()),
        }
    }
    for t in &targets.cumulative {
        match model.cumulative(t.f_rep_hz, 0) {
            Ok(s) if (s - t.total).abs() <= t.abs_tolerance => {}
            Ok(s) => violations.push(format!(
                "cumulative sum at {:.3e} Hz = {s:.5}, not within {} of {}",
                t.f_rep_hz, t.abs_tolerance, t.total
            )),
            Err(e) => violations.push(e.to_string()),
        }
    }
    for b in &targets.cumulative_bounds {
        match model.cumulative(b.f_rep_hz, 0) {
            Ok(s) if s < b.max_total => {}
            Ok(s) => violations.push(format!(
                "cumulative sum at {:.3e} Hz = {s:.3e}, not below {:.3e}",
                b.f_rep_hz, b.max_total
            )),
            Err(e) => violations.push(e.to_string()),
        }
    }
    for t in &targets.skip {
        match model.min_skip_gates(t.f_rep_hz, t.budget) {
            Ok(n) if n == t.expected_skip => {}
            Ok(n) => violations.push(format!(
                "min skip at {:.3e} Hz for budget {} is {n}, expected {}",
                t.f_rep_hz, t.budget, t.expected_skip
            )),
            Err(e) => violations.push(e.to_string()),
        }
    }
    if let Some(h) = &targets.horizon_bound {
        let v = if h.dt_s >= model.horizon_s() {
            0.0
        } else {
            model.probability_at(h.dt_s).unwrap_or(f64::INFINITY)
        };
        if v > h.max_p {
            violations.push(format!(
                "p_ap({:.3e} s) = {v:.3e}, above the bound {:.3e}",
                h.dt_s, h.max_p
            ));
        }
    }
    violations
}

/// Produce an `n_terms` afterpulse model satisfying every constraint
/// target, by penalized multistart optimization over amplitudes and
/// log-lifetimes. The trivial all-zero model is preferred when it
/// already satisfies the targets.
pub fn fit_to_constraints(
    targets: &ConstraintTargets,
    n_terms: usize,
) -> Result<AfterpulseModel> {
    if n_terms < 1 {
        return Err(CalibrateError::InvalidArgument(
            "at least one exponential term is required".into(),
        ));
    }
    let horizon = if targets.horizon_s > 0.0 {
        targets.horizon_s
    } else {
        crate::detector::DEFAULT_HORIZON_S
    };
    let targets = ConstraintTargets {
        horizon_s: horizon,
        ..targets.clone()
    };

    // A target set with no afterpulsing in it is satisfied by silence.
    let zero_model = AfterpulseModel::new(
        (0..n_terms)
            .map(|j| AfterpulseTerm::new(0.0, 1e-6 * 10f64.powi(j as i32)).expect("valid"))
            .collect(),
        horizon,
    )?;
    if check_targets(&targets, &zero_model).is_empty() {
        return Ok(zero_model);
    }

    let amplitude_scale = targets
        .short_dt
        .map(|t| t.p_ap)
        .or_else(|| targets.cumulative.first().map(|c| c.total / 4.0))
        .unwrap_or(1e-2)
        / n_terms as f64;

    let nm = NelderMead {
        max_evals: 4000,
        f_tol: 1e-13,
        x_tol: 1e-9,
    };
    let objective = |p: &[f64]| -> f64 {
        let k = p.len() / 2;
        let amps: Vec<f64> = p[..k].iter().map(|&a| a.max(0.0)).collect();
        let taus: Vec<f64> = p[k..].iter().map(|&u| u.exp()).collect();
        if taus.iter().any(|t| !t.is_finite()) {
            return f64::INFINITY;
        }
        constraint_penalty(&targets, &amps, &taus)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(MULTISTART_SEED ^ 0xC0FE);
    let lo = LIFETIME_RANGE_S.0.ln();
    let hi = LIFETIME_RANGE_S.1.ln();

    // Structured lifetime spreads: one trap family per decade region,
    // covering fast/intermediate/slow release. Random starts explore
    // the rest of the range.
    let structured: Vec<Vec<f64>> = [
        vec![0.1e-6, 1.8e-6, 80e-6],
        vec![0.05e-6, 1e-6, 20e-6],
        vec![0.3e-6, 3e-6, 50e-6],
        vec![0.5e-6, 8e-6, 95e-6],
    ]
    .iter()
    .map(|taus| taus.iter().take(n_terms).map(|t| t.ln()).collect())
    .collect();

    let mut best: Option<(f64, Vec<f64>)> = None;
    let n_starts = structured.len() + STARTS_PER_TERM * n_terms;
    for s in 0..n_starts {
        let mut start = Vec::with_capacity(2 * n_terms);
        for _ in 0..n_terms {
            let factor: f64 = rng.gen_range(-1.5..1.5);
            start.push(amplitude_scale * factor.exp());
        }
        let mut taus: Vec<f64> = structured
            .get(s)
            .cloned()
            .unwrap_or_else(|| (0..n_terms).map(|_| rng.gen_range(lo..hi)).collect());
        while taus.len() < n_terms {
            taus.push(rng.gen_range(lo..hi));
        }
        taus.sort_by(f64::total_cmp);
        start.extend(taus);

        let (mut x, mut fx) = nm.minimize(objective, &start, 0.3);
        // Re-polish from the solution with a tighter simplex.
        for step in [0.05, 0.01] {
            let (x2, f2) = nm.minimize(objective, &x, step);
            if f2 < fx {
                x = x2;
                fx = f2;
            }
        }
        if best.as_ref().is_none_or(|(b, _)| fx < *b) {
            best = Some((fx, x));
        }
    }
    // Descent continues from the winner until the objective stops
    // moving; the hinge penalties hold it inside the feasible set
    // while the tail preference keeps trimming.
    if let Some((fx, x)) = best.clone() {
        let (mut bx, mut bf) = (x, fx);
        for step in [0.2, 0.05, 0.01, 0.002] {
            let (x2, f2) = nm.minimize(objective, &bx, step);
            if f2 < bf {
                bx = x2;
                bf = f2;
            }
        }
        best = Some((bf, bx));
    }

    let (_, p) = best.expect("multistart produced candidates");
    let k = p.len() / 2;
    let amps: Vec<f64> = p[..k].iter().map(|&a| a.max(0.0)).collect();
    let taus: Vec<f64> = p[k..].iter().map(|&u| u.exp()).collect();
    let model = AfterpulseModel::new(ordered_terms(&amps, &taus), horizon)?;

    let violations = check_targets(&targets, &model);
    if violations.is_empty() {
        Ok(model)
    } else {
        Err(CalibrateError::Infeasible { violations })
    }
}

// ---------------------------------------------------------------------------
// Dark-count exponential fitting.
// ---------------------------------------------------------------------------

fn validate_dark_points(points: &[(f64, f64)]) -> Result<()> {
    if points.len() < 2 {
        return Err(CalibrateError::InvalidArgument(
            "at least two (efficiency, p_dc) points are required".into(),
        ));
    }
    for &(eff, p) in points {
        if !(eff > 0.0 && eff < 1.0) {
            return Err(CalibrateError::InvalidData(format!(
                "efficiency {eff} outside (0, 1)"
            )));
        }
        if !(p > 0.0 && p.is_finite()) {
            return Err(CalibrateError::InvalidData(format!(
                "dark probability must be positive for a log fit, got {p}"
            )));
        }
    }
    let first = points[0].0;
    if points.iter().all(|&(e, _)| e == first) {
        return Err(CalibrateError::InvalidData(
            "all points share one efficiency; the slope is undetermined".into(),
        ));
    }
    Ok(())
}

/// Least-squares exponential fit of dark probability versus
/// efficiency: straight line in log space, reported as the value at
/// 10% efficiency plus the common slope.
pub fn fit_dark_exponential(points: &[(f64, f64)]) -> Result<DarkCountModel> {
    validate_dark_points(points)?;
    let n = points.len() as f64;
    let xs: Vec<f64> = points
        .iter()
        .map(|&(e, _)| e - crate::detector::REFERENCE_EFFICIENCY)
        .collect();
    let ys: Vec<f64> = points.iter().map(|&(_, p)| p.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    DarkCountModel::new(intercept.exp(), slope).map_err(|e| {
        CalibrateError::InvalidData(format!("fitted parameters rejected by the model: {e}"))
    })
}

/// Joint fit of several dark-count series (one per temperature) with a
/// single shared slope and per-series anchors at 10% efficiency.
pub fn fit_dark_shared_slope(series: &[Vec<(f64, f64)>]) -> Result<(Vec<DarkCountModel>, f64)> {
    if series.is_empty() {
        return Err(CalibrateError::InvalidArgument(
            "at least one series is required".into(),
        ));
    }
    for s in series {
        validate_dark_points(s)?;
    }
    // Pooled within-series regression.
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut means = Vec::with_capacity(series.len());
    for s in series {
        let n = s.len() as f64;
        let mx = s
            .iter()
            .map(|&(e, _)| e - crate::detector::REFERENCE_EFFICIENCY)
            .sum::<f64>()
            / n;
        let my = s.iter().map(|&(_, p)| p.ln()).sum::<f64>() / n;
        for &(e, p) in s {
            let x = e - crate::detector::REFERENCE_EFFICIENCY;
            sxx += (x - mx).powi(2);
            sxy += (x - mx) * (p.ln() - my);
        }
        means.push((mx, my));
    }
    if sxx == 0.0 {
        return Err(CalibrateError::InvalidData(
            "no efficiency spread within any series".into(),
        ));
    }
    let slope = sxy / sxx;
    let models = means
        .into_iter()
        .map(|(mx, my)| {
            DarkCountModel::new((my - slope * mx).exp(), slope).map_err(|e| {
                CalibrateError::InvalidData(format!(
                    "fitted parameters rejected by the model: {e}"
                ))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((models, slope))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::DEFAULT_HORIZON_S;
    use approx::assert_relative_eq;

    fn synthetic_dataset(
        terms: &[(f64, f64)],
        noise_rel: f64,
        seed: u64,
    ) -> AfterpulseDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut points = Vec::new();
        // Log-spaced delays from 20 ns to 50 us.
        let n = 60;
        for i in 0..n {
            let dt = 20e-9 * (50e-6f64 / 20e-9).powf(i as f64 / (n - 1) as f64);
            let clean: f64 = terms.iter().map(|&(a, tau)| a * (-dt / tau).exp()).sum();
            let (value, err) = if noise_rel > 0.0 {
                // Box-Muller pair, first value only.
                let u1: f64 = rng.gen_range(1e-12..1.0);
                let u2: f64 = rng.gen();
                let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                let sigma = noise_rel * clean;
                ((clean + sigma * z).max(0.0), Some(sigma.max(1e-12)))
            } else {
                (clean, None)
            };
            points.push(ApPoint {
                dt_s: dt,
                p_ap: value,
                std_error: err,
            });
        }
        AfterpulseDataset::new(points).unwrap()
    }

    const TRUTH: [(f64, f64); 3] = [(6e-3, 0.15e-6), (5e-3, 1.2e-6), (2e-3, 8e-6)];

    #[test]
    fn noiseless_recovery_is_exact() {
        let data = synthetic_dataset(&TRUTH, 0.0, 0);
        let (model, diag) = fit_afterpulse(&data, 3).unwrap();
        assert!(
            diag.relative_chi2 < 1e-10,
            "relative chi2 = {:e}",
            diag.relative_chi2
        );
        for (term, &(a, tau)) in model.terms().iter().zip(TRUTH.iter()) {
            assert_relative_eq!(term.amplitude, a, max_relative = 1e-4);
            assert_relative_eq!(term.lifetime_s, tau, max_relative = 1e-4);
        }
    }

    #[test]
    fn noisy_recovery_within_tolerance() {
        let data = synthetic_dataset(&TRUTH, 0.01, 7);
        let (model, _) = fit_afterpulse(&data, 3).unwrap();
        for (term, &(a, tau)) in model.terms().iter().zip(TRUTH.iter()) {
            assert!(
                (term.amplitude - a).abs() / a < 0.10,
                "amplitude {} vs {a}",
                term.amplitude
            );
            assert!(
                (term.lifetime_s - tau).abs() / tau < 0.15,
                "lifetime {} vs {tau}",
                term.lifetime_s
            );
        }
    }

    #[test]
    fn lifetimes_strictly_ascending() {
        let data = synthetic_dataset(&TRUTH, 0.01, 3);
        let (model, _) = fit_afterpulse(&data, 3).unwrap();
        for w in model.terms().windows(2) {
            assert!(w[0].lifetime_s < w[1].lifetime_s);
        }
    }

    #[test]
    fn nested_models_do_not_fit_worse() {
        let single = [(4e-3, 1.0e-6)];
        let data = synthetic_dataset(&single, 0.005, 11);
        let (_, diag1) = fit_afterpulse(&data, 1).unwrap();
        let (_, diag3) = fit_afterpulse(&data, 3).unwrap();
        assert!(
            diag3.chi2 <= diag1.chi2 * (1.0 + 1e-6),
            "3-term chi2 {} vs 1-term {}",
            diag3.chi2,
            diag1.chi2
        );
    }

    #[test]
    fn all_zero_data_gives_zero_amplitudes() {
        let points = (1..=10)
            .map(|i| ApPoint {
                dt_s: i as f64 * 1e-6,
                p_ap: 0.0,
                std_error: None,
            })
            .collect();
        let data = AfterpulseDataset::new(points).unwrap();
        let (model, diag) = fit_afterpulse(&data, 3).unwrap();
        assert!(model.terms().iter().all(|t| t.amplitude == 0.0));
        assert_eq!(diag.chi2, 0.0);
    }

    #[test]
    fn fit_is_order_independent() {
        let data = synthetic_dataset(&TRUTH, 0.01, 5);
        let mut reversed: Vec<ApPoint> = data.points().to_vec();
        reversed.reverse();
        let data_rev = AfterpulseDataset::new(reversed).unwrap();
        let (m1, d1) = fit_afterpulse(&data, 3).unwrap();
        let (m2, d2) = fit_afterpulse(&data_rev, 3).unwrap();
        assert_eq!(d1.chi2, d2.chi2);
        assert_eq!(m1, m2);
    }

    #[test]
    fn too_few_points_rejected() {
        let points = (1..=4)
            .map(|i| ApPoint {
                dt_s: i as f64 * 1e-6,
                p_ap: 1e-3,
                std_error: None,
            })
            .collect();
        let data = AfterpulseDataset::new(points).unwrap();
        assert!(fit_afterpulse(&data, 3).is_err());
    }

    #[test]
    fn epitaxx_targets_are_satisfiable() {
        let targets = epitaxx_constraint_targets();
        let model = fit_to_constraints(&targets, 3).unwrap();
        assert!(check_targets(&targets, &model).is_empty());
        // The shipped defaults must satisfy the same target set.
        let shipped = crate::profiles::builtin("epitaxx-60").unwrap().afterpulse;
        assert!(
            check_targets(&targets, &shipped).is_empty(),
            "shipped coefficients violate the generating targets: {:?}",
            check_targets(&targets, &shipped)
        );
    }

    #[test]
    fn zero_cumulative_target_yields_silence() {
        let targets = ConstraintTargets {
            cumulative: vec![CumulativeTarget {
                f_rep_hz: 1e6,
                total: 0.0,
                abs_tolerance: 1e-4,
            }],
            horizon_s: DEFAULT_HORIZON_S,
            ..Default::default()
        };
        let model = fit_to_constraints(&targets, 3).unwrap();
        assert!(model.terms().iter().all(|t| t.amplitude == 0.0));
        assert_eq!(model.cumulative(1e6, 0).unwrap(), 0.0);
    }

    #[test]
    fn contradictory_targets_report_infeasibility() {
        // A 1.4% cumulated sum cannot coexist with a decay bounded
        // everywhere below 1e-6.
        let targets = ConstraintTargets {
            cumulative: vec![CumulativeTarget {
                f_rep_hz: 1e6,
                total: 0.014,
                abs_tolerance: 0.001,
            }],
            short_dt: Some(ShortDtTarget {
                dt_s: 100e-9,
                p_ap: 1e-7,
                rel_tolerance: 0.20,
            }),
            cumulative_bounds: vec![CumulativeBound {
                f_rep_hz: 2e6,
                max_total: 1e-6,
            }],
            horizon_s: DEFAULT_HORIZON_S,
            ..Default::default()
        };
        match fit_to_constraints(&targets, 3) {
            Err(CalibrateError::Infeasible { violations }) => {
                assert!(!violations.is_empty());
            }
            other => panic!("expected infeasibility, got {other:?}"),
        }
    }

    #[test]
    fn dark_two_point_exact_recovery() {
        let model = DarkCountModel::new(2.8e-5, 30.0).unwrap();
        let points: Vec<(f64, f64)> = [0.08, 0.14]
            .iter()
            .map(|&e| (e, model.at(e).unwrap()))
            .collect();
        let fitted = fit_dark_exponential(&points).unwrap();
        assert_relative_eq!(fitted.p10(), 2.8e-5, max_relative = 1e-10);
        assert_relative_eq!(fitted.slope(), 30.0, max_relative = 1e-10);
    }

    #[test]
    fn dark_shared_slope_recovery() {
        // Two synthetic temperature series with a common slope of 30
        // and 1%-level multiplicative scatter.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let truth = [
            DarkCountModel::new(2.8e-5, 30.0).unwrap(),
            DarkCountModel::new(6.0e-5, 30.0).unwrap(),
        ];
        let series: Vec<Vec<(f64, f64)>> = truth
            .iter()
            .map(|m| {
                (0..8)
                    .map(|i| {
                        let eff = 0.05 + 0.02 * i as f64;
                        let jitter: f64 = rng.gen_range(-0.01..0.01);
                        (eff, m.at(eff).unwrap() * (1.0 + jitter))
                    })
                    .collect()
            })
            .collect();
        let (models, slope) = fit_dark_shared_slope(&series).unwrap();
        assert!((slope - 30.0).abs() / 30.0 < 0.05, "slope {slope}");
        assert_relative_eq!(models[0].p10(), 2.8e-5, max_relative = 0.05);
        assert_relative_eq!(models[1].p10(), 6.0e-5, max_relative = 0.05);
        assert_eq!(models[0].slope(), models[1].slope());
    }

    #[test]
    fn dark_fit_rejects_bad_input() {
        assert!(fit_dark_exponential(&[(0.1, 1e-4)]).is_err());
        assert!(fit_dark_exponential(&[(0.1, 1e-4), (0.2, 0.0)]).is_err());
        assert!(fit_dark_exponential(&[(0.1, 1e-4), (0.1, 2e-4)]).is_err());
    }
}
