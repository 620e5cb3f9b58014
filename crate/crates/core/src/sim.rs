//! Gate-by-gate Monte Carlo simulation of a detector on a link.
//!
//! Each gate is drawn in a fixed causal order: a photon may arrive and
//! be detected; otherwise a thermal carrier may trigger the gate;
//! otherwise charges trapped by earlier avalanches may release and
//! trigger it. Any trigger enters the avalanche memory (it fills traps
//! regardless of how it is later classified) and starts the hold-off,
//! which suppresses the next `n_skip_holdoff` gates.
//!
//! A single stream is strictly sequential. [`run_partitioned`] fans out
//! independently seeded streams, each warmed up for one memory horizon
//! before tallying, and merges the results; the outcome is
//! deterministic for a fixed (seed, jobs) pair.

use crate::detector::{fwhm_to_sigma, DetectorProfile};
use crate::link::{photon_arrival_probability, LinkConfig, LinkError};
use crate::profiles::serialize_profiles;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::collections::VecDeque;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Link(#[from] LinkError),
    #[error(transparent)]
    Detector(#[from] crate::detector::DetectorError),
}

type Result<T> = std::result::Result<T, SimError>;

/// Full description of one simulation run.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub link: LinkConfig,
    pub profile: DetectorProfile,
    pub n_gates: u64,
    pub n_skip_holdoff: u32,
    pub seed: u64,
    /// Optional time-discrimination window width, centered on the
    /// expected photon arrival (the middle of the gate).
    pub window_s: Option<f64>,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.link.validate().map_err(SimError::Link)?;
        if self.n_gates < 1 {
            return Err(SimError::InvalidArgument(
                "at least one gate is required".into(),
            ));
        }
        if let Some(w) = self.window_s {
            if !(w > 0.0) || w > self.profile.gate_width_s {
                return Err(SimError::InvalidArgument(format!(
                    "window {w} s must lie in (0, gate width = {} s]",
                    self.profile.gate_width_s
                )));
            }
        }
        Ok(())
    }

    /// Digest of everything except the seed and the gate count;
    /// outcomes may only be merged when these match.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(serialize_profiles(std::slice::from_ref(&self.profile)));
        hasher.update(format!(
            "mu={};att={};tr={};frep={};dist={};skip={};window={:?}",
            self.link.mu,
            self.link.attenuation_db_per_km,
            self.link.receiver_transmission,
            self.link.f_rep_hz,
            self.link.distance_km,
            self.n_skip_holdoff,
            self.window_s,
        ));
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// What triggered a gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Cause {
    Photon,
    Dark,
    Afterpulse,
}

impl Cause {
    pub fn as_str(self) -> &'static str {
        match self {
            Cause::Photon => "photon",
            Cause::Dark => "dark",
            Cause::Afterpulse => "afterpulse",
        }
    }
}

/// One triggered gate, for the optional event log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateOutcome {
    pub gate_index: u64,
    pub cause: Cause,
    /// Avalanche time relative to the gate start. Photons carry the
    /// jittered arrival time; dark and afterpulse triggers are uniform
    /// over the gate.
    pub timestamp_in_gate_s: f64,
    pub in_window: bool,
}

/// Tallies from one run (or a merge of runs).
///
/// When a discrimination window is configured, the per-cause counts
/// hold the accepted triggers and `window_rejected` the discarded
/// ones; without a window every trigger is accepted.
#[derive(Debug, Clone, PartialEq)]
pub struct SimOutcome {
    pub photon_counts: u64,
    pub dark_counts: u64,
    pub afterpulse_counts: u64,
    pub window_rejected: u64,
    pub gates_applied: u64,
    pub gates_skipped: u64,
    pub n_gates: u64,
    pub f_rep_hz: f64,
    fingerprint: String,
}

impl SimOutcome {
    pub fn total_counts(&self) -> u64 {
        self.photon_counts + self.dark_counts + self.afterpulse_counts
    }

    pub fn elapsed_s(&self) -> f64 {
        self.n_gates as f64 / self.f_rep_hz
    }

    /// All accepted detections per second; the raw key rate the
    /// receiver observes.
    pub fn empirical_raw_rate_hz(&self) -> f64 {
        self.total_counts() as f64 / self.elapsed_s()
    }

    pub fn photon_rate_hz(&self) -> f64 {
        self.photon_counts as f64 / self.elapsed_s()
    }

    pub fn dark_rate_hz(&self) -> f64 {
        self.dark_counts as f64 / self.elapsed_s()
    }

    pub fn afterpulse_rate_hz(&self) -> f64 {
        self.afterpulse_counts as f64 / self.elapsed_s()
    }

    /// Erroneous counts over total counts.
    pub fn empirical_qber(&self) -> f64 {
        let total = self.total_counts();
        if total == 0 {
            return 0.0;
        }
        (self.dark_counts + self.afterpulse_counts) as f64 / total as f64
    }

    /// Poisson standard error of a rate derived from `counts` events.
    pub fn rate_std_error_hz(&self, counts: u64) -> f64 {
        (counts as f64).sqrt() / self.elapsed_s()
    }

    /// Binomial standard error of the empirical QBER.
    pub fn qber_std_error(&self) -> f64 {
        let total = self.total_counts() as f64;
        if total == 0.0 {
            return 0.0;
        }
        let q = self.empirical_qber();
        (q * (1.0 - q) / total).sqrt()
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }
}

/// Combine outcomes from runs that differ only in seed (and possibly
/// gate count). Associative and commutative; the standard errors come
/// out of the pooled tallies.
pub fn merge(outcomes: &[SimOutcome]) -> Result<SimOutcome> {
    let first = outcomes.first().ok_or_else(|| {
        SimError::InvalidArgument("cannot merge an empty outcome list".into())
    })?;
    let mut merged = SimOutcome {
        photon_counts: 0,
        dark_counts: 0,
        afterpulse_counts: 0,
        window_rejected: 0,
        gates_applied: 0,
        gates_skipped: 0,
        n_gates: 0,
        f_rep_hz: first.f_rep_hz,
        fingerprint: first.fingerprint.clone(),
    };
    for o in outcomes {
        if o.fingerprint != merged.fingerprint {
            return Err(SimError::InvalidArgument(
                "outcomes come from different configurations and cannot be merged".into(),
            ));
        }
        merged.photon_counts += o.photon_counts;
        merged.dark_counts += o.dark_counts;
        merged.afterpulse_counts += o.afterpulse_counts;
        merged.window_rejected += o.window_rejected;
        merged.gates_applied += o.gates_applied;
        merged.gates_skipped += o.gates_skipped;
        merged.n_gates += o.n_gates;
    }
    Ok(merged)
}

fn make_rng(seed: u64, stream: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Standard normal via Box-Muller, redrawn until within +-3 sigma so
/// photon timestamps stay inside the documented bounds.
fn truncated_standard_normal<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
        let u2: f64 = rng.gen();
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if z.abs() <= 3.0 {
            return z;
        }
    }
}

struct StreamParams {
    p_photon_arrival: f64,
    efficiency: f64,
    p_dark: f64,
    gate_width_s: f64,
    gate_period_s: f64,
    jitter_sigma_s: f64,
    window_s: Option<f64>,
    n_skip: u32,
    memory_horizon_s: f64,
}

impl StreamParams {
    fn from_config(cfg: &SimConfig, memory_horizon_s: f64) -> Self {
        Self {
            p_photon_arrival: photon_arrival_probability(&cfg.link),
            efficiency: cfg.profile.efficiency,
            p_dark: cfg.profile.dark_probability(),
            gate_width_s: cfg.profile.gate_width_s,
            gate_period_s: 1.0 / cfg.link.f_rep_hz,
            jitter_sigma_s: fwhm_to_sigma(cfg.profile.jitter_fwhm_s()),
            window_s: cfg.window_s,
            n_skip: cfg.n_skip_holdoff,
            memory_horizon_s,
        }
    }
}

/// Run a single stream of `warmup + n_tally` gates, tallying only the
/// last `n_tally`. The warmup lets the avalanche memory and hold-off
/// state reach steady state before counting starts.
fn run_stream(
    cfg: &SimConfig,
    params: &StreamParams,
    rng: &mut ChaCha12Rng,
    warmup: u64,
    n_tally: u64,
    mut events: Option<&mut Vec<GateOutcome>>,
) -> SimOutcome {
    let afterpulse = &cfg.profile.afterpulse;
    let total_gates = warmup + n_tally;
    let mut memory: VecDeque<u64> = VecDeque::new();
    let mut holdoff_remaining: u32 = 0;

    let mut out = SimOutcome {
        photon_counts: 0,
        dark_counts: 0,
        afterpulse_counts: 0,
        window_rejected: 0,
        gates_applied: 0,
        gates_skipped: 0,
        n_gates: n_tally,
        f_rep_hz: cfg.link.f_rep_hz,
        fingerprint: cfg.fingerprint(),
    };

    let window_center = params.gate_width_s / 2.0;

    for g in 0..total_gates {
        let tallying = g >= warmup;
        if holdoff_remaining > 0 {
            holdoff_remaining -= 1;
            if tallying {
                out.gates_skipped += 1;
            }
            continue;
        }
        if tallying {
            out.gates_applied += 1;
        }
        while let Some(&oldest) = memory.front() {
            if (g - oldest) as f64 * params.gate_period_s >= params.memory_horizon_s {
                memory.pop_front();
            } else {
                break;
            }
        }

        // Causal precedence: photon, then dark, then afterpulse. A real
        // gate yields one avalanche; the first firing mechanism claims
        // it.
        let mut cause: Option<Cause> = None;
        if rng.gen::<f64>() < params.p_photon_arrival && rng.gen::<f64>() < params.efficiency {
            cause = Some(Cause::Photon);
        }
        if cause.is_none() && rng.gen::<f64>() < params.p_dark {
            cause = Some(Cause::Dark);
        }
        if cause.is_none() && !memory.is_empty() {
            // Independent hazards from every remembered avalanche. Draw
            // only when the combined hazard is nonzero, so entries past
            // the horizon (hazard exactly zero) cannot perturb the
            // random stream.
            let mut survive = 1.0;
            for &t in &memory {
                let dt = (g - t) as f64 * params.gate_period_s;
                let p = afterpulse
                    .probability_at(dt)
                    .expect("dt > 0 for remembered avalanches");
                survive *= 1.0 - p;
            }
            let hazard = 1.0 - survive;
            if hazard > 0.0 && rng.gen::<f64>() < hazard {
                cause = Some(Cause::Afterpulse);
            }
        }

        if let Some(cause) = cause {
            let timestamp = match cause {
                Cause::Photon => {
                    window_center + params.jitter_sigma_s * truncated_standard_normal(rng)
                }
                Cause::Dark | Cause::Afterpulse => rng.gen::<f64>() * params.gate_width_s,
            };
            let in_window = params
                .window_s
                .is_none_or(|w| (timestamp - window_center).abs() <= w / 2.0);
            if tallying {
                if in_window {
                    match cause {
                        Cause::Photon => out.photon_counts += 1,
                        Cause::Dark => out.dark_counts += 1,
                        Cause::Afterpulse => out.afterpulse_counts += 1,
                    }
                } else {
                    out.window_rejected += 1;
                }
                if let Some(log) = events.as_deref_mut() {
                    log.push(GateOutcome {
                        gate_index: g - warmup,
                        cause,
                        timestamp_in_gate_s: timestamp,
                        in_window,
                    });
                }
            }
            memory.push_back(g);
            holdoff_remaining = params.n_skip;
        }
    }
    out
}

/// Run the configured simulation as one sequential stream.
/// Deterministic: a fixed config (seed included) yields a bit-identical
/// outcome.
pub fn run_simulation(cfg: &SimConfig) -> Result<SimOutcome> {
    cfg.validate()?;
    let params = StreamParams::from_config(cfg, cfg.profile.afterpulse.horizon_s());
    let mut rng = make_rng(cfg.seed, 0);
    Ok(run_stream(cfg, &params, &mut rng, 0, cfg.n_gates, None))
}

/// As [`run_simulation`], also returning the per-gate event log of
/// every trigger.
pub fn run_simulation_with_events(cfg: &SimConfig) -> Result<(SimOutcome, Vec<GateOutcome>)> {
    cfg.validate()?;
    let params = StreamParams::from_config(cfg, cfg.profile.afterpulse.horizon_s());
    let mut rng = make_rng(cfg.seed, 0);
    let mut events = Vec::new();
    let outcome = run_stream(cfg, &params, &mut rng, 0, cfg.n_gates, Some(&mut events));
    Ok((outcome, events))
}

/// Partition the gates over `jobs` independently seeded streams and
/// merge the tallies. Streams beyond the first discard one memory
/// horizon of warmup gates so hold-off and trap state do not cross the
/// partition boundaries. Results are deterministic for a fixed
/// (seed, jobs) pair but differ between job counts.
pub fn run_partitioned(cfg: &SimConfig, jobs: usize) -> Result<SimOutcome> {
    cfg.validate()?;
    if jobs == 0 {
        return Err(SimError::InvalidArgument("jobs must be >= 1".into()));
    }
    let jobs = jobs.min(cfg.n_gates as usize).max(1);
    if jobs == 1 {
        return run_simulation(cfg);
    }
    let params = StreamParams::from_config(cfg, cfg.profile.afterpulse.horizon_s());
    let horizon_gates =
        (cfg.profile.afterpulse.horizon_s() * cfg.link.f_rep_hz).ceil() as u64;
    let base = cfg.n_gates / jobs as u64;
    let remainder = cfg.n_gates % jobs as u64;

    let outcomes: Vec<SimOutcome> = std::thread::scope(|scope| {
        let mut handles = Vec::with_capacity(jobs);
        for k in 0..jobs {
            let chunk = base + u64::from((k as u64) < remainder);
            let params = &params;
            let cfg = &cfg;
            handles.push(scope.spawn(move || {
                let mut rng = make_rng(cfg.seed, k as u64);
                let warmup = if k == 0 { 0 } else { horizon_gates };
                run_stream(cfg, params, &mut rng, warmup, chunk, None)
            }));
        }
        handles
            .into_iter()
            .map(|h| h.join().expect("stream thread panicked"))
            .collect()
    });
    merge(&outcomes)
}

/// One estimated point of a double-gate afterpulse measurement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApCurvePoint {
    pub dt_s: f64,
    pub p_ap: f64,
    pub std_error: f64,
}

/// Simulate the two-gate experiment: the laser fires into the first
/// gate, a second gate follows after `dt`, and the conditional
/// coincidence probability minus the dark probability estimates
/// p_ap(dt). One trial pair is run per configured gate, per grid
/// point.
pub fn empirical_afterpulse_curve(cfg: &SimConfig, dt_grid: &[f64]) -> Result<Vec<ApCurvePoint>> {
    cfg.validate()?;
    let period = 1.0 / cfg.link.f_rep_hz;
    for &dt in dt_grid {
        if !(dt > 0.0) {
            return Err(SimError::InvalidArgument(format!(
                "grid delays must be positive, got {dt}"
            )));
        }
        let cycles = dt / period;
        if (cycles - cycles.round()).abs() > 1e-6 * cycles.round().max(1.0) {
            return Err(SimError::InvalidArgument(format!(
                "grid delay {dt} s is not a multiple of the gate period {period} s"
            )));
        }
    }
    let p_first = photon_arrival_probability(&cfg.link) * cfg.profile.efficiency;
    let p_dark = cfg.profile.dark_probability();
    let mut rng = make_rng(cfg.seed, 0);
    let mut curve = Vec::with_capacity(dt_grid.len());
    for &dt in dt_grid {
        let hazard = cfg.profile.afterpulse.probability_at(dt)?;
        let mut first = 0u64;
        let mut coincidences = 0u64;
        for _ in 0..cfg.n_gates {
            let fired = rng.gen::<f64>() < p_first
                || rng.gen::<f64>() < p_dark;
            if !fired {
                continue;
            }
            first += 1;
            // Second gate: trap release from the first avalanche, or a
            // fresh dark count.
            if rng.gen::<f64>() < hazard || rng.gen::<f64>() < p_dark {
                coincidences += 1;
            }
        }
        if first == 0 {
            curve.push(ApCurvePoint {
                dt_s: dt,
                p_ap: 0.0,
                std_error: 0.0,
            });
            continue;
        }
        let n = first as f64;
        let fraction = coincidences as f64 / n;
        // Binomial error, floored at the one-count bound so zero
        // observed coincidences still carry a usable uncertainty.
        let std_error = (fraction * (1.0 - fraction) / n).sqrt().max(1.0 / n);
        curve.push(ApCurvePoint {
            dt_s: dt,
            p_ap: fraction - p_dark,
            std_error,
        });
    }
    Ok(curve)
}
