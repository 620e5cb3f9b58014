//! Parametric models of a gated Geiger-mode single-photon detector.
//!
//! A detector operating point is described by a [`DetectorProfile`]:
//! its detection efficiency, a dark-count model (exponential in excess
//! bias, parameterized by efficiency), a trap-release afterpulse model
//! (sum of decaying exponentials with a hard memory horizon) and a
//! timing-jitter model (piecewise-linear FWHM versus efficiency).
//!
//! All types are immutable after construction and every operation is a
//! pure function of its inputs, so values can be shared freely across
//! threads.

use thiserror::Error;

/// Efficiency at which dark-count anchors are quoted.
pub const REFERENCE_EFFICIENCY: f64 = 0.10;

/// Default gate width: 2.4 ns FWHM short gates.
pub const DEFAULT_GATE_WIDTH_S: f64 = 2.4e-9;

/// Default afterpulse memory horizon. Trap populations are treated as
/// fully released beyond this delay.
pub const DEFAULT_HORIZON_S: f64 = 100e-6;

/// Upper bound accepted for jitter FWHM values.
pub const MAX_JITTER_FWHM_S: f64 = 2e-9;

/// Convert a Gaussian FWHM to its standard deviation.
pub fn fwhm_to_sigma(fwhm: f64) -> f64 {
    // FWHM = 2 sqrt(2 ln 2) sigma
    const FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949_3;
    fwhm / FWHM_PER_SIGMA
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectorError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("configuration error: {0}")]
    Configuration(String),
}

type Result<T> = std::result::Result<T, DetectorError>;

/// One trap population: its probability contribution at zero delay and
/// its release lifetime.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AfterpulseTerm {
    /// Probability contribution at delta-t = 0 (dimensionless).
    pub amplitude: f64,
    /// Trap release time constant in seconds.
    pub lifetime_s: f64,
}

impl AfterpulseTerm {
    pub fn new(amplitude: f64, lifetime_s: f64) -> Result<Self> {
        if !amplitude.is_finite() || amplitude < 0.0 {
            return Err(DetectorError::InvalidArgument(format!(
                "afterpulse amplitude must be finite and >= 0, got {amplitude}"
            )));
        }
        if !lifetime_s.is_finite() || lifetime_s <= 0.0 {
            return Err(DetectorError::InvalidArgument(format!(
                "afterpulse lifetime must be finite and > 0, got {lifetime_s}"
            )));
        }
        Ok(Self {
            amplitude,
            lifetime_s,
        })
    }
}

/// Afterpulse probability as a function of the delay since a previous
/// avalanche: a sum of decaying exponentials, clamped to zero at and
/// beyond the memory horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct AfterpulseModel {
    terms: Vec<AfterpulseTerm>,
    horizon_s: f64,
}

impl AfterpulseModel {
    /// Build a model from trap terms. The total amplitude must not
    /// exceed 1 (it is the trigger probability at zero delay).
    pub fn new(terms: Vec<AfterpulseTerm>, horizon_s: f64) -> Result<Self> {
        if !horizon_s.is_finite() || horizon_s <= 0.0 {
            return Err(DetectorError::InvalidArgument(format!(
                "afterpulse horizon must be finite and > 0, got {horizon_s}"
            )));
        }
        let total: f64 = terms.iter().map(|t| t.amplitude).sum();
        if total > 1.0 {
            return Err(DetectorError::InvalidArgument(format!(
                "afterpulse amplitudes sum to {total}, which exceeds 1"
            )));
        }
        Ok(Self { terms, horizon_s })
    }

    /// A model with no trap terms: p_ap identically zero.
    pub fn none() -> Self {
        Self {
            terms: Vec::new(),
            horizon_s: DEFAULT_HORIZON_S,
        }
    }

    pub fn terms(&self) -> &[AfterpulseTerm] {
        &self.terms
    }

    pub fn horizon_s(&self) -> f64 {
        self.horizon_s
    }

    /// Afterpulse probability for a gate arriving `dt_s` after an
    /// avalanche. Zero at and beyond the horizon.
    pub fn probability_at(&self, dt_s: f64) -> Result<f64> {
        if !dt_s.is_finite() || dt_s <= 0.0 {
            return Err(DetectorError::InvalidArgument(format!(
                "delay since avalanche must be > 0, got {dt_s}"
            )));
        }
        if dt_s >= self.horizon_s {
            return Ok(0.0);
        }
        let p: f64 = self
            .terms
            .iter()
            .map(|t| t.amplitude * (-dt_s / t.lifetime_s).exp())
            .sum();
        Ok(p.min(1.0))
    }

    /// Cumulated afterpulse probability over the gates following an
    /// avalanche: sum of p_ap(n / f_rep) for n = n_skip+1, n_skip+2, ...
    /// The sum terminates at the horizon; the summation is cut early
    /// once the remaining geometric tail is below 1e-12.
    pub fn cumulative(&self, f_rep_hz: f64, n_skip: u32) -> Result<f64> {
        if !f_rep_hz.is_finite() || f_rep_hz <= 0.0 {
            return Err(DetectorError::InvalidArgument(format!(
                "repetition frequency must be > 0, got {f_rep_hz}"
            )));
        }
        let dt = 1.0 / f_rep_hz;
        let mut total = 0.0;
        let mut n = u64::from(n_skip) + 1;
        loop {
            let t = n as f64 * dt;
            if t >= self.horizon_s {
                break;
            }
            total += self.probability_at(t)?;
            // Remaining tail is bounded by a per-term geometric series.
            let tail_bound: f64 = self
                .terms
                .iter()
                .map(|term| {
                    let x = (-dt / term.lifetime_s).exp();
                    term.amplitude * (-((n + 1) as f64) * dt / term.lifetime_s).exp()
                        / (1.0 - x)
                })
                .sum();
            if tail_bound < 1e-12 {
                break;
            }
            n += 1;
        }
        Ok(total)
    }

    /// Smallest number of hold-off gates after a detection that brings
    /// the cumulated afterpulse probability below `budget`. The horizon
    /// guarantees termination.
    pub fn min_skip_gates(&self, f_rep_hz: f64, budget: f64) -> Result<u32> {
        if !(0.0..1.0).contains(&budget) || budget <= 0.0 {
            return Err(DetectorError::InvalidArgument(format!(
                "budget must lie in (0, 1), got {budget}"
            )));
        }
        let mut remaining = self.cumulative(f_rep_hz, 0)?;
        let dt = 1.0 / f_rep_hz;
        let mut n: u32 = 0;
        while remaining >= budget {
            n += 1;
            remaining -= self.probability_at(n as f64 * dt)?;
            if (n as f64) * dt >= self.horizon_s {
                // Everything within the horizon is skipped.
                return Ok(n);
            }
        }
        Ok(n)
    }
}

/// Dark-count probability per gate as a function of detection
/// efficiency: p(eta) = p10 * exp(slope * (eta - 0.10)).
///
/// The anchor `p10` is the measured probability at 10% efficiency; the
/// slope captures the common exponential rise with excess bias.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DarkCountModel {
    p10: f64,
    slope: f64,
}

impl DarkCountModel {
    pub fn new(p10: f64, slope: f64) -> Result<Self> {
        if !p10.is_finite() || p10 <= 0.0 || p10 >= 1.0 {
            return Err(DetectorError::InvalidArgument(format!(
                "dark probability anchor must lie in (0, 1), got {p10}"
            )));
        }
        if !slope.is_finite() || slope <= 0.0 {
            return Err(DetectorError::InvalidArgument(format!(
                "dark slope must be > 0, got {slope}"
            )));
        }
        Ok(Self { p10, slope })
    }

    pub fn p10(&self) -> f64 {
        self.p10
    }

    pub fn slope(&self) -> f64 {
        self.slope
    }

    /// Dark-count probability per gate at the given efficiency,
    /// clamped to at most 1.
    pub fn at(&self, efficiency: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&efficiency) || efficiency == 0.0 || efficiency == 1.0 {
            return Err(DetectorError::InvalidArgument(format!(
                "efficiency must lie in (0, 1), got {efficiency}"
            )));
        }
        let p = self.p10 * (self.slope * (efficiency - REFERENCE_EFFICIENCY)).exp();
        Ok(p.min(1.0))
    }
}

/// Timing jitter (FWHM of the detection-delay spread) as a
/// piecewise-linear function of detection efficiency.
#[derive(Debug, Clone, PartialEq)]
pub struct JitterModel {
    /// (efficiency, fwhm_s) pairs, ascending in efficiency.
    anchors: Vec<(f64, f64)>,
}

impl JitterModel {
    /// Build a model from anchor points. Anchors must be strictly
    /// ascending in efficiency, with FWHM values in [0, 2 ns] and
    /// non-increasing (jitter falls as excess bias rises).
    pub fn new(anchors: Vec<(f64, f64)>) -> Result<Self> {
        for window in anchors.windows(2) {
            if window[1].0 <= window[0].0 {
                return Err(DetectorError::InvalidArgument(
                    "jitter anchors must be strictly ascending in efficiency".into(),
                ));
            }
            if window[1].1 > window[0].1 {
                return Err(DetectorError::InvalidArgument(
                    "jitter FWHM must be non-increasing in efficiency".into(),
                ));
            }
        }
        for &(eff, fwhm) in &anchors {
            if !(0.0..=1.0).contains(&eff) {
                return Err(DetectorError::InvalidArgument(format!(
                    "jitter anchor efficiency {eff} outside [0, 1]"
                )));
            }
            if !(0.0..=MAX_JITTER_FWHM_S).contains(&fwhm) {
                return Err(DetectorError::InvalidArgument(format!(
                    "jitter FWHM {fwhm} outside [0, 2 ns]"
                )));
            }
        }
        Ok(Self { anchors })
    }

    pub fn anchors(&self) -> &[(f64, f64)] {
        &self.anchors
    }

    /// FWHM at the given efficiency by linear interpolation between
    /// anchors, clamped to the end anchors outside their range.
    pub fn fwhm_at(&self, efficiency: f64) -> Result<f64> {
        if self.anchors.is_empty() {
            return Err(DetectorError::Configuration(
                "jitter model has no anchor points".into(),
            ));
        }
        if !(0.0..=1.0).contains(&efficiency) || efficiency == 0.0 || efficiency == 1.0 {
            return Err(DetectorError::InvalidArgument(format!(
                "efficiency must lie in (0, 1), got {efficiency}"
            )));
        }
        let first = self.anchors[0];
        let last = self.anchors[self.anchors.len() - 1];
        if efficiency <= first.0 {
            return Ok(first.1);
        }
        if efficiency >= last.0 {
            return Ok(last.1);
        }
        for window in self.anchors.windows(2) {
            let (e0, f0) = window[0];
            let (e1, f1) = window[1];
            if efficiency >= e0 && efficiency <= e1 {
                let t = (efficiency - e0) / (e1 - e0);
                return Ok(f0 + t * (f1 - f0));
            }
        }
        unreachable!("efficiency bracketed by construction")
    }
}

/// One diode's operating point.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorProfile {
    pub name: String,
    pub temperature_c: f64,
    /// Detection efficiency eta_det at this operating point.
    pub efficiency: f64,
    pub dark: DarkCountModel,
    /// Gate width in seconds (bias window FWHM).
    pub gate_width_s: f64,
    pub afterpulse: AfterpulseModel,
    pub jitter: JitterModel,
}

impl DetectorProfile {
    pub fn new(
        name: impl Into<String>,
        temperature_c: f64,
        efficiency: f64,
        dark: DarkCountModel,
        gate_width_s: f64,
        afterpulse: AfterpulseModel,
        jitter: JitterModel,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&efficiency) {
            return Err(DetectorError::InvalidArgument(format!(
                "efficiency must lie in [0, 1], got {efficiency}"
            )));
        }
        if !gate_width_s.is_finite() || gate_width_s <= 0.0 {
            return Err(DetectorError::InvalidArgument(format!(
                "gate width must be > 0, got {gate_width_s}"
            )));
        }
        if efficiency > 0.0 && efficiency < 1.0 {
            let p = dark.at(efficiency)?;
            if p <= 0.0 || p >= 1.0 {
                return Err(DetectorError::InvalidArgument(format!(
                    "dark probability at the profile efficiency is {p}, outside (0, 1)"
                )));
            }
        }
        Ok(Self {
            name: name.into(),
            temperature_c,
            efficiency,
            dark,
            gate_width_s,
            afterpulse,
            jitter,
        })
    }

    /// Dark-count probability per gate at the profile's own efficiency.
    pub fn dark_probability(&self) -> f64 {
        self.dark
            .at(self.efficiency)
            .expect("validated at construction")
    }

    /// Jitter FWHM at the profile's own efficiency.
    pub fn jitter_fwhm_s(&self) -> f64 {
        self.jitter
            .fwhm_at(self.efficiency)
            .expect("validated at construction")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn single_term_model(amplitude: f64, lifetime_s: f64) -> AfterpulseModel {
        AfterpulseModel::new(
            vec![AfterpulseTerm::new(amplitude, lifetime_s).unwrap()],
            DEFAULT_HORIZON_S,
        )
        .unwrap()
    }

    #[test]
    fn afterpulse_closed_form_single_term() {
        // a * exp(-dt/tau) with a = 0.01, tau = 1 us, dt = 1 us.
        let model = single_term_model(0.01, 1e-6);
        let p = model.probability_at(1e-6).unwrap();
        assert_relative_eq!(p, 0.01 * (-1.0f64).exp(), max_relative = 1e-12);
        assert_relative_eq!(p, 3.678_794_411_714_423e-3, max_relative = 1e-12);
    }

    #[test]
    fn afterpulse_zero_beyond_horizon() {
        let model = single_term_model(0.5, 50e-6);
        assert_eq!(model.probability_at(DEFAULT_HORIZON_S).unwrap(), 0.0);
        assert_eq!(model.probability_at(1.0).unwrap(), 0.0);
        assert!(model.probability_at(DEFAULT_HORIZON_S - 1e-9).unwrap() > 0.0);
    }

    #[test]
    fn afterpulse_rejects_bad_arguments() {
        let model = single_term_model(0.01, 1e-6);
        assert!(model.probability_at(0.0).is_err());
        assert!(model.probability_at(-1e-9).is_err());
        assert!(AfterpulseTerm::new(-0.1, 1e-6).is_err());
        assert!(AfterpulseTerm::new(0.1, 0.0).is_err());
        let too_much = vec![
            AfterpulseTerm::new(0.6, 1e-6).unwrap(),
            AfterpulseTerm::new(0.6, 2e-6).unwrap(),
        ];
        assert!(AfterpulseModel::new(too_much, DEFAULT_HORIZON_S).is_err());
    }

    #[test]
    fn afterpulse_non_increasing() {
        let model = AfterpulseModel::new(
            vec![
                AfterpulseTerm::new(0.008, 0.1e-6).unwrap(),
                AfterpulseTerm::new(0.005, 1.5e-6).unwrap(),
                AfterpulseTerm::new(1e-4, 60e-6).unwrap(),
            ],
            DEFAULT_HORIZON_S,
        )
        .unwrap();
        let mut prev = f64::INFINITY;
        for i in 1..2000 {
            let dt = i as f64 * 60e-9;
            let p = model.probability_at(dt).unwrap();
            assert!(p <= prev, "p_ap increased at dt = {dt}");
            prev = p;
        }
    }

    #[test]
    fn cumulative_matches_brute_force_sum() {
        // Oracle: direct term-by-term summation out to the horizon with
        // a 10x smaller cut threshold than the implementation uses.
        let model = AfterpulseModel::new(
            vec![
                AfterpulseTerm::new(0.009, 0.12e-6).unwrap(),
                AfterpulseTerm::new(0.0064, 1.8e-6).unwrap(),
                AfterpulseTerm::new(9.4e-5, 80e-6).unwrap(),
            ],
            DEFAULT_HORIZON_S,
        )
        .unwrap();
        for &(f_rep, n_skip) in &[(1e6, 0u32), (1e6, 2), (2e6, 14), (10e3, 0), (370e3, 3)] {
            let dt = 1.0 / f_rep;
            let mut oracle = 0.0;
            let mut n = u64::from(n_skip) + 1;
            while (n as f64) * dt < model.horizon_s() {
                let p = model.probability_at(n as f64 * dt).unwrap();
                oracle += p;
                if p < 1e-13 && n as f64 * dt > 10e-6 {
                    break;
                }
                n += 1;
            }
            let got = model.cumulative(f_rep, n_skip).unwrap();
            if oracle > 0.0 {
                assert!(
                    ((got - oracle) / oracle).abs() < 1e-4,
                    "cumulative mismatch at f_rep = {f_rep}, n_skip = {n_skip}: {got} vs {oracle}"
                );
            } else {
                assert!(got.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cumulative_zero_once_skip_reaches_horizon() {
        let model = single_term_model(0.05, 5e-6);
        // (n_skip + 1) / f_rep >= horizon => nothing left to sum.
        let f_rep = 1e6;
        let n_skip = (DEFAULT_HORIZON_S * f_rep) as u32;
        assert_eq!(model.cumulative(f_rep, n_skip).unwrap(), 0.0);
    }

    #[test]
    fn cumulative_monotone_in_skip_and_rate() {
        let model = AfterpulseModel::new(
            vec![
                AfterpulseTerm::new(0.009, 0.12e-6).unwrap(),
                AfterpulseTerm::new(0.0064, 1.8e-6).unwrap(),
                AfterpulseTerm::new(9.4e-5, 80e-6).unwrap(),
            ],
            DEFAULT_HORIZON_S,
        )
        .unwrap();
        let mut prev = f64::INFINITY;
        for n_skip in 0..40 {
            let c = model.cumulative(1e6, n_skip).unwrap();
            assert!(c <= prev);
            prev = c;
        }
        // Denser gating samples the decay curve more often.
        let mut prev = 0.0;
        for f_rep in [10e3, 50e3, 200e3, 1e6, 2e6, 5e6] {
            let c = model.cumulative(f_rep, 0).unwrap();
            assert!(c >= prev, "cumulative fell when f_rep rose to {f_rep}");
            prev = c;
        }
    }

    #[test]
    fn min_skip_boundary_property() {
        let model = AfterpulseModel::new(
            vec![
                AfterpulseTerm::new(0.009, 0.12e-6).unwrap(),
                AfterpulseTerm::new(0.0064, 1.8e-6).unwrap(),
                AfterpulseTerm::new(9.4e-5, 80e-6).unwrap(),
            ],
            DEFAULT_HORIZON_S,
        )
        .unwrap();
        for &(f_rep, budget) in &[(1e6, 1e-2), (2e6, 1e-2), (1e6, 5e-3), (500e3, 2e-3)] {
            let n = model.min_skip_gates(f_rep, budget).unwrap();
            assert!(model.cumulative(f_rep, n).unwrap() < budget);
            if n > 0 {
                assert!(model.cumulative(f_rep, n - 1).unwrap() >= budget);
            }
        }
    }

    #[test]
    fn dark_count_reference_and_ratio() {
        let model = DarkCountModel::new(2.8e-5, 30.0).unwrap();
        assert_eq!(model.at(REFERENCE_EFFICIENCY).unwrap(), 2.8e-5);
        // Log-linearity: the ratio between two efficiencies is exactly
        // exp(slope * (eta2 - eta1)).
        let p1 = model.at(0.07).unwrap();
        let p2 = model.at(0.19).unwrap();
        assert_relative_eq!(p2 / p1, (30.0f64 * 0.12).exp(), max_relative = 1e-12);
    }

    #[test]
    fn dark_count_rejects_out_of_range() {
        let model = DarkCountModel::new(2.8e-5, 30.0).unwrap();
        assert!(model.at(0.0).is_err());
        assert!(model.at(1.0).is_err());
        assert!(model.at(-0.1).is_err());
        assert!(DarkCountModel::new(0.0, 30.0).is_err());
        assert!(DarkCountModel::new(2.8e-5, -1.0).is_err());
    }

    #[test]
    fn dark_count_clamps_to_one() {
        let model = DarkCountModel::new(0.9, 300.0).unwrap();
        assert_eq!(model.at(0.9).unwrap(), 1.0);
    }

    #[test]
    fn jitter_interpolation_midpoint() {
        let model = JitterModel::new(vec![(0.05, 500e-12), (0.15, 300e-12)]).unwrap();
        assert_relative_eq!(model.fwhm_at(0.10).unwrap(), 400e-12, max_relative = 1e-12);
    }

    #[test]
    fn jitter_anchor_identity_and_clamp() {
        let model =
            JitterModel::new(vec![(0.05, 500e-12), (0.10, 450e-12), (0.25, 300e-12)]).unwrap();
        assert_eq!(model.fwhm_at(0.10).unwrap(), 450e-12);
        assert_eq!(model.fwhm_at(0.01).unwrap(), 500e-12);
        assert_eq!(model.fwhm_at(0.60).unwrap(), 300e-12);
    }

    #[test]
    fn jitter_empty_model_is_configuration_error() {
        let model = JitterModel::new(vec![]).unwrap();
        assert!(matches!(
            model.fwhm_at(0.10),
            Err(DetectorError::Configuration(_))
        ));
    }

    #[test]
    fn jitter_rejects_increasing_fwhm() {
        assert!(JitterModel::new(vec![(0.05, 300e-12), (0.15, 500e-12)]).is_err());
        assert!(JitterModel::new(vec![(0.15, 300e-12), (0.05, 500e-12)]).is_err());
        assert!(JitterModel::new(vec![(0.05, 3e-9)]).is_err());
    }
}
