//! Reduction of raw counting data into detector parameters.
//!
//! The pipeline mirrors the bench procedures: dark probability from
//! shutter-closed counting, Poisson-corrected detection efficiency from
//! a light/dark pair, afterpulse probability from double-gate
//! coincidences, and timing jitter from a delay histogram with pedestal
//! subtraction and laser deconvolution. Every estimate carries a
//! propagated counting uncertainty.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CharacterizeError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("no discernible peak: {0}")]
    NoPeak(String),
}

type Result<T> = std::result::Result<T, CharacterizeError>;

/// Why an estimate was adjusted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimateFlag {
    /// Zero observed counts; the standard error is a one-sided upper
    /// bound from a single hypothetical count.
    OneSidedBound,
    /// The raw estimate fell below the subtracted floor and was clamped
    /// to zero; the unclamped value survives in `raw_value`.
    BelowFloor,
}

/// A reduced quantity with its counting uncertainty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
    pub flag: Option<EstimateFlag>,
    /// Pre-clamp value, kept for diagnosing miscalibrated inputs.
    pub raw_value: Option<f64>,
}

impl Estimate {
    fn plain(value: f64, std_error: f64) -> Self {
        Self {
            value,
            std_error,
            flag: None,
            raw_value: None,
        }
    }

    pub fn flags_string(&self) -> String {
        match self.flag {
            None => String::new(),
            Some(EstimateFlag::OneSidedBound) => "one-sided-bound".into(),
            Some(EstimateFlag::BelowFloor) => "below-floor".into(),
        }
    }
}

/// One counting run: accumulated counts over an integration time at a
/// fixed gate rate, with the shutter open (light reaches the detector)
/// or closed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasurementRecord {
    pub counts: u64,
    pub integration_time_s: f64,
    pub f_rep_hz: f64,
    pub shutter_open: bool,
    /// Mean photons per pulse at the detector, required when the
    /// shutter is open.
    pub mean_photons_per_pulse: Option<f64>,
}

impl MeasurementRecord {
    pub fn validate(&self) -> Result<()> {
        if !(self.integration_time_s > 0.0) {
            return Err(CharacterizeError::InvalidData(format!(
                "integration time must be > 0, got {}",
                self.integration_time_s
            )));
        }
        if !(self.f_rep_hz > 0.0) {
            return Err(CharacterizeError::InvalidData(format!(
                "repetition frequency must be > 0, got {}",
                self.f_rep_hz
            )));
        }
        match (self.shutter_open, self.mean_photons_per_pulse) {
            (true, Some(mu)) if mu > 0.0 => Ok(()),
            (true, _) => Err(CharacterizeError::InvalidData(
                "open-shutter records need a positive mean photon number".into(),
            )),
            (false, _) => Ok(()),
        }
    }

    /// Counts per gate.
    pub fn probability(&self) -> f64 {
        self.counts as f64 / (self.f_rep_hz * self.integration_time_s)
    }

    /// Poisson standard error of [`Self::probability`].
    pub fn probability_std_error(&self) -> f64 {
        (self.counts as f64).sqrt() / (self.f_rep_hz * self.integration_time_s)
    }
}

/// Dark-count probability per gate from a shutter-closed run:
/// counts / (f_rep * integration time), with the square-root-of-counts
/// uncertainty.
pub fn dark_probability(rec: &MeasurementRecord) -> Result<Estimate> {
    rec.validate()?;
    if rec.shutter_open {
        return Err(CharacterizeError::InvalidArgument(
            "dark probability requires a shutter-closed record".into(),
        ));
    }
    let denom = rec.f_rep_hz * rec.integration_time_s;
    if rec.counts == 0 {
        return Ok(Estimate {
            value: 0.0,
            std_error: 1.0 / denom,
            flag: Some(EstimateFlag::OneSidedBound),
            raw_value: None,
        });
    }
    Ok(Estimate::plain(
        rec.probability(),
        rec.probability_std_error(),
    ))
}

/// Detection efficiency from a light/dark record pair, correcting for
/// the Poisson photon-number statistics of the attenuated source:
/// eta = -ln[(1 - p_light) / (1 - p_dark)] / mu.
///
/// A light probability at or below the dark probability indicates no
/// optical signal; the estimate is zero, flagged, with the raw
/// (negative) inversion preserved.
pub fn detection_efficiency(
    light: &MeasurementRecord,
    dark: &MeasurementRecord,
) -> Result<Estimate> {
    light.validate()?;
    dark.validate()?;
    if !light.shutter_open {
        return Err(CharacterizeError::InvalidArgument(
            "the light record must have the shutter open".into(),
        ));
    }
    if dark.shutter_open {
        return Err(CharacterizeError::InvalidArgument(
            "the dark record must have the shutter closed".into(),
        ));
    }
    let rel_df = (light.f_rep_hz - dark.f_rep_hz).abs() / light.f_rep_hz;
    if rel_df > 1e-9 {
        return Err(CharacterizeError::InvalidArgument(format!(
            "light and dark records were taken at different gate rates ({} vs {})",
            light.f_rep_hz, dark.f_rep_hz
        )));
    }
    let mu = light.mean_photons_per_pulse.expect("validated above");
    let p_light = light.probability();
    let p_dark = dark.probability();
    if p_light >= 1.0 {
        return Err(CharacterizeError::InvalidArgument(format!(
            "light probability per gate is {p_light}; the log inversion needs p < 1"
        )));
    }
    let raw = -((1.0 - p_light) / (1.0 - p_dark)).ln() / mu;
    let d_light = 1.0 / (mu * (1.0 - p_light));
    let d_dark = 1.0 / (mu * (1.0 - p_dark));
    let std_error = ((d_light * light.probability_std_error()).powi(2)
        + (d_dark * dark.probability_std_error()).powi(2))
    .sqrt();
    if p_light <= p_dark {
        return Ok(Estimate {
            value: 0.0,
            std_error,
            flag: Some(EstimateFlag::BelowFloor),
            raw_value: Some(raw),
        });
    }
    Ok(Estimate::plain(raw, std_error))
}

/// One double-gate coincidence measurement at a fixed delay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DoubleGateRecord {
    pub n_first_gate_counts: u64,
    pub n_coincidences: u64,
    pub dt_s: f64,
    /// Independently measured dark probability per gate, subtracted
    /// from the coincidence fraction.
    pub dark_probability: f64,
}

impl DoubleGateRecord {
    pub fn validate(&self) -> Result<()> {
        if self.n_coincidences > self.n_first_gate_counts {
            return Err(CharacterizeError::InvalidData(format!(
                "{} coincidences exceed {} first-gate counts",
                self.n_coincidences, self.n_first_gate_counts
            )));
        }
        if !(self.dt_s > 0.0) {
            return Err(CharacterizeError::InvalidData(format!(
                "gate delay must be > 0, got {}",
                self.dt_s
            )));
        }
        if !(0.0..=1.0).contains(&self.dark_probability) {
            return Err(CharacterizeError::InvalidData(format!(
                "dark probability {} outside [0, 1]",
                self.dark_probability
            )));
        }
        Ok(())
    }
}

/// Afterpulse probability at one delay: the conditional coincidence
/// fraction minus the dark probability, with a binomial standard
/// error. Negative estimates clamp to zero and are flagged.
pub fn afterpulse_point(rec: &DoubleGateRecord) -> Result<Estimate> {
    rec.validate()?;
    if rec.n_first_gate_counts == 0 {
        return Err(CharacterizeError::InvalidArgument(
            "no first-gate counts; the conditional fraction is undefined".into(),
        ));
    }
    let n = rec.n_first_gate_counts as f64;
    let fraction = rec.n_coincidences as f64 / n;
    let raw = fraction - rec.dark_probability;
    let std_error = (fraction * (1.0 - fraction) / n).sqrt();
    if raw < 0.0 {
        return Ok(Estimate {
            value: 0.0,
            std_error,
            flag: Some(EstimateFlag::BelowFloor),
            raw_value: Some(raw),
        });
    }
    Ok(Estimate::plain(raw, std_error))
}

/// A detection-delay histogram: a dark-count pedestal plus a photon
/// peak broadened by the laser pulse and the detector jitter.
#[derive(Debug, Clone, PartialEq)]
pub struct TimingHistogram {
    pub bin_width_s: f64,
    pub bins: Vec<u64>,
    /// FWHM of the light pulse itself, deconvolved in quadrature.
    pub laser_fwhm_s: f64,
}

/// Default laser pulse width.
pub const DEFAULT_LASER_FWHM_S: f64 = 350e-12;

impl TimingHistogram {
    pub fn validate(&self) -> Result<()> {
        if !(self.bin_width_s > 0.0) {
            return Err(CharacterizeError::InvalidData(format!(
                "bin width must be > 0, got {}",
                self.bin_width_s
            )));
        }
        if self.bins.iter().all(|&b| b == 0) {
            return Err(CharacterizeError::InvalidData(
                "histogram has no counts".into(),
            ));
        }
        if !(self.laser_fwhm_s >= 0.0) {
            return Err(CharacterizeError::InvalidData(format!(
                "laser FWHM must be >= 0, got {}",
                self.laser_fwhm_s
            )));
        }
        Ok(())
    }
}

/// Detector jitter from a measured peak width and the laser pulse
/// width, deconvolved in quadrature under a Gaussian assumption.
pub fn deconvolved_fwhm(measured_s: f64, laser_s: f64) -> Result<f64> {
    if !(measured_s > 0.0) || laser_s < 0.0 {
        return Err(CharacterizeError::InvalidArgument(format!(
            "widths must be positive, got measured {measured_s} and laser {laser_s}"
        )));
    }
    if measured_s < laser_s {
        return Err(CharacterizeError::InvalidData(format!(
            "measured FWHM {measured_s} s is narrower than the laser pulse {laser_s} s"
        )));
    }
    Ok((measured_s * measured_s - laser_s * laser_s).sqrt())
}

/// Interpolated half-maximum width of `values` around the peak at
/// `peak`, in bin units. Returns None when a crossing is missing.
fn half_max_width(values: &[f64], peak: usize) -> Option<f64> {
    let half = values[peak] / 2.0;
    let mut left = None;
    for i in (0..peak).rev() {
        if values[i] <= half {
            let t = (half - values[i]) / (values[i + 1] - values[i]);
            left = Some(i as f64 + t);
            break;
        }
    }
    let mut right = None;
    for i in peak + 1..values.len() {
        if values[i] <= half {
            let t = (values[i - 1] - half) / (values[i - 1] - values[i]);
            right = Some((i - 1) as f64 + t);
            break;
        }
    }
    Some(right? - left?)
}

fn median(sorted_scratch: &mut Vec<f64>) -> f64 {
    sorted_scratch.sort_by(f64::total_cmp);
    let n = sorted_scratch.len();
    if n % 2 == 1 {
        sorted_scratch[n / 2]
    } else {
        0.5 * (sorted_scratch[n / 2 - 1] + sorted_scratch[n / 2])
    }
}

/// Timing jitter FWHM from a delay histogram.
///
/// The dark-count pedestal is estimated as the median of the bins more
/// than three preliminary widths away from the peak and subtracted;
/// the peak width is read off by linear interpolation at half maximum
/// and the laser width removed in quadrature. The peak must stand
/// above the pedestal by at least five pedestal standard deviations.
pub fn jitter_fwhm(hist: &TimingHistogram) -> Result<Estimate> {
    hist.validate()?;
    let values: Vec<f64> = hist.bins.iter().map(|&b| b as f64).collect();
    let peak = values
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .expect("non-empty histogram");

    // Preliminary width with no pedestal correction, to size the
    // exclusion zone.
    let prelim = half_max_width(&values, peak).ok_or_else(|| {
        CharacterizeError::NoPeak("no half-maximum crossings around the peak".into())
    })?;
    let exclusion = (3.0 * prelim).ceil() as usize;
    let lo = peak.saturating_sub(exclusion);
    let hi = (peak + exclusion + 1).min(values.len());
    let mut off_peak: Vec<f64> = values[..lo].iter().chain(&values[hi..]).copied().collect();

    let (pedestal, ped_std) = if off_peak.is_empty() {
        (0.0, 0.0)
    } else {
        let m = median(&mut off_peak);
        let n = off_peak.len() as f64;
        let mean = off_peak.iter().sum::<f64>() / n;
        let var = off_peak.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n.max(1.0);
        (m, var.sqrt())
    };

    let prominence = values[peak] - pedestal;
    if prominence <= 0.0 || (ped_std > 0.0 && prominence < 5.0 * ped_std) {
        return Err(CharacterizeError::NoPeak(format!(
            "peak prominence {prominence:.1} is below five pedestal standard \
             deviations ({:.1})",
            5.0 * ped_std
        )));
    }

    let subtracted: Vec<f64> = values.iter().map(|v| (v - pedestal).max(0.0)).collect();
    let width_bins = half_max_width(&subtracted, peak).ok_or_else(|| {
        CharacterizeError::NoPeak("no half-maximum crossings after pedestal subtraction".into())
    })?;
    let measured = width_bins * hist.bin_width_s;
    let jitter = deconvolved_fwhm(measured, hist.laser_fwhm_s)?;
    Ok(Estimate::plain(jitter, hist.bin_width_s / 2.0))
}

/// Counts needed for a target relative uncertainty: (1 / rel_err)^2.
pub fn counts_needed(relative_error: f64) -> Result<u64> {
    if !(relative_error > 0.0 && relative_error <= 1.0) {
        return Err(CharacterizeError::InvalidArgument(format!(
            "relative error must lie in (0, 1], got {relative_error}"
        )));
    }
    Ok((1.0 / relative_error.powi(2)).ceil() as u64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn closed(counts: u64, time_s: f64, f_rep: f64) -> MeasurementRecord {
        MeasurementRecord {
            counts,
            integration_time_s: time_s,
            f_rep_hz: f_rep,
            shutter_open: false,
            mean_photons_per_pulse: None,
        }
    }

    fn open(counts: u64, time_s: f64, f_rep: f64, mu: f64) -> MeasurementRecord {
        MeasurementRecord {
            counts,
            integration_time_s: time_s,
            f_rep_hz: f_rep,
            shutter_open: true,
            mean_photons_per_pulse: Some(mu),
        }
    }

    #[test]
    fn dark_probability_arithmetic() {
        let e = dark_probability(&closed(1000, 100.0, 10e3)).unwrap();
        assert_relative_eq!(e.value, 1e-3, max_relative = 1e-12);
        assert_abs_diff_eq!(e.std_error, 3.16e-5, epsilon = 1e-6);
        assert!(e.flag.is_none());
    }

    #[test]
    fn dark_probability_zero_counts_one_sided() {
        let e = dark_probability(&closed(0, 100.0, 10e3)).unwrap();
        assert_eq!(e.value, 0.0);
        assert_eq!(e.flag, Some(EstimateFlag::OneSidedBound));
        assert_relative_eq!(e.std_error, 1e-6, max_relative = 1e-12);
    }

    #[test]
    fn dark_probability_hundred_counts_is_ten_percent() {
        let e = dark_probability(&closed(100, 10.0, 10e3)).unwrap();
        assert_relative_eq!(e.std_error / e.value, 0.10, max_relative = 1e-12);
    }

    #[test]
    fn dark_probability_rejects_open_shutter() {
        assert!(dark_probability(&open(10, 1.0, 10e3, 0.1)).is_err());
    }

    #[test]
    fn efficiency_log_inversion() {
        // p_light = 1 - exp(-mu eta) with mu = 0.1, eta = 0.1, no dark.
        let light = open(99_502, 1000.0, 10e3, 0.1);
        let dark = closed(0, 1000.0, 10e3);
        let e = detection_efficiency(&light, &dark).unwrap();
        assert_abs_diff_eq!(e.value, 0.100, epsilon = 1e-3);
    }

    #[test]
    fn efficiency_with_dark_floor() {
        // p_light = 1 - (1 - p_dark) exp(-mu eta) = 0.010940 with
        // p_dark = 1e-3.
        let light = open(109_402, 1000.0, 10e3, 0.1);
        let dark = closed(10_000, 1000.0, 10e3);
        let e = detection_efficiency(&light, &dark).unwrap();
        assert_abs_diff_eq!(e.value, 0.100, epsilon = 1e-3);
    }

    #[test]
    fn efficiency_zero_when_no_signal() {
        let light = open(1000, 1000.0, 10e3, 0.1);
        let dark = closed(1000, 1000.0, 10e3);
        let e = detection_efficiency(&light, &dark).unwrap();
        assert_eq!(e.value, 0.0);
        assert_eq!(e.flag, Some(EstimateFlag::BelowFloor));
        assert_eq!(e.raw_value, Some(0.0));
    }

    #[test]
    fn efficiency_monotone_in_light_counts() {
        let dark = closed(500, 1000.0, 10e3);
        let mut prev = -1.0;
        for counts in [2000, 5000, 20_000, 80_000] {
            let e = detection_efficiency(&open(counts, 1000.0, 10e3, 0.1), &dark).unwrap();
            assert!(e.value > prev);
            prev = e.value;
        }
    }

    #[test]
    fn efficiency_rejects_mismatched_rates() {
        let light = open(1000, 1.0, 10e3, 0.1);
        let dark = closed(10, 1.0, 20e3);
        assert!(detection_efficiency(&light, &dark).is_err());
    }

    #[test]
    fn afterpulse_point_arithmetic() {
        let rec = DoubleGateRecord {
            n_first_gate_counts: 10_000,
            n_coincidences: 150,
            dt_s: 1e-6,
            dark_probability: 5e-3,
        };
        let e = afterpulse_point(&rec).unwrap();
        assert_relative_eq!(e.value, 0.010, max_relative = 1e-12);
        assert_abs_diff_eq!(e.std_error, 1.2e-3, epsilon = 1e-4);
        // value + dark equals the raw coincidence fraction exactly.
        assert_relative_eq!(
            e.value + rec.dark_probability,
            0.015,
            max_relative = 1e-12
        );
    }

    #[test]
    fn afterpulse_point_clamps_below_floor() {
        let exact = DoubleGateRecord {
            n_first_gate_counts: 10_000,
            n_coincidences: 50,
            dt_s: 1e-6,
            dark_probability: 5e-3,
        };
        assert_eq!(afterpulse_point(&exact).unwrap().value, 0.0);

        let below = DoubleGateRecord {
            n_first_gate_counts: 10_000,
            n_coincidences: 30,
            dt_s: 1e-6,
            dark_probability: 5e-3,
        };
        let e = afterpulse_point(&below).unwrap();
        assert_eq!(e.value, 0.0);
        assert_eq!(e.flag, Some(EstimateFlag::BelowFloor));
        assert_relative_eq!(e.raw_value.unwrap(), -2e-3, max_relative = 1e-9);
    }

    #[test]
    fn afterpulse_point_rejects_empty() {
        let rec = DoubleGateRecord {
            n_first_gate_counts: 0,
            n_coincidences: 0,
            dt_s: 1e-6,
            dark_probability: 0.0,
        };
        assert!(afterpulse_point(&rec).is_err());
    }

    fn gaussian_histogram(
        sigma_s: f64,
        bin_width_s: f64,
        amplitude: f64,
        pedestal: f64,
    ) -> TimingHistogram {
        let span = 4e-9;
        let n = (span / bin_width_s) as usize;
        let center = span / 2.0;
        let bins = (0..n)
            .map(|i| {
                let t = (i as f64 + 0.5) * bin_width_s;
                let g = amplitude * (-(t - center).powi(2) / (2.0 * sigma_s * sigma_s)).exp();
                (g + pedestal).round() as u64
            })
            .collect();
        TimingHistogram {
            bin_width_s,
            bins,
            laser_fwhm_s: 0.0,
        }
    }

    #[test]
    fn jitter_from_synthetic_gaussian() {
        // sigma = 191 ps corresponds to a 450 ps FWHM.
        let hist = gaussian_histogram(191e-12, 10e-12, 10_000.0, 50.0);
        let e = jitter_fwhm(&hist).unwrap();
        assert_abs_diff_eq!(e.value, 450e-12, epsilon = 15e-12);
        assert_eq!(e.std_error, 5e-12);
    }

    #[test]
    fn jitter_quadrature_arithmetic() {
        let j = deconvolved_fwhm(570e-12, 350e-12).unwrap();
        assert_abs_diff_eq!(j, 449.889e-12, epsilon = 1e-13);
        assert_eq!(deconvolved_fwhm(350e-12, 350e-12).unwrap(), 0.0);
        assert!(deconvolved_fwhm(300e-12, 350e-12).is_err());
    }

    #[test]
    fn jitter_with_laser_deconvolution() {
        // Measured width is the quadrature sum of detector and laser.
        let measured_sigma = (191e-12f64.powi(2) + (350e-12 / 2.354_820_045f64).powi(2)).sqrt();
        let mut hist = gaussian_histogram(measured_sigma, 10e-12, 20_000.0, 20.0);
        hist.laser_fwhm_s = 350e-12;
        let e = jitter_fwhm(&hist).unwrap();
        assert_abs_diff_eq!(e.value, 450e-12, epsilon = 20e-12);
    }

    #[test]
    fn jitter_flat_histogram_is_no_peak() {
        let hist = TimingHistogram {
            bin_width_s: 10e-12,
            bins: vec![100; 400],
            laser_fwhm_s: 0.0,
        };
        assert!(matches!(
            jitter_fwhm(&hist),
            Err(CharacterizeError::NoPeak(_))
        ));
    }

    #[test]
    fn jitter_weak_peak_fails_prominence() {
        // A bump of a few counts on a noisy pedestal of ~100.
        let mut hist = gaussian_histogram(191e-12, 10e-12, 8.0, 100.0);
        // Make the pedestal genuinely noisy so its deviation is
        // non-trivial.
        for (i, b) in hist.bins.iter_mut().enumerate() {
            *b += (i % 7) as u64 * 4;
        }
        assert!(matches!(
            jitter_fwhm(&hist),
            Err(CharacterizeError::NoPeak(_))
        ));
    }

    #[test]
    fn errors_shrink_with_counts() {
        // Two scales 100x apart: relative uncertainty shrinks 10x.
        let small = dark_probability(&closed(400, 10.0, 10e3)).unwrap();
        let large = dark_probability(&closed(40_000, 1000.0, 10e3)).unwrap();
        let rel_small = small.std_error / small.value;
        let rel_large = large.std_error / large.value;
        assert_relative_eq!(rel_small / rel_large, 10.0, max_relative = 1e-9);
    }

    #[test]
    fn counts_planning_helper() {
        assert_eq!(counts_needed(0.10).unwrap(), 100);
        assert_eq!(counts_needed(0.05).unwrap(), 400);
        assert!(counts_needed(0.0).is_err());
    }
}
