//! Built-in detector profile registry and the plain-text profile file
//! format.
//!
//! The registry ships one profile per measured operating point, all
//! quoted at a 10% detection efficiency. The dark-count anchors are
//! stored values; the afterpulse coefficients were produced by
//! [`crate::calibrate::fit_to_constraints`] run against the default
//! Epitaxx operating targets (see
//! [`crate::calibrate::epitaxx_constraint_targets`]) and frozen here.

use crate::detector::{
    AfterpulseModel, AfterpulseTerm, DarkCountModel, DetectorError, DetectorProfile, JitterModel,
    DEFAULT_GATE_WIDTH_S, DEFAULT_HORIZON_S,
};
use thiserror::Error;

/// Default dark-vs-efficiency exponential slope, per unit efficiency.
/// The 10%-efficiency anchors are measured; the slope is a calibrated
/// default and is configurable in profile files.
pub const DEFAULT_DARK_SLOPE: f64 = 30.0;

/// Default jitter anchors: (efficiency, FWHM seconds).
pub fn default_jitter_anchors() -> Vec<(f64, f64)> {
    vec![(0.05, 500e-12), (0.10, 450e-12), (0.25, 300e-12)]
}

/// Afterpulse decay coefficients for the Epitaxx diode with short
/// gates: (amplitude, lifetime in seconds). Produced by the constrained
/// fit in `calibrate` and frozen; regenerating them is covered by the
/// calibration test suite.
pub const EPITAXX_AFTERPULSE_TERMS: [(f64, f64); 3] = [
    (8.973_8e-3, 0.12e-6),
    (6.352_9e-3, 1.835_8e-6),
    (9.421_8e-5, 80.0e-6),
];

fn epitaxx_afterpulse() -> AfterpulseModel {
    let terms = EPITAXX_AFTERPULSE_TERMS
        .iter()
        .map(|&(a, tau)| AfterpulseTerm::new(a, tau).expect("valid constant"))
        .collect();
    AfterpulseModel::new(terms, DEFAULT_HORIZON_S).expect("valid constant")
}

/// The EG&G/NEC diodes afterpulse less and recover faster than the
/// Epitaxx diode. No fit coefficients exist for them, so this variant
/// scales the Epitaxx terms down and shortens the lifetimes; treat it
/// as approximate.
fn egg_nec_afterpulse() -> AfterpulseModel {
    let terms = EPITAXX_AFTERPULSE_TERMS
        .iter()
        .map(|&(a, tau)| AfterpulseTerm::new(0.6 * a, 0.5 * tau).expect("valid constant"))
        .collect();
    AfterpulseModel::new(terms, DEFAULT_HORIZON_S).expect("valid constant")
}

fn profile(
    name: &str,
    temperature_c: f64,
    p10: f64,
    gate_width_s: f64,
    afterpulse: AfterpulseModel,
) -> DetectorProfile {
    DetectorProfile::new(
        name,
        temperature_c,
        0.10,
        DarkCountModel::new(p10, DEFAULT_DARK_SLOPE).expect("valid constant"),
        gate_width_s,
        afterpulse,
        JitterModel::new(default_jitter_anchors()).expect("valid constant"),
    )
    .expect("valid constant")
}

/// All built-in detector profiles.
pub fn builtin_profiles() -> Vec<DetectorProfile> {
    vec![
        profile(
            "epitaxx-60",
            -60.0,
            2.8e-5,
            DEFAULT_GATE_WIDTH_S,
            epitaxx_afterpulse(),
        ),
        profile(
            "epitaxx-40",
            -40.0,
            6.0e-5,
            DEFAULT_GATE_WIDTH_S,
            epitaxx_afterpulse(),
        ),
        profile(
            "egg-nec-60",
            -60.0,
            3.5e-4,
            DEFAULT_GATE_WIDTH_S,
            egg_nec_afterpulse(),
        ),
        profile("fujitsu-196", -196.0, 1.0e-4, 2.5e-9, epitaxx_afterpulse()),
        profile(
            "passive-quench",
            -60.0,
            2.5e-3,
            DEFAULT_GATE_WIDTH_S,
            egg_nec_afterpulse(),
        ),
        profile(
            "improved-hypothetical",
            -60.0,
            2.8e-6,
            DEFAULT_GATE_WIDTH_S,
            epitaxx_afterpulse(),
        ),
    ]
}

/// Look up a built-in profile by name.
pub fn builtin(name: &str) -> Option<DetectorProfile> {
    builtin_profiles().into_iter().find(|p| p.name == name)
}

/// Names of all built-in profiles, in registry order.
pub fn builtin_names() -> Vec<String> {
    builtin_profiles().into_iter().map(|p| p.name).collect()
}

#[derive(Debug, Error)]
pub enum ProfileTextError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("profile {name:?}: missing field {field}")]
    MissingField { name: String, field: String },
    #[error("profile {name:?}: {source}")]
    Invalid {
        name: String,
        source: DetectorError,
    },
}

/// Serialize profiles to the plain-text registry format: one block per
/// profile, `key: value` lines, blank-line separated.
pub fn serialize_profiles(profiles: &[DetectorProfile]) -> String {
    let mut out = String::new();
    for (i, p) in profiles.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str(&format!("profile: {}\n", p.name));
        out.push_str(&format!("temperature_c: {}\n", p.temperature_c));
        out.push_str(&format!("efficiency: {}\n", p.efficiency));
        out.push_str(&format!("dark_p10: {}\n", p.dark.p10()));
        out.push_str(&format!("dark_slope: {}\n", p.dark.slope()));
        out.push_str(&format!("gate_width_ns: {}\n", p.gate_width_s * 1e9));
        out.push_str(&format!(
            "afterpulse_horizon_us: {}\n",
            p.afterpulse.horizon_s() * 1e6
        ));
        let terms: Vec<String> = p
            .afterpulse
            .terms()
            .iter()
            .map(|t| format!("{}:{}", t.amplitude, t.lifetime_s * 1e6))
            .collect();
        out.push_str(&format!("afterpulse_terms: {}\n", terms.join(" ")));
        let anchors: Vec<String> = p
            .jitter
            .anchors()
            .iter()
            .map(|(e, f)| format!("{}:{}", e, f * 1e12))
            .collect();
        out.push_str(&format!("jitter_anchors: {}\n", anchors.join(" ")));
    }
    out
}

/// Parse a profile registry document. `#` starts a comment; blank
/// lines separate profile blocks.
pub fn parse_profiles(text: &str) -> Result<Vec<DetectorProfile>, ProfileTextError> {
    struct Block {
        name: String,
        temperature_c: Option<f64>,
        efficiency: Option<f64>,
        dark_p10: Option<f64>,
        dark_slope: f64,
        gate_width_s: Option<f64>,
        horizon_s: f64,
        terms: Vec<AfterpulseTerm>,
        anchors: Vec<(f64, f64)>,
        start_line: usize,
    }

    fn finish(block: Block) -> Result<DetectorProfile, ProfileTextError> {
        let name = block.name.clone();
        let missing = |field: &str| ProfileTextError::MissingField {
            name: name.clone(),
            field: field.to_string(),
        };
        let dark = DarkCountModel::new(
            block.dark_p10.ok_or_else(|| missing("dark_p10"))?,
            block.dark_slope,
        )
        .map_err(|source| ProfileTextError::Invalid {
            name: name.clone(),
            source,
        })?;
        let afterpulse = AfterpulseModel::new(block.terms, block.horizon_s).map_err(|source| {
            ProfileTextError::Invalid {
                name: name.clone(),
                source,
            }
        })?;
        let jitter =
            JitterModel::new(block.anchors).map_err(|source| ProfileTextError::Invalid {
                name: name.clone(),
                source,
            })?;
        DetectorProfile::new(
            block.name,
            block.temperature_c.ok_or_else(|| missing("temperature_c"))?,
            block.efficiency.ok_or_else(|| missing("efficiency"))?,
            dark,
            block.gate_width_s.ok_or_else(|| missing("gate_width_ns"))?,
            afterpulse,
            jitter,
        )
        .map_err(|source| ProfileTextError::Invalid { name, source })
    }

    let parse_f64 = |value: &str, line: usize| -> Result<f64, ProfileTextError> {
        value
            .trim()
            .parse::<f64>()
            .map_err(|e| ProfileTextError::Parse {
                line,
                message: format!("bad number {value:?}: {e}"),
            })
    };

    let mut profiles = Vec::new();
    let mut block: Option<Block> = None;

    for (idx, raw_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = match raw_line.find('#') {
            Some(pos) => &raw_line[..pos],
            None => raw_line,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once(':').ok_or_else(|| ProfileTextError::Parse {
            line: line_no,
            message: format!("expected `key: value`, got {line:?}"),
        })?;
        let key = key.trim();
        let value = value.trim();

        if key == "profile" {
            if let Some(done) = block.take() {
                profiles.push(finish(done)?);
            }
            block = Some(Block {
                name: value.to_string(),
                temperature_c: None,
                efficiency: None,
                dark_p10: None,
                dark_slope: DEFAULT_DARK_SLOPE,
                gate_width_s: None,
                horizon_s: DEFAULT_HORIZON_S,
                terms: Vec::new(),
                anchors: Vec::new(),
                start_line: line_no,
            });
            continue;
        }

        let current = block.as_mut().ok_or_else(|| ProfileTextError::Parse {
            line: line_no,
            message: format!("field {key:?} before any `profile:` line"),
        })?;

        match key {
            "temperature_c" => current.temperature_c = Some(parse_f64(value, line_no)?),
            "efficiency" => current.efficiency = Some(parse_f64(value, line_no)?),
            "dark_p10" => current.dark_p10 = Some(parse_f64(value, line_no)?),
            "dark_slope" => current.dark_slope = parse_f64(value, line_no)?,
            "gate_width_ns" => current.gate_width_s = Some(parse_f64(value, line_no)? * 1e-9),
            "afterpulse_horizon_us" => current.horizon_s = parse_f64(value, line_no)? * 1e-6,
            "afterpulse_terms" => {
                for pair in value.split_whitespace() {
                    let (a, tau_us) =
                        pair.split_once(':')
                            .ok_or_else(|| ProfileTextError::Parse {
                                line: line_no,
                                message: format!(
                                    "expected amplitude:lifetime_us pair, got {pair:?}"
                                ),
                            })?;
                    let term = AfterpulseTerm::new(
                        parse_f64(a, line_no)?,
                        parse_f64(tau_us, line_no)? * 1e-6,
                    )
                    .map_err(|e| ProfileTextError::Parse {
                        line: line_no,
                        message: e.to_string(),
                    })?;
                    current.terms.push(term);
                }
            }
            "jitter_anchors" => {
                for pair in value.split_whitespace() {
                    let (eff, fwhm_ps) =
                        pair.split_once(':')
                            .ok_or_else(|| ProfileTextError::Parse {
                                line: line_no,
                                message: format!(
                                    "expected efficiency:fwhm_ps pair, got {pair:?}"
                                ),
                            })?;
                    current.anchors.push((
                        parse_f64(eff, line_no)?,
                        parse_f64(fwhm_ps, line_no)? * 1e-12,
                    ));
                }
            }
            other => {
                return Err(ProfileTextError::Parse {
                    line: line_no,
                    message: format!("unknown field {other:?}"),
                });
            }
        }
        let _ = current.start_line;
    }
    if let Some(done) = block.take() {
        profiles.push(finish(done)?);
    }
    Ok(profiles)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn registry_has_expected_anchors() {
        let names = builtin_names();
        assert!(names.len() >= 6);
        for (name, p10) in [
            ("epitaxx-60", 2.8e-5),
            ("epitaxx-40", 6.0e-5),
            ("egg-nec-60", 3.5e-4),
            ("fujitsu-196", 1.0e-4),
            ("passive-quench", 2.5e-3),
            ("improved-hypothetical", 2.8e-6),
        ] {
            let profile = builtin(name).unwrap_or_else(|| panic!("missing profile {name}"));
            assert_eq!(profile.dark.at(0.10).unwrap(), p10, "anchor for {name}");
            assert_eq!(profile.efficiency, 0.10);
        }
        assert_eq!(builtin("epitaxx-60").unwrap().gate_width_s, 2.4e-9);
        assert_eq!(builtin("fujitsu-196").unwrap().gate_width_s, 2.5e-9);
    }

    #[test]
    fn epitaxx_jitter_anchor() {
        let profile = builtin("epitaxx-60").unwrap();
        assert_eq!(profile.jitter.fwhm_at(0.10).unwrap(), 450e-12);
    }

    #[test]
    fn egg_nec_decays_faster_and_lower() {
        let epitaxx = builtin("epitaxx-60").unwrap();
        let egg = builtin("egg-nec-60").unwrap();
        for dt in [0.2e-6, 1e-6, 5e-6, 20e-6] {
            let pe = epitaxx.afterpulse.probability_at(dt).unwrap();
            let pn = egg.afterpulse.probability_at(dt).unwrap();
            assert!(pn < pe, "egg-nec afterpulse not lower at dt = {dt}");
        }
    }

    #[test]
    fn registry_round_trips_through_text() {
        // Unit conversion (s <-> ns/us/ps) costs at most one rounding
        // each way, so compare fields to near machine precision rather
        // than bit-exactly.
        fn close(a: f64, b: f64) {
            if a != b {
                assert_relative_eq!(a, b, max_relative = 1e-12);
            }
        }
        let original = builtin_profiles();
        let text = serialize_profiles(&original);
        let parsed = parse_profiles(&text).unwrap();
        assert_eq!(original.len(), parsed.len());
        for (a, b) in original.iter().zip(&parsed) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.temperature_c, b.temperature_c);
            assert_eq!(a.efficiency, b.efficiency);
            assert_eq!(a.dark, b.dark);
            close(a.gate_width_s, b.gate_width_s);
            close(a.afterpulse.horizon_s(), b.afterpulse.horizon_s());
            assert_eq!(a.afterpulse.terms().len(), b.afterpulse.terms().len());
            for (ta, tb) in a.afterpulse.terms().iter().zip(b.afterpulse.terms()) {
                close(ta.amplitude, tb.amplitude);
                close(ta.lifetime_s, tb.lifetime_s);
            }
            assert_eq!(a.jitter.anchors().len(), b.jitter.anchors().len());
            for (ja, jb) in a.jitter.anchors().iter().zip(b.jitter.anchors()) {
                assert_eq!(ja.0, jb.0);
                close(ja.1, jb.1);
            }
        }
    }

    #[test]
    fn parse_handles_comments_and_errors() {
        let text = "# registry\nprofile: demo\ntemperature_c: -50 # cold\nefficiency: 0.1\n\
                    dark_p10: 1e-4\ngate_width_ns: 2.4\nafterpulse_terms: 0.01:1\n\
                    jitter_anchors: 0.1:450\n";
        let parsed = parse_profiles(text).unwrap();
        assert_eq!(parsed.len(), 1);
        assert_eq!(parsed[0].name, "demo");
        assert_eq!(parsed[0].dark.slope(), DEFAULT_DARK_SLOPE);

        assert!(parse_profiles("temperature_c: -50\n").is_err());
        assert!(parse_profiles("profile: x\nbogus_field: 1\n").is_err());
        assert!(parse_profiles("profile: x\ndark_p10: not-a-number\n").is_err());
    }
}
