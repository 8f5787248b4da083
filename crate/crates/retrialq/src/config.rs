//! Configuration ingestion: the TOML schema, bundled presets, dotted-key
//! overrides, rate retargeting, and the resolved-config hash stamped on every
//! output file.
//!
//! # File schema
//!
//! A model file is a TOML document with five sections; matrices are row-major
//! nested arrays of decimals.
//!
//! ```toml
//! [mmap]
//! c0        = [[-1.3431, 0.023], [0.0, -17.183]]   # no-arrival transitions
//! c_new     = [[0.66, 0.0], [0.2567, 8.3351]]      # new-call arrivals
//! c_handoff = [[0.66, 0.0], [0.2567, 8.3351]]      # handoff arrivals
//!
//! [service_h]                 # handoff service law
//! beta       = [1.0, 0.0]
//! transition = [[-1.0, 1.0], [0.0, -1.0]]
//!
//! [service_n]                 # new-call service law
//! beta       = [1.0, 0.0]
//! transition = [[-1.0, 1.0], [0.0, -1.0]]
//!
//! [retrial]
//! gamma      = [0.5, 0.5]
//! transition = [[-2.0, 2.0], [0.0, -2.0]]
//! exit_leave = [0.0, 1.0]     # abandonment rates; optional, see below
//! exit_retry = [0.0, 1.0]     # retrial-attempt rates; optional
//!
//! [system]
//! channels          = 2
//! row_sum_tolerance = 1e-2    # optional, default 1e-9
//! truncation        = { epsilon = 1e-5, cap = 60 }   # or { fixed = 8 }
//! ```
//!
//! Service exit vectors are always derived as `-transition * e`. The retrial
//! law has two exits; when both are omitted the total absorption rate
//! `-transition * e` is split evenly between abandonment and retrial attempts.
//!
//! On load, after validation against `row_sum_tolerance`, the diagonal of `c0`
//! is renormalized so the background generator has exactly zero row sums;
//! downstream stages rely on exact conservation.

use crate::error::{Error, Result};
use crate::kron::Matrix;
use crate::model::{
    fundamental_rates, ph_mean_rate, retrial_mean_rate, validate, MarkedMap, ModelConfig,
    PhaseType, RetrialPh, TruncationPolicy,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawConfig {
    pub mmap: RawMmap,
    pub service_h: RawPh,
    pub service_n: RawPh,
    pub retrial: RawRetrial,
    pub system: RawSystem,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawMmap {
    pub c0: Vec<Vec<f64>>,
    pub c_new: Vec<Vec<f64>>,
    pub c_handoff: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawPh {
    pub beta: Vec<f64>,
    pub transition: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawRetrial {
    pub gamma: Vec<f64>,
    pub transition: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_leave: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_retry: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawSystem {
    pub channels: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub row_sum_tolerance: Option<f64>,
    pub truncation: RawTruncation,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawTruncation {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cap: Option<usize>,
}

fn matrix_from_nested(name: &str, rows: &[Vec<f64>]) -> Result<Matrix> {
    let r = rows.len();
    if r == 0 {
        return Err(Error::Parse(format!("{name}: empty matrix")));
    }
    let c = rows[0].len();
    for (i, row) in rows.iter().enumerate() {
        if row.len() != c {
            return Err(Error::Parse(format!(
                "{name}: row {i} has {} entries, row 0 has {c}",
                row.len()
            )));
        }
    }
    Ok(Matrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn nested_from_matrix(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// Builds a model from the raw schema without validating it.
pub fn build(raw: &RawConfig) -> Result<ModelConfig> {
    let arrivals = MarkedMap::new(
        matrix_from_nested("mmap.c0", &raw.mmap.c0)?,
        matrix_from_nested("mmap.c_new", &raw.mmap.c_new)?,
        matrix_from_nested("mmap.c_handoff", &raw.mmap.c_handoff)?,
    );
    let service_handoff = PhaseType::new(
        raw.service_h.beta.clone(),
        matrix_from_nested("service_h.transition", &raw.service_h.transition)?,
    );
    let service_new = PhaseType::new(
        raw.service_n.beta.clone(),
        matrix_from_nested("service_n.transition", &raw.service_n.transition)?,
    );
    let gamma_t = matrix_from_nested("retrial.transition", &raw.retrial.transition)?;
    let n = gamma_t.nrows();
    let (exit_leave, exit_retry) = match (&raw.retrial.exit_leave, &raw.retrial.exit_retry) {
        (Some(l), Some(r)) => (l.clone(), r.clone()),
        (None, None) => {
            // Even split of the total absorption rate between the two exits.
            let total: Vec<f64> = (0..n).map(|i| -gamma_t.row(i).sum()).collect();
            (
                total.iter().map(|v| v / 2.0).collect(),
                total.iter().map(|v| v / 2.0).collect(),
            )
        }
        (Some(l), None) => {
            let r: Vec<f64> = (0..n).map(|i| -gamma_t.row(i).sum() - l[i.min(l.len() - 1)]).collect();
            (l.clone(), r)
        }
        (None, Some(r)) => {
            let l: Vec<f64> = (0..n).map(|i| -gamma_t.row(i).sum() - r[i.min(r.len() - 1)]).collect();
            (l, r.clone())
        }
    };
    let retrial = RetrialPh::new(raw.retrial.gamma.clone(), gamma_t, exit_leave, exit_retry);
    let truncation = match raw.system.truncation {
        RawTruncation { fixed: Some(m), .. } => TruncationPolicy::Fixed(m),
        RawTruncation { epsilon, cap, .. } => TruncationPolicy::Adaptive {
            epsilon: epsilon.unwrap_or(1e-5),
            cap: cap.unwrap_or(60),
        },
    };
    Ok(ModelConfig {
        arrivals,
        service_handoff,
        service_new,
        retrial,
        channels: raw.system.channels,
        truncation,
        row_sum_tol: raw.system.row_sum_tolerance.unwrap_or(1e-9),
    })
}

/// Serializes a resolved model back into the raw schema (exits explicit).
pub fn to_raw(cfg: &ModelConfig) -> RawConfig {
    RawConfig {
        mmap: RawMmap {
            c0: nested_from_matrix(&cfg.arrivals.c0),
            c_new: nested_from_matrix(&cfg.arrivals.c_new),
            c_handoff: nested_from_matrix(&cfg.arrivals.c_handoff),
        },
        service_h: RawPh {
            beta: cfg.service_handoff.beta.clone(),
            transition: nested_from_matrix(&cfg.service_handoff.transition),
        },
        service_n: RawPh {
            beta: cfg.service_new.beta.clone(),
            transition: nested_from_matrix(&cfg.service_new.transition),
        },
        retrial: RawRetrial {
            gamma: cfg.retrial.gamma.clone(),
            transition: nested_from_matrix(&cfg.retrial.transition),
            exit_leave: Some(cfg.retrial.exit_leave.clone()),
            exit_retry: Some(cfg.retrial.exit_retry.clone()),
        },
        system: RawSystem {
            channels: cfg.channels,
            row_sum_tolerance: Some(cfg.row_sum_tol),
            truncation: match cfg.truncation {
                TruncationPolicy::Fixed(m) => RawTruncation {
                    fixed: Some(m),
                    epsilon: None,
                    cap: None,
                },
                TruncationPolicy::Adaptive { epsilon, cap } => RawTruncation {
                    fixed: None,
                    epsilon: Some(epsilon),
                    cap: Some(cap),
                },
            },
        },
    }
}

/// Zeroes the background generator's row sums exactly by adjusting the
/// diagonal of `c0`; the smallest consistent repair for printed matrices that
/// only balance to rounding precision.
pub fn renormalize_c0_diagonal(cfg: &mut ModelConfig) {
    let c = cfg.arrivals.total_generator();
    for i in 0..cfg.arrivals.phases() {
        cfg.arrivals.c0[(i, i)] -= c.row(i).sum();
    }
}

/// Parses, validates (against the file's own row-sum tolerance) and resolves a
/// model from TOML text.
pub fn load_str(text: &str) -> Result<ModelConfig> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    let mut cfg = build(&raw)?;
    let report = validate(&cfg);
    if !report.is_empty() {
        return Err(Error::InvalidConfig(report.to_string()));
    }
    renormalize_c0_diagonal(&mut cfg);
    Ok(cfg)
}

/// Like [`load_str`] but skips validation and resolution; used by the
/// `validate` subcommand to report violations instead of failing.
pub fn load_str_unvalidated(text: &str) -> Result<ModelConfig> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    build(&raw)
}

pub fn load_file(path: &std::path::Path) -> Result<ModelConfig> {
    load_str(&std::fs::read_to_string(path)?)
}

pub fn load_file_unvalidated(path: &std::path::Path) -> Result<ModelConfig> {
    load_str_unvalidated(&std::fs::read_to_string(path)?)
}

/// Serializes a resolved model to TOML; floats are written in shortest
/// round-trip form so reloading reproduces the exact same model.
pub fn to_toml_string(cfg: &ModelConfig) -> Result<String> {
    toml::to_string_pretty(&to_raw(cfg)).map_err(|e| Error::Parse(e.to_string()))
}

/// SHA-256 of the canonical JSON form of the resolved config; stamped into
/// every output file header.
pub fn config_hash(cfg: &ModelConfig) -> String {
    let json = serde_json::to_string(&to_raw(cfg)).expect("raw config serializes");
    let digest = Sha256::digest(json.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// The arrival matrices exactly as printed in the reference experiment; their
/// row sums only balance to about 6e-4.
pub fn section5_arrivals_as_printed() -> MarkedMap {
    let b = |rows: &[Vec<f64>]| crate::kron::from_rows(rows);
    MarkedMap::new(
        b(&[vec![-1.3431, 0.0230], vec![0.0, -17.183]]),
        b(&[vec![0.6600, 0.0], vec![0.2567, 8.3351]]),
        b(&[vec![0.6600, 0.0], vec![0.2567, 8.3351]]),
    )
}

/// Bundled presets.
///
/// * `section5` — the reference two-phase experiment: bursty arrivals with
///   unit class rates, Erlang-2 services with mean rate 0.5, two-phase retrial
///   law with mean rate 4/3 and an even abandon/retry split (the split is not
///   pinned by the printed parameters; see the README), 2 channels. Loaded
///   with row-sum tolerance 1e-2 and an exactly renormalized `c0` diagonal.
///   Note the printed `c_new` and `c_handoff` coincide; the preset keeps them
///   as printed.
/// * `table-ln<rate>` (e.g. `table-ln0.1`) — the channel-allocation problem
///   families: `section5` with the new-call service rate retargeted to 1 and
///   the new-call arrival rate retargeted to `<rate>`; the handoff rate is a
///   decision variable supplied by the optimizer.
pub fn preset(name: &str) -> Result<ModelConfig> {
    if name == "section5" {
        let mut cfg = ModelConfig {
            arrivals: section5_arrivals_as_printed(),
            service_handoff: PhaseType::new(
                vec![1.0, 0.0],
                crate::kron::from_rows(&[vec![-1.0, 1.0], vec![0.0, -1.0]]),
            ),
            service_new: PhaseType::new(
                vec![1.0, 0.0],
                crate::kron::from_rows(&[vec![-1.0, 1.0], vec![0.0, -1.0]]),
            ),
            retrial: RetrialPh::new(
                vec![0.5, 0.5],
                crate::kron::from_rows(&[vec![-2.0, 2.0], vec![0.0, -2.0]]),
                vec![0.0, 1.0],
                vec![0.0, 1.0],
            ),
            channels: 2,
            truncation: TruncationPolicy::default_adaptive(),
            row_sum_tol: 1e-2,
        };
        let report = validate(&cfg);
        debug_assert!(report.is_empty(), "preset must validate: {report}");
        renormalize_c0_diagonal(&mut cfg);
        return Ok(cfg);
    }
    if let Some(rate) = name.strip_prefix("table-ln") {
        let lambda_n: f64 = rate
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad preset name {name}: expected table-ln<rate>")))?;
        if !(lambda_n > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "preset {name}: new-call rate must be positive"
            )));
        }
        let mut cfg = preset("section5")?;
        // New-call services at unit mean rate in the allocation tables.
        let mu_n = ph_mean_rate(&cfg.service_new)?;
        cfg.service_new = cfg.service_new.scaled(1.0 / mu_n);
        cfg.arrivals = scale_to_new_rate(&cfg.arrivals, lambda_n)?;
        return Ok(cfg);
    }
    Err(Error::InvalidArgument(format!(
        "unknown preset {name}; available: section5, table-ln<rate>"
    )))
}

fn scale_marked(m: &MarkedMap, class: CallClass, factor: f64) -> MarkedMap {
    let mut out = m.clone();
    let target = match class {
        CallClass::Handoff => &mut out.c_handoff,
        CallClass::New => &mut out.c_new,
    };
    let base = target.clone();
    *target = &base * factor;
    for i in 0..out.c0.nrows() {
        out.c0[(i, i)] -= (factor - 1.0) * base.row(i).sum();
    }
    out
}

#[derive(Clone, Copy, Debug)]
enum CallClass {
    Handoff,
    New,
}

fn scale_to_rate(m: &MarkedMap, class: CallClass, target: f64) -> Result<MarkedMap> {
    if target < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "arrival rate target {target} must be >= 0"
        )));
    }
    let achieved = |factor: f64| -> Result<f64> {
        let scaled = scale_marked(m, class, factor);
        let (lh, ln, _) = fundamental_rates(&scaled)?;
        Ok(match class {
            CallClass::Handoff => lh,
            CallClass::New => ln,
        })
    };
    if target == 0.0 {
        return Ok(scale_marked(m, class, 0.0));
    }
    // Scaling shifts the stationary phase vector, so the achieved rate is a
    // nonlinear (monotone) function of the factor; pin it by bisection.
    let mut lo = 0.0;
    let mut hi = 1.0;
    let mut expansions = 0;
    while achieved(hi)? < target {
        hi *= 2.0;
        expansions += 1;
        if expansions > 64 {
            return Err(Error::InvalidArgument(format!(
                "arrival rate target {target} is unreachable by scaling"
            )));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let val = achieved(mid)?;
        if (val - target).abs() <= 1e-9 {
            return Ok(scale_marked(m, class, mid));
        }
        if val < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::InvalidArgument(format!(
        "bisection for arrival rate target {target} did not reach tolerance 1e-9"
    )))
}

/// Rescales the handoff arrival matrix (with diagonal compensation in `c0`)
/// so the achieved fundamental handoff rate equals `target` to 1e-9.
///
/// Scaling one class shifts the stationary phase vector and therefore the
/// other class's achieved rate; callers that need both rates pinned should
/// use [`scale_to_class_rates`].
pub fn scale_to_handoff_rate(m: &MarkedMap, target: f64) -> Result<MarkedMap> {
    scale_to_rate(m, CallClass::Handoff, target)
}

/// Same retargeting for the new-call class.
pub fn scale_to_new_rate(m: &MarkedMap, target: f64) -> Result<MarkedMap> {
    scale_to_rate(m, CallClass::New, target)
}

/// Pins both class rates at once by alternating the two per-class bisections;
/// each pass re-solves the drift the other class introduced. Converges in a
/// handful of rounds on weakly coupled processes.
pub fn scale_to_class_rates(m: &MarkedMap, target_new: f64, target_handoff: f64) -> Result<MarkedMap> {
    let mut current = m.clone();
    for _ in 0..64 {
        current = scale_to_rate(&current, CallClass::New, target_new)?;
        current = scale_to_rate(&current, CallClass::Handoff, target_handoff)?;
        let (lh, ln, _) = fundamental_rates(&current)?;
        if (lh - target_handoff).abs() <= 1e-9 && (ln - target_new).abs() <= 1e-9 {
            return Ok(current);
        }
    }
    Err(Error::InvalidArgument(format!(
        "joint rate retargeting to (new {target_new}, handoff {target_handoff}) did not converge"
    )))
}

/// Applies one dotted-key override. Supported keys:
///
/// * `system.channels`, `system.row_sum_tolerance`
/// * `system.truncation.fixed`, `system.truncation.epsilon`, `system.truncation.cap`
/// * `mmap.lambda_h`, `mmap.lambda_n` — retarget a class arrival rate
/// * `service_h.mu`, `service_n.mu` — retarget a mean service rate
/// * `retrial.theta` — retarget the mean retrial rate (exit split preserved)
pub fn apply_override(cfg: &mut ModelConfig, key: &str, value: &str) -> Result<()> {
    let parse_f64 = |v: &str| -> Result<f64> {
        v.parse()
            .map_err(|_| Error::InvalidArgument(format!("override {key}: bad number {v}")))
    };
    let parse_usize = |v: &str| -> Result<usize> {
        v.parse()
            .map_err(|_| Error::InvalidArgument(format!("override {key}: bad integer {v}")))
    };
    match key {
        "system.channels" => cfg.channels = parse_usize(value)?,
        "system.row_sum_tolerance" => cfg.row_sum_tol = parse_f64(value)?,
        "system.truncation.fixed" => cfg.truncation = TruncationPolicy::Fixed(parse_usize(value)?),
        "system.truncation.epsilon" => {
            let eps = parse_f64(value)?;
            cfg.truncation = match cfg.truncation {
                TruncationPolicy::Adaptive { cap, .. } => TruncationPolicy::Adaptive { epsilon: eps, cap },
                _ => TruncationPolicy::Adaptive { epsilon: eps, cap: 60 },
            };
        }
        "system.truncation.cap" => {
            let cap = parse_usize(value)?;
            cfg.truncation = match cfg.truncation {
                TruncationPolicy::Adaptive { epsilon, .. } => TruncationPolicy::Adaptive { epsilon, cap },
                _ => TruncationPolicy::Adaptive { epsilon: 1e-5, cap },
            };
        }
        "mmap.lambda_h" => cfg.arrivals = scale_to_handoff_rate(&cfg.arrivals, parse_f64(value)?)?,
        "mmap.lambda_n" => cfg.arrivals = scale_to_new_rate(&cfg.arrivals, parse_f64(value)?)?,
        "service_h.mu" => {
            let mu = ph_mean_rate(&cfg.service_handoff)?;
            cfg.service_handoff = cfg.service_handoff.scaled(parse_f64(value)? / mu);
        }
        "service_n.mu" => {
            let mu = ph_mean_rate(&cfg.service_new)?;
            cfg.service_new = cfg.service_new.scaled(parse_f64(value)? / mu);
        }
        "retrial.theta" => {
            let theta = retrial_mean_rate(&cfg.retrial)?;
            cfg.retrial = cfg.retrial.scaled(parse_f64(value)? / theta);
        }
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown override key {other}"
            )))
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn section5_round_trips_bit_exactly() {
        let cfg = preset("section5").unwrap();
        let text = to_toml_string(&cfg).unwrap();
        let back = load_str(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(config_hash(&cfg), config_hash(&back));
    }

    #[test]
    fn renormalized_generator_rows_vanish() {
        let cfg = preset("section5").unwrap();
        let c = cfg.arrivals.total_generator();
        for i in 0..2 {
            assert_abs_diff_eq!(c.row(i).sum(), 0.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn table_preset_hits_targets() {
        let cfg = preset("table-ln0.1").unwrap();
        let (_, ln, _) = fundamental_rates(&cfg.arrivals).unwrap();
        assert_abs_diff_eq!(ln, 0.1, epsilon = 1e-9);
        assert_abs_diff_eq!(ph_mean_rate(&cfg.service_new).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ph_mean_rate(&cfg.service_handoff).unwrap(), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn handoff_retarget_is_exact_and_keeps_balance() {
        let cfg = preset("section5").unwrap();
        for target in [0.2, 0.5, 1.7, 3.0] {
            let m = scale_to_handoff_rate(&cfg.arrivals, target).unwrap();
            let (lh, _, _) = fundamental_rates(&m).unwrap();
            assert_abs_diff_eq!(lh, target, epsilon = 1e-9);
            let c = m.total_generator();
            for i in 0..2 {
                assert_abs_diff_eq!(c.row(i).sum(), 0.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn overrides_cover_the_sweep_axes() {
        let mut cfg = preset("section5").unwrap();
        apply_override(&mut cfg, "system.channels", "4").unwrap();
        assert_eq!(cfg.channels, 4);
        apply_override(&mut cfg, "service_h.mu", "0.75").unwrap();
        assert_abs_diff_eq!(ph_mean_rate(&cfg.service_handoff).unwrap(), 0.75, epsilon = 1e-12);
        apply_override(&mut cfg, "retrial.theta", "2.0").unwrap();
        assert_abs_diff_eq!(retrial_mean_rate(&cfg.retrial).unwrap(), 2.0, epsilon = 1e-12);
        // The exit split survives rescaling.
        assert_abs_diff_eq!(cfg.retrial.exit_leave[1], cfg.retrial.exit_retry[1], epsilon = 1e-15);
        assert!(apply_override(&mut cfg, "bogus.key", "1").is_err());
    }

    #[test]
    fn unknown_preset_is_rejected() {
        assert!(preset("section6").is_err());
    }

    #[test]
    fn default_exit_split_is_even() {
        let text = r#"
            [mmap]
            c0 = [[-2.0]]
            c_new = [[1.0]]
            c_handoff = [[1.0]]
            [service_h]
            beta = [1.0]
            transition = [[-0.5]]
            [service_n]
            beta = [1.0]
            transition = [[-0.5]]
            [retrial]
            gamma = [1.0]
            transition = [[-3.0]]
            [system]
            channels = 1
            truncation = { fixed = 3 }
        "#;
        let cfg = load_str(text).unwrap();
        assert_eq!(cfg.retrial.exit_leave, vec![1.5]);
        assert_eq!(cfg.retrial.exit_retry, vec![1.5]);
    }
}
