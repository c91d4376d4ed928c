//! Learning rules: trace-based STDP, STDP with the presynaptic trace sampled
//! at a fixed postsynaptic time, and a PSTH-derived rule driven by the
//! instantaneous population rate of the training data.

use thiserror::Error;

use crate::preprocess::{Pattern, PsthTable};

#[derive(Debug, Error)]
pub enum PlasticityError {
    #[error("t* = {0} ms is outside the pattern window [0, {1})")]
    TStarOutOfRange(u32, u32),
    #[error("empty post-spike log")]
    EmptyLog,
    #[error("degenerate PSTH: no events")]
    DegeneratePsth,
    #[error("calibration infeasible: {0}")]
    CalibrationInfeasible(String),
    #[error("h table length {found} does not match pattern duration {expected}")]
    HTableLength { expected: usize, found: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlasticityParams {
    /// Learning rate.
    pub eta: f64,
    /// Target presynaptic trace at the moment of a postsynaptic spike.
    pub x_tar: f64,
    pub w_max: f64,
    /// Weight-dependence exponent.
    pub mu: f64,
    /// Presynaptic trace decay constant in ms.
    pub tau_xpre_ms: f64,
    /// Trace increment per presynaptic spike.
    pub delta_xpre: f64,
}

impl Default for PlasticityParams {
    fn default() -> Self {
        PlasticityParams {
            eta: 0.05,
            x_tar: 0.4,
            w_max: 1.0,
            mu: 1.0,
            tau_xpre_ms: 215.0,
            delta_xpre: 1.0,
        }
    }
}

/// Per-input presynaptic trace values.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceState {
    pub x_pre: Vec<f64>,
}

impl TraceState {
    pub fn new(n_inputs: usize) -> TraceState {
        TraceState {
            x_pre: vec![0.0; n_inputs],
        }
    }

    pub fn reset(&mut self) {
        self.x_pre.fill(0.0);
    }
}

/// The three learning regimes.
#[derive(Debug, Clone)]
pub enum PlasticityMode {
    TraceStdp(PlasticityParams),
    FixedPost {
        t_star_ms: u32,
        params: PlasticityParams,
    },
    PsthStdp {
        /// Per-ms STDP values, one entry per pattern millisecond.
        h: Vec<f64>,
        a: f64,
        b: f64,
        params: PlasticityParams,
    },
}

impl PlasticityMode {
    pub fn params(&self) -> &PlasticityParams {
        match self {
            PlasticityMode::TraceStdp(p) => p,
            PlasticityMode::FixedPost { params, .. } => params,
            PlasticityMode::PsthStdp { params, .. } => params,
        }
    }

    pub fn fixed_post(t_star_ms: u32, params: PlasticityParams) -> Result<Self, PlasticityError> {
        if t_star_ms >= u32::from(crate::preprocess::SACCADE_MS) {
            return Err(PlasticityError::TStarOutOfRange(
                t_star_ms,
                u32::from(crate::preprocess::SACCADE_MS),
            ));
        }
        Ok(PlasticityMode::FixedPost { t_star_ms, params })
    }
}

/// Decay the trace by one step, then add the increment for each spiking input.
pub fn update_trace(trace: &mut TraceState, dt_ms: f64, spikes: &[u16], p: &PlasticityParams) {
    let decay = (-dt_ms / p.tau_xpre_ms).exp();
    for x in &mut trace.x_pre {
        *x *= decay;
    }
    for &k in spikes {
        trace.x_pre[k as usize] += p.delta_xpre;
    }
}

fn weight_dependence(w: f64, p: &PlasticityParams) -> f64 {
    let d = (p.w_max - w).max(0.0);
    if p.mu == 1.0 {
        d
    } else {
        d.powf(p.mu)
    }
}

/// Single-synapse trace-STDP update, clamped to [0, w_max].
pub fn stdp_update(w: f64, x_pre_k: f64, p: &PlasticityParams) -> f64 {
    (w + p.eta * (x_pre_k - p.x_tar) * weight_dependence(w, p)).clamp(0.0, p.w_max)
}

/// Apply the trace-STDP rule across one postsynaptic neuron's weight row.
pub fn apply_stdp_row(row: &mut [f64], x_pre: &[f64], p: &PlasticityParams) {
    for (w, &x) in row.iter_mut().zip(x_pre) {
        *w = stdp_update(*w, x, p);
    }
}

/// Identical formula to [`apply_stdp_row`], with the trace sampled at the
/// fixed time t* instead of the actual postsynaptic spike time.
pub fn fixed_post_update(row: &mut [f64], trace_at_tstar: &TraceState, p: &PlasticityParams) {
    apply_stdp_row(row, &trace_at_tstar.x_pre, p);
}

/// Mean of first-post-spike times, rounded to the nearest ms.
pub fn estimate_tstar(first_post_times_ms: &[f64]) -> Result<u32, PlasticityError> {
    if first_post_times_ms.is_empty() {
        return Err(PlasticityError::EmptyLog);
    }
    let mean = first_post_times_ms.iter().sum::<f64>() / first_post_times_ms.len() as f64;
    Ok(mean.round() as u32)
}

/// Per-pixel presynaptic trace for the PSTH rule: the sum of h over a
/// pixel's spike times if it spiked, otherwise the depression term -x_tar.
pub fn psth_xpre(pattern: &Pattern, h: &[f64], x_tar: f64) -> Result<Vec<f64>, PlasticityError> {
    if h.len() != pattern.duration_ms as usize {
        return Err(PlasticityError::HTableLength {
            expected: pattern.duration_ms as usize,
            found: h.len(),
        });
    }
    let mut x_pre = vec![-x_tar; pattern.n_pixels()];
    for (pixel, spikes) in pattern.pixel_groups() {
        x_pre[pixel as usize] = spikes.iter().map(|s| h[s.t_ms as usize]).sum();
    }
    Ok(x_pre)
}

/// Single-synapse PSTH-rule update; depression is already inside x_pre.
pub fn psth_update(w: f64, x_pre_k: f64, p: &PlasticityParams) -> f64 {
    (w + p.eta * x_pre_k * weight_dependence(w, p)).clamp(0.0, p.w_max)
}

pub fn apply_psth_row(row: &mut [f64], x_pre: &[f64], p: &PlasticityParams) {
    for (w, &x) in row.iter_mut().zip(x_pre) {
        *w = psth_update(*w, x, p);
    }
}

/// Aggregated |dw| statistics collected while replaying the trace rule on
/// the calibration patterns. The unit-shape terms are measured against the
/// same pre-update weight rows so the scale factor solves linearly.
#[derive(Debug, Clone, Copy, Default)]
pub struct CalibrationReference {
    /// Mean |dw| actually applied by the trace rule.
    pub mean_abs_trace_dw: f64,
    /// Mean |dw| from the -x_tar depression of silent pixels (scale-free).
    pub mean_silent_dw: f64,
    /// Mean |dw| of spiking pixels under the unit-shape h (scales linearly).
    pub mean_unit_spiking_dw: f64,
    pub n_updates: u64,
}

#[derive(Debug, Clone)]
pub struct Calibration {
    pub a: f64,
    pub b: f64,
    pub h: Vec<f64>,
    /// Ratio of mean |dw| predicted for the calibrated rule to the trace
    /// reference, conditioned on the reference run's weight states.
    pub predicted_ratio: f64,
}

/// Margin for the LTD/LTP area condition: sum(h) = -rho * sum(|h|).
pub const LTD_MARGIN_RHO: f64 = 0.1;

/// Normalized h shape before magnitude scaling. For a flat (but nonzero)
/// PSTH the area condition degenerates and the shape is a negative constant.
fn unit_shape(values: &[f64], rho: f64) -> Result<(Vec<f64>, f64, f64), PlasticityError> {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    if max <= 0.0 {
        return Err(PlasticityError::DegeneratePsth);
    }
    if max == min {
        return Ok((vec![-1.0; values.len()], 0.0, -1.0));
    }
    let normalized: Vec<f64> = values.iter().map(|&v| v / max).collect();
    // f(b) = sum(n + b) + rho * sum(|n + b|) is strictly increasing with a
    // sign change in (-1, 0); bisect to full precision.
    let f = |b: f64| -> f64 {
        normalized
            .iter()
            .map(|&n| (n + b) + rho * (n + b).abs())
            .sum()
    };
    let (mut lo, mut hi) = (-1.0f64, 0.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let b0 = 0.5 * (lo + hi);
    let h_unit: Vec<f64> = normalized.iter().map(|&n| n + b0).collect();
    Ok((h_unit, 1.0 / max, b0))
}

/// The normalized h shape the calibration scales, exposed so callers can
/// measure reference update magnitudes against the same shape.
pub fn unit_h(psth: &PsthTable) -> Result<Vec<f64>, PlasticityError> {
    unit_shape(&psth.values, LTD_MARGIN_RHO).map(|(h, _, _)| h)
}

/// Solve for h(t) = a H(t) + b subject to the LTD-area margin and the
/// update-magnitude match against the trace-rule reference.
pub fn calibrate_psth_stdp(
    psth: &PsthTable,
    reference: &CalibrationReference,
) -> Result<Calibration, PlasticityError> {
    let (h_unit, a_unit, b_unit) = unit_shape(&psth.values, LTD_MARGIN_RHO)?;
    if reference.mean_unit_spiking_dw <= 0.0 {
        return Err(PlasticityError::CalibrationInfeasible(
            "no spiking-pixel updates in the reference sample".into(),
        ));
    }
    let target = reference.mean_abs_trace_dw;
    let lambda = (target - reference.mean_silent_dw) / reference.mean_unit_spiking_dw;
    if !lambda.is_finite() || lambda <= 0.0 {
        return Err(PlasticityError::CalibrationInfeasible(format!(
            "silent-pixel depression alone ({:.3e}) exceeds the reference mean |dw| ({:.3e})",
            reference.mean_silent_dw, target
        )));
    }
    let h: Vec<f64> = h_unit.iter().map(|&v| lambda * v).collect();
    let predicted =
        (reference.mean_silent_dw + lambda * reference.mean_unit_spiking_dw) / target;
    Ok(Calibration {
        a: lambda * a_unit,
        b: lambda * b_unit,
        h,
        predicted_ratio: predicted,
    })
}

/// h table as CSV with header `t_ms,h`.
pub fn h_to_csv(h: &[f64]) -> String {
    let mut s = String::from("t_ms,h\n");
    for (t, v) in h.iter().enumerate() {
        s.push_str(&format!("{t},{v}\n"));
    }
    s
}

pub fn h_from_csv(text: &str) -> Result<Vec<f64>, String> {
    let mut lines = text.lines();
    match lines.next() {
        Some(header) if header.trim() == "t_ms,h" => {}
        other => return Err(format!("expected header 't_ms,h', found {other:?}")),
    }
    let mut h = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (t, v) = line
            .split_once(',')
            .ok_or_else(|| format!("line {}: missing comma", i + 2))?;
        let t: usize = t.trim().parse().map_err(|e| format!("line {}: {e}", i + 2))?;
        if t != h.len() {
            return Err(format!("line {}: non-contiguous t_ms {t}", i + 2));
        }
        h.push(v.trim().parse::<f64>().map_err(|e| format!("line {}: {e}", i + 2))?);
    }
    Ok(h)
}
