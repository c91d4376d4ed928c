//! Two-layer LIF winner-take-all network: kernel-filtered currents, lateral
//! inhibition through a one-to-one inhibitory layer, threshold homeostasis
//! and the pattern-presentation gain-retry loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::plasticity::{self, PlasticityError, PlasticityMode, TraceState};
use crate::preprocess::Pattern;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("non-finite {what} at step {step}; parameterization is unstable")]
    NonFiniteState { step: u32, what: &'static str },
    #[error("no excitatory response after {retries} retries")]
    NoResponseAfterMaxRetries { retries: u32 },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Plasticity(#[from] PlasticityError),
}

/// Current kernel: alpha waveform when tau_rise > 0, single exponential
/// (instantaneous rise) when tau_rise = 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelParams {
    pub tau_rise_ms: f64,
    pub tau_fall_ms: f64,
    pub amplitude: f64,
}

/// K(t) = (exp(-t/tau_fall) - exp(-t/tau_rise)) u(t), with the convention
/// that tau_rise = 0 drops the rise term entirely (value 1 at t = 0+).
pub fn kernel_value(t_ms: f64, k: &KernelParams) -> f64 {
    if t_ms < 0.0 {
        return 0.0;
    }
    let fall = (-t_ms / k.tau_fall_ms).exp();
    if k.tau_rise_ms > 0.0 {
        fall - (-t_ms / k.tau_rise_ms).exp()
    } else {
        fall
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LifParams {
    pub tau_m_ms: f64,
    pub v_rest_mv: f64,
    pub v_reset_mv: f64,
    pub v_thresh_mv: f64,
    pub t_ref_ms: f64,
    /// Membrane resistance; currents are in nA, voltages in mV.
    pub r_m: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HomeostasisParams {
    /// Threshold increment per spike.
    pub delta_theta_mv: f64,
    /// Decay constant of the adaptive threshold component.
    pub tau_theta_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub width: u16,
    pub height: u16,
    pub n_exc: usize,
    pub lif_e: LifParams,
    pub lif_i: LifParams,
    pub homeostasis: HomeostasisParams,
    pub kernel_xe: KernelParams,
    pub kernel_ei: KernelParams,
    pub kernel_ie: KernelParams,
    /// Scalar weight of each excitatory-to-inhibitory connection.
    pub w_ei: f64,
    /// Scalar weight of each inhibitory-to-excitatory connection.
    pub w_ie: f64,
    pub w_max: f64,
    /// Initial weights are uniform in [0, w_init_frac * w_max].
    pub w_init_frac: f64,
    /// Initial input gain A and its increment per silent presentation.
    pub gain_init: f64,
    pub gain_step: f64,
    pub max_retries: u32,
    pub dt_ms: f64,
    /// Silent tail simulated after each pattern.
    pub silence_ms: u16,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            width: 34,
            height: 34,
            n_exc: 100,
            lif_e: LifParams {
                tau_m_ms: 100.0,
                v_rest_mv: -65.0,
                v_reset_mv: -65.0,
                v_thresh_mv: -52.0,
                t_ref_ms: 5.0,
                r_m: 1.0,
            },
            lif_i: LifParams {
                tau_m_ms: 10.0,
                v_rest_mv: -60.0,
                v_reset_mv: -45.0,
                v_thresh_mv: -40.0,
                t_ref_ms: 2.0,
                r_m: 1.0,
            },
            homeostasis: HomeostasisParams {
                delta_theta_mv: 0.01,
                tau_theta_ms: 1e7,
            },
            kernel_xe: KernelParams {
                tau_rise_ms: 1.0,
                tau_fall_ms: 5.0,
                amplitude: 1.0,
            },
            kernel_ei: KernelParams {
                tau_rise_ms: 0.0,
                tau_fall_ms: 1.0,
                amplitude: 1.0,
            },
            kernel_ie: KernelParams {
                tau_rise_ms: 0.0,
                tau_fall_ms: 2.0,
                amplitude: 1.0,
            },
            w_ei: 800.0,
            w_ie: 400.0,
            w_max: 1.0,
            w_init_frac: 0.3,
            gain_init: 1.0,
            gain_step: 0.5,
            max_retries: 20,
            dt_ms: 1.0,
            silence_ms: 45,
        }
    }
}

impl NetworkConfig {
    pub fn n_input(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// The inhibitory layer mirrors the excitatory layer one-to-one.
    pub fn n_inh(&self) -> usize {
        self.n_exc
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        let err = |msg: String| Err(NetworkError::InvalidConfig(msg));
        if self.width == 0 || self.height == 0 {
            return err("pixel extent must be positive".into());
        }
        if self.n_exc == 0 {
            return err("n_exc must be positive".into());
        }
        if !(self.dt_ms > 0.0) {
            return err("dt_ms must be positive".into());
        }
        for (name, lif) in [("excitatory", &self.lif_e), ("inhibitory", &self.lif_i)] {
            if !(lif.tau_m_ms > 0.0) {
                return err(format!("{name} tau_m must be positive"));
            }
            if lif.t_ref_ms < 0.0 {
                return err(format!("{name} t_ref must be non-negative"));
            }
            if lif.v_rest_mv >= lif.v_thresh_mv || lif.v_reset_mv >= lif.v_thresh_mv {
                return err(format!("{name} threshold must exceed rest and reset"));
            }
        }
        if !(self.kernel_xe.tau_rise_ms > 0.0) {
            return err("input kernel must have tau_rise > 0 (alpha waveform)".into());
        }
        for (name, k) in [
            ("xe", &self.kernel_xe),
            ("ei", &self.kernel_ei),
            ("ie", &self.kernel_ie),
        ] {
            if !(k.tau_fall_ms > k.tau_rise_ms) {
                return err(format!("kernel {name}: tau_fall must exceed tau_rise"));
            }
            if k.tau_rise_ms < 0.0 {
                return err(format!("kernel {name}: tau_rise must be non-negative"));
            }
        }
        if self.kernel_ei.tau_rise_ms != 0.0 || self.kernel_ie.tau_rise_ms != 0.0 {
            return err("inhibitory-pathway kernels must have tau_rise = 0".into());
        }
        if !(self.w_max > 0.0) {
            return err("w_max must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.w_init_frac) {
            return err("w_init_frac must be in [0, 1]".into());
        }
        if self.homeostasis.delta_theta_mv < 0.0 || !(self.homeostasis.tau_theta_ms > 0.0) {
            return err("homeostasis: delta_theta >= 0 and tau_theta > 0 required".into());
        }
        if self.gain_init <= 0.0 || self.gain_step < 0.0 {
            return err("gain_init must be positive, gain_step non-negative".into());
        }
        Ok(())
    }
}

/// All mutable simulation state. Weights live here and persist across
/// presentations; everything except weights, theta and the input gain is
/// transient and cleared by [`reset_transient`].
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState {
    pub v_e: Vec<f64>,
    pub v_i: Vec<f64>,
    pub theta: Vec<f64>,
    refrac_e: Vec<f64>,
    refrac_i: Vec<f64>,
    /// Input-pathway trace sub-states, one pair per input pixel.
    pub g_xe_rise: Vec<f64>,
    pub g_xe_fall: Vec<f64>,
    /// Running weighted sums of the input traces per excitatory neuron,
    /// kept in sync with the weight matrix to avoid a full mat-vec per step.
    y_rise: Vec<f64>,
    y_fall: Vec<f64>,
    /// One exponential trace per inhibitory neuron (driven by its partner).
    pub g_ei: Vec<f64>,
    /// Accumulated inhibition trace per excitatory neuron.
    pub g_ie: Vec<f64>,
    /// Presynaptic learning trace.
    pub learning_trace: TraceState,
    /// Row-major weights, n_exc rows by n_input columns, each in [0, w_max].
    pub weights: Vec<f64>,
    pub gain_xe: f64,
    scratch: Vec<f64>,
}

impl NetworkState {
    /// Seeded initialization; weights are uniform in [0, w_init_frac*w_max],
    /// drawn row-major in ascending synapse order.
    pub fn new(cfg: &NetworkConfig, seed: u64) -> NetworkState {
        let n_in = cfg.n_input();
        let n_e = cfg.n_exc;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hi = cfg.w_init_frac * cfg.w_max;
        let weights = (0..n_e * n_in)
            .map(|_| rng.gen_range(0.0..=hi))
            .collect();
        NetworkState {
            v_e: vec![cfg.lif_e.v_rest_mv; n_e],
            v_i: vec![cfg.lif_i.v_rest_mv; cfg.n_inh()],
            theta: vec![0.0; n_e],
            refrac_e: vec![0.0; n_e],
            refrac_i: vec![0.0; cfg.n_inh()],
            g_xe_rise: vec![0.0; n_in],
            g_xe_fall: vec![0.0; n_in],
            y_rise: vec![0.0; n_e],
            y_fall: vec![0.0; n_e],
            g_ei: vec![0.0; cfg.n_inh()],
            g_ie: vec![0.0; n_e],
            learning_trace: TraceState::new(n_in),
            weights,
            gain_xe: cfg.gain_init,
            scratch: vec![0.0; n_e],
        }
    }

    /// Rebuild a state around trained weights and thresholds.
    pub fn from_parts(cfg: &NetworkConfig, weights: Vec<f64>, theta: Vec<f64>) -> NetworkState {
        let mut state = NetworkState::new(cfg, 0);
        assert_eq!(weights.len(), cfg.n_exc * cfg.n_input());
        assert_eq!(theta.len(), cfg.n_exc);
        state.weights = weights;
        state.theta = theta;
        state
    }

    /// Restore the winner's running input sums after its row changed.
    fn resync_row(&mut self, cfg: &NetworkConfig, neuron: usize) {
        let n_in = cfg.n_input();
        let row = &self.weights[neuron * n_in..(neuron + 1) * n_in];
        let mut rise = 0.0;
        let mut fall = 0.0;
        for k in 0..n_in {
            rise += row[k] * self.g_xe_rise[k];
            fall += row[k] * self.g_xe_fall[k];
        }
        self.y_rise[neuron] = rise;
        self.y_fall[neuron] = fall;
    }
}

/// Reset voltages, refractory clocks, pathway traces and the learning trace.
/// Weights, theta and the input gain persist.
pub fn reset_transient(state: &mut NetworkState, cfg: &NetworkConfig) {
    state.v_e.fill(cfg.lif_e.v_rest_mv);
    state.v_i.fill(cfg.lif_i.v_rest_mv);
    state.refrac_e.fill(0.0);
    state.refrac_i.fill(0.0);
    state.g_xe_rise.fill(0.0);
    state.g_xe_fall.fill(0.0);
    state.y_rise.fill(0.0);
    state.y_fall.fill(0.0);
    state.g_ei.fill(0.0);
    state.g_ie.fill(0.0);
    state.learning_trace.reset();
}

/// Spikes emitted in one step, ascending neuron order.
#[derive(Debug, Clone, Default)]
pub struct StepSpikes {
    pub exc: Vec<u32>,
    pub inh: Vec<u32>,
}

/// Advance the network by one step.
///
/// Order within a step: traces decay, this step's input spikes are added,
/// currents are formed, membranes integrate, threshold crossings fire, and
/// the fired spikes are written into the recurrent traces so their effect
/// arrives from the next step onward.
pub fn step(
    state: &mut NetworkState,
    cfg: &NetworkConfig,
    input_spikes: &[u16],
    adapt_threshold: bool,
    step_index: u32,
) -> Result<StepSpikes, NetworkError> {
    let dt = cfg.dt_ms;
    let n_e = cfg.n_exc;
    let n_in = cfg.n_input();

    let d_rise = (-dt / cfg.kernel_xe.tau_rise_ms).exp();
    let d_fall = (-dt / cfg.kernel_xe.tau_fall_ms).exp();
    let d_ei = (-dt / cfg.kernel_ei.tau_fall_ms).exp();
    let d_ie = (-dt / cfg.kernel_ie.tau_fall_ms).exp();

    for r in state.refrac_e.iter_mut().chain(state.refrac_i.iter_mut()) {
        *r = (*r - dt).max(0.0);
    }
    for g in &mut state.g_xe_rise {
        *g *= d_rise;
    }
    for g in &mut state.g_xe_fall {
        *g *= d_fall;
    }
    for y in &mut state.y_rise {
        *y *= d_rise;
    }
    for y in &mut state.y_fall {
        *y *= d_fall;
    }
    for g in &mut state.g_ei {
        *g *= d_ei;
    }
    for g in &mut state.g_ie {
        *g *= d_ie;
    }
    if adapt_threshold {
        let d_theta = (-dt / cfg.homeostasis.tau_theta_ms).exp();
        for t in &mut state.theta {
            *t *= d_theta;
        }
    }

    if !input_spikes.is_empty() {
        state.scratch.fill(0.0);
        for &k in input_spikes {
            let k = k as usize;
            state.g_xe_rise[k] += 1.0;
            state.g_xe_fall[k] += 1.0;
            for j in 0..n_e {
                state.scratch[j] += state.weights[j * n_in + k];
            }
        }
        for j in 0..n_e {
            state.y_rise[j] += state.scratch[j];
            state.y_fall[j] += state.scratch[j];
        }
    }

    let gain = state.gain_xe * cfg.kernel_xe.amplitude;
    let ie_scale = cfg.kernel_ie.amplitude * cfg.w_ie;
    let ei_scale = cfg.kernel_ei.amplitude * cfg.w_ei;

    let mut finite = true;
    for j in 0..n_e {
        if state.refrac_e[j] > 0.0 {
            continue;
        }
        let current = gain * (state.y_fall[j] - state.y_rise[j]) - ie_scale * state.g_ie[j];
        let lif = &cfg.lif_e;
        let v = state.v_e[j];
        let v_new = v + dt / lif.tau_m_ms * (-(v - lif.v_rest_mv) + lif.r_m * current);
        finite &= v_new.is_finite();
        state.v_e[j] = v_new;
    }
    if !finite {
        return Err(NetworkError::NonFiniteState {
            step: step_index,
            what: "excitatory membrane voltage",
        });
    }
    for m in 0..cfg.n_inh() {
        if state.refrac_i[m] > 0.0 {
            continue;
        }
        let current = ei_scale * state.g_ei[m];
        let lif = &cfg.lif_i;
        let v = state.v_i[m];
        let v_new = v + dt / lif.tau_m_ms * (-(v - lif.v_rest_mv) + lif.r_m * current);
        finite &= v_new.is_finite();
        state.v_i[m] = v_new;
    }
    if !finite {
        return Err(NetworkError::NonFiniteState {
            step: step_index,
            what: "inhibitory membrane voltage",
        });
    }

    let mut spikes = StepSpikes::default();
    for j in 0..n_e {
        if state.refrac_e[j] <= 0.0 && state.v_e[j] >= cfg.lif_e.v_thresh_mv + state.theta[j] {
            spikes.exc.push(j as u32);
            state.v_e[j] = cfg.lif_e.v_reset_mv;
            state.refrac_e[j] = cfg.lif_e.t_ref_ms;
            if adapt_threshold {
                state.theta[j] += cfg.homeostasis.delta_theta_mv;
            }
        }
    }
    for m in 0..cfg.n_inh() {
        if state.refrac_i[m] <= 0.0 && state.v_i[m] >= cfg.lif_i.v_thresh_mv {
            spikes.inh.push(m as u32);
            state.v_i[m] = cfg.lif_i.v_reset_mv;
            state.refrac_i[m] = cfg.lif_i.t_ref_ms;
        }
    }

    for &j in &spikes.exc {
        state.g_ei[j as usize] += 1.0;
    }
    for &m in &spikes.inh {
        let m = m as usize;
        for j in 0..n_e {
            if j != m {
                state.g_ie[j] += 1.0;
            }
        }
    }

    Ok(spikes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PostSpike {
    pub t_ms: u32,
    pub neuron: u32,
}

#[derive(Debug, Clone)]
pub struct PresentationResult {
    /// Neuron of the first excitatory spike (lowest id on a tie).
    pub winner: u32,
    /// All excitatory spikes of the successful attempt, in time order.
    pub post_spikes: Vec<PostSpike>,
    /// Re-presentations needed before the first excitatory spike.
    pub retries: u32,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PresentOpts<'a> {
    pub plasticity: Option<&'a PlasticityMode>,
    pub adapt_threshold: bool,
}

/// Present one pattern for its duration plus the silent tail.
///
/// If no excitatory spike occurs, the input gain is raised by `gain_step`,
/// the transient state is reset and the pattern replays, up to `max_retries`
/// times. Learning-rule updates are applied according to the mode: at each
/// postsynaptic spike for the trace rule, or once the window completes for
/// the fixed-post and PSTH rules. Transient state is reset afterwards;
/// weights, theta and the gain persist.
pub fn present_pattern(
    state: &mut NetworkState,
    cfg: &NetworkConfig,
    pattern: &Pattern,
    opts: PresentOpts<'_>,
) -> Result<PresentationResult, NetworkError> {
    present_with_observer(state, cfg, pattern, opts, &mut |_, _, _| {})
}

/// [`present_pattern`] with a hook invoked right before every weight-row
/// update, receiving the neuron id, its row and the presynaptic values the
/// rule is about to use. Used to sample update magnitudes for calibration.
pub fn present_with_observer(
    state: &mut NetworkState,
    cfg: &NetworkConfig,
    pattern: &Pattern,
    opts: PresentOpts<'_>,
    observer: &mut dyn FnMut(usize, &[f64], &[f64]),
) -> Result<PresentationResult, NetworkError> {
    let dt = cfg.dt_ms;
    let total_ms = f64::from(pattern.duration_ms) + f64::from(cfg.silence_ms);
    let total_steps = (total_ms / dt).ceil() as u32;

    let mut inputs_by_step: Vec<Vec<u16>> = vec![Vec::new(); total_steps as usize];
    for (t_ms, bucket) in pattern.time_buckets().into_iter().enumerate() {
        let step_idx = (t_ms as f64 / dt).floor() as usize;
        inputs_by_step[step_idx.min(total_steps as usize - 1)].extend(bucket);
    }

    let psth_x_pre = match opts.plasticity {
        Some(PlasticityMode::PsthStdp { h, params, .. }) => {
            Some(plasticity::psth_xpre(pattern, h, params.x_tar)?)
        }
        _ => None,
    };
    let tstar_step = match opts.plasticity {
        Some(PlasticityMode::FixedPost { t_star_ms, .. }) => {
            Some((f64::from(*t_star_ms) / dt).floor() as u32)
        }
        _ => None,
    };
    let trace_params = match opts.plasticity {
        Some(PlasticityMode::TraceStdp(p)) | Some(PlasticityMode::FixedPost { params: p, .. }) => {
            Some(*p)
        }
        _ => None,
    };

    let n_in = cfg.n_input();
    for attempt in 0..=cfg.max_retries {
        reset_transient(state, cfg);
        let mut post_spikes: Vec<PostSpike> = Vec::new();
        let mut trace_at_tstar: Option<Vec<f64>> = None;

        for step_idx in 0..total_steps {
            let inputs = &inputs_by_step[step_idx as usize];
            if let Some(p) = &trace_params {
                plasticity::update_trace(&mut state.learning_trace, dt, inputs, p);
            }
            if tstar_step == Some(step_idx) {
                trace_at_tstar = Some(state.learning_trace.x_pre.clone());
            }
            let spikes = step(state, cfg, inputs, opts.adapt_threshold, step_idx)?;
            let t_ms = (f64::from(step_idx) * dt) as u32;
            for &j in &spikes.exc {
                post_spikes.push(PostSpike { t_ms, neuron: j });
                if let Some(PlasticityMode::TraceStdp(p)) = opts.plasticity {
                    let j = j as usize;
                    observer(
                        j,
                        &state.weights[j * n_in..(j + 1) * n_in],
                        &state.learning_trace.x_pre,
                    );
                    let row = &mut state.weights[j * n_in..(j + 1) * n_in];
                    plasticity::apply_stdp_row(row, &state.learning_trace.x_pre, p);
                    state.resync_row(cfg, j);
                }
            }
        }

        if post_spikes.is_empty() {
            if attempt < cfg.max_retries {
                state.gain_xe += cfg.gain_step;
            }
            continue;
        }

        match opts.plasticity {
            Some(PlasticityMode::FixedPost { params, .. }) => {
                let x_pre = trace_at_tstar
                    .expect("t* lies inside the pattern window, snapshot must exist");
                for spike in &post_spikes {
                    let j = spike.neuron as usize;
                    observer(j, &state.weights[j * n_in..(j + 1) * n_in], &x_pre);
                    let row = &mut state.weights[j * n_in..(j + 1) * n_in];
                    plasticity::apply_stdp_row(row, &x_pre, params);
                }
            }
            Some(PlasticityMode::PsthStdp { params, .. }) => {
                let x_pre = psth_x_pre.as_ref().expect("computed above");
                for spike in &post_spikes {
                    let j = spike.neuron as usize;
                    observer(j, &state.weights[j * n_in..(j + 1) * n_in], x_pre);
                    let row = &mut state.weights[j * n_in..(j + 1) * n_in];
                    plasticity::apply_psth_row(row, x_pre, params);
                }
            }
            _ => {}
        }

        let winner = post_spikes[0].neuron;
        reset_transient(state, cfg);
        return Ok(PresentationResult {
            winner,
            post_spikes,
            retries: attempt,
        });
    }

    reset_transient(state, cfg);
    Err(NetworkError::NoResponseAfterMaxRetries {
        retries: cfg.max_retries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::PatternSpike;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn tiny_config(n_exc: usize, width: u16, height: u16) -> NetworkConfig {
        NetworkConfig {
            width,
            height,
            n_exc,
            ..NetworkConfig::default()
        }
    }

    #[test]
    fn kernel_is_zero_before_onset() {
        let k = KernelParams {
            tau_rise_ms: 1.0,
            tau_fall_ms: 5.0,
            amplitude: 1.0,
        };
        assert_eq!(kernel_value(-0.001, &k), 0.0);
    }

    #[test]
    fn kernel_alpha_peak() {
        let k = KernelParams {
            tau_rise_ms: 1.0,
            tau_fall_ms: 2.0,
            amplitude: 1.0,
        };
        let t_peak = 2.0 * std::f64::consts::LN_2;
        assert_relative_eq!(kernel_value(t_peak, &k), 0.25, max_relative = 1e-12);
        assert!(kernel_value(t_peak - 0.01, &k) < 0.25);
        assert!(kernel_value(t_peak + 0.01, &k) < 0.25);
    }

    #[test]
    fn kernel_exponential_when_rise_is_zero() {
        let k = KernelParams {
            tau_rise_ms: 0.0,
            tau_fall_ms: 5.0,
            amplitude: 1.0,
        };
        assert_eq!(kernel_value(0.0, &k), 1.0);
        assert_relative_eq!(kernel_value(5.0, &k), (-1.0f64).exp(), max_relative = 1e-12);
    }

    #[test]
    fn euler_step_leaks_toward_rest() {
        let cfg = tiny_config(1, 1, 1);
        let mut state = NetworkState::new(&cfg, 0);
        state.v_e[0] = -60.0;
        state.weights[0] = 0.0;
        step(&mut state, &cfg, &[], true, 0).unwrap();
        assert_relative_eq!(state.v_e[0], -60.05, max_relative = 1e-12);
    }

    #[test]
    fn quiescent_network_stays_silent_and_decays_monotonically() {
        let cfg = tiny_config(3, 2, 2);
        let mut state = NetworkState::new(&cfg, 1);
        state.v_e.fill(-55.0);
        let mut last = state.v_e.clone();
        for i in 0..1000 {
            let spikes = step(&mut state, &cfg, &[], true, i).unwrap();
            assert!(spikes.exc.is_empty() && spikes.inh.is_empty());
            for (v, prev) in state.v_e.iter().zip(&last) {
                assert!(*v <= *prev);
                assert!(*v >= cfg.lif_e.v_rest_mv);
            }
            last = state.v_e.clone();
        }
        assert_relative_eq!(state.v_e[0], cfg.lif_e.v_rest_mv, epsilon = 2e-3);
    }

    /// Recursive trace updates must match the direct convolution with the
    /// kernel on the millisecond grid.
    #[test]
    fn trace_matches_brute_force_convolution() {
        let cfg = tiny_config(1, 2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let spike_times: Vec<u32> = (0..105).filter(|_| rng.gen_bool(0.3)).collect();
            let mut state = NetworkState::new(&cfg, 0);
            for t in 0..105u32 {
                let inputs: Vec<u16> = if spike_times.contains(&t) {
                    vec![0]
                } else {
                    vec![]
                };
                step(&mut state, &cfg, &inputs, false, t).unwrap();
                let recursive = state.g_xe_fall[0] - state.g_xe_rise[0];
                let brute: f64 = spike_times
                    .iter()
                    .filter(|&&ti| ti <= t)
                    .map(|&ti| kernel_value(f64::from(t - ti), &cfg.kernel_xe))
                    .sum();
                let scale = recursive.abs().max(brute.abs()).max(1e-12);
                assert!(
                    (recursive - brute).abs() <= 1e-9 * scale,
                    "t={t}: {recursive} vs {brute}"
                );
            }
        }
    }

    #[test]
    fn refractory_neuron_cannot_spike() {
        let mut cfg = tiny_config(1, 1, 1);
        cfg.w_ie = 0.0;
        let mut state = NetworkState::new(&cfg, 0);
        state.weights[0] = 1.0;
        state.gain_xe = 10_000.0;
        let mut spike_steps = Vec::new();
        for t in 0..40u32 {
            let spikes = step(&mut state, &cfg, &[0], true, t).unwrap();
            if !spikes.exc.is_empty() {
                spike_steps.push(t);
            }
        }
        assert!(spike_steps.len() >= 2, "drive should elicit repeated spikes");
        for pair in spike_steps.windows(2) {
            assert!(
                f64::from(pair[1] - pair[0]) * cfg.dt_ms >= cfg.lif_e.t_ref_ms,
                "ISI {:?} violates t_ref",
                pair
            );
        }
    }

    #[test]
    fn theta_jumps_on_spike_and_decays_between() {
        let mut cfg = tiny_config(1, 1, 1);
        cfg.homeostasis.delta_theta_mv = 0.5;
        cfg.homeostasis.tau_theta_ms = 50.0;
        let mut state = NetworkState::new(&cfg, 0);
        state.weights[0] = 1.0;
        state.gain_xe = 10_000.0;
        let mut prev_theta = 0.0;
        for t in 0..30u32 {
            let spikes = step(&mut state, &cfg, &[0], true, t).unwrap();
            if spikes.exc.is_empty() {
                assert!(state.theta[0] <= prev_theta);
            } else {
                let decayed = prev_theta * (-cfg.dt_ms / cfg.homeostasis.tau_theta_ms).exp();
                assert_relative_eq!(
                    state.theta[0],
                    decayed + cfg.homeostasis.delta_theta_mv,
                    max_relative = 1e-12
                );
            }
            prev_theta = state.theta[0];
        }
        assert!(prev_theta > 0.0);
    }

    #[test]
    fn tied_neurons_spike_together_then_inhibit() {
        let cfg = tiny_config(2, 1, 1);
        let mut state = NetworkState::new(&cfg, 0);
        state.weights.fill(1.0);
        state.gain_xe = 10_000.0;
        let spikes = step(&mut state, &cfg, &[0], true, 0).unwrap();
        // alpha kernel: no current on the spike's own step
        assert!(spikes.exc.is_empty());
        let spikes = step(&mut state, &cfg, &[], true, 1).unwrap();
        assert_eq!(spikes.exc, vec![0, 1]);
        assert_eq!(state.g_ei, vec![1.0, 1.0]);
        // partner inhibitory neurons fire next step and cross-couple
        let spikes = step(&mut state, &cfg, &[], true, 2).unwrap();
        assert_eq!(spikes.inh, vec![0, 1]);
        assert!(state.g_ie[0] > 0.0 && state.g_ie[1] > 0.0);
    }

    fn strong_pattern(cfg: &NetworkConfig) -> Pattern {
        let spikes = (0..cfg.n_input() as u16)
            .flat_map(|px| (0..8).map(move |i| PatternSpike {
                pixel: px,
                t_ms: 40 + i * 8,
            }))
            .collect();
        Pattern::new(spikes, cfg.width, cfg.height, 105, None)
    }

    #[test]
    fn present_all_zero_weights_exhausts_retries() {
        let mut cfg = tiny_config(2, 2, 2);
        cfg.max_retries = 3;
        cfg.gain_step = 0.0;
        let mut state = NetworkState::new(&cfg, 0);
        state.weights.fill(0.0);
        let pattern = strong_pattern(&cfg);
        let err = present_pattern(&mut state, &cfg, &pattern, PresentOpts::default()).unwrap_err();
        assert!(matches!(
            err,
            NetworkError::NoResponseAfterMaxRetries { retries: 3 }
        ));
    }

    #[test]
    fn present_empty_pattern_exhausts_retries_and_raises_gain() {
        let mut cfg = tiny_config(2, 2, 2);
        cfg.max_retries = 4;
        let mut state = NetworkState::new(&cfg, 0);
        let empty = Pattern::new(vec![], cfg.width, cfg.height, 105, None);
        let err = present_pattern(&mut state, &cfg, &empty, PresentOpts::default()).unwrap_err();
        assert!(matches!(err, NetworkError::NoResponseAfterMaxRetries { .. }));
        assert_relative_eq!(
            state.gain_xe,
            cfg.gain_init + 4.0 * cfg.gain_step,
            max_relative = 1e-12
        );
    }

    #[test]
    fn present_tuned_weights_spikes_and_resets_transient() {
        let cfg = tiny_config(4, 3, 3);
        let mut state = NetworkState::new(&cfg, 3);
        state.weights.fill(1.0);
        let pattern = strong_pattern(&cfg);
        let theta_before = state.theta.clone();
        let result =
            present_pattern(&mut state, &cfg, &pattern, PresentOpts::default()).unwrap();
        assert!(!result.post_spikes.is_empty());
        assert_eq!(result.winner, result.post_spikes[0].neuron);
        assert!(state.v_e.iter().all(|&v| v == cfg.lif_e.v_rest_mv));
        assert!(state.g_xe_fall.iter().all(|&g| g == 0.0));
        // plasticity off: weights and theta untouched
        assert!(state.weights.iter().all(|&w| w == 1.0));
        assert_eq!(state.theta, theta_before);
    }

    #[test]
    fn gain_retry_loop_recovers_weak_response() {
        let mut cfg = tiny_config(2, 2, 2);
        cfg.gain_init = 0.01;
        cfg.gain_step = 0.5;
        cfg.max_retries = 200;
        let mut state = NetworkState::new(&cfg, 1);
        state.weights.fill(0.5);
        let pattern = strong_pattern(&cfg);
        let result =
            present_pattern(&mut state, &cfg, &pattern, PresentOpts::default()).unwrap();
        assert!(result.retries > 0);
        assert!(state.gain_xe > cfg.gain_init);
    }

    #[test]
    fn identical_seeds_give_identical_trajectories() {
        let mut cfg = tiny_config(5, 3, 3);
        cfg.gain_init = 20.0;
        cfg.gain_step = 10.0;
        let pattern = strong_pattern(&cfg);
        let run = |seed: u64| {
            let mut state = NetworkState::new(&cfg, seed);
            let mode = PlasticityMode::TraceStdp(crate::plasticity::PlasticityParams::default());
            let opts = PresentOpts {
                plasticity: Some(&mode),
                adapt_threshold: true,
            };
            for _ in 0..3 {
                present_pattern(&mut state, &cfg, &pattern, opts).unwrap();
            }
            state
        };
        let a = run(42);
        let b = run(42);
        assert_eq!(a, b);
        assert_eq!(a.weights, b.weights);
    }
}
