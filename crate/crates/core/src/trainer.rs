//! Training orchestration: epochs, neuron label assignment, evaluation,
//! ensemble voting and weight diagnostics.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError, RawCheckpoint};
use crate::network::{
    present_pattern, present_with_observer, NetworkConfig, NetworkError, NetworkState,
    PresentOpts,
};
use crate::plasticity::{
    self, Calibration, CalibrationReference, PlasticityError, PlasticityMode, PlasticityParams,
};
use crate::preprocess::{compute_psth, Pattern, PreprocessError, PsthTable};
use crate::rng::derive_seed;

pub const N_CLASSES: usize = 10;

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("empty pattern set")]
    EmptyPatternSet,
    #[error("pattern {index}: {source}")]
    Presentation {
        index: usize,
        source: NetworkError,
    },
    #[error("model has no assigned labels; run label assignment first")]
    NoLabels,
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Plasticity(#[from] PlasticityError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// A trained network: configuration snapshot, weights, adaptive thresholds
/// and per-neuron class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: NetworkConfig,
    pub weights: Vec<f64>,
    pub theta: Vec<f64>,
    pub labels: Vec<Option<u8>>,
}

impl Model {
    pub fn has_labels(&self) -> bool {
        self.labels.iter().any(|l| l.is_some())
    }

    pub fn to_raw(&self) -> RawCheckpoint {
        RawCheckpoint {
            n_exc: self.config.n_exc,
            n_input: self.config.n_input(),
            weights: self.weights.clone(),
            theta: self.theta.clone(),
            labels: self.labels.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        checkpoint::save(path, &self.to_raw())
    }

    pub fn load(path: &Path, config: NetworkConfig) -> Result<Model, CheckpointError> {
        let raw = checkpoint::load(path)?;
        if raw.n_exc != config.n_exc || raw.n_input != config.n_input() {
            return Err(CheckpointError::SizeMismatch {
                n_exc: raw.n_exc,
                n_input: raw.n_input,
                cfg_exc: config.n_exc,
                cfg_input: config.n_input(),
            });
        }
        Ok(Model {
            config,
            weights: raw.weights,
            theta: raw.theta,
            labels: raw.labels,
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct EpochStats {
    pub presentations: usize,
    pub total_retries: u64,
    pub total_post_spikes: u64,
    pub mean_first_post_ms: f64,
}

/// Resumable training session; epochs can be interleaved with inspection.
pub struct Session {
    cfg: NetworkConfig,
    mode: PlasticityMode,
    state: NetworkState,
    shuffle_seed: Option<u64>,
    epochs_run: u32,
    /// First post-spike time of every successful presentation, in ms.
    pub first_post_times_ms: Vec<f64>,
}

impl Session {
    pub fn new(
        cfg: NetworkConfig,
        mode: PlasticityMode,
        seed: u64,
    ) -> Result<Session, TrainerError> {
        cfg.validate()?;
        let state = NetworkState::new(&cfg, seed);
        Ok(Session {
            cfg,
            mode,
            state,
            shuffle_seed: None,
            epochs_run: 0,
            first_post_times_ms: Vec::new(),
        })
    }

    /// Present patterns in a per-epoch shuffled order instead of dataset order.
    pub fn with_shuffle(mut self, seed: u64) -> Session {
        self.shuffle_seed = Some(seed);
        self
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn state(&self) -> &NetworkState {
        &self.state
    }

    pub fn epochs_run(&self) -> u32 {
        self.epochs_run
    }

    /// Present every pattern once, applying the session's learning rule.
    pub fn run_epoch(&mut self, patterns: &[Pattern]) -> Result<EpochStats, TrainerError> {
        if patterns.is_empty() {
            return Err(TrainerError::EmptyPatternSet);
        }
        let mut order: Vec<usize> = (0..patterns.len()).collect();
        if let Some(seed) = self.shuffle_seed {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::from(self.epochs_run)));
            order.shuffle(&mut rng);
        }
        let mut stats = EpochStats::default();
        let mut first_post_sum = 0.0;
        for &index in &order {
            let opts = PresentOpts {
                plasticity: Some(&self.mode),
                adapt_threshold: true,
            };
            let result = present_pattern(&mut self.state, &self.cfg, &patterns[index], opts)
                .map_err(|source| TrainerError::Presentation { index, source })?;
            let first_ms = f64::from(result.post_spikes[0].t_ms);
            self.first_post_times_ms.push(first_ms);
            first_post_sum += first_ms;
            stats.presentations += 1;
            stats.total_retries += u64::from(result.retries);
            stats.total_post_spikes += result.post_spikes.len() as u64;
        }
        stats.mean_first_post_ms = first_post_sum / stats.presentations as f64;
        self.epochs_run += 1;
        Ok(stats)
    }

    /// Snapshot the current weights and thresholds as an unlabeled model.
    pub fn model(&self) -> Model {
        Model {
            config: self.cfg.clone(),
            weights: self.state.weights.clone(),
            theta: self.state.theta.clone(),
            labels: vec![None; self.cfg.n_exc],
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainStats {
    pub per_epoch: Vec<EpochStats>,
    pub mean_first_post_ms: f64,
}

/// Train a fresh network for the given number of epochs in fixed dataset
/// order (or shuffled when `shuffle_seed` is set). Fully seeded.
pub fn train(
    cfg: NetworkConfig,
    mode: PlasticityMode,
    patterns: &[Pattern],
    epochs: u32,
    seed: u64,
    shuffle_seed: Option<u64>,
) -> Result<(Model, TrainStats), TrainerError> {
    if patterns.is_empty() {
        return Err(TrainerError::EmptyPatternSet);
    }
    let mut session = Session::new(cfg, mode, seed)?;
    if let Some(s) = shuffle_seed {
        session = session.with_shuffle(s);
    }
    let mut stats = TrainStats::default();
    for _ in 0..epochs {
        stats.per_epoch.push(session.run_epoch(patterns)?);
    }
    stats.mean_first_post_ms = if session.first_post_times_ms.is_empty() {
        f64::NAN
    } else {
        session.first_post_times_ms.iter().sum::<f64>() / session.first_post_times_ms.len() as f64
    };
    Ok((session.model(), stats))
}

/// Per-neuron spike counts for one frozen presentation, or None when the
/// pattern stayed unresponsive through the retry loop.
fn present_frozen(
    state: &mut NetworkState,
    cfg: &NetworkConfig,
    pattern: &Pattern,
) -> Result<Option<Vec<u32>>, NetworkError> {
    // The gain-retry loop stays active but restarts from the configured
    // base gain for every pattern, keeping results independent of order
    // and of how patterns are divided among workers.
    state.gain_xe = cfg.gain_init;
    match present_pattern(state, cfg, pattern, PresentOpts::default()) {
        Ok(result) => {
            let mut counts = vec![0u32; cfg.n_exc];
            for spike in &result.post_spikes {
                counts[spike.neuron as usize] += 1;
            }
            Ok(Some(counts))
        }
        Err(NetworkError::NoResponseAfterMaxRetries { .. }) => Ok(None),
        Err(other) => Err(other),
    }
}

fn frozen_state(model: &Model) -> NetworkState {
    NetworkState::from_parts(&model.config, model.weights.clone(), model.theta.clone())
}

pub(crate) fn argmax_class(counts: &[u64; N_CLASSES]) -> Option<u8> {
    let mut best: Option<(u8, u64)> = None;
    for (class, &count) in counts.iter().enumerate() {
        if count > 0 && best.map(|(_, c)| count > c).unwrap_or(true) {
            best = Some((class as u8, count));
        }
    }
    best.map(|(class, _)| class)
}

/// Re-present labeled training patterns with plasticity and threshold
/// adaptation off, and label each neuron with the class it responds to most.
/// Ties go to the lower class index; silent neurons stay unassigned.
pub fn assign_labels(model: &Model, patterns: &[Pattern]) -> Result<Model, TrainerError> {
    if patterns.is_empty() {
        return Err(TrainerError::EmptyPatternSet);
    }
    let per_pattern: Vec<Option<(u8, Vec<u32>)>> = patterns
        .par_iter()
        .map_init(
            || frozen_state(model),
            |state, pattern| {
                let label = pattern.label?;
                present_frozen(state, &model.config, pattern)
                    .ok()?
                    .map(|counts| (label, counts))
            },
        )
        .collect();
    let mut response: Vec<[u64; N_CLASSES]> = vec![[0; N_CLASSES]; model.config.n_exc];
    for entry in per_pattern.into_iter().flatten() {
        let (label, counts) = entry;
        for (neuron, &count) in counts.iter().enumerate() {
            response[neuron][label as usize] += u64::from(count);
        }
    }
    let mut labeled = model.clone();
    labeled.labels = response.iter().map(|counts| argmax_class(counts)).collect();
    Ok(labeled)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatternOutcome {
    pub true_label: u8,
    pub pred: u8,
    pub responsive: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    /// confusion[true][pred]; unresponsive patterns land on a deterministic
    /// off-diagonal column so row sums always equal per-class counts.
    pub confusion: [[u64; N_CLASSES]; N_CLASSES],
    pub outcomes: Vec<PatternOutcome>,
    pub unresponsive: usize,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("pattern_id,true,pred,responsive\n");
        for (i, o) in self.outcomes.iter().enumerate() {
            s.push_str(&format!(
                "{i},{},{},{}\n",
                o.true_label,
                o.pred,
                u8::from(o.responsive)
            ));
        }
        s.push_str(&format!(
            "# accuracy={:.6} unresponsive={} patterns={}\n",
            self.accuracy,
            self.unresponsive,
            self.outcomes.len()
        ));
        s
    }
}

fn wrong_placeholder(true_label: u8) -> u8 {
    if true_label == 0 {
        1
    } else {
        0
    }
}

/// Classify test patterns: the predicted class is the one whose assigned
/// neurons spiked most. Patterns that elicit no spike from any assigned
/// neuron count as wrong and are tallied as unresponsive.
pub fn evaluate(model: &Model, patterns: &[Pattern]) -> Result<EvalReport, TrainerError> {
    if patterns.is_empty() {
        return Err(TrainerError::EmptyPatternSet);
    }
    if !model.has_labels() {
        return Err(TrainerError::NoLabels);
    }
    let outcomes: Vec<PatternOutcome> = patterns
        .par_iter()
        .map_init(
            || frozen_state(model),
            |state, pattern| {
                let true_label = pattern.label.expect("test patterns carry labels");
                let counts = present_frozen(state, &model.config, pattern)
                    .ok()
                    .flatten();
                let pred = counts.and_then(|counts| {
                    let mut class_counts = [0u64; N_CLASSES];
                    for (neuron, &count) in counts.iter().enumerate() {
                        if let Some(class) = model.labels[neuron] {
                            class_counts[class as usize] += u64::from(count);
                        }
                    }
                    argmax_class(&class_counts)
                });
                match pred {
                    Some(pred) => PatternOutcome {
                        true_label,
                        pred,
                        responsive: true,
                    },
                    None => PatternOutcome {
                        true_label,
                        pred: wrong_placeholder(true_label),
                        responsive: false,
                    },
                }
            },
        )
        .collect();

    let mut confusion = [[0u64; N_CLASSES]; N_CLASSES];
    let mut correct = 0u64;
    let mut unresponsive = 0usize;
    for o in &outcomes {
        confusion[o.true_label as usize][o.pred as usize] += 1;
        if o.responsive && o.pred == o.true_label {
            correct += 1;
        }
        if !o.responsive {
            unresponsive += 1;
        }
    }
    Ok(EvalReport {
        accuracy: correct as f64 / outcomes.len() as f64,
        confusion,
        outcomes,
        unresponsive,
    })
}

/// Majority vote over per-network predictions. Ties resolve to the class
/// predicted by the lowest-index network among the tied classes.
pub fn ensemble_predict(predictions: &[u8]) -> u8 {
    assert!(!predictions.is_empty());
    let mut votes = [0u32; N_CLASSES];
    let mut first_seen = [usize::MAX; N_CLASSES];
    for (i, &p) in predictions.iter().enumerate() {
        let p = p as usize;
        votes[p] += 1;
        if first_seen[p] == usize::MAX {
            first_seen[p] = i;
        }
    }
    let mut best = 0usize;
    for class in 1..N_CLASSES {
        if votes[class] > votes[best]
            || (votes[class] == votes[best] && first_seen[class] < first_seen[best])
        {
            best = class;
        }
    }
    best as u8
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightHistogram {
    /// Normalized bin masses over [0, w_max].
    pub fractions: Vec<f64>,
    pub w_max: f64,
    /// Mass in the outer deciles (w < 0.1 w_max or w > 0.9 w_max).
    pub bimodality: f64,
}

impl WeightHistogram {
    pub fn to_csv(&self) -> String {
        let bins = self.fractions.len();
        let mut s = String::from("bin_lo,bin_hi,fraction\n");
        for (i, f) in self.fractions.iter().enumerate() {
            let lo = self.w_max * i as f64 / bins as f64;
            let hi = self.w_max * (i + 1) as f64 / bins as f64;
            s.push_str(&format!("{lo},{hi},{f}\n"));
        }
        s.push_str(&format!("# bimodality={:.6}\n", self.bimodality));
        s
    }
}

pub fn weight_histogram(weights: &[f64], w_max: f64, bins: usize) -> WeightHistogram {
    assert!(bins > 0 && w_max > 0.0);
    let mut counts = vec![0u64; bins];
    let mut outer = 0u64;
    for &w in weights {
        let idx = ((w / w_max * bins as f64) as usize).min(bins - 1);
        counts[idx] += 1;
        if w < 0.1 * w_max || w > 0.9 * w_max {
            outer += 1;
        }
    }
    let total = weights.len().max(1) as f64;
    WeightHistogram {
        fractions: counts.iter().map(|&c| c as f64 / total).collect(),
        w_max,
        bimodality: outer as f64 / total,
    }
}

/// Tile every neuron's weight row as a width x height image into a mosaic
/// PGM, scaled so w_max maps to 255. Missing tiles stay blank.
pub fn export_weight_grid(model: &Model) -> Vec<u8> {
    let (w, h) = (
        model.config.width as usize,
        model.config.height as usize,
    );
    let n = model.config.n_exc;
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let (out_w, out_h) = (cols * w, rows * h);
    let mut pixels = vec![0u8; out_w * out_h];
    for neuron in 0..n {
        let (tile_r, tile_c) = (neuron / cols, neuron % cols);
        let row = &model.weights[neuron * w * h..(neuron + 1) * w * h];
        for y in 0..h {
            for x in 0..w {
                let v = (row[y * w + x] / model.config.w_max).clamp(0.0, 1.0);
                pixels[(tile_r * h + y) * out_w + tile_c * w + x] =
                    (v * 255.0 + 0.5).floor() as u8;
            }
        }
    }
    let mut out = format!("P5\n{out_w} {out_h}\n255\n").into_bytes();
    out.extend(pixels);
    out
}

/// Calibration outcome for the PSTH rule, including the honestly measured
/// update-magnitude ratio against the trace-rule reference.
#[derive(Debug, Clone)]
pub struct CalibrationRun {
    pub calibration: Calibration,
    pub measured_ratio: f64,
    pub psth: PsthTable,
    pub k_patterns: usize,
}

impl CalibrationRun {
    pub fn report_csv(&self) -> String {
        format!(
            "a,b,mean_abs_dw_ratio,k_patterns\n{},{},{},{}\n",
            self.calibration.a, self.calibration.b, self.measured_ratio, self.k_patterns
        )
    }
}

fn mean_abs_dw_of_run(
    cfg: &NetworkConfig,
    mode: &PlasticityMode,
    patterns: &[Pattern],
    seed: u64,
) -> Result<f64, TrainerError> {
    let mut state = NetworkState::new(cfg, seed);
    let mut sum = 0.0;
    let mut n = 0u64;
    let params = *mode.params();
    for (index, pattern) in patterns.iter().enumerate() {
        let opts = PresentOpts {
            plasticity: Some(mode),
            adapt_threshold: true,
        };
        let result = present_with_observer(&mut state, cfg, pattern, opts, &mut |_, row, x_pre| {
            for (&w, &x) in row.iter().zip(x_pre) {
                let updated = match mode {
                    PlasticityMode::PsthStdp { .. } => plasticity::psth_update(w, x, &params),
                    _ => plasticity::stdp_update(w, x, &params),
                };
                sum += (updated - w).abs();
                n += 1;
            }
        });
        match result {
            Ok(_) => {}
            Err(NetworkError::NoResponseAfterMaxRetries { .. }) => continue,
            Err(source) => return Err(TrainerError::Presentation { index, source }),
        }
    }
    if n == 0 {
        return Err(TrainerError::Presentation {
            index: 0,
            source: NetworkError::NoResponseAfterMaxRetries {
                retries: cfg.max_retries,
            },
        });
    }
    Ok(sum / n as f64)
}

/// Derive the PSTH-based STDP function from the training data.
///
/// The PSTH is computed over all supplied patterns; the update-magnitude
/// condition is fitted empirically on the first `k` patterns by replaying
/// the trace rule, solving for the scale, then measuring the calibrated
/// rule and refining the scale until both rules change weights at the same
/// mean magnitude.
pub fn calibrate_for_psth(
    cfg: &NetworkConfig,
    params: PlasticityParams,
    patterns: &[Pattern],
    k: usize,
    seed: u64,
) -> Result<CalibrationRun, TrainerError> {
    if patterns.is_empty() {
        return Err(TrainerError::EmptyPatternSet);
    }
    let psth = compute_psth(patterns)?;
    let h_unit = plasticity::unit_h(&psth)?;
    let k = k.min(patterns.len());
    let calib_patterns = &patterns[..k];

    // Reference pass: replay the trace rule, recording the applied |dw|
    // alongside what the unit-shape PSTH rule would do on the same rows.
    let unit_x_pre: Vec<Vec<f64>> = calib_patterns
        .iter()
        .map(|p| plasticity::psth_xpre(p, &h_unit, params.x_tar))
        .collect::<Result<_, _>>()?;
    let mut state = NetworkState::new(cfg, seed);
    let mode = PlasticityMode::TraceStdp(params);
    let mut reference = CalibrationReference::default();
    let mut trace_sum = 0.0;
    let mut silent_sum = 0.0;
    let mut unit_sum = 0.0;
    let mut n = 0u64;
    for (index, pattern) in calib_patterns.iter().enumerate() {
        let unit = &unit_x_pre[index];
        let opts = PresentOpts {
            plasticity: Some(&mode),
            adapt_threshold: true,
        };
        let result = present_with_observer(&mut state, cfg, pattern, opts, &mut |_, row, x_pre| {
            for ((&w, &x), &u) in row.iter().zip(x_pre).zip(unit) {
                trace_sum += (plasticity::stdp_update(w, x, &params) - w).abs();
                if u == -params.x_tar {
                    silent_sum += (plasticity::psth_update(w, u, &params) - w).abs();
                } else {
                    let dep = if params.mu == 1.0 {
                        params.w_max - w
                    } else {
                        (params.w_max - w).powf(params.mu)
                    };
                    unit_sum += params.eta * u.abs() * dep;
                }
                n += 1;
            }
        });
        match result {
            Ok(_) => {}
            Err(NetworkError::NoResponseAfterMaxRetries { .. }) => continue,
            Err(source) => return Err(TrainerError::Presentation { index, source }),
        }
    }
    if n == 0 {
        return Err(TrainerError::EmptyPatternSet);
    }
    reference.mean_abs_trace_dw = trace_sum / n as f64;
    reference.mean_silent_dw = silent_sum / n as f64;
    reference.mean_unit_spiking_dw = unit_sum / n as f64;
    reference.n_updates = n;

    let mut calibration = plasticity::calibrate_psth_stdp(&psth, &reference)?;
    let target = reference.mean_abs_trace_dw;

    // Empirical refinement: measure the calibrated rule and rescale until
    // the measured mean |dw| matches the reference.
    let mut measured_ratio = f64::NAN;
    for _ in 0..4 {
        let mode = PlasticityMode::PsthStdp {
            h: calibration.h.clone(),
            a: calibration.a,
            b: calibration.b,
            params,
        };
        let measured = mean_abs_dw_of_run(cfg, &mode, calib_patterns, seed)?;
        measured_ratio = measured / target;
        if (measured_ratio - 1.0).abs() <= 0.02 {
            break;
        }
        let adjust = 1.0 / measured_ratio;
        calibration.a *= adjust;
        calibration.b *= adjust;
        for v in &mut calibration.h {
            *v *= adjust;
        }
    }
    Ok(CalibrationRun {
        calibration,
        measured_ratio,
        psth,
        k_patterns: k,
    })
}
