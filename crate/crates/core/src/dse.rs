//! Design-space exploration over (tau_xpre, eta, delta_theta): a seeded
//! grid of independent train/label/evaluate runs plus linear refinement
//! around the best cell.

use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;

use crate::network::NetworkConfig;
use crate::plasticity::{PlasticityMode, PlasticityParams};
use crate::preprocess::Pattern;
use crate::rng::derive_seed;
use crate::trainer::{assign_labels, evaluate, train};

#[derive(Debug, Error)]
pub enum DseError {
    #[error("grid has an empty parameter list")]
    EmptyGrid,
    #[error("no successful cell to refine around")]
    NoBestCell,
    #[error("results csv: {0}")]
    Csv(String),
}

#[derive(Debug, Clone)]
pub struct DseGrid {
    pub tau_xpre_ms: Vec<f64>,
    pub eta: Vec<f64>,
    pub delta_theta_mv: Vec<f64>,
    pub epochs: u32,
    /// Pattern caps per cell; 0 means use everything supplied.
    pub max_train_patterns: usize,
    pub max_test_patterns: usize,
    pub base_config: NetworkConfig,
    pub base_params: PlasticityParams,
    pub seed: u64,
}

impl DseGrid {
    pub fn n_cells(&self) -> usize {
        self.tau_xpre_ms.len() * self.eta.len() * self.delta_theta_mv.len()
    }

    fn validate(&self) -> Result<(), DseError> {
        if self.tau_xpre_ms.is_empty() || self.eta.is_empty() || self.delta_theta_mv.is_empty() {
            return Err(DseError::EmptyGrid);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellOutcome {
    pub tau_xpre_ms: f64,
    pub eta: f64,
    pub delta_theta_mv: f64,
    /// NaN when the cell failed.
    pub accuracy: f64,
    pub unresponsive: u64,
    pub seconds: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DseResult {
    pub cells: Vec<CellOutcome>,
}

impl DseResult {
    /// Highest accuracy; ties prefer smaller tau_xpre, then eta, then
    /// delta_theta. Failed cells never win.
    pub fn best(&self) -> Option<&CellOutcome> {
        self.cells
            .iter()
            .filter(|c| c.accuracy.is_finite())
            .min_by(|a, b| {
                b.accuracy
                    .partial_cmp(&a.accuracy)
                    .unwrap()
                    .then(a.tau_xpre_ms.partial_cmp(&b.tau_xpre_ms).unwrap())
                    .then(a.eta.partial_cmp(&b.eta).unwrap())
                    .then(a.delta_theta_mv.partial_cmp(&b.delta_theta_mv).unwrap())
            })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("tau_xpre_ms,eta,delta_theta_mV,accuracy,unresponsive,seconds\n");
        for c in &self.cells {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                c.tau_xpre_ms, c.eta, c.delta_theta_mv, c.accuracy, c.unresponsive, c.seconds
            ));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<DseResult, DseError> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| DseError::Csv("empty".into()))?;
        if header.trim() != "tau_xpre_ms,eta,delta_theta_mV,accuracy,unresponsive,seconds" {
            return Err(DseError::Csv(format!("unexpected header {header:?}")));
        }
        let mut cells = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 6 {
                return Err(DseError::Csv(format!("line {}: expected 6 fields", i + 2)));
            }
            let parse = |s: &str| -> Result<f64, DseError> {
                s.parse()
                    .map_err(|e| DseError::Csv(format!("line {}: {e}", i + 2)))
            };
            cells.push(CellOutcome {
                tau_xpre_ms: parse(fields[0])?,
                eta: parse(fields[1])?,
                delta_theta_mv: parse(fields[2])?,
                accuracy: parse(fields[3])?,
                unresponsive: fields[4]
                    .parse()
                    .map_err(|e| DseError::Csv(format!("line {}: {e}", i + 2)))?,
                seconds: parse(fields[5])?,
                error: None,
            });
        }
        Ok(DseResult { cells })
    }
}

fn run_cell(
    grid: &DseGrid,
    cell_index: u64,
    tau: f64,
    eta: f64,
    dtheta: f64,
    train_patterns: &[Pattern],
    test_patterns: &[Pattern],
) -> CellOutcome {
    let start = Instant::now();
    let mut config = grid.base_config.clone();
    config.homeostasis.delta_theta_mv = dtheta;
    let params = PlasticityParams {
        tau_xpre_ms: tau,
        eta,
        ..grid.base_params
    };
    let seed = derive_seed(grid.seed, cell_index);
    let outcome = (|| -> Result<(f64, u64), String> {
        let mode = PlasticityMode::TraceStdp(params);
        let (model, _) = train(
            config.clone(),
            mode,
            train_patterns,
            grid.epochs,
            seed,
            None,
        )
        .map_err(|e| e.to_string())?;
        let model = assign_labels(&model, train_patterns).map_err(|e| e.to_string())?;
        let report = evaluate(&model, test_patterns).map_err(|e| e.to_string())?;
        Ok((report.accuracy, report.unresponsive as u64))
    })();
    let seconds = start.elapsed().as_secs_f64();
    match outcome {
        Ok((accuracy, unresponsive)) => CellOutcome {
            tau_xpre_ms: tau,
            eta,
            delta_theta_mv: dtheta,
            accuracy,
            unresponsive,
            seconds,
            error: None,
        },
        Err(error) => CellOutcome {
            tau_xpre_ms: tau,
            eta,
            delta_theta_mv: dtheta,
            accuracy: f64::NAN,
            unresponsive: 0,
            seconds,
            error: Some(error),
        },
    }
}

fn cap<'a>(patterns: &'a [Pattern], cap: usize) -> &'a [Pattern] {
    if cap > 0 && patterns.len() > cap {
        &patterns[..cap]
    } else {
        patterns
    }
}

/// Train, label and evaluate one network per grid cell. Cells run in
/// parallel on the current rayon pool; each derives its own RNG stream from
/// (seed, cell index), so results are independent of execution order and of
/// the parallelism degree. Per-cell failures are recorded and the grid
/// continues.
pub fn run_grid(
    grid: &DseGrid,
    train_patterns: &[Pattern],
    test_patterns: &[Pattern],
) -> Result<DseResult, DseError> {
    grid.validate()?;
    let train_set = cap(train_patterns, grid.max_train_patterns);
    let test_set = cap(test_patterns, grid.max_test_patterns);
    let mut cells_spec = Vec::with_capacity(grid.n_cells());
    for &tau in &grid.tau_xpre_ms {
        for &eta in &grid.eta {
            for &dtheta in &grid.delta_theta_mv {
                cells_spec.push((cells_spec.len() as u64, tau, eta, dtheta));
            }
        }
    }
    let cells: Vec<CellOutcome> = cells_spec
        .par_iter()
        .map(|&(idx, tau, eta, dtheta)| {
            run_cell(grid, idx, tau, eta, dtheta, train_set, test_set)
        })
        .collect();
    Ok(DseResult { cells })
}

/// Symmetric linear span around a center value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Span {
    pub half_width: f64,
    pub count: usize,
}

impl Span {
    pub fn values_around(&self, center: f64) -> Vec<f64> {
        if self.count <= 1 || self.half_width == 0.0 {
            return vec![center];
        }
        let lo = center - self.half_width;
        let hi = center + self.half_width;
        let step = (hi - lo) / (self.count - 1) as f64;
        let mut vals: Vec<f64> = (0..self.count)
            .map(|i| lo + step * i as f64)
            .filter(|v| *v > 0.0)
            .collect();
        vals.dedup();
        vals
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineSpans {
    pub eta: Span,
    pub delta_theta: Span,
}

/// Fix tau_xpre at the best cell's value and sweep eta and delta_theta
/// linearly around it.
pub fn refine_linear(
    grid: &DseGrid,
    result: &DseResult,
    spans: RefineSpans,
    train_patterns: &[Pattern],
    test_patterns: &[Pattern],
) -> Result<DseResult, DseError> {
    let best = result.best().ok_or(DseError::NoBestCell)?;
    let refined = DseGrid {
        tau_xpre_ms: vec![best.tau_xpre_ms],
        eta: spans.eta.values_around(best.eta),
        delta_theta_mv: spans.delta_theta.values_around(best.delta_theta_mv),
        ..grid.clone()
    };
    run_grid(&refined, train_patterns, test_patterns)
}
