//! Plain key=value run configuration (one `key = value` per line, `#`
//! comments), covering every network and plasticity parameter, plus the
//! grid-file dialect for design-space exploration and run manifests.

use std::path::PathBuf;

use thiserror::Error;

use crate::aer::Polarity;
use crate::dse::{RefineSpans, Span};
use crate::network::{NetworkConfig, NetworkError};
use crate::plasticity::PlasticityParams;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value for {key}: {msg}")]
    BadValue {
        line: usize,
        key: String,
        msg: String,
    },
    #[error("line {line}: expected `key = value`")]
    Malformed { line: usize },
    #[error(transparent)]
    Invalid(#[from] NetworkError),
    #[error("invalid config: {0}")]
    InvalidValue(String),
}

/// Everything a run needs: network, learning rule and pipeline settings.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub plasticity: PlasticityParams,
    pub seed: u64,
    pub epochs: u32,
    pub saccade: u8,
    pub polarity: Polarity,
    pub max_train_patterns: usize,
    pub max_test_patterns: usize,
    pub shuffle_seed: Option<u64>,
    pub t_star_ms: Option<u32>,
    pub data_root: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            network: NetworkConfig::default(),
            plasticity: PlasticityParams::default(),
            seed: 1,
            epochs: 1,
            saccade: 1,
            polarity: Polarity::On,
            max_train_patterns: 0,
            max_test_patterns: 0,
            shuffle_seed: None,
            t_star_ms: None,
            data_root: None,
        }
    }
}

fn parse_num<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue {
        line,
        key: key.to_string(),
        msg: e.to_string(),
    })
}

impl RunConfig {
    /// Apply one key=value assignment. Unknown keys are rejected.
    pub fn apply(&mut self, line: usize, key: &str, value: &str) -> Result<(), ConfigError> {
        let n = &mut self.network;
        let p = &mut self.plasticity;
        match key {
            "width" => n.width = parse_num(line, key, value)?,
            "height" => n.height = parse_num(line, key, value)?,
            "n_exc" => n.n_exc = parse_num(line, key, value)?,
            "dt_ms" => n.dt_ms = parse_num(line, key, value)?,
            "silence_ms" => n.silence_ms = parse_num(line, key, value)?,
            "tau_m_e_ms" => n.lif_e.tau_m_ms = parse_num(line, key, value)?,
            "v_rest_e_mv" => n.lif_e.v_rest_mv = parse_num(line, key, value)?,
            "v_reset_e_mv" => n.lif_e.v_reset_mv = parse_num(line, key, value)?,
            "v_thresh_e_mv" => n.lif_e.v_thresh_mv = parse_num(line, key, value)?,
            "t_ref_e_ms" => n.lif_e.t_ref_ms = parse_num(line, key, value)?,
            "r_e" => n.lif_e.r_m = parse_num(line, key, value)?,
            "tau_m_i_ms" => n.lif_i.tau_m_ms = parse_num(line, key, value)?,
            "v_rest_i_mv" => n.lif_i.v_rest_mv = parse_num(line, key, value)?,
            "v_reset_i_mv" => n.lif_i.v_reset_mv = parse_num(line, key, value)?,
            "v_thresh_i_mv" => n.lif_i.v_thresh_mv = parse_num(line, key, value)?,
            "t_ref_i_ms" => n.lif_i.t_ref_ms = parse_num(line, key, value)?,
            "r_i" => n.lif_i.r_m = parse_num(line, key, value)?,
            "delta_theta_mv" => n.homeostasis.delta_theta_mv = parse_num(line, key, value)?,
            "tau_theta_ms" => n.homeostasis.tau_theta_ms = parse_num(line, key, value)?,
            "tau_xe_rise_ms" => n.kernel_xe.tau_rise_ms = parse_num(line, key, value)?,
            "tau_xe_fall_ms" => n.kernel_xe.tau_fall_ms = parse_num(line, key, value)?,
            "amp_xe" => n.kernel_xe.amplitude = parse_num(line, key, value)?,
            "tau_ei_fall_ms" => n.kernel_ei.tau_fall_ms = parse_num(line, key, value)?,
            "amp_ei" => n.kernel_ei.amplitude = parse_num(line, key, value)?,
            "w_ei" => n.w_ei = parse_num(line, key, value)?,
            "tau_ie_fall_ms" => n.kernel_ie.tau_fall_ms = parse_num(line, key, value)?,
            "amp_ie" => n.kernel_ie.amplitude = parse_num(line, key, value)?,
            "w_ie" => n.w_ie = parse_num(line, key, value)?,
            "w_max" => {
                n.w_max = parse_num(line, key, value)?;
                p.w_max = n.w_max;
            }
            "w_init_frac" => n.w_init_frac = parse_num(line, key, value)?,
            "gain_init" => n.gain_init = parse_num(line, key, value)?,
            "gain_step" => n.gain_step = parse_num(line, key, value)?,
            "max_retries" => n.max_retries = parse_num(line, key, value)?,
            "eta" => p.eta = parse_num(line, key, value)?,
            "x_tar" => p.x_tar = parse_num(line, key, value)?,
            "mu" => p.mu = parse_num(line, key, value)?,
            "tau_xpre_ms" => p.tau_xpre_ms = parse_num(line, key, value)?,
            "delta_xpre" => p.delta_xpre = parse_num(line, key, value)?,
            "seed" => self.seed = parse_num(line, key, value)?,
            "epochs" => self.epochs = parse_num(line, key, value)?,
            "saccade" => self.saccade = parse_num(line, key, value)?,
            "polarity" => {
                self.polarity = Polarity::parse(value).ok_or_else(|| ConfigError::BadValue {
                    line,
                    key: key.to_string(),
                    msg: format!("expected ON or OFF, found {value:?}"),
                })?
            }
            "max_train_patterns" => self.max_train_patterns = parse_num(line, key, value)?,
            "max_test_patterns" => self.max_test_patterns = parse_num(line, key, value)?,
            "shuffle_seed" => self.shuffle_seed = Some(parse_num(line, key, value)?),
            "t_star_ms" => self.t_star_ms = Some(parse_num(line, key, value)?),
            "data_root" => self.data_root = Some(PathBuf::from(value)),
            _ => {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                })
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        let mut config = RunConfig::default();
        for (line_no, key, value) in iter_kv(text)? {
            config.apply(line_no, &key, &value)?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.network.validate()?;
        let p = &self.plasticity;
        if !(p.eta > 0.0) {
            return Err(ConfigError::InvalidValue("eta must be positive".into()));
        }
        if !(p.tau_xpre_ms > 0.0) {
            return Err(ConfigError::InvalidValue(
                "tau_xpre_ms must be positive".into(),
            ));
        }
        if p.mu < 0.0 {
            return Err(ConfigError::InvalidValue("mu must be non-negative".into()));
        }
        if !(p.w_max > 0.0) || p.w_max != self.network.w_max {
            return Err(ConfigError::InvalidValue(
                "w_max must be positive and shared by network and plasticity".into(),
            ));
        }
        if !(1..=3).contains(&self.saccade) {
            return Err(ConfigError::InvalidValue("saccade must be 1, 2 or 3".into()));
        }
        Ok(())
    }

    /// Canonical key=value listing of every field, optionals included only
    /// when set. Parsing this text reproduces the config.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let n = &self.network;
        let p = &self.plasticity;
        let mut kv: Vec<(String, String)> = vec![
            ("width", n.width.to_string()),
            ("height", n.height.to_string()),
            ("n_exc", n.n_exc.to_string()),
            ("dt_ms", n.dt_ms.to_string()),
            ("silence_ms", n.silence_ms.to_string()),
            ("tau_m_e_ms", n.lif_e.tau_m_ms.to_string()),
            ("v_rest_e_mv", n.lif_e.v_rest_mv.to_string()),
            ("v_reset_e_mv", n.lif_e.v_reset_mv.to_string()),
            ("v_thresh_e_mv", n.lif_e.v_thresh_mv.to_string()),
            ("t_ref_e_ms", n.lif_e.t_ref_ms.to_string()),
            ("r_e", n.lif_e.r_m.to_string()),
            ("tau_m_i_ms", n.lif_i.tau_m_ms.to_string()),
            ("v_rest_i_mv", n.lif_i.v_rest_mv.to_string()),
            ("v_reset_i_mv", n.lif_i.v_reset_mv.to_string()),
            ("v_thresh_i_mv", n.lif_i.v_thresh_mv.to_string()),
            ("t_ref_i_ms", n.lif_i.t_ref_ms.to_string()),
            ("r_i", n.lif_i.r_m.to_string()),
            ("delta_theta_mv", n.homeostasis.delta_theta_mv.to_string()),
            ("tau_theta_ms", n.homeostasis.tau_theta_ms.to_string()),
            ("tau_xe_rise_ms", n.kernel_xe.tau_rise_ms.to_string()),
            ("tau_xe_fall_ms", n.kernel_xe.tau_fall_ms.to_string()),
            ("amp_xe", n.kernel_xe.amplitude.to_string()),
            ("tau_ei_fall_ms", n.kernel_ei.tau_fall_ms.to_string()),
            ("amp_ei", n.kernel_ei.amplitude.to_string()),
            ("w_ei", n.w_ei.to_string()),
            ("tau_ie_fall_ms", n.kernel_ie.tau_fall_ms.to_string()),
            ("amp_ie", n.kernel_ie.amplitude.to_string()),
            ("w_ie", n.w_ie.to_string()),
            ("w_max", n.w_max.to_string()),
            ("w_init_frac", n.w_init_frac.to_string()),
            ("gain_init", n.gain_init.to_string()),
            ("gain_step", n.gain_step.to_string()),
            ("max_retries", n.max_retries.to_string()),
            ("eta", p.eta.to_string()),
            ("x_tar", p.x_tar.to_string()),
            ("mu", p.mu.to_string()),
            ("tau_xpre_ms", p.tau_xpre_ms.to_string()),
            ("delta_xpre", p.delta_xpre.to_string()),
            ("seed", self.seed.to_string()),
            ("epochs", self.epochs.to_string()),
            ("saccade", self.saccade.to_string()),
            ("polarity", self.polarity.to_string()),
            ("max_train_patterns", self.max_train_patterns.to_string()),
            ("max_test_patterns", self.max_test_patterns.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        if let Some(s) = self.shuffle_seed {
            kv.push(("shuffle_seed".into(), s.to_string()));
        }
        if let Some(t) = self.t_star_ms {
            kv.push(("t_star_ms".into(), t.to_string()));
        }
        if let Some(root) = &self.data_root {
            kv.push(("data_root".into(), root.display().to_string()));
        }
        kv
    }
}

/// Iterate `key = value` assignments, skipping blanks and `#` comments.
fn iter_kv(text: &str) -> Result<Vec<(usize, String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or(ConfigError::Malformed { line: line_no })?;
        out.push((line_no, key.trim().to_string(), value.trim().to_string()));
    }
    Ok(out)
}

/// A run manifest: the full configuration plus run-specific facts, enough
/// to reproduce the run bit for bit.
pub fn manifest(config: &RunConfig, extras: &[(&str, String)]) -> String {
    let mut s = String::new();
    for (k, v) in config.to_kv() {
        s.push_str(&format!("{k} = {v}\n"));
    }
    for (k, v) in extras {
        s.push_str(&format!("{k} = {v}\n"));
    }
    s
}

/// Parsed grid file: a base run configuration plus swept value lists and an
/// optional linear-refinement stage.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub base: RunConfig,
    pub tau_xpre_list: Vec<f64>,
    pub eta_list: Vec<f64>,
    pub delta_theta_list: Vec<f64>,
    pub refine: Option<RefineSpans>,
}

fn parse_list(line: usize, key: &str, value: &str) -> Result<Vec<f64>, ConfigError> {
    value
        .split(',')
        .map(|v| parse_num(line, key, v.trim()))
        .collect()
}

/// Grid files reuse every run-config key; `tau_xpre_ms`, `eta` and
/// `delta_theta_mv` accept comma-separated sweep lists, and the optional
/// `refine_*` keys request a linear refinement around the best cell.
pub fn parse_grid(text: &str) -> Result<GridSpec, ConfigError> {
    let mut base = RunConfig::default();
    let mut tau_list = vec![base.plasticity.tau_xpre_ms];
    let mut eta_list = vec![base.plasticity.eta];
    let mut dtheta_list = vec![base.network.homeostasis.delta_theta_mv];
    let mut refine = false;
    let mut eta_span = Span {
        half_width: 0.0,
        count: 1,
    };
    let mut dtheta_span = Span {
        half_width: 0.0,
        count: 1,
    };
    for (line, key, value) in iter_kv(text)? {
        match key.as_str() {
            "tau_xpre_ms" => tau_list = parse_list(line, &key, &value)?,
            "eta" => eta_list = parse_list(line, &key, &value)?,
            "delta_theta_mv" => dtheta_list = parse_list(line, &key, &value)?,
            "refine" => refine = parse_num::<u8>(line, &key, &value)? != 0,
            "refine_eta_half_width" => eta_span.half_width = parse_num(line, &key, &value)?,
            "refine_eta_count" => eta_span.count = parse_num(line, &key, &value)?,
            "refine_delta_theta_half_width" => {
                dtheta_span.half_width = parse_num(line, &key, &value)?
            }
            "refine_delta_theta_count" => dtheta_span.count = parse_num(line, &key, &value)?,
            _ => base.apply(line, &key, &value)?,
        }
    }
    base.validate()?;
    if tau_list.is_empty() || eta_list.is_empty() || dtheta_list.is_empty() {
        return Err(ConfigError::InvalidValue(
            "sweep lists must be non-empty".into(),
        ));
    }
    if tau_list.iter().any(|v| *v <= 0.0)
        || eta_list.iter().any(|v| *v <= 0.0)
        || dtheta_list.iter().any(|v| *v <= 0.0)
    {
        return Err(ConfigError::InvalidValue(
            "sweep values must be positive".into(),
        ));
    }
    Ok(GridSpec {
        base,
        tau_xpre_list: tau_list,
        eta_list,
        delta_theta_list: dtheta_list,
        refine: refine.then_some(RefineSpans {
            eta: eta_span,
            delta_theta: dtheta_span,
        }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_round_trips_through_kv() {
        let mut config = RunConfig::default();
        config.network.n_exc = 7;
        config.plasticity.eta = 0.125;
        config.shuffle_seed = Some(99);
        config.t_star_ms = Some(88);
        config.data_root = Some(PathBuf::from("/data/n-mnist"));
        let text = manifest(&config, &[]);
        let parsed = RunConfig::parse(&text).unwrap();
        assert_eq!(parsed, config);
    }

    #[test]
    fn rejects_unknown_key() {
        let err = RunConfig::parse("bogus = 1\n").unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey { line: 1, .. }));
    }

    #[test]
    fn skips_comments_and_blank_lines() {
        let config = RunConfig::parse("# full line comment\n\nn_exc = 3 # trailing\n").unwrap();
        assert_eq!(config.network.n_exc, 3);
    }

    #[test]
    fn reports_bad_values_with_line_numbers() {
        let err = RunConfig::parse("n_exc = 5\neta = fast\n").unwrap_err();
        assert!(matches!(err, ConfigError::BadValue { line: 2, .. }));
    }

    #[test]
    fn w_max_is_shared() {
        let config = RunConfig::parse("w_max = 2.5\n").unwrap();
        assert_eq!(config.network.w_max, 2.5);
        assert_eq!(config.plasticity.w_max, 2.5);
    }

    #[test]
    fn validates_invariants() {
        assert!(RunConfig::parse("saccade = 4\n").is_err());
        assert!(RunConfig::parse("tau_xe_rise_ms = 0\n").is_err());
        assert!(RunConfig::parse("eta = 0\n").is_err());
    }

    #[test]
    fn grid_parses_lists_and_refinement() {
        let text = "\
tau_xpre_ms = 20, 44.15, 97.5, 215
eta = 0.0005,0.005,0.05,0.5
delta_theta_mv = 0.001,0.01,0.1
epochs = 1
seed = 42
n_exc = 100
refine = 1
refine_eta_half_width = 0.02
refine_eta_count = 5
refine_delta_theta_half_width = 0.05
refine_delta_theta_count = 3
";
        let grid = parse_grid(text).unwrap();
        assert_eq!(grid.tau_xpre_list, vec![20.0, 44.15, 97.5, 215.0]);
        assert_eq!(grid.eta_list.len(), 4);
        assert_eq!(grid.delta_theta_list.len(), 3);
        assert_eq!(grid.base.network.n_exc, 100);
        let refine = grid.refine.unwrap();
        assert_eq!(refine.eta.count, 5);
        assert_eq!(refine.delta_theta.half_width, 0.05);
    }

    #[test]
    fn grid_rejects_non_positive_sweeps() {
        assert!(parse_grid("eta = 0.1,0\n").is_err());
    }
}
