//! Saccade slicing, polarity filtering, millisecond binning, time-collapsed
//! frame export and population PSTH computation.

use rayon::prelude::*;
use thiserror::Error;

use crate::aer::{AerError, DatasetIndex, EventStream, Polarity, Split};

/// One saccade window in the recording.
pub const SACCADE_MS: u16 = 105;
pub const SACCADE_US: u32 = SACCADE_MS as u32 * 1000;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("empty pattern set")]
    EmptyPatternSet,
    #[error("pattern duration mismatch: expected {expected} ms, found {found} ms")]
    DurationMismatch { expected: u16, found: u16 },
    #[error(transparent)]
    Aer(#[from] AerError),
}

/// A single binned spike: flat pixel index and millisecond bin.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatternSpike {
    pub pixel: u16,
    pub t_ms: u16,
}

/// A saccade- and polarity-filtered spike-train grid. Spikes are stored
/// sorted by (pixel, time); multiple events of one pixel in one bin are kept.
#[derive(Debug, Clone, PartialEq)]
pub struct Pattern {
    spikes: Vec<PatternSpike>,
    pub width: u16,
    pub height: u16,
    pub duration_ms: u16,
    pub label: Option<u8>,
}

impl Pattern {
    pub fn new(
        mut spikes: Vec<PatternSpike>,
        width: u16,
        height: u16,
        duration_ms: u16,
        label: Option<u8>,
    ) -> Pattern {
        spikes.sort_unstable_by_key(|s| (s.pixel, s.t_ms));
        let n_pixels = width as u32 * height as u32;
        debug_assert!(spikes
            .iter()
            .all(|s| u32::from(s.pixel) < n_pixels && s.t_ms < duration_ms));
        Pattern {
            spikes,
            width,
            height,
            duration_ms,
            label,
        }
    }

    pub fn n_pixels(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn spikes(&self) -> &[PatternSpike] {
        &self.spikes
    }

    pub fn spike_count(&self) -> usize {
        self.spikes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spikes.is_empty()
    }

    /// Per-pixel spike counts.
    pub fn counts(&self) -> Vec<u32> {
        let mut counts = vec![0u32; self.n_pixels()];
        for s in &self.spikes {
            counts[s.pixel as usize] += 1;
        }
        counts
    }

    /// Spiking pixel indices per millisecond bin, for step-wise simulation.
    /// Pixels within a bin are in ascending order.
    pub fn time_buckets(&self) -> Vec<Vec<u16>> {
        let mut buckets = vec![Vec::new(); self.duration_ms as usize];
        let mut by_time: Vec<&PatternSpike> = self.spikes.iter().collect();
        by_time.sort_by_key(|s| (s.t_ms, s.pixel));
        for s in by_time {
            buckets[s.t_ms as usize].push(s.pixel);
        }
        buckets
    }

    /// Iterate (pixel, spike times) groups over pixels that spiked.
    pub fn pixel_groups(&self) -> impl Iterator<Item = (u16, &[PatternSpike])> {
        self.spikes
            .chunk_by(|a, b| a.pixel == b.pixel)
            .map(|run| (run[0].pixel, run))
    }
}

/// Extract one saccade window of one polarity from an event stream,
/// re-based to the window start and floored to millisecond bins.
pub fn slice_saccade(stream: &EventStream, saccade: u8, polarity: Polarity) -> Pattern {
    assert!((1..=3).contains(&saccade), "saccade must be 1, 2 or 3");
    let start_us = u32::from(saccade - 1) * SACCADE_US;
    let end_us = start_us + SACCADE_US;
    let spikes = stream
        .events
        .iter()
        .filter(|e| e.polarity == polarity && e.t_us >= start_us && e.t_us < end_us)
        .map(|e| PatternSpike {
            pixel: u16::from(e.y) * stream.width + u16::from(e.x),
            t_ms: ((e.t_us - start_us) / 1000) as u16,
        })
        .collect();
    Pattern::new(spikes, stream.width, stream.height, SACCADE_MS, None)
}

/// How a pattern is reduced to a static frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CollapseMethod {
    /// Per-pixel spike counts, normalized by the maximum count.
    #[default]
    Counts,
    /// Per-pixel sums of spike times, normalized by the maximum sum.
    TimeSum,
}

impl CollapseMethod {
    pub fn parse(s: &str) -> Option<CollapseMethod> {
        match s.to_ascii_lowercase().as_str() {
            "counts" => Some(CollapseMethod::Counts),
            "time-sum" => Some(CollapseMethod::TimeSum),
            _ => None,
        }
    }
}

/// A time-collapsed frame with intensities in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct CollapsedFrame {
    pub intensity: Vec<f64>,
    pub width: u16,
    pub height: u16,
    pub label: Option<u8>,
}

/// Collapse a pattern to a frame using per-pixel spike counts normalized by
/// the highest count. An all-silent pattern yields an all-zero frame.
pub fn collapse(pattern: &Pattern) -> CollapsedFrame {
    collapse_with(pattern, CollapseMethod::Counts)
}

pub fn collapse_with(pattern: &Pattern, method: CollapseMethod) -> CollapsedFrame {
    let mut values = vec![0.0f64; pattern.n_pixels()];
    for s in pattern.spikes() {
        values[s.pixel as usize] += match method {
            CollapseMethod::Counts => 1.0,
            CollapseMethod::TimeSum => f64::from(s.t_ms),
        };
    }
    let max = values.iter().cloned().fold(0.0f64, f64::max);
    if max > 0.0 {
        for v in &mut values {
            *v /= max;
        }
    }
    CollapsedFrame {
        intensity: values,
        width: pattern.width,
        height: pattern.height,
        label: pattern.label,
    }
}

/// Population PSTH: average events per pattern per 1-ms bin.
#[derive(Debug, Clone, PartialEq)]
pub struct PsthTable {
    pub values: Vec<f64>,
    pub bin_ms: f64,
    pub n_patterns: usize,
}

impl PsthTable {
    pub fn duration_ms(&self) -> usize {
        self.values.len()
    }

    pub fn peak(&self) -> (usize, f64) {
        let mut best = (0usize, f64::NEG_INFINITY);
        for (t, &v) in self.values.iter().enumerate() {
            if v > best.1 {
                best = (t, v);
            }
        }
        best
    }
}

/// H(t) = (total events over all patterns and pixels in bin t) / n_patterns.
pub fn compute_psth(patterns: &[Pattern]) -> Result<PsthTable, PreprocessError> {
    let first = patterns.first().ok_or(PreprocessError::EmptyPatternSet)?;
    let duration = first.duration_ms;
    let mut totals = vec![0u64; duration as usize];
    for p in patterns {
        if p.duration_ms != duration {
            return Err(PreprocessError::DurationMismatch {
                expected: duration,
                found: p.duration_ms,
            });
        }
        for s in p.spikes() {
            totals[s.t_ms as usize] += 1;
        }
    }
    let n = patterns.len();
    Ok(PsthTable {
        values: totals.iter().map(|&c| c as f64 / n as f64).collect(),
        bin_ms: 1.0,
        n_patterns: n,
    })
}

/// Serialize a frame as binary PGM (P5), maxval 255, rounded half-up.
pub fn export_frame_pgm(frame: &CollapsedFrame) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", frame.width, frame.height).into_bytes();
    out.extend(
        frame
            .intensity
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8),
    );
    out
}

/// PSTH as CSV with header `t_ms,H`.
pub fn psth_to_csv(psth: &PsthTable) -> String {
    let mut s = String::from("t_ms,H\n");
    for (t, v) in psth.values.iter().enumerate() {
        s.push_str(&format!("{t},{v}\n"));
    }
    s
}

/// Decode and slice a dataset split into labeled patterns, preserving index
/// order. `cap` of zero means no limit.
pub fn load_patterns(
    index: &DatasetIndex,
    split: Split,
    saccade: u8,
    polarity: Polarity,
    cap: usize,
) -> Result<Vec<Pattern>, PreprocessError> {
    let entries: Vec<_> = index.split(split).collect();
    let entries = if cap > 0 && entries.len() > cap {
        &entries[..cap]
    } else {
        &entries[..]
    };
    entries
        .par_iter()
        .map(|entry| {
            let decoded = crate::aer::read_event_file(&entry.path)?;
            let mut pattern = slice_saccade(&decoded.stream, saccade, polarity);
            pattern.label = Some(entry.label);
            Ok(pattern)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aer::Event;

    fn stream(events: Vec<Event>) -> EventStream {
        EventStream {
            events,
            width: 34,
            height: 34,
        }
    }

    fn ev(x: u8, y: u8, polarity: Polarity, t_us: u32) -> Event {
        Event {
            x,
            y,
            polarity,
            t_us,
        }
    }

    #[test]
    fn slice_floors_to_ms() {
        let s = stream(vec![ev(1, 2, Polarity::On, 104_999)]);
        let p = slice_saccade(&s, 1, Polarity::On);
        assert_eq!(p.spikes(), &[PatternSpike { pixel: 69, t_ms: 104 }]);
    }

    #[test]
    fn slice_window_is_half_open() {
        let s = stream(vec![ev(1, 2, Polarity::On, 105_000)]);
        assert!(slice_saccade(&s, 1, Polarity::On).is_empty());
    }

    #[test]
    fn slice_rebases_third_saccade() {
        let s = stream(vec![ev(0, 0, Polarity::Off, 210_500)]);
        let p = slice_saccade(&s, 3, Polarity::Off);
        assert_eq!(p.spikes(), &[PatternSpike { pixel: 0, t_ms: 0 }]);
    }

    #[test]
    fn slice_filters_polarity() {
        let s = stream(vec![
            ev(0, 0, Polarity::On, 10),
            ev(0, 0, Polarity::Off, 20),
        ]);
        assert_eq!(slice_saccade(&s, 1, Polarity::On).spike_count(), 1);
    }

    #[test]
    fn saccades_partition_first_315ms() {
        // events across all three windows plus one beyond 315 ms
        let times = [0u32, 50_000, 104_999, 105_000, 200_123, 314_999, 315_000];
        let s = stream(times.iter().map(|&t| ev(3, 4, Polarity::On, t)).collect());
        let total: usize = (1..=3)
            .map(|i| slice_saccade(&s, i, Polarity::On).spike_count())
            .sum();
        let in_range = s.events.iter().filter(|e| e.t_us < 315_000).count();
        assert_eq!(total, in_range);
        assert_eq!(total, 6);
    }

    #[test]
    fn collapse_normalizes_by_max_count() {
        let p = Pattern::new(
            vec![
                PatternSpike { pixel: 0, t_ms: 1 },
                PatternSpike { pixel: 0, t_ms: 2 },
                PatternSpike { pixel: 0, t_ms: 3 },
                PatternSpike { pixel: 1, t_ms: 9 },
            ],
            34,
            34,
            105,
            None,
        );
        let f = collapse(&p);
        assert_eq!(f.intensity[0], 1.0);
        assert_eq!(f.intensity[1], 1.0 / 3.0);
        assert_eq!(f.intensity[2], 0.0);
    }

    #[test]
    fn collapse_all_silent_is_zero() {
        let p = Pattern::new(vec![], 34, 34, 105, None);
        assert!(collapse(&p).intensity.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn collapse_uniform_counts_all_one() {
        let spikes = (0..4u16)
            .flat_map(|px| {
                [
                    PatternSpike {
                        pixel: px,
                        t_ms: 10,
                    },
                    PatternSpike {
                        pixel: px,
                        t_ms: 20,
                    },
                ]
            })
            .collect();
        let p = Pattern::new(spikes, 2, 2, 105, None);
        assert!(collapse(&p).intensity.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn collapse_is_permutation_invariant() {
        let a = Pattern::new(
            vec![
                PatternSpike { pixel: 3, t_ms: 5 },
                PatternSpike { pixel: 3, t_ms: 90 },
                PatternSpike { pixel: 7, t_ms: 50 },
            ],
            34,
            34,
            105,
            None,
        );
        let b = Pattern::new(
            vec![
                PatternSpike { pixel: 3, t_ms: 90 },
                PatternSpike { pixel: 7, t_ms: 50 },
                PatternSpike { pixel: 3, t_ms: 5 },
            ],
            34,
            34,
            105,
            None,
        );
        assert_eq!(collapse(&a), collapse(&b));
    }

    #[test]
    fn time_sum_uses_literal_sums() {
        let p = Pattern::new(
            vec![
                PatternSpike { pixel: 0, t_ms: 10 },
                PatternSpike { pixel: 1, t_ms: 40 },
            ],
            2,
            1,
            105,
            None,
        );
        let f = collapse_with(&p, CollapseMethod::TimeSum);
        assert_eq!(f.intensity, vec![0.25, 1.0]);
    }

    #[test]
    fn psth_counts_single_bin() {
        let mk = || {
            Pattern::new(
                vec![PatternSpike { pixel: 0, t_ms: 50 }],
                34,
                34,
                105,
                None,
            )
        };
        let psth = compute_psth(&[mk(), mk(), mk()]).unwrap();
        assert_eq!(psth.values[50], 1.0);
        assert_eq!(psth.values.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn psth_averages_over_patterns() {
        let busy = Pattern::new(
            vec![
                PatternSpike { pixel: 0, t_ms: 10 },
                PatternSpike { pixel: 1, t_ms: 10 },
                PatternSpike { pixel: 2, t_ms: 10 },
                PatternSpike { pixel: 3, t_ms: 10 },
            ],
            34,
            34,
            105,
            None,
        );
        let quiet = Pattern::new(vec![], 34, 34, 105, None);
        let psth = compute_psth(&[busy, quiet]).unwrap();
        assert_eq!(psth.values[10], 2.0);
    }

    #[test]
    fn psth_conserves_event_total() {
        let a = Pattern::new(
            vec![
                PatternSpike { pixel: 0, t_ms: 1 },
                PatternSpike { pixel: 5, t_ms: 99 },
            ],
            34,
            34,
            105,
            None,
        );
        let b = Pattern::new(vec![PatternSpike { pixel: 9, t_ms: 45 }], 34, 34, 105, None);
        let psth = compute_psth(&[a, b]).unwrap();
        let total: f64 = psth.values.iter().sum::<f64>() * psth.n_patterns as f64;
        assert!((total - 3.0).abs() < 1e-12);
    }

    #[test]
    fn psth_rejects_empty_set() {
        assert!(matches!(
            compute_psth(&[]),
            Err(PreprocessError::EmptyPatternSet)
        ));
    }

    #[test]
    fn pgm_zero_frame() {
        let f = CollapsedFrame {
            intensity: vec![0.0; 34 * 34],
            width: 34,
            height: 34,
            label: None,
        };
        let pgm = export_frame_pgm(&f);
        let header = b"P5\n34 34\n255\n";
        assert_eq!(&pgm[..header.len()], header);
        assert_eq!(pgm.len(), header.len() + 1156);
        assert!(pgm[header.len()..].iter().all(|&b| b == 0));
    }

    #[test]
    fn pgm_rounds_half_up() {
        let f = CollapsedFrame {
            intensity: vec![1.0, 1.0 / 3.0],
            width: 2,
            height: 1,
            label: None,
        };
        let pgm = export_frame_pgm(&f);
        let body = &pgm[pgm.len() - 2..];
        assert_eq!(body, &[255, 85]);
    }

    #[test]
    fn psth_csv_header() {
        let psth = PsthTable {
            values: vec![0.5, 1.5],
            bin_ms: 1.0,
            n_patterns: 2,
        };
        let csv = psth_to_csv(&psth);
        assert!(csv.starts_with("t_ms,H\n0,0.5\n1,1.5\n"));
    }
}
