//! Deterministic synthetic event-camera digit dataset.
//!
//! Samples render a digit glyph onto the sensor grid and emit Poisson event
//! counts per pixel with a temporal envelope that is sparse at the window
//! edges and peaks mid-saccade, mimicking the sweep of a moving sensor.
//! Useful for desk-scale experiments and for the test suite when the real
//! recordings are not on disk.

use std::fs;
use std::io;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aer::{encode_events, Event, EventStream, Polarity};
use crate::preprocess::{slice_saccade, Pattern, SACCADE_MS, SACCADE_US};
use crate::rng::derive_seed;

/// 5x7 digit bitmaps, one row per byte, low 5 bits used.
const GLYPHS: [[u8; 7]; 10] = [
    [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110],
    [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110],
    [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111],
    [0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110],
    [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010],
    [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110],
    [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110],
    [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000],
    [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110],
    [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100],
];

#[derive(Debug, Clone, Copy)]
pub struct SynthOptions {
    pub width: u16,
    pub height: u16,
    /// Integer upscale of the 5x7 glyph.
    pub glyph_scale: usize,
    /// Maximum absolute per-sample translation in pixels.
    pub jitter_px: i32,
    /// Fraction of glyph pixels dropped per sample.
    pub dropout: f64,
    /// Expected event count of a full-intensity pixel per window.
    pub events_per_pixel_on: f64,
    pub events_per_pixel_off: f64,
    /// Expected uniform background events per polarity per window.
    pub noise_events: f64,
    /// Number of saccade windows carrying events (1..=3).
    pub saccades: u8,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            width: 34,
            height: 34,
            glyph_scale: 4,
            jitter_px: 3,
            dropout: 0.08,
            events_per_pixel_on: 5.0,
            events_per_pixel_off: 3.0,
            noise_events: 30.0,
            saccades: 1,
        }
    }
}

/// Knuth's Poisson sampler; fine for the small rates used here.
fn poisson(rng: &mut ChaCha8Rng, lambda: f64) -> usize {
    if lambda <= 0.0 {
        return 0;
    }
    let l = (-lambda).exp();
    let mut k = 0usize;
    let mut p = 1.0f64;
    loop {
        p *= rng.gen::<f64>();
        if p <= l {
            return k;
        }
        k += 1;
    }
}

/// Cumulative distribution of the within-window spike-time envelope,
/// proportional to sin^2 over the window so events cluster mid-saccade.
fn envelope_cdf() -> Vec<f64> {
    let n = SACCADE_MS as usize;
    let mut weights: Vec<f64> = (0..n)
        .map(|t| {
            let phase = std::f64::consts::PI * (t as f64 + 0.5) / n as f64;
            phase.sin().powi(2) + 1e-4
        })
        .collect();
    let total: f64 = weights.iter().sum();
    let mut acc = 0.0;
    for w in &mut weights {
        acc += *w / total;
        *w = acc;
    }
    weights
}

fn sample_t_ms(rng: &mut ChaCha8Rng, cdf: &[f64]) -> u32 {
    let u: f64 = rng.gen();
    cdf.partition_point(|&c| c < u) as u32
}

/// Per-sample glyph intensity map with jitter and dropout applied.
fn glyph_intensity(digit: u8, opts: &SynthOptions, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (w, h) = (opts.width as i32, opts.height as i32);
    let scale = opts.glyph_scale as i32;
    let (gw, gh) = (5 * scale, 7 * scale);
    let dx = (w - gw) / 2 + rng.gen_range(-opts.jitter_px..=opts.jitter_px);
    let dy = (h - gh) / 2 + rng.gen_range(-opts.jitter_px..=opts.jitter_px);
    let rows = &GLYPHS[digit as usize];
    let mut intensity = vec![0.0f64; (w * h) as usize];
    for gy in 0..7i32 {
        for gx in 0..5i32 {
            if rows[gy as usize] >> (4 - gx) & 1 == 0 {
                continue;
            }
            for sy in 0..scale {
                for sx in 0..scale {
                    let x = dx + gx * scale + sx;
                    let y = dy + gy * scale + sy;
                    if x < 0 || y < 0 || x >= w || y >= h {
                        continue;
                    }
                    if rng.gen::<f64>() < opts.dropout {
                        continue;
                    }
                    intensity[(y * w + x) as usize] = 0.75 + 0.25 * rng.gen::<f64>();
                }
            }
        }
    }
    intensity
}

/// Generate one sample's full event stream, deterministically from `seed`.
pub fn generate_stream(digit: u8, seed: u64, opts: &SynthOptions) -> EventStream {
    assert!(digit <= 9);
    assert!((1..=3).contains(&opts.saccades));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cdf = envelope_cdf();
    let width = opts.width;
    let mut events: Vec<Event> = Vec::new();
    for saccade in 0..u32::from(opts.saccades) {
        let start_us = saccade * SACCADE_US;
        let intensity = glyph_intensity(digit, opts, &mut rng);
        for (polarity, rate) in [
            (Polarity::On, opts.events_per_pixel_on),
            (Polarity::Off, opts.events_per_pixel_off),
        ] {
            for (pixel, &v) in intensity.iter().enumerate() {
                if v == 0.0 {
                    continue;
                }
                let n = poisson(&mut rng, v * rate);
                for _ in 0..n {
                    let t_ms = sample_t_ms(&mut rng, &cdf);
                    events.push(Event {
                        x: (pixel as u16 % width) as u8,
                        y: (pixel as u16 / width) as u8,
                        polarity,
                        t_us: start_us + t_ms * 1000 + rng.gen_range(0..1000),
                    });
                }
            }
            let noise = poisson(&mut rng, opts.noise_events);
            for _ in 0..noise {
                events.push(Event {
                    x: rng.gen_range(0..opts.width) as u8,
                    y: rng.gen_range(0..opts.height) as u8,
                    polarity,
                    t_us: start_us + rng.gen_range(0..SACCADE_US),
                });
            }
        }
    }
    events.sort_by_key(|e| e.t_us);
    EventStream {
        events,
        width: opts.width,
        height: opts.height,
    }
}

/// Labeled saccade-1 ON patterns; sample i is digit i mod 10.
pub fn generate_patterns(n: usize, master_seed: u64, opts: &SynthOptions) -> Vec<Pattern> {
    (0..n)
        .map(|i| {
            let digit = (i % 10) as u8;
            let stream = generate_stream(digit, derive_seed(master_seed, i as u64), opts);
            let mut pattern = slice_saccade(&stream, 1, Polarity::On);
            pattern.label = Some(digit);
            pattern
        })
        .collect()
}

const TEST_STREAM_OFFSET: u64 = 1 << 48;

/// Write a dataset directory in the Train/<digit>/*.bin layout.
pub fn write_dataset(
    root: &Path,
    n_train: usize,
    n_test: usize,
    master_seed: u64,
    opts: &SynthOptions,
) -> io::Result<()> {
    for (split, count, offset) in [
        ("Train", n_train, 0u64),
        ("Test", n_test, TEST_STREAM_OFFSET),
    ] {
        for digit in 0..10u8 {
            fs::create_dir_all(root.join(split).join(digit.to_string()))?;
        }
        for i in 0..count {
            let digit = (i % 10) as u8;
            let stream = generate_stream(digit, derive_seed(master_seed, offset + i as u64), opts);
            let bytes = encode_events(&stream)
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))?;
            let path = root
                .join(split)
                .join(digit.to_string())
                .join(format!("{:05}.bin", i / 10));
            fs::write(path, bytes)?;
        }
    }
    Ok(())
}
