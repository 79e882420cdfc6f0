//! Windowed-sinc linear-phase FIR design and group-delay-compensated filtering.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::data::edf::RawRecording;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    BandStop,
    BandPass,
}

impl std::fmt::Display for FilterMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FilterMode::BandStop => "band_stop",
            FilterMode::BandPass => "band_pass",
        })
    }
}

impl std::str::FromStr for FilterMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "band_stop" => Ok(FilterMode::BandStop),
            "band_pass" => Ok(FilterMode::BandPass),
            _ => Err(Error::InvalidArgument(format!("unknown filter mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirFilter {
    pub taps: Vec<f64>,
    pub mode: FilterMode,
    pub low_hz: f64,
    pub high_hz: f64,
    pub transition_hz: f64,
    pub sampling_rate: f64,
    pub window: String,
}

/// Hamming-window length rule: `ceil(3.3 * fs / transition)`, rounded up to odd.
pub fn hamming_tap_count(fs: f64, transition_hz: f64) -> usize {
    let n = (3.3 * fs / transition_hz).ceil() as usize;
    n | 1
}

fn hamming(n: usize) -> Vec<f64> {
    let m = (n - 1) as f64;
    (0..n).map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / m).cos()).collect()
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Designs a band-pass or band-stop filter with cutoffs at `low_hz` and `high_hz`.
///
/// The band-pass prototype is scaled to unit gain at the band centre; the
/// band-stop filter is its spectral complement (a centred unit impulse minus
/// the band-pass taps), so the two responses sum to exactly one.
pub fn design_fir(mode: FilterMode, low_hz: f64, high_hz: f64, fs: f64, transition_hz: f64) -> Result<FirFilter> {
    let nyquist = fs / 2.0;
    if !(low_hz > 0.0 && low_hz < high_hz && high_hz < nyquist) {
        return Err(Error::InvalidArgument(format!(
            "band edges must satisfy 0 < {low_hz} < {high_hz} < {nyquist}"
        )));
    }
    if transition_hz.is_nan() || transition_hz <= 0.0 {
        return Err(Error::InvalidArgument(format!("transition width {transition_hz} must be positive")));
    }
    let n = hamming_tap_count(fs, transition_hz);
    let center = (n - 1) / 2;
    let (f1, f2) = (low_hz / fs, high_hz / fs);
    let window = hamming(n);
    let mut taps: Vec<f64> = (0..n)
        .map(|i| {
            let m = i as f64 - center as f64;
            (2.0 * f2 * sinc(2.0 * f2 * m) - 2.0 * f1 * sinc(2.0 * f1 * m)) * window[i]
        })
        .collect();
    let gain = magnitude(&taps, (low_hz + high_hz) / 2.0, fs);
    taps.iter_mut().for_each(|t| *t /= gain);
    if mode == FilterMode::BandStop {
        taps.iter_mut().for_each(|t| *t = -*t);
        taps[center] += 1.0;
    }
    Ok(FirFilter {
        taps,
        mode,
        low_hz,
        high_hz,
        transition_hz,
        sampling_rate: fs,
        window: "hamming".into(),
    })
}

/// Complex frequency response of `taps` at `freq_hz`, as `(re, im)`.
pub fn response(taps: &[f64], freq_hz: f64, fs: f64) -> (f64, f64) {
    let w = 2.0 * PI * freq_hz / fs;
    taps.iter().enumerate().fold((0.0, 0.0), |(re, im), (k, &h)| {
        let a = w * k as f64;
        (re + h * a.cos(), im - h * a.sin())
    })
}

pub fn magnitude(taps: &[f64], freq_hz: f64, fs: f64) -> f64 {
    let (re, im) = response(taps, freq_hz, fs);
    re.hypot(im)
}

pub fn magnitude_db(taps: &[f64], freq_hz: f64, fs: f64) -> f64 {
    20.0 * magnitude(taps, freq_hz, fs).log10()
}

impl FirFilter {
    pub fn group_delay(&self) -> usize {
        (self.taps.len() - 1) / 2
    }

    pub fn magnitude_db(&self, freq_hz: f64) -> f64 {
        magnitude_db(&self.taps, freq_hz, self.sampling_rate)
    }

    /// Convolves one channel, zero-padding both edges and removing the group
    /// delay so the output stays time-aligned with the input.
    pub fn apply_channel(&self, signal: &[f64]) -> Vec<f64> {
        let delay = self.group_delay() as isize;
        let len = signal.len() as isize;
        (0..len)
            .map(|n| {
                // y[n] = sum_k h[k] x[n + delay - k]
                let mut acc = 0.0;
                for (k, &h) in self.taps.iter().enumerate() {
                    let idx = n + delay - k as isize;
                    if (0..len).contains(&idx) {
                        acc += h * signal[idx as usize];
                    }
                }
                acc
            })
            .collect()
    }
}

/// Filters every channel of `recording`.
pub fn filter_apply(recording: &RawRecording, filter: &FirFilter) -> Result<RawRecording> {
    if (recording.sampling_rate - filter.sampling_rate).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "filter designed for {} Hz applied to a {} Hz recording",
            filter.sampling_rate, recording.sampling_rate
        )));
    }
    let mut out = recording.clone();
    out.signals = recording.signals.iter().map(|s| filter.apply_channel(s)).collect();
    Ok(out)
}
