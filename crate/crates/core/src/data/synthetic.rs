//! Synthetic two-class oscillatory EEG-like subjects with controllable
//! per-subject amplitude and offset shifts.
//!
//! Class 0 carries a rhythm on the first half of the channels, class 1 on the
//! second half. Every channel also gets band-limited background activity
//! (a few random sinusoids) and white noise. Shifted subjects have all their
//! channels multiplied by a gain and moved by per-channel offsets. The gain is
//! drawn per subject and then jittered per trial (log-uniformly), so a shifted
//! subject's amplitude is both unusual and unstable.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Activity, SubjectDataset, Trial};
use crate::error::{Error, Result};
use crate::rng::{mix_seed, stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_subjects: u32,
    /// Subjects with an id at or above this one receive the amplitude/offset shift.
    pub first_shifted: u32,
    pub channels: usize,
    pub time_points: usize,
    pub sampling_rate: f64,
    pub trials_per_class: usize,
    pub rhythm_hz: f64,
    pub rhythm_amplitude: f64,
    pub background_amplitude: f64,
    pub noise_std: f64,
    /// Gain applied to a shifted subject, drawn uniformly from this range.
    pub gain_range: (f64, f64),
    /// Half-width, in natural-log units, of the per-trial gain jitter of shifted subjects.
    pub trial_gain_spread: f64,
    /// Per-channel offsets of shifted subjects are uniform in `[-offset, offset]`.
    pub offset: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_subjects: 30,
            first_shifted: 21,
            channels: 8,
            time_points: 64,
            sampling_rate: 64.0,
            trials_per_class: 21,
            rhythm_hz: 10.0,
            rhythm_amplitude: 1.0,
            background_amplitude: 0.5,
            noise_std: 0.5,
            gain_range: (4.0, 8.0),
            trial_gain_spread: 2.0,
            offset: 2.0,
            seed: 7,
        }
    }
}

/// Subject-level distortion applied on top of the clean signals.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectShift {
    pub gain: f64,
    /// Log-uniform half-width of the per-trial gain jitter.
    pub trial_spread: f64,
    pub offsets: Vec<f64>,
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels < 2 || self.time_points == 0 || self.trials_per_class == 0 || self.n_subjects == 0 {
            return Err(Error::InvalidArgument("synthetic config needs ≥ 2 channels and non-empty sizes".into()));
        }
        if !(self.sampling_rate > 0.0 && self.rhythm_hz > 0.0 && self.rhythm_hz < self.sampling_rate / 2.0) {
            return Err(Error::InvalidArgument("rhythm must lie below the Nyquist frequency".into()));
        }
        if !(self.gain_range.0 > 0.0 && self.gain_range.0 <= self.gain_range.1)
            || self.offset < 0.0
            || self.trial_gain_spread < 0.0
        {
            return Err(Error::InvalidArgument("bad shift ranges".into()));
        }
        Ok(())
    }

    pub fn is_shifted(&self, subject: u32) -> bool {
        subject >= self.first_shifted
    }

    pub fn shift(&self, subject: u32) -> SubjectShift {
        if !self.is_shifted(subject) {
            return SubjectShift {
                gain: 1.0,
                trial_spread: 0.0,
                offsets: vec![0.0; self.channels],
            };
        }
        let mut rng = stream(mix_seed(self.seed, &[u64::from(subject), 1]));
        let (lo, hi) = self.gain_range;
        SubjectShift {
            gain: if lo == hi { lo } else { rng.random_range(lo..hi) },
            trial_spread: self.trial_gain_spread,
            offsets: (0..self.channels)
                .map(|_| if self.offset == 0.0 { 0.0 } else { rng.random_range(-self.offset..self.offset) })
                .collect(),
        }
    }

    fn trial<R: Rng>(&self, label: usize, shift: &SubjectShift, rng: &mut R) -> Vec<f64> {
        let (c, t) = (self.channels, self.time_points);
        let noise = Normal::new(0.0, self.noise_std).expect("finite std");
        let half = c / 2;
        let active = if label == 0 { 0..half } else { half..c };
        let phase = rng.random_range(0.0..2.0 * PI);
        let spread = shift.trial_spread;
        let gain = shift.gain * if spread > 0.0 { rng.random_range(-spread..spread).exp() } else { 1.0 };
        let nyq = self.sampling_rate / 2.0;
        let mut out = vec![0.0; c * t];
        for ch in 0..c {
            let row = &mut out[ch * t..(ch + 1) * t];
            let bg: Vec<(f64, f64)> = (0..3)
                .map(|_| (rng.random_range(1.0..0.8 * nyq), rng.random_range(0.0..2.0 * PI)))
                .collect();
            for (i, v) in row.iter_mut().enumerate() {
                let time = i as f64 / self.sampling_rate;
                let mut x = noise.sample(rng);
                for &(f, p) in &bg {
                    x += self.background_amplitude * (2.0 * PI * f * time + p).sin();
                }
                if active.contains(&ch) {
                    x += self.rhythm_amplitude * (2.0 * PI * self.rhythm_hz * time + phase).sin();
                }
                *v = gain * x + shift.offsets[ch];
            }
        }
        out
    }

    /// Generates one subject; identical for a given (seed, subject) pair.
    pub fn subject(&self, subject: u32) -> Result<SubjectDataset> {
        self.validate()?;
        let activity = Activity::new(1)?;
        let shift = self.shift(subject);
        let mut rng = stream(mix_seed(self.seed, &[u64::from(subject), 0]));
        let mut ds = SubjectDataset::new(subject, activity);
        for label in 0..2 {
            for _ in 0..self.trials_per_class {
                let data = self.trial(label, &shift, &mut rng);
                ds.push(Trial {
                    data: Tensor::new(vec![self.channels, self.time_points], data)?,
                    label,
                    subject,
                    activity,
                })?;
            }
        }
        Ok(ds)
    }

    /// Subjects `1..=n_subjects`.
    pub fn generate(&self) -> Result<Vec<SubjectDataset>> {
        (1..=self.n_subjects).map(|s| self.subject(s)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_and_balance() {
        let cfg = SyntheticConfig {
            n_subjects: 3,
            ..SyntheticConfig::default()
        };
        let all = cfg.generate().unwrap();
        assert_eq!(all.len(), 3);
        assert_eq!(all[0].class_counts(), [21, 21]);
        assert_eq!(all[2].classes[1][0].data.shape(), &[8, 64]);
    }

    #[test]
    fn deterministic_per_subject() {
        let cfg = SyntheticConfig::default();
        assert_eq!(cfg.subject(4).unwrap(), cfg.subject(4).unwrap());
        assert_ne!(cfg.subject(4).unwrap().classes[0][0], cfg.subject(5).unwrap().classes[0][0]);
    }

    #[test]
    fn shift_applies_only_to_late_subjects() {
        let cfg = SyntheticConfig::default();
        assert_eq!(cfg.shift(20).gain, 1.0);
        let s = cfg.shift(25);
        assert!((4.0..8.0).contains(&s.gain));
        assert!(s.offsets.iter().all(|o| o.abs() <= 2.0));

        // the shifted subject has a visibly larger spread
        let std = |ds: &SubjectDataset| {
            let v: Vec<f64> = ds.trials().flat_map(|t| t.data.data().to_vec()).collect();
            let m = v.iter().sum::<f64>() / v.len() as f64;
            (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
        };
        assert!(std(&cfg.subject(25).unwrap()) > 3.0 * std(&cfg.subject(2).unwrap()));
    }
}
