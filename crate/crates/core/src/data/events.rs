//! Activity/run bookkeeping, event extraction and epoching.

use serde::{Deserialize, Serialize};

use crate::data::edf::RawRecording;
use crate::data::Trial;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SAMPLING_RATE: f64 = 160.0;
pub const CHANNELS: usize = 64;
/// Samples kept on each side of the stimulus onset (one second at 160 Hz).
pub const HALF_WINDOW: usize = 160;
pub const TRIAL_LEN: usize = 2 * HALF_WINDOW + 1;

/// One of the four motor tasks, numbered 1 to 4.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Activity(u8);

impl Activity {
    pub const ALL: [Activity; 4] = [Activity(1), Activity(2), Activity(3), Activity(4)];

    pub fn new(id: u8) -> Result<Self> {
        if (1..=4).contains(&id) {
            Ok(Activity(id))
        } else {
            Err(Error::InvalidArgument(format!("activity {id} not in 1..=4")))
        }
    }

    pub fn id(self) -> u8 {
        self.0
    }

    /// Recording runs of this activity: runs 3,7,11 for activity 1, 4,8,12 for 2, and so on.
    pub fn runs(self) -> [u32; 3] {
        let first = u32::from(self.0) + 2;
        [first, first + 4, first + 8]
    }

    /// The activity a run belongs to; runs 1 and 2 are eyes-open/closed baselines.
    pub fn of_run(run: u32) -> Option<Activity> {
        (3..=14).contains(&run).then(|| Activity(((run - 3) % 4 + 1) as u8))
    }
}

impl TryFrom<u8> for Activity {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        Activity::new(v)
    }
}

impl From<Activity> for u8 {
    fn from(a: Activity) -> u8 {
        a.0
    }
}

impl std::fmt::Display for Activity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub onset_sample: usize,
    pub label: usize,
}

/// Task events of `recording`: `T1` becomes class 0, `T2` class 1, `T0` (rest) is dropped.
pub fn extract_events(recording: &RawRecording, activity: Activity) -> Result<Vec<Event>> {
    if Activity::of_run(recording.run) != Some(activity) {
        return Err(Error::InvalidArgument(format!(
            "run {} does not belong to activity {activity}",
            recording.run
        )));
    }
    let mut events = Vec::new();
    for a in &recording.annotations {
        let label = match a.text.as_str() {
            "T0" => continue,
            "T1" => 0,
            "T2" => 1,
            other => return Err(Error::InvalidArgument(format!("unknown annotation code `{other}`"))),
        };
        let sample = (a.onset * recording.sampling_rate).round();
        if sample < 0.0 {
            return Err(Error::InvalidArgument(format!("negative onset {}", a.onset)));
        }
        events.push(Event {
            onset_sample: sample as usize,
            label,
        });
    }
    Ok(events)
}

#[derive(Debug, Clone, Default)]
pub struct EpochOutcome {
    pub trials: Vec<Trial>,
    /// Events whose window ran past either end of the recording.
    pub dropped: usize,
}

/// Cuts `[s - 160, s + 160]` (inclusive, 321 samples) around every event onset `s`.
pub fn epoch_extract(recording: &RawRecording, events: &[Event], activity: Activity) -> Result<EpochOutcome> {
    let n = recording.n_samples();
    let channels = recording.signals.len();
    let mut out = EpochOutcome::default();
    for e in events {
        let s = e.onset_sample;
        if s < HALF_WINDOW || s + HALF_WINDOW >= n {
            out.dropped += 1;
            continue;
        }
        let start = s - HALF_WINDOW;
        let mut data = Vec::with_capacity(channels * TRIAL_LEN);
        for ch in &recording.signals {
            data.extend_from_slice(&ch[start..start + TRIAL_LEN]);
        }
        out.trials.push(Trial {
            data: Tensor::new(vec![channels, TRIAL_LEN], data)?,
            label: e.label,
            subject: recording.subject,
            activity,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::edf::Annotation;

    fn rec(run: u32, codes: &[(f64, &str)], samples: usize) -> RawRecording {
        RawRecording {
            subject: 5,
            run,
            sampling_rate: 160.0,
            channel_labels: vec!["a".into(), "b".into()],
            signals: vec![(0..samples).map(|i| i as f64).collect(), vec![1.0; samples]],
            annotations: codes
                .iter()
                .map(|&(onset, text)| Annotation {
                    onset,
                    duration: 4.1,
                    text: text.into(),
                })
                .collect(),
        }
    }

    #[test]
    fn run_mapping() {
        assert_eq!(Activity::new(1).unwrap().runs(), [3, 7, 11]);
        assert_eq!(Activity::new(4).unwrap().runs(), [6, 10, 14]);
        assert_eq!(Activity::of_run(12), Some(Activity::new(2).unwrap()));
        assert_eq!(Activity::of_run(13), Some(Activity::new(3).unwrap()));
        assert_eq!(Activity::of_run(1), None);
        assert!(Activity::new(5).is_err());
    }

    #[test]
    fn events_from_annotations() {
        let r = rec(4, &[(0.0, "T0"), (4.1, "T1"), (8.2, "T0"), (12.3, "T2")], 2500);
        let ev = extract_events(&r, Activity::new(2).unwrap()).unwrap();
        assert_eq!(
            ev,
            vec![
                Event { onset_sample: 656, label: 0 },
                Event { onset_sample: 1968, label: 1 }
            ]
        );
    }

    #[test]
    fn rest_only_and_bad_inputs() {
        let r = rec(3, &[(0.0, "T0"), (4.0, "T0")], 100);
        assert!(extract_events(&r, Activity::new(1).unwrap()).unwrap().is_empty());
        assert!(extract_events(&r, Activity::new(2).unwrap()).is_err());
        let r = rec(3, &[(1.0, "T9")], 100);
        assert!(extract_events(&r, Activity::new(1).unwrap()).is_err());
    }

    #[test]
    fn epoch_windows() {
        let a = Activity::new(1).unwrap();
        let r = rec(3, &[], 400);
        let out = epoch_extract(&r, &[Event { onset_sample: 160, label: 1 }], a).unwrap();
        assert_eq!(out.trials.len(), 1);
        let t = &out.trials[0];
        assert_eq!(t.data.shape(), &[2, 321]);
        assert_eq!(t.data.data()[0], 0.0);
        assert_eq!(t.data.data()[320], 320.0);
        assert_eq!((t.label, t.subject, t.activity), (1, 5, a));

        let out = epoch_extract(&r, &[Event { onset_sample: 100, label: 0 }], a).unwrap();
        assert_eq!((out.trials.len(), out.dropped), (0, 1));
        // the window may not touch the last sample + 1
        let out = epoch_extract(&r, &[Event { onset_sample: 240, label: 0 }], a).unwrap();
        assert_eq!(out.dropped, 1);

        let r = rec(3, &[], 1000);
        let ev = [Event { onset_sample: 200, label: 0 }, Event { onset_sample: 600, label: 1 }];
        let out = epoch_extract(&r, &ev, a).unwrap();
        assert_eq!(out.trials.iter().map(|t| t.label).collect::<Vec<_>>(), vec![0, 1]);
    }
}
