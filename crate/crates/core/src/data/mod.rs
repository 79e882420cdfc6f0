//! Physionet motor movement/imagery ingestion, trial sets, and episode sampling.

pub mod archive;
pub mod edf;
pub mod events;
pub mod fetch;
pub mod fir;
pub mod preprocess;
pub mod synthetic;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LabeledBatch;
use crate::tensor::Tensor;
pub use events::Activity;

pub const N_SUBJECTS: u32 = 109;
pub const K_SUPPORT: usize = 10;
pub const K_QUERY: usize = 11;

/// One labelled epoch, `data` is `[channels, time_points]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub data: Tensor,
    pub label: usize,
    pub subject: u32,
    pub activity: Activity,
}

/// All trials of one subject for one activity, grouped by class.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectDataset {
    pub subject: u32,
    pub activity: Activity,
    pub classes: [Vec<Trial>; 2],
}

impl SubjectDataset {
    pub fn new(subject: u32, activity: Activity) -> Self {
        SubjectDataset {
            subject,
            activity,
            classes: [Vec::new(), Vec::new()],
        }
    }

    pub fn from_trials(subject: u32, activity: Activity, trials: Vec<Trial>) -> Result<Self> {
        let mut ds = SubjectDataset::new(subject, activity);
        for t in trials {
            ds.push(t)?;
        }
        Ok(ds)
    }

    pub fn push(&mut self, trial: Trial) -> Result<()> {
        if trial.subject != self.subject || trial.activity != self.activity {
            return Err(Error::InvalidArgument(format!(
                "trial of subject {} / activity {} added to subject {} / activity {}",
                trial.subject, trial.activity, self.subject, self.activity
            )));
        }
        if trial.label > 1 {
            return Err(Error::InvalidArgument(format!("label {} is not binary", trial.label)));
        }
        self.classes[trial.label].push(trial);
        Ok(())
    }

    pub fn class_counts(&self) -> [usize; 2] {
        [self.classes[0].len(), self.classes[1].len()]
    }

    pub fn min_class_count(&self) -> usize {
        self.classes[0].len().min(self.classes[1].len())
    }

    pub fn trials(&self) -> impl Iterator<Item = &Trial> {
        self.classes.iter().flatten()
    }

    pub fn len(&self) -> usize {
        self.classes[0].len() + self.classes[1].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stacks the chosen trials of each class (class 0 first) into one batch.
    pub fn batch(&self, picks: &[Vec<usize>; 2]) -> Result<LabeledBatch> {
        let trials: Vec<&Trial> = (0..2)
            .flat_map(|c| picks[c].iter().map(move |&i| &self.classes[c][i]))
            .collect();
        batch_of(&trials)
    }

    /// Every trial, class 0 first.
    pub fn full_batch(&self) -> Result<LabeledBatch> {
        batch_of(&self.trials().collect::<Vec<_>>())
    }
}

pub fn batch_of(trials: &[&Trial]) -> Result<LabeledBatch> {
    let data: Vec<&Tensor> = trials.iter().map(|t| &t.data).collect();
    let labels = trials.iter().map(|t| t.label).collect();
    LabeledBatch::new(Tensor::stack(&data)?, labels)
}

/// Support set `D` and query set `D'` drawn from one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub subject: u32,
    /// Indices into the subject's per-class trial lists.
    pub support_picks: [Vec<usize>; 2],
    pub query_picks: [Vec<usize>; 2],
    pub support: LabeledBatch,
    pub query: LabeledBatch,
}

/// Draws `k_support` + `k_query` distinct trials per class, uniformly without replacement.
pub fn sample_episode<R: Rng + ?Sized>(
    dataset: &SubjectDataset,
    k_support: usize,
    k_query: usize,
    rng: &mut R,
) -> Result<Episode> {
    let need = k_support + k_query;
    if k_support == 0 || k_query == 0 {
        return Err(Error::InvalidArgument("support and query sizes must be positive".into()));
    }
    let counts = dataset.class_counts();
    if counts.iter().any(|&c| c < need) {
        return Err(Error::InsufficientData(format!(
            "subject {} activity {} has {counts:?} trials per class, need {need}",
            dataset.subject, dataset.activity
        )));
    }
    let mut support_picks = [Vec::new(), Vec::new()];
    let mut query_picks = [Vec::new(), Vec::new()];
    for c in 0..2 {
        let drawn = sample(rng, counts[c], need).into_vec();
        support_picks[c] = drawn[..k_support].to_vec();
        query_picks[c] = drawn[k_support..].to_vec();
    }
    Ok(Episode {
        subject: dataset.subject,
        support: dataset.batch(&support_picks)?,
        query: dataset.batch(&query_picks)?,
        support_picks,
        query_picks,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// Subjects 1-87 train, 88-98 validate, 99-109 test.
pub fn split_of(subject: u32) -> Result<Split> {
    match subject {
        1..=87 => Ok(Split::Train),
        88..=98 => Ok(Split::Validation),
        99..=N_SUBJECTS => Ok(Split::Test),
        _ => Err(Error::InvalidArgument(format!("subject {subject} not in 1..={N_SUBJECTS}"))),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<u32>,
    pub validation: Vec<u32>,
    pub test: Vec<u32>,
    /// Ids of 1..=109 that were not among the available subjects.
    pub missing: Vec<u32>,
}

pub fn build_splits(available: &[u32]) -> Result<Splits> {
    let mut ids = available.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let mut s = Splits::default();
    for &id in &ids {
        match split_of(id)? {
            Split::Train => s.train.push(id),
            Split::Validation => s.validation.push(id),
            Split::Test => s.test.push(id),
        }
    }
    s.missing = (1..=N_SUBJECTS).filter(|id| ids.binary_search(id).is_err()).collect();
    Ok(s)
}

/// Parses `A-B` or a single id into an inclusive id list.
pub fn parse_subject_range(s: &str) -> Result<Vec<u32>> {
    let bad = || Error::InvalidArgument(format!("bad subject range `{s}`"));
    let (a, b) = match s.split_once('-') {
        Some((a, b)) => (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?),
        None => {
            let v = s.trim().parse().map_err(|_| bad())?;
            (v, v)
        }
    };
    if a == 0 || a > b || b > N_SUBJECTS {
        return Err(bad());
    }
    Ok((a..=b).collect())
}
