//! Raw EDF tree to epoched trial store.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::data::archive::{FilterProvenance, TrialStore};
use crate::data::edf::{ids_from_file_name, parse_edf};
use crate::data::events::{epoch_extract, extract_events, CHANNELS, SAMPLING_RATE, TRIAL_LEN};
use crate::data::fetch::relative_path;
use crate::data::fir::{filter_apply, FirFilter};
use crate::data::{Activity, SubjectDataset, Trial};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PreprocessReport {
    pub recordings: usize,
    /// Recordings skipped for not matching the 64-channel / 160 Hz layout, with the reason.
    pub rejected: Vec<(PathBuf, String)>,
    /// Events whose window ran past the recording edges.
    pub dropped_epochs: usize,
    pub missing_files: Vec<PathBuf>,
}

/// Task-run EDF files present under `raw_dir` for `subjects`, in (subject, run) order.
pub fn task_files(raw_dir: &Path, subjects: &[u32]) -> (Vec<(u32, u32, PathBuf)>, Vec<PathBuf>) {
    let mut found = Vec::new();
    let mut missing = Vec::new();
    for &s in subjects {
        for run in 3..=14 {
            let p = raw_dir.join(relative_path(s, run));
            if p.is_file() {
                found.push((s, run, p));
            } else {
                missing.push(p);
            }
        }
    }
    (found, missing)
}

enum Outcome {
    Trials(Vec<Trial>, usize),
    Rejected(String),
}

fn process_one(path: &Path, run: u32, filter: &FirFilter) -> Result<Outcome> {
    let rec = parse_edf(path)?;
    if ids_from_file_name(path).map(|(_, r)| r) != Some(run) {
        return Err(Error::Edf(format!("{} does not follow the SxxxRyy.edf naming", path.display())));
    }
    if let Err(e) = rec.check_layout(CHANNELS, SAMPLING_RATE) {
        return Ok(Outcome::Rejected(e.to_string()));
    }
    let activity = Activity::of_run(run).expect("task runs only");
    let events = extract_events(&rec, activity)?;
    let filtered = filter_apply(&rec, filter)?;
    let out = epoch_extract(&filtered, &events, activity)?;
    Ok(Outcome::Trials(out.trials, out.dropped))
}

pub fn preprocess_dir(raw_dir: &Path, subjects: &[u32], filter: &FirFilter) -> Result<(TrialStore, PreprocessReport)> {
    let (files, missing) = task_files(raw_dir, subjects);
    if files.is_empty() {
        return Err(Error::InsufficientData(format!("no task-run EDF files under {}", raw_dir.display())));
    }
    let outcomes: Vec<Result<Outcome>> = files
        .par_iter()
        .map(|(_, run, path)| process_one(path, *run, filter))
        .collect();

    let mut report = PreprocessReport {
        missing_files: missing,
        ..PreprocessReport::default()
    };
    let mut sets: BTreeMap<(u32, Activity), SubjectDataset> = BTreeMap::new();
    // A rejected recording only removes its own run; the subject keeps the others.
    for ((subject, _, path), outcome) in files.iter().zip(outcomes) {
        match outcome? {
            Outcome::Rejected(reason) => {
                log::warn!("skipping {}: {reason}", path.display());
                report.rejected.push((path.clone(), reason));
            }
            Outcome::Trials(trials, dropped) => {
                report.recordings += 1;
                report.dropped_epochs += dropped;
                for t in trials {
                    sets.entry((*subject, t.activity))
                        .or_insert_with(|| SubjectDataset::new(*subject, t.activity))
                        .push(t)?;
                }
            }
        }
    }
    let mut store = TrialStore::new(SAMPLING_RATE, [CHANNELS, TRIAL_LEN], Some(FilterProvenance::from(filter)));
    for ds in sets.into_values() {
        store.insert(ds)?;
    }
    Ok((store, report))
}
