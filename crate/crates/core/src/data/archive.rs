//! On-disk store of epoched trials.
//!
//! A directory with `manifest.json` plus one `S{subject:03}_A{activity}.bin`
//! per (subject, activity). Each binary file holds the trials as f64 LE in
//! (trial, channel, time) order followed by one label byte per trial.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::fir::{FilterMode, FirFilter};
use crate::data::{Activity, SubjectDataset, Trial};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ARCHIVE_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterProvenance {
    pub mode: FilterMode,
    pub low_hz: f64,
    pub high_hz: f64,
    pub transition_hz: f64,
    pub taps: usize,
    pub window: String,
}

impl From<&FirFilter> for FilterProvenance {
    fn from(f: &FirFilter) -> Self {
        FilterProvenance {
            mode: f.mode,
            low_hz: f.low_hz,
            high_hz: f.high_hz,
            transition_hz: f.transition_hz,
            taps: f.taps.len(),
            window: f.window.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveEntry {
    pub subject: u32,
    pub activity: Activity,
    pub file: String,
    pub n_trials: usize,
    pub class_counts: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub sampling_rate: f64,
    /// `[channels, time_points]` of every trial.
    pub shape: [usize; 2],
    pub label_map: BTreeMap<String, String>,
    pub filter: Option<FilterProvenance>,
    pub entries: Vec<ArchiveEntry>,
}

/// Trial sets keyed by (subject, activity).
#[derive(Debug, Clone, PartialEq)]
pub struct TrialStore {
    pub sampling_rate: f64,
    pub shape: [usize; 2],
    pub filter: Option<FilterProvenance>,
    pub sets: BTreeMap<(u32, Activity), SubjectDataset>,
}

impl TrialStore {
    pub fn new(sampling_rate: f64, shape: [usize; 2], filter: Option<FilterProvenance>) -> Self {
        TrialStore {
            sampling_rate,
            shape,
            filter,
            sets: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, dataset: SubjectDataset) -> Result<()> {
        if let Some(t) = dataset.trials().find(|t| t.data.shape() != self.shape) {
            return Err(Error::Archive(format!(
                "subject {} trial shape {:?}, store holds {:?}",
                dataset.subject,
                t.data.shape(),
                self.shape
            )));
        }
        self.sets.insert((dataset.subject, dataset.activity), dataset);
        Ok(())
    }

    pub fn get(&self, subject: u32, activity: Activity) -> Option<&SubjectDataset> {
        self.sets.get(&(subject, activity))
    }

    /// Subjects with data for `activity`, ascending.
    pub fn subjects(&self, activity: Activity) -> Vec<u32> {
        self.sets.keys().filter(|(_, a)| *a == activity).map(|&(s, _)| s).collect()
    }

    pub fn datasets(&self, activity: Activity, subjects: &[u32]) -> Vec<&SubjectDataset> {
        subjects.iter().filter_map(|&s| self.get(s, activity)).collect()
    }
}

pub fn file_name(subject: u32, activity: Activity) -> String {
    format!("S{subject:03}_A{activity}.bin")
}

fn label_map() -> BTreeMap<String, String> {
    BTreeMap::from([("0".to_string(), "T1".to_string()), ("1".to_string(), "T2".to_string())])
}

pub fn write_archive(dir: &Path, store: &TrialStore) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(store.sets.len());
    for ds in store.sets.values() {
        let file = file_name(ds.subject, ds.activity);
        let per_trial = store.shape[0] * store.shape[1];
        let mut bytes = Vec::with_capacity(ds.len() * (per_trial * 8 + 1));
        for t in ds.trials() {
            for v in t.data.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        bytes.extend(ds.trials().map(|t| t.label as u8));
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        entries.push(ArchiveEntry {
            subject: ds.subject,
            activity: ds.activity,
            file,
            n_trials: ds.len(),
            class_counts: ds.class_counts(),
        });
    }
    let manifest = Manifest {
        format_version: ARCHIVE_VERSION,
        sampling_rate: store.sampling_rate,
        shape: store.shape,
        label_map: label_map(),
        filter: store.filter.clone(),
        entries,
    };
    let path = dir.join(MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format_version != ARCHIVE_VERSION {
        return Err(Error::Archive(format!(
            "format version {} is not supported (expected {ARCHIVE_VERSION})",
            manifest.format_version
        )));
    }
    Ok(manifest)
}

pub fn read_archive(dir: &Path) -> Result<TrialStore> {
    let manifest = read_manifest(dir)?;
    let [channels, time] = manifest.shape;
    let per_trial = channels * time;
    let mut store = TrialStore::new(manifest.sampling_rate, manifest.shape, manifest.filter.clone());

    // Every payload on disk must be listed, and every listed one must exist.
    let listed: Vec<&str> = manifest.entries.iter().map(|e| e.file.as_str()).collect();
    for item in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let name = item.map_err(|e| Error::io(dir, e))?.file_name();
        let name = name.to_string_lossy();
        if name.ends_with(".bin") && !listed.contains(&name.as_ref()) {
            return Err(Error::Archive(format!("`{name}` is not listed in the manifest")));
        }
    }

    for e in &manifest.entries {
        if e.file != file_name(e.subject, e.activity) {
            return Err(Error::Archive(format!("entry file `{}` does not match its ids", e.file)));
        }
        let path = dir.join(&e.file);
        let bytes = fs::read(&path).map_err(|err| Error::io(&path, err))?;
        let expected = e.n_trials * (per_trial * 8 + 1);
        if bytes.len() != expected {
            return Err(Error::Archive(format!(
                "`{}` holds {} bytes, manifest implies {expected}",
                e.file,
                bytes.len()
            )));
        }
        let (values, labels) = bytes.split_at(e.n_trials * per_trial * 8);
        let mut ds = SubjectDataset::new(e.subject, e.activity);
        for (i, chunk) in values.chunks_exact(per_trial * 8).enumerate() {
            let data = chunk
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let label = labels[i] as usize;
            if label > 1 {
                return Err(Error::Archive(format!("`{}` trial {i} has label {label}", e.file)));
            }
            ds.push(Trial {
                data: Tensor::new(vec![channels, time], data)?,
                label,
                subject: e.subject,
                activity: e.activity,
            })?;
        }
        if ds.class_counts() != e.class_counts {
            return Err(Error::Archive(format!(
                "`{}` class counts {:?}, manifest says {:?}",
                e.file,
                ds.class_counts(),
                e.class_counts
            )));
        }
        store.insert(ds)?;
    }
    Ok(store)
}
