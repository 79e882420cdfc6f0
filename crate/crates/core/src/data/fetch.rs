//! Downloads the raw EDF files of the motor movement/imagery dataset.

use std::fs;
use std::path::{Path, PathBuf};

use crate::data::edf::parse_header;
use crate::error::{Error, Result};

pub const BASE_URL: &str = "https://physionet.org/files/eegmmidb/1.0.0";
pub const RUNS: std::ops::RangeInclusive<u32> = 1..=14;
const ATTEMPTS: usize = 3;

/// Something that can return the bytes behind a URL.
pub trait Source: Sync {
    fn get(&self, url: &str) -> Result<Vec<u8>>;
}

pub struct HttpSource {
    agent: ureq::Agent,
}

impl Default for HttpSource {
    fn default() -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(std::time::Duration::from_secs(120)))
            .build();
        HttpSource { agent: config.into() }
    }
}

impl Source for HttpSource {
    fn get(&self, url: &str) -> Result<Vec<u8>> {
        let fail = |reason: String| Error::Download { url: url.to_string(), reason };
        let mut resp = self.agent.get(url).call().map_err(|e| fail(e.to_string()))?;
        resp.body_mut()
            .with_config()
            .limit(64 * 1024 * 1024)
            .read_to_vec()
            .map_err(|e| fail(e.to_string()))
    }
}

pub fn relative_path(subject: u32, run: u32) -> PathBuf {
    PathBuf::from(format!("S{subject:03}")).join(format!("S{subject:03}R{run:02}.edf"))
}

pub fn url_for(base: &str, subject: u32, run: u32) -> String {
    format!("{base}/S{subject:03}/S{subject:03}R{run:02}.edf")
}

/// True when `bytes` is an EDF whose length matches what its header declares.
pub fn is_complete(bytes: &[u8]) -> bool {
    parse_header(bytes).is_ok_and(|h| h.expected_file_len() == bytes.len())
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FetchReport {
    pub downloaded: usize,
    pub skipped: usize,
    /// Files replaced because the copy on disk was truncated or corrupt.
    pub repaired: usize,
}

/// Fetches every run of `subjects` into `dest/Sxxx/SxxxRyy.edf`, skipping complete files.
pub fn fetch_dataset(dest: &Path, subjects: &[u32], source: &dyn Source, base_url: &str) -> Result<FetchReport> {
    let mut report = FetchReport::default();
    for &subject in subjects {
        for run in RUNS {
            let path = dest.join(relative_path(subject, run));
            let existing = path.exists();
            if existing && fs::read(&path).is_ok_and(|b| is_complete(&b)) {
                report.skipped += 1;
                continue;
            }
            let url = url_for(base_url, subject, run);
            let bytes = download(source, &url)?;
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            // Write then rename so an interrupted run never leaves a partial file in place.
            let tmp = path.with_extension("edf.part");
            fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
            fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
            if existing {
                log::info!("repaired {}", path.display());
                report.repaired += 1;
            }
            report.downloaded += 1;
        }
    }
    Ok(report)
}

fn download(source: &dyn Source, url: &str) -> Result<Vec<u8>> {
    let mut last = None;
    for attempt in 1..=ATTEMPTS {
        match source.get(url) {
            Ok(bytes) if is_complete(&bytes) => return Ok(bytes),
            Ok(bytes) => {
                return Err(Error::Download {
                    url: url.to_string(),
                    reason: format!("{} bytes do not match the length declared in the EDF header", bytes.len()),
                })
            }
            Err(e) => {
                log::warn!("attempt {attempt}/{ATTEMPTS} for {url} failed: {e}");
                last = Some(e);
            }
        }
    }
    Err(last.expect("at least one attempt"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::edf::fixture::{build, tal, FixtureSignal};
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Mock {
        calls: AtomicUsize,
        fail_first: usize,
        bytes: Vec<u8>,
    }

    impl Source for Mock {
        fn get(&self, url: &str) -> Result<Vec<u8>> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.fail_first {
                return Err(Error::Download { url: url.into(), reason: "offline".into() });
            }
            Ok(self.bytes.clone())
        }
    }

    fn edf() -> Vec<u8> {
        let sig = FixtureSignal {
            label: "C3",
            phys: (-1.0, 1.0),
            dig: (-100, 100),
            samples: vec![0, 1, 2, 3],
            per_record: 4,
        };
        build(&[sig], 1, 1.0, &[tal("+0", None, &["T0"])], 16)
    }

    fn mock(fail_first: usize) -> Mock {
        Mock {
            calls: AtomicUsize::new(0),
            fail_first,
            bytes: edf(),
        }
    }

    #[test]
    fn urls_and_paths() {
        assert_eq!(url_for(BASE_URL, 1, 1), "https://physionet.org/files/eegmmidb/1.0.0/S001/S001R01.edf");
        assert_eq!(relative_path(109, 14), PathBuf::from("S109/S109R14.edf"));
    }

    #[test]
    fn fetch_is_idempotent_and_repairs() {
        let dir = tempfile::tempdir().unwrap();
        let subjects: Vec<u32> = (99..=109).collect();
        let src = mock(0);
        let r = fetch_dataset(dir.path(), &subjects, &src, "mock://x").unwrap();
        assert_eq!(r.downloaded, 11 * 14);
        assert!(dir.path().join("S104/S104R07.edf").exists());

        let r = fetch_dataset(dir.path(), &subjects, &src, "mock://x").unwrap();
        assert_eq!((r.downloaded, r.skipped), (0, 154));

        let p = dir.path().join("S100/S100R03.edf");
        let b = fs::read(&p).unwrap();
        fs::write(&p, &b[..b.len() - 3]).unwrap();
        let r = fetch_dataset(dir.path(), &subjects, &src, "mock://x").unwrap();
        assert_eq!((r.downloaded, r.repaired, r.skipped), (1, 1, 153));
        assert_eq!(fs::read(&p).unwrap(), b);
    }

    #[test]
    fn retries_transient_failures() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(fetch_dataset(dir.path(), &[1], &mock(2), "m").unwrap().downloaded, 14);
        assert!(matches!(
            fetch_dataset(dir.path(), &[2], &mock(3), "m"),
            Err(Error::Download { .. })
        ));
    }

    #[test]
    fn short_download_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = mock(0);
        m.bytes.truncate(m.bytes.len() - 1);
        assert!(fetch_dataset(dir.path(), &[1], &m, "m").is_err());
    }
}
