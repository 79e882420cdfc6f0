//! EDF / EDF+ reader.
//!
//! Reads the fixed 256-byte header, one 256-byte header per signal, and the
//! data records of 16-bit little-endian two's-complement samples. The
//! `EDF Annotations` signal is decoded from its TAL (time-stamped annotation
//! list) encoding into [`Annotation`]s.

use std::path::Path;

use crate::error::{Error, Result};

pub const ANNOTATION_LABEL: &str = "EDF Annotations";

#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub onset: f64,
    pub duration: f64,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignalHeader {
    pub label: String,
    pub transducer: String,
    pub physical_dimension: String,
    pub physical_min: f64,
    pub physical_max: f64,
    pub digital_min: i32,
    pub digital_max: i32,
    pub prefiltering: String,
    pub samples_per_record: usize,
}

impl SignalHeader {
    /// Maps a stored digital value to physical units.
    pub fn to_physical(&self, digital: i16) -> f64 {
        let dig_span = f64::from(self.digital_max - self.digital_min);
        let phys_span = self.physical_max - self.physical_min;
        (f64::from(digital) - f64::from(self.digital_min)) * phys_span / dig_span + self.physical_min
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdfHeader {
    pub version: String,
    pub patient: String,
    pub recording: String,
    pub start_date: String,
    pub start_time: String,
    pub header_bytes: usize,
    pub reserved: String,
    pub record_count: usize,
    pub record_duration: f64,
    pub signals: Vec<SignalHeader>,
}

impl EdfHeader {
    pub fn record_bytes(&self) -> usize {
        self.signals.iter().map(|s| 2 * s.samples_per_record).sum()
    }

    /// Total file size implied by the header.
    pub fn expected_file_len(&self) -> usize {
        self.header_bytes + self.record_count * self.record_bytes()
    }
}

/// One decoded recording: data channels in physical units plus annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecording {
    pub subject: u32,
    pub run: u32,
    pub sampling_rate: f64,
    pub channel_labels: Vec<String>,
    /// `signals[channel][sample]`.
    pub signals: Vec<Vec<f64>>,
    pub annotations: Vec<Annotation>,
}

impl RawRecording {
    pub fn n_samples(&self) -> usize {
        self.signals.first().map_or(0, Vec::len)
    }

    /// Rejects recordings that do not match the dataset layout (channel count and rate).
    pub fn check_layout(&self, channels: usize, sampling_rate: f64) -> Result<()> {
        if self.signals.len() != channels {
            return Err(Error::Edf(format!(
                "S{:03}R{:02}: {} channels, expected {channels}",
                self.subject,
                self.run,
                self.signals.len()
            )));
        }
        if (self.sampling_rate - sampling_rate).abs() > 1e-9 {
            return Err(Error::Edf(format!(
                "S{:03}R{:02}: sampled at {} Hz, expected {sampling_rate} Hz",
                self.subject, self.run, self.sampling_rate
            )));
        }
        Ok(())
    }
}

fn ascii_field(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).trim().to_string()
}

fn number<T: std::str::FromStr>(bytes: &[u8], what: &str) -> Result<T> {
    let s = ascii_field(bytes);
    s.parse()
        .map_err(|_| Error::Edf(format!("{what}: cannot parse `{s}`")))
}

/// Parses only the header block.
pub fn parse_header(bytes: &[u8]) -> Result<EdfHeader> {
    if bytes.len() < 256 {
        return Err(Error::Edf(format!("file of {} bytes is shorter than the header", bytes.len())));
    }
    let h = &bytes[..256];
    let header_bytes: usize = number(&h[184..192], "header byte count")?;
    let record_count: i64 = number(&h[236..244], "record count")?;
    let record_duration: f64 = number(&h[244..252], "record duration")?;
    let ns: usize = number(&h[252..256], "signal count")?;
    if record_count < 0 {
        return Err(Error::Edf("record count of -1 (recording in progress) not supported".into()));
    }
    if ns == 0 {
        return Err(Error::Edf("no signals".into()));
    }
    if header_bytes != 256 * (ns + 1) {
        return Err(Error::Edf(format!(
            "header declares {header_bytes} bytes, {ns} signals need {}",
            256 * (ns + 1)
        )));
    }
    if record_duration <= 0.0 || !record_duration.is_finite() {
        return Err(Error::Edf(format!("invalid record duration {record_duration}")));
    }
    if bytes.len() < header_bytes {
        return Err(Error::Edf("truncated signal headers".into()));
    }
    let sig = &bytes[256..header_bytes];
    // Signal header fields are stored column-wise: all labels, then all transducers, ...
    let mut offset = 0;
    let mut column = |width: usize| {
        let start = offset;
        offset += width * ns;
        (0..ns)
            .map(|i| &sig[start + i * width..start + (i + 1) * width])
            .collect::<Vec<_>>()
    };
    let labels = column(16);
    let transducers = column(80);
    let dims = column(8);
    let pmins = column(8);
    let pmaxs = column(8);
    let dmins = column(8);
    let dmaxs = column(8);
    let prefilters = column(80);
    let sprs = column(8);

    let mut signals = Vec::with_capacity(ns);
    for i in 0..ns {
        let s = SignalHeader {
            label: ascii_field(labels[i]),
            transducer: ascii_field(transducers[i]),
            physical_dimension: ascii_field(dims[i]),
            physical_min: number(pmins[i], "physical minimum")?,
            physical_max: number(pmaxs[i], "physical maximum")?,
            digital_min: number(dmins[i], "digital minimum")?,
            digital_max: number(dmaxs[i], "digital maximum")?,
            prefiltering: ascii_field(prefilters[i]),
            samples_per_record: number(sprs[i], "samples per record")?,
        };
        if s.digital_max <= s.digital_min {
            return Err(Error::Edf(format!("signal `{}`: digital max <= digital min", s.label)));
        }
        if s.samples_per_record == 0 {
            return Err(Error::Edf(format!("signal `{}`: zero samples per record", s.label)));
        }
        signals.push(s);
    }

    Ok(EdfHeader {
        version: ascii_field(&h[0..8]),
        patient: ascii_field(&h[8..88]),
        recording: ascii_field(&h[88..168]),
        start_date: ascii_field(&h[168..176]),
        start_time: ascii_field(&h[176..184]),
        header_bytes,
        reserved: ascii_field(&h[192..236]),
        record_count: record_count as usize,
        record_duration,
        signals,
    })
}

/// Decodes one record's annotation bytes (a sequence of TALs).
pub fn parse_tals(bytes: &[u8]) -> Result<Vec<Annotation>> {
    let mut out = Vec::new();
    for tal in bytes.split(|&b| b == 0).filter(|t| !t.is_empty()) {
        let mut parts = tal.split(|&b| b == 0x14);
        let stamp = parts.next().unwrap_or_default();
        let (onset_raw, duration_raw) = match stamp.iter().position(|&b| b == 0x15) {
            Some(i) => (&stamp[..i], Some(&stamp[i + 1..])),
            None => (stamp, None),
        };
        let onset_str = std::str::from_utf8(onset_raw).map_err(|_| Error::Edf("non-ASCII TAL onset".into()))?;
        if !onset_str.starts_with(['+', '-']) {
            return Err(Error::Edf(format!("TAL onset `{onset_str}` lacks a sign")));
        }
        let onset: f64 = onset_str
            .parse()
            .map_err(|_| Error::Edf(format!("bad TAL onset `{onset_str}`")))?;
        let duration = match duration_raw {
            Some(d) if !d.is_empty() => number(d, "TAL duration")?,
            _ => 0.0,
        };
        for text in parts {
            let text = String::from_utf8_lossy(text).trim().to_string();
            if !text.is_empty() {
                out.push(Annotation {
                    onset,
                    duration,
                    text,
                });
            }
        }
    }
    Ok(out)
}

/// Subject and run ids from a Physionet-style name such as `S001R03.edf`.
pub fn ids_from_file_name(path: &Path) -> Option<(u32, u32)> {
    let stem = path.file_stem()?.to_str()?;
    let rest = stem.strip_prefix('S')?;
    let r = rest.find('R')?;
    Some((rest[..r].parse().ok()?, rest[r + 1..].parse().ok()?))
}

pub fn parse_edf_bytes(bytes: &[u8], subject: u32, run: u32) -> Result<RawRecording> {
    let header = parse_header(bytes)?;
    if bytes.len() != header.expected_file_len() {
        return Err(Error::Edf(format!(
            "file has {} bytes, header implies {}",
            bytes.len(),
            header.expected_file_len()
        )));
    }
    let annot_idx = header
        .signals
        .iter()
        .position(|s| s.label == ANNOTATION_LABEL)
        .ok_or_else(|| Error::Edf("missing annotation channel".into()))?;

    let data_signals: Vec<usize> = (0..header.signals.len()).filter(|&i| i != annot_idx).collect();
    let spr = data_signals
        .first()
        .map(|&i| header.signals[i].samples_per_record)
        .ok_or_else(|| Error::Edf("no data signals".into()))?;
    if let Some(&bad) = data_signals.iter().find(|&&i| header.signals[i].samples_per_record != spr) {
        return Err(Error::Edf(format!(
            "signal `{}` has {} samples per record, expected {spr}",
            header.signals[bad].label, header.signals[bad].samples_per_record
        )));
    }

    let mut signals: Vec<Vec<f64>> = data_signals
        .iter()
        .map(|_| Vec::with_capacity(spr * header.record_count))
        .collect();
    let mut annotations = Vec::new();
    let mut pos = header.header_bytes;
    for _ in 0..header.record_count {
        let mut data_k = 0;
        for (i, s) in header.signals.iter().enumerate() {
            let chunk = &bytes[pos..pos + 2 * s.samples_per_record];
            pos += chunk.len();
            if i == annot_idx {
                annotations.extend(parse_tals(chunk)?);
            } else {
                signals[data_k].extend(
                    chunk
                        .chunks_exact(2)
                        .map(|c| s.to_physical(i16::from_le_bytes([c[0], c[1]]))),
                );
                data_k += 1;
            }
        }
    }
    annotations.sort_by(|a, b| a.onset.total_cmp(&b.onset));

    Ok(RawRecording {
        subject,
        run,
        sampling_rate: spr as f64 / header.record_duration,
        channel_labels: data_signals.iter().map(|&i| header.signals[i].label.clone()).collect(),
        signals,
        annotations,
    })
}

/// Reads an EDF/EDF+ file. Subject and run ids come from the file name when it
/// follows the `SxxxRyy.edf` pattern, otherwise they are 0.
pub fn parse_edf(path: &Path) -> Result<RawRecording> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (subject, run) = ids_from_file_name(path).unwrap_or((0, 0));
    parse_edf_bytes(&bytes, subject, run)
}


#[cfg(test)]
mod tests {
    use super::fixture::*;
    use super::*;

    fn two_channel() -> Vec<u8> {
        let signals = [
            FixtureSignal {
                label: "Fc5.",
                phys: (-100.0, 100.0),
                dig: (-1000, 1000),
                samples: vec![0, 10, -1000, 1000],
                per_record: 4,
            },
            FixtureSignal {
                label: "Cz..",
                phys: (-5.0, 5.0),
                dig: (-5, 5),
                samples: vec![1, 2, 3, -4],
                per_record: 4,
            },
        ];
        let mut tals = tal("+0", None, &[""]);
        tals.extend(tal("+0.5", Some("0.25"), &["T1"]));
        build(&signals, 1, 1.0, &[tals], 10)
    }

    #[test]
    fn hand_built_fixture_exact_values() {
        let rec = parse_edf_bytes(&two_channel(), 7, 3).unwrap();
        assert_eq!(rec.channel_labels, vec!["Fc5.", "Cz.."]);
        assert_eq!(rec.sampling_rate, 4.0);
        assert_eq!(rec.signals[0], vec![0.0, 1.0, -100.0, 100.0]);
        // identical digital and physical ranges scale as identity
        assert_eq!(rec.signals[1], vec![1.0, 2.0, 3.0, -4.0]);
        assert_eq!(
            rec.annotations,
            vec![Annotation {
                onset: 0.5,
                duration: 0.25,
                text: "T1".into()
            }]
        );
    }

    #[test]
    fn header_fields() {
        let h = parse_header(&two_channel()).unwrap();
        assert_eq!(h.version, "0");
        assert_eq!(h.reserved, "EDF+C");
        assert_eq!(h.header_bytes, 1024);
        assert_eq!(h.record_count, 1);
        assert_eq!(h.signals.len(), 3);
        assert_eq!(h.signals[2].label, ANNOTATION_LABEL);
        assert_eq!(h.expected_file_len(), 1024 + 8 + 8 + 20);
    }

    #[test]
    fn truncated_and_inconsistent_files_rejected() {
        let bytes = two_channel();
        assert!(parse_edf_bytes(&bytes[..bytes.len() - 2], 0, 0).is_err());
        assert!(parse_edf_bytes(&bytes[..100], 0, 0).is_err());
        let mut bad = bytes.clone();
        bad[184..192].copy_from_slice(b"768     ");
        assert!(matches!(parse_edf_bytes(&bad, 0, 0), Err(Error::Edf(_))));
    }

    #[test]
    fn missing_annotation_channel() {
        let mut bytes = two_channel();
        // relabel the annotation signal
        let at = 256 + 2 * 16;
        bytes[at..at + 16].copy_from_slice(b"Misc            ");
        let err = parse_edf_bytes(&bytes, 0, 0).unwrap_err();
        assert!(err.to_string().contains("annotation"));
    }

    #[test]
    fn tal_variants() {
        let mut b = tal("+0", None, &[""]);
        b.extend(tal("+4.1", Some("4.1"), &["T2", "extra"]));
        b.extend(tal("-1", None, &["pre"]));
        let a = parse_tals(&b).unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(a[0].onset, 4.1);
        assert_eq!(a[1].text, "extra");
        assert_eq!(a[2].onset, -1.0);
        assert!(parse_tals(b"4.0\x14T0\x14\x00").is_err());
    }

    #[test]
    fn file_name_ids() {
        assert_eq!(ids_from_file_name(Path::new("/x/S001R03.edf")), Some((1, 3)));
        assert_eq!(ids_from_file_name(Path::new("S109R14.edf")), Some((109, 14)));
        assert_eq!(ids_from_file_name(Path::new("fixture.edf")), None);
    }
}
