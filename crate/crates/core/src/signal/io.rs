//! Corpus serialization and the constrained WAV reader.
//!
//! A corpus directory holds `audio/<id>.f64` files (raw little-endian 64-bit
//! floats) and a `manifest.csv` with one line per utterance:
//! `id,path,transcript,duration_ms`. Paths are relative to the manifest.

use super::{Utterance, Waveform, SAMPLE_RATE};
use crate::{Error, Result};
use sha2::{Digest, Sha256};
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

pub const MANIFEST_NAME: &str = "manifest.csv";

/// One manifest row.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub path: String,
    pub transcript: Vec<String>,
    pub duration_ms: u64,
}

fn check_field(field: &str) -> Result<()> {
    if field.contains(',') || field.contains('\n') {
        return Err(Error::Format(format!("manifest field contains separator: {field:?}")));
    }
    Ok(())
}

/// Writes the corpus under `dir` and returns the manifest entries.
pub fn save_corpus(dir: &Path, corpus: &[Utterance]) -> Result<Vec<ManifestEntry>> {
    let audio_dir = dir.join("audio");
    fs::create_dir_all(&audio_dir)?;
    let mut entries = Vec::with_capacity(corpus.len());
    let mut manifest = String::from("id,path,transcript,duration_ms\n");
    for utt in corpus {
        if utt.id.is_empty() {
            return Err(Error::invalid("utterance id is empty"));
        }
        let rel = format!("audio/{}.f64", utt.id);
        let mut bytes = Vec::with_capacity(utt.waveform.len() * 8);
        for s in &utt.waveform.samples {
            bytes.extend_from_slice(&s.to_le_bytes());
        }
        fs::write(dir.join(&rel), bytes)?;
        let transcript = utt.transcript.join(" ");
        check_field(&utt.id)?;
        check_field(&transcript)?;
        let entry = ManifestEntry {
            id: utt.id.clone(),
            path: rel,
            transcript: utt.transcript.clone(),
            duration_ms: utt.waveform.duration_ms(),
        };
        manifest.push_str(&format!(
            "{},{},{},{}\n",
            entry.id, entry.path, transcript, entry.duration_ms
        ));
        entries.push(entry);
    }
    fs::write(dir.join(MANIFEST_NAME), manifest)?;
    Ok(entries)
}

/// Reads a manifest file into entries.
pub fn read_manifest(manifest_path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(manifest_path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some("id,path,transcript,duration_ms") => {}
        _ => return Err(Error::Format("manifest missing expected header".into())),
    }
    let mut entries = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.splitn(4, ',').collect();
        if parts.len() != 4 {
            return Err(Error::Format(format!("manifest line {} malformed", ln + 2)));
        }
        let transcript = if parts[2].is_empty() {
            Vec::new()
        } else {
            parts[2].split(' ').map(str::to_string).collect()
        };
        entries.push(ManifestEntry {
            id: parts[0].to_string(),
            path: parts[1].to_string(),
            transcript,
            duration_ms: parts[3]
                .parse()
                .map_err(|_| Error::Format(format!("bad duration on line {}", ln + 2)))?,
        });
    }
    Ok(entries)
}

fn read_raw_f64(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Format(format!("{} is not a whole number of f64s", path.display())));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

/// Loads a corpus from its manifest. Inserted-silence metadata is
/// generation-time only and comes back empty.
pub fn load_corpus(manifest_path: &Path) -> Result<Vec<Utterance>> {
    let base: PathBuf = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut corpus = Vec::new();
    for entry in read_manifest(manifest_path)? {
        let samples = read_raw_f64(&base.join(&entry.path))?;
        corpus.push(Utterance {
            id: entry.id,
            waveform: Waveform::new(samples)?,
            transcript: entry.transcript,
            silence_spans: Vec::new(),
        });
    }
    Ok(corpus)
}

/// SHA-256 over manifest entries and sample bytes, for determinism checks.
pub fn corpus_digest(corpus: &[Utterance]) -> String {
    let mut h = Sha256::new();
    for utt in corpus {
        h.update(utt.id.as_bytes());
        h.update(utt.transcript.join(" ").as_bytes());
        for s in &utt.waveform.samples {
            h.update(s.to_le_bytes());
        }
    }
    hex(&h.finalize())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Reads a 16 kHz mono 16-bit PCM little-endian WAV file; anything else is
/// rejected with a diagnostic.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let fail = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));
    if bytes.len() < 44 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(fail("not a RIFF/WAVE file"));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_end = pos + 8 + size;
        if body_end > bytes.len() {
            return Err(fail("truncated chunk"));
        }
        let body = &bytes[pos + 8..body_end];
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(fail("fmt chunk too small"));
                }
                fmt = Some((
                    u16::from_le_bytes(body[0..2].try_into().unwrap()),
                    u16::from_le_bytes(body[2..4].try_into().unwrap()),
                    u32::from_le_bytes(body[4..8].try_into().unwrap()),
                    u16::from_le_bytes(body[14..16].try_into().unwrap()),
                ));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        pos = body_end + (size & 1);
    }
    let (format, channels, rate, bits) = fmt.ok_or_else(|| fail("missing fmt chunk"))?;
    if format != 1 {
        return Err(fail(&format!("unsupported format tag {format}; need PCM (1)")));
    }
    if channels != 1 {
        return Err(fail(&format!("unsupported channel count {channels}; need mono")));
    }
    if rate as usize != SAMPLE_RATE {
        return Err(fail(&format!("unsupported sample rate {rate}; need 16000")));
    }
    if bits != 16 {
        return Err(fail(&format!("unsupported bit depth {bits}; need 16")));
    }
    let data = data.ok_or_else(|| fail("missing data chunk"))?;
    let samples: Vec<f64> = data
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes(c.try_into().unwrap()) as f64 / 32768.0)
        .collect();
    Waveform::new(samples)
}
