use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use fmd_nn::io::Archive;
use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::datasets::{ImageSet, Role, PIXELS};
use crate::detector::ResistanceVector;
use crate::error::{FmError, Result};

/// Version of every JSON artifact layout, including the metrics file.
pub const SCHEMA_VERSION: u32 = 1;

/// Header shared by every JSON artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub schema_version: u32,
    pub config_hash: String,
    pub kind: String,
    pub payload: T,
}

fn check_header(path: &Path, schema: u32, hash: &str, kind: &str, want_hash: &str, want_kind: &str) -> Result<()> {
    if schema != SCHEMA_VERSION {
        return Err(FmError::State(format!("{}: schema {schema}, expected {SCHEMA_VERSION}", path.display())));
    }
    if kind != want_kind {
        return Err(FmError::State(format!("{}: holds {kind:?}, expected {want_kind:?}", path.display())));
    }
    if hash != want_hash {
        return Err(FmError::State(format!(
            "{} was produced by config {hash}, refusing to use it with config {want_hash}",
            path.display()
        )));
    }
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, hash: &str, kind: &str, payload: &T) -> Result<()> {
    let env =
        Envelope { schema_version: SCHEMA_VERSION, config_hash: hash.to_string(), kind: kind.to_string(), payload };
    let mut text = serde_json::to_string_pretty(&env).map_err(|e| FmError::Numeric(e.to_string()))?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path, hash: &str, kind: &str) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| FmError::io(path, e))?;
    let env: Envelope<T> =
        serde_json::from_str(&text).map_err(|e| FmError::Ingest { file: path.to_path_buf(), reason: e.to_string() })?;
    check_header(path, env.schema_version, &env.config_hash, &env.kind, hash, kind)?;
    Ok(env.payload)
}

/// Write to a sibling temp file and rename, so a crash never leaves a
/// truncated artifact that a resumed run would trust.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| FmError::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| FmError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| FmError::io(path, e))
}

pub fn stamp(archive: &mut Archive, hash: &str) {
    archive.metadata.insert("config_hash".into(), hash.to_string());
}

pub fn load_stamped(path: &Path, hash: &str) -> Result<Archive> {
    let a = Archive::load(path)?;
    let got =
        a.meta("config_hash").map_err(|_| FmError::State(format!("{} carries no config hash", path.display())))?;
    if got != hash {
        return Err(FmError::State(format!(
            "{} was produced by config {got}, refusing to use it with config {hash}",
            path.display()
        )));
    }
    Ok(a)
}

pub fn save_stamped(mut archive: Archive, path: &Path, hash: &str) -> Result<()> {
    stamp(&mut archive, hash);
    let bytes = archive.to_bytes()?;
    atomic_write(path, &bytes)
}

pub fn image_set_archive(set: &ImageSet) -> Archive {
    let mut a = Archive::new();
    let n = set.len();
    a.insert("images", vec![n, PIXELS], set.images.iter().copied().collect());
    a.insert("labels", vec![n], set.labels.iter().map(|&v| v as f32).collect());
    a.insert("source", vec![n], set.source.iter().map(|&v| v as f32).collect());
    if let Some(role) = set.role {
        a.metadata.insert("role".into(), role.to_string());
    }
    a
}

pub fn image_set_from_archive(a: &Archive) -> Result<ImageSet> {
    let (shape, data) = a.tensor("images")?;
    let images =
        Array2::from_shape_vec((shape[0], shape[1]), data.clone()).map_err(|e| FmError::Contract(e.to_string()))?;
    let ints = |name: &str| -> Result<Vec<usize>> { Ok(a.tensor(name)?.1.iter().map(|&v| v as usize).collect()) };
    let role = match a.metadata.get("role").map(String::as_str) {
        Some("TRAIN") => Some(Role::Train),
        Some("CLE") => Some(Role::Cle),
        Some("ADV") => Some(Role::Adv),
        Some("VAL") => Some(Role::Val),
        _ => None,
    };
    ImageSet::new(images, ints("labels")?, ints("source")?, role)
}

/// One line of a resistance log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResistanceRecord {
    pub index: usize,
    pub source: usize,
    pub label: usize,
    pub rv: ResistanceVector,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct LogHeader {
    schema_version: u32,
    config_hash: String,
    kind: String,
    group: String,
}

/// Resistance vectors of one image group, one JSON object per line after a
/// header line. Written incrementally to `<name>.jsonl.partial` and
/// gzipped to `<name>.jsonl.gz` once complete.
pub struct ResistanceLog {
    pub done: PathBuf,
    partial: PathBuf,
    group: String,
    hash: String,
}

const LOG_KIND: &str = "resistance-log";

impl ResistanceLog {
    pub fn new(dir: &Path, group: &str, hash: &str) -> Self {
        ResistanceLog {
            done: dir.join(format!("resistance-{group}.jsonl.gz")),
            partial: dir.join(format!("resistance-{group}.jsonl.partial")),
            group: group.to_string(),
            hash: hash.to_string(),
        }
    }

    pub fn is_complete(&self) -> bool {
        self.done.exists()
    }

    fn parse(&self, path: &Path, reader: impl BufRead) -> Result<Vec<ResistanceRecord>> {
        let bad = |reason: String| FmError::Ingest { file: path.to_path_buf(), reason };
        let mut lines = reader.lines();
        let header: LogHeader = match lines.next() {
            Some(l) => serde_json::from_str(&l.map_err(|e| FmError::io(path, e))?).map_err(|e| bad(e.to_string()))?,
            None => return Ok(Vec::new()),
        };
        check_header(path, header.schema_version, &header.config_hash, &header.kind, &self.hash, LOG_KIND)?;
        if header.group != self.group {
            return Err(bad(format!("group {:?}, expected {:?}", header.group, self.group)));
        }
        let mut out = Vec::new();
        for line in lines {
            let line = line.map_err(|e| FmError::io(path, e))?;
            // A torn final line from an interrupted run is dropped and redone.
            match serde_json::from_str::<ResistanceRecord>(&line) {
                Ok(r) if r.index == out.len() => out.push(r),
                _ => break,
            }
        }
        Ok(out)
    }

    pub fn read(&self) -> Result<Vec<ResistanceRecord>> {
        let f = File::open(&self.done).map_err(|e| FmError::io(&self.done, e))?;
        self.parse(&self.done, BufReader::new(GzDecoder::new(f)))
    }

    /// Records already present in the partial log.
    pub fn resume(&self) -> Result<Vec<ResistanceRecord>> {
        match File::open(&self.partial) {
            Ok(f) => self.parse(&self.partial, BufReader::new(f)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
            Err(e) => Err(FmError::io(&self.partial, e)),
        }
    }

    /// Rewrite the partial log with `kept` and return an appender.
    pub fn appender(&self, kept: &[ResistanceRecord]) -> Result<LogAppender> {
        let io = |e| FmError::io(&self.partial, e);
        let f = OpenOptions::new().create(true).write(true).truncate(true).open(&self.partial).map_err(io)?;
        let mut w = BufWriter::new(f);
        let header = LogHeader {
            schema_version: SCHEMA_VERSION,
            config_hash: self.hash.clone(),
            kind: LOG_KIND.into(),
            group: self.group.clone(),
        };
        writeln!(w, "{}", serde_json::to_string(&header).unwrap()).map_err(io)?;
        for r in kept {
            writeln!(w, "{}", serde_json::to_string(r).unwrap()).map_err(io)?;
        }
        w.flush().map_err(io)?;
        Ok(LogAppender { w, path: self.partial.clone() })
    }

    /// Compress the partial log into its final name.
    pub fn finish(&self) -> Result<()> {
        let mut raw = Vec::new();
        File::open(&self.partial)
            .and_then(|mut f| f.read_to_end(&mut raw))
            .map_err(|e| FmError::io(&self.partial, e))?;
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&raw).map_err(|e| FmError::io(&self.done, e))?;
        let gz = enc.finish().map_err(|e| FmError::io(&self.done, e))?;
        atomic_write(&self.done, &gz)?;
        fs::remove_file(&self.partial).map_err(|e| FmError::io(&self.partial, e))
    }
}

pub struct LogAppender {
    w: BufWriter<File>,
    path: PathBuf,
}

impl LogAppender {
    pub fn push(&mut self, r: &ResistanceRecord) -> Result<()> {
        let io = |e| FmError::io(&self.path, e);
        writeln!(self.w, "{}", serde_json::to_string(r).unwrap()).map_err(io)?;
        self.w.flush().map_err(io)
    }
}
