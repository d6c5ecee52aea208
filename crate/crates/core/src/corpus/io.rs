//! Annotation and feature file formats.
//!
//! * annotations: one JSON object per line,
//!   `{"image_id", "keywords", "location"?, "questions", "split"?}`
//! * features, text: one JSON object per line, `{"image_id", "dim", "vector"}`
//! * features, binary: `"VQGF"`, version `0x01`, `u32` record count, then per
//!   record `u16` id length, id bytes, `u32` dim, `dim × f32` (all little-endian)

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{tokenize, FeatureTable, ImageRecord, Split};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"VQGF";
const VERSION: u8 = 0x01;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationLine {
    image_id: String,
    #[serde(default)]
    keywords: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    location: Option<String>,
    questions: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeatureLine {
    image_id: String,
    dim: usize,
    vector: Vec<f32>,
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<Vec<ImageRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text, path)
}

/// `origin` is only used to label errors.
pub fn parse_annotations(text: &str, origin: &Path) -> Result<Vec<ImageRecord>> {
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: AnnotationLine =
            serde_json::from_str(line).map_err(|e| parse_err(origin, lineno, e.to_string()))?;
        if !seen.insert(raw.image_id.clone()) {
            return Err(parse_err(
                origin,
                lineno,
                format!("duplicate image id `{}`", raw.image_id),
            ));
        }
        let split = match raw.split.as_deref() {
            None => Split::Unassigned,
            Some(s) => s
                .parse()
                .map_err(|e: Error| parse_err(origin, lineno, e.to_string()))?,
        };
        records.push(ImageRecord {
            image_id: raw.image_id,
            keywords: raw.keywords.iter().flat_map(|k| tokenize(k)).collect(),
            location: raw.location,
            questions: raw
                .questions
                .iter()
                .map(|q| tokenize(q))
                .filter(|q| !q.is_empty())
                .collect(),
            split,
        });
    }
    Ok(records)
}

pub fn annotations_to_string(records: &[ImageRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let line = AnnotationLine {
            image_id: r.image_id.clone(),
            keywords: r.keywords.clone(),
            location: r.location.clone(),
            questions: r.questions.iter().map(|q| q.join(" ")).collect(),
            split: (r.split != Split::Unassigned).then(|| r.split.to_string()),
        };
        out.push_str(&serde_json::to_string(&line).expect("annotation serializes"));
        out.push('\n');
    }
    out
}

pub fn save_annotations(path: impl AsRef<Path>, records: &[ImageRecord]) -> Result<()> {
    write_atomic(path.as_ref(), annotations_to_string(records).as_bytes())
}

/// Loads either feature format, detected from the leading magic bytes.
pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureTable> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(MAGIC) {
        parse_features_binary(&bytes, path)
    } else {
        let text = String::from_utf8(bytes).map_err(|e| parse_err(path, 0, e.to_string()))?;
        parse_features_text(&text, path)
    }
}

pub fn parse_features_text(text: &str, origin: &Path) -> Result<FeatureTable> {
    let mut table = FeatureTable::new(0);
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: FeatureLine =
            serde_json::from_str(line).map_err(|e| parse_err(origin, lineno, e.to_string()))?;
        if raw.dim != raw.vector.len() {
            return Err(Error::FeatureDimension {
                image_id: raw.image_id,
                expected: raw.dim,
                actual: raw.vector.len(),
            });
        }
        if raw.vector.iter().any(|v| !v.is_finite()) {
            return Err(parse_err(origin, lineno, "non-finite feature value"));
        }
        table.insert(raw.image_id, raw.vector)?;
    }
    Ok(table)
}

pub fn features_to_text(table: &FeatureTable) -> String {
    let mut out = String::new();
    for (id, v) in table.iter() {
        let line = FeatureLine {
            image_id: id.to_string(),
            dim: v.len(),
            vector: v.to_vec(),
        };
        out.push_str(&serde_json::to_string(&line).expect("feature line serializes"));
        out.push('\n');
    }
    out
}

pub fn save_features_text(path: impl AsRef<Path>, table: &FeatureTable) -> Result<()> {
    write_atomic(path.as_ref(), features_to_text(table).as_bytes())
}

pub fn features_to_binary(table: &FeatureTable) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&u32::try_from(table.len()).map_err(|_| Error::Invalid("too many records".into()))?.to_le_bytes());
    for (id, v) in table.iter() {
        let id_len = u16::try_from(id.len())
            .map_err(|_| Error::Invalid(format!("image id `{id}` longer than 65535 bytes")))?;
        out.extend_from_slice(&id_len.to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        out.extend_from_slice(&(v.len() as u32).to_le_bytes());
        for x in v {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_features_binary(path: impl AsRef<Path>, table: &FeatureTable) -> Result<()> {
    write_atomic(path.as_ref(), &features_to_binary(table)?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Binary errors report the 1-based record number in the `line` field.
pub fn parse_features_binary(bytes: &[u8], origin: &Path) -> Result<FeatureTable> {
    let mut rd = Reader { bytes, pos: 0 };
    if rd.take(4) != Some(MAGIC.as_slice()) {
        return Err(parse_err(origin, 0, "missing VQGF magic"));
    }
    match rd.take(1) {
        Some([VERSION]) => {}
        Some([v]) => return Err(parse_err(origin, 0, format!("unsupported version {v:#04x}"))),
        _ => return Err(parse_err(origin, 0, "truncated header")),
    }
    let count = rd
        .u32()
        .ok_or_else(|| parse_err(origin, 0, "truncated header"))?;
    let mut table = FeatureTable::new(0);
    for rec in 1..=count as usize {
        let truncated = || parse_err(origin, rec, "truncated record");
        let id_len = rd.u16().ok_or_else(truncated)? as usize;
        let id = std::str::from_utf8(rd.take(id_len).ok_or_else(truncated)?)
            .map_err(|e| parse_err(origin, rec, e.to_string()))?
            .to_string();
        let dim = rd.u32().ok_or_else(truncated)? as usize;
        let raw = rd
            .take(dim.checked_mul(4).ok_or_else(truncated)?)
            .ok_or_else(truncated)?;
        let vector: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        table.insert(id, vector)?;
    }
    if rd.pos != bytes.len() {
        return Err(parse_err(origin, count as usize, "trailing bytes after last record"));
    }
    Ok(table)
}

/// Write to a temporary sibling and rename over the destination.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}
