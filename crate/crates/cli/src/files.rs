//! Input checks, atomic output and the score CSV schema.

use std::fs::File;
use std::io::{BufReader, Write};
use std::path::Path;

use mdmf::detect::Detection;
use mdmf::pfs::{decode_checkpoint, encode_checkpoint};
use mdmf::{EmbeddingDataset, Label, PfsParams};
use serde::Serialize;
use tempfile::NamedTempFile;

use crate::failure::{Failure, Outcome};

pub const SCORE_HEADER: [&str; 3] = ["source_id", "score", "label"];

/// Fails before any work starts if an input path is missing.
pub fn require_inputs(paths: &[&Path]) -> Outcome {
    for p in paths {
        if !p.is_file() {
            return Err(Failure::runtime(format!("input {} does not exist", p.display())));
        }
    }
    Ok(())
}

/// Writes `bytes` to a temporary file next to `path`, then renames it.
/// Existing non-regular targets such as `/dev/null` or a pipe are written in place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Outcome {
    let io = |e: std::io::Error| Failure::runtime(format!("writing {}: {e}", path.display()));
    if std::fs::metadata(path).is_ok_and(|m| !m.is_file() && !m.is_dir()) {
        return std::fs::write(path, bytes).map_err(io);
    }
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(bytes).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Outcome<EmbeddingDataset> {
    let file = File::open(path).map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))?;
    mdmf::embeddings::read_embedding_file(BufReader::new(file)).map_err(|e| with_path(path, e))
}

pub fn write_dataset(path: &Path, ds: &EmbeddingDataset) -> Outcome {
    write_atomic(path, &mdmf::embeddings::encode_embedding_file(ds)?)
}

pub fn read_params(path: &Path) -> Outcome<PfsParams> {
    let bytes = std::fs::read(path).map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))?;
    decode_checkpoint(&bytes).map_err(|e| with_path(path, e))
}

pub fn write_params(path: &Path, params: &PfsParams) -> Outcome {
    write_atomic(path, &encode_checkpoint(params)?)
}

fn with_path(path: &Path, e: mdmf::Error) -> Failure {
    match Failure::from(e) {
        Failure::Format(m) => Failure::Format(format!("{}: {m}", path.display())),
        Failure::Runtime(m) => Failure::Runtime(format!("{}: {m}", path.display())),
        other => other,
    }
}

/// Pretty JSON with a trailing newline, to `path` or stdout.
pub fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> Outcome {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::runtime(e.to_string()))?;
    text.push('\n');
    match path {
        Some(p) => write_atomic(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn encode_scores(rows: &[Detection]) -> Outcome<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let err = |e: csv::Error| Failure::runtime(e.to_string());
    w.write_record(SCORE_HEADER).map_err(err)?;
    for d in rows {
        w.write_record([d.source_id.as_str(), &d.score.to_string(), d.label.as_str()])
            .map_err(err)?;
    }
    w.into_inner().map_err(|e| Failure::runtime(e.to_string()))
}

pub fn read_scores(path: &Path) -> Outcome<Vec<Detection>> {
    let fmt = |m: String| Failure::Format(format!("{}: {m}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(|e| fmt(e.to_string()))?;
    let header = r.headers().map_err(|e| fmt(e.to_string()))?.clone();
    if header.iter().ne(SCORE_HEADER) {
        return Err(fmt(format!("header must be {}", SCORE_HEADER.join(","))));
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| fmt(e.to_string()))?;
        let score: f64 = rec[1]
            .parse()
            .map_err(|_| fmt(format!("row {}: bad score {:?}", i + 1, &rec[1])))?;
        if score.is_nan() {
            return Err(fmt(format!("row {}: score is NaN", i + 1)));
        }
        let label: Label = rec[2]
            .parse()
            .map_err(|_| fmt(format!("row {}: bad label {:?}", i + 1, &rec[2])))?;
        out.push(Detection {
            source_id: rec[0].to_string(),
            score,
            label,
        });
    }
    Ok(out)
}
