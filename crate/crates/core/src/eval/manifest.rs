//! Tab-separated manifests with a header row. Relative paths resolve
//! against the manifest's directory.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const UTTERANCE_COLUMNS: [&str; 5] = ["audio_path", "speaker_id", "gender", "accent", "transcript"];
pub const CONVERSION_COLUMNS: [&str; 8] = [
    "audio_path",
    "speaker_id",
    "gender",
    "accent",
    "transcript",
    "source_path",
    "target_speaker_id",
    "converted_path",
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UtteranceRow {
    pub audio_path: PathBuf,
    pub speaker_id: String,
    pub gender: String,
    pub accent: String,
    pub transcript: String,
}

/// A converted utterance. The utterance fields describe the source.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConversionRow {
    pub source: UtteranceRow,
    pub source_path: PathBuf,
    pub target_speaker_id: String,
    pub converted_path: PathBuf,
}

fn parse_table(path: &Path, required: &[&str]) -> Result<Vec<Vec<String>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{}: empty manifest", path.display())))?
        .split('\t')
        .map(str::trim)
        .collect();
    let idx: Vec<usize> = required
        .iter()
        .map(|c| {
            header
                .iter()
                .position(|h| h == c)
                .ok_or_else(|| Error::Data(format!("{}: missing column {c}", path.display())))
        })
        .collect::<Result<_>>()?;
    lines
        .enumerate()
        .map(|(i, line)| {
            let cells: Vec<&str> = line.split('\t').collect();
            if cells.len() != header.len() {
                return Err(Error::Data(format!(
                    "{}: row {} has {} cells, header has {}",
                    path.display(),
                    i + 2,
                    cells.len(),
                    header.len()
                )));
            }
            Ok(idx.iter().map(|&j| cells[j].to_string()).collect())
        })
        .collect()
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = PathBuf::from(p);
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn utterance(base: &Path, c: &[String]) -> UtteranceRow {
    UtteranceRow {
        audio_path: resolve(base, &c[0]),
        speaker_id: c[1].clone(),
        gender: c[2].clone(),
        accent: c[3].clone(),
        transcript: c[4].clone(),
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<UtteranceRow>> {
    let base = base_dir(path);
    Ok(parse_table(path, &UTTERANCE_COLUMNS)?.iter().map(|c| utterance(&base, c)).collect())
}

pub fn read_conversion_manifest(path: &Path) -> Result<Vec<ConversionRow>> {
    let base = base_dir(path);
    Ok(parse_table(path, &CONVERSION_COLUMNS)?
        .iter()
        .map(|c| ConversionRow {
            source: utterance(&base, c),
            source_path: resolve(&base, &c[5]),
            target_speaker_id: c[6].clone(),
            converted_path: resolve(&base, &c[7]),
        })
        .collect())
}

fn cell(s: &str) -> Result<&str> {
    if s.contains(['\t', '\n', '\r']) {
        return Err(Error::Data(format!("manifest field {s:?} contains a tab or newline")));
    }
    Ok(s)
}

/// Writes `p` relative to `base` when it lies underneath it.
fn path_cell(base: &Path, p: &Path) -> Result<String> {
    let rel = p.strip_prefix(base).unwrap_or(p);
    Ok(cell(&rel.to_string_lossy())?.to_string())
}

fn utterance_cells(base: &Path, r: &UtteranceRow) -> Result<Vec<String>> {
    Ok(vec![
        path_cell(base, &r.audio_path)?,
        cell(&r.speaker_id)?.into(),
        cell(&r.gender)?.into(),
        cell(&r.accent)?.into(),
        cell(&r.transcript)?.into(),
    ])
}

fn write_table(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
    let mut out = header.join("\t");
    out.push('\n');
    for r in rows {
        out.push_str(&r.join("\t"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_manifest(path: &Path, rows: &[UtteranceRow]) -> Result<()> {
    let base = base_dir(path);
    let cells = rows.iter().map(|r| utterance_cells(&base, r)).collect::<Result<_>>()?;
    write_table(path, &UTTERANCE_COLUMNS, cells)
}

pub fn write_conversion_manifest(path: &Path, rows: &[ConversionRow]) -> Result<()> {
    let base = base_dir(path);
    let cells = rows
        .iter()
        .map(|r| {
            let mut c = utterance_cells(&base, &r.source)?;
            c.push(path_cell(&base, &r.source_path)?);
            c.push(cell(&r.target_speaker_id)?.into());
            c.push(path_cell(&base, &r.converted_path)?);
            Ok(c)
        })
        .collect::<Result<_>>()?;
    write_table(path, &CONVERSION_COLUMNS, cells)
}
