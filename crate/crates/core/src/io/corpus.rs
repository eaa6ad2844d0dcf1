use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::container::TensorFile;
use crate::data::FeatureSequence;
use crate::error::{Error, Result};
use crate::tensor::Real;

pub const MANIFEST_HEADER: &str = "id\tlanguage\tpath\tframes\thas_labels";
const FEATURES: &str = "features";
const FRAME_LABELS: &str = "frame_labels";
const TRANSCRIPT: &str = "transcript";

/// One manifest line; `path` is relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub id: String,
    pub language: u32,
    pub path: String,
    pub frames: usize,
    pub has_labels: bool,
}

fn utterance_file<T: Real>(u: &FeatureSequence<T>) -> Result<TensorFile> {
    let mut file = TensorFile::new();
    file.insert_tensor(FEATURES, &u.features);
    if let Some(l) = &u.frame_labels {
        file.insert_labels(FRAME_LABELS, l)?;
    }
    if let Some(t) = &u.transcript {
        file.insert_labels(TRANSCRIPT, t)?;
    }
    Ok(file)
}

/// Writes `manifest.tsv` plus `utterances/<id>.xt` under `dir`, creating it if needed.
pub fn save_corpus<T: Real>(
    dir: impl AsRef<Path>,
    corpus: &[FeatureSequence<T>],
) -> Result<Vec<ManifestRow>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("utterances"))?;
    let mut rows = Vec::with_capacity(corpus.len());
    let mut text = String::from(MANIFEST_HEADER);
    text.push('\n');
    for u in corpus {
        if u.id.is_empty() || u.id.contains(['/', '\\', '\t', '\n']) || u.id.starts_with('.') {
            return Err(Error::Data(format!(
                "utterance id `{}` is not usable as a file name",
                u.id
            )));
        }
        let row = ManifestRow {
            id: u.id.clone(),
            language: u.language,
            path: format!("utterances/{}.xt", u.id),
            frames: u.frames(),
            has_labels: u.has_labels(),
        };
        utterance_file(u)?.save(dir.join(&row.path))?;
        writeln!(
            text,
            "{}\t{}\t{}\t{}\t{}",
            row.id, row.language, row.path, row.frames, row.has_labels as u8
        )
        .expect("writing to a String");
        rows.push(row);
    }
    let manifest = dir.join("manifest.tsv");
    let tmp = dir.join("manifest.tsv.tmp");
    fs::write(&tmp, text)?;
    fs::rename(tmp, manifest)?;
    Ok(rows)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRow>> {
    let text = fs::read_to_string(path.as_ref())?;
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(Error::Format(format!(
            "{}: missing manifest header",
            path.as_ref().display()
        )));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = |what: &str| Error::Format(format!("manifest line {}: {what}", i + 2));
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 5 {
                return Err(bad("expected 5 tab-separated columns"));
            }
            Ok(ManifestRow {
                id: cols[0].to_string(),
                language: cols[1].parse().map_err(|_| bad("bad language"))?,
                path: cols[2].to_string(),
                frames: cols[3].parse().map_err(|_| bad("bad frame count"))?,
                has_labels: match cols[4] {
                    "0" => false,
                    "1" => true,
                    _ => return Err(bad("has_labels must be 0 or 1")),
                },
            })
        })
        .collect()
}

/// Loads every utterance listed in a manifest, checking frame counts and label flags.
pub fn load_corpus<T: Real>(manifest: impl AsRef<Path>) -> Result<Vec<FeatureSequence<T>>> {
    let manifest = manifest.as_ref();
    let root: PathBuf = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    read_manifest(manifest)?
        .into_iter()
        .map(|row| {
            let file = TensorFile::load(root.join(&row.path))?;
            let mut u = FeatureSequence::new(row.id.clone(), file.tensor(FEATURES)?, row.language)?;
            if file.contains(FRAME_LABELS) {
                u.frame_labels = Some(file.labels(FRAME_LABELS)?);
            }
            if file.contains(TRANSCRIPT) {
                u.transcript = Some(file.labels(TRANSCRIPT)?);
            }
            if u.frames() != row.frames || u.has_labels() != row.has_labels {
                return Err(Error::Data(format!(
                    "`{}` disagrees with its manifest row",
                    row.id
                )));
            }
            Ok(u)
        })
        .collect()
}
