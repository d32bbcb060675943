//! Dataset manifests: one JSON object per line.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{read_volume, Region, Result, Volume, VolumeError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub path: String,
    pub region_tag: Region,
    pub labeled: bool,
    #[serde(default, skip_serializing_if = "is_train")]
    pub split: Split,
}

fn is_train(s: &Split) -> bool {
    *s == Split::Train
}

pub fn write_manifest(records: &[ManifestRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for r in records {
        let line = serde_json::to_string(r).expect("manifest record serializes");
        writeln!(f, "{line}")?;
    }
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| VolumeError::Manifest { line: i + 1, message: e.to_string() }))
        .collect()
}

/// A loaded volume with its manifest metadata.
#[derive(Debug, Clone)]
pub struct DatasetEntry {
    pub id: String,
    pub volume: Arc<Volume>,
    pub labeled: bool,
    pub split: Split,
}

/// In-memory dataset. Unlabeled entries never carry a label grid.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    entries: Vec<DatasetEntry>,
}

impl Dataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, id: impl Into<String>, volume: Volume, labeled: bool, split: Split) {
        let volume = if labeled { volume } else { volume.without_labels() };
        self.entries.push(DatasetEntry { id: id.into(), volume: Arc::new(volume), labeled, split });
    }

    pub fn from_entries(entries: Vec<DatasetEntry>) -> Self {
        Self { entries }
    }

    /// Loads every record; relative paths resolve against the manifest's
    /// directory.
    pub fn load(manifest: impl AsRef<Path>) -> Result<Self> {
        let manifest = manifest.as_ref();
        let base = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut ds = Dataset::new();
        for rec in read_manifest(manifest)? {
            let p = PathBuf::from(&rec.path);
            let full = if p.is_absolute() { p } else { base.join(p) };
            let v = read_volume(&full)?;
            if v.region() != rec.region_tag {
                return Err(VolumeError::Invalid(format!(
                    "{} is tagged {} in the manifest but stores {}",
                    rec.path,
                    rec.region_tag,
                    v.region()
                )));
            }
            if rec.labeled && v.labels().is_none() {
                return Err(VolumeError::Invalid(format!("{} is marked labeled but has no labels", rec.path)));
            }
            ds.push(rec.path, v, rec.labeled, rec.split);
        }
        Ok(ds)
    }

    pub fn entries(&self) -> &[DatasetEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn volumes(&self) -> impl Iterator<Item = &Arc<Volume>> {
        self.entries.iter().map(|e| &e.volume)
    }

    fn filtered(&self, keep: impl Fn(&DatasetEntry) -> bool) -> Dataset {
        Dataset { entries: self.entries.iter().filter(|e| keep(e)).cloned().collect() }
    }

    /// Training-split entries. Fails if an id is listed under both splits,
    /// which would let a training stage see evaluation ground truth.
    pub fn training_view(&self) -> Result<Dataset> {
        let eval: HashSet<&str> = self.entries.iter().filter(|e| e.split == Split::Eval).map(|e| e.id.as_str()).collect();
        if let Some(leak) = self.entries.iter().find(|e| e.split == Split::Train && eval.contains(e.id.as_str())) {
            return Err(VolumeError::EvalLeak(leak.id.clone()));
        }
        Ok(self.filtered(|e| e.split == Split::Train))
    }

    pub fn eval_view(&self) -> Dataset {
        self.filtered(|e| e.split == Split::Eval)
    }

    pub fn labeled(&self) -> Dataset {
        self.filtered(|e| e.labeled)
    }

    pub fn unlabeled(&self) -> Dataset {
        self.filtered(|e| !e.labeled)
    }

    pub fn regions(&self) -> Vec<Region> {
        let mut r: Vec<Region> = self.entries.iter().map(|e| e.volume.region()).collect();
        r.sort();
        r.dedup();
        r
    }

    pub fn records(&self) -> Vec<ManifestRecord> {
        self.entries
            .iter()
            .map(|e| ManifestRecord { path: e.id.clone(), region_tag: e.volume.region(), labeled: e.labeled, split: e.split })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(region: Region) -> Volume {
        Volume::new([2, 2, 2], [1.0; 3], vec![0.5; 8], region, Some(vec![1; 8])).unwrap()
    }

    #[test]
    fn manifest_lines_parse_and_report_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        fs::write(&p, "{\"path\":\"a.vvol\",\"region_tag\":\"CHEST\",\"labeled\":true}\n\nnot json\n").unwrap();
        match read_manifest(&p) {
            Err(VolumeError::Manifest { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unlabeled_entries_drop_labels() {
        let mut ds = Dataset::new();
        ds.push("a", vol(Region::Head), false, Split::Train);
        assert!(ds.entries()[0].volume.labels().is_none());
    }

    #[test]
    fn training_view_rejects_eval_ids() {
        let mut ds = Dataset::new();
        ds.push("a", vol(Region::Head), true, Split::Train);
        ds.push("b", vol(Region::Head), true, Split::Eval);
        assert_eq!(ds.training_view().unwrap().len(), 1);
        ds.push("b", vol(Region::Head), true, Split::Train);
        assert!(matches!(ds.training_view(), Err(VolumeError::EvalLeak(id)) if id == "b"));
    }
}
