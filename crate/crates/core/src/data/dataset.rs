//! Series discovery, stratified splitting and the persisted manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One CT series: an ordered set of slice images sharing a label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeriesSample {
    pub series_id: String,
    pub label: Option<usize>,
    /// Sorted lexicographically by file name.
    pub slice_paths: Vec<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetScan {
    /// Sorted class directory names; a sample's label indexes this list.
    pub class_names: Vec<String>,
    pub samples: Vec<SeriesSample>,
    /// Series directories without any slice, skipped during the scan.
    pub skipped: Vec<PathBuf>,
}

fn is_slice(path: &Path) -> bool {
    path.is_file()
        && path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("pgm"))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

fn dir_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Slice files of one series directory in lexicographic order, each checked
/// for readability.
pub fn series_slices(dir: &Path) -> Result<Vec<PathBuf>> {
    let slices: Vec<PathBuf> = sorted_entries(dir)?.into_iter().filter(|p| is_slice(p)).collect();
    for s in &slices {
        fs::File::open(s).map_err(|e| Error::io(s, e))?;
    }
    Ok(slices)
}

/// Scans `root/<class>/<series_id>/*.pgm`.
pub fn scan_dataset(root: &Path) -> Result<DatasetScan> {
    if !root.is_dir() {
        return Err(Error::NotFound(root.to_path_buf()));
    }
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    let class_names: Vec<String> = class_dirs.iter().map(|p| dir_name(p)).collect();
    let mut scan = DatasetScan {
        class_names,
        ..Default::default()
    };
    let mut seen = BTreeSet::new();
    for (label, class_dir) in class_dirs.iter().enumerate() {
        for series_dir in sorted_entries(class_dir)?.into_iter().filter(|p| p.is_dir()) {
            let slices = series_slices(&series_dir)?;
            if slices.is_empty() {
                log::warn!("skipping empty series directory {}", series_dir.display());
                scan.skipped.push(series_dir);
                continue;
            }
            let series_id = dir_name(&series_dir);
            if !seen.insert(series_id.clone()) {
                return Err(Error::Data(format!(
                    "series id {series_id:?} appears in more than one class directory"
                )));
            }
            scan.samples.push(SeriesSample {
                series_id,
                label: Some(label),
                slice_paths: slices,
            });
        }
    }
    Ok(scan)
}

/// Finds unlabeled series under `input`: the directory itself if it holds
/// slices, otherwise every descendant directory (up to two levels) that does.
pub fn discover_series(input: &Path) -> Result<Vec<SeriesSample>> {
    if !input.is_dir() {
        return Err(Error::NotFound(input.to_path_buf()));
    }
    let mut found = Vec::new();
    collect_series(input, 2, &mut found)?;
    Ok(found)
}

fn collect_series(dir: &Path, depth: usize, out: &mut Vec<SeriesSample>) -> Result<()> {
    let slices = series_slices(dir)?;
    if !slices.is_empty() {
        out.push(SeriesSample {
            series_id: dir_name(dir),
            label: None,
            slice_paths: slices,
        });
        return Ok(());
    }
    if depth == 0 {
        return Ok(());
    }
    for sub in sorted_entries(dir)?.into_iter().filter(|p| p.is_dir()) {
        collect_series(&sub, depth - 1, out)?;
    }
    Ok(())
}

/// Seeded, per-class stratified split at series level.
///
/// Each class sends `max(1, round(count · (1 − ratio)))` series to
/// validation (capped so that at least one stays in training). Both halves
/// keep the input order.
pub fn split_dataset(samples: &[SeriesSample], ratio: f64, seed: u64) -> Result<(Vec<SeriesSample>, Vec<SeriesSample>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::config(format!("split ratio must lie in (0, 1), got {ratio}")));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        let label = s
            .label
            .ok_or_else(|| Error::Data(format!("series {} has no label", s.series_id)))?;
        by_class.entry(label).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut is_val = vec![false; samples.len()];
    for (label, mut members) in by_class {
        let count = members.len();
        if count < 2 {
            return Err(Error::Data(format!(
                "class {label} has {count} series; splitting needs at least 2"
            )));
        }
        let val = ((count as f64 * (1.0 - ratio)).round() as usize).clamp(1, count - 1);
        members.shuffle(&mut rng);
        for &i in &members[..val] {
            is_val[i] = true;
        }
    }
    let (val, train): (Vec<_>, Vec<_>) = samples.iter().cloned().zip(is_val).partition(|(_, v)| *v);
    Ok((
        train.into_iter().map(|(s, _)| s).collect(),
        val.into_iter().map(|(s, _)| s).collect(),
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub series_id: String,
    pub class: String,
    pub split: Split,
    pub slices: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub class_names: Vec<String>,
    pub split_ratio: f64,
    pub seed: u64,
    pub samples: Vec<ManifestEntry>,
}

impl Manifest {
    /// Splits a scan and records the assignment, keeping scan order.
    pub fn from_scan(scan: &DatasetScan, ratio: f64, seed: u64) -> Result<Self> {
        let (_, val) = split_dataset(&scan.samples, ratio, seed)?;
        let val_ids: BTreeSet<&str> = val.iter().map(|s| s.series_id.as_str()).collect();
        let samples = scan
            .samples
            .iter()
            .map(|s| ManifestEntry {
                series_id: s.series_id.clone(),
                class: scan.class_names[s.label.expect("scanned samples are labeled")].clone(),
                split: if val_ids.contains(s.series_id.as_str()) {
                    Split::Val
                } else {
                    Split::Train
                },
                slices: s.slice_paths.clone(),
            })
            .collect();
        Ok(Self {
            class_names: scan.class_names.clone(),
            split_ratio: ratio,
            seed,
            samples,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn label_of(&self, class: &str) -> Result<usize> {
        self.class_names
            .iter()
            .position(|c| c == class)
            .ok_or_else(|| Error::Data(format!("class {class:?} is not listed in the manifest")))
    }

    pub fn split(&self, which: Split) -> Result<Vec<SeriesSample>> {
        self.samples
            .iter()
            .filter(|e| e.split == which)
            .map(|e| {
                Ok(SeriesSample {
                    series_id: e.series_id.clone(),
                    label: Some(self.label_of(&e.class)?),
                    slice_paths: e.slices.clone(),
                })
            })
            .collect()
    }

    /// Ground-truth label per series id.
    pub fn labels(&self) -> Result<BTreeMap<String, usize>> {
        self.samples
            .iter()
            .map(|e| Ok((e.series_id.clone(), self.label_of(&e.class)?)))
            .collect()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// One training example: a slice with its series label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SliceItem {
    pub series_id: String,
    pub path: PathBuf,
    pub label: usize,
}

/// Flattens series into labeled slices and cuts them into batches; the
/// final batch may be partial.
pub fn make_batches(samples: &[SeriesSample], batch_size: usize, shuffle: bool, seed: u64) -> Result<Vec<Vec<SliceItem>>> {
    if batch_size == 0 {
        return Err(Error::config("batch size must be at least 1"));
    }
    let mut items = Vec::new();
    for s in samples {
        let label = s
            .label
            .ok_or_else(|| Error::Data(format!("series {} has no label", s.series_id)))?;
        items.extend(s.slice_paths.iter().map(|p| SliceItem {
            series_id: s.series_id.clone(),
            path: p.clone(),
            label,
        }));
    }
    if items.is_empty() {
        return Err(Error::Data("cannot batch an empty split".into()));
    }
    if shuffle {
        items.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(items.chunks(batch_size).map(<[SliceItem]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn touch(path: &Path) {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(path, b"P5\n1 1\n255\n\0").unwrap();
    }

    fn synthetic(per_class: usize, slices: usize) -> Vec<SeriesSample> {
        (0..2 * per_class)
            .map(|i| SeriesSample {
                series_id: format!("s{i:02}"),
                label: Some(i / per_class),
                slice_paths: (0..slices).map(|j| PathBuf::from(format!("s{i:02}/{j}.pgm"))).collect(),
            })
            .collect()
    }

    #[test]
    fn scan_labels_and_orders_slices() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        touch(&root.join("covid/s1/b.pgm"));
        touch(&root.join("covid/s1/a.pgm"));
        touch(&root.join("noncovid/s2/z.pgm"));
        touch(&root.join("noncovid/s3/notes.txt"));
        fs::create_dir_all(root.join("noncovid/s4")).unwrap();

        let scan = scan_dataset(root).unwrap();
        assert_eq!(scan.class_names, vec!["covid", "noncovid"]);
        assert_eq!(scan.samples.len(), 2);
        assert_eq!(scan.samples[0].label, Some(0));
        assert_eq!(scan.samples[1].label, Some(1));
        let names: Vec<_> = scan.samples[0]
            .slice_paths
            .iter()
            .map(|p| p.file_name().unwrap().to_str().unwrap())
            .collect();
        assert_eq!(names, vec!["a.pgm", "b.pgm"]);
        assert_eq!(scan.skipped.len(), 2);
    }

    #[test]
    fn empty_and_missing_roots() {
        let dir = tempfile::tempdir().unwrap();
        assert!(scan_dataset(dir.path()).unwrap().samples.is_empty());
        assert!(matches!(
            scan_dataset(&dir.path().join("absent")),
            Err(Error::NotFound(_))
        ));
    }

    #[test]
    fn duplicate_series_ids_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        touch(&dir.path().join("a/s1/x.pgm"));
        touch(&dir.path().join("b/s1/x.pgm"));
        assert!(matches!(scan_dataset(dir.path()), Err(Error::Data(_))));
    }

    #[test]
    fn split_eight_series() {
        let samples = synthetic(4, 1);
        let (train, val) = split_dataset(&samples, 0.75, 7).unwrap();
        assert_eq!((train.len(), val.len()), (6, 2));
        assert_eq!(val.iter().filter(|s| s.label == Some(0)).count(), 1);
        assert_eq!(val.iter().filter(|s| s.label == Some(1)).count(), 1);
    }

    #[test]
    fn split_is_seeded() {
        let samples = synthetic(10, 1);
        let a = split_dataset(&samples, 0.75, 1).unwrap();
        assert_eq!(a, split_dataset(&samples, 0.75, 1).unwrap());
        let differs = (2..20).any(|s| split_dataset(&samples, 0.75, s).unwrap() != a);
        assert!(differs);
    }

    #[test]
    fn split_half_of_two() {
        let (train, val) = split_dataset(&synthetic(2, 1), 0.5, 0).unwrap();
        assert_eq!((train.len(), val.len()), (2, 2));
    }

    #[test]
    fn split_errors() {
        assert!(matches!(split_dataset(&synthetic(1, 1), 0.75, 0), Err(Error::Data(_))));
        assert!(matches!(split_dataset(&synthetic(2, 1), 1.0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn batches_keep_partial_tail() {
        let samples = synthetic(1, 5);
        let sizes: Vec<_> = make_batches(&samples, 4, false, 0).unwrap().iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn unshuffled_batches_preserve_file_order() {
        let samples = synthetic(1, 3);
        let flat: Vec<_> = make_batches(&samples, 2, false, 0).unwrap().concat();
        let want: Vec<_> = samples.iter().flat_map(|s| s.slice_paths.clone()).collect();
        assert_eq!(flat.iter().map(|i| i.path.clone()).collect::<Vec<_>>(), want);
    }

    #[test]
    fn shuffled_batches_are_seeded() {
        let samples = synthetic(3, 4);
        let a = make_batches(&samples, 5, true, 11).unwrap();
        assert_eq!(a, make_batches(&samples, 5, true, 11).unwrap());
        assert_ne!(a, make_batches(&samples, 5, false, 11).unwrap());
        assert!(make_batches(&[], 4, true, 0).is_err());
        assert!(make_batches(&samples, 0, true, 0).is_err());
    }
}
