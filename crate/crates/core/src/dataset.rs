//! Labeled image collections and the `path,label,split` manifest format.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::ImageRgb;
use crate::seed::{rng_for, stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::contract(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Arc<ImageRgb>,
    pub label: usize,
    pub split: Split,
}

#[derive(Clone, Debug)]
pub struct LabeledDataset {
    domain_name: String,
    class_names: Vec<String>,
    samples: Vec<Sample>,
}

impl LabeledDataset {
    pub fn new(domain_name: &str, class_names: Vec<String>, samples: Vec<Sample>) -> Result<Self> {
        if class_names.len() < 2 {
            return Err(Error::contract(format!(
                "dataset {domain_name} needs at least 2 classes"
            )));
        }
        if samples.is_empty() {
            return Err(Error::contract(format!("dataset {domain_name} is empty")));
        }
        if let Some(s) = samples.iter().find(|s| s.label >= class_names.len()) {
            return Err(Error::LabelOutOfRange {
                label: s.label,
                classes: class_names.len(),
            });
        }
        Ok(Self {
            domain_name: domain_name.to_string(),
            class_names,
            samples,
        })
    }

    pub fn domain_name(&self) -> &str {
        &self.domain_name
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.samples[i].split == split)
            .collect()
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.samples.iter().filter(|s| s.split == split).count()
    }

    /// Samples of one split, in dataset order.
    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    /// Keeps a class-stratified `fraction` of the training split (at least
    /// one sample per class present); validation and test are unchanged.
    pub fn with_train_fraction(&self, fraction: f64, seed: u64) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::contract(format!("fraction {fraction} not in (0, 1]")));
        }
        let mut keep = vec![true; self.samples.len()];
        let mut rng = rng_for(seed, &[stream::SUBSET]);
        for class in 0..self.class_count() {
            let mut idx: Vec<usize> = (0..self.samples.len())
                .filter(|&i| self.samples[i].split == Split::Train && self.samples[i].label == class)
                .collect();
            if idx.is_empty() {
                continue;
            }
            idx.shuffle(&mut rng);
            let n = ((fraction * idx.len() as f64).round() as usize).max(1);
            for &i in &idx[n..] {
                keep[i] = false;
            }
        }
        let samples = self
            .samples
            .iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(s, _)| s.clone())
            .collect();
        Self::new(&self.domain_name, self.class_names.clone(), samples)
    }

    /// Same samples under another name.
    pub fn renamed(&self, name: &str) -> Self {
        Self {
            domain_name: name.to_string(),
            ..self.clone()
        }
    }
}

/// Declared correspondence from target class names to source class names.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelMap(pub BTreeMap<String, String>);

/// Re-expresses `target` in the source's label space. Identical class
/// lists pass through; differing ones require an explicit map covering
/// every target class.
pub fn unify_labels(
    source_classes: &[String],
    target: &LabeledDataset,
    map: Option<&LabelMap>,
) -> Result<LabeledDataset> {
    if source_classes == target.class_names() {
        return Ok(target.clone());
    }
    let map = map.ok_or_else(|| {
        Error::LabelMap(format!(
            "class sets differ (source {:?}, target {:?}) and no label map was given",
            source_classes,
            target.class_names()
        ))
    })?;
    let index: Vec<usize> = target
        .class_names()
        .iter()
        .map(|name| {
            let mapped = map
                .0
                .get(name)
                .ok_or_else(|| Error::LabelMap(format!("target class {name:?} is not mapped")))?;
            source_classes
                .iter()
                .position(|s| s == mapped)
                .ok_or_else(|| Error::LabelMap(format!("{mapped:?} is not a source class")))
        })
        .collect::<Result<_>>()?;
    let samples = target
        .samples()
        .iter()
        .map(|s| Sample {
            label: index[s.label],
            ..s.clone()
        })
        .collect();
    LabeledDataset::new(target.domain_name(), source_classes.to_vec(), samples)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub path: String,
    pub label: String,
    pub split: Split,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["path", "label", "split"] {
        return Err(Error::Manifest {
            path: path.to_path_buf(),
            msg: format!("header must be path,label,split, got {:?}", headers),
        });
    }
    reader
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Loads every row of the given manifests. Relative image paths resolve
/// against the manifest's directory. Class indices follow `class_names`
/// when given, otherwise the sorted set of labels seen.
pub fn load_dataset(
    domain_name: &str,
    manifests: &[PathBuf],
    class_names: Option<&[String]>,
) -> Result<LabeledDataset> {
    let mut rows = Vec::new();
    for m in manifests {
        let base = m.parent().map(Path::to_path_buf).unwrap_or_default();
        for r in read_manifest(m)? {
            rows.push((base.join(&r.path), r));
        }
    }
    if rows.is_empty() {
        return Err(Error::Manifest {
            path: manifests.first().cloned().unwrap_or_default(),
            msg: "no samples".into(),
        });
    }
    let classes: Vec<String> = match class_names {
        Some(c) => c.to_vec(),
        None => {
            let mut c: Vec<String> = rows.iter().map(|(_, r)| r.label.clone()).collect();
            c.sort();
            c.dedup();
            c
        }
    };
    let samples = rows
        .iter()
        .map(|(path, r)| {
            let label = classes.iter().position(|c| *c == r.label).ok_or_else(|| {
                Error::LabelMap(format!("label {:?} not among classes {classes:?}", r.label))
            })?;
            Ok(Sample {
                image: Arc::new(ImageRgb::load(path)?),
                label,
                split: r.split,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    LabeledDataset::new(domain_name, classes, samples)
}


#[cfg(test)]
mod tests {
    use super::testing::toy_dataset;
    use super::*;

    #[test]
    fn validation() {
        let img = Arc::new(ImageRgb::filled(3, 3, [0.5; 3]).unwrap());
        let s = |label| Sample {
            image: img.clone(),
            label,
            split: Split::Train,
        };
        let names = vec!["a".to_string(), "b".to_string()];
        assert!(LabeledDataset::new("d", names.clone(), vec![s(0), s(1)]).is_ok());
        assert!(matches!(
            LabeledDataset::new("d", names.clone(), vec![s(2)]),
            Err(Error::LabelOutOfRange { .. })
        ));
        assert!(LabeledDataset::new("d", names, vec![]).is_err());
        assert!(LabeledDataset::new("d", vec!["a".into()], vec![s(0)]).is_err());
    }

    #[test]
    fn train_fraction_keeps_eval_splits() {
        let d = toy_dataset("t", 3, 20);
        let q = d.with_train_fraction(0.25, 1).unwrap();
        assert_eq!(q.split_len(Split::Val), d.split_len(Split::Val));
        assert_eq!(q.split_len(Split::Test), d.split_len(Split::Test));
        // 12 train per class -> 3
        assert_eq!(q.split_len(Split::Train), 9);
    }

    #[test]
    fn unify_requires_map_for_different_classes() {
        let d = toy_dataset("t", 2, 10);
        let src = vec!["x".to_string(), "y".to_string()];
        assert!(matches!(unify_labels(&src, &d, None), Err(Error::LabelMap(_))));
        let map = LabelMap(
            [("c0".to_string(), "y".to_string()), ("c1".to_string(), "x".to_string())].into(),
        );
        let u = unify_labels(&src, &d, Some(&map)).unwrap();
        assert_eq!(u.class_names(), src.as_slice());
        assert_eq!(u.samples()[0].label, 1);
        let partial = LabelMap([("c0".to_string(), "y".to_string())].into());
        assert!(unify_labels(&src, &d, Some(&partial)).is_err());
        let same = unify_labels(d.class_names(), &d, None).unwrap();
        assert_eq!(same.len(), d.len());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageRgb::filled(4, 4, [0.2, 0.4, 0.6]).unwrap();
        img.save_png(&dir.path().join("a.png")).unwrap();
        let rows = vec![
            ManifestRow {
                path: "a.png".into(),
                label: "ring".into(),
                split: Split::Train,
            },
            ManifestRow {
                path: "a.png".into(),
                label: "blob".into(),
                split: Split::Test,
            },
        ];
        let m = dir.path().join("m.csv");
        write_manifest(&m, &rows).unwrap();
        let text = std::fs::read_to_string(&m).unwrap();
        assert!(text.starts_with("path,label,split\n"));
        assert_eq!(read_manifest(&m).unwrap(), rows);
        let d = load_dataset("dom", &[m], None).unwrap();
        assert_eq!(d.class_names(), &["blob".to_string(), "ring".to_string()]);
        assert_eq!(d.samples()[0].label, 1);
    }

    #[test]
    fn bad_header_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("m.csv");
        std::fs::write(&m, "file,class,split\n").unwrap();
        assert!(matches!(read_manifest(&m), Err(Error::Manifest { .. })));
    }
}
