//! Labeled shape collections and their tab-separated manifest.
//!
//! Manifest lines are `<relative-path>\t<class-name>\t<train|test>`. Class
//! indices follow the order in which class names first appear.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{CoreError, Result};
use crate::synth::{generate, ShapeClass};
use crate::voxel::{load_binvox, VoxelGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("split must be train or test, got `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: String,
    pub class_name: String,
    pub split: Split,
}

impl ManifestEntry {
    /// Identifier of the shape: its relative path without the `.binvox` suffix.
    pub fn id(&self) -> &str {
        self.path.strip_suffix(".binvox").unwrap_or(&self.path)
    }
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| CoreError::Manifest { line: i + 1, message };
        let fields: Vec<&str> = line.split('\t').collect();
        let [path, class_name, split] = fields[..] else {
            return Err(err(format!("expected 3 tab-separated fields, got {}", fields.len())));
        };
        if path.is_empty() || class_name.is_empty() {
            return Err(err("empty path or class name".into()));
        }
        entries.push(ManifestEntry {
            path: path.to_string(),
            class_name: class_name.to_string(),
            split: split.parse().map_err(err)?,
        });
    }
    Ok(entries)
}

pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    entries
        .iter()
        .map(|e| format!("{}\t{}\t{}\n", e.path, e.class_name, e.split))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledShape {
    pub id: String,
    pub grid: VoxelGrid,
    /// Class index in `1..=N`.
    pub label: usize,
    pub class_name: String,
    pub split: Split,
}

#[derive(Clone, Debug)]
pub struct ShapeDataset {
    classes: Vec<String>,
    shapes: Vec<LabeledShape>,
}

impl ShapeDataset {
    pub fn new(classes: Vec<String>, shapes: Vec<LabeledShape>) -> Result<Self> {
        for s in &shapes {
            if s.label == 0 || s.label > classes.len() || classes[s.label - 1] != s.class_name {
                return Err(CoreError::Mismatch(format!(
                    "shape {} has label {} / class `{}` not matching the class list",
                    s.id, s.label, s.class_name
                )));
            }
        }
        let mut ids: Vec<&str> = shapes.iter().map(|s| s.id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(CoreError::Mismatch(format!("duplicate shape id {}", w[0])));
        }
        Ok(Self { classes, shapes })
    }

    /// Builds a dataset from manifest entries and their grids.
    pub fn from_entries(entries: impl IntoIterator<Item = (ManifestEntry, VoxelGrid)>) -> Result<Self> {
        let mut classes: Vec<String> = Vec::new();
        let mut shapes = Vec::new();
        for (entry, grid) in entries {
            let label = match classes.iter().position(|c| *c == entry.class_name) {
                Some(i) => i + 1,
                None => {
                    classes.push(entry.class_name.clone());
                    classes.len()
                }
            };
            shapes.push(LabeledShape {
                id: entry.id().to_string(),
                grid,
                label,
                class_name: entry.class_name,
                split: entry.split,
            });
        }
        Self::new(classes, shapes)
    }

    /// Loads a manifest and the binvox files it names, relative to the
    /// manifest's directory.
    pub fn load(manifest: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(manifest).map_err(|e| CoreError::io(manifest, e))?;
        let root = manifest.parent().unwrap_or(Path::new("."));
        let entries = parse_manifest(&text)?;
        let loaded = entries
            .into_iter()
            .map(|e| {
                let path = root.join(&e.path);
                let bytes = std::fs::read(&path).map_err(|err| CoreError::io(&path, err))?;
                Ok((e, load_binvox(&bytes)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_entries(loaded)
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn shapes(&self) -> &[LabeledShape] {
        &self.shapes
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &LabeledShape> {
        self.shapes.iter().filter(move |s| s.split == split)
    }
}

/// Train/test counts for one class: a quarter (at least one) goes to test.
pub fn split_counts(per_class: usize) -> Result<(usize, usize)> {
    if per_class < 2 {
        return Err(CoreError::InvalidConfig(format!(
            "per-class count must be at least 2 to split train/test, got {per_class}"
        )));
    }
    let test = (per_class / 4).max(1);
    Ok((per_class - test, test))
}

fn shape_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Synthetic dataset: `per_class` shapes of each class, the first
/// three quarters of every class in the train split.
pub fn synthesize(classes: &[ShapeClass], per_class: usize, seed: u64) -> Result<Vec<(ManifestEntry, VoxelGrid)>> {
    let (train, _) = split_counts(per_class)?;
    let mut out = Vec::with_capacity(classes.len() * per_class);
    for &class in classes {
        for i in 0..per_class {
            let entry = ManifestEntry {
                path: format!("{class}/{class}_{i:03}.binvox"),
                class_name: class.name().to_string(),
                split: if i < train { Split::Train } else { Split::Test },
            };
            out.push((entry, generate(class, shape_seed(seed, i))));
        }
    }
    Ok(out)
}
