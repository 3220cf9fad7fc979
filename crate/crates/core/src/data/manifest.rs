use std::io::Write;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::{decode_label_image, mask_to_boxes, BoxSet, ClassTable, LabelMap, Task};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// Write-temp-then-rename so readers never see a partial file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().and_then(|s| s.to_str()).unwrap_or("file")
    ));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// One line of `manifest.<split>.json-lines`. Paths are relative to the
/// dataset root.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    /// Label PNG (segmentation, or detection via derived boxes) or a box
    /// list in JSON.
    pub annotation: String,
    pub task: Task,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub split: Split,
    pub task: Task,
    pub entries: Vec<ManifestEntry>,
    pub class_names: Vec<String>,
}

impl DatasetManifest {
    pub fn path(root: &Path, split: Split) -> PathBuf {
        root.join(format!("manifest.{}.json-lines", split.as_str()))
    }

    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("entry serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        write_atomic(&Self::path(root, self.split), self.to_json_lines().as_bytes())
    }

    /// Read a manifest and check that every entry exists and agrees on task.
    pub fn load(root: &Path, split: Split) -> Result<Self> {
        let path = Self::path(root, split);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::MissingFile {
            path: path.clone(),
            what: e.to_string(),
        })?;
        let table = load_class_table(root)?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e: ManifestEntry = serde_json::from_str(line).map_err(|err| {
                Error::Data(format!("{}:{}: {err}", path.display(), i + 1))
            })?;
            for f in [&e.image, &e.annotation] {
                if !root.join(f).is_file() {
                    return Err(Error::MissingFile {
                        path: root.join(f),
                        what: format!("listed at {}:{}", path.display(), i + 1),
                    });
                }
            }
            entries.push(e);
        }
        let Some(first) = entries.first() else {
            return Err(Error::Data(format!("{} has no entries", path.display())));
        };
        let task = first.task;
        if let Some(bad) = entries.iter().find(|e| e.task != task) {
            return Err(Error::Data(format!(
                "{}: mixed tasks ({} and {})",
                path.display(),
                task,
                bad.task
            )));
        }
        Ok(Self {
            split,
            task,
            entries,
            class_names: table.names,
        })
    }
}

pub(crate) fn load_class_table(root: &Path) -> Result<ClassTable> {
    let p = root.join("classes.toml");
    if p.is_file() {
        ClassTable::load(&p)
    } else {
        Ok(ClassTable::default())
    }
}

/// Per-channel normalization statistics in [0, 1] intensity units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

pub(crate) struct StatsAccumulator {
    sum: [f64; 3],
    sum_sq: [f64; 3],
    count: u64,
}

impl StatsAccumulator {
    pub fn add_rgb(&mut self, img: &RgbImage) {
        for px in img.pixels() {
            for c in 0..3 {
                let v = px.0[c] as f64 / 255.0;
                self.sum[c] += v;
                self.sum_sq[c] += v * v;
            }
            self.count += 1;
        }
    }

    pub fn finish(&self) -> ChannelStats {
        let n = self.count.max(1) as f64;
        let mut mean = [0.0f32; 3];
        let mut std = [1.0f32; 3];
        for c in 0..3 {
            let m = self.sum[c] / n;
            mean[c] = m as f32;
            std[c] = ((self.sum_sq[c] / n - m * m).max(0.0).sqrt() as f32).max(1e-3);
        }
        ChannelStats { mean, std }
    }
}

impl ChannelStats {
    pub(crate) fn accumulator() -> StatsAccumulator {
        StatsAccumulator {
            sum: [0.0; 3],
            sum_sq: [0.0; 3],
            count: 0,
        }
    }

    pub fn path(root: &Path) -> PathBuf {
        root.join("stats.json")
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        write_atomic(&Self::path(root), &serde_json::to_vec_pretty(self)?)
    }

    pub fn load(root: &Path) -> Result<Self> {
        let p = Self::path(root);
        let bytes = std::fs::read(&p).map_err(|e| Error::MissingFile {
            path: p.clone(),
            what: e.to_string(),
        })?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    /// 8-bit RGB → normalized 3×H×W tensor.
    pub fn normalize(&self, img: &RgbImage) -> Tensor {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0f32; 3 * h * w];
        for (i, px) in img.pixels().enumerate() {
            for c in 0..3 {
                data[c * h * w + i] = (px.0[c] as f32 / 255.0 - self.mean[c]) / self.std[c];
            }
        }
        Tensor::from_vec(&[3, h, w], data)
    }
}

/// A split held in memory, ready for training or evaluation.
#[derive(Clone, Debug)]
pub struct LoadedDataset {
    pub name: String,
    pub task: Task,
    pub split: Split,
    pub chip_size: usize,
    pub table: ClassTable,
    /// Normalized 3×H×W images.
    pub images: Vec<Tensor>,
    /// Dense labels where the annotation is a mask.
    pub labels: Vec<Option<LabelMap>>,
    /// Detection boxes, derived from masks when needed.
    pub boxes: Vec<BoxSet>,
}

impl LoadedDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Load and decode every entry of one split.
pub fn load_dataset(root: &Path, split: Split) -> Result<LoadedDataset> {
    let manifest = DatasetManifest::load(root, split)?;
    let table = load_class_table(root)?;
    let det_idx = table.detection_indices()?;
    let stats = ChannelStats::load(root)?;
    let mut images = Vec::with_capacity(manifest.entries.len());
    let mut labels = Vec::with_capacity(manifest.entries.len());
    let mut boxes = Vec::with_capacity(manifest.entries.len());
    let mut chip_size = None;
    for e in &manifest.entries {
        let img = image::open(root.join(&e.image))
            .map_err(|err| Error::Data(format!("{}: {err}", e.image)))?
            .to_rgb8();
        if img.width() != img.height() {
            return Err(Error::Data(format!("{} is not square", e.image)));
        }
        let size = img.width() as usize;
        if *chip_size.get_or_insert(size) != size {
            return Err(Error::Data(format!(
                "{} has size {size}, expected {}",
                e.image,
                chip_size.unwrap()
            )));
        }
        images.push(stats.normalize(&img));
        let ann_path = root.join(&e.annotation);
        if e.annotation.ends_with(".json") {
            let b: BoxSet = serde_json::from_slice(&std::fs::read(&ann_path)?)?;
            labels.push(None);
            boxes.push(b);
        } else {
            let bytes = std::fs::read(&ann_path)?;
            let m = decode_label_image(&bytes, &table).map_err(|err| {
                Error::Data(format!("{}: {err}", e.annotation))
            })?;
            if (m.height(), m.width()) != (size, size) {
                return Err(Error::Data(format!(
                    "{} does not match its image size",
                    e.annotation
                )));
            }
            boxes.push(mask_to_boxes(&m, &det_idx, table.min_area));
            labels.push(Some(m));
        }
    }
    if manifest.task == Task::Segmentation && labels.iter().any(Option::is_none) {
        return Err(Error::Data(
            "segmentation manifest entries must reference label images".into(),
        ));
    }
    Ok(LoadedDataset {
        name: root
            .file_name()
            .and_then(|s| s.to_str())
            .unwrap_or("dataset")
            .to_string(),
        task: manifest.task,
        split,
        chip_size: chip_size.unwrap_or(0),
        table,
        images,
        labels,
        boxes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic_dataset, SyntheticConfig};

    #[test]
    fn synthetic_manifests_have_requested_lengths_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SyntheticConfig {
            task: Task::Segmentation,
            ..Default::default()
        };
        let (train, val) = make_synthetic_dataset(dir.path(), 3, 10, 5, &cfg).unwrap();
        assert_eq!(train.entries.len(), 10);
        assert_eq!(val.entries.len(), 5);
        let reread = DatasetManifest::load(dir.path(), Split::Train).unwrap();
        assert_eq!(reread, train);
        let ds = load_dataset(dir.path(), Split::Val).unwrap();
        assert_eq!(ds.len(), 5);
        assert_eq!(ds.chip_size, 64);
        assert!(ds.labels.iter().all(Option::is_some));
        let train_imgs: Vec<_> = train.entries.iter().map(|e| &e.image).collect();
        assert!(val.entries.iter().all(|e| !train_imgs.contains(&&e.image)));
    }

    #[test]
    fn same_seed_gives_identical_manifests_and_files() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let cfg = SyntheticConfig::default();
        make_synthetic_dataset(a.path(), 9, 4, 2, &cfg).unwrap();
        make_synthetic_dataset(b.path(), 9, 4, 2, &cfg).unwrap();
        for rel in ["manifest.train.json-lines", "manifest.val.json-lines", "train/images/00003.png", "val/boxes/00001.json", "stats.json"] {
            assert_eq!(
                std::fs::read(a.path().join(rel)).unwrap(),
                std::fs::read(b.path().join(rel)).unwrap(),
                "{rel}"
            );
        }
    }

    #[test]
    fn missing_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        make_synthetic_dataset(dir.path(), 1, 2, 1, &SyntheticConfig::default()).unwrap();
        std::fs::remove_file(dir.path().join("train/images/00001.png")).unwrap();
        assert!(matches!(
            DatasetManifest::load(dir.path(), Split::Train),
            Err(Error::MissingFile { .. })
        ));
    }

    #[test]
    fn zero_counts_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(make_synthetic_dataset(dir.path(), 1, 0, 1, &SyntheticConfig::default()).is_err());
    }
}
