//! Dataset types, tile cropping, label codecs and box derivation.

mod boxes;
mod classes;
mod codec;
mod crop;
mod ingest;
mod manifest;
pub mod synthetic;

pub use boxes::mask_to_boxes;
pub use classes::{ClassTable, DEFAULT_MIN_AREA};
pub use codec::{decode_label_image, encode_label_image, label_map_to_rgb, rgb_to_label_map};
pub use crop::{crop_tiles, window_offsets, Chip};
pub use ingest::{derive_box_dataset, ingest_tiles, IngestConfig, IngestSummary};
pub(crate) use manifest::write_atomic;
pub use manifest::{
    load_dataset, ChannelStats, DatasetManifest, LoadedDataset, ManifestEntry, Split,
};
pub use synthetic::{make_synthetic_dataset, SyntheticConfig, SyntheticStyle};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which task an image is annotated for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Detection,
    Segmentation,
}

impl Task {
    pub fn other(self) -> Task {
        match self {
            Task::Detection => Task::Segmentation,
            Task::Segmentation => Task::Detection,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Detection => "detection",
            Task::Segmentation => "segmentation",
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "detection" | "det" => Ok(Task::Detection),
            "segmentation" | "seg" => Ok(Task::Segmentation),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }
}

/// Per-pixel class indices plus an ignore mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    height: usize,
    width: usize,
    classes: Vec<u8>,
    ignore: Vec<bool>,
    class_count: u8,
}

impl LabelMap {
    pub fn new(
        height: usize,
        width: usize,
        classes: Vec<u8>,
        ignore: Vec<bool>,
        class_count: u8,
    ) -> Result<Self> {
        if class_count == 0 {
            return Err(Error::InvalidInput("class_count must be positive".into()));
        }
        if classes.len() != height * width || ignore.len() != height * width {
            return Err(Error::Shape(format!(
                "label map {height}x{width} needs {} pixels, got {} classes / {} ignore",
                height * width,
                classes.len(),
                ignore.len()
            )));
        }
        if let Some((i, c)) = classes
            .iter()
            .zip(&ignore)
            .enumerate()
            .find(|(_, (c, ig))| !**ig && **c >= class_count)
            .map(|(i, (c, _))| (i, *c))
        {
            return Err(Error::InvalidInput(format!(
                "class {c} at pixel {i} is outside [0, {class_count})"
            )));
        }
        Ok(Self {
            height,
            width,
            classes,
            ignore,
            class_count,
        })
    }

    /// A map filled with one class and nothing ignored.
    pub fn filled(height: usize, width: usize, class: u8, class_count: u8) -> Result<Self> {
        Self::new(
            height,
            width,
            vec![class; height * width],
            vec![false; height * width],
            class_count,
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn class_count(&self) -> u8 {
        self.class_count
    }

    pub fn classes(&self) -> &[u8] {
        &self.classes
    }

    pub fn ignore(&self) -> &[bool] {
        &self.ignore
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.classes[row * self.width + col]
    }

    pub fn is_ignored(&self, row: usize, col: usize) -> bool {
        self.ignore[row * self.width + col]
    }

    /// Class at raster index `i`, or `None` for an ignored pixel.
    pub fn get_index(&self, i: usize) -> Option<u8> {
        (!self.ignore[i]).then(|| self.classes[i])
    }

    /// Sets a pixel; panics if the class is out of range.
    pub fn set(&mut self, row: usize, col: usize, class: u8) {
        assert!(class < self.class_count);
        self.classes[row * self.width + col] = class;
        self.ignore[row * self.width + col] = false;
    }

    pub fn set_ignored(&mut self, row: usize, col: usize) {
        self.ignore[row * self.width + col] = true;
    }

    pub fn crop(&self, row: usize, col: usize, h: usize, w: usize) -> LabelMap {
        let mut classes = Vec::with_capacity(h * w);
        let mut ignore = Vec::with_capacity(h * w);
        for r in row..row + h {
            let s = r * self.width + col;
            classes.extend_from_slice(&self.classes[s..s + w]);
            ignore.extend_from_slice(&self.ignore[s..s + w]);
        }
        LabelMap {
            height: h,
            width: w,
            classes,
            ignore,
            class_count: self.class_count,
        }
    }

    /// Mirror left-right and/or top-bottom.
    pub fn flipped(&self, horizontal: bool, vertical: bool) -> LabelMap {
        let mut out = self.clone();
        for r in 0..self.height {
            for c in 0..self.width {
                let sr = if vertical { self.height - 1 - r } else { r };
                let sc = if horizontal { self.width - 1 - c } else { c };
                out.classes[r * self.width + c] = self.classes[sr * self.width + sc];
                out.ignore[r * self.width + c] = self.ignore[sr * self.width + sc];
            }
        }
        out
    }
}

/// Axis-aligned box in pixel coordinates; `min` inclusive, `max` exclusive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub class_id: usize,
    pub x_min: f32,
    pub y_min: f32,
    pub x_max: f32,
    pub y_max: f32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f32>,
}

impl BBox {
    pub fn new(class_id: usize, x_min: f32, y_min: f32, x_max: f32, y_max: f32) -> Self {
        Self {
            class_id,
            x_min,
            y_min,
            x_max,
            y_max,
            score: None,
        }
    }

    pub fn with_score(mut self, score: f32) -> Self {
        self.score = Some(score);
        self
    }

    pub fn width(&self) -> f32 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f32 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f32 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        self.x_min < self.x_max && self.y_min < self.y_max
    }

    pub fn iou(&self, other: &BBox) -> f32 {
        iou_xyxy(
            [self.x_min, self.y_min, self.x_max, self.y_max],
            [other.x_min, other.y_min, other.x_max, other.y_max],
        )
    }

    pub fn flipped(&self, width: f32, height: f32, horizontal: bool, vertical: bool) -> BBox {
        let mut b = *self;
        if horizontal {
            b.x_min = width - self.x_max;
            b.x_max = width - self.x_min;
        }
        if vertical {
            b.y_min = height - self.y_max;
            b.y_max = height - self.y_min;
        }
        b
    }
}

/// Intersection over union of two `[x0, y0, x1, y1]` boxes.
pub fn iou_xyxy(a: [f32; 4], b: [f32; 4]) -> f32 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub type BoxSet = Vec<BBox>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_map_rejects_out_of_range_class() {
        let err = LabelMap::new(1, 2, vec![0, 6], vec![false, false], 6).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
        // ignored pixels may hold anything
        LabelMap::new(1, 2, vec![0, 9], vec![false, true], 6).unwrap();
    }

    #[test]
    fn label_map_rejects_dimension_mismatch() {
        assert!(LabelMap::new(2, 2, vec![0; 4], vec![false; 3], 6).is_err());
    }

    #[test]
    fn flip_is_an_involution() {
        let m = LabelMap::new(2, 3, vec![0, 1, 2, 3, 4, 5], vec![false; 6], 6).unwrap();
        assert_eq!(m.flipped(true, false).get(0, 0), 2);
        assert_eq!(m.flipped(false, true).get(0, 0), 3);
        assert_eq!(m.flipped(true, true).flipped(true, true), m);
    }

    #[test]
    fn iou_basics() {
        let a = BBox::new(0, 0.0, 0.0, 10.0, 10.0);
        let b = BBox::new(0, 5.0, 0.0, 15.0, 10.0);
        assert!((a.iou(&a) - 1.0).abs() < 1e-6);
        assert!((a.iou(&b) - 50.0 / 150.0).abs() < 1e-6);
        assert_eq!(a.iou(&BBox::new(0, 20.0, 20.0, 30.0, 30.0)), 0.0);
    }
}
