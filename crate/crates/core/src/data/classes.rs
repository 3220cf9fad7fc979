use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Components smaller than this (in pixels) are not turned into boxes.
pub const DEFAULT_MIN_AREA: usize = 12;

/// Segmentation label space, colour palette and the detection subset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassTable {
    pub names: Vec<String>,
    pub colors: Vec<[u8; 3]>,
    /// Segmentation class names that become detection classes, in
    /// detection-index order.
    pub detection: Vec<String>,
    #[serde(default)]
    pub ignore_color: Option<[u8; 3]>,
    #[serde(default = "default_min_area")]
    pub min_area: usize,
}

fn default_min_area() -> usize {
    DEFAULT_MIN_AREA
}

impl Default for ClassTable {
    /// ISPRS 2D labelling palette.
    fn default() -> Self {
        Self {
            names: [
                "impervious_surfaces",
                "building",
                "low_vegetation",
                "tree",
                "car",
                "clutter",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            colors: vec![
                [255, 255, 255],
                [0, 0, 255],
                [0, 255, 255],
                [0, 255, 0],
                [255, 255, 0],
                [255, 0, 0],
            ],
            detection: vec!["building".into(), "tree".into(), "car".into()],
            ignore_color: Some([0, 0, 0]),
            min_area: DEFAULT_MIN_AREA,
        }
    }
}

impl ClassTable {
    pub fn validate(&self) -> Result<()> {
        if self.names.is_empty() || self.names.len() > 255 {
            return Err(Error::Config(format!(
                "class table must have 1..=255 classes, got {}",
                self.names.len()
            )));
        }
        if self.names.len() != self.colors.len() {
            return Err(Error::Config(format!(
                "class table has {} names but {} colours",
                self.names.len(),
                self.colors.len()
            )));
        }
        for (i, c) in self.colors.iter().enumerate() {
            if self.colors[..i].contains(c) || Some(*c) == self.ignore_color {
                return Err(Error::Config(format!("duplicate class colour {c:?}")));
            }
        }
        if self.detection.is_empty() {
            return Err(Error::Config("no detection classes selected".into()));
        }
        self.detection_indices().map(|_| ())
    }

    pub fn class_count(&self) -> u8 {
        self.names.len() as u8
    }

    /// Segmentation indices of the detection classes, in detection order.
    pub fn detection_indices(&self) -> Result<Vec<u8>> {
        self.detection
            .iter()
            .map(|d| {
                self.names
                    .iter()
                    .position(|n| n == d)
                    .map(|p| p as u8)
                    .ok_or_else(|| Error::Config(format!("detection class `{d}` not in class table")))
            })
            .collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::MissingFile {
            path: path.to_path_buf(),
            what: e.to_string(),
        })?;
        let table: ClassTable = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        table.validate()?;
        Ok(table)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("class table serializes")
    }
}
