//! Turning large annotated tiles (ISPRS-style) into a chip dataset.

use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::manifest::{write_atomic, ChannelStats, DatasetManifest, ManifestEntry, Split};
use super::{encode_label_image, window_offsets, ClassTable, LabelMap, Task};
use crate::error::{Error, Result};

/// Split and cropping definition, read from a TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestConfig {
    pub task: Task,
    pub chip_size: usize,
    pub stride: usize,
    /// Tile image directory (relative paths resolve against the data root).
    pub images: PathBuf,
    pub labels: PathBuf,
    /// Label file stem = image stem with `label_from` replaced by `label_to`.
    pub label_from: String,
    pub label_to: String,
    /// Image stems whose chips form the validation split; all others train.
    pub val_tiles: Vec<String>,
    /// Map off-palette label colours to the nearest class colour instead of
    /// failing.
    pub snap_colors: bool,
    /// Chip counts to compare against, if known.
    pub expected_train: Option<usize>,
    pub expected_val: Option<usize>,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            task: Task::Segmentation,
            chip_size: 320,
            stride: 320,
            images: "top".into(),
            labels: "gts".into(),
            label_from: String::new(),
            label_to: String::new(),
            val_tiles: Vec::new(),
            snap_colors: false,
            expected_train: None,
            expected_val: None,
        }
    }
}

impl IngestConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|_| Error::MissingFile {
            path: path.to_path_buf(),
            what: "split config".into(),
        })?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub train_chips: usize,
    pub val_chips: usize,
    pub train_tiles: Vec<String>,
    pub val_tiles: Vec<String>,
    pub snapped_pixels: u64,
    /// Differences from the expected chip counts, if any were given.
    pub deviations: Vec<String>,
}

fn nearest_class(table: &ClassTable, c: [u8; 3]) -> Option<u8> {
    if table.ignore_color == Some(c) {
        return None;
    }
    let d = |p: &[u8; 3]| (0..3).map(|k| (p[k] as i32 - c[k] as i32).pow(2)).sum::<i32>();
    let best = (0..table.colors.len()).min_by_key(|&i| d(&table.colors[i])).unwrap_or(0);
    match table.ignore_color {
        Some(ig) if d(&ig) < d(&table.colors[best]) => None,
        _ => Some(best as u8),
    }
}

fn decode_tile_labels(img: &RgbImage, table: &ClassTable, snap: bool, snapped: &mut u64) -> Result<LabelMap> {
    if !snap {
        return super::rgb_to_label_map(img, table);
    }
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut lm = LabelMap::filled(h, w, 0, table.class_count())?;
    for (i, px) in img.pixels().enumerate() {
        let (r, c) = (i / w, i % w);
        let exact = table.colors.iter().position(|k| *k == px.0);
        match exact {
            Some(k) => lm.set(r, c, k as u8),
            None => {
                if table.ignore_color != Some(px.0) {
                    *snapped += 1;
                }
                match nearest_class(table, px.0) {
                    Some(k) => lm.set(r, c, k),
                    None => lm.set_ignored(r, c),
                }
            }
        }
    }
    Ok(lm)
}

fn tile_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|_| Error::MissingFile {
            path: dir.to_path_buf(),
            what: "tile directory".into(),
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "tif" | "tiff" | "png"))
        })
        .collect();
    out.sort();
    Ok(out)
}

fn find_label(dir: &Path, stem: &str) -> Option<PathBuf> {
    ["tif", "tiff", "png"]
        .iter()
        .map(|e| dir.join(format!("{stem}.{e}")))
        .find(|p| p.is_file())
}

/// Crop every tile under `data_root` into `out_root` following `cfg`.
pub fn ingest_tiles(data_root: &Path, cfg: &IngestConfig, out_root: &Path) -> Result<IngestSummary> {
    if cfg.chip_size == 0 || cfg.stride == 0 {
        return Err(Error::Config("chip_size and stride must be positive".into()));
    }
    let table = ClassTable::default();
    let image_dir = data_root.join(&cfg.images);
    let label_dir = data_root.join(&cfg.labels);
    let tiles = tile_files(&image_dir)?;
    if tiles.is_empty() {
        return Err(Error::Data(format!("no tiles in {}", image_dir.display())));
    }
    std::fs::create_dir_all(out_root)?;
    write_atomic(&out_root.join("classes.toml"), table.to_toml().as_bytes())?;
    let mut summary = IngestSummary::default();
    let mut entries: [Vec<ManifestEntry>; 2] = [Vec::new(), Vec::new()];
    let mut stats = ChannelStats::accumulator();
    for tile in &tiles {
        let stem = tile.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let label_stem = if cfg.label_from.is_empty() {
            stem.clone()
        } else {
            stem.replace(&cfg.label_from, &cfg.label_to)
        };
        let label_path = find_label(&label_dir, &label_stem).ok_or_else(|| Error::MissingFile {
            path: label_dir.join(&label_stem),
            what: format!("labels for tile {stem}"),
        })?;
        let img = image::open(tile).map_err(|e| Error::Data(format!("{}: {e}", tile.display())))?.to_rgb8();
        let lab_img = image::open(&label_path)
            .map_err(|e| Error::Data(format!("{}: {e}", label_path.display())))?
            .to_rgb8();
        if img.dimensions() != lab_img.dimensions() {
            return Err(Error::Data(format!("tile {stem}: image and label sizes differ")));
        }
        let labels = decode_tile_labels(&lab_img, &table, cfg.snap_colors, &mut summary.snapped_pixels)
            .map_err(|e| Error::Data(format!("{}: {e}", label_path.display())))?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        if w < cfg.chip_size || h < cfg.chip_size {
            return Err(Error::Data(format!("tile {stem} is smaller than one chip")));
        }
        let is_val = cfg.val_tiles.iter().any(|v| *v == stem);
        let split = if is_val { Split::Val } else { Split::Train };
        if is_val {
            summary.val_tiles.push(stem.clone());
        } else {
            summary.train_tiles.push(stem.clone());
        }
        let dir = out_root.join(split.as_str());
        std::fs::create_dir_all(dir.join("images"))?;
        std::fs::create_dir_all(dir.join("labels"))?;
        for &r in &window_offsets(h, cfg.chip_size, cfg.stride) {
            for &c in &window_offsets(w, cfg.chip_size, cfg.stride) {
                let chip = image::imageops::crop_imm(&img, c as u32, r as u32, cfg.chip_size as u32, cfg.chip_size as u32)
                    .to_image();
                let lm = labels.crop(r, c, cfg.chip_size, cfg.chip_size);
                let name = format!("{stem}_{r:05}_{c:05}");
                let image_rel = format!("{}/images/{name}.png", split.as_str());
                let label_rel = format!("{}/labels/{name}.png", split.as_str());
                let mut png = std::io::Cursor::new(Vec::new());
                chip.write_to(&mut png, image::ImageFormat::Png)?;
                write_atomic(&out_root.join(&image_rel), png.get_ref())?;
                write_atomic(&out_root.join(&label_rel), &encode_label_image(&lm, &table)?)?;
                if split == Split::Train {
                    stats.add_rgb(&chip);
                }
                entries[is_val as usize].push(ManifestEntry {
                    image: image_rel,
                    annotation: label_rel,
                    task: cfg.task,
                });
            }
        }
    }
    for v in &cfg.val_tiles {
        if !summary.val_tiles.contains(v) {
            return Err(Error::Config(format!("val tile `{v}` not found in {}", image_dir.display())));
        }
    }
    summary.train_chips = entries[0].len();
    summary.val_chips = entries[1].len();
    for (split, e) in [(Split::Train, &entries[0]), (Split::Val, &entries[1])] {
        DatasetManifest {
            split,
            task: cfg.task,
            entries: e.clone(),
            class_names: table.names.clone(),
        }
        .write(out_root)?;
    }
    stats.finish().write(out_root)?;
    for (what, want, have) in [
        ("train", cfg.expected_train, summary.train_chips),
        ("val", cfg.expected_val, summary.val_chips),
    ] {
        if let Some(want) = want {
            if want != have {
                summary
                    .deviations
                    .push(format!("{what}: expected {want} chips, produced {have}"));
            }
        }
    }
    write_atomic(&out_root.join("ingest.json"), &serde_json::to_vec_pretty(&summary)?)?;
    Ok(summary)
}

/// Export a mask-annotated dataset as a box-annotated detection dataset.
///
/// Images are copied, every label image becomes a JSON box list, and
/// the class table and channel statistics carry over. Returns the number
/// of chips and boxes written.
pub fn derive_box_dataset(src: &Path, out: &Path, min_area: Option<usize>) -> Result<(usize, usize)> {
    let mut table = super::manifest::load_class_table(src)?;
    if let Some(a) = min_area {
        table.min_area = a;
    }
    let det_idx = table.detection_indices()?;
    std::fs::create_dir_all(out)?;
    write_atomic(&out.join("classes.toml"), table.to_toml().as_bytes())?;
    ChannelStats::load(src)?.write(out)?;
    let (mut chips, mut boxes) = (0, 0);
    for split in [Split::Train, Split::Val] {
        let manifest = DatasetManifest::load(src, split)?;
        let dir = out.join(split.as_str());
        std::fs::create_dir_all(dir.join("images"))?;
        std::fs::create_dir_all(dir.join("boxes"))?;
        let mut entries = Vec::with_capacity(manifest.entries.len());
        for e in &manifest.entries {
            if e.annotation.ends_with(".json") {
                return Err(Error::Data(format!("{} is not a label image", e.annotation)));
            }
            let lm = super::decode_label_image(&std::fs::read(src.join(&e.annotation))?, &table)
                .map_err(|err| Error::Data(format!("{}: {err}", e.annotation)))?;
            let b = super::mask_to_boxes(&lm, &det_idx, table.min_area);
            let stem = Path::new(&e.image)
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("chip")
                .to_string();
            let ext = Path::new(&e.image).extension().and_then(|s| s.to_str()).unwrap_or("png");
            let image_rel = format!("{}/images/{stem}.{ext}", split.as_str());
            let boxes_rel = format!("{}/boxes/{stem}.json", split.as_str());
            write_atomic(&out.join(&image_rel), &std::fs::read(src.join(&e.image))?)?;
            write_atomic(&out.join(&boxes_rel), &serde_json::to_vec(&b)?)?;
            boxes += b.len();
            chips += 1;
            entries.push(ManifestEntry {
                image: image_rel,
                annotation: boxes_rel,
                task: Task::Detection,
            });
        }
        DatasetManifest {
            split,
            task: Task::Detection,
            entries,
            class_names: table.names.clone(),
        }
        .write(out)?;
    }
    Ok((chips, boxes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_tiles_are_cropped_and_split() {
        let root = tempfile::tempdir().unwrap();
        let table = ClassTable::default();
        std::fs::create_dir_all(root.path().join("top")).unwrap();
        std::fs::create_dir_all(root.path().join("gts")).unwrap();
        for (name, w, h) in [("a_RGB", 100u32, 70u32), ("b_RGB", 64, 64)] {
            let img = RgbImage::from_pixel(w, h, image::Rgb([10, 20, 30]));
            img.save(root.path().join("top").join(format!("{name}.png"))).unwrap();
            let mut lab = RgbImage::from_pixel(w, h, image::Rgb(table.colors[1]));
            lab.put_pixel(0, 0, image::Rgb([250, 250, 250]));
            lab.save(root.path().join("gts").join(format!("{}.png", name.replace("_RGB", "_label")))).unwrap();
        }
        let cfg = IngestConfig {
            chip_size: 32,
            stride: 32,
            label_from: "_RGB".into(),
            label_to: "_label".into(),
            val_tiles: vec!["b_RGB".into()],
            expected_train: Some(12),
            expected_val: Some(5),
            ..Default::default()
        };
        let out = root.path().join("out");
        assert!(ingest_tiles(root.path(), &cfg, &out).is_err(), "off-palette colour must fail without snapping");
        let cfg = IngestConfig {
            snap_colors: true,
            ..cfg
        };
        let s = ingest_tiles(root.path(), &cfg, &out).unwrap();
        // 100x70 tile: 4 column windows x 3 row windows; 64x64: 2x2
        assert_eq!((s.train_chips, s.val_chips), (12, 4));
        assert_eq!(s.snapped_pixels, 2);
        assert_eq!(s.deviations, vec!["val: expected 5 chips, produced 4".to_string()]);
        let ds = crate::data::load_dataset(&out, Split::Train).unwrap();
        assert_eq!(ds.len(), 12);
    }

    #[test]
    fn derived_boxes_match_load_time_derivation() {
        let root = tempfile::tempdir().unwrap();
        let seg = root.path().join("seg");
        let cfg = crate::data::SyntheticConfig {
            task: Task::Segmentation,
            ..Default::default()
        };
        crate::data::make_synthetic_dataset(&seg, 3, 4, 2, &cfg).unwrap();
        let det = root.path().join("det");
        let (chips, _) = derive_box_dataset(&seg, &det, None).unwrap();
        assert_eq!(chips, 6);
        let a = crate::data::load_dataset(&seg, Split::Val).unwrap();
        let b = crate::data::load_dataset(&det, Split::Val).unwrap();
        assert_eq!(b.task, Task::Detection);
        assert_eq!(a.boxes, b.boxes);
        assert_eq!(a.images, b.images);
    }
}
