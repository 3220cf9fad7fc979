//! Procedural aerial-like chips: vegetation background, roads, and
//! non-touching buildings, trees and cars with exact box records.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{write_atomic, ChannelStats, DatasetManifest, ManifestEntry, Split};
use super::{encode_label_image, BBox, BoxSet, ClassTable, LabelMap, Task};
use crate::error::{Error, Result};

const IMPERVIOUS: u8 = 0;
const BUILDING: u8 = 1;
const LOW_VEG: u8 = 2;
const TREE: u8 = 3;
const CAR: u8 = 4;
const CLUTTER: u8 = 5;

/// Sensor composition imitated by the generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticStyle {
    /// Red-green-blue, like Potsdam.
    Rgb,
    /// Infrared-red-green, like Vaihingen (vegetation appears red).
    Irrg,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub chip_size: usize,
    /// Task the emitted manifests are annotated for.
    pub task: Task,
    pub style: SyntheticStyle,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Per-pixel noise amplitude in [0, 1] intensity units.
    pub noise: f32,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            chip_size: 64,
            task: Task::Detection,
            style: SyntheticStyle::Rgb,
            min_objects: 2,
            max_objects: 5,
            noise: 0.05,
        }
    }
}

/// One generated chip with its dense labels and the generator's own record
/// of the detection boxes it drew.
#[derive(Clone, Debug)]
pub struct SyntheticSample {
    pub image: RgbImage,
    pub labels: LabelMap,
    pub boxes: BoxSet,
}

fn base_color(class: u8, variant: usize, style: SyntheticStyle) -> [f32; 3] {
    let rgb: [f32; 3] = match class {
        IMPERVIOUS => [150.0, 148.0, 142.0],
        BUILDING => [[185.0, 80.0, 60.0], [205.0, 125.0, 95.0], [120.0, 62.0, 52.0]][variant % 3],
        LOW_VEG => [112.0, 160.0, 72.0],
        TREE => [34.0, 88.0, 40.0],
        CAR => [
            [225.0, 40.0, 40.0],
            [40.0, 62.0, 205.0],
            [242.0, 242.0, 236.0],
            [28.0, 28.0, 32.0],
        ][variant % 4],
        _ => [142.0, 60.0, 160.0],
    };
    match style {
        SyntheticStyle::Rgb => rgb,
        SyntheticStyle::Irrg => {
            let ir = match class {
                LOW_VEG => 212.0,
                TREE => 186.0,
                BUILDING => 118.0 + 20.0 * (variant % 3) as f32,
                CAR => 96.0 + 30.0 * (variant % 4) as f32,
                IMPERVIOUS => 124.0,
                _ => 132.0,
            };
            [ir, rgb[0], rgb[1]]
        }
    }
}

struct Canvas {
    size: usize,
    labels: Vec<u8>,
    variant: Vec<u8>,
    reserved: Vec<bool>,
}

impl Canvas {
    /// True if no pixel of `pixels` (expanded by one pixel) is reserved.
    fn is_free(&self, pixels: &[(usize, usize)]) -> bool {
        pixels.iter().all(|&(r, c)| {
            let r0 = r.saturating_sub(1);
            let c0 = c.saturating_sub(1);
            (r0..=(r + 1).min(self.size - 1))
                .all(|rr| (c0..=(c + 1).min(self.size - 1)).all(|cc| !self.reserved[rr * self.size + cc]))
        })
    }

    fn paint(&mut self, pixels: &[(usize, usize)], class: u8, variant: u8) {
        for &(r, c) in pixels {
            let i = r * self.size + c;
            self.labels[i] = class;
            self.variant[i] = variant;
            self.reserved[i] = true;
        }
    }
}

fn rect(r0: usize, c0: usize, h: usize, w: usize) -> Vec<(usize, usize)> {
    (r0..r0 + h)
        .flat_map(|r| (c0..c0 + w).map(move |c| (r, c)))
        .collect()
}

fn disc(cr: usize, cc: usize, radius: usize) -> Vec<(usize, usize)> {
    let rr = radius as isize;
    let mut out = Vec::new();
    for dr in -rr..=rr {
        for dc in -rr..=rr {
            if dr * dr + dc * dc <= rr * rr {
                out.push(((cr as isize + dr) as usize, (cc as isize + dc) as usize));
            }
        }
    }
    out
}

fn hull(pixels: &[(usize, usize)], det_class: usize) -> BBox {
    let r0 = pixels.iter().map(|p| p.0).min().unwrap();
    let r1 = pixels.iter().map(|p| p.0).max().unwrap();
    let c0 = pixels.iter().map(|p| p.1).min().unwrap();
    let c1 = pixels.iter().map(|p| p.1).max().unwrap();
    BBox::new(det_class, c0 as f32, r0 as f32, (c1 + 1) as f32, (r1 + 1) as f32)
}

/// Deterministically generate one chip from `seed`.
pub fn generate_chip(seed: u64, cfg: &SyntheticConfig) -> SyntheticSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.chip_size;
    let mut canvas = Canvas {
        size: n,
        labels: vec![LOW_VEG; n * n],
        variant: vec![0; n * n],
        reserved: vec![false; n * n],
    };
    // roads
    let roads = rng.random_range(0..=2usize);
    for _ in 0..roads {
        let width = rng.random_range(n / 10..=n / 5).max(3);
        let pos = rng.random_range(0..n - width);
        let horizontal = rng.random_bool(0.5);
        for a in 0..n {
            for b in pos..pos + width {
                let (r, c) = if horizontal { (b, a) } else { (a, b) };
                canvas.labels[r * n + c] = IMPERVIOUS;
            }
        }
    }

    let mut boxes = Vec::new();
    let n_obj = rng.random_range(cfg.min_objects..=cfg.max_objects.max(cfg.min_objects));
    let scale = n as f32 / 64.0;
    let sz = |v: f32| ((v * scale).round() as usize).max(2);
    for _ in 0..n_obj {
        let kind = rng.random_range(0..10u32);
        for _attempt in 0..40 {
            let (class, pixels, variant) = match kind {
                0..=3 => {
                    let h = rng.random_range(sz(10.0)..=sz(22.0));
                    let w = rng.random_range(sz(10.0)..=sz(22.0));
                    let r0 = rng.random_range(1..n - h - 1);
                    let c0 = rng.random_range(1..n - w - 1);
                    let mut px = rect(r0, c0, h, w);
                    if rng.random_bool(0.35) {
                        // L-shape: remove one corner quadrant
                        let (qh, qw) = (h / 2, w / 2);
                        let top = rng.random_bool(0.5);
                        let left = rng.random_bool(0.5);
                        px.retain(|&(r, c)| {
                            let in_r = if top { r < r0 + qh } else { r >= r0 + h - qh };
                            let in_c = if left { c < c0 + qw } else { c >= c0 + w - qw };
                            !(in_r && in_c)
                        });
                    }
                    (BUILDING, px, rng.random_range(0..3u8))
                }
                4..=6 => {
                    let radius = rng.random_range(sz(4.0)..=sz(8.0));
                    let cr = rng.random_range(radius + 1..n - radius - 1);
                    let cc = rng.random_range(radius + 1..n - radius - 1);
                    (TREE, disc(cr, cc, radius), 0)
                }
                7..=8 => {
                    let (long, short) = (sz(11.0), sz(6.0));
                    let (h, w) = if rng.random_bool(0.5) { (long, short) } else { (short, long) };
                    let r0 = rng.random_range(1..n - h - 1);
                    let c0 = rng.random_range(1..n - w - 1);
                    (CAR, rect(r0, c0, h, w), rng.random_range(0..4u8))
                }
                _ => {
                    let radius = sz(2.0).min(3);
                    let cr = rng.random_range(radius + 1..n - radius - 1);
                    let cc = rng.random_range(radius + 1..n - radius - 1);
                    (CLUTTER, disc(cr, cc, radius), 0)
                }
            };
            if canvas.is_free(&pixels) {
                canvas.paint(&pixels, class, variant);
                let det = match class {
                    BUILDING => Some(0),
                    TREE => Some(1),
                    CAR => Some(2),
                    _ => None,
                };
                if let Some(d) = det {
                    boxes.push((pixels.iter().map(|p| p.0 * n + p.1).min().unwrap(), hull(&pixels, d)));
                }
                break;
            }
        }
    }
    // raster order of first pixel, matching mask_to_boxes
    boxes.sort_by_key(|(first, _)| *first);
    let boxes = boxes.into_iter().map(|(_, b)| b).collect();

    let brightness = rng.random_range(0.9f32..1.1);
    let mut image = RgbImage::new(n as u32, n as u32);
    for r in 0..n {
        for c in 0..n {
            let i = r * n + c;
            let base = base_color(canvas.labels[i], canvas.variant[i] as usize, cfg.style);
            let mut px = [0u8; 3];
            for ch in 0..3 {
                let noise = (rng.random::<f32>() - 0.5) * 2.0 * cfg.noise * 255.0;
                px[ch] = (base[ch] * brightness + noise).clamp(0.0, 255.0) as u8;
            }
            image.put_pixel(c as u32, r as u32, Rgb(px));
        }
    }
    let labels = LabelMap::new(n, n, canvas.labels, vec![false; n * n], 6)
        .expect("generator emits valid classes");
    SyntheticSample {
        image,
        labels,
        boxes,
    }
}

fn chip_seed(seed: u64, split: Split, index: usize) -> u64 {
    let salt = match split {
        Split::Train => 0x7472_6169_6e00_0000u64,
        Split::Val => 0x7661_6c00_0000_0000u64,
    };
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt ^ (index as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

/// Write a synthetic train/val dataset under `root` and return its manifests.
pub fn make_synthetic_dataset(
    root: &Path,
    seed: u64,
    n_train: usize,
    n_val: usize,
    cfg: &SyntheticConfig,
) -> Result<(DatasetManifest, DatasetManifest)> {
    if n_train == 0 || n_val == 0 {
        return Err(Error::InvalidInput("n_train and n_val must be positive".into()));
    }
    if cfg.chip_size < 32 {
        return Err(Error::InvalidInput("synthetic chip size must be at least 32".into()));
    }
    let table = ClassTable::default();
    std::fs::create_dir_all(root)?;
    write_atomic(&root.join("classes.toml"), table.to_toml().as_bytes())?;
    let mut manifests = Vec::new();
    let mut stats_acc = ChannelStats::accumulator();
    for (split, count) in [(Split::Train, n_train), (Split::Val, n_val)] {
        let dir = root.join(split.as_str());
        for sub in ["images", "labels", "boxes"] {
            std::fs::create_dir_all(dir.join(sub))?;
        }
        let mut entries = Vec::with_capacity(count);
        for i in 0..count {
            let sample = generate_chip(chip_seed(seed, split, i), cfg);
            let name = format!("{:05}", i);
            let image_rel = format!("{}/images/{name}.png", split.as_str());
            let label_rel = format!("{}/labels/{name}.png", split.as_str());
            let boxes_rel = format!("{}/boxes/{name}.json", split.as_str());
            let mut png = std::io::Cursor::new(Vec::new());
            sample.image.write_to(&mut png, image::ImageFormat::Png)?;
            write_atomic(&root.join(&image_rel), png.get_ref())?;
            write_atomic(
                &root.join(&label_rel),
                &encode_label_image(&sample.labels, &table)?,
            )?;
            write_atomic(&root.join(&boxes_rel), &serde_json::to_vec(&sample.boxes)?)?;
            if split == Split::Train {
                stats_acc.add_rgb(&sample.image);
            }
            entries.push(ManifestEntry {
                image: image_rel,
                annotation: match cfg.task {
                    Task::Detection => boxes_rel,
                    Task::Segmentation => label_rel,
                },
                task: cfg.task,
            });
        }
        let manifest = DatasetManifest {
            split,
            task: cfg.task,
            entries,
            class_names: table.names.clone(),
        };
        manifest.write(root)?;
        manifests.push(manifest);
    }
    stats_acc.finish().write(root)?;
    let val = manifests.pop().unwrap();
    let train = manifests.pop().unwrap();
    Ok((train, val))
}
