use serde::{Deserialize, Serialize};

use super::LabelMap;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A fixed-size image crop; `image` is 3×H×W.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Chip {
    pub image: Tensor,
    pub source_tile: String,
    /// (row, col) of the chip's top-left corner in the source tile.
    pub offset: (usize, usize),
}

/// Window start positions along one axis; the last window is snapped so it
/// ends exactly at the tile edge.
pub fn window_offsets(len: usize, chip: usize, stride: usize) -> Vec<usize> {
    let count = (len - chip).div_ceil(stride) + 1;
    (0..count).map(|k| (k * stride).min(len - chip)).collect()
}

/// Cut a tile (3×H×W image plus labels) into `chip_size` squares.
pub fn crop_tiles(
    tile_id: &str,
    tile_image: &Tensor,
    tile_labels: &LabelMap,
    chip_size: usize,
    stride: usize,
) -> Result<Vec<(Chip, LabelMap)>> {
    let (c, h, w) = match tile_image.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::Shape(format!("tile image must be 3xHxW, got {s:?}"))),
    };
    if c != 3 {
        return Err(Error::Shape(format!("tile image must have 3 channels, got {c}")));
    }
    if (tile_labels.height(), tile_labels.width()) != (h, w) {
        return Err(Error::Shape(format!(
            "tile image is {h}x{w} but labels are {}x{}",
            tile_labels.height(),
            tile_labels.width()
        )));
    }
    if stride == 0 {
        return Err(Error::InvalidInput("stride must be at least 1".into()));
    }
    if chip_size == 0 || h < chip_size || w < chip_size {
        return Err(Error::InvalidInput(format!(
            "tile {tile_id} ({h}x{w}) is smaller than chip size {chip_size}"
        )));
    }
    let rows = window_offsets(h, chip_size, stride);
    let cols = window_offsets(w, chip_size, stride);
    let mut out = Vec::with_capacity(rows.len() * cols.len());
    for &r in &rows {
        for &cc in &cols {
            let mut data = Vec::with_capacity(3 * chip_size * chip_size);
            for ch in 0..3 {
                for y in r..r + chip_size {
                    let s = (ch * h + y) * w + cc;
                    data.extend_from_slice(&tile_image.data()[s..s + chip_size]);
                }
            }
            out.push((
                Chip {
                    image: Tensor::from_vec(&[3, chip_size, chip_size], data),
                    source_tile: tile_id.to_string(),
                    offset: (r, cc),
                },
                tile_labels.crop(r, cc, chip_size, chip_size),
            ));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tile(h: usize, w: usize) -> (Tensor, LabelMap) {
        let img = Tensor::from_vec(&[3, h, w], (0..3 * h * w).map(|v| v as f32).collect());
        let labels = LabelMap::new(
            h,
            w,
            (0..h * w).map(|v| (v % 6) as u8).collect(),
            vec![false; h * w],
            6,
        )
        .unwrap();
        (img, labels)
    }

    #[test]
    fn identity_case() {
        let (img, lab) = tile(320, 320);
        let chips = crop_tiles("t", &img, &lab, 320, 320).unwrap();
        assert_eq!(chips.len(), 1);
        assert_eq!(chips[0].0.offset, (0, 0));
        assert_eq!(chips[0].0.image, img);
    }

    #[test]
    fn edge_windows_snap_inward() {
        // 640 rows x 480 cols
        let (img, lab) = tile(640, 480);
        let chips = crop_tiles("t", &img, &lab, 320, 320).unwrap();
        let offsets: Vec<_> = chips.iter().map(|(c, _)| c.offset).collect();
        assert_eq!(offsets, vec![(0, 0), (0, 160), (320, 0), (320, 160)]);
        // chip content matches the tile at its offset
        let (chip, labels) = &chips[1];
        assert_eq!(chip.image.data()[0], img.data()[160]);
        assert_eq!(labels.get(0, 0), lab.get(0, 160));
    }

    #[test]
    fn small_tile_rejected() {
        let (img, lab) = tile(100, 400);
        assert!(matches!(
            crop_tiles("t", &img, &lab, 320, 320),
            Err(Error::InvalidInput(_))
        ));
    }

    proptest! {
        #[test]
        fn windows_cover_tile_and_count_matches(
            h in 8usize..60, w in 8usize..60, chip in 1usize..8, stride in 1usize..9,
        ) {
            prop_assume!(stride <= chip);
            let rows = window_offsets(h, chip, stride);
            let cols = window_offsets(w, chip, stride);
            let expect = |len: usize| ((len - chip) as f64 / stride as f64 + 1.0).ceil() as usize;
            prop_assert_eq!(rows.len(), expect(h));
            prop_assert_eq!(cols.len(), expect(w));
            let mut covered = vec![false; h];
            for &r in &rows {
                prop_assert!(r + chip <= h);
                covered[r..r + chip].iter_mut().for_each(|c| *c = true);
            }
            prop_assert!(covered.iter().all(|&c| c));
        }
    }
}
