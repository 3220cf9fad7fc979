use std::collections::BTreeMap;
use std::io::Cursor;

use image::{ImageFormat, RgbImage};

use super::{ClassTable, LabelMap};
use crate::error::{Error, Result};

/// Colour image → label map using the class table palette.
pub fn rgb_to_label_map(img: &RgbImage, table: &ClassTable) -> Result<LabelMap> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut classes = Vec::with_capacity(w * h);
    let mut ignore = Vec::with_capacity(w * h);
    let mut unknown: BTreeMap<[u8; 3], usize> = BTreeMap::new();
    let mut first_unknown = None;
    for px in img.pixels() {
        let c = px.0;
        if let Some(i) = table.colors.iter().position(|k| *k == c) {
            classes.push(i as u8);
            ignore.push(false);
        } else if Some(c) == table.ignore_color {
            classes.push(0);
            ignore.push(true);
        } else {
            first_unknown.get_or_insert(c);
            *unknown.entry(c).or_default() += 1;
            classes.push(0);
            ignore.push(true);
        }
    }
    if let Some(color) = first_unknown {
        return Err(Error::UnknownColor {
            color,
            count: unknown[&color],
        });
    }
    LabelMap::new(h, w, classes, ignore, table.class_count())
}

pub fn label_map_to_rgb(labels: &LabelMap, table: &ClassTable) -> Result<RgbImage> {
    if labels.class_count() as usize > table.colors.len() {
        return Err(Error::InvalidInput(format!(
            "label map has {} classes but the palette only {}",
            labels.class_count(),
            table.colors.len()
        )));
    }
    let ignore_color = table.ignore_color;
    if ignore_color.is_none() && labels.ignore().iter().any(|&i| i) {
        return Err(Error::InvalidInput(
            "label map has ignored pixels but the palette has no ignore colour".into(),
        ));
    }
    let mut img = RgbImage::new(labels.width() as u32, labels.height() as u32);
    for (i, px) in img.pixels_mut().enumerate() {
        px.0 = if labels.ignore()[i] {
            ignore_color.unwrap_or_default()
        } else {
            table.colors[labels.classes()[i] as usize]
        };
    }
    Ok(img)
}

/// Decode a colour-coded label PNG (or any format `image` can sniff).
pub fn decode_label_image(bytes: &[u8], table: &ClassTable) -> Result<LabelMap> {
    let img = image::load_from_memory(bytes)?.to_rgb8();
    rgb_to_label_map(&img, table)
}

/// Encode a label map as a colour-coded PNG.
pub fn encode_label_image(labels: &LabelMap, table: &ClassTable) -> Result<Vec<u8>> {
    let img = label_map_to_rgb(labels, table)?;
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}
