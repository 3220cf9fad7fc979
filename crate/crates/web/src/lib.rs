//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every function returns plain bytes or strings so the page needs no
//! glue beyond what `wasm-bindgen` generates.

use pmtl::data::synthetic::{generate_chip, SyntheticConfig, SyntheticSample, SyntheticStyle};
use pmtl::data::{ClassTable, LabelMap};
use pmtl::eval::erode_valid_mask;
use pmtl::loss::focal_term;
use pmtl::report::line_plot_svg;
use wasm_bindgen::prelude::*;

fn sample(seed: u32, size: u32, irrg: bool) -> SyntheticSample {
    let cfg = SyntheticConfig {
        chip_size: size.clamp(32, 256) as usize,
        style: if irrg { SyntheticStyle::Irrg } else { SyntheticStyle::Rgb },
        ..Default::default()
    };
    generate_chip(seed as u64, &cfg)
}

fn put(rgba: &mut [u8], w: usize, x: usize, y: usize, c: [u8; 3]) {
    let i = (y * w + x) * 4;
    rgba[i..i + 3].copy_from_slice(&c);
}

/// RGBA pixels of a synthetic chip with its boxes outlined in yellow.
#[wasm_bindgen]
pub fn chip_rgba(seed: u32, size: u32, irrg: bool) -> Vec<u8> {
    let s = sample(seed, size, irrg);
    let (w, h) = (s.image.width() as usize, s.image.height() as usize);
    let mut out: Vec<u8> = s.image.pixels().flat_map(|p| [p[0], p[1], p[2], 255]).collect();
    for b in &s.boxes {
        let x0 = (b.x_min.floor().max(0.0) as usize).min(w - 1);
        let y0 = (b.y_min.floor().max(0.0) as usize).min(h - 1);
        let x1 = (b.x_max.ceil() as usize).clamp(1, w) - 1;
        let y1 = (b.y_max.ceil() as usize).clamp(1, h) - 1;
        for x in x0..=x1 {
            put(&mut out, w, x, y0, [255, 230, 0]);
            put(&mut out, w, x, y1, [255, 230, 0]);
        }
        for y in y0..=y1 {
            put(&mut out, w, x0, y, [255, 230, 0]);
            put(&mut out, w, x1, y, [255, 230, 0]);
        }
    }
    out
}

/// Boxes of the same chip as a JSON array.
#[wasm_bindgen]
pub fn chip_boxes_json(seed: u32, size: u32, irrg: bool) -> String {
    let s = sample(seed, size, irrg);
    let table = ClassTable::default();
    let items: Vec<String> = s
        .boxes
        .iter()
        .map(|b| {
            format!(
                "{{\"class\":\"{}\",\"box\":[{:.1},{:.1},{:.1},{:.1}]}}",
                table.detection.get(b.class_id).map_or("?", |n| n.as_str()),
                b.x_min,
                b.y_min,
                b.x_max,
                b.y_max
            )
        })
        .collect();
    format!("[{}]", items.join(","))
}

fn erosion(labels: &LabelMap, radius: u32) -> (Vec<u8>, usize) {
    let table = ClassTable::default();
    let valid = erode_valid_mask(labels, radius as usize);
    let mut excluded = 0;
    let mut out = Vec::with_capacity(valid.len() * 4);
    for (i, ok) in valid.iter().enumerate() {
        let c = labels.get_index(i).map_or([0, 0, 0], |k| table.colors[k as usize]);
        if *ok {
            out.extend_from_slice(&[c[0], c[1], c[2], 255]);
        } else {
            excluded += 1;
            out.extend_from_slice(&[c[0] / 4, c[1] / 4, c[2] / 4, 255]);
        }
    }
    (out, excluded)
}

/// Label map of the chip with pixels dropped by boundary erosion darkened.
#[wasm_bindgen]
pub fn erosion_rgba(seed: u32, size: u32, radius: u32) -> Vec<u8> {
    erosion(&sample(seed, size, false).labels, radius).0
}

/// Number of pixels the erosion at `radius` removes from scoring.
#[wasm_bindgen]
pub fn erosion_excluded(seed: u32, size: u32, radius: u32) -> u32 {
    erosion(&sample(seed, size, false).labels, radius).1 as u32
}

/// SVG plot of the focal term of a positive anchor against its predicted
/// probability, for gamma = 0 and the chosen gamma.
#[wasm_bindgen]
pub fn focal_svg(alpha: f64, gamma: f64) -> String {
    let curve = |g: f64| -> Vec<(f64, f64)> {
        (1..100)
            .map(|i| {
                let p = i as f64 / 100.0;
                let z = (p / (1.0 - p)).ln();
                (p, focal_term(z, true, alpha, g).0)
            })
            .collect()
    };
    line_plot_svg(
        &format!("focal loss, alpha = {alpha:.2}"),
        &[("gamma = 0".into(), curve(0.0)), (format!("gamma = {gamma:.1}"), curve(gamma))],
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chip_is_rgba_sized() {
        assert_eq!(chip_rgba(3, 64, false).len(), 64 * 64 * 4);
        assert!(chip_boxes_json(3, 64, false).starts_with('['));
    }

    #[test]
    fn erosion_grows_with_radius() {
        let a = erosion_excluded(5, 64, 0);
        let b = erosion_excluded(5, 64, 2);
        assert_eq!(a, 0);
        assert!(b > a);
        assert_eq!(erosion_rgba(5, 64, 2).len(), 64 * 64 * 4);
    }

    #[test]
    fn focal_plot_has_two_series() {
        let svg = focal_svg(0.25, 2.0);
        assert!(svg.starts_with("<svg") || svg.starts_with("<?xml"));
        assert!(svg.contains("gamma = 2.0"));
    }
}
