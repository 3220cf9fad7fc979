use super::{BBox, BoxSet, LabelMap};

/// One box per 8-connected blob of each selected class.
///
/// `class_id` of each box is the position of its class in `selected`.
/// Ignored pixels belong to no blob. Blobs with fewer than `min_area`
/// pixels are dropped. Boxes come out in raster order of each blob's first
/// pixel.
pub fn mask_to_boxes(labels: &LabelMap, selected: &[u8], min_area: usize) -> BoxSet {
    let (h, w) = (labels.height(), labels.width());
    let mut visited = vec![false; h * w];
    let mut stack = Vec::new();
    let mut out = Vec::new();
    for start in 0..h * w {
        if visited[start] || labels.ignore()[start] {
            continue;
        }
        let class = labels.classes()[start];
        let Some(det_id) = selected.iter().position(|&c| c == class) else {
            continue;
        };
        visited[start] = true;
        stack.push(start);
        let (mut r0, mut c0, mut r1, mut c1) = (usize::MAX, usize::MAX, 0, 0);
        let mut area = 0usize;
        while let Some(p) = stack.pop() {
            let (r, c) = (p / w, p % w);
            area += 1;
            r0 = r0.min(r);
            r1 = r1.max(r);
            c0 = c0.min(c);
            c1 = c1.max(c);
            for dr in -1isize..=1 {
                for dc in -1isize..=1 {
                    let (nr, nc) = (r as isize + dr, c as isize + dc);
                    if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                        continue;
                    }
                    let q = nr as usize * w + nc as usize;
                    if !visited[q] && !labels.ignore()[q] && labels.classes()[q] == class {
                        visited[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
        if area >= min_area {
            out.push(BBox::new(
                det_id,
                c0 as f32,
                r0 as f32,
                (c1 + 1) as f32,
                (r1 + 1) as f32,
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn background_only_gives_no_boxes() {
        let m = LabelMap::filled(32, 32, 0, 6).unwrap();
        assert!(mask_to_boxes(&m, &[1, 3, 4], 1).is_empty());
    }

    #[test]
    fn square_hull_is_itself() {
        let mut m = LabelMap::filled(32, 32, 0, 6).unwrap();
        for r in 5..15 {
            for c in 5..15 {
                m.set(r, c, 1);
            }
        }
        let boxes = mask_to_boxes(&m, &[1, 3, 4], 1);
        assert_eq!(boxes, vec![BBox::new(0, 5.0, 5.0, 15.0, 15.0)]);
    }

    #[test]
    fn diagonal_pixels_merge_under_8_connectivity() {
        let mut m = LabelMap::filled(4, 4, 0, 6).unwrap();
        m.set(0, 0, 4);
        m.set(1, 1, 4);
        m.set(2, 2, 4);
        let boxes = mask_to_boxes(&m, &[4], 1);
        assert_eq!(boxes, vec![BBox::new(0, 0.0, 0.0, 3.0, 3.0)]);
    }

    #[test]
    fn min_area_filters_small_blobs() {
        let mut m = LabelMap::filled(8, 8, 0, 6).unwrap();
        m.set(1, 1, 3);
        for c in 3..7 {
            for r in 3..6 {
                m.set(r, c, 3);
            }
        }
        let boxes = mask_to_boxes(&m, &[1, 3], 2);
        assert_eq!(boxes, vec![BBox::new(1, 3.0, 3.0, 7.0, 6.0)]);
    }

    #[test]
    fn ignored_pixels_split_blobs() {
        let mut m = LabelMap::filled(1, 5, 1, 6).unwrap();
        m.set_ignored(0, 2);
        let boxes = mask_to_boxes(&m, &[1], 1);
        assert_eq!(boxes.len(), 2);
    }
}
