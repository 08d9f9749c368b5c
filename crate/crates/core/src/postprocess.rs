//! Removal of small positive components ("sprinkles") from binary masks.

use crate::grid::Mask;

pub const MIN_AREA_FRACTION: f64 = 0.001;

/// Label 8-connected components of nonzero pixels. Returns per-pixel labels
/// (0 = background, components numbered from 1 in scan order) and each
/// component's area, indexed by `label - 1`.
pub fn label_components(mask: &Mask) -> (Vec<u32>, Vec<usize>) {
    let (h, w) = (mask.height(), mask.width());
    let mut labels = vec![0u32; h * w];
    let mut areas = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if mask.data()[start] == 0 || labels[start] != 0 {
            continue;
        }
        let label = areas.len() as u32 + 1;
        labels[start] = label;
        stack.push(start);
        let mut area = 0;
        while let Some(i) = stack.pop() {
            area += 1;
            let (r, c) = ((i / w) as i64, (i % w) as i64);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (nr, nc) = (r + dr, c + dc);
                    if (dr, dc) == (0, 0) || !mask.contains(nr, nc) {
                        continue;
                    }
                    let j = nr as usize * w + nc as usize;
                    if mask.data()[j] != 0 && labels[j] == 0 {
                        labels[j] = label;
                        stack.push(j);
                    }
                }
            }
        }
        areas.push(area);
    }
    (labels, areas)
}

/// Drop 8-connected positive components with area below
/// `min_area_fraction * H * W`. Holes are left alone.
pub fn postprocess(mask: &Mask, min_area_fraction: f64) -> Mask {
    let cutoff = min_area_fraction * mask.len() as f64;
    let (labels, areas) = label_components(mask);
    let mut out = mask.map(|&v| (v != 0) as u8);
    for (px, &l) in out.data_mut().iter_mut().zip(&labels) {
        if l != 0 && (areas[l as usize - 1] as f64) < cutoff {
            *px = 0;
        }
    }
    out
}
