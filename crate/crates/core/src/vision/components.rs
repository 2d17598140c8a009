use super::Mask;

/// A 4-connected blob. Coordinates are `(column, stored row)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub centroid: (f64, f64),
    pub area: usize,
    /// First pixel of the blob in row-major scan order.
    pub top_left: (usize, usize),
    pub pixels: Vec<(usize, usize)>,
}

/// All 4-connected components, ordered by their first pixel in row-major order.
pub fn components(mask: &Mask) -> Vec<Component> {
    let (w, h) = (mask.width, mask.height);
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !mask.bits[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut pixels = Vec::new();
        let (mut su, mut sv) = (0.0, 0.0);
        while let Some(i) = stack.pop() {
            let (col, row) = (i % w, i / w);
            pixels.push((col, row));
            su += col as f64;
            sv += row as f64;
            let mut visit = |j: usize| {
                if mask.bits[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if col > 0 {
                visit(i - 1);
            }
            if col + 1 < w {
                visit(i + 1);
            }
            if row > 0 {
                visit(i - w);
            }
            if row + 1 < h {
                visit(i + w);
            }
        }
        let area = pixels.len();
        out.push(Component {
            centroid: (su / area as f64, sv / area as f64),
            area,
            top_left: (start % w, start / w),
            pixels,
        });
    }
    out
}

/// Largest blob; equal areas go to the one whose first pixel comes first in row-major order.
pub fn largest_component(mask: &Mask) -> Option<Component> {
    let mut best: Option<Component> = None;
    for c in components(mask) {
        if best.as_ref().map_or(true, |b| c.area > b.area) {
            best = Some(c);
        }
    }
    best
}

/// Unweighted mean of every set pixel, regardless of connectivity.
pub fn mean_centroid(mask: &Mask) -> Option<(f64, f64)> {
    let (mut n, mut su, mut sv) = (0usize, 0.0, 0.0);
    for (i, on) in mask.bits.iter().enumerate() {
        if *on {
            n += 1;
            su += (i % mask.width) as f64;
            sv += (i / mask.width) as f64;
        }
    }
    (n > 0).then(|| (su / n as f64, sv / n as f64))
}
