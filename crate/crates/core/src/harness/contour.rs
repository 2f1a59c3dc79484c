//! Outer-boundary tracing and arc-length resampling.

use crate::edge_maps::MaskImage;
use crate::error::{Error, Result};
use crate::geometry::Point;

/// Clockwise (in image coordinates) 8-neighbourhood starting west.
const DIRS: [(i64, i64); 8] = [(-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1)];

/// Moore-neighbour trace of the outer boundary of the component containing
/// the first foreground pixel in raster order. The result is a closed loop
/// without the repeated start pixel.
pub fn trace_outer_contour(mask: &MaskImage) -> Result<Vec<(usize, usize)>> {
    let (w, h) = (mask.width() as i64, mask.height() as i64);
    let fg = |x: i64, y: i64| x >= 0 && y >= 0 && x < w && y < h && mask.get(x as usize, y as usize);
    let start = (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).find(|&(x, y)| fg(x, y)).ok_or(Error::EmptyMask)?;
    let mut contour = vec![start];
    // Entered from the west (raster scan), so backtrack direction is west.
    let mut cur = start;
    let mut back = 0usize;
    let limit = 4 * (w * h) as usize;
    let mut first_move: Option<((i64, i64), usize)> = None;
    for _ in 0..limit {
        let mut found = None;
        for k in 1..=8 {
            let d = (back + k) % 8;
            let (nx, ny) = (cur.0 + DIRS[d].0, cur.1 + DIRS[d].1);
            if fg(nx, ny) {
                found = Some(((nx, ny), d));
                break;
            }
        }
        let Some((next, d)) = found else {
            return Ok(vec![(start.0 as usize, start.1 as usize)]);
        };
        // Stop when the first step out of the start pixel repeats.
        if cur == start {
            match first_move {
                None => first_move = Some((next, d)),
                Some(m) if m == (next, d) => break,
                Some(_) => {}
            }
        }
        // The neighbour examined just before `next` is background; restart
        // the sweep from it, expressed relative to `next`.
        let prev_dir = (d + 7) % 8;
        let bg = (cur.0 + DIRS[prev_dir].0, cur.1 + DIRS[prev_dir].1);
        back = DIRS.iter().position(|&(dx, dy)| (next.0 + dx, next.1 + dy) == bg).unwrap_or((d + 4) % 8);
        cur = next;
        contour.push(cur);
    }
    // Drop the trailing return to the start pixel.
    if contour.len() > 1 && contour.last() == Some(&start) {
        contour.pop();
    }
    Ok(contour.into_iter().map(|(x, y)| (x as usize, y as usize)).collect())
}

/// `n` points spaced uniformly by arc length along the closed polygon.
pub fn resample_closed(poly: &[(usize, usize)], n: usize) -> Vec<Point> {
    let pts: Vec<Point> = poly.iter().map(|&(x, y)| Point::new(x as f64, y as f64)).collect();
    if pts.is_empty() || n == 0 {
        return Vec::new();
    }
    let m = pts.len();
    let seg: Vec<f64> = (0..m).map(|i| (pts[(i + 1) % m] - pts[i]).norm()).collect();
    let total: f64 = seg.iter().sum();
    if total == 0.0 {
        return vec![pts[0]; n];
    }
    let step = total / n as f64;
    let mut out = Vec::with_capacity(n);
    let mut i = 0;
    let mut acc = 0.0;
    for k in 0..n {
        let target = k as f64 * step;
        while acc + seg[i] < target && i + 1 < m {
            acc += seg[i];
            i += 1;
        }
        let t = if seg[i] > 0.0 { (target - acc) / seg[i] } else { 0.0 };
        let a = pts[i];
        let b = pts[(i + 1) % m];
        out.push(Point::new(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y)));
    }
    out
}

/// Twenty arc-length-uniform points on the template's outer boundary.
pub fn measurement_points(mask: &MaskImage) -> Result<Vec<Point>> {
    Ok(resample_closed(&trace_outer_contour(mask)?, 20))
}
