use crate::data::Point;
use crate::decoder::DensityMap;

/// Gaussian kernels truncated at this many standard deviations.
pub const KERNEL_SUPPORT: f64 = 3.0;

/// Renders one unit-mass Gaussian per point on an `out_hw` grid.
///
/// Points are in image pixel coordinates of an `image_hw` image; `sigma`
/// is in output cells. Each kernel is renormalised over the in-frame part
/// of its truncated support, so every point contributes exactly one.
pub fn render_density(points: &[Point], image_hw: (usize, usize), out_hw: (usize, usize), sigma: f64) -> DensityMap {
    let (oh, ow) = out_hw;
    let sy = oh as f64 / image_hw.0 as f64;
    let sx = ow as f64 / image_hw.1 as f64;
    let reach = KERNEL_SUPPORT * sigma;
    let mut acc = vec![0.0f64; oh * ow];
    let mut kernel = Vec::new();
    for &(py, px) in points {
        let (cy, cx) = (py * sy, px * sx);
        kernel.clear();
        let y0 = (cy - reach - 0.5).floor().max(0.0) as usize;
        let y1 = ((cy + reach + 0.5).ceil() as usize).min(oh);
        let x0 = (cx - reach - 0.5).floor().max(0.0) as usize;
        let x1 = ((cx + reach + 0.5).ceil() as usize).min(ow);
        for y in y0..y1 {
            let dy = y as f64 + 0.5 - cy;
            if dy.abs() > reach {
                continue;
            }
            for x in x0..x1 {
                let dx = x as f64 + 0.5 - cx;
                if dx.abs() > reach {
                    continue;
                }
                kernel.push((y * ow + x, (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp()));
            }
        }
        if kernel.is_empty() {
            // centre at a cell corner with a tiny sigma; fall back to the
            // nearest cell
            let y = (cy as usize).min(oh - 1);
            let x = (cx as usize).min(ow - 1);
            kernel.push((y * ow + x, 1.0));
        }
        let z: f64 = kernel.iter().map(|&(_, v)| v).sum();
        for &(i, v) in &kernel {
            acc[i] += v / z;
        }
    }
    DensityMap {
        height: oh,
        width: ow,
        data: acc.into_iter().map(|v| v as f32).collect(),
    }
}
