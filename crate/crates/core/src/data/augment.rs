use rand::Rng;

use crate::data::{render_density, Image, Point};
use crate::decoder::DensityMap;

pub const FLIP_PROBABILITY: f64 = 0.5;
pub const BRIGHTNESS_JITTER: f32 = 0.1;

pub fn flip_horizontal(image: &Image, points: &[Point]) -> (Image, Vec<Point>) {
    let mut out = image.clone();
    for y in 0..image.height {
        for x in 0..image.width {
            for c in 0..3 {
                out.set(y, image.width - 1 - x, c, image.get(y, x, c));
            }
        }
    }
    let w = image.width as f64;
    (out, points.iter().map(|&(y, x)| (y, w - x)).collect())
}

pub fn adjust_brightness(image: &Image, factor: f32) -> Image {
    Image {
        height: image.height,
        width: image.width,
        data: image.data.iter().map(|&v| (v * factor).clamp(0.0, 1.0)).collect(),
    }
}

/// Random horizontal flip and brightness jitter. Geometric changes move the
/// points and the density is re-rendered from them.
pub fn augment(
    image: &Image,
    points: &[Point],
    out_hw: (usize, usize),
    sigma: f64,
    rng: &mut impl Rng,
) -> (Image, DensityMap, Vec<Point>) {
    let (image, points) = if rng.gen_bool(FLIP_PROBABILITY) {
        flip_horizontal(image, points)
    } else {
        (image.clone(), points.to_vec())
    };
    let factor = rng.gen_range(1.0 - BRIGHTNESS_JITTER..=1.0 + BRIGHTNESS_JITTER);
    let image = adjust_brightness(&image, factor);
    let density = render_density(&points, (image.height, image.width), out_hw, sigma);
    (image, density, points)
}
