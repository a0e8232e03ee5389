use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{QicaError, Result};

/// Rejection-sampling budget for instance placement.
pub const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;
/// Minimum centre distance as a multiple of the radius sum.
pub const MIN_SPACING: f64 = 1.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Circles,
    Squares,
}

impl Category {
    pub const ALL: [Category; 2] = [Category::Circles, Category::Squares];

    pub fn name(self) -> &'static str {
        match self {
            Category::Circles => "circles",
            Category::Squares => "squares",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Category {
    type Err = QicaError;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| QicaError::UnknownCategory(s.to_string()))
    }
}

/// RGB image, channel-last, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width * 3],
        }
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * 3 + c] = v;
    }

    /// Rounds to 8 bits per channel, matching what a PNG round trip keeps.
    pub fn quantized(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
                .collect(),
        }
    }
}

/// Object centre `(y, x)` in image pixel coordinates (pixel `i` spans
/// `[i, i+1)`).
pub type Point = (f64, f64);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub category: Category,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn new(category: Category, count: usize, seed: u64) -> Self {
        Self {
            category,
            count,
            height: 64,
            width: 64,
            radius_min: 2.0,
            radius_max: 3.0,
            seed,
        }
    }
}

/// Renders `spec` into an image and the exact instance centres.
pub fn gen_scene(spec: &SceneSpec) -> Result<(Image, Vec<Point>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (h, w) = (spec.height, spec.width);
    let background: f32 = rng.gen_range(0.05..0.35);
    let mut image = Image::filled(h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            let v = (background + rng.gen_range(-0.04f32..0.04)).clamp(0.0, 1.0);
            for c in 0..3 {
                image.set(y, x, c, v);
            }
        }
    }

    let mut placed: Vec<(Point, f64)> = Vec::with_capacity(spec.count);
    let mut attempts = 0;
    while placed.len() < spec.count {
        if attempts >= MAX_PLACEMENT_ATTEMPTS {
            return Err(QicaError::InfeasiblePacking {
                count: spec.count,
                attempts,
            });
        }
        attempts += 1;
        let r = if spec.radius_max > spec.radius_min {
            rng.gen_range(spec.radius_min..spec.radius_max)
        } else {
            spec.radius_min
        };
        if 2.0 * r >= h.min(w) as f64 {
            return Err(QicaError::Config(format!("radius {r} does not fit a {h}x{w} image")));
        }
        let cy = rng.gen_range(r..h as f64 - r);
        let cx = rng.gen_range(r..w as f64 - r);
        let clear = placed.iter().all(|&((py, px), pr)| {
            let d = ((py - cy).powi(2) + (px - cx).powi(2)).sqrt();
            d >= MIN_SPACING * (r + pr)
        });
        if clear {
            placed.push(((cy, cx), r));
        }
    }

    for &((cy, cx), r) in &placed {
        let color: [f32; 3] = [rng.gen_range(0.55..1.0), rng.gen_range(0.55..1.0), rng.gen_range(0.55..1.0)];
        let y0 = (cy - r).floor().max(0.0) as usize;
        let y1 = ((cy + r).ceil() as usize).min(h);
        let x0 = (cx - r).floor().max(0.0) as usize;
        let x1 = ((cx + r).ceil() as usize).min(w);
        for y in y0..y1 {
            for x in x0..x1 {
                let dy = y as f64 + 0.5 - cy;
                let dx = x as f64 + 0.5 - cx;
                let inside = match spec.category {
                    Category::Circles => dy * dy + dx * dx <= r * r,
                    Category::Squares => dy.abs() <= r && dx.abs() <= r,
                };
                if inside {
                    for (c, &v) in color.iter().enumerate() {
                        image.set(y, x, c, v);
                    }
                }
            }
        }
    }
    Ok((image, placed.into_iter().map(|(p, _)| p).collect()))
}
