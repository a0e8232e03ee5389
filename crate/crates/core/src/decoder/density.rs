use serde::{Deserialize, Serialize};

/// Nonnegative per-cell object density; its sum is the count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityMap {
    pub height: usize,
    pub width: usize,
    /// Row-major, `height * width` cells.
    pub data: Vec<f32>,
}

impl DensityMap {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn add(&mut self, y: usize, x: usize, v: f32) {
        self.data[y * self.width + x] += v;
    }

    /// Sum of every cell, accumulated in double precision.
    pub fn count(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn max(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, &v| m.max(v))
    }

    pub fn is_nonnegative(&self) -> bool {
        self.data.iter().all(|&v| v >= 0.0)
    }
}
