//! Synthetic counting scenes with exact point annotations and Gaussian
//! ground-truth densities.

mod augment;
mod density;
mod scene;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use augment::{adjust_brightness, augment, flip_horizontal, BRIGHTNESS_JITTER, FLIP_PROBABILITY};
pub use density::{render_density, KERNEL_SUPPORT};
pub use scene::{gen_scene, Category, Image, Point, SceneSpec, MAX_PLACEMENT_ATTEMPTS, MIN_SPACING};

use crate::decoder::DensityMap;
use crate::error::{io_err, QicaError, Result};
use crate::harness::qdm;

pub const DEFAULT_KERNEL_SIGMA: f64 = 1.5;

pub fn save_png(image: &Image, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = image
        .data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = image::RgbImage::from_raw(image.width as u32, image.height as u32, bytes)
        .expect("buffer matches dimensions");
    buf.save(path)?;
    Ok(())
}

pub fn load_png(path: &Path) -> Result<Image> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Image {
        height: h as usize,
        width: w as usize,
        data: img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect(),
    })
}

/// One training/evaluation example.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Image,
    pub density: DensityMap,
    pub points: Vec<Point>,
    pub category: Category,
    pub count: usize,
    pub seed: u64,
}

impl Sample {
    pub fn generate(spec: &SceneSpec, out_hw: (usize, usize), sigma: f64) -> Result<Self> {
        let (image, points) = gen_scene(spec)?;
        let density = render_density(&points, (spec.height, spec.width), out_hw, sigma);
        Ok(Self {
            image: image.quantized(),
            density,
            points,
            category: spec.category,
            count: spec.count,
            seed: spec.seed,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub spec: SceneSpec,
    /// Relative to the manifest directory.
    pub image: String,
    /// Relative to the manifest directory.
    pub density: String,
    pub points: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub split: String,
    pub density_height: usize,
    pub density_width: usize,
    pub kernel_sigma: f64,
    pub scenes: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(io_err(path))
    }

    /// Loads every image and density next to the manifest at `path`.
    pub fn load_samples(&self, path: &Path) -> Result<Vec<Sample>> {
        let dir = path.parent().unwrap_or(Path::new("."));
        self.scenes
            .iter()
            .map(|e| {
                let image = load_png(&dir.join(&e.image))?;
                let density = qdm::read(&dir.join(&e.density))?;
                if (density.height, density.width) != (self.density_height, self.density_width) {
                    return Err(QicaError::Resolution(format!(
                        "{} is {}x{}, manifest says {}x{}",
                        e.density, density.height, density.width, self.density_height, self.density_width
                    )));
                }
                Ok(Sample {
                    image,
                    density,
                    points: e.points.iter().map(|p| (p[0], p[1])).collect(),
                    category: e.spec.category,
                    count: e.spec.count,
                    seed: e.spec.seed,
                })
            })
            .collect()
    }
}

/// Seed of scene `index` in split `split`; distinct splits never share seeds.
pub fn scene_seed(base: u64, split: usize, index: usize) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((split as u64) << 40) ^ index as u64
}

#[derive(Clone, Debug)]
pub struct SplitPlan {
    pub name: String,
    pub categories: Vec<Category>,
    pub scenes: usize,
}

#[derive(Clone, Debug)]
pub struct GenPlan {
    pub splits: Vec<SplitPlan>,
    pub min_count: usize,
    pub max_count: usize,
    pub seed: u64,
    pub image_hw: (usize, usize),
    pub density_hw: (usize, usize),
    pub radius: (f64, f64),
    pub kernel_sigma: f64,
}

impl GenPlan {
    /// Scene specs of split `split`; counts are drawn uniformly from the
    /// count range with the scene's own seed, categories alternate.
    pub fn specs(&self, split: usize) -> Vec<SceneSpec> {
        use rand::{Rng, SeedableRng};
        let plan = &self.splits[split];
        (0..plan.scenes)
            .map(|i| {
                let seed = scene_seed(self.seed, split, i);
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0xC0FFEE);
                SceneSpec {
                    category: plan.categories[i % plan.categories.len()],
                    count: rng.gen_range(self.min_count..=self.max_count),
                    height: self.image_hw.0,
                    width: self.image_hw.1,
                    radius_min: self.radius.0,
                    radius_max: self.radius.1,
                    seed,
                }
            })
            .collect()
    }

    pub fn samples(&self, split: usize) -> Result<Vec<Sample>> {
        self.specs(split)
            .iter()
            .map(|s| Sample::generate(s, self.density_hw, self.kernel_sigma))
            .collect()
    }

    /// Writes images, densities and one manifest per split under `out`.
    pub fn write(&self, out: &Path) -> Result<Vec<PathBuf>> {
        let mut manifests = Vec::new();
        for (si, plan) in self.splits.iter().enumerate() {
            let dir = out.join(&plan.name);
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
            let mut scenes = Vec::new();
            for (i, spec) in self.specs(si).into_iter().enumerate() {
                let sample = Sample::generate(&spec, self.density_hw, self.kernel_sigma)?;
                let image = format!("{}/{i:05}.png", plan.name);
                let density = format!("{}/{i:05}.qdm", plan.name);
                save_png(&sample.image, &out.join(&image))?;
                qdm::write(&out.join(&density), &sample.density)?;
                scenes.push(ManifestEntry {
                    spec,
                    image,
                    density,
                    points: sample.points.iter().map(|&(y, x)| [y, x]).collect(),
                });
            }
            let manifest = Manifest {
                split: plan.name.clone(),
                density_height: self.density_hw.0,
                density_width: self.density_hw.1,
                kernel_sigma: self.kernel_sigma,
                scenes,
            };
            let path = out.join(format!("{}.json", plan.name));
            manifest.save(&path)?;
            manifests.push(path);
        }
        Ok(manifests)
    }
}
