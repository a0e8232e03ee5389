use std::fs;
use std::path::{Path, PathBuf};

use qica_autograd::Real;

use crate::data::{load_png, Manifest, Sample};
use crate::decoder::DensityMap;
use crate::error::{io_err, QicaError, Result};
use crate::harness::checkpoint::Checkpoint;
use crate::harness::config::Precision;
use crate::harness::metrics::{mae, rmse};
use crate::harness::qdm;
use crate::model::QicaModel;

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub mae: f64,
    pub rmse: f64,
    pub predicted: Vec<f64>,
    pub truth: Vec<f64>,
}

/// Inference-path counts over `samples`, each prompted with its own
/// category name.
pub fn evaluate<T: Real>(model: &QicaModel<T>, samples: &[Sample]) -> Result<Evaluation> {
    let expected = model.density_hw();
    let mut predicted = Vec::with_capacity(samples.len());
    for s in samples {
        if (s.density.height, s.density.width) != expected {
            return Err(QicaError::Resolution(format!(
                "ground truth is {}x{}, model predicts {}x{}",
                s.density.height, s.density.width, expected.0, expected.1
            )));
        }
        let text = crate::backbone::VocabTokenizer::inference_text(s.category.name());
        predicted.push(model.predict(&s.image, &text)?.count());
    }
    let truth: Vec<f64> = samples.iter().map(|s| s.count as f64).collect();
    Ok(Evaluation {
        mae: mae(&predicted, &truth),
        rmse: rmse(&predicted, &truth),
        predicted,
        truth,
    })
}

/// Evaluates a stored checkpoint on a manifest at the checkpoint's
/// training precision.
pub fn evaluate_checkpoint(ckpt: &Checkpoint, manifest_path: &Path) -> Result<Evaluation> {
    let manifest = Manifest::load(manifest_path)?;
    let samples = manifest.load_samples(manifest_path)?;
    match ckpt.config.precision {
        Precision::Single => evaluate(&ckpt.to_model::<f32>()?, &samples),
        Precision::Double => evaluate(&ckpt.to_model::<f64>()?, &samples),
    }
}

/// 8-bit grayscale rendering scaled so the maximum maps to 255.
pub fn heatmap(map: &DensityMap) -> image::GrayImage {
    let max = map.max();
    let pixels = map
        .data
        .iter()
        .map(|&v| {
            if max > 0.0 {
                ((v.max(0.0) / max) * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        })
        .collect();
    image::GrayImage::from_raw(map.width as u32, map.height as u32, pixels).expect("buffer matches dimensions")
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub density: DensityMap,
    pub count: f64,
    pub density_path: PathBuf,
    pub heatmap_path: PathBuf,
}

/// Predicts the density of the image at `image_path` for `text` and
/// writes `density.qdm` and `heatmap.png` into `out`.
pub fn predict_to_dir(ckpt: &Checkpoint, image_path: &Path, text: &str, out: &Path) -> Result<Prediction> {
    let image = load_png(image_path)?;
    let density = match ckpt.config.precision {
        Precision::Single => ckpt.to_model::<f32>()?.predict(&image, text)?,
        Precision::Double => ckpt.to_model::<f64>()?.predict(&image, text)?,
    };
    fs::create_dir_all(out).map_err(io_err(out))?;
    let density_path = out.join("density.qdm");
    let heatmap_path = out.join("heatmap.png");
    qdm::write(&density_path, &density)?;
    heatmap(&density).save(&heatmap_path)?;
    Ok(Prediction {
        count: density.count(),
        density,
        density_path,
        heatmap_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heatmap_peaks_at_255() {
        let mut map = DensityMap::zeros(2, 3);
        map.add(1, 2, 0.4);
        map.add(0, 0, 0.1);
        let img = heatmap(&map);
        assert_eq!(img.get_pixel(2, 1)[0], 255);
        assert_eq!(img.get_pixel(0, 0)[0], 64);
        assert_eq!(heatmap(&DensityMap::zeros(2, 2)).into_raw(), vec![0; 4]);
    }
}
