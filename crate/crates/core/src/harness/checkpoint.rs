use std::fs;
use std::path::Path;

use qica_autograd::{Mat, Real};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, QicaError, Result};
use crate::harness::config::TrainConfig;
use crate::harness::metrics::EpochRecord;
use crate::model::QicaModel;
use crate::params::ParamGroup;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredParam {
    pub name: String,
    pub group: ParamGroup,
    pub rows: usize,
    pub cols: usize,
    /// Widened to `f64`, which is exact for both precisions.
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    pub params: Vec<StoredParam>,
}

impl Checkpoint {
    pub fn from_model<T: Real>(model: &QicaModel<T>, config: &TrainConfig, epoch: usize, history: &[EpochRecord]) -> Self {
        let params = model
            .params
            .entries()
            .iter()
            .map(|e| StoredParam {
                name: e.name.clone(),
                group: e.group,
                rows: e.value.rows(),
                cols: e.value.cols(),
                data: e.value.data().iter().map(|v| v.as_f64()).collect(),
            })
            .collect();
        Self {
            config: config.clone(),
            epoch,
            history: history.to_vec(),
            params,
        }
    }

    /// Rebuilds the model from the config snapshot and overwrites every
    /// parameter by name.
    pub fn to_model<T: Real>(&self) -> Result<QicaModel<T>> {
        let mut model = QicaModel::<T>::new(self.config.model_config(), self.config.seed)?;
        if model.params.len() != self.params.len() {
            return Err(QicaError::Checkpoint(format!(
                "{} stored parameters, model has {}",
                self.params.len(),
                model.params.len()
            )));
        }
        for p in &self.params {
            let id = model
                .params
                .find(&p.name)
                .ok_or_else(|| QicaError::Checkpoint(format!("unknown parameter {:?}", p.name)))?;
            let entry = model.params.entry(id);
            if entry.value.shape() != (p.rows, p.cols) || p.data.len() != p.rows * p.cols {
                return Err(QicaError::Checkpoint(format!(
                    "{} is {}x{}, model expects {:?}",
                    p.name,
                    p.rows,
                    p.cols,
                    entry.value.shape()
                )));
            }
            if entry.group != p.group {
                return Err(QicaError::Checkpoint(format!("{} changed group", p.name)));
            }
            *model.params.value_mut(id) = Mat::from_vec(p.rows, p.cols, p.data.iter().map(|&v| T::of(v)).collect());
        }
        model.params.set_frozen_backbone(self.config.freeze_backbone);
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}
