//! Central finite-difference verification of every trainable group.

use std::time::Instant;

use qica_autograd::{Graph, Var};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{Category, Sample, SceneSpec, DEFAULT_KERNEL_SIGMA};
use crate::error::Result;
use crate::harness::config::TrainConfig;
use crate::model::{QicaModel, Target};
use crate::params::{Ctx, ParamGroup, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GradcheckOptions {
    pub coords_per_group: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound of the relative-error denominator, so coordinates whose
    /// true derivative is zero are judged by absolute error.
    pub floor: f64,
    /// Skip coordinates whose perturbation changes the kink signature.
    pub kink_guard: bool,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            coords_per_group: 32,
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            kink_guard: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CoordinateCheck {
    pub group: ParamGroup,
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    /// The perturbation crossed a ReLU or clamp boundary.
    pub kink: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupReport {
    pub group: ParamGroup,
    pub checked: usize,
    pub flagged: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub options: GradcheckOptions,
    pub loss: f64,
    pub groups: Vec<GroupReport>,
    pub coordinates: Vec<CoordinateCheck>,
    pub seconds: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed)
    }

    pub fn group(&self, group: ParamGroup) -> Option<&GroupReport> {
        self.groups.iter().find(|g| g.group == group)
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Checks `loss` against central differences over a seeded subsample of
/// every trainable group in `params`. `loss` must only read parameters
/// through the context it is given.
pub fn check_gradients<F>(params: &mut ParamStore<f64>, loss: F, options: GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&Ctx<f64>) -> Result<Var>,
{
    let start = Instant::now();
    let eval = |store: &ParamStore<f64>| -> Result<(f64, u64)> {
        let g = Graph::new();
        let ctx = Ctx::no_grad(&g, store);
        let l = loss(&ctx)?;
        Ok((g.value(l).item(), g.kink_signature()))
    };

    let g = Graph::new();
    let ctx = Ctx::new(&g, params);
    let l = loss(&ctx)?;
    let base_loss = g.value(l).item();
    let base_sig = g.kink_signature();
    let mut grads = g.backward(l);
    let analytic: Vec<Option<qica_autograd::Mat<f64>>> = (0..params.len()).map(|i| grads.take(i)).collect();
    drop(ctx);

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut groups = Vec::new();
    let mut coordinates = Vec::new();
    for group in ParamGroup::ALL {
        let ids: Vec<ParamId> = params.ids_in(group).filter(|&id| params.is_trainable(id)).collect();
        if ids.is_empty() {
            continue;
        }
        let mut flat = Vec::new();
        for &id in &ids {
            flat.extend((0..params.value(id).len()).map(|i| (id, i)));
        }
        let picks = sample(&mut rng, flat.len(), options.coords_per_group.min(flat.len()));
        let mut report = GroupReport {
            group,
            checked: 0,
            flagged: 0,
            max_rel_error: 0.0,
            passed: true,
        };
        for pick in picks.into_iter() {
            let (id, i) = flat[pick];
            let orig = params.value(id).data()[i];
            params.value_mut(id).data_mut()[i] = orig + options.step;
            let (plus, sig_plus) = eval(params)?;
            params.value_mut(id).data_mut()[i] = orig - options.step;
            let (minus, sig_minus) = eval(params)?;
            params.value_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * options.step);
            let a = analytic[id.0].as_ref().map_or(0.0, |m| m.data()[i]);
            let kink = sig_plus != base_sig || sig_minus != base_sig;
            let rel = relative_error(a, numeric, options.floor);
            report.checked += 1;
            if kink {
                report.flagged += 1;
            }
            if !(kink && options.kink_guard) {
                report.max_rel_error = report.max_rel_error.max(if rel.is_nan() { f64::INFINITY } else { rel });
            }
            coordinates.push(CoordinateCheck {
                group,
                param: params.entry(id).name.clone(),
                index: i,
                analytic: a,
                numeric,
                rel_error: rel,
                kink,
            });
        }
        report.passed = report.max_rel_error < options.tolerance;
        groups.push(report);
    }
    Ok(GradcheckReport {
        options,
        loss: base_loss,
        groups,
        coordinates,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Count of the scene used by [`gradcheck`]; far enough from zero that
/// the hypothesis set is two-sided for every odd K up to 9.
pub const GRADCHECK_COUNT: usize = 12;

/// Gradient check of the full training loss for the model described by
/// `config`, on one synthetic scene. Always runs in double precision.
pub fn gradcheck(config: &TrainConfig, options: GradcheckOptions) -> Result<GradcheckReport> {
    config.validate()?;
    let model_config = config.model_config();
    let mut model = QicaModel::<f64>::new(model_config.clone(), config.seed)?;
    model.params.set_frozen_backbone(config.freeze_backbone);
    let mut spec = SceneSpec::new(Category::Circles, GRADCHECK_COUNT, config.seed);
    spec.height = model_config.vision.image_height;
    spec.width = model_config.vision.image_width;
    let sample = Sample::generate(&spec, model.density_hw(), DEFAULT_KERNEL_SIGMA)?;
    let objective = config.objective();
    let mut params = std::mem::take(&mut model.params);
    check_gradients(
        &mut params,
        |ctx| {
            let target = Target {
                image: &sample.image,
                density: &sample.density,
                count: sample.count,
                category: sample.category.name(),
            };
            Ok(model.training_forward(ctx, &target, &objective)?.loss)
        },
        options,
    )
}
