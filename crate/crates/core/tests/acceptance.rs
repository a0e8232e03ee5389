//! Acceptance suite. Every criterion runs at its stated tolerance and
//! prints one PASS/FAIL line; the process exits nonzero if any fails.
//!
//! Select criteria with `QICA_ACCEPTANCE=1,4,10`. Set
//! `QICA_WRITE_BASELINE=1` to overwrite the committed reference numbers
//! with the ones measured in this run.

mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::time::Instant;

use proptest::prelude::*;
use proptest::test_runner::{Config as ProptestConfig, TestCaseError, TestRunner};
use qica_autograd::{Graph, Mat, ResamplePlan};
use qica_core::data::{Category, GenPlan, Sample, SplitPlan, DEFAULT_KERNEL_SIGMA};
use qica_core::decoder::DensityMap;
use qica_core::harness::{
    evaluate, gradcheck, mae, qdm, rmse, train_on, Checkpoint, GradcheckOptions, Precision, TrainConfig,
    Trainer,
};
use qica_core::loss::enc_quantity_loss_value;
use qica_core::params::{Ctx, ParamGroup};
use qica_core::quantity::make_hypotheses;
use qica_core::{ModelConfig, QicaModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

const GRADCHECK_TOLERANCE: f64 = 1e-4;
const GRADCHECK_BUDGET_SECS: f64 = 300.0;
const RANKING_TOLERANCE: f64 = 1e-12;
const RANKING_VECTORS: usize = 1000;
const CONSERVATION_SCENES: usize = 1000;
const CONSERVATION_TOLERANCE: f64 = 1e-3;
const SATURATION_TOLERANCE: f64 = 1e-6;
const OVERFIT_SCENES: usize = 16;
const OVERFIT_STEPS: usize = 300;
const OVERFIT_RATIO: f64 = 0.2;
const TRANSFER_TRAIN_SCENES: usize = 512;
const TRANSFER_VAL_SCENES: usize = 64;
const TRANSFER_TEST_SCENES: usize = 128;
const TRANSFER_MIN_IMPROVEMENT: f64 = 0.25;
const TRANSFER_EPOCHS: usize = 6;
const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];
const SERIALIZATION_VECTORS: usize = 1000;
const METRIC_TOLERANCE: f64 = 1e-12;

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed,
            detail: detail.into(),
        }
    }
}

/// Measurements shared between criteria and written to the baseline file.
#[derive(Default)]
struct Record {
    values: BTreeMap<String, Value>,
    transfer: Option<TransferRuns>,
}

fn baseline_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/acceptance_baseline.json")
}

fn say(line: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
}

fn main() {
    let selected: Option<Vec<usize>> = std::env::var("QICA_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|p| p.trim().parse().ok()).collect());
    let reference: Value = std::fs::read_to_string(baseline_path())
        .ok()
        .and_then(|s| serde_json::from_str(&s).ok())
        .unwrap_or(Value::Null);
    let mut record = Record::default();
    type Criterion = fn(&mut Record) -> Outcome;
    let criteria: [(usize, &str, Criterion); 10] = [
        (1, "gradient suite", c1_gradcheck),
        (2, "ranking-loss oracle", c2_ranking_oracle),
        (3, "property tests", c3_properties),
        (4, "count conservation", c4_conservation),
        (5, "overfit smoke test", c5_overfit),
        (6, "zero-shot transfer", c6_transfer),
        (7, "ablation direction", c7_ablation),
        (8, "prompt coupling", c8_coupling),
        (9, "inference-path purity", c9_purity),
        (10, "serialization and metrics", c10_serialization),
    ];
    let mut failed = Vec::new();
    let mut ran = 0;
    for (id, name, run) in criteria {
        if selected.as_ref().is_some_and(|s| !s.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let out = run(&mut record);
        ran += 1;
        say(&format!(
            "{} criterion {id:>2} {name}: {} [{:.1}s]",
            if out.passed { "PASS" } else { "FAIL" },
            out.detail,
            start.elapsed().as_secs_f64()
        ));
        if !out.passed {
            failed.push(id);
        }
    }
    for (key, value) in &record.values {
        if let Some(r) = reference.get(key) {
            let same = r == value;
            say(&format!(
                "     reference {key}: {} (committed {r})",
                if same { "unchanged" } else { "changed" }
            ));
        }
    }
    if std::env::var("QICA_WRITE_BASELINE").is_ok_and(|v| v == "1") {
        let mut merged = reference.as_object().cloned().unwrap_or_default();
        for (k, v) in record.values {
            merged.insert(k, v);
        }
        let text = serde_json::to_string_pretty(&Value::Object(merged)).unwrap();
        std::fs::write(baseline_path(), text + "\n").expect("write baseline");
        say(&format!("wrote {}", baseline_path().display()));
    }
    say(&format!("acceptance: {}/{ran} criteria passed", ran - failed.len()));
    if !failed.is_empty() {
        say(&format!("acceptance: failed criteria {failed:?}"));
        std::process::exit(1);
    }
}

fn c1_gradcheck(_: &mut Record) -> Outcome {
    let config = TrainConfig {
        precision: Precision::Double,
        ..TrainConfig::default()
    };
    let m = &config.model;
    let dims = format!(
        "d_t={} d_v={} d_g={} grid={:?}",
        m.text.width,
        m.vision.width,
        m.decoder.width,
        m.vision.grid()
    );
    let report = match gradcheck(&config, GradcheckOptions::default()) {
        Ok(r) => r,
        Err(e) => return Outcome::new(false, format!("gradcheck errored: {e}")),
    };
    let expected: Vec<ParamGroup> = ParamGroup::ALL.to_vec();
    let covered: Vec<ParamGroup> = report.groups.iter().map(|g| g.group).collect();
    let worst = report
        .groups
        .iter()
        .map(|g| format!("{:?} {:.1e}", g.group, g.max_rel_error))
        .collect::<Vec<_>>()
        .join(", ");
    // groups smaller than the sample size are checked exhaustively
    let model = QicaModel::<f64>::new(config.model_config(), config.seed).unwrap();
    let group_size = |group| -> usize { model.params.ids_in(group).map(|id| model.params.value(id).len()).sum() };
    let coords = GradcheckOptions::default().coords_per_group;
    let flagged: usize = report.groups.iter().map(|g| g.flagged).sum();
    let all_below = report
        .groups
        .iter()
        .all(|g| g.max_rel_error < GRADCHECK_TOLERANCE && g.checked == coords.min(group_size(g.group)));
    let fast = report.seconds < GRADCHECK_BUDGET_SECS;
    Outcome::new(
        all_below && fast && covered == expected,
        format!(
            "{dims}, {} groups x min({coords}, group size) coords ({flagged} kink-flagged), max rel err per group [{worst}] (< {GRADCHECK_TOLERANCE:e}), {:.0}s (< {GRADCHECK_BUDGET_SECS}s)",
            covered.len(),
            report.seconds
        ),
    )
}

fn c2_ranking_oracle(_: &mut Record) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let mut ordered_nonzero = 0;
    let mut checked = 0;
    for k in [3usize, 5, 7] {
        for i in 0..RANKING_VECTORS {
            // every tenth vector uses a count small enough to be one-sided
            let n = if i % 10 == 0 { rng.gen_range(0..(k - 1) / 2) } else { rng.gen_range(3..200) };
            let hyp = make_hypotheses(n, k).unwrap();
            let alpha: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..=1.0)).collect();
            let got = enc_quantity_loss_value(&alpha, &hyp);
            worst = worst.max((got - common::hinge_oracle(&alpha, &hyp)).abs());

            // correctly ordered: factual highest, each chain non-increasing
            let mut sorted = alpha.clone();
            sorted[0] = 1.0;
            for chain in hyp.chains() {
                let mut vals: Vec<f64> = chain.clone().map(|j| alpha[j]).collect();
                vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
                for (j, v) in chain.zip(vals) {
                    sorted[j] = v;
                }
            }
            if enc_quantity_loss_value(&sorted, &hyp) != 0.0 {
                ordered_nonzero += 1;
            }
            checked += 1;
        }
    }
    Outcome::new(
        worst <= RANKING_TOLERANCE && ordered_nonzero == 0,
        format!(
            "{checked} vectors at K in {{3,5,7}}: max |loss - brute force| = {worst:.1e} (<= {RANKING_TOLERANCE:e}); {ordered_nonzero} ordered vectors with nonzero loss"
        ),
    )
}

fn run_property<S: Strategy>(
    cases: u32,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String> {
    let mut runner = TestRunner::new(ProptestConfig {
        cases,
        failure_persistence: None,
        ..ProptestConfig::default()
    });
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

fn c3_properties(_: &mut Record) -> Outcome {
    let config = ModelConfig::default();
    let model = QicaModel::<f64>::new(config.clone(), 3).unwrap();
    let (dt, dv) = (config.text.width, config.vision.width);
    let mut results = Vec::new();

    results.push((
        "prompt broadcast",
        run_property(64, prop::collection::vec(-3.0f64..3.0, dt), |eps| {
            let g = Graph::new();
            let ctx = Ctx::new(&g, &model.params);
            let e = g.constant(Mat::from_vec(1, dt, eps.clone()));
            let conditioned = model.prompts.condition(&ctx, e).unwrap();
            for (j, &c) in conditioned.iter().enumerate() {
                let raw = model.params.value(model.prompts.grid(j));
                let got = g.value(c);
                for r in 0..raw.rows() {
                    for col in 0..dt {
                        prop_assert_eq!(got.get(r, col).to_bits(), (raw.get(r, col) + eps[col]).to_bits());
                    }
                }
            }
            Ok(())
        }),
    ));

    results.push((
        "category projection identity at init",
        run_property(64, prop::collection::vec(-5.0f64..5.0, dt), |x| {
            let g = Graph::new();
            let ctx = Ctx::new(&g, &model.params);
            let v = g.constant(Mat::from_vec(1, dt, x.clone()));
            let out = g.value(model.category.project(&ctx, v));
            prop_assert_eq!(out.data(), &x[..]);
            Ok(())
        }),
    ));

    let rows = 16;
    results.push((
        "similarity bounds and scale invariance",
        run_property(
            128,
            (
                prop::collection::vec(-4.0f64..4.0, rows * dv),
                prop::collection::vec(-4.0f64..4.0, dt),
                prop::collection::vec(0.01f64..100.0, rows),
                0.01f64..100.0,
            ),
            |(v, t, row_scale, t_scale)| {
                let g = Graph::new();
                let ctx = Ctx::new(&g, &model.params);
                let dense = g.constant(Mat::from_vec(rows, dv, v.clone()));
                let text = g.constant(Mat::from_vec(1, dt, t.clone()));
                let s = g.value(model.decoder.similarity_map(&ctx, dense, text).unwrap());
                let scaled_v: Vec<f64> = v.iter().enumerate().map(|(i, x)| x * row_scale[i / dv]).collect();
                let scaled_t: Vec<f64> = t.iter().map(|x| x * t_scale).collect();
                let dense2 = g.constant(Mat::from_vec(rows, dv, scaled_v));
                let text2 = g.constant(Mat::from_vec(1, dt, scaled_t));
                let s2 = g.value(model.decoder.similarity_map(&ctx, dense2, text2).unwrap());
                let bridged = g.value(model.decoder.bridge_text(&ctx, text));
                for r in 0..rows {
                    let a = s.get(r, 0);
                    prop_assert!((-1.0..=1.0).contains(&a));
                    prop_assert!((a - s2.get(r, 0)).abs() <= 1e-12, "{} vs {}", a, s2.get(r, 0));
                    let oracle = common::cosine_oracle(&v[r * dv..(r + 1) * dv], bridged.data());
                    prop_assert!((a - oracle).abs() <= 1e-12);
                }
                Ok(())
            },
        ),
    ));

    let grid = config.vision.grid();
    let ch = config.decoder.stage_channels();
    results.push((
        "upsampling saturation at S = -20",
        run_property(
            24,
            (
                prop::collection::vec(-2.0f64..2.0, grid.0 * grid.1 * ch[0]),
                prop::collection::vec(-2.0f64..2.0, grid.0 * grid.1 * dv),
            ),
            |(features, skip)| {
                let g = Graph::new();
                let ctx = Ctx::new(&g, &model.params);
                let n = grid.0 * grid.1;
                let f = g.constant(Mat::from_vec(n, ch[0], features));
                let skip = g.constant(Mat::from_vec(n, dv, skip));
                let s = g.constant(Mat::full(n, 1, -20.0));
                let (gated, out_grid) = model.decoder.upsample_stage(&ctx, 0, f, grid, skip, s, grid).unwrap();
                let up = g.resample(f, Rc::new(ResamplePlan::bilinear(grid, out_grid)));
                let plain = model.decoder.stages()[0].conv_block(&ctx, up, out_grid);
                let (a, b) = (g.value(gated), g.value(plain));
                let diff = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
                prop_assert!(diff <= SATURATION_TOLERANCE, "max diff {}", diff);
                Ok(())
            },
        ),
    ));

    results.push((
        "density nonnegativity",
        run_property(
            1000,
            (
                prop::collection::vec(-10.0f64..10.0, 64 * ch[2]),
                prop::collection::vec(-3.0f64..3.0, ch[2] + 1),
            ),
            |(features, head)| {
                let mut params = model.params.clone();
                let h = model.decoder.head();
                *params.value_mut(h.weight) = Mat::from_vec(ch[2], 1, head[..ch[2]].to_vec());
                *params.value_mut(h.bias) = Mat::scalar(head[ch[2]]);
                let g = Graph::new();
                let ctx = Ctx::new(&g, &params);
                let f = g.constant(Mat::from_vec(64, ch[2], features));
                let d = g.value(model.decoder.predict_density(&ctx, f));
                prop_assert!(d.data().iter().all(|&v| v >= 0.0));
                Ok(())
            },
        ),
    ));

    let failures: Vec<String> = results
        .iter()
        .filter_map(|(name, r)| r.as_ref().err().map(|e| format!("{name}: {e}")))
        .collect();
    let names = results.iter().map(|(n, _)| *n).collect::<Vec<_>>().join(", ");
    Outcome::new(
        failures.is_empty(),
        if failures.is_empty() {
            format!("all hold ({names})")
        } else {
            failures.join("; ")
        },
    )
}

fn c4_conservation(_: &mut Record) -> Outcome {
    let config = ModelConfig::default();
    let plan = GenPlan {
        splits: vec![SplitPlan {
            name: "conservation".into(),
            categories: Category::ALL.to_vec(),
            scenes: CONSERVATION_SCENES,
        }],
        min_count: 0,
        max_count: 40,
        seed: 4,
        image_hw: (config.vision.image_height, config.vision.image_width),
        density_hw: config.density_hw(),
        radius: (2.0, 3.0),
        kernel_sigma: DEFAULT_KERNEL_SIGMA,
    };
    let mut worst: f64 = 0.0;
    let mut violations = 0;
    for spec in plan.specs(0) {
        let s = Sample::generate(&spec, plan.density_hw, plan.kernel_sigma).unwrap();
        let err = (s.density.count() - s.count as f64).abs();
        worst = worst.max(err);
        if err >= CONSERVATION_TOLERANCE {
            violations += 1;
        }
    }
    Outcome::new(
        violations == 0,
        format!(
            "{CONSERVATION_SCENES} scenes (counts 0-40, both categories): max |sum(D) - n| = {worst:.2e} (< {CONSERVATION_TOLERANCE:e}), {violations} violations"
        ),
    )
}

/// The toy model used for training criteria: default widths and grid,
/// shallower encoders.
fn training_model() -> ModelConfig {
    ModelConfig::compact()
}

fn training_config(model: &ModelConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        model: model.clone(),
        prompt_depth: model.text.prompt_depth,
        prompt_length: model.text.prompt_length,
        batch_size: 8,
        seed,
        ..TrainConfig::default()
    }
}

fn plain_regression(mut c: TrainConfig) -> TrainConfig {
    c.k = 1;
    c.lambda1 = 0.0;
    c.lambda2 = 0.0;
    c
}

fn overfit_run(config: TrainConfig, scenes: &[Sample]) -> (f64, f64) {
    let mut trainer = Trainer::<f32>::new(config).unwrap();
    let initial = evaluate(&trainer.model, scenes).unwrap().mae;
    while trainer.steps() < OVERFIT_STEPS {
        trainer.epoch(scenes).unwrap();
    }
    (initial, evaluate(&trainer.model, scenes).unwrap().mae)
}

fn c5_overfit(record: &mut Record) -> Outcome {
    let model = training_model();
    let plan = GenPlan {
        splits: vec![SplitPlan {
            name: "overfit".into(),
            categories: vec![Category::Circles],
            scenes: OVERFIT_SCENES,
        }],
        min_count: 5,
        max_count: 30,
        seed: 5,
        image_hw: (model.vision.image_height, model.vision.image_width),
        density_hw: model.density_hw(),
        radius: (2.0, 3.0),
        kernel_sigma: DEFAULT_KERNEL_SIGMA,
    };
    let scenes = plan.samples(0).unwrap();
    let config = TrainConfig {
        batch_size: 4,
        max_steps: OVERFIT_STEPS,
        ..training_config(&model, 0)
    };
    let (initial, last) = overfit_run(config.clone(), &scenes);
    let ratio = last / initial;
    let (p_initial, p_last) = overfit_run(plain_regression(config), &scenes);
    record.values.insert(
        "overfit".into(),
        json!({
            "scenes": OVERFIT_SCENES, "steps": OVERFIT_STEPS,
            "full": {"initial_train_mae": initial, "final_train_mae": last, "ratio": ratio},
            "plain_regression": {"initial_train_mae": p_initial, "final_train_mae": p_last, "ratio": p_last / p_initial},
        }),
    );
    Outcome::new(
        ratio <= OVERFIT_RATIO,
        format!(
            "full objective (K=5): train MAE {initial:.3} -> {last:.3} after {OVERFIT_STEPS} steps, ratio {ratio:.3} (<= {OVERFIT_RATIO}); plain regression (K=1, lambdas 0) for reference: {p_initial:.3} -> {p_last:.3}, ratio {:.3}",
            p_last / p_initial
        ),
    )
}

struct SeedRun {
    best_val_mae: f64,
    best_epoch: usize,
    test_mae: f64,
}

struct TransferRuns {
    train_mean: f64,
    baseline_test_mae: f64,
    full: Vec<SeedRun>,
    plain: Vec<SeedRun>,
}

fn transfer_runs(record: &mut Record) -> &TransferRuns {
    if record.transfer.is_none() {
        let model = training_model();
        let plan = GenPlan {
            splits: vec![
                SplitPlan {
                    name: "train".into(),
                    categories: vec![Category::Circles],
                    scenes: TRANSFER_TRAIN_SCENES,
                },
                SplitPlan {
                    name: "val".into(),
                    categories: vec![Category::Circles],
                    scenes: TRANSFER_VAL_SCENES,
                },
                SplitPlan {
                    name: "test".into(),
                    categories: vec![Category::Squares],
                    scenes: TRANSFER_TEST_SCENES,
                },
            ],
            min_count: 5,
            max_count: 40,
            seed: 6,
            image_hw: (model.vision.image_height, model.vision.image_width),
            density_hw: model.density_hw(),
            radius: (2.0, 3.0),
            kernel_sigma: DEFAULT_KERNEL_SIGMA,
        };
        let (train, val, test) = (plan.samples(0).unwrap(), plan.samples(1).unwrap(), plan.samples(2).unwrap());
        let train_mean = train.iter().map(|s| s.count as f64).sum::<f64>() / train.len() as f64;
        let truth: Vec<f64> = test.iter().map(|s| s.count as f64).collect();
        let baseline_test_mae = mae(&vec![train_mean; truth.len()], &truth);
        let run = |config: TrainConfig| {
            let out = train_on::<f32>(&config, &train, &val, None).unwrap();
            SeedRun {
                best_val_mae: out.history[out.best_epoch - 1].val_mae,
                best_epoch: out.best_epoch,
                test_mae: evaluate(&out.best, &test).unwrap().mae,
            }
        };
        let mut full = Vec::new();
        let mut plain = Vec::new();
        for seed in ABLATION_SEEDS {
            let config = TrainConfig {
                epochs: TRANSFER_EPOCHS,
                ..training_config(&model, seed)
            };
            full.push(run(config.clone()));
            plain.push(run(plain_regression(config)));
        }
        let runs_json = |runs: &[SeedRun]| {
            runs.iter()
                .map(|r| json!({"best_val_mae": r.best_val_mae, "best_epoch": r.best_epoch, "squares_test_mae": r.test_mae}))
                .collect::<Vec<_>>()
        };
        record.values.insert(
            "transfer".into(),
            json!({
                "train_scenes": TRANSFER_TRAIN_SCENES, "val_scenes": TRANSFER_VAL_SCENES,
                "test_scenes": TRANSFER_TEST_SCENES, "epochs": TRANSFER_EPOCHS,
                "train_mean": train_mean, "mean_baseline_squares_mae": baseline_test_mae,
                "full": runs_json(&full), "plain_regression": runs_json(&plain),
            }),
        );
        record.transfer = Some(TransferRuns {
            train_mean,
            baseline_test_mae,
            full,
            plain,
        });
    }
    record.transfer.as_ref().unwrap()
}

fn c6_transfer(record: &mut Record) -> Outcome {
    let runs = transfer_runs(record);
    let full = &runs.full[0];
    let improvement = 1.0 - full.test_mae / runs.baseline_test_mae;
    let plain_improvement = 1.0 - runs.plain[0].test_mae / runs.baseline_test_mae;
    Outcome::new(
        improvement >= TRANSFER_MIN_IMPROVEMENT,
        format!(
            "full objective, seed 0: squares MAE {:.3} vs train-mean ({:.2}) baseline {:.3}, improvement {:.1}% (>= {:.0}%); plain regression for reference: {:.3} ({:.1}%)",
            full.test_mae,
            runs.train_mean,
            runs.baseline_test_mae,
            100.0 * improvement,
            100.0 * TRANSFER_MIN_IMPROVEMENT,
            runs.plain[0].test_mae,
            100.0 * plain_improvement
        ),
    )
}

fn c7_ablation(record: &mut Record) -> Outcome {
    let runs = transfer_runs(record);
    let mean = |r: &[SeedRun]| r.iter().map(|s| s.best_val_mae).sum::<f64>() / r.len() as f64;
    let (full, plain) = (mean(&runs.full), mean(&runs.plain));
    let fmt = |r: &[SeedRun]| r.iter().map(|s| format!("{:.3}", s.best_val_mae)).collect::<Vec<_>>().join("/");
    Outcome::new(
        full <= plain,
        format!(
            "val MAE over seeds {ABLATION_SEEDS:?}: full {full:.3} [{}] vs K=1, lambda1=lambda2=0 {plain:.3} [{}] (need full <= plain)",
            fmt(&runs.full),
            fmt(&runs.plain)
        ),
    )
}

fn c8_coupling(_: &mut Record) -> Outcome {
    let model = QicaModel::<f64>::new(ModelConfig::default(), 8).unwrap();
    let sample = common::scene(&model.config, Category::Circles, 9, 8);
    let g = Graph::new();
    let ctx = Ctx::new(&g, &model.params);
    let patches = model.vision.embed_patches(&ctx, &sample.image).unwrap();
    let text_prompts = model.prompts.raw(&ctx);
    let vision_prompts = model.coupling.couple(&ctx, &text_prompts).unwrap();
    let visual = model.vision.encode_embedded(&ctx, patches, &vision_prompts).unwrap();
    let dense = g.sum_squares(visual.dense);
    let global = g.sum_squares(visual.global);
    let loss = g.add(dense, global);
    let grads = g.backward(loss);
    let pi1 = model.prompts.grid(0);
    let phi1 = model.coupling.map(0).weight;
    let phi_norm = model.params.value(phi1).max_abs();
    let norm = grads
        .get(pi1.0)
        .map(|m| m.data().iter().map(|v| v * v).sum::<f64>().sqrt())
        .unwrap_or(0.0);
    Outcome::new(
        norm > 0.0 && norm.is_finite() && phi_norm > 0.0,
        format!("vision-only loss: |dL/dPi^1| = {norm:.3e} with max|Phi^1| = {phi_norm:.3e}"),
    )
}

fn c9_purity(_: &mut Record) -> Outcome {
    let model = QicaModel::<f64>::new(ModelConfig::default(), 9).unwrap();
    let sample = common::scene(&model.config, Category::Squares, 11, 9);
    let g = Graph::new();
    let ctx = Ctx::new(&g, &model.params);
    let patches = model.vision.embed_patches(&ctx, &sample.image).unwrap();
    let pair = model.forward_inference(&ctx, patches, "a photo of squares").unwrap();
    let out = model.decode(&ctx, &pair).unwrap();
    let loss = g.sum(out.density);
    let grads = g.backward(loss);
    let calls = (ctx.probe.embed_quantity.get(), ctx.probe.category_project.get());
    let mut leaked = Vec::new();
    for group in [ParamGroup::Quantity, ParamGroup::CategoryProjection] {
        for id in model.params.ids_in(group) {
            if grads.get(id.0).is_some_and(|m| m.data().iter().any(|&v| v != 0.0)) {
                leaked.push(model.params.entry(id).name.clone());
            }
        }
    }
    let reached = grads.len();

    // contrast: the training path does call both stages once per hypothesis
    let g2 = Graph::new();
    let ctx2 = Ctx::new(&g2, &model.params);
    let p2 = model.vision.embed_patches(&ctx2, &sample.image).unwrap();
    model.forward_hypothesis(&ctx2, p2, "squares", 11, 0).unwrap();
    let training_calls = ctx2.probe.quantity_calls();
    Outcome::new(
        calls == (0, 0) && leaked.is_empty() && reached > 0 && training_calls == 2,
        format!(
            "inference: embed_quantity {} calls, category_project {} calls, {} quantity-dependent params with gradient ({reached} params reached); one training hypothesis makes {training_calls} calls",
            calls.0,
            calls.1,
            leaked.len()
        ),
    )
}

fn c10_serialization(_: &mut Record) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let dir = tempfile::tempdir().unwrap();
    let mut problems = Vec::new();

    let mut qdm_ok = 0;
    for i in 0..SERIALIZATION_VECTORS {
        let (h, w) = (rng.gen_range(1..40), rng.gen_range(1..40));
        let mut data: Vec<f32> = (0..h * w).map(|_| rng.gen_range(-1e3f32..1e3)).collect();
        // edge values
        data[0] = [0.0, -0.0, f32::MIN_POSITIVE / 3.0, f32::MAX, 1e-30][i % 5];
        let map = DensityMap { height: h, width: w, data };
        let path = dir.path().join("d.qdm");
        qdm::write(&path, &map).unwrap();
        let back = qdm::read(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header_ok = &bytes[..4] == b"QDM1"
            && u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize == h
            && u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize == w
            && bytes.len() == 12 + 4 * h * w;
        let bits_ok = back.height == h
            && back.width == w
            && back.data.iter().zip(&map.data).all(|(a, b)| a.to_bits() == b.to_bits());
        if header_ok && bits_ok {
            qdm_ok += 1;
        }
    }
    if qdm_ok != SERIALIZATION_VECTORS {
        problems.push(format!("QDM {qdm_ok}/{SERIALIZATION_VECTORS} bit-exact"));
    }

    let mut ckpt_checked = 0;
    for precision in [Precision::Single, Precision::Double] {
        let config = TrainConfig {
            precision,
            seed: 21,
            ..TrainConfig::default()
        };
        let round_trip = |single: bool| -> Result<usize, String> {
            let path = dir.path().join("model.ckpt.json");
            let (before, after): (Vec<u64>, Vec<u64>) = if single {
                let mut m = QicaModel::<f32>::new(config.model_config(), 21).unwrap();
                perturb(&mut m.params, &mut ChaCha8Rng::seed_from_u64(1));
                Checkpoint::from_model(&m, &config, 3, &[]).save(&path).unwrap();
                let back = Checkpoint::load(&path).unwrap().to_model::<f32>().unwrap();
                (bits(&m.params), bits(&back.params))
            } else {
                let mut m = QicaModel::<f64>::new(config.model_config(), 21).unwrap();
                perturb(&mut m.params, &mut ChaCha8Rng::seed_from_u64(1));
                Checkpoint::from_model(&m, &config, 3, &[]).save(&path).unwrap();
                let back = Checkpoint::load(&path).unwrap().to_model::<f64>().unwrap();
                (bits(&m.params), bits(&back.params))
            };
            if before == after {
                Ok(before.len())
            } else {
                Err(format!("{precision:?} checkpoint differs"))
            }
        };
        match round_trip(precision == Precision::Single) {
            Ok(n) => ckpt_checked += n,
            Err(e) => problems.push(e),
        }
    }

    let mut worst: f64 = 0.0;
    for _ in 0..SERIALIZATION_VECTORS {
        let n = rng.gen_range(1..200);
        let p: Vec<f64> = (0..n).map(|_| rng.gen_range(-100.0..100.0)).collect();
        let t: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..100.0)).collect();
        for (got, want) in [(mae(&p, &t), common::mae_oracle(&p, &t)), (rmse(&p, &t), common::rmse_oracle(&p, &t))] {
            worst = worst.max((got - want).abs() / want.abs().max(1.0));
        }
    }
    if worst > METRIC_TOLERANCE {
        problems.push(format!("metric deviation {worst:.1e}"));
    }
    Outcome::new(
        problems.is_empty(),
        if problems.is_empty() {
            format!(
                "{SERIALIZATION_VECTORS} QDM files bit-exact; {ckpt_checked} checkpoint values bit-exact (f32 and f64); MAE/RMSE vs Kahan oracle max deviation {worst:.1e} (<= {METRIC_TOLERANCE:e})"
            )
        } else {
            problems.join("; ")
        },
    )
}

fn perturb<T: qica_autograd::Real>(params: &mut qica_core::params::ParamStore<T>, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = params.entries().iter().enumerate().map(|(i, _)| qica_core::params::ParamId(i)).collect();
    for id in ids {
        for v in params.value_mut(id).data_mut() {
            *v = T::of(v.as_f64() + rng.gen_range(-1e-3..1e-3) * std::f64::consts::PI);
        }
    }
}

fn bits<T: qica_autograd::Real>(params: &qica_core::params::ParamStore<T>) -> Vec<u64> {
    params
        .entries()
        .iter()
        .flat_map(|e| e.value.data().iter().map(|v| v.as_f64().to_bits()))
        .collect()
}
