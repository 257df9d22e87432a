//! Heavier checks shared with the acceptance run: gradient check, freeze
//! bit-exactness, overfit and the closed-form parameter counts.

use ndarray::{Array4, ArrayD};
use rand::Rng;
use statechef::augment::AugmentationConfig;
use statechef::dataset::TrainingSet;
use statechef::model::{build_model, FreezeScope, Model, ModelSpec, ParamGroup};
use statechef::training::{
    evaluate_set, object_finetune_schedule, run_stage, whole_dataset_schedule, EpochRecord, RunOptions, Schedule,
    TrainingStage,
};

use super::rng;

pub fn random_batch(seed: u64, n: usize, size: (usize, usize)) -> Array4<f64> {
    let mut r = rng(seed);
    Array4::from_shape_fn((n, size.0, size.1, 3), |_| r.random::<f64>())
}

#[derive(Debug)]
pub struct GradientCheck {
    pub checked: usize,
    pub max_relative_error: f64,
    pub worst: String,
}

/// Central differences `(L(w+h) − L(w−h)) / 2h` for every element of every
/// trainable head tensor, against the analytic gradient.
pub fn gradient_check(scope: FreezeScope, l2: f64) -> GradientCheck {
    const H: f64 = 1e-5;
    let spec = ModelSpec::tiny(11, 21);
    let mut model = build_model(spec).unwrap();
    let batch = random_batch(5, 4, (16, 16));
    let labels = [3, 0, 10, 7];
    // Analytic gradients on a copy so the running statistics of the
    // evaluated model are untouched.
    let mut analytic_model = model.clone();
    analytic_model.train_step_gradients(&batch, &labels, scope, l2).unwrap();
    let analytic: Vec<(String, ArrayD<f64>)> = analytic_model
        .named_params()
        .into_iter()
        .filter(|(n, p)| {
            p.kind.is_learned() && Model::group_of(n) != ParamGroup::Backbone && scope.trains(Model::group_of(n))
        })
        .map(|(n, p)| (n, p.grad.clone().expect("trainable tensor has a gradient")))
        .collect();
    let mut out = GradientCheck {
        checked: 0,
        max_relative_error: 0.0,
        worst: String::new(),
    };
    for (name, grad) in analytic {
        for idx in 0..grad.len() {
            let probe = |model: &mut Model, delta: f64| {
                for (n, p) in model.named_params_mut() {
                    if n == name {
                        let v = p.value.as_slice_mut().expect("contiguous");
                        v[idx] += delta;
                    }
                }
            };
            probe(&mut model, H);
            let up = model.training_loss(&batch, &labels, scope, l2).unwrap();
            probe(&mut model, -2.0 * H);
            let down = model.training_loss(&batch, &labels, scope, l2).unwrap();
            probe(&mut model, H);
            let numeric = (up - down) / (2.0 * H);
            let a = grad.as_slice().expect("contiguous")[idx];
            let scale = a.abs().max(numeric.abs());
            let rel = if scale < 1e-9 { 0.0 } else { (a - numeric).abs() / scale };
            out.checked += 1;
            if rel > out.max_relative_error {
                out.max_relative_error = rel;
                out.worst = format!("{name}[{idx}]: analytic {a:e}, numeric {numeric:e}");
            }
        }
    }
    out
}

/// The synthetic overfit fixture: 11 procedural textures × 20 images.
pub fn overfit_set() -> TrainingSet {
    TrainingSet::synthetic(11, 20, (16, 16), 17)
}

/// Two phases: added layers with the backbone frozen, then all layers.
pub fn overfit_schedule() -> Schedule {
    let mut s = whole_dataset_schedule();
    s.name = "overfit".into();
    let settings = [(0.01, 25), (0.003, 25)];
    for (stage, (lr, epochs)) in s.stages.iter_mut().zip(settings) {
        stage.learning_rate = lr;
        stage.epochs = epochs;
        stage.augmentation = AugmentationConfig::disabled();
    }
    s
}

pub struct OverfitRun {
    pub train_top1: f64,
    pub history: Vec<EpochRecord>,
}

pub fn overfit_run() -> OverfitRun {
    let set = overfit_set();
    let mut model = build_model(ModelSpec::tiny(11, 8)).unwrap();
    let mut history = Vec::new();
    for (i, stage) in overfit_schedule().stages.iter().enumerate() {
        history.extend(
            run_stage(
                &mut model,
                &set,
                None,
                stage,
                i,
                99,
                RunOptions::default(),
                &mut |_, _| Ok(()),
            )
            .unwrap(),
        );
    }
    let (_, top1, _) = evaluate_set(&model, &set).unwrap();
    OverfitRun {
        train_top1: top1,
        history,
    }
}

#[derive(Debug)]
pub struct FreezeOutcome {
    pub stage: String,
    pub scope: FreezeScope,
    /// Frozen tensors (learned and running statistics) whose digest changed.
    pub frozen_changed: Vec<String>,
    /// Trainable learned tensors whose digest did not change.
    pub trainable_unchanged: Vec<String>,
    pub frozen_count: usize,
    pub trainable_count: usize,
}

impl FreezeOutcome {
    pub fn ok(&self) -> bool {
        self.frozen_changed.is_empty() && self.trainable_unchanged.is_empty() && self.trainable_count > 0
    }
}

/// One epoch of every schedule stage that freezes something, plus the
/// unfrozen stages, on the tiny fixture.
pub fn freeze_check() -> Vec<FreezeOutcome> {
    let set = TrainingSet::synthetic(11, 4, (16, 16), 3);
    let stages: Vec<TrainingStage> = whole_dataset_schedule()
        .stages
        .into_iter()
        .chain(object_finetune_schedule().stages)
        .collect();
    let mut out = Vec::new();
    for (i, stage) in stages.into_iter().enumerate() {
        let mut stage = stage.clone();
        stage.epochs = 1;
        let mut model = build_model(ModelSpec::tiny(11, 40 + i as u64)).unwrap();
        // Warm the running statistics so frozen layers are not at their init values.
        let warm = TrainingStage::new("warm", FreezeScope::NoFreeze, 0.001, 1);
        run_stage(
            &mut model,
            &set,
            None,
            &warm,
            9,
            1,
            RunOptions::default(),
            &mut |_, _| Ok(()),
        )
        .unwrap();
        let before = model.snapshot_parameters();
        run_stage(
            &mut model,
            &set,
            None,
            &stage,
            i,
            2,
            RunOptions::default(),
            &mut |_, _| Ok(()),
        )
        .unwrap();
        let after = model.snapshot_parameters();
        let changed = before.changed(&after);
        let mut o = FreezeOutcome {
            stage: stage.name.clone(),
            scope: stage.freeze_scope,
            frozen_changed: Vec::new(),
            trainable_unchanged: Vec::new(),
            frozen_count: 0,
            trainable_count: 0,
        };
        for (name, t) in &before.tensors {
            let did_change = changed.contains(name);
            if stage.freeze_scope.trains(t.group) {
                if t.kind.is_learned() {
                    o.trainable_count += 1;
                    if !did_change {
                        o.trainable_unchanged.push(name.clone());
                    }
                }
            } else {
                o.frozen_count += 1;
                if did_change {
                    o.frozen_changed.push(name.clone());
                }
            }
        }
        out.push(o);
    }
    out
}

/// Bottleneck block: 1×1 reduce, 3×3, 1×1 expand, each with batch norm
/// (scale and shift), plus a projected shortcut when asked. No conv biases.
fn bottleneck(input: usize, mid: usize, out: usize, projection: bool) -> usize {
    let bn = |c: usize| 2 * c;
    let mut n = input * mid + bn(mid) + 9 * mid * mid + bn(mid) + mid * out + bn(out);
    if projection {
        n += input * out + bn(out);
    }
    n
}

fn head(features: usize, pointwise: usize, conv: usize, kernel: usize, classes: usize) -> usize {
    features * pointwise
        + 2 * pointwise
        + kernel * kernel * pointwise * conv
        + 2 * conv
        + kernel * kernel * conv * conv
        + 2 * conv
        + conv * classes
        + classes
}

/// Hand count for the 50-layer topology cut after 15 bottlenecks (3, 4, 6
/// and 2 of the fourth stage's 3) with the default 512-wide head.
pub fn production_parameter_oracle(classes: usize) -> usize {
    let stem = 7 * 7 * 3 * 64 + 2 * 64;
    let mut total = stem;
    let stages = [(3, 64, 256), (4, 128, 512), (6, 256, 1024), (2, 512, 2048)];
    let mut input = 64;
    for (blocks, mid, out) in stages {
        for b in 0..blocks {
            total += bottleneck(input, mid, out, b == 0);
            input = out;
        }
    }
    total + head(2048, 512, 512, 3, classes)
}

/// Hand count for the tiny test backbone (3×3 stem to 4 channels, two
/// bottlenecks 4→4→8) with the 8-wide head.
pub fn tiny_parameter_oracle(classes: usize) -> usize {
    let stem = 3 * 3 * 3 * 4 + 2 * 4;
    stem + bottleneck(4, 4, 8, true) + bottleneck(8, 4, 8, false) + head(8, 8, 8, 3, classes)
}
