//! Optimizer, the shape-learner and segmenter training loops, and evaluation.

mod adam;

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub use adam::{AdamConfig, AdamState};

use crate::affine::{apply_affine_labels, augment_case, make_affine_pair, sample_random_affine, AugmentationSpec};
use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::fpenv::FlushToZero;
use crate::losses::{shape_loss, signature_distance, total_loss, LossComponents, ShapeTerm};
use crate::metrics::{dice_coefficient, hausdorff_or_diagonal, MetricsRecord};
use crate::nets::{Network, Parameter, SegNet, ShapeLearner};
use crate::synth::{Case, Dataset};
use crate::volume::{Grid, LabelMap, Volume};

/// Threshold applied to soft predictions before computing metrics.
pub const PREDICTION_THRESHOLD: f32 = 0.5;

/// Distances below this are reported as a collapsed shape learner.
pub const COLLAPSE_THRESHOLD: f64 = 10.0 * f32::EPSILON as f64;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRecord {
    pub iteration: usize,
    pub components: LossComponents,
    pub ms: f64,
}

/// Mean different-subject distance sampled during shape-learner training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CollapseCheck {
    pub iteration: usize,
    pub different_subject_mean: f64,
    pub collapsed: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
    pub collapse: Vec<CollapseCheck>,
    pub checkpoint: Option<PathBuf>,
}

pub const TRAIN_LOG_HEADER: &str = "iteration,dice,shape_raw,shape_capped,total,ms";

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{TRAIN_LOG_HEADER}\n");
        for r in &self.records {
            let c = r.components;
            writeln!(
                out,
                "{},{:.8},{:.8},{:.8},{:.8},{:.1}",
                r.iteration, c.dice, c.shape_raw, c.shape_capped, c.total, r.ms
            )
            .unwrap();
        }
        out
    }

    /// Loss values only, for comparing runs regardless of timing.
    pub fn losses(&self) -> Vec<(usize, LossComponents)> {
        self.records.iter().map(|r| (r.iteration, r.components)).collect()
    }

    pub fn collapsed(&self) -> bool {
        self.collapse.iter().any(|c| c.collapsed)
    }
}

fn diverged(iteration: usize, err: Error) -> Error {
    match err {
        Error::NonFinite { op } => Error::Diverged {
            iteration,
            detail: format!("non-finite value in {op}"),
        },
        e => e,
    }
}

fn check_finite(iteration: usize, c: &LossComponents) -> Result<()> {
    if [c.dice, c.shape_raw, c.shape_capped, c.total].iter().all(|v| v.is_finite()) {
        return Ok(());
    }
    Err(Error::Diverged {
        iteration,
        detail: format!("{c:?}"),
    })
}

fn take_grads(grads: &mut Gradients<f32>, vars: &[Var<'_, f32>], params: &[Parameter]) -> Result<Vec<Tensor<f32>>> {
    vars.iter()
        .zip(params)
        .map(|(&v, p)| grads.take(v).ok_or_else(|| Error::Backward(format!("missing gradient for {}", p.name))))
        .collect()
}

fn pick<'a, R: Rng>(cases: &[&'a Case], rng: &mut R) -> &'a Case {
    cases[rng.random_range(0..cases.len())]
}

fn check_train_split(dataset: &Dataset) -> Result<Vec<&Case>> {
    let cases: Vec<&Case> = dataset.train_cases().collect();
    if cases.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    Ok(cases)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapeTrainConfig {
    pub iterations: usize,
    pub augmentation: AugmentationSpec,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Collapse monitor period, in iterations.
    pub monitor_every: usize,
}

impl Default for ShapeTrainConfig {
    fn default() -> Self {
        ShapeTrainConfig {
            iterations: 200,
            augmentation: AugmentationSpec::default(),
            adam: AdamConfig::default(),
            seed: 0,
            monitor_every: 10,
        }
    }
}

/// Mean signature distance over all pairs of distinct training labels.
fn different_subject_mean(g: &ShapeLearner, sigs_of: &[Tensor<f32>]) -> Result<f64> {
    let sigs: Vec<Tensor<f32>> = sigs_of.iter().map(|m| g.signature(m)).collect::<Result<_>>()?;
    let (mut sum, mut n) = (0.0, 0);
    for i in 0..sigs.len() {
        for j in i + 1..sigs.len() {
            let tape = Tape::<f64>::new();
            sum += signature_distance(tape.constant(sigs[i].cast()), tape.constant(sigs[j].cast()))?.item();
            n += 1;
        }
    }
    Ok(if n == 0 { f64::NAN } else { sum / n as f64 })
}

/// Trains `g` to map two random affine transforms of the same training label
/// to nearby signatures. Iteration `i` draws from `augmentation.with_seed(seed).rng(i)`.
pub fn train_shape_learner(dataset: &Dataset, mut g: ShapeLearner, cfg: &ShapeTrainConfig) -> Result<(ShapeLearner, TrainLog)> {
    let _ftz = FlushToZero::new();
    let cases = check_train_split(dataset)?;
    g.config.signature_dims(dataset.dims())?;
    let spec = cfg.augmentation.with_seed(cfg.seed);
    let mut adam = AdamState::new(cfg.adam, g.params());
    let mut log = TrainLog::default();
    let monitor: Vec<Tensor<f32>> = cases.iter().take(4).map(|c| c.label.to_tensor()).collect();
    for it in 0..cfg.iterations {
        let start = Instant::now();
        let mut rng = spec.rng(it as u64);
        let case = pick(&cases, &mut rng);
        let (m1, m2) = make_affine_pair(&case.label, &spec, &mut rng)?;
        let tape = Tape::<f32>::new();
        let theta = g.bind(&tape, true);
        let loss = shape_loss(&g, &theta, tape.constant(m1.to_tensor()), tape.constant(m2.to_tensor()))
            .map_err(|e| diverged(it, e))?;
        let raw = loss.item();
        let components = LossComponents {
            dice: 0.0,
            shape_raw: raw,
            shape_capped: raw,
            total: raw,
        };
        check_finite(it, &components)?;
        let mut grads = tape.backward(loss)?;
        let grads = take_grads(&mut grads, &theta, g.params())?;
        adam.step(g.params_mut(), &grads)?;
        log.records.push(LogRecord {
            iteration: it,
            components,
            ms: start.elapsed().as_secs_f64() * 1e3,
        });
        if cfg.monitor_every > 0 && (it + 1) % cfg.monitor_every == 0 && monitor.len() >= 2 {
            let mean = different_subject_mean(&g, &monitor)?;
            log.collapse.push(CollapseCheck {
                iteration: it,
                different_subject_mean: mean,
                collapsed: mean < COLLAPSE_THRESHOLD,
            });
        }
    }
    Ok((g, log))
}

/// Average shape loss over `n_pairs` affine pairs of one test subject, and
/// over `n_pairs` independently transformed labels of two distinct test subjects.
pub fn evaluate_affine_invariance(
    g: &ShapeLearner,
    dataset: &Dataset,
    n_pairs: usize,
    spec: &AugmentationSpec,
) -> Result<(f64, f64)> {
    let _ftz = FlushToZero::new();
    let cases: Vec<&Case> = dataset.test_cases().collect();
    if cases.len() < 2 {
        return Err(Error::InvalidArgument(format!("{} test subjects, need at least 2", cases.len())));
    }
    if n_pairs == 0 {
        return Err(Error::InvalidArgument("n_pairs must be positive".into()));
    }
    let distance = |a: &LabelMap, b: &LabelMap| -> Result<f64> {
        let tape = Tape::<f32>::new();
        let theta = g.bind(&tape, false);
        Ok(shape_loss(g, &theta, tape.constant(a.to_tensor()), tape.constant(b.to_tensor()))?.item())
    };
    let (mut same, mut different) = (0.0, 0.0);
    for k in 0..n_pairs as u64 {
        let mut rng = spec.rng(2 * k);
        let c = pick(&cases, &mut rng);
        let (a, b) = make_affine_pair(&c.label, spec, &mut rng)?;
        same += distance(&a, &b)?;

        let mut rng = spec.rng(2 * k + 1);
        let i = rng.random_range(0..cases.len());
        let j = (i + rng.random_range(1..cases.len())) % cases.len();
        let a = transformed(&cases[i].label, spec, &mut rng)?;
        let b = transformed(&cases[j].label, spec, &mut rng)?;
        different += distance(&a, &b)?;
    }
    Ok((same / n_pairs as f64, different / n_pairs as f64))
}

fn transformed(m: &LabelMap, spec: &AugmentationSpec, rng: &mut ChaCha8Rng) -> Result<LabelMap> {
    let t = sample_random_affine(spec, m.dims(), rng);
    apply_affine_labels(m, &t)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegTrainConfig {
    pub phase1_iters: usize,
    pub phase2_iters: usize,
    pub alpha: f64,
    pub cap: f64,
    pub adam: AdamConfig,
    pub augmentation: AugmentationSpec,
    pub seed: u64,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        SegTrainConfig {
            phase1_iters: 800,
            phase2_iters: 400,
            alpha: 0.1,
            cap: 1.0,
            adam: AdamConfig::default(),
            augmentation: AugmentationSpec::default(),
            seed: 0,
        }
    }
}

impl SegTrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !(self.cap > 0.0) {
            return Err(Error::InvalidArgument(format!("alpha {} / cap {} out of range", self.alpha, self.cap)));
        }
        Ok(())
    }
}

/// Segmenter together with its optimizer state and iteration counter, so that
/// training can stop after one phase and continue, possibly along two branches.
#[derive(Clone, Debug, PartialEq)]
pub struct SegTrainer {
    pub net: SegNet,
    pub adam: AdamState,
    pub iteration: usize,
    pub log: TrainLog,
    spec: AugmentationSpec,
}

impl SegTrainer {
    pub fn new(net: SegNet, cfg: &SegTrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(SegTrainer {
            adam: AdamState::new(cfg.adam, net.params()),
            net,
            iteration: 0,
            log: TrainLog::default(),
            spec: cfg.augmentation.with_seed(cfg.seed),
        })
    }

    /// One augmented training case per iteration, minimizing
    /// `L_dice + alpha * min(L_shape, cap)` with `g` frozen.
    pub fn run(&mut self, dataset: &Dataset, g: &ShapeLearner, iters: usize, alpha: f64, cap: f64) -> Result<()> {
        let _ftz = FlushToZero::new();
        let cases = check_train_split(dataset)?;
        let frozen = g.clone();
        for _ in 0..iters {
            let it = self.iteration;
            let start = Instant::now();
            let mut rng = self.spec.rng(it as u64);
            let case = pick(&cases, &mut rng);
            let (image, label) = augment_case(&case.image, &case.label, &self.spec, &mut rng)?;

            let tape = Tape::<f32>::new();
            let w = self.net.bind(&tape, true);
            let theta = g.bind(&tape, false);
            let pred = self.net.forward(tape.constant(image.to_tensor()), &w).map_err(|e| diverged(it, e))?;
            let lv = total_loss(tape.constant(label.to_tensor()), pred, Some(ShapeTerm::new(g, &theta)), alpha, cap)
                .map_err(|e| diverged(it, e))?;
            check_finite(it, &lv.components)?;
            let mut grads = tape.backward(lv.value)?;
            let grads = take_grads(&mut grads, &w, self.net.params())?;
            self.adam.step(self.net.params_mut(), &grads)?;
            self.log.records.push(LogRecord {
                iteration: it,
                components: lv.components,
                ms: start.elapsed().as_secs_f64() * 1e3,
            });
            self.iteration += 1;
        }
        if *g != frozen {
            return Err(Error::InvalidArgument("shape learner changed during segmenter training".into()));
        }
        Ok(())
    }
}

/// Phase 1 (Dice only) for `phase1_iters`, then phase 2 with the capped shape
/// term for `phase2_iters`. The optimizer state carries across the boundary.
pub fn train_segmenter(dataset: &Dataset, g: &ShapeLearner, net: SegNet, cfg: &SegTrainConfig) -> Result<(SegNet, TrainLog)> {
    let mut trainer = SegTrainer::new(net, cfg)?;
    trainer.run(dataset, g, cfg.phase1_iters, 0.0, cfg.cap)?;
    trainer.run(dataset, g, cfg.phase2_iters, cfg.alpha, cfg.cap)?;
    Ok((trainer.net, trainer.log))
}

pub fn case_id(subject_id: u64) -> String {
    format!("subject_{subject_id:03}")
}

/// Metrics for one case given a soft prediction in `[0, 1]`.
pub fn evaluate_prediction(case: &Case, soft: &Volume, g: &ShapeLearner) -> Result<MetricsRecord> {
    let _ftz = FlushToZero::new();
    if soft.dims() != case.label.dims() {
        return Err(Error::shape("evaluate", format!("{:?} vs {:?}", soft.dims(), case.label.dims())));
    }
    let pred = soft.threshold(PREDICTION_THRESHOLD);
    let tape = Tape::<f32>::new();
    let theta = g.bind(&tape, false);
    let shape = shape_loss(g, &theta, tape.constant(case.label.to_tensor()), tape.constant(soft.to_tensor()))?.item();
    Ok(MetricsRecord {
        case_id: case_id(case.subject_id),
        dice: dice_coefficient(&case.label, &pred)?,
        hausdorff: hausdorff_or_diagonal(&case.label, &pred)?,
        shape_loss: shape,
    })
}

/// Per-case metrics of `f` on the test split.
pub fn evaluate_segmenter(f: &SegNet, dataset: &Dataset, g: &ShapeLearner) -> Result<Vec<MetricsRecord>> {
    let _ftz = FlushToZero::new();
    if dataset.test.is_empty() {
        return Err(Error::InvalidArgument("test split is empty".into()));
    }
    dataset
        .test_cases()
        .map(|case| {
            let soft = Volume::from_tensor(&f.predict(&case.image.to_tensor())?)?;
            evaluate_prediction(case, &soft, g)
        })
        .collect()
}

/// Median of a non-empty slice.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}
