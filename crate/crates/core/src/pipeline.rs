//! End-to-end stages operating on an output directory: data generation,
//! both training stages, evaluation and slice export.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::config::{derive_seed, Purpose, RunConfig};
use crate::error::{Error, Result};
use crate::metrics::{metrics_csv, summarize, MetricsRecord, MetricsSummary};
use crate::nets::{load_checkpoint, save_checkpoint, SegNet, ShapeLearner};
use crate::rvf::read_volume;
use crate::slices::{label_slice, overlay_slice, volume_slice, Plane};
use crate::synth::Dataset;
use crate::train::{
    case_id, evaluate_affine_invariance, evaluate_prediction, evaluate_segmenter, train_shape_learner, SegTrainer,
    TrainLog, PREDICTION_THRESHOLD,
};
use crate::volume::Volume;

pub const SHAPE_CHECKPOINT: &str = "shape.ssck";

/// Output locations for one run.
#[derive(Clone, Debug)]
pub struct Layout {
    pub out: PathBuf,
    pub data: PathBuf,
}

impl Layout {
    pub fn new(cfg: &RunConfig, out: impl Into<PathBuf>) -> Self {
        let out = out.into();
        let data = cfg.data.dir.clone().unwrap_or_else(|| out.join("data"));
        Layout { out, data }
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn ensure(&self) -> Result<()> {
        fs::create_dir_all(&self.out)?;
        Ok(())
    }
}

pub fn gen_data(cfg: &RunConfig, layout: &Layout) -> Result<Dataset> {
    let ds = cfg.dataset_spec().generate()?;
    ds.save(&layout.data)?;
    Ok(ds)
}

fn require(path: &Path, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{} not found; {hint}", path.display())))
    }
}

pub fn load_data(layout: &Layout) -> Result<Dataset> {
    require(&layout.data, "run gen-data first")?;
    Dataset::load(&layout.data)
}

fn load_seg(layout: &Layout, model: &str) -> Result<SegNet> {
    let path = layout.file(&format!("{model}.ssck"));
    require(&path, "run train-seg first or pass --model")?;
    load_checkpoint(path)
}

fn write_log(layout: &Layout, name: &str, log: &TrainLog) -> Result<()> {
    fs::write(layout.file(&format!("{name}_log.csv")), log.to_csv())?;
    Ok(())
}

pub fn train_shape(cfg: &RunConfig, layout: &Layout, ds: &Dataset) -> Result<(ShapeLearner, TrainLog)> {
    layout.ensure()?;
    let g = ShapeLearner::new(cfg.shape_net, derive_seed(cfg.seed, Purpose::ShapeInit))?;
    let (g, mut log) = train_shape_learner(ds, g, &cfg.shape_train())?;
    let path = layout.file(SHAPE_CHECKPOINT);
    save_checkpoint(&g, &path)?;
    log.checkpoint = Some(path);
    write_log(layout, "shape", &log)?;
    let mut collapse = String::from("iteration,different_subject_mean,collapsed\n");
    for c in &log.collapse {
        writeln!(collapse, "{},{:.8},{}", c.iteration, c.different_subject_mean, c.collapsed).unwrap();
    }
    fs::write(layout.file("shape_collapse.csv"), collapse)?;
    Ok((g, log))
}

pub fn load_shape(layout: &Layout) -> Result<ShapeLearner> {
    let path = layout.file(SHAPE_CHECKPOINT);
    require(&path, "run train-shape first")?;
    load_checkpoint(path)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Invariance {
    pub same_subject_mean: f64,
    pub different_subject_mean: f64,
}

impl Invariance {
    pub fn ratio(&self) -> f64 {
        self.different_subject_mean / self.same_subject_mean
    }
}

pub fn eval_shape(cfg: &RunConfig, layout: &Layout, ds: &Dataset, g: &ShapeLearner) -> Result<Invariance> {
    layout.ensure()?;
    let (same, different) = evaluate_affine_invariance(g, ds, cfg.eval.n_pairs, &cfg.eval_augment())?;
    let inv = Invariance {
        same_subject_mean: same,
        different_subject_mean: different,
    };
    fs::write(
        layout.file("shape_invariance.csv"),
        format!("pairs,same_subject_mean,different_subject_mean,ratio\n{},{same:.6},{different:.6},{:.6}\n", cfg.eval.n_pairs, inv.ratio()),
    )?;
    Ok(inv)
}

/// Shape learner for segmenter training: the trained checkpoint, or with
/// `alpha == 0` a freshly initialized one used only for logging.
pub fn shape_for_seg(cfg: &RunConfig, layout: &Layout) -> Result<ShapeLearner> {
    let path = layout.file(SHAPE_CHECKPOINT);
    if path.exists() {
        return load_checkpoint(path);
    }
    if cfg.train_seg.alpha == 0.0 {
        return ShapeLearner::new(cfg.shape_net, derive_seed(cfg.seed, Purpose::ShapeInit));
    }
    Err(Error::InvalidArgument(format!(
        "{} not found; run train-shape first or pass --alpha 0",
        path.display()
    )))
}

fn new_trainer(cfg: &RunConfig) -> Result<SegTrainer> {
    SegTrainer::new(SegNet::new(cfg.seg_net, derive_seed(cfg.seed, Purpose::SegInit))?, &cfg.seg_train())
}

fn finish_seg(layout: &Layout, name: &str, trainer: &mut SegTrainer) -> Result<PathBuf> {
    let path = layout.file(&format!("{name}.ssck"));
    save_checkpoint(&trainer.net, &path)?;
    trainer.log.checkpoint = Some(path.clone());
    write_log(layout, name, &trainer.log)?;
    Ok(path)
}

/// Both phases, saved as `<name>.ssck` and `<name>_log.csv`.
pub fn train_seg(cfg: &RunConfig, layout: &Layout, ds: &Dataset, g: &ShapeLearner, name: &str) -> Result<SegTrainer> {
    layout.ensure()?;
    let s = cfg.seg_train();
    let mut trainer = new_trainer(cfg)?;
    trainer.run(ds, g, s.phase1_iters, 0.0, s.cap)?;
    trainer.run(ds, g, s.phase2_iters, s.alpha, s.cap)?;
    finish_seg(layout, name, &mut trainer)?;
    Ok(trainer)
}

pub fn write_metrics(layout: &Layout, name: &str, records: &[MetricsRecord]) -> Result<PathBuf> {
    let path = layout.file(&format!("metrics_{name}.csv"));
    fs::write(&path, metrics_csv(records))?;
    Ok(path)
}

pub fn evaluate_model(layout: &Layout, ds: &Dataset, g: &ShapeLearner, model: &str) -> Result<Vec<MetricsRecord>> {
    layout.ensure()?;
    let f = load_seg(layout, model)?;
    let records = evaluate_segmenter(&f, ds, g)?;
    write_metrics(layout, model, &records)?;
    Ok(records)
}

/// Soft predictions for the test cases read from `dir`, as
/// `subject_XXX_pred.rvf`, or failing that `subject_XXX_label.rvf`.
pub fn evaluate_files(layout: &Layout, ds: &Dataset, g: &ShapeLearner, dir: &Path) -> Result<Vec<MetricsRecord>> {
    layout.ensure()?;
    let records = ds
        .test_cases()
        .map(|case| {
            let id = case_id(case.subject_id);
            let pred = dir.join(format!("{id}_pred.rvf"));
            let path = if pred.exists() { pred } else { dir.join(format!("{id}_label.rvf")) };
            evaluate_prediction(case, &read_volume(&path)?, g)
        })
        .collect::<Result<Vec<_>>>()?;
    write_metrics(layout, "predictions", &records)?;
    Ok(records)
}

/// Image, label, prediction and overlay at the three mid-planes of one test case.
pub fn dump_slices(layout: &Layout, ds: &Dataset, model: &str, subject: Option<u64>) -> Result<Vec<PathBuf>> {
    let case = match subject {
        Some(id) => ds.cases.iter().find(|c| c.subject_id == id),
        None => ds.test_cases().next(),
    }
    .ok_or_else(|| Error::InvalidArgument("no such case".into()))?;
    let f = load_seg(layout, model)?;
    let soft = Volume::from_tensor(&f.predict(&case.image.to_tensor())?)?;
    let pred = soft.threshold(PREDICTION_THRESHOLD);
    let dir = layout.file("slices");
    fs::create_dir_all(&dir)?;
    let id = case_id(case.subject_id);
    let mut written = Vec::new();
    for plane in Plane::ALL {
        let p = plane.name();
        for (kind, slice) in [
            ("image", volume_slice(&case.image, plane)),
            ("label", label_slice(&case.label, plane)),
            ("pred", label_slice(&pred, plane)),
            ("overlay", overlay_slice(&case.label, &pred, plane)?),
        ] {
            let path = dir.join(format!("{id}_{model}_{kind}_{p}.pgm"));
            slice.write_pgm(&path)?;
            written.push(path);
        }
    }
    Ok(written)
}

pub const BASELINE: &str = "seg_baseline";
pub const SHAPE_GUIDED: &str = "seg_shape";

#[derive(Clone, Debug, PartialEq)]
pub struct Reproduction {
    pub invariance: Invariance,
    pub baseline: Vec<MetricsRecord>,
    pub shape_guided: Vec<MetricsRecord>,
    pub baseline_log: TrainLog,
    pub shape_log: TrainLog,
    pub shape_learner_log: TrainLog,
    pub timings: StageTimes,
}

/// Wall-clock seconds per stage of [`reproduce`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StageTimes {
    pub data: f64,
    pub shape_training: f64,
    pub shape_eval: f64,
    pub seg_training: f64,
    pub evaluation: f64,
}

impl Reproduction {
    pub fn summaries(&self) -> (MetricsSummary, MetricsSummary) {
        (summarize(&self.baseline), summarize(&self.shape_guided))
    }

    /// Per-method mean Dice and HD.
    pub fn table(&self) -> String {
        let (b, s) = self.summaries();
        let mut out = String::from("method,dice,hausdorff\n");
        writeln!(out, "dice_only,{:.6},{:.6}", b.dice, b.hausdorff).unwrap();
        writeln!(out, "shape_guided,{:.6},{:.6}", s.dice, s.hausdorff).unwrap();
        out
    }
}

/// Full pipeline. Phase 1 is trained once; phase 2 then branches into the
/// Dice-only baseline (`alpha = 0`) and the shape-guided model.
pub fn reproduce(cfg: &RunConfig, layout: &Layout) -> Result<Reproduction> {
    let mut clock = Instant::now();
    let mut lap = || {
        let s = clock.elapsed().as_secs_f64();
        clock = Instant::now();
        s
    };
    let mut timings = StageTimes::default();
    let ds = gen_data(cfg, layout)?;
    timings.data = lap();
    let (g, shape_learner_log) = train_shape(cfg, layout, &ds)?;
    timings.shape_training = lap();
    let invariance = eval_shape(cfg, layout, &ds, &g)?;
    timings.shape_eval = lap();

    let s = cfg.seg_train();
    let mut phase1 = new_trainer(cfg)?;
    phase1.run(&ds, &g, s.phase1_iters, 0.0, s.cap)?;
    let mut baseline = phase1.clone();
    baseline.run(&ds, &g, s.phase2_iters, 0.0, s.cap)?;
    finish_seg(layout, BASELINE, &mut baseline)?;
    let mut guided = phase1;
    guided.run(&ds, &g, s.phase2_iters, s.alpha, s.cap)?;
    finish_seg(layout, SHAPE_GUIDED, &mut guided)?;
    timings.seg_training = lap();

    let baseline_metrics = evaluate_model(layout, &ds, &g, BASELINE)?;
    let shape_metrics = evaluate_model(layout, &ds, &g, SHAPE_GUIDED)?;
    timings.evaluation = lap();
    let rep = Reproduction {
        invariance,
        baseline: baseline_metrics,
        shape_guided: shape_metrics,
        baseline_log: baseline.log,
        shape_log: guided.log,
        shape_learner_log,
        timings,
    };
    fs::write(layout.file("comparison.csv"), rep.table())?;
    Ok(rep)
}
