use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use shapesig::autodiff::{op_suite, op_suite_mixed, GradCheckOptions, GradCheckReport};
use shapesig::checks::{pipeline_suite, pipeline_suite_mixed};
use shapesig::config::RunConfig;
use shapesig::metrics::summarize;
use shapesig::pipeline::{self, Layout};
use shapesig::synth::ShapeFamily;
use shapesig::Error;

/// Affine-invariant shape signatures as an auxiliary segmentation loss.
#[derive(Parser)]
#[command(name = "shapesig", version)]
struct Cli {
    /// key = value configuration file; flags override its values
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory receiving every artifact
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Run seed [default: 7; SHAPESIG_SEED overrides the config file]
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct DataFlags {
    /// Number of synthetic subjects [default: 10]
    #[arg(long)]
    subjects: Option<usize>,
    /// Cubic volume extent in voxels [default: 48]
    #[arg(long)]
    dims: Option<usize>,
    /// Fraction of subjects in the training split [default: 0.8]
    #[arg(long)]
    split: Option<f64>,
    /// ellipsoid_with_tail, crescent or lobed_blob [default: ellipsoid_with_tail]
    #[arg(long)]
    family: Option<ShapeFamily>,
}

#[derive(Args, Default)]
struct ShapeFlags {
    /// Shape-learner iterations, batch size 1 [default: 200]
    #[arg(long)]
    iterations: Option<usize>,
    /// Adam learning rate [default: 1e-4]
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args, Default)]
struct SegFlags {
    /// Dice-only iterations [default: 800]
    #[arg(long)]
    phase1: Option<usize>,
    /// Dice + shape iterations [default: 400]
    #[arg(long)]
    phase2: Option<usize>,
    /// Shape-loss weight; 0 trains without a shape-learner checkpoint [default: 0.1]
    #[arg(long)]
    alpha: Option<f64>,
    /// Upper clamp on the shape loss [default: 1.0]
    #[arg(long)]
    cap: Option<f64>,
    /// Adam learning rate [default: 1e-4]
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset under <out>/data
    GenData(DataFlags),
    /// Train the shape learner on affine pairs; writes shape.ssck
    TrainShape(ShapeFlags),
    /// Mean shape loss of same- vs different-subject affine pairs
    EvalShape {
        /// Pairs per mean [default: 50]
        #[arg(long)]
        pairs: Option<usize>,
    },
    /// Train the segmenter (Dice phase, then Dice + capped shape loss)
    TrainSeg {
        #[command(flatten)]
        seg: SegFlags,
        /// Checkpoint name under <out>
        #[arg(long, default_value = "seg")]
        name: String,
    },
    /// Dice, Hausdorff distance and shape loss on the test split
    Evaluate {
        /// Segmenter checkpoint name under <out>
        #[arg(long, default_value = "seg")]
        model: String,
        /// Directory of subject_XXX_pred.rvf (or subject_XXX_label.rvf) files to score instead of a model
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Finite-difference check of every op and both loss pipelines
    GradCheck,
    /// Mid-plane PGM slices of label, prediction and overlay
    DumpSlices {
        #[arg(long, default_value = "seg")]
        model: String,
        /// Subject id [default: first test subject]
        #[arg(long)]
        subject: Option<u64>,
    },
    /// Full pipeline: data, shape learner, Dice-only and shape-guided segmenters, comparison table
    Reproduce {
        #[command(flatten)]
        data: DataFlags,
        #[command(flatten)]
        shape: ShapeFlags,
        #[command(flatten)]
        seg: SegFlags,
    },
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

impl DataFlags {
    fn apply(self, cfg: &mut RunConfig) {
        set(&mut cfg.data.subjects, self.subjects);
        set(&mut cfg.data.dims, self.dims);
        set(&mut cfg.data.split, self.split);
        set(&mut cfg.data.family, self.family);
    }
}

impl ShapeFlags {
    fn apply(self, cfg: &mut RunConfig) {
        set(&mut cfg.train_shape.iterations, self.iterations);
        set(&mut cfg.train_shape.lr, self.lr);
    }
}

impl SegFlags {
    fn apply(self, cfg: &mut RunConfig) {
        set(&mut cfg.train_seg.phase1_iters, self.phase1);
        set(&mut cfg.train_seg.phase2_iters, self.phase2);
        set(&mut cfg.train_seg.alpha, self.alpha);
        set(&mut cfg.train_seg.cap, self.cap);
        set(&mut cfg.train_seg.lr, self.lr);
    }
}

fn print_checks(label: &str, rows: &[(&str, GradCheckReport)]) -> bool {
    let mut ok = true;
    for (name, r) in rows {
        ok &= r.passed;
        println!(
            "{label:<6} {name:<32} {:>10.3e} {:>6} {:>6}  {}",
            r.max_rel_error,
            r.checked(),
            r.straddled(),
            if r.passed { "ok" } else { "FAIL" }
        );
    }
    ok
}

fn grad_check(seed: u64) -> shapesig::Result<bool> {
    println!("{:<6} {:<32} {:>10} {:>6} {:>6}", "mode", "check", "max_rel", "probes", "kinks");
    let mut ok = print_checks("f32", &op_suite::<f32>(&GradCheckOptions::f32_default(), seed)?);
    ok &= print_checks("mixed", &op_suite_mixed(&GradCheckOptions::mixed_default(), seed)?);
    ok &= print_checks("f64", &op_suite::<f64>(&GradCheckOptions::f64_default(), seed)?);
    let sampled = |o: GradCheckOptions| o.max_elements(3);
    ok &= print_checks("mixed", &pipeline_suite_mixed(&sampled(GradCheckOptions::mixed_default()), seed)?);
    ok &= print_checks("f64", &pipeline_suite::<f64>(&sampled(GradCheckOptions::f64_default()), seed)?);
    Ok(ok)
}

fn run(cli: Cli, mut cfg: RunConfig) -> shapesig::Result<bool> {
    let layout = |cfg: &RunConfig| Layout::new(cfg, &cli.out);
    match cli.command {
        Command::GenData(flags) => {
            flags.apply(&mut cfg);
            cfg.validate()?;
            let l = layout(&cfg);
            let ds = pipeline::gen_data(&cfg, &l)?;
            println!("{} subjects ({} train, {} test) in {}", ds.cases.len(), ds.train.len(), ds.test.len(), l.data.display());
        }
        Command::TrainShape(flags) => {
            flags.apply(&mut cfg);
            cfg.validate()?;
            let l = layout(&cfg);
            let ds = pipeline::load_data(&l)?;
            let (_, log) = pipeline::train_shape(&cfg, &l, &ds)?;
            let last = log.records.last().map_or(0.0, |r| r.components.total);
            println!("final shape loss {last:.6}; collapse flagged: {}", log.collapsed());
        }
        Command::EvalShape { pairs } => {
            set(&mut cfg.eval.n_pairs, pairs);
            cfg.validate()?;
            let l = layout(&cfg);
            let ds = pipeline::load_data(&l)?;
            let inv = pipeline::eval_shape(&cfg, &l, &ds, &pipeline::load_shape(&l)?)?;
            println!("same subject      {:.6}", inv.same_subject_mean);
            println!("different subject {:.6}", inv.different_subject_mean);
            println!("ratio             {:.3}", inv.ratio());
        }
        Command::TrainSeg { seg, name } => {
            seg.apply(&mut cfg);
            cfg.validate()?;
            let l = layout(&cfg);
            let ds = pipeline::load_data(&l)?;
            let g = pipeline::shape_for_seg(&cfg, &l)?;
            let trainer = pipeline::train_seg(&cfg, &l, &ds, &g, &name)?;
            let last = trainer.log.records.last().map(|r| r.components).unwrap_or_default();
            println!("{} iterations; final dice loss {:.4}, total {:.4}", trainer.iteration, last.dice, last.total);
        }
        Command::Evaluate { model, predictions } => {
            let l = layout(&cfg);
            let ds = pipeline::load_data(&l)?;
            // the shape term is only reported here, so an untrained learner is acceptable
            let g = pipeline::shape_for_seg(&zero_alpha(&cfg), &l)?;
            let records = match predictions.or(cfg.eval.predictions.clone()) {
                Some(dir) => pipeline::evaluate_files(&l, &ds, &g, &dir)?,
                None => pipeline::evaluate_model(&l, &ds, &g, &model)?,
            };
            for r in &records {
                println!("{:<12} dice {:.4}  hd {:.3}  shape {:.4}", r.case_id, r.dice, r.hausdorff, r.shape_loss);
            }
            let s = summarize(&records);
            println!("{:<12} dice {:.4}  hd {:.3}  shape {:.4}", "mean", s.dice, s.hausdorff, s.shape_loss);
        }
        Command::GradCheck => return grad_check(cfg.seed),
        Command::DumpSlices { model, subject } => {
            let l = layout(&cfg);
            let ds = pipeline::load_data(&l)?;
            let files = pipeline::dump_slices(&l, &ds, &model, subject)?;
            println!("{} slices in {}", files.len(), l.file("slices").display());
        }
        Command::Reproduce { data, shape, seg } => {
            data.apply(&mut cfg);
            shape.apply(&mut cfg);
            seg.apply(&mut cfg);
            cfg.validate()?;
            let rep = pipeline::reproduce(&cfg, &layout(&cfg))?;
            println!(
                "shape signature: same {:.6}  different {:.6}  ratio {:.3}",
                rep.invariance.same_subject_mean,
                rep.invariance.different_subject_mean,
                rep.invariance.ratio()
            );
            print!("{}", rep.table());
        }
    }
    Ok(true)
}

fn zero_alpha(cfg: &RunConfig) -> RunConfig {
    let mut c = cfg.clone();
    c.train_seg.alpha = 0.0;
    c
}

fn load_config(cli: &Cli) -> shapesig::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path).map_err(|e| match e {
            Error::Io(io) => Error::Config(format!("{}: {io}", path.display())),
            e => e,
        })?,
        None => RunConfig::default(),
    };
    if let Ok(v) = std::env::var("SHAPESIG_SEED") {
        cfg.seed = v.trim().parse().map_err(|_| Error::Config(format!("SHAPESIG_SEED={v:?} is not an integer")))?;
    }
    set(&mut cfg.seed, cli.seed);
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match load_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match run(cli, cfg) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
