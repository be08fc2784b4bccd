use std::path::Path;

use shapesig::affine::AugmentationSpec;
use shapesig::autodiff::Tensor;
use shapesig::config::{derive_seed, Purpose, RunConfig};
use shapesig::metrics::{summarize, volume_diagonal};
use shapesig::nets::{Network, Parameter, SegNet, SegNetConfig, ShapeLearner, ShapeNetConfig};
use shapesig::pipeline::{self, Layout};
use shapesig::slices::{label_slice, overlay_slice, Plane};
use shapesig::synth::{generate_dataset, Dataset};
use shapesig::train::{
    evaluate_affine_invariance, evaluate_prediction, median, train_segmenter, train_shape_learner, AdamConfig,
    AdamState, SegTrainConfig, SegTrainer, ShapeTrainConfig, TRAIN_LOG_HEADER,
};
use shapesig::volume::{LabelMap, Volume};
use shapesig::Error;

const N: usize = 16;

fn dataset() -> Dataset {
    generate_dataset(5, [N; 3], 11, 0.6).unwrap()
}

fn scalar(v: f32) -> Vec<Parameter> {
    vec![Parameter {
        name: "w".into(),
        value: Tensor::from_vec(vec![1], vec![v]).unwrap(),
    }]
}

fn grad(v: f32) -> Vec<Tensor<f32>> {
    vec![Tensor::from_vec(vec![1], vec![v]).unwrap()]
}

#[test]
fn adam_first_step_is_lr() {
    let mut p = scalar(0.0);
    let mut s = AdamState::new(AdamConfig::with_lr(0.1), &p);
    s.step(&mut p, &grad(1.0)).unwrap();
    assert!((p[0].value.data()[0] + 0.1).abs() < 1e-6);
    assert_eq!(s.t(), 1);
}

#[test]
fn adam_zero_gradient_still_counts() {
    let mut p = scalar(0.25);
    let mut s = AdamState::new(AdamConfig::with_lr(0.1), &p);
    s.step(&mut p, &grad(0.0)).unwrap();
    s.step(&mut p, &grad(0.0)).unwrap();
    assert_eq!(p[0].value.data()[0], 0.25);
    assert_eq!(s.t(), 2);
}

#[test]
fn adam_is_deterministic_and_checks_shapes() {
    let run = || {
        let mut p = scalar(1.0);
        let mut s = AdamState::new(AdamConfig::with_lr(0.01), &p);
        let mut traj = Vec::new();
        for i in 0..20 {
            s.step(&mut p, &grad((i as f32 * 0.7).sin())).unwrap();
            traj.push(p[0].value.data()[0]);
        }
        traj
    };
    assert_eq!(run(), run());

    let mut p = scalar(1.0);
    let mut s = AdamState::new(AdamConfig::default(), &p);
    assert!(s.step(&mut p, &[]).is_err());
    assert!(s.step(&mut p, &[Tensor::zeros(vec![2])]).is_err());
    assert_eq!(s.t(), 0);
}

fn shape_cfg(iterations: usize) -> ShapeTrainConfig {
    ShapeTrainConfig {
        iterations,
        seed: 3,
        ..Default::default()
    }
}

#[test]
fn zero_iterations_return_the_initial_learner() {
    let ds = dataset();
    let g = ShapeLearner::new(ShapeNetConfig::default(), 1).unwrap();
    let (trained, log) = train_shape_learner(&ds, g.clone(), &shape_cfg(0)).unwrap();
    assert_eq!(trained, g);
    assert!(log.records.is_empty());
}

#[test]
fn shape_training_is_reproducible() {
    let ds = dataset();
    let g = ShapeLearner::new(ShapeNetConfig::default(), 1).unwrap();
    let (a, la) = train_shape_learner(&ds, g.clone(), &shape_cfg(12)).unwrap();
    let (b, lb) = train_shape_learner(&ds, g.clone(), &shape_cfg(12)).unwrap();
    assert_eq!(a, b);
    assert_eq!(la.losses(), lb.losses());
    assert_eq!(la.records.len(), 12);
    assert_eq!(la.collapse.len(), 1);
    assert_ne!(a, g);
    let csv = la.to_csv();
    assert_eq!(csv.lines().next(), Some(TRAIN_LOG_HEADER));
    assert_eq!(csv.lines().count(), 13);
}

#[test]
fn identity_pairs_have_zero_same_subject_loss() {
    let ds = dataset();
    let g = ShapeLearner::new(ShapeNetConfig::default(), 1).unwrap();
    let (same, different) = evaluate_affine_invariance(&g, &ds, 6, &AugmentationSpec::identity()).unwrap();
    assert_eq!(same, 0.0);
    assert!(different > 0.0);

    let one_test = generate_dataset(5, [N; 3], 11, 0.8).unwrap();
    assert!(evaluate_affine_invariance(&g, &one_test, 6, &AugmentationSpec::identity()).is_err());
}

fn seg_cfg(alpha: f64) -> SegTrainConfig {
    SegTrainConfig {
        phase1_iters: 3,
        phase2_iters: 3,
        alpha,
        adam: AdamConfig::with_lr(1e-3),
        seed: 5,
        ..Default::default()
    }
}

fn segnet() -> SegNet {
    SegNet::new(SegNetConfig::default(), 2).unwrap()
}

#[test]
fn alpha_zero_matches_continued_phase_one() {
    let ds = dataset();
    let g = ShapeLearner::new(ShapeNetConfig::default(), 1).unwrap();
    let (split, split_log) = train_segmenter(&ds, &g, segnet(), &seg_cfg(0.0)).unwrap();

    let mut one = SegTrainer::new(segnet(), &seg_cfg(0.0)).unwrap();
    one.run(&ds, &g, 6, 0.0, 1.0).unwrap();
    assert_eq!(split, one.net);
    assert_eq!(split_log.losses(), one.log.losses());
    assert_eq!(one.adam.t(), 6);
}

#[test]
fn shape_term_changes_phase_two_only() {
    let ds = dataset();
    let g = ShapeLearner::new(ShapeNetConfig::default(), 1).unwrap();
    let (_, base) = train_segmenter(&ds, &g, segnet(), &seg_cfg(0.0)).unwrap();
    let (_, guided) = train_segmenter(&ds, &g, segnet(), &seg_cfg(0.5)).unwrap();
    let (b, s) = (base.losses(), guided.losses());
    assert_eq!(b[..3], s[..3]);
    assert!(s[3..].iter().all(|(_, c)| c.total > c.dice));
    assert!(b[3..].iter().all(|(_, c)| c.total == c.dice && c.shape_raw > 0.0));
}

#[test]
fn shape_learner_is_frozen() {
    let ds = dataset();
    let g = ShapeLearner::new(ShapeNetConfig::default(), 1).unwrap();
    let before: Vec<Vec<u32>> = g.params().iter().map(|p| p.value.data().iter().map(|v| v.to_bits()).collect()).collect();
    train_segmenter(&ds, &g, segnet(), &seg_cfg(1.0)).unwrap();
    let after: Vec<Vec<u32>> = g.params().iter().map(|p| p.value.data().iter().map(|v| v.to_bits()).collect()).collect();
    assert_eq!(before, after);
}

#[test]
fn invalid_alpha_or_cap_rejected() {
    assert!(SegTrainer::new(segnet(), &seg_cfg(-1.0)).is_err());
    let cfg = SegTrainConfig { cap: 0.0, ..seg_cfg(0.1) };
    assert!(SegTrainer::new(segnet(), &cfg).is_err());
}

#[test]
fn ground_truth_predictions_score_perfectly() {
    let ds = dataset();
    let g = ShapeLearner::new(ShapeNetConfig::default(), 1).unwrap();
    let records: Vec<_> = ds
        .test_cases()
        .map(|c| evaluate_prediction(c, &c.label.to_volume(), &g).unwrap())
        .collect();
    let s = summarize(&records);
    assert_eq!((s.dice, s.hausdorff, s.shape_loss), (1.0, 0.0, 0.0));

    let c = ds.test_cases().next().unwrap();
    let r = evaluate_prediction(c, &Volume::zeros([N; 3]), &g).unwrap();
    assert!(r.dice < 1e-6);
    assert_eq!(r.hausdorff, volume_diagonal(&c.label));
    assert!(evaluate_prediction(c, &Volume::zeros([N, N, 8]), &g).is_err());
}

#[test]
fn median_of_odd_and_even() {
    assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
    assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
}

#[test]
fn dice_loss_falls_during_phase_one() {
    let ds = generate_dataset(6, [N; 3], 4, 0.67).unwrap();
    let g = ShapeLearner::new(ShapeNetConfig::default(), 1).unwrap();
    let cfg = SegTrainConfig {
        seed: 9,
        adam: AdamConfig::with_lr(1e-3),
        ..Default::default()
    };
    let mut t = SegTrainer::new(segnet(), &cfg).unwrap();
    t.run(&ds, &g, 300, 0.0, 1.0).unwrap();
    let dice: Vec<f64> = t.log.records.iter().map(|r| r.components.dice).collect();
    assert!(median(&dice[200..]) < median(&dice[..100]), "{} vs {}", median(&dice[200..]), median(&dice[..100]));
}

#[test]
fn config_parsing() {
    let mut cfg = RunConfig::default();
    cfg.apply(
        "# comment\n[data]\nseed = 3\ndims = 32  # trailing\ndir = d\n[train_seg]\nalpha = 0.2\n[augment]\nscale_hi = 1.2\n[eval]\npredictions = p\n",
        Path::new("/base"),
    )
    .unwrap();
    assert_eq!(cfg.seed, 3);
    assert_eq!(cfg.data.dims, 32);
    assert_eq!(cfg.train_seg.alpha, 0.2);
    assert_eq!(cfg.augment.scale_range().1, 1.2);
    assert_eq!(cfg.data.dir.as_deref(), Some(Path::new("/base/d")));
    assert_eq!(cfg.eval.predictions.as_deref(), Some(Path::new("/base/p")));
    assert_eq!(cfg.train_seg.phase1_iters, 800);

    for bad in [
        "[data]\nsubjects = many\n",
        "[data]\ncolour = red\n",
        "[nope]\n",
        "seed = 1\n",
        "[data]\njust a line\n",
        "[data]\ndims = 20\n",
        "[augment]\nscale_lo = 2\n",
    ] {
        let err = RunConfig::default().apply(bad, Path::new(".")).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{bad:?}: {err}");
    }
}

#[test]
fn derived_seeds_are_distinct() {
    let all = [Purpose::ShapeInit, Purpose::SegInit, Purpose::TrainShape, Purpose::TrainSeg, Purpose::EvalShape];
    let seeds: std::collections::HashSet<u64> = all.iter().map(|&p| derive_seed(7, p)).collect();
    assert_eq!(seeds.len(), all.len());
    assert_ne!(derive_seed(7, Purpose::SegInit), derive_seed(8, Purpose::SegInit));
}

#[test]
fn pgm_and_overlay_levels() {
    let label = LabelMap::from_fn([4, 3, 2], |z, y, _| z == 2 && y < 2);
    let pred = LabelMap::from_fn([4, 3, 2], |z, y, x| z == 2 && (y == 1 || x == 1));
    let s = label_slice(&label, Plane::Axial);
    assert_eq!((s.width, s.height), (2, 3));
    let pgm = s.to_pgm();
    assert!(pgm.starts_with(b"P5\n2 3\n255\n"));
    assert_eq!(&pgm[pgm.len() - 6..], &[255, 255, 255, 255, 0, 0]);
    let o = overlay_slice(&label, &pred, Plane::Axial).unwrap();
    assert_eq!(o.pixels, vec![96, 255, 255, 255, 0, 160]);
    assert_eq!(label_slice(&label, Plane::Sagittal).pixels.len(), 3 * 4);
    assert!(overlay_slice(&label, &LabelMap::empty([4, 3, 3]), Plane::Axial).is_err());
}

fn small_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    cfg.data.subjects = 5;
    cfg.data.dims = N;
    cfg.data.split = 0.6;
    cfg.train_shape.iterations = 4;
    cfg.train_seg.phase1_iters = 3;
    cfg.train_seg.phase2_iters = 2;
    cfg.eval.n_pairs = 4;
    cfg
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file() && !p.to_string_lossy().ends_with("_log.csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn small_reproduce_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(7);
    let a = Layout::new(&cfg, tmp.path().join("a"));
    let b = Layout::new(&cfg, tmp.path().join("b"));
    let ra = pipeline::reproduce(&cfg, &a).unwrap();
    let rb = pipeline::reproduce(&cfg, &b).unwrap();
    assert_eq!(ra.baseline, rb.baseline);
    assert_eq!(ra.shape_log.losses(), rb.shape_log.losses());
    let fa = files(&a.out);
    assert_eq!(fa, files(&b.out));
    for name in ["comparison.csv", "shape.ssck", "seg_baseline.ssck", "seg_shape.ssck", "metrics_seg_baseline.csv"] {
        assert!(fa.iter().any(|(n, _)| n == name), "{name}");
    }
    assert_eq!(files(&a.data), files(&b.data));
    assert!(ra.table().starts_with("method,dice,hausdorff\ndice_only,"));

    let c = Layout::new(&small_config(8), tmp.path().join("c"));
    pipeline::gen_data(&small_config(8), &c).unwrap();
    assert_ne!(files(&c.data), files(&a.data));
}

#[test]
fn label_files_as_predictions_score_perfectly() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(1);
    let l = Layout::new(&cfg, tmp.path());
    let ds = pipeline::gen_data(&cfg, &l).unwrap();
    assert!(pipeline::shape_for_seg(&cfg, &l).is_err());
    let mut zero = cfg.clone();
    zero.train_seg.alpha = 0.0;
    let g = pipeline::shape_for_seg(&zero, &l).unwrap();
    let s = summarize(&pipeline::evaluate_files(&l, &ds, &g, &l.data).unwrap());
    assert_eq!((s.dice, s.hausdorff), (1.0, 0.0));
    assert!(tmp.path().join("metrics_predictions.csv").exists());
}
