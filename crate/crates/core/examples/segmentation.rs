//! Trains a Dice-only and a shape-guided segmenter from the same phase-1
//! weights and evaluates both on the test split.
//!
//! `cargo run --release --example segmentation -- [phase1] [phase2] [dims]`
use shapesig::metrics::summarize;
use shapesig::nets::{SegNet, SegNetConfig, ShapeLearner, ShapeNetConfig};
use shapesig::synth::generate_dataset;
use shapesig::train::{evaluate_segmenter, train_shape_learner, SegTrainConfig, SegTrainer, ShapeTrainConfig};

fn arg(i: usize, default: usize) -> usize {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> shapesig::Result<()> {
    let (p1, p2, n) = (arg(1, 200), arg(2, 100), arg(3, 32));
    let ds = generate_dataset(10, [n; 3], 7, 0.8)?;
    let (g, _) = train_shape_learner(&ds, ShapeLearner::new(ShapeNetConfig::default(), 1)?, &ShapeTrainConfig::default())?;

    let cfg = SegTrainConfig { seed: 4, ..Default::default() };
    let mut phase1 = SegTrainer::new(SegNet::new(SegNetConfig::default(), 2)?, &cfg)?;
    phase1.run(&ds, &g, p1, 0.0, cfg.cap)?;
    for (name, alpha) in [("dice_only", 0.0), ("shape_guided", cfg.alpha)] {
        let mut t = phase1.clone();
        t.run(&ds, &g, p2, alpha, cfg.cap)?;
        let last = t.log.records.last().unwrap().components;
        let s = summarize(&evaluate_segmenter(&t.net, &ds, &g)?);
        println!(
            "{name:<13} train dice loss {:.4} shape {:.4} | test dice {:.4} hd {:.3} shape {:.4}",
            last.dice, last.shape_raw, s.dice, s.hausdorff, s.shape_loss
        );
    }
    Ok(())
}
