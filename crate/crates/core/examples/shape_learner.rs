//! Trains the shape learner on affine pairs and reports same- vs
//! different-subject shape loss before and after.
//!
//! `cargo run --release --example shape_learner -- [iterations]`
use shapesig::affine::AugmentationSpec;
use shapesig::nets::{ShapeLearner, ShapeNetConfig};
use shapesig::synth::generate_dataset;
use shapesig::train::{evaluate_affine_invariance, train_shape_learner, ShapeTrainConfig};

fn main() -> shapesig::Result<()> {
    let iterations = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let ds = generate_dataset(10, [48; 3], 7, 0.8)?;
    let g = ShapeLearner::new(ShapeNetConfig::default(), 1)?;
    let eval = AugmentationSpec::default().with_seed(2);

    let (same, diff) = evaluate_affine_invariance(&g, &ds, 50, &eval)?;
    println!("untrained: same {same:.5} different {diff:.5} ratio {:.3}", diff / same);

    let cfg = ShapeTrainConfig {
        iterations,
        seed: 3,
        ..Default::default()
    };
    let (g, log) = train_shape_learner(&ds, g, &cfg)?;
    for c in &log.collapse {
        println!("iter {:4} different-subject mean {:.6}{}", c.iteration, c.different_subject_mean, if c.collapsed { " COLLAPSED" } else { "" });
    }
    let (same, diff) = evaluate_affine_invariance(&g, &ds, 50, &eval)?;
    println!("trained:   same {same:.5} different {diff:.5} ratio {:.3}", diff / same);
    Ok(())
}
