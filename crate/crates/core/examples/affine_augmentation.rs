//! Samples random similarity transforms, resamples a label map and checks
//! that composing with the inverse recovers the original.
//!
//! `cargo run --release --example affine_augmentation`
use shapesig::affine::{apply_affine_labels, make_affine_pair, sample_random_affine, AugmentationSpec};
use shapesig::metrics::dice_coefficient;
use shapesig::synth::generate_dataset;
use shapesig::volume::Grid;

fn main() -> shapesig::Result<()> {
    let ds = generate_dataset(4, [48; 3], 7, 0.5)?;
    let label = &ds.cases[0].label;
    let spec = AugmentationSpec::default().with_seed(1);
    for i in 0..5 {
        let mut rng = spec.rng(i);
        let t = sample_random_affine(&spec, label.dims(), &mut rng);
        let s = t.decompose()?;
        let moved = apply_affine_labels(label, &t)?;
        let back = apply_affine_labels(&moved, &t.inverse()?)?;
        println!(
            "scale {:.3} rot {:6.2} deg shift {:?}  fg {} -> {}  round-trip dice {:.3}",
            s.scale,
            s.rotation_deg,
            s.translation.map(|v| (v * 10.0).round() / 10.0),
            label.foreground_count(),
            moved.foreground_count(),
            dice_coefficient(label, &back)?
        );
    }
    let (a, b) = make_affine_pair(label, &spec, &mut spec.rng(99))?;
    println!("affine pair overlap dice {:.3}", dice_coefficient(&a, &b)?);
    Ok(())
}
