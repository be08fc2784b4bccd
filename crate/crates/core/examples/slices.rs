//! Exports mid-plane PGM slices of an image, its label and an overlay
//! against a shifted copy of the label.
//!
//! `cargo run --release --example slices -- [dir]`
use shapesig::affine::{apply_affine_labels, AffineTransform};
use shapesig::slices::{label_slice, overlay_slice, volume_slice, Plane};
use shapesig::synth::generate_dataset;

fn main() -> shapesig::Result<()> {
    let dir = std::path::PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "out/example_slices".into()));
    std::fs::create_dir_all(&dir)?;
    let ds = generate_dataset(4, [48; 3], 7, 0.5)?;
    let case = &ds.cases[0];
    let pred = apply_affine_labels(&case.label, &AffineTransform::translation([0.0, 2.0, 3.0]))?;
    for plane in Plane::ALL {
        let p = plane.name();
        volume_slice(&case.image, plane).write_pgm(dir.join(format!("image_{p}.pgm")))?;
        label_slice(&case.label, plane).write_pgm(dir.join(format!("label_{p}.pgm")))?;
        overlay_slice(&case.label, &pred, plane)?.write_pgm(dir.join(format!("overlay_{p}.pgm")))?;
    }
    println!("wrote 9 slices to {}", dir.display());
    Ok(())
}
