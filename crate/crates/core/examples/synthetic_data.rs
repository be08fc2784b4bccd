//! Generates a small synthetic benchmark for each shape family and writes one to disk.
//!
//! `cargo run --release --example synthetic_data -- [out_dir]`
use shapesig::synth::{DatasetSpec, ShapeFamily};

fn main() -> shapesig::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "out/example_data".into());
    for family in [ShapeFamily::EllipsoidWithTail, ShapeFamily::Crescent, ShapeFamily::LobedBlob] {
        let ds = DatasetSpec {
            family,
            ..DatasetSpec::new(10, [48; 3], 7, 0.8)
        }
        .generate()?;
        let counts: Vec<usize> = ds.cases.iter().map(|c| c.label.foreground_count()).collect();
        println!("{:<20} train {:?} test {:?} foreground {counts:?}", family.to_string(), ds.train, ds.test);
        if family == ShapeFamily::EllipsoidWithTail {
            ds.save(&out)?;
            println!("saved to {out}");
        }
    }
    Ok(())
}
