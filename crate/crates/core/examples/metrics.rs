//! Dice and Hausdorff distance on hand-built label maps, including the
//! empty-prediction convention.
//!
//! `cargo run --release --example metrics`
use shapesig::metrics::{dice_coefficient, hausdorff, hausdorff_or_diagonal};
use shapesig::volume::LabelMap;

fn cube(lo: usize, hi: usize) -> LabelMap {
    LabelMap::from_fn([24; 3], |z, y, x| [z, y, x].iter().all(|&v| (lo..hi).contains(&v)))
}

fn main() -> shapesig::Result<()> {
    let a = cube(6, 14);
    let shifted = cube(8, 16);
    let mut spur = a.clone();
    spur.set(20, 10, 10, true);
    for (name, b) in [("identical", &a), ("shifted by 2", &shifted), ("one far voxel", &spur)] {
        println!("{name:<14} dice {:.4} hd {:.3}", dice_coefficient(&a, b)?, hausdorff(&a, b)?);
    }
    let mut coarse = a.clone();
    coarse.set_spacing([2.0, 1.0, 1.0])?;
    let mut coarse_spur = spur.clone();
    coarse_spur.set_spacing([2.0, 1.0, 1.0])?;
    println!("2 mm z spacing  hd {:.3}", hausdorff(&coarse, &coarse_spur)?);
    println!("empty prediction hd {:.3} (volume diagonal)", hausdorff_or_diagonal(&a, &LabelMap::empty([24; 3]))?);
    Ok(())
}
