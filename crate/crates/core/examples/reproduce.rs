//! The whole pipeline at reduced scale: data, shape learner, both segmenters
//! and the comparison table. Pass `full` for the default budgets.
//!
//! `cargo run --release --example reproduce -- [full] [seed]`
use shapesig::config::RunConfig;
use shapesig::pipeline::{reproduce, Layout};

fn main() -> shapesig::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut cfg = RunConfig::default();
    if !args.iter().any(|a| a == "full") {
        cfg.data.dims = 32;
        cfg.train_seg.phase1_iters = 150;
        cfg.train_seg.phase2_iters = 75;
    }
    if let Some(seed) = args.iter().find_map(|a| a.parse().ok()) {
        cfg.seed = seed;
    }
    let rep = reproduce(&cfg, &Layout::new(&cfg, format!("out/example_reproduce_{}", cfg.seed)))?;
    println!("shape loss same {:.5} different {:.5} ratio {:.3}", rep.invariance.same_subject_mean, rep.invariance.different_subject_mean, rep.invariance.ratio());
    print!("{}", rep.table());
    Ok(())
}
