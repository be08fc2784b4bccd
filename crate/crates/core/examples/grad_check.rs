//! Gradient-checks every differentiable op and the full segmentation losses.
//!
//! `cargo run --release --example grad_check -- [seed]`
use shapesig::autodiff::{op_suite, op_suite_mixed, GradCheckOptions, GradCheckReport};
use shapesig::checks::{pipeline_suite, pipeline_suite_mixed};

fn print(label: &str, rows: &[(&str, GradCheckReport)]) {
    for (name, r) in rows {
        println!(
            "{label:<6} {name:<32} max_rel_err={:.3e} checked={} straddled={} {}",
            r.max_rel_error,
            r.checked(),
            r.straddled(),
            if r.passed { "ok" } else { "FAIL" }
        );
    }
}

fn main() -> shapesig::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    print("f32", &op_suite::<f32>(&GradCheckOptions::f32_default(), seed)?);
    print("f64", &op_suite::<f64>(&GradCheckOptions::f64_default(), seed)?);
    print("mixed", &op_suite_mixed(&GradCheckOptions::mixed_default(), seed)?);
    print("f64", &pipeline_suite::<f64>(&GradCheckOptions::f64_default().max_elements(3), seed)?);
    print("mixed", &pipeline_suite_mixed(&GradCheckOptions::mixed_default().max_elements(3), seed)?);
    Ok(())
}
