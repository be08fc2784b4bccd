//! Finite-difference checks of the full segmentation losses on a small subject.

use crate::autodiff::{
    finite_difference_check, mixed_precision_check, Element, GradCheckOptions, GradCheckReport, Tape, Tensor, Var,
};
use crate::error::Result;
use crate::losses::{dice_loss, shape_loss, total_loss, ShapeTerm};
use crate::nets::{Network, SegNet, SegNetConfig, ShapeLearner, ShapeNetConfig};
use crate::synth::{generate_subject, Appearance, ShapeFamily, SubjectSpec};
use crate::volume::normalize_intensity;

pub const PIPELINE_DIMS: [usize; 3] = [16, 16, 16];
const ALPHA: f64 = 0.1;

/// Fixture shared by the pipeline checks: one subject, a fresh segmenter and a
/// fresh shape learner.
pub struct PipelineFixture {
    pub image: Tensor<f32>,
    pub label: Tensor<f32>,
    pub seg: SegNet,
    pub shape: ShapeLearner,
}

impl PipelineFixture {
    pub fn new(seed: u64) -> Result<Self> {
        let spec = SubjectSpec::sample(ShapeFamily::EllipsoidWithTail, 0, seed, PIPELINE_DIMS, Appearance::default());
        let (image, label) = generate_subject(&spec, PIPELINE_DIMS)?;
        Ok(PipelineFixture {
            image: normalize_intensity(&image)?.to_tensor(),
            label: label.to_tensor(),
            seg: SegNet::new(SegNetConfig::default(), seed)?,
            shape: ShapeLearner::new(ShapeNetConfig::default(), seed.wrapping_add(1))?,
        })
    }

    /// Segmenter output for the fixture image.
    pub fn prediction(&self) -> Result<Tensor<f32>> {
        self.seg.predict(&self.image)
    }

    /// Shape loss between the label and the current prediction.
    pub fn shape_loss_at_init(&self) -> Result<f64> {
        let tape = Tape::<f64>::new();
        let w = self.seg.bind(&tape, false);
        let theta = self.shape.bind(&tape, false);
        let pred = self.seg.forward(tape.constant(self.image.cast()), &w)?;
        Ok(shape_loss(&self.shape, &theta, tape.constant(self.label.cast()), pred)?.item())
    }
}

#[derive(Clone, Copy, Debug)]
enum Pipeline {
    /// `L_dice(m, f_W(i))` over W.
    Dice,
    /// `L_total(m, f_W(i))` over W.
    Total { cap: f64 },
    /// `L_total(m, p)` over a soft prediction p.
    TotalOfPrediction { cap: f64 },
}

fn eval<'t, T: Element>(fx: &PipelineFixture, which: Pipeline, tape: &'t Tape<T>, p: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    let m = tape.constant(fx.label.cast());
    let predict = |p: &[Var<'t, T>]| fx.seg.forward(tape.constant(fx.image.cast()), p);
    let theta = fx.shape.bind(tape, false);
    let term = ShapeTerm::new(&fx.shape, &theta);
    match which {
        Pipeline::Dice => dice_loss(m, predict(p)?),
        Pipeline::Total { cap } => Ok(total_loss(m, predict(p)?, Some(term), ALPHA, cap)?.value),
        Pipeline::TotalOfPrediction { cap } => Ok(total_loss(m, p[0], Some(term), ALPHA, cap)?.value),
    }
}

fn pipelines(fx: &PipelineFixture) -> Result<Vec<(&'static str, Pipeline, Vec<Tensor<f32>>)>> {
    let raw = fx.shape_loss_at_init()?;
    let (slack, binding) = (2.0 * raw + 1.0, 0.5 * raw);
    let w: Vec<Tensor<f32>> = fx.seg.params().iter().map(|p| p.value.clone()).collect();
    let pred = vec![fx.prediction()?];
    Ok(vec![
        ("dice_pipeline", Pipeline::Dice, w.clone()),
        ("total_pipeline_cap_slack", Pipeline::Total { cap: slack }, w.clone()),
        ("total_pipeline_cap_binding", Pipeline::Total { cap: binding }, w),
        ("total_of_prediction_cap_slack", Pipeline::TotalOfPrediction { cap: slack }, pred.clone()),
        ("total_of_prediction_cap_binding", Pipeline::TotalOfPrediction { cap: binding }, pred),
    ])
}

/// `L_dice` and `L_total` (cap slack and cap binding) with respect to the
/// segmenter weights, and `L_total` with respect to a soft prediction, all in `T`.
pub fn pipeline_suite<T: Element>(opts: &GradCheckOptions, seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let fx = PipelineFixture::new(seed)?;
    pipelines(&fx)?
        .into_iter()
        .map(|(name, which, params)| {
            let params: Vec<Tensor<T>> = params.iter().map(|p| p.cast()).collect();
            Ok((name, finite_difference_check(|t: &Tape<T>, p| eval(&fx, which, t, p), &params, opts)?))
        })
        .collect()
}

/// As [`pipeline_suite`], with f32 gradients judged against f64 central differences.
pub fn pipeline_suite_mixed(opts: &GradCheckOptions, seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let fx = PipelineFixture::new(seed)?;
    pipelines(&fx)?
        .into_iter()
        .map(|(name, which, params)| {
            let report = mixed_precision_check(
                |t: &Tape<f32>, p| eval(&fx, which, t, p),
                |t: &Tape<f64>, p| eval(&fx, which, t, p),
                &params,
                opts,
            )?;
            Ok((name, report))
        })
        .collect()
}
