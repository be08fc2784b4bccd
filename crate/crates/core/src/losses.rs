//! Dice loss, shape loss and their capped combination.

use crate::autodiff::{Element, Tape, Var};
use crate::error::{Error, Result};
use crate::nets::{Network, ShapeLearner};

/// Smoothing added to numerator and denominator of the Dice ratio.
pub const DICE_EPS: f64 = 1e-6;

/// `1 - (2 Σ m p + ε) / (Σ m + Σ p + ε)`.
pub fn dice_loss<'t, T: Element>(m: Var<'t, T>, pred: Var<'t, T>) -> Result<Var<'t, T>> {
    if m.shape() != pred.shape() {
        return Err(Error::shape("dice_loss", format!("{:?} vs {:?}", m.shape(), pred.shape())));
    }
    let tape = m.tape();
    let eps = tape.scalar(DICE_EPS);
    let num = m.mul(pred)?.sum_all()?.scale(2.0)?.add(eps)?;
    let den = m.sum_all()?.add(pred.sum_all()?)?.add(eps)?;
    tape.scalar(1.0).sub(num.div(den)?)
}

/// Euclidean distance between two signatures. The gradient at zero distance is zero.
pub fn signature_distance<'t, T: Element>(a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape("shape_loss", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    a.sub(b)?.square()?.sum_all()?.sqrt()
}

/// `‖g(m1) − g(m2)‖₂` with the learner's parameters already bound to the tape.
pub fn shape_loss<'t, T: Element>(
    g: &ShapeLearner,
    theta: &[Var<'t, T>],
    m1: Var<'t, T>,
    m2: Var<'t, T>,
) -> Result<Var<'t, T>> {
    if m1.shape() != m2.shape() {
        return Err(Error::shape("shape_loss", format!("{:?} vs {:?}", m1.shape(), m2.shape())));
    }
    signature_distance(g.forward(m1, theta)?, g.forward(m2, theta)?)
}

/// Scalar loss terms, for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub dice: f64,
    pub shape_raw: f64,
    pub shape_capped: f64,
    pub total: f64,
}

pub struct LossValue<'t, T: Element> {
    pub value: Var<'t, T>,
    pub components: LossComponents,
}

/// Frozen shape learner together with its parameters on the current tape.
#[derive(Clone, Copy)]
pub struct ShapeTerm<'a, 't, T: Element> {
    pub learner: &'a ShapeLearner,
    pub theta: &'a [Var<'t, T>],
}

impl<'a, 't, T: Element> ShapeTerm<'a, 't, T> {
    pub fn new(learner: &'a ShapeLearner, theta: &'a [Var<'t, T>]) -> Self {
        ShapeTerm { learner, theta }
    }
}

/// `L_dice + α · min(L_shape, cap)`.
///
/// With `alpha == 0` the shape term is evaluated on a side tape for logging
/// only, so the returned value and its gradient are exactly the Dice loss.
pub fn total_loss<'t, T: Element>(
    m: Var<'t, T>,
    pred: Var<'t, T>,
    shape: Option<ShapeTerm<'_, 't, T>>,
    alpha: f64,
    cap: f64,
) -> Result<LossValue<'t, T>> {
    if !(alpha >= 0.0) || !(cap > 0.0) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} / cap {cap} out of range")));
    }
    let dice = dice_loss(m, pred)?;
    let mut components = LossComponents {
        dice: dice.item(),
        ..Default::default()
    };
    let value = match shape {
        Some(term) if alpha > 0.0 => {
            let raw = shape_loss(term.learner, term.theta, m, pred)?;
            let capped = raw.clamp_max(cap)?;
            components.shape_raw = raw.item();
            components.shape_capped = capped.item();
            dice.add(capped.scale(alpha)?)?
        }
        Some(term) => {
            let side = Tape::<T>::new();
            let theta = term.learner.bind(&side, false);
            let raw = shape_loss(term.learner, &theta, side.constant(m.value()), side.constant(pred.value()))?;
            components.shape_raw = raw.item();
            components.shape_capped = raw.item().min(cap);
            dice
        }
        None => dice,
    };
    components.total = value.item();
    Ok(LossValue { value, components })
}
