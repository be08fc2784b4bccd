//! Mid-volume slice export as binary PGM (P5) images.

use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{Grid, LabelMap, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Plane {
    /// Constant z.
    Axial,
    /// Constant y.
    Coronal,
    /// Constant x.
    Sagittal,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::Axial, Plane::Coronal, Plane::Sagittal];

    pub fn name(self) -> &'static str {
        match self {
            Plane::Axial => "axial",
            Plane::Coronal => "coronal",
            Plane::Sagittal => "sagittal",
        }
    }
}

/// Gray image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Slice {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Slice {
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_pgm())?;
        Ok(())
    }
}

/// The middle slice of `dims` in `plane`, sampling `f(z, y, x)`.
fn mid_slice(dims: [usize; 3], plane: Plane, f: impl Fn(usize, usize, usize) -> u8) -> Slice {
    let [d, h, w] = dims;
    let (width, height) = match plane {
        Plane::Axial => (w, h),
        Plane::Coronal => (w, d),
        Plane::Sagittal => (h, d),
    };
    let mut pixels = Vec::with_capacity(width * height);
    for r in 0..height {
        for c in 0..width {
            pixels.push(match plane {
                Plane::Axial => f(d / 2, r, c),
                Plane::Coronal => f(r, h / 2, c),
                Plane::Sagittal => f(r, c, w / 2),
            });
        }
    }
    Slice { width, height, pixels }
}

pub fn label_slice(m: &LabelMap, plane: Plane) -> Slice {
    mid_slice(m.dims(), plane, |z, y, x| if m.get(z, y, x) { 255 } else { 0 })
}

/// Intensities linearly mapped from `[min, max]` of the volume to `[0, 255]`.
pub fn volume_slice(v: &Volume, plane: Plane) -> Slice {
    let (lo, hi) = v.data().iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    mid_slice(v.dims(), plane, |z, y, x| (((v.get(z, y, x) - lo) / span) * 255.0).round() as u8)
}

/// 0 = background, 96 = label only (missed), 160 = prediction only (false
/// positive), 255 = both.
pub fn overlay_slice(label: &LabelMap, pred: &LabelMap, plane: Plane) -> Result<Slice> {
    if label.dims() != pred.dims() {
        return Err(Error::shape("overlay", format!("{:?} vs {:?}", label.dims(), pred.dims())));
    }
    Ok(mid_slice(label.dims(), plane, |z, y, x| match (label.get(z, y, x), pred.get(z, y, x)) {
        (false, false) => 0,
        (true, false) => 96,
        (false, true) => 160,
        (true, true) => 255,
    }))
}
