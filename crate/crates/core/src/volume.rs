//! Scalar volumes, binary label maps and intensity preprocessing.
//!
//! Voxels are stored row-major in `(depth, height, width)` order with width
//! fastest, the same order as the spatial axes of network tensors.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub type Dims = [usize; 3];

/// Shared geometry of [`Volume`] and [`LabelMap`].
pub trait Grid {
    fn dims(&self) -> Dims;
    fn spacing(&self) -> [f32; 3];

    fn voxel_count(&self) -> usize {
        self.dims().iter().product()
    }

    fn index(&self, z: usize, y: usize, x: usize) -> usize {
        let [_, h, w] = self.dims();
        (z * h + y) * w + x
    }
}

fn check_geometry(dims: Dims, spacing: [f32; 3], len: usize) -> Result<()> {
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::InvalidArgument(format!("zero extent in {dims:?}")));
    }
    if dims.iter().product::<usize>() != len {
        return Err(Error::shape(
            "volume",
            format!("dims {dims:?} need {} voxels, got {len}", dims.iter().product::<usize>()),
        ));
    }
    if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::InvalidArgument(format!("spacing must be positive, got {spacing:?}")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: Dims,
    spacing: [f32; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: Dims, data: Vec<f32>) -> Result<Self> {
        Self::with_spacing(dims, [1.0; 3], data)
    }

    pub fn with_spacing(dims: Dims, spacing: [f32; 3], data: Vec<f32>) -> Result<Self> {
        check_geometry(dims, spacing, data.len())?;
        Ok(Volume { dims, spacing, data })
    }

    pub fn zeros(dims: Dims) -> Self {
        Volume {
            dims,
            spacing: [1.0; 3],
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(z, y, x)]
    }

    /// `(1, 1, D, H, W)` network input.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let [d, h, w] = self.dims;
        Tensor::from_vec(vec![1, 1, d, h, w], self.data.clone()).expect("volume geometry")
    }

    /// Reads a `(1, 1, D, H, W)` tensor back into a volume.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        match t.shape() {
            &[1, 1, d, h, w] => Volume::new([d, h, w], t.data().to_vec()),
            s => Err(Error::shape("from_tensor", format!("expected (1,1,D,H,W), got {s:?}"))),
        }
    }

    /// Voxels `>= threshold` become foreground.
    pub fn threshold(&self, threshold: f32) -> LabelMap {
        LabelMap {
            dims: self.dims,
            spacing: self.spacing,
            data: self.data.iter().map(|&v| (v >= threshold) as u8).collect(),
        }
    }
}

impl Grid for Volume {
    fn dims(&self) -> Dims {
        self.dims
    }

    fn spacing(&self) -> [f32; 3] {
        self.spacing
    }
}

/// Binary 3D mask; every voxel is 0 or 1.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    dims: Dims,
    spacing: [f32; 3],
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(dims: Dims, data: Vec<u8>) -> Result<Self> {
        Self::with_spacing(dims, [1.0; 3], data)
    }

    pub fn with_spacing(dims: Dims, spacing: [f32; 3], data: Vec<u8>) -> Result<Self> {
        check_geometry(dims, spacing, data.len())?;
        if let Some(bad) = data.iter().find(|&&v| v > 1) {
            return Err(Error::Domain(format!("label value {bad} outside {{0, 1}}")));
        }
        Ok(LabelMap { dims, spacing, data })
    }

    pub fn empty(dims: Dims) -> Self {
        LabelMap {
            dims,
            spacing: [1.0; 3],
            data: vec![0; dims.iter().product()],
        }
    }

    /// Rasterizes `inside(z, y, x)` at voxel centers.
    pub fn from_fn(dims: Dims, mut inside: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let [d, h, w] = dims;
        let mut data = Vec::with_capacity(d * h * w);
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    data.push(inside(z, y, x) as u8);
                }
            }
        }
        LabelMap {
            dims,
            spacing: [1.0; 3],
            data,
        }
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> bool {
        self.data[self.index(z, y, x)] != 0
    }

    pub fn set(&mut self, z: usize, y: usize, x: usize, on: bool) {
        let i = self.index(z, y, x);
        self.data[i] = on as u8;
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    /// Foreground voxel coordinates `(z, y, x)` in scan order.
    pub fn foreground(&self) -> Vec<[usize; 3]> {
        let [_, h, w] = self.dims;
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0)
            .map(|(i, _)| [i / (h * w), (i / w) % h, i % w])
            .collect()
    }

    pub fn set_spacing(&mut self, spacing: [f32; 3]) -> Result<()> {
        check_geometry(self.dims, spacing, self.data.len())?;
        self.spacing = spacing;
        Ok(())
    }

    pub fn to_volume(&self) -> Volume {
        Volume {
            dims: self.dims,
            spacing: self.spacing,
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        self.to_volume().to_tensor()
    }
}

impl Grid for LabelMap {
    fn dims(&self) -> Dims {
        self.dims
    }

    fn spacing(&self) -> [f32; 3] {
        self.spacing
    }
}

/// Axis-aligned crop box in voxels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Region {
    pub origin: [usize; 3],
    pub size: Dims,
}

impl Region {
    pub fn full(dims: Dims) -> Self {
        Region {
            origin: [0; 3],
            size: dims,
        }
    }

    /// Box of `size` centered in `dims` (rounded toward the origin).
    pub fn centered(dims: Dims, size: Dims) -> Result<Self> {
        if size.iter().zip(&dims).any(|(s, d)| s > d) {
            return Err(Error::InvalidArgument(format!("crop {size:?} larger than {dims:?}")));
        }
        Ok(Region {
            origin: [0, 1, 2].map(|a| (dims[a] - size[a]) / 2),
            size,
        })
    }

    fn check_inside(&self, dims: Dims) -> Result<()> {
        let fits = (0..3).all(|a| self.size[a] > 0 && self.origin[a] + self.size[a] <= dims[a]);
        if fits {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "region {self:?} does not fit inside {dims:?}"
            )))
        }
    }
}

/// Standardizes intensities to zero mean and unit population standard deviation.
pub fn normalize_intensity(v: &Volume) -> Result<Volume> {
    let n = v.data.len() as f64;
    let mean = v.data.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = v.data.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std <= 1e-8 {
        return Err(Error::Domain(format!("constant volume (std {std:e})")));
    }
    Ok(Volume {
        dims: v.dims,
        spacing: v.spacing,
        data: v.data.iter().map(|&x| ((x as f64 - mean) / std) as f32).collect(),
    })
}

/// Selects one integer label as foreground and crops to `region`.
///
/// A missing label is not an error: the result is simply empty and the caller
/// decides whether that is acceptable.
pub fn binarize_and_crop(labels: &Volume, target_label: i32, region: Region) -> Result<LabelMap> {
    region.check_inside(labels.dims)?;
    let target = target_label as f32;
    let [od, oh, ow] = region.origin;
    let [sd, sh, sw] = region.size;
    let mut data = Vec::with_capacity(sd * sh * sw);
    for z in od..od + sd {
        for y in oh..oh + sh {
            let row = labels.index(z, y, ow);
            data.extend(labels.data[row..row + sw].iter().map(|&v| (v == target) as u8));
        }
    }
    Ok(LabelMap {
        dims: region.size,
        spacing: labels.spacing,
        data,
    })
}

/// Crops an intensity volume to `region`.
pub fn crop(v: &Volume, region: Region) -> Result<Volume> {
    region.check_inside(v.dims)?;
    let [od, oh, ow] = region.origin;
    let [sd, sh, sw] = region.size;
    let mut data = Vec::with_capacity(sd * sh * sw);
    for z in od..od + sd {
        for y in oh..oh + sh {
            let row = v.index(z, y, ow);
            data.extend_from_slice(&v.data[row..row + sw]);
        }
    }
    Ok(Volume {
        dims: region.size,
        spacing: v.spacing,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_point_normalization() {
        let v = Volume::new([1, 1, 2], vec![0.0, 2.0]).unwrap();
        assert_eq!(normalize_intensity(&v).unwrap().data(), &[-1.0, 1.0]);
    }

    #[test]
    fn constant_volume_is_rejected() {
        let v = Volume::new([2, 2, 2], vec![3.0; 8]).unwrap();
        assert!(matches!(normalize_intensity(&v), Err(Error::Domain(_))));
    }

    #[test]
    fn normalized_statistics() {
        let data: Vec<f32> = (0..1000).map(|i| ((i * 37) % 101) as f32 * 4.1 + 900.0).collect();
        let v = normalize_intensity(&Volume::new([10, 10, 10], data).unwrap()).unwrap();
        let n = v.data().len() as f64;
        let mean = v.data().iter().map(|&x| x as f64).sum::<f64>() / n;
        let std = (v.data().iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() <= 1e-5, "{mean}");
        assert!((std - 1.0).abs() <= 1e-4, "{std}");
    }

    #[test]
    fn binarize_selects_target_only() {
        let v = Volume::new([1, 2, 3], vec![0.0, 5.0, 7.0, 5.0, 0.0, 7.0]).unwrap();
        let m = binarize_and_crop(&v, 5, Region::full([1, 2, 3])).unwrap();
        assert_eq!(m.data(), &[0, 1, 0, 1, 0, 0]);
        assert_eq!(m.dims(), [1, 2, 3]);
        assert!(binarize_and_crop(&v, 9, Region::full([1, 2, 3])).unwrap().is_empty());
    }

    #[test]
    fn crop_out_of_bounds_is_rejected() {
        let v = Volume::zeros([4, 4, 4]);
        let r = Region {
            origin: [1, 0, 0],
            size: [4, 4, 4],
        };
        assert!(binarize_and_crop(&v, 1, r).is_err());
        assert!(Region::centered([4, 4, 4], [5, 1, 1]).is_err());
    }

    #[test]
    fn crop_counts_blob_voxels_inside_region() {
        let dims = [20, 20, 20];
        let inside = |z: usize, y: usize, x: usize| {
            let d = |a: usize, c: f64| (a as f64 - c).powi(2);
            d(z, 6.0) + d(y, 7.0) + d(x, 8.0) <= 16.0
        };
        let blob = LabelMap::from_fn(dims, inside);
        let mut vol = blob.to_volume();
        for v in vol.data_mut() {
            *v *= 3.0;
        }
        let region = Region {
            origin: [4, 4, 4],
            size: [8, 8, 8],
        };
        let cropped = binarize_and_crop(&vol, 3, region).unwrap();
        let mut brute = 0;
        for z in 4..12 {
            for y in 4..12 {
                for x in 4..12 {
                    brute += inside(z, y, x) as usize;
                }
            }
        }
        assert_eq!(cropped.foreground_count(), brute);
        assert!(brute < blob.foreground_count());
    }

    #[test]
    fn label_values_outside_domain_rejected() {
        assert!(matches!(LabelMap::new([1, 1, 2], vec![0, 2]), Err(Error::Domain(_))));
    }
}
