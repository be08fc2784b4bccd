//! 3D affine transforms, pull resampling and affine-pair generation.
//!
//! Coordinates are continuous voxel units `(z, y, x)` measured from the volume
//! center. A transform's matrix maps *output* coordinates to *input*
//! coordinates, so resampling never leaves holes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::volume::{Dims, Grid, LabelMap, Volume};

type Mat3 = [[f64; 3]; 3];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineTransform {
    m: [[f64; 4]; 4],
}

fn det3(a: &Mat3) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

fn inv3(a: &Mat3) -> Option<Mat3> {
    let det = det3(a);
    if det.abs() <= 1e-9 {
        return None;
    }
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            // cofactor of a[j][i]
            let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
            let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
            *v = (a[r0][c0] * a[r1][c1] - a[r0][c1] * a[r1][c0]) / det;
        }
    }
    Some(out)
}

fn matmul3(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn matvec3(a: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| a[i][0] * v[0] + a[i][1] * v[1] + a[i][2] * v[2])
}

/// Rotation by `angle` radians about the unit `axis` (Rodrigues).
fn rotation(axis: [f64; 3], angle: f64) -> Mat3 {
    let [x, y, z] = axis;
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

/// Parameters of a similarity transform recovered by [`AffineTransform::decompose`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    /// Isotropic scale applied to the object.
    pub scale: f64,
    /// Rotation angle applied to the object, degrees.
    pub rotation_deg: f64,
    /// Displacement of the object center, voxels.
    pub translation: [f64; 3],
}

impl AffineTransform {
    pub fn identity() -> Self {
        let mut m = [[0.0; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        AffineTransform { m }
    }

    pub fn from_matrix(m: [[f64; 4]; 4]) -> Result<Self> {
        if m[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::InvalidArgument(format!("last row must be [0,0,0,1], got {:?}", m[3])));
        }
        let t = AffineTransform { m };
        if det3(&t.linear()).abs() <= 1e-9 {
            return Err(Error::Domain("singular affine transform".into()));
        }
        Ok(t)
    }

    fn from_parts(a: Mat3, b: [f64; 3]) -> Self {
        let mut m = [[0.0; 4]; 4];
        for i in 0..3 {
            m[i][..3].copy_from_slice(&a[i]);
            m[i][3] = b[i];
        }
        m[3][3] = 1.0;
        AffineTransform { m }
    }

    /// Pull matrix `input = output + offset`; the object appears moved by `-offset`.
    pub fn translation(offset: [f64; 3]) -> Self {
        let mut t = Self::identity();
        for (i, o) in offset.iter().enumerate() {
            t.m[i][3] = *o;
        }
        t
    }

    /// Pull matrix `input = s * output`; `s > 1` shrinks the object.
    pub fn scaling(s: f64) -> Self {
        let mut t = Self::identity();
        for i in 0..3 {
            t.m[i][i] = s;
        }
        t
    }

    /// Object-space similarity: scale by `scale`, rotate, then move by `translation`.
    /// Returns the equivalent pull transform.
    pub fn similarity(scale: f64, axis: [f64; 3], angle_deg: f64, translation: [f64; 3]) -> Result<Self> {
        if !(scale > 0.0) {
            return Err(Error::Domain(format!("scale must be positive, got {scale}")));
        }
        let norm = axis.iter().map(|v| v * v).sum::<f64>().sqrt();
        let axis = if norm > 0.0 { axis.map(|v| v / norm) } else { [0.0, 0.0, 1.0] };
        let r = rotation(axis, angle_deg.to_radians());
        // forward: x -> s R x + t ; pull: p -> Rᵀ (p - t) / s
        let mut a = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                a[i][j] = r[j][i] / scale;
            }
        }
        let b = matvec3(&a, translation).map(|v| -v);
        Ok(Self::from_parts(a, b))
    }

    pub fn matrix(&self) -> [[f64; 4]; 4] {
        self.m
    }

    fn linear(&self) -> Mat3 {
        [0, 1, 2].map(|i| [self.m[i][0], self.m[i][1], self.m[i][2]])
    }

    fn offset(&self) -> [f64; 3] {
        [self.m[0][3], self.m[1][3], self.m[2][3]]
    }

    /// Maps an output coordinate (centered voxel units) to the input coordinate.
    pub fn apply_point(&self, p: [f64; 3]) -> [f64; 3] {
        let a = self.linear();
        let q = matvec3(&a, p);
        let b = self.offset();
        [q[0] + b[0], q[1] + b[1], q[2] + b[2]]
    }

    pub fn inverse(&self) -> Result<Self> {
        let ainv = inv3(&self.linear()).ok_or_else(|| Error::Domain("singular affine transform".into()))?;
        let b = matvec3(&ainv, self.offset()).map(|v| -v);
        Ok(Self::from_parts(ainv, b))
    }

    /// Transform equivalent to resampling with `second`, then with `self`.
    pub fn compose(&self, second: &AffineTransform) -> AffineTransform {
        // out(p) = mid(M1 p) = v(M2 M1 p)
        let a = matmul3(&second.linear(), &self.linear());
        let b2 = matvec3(&second.linear(), self.offset());
        let o = second.offset();
        Self::from_parts(a, [b2[0] + o[0], b2[1] + o[1], b2[2] + o[2]])
    }

    /// Recovers scale, rotation angle and translation assuming the transform is
    /// a similarity built by [`AffineTransform::similarity`].
    pub fn decompose(&self) -> Result<Similarity> {
        let forward = self.inverse()?;
        let f = forward.linear();
        let scale = det3(&f).cbrt();
        let trace = (f[0][0] + f[1][1] + f[2][2]) / scale;
        let rotation_deg = ((trace - 1.0) / 2.0).clamp(-1.0, 1.0).acos().to_degrees();
        Ok(Similarity {
            scale,
            rotation_deg,
            translation: forward.offset(),
        })
    }

    pub fn max_abs_diff(&self, other: &AffineTransform) -> f64 {
        let mut d: f64 = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                d = d.max((self.m[i][j] - other.m[i][j]).abs());
            }
        }
        d
    }
}

/// Random augmentation ranges.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentationSpec {
    max_rotation_deg: f64,
    scale_range: (f64, f64),
    max_translation_frac: f64,
    seed: u64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        AugmentationSpec {
            max_rotation_deg: 8.0,
            scale_range: (0.85, 1.15),
            max_translation_frac: 0.10,
            seed: 0,
        }
    }
}

impl AugmentationSpec {
    pub fn new(max_rotation_deg: f64, scale_range: (f64, f64), max_translation_frac: f64, seed: u64) -> Result<Self> {
        if !(0.0..90.0).contains(&max_rotation_deg) {
            return Err(Error::InvalidArgument(format!("max_rotation_deg {max_rotation_deg} outside [0, 90)")));
        }
        if !(scale_range.0 > 0.0 && scale_range.0 <= scale_range.1) {
            return Err(Error::InvalidArgument(format!("invalid scale range {scale_range:?}")));
        }
        if !(0.0..0.5).contains(&max_translation_frac) {
            return Err(Error::InvalidArgument(format!(
                "max_translation_frac {max_translation_frac} outside [0, 0.5)"
            )));
        }
        Ok(AugmentationSpec {
            max_rotation_deg,
            scale_range,
            max_translation_frac,
            seed,
        })
    }

    /// Spec that always yields the identity transform.
    pub fn identity() -> Self {
        AugmentationSpec {
            max_rotation_deg: 0.0,
            scale_range: (1.0, 1.0),
            max_translation_frac: 0.0,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn max_rotation_deg(&self) -> f64 {
        self.max_rotation_deg
    }

    pub fn scale_range(&self) -> (f64, f64) {
        self.scale_range
    }

    pub fn max_translation_frac(&self) -> f64 {
        self.max_translation_frac
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Generator for the `index`-th augmentation draw. The stream depends only on
    /// `(seed, index)`, so draws may be produced in any order or in parallel.
    pub fn rng(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        rng
    }
}

fn uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Draws `Translation ∘ Rotation ∘ IsotropicScale` about the volume center.
pub fn sample_random_affine<R: Rng>(spec: &AugmentationSpec, dims: Dims, rng: &mut R) -> AffineTransform {
    let scale = uniform(rng, spec.scale_range.0, spec.scale_range.1);
    let axis = loop {
        let v: [f64; 3] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            break v.map(|x| x / n);
        }
    };
    let angle = uniform(rng, 0.0, spec.max_rotation_deg);
    let translation = [0, 1, 2].map(|a| {
        let t = spec.max_translation_frac * dims[a] as f64;
        uniform(rng, -t, t)
    });
    AffineTransform::similarity(scale, axis, angle, translation).expect("validated spec")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interp {
    Nearest,
    Trilinear,
}

fn center(dims: Dims) -> [f64; 3] {
    dims.map(|d| (d as f64 - 1.0) / 2.0)
}

/// Visits every output voxel with its input-space sample coordinate.
fn for_each_sample(dims: Dims, t: &AffineTransform, mut f: impl FnMut(usize, [f64; 3])) {
    let c = center(dims);
    let a = t.linear();
    let b = t.offset();
    let [d, h, w] = dims;
    let mut i = 0;
    for z in 0..d {
        for y in 0..h {
            let p0 = [z as f64 - c[0], y as f64 - c[1], -c[2]];
            let base = matvec3(&a, p0);
            for x in 0..w {
                let xf = x as f64;
                let q = [0, 1, 2].map(|r| base[r] + a[r][2] * xf + b[r] + c[r]);
                f(i, q);
                i += 1;
            }
        }
    }
}

fn nearest_index(q: [f64; 3], dims: Dims) -> Option<usize> {
    let mut idx = [0usize; 3];
    for a in 0..3 {
        let r = q[a].round();
        if r < 0.0 || r > dims[a] as f64 - 1.0 {
            return None;
        }
        idx[a] = r as usize;
    }
    Some((idx[0] * dims[1] + idx[1]) * dims[2] + idx[2])
}

fn trilinear(data: &[f32], dims: Dims, q: [f64; 3]) -> f32 {
    let [d, h, w] = dims;
    let f = q.map(f64::floor);
    let frac = [q[0] - f[0], q[1] - f[1], q[2] - f[2]];
    let (z0, y0, x0) = (f[0] as isize, f[1] as isize, f[2] as isize);
    let mut acc = 0.0f64;
    for dz in 0..2 {
        let z = z0 + dz;
        let wz = if dz == 0 { 1.0 - frac[0] } else { frac[0] };
        if wz == 0.0 || z < 0 || z >= d as isize {
            continue;
        }
        for dy in 0..2 {
            let y = y0 + dy;
            let wy = if dy == 0 { 1.0 - frac[1] } else { frac[1] };
            if wy == 0.0 || y < 0 || y >= h as isize {
                continue;
            }
            for dx in 0..2 {
                let x = x0 + dx;
                let wx = if dx == 0 { 1.0 - frac[2] } else { frac[2] };
                if wx == 0.0 || x < 0 || x >= w as isize {
                    continue;
                }
                let v = data[((z as usize) * h + y as usize) * w + x as usize] as f64;
                acc += wz * wy * wx * v;
            }
        }
    }
    acc as f32
}

fn check_invertible(t: &AffineTransform) -> Result<()> {
    if det3(&t.linear()).abs() <= 1e-9 {
        return Err(Error::Domain("singular affine transform".into()));
    }
    Ok(())
}

/// Resamples an intensity volume. Samples outside the input read as 0.
pub fn apply_affine(v: &Volume, t: &AffineTransform, interp: Interp) -> Result<Volume> {
    check_invertible(t)?;
    let dims = v.dims();
    let mut out = vec![0.0f32; v.voxel_count()];
    for_each_sample(dims, t, |i, q| {
        out[i] = match interp {
            Interp::Nearest => nearest_index(q, dims).map_or(0.0, |j| v.data()[j]),
            Interp::Trilinear => trilinear(v.data(), dims, q),
        };
    });
    Volume::with_spacing(dims, v.spacing(), out)
}

/// Resamples a label map with nearest-neighbour lookup, keeping it binary.
pub fn apply_affine_labels(m: &LabelMap, t: &AffineTransform) -> Result<LabelMap> {
    check_invertible(t)?;
    let dims = m.dims();
    let mut out = vec![0u8; m.voxel_count()];
    for_each_sample(dims, t, |i, q| {
        if let Some(j) = nearest_index(q, dims) {
            out[i] = m.data()[j];
        }
    });
    LabelMap::with_spacing(dims, m.spacing(), out)
}

const PAIR_ATTEMPTS: usize = 5;

fn transformed_nonempty<R: Rng>(m: &LabelMap, spec: &AugmentationSpec, rng: &mut R) -> Result<LabelMap> {
    for _ in 0..PAIR_ATTEMPTS {
        let t = sample_random_affine(spec, m.dims(), rng);
        let out = apply_affine_labels(m, &t)?;
        if !out.is_empty() {
            return Ok(out);
        }
    }
    Err(Error::ForegroundLost(PAIR_ATTEMPTS))
}

/// Two independent random transforms of the same label map.
pub fn make_affine_pair<R: Rng>(m: &LabelMap, spec: &AugmentationSpec, rng: &mut R) -> Result<(LabelMap, LabelMap)> {
    if m.is_empty() {
        return Err(Error::InvalidArgument("affine pair of an empty label map".into()));
    }
    let a = transformed_nonempty(m, spec, rng)?;
    let b = transformed_nonempty(m, spec, rng)?;
    Ok((a, b))
}

/// One random transform applied to both an image (trilinear) and its labels (nearest).
pub fn augment_case<R: Rng>(
    image: &Volume,
    label: &LabelMap,
    spec: &AugmentationSpec,
    rng: &mut R,
) -> Result<(Volume, LabelMap)> {
    if image.dims() != label.dims() {
        return Err(Error::shape("augment_case", format!("{:?} vs {:?}", image.dims(), label.dims())));
    }
    for _ in 0..PAIR_ATTEMPTS {
        let t = sample_random_affine(spec, image.dims(), rng);
        let l = apply_affine_labels(label, &t)?;
        if !l.is_empty() {
            return Ok((apply_affine(image, &t, Interp::Trilinear)?, l));
        }
    }
    Err(Error::ForegroundLost(PAIR_ATTEMPTS))
}
