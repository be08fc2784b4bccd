//! Deterministic synthetic subjects: one structure per subject, drawn from a
//! shared shape family with per-subject deformations, plus a rendered
//! intensity image.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rvf;
use crate::volume::{normalize_intensity, Dims, Grid, LabelMap, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeFamily {
    /// Bent, tapering ellipsoid with a sharp tail (caudate-like).
    EllipsoidWithTail,
    /// Thick spherical shell segment.
    Crescent,
    /// Sphere with angular lobes.
    LobedBlob,
}

impl fmt::Display for ShapeFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShapeFamily::EllipsoidWithTail => "ellipsoid_with_tail",
            ShapeFamily::Crescent => "crescent",
            ShapeFamily::LobedBlob => "lobed_blob",
        })
    }
}

impl FromStr for ShapeFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ellipsoid_with_tail" => Ok(ShapeFamily::EllipsoidWithTail),
            "crescent" => Ok(ShapeFamily::Crescent),
            "lobed_blob" => Ok(ShapeFamily::LobedBlob),
            other => Err(Error::InvalidArgument(format!("unknown shape family {other:?}"))),
        }
    }
}

/// Per-subject shape coefficients, in voxels at the generated resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Deform {
    /// Semi-axes `(z, y, x)` of the main body.
    pub radii: [f64; 3],
    /// Fractional shrink of the cross-section toward `+z`.
    pub taper: f64,
    /// Lateral (`x`) displacement of the body centerline at its ends.
    pub bend: f64,
    /// Tail length; 0 disables the tail.
    pub tail_length: f64,
    pub tail_radius: f64,
    /// Lateral slope of the tail axis.
    pub tail_slant: f64,
    /// Lobe amplitude (lobed blob) or inner-sphere offset fraction (crescent).
    pub modulation: f64,
    /// Lobe count (lobed blob).
    pub lobes: u32,
    /// Body center offset from the volume center.
    pub offset: [f64; 3],
}

impl Deform {
    /// Plain ellipsoid with no taper, bend or tail.
    pub fn ellipsoid(radii: [f64; 3]) -> Self {
        Deform {
            radii,
            taper: 0.0,
            bend: 0.0,
            tail_length: 0.0,
            tail_radius: 0.0,
            tail_slant: 0.0,
            modulation: 0.0,
            lobes: 0,
            offset: [0.0; 3],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectSpec {
    pub subject_id: u64,
    pub base_shape: ShapeFamily,
    pub deform: Deform,
    pub noise_sigma: f64,
    pub contrast: f64,
    /// Amplitude scale of the low-frequency background field; 0 disables it.
    pub background: f64,
    /// Seed for noise and background draws.
    pub render_seed: u64,
}

/// Rendering parameters shared by all subjects of a dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Appearance {
    pub contrast: f64,
    pub noise_sigma: f64,
    pub background: f64,
}

impl Default for Appearance {
    fn default() -> Self {
        Appearance {
            contrast: 1.0,
            noise_sigma: 0.1,
            background: 0.06,
        }
    }
}

impl SubjectSpec {
    /// Draws the spec for `subject_id` from `(master_seed, subject_id)` alone.
    pub fn sample(family: ShapeFamily, subject_id: u64, master_seed: u64, dims: Dims, look: Appearance) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
        rng.set_stream(subject_id);
        let u = dims.iter().copied().min().unwrap_or(48) as f64 / 48.0;
        let mut r = |lo: f64, hi: f64| rng.random_range(lo..hi) * u;
        let deform = match family {
            ShapeFamily::EllipsoidWithTail => Deform {
                radii: [r(9.5, 12.0), r(6.0, 8.0), r(6.0, 8.0)],
                taper: r(0.0, 0.3) / u,
                bend: r(0.0, 3.0),
                tail_length: r(5.0, 8.0),
                tail_radius: r(2.0, 3.2),
                tail_slant: r(-0.5, 0.5) / u,
                modulation: 0.0,
                lobes: 0,
                offset: [r(-1.5, 1.5), r(-1.5, 1.5), r(-1.5, 1.5)],
            },
            ShapeFamily::Crescent => Deform {
                radii: [r(8.0, 11.0), r(8.0, 11.0), r(8.0, 11.0)],
                modulation: r(0.35, 0.6) / u,
                offset: [r(-1.5, 1.5), r(-1.5, 1.5), r(-1.5, 1.5)],
                ..Deform::ellipsoid([0.0; 3])
            },
            ShapeFamily::LobedBlob => Deform {
                radii: [r(7.0, 10.0), r(7.0, 10.0), r(7.0, 10.0)],
                modulation: r(0.1, 0.3) / u,
                lobes: 3 + (r(0.0, 3.0) / u) as u32,
                offset: [r(-1.5, 1.5), r(-1.5, 1.5), r(-1.5, 1.5)],
                ..Deform::ellipsoid([0.0; 3])
            },
        };
        SubjectSpec {
            subject_id,
            base_shape: family,
            deform,
            noise_sigma: look.noise_sigma,
            contrast: look.contrast,
            background: look.background,
            render_seed: master_seed ^ subject_id.wrapping_mul(0x9e37_79b9_7f4a_7c15),
        }
    }

    /// Implicit membership test at centered coordinates `(z, y, x)`.
    pub fn inside(&self, p: [f64; 3]) -> bool {
        let d = &self.deform;
        let q = [p[0] - d.offset[0], p[1] - d.offset[1], p[2] - d.offset[2]];
        match self.base_shape {
            ShapeFamily::EllipsoidWithTail => {
                let [rz, ry, rx] = d.radii;
                let t = q[0] / rz;
                let x = q[2] - d.bend * t * t;
                let shrink = (1.0 - d.taper * (t + 1.0) / 2.0).max(0.05);
                let body = t * t + (q[1] / (ry * shrink)).powi(2) + (x / (rx * shrink)).powi(2) <= 1.0;
                body || self.in_tail(q)
            }
            ShapeFamily::Crescent => {
                let [rz, ry, rx] = d.radii;
                let outer = (q[0] / rz).powi(2) + (q[1] / ry).powi(2) + (q[2] / rx).powi(2) <= 1.0;
                let shift = d.modulation * rx;
                let inner = (q[0] / rz).powi(2) + (q[1] / ry).powi(2) + ((q[2] - shift) / rx).powi(2) <= 0.8;
                outer && !inner
            }
            ShapeFamily::LobedBlob => {
                let n = (q[0] / d.radii[0]).powi(2) + (q[1] / d.radii[1]).powi(2) + (q[2] / d.radii[2]).powi(2);
                let rho = (q[1] * q[1] + q[2] * q[2]).sqrt();
                let phi = q[1].atan2(q[2]);
                let theta = rho.atan2(q[0]);
                let bump = 1.0 + d.modulation * (d.lobes as f64 * phi).cos() * theta.sin();
                n.sqrt() <= bump
            }
        }
    }

    /// Cone from the `+z` end of the body, narrowing to a point.
    fn in_tail(&self, q: [f64; 3]) -> bool {
        let d = &self.deform;
        if d.tail_length <= 0.0 {
            return false;
        }
        let start_z = 0.75 * d.radii[0];
        let start = [start_z, 0.0, d.bend * 0.75 * 0.75];
        let norm = (1.0 + d.tail_slant * d.tail_slant).sqrt();
        let axis = [1.0 / norm, 0.0, d.tail_slant / norm];
        let v = [q[0] - start[0], q[1] - start[1], q[2] - start[2]];
        let s = v[0] * axis[0] + v[1] * axis[1] + v[2] * axis[2];
        let reach = 0.25 * d.radii[0] + d.tail_length;
        if s < 0.0 || s > reach {
            return false;
        }
        let perp2 = v.iter().map(|c| c * c).sum::<f64>() - s * s;
        let radius = d.tail_radius * (1.0 - s / reach);
        perp2 <= radius * radius
    }

    pub fn rasterize(&self, dims: Dims) -> LabelMap {
        let c = dims.map(|n| (n as f64 - 1.0) / 2.0);
        LabelMap::from_fn(dims, |z, y, x| self.inside([z as f64 - c[0], y as f64 - c[1], x as f64 - c[2]]))
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with zero padding.
pub fn gaussian_smooth(v: &Volume, sigma: f64) -> Volume {
    let dims = v.dims();
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let strides = [dims[1] * dims[2], dims[2], 1];
    let mut cur: Vec<f64> = v.data().iter().map(|&x| x as f64).collect();
    for axis in 0..3 {
        let mut next = vec![0.0; cur.len()];
        let n = dims[axis] as isize;
        for (i, out) in next.iter_mut().enumerate() {
            let pos = ((i / strides[axis]) % dims[axis]) as isize;
            let mut acc = 0.0;
            for (j, &w) in kernel.iter().enumerate() {
                let src = pos + j as isize - radius;
                if src >= 0 && src < n {
                    let idx = i as isize + (src - pos) * strides[axis] as isize;
                    acc += w * cur[idx as usize];
                }
            }
            *out = acc;
        }
        cur = next;
    }
    Volume::with_spacing(dims, v.spacing(), cur.into_iter().map(|x| x as f32).collect()).expect("same geometry")
}

const SMOOTHING_SIGMA: f64 = 1.0;
const MAX_FOOTPRINT: f64 = 0.7;

/// Renders the label and image of one subject. Identical specs give identical bytes.
pub fn generate_subject(spec: &SubjectSpec, dims: Dims) -> Result<(Volume, LabelMap)> {
    if dims.iter().any(|&d| d < 16) {
        return Err(Error::InvalidArgument(format!("dims {dims:?} must each be >= 16")));
    }
    if spec.noise_sigma < 0.0 {
        return Err(Error::InvalidArgument("noise_sigma must be >= 0".into()));
    }
    let label = spec.rasterize(dims);
    let fg = label.foreground();
    if fg.is_empty() {
        return Err(Error::Domain(format!("subject {} rasterizes to nothing", spec.subject_id)));
    }
    for a in 0..3 {
        let lo = fg.iter().map(|p| p[a]).min().unwrap();
        let hi = fg.iter().map(|p| p[a]).max().unwrap();
        if lo == 0 || hi == dims[a] - 1 || (hi - lo + 1) as f64 > MAX_FOOTPRINT * dims[a] as f64 {
            return Err(Error::Domain(format!(
                "subject {} escapes bounds on axis {a}: extent {lo}..={hi} of {}",
                spec.subject_id, dims[a]
            )));
        }
    }

    let mut image = gaussian_smooth(&label.to_volume(), SMOOTHING_SIGMA);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.render_seed);
    let modes: Vec<([f64; 3], f64, f64)> = (0..3)
        .map(|_| {
            let freq = [0, 1, 2].map(|_| rng.random_range(0..=2) as f64);
            (freq, rng.random_range(0.0..2.0 * PI), rng.random_range(0.5..1.0))
        })
        .collect();
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("sigma");
    let [d, h, w] = dims;
    let mut i = 0;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let mut v = spec.contrast * image.data()[i] as f64;
                if spec.background > 0.0 {
                    for (f, phase, amp) in &modes {
                        let arg = 2.0 * PI * (f[0] * z as f64 / d as f64 + f[1] * y as f64 / h as f64 + f[2] * x as f64 / w as f64);
                        v += spec.background * amp * (arg + phase).cos();
                    }
                }
                if spec.noise_sigma > 0.0 {
                    v += noise.sample(&mut rng);
                }
                image.data_mut()[i] = v as f32;
                i += 1;
            }
        }
    }
    Ok((image, label))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub subject_id: u64,
    /// Intensity-normalized image.
    pub image: Volume,
    pub label: LabelMap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub cases: Vec<Case>,
    /// Indices into `cases`.
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetSpec {
    pub n_subjects: usize,
    pub dims: Dims,
    pub master_seed: u64,
    pub split_frac: f64,
    pub family: ShapeFamily,
    pub appearance: Appearance,
}

impl DatasetSpec {
    pub fn new(n_subjects: usize, dims: Dims, master_seed: u64, split_frac: f64) -> Self {
        DatasetSpec {
            n_subjects,
            dims,
            master_seed,
            split_frac,
            family: ShapeFamily::EllipsoidWithTail,
            appearance: Appearance::default(),
        }
    }
}

pub fn generate_dataset(n_subjects: usize, dims: Dims, master_seed: u64, split_frac: f64) -> Result<Dataset> {
    DatasetSpec::new(n_subjects, dims, master_seed, split_frac).generate()
}

impl DatasetSpec {
    pub fn generate(&self) -> Result<Dataset> {
        if self.n_subjects < 4 {
            return Err(Error::InvalidArgument(format!("need at least 4 subjects, got {}", self.n_subjects)));
        }
        if !(self.split_frac > 0.0 && self.split_frac < 1.0) {
            return Err(Error::InvalidArgument(format!("split_frac {} outside (0, 1)", self.split_frac)));
        }
        let cases = (0..self.n_subjects as u64)
            .map(|id| {
                let spec = SubjectSpec::sample(self.family, id, self.master_seed, self.dims, self.appearance);
                let (image, label) = generate_subject(&spec, self.dims)?;
                Ok(Case {
                    subject_id: id,
                    image: normalize_intensity(&image)?,
                    label,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let n_train = ((self.n_subjects as f64 * self.split_frac).round() as usize).clamp(1, self.n_subjects - 1);
        let mut order: Vec<usize> = (0..self.n_subjects).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(u64::MAX);
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let mut train = order[..n_train].to_vec();
        let mut test = order[n_train..].to_vec();
        train.sort_unstable();
        test.sort_unstable();
        Ok(Dataset { cases, train, test })
    }
}

pub const MANIFEST: &str = "manifest.txt";

impl Dataset {
    pub fn dims(&self) -> Dims {
        self.cases[0].label.dims()
    }

    pub fn train_cases(&self) -> impl Iterator<Item = &Case> {
        self.train.iter().map(|&i| &self.cases[i])
    }

    pub fn test_cases(&self) -> impl Iterator<Item = &Case> {
        self.test.iter().map(|&i| &self.cases[i])
    }

    /// Writes RVF files plus a manifest with one `subject_id image label split` line per case.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut manifest = String::from("# subject_id image label split\n");
        for (i, case) in self.cases.iter().enumerate() {
            let image = format!("subject_{:03}_image.rvf", case.subject_id);
            let label = format!("subject_{:03}_label.rvf", case.subject_id);
            rvf::write_volume(dir.join(&image), &case.image)?;
            rvf::write_labels(dir.join(&label), &case.label)?;
            let split = if self.train.contains(&i) { "train" } else { "test" };
            manifest.push_str(&format!("{} {image} {label} {split}\n", case.subject_id));
        }
        fs::write(dir.join(MANIFEST), manifest)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let text = fs::read_to_string(dir.join(MANIFEST))?;
        let mut ds = Dataset {
            cases: Vec::new(),
            train: Vec::new(),
            test: Vec::new(),
        };
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || Error::InvalidArgument(format!("manifest line {}: {line:?}", lineno + 1));
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [id, image, label, split] = fields[..] else {
                return Err(bad());
            };
            let subject_id = id.parse().map_err(|_| bad())?;
            let idx = ds.cases.len();
            match split {
                "train" => ds.train.push(idx),
                "test" => ds.test.push(idx),
                _ => return Err(bad()),
            }
            ds.cases.push(Case {
                subject_id,
                image: rvf::read_volume(dir.join(image))?,
                label: rvf::read_labels(dir.join(label))?,
            });
        }
        if ds.cases.is_empty() {
            return Err(Error::InvalidArgument(format!("{} lists no cases", dir.join(MANIFEST).display())));
        }
        Ok(ds)
    }
}
