//! Overlap and surface-distance metrics on binary label maps.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::volume::{Grid, LabelMap};

fn same_dims(op: &'static str, a: &LabelMap, b: &LabelMap) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// `2|A∩B| / (|A| + |B|)`; two empty maps score 1.
pub fn dice_coefficient(a: &LabelMap, b: &LabelMap) -> Result<f64> {
    same_dims("dice_coefficient", a, b)?;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        inter += (x & y) as usize;
        na += x as usize;
        nb += y as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// One pass of the lower-envelope squared distance transform along a line.
fn edt_line(f: &[f64], step: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    v.clear();
    z.clear();
    for (q, &fq) in f.iter().enumerate() {
        if fq.is_infinite() {
            continue;
        }
        let xq = q as f64 * step;
        loop {
            let Some(&p) = v.last() else {
                v.push(q);
                z.push(f64::NEG_INFINITY);
                break;
            };
            let xp = p as f64 * step;
            let s = ((fq + xq * xq) - (f[p] + xp * xp)) / (2.0 * (xq - xp));
            if s <= *z.last().unwrap() {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                z.push(s);
                break;
            }
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let xq = q as f64 * step;
        while k + 1 < v.len() && z[k + 1] < xq {
            k += 1;
        }
        let d = xq - v[k] as f64 * step;
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance (in spacing units) from every voxel to the nearest foreground voxel.
pub fn squared_distance_transform(m: &LabelMap) -> Vec<f64> {
    let dims = m.dims();
    let spacing = m.spacing();
    let mut d: Vec<f64> = m.data().iter().map(|&x| if x == 1 { 0.0 } else { f64::INFINITY }).collect();
    let strides = [dims[1] * dims[2], dims[2], 1];
    let (mut v, mut z) = (Vec::new(), Vec::new());
    for axis in 0..3 {
        let n = dims[axis];
        let (mut line, mut out) = (vec![0.0; n], vec![0.0; n]);
        for start in 0..d.len() {
            if (start / strides[axis]) % n != 0 {
                continue;
            }
            for (i, l) in line.iter_mut().enumerate() {
                *l = d[start + i * strides[axis]];
            }
            edt_line(&line, spacing[axis] as f64, &mut out, &mut v, &mut z);
            for (i, o) in out.iter().enumerate() {
                d[start + i * strides[axis]] = *o;
            }
        }
    }
    d
}

fn directed(a: &LabelMap, dt_b: &[f64]) -> f64 {
    a.data()
        .iter()
        .zip(dt_b)
        .filter(|(x, _)| **x == 1)
        .map(|(_, d)| *d)
        .fold(0.0, f64::max)
        .sqrt()
}

/// Symmetric Hausdorff distance between foreground voxel centers, scaled by spacing.
pub fn hausdorff(a: &LabelMap, b: &LabelMap) -> Result<f64> {
    same_dims("hausdorff", a, b)?;
    if a.spacing() != b.spacing() {
        return Err(Error::InvalidArgument("hausdorff operands differ in spacing".into()));
    }
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("hausdorff of an empty label map".into()));
    }
    let ab = directed(a, &squared_distance_transform(b));
    let ba = directed(b, &squared_distance_transform(a));
    Ok(ab.max(ba))
}

/// Physical length of the volume diagonal, reported as the distance when a map is empty.
pub fn volume_diagonal(m: &LabelMap) -> f64 {
    let (d, s) = (m.dims(), m.spacing());
    (0..3).map(|i| (d[i] as f64 * s[i] as f64).powi(2)).sum::<f64>().sqrt()
}

/// Hausdorff distance, falling back to the volume diagonal if either map is empty.
pub fn hausdorff_or_diagonal(label: &LabelMap, pred: &LabelMap) -> Result<f64> {
    same_dims("hausdorff", label, pred)?;
    if label.is_empty() || pred.is_empty() {
        return Ok(volume_diagonal(label));
    }
    hausdorff(label, pred)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub case_id: String,
    pub dice: f64,
    pub hausdorff: f64,
    pub shape_loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsSummary {
    pub dice: f64,
    pub hausdorff: f64,
    pub shape_loss: f64,
}

pub fn summarize(records: &[MetricsRecord]) -> MetricsSummary {
    let n = records.len().max(1) as f64;
    MetricsSummary {
        dice: records.iter().map(|r| r.dice).sum::<f64>() / n,
        hausdorff: records.iter().map(|r| r.hausdorff).sum::<f64>() / n,
        shape_loss: records.iter().map(|r| r.shape_loss).sum::<f64>() / n,
    }
}

pub const METRICS_HEADER: &str = "case_id,dice,hausdorff,shape_loss";

/// CSV with one row per case and a final `mean` row.
pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in records {
        writeln!(out, "{},{:.6},{:.6},{:.6}", r.case_id, r.dice, r.hausdorff, r.shape_loss).unwrap();
    }
    let s = summarize(records);
    writeln!(out, "mean,{:.6},{:.6},{:.6}", s.dice, s.hausdorff, s.shape_loss).unwrap();
    out
}

/// Parses a CSV produced by [`metrics_csv`], skipping the summary row.
pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::InvalidArgument("missing metrics header".into()));
    }
    let mut out = Vec::new();
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(Error::InvalidArgument(format!("bad metrics row {line:?}")));
        }
        if f[0] == "mean" {
            continue;
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| Error::InvalidArgument(format!("bad number {s:?}")));
        out.push(MetricsRecord {
            case_id: f[0].to_string(),
            dice: num(f[1])?,
            hausdorff: num(f[2])?,
            shape_loss: num(f[3])?,
        });
    }
    Ok(out)
}
