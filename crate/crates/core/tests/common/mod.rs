#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shapesig::volume::LabelMap;

/// Pairwise-distance Hausdorff over voxel centers, unit spacing.
pub fn brute_hausdorff(a: &LabelMap, b: &LabelMap) -> f64 {
    let (pa, pb) = (a.foreground(), b.foreground());
    let directed = |from: &[[usize; 3]], to: &[[usize; 3]]| {
        from.iter()
            .map(|p| {
                to.iter()
                    .map(|q| (0..3).map(|i| (p[i] as f64 - q[i] as f64).powi(2)).sum::<f64>())
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(0.0, f64::max)
            .sqrt()
    };
    directed(&pa, &pb).max(directed(&pb, &pa))
}

pub fn brute_dice(a: &LabelMap, b: &LabelMap) -> f64 {
    let (pa, pb) = (a.foreground(), b.foreground());
    let inter = pa.iter().filter(|p| pb.contains(p)).count();
    if pa.is_empty() && pb.is_empty() {
        return 1.0;
    }
    2.0 * inter as f64 / (pa.len() + pb.len()) as f64
}

/// Random label map with between 1 and `max_fg` foreground voxels, clustered
/// around a random center so that pairs overlap some of the time.
pub fn random_labels(dims: [usize; 3], max_fg: usize, rng: &mut ChaCha8Rng) -> LabelMap {
    let mut m = LabelMap::empty(dims);
    let n = rng.random_range(1..=max_fg);
    let c: Vec<f64> = dims.iter().map(|&d| rng.random_range(0.0..d as f64)).collect();
    let spread = rng.random_range(1.0..dims[0] as f64 / 2.0);
    for _ in 0..n {
        let p: Vec<usize> = (0..3)
            .map(|i| (c[i] + rng.random_range(-spread..spread)).clamp(0.0, dims[i] as f64 - 1.0) as usize)
            .collect();
        m.set(p[0], p[1], p[2], true);
    }
    m
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
