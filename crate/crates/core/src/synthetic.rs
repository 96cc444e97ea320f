//! Synthetic colored clouds: Gaussian-blob shapes and noisy variants.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::pointcloud::{LabeledSample, PointCloud};
use crate::seed;

pub const PRISTINE_MOS: f64 = 1.0;
pub const DISTORTED_MOS: f64 = 0.2;

/// A mixture of three anisotropic Gaussian blobs whose layout depends on
/// `shape`; colors vary smoothly with position.
pub fn blob_cloud(shape: u64, n_points: usize, seed: u64) -> Result<PointCloud> {
    let mut layout = seed::rng(seed::derive(0xB10B, shape));
    let blobs: Vec<([f64; 3], [f64; 3])> = (0..3)
        .map(|_| {
            let mean = std::array::from_fn(|_| layout.gen_range(-2.0..2.0));
            let spread = std::array::from_fn(|_| layout.gen_range(0.2..0.8));
            (mean, spread)
        })
        .collect();
    let phase: [f64; 3] = std::array::from_fn(|_| layout.gen_range(0.0..std::f64::consts::TAU));
    let mut rng = seed::rng(seed::derive(seed, shape));
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let points = (0..n_points)
        .map(|_| {
            let (mean, spread) = blobs[rng.gen_range(0..blobs.len())];
            let p: [f64; 3] = std::array::from_fn(|d| mean[d] + spread[d] * unit.sample(&mut rng));
            let mut row = [0.0; 6];
            row[..3].copy_from_slice(&p);
            for c in 0..3 {
                row[3 + c] = 0.5 + 0.45 * (1.3 * p[c] + phase[c]).sin();
            }
            row
        })
        .collect();
    PointCloud::new(points)
}

/// Adds Gaussian noise to coordinates and colors; colors are clamped to [0, 1].
pub fn perturb(cloud: &PointCloud, sigma_xyz: f64, sigma_rgb: f64, seed: u64) -> Result<PointCloud> {
    let mut rng = seed::rng(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let points = cloud
        .points()
        .iter()
        .map(|r| {
            let mut out = *r;
            for v in &mut out[..3] {
                *v += sigma_xyz * unit.sample(&mut rng);
            }
            for v in &mut out[3..] {
                *v = (*v + sigma_rgb * unit.sample(&mut rng)).clamp(0.0, 1.0);
            }
            out
        })
        .collect();
    PointCloud::new(points)
}

/// Four pristine shapes and one distorted variant of each, labelled
/// `PRISTINE_MOS` and `DISTORTED_MOS`. Content ids are `blob0`..`blob3`.
pub fn blob_dataset(n_points: usize, seed: u64) -> Result<Vec<LabeledSample>> {
    let mut out = Vec::with_capacity(8);
    for shape in 0..4 {
        let clean = blob_cloud(shape, n_points, seed)?;
        let noisy = perturb(&clean, 0.15, 0.25, seed::derive(seed, 100 + shape))?;
        let id = format!("blob{shape}");
        out.push(LabeledSample::new(clean, PRISTINE_MOS, id.clone(), "pristine")?);
        out.push(LabeledSample::new(noisy, DISTORTED_MOS, id, "noise")?);
    }
    Ok(out)
}
