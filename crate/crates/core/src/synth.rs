//! Synthetic partial-overlap pairs for training and benchmarking.

use nalgebra::{Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{random_rigid_with, unit_vector, Point3, PointCloud, RigidTransform};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Sphere,
    CubeGrid,
    GaussianBlobs,
}

impl std::str::FromStr for Shape {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sphere" => Ok(Shape::Sphere),
            "cube_grid" => Ok(Shape::CubeGrid),
            "gaussian_blobs" => Ok(Shape::GaussianBlobs),
            other => Err(Error::InvalidArgument(format!("unknown shape '{}'", other))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    /// Points per cloud.
    pub num_points: usize,
    pub overlap_ratio: f64,
    pub noise_sigma: f64,
    /// Degrees.
    pub rot_max: f64,
    pub trans_max: f64,
    pub seed: u64,
    pub shape: Shape,
}

impl SynthParams {
    /// The standard toy task: 256 points, 70% overlap, noise 0.01.
    pub fn standard(seed: u64) -> Self {
        SynthParams {
            num_points: 256,
            overlap_ratio: 0.7,
            noise_sigma: 0.01,
            rot_max: 45.0,
            trans_max: 0.5,
            seed,
            shape: Shape::GaussianBlobs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.overlap_ratio > 0.0 && self.overlap_ratio <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "overlap_ratio {} outside (0, 1]",
                self.overlap_ratio
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidArgument(format!("noise_sigma {} is negative", self.noise_sigma)));
        }
        Ok(())
    }

    /// Number of points shared by both crops.
    pub fn overlap_count(&self) -> usize {
        (self.overlap_ratio * self.num_points as f64).round() as usize
    }
}

/// A generated pair: `Y ≈ T_gt(X)` on the overlap.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthPair {
    pub x: PointCloud,
    pub y: PointCloud,
    pub t_gt: RigidTransform,
}

fn sample_shape(rng: &mut ChaCha8Rng, shape: Shape, count: usize) -> Vec<Point3> {
    match shape {
        Shape::Sphere => (0..count).map(|_| unit_vector(rng)).collect(),
        Shape::CubeGrid => {
            let side = ((count as f64).cbrt().ceil() as usize).max(2);
            let step = 2.0 / (side - 1) as f64;
            let mut grid: Vec<Point3> = (0..side * side * side)
                .map(|k| {
                    let (a, b, c) = (k / (side * side), (k / side) % side, k % side);
                    Point3::new(a as f64, b as f64, c as f64) * step - Vector3::repeat(1.0)
                })
                .collect();
            grid.shuffle(rng);
            grid.truncate(count);
            grid
        }
        Shape::GaussianBlobs => {
            // Anisotropic clusters give the local descriptors something to
            // distinguish; a few points per blob is enough at toy scale.
            const BLOBS: usize = 6;
            let blobs: Vec<(Point3, Matrix3<f64>)> = (0..BLOBS)
                .map(|_| {
                    let centre = Point3::from_fn(|_, _| rng.random_range(-1.0..1.0));
                    let scales = Vector3::from_fn(|_, _| rng.random_range(0.05..0.35));
                    let rot = random_rigid_with(rng, 180.0, 0.0).expect("valid bounds").rotation;
                    (centre, rot * Matrix3::from_diagonal(&scales))
                })
                .collect();
            let weights: Vec<f64> = (0..BLOBS).map(|_| rng.random_range(0.5..1.5)).collect();
            let total: f64 = weights.iter().sum();
            let normal = Normal::new(0.0, 1.0).expect("unit normal");
            (0..count)
                .map(|_| {
                    let mut u = rng.random::<f64>() * total;
                    let mut b = BLOBS - 1;
                    for (i, w) in weights.iter().enumerate() {
                        if u < *w {
                            b = i;
                            break;
                        }
                        u -= w;
                    }
                    let z = Vector3::from_fn(|_, _| normal.sample(rng));
                    blobs[b].0 + blobs[b].1 * z
                })
                .collect()
        }
    }
}

/// Generate a partially overlapping pair by half-space cropping along a
/// random direction: `X` keeps the lowest `n` projections of a shared cloud,
/// `Y` the highest `n`, so `round(overlap_ratio * n)` points are shared.
pub fn synth_pair(p: &SynthParams) -> Result<SynthPair> {
    p.validate()?;
    let n = p.num_points;
    let overlap = p.overlap_count();
    if overlap < 3 {
        return Err(Error::Generation(format!(
            "overlap_ratio {} over {} points leaves {} shared points, need 3",
            p.overlap_ratio, n, overlap
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let t_gt = random_rigid_with(&mut rng, p.rot_max, p.trans_max)?;
    let total = 2 * n - overlap;
    let full = sample_shape(&mut rng, p.shape, total);
    if full.len() < total {
        return Err(Error::Generation(format!("shape produced {} of {} points", full.len(), total)));
    }

    let dir = unit_vector(&mut rng);
    let mut order: Vec<usize> = (0..total).collect();
    let proj: Vec<f64> = full.iter().map(|q| q.dot(&dir)).collect();
    order.sort_by(|&a, &b| proj[a].total_cmp(&proj[b]).then(a.cmp(&b)));

    let mut xi: Vec<usize> = order[..n].to_vec();
    let mut yi: Vec<usize> = order[total - n..].to_vec();
    xi.shuffle(&mut rng);
    yi.shuffle(&mut rng);

    let noise = Normal::new(0.0, p.noise_sigma.max(0.0))
        .map_err(|e| Error::Generation(e.to_string()))?;
    let x = PointCloud::new(xi.iter().map(|&i| full[i]).collect())?;
    let y = PointCloud::new(
        yi.iter()
            .map(|&i| {
                let q = t_gt.apply_point(&full[i]);
                if p.noise_sigma > 0.0 {
                    q + Vector3::from_fn(|_, _| noise.sample(&mut rng))
                } else {
                    q
                }
            })
            .collect(),
    )?;
    Ok(SynthPair { x, y, t_gt })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{apply_transform, gt_correspondences};

    fn params(seed: u64) -> SynthParams {
        SynthParams {
            num_points: 128,
            overlap_ratio: 0.7,
            noise_sigma: 0.0,
            rot_max: 45.0,
            trans_max: 1.0,
            seed,
            shape: Shape::GaussianBlobs,
        }
    }

    #[test]
    fn full_overlap_identity_is_permutation() {
        for shape in [Shape::Sphere, Shape::CubeGrid, Shape::GaussianBlobs] {
            let p = SynthParams {
                overlap_ratio: 1.0,
                rot_max: 0.0,
                trans_max: 0.0,
                shape,
                ..params(3)
            };
            let pair = synth_pair(&p).unwrap();
            let key = |c: &PointCloud| {
                let mut v: Vec<[u64; 3]> = c
                    .points()
                    .iter()
                    .map(|q| [q.x.to_bits(), q.y.to_bits(), q.z.to_bits()])
                    .collect();
                v.sort();
                v
            };
            assert_eq!(key(&pair.x), key(&pair.y), "{:?}", shape);
            assert_ne!(pair.x, pair.y, "clouds should be shuffled independently");
        }
    }

    #[test]
    fn noise_free_overlap_has_exact_partners() {
        let pair = synth_pair(&params(11)).unwrap();
        let warped = apply_transform(&pair.x, &pair.t_gt);
        let exact = warped
            .points()
            .iter()
            .filter(|q| pair.y.points().iter().any(|y| (*q - y).norm() == 0.0))
            .count();
        assert_eq!(exact, params(11).overlap_count());
    }

    #[test]
    fn deterministic_given_seed() {
        assert_eq!(synth_pair(&params(5)).unwrap(), synth_pair(&params(5)).unwrap());
        assert_ne!(synth_pair(&params(5)).unwrap().x, synth_pair(&params(6)).unwrap().x);
    }

    #[test]
    fn measured_overlap_tracks_ratio() {
        for seed in 0..100 {
            let p = SynthParams {
                noise_sigma: 0.01,
                ..params(seed)
            };
            let pair = synth_pair(&p).unwrap();
            let (set, _) = gt_correspondences(&pair.x, &pair.y, &pair.t_gt, 0.05).unwrap();
            let measured = set.len() as f64 / pair.x.len().min(pair.y.len()) as f64;
            assert!((0.6..=0.8).contains(&measured), "seed {}: {}", seed, measured);
        }
    }

    #[test]
    fn tiny_overlap_is_a_generation_error() {
        let p = SynthParams {
            num_points: 10,
            overlap_ratio: 0.1,
            ..params(0)
        };
        assert!(matches!(synth_pair(&p), Err(Error::Generation(_))));
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(synth_pair(&SynthParams { overlap_ratio: 0.0, ..params(0) }).is_err());
        assert!(synth_pair(&SynthParams { noise_sigma: -1.0, ..params(0) }).is_err());
    }
}
