//! Self-contained per-point input features: a rotation-reduced handcrafted
//! descriptor followed by a learned lift to the model width.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{knn_excluding_self, PointCloud};
use crate::weights::{BoundWeights, Linear, DESCRIPTOR_DIM};

/// Eigenvalues (descending) and eigenvectors (matching columns) of a
/// symmetric 3x3 matrix.
fn sorted_eigen(c: Matrix3<f64>) -> ([f64; 3], Matrix3<f64>) {
    let eig = SymmetricEigen::new(c);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals = order.map(|i| eig.eigenvalues[i]);
    let vecs = Matrix3::from_columns(&order.map(|i| eig.eigenvectors.column(i).into_owned()));
    (vals, vecs)
}

fn covariance<'a>(pts: impl Iterator<Item = &'a Vector3<f64>> + Clone) -> Matrix3<f64> {
    let n = pts.clone().count() as f64;
    let mean = pts.clone().sum::<Vector3<f64>>() / n;
    pts.map(|p| {
        let d = p - mean;
        d * d.transpose()
    })
    .sum::<Matrix3<f64>>()
        / n
}

/// Ten numbers per point: local covariance eigenvalues (descending), the
/// absolute cosines between the local normal and the global principal axes,
/// and mean/std/min/max distance to the `k_local` nearest neighbours.
pub fn handcrafted_descriptor(cloud: &PointCloud, k_local: usize) -> Result<Tensor<f64>> {
    if k_local < 4 {
        return Err(Error::InvalidArgument(format!("k_local = {} must be at least 4", k_local)));
    }
    let pts = cloud.points();
    let m = pts.len();
    if k_local >= m {
        return Err(Error::InvalidArgument(format!(
            "k_local = {} needs more than {} points",
            k_local, m
        )));
    }
    let nbrs = knn_excluding_self(&cloud.flat(), 3, k_local)?;
    let (_, axes) = sorted_eigen(covariance(pts.iter()));

    let mut data = Vec::with_capacity(m * DESCRIPTOR_DIM);
    for (i, nb) in nbrs.iter().enumerate() {
        let hood = std::iter::once(&pts[i]).chain(nb.iter().map(|&j| &pts[j]));
        let c = covariance(hood);
        let scale = c.trace();
        if scale > 0.0 {
            let (vals, vecs) = sorted_eigen(c);
            // Round-off below this level is noise on a rank-deficient hood.
            let floor = scale * 1e-12;
            data.extend(vals.iter().map(|&v| if v > floor { v } else { 0.0 }));
            let normal = vecs.column(2);
            data.extend((0..3).map(|a| normal.dot(&axes.column(a)).abs()));
        } else {
            data.extend([0.0; 6]);
        }
        let dist: Vec<f64> = nb.iter().map(|&j| (pts[j] - pts[i]).norm()).collect();
        let k = dist.len() as f64;
        let mean = dist.iter().sum::<f64>() / k;
        let std = (dist.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / k).sqrt();
        let min = dist.iter().copied().fold(f64::INFINITY, f64::min);
        let max = dist.iter().copied().fold(0.0, f64::max);
        data.extend([mean, std, min, max]);
    }
    Tensor::new(vec![m, DESCRIPTOR_DIM], data)
}

/// Zero-mean, unit-variance columns computed over the cloud. Constant
/// columns map to zero.
pub fn standardize_columns(desc: &Tensor<f64>) -> Tensor<f64> {
    let (m, c) = (desc.rows(), desc.cols());
    let mut out = desc.clone();
    for j in 0..c {
        let mean = (0..m).map(|i| desc.at(i, j)).sum::<f64>() / m as f64;
        let var = (0..m).map(|i| (desc.at(i, j) - mean).powi(2)).sum::<f64>() / m as f64;
        let inv = 1.0 / (var + 1e-12).sqrt();
        for i in 0..m {
            out.data_mut()[i * c + j] = (desc.at(i, j) - mean) * inv;
        }
    }
    out
}

/// Bound projection parameters.
#[derive(Debug, Clone, Copy)]
pub struct ProjectionWeights {
    pub linear: Linear,
}

impl ProjectionWeights {
    pub fn bind(w: &BoundWeights) -> Result<Self> {
        Ok(ProjectionWeights { linear: w.linear("proj")? })
    }
}

/// `relu(instance_norm(desc · Wᵀ + b))`, giving an `M x d` feature matrix.
pub fn project_features<T: Real>(tape: &mut Tape<T>, desc: Var, w: &ProjectionWeights) -> Result<Var> {
    let z = w.linear.apply(tape, desc)?;
    let z = tape.instance_norm(z)?;
    tape.relu(z)
}

/// Descriptor, standardized and placed on the tape as a constant.
pub fn descriptor_input<T: Real>(tape: &mut Tape<T>, desc: &Tensor<f64>) -> Var {
    tape.constant(standardize_columns(desc).cast())
}
