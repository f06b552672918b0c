//! Frozen hand-crafted geometric descriptor.
//!
//! Per point: unit normal (3), eigenvalue features linearity/planarity/
//! scattering (3), surface variation curvature (1), height above the
//! cloud minimum z (1), and standardized log local density (1). 9 columns
//! total; never recorded on the tape.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::Mat;

use super::{KnnIndex, PointCloud};

pub const DESCRIPTOR_DIM: usize = 9;

#[derive(Debug, Clone)]
pub struct DescriptorOutput {
    /// `N x 9` feature matrix.
    pub features: Mat,
    /// Oriented unit normals.
    pub normals: Vec<[f64; 3]>,
    /// Surface variation `lambda3 / (lambda1 + lambda2 + lambda3)` per point.
    pub curvature: Vec<f64>,
}

/// Compute the descriptor with `k` neighbors per point. Normals are
/// oriented toward `viewpoint` when given, else into the +z hemisphere.
pub fn geometric_descriptor(
    cloud: &PointCloud,
    k: usize,
    viewpoint: Option<[f64; 3]>,
) -> Result<DescriptorOutput> {
    if k < 4 {
        return Err(Error::Config(format!("descriptor needs k >= 4, got {k}")));
    }
    let n = cloud.len();
    if n <= k {
        return Err(Error::Config(format!(
            "descriptor needs more points than neighbors: N={n}, k={k}"
        )));
    }
    let index = KnnIndex::build(&cloud.positions, k);
    let z_min = cloud
        .positions
        .iter()
        .map(|p| p[2])
        .fold(f64::INFINITY, f64::min);

    let mut features = Mat::zeros(n, DESCRIPTOR_DIM);
    let mut normals = vec![[0.0, 0.0, 1.0]; n];
    let mut curvature = vec![0.0; n];
    let mut log_density = vec![0.0; n];

    for i in 0..n {
        let neigh = index.neighbors(i, k);
        let p = cloud.point(i);

        // covariance over the point plus its k neighbors
        let mut mean = p;
        for &j in &neigh {
            mean += cloud.point(j);
        }
        mean /= (neigh.len() + 1) as f64;
        let mut cov = Matrix3::zeros();
        for q in std::iter::once(p).chain(neigh.iter().map(|&j| cloud.point(j))) {
            let d = q - mean;
            cov += d * d.transpose();
        }
        cov /= (neigh.len() + 1) as f64;

        let eig = cov.symmetric_eigen();
        // sort descending
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
        let l1 = eig.eigenvalues[order[0]].max(0.0);
        let l2 = eig.eigenvalues[order[1]].max(0.0);
        let l3 = eig.eigenvalues[order[2]].max(0.0);
        let mut normal: Vector3<f64> = eig.eigenvectors.column(order[2]).into();
        if normal.norm() > 0.0 {
            normal /= normal.norm();
        } else {
            normal = Vector3::z();
        }

        // orientation
        let flip = match viewpoint {
            Some(vp) => normal.dot(&(Vector3::from_column_slice(&vp) - p)) < 0.0,
            None => {
                normal.z < 0.0
                    || (normal.z == 0.0 && (normal.y < 0.0 || (normal.y == 0.0 && normal.x < 0.0)))
            }
        };
        if flip {
            normal = -normal;
        }

        let (linearity, planarity, scattering) = if l1 > 1e-18 {
            ((l1 - l2) / l1, (l2 - l3) / l1, l3 / l1)
        } else {
            (0.0, 0.0, 0.0)
        };
        let sum = l1 + l2 + l3;
        let curv = if sum > 1e-18 { l3 / sum } else { 0.0 };

        let r_k = neigh
            .last()
            .map(|&j| (cloud.point(j) - p).norm())
            .unwrap_or(0.0)
            .max(1e-9);
        log_density[i] = (k as f64 / r_k.powi(3)).ln();

        normals[i] = [normal.x, normal.y, normal.z];
        curvature[i] = curv;
        let row = features.row_mut(i);
        row[0] = normal.x;
        row[1] = normal.y;
        row[2] = normal.z;
        row[3] = linearity;
        row[4] = planarity;
        row[5] = scattering;
        row[6] = curv;
        row[7] = cloud.positions[i][2] - z_min;
    }

    // standardize log density across the cloud
    let mean = log_density.iter().sum::<f64>() / n as f64;
    let var = log_density.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let std = var.sqrt().max(1e-9);
    for i in 0..n {
        features.set(i, 8, (log_density[i] - mean) / std);
    }

    debug_assert!(features.is_finite());
    Ok(DescriptorOutput {
        features,
        normals,
        curvature,
    })
}
