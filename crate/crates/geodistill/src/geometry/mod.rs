//! Cameras, 3D-to-2D projection with depth-occlusion filtering, multi-view
//! feature fusion onto points, and the frozen geometric descriptor.

mod descriptor;
mod knn;

pub use descriptor::{geometric_descriptor, DescriptorOutput, DESCRIPTOR_DIM};
pub use knn::KnnIndex;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::Mat;

/// Scene point cloud with optional ground-truth labels.
#[derive(Debug, Clone)]
pub struct PointCloud {
    pub positions: Vec<[f64; 3]>,
    pub gt_class: Option<Vec<u32>>,
    pub gt_instance: Option<Vec<u32>>,
}

impl PointCloud {
    pub fn new(positions: Vec<[f64; 3]>) -> Result<Self> {
        let cloud = PointCloud {
            positions,
            gt_class: None,
            gt_instance: None,
        };
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.positions.is_empty() {
            return Err(Error::Config("point cloud must contain at least one point".into()));
        }
        if !self
            .positions
            .iter()
            .all(|p| p.iter().all(|v| v.is_finite()))
        {
            return Err(Error::Geometry("non-finite point positions".into()));
        }
        for labels in [&self.gt_class, &self.gt_instance].into_iter().flatten() {
            if labels.len() != self.positions.len() {
                return Err(Error::dimension(
                    "PointCloud labels",
                    self.positions.len(),
                    labels.len(),
                ));
            }
        }
        Ok(())
    }

    pub fn point(&self, i: usize) -> Vector3<f64> {
        Vector3::from_column_slice(&self.positions[i])
    }
}

/// Pinhole camera pose and image geometry, without per-pixel payloads.
#[derive(Debug, Clone)]
pub struct CameraRig {
    pub intrinsics: Matrix3<f64>,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub width: usize,
    pub height: usize,
}

impl CameraRig {
    /// Orthonormality check on the rotation.
    pub fn validate(&self) -> Result<()> {
        let det = self.rotation.determinant();
        if (det - 1.0).abs() > 1e-9 {
            return Err(Error::Geometry(format!(
                "camera rotation determinant {det} is not 1"
            )));
        }
        let rtr = self.rotation.transpose() * self.rotation;
        let err = (rtr - Matrix3::identity()).abs().max();
        if err > 1e-8 {
            return Err(Error::Geometry(format!(
                "camera rotation is not orthonormal (RtR deviation {err})"
            )));
        }
        Ok(())
    }

    /// Camera-frame coordinates of a world point.
    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Pixel coordinates and projected depth: `d [u v 1]^T = K (R p + t)`.
    pub fn project_point(&self, p: &Vector3<f64>) -> (f64, f64, f64) {
        let hom = self.intrinsics * self.to_camera(p);
        let d = hom.z;
        (hom.x / d, hom.y / d, d)
    }

    /// Camera-frame point recovered from pixel coordinates and depth.
    pub fn unproject(&self, u: f64, v: f64, d: f64) -> Vector3<f64> {
        self.intrinsics
            .try_inverse()
            .expect("invertible intrinsics")
            * Vector3::new(u * d, v * d, d)
    }
}

/// One rendered view: camera, depth map and per-pixel feature map.
#[derive(Debug, Clone)]
pub struct CameraView {
    pub rig: CameraRig,
    /// Row-major `H x W` depth in meters; 0 encodes "no surface".
    pub depth: Vec<f64>,
    /// Row-major `H x W x C` features.
    pub features: Vec<f64>,
    /// Per-pixel feature validity; pixels dropped by occlusion corruption
    /// keep their depth but contribute no features.
    pub feature_valid: Vec<bool>,
    pub feature_dim: usize,
}

impl CameraView {
    pub fn depth_at(&self, px: usize, py: usize) -> f64 {
        self.depth[py * self.rig.width + px]
    }

    pub fn feature_at(&self, px: usize, py: usize) -> &[f64] {
        let i = (py * self.rig.width + px) * self.feature_dim;
        &self.features[i..i + self.feature_dim]
    }

    pub fn validate(&self) -> Result<()> {
        self.rig.validate()?;
        let n = self.rig.width * self.rig.height;
        if self.depth.len() != n
            || self.features.len() != n * self.feature_dim
            || self.feature_valid.len() != n
        {
            return Err(Error::dimension("CameraView buffers", n, self.depth.len()));
        }
        if self.depth.iter().any(|&d| d < 0.0 || !d.is_finite()) {
            return Err(Error::Geometry("negative or non-finite depth".into()));
        }
        Ok(())
    }
}

/// Per-(point, view) projection record.
#[derive(Debug, Clone, Copy)]
pub struct ProjEntry {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    pub valid: bool,
}

/// Projection of a whole cloud into one view.
#[derive(Debug, Clone)]
pub struct Projection {
    pub entries: Vec<ProjEntry>,
}

/// Project every point into a view and mark validity: in image bounds,
/// positive depth, and depth-consistent with the view's depth map at the
/// floored pixel within `tau_depth`.
pub fn project(cloud: &PointCloud, view: &CameraView, tau_depth: f64) -> Result<Projection> {
    if tau_depth <= 0.0 {
        return Err(Error::Config(format!("tau_depth must be positive, got {tau_depth}")));
    }
    view.rig.validate()?;
    let (w, h) = (view.rig.width as f64, view.rig.height as f64);
    let entries = cloud
        .positions
        .iter()
        .map(|p| {
            let (u, v, d) = view.rig.project_point(&Vector3::from_column_slice(p));
            let in_bounds = d > 0.0 && u >= 0.0 && u < w && v >= 0.0 && v < h;
            let valid = in_bounds && {
                let sensed = view.depth_at(u.floor() as usize, v.floor() as usize);
                (d - sensed).abs() < tau_depth
            };
            ProjEntry { u, v, depth: d, valid }
        })
        .collect();
    Ok(Projection { entries })
}

/// Average-pool per-view features onto points over their valid projections.
///
/// Points with zero feature hits receive the zero vector; `hit_count`
/// reports how many views contributed to each point.
pub fn fuse_views(
    cloud: &PointCloud,
    views: &[CameraView],
    projections: &[Projection],
) -> Result<(Mat, Vec<usize>)> {
    if views.len() != projections.len() {
        return Err(Error::dimension("fuse_views", views.len(), projections.len()));
    }
    let c = views.first().map_or(0, |v| v.feature_dim);
    if views.iter().any(|v| v.feature_dim != c) {
        return Err(Error::Config("views disagree on feature dimension".into()));
    }
    let n = cloud.len();
    let mut fused = Mat::zeros(n, c);
    let mut hits = vec![0usize; n];
    for (view, proj) in views.iter().zip(projections) {
        if proj.entries.len() != n {
            return Err(Error::dimension("fuse_views projection", n, proj.entries.len()));
        }
        for (i, e) in proj.entries.iter().enumerate() {
            if !e.valid {
                continue;
            }
            let (px, py) = (e.u.floor() as usize, e.v.floor() as usize);
            if !view.feature_valid[py * view.rig.width + px] {
                continue;
            }
            let feat = view.feature_at(px, py);
            for (o, &f) in fused.row_mut(i).iter_mut().zip(feat) {
                *o += f;
            }
            hits[i] += 1;
        }
    }
    for i in 0..n {
        if hits[i] > 0 {
            let inv = 1.0 / hits[i] as f64;
            for o in fused.row_mut(i) {
                *o *= inv;
            }
        }
    }
    Ok((fused, hits))
}

/// Z-buffer depth render: each pixel keeps the minimum projected depth
/// among points splatting onto it (square splat of the given pixel
/// radius); 0 where no point lands.
pub fn render_depth(cloud: &PointCloud, rig: &CameraRig, splat_radius_px: usize) -> Vec<f64> {
    render_depth_with_ids(cloud, rig, splat_radius_px).0
}

/// Like [`render_depth`] but also reports which point won each pixel.
pub fn render_depth_with_ids(
    cloud: &PointCloud,
    rig: &CameraRig,
    splat_radius_px: usize,
) -> (Vec<f64>, Vec<Option<usize>>) {
    let (w, h) = (rig.width, rig.height);
    let mut depth = vec![0.0f64; w * h];
    let mut ids = vec![None; w * h];
    let r = splat_radius_px as i64;
    for (i, p) in cloud.positions.iter().enumerate() {
        let (u, v, d) = rig.project_point(&Vector3::from_column_slice(p));
        if d <= 0.0 || !u.is_finite() || !v.is_finite() {
            continue;
        }
        let (px, py) = (u.floor() as i64, v.floor() as i64);
        for dy in -r..=r {
            for dx in -r..=r {
                let (x, y) = (px + dx, py + dy);
                if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                    continue;
                }
                let idx = y as usize * w + x as usize;
                if depth[idx] == 0.0 || d < depth[idx] {
                    depth[idx] = d;
                    ids[idx] = Some(i);
                }
            }
        }
    }
    (depth, ids)
}

/// Voxel-grid downsampling: within each voxel the point closest to the
/// voxel centroid survives, so ground-truth labels stay attached.
pub fn voxel_downsample(cloud: &PointCloud, voxel_size: f64) -> Result<PointCloud> {
    if voxel_size <= 0.0 {
        return Err(Error::Config("voxel size must be positive".into()));
    }
    use std::collections::BTreeMap;
    let key = |p: &[f64; 3]| {
        [
            (p[0] / voxel_size).floor() as i64,
            (p[1] / voxel_size).floor() as i64,
            (p[2] / voxel_size).floor() as i64,
        ]
    };
    let mut buckets: BTreeMap<[i64; 3], Vec<usize>> = BTreeMap::new();
    for (i, p) in cloud.positions.iter().enumerate() {
        buckets.entry(key(p)).or_default().push(i);
    }
    let mut keep = Vec::with_capacity(buckets.len());
    for members in buckets.values() {
        let centroid = members.iter().fold([0.0; 3], |mut acc, &i| {
            for (a, &v) in acc.iter_mut().zip(&cloud.positions[i]) {
                *a += v / members.len() as f64;
            }
            acc
        });
        let best = members
            .iter()
            .copied()
            .min_by(|&a, &b| {
                let da = dist2(&cloud.positions[a], &centroid);
                let db = dist2(&cloud.positions[b], &centroid);
                da.partial_cmp(&db).unwrap().then(a.cmp(&b))
            })
            .unwrap();
        keep.push(best);
    }
    keep.sort_unstable();
    Ok(PointCloud {
        positions: keep.iter().map(|&i| cloud.positions[i]).collect(),
        gt_class: cloud
            .gt_class
            .as_ref()
            .map(|l| keep.iter().map(|&i| l[i]).collect()),
        gt_instance: cloud
            .gt_instance
            .as_ref()
            .map(|l| keep.iter().map(|&i| l[i]).collect()),
    })
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
