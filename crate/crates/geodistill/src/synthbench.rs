//! Procedural scene generator and corruption models reproducing, in
//! controlled form, the 2D failure modes the pipeline targets: boundary
//! bleed, per-view instance dropout, and viewpoint-dependent feature
//! drift.

use nalgebra::{Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distill::InstanceMaskSet;
use crate::error::{Error, Result};
use crate::geometry::{render_depth_with_ids, CameraRig, CameraView, PointCloud, Projection};
use crate::Mat;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Plane,
    Box,
    Sphere,
    Cylinder,
}

/// One instance: an axis-aligned primitive with a center and per-axis
/// scale (radius for spheres/cylinders, half-extents for boxes, extents
/// for planes).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrimitiveSpec {
    pub shape: Shape,
    pub center: [f64; 3],
    pub scale: [f64; 3],
    pub class_id: u32,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CorruptionSpec {
    /// Boundary bleed radius in meters; 0 disables.
    pub bleed_radius: f64,
    /// Fraction of views in which each instance's features are dropped.
    pub dropout_frac: f64,
    /// Per-(view, class) additive Gaussian drift; 0 disables.
    pub drift_sigma: f64,
}

impl CorruptionSpec {
    pub fn none() -> Self {
        CorruptionSpec {
            bleed_radius: 0.0,
            dropout_frac: 0.0,
            drift_sigma: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneSpec {
    pub primitives: Vec<PrimitiveSpec>,
    /// Total surface samples before voxel downsampling, split across
    /// instances proportionally to surface area.
    pub total_points: usize,
    pub camera_count: usize,
    pub image_size: usize,
    pub feature_dim: usize,
    pub n_classes: usize,
    pub voxel_size: f64,
    pub corruption: CorruptionSpec,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.primitives.is_empty() {
            return Err(Error::Config("scene has no primitives".into()));
        }
        for (i, p) in self.primitives.iter().enumerate() {
            if p.scale.iter().any(|&s| s <= 0.0) {
                return Err(Error::Config(format!("primitive {i} has degenerate scale")));
            }
            if p.class_id as usize >= self.n_classes {
                return Err(Error::Config(format!("primitive {i} class out of range")));
            }
        }
        if self.n_classes > self.feature_dim {
            return Err(Error::Config(
                "prototype orthogonalization needs n_classes <= feature_dim".into(),
            ));
        }
        Ok(())
    }

    /// Benchmark-style scene: a floor plane plus floating spheres,
    /// cylinders and boxes whose classes are geometrically separable.
    pub fn benchmark(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ce9e5);
        let mut primitives = vec![PrimitiveSpec {
            shape: Shape::Plane,
            center: [0.0, 0.0, 0.0],
            scale: [3.6, 3.6, 1.0],
            class_id: 0,
        }];
        // at least two instances of each object class
        let mut kinds = vec![
            (Shape::Sphere, 1u32),
            (Shape::Sphere, 1),
            (Shape::Cylinder, 2),
            (Shape::Cylinder, 2),
            (Shape::Box, 3),
            (Shape::Box, 3),
        ];
        let extra = rng.gen_range(1..=4usize);
        for _ in 0..extra {
            kinds.push(*[(Shape::Sphere, 1), (Shape::Cylinder, 2), (Shape::Box, 3)]
                .choose(&mut rng)
                .unwrap());
        }
        let mut centers: Vec<[f64; 2]> = Vec::new();
        for (shape, class_id) in kinds {
            // rejection-sample xy so objects stay apart
            let mut xy = [0.0f64; 2];
            for _ in 0..200 {
                xy = [rng.gen_range(-1.4..1.4), rng.gen_range(-1.4..1.4)];
                if centers
                    .iter()
                    .all(|c| (c[0] - xy[0]).powi(2) + (c[1] - xy[1]).powi(2) > 1.1)
                {
                    break;
                }
            }
            centers.push(xy);
            let z = rng.gen_range(0.6..1.2);
            let scale = match shape {
                Shape::Sphere => {
                    let r = rng.gen_range(0.25..0.35);
                    [r, r, r]
                }
                Shape::Cylinder => {
                    let r = rng.gen_range(0.25..0.35);
                    [r, r, rng.gen_range(0.35..0.5)]
                }
                Shape::Box => [
                    rng.gen_range(0.25..0.4),
                    rng.gen_range(0.25..0.4),
                    rng.gen_range(0.25..0.4),
                ],
                Shape::Plane => unreachable!(),
            };
            primitives.push(PrimitiveSpec {
                shape,
                center: [xy[0], xy[1], z],
                scale,
                class_id,
            });
        }
        SceneSpec {
            primitives,
            total_points: 30_000,
            camera_count: 20,
            image_size: 128,
            feature_dim: 16,
            n_classes: 4,
            voxel_size: 0.02,
            corruption: CorruptionSpec::none(),
        }
    }
}

/// Generated scene: labeled cloud, instance masks, class prototypes.
#[derive(Debug, Clone)]
pub struct Scene {
    pub cloud: PointCloud,
    pub masks: InstanceMaskSet,
    /// `n_classes x C` mutually orthogonal unit prototypes; these double
    /// as the text-embedding table at inference time.
    pub prototypes: Mat,
    pub n_classes: usize,
}

fn surface_area(p: &PrimitiveSpec) -> f64 {
    let s = p.scale;
    match p.shape {
        Shape::Plane => s[0] * s[1],
        Shape::Box => 8.0 * (s[0] * s[1] + s[1] * s[2] + s[0] * s[2]),
        Shape::Sphere => 4.0 * std::f64::consts::PI * s[0] * s[0],
        Shape::Cylinder => 2.0 * std::f64::consts::PI * s[0] * s[2] * 2.0,
    }
}

fn sample_surface(p: &PrimitiveSpec, rng: &mut impl Rng) -> [f64; 3] {
    let c = p.center;
    let s = p.scale;
    match p.shape {
        Shape::Plane => [
            c[0] + rng.gen_range(-0.5..0.5) * s[0],
            c[1] + rng.gen_range(-0.5..0.5) * s[1],
            c[2],
        ],
        Shape::Sphere => {
            // uniform direction via Gaussian
            let v = Vector3::new(
                gaussian(rng),
                gaussian(rng),
                gaussian(rng),
            );
            let v = if v.norm() > 1e-12 { v / v.norm() } else { Vector3::z() };
            [c[0] + s[0] * v.x, c[1] + s[0] * v.y, c[2] + s[0] * v.z]
        }
        Shape::Cylinder => {
            let theta = rng.gen_range(0.0..std::f64::consts::TAU);
            [
                c[0] + s[0] * theta.cos(),
                c[1] + s[0] * theta.sin(),
                c[2] + rng.gen_range(-1.0..1.0) * s[2],
            ]
        }
        Shape::Box => {
            // pick a face proportionally to its area
            let areas = [
                s[1] * s[2], // +-x
                s[0] * s[2], // +-y
                s[0] * s[1], // +-z
            ];
            let total: f64 = areas.iter().sum::<f64>() * 2.0;
            let mut pick = rng.gen_range(0.0..total);
            let mut axis = 0;
            let mut sign = 1.0;
            'outer: for a in 0..3 {
                for sg in [1.0, -1.0] {
                    if pick < areas[a] {
                        axis = a;
                        sign = sg;
                        break 'outer;
                    }
                    pick -= areas[a];
                }
            }
            let mut q = [
                rng.gen_range(-1.0..1.0) * s[0],
                rng.gen_range(-1.0..1.0) * s[1],
                rng.gen_range(-1.0..1.0) * s[2],
            ];
            q[axis] = sign * s[axis];
            [c[0] + q[0], c[1] + q[1], c[2] + q[2]]
        }
    }
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Mutually orthogonal unit prototypes via Gram-Schmidt on Gaussian rows.
pub fn make_prototypes(n_classes: usize, dim: usize, rng: &mut impl Rng) -> Result<Mat> {
    if n_classes > dim {
        return Err(Error::Config(format!(
            "cannot build {n_classes} orthogonal prototypes in dimension {dim}"
        )));
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    while rows.len() < n_classes {
        let mut v: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
        for prev in &rows {
            let dot: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
            for (x, p) in v.iter_mut().zip(prev) {
                *x -= dot * p;
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue; // degenerate draw, resample
        }
        for x in v.iter_mut() {
            *x /= norm;
        }
        rows.push(v);
    }
    Mat::from_rows(&rows)
}

/// Sample surface points per primitive, voxel-downsample, and attach
/// ground-truth class and instance labels plus masks and prototypes.
pub fn generate(spec: &SceneSpec, seed: u64) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // prototypes play the role of text embeddings: one fixed direction
    // per class, shared across scenes, independent of the scene seed
    let mut proto_rng = ChaCha8Rng::seed_from_u64(0x9e0704);
    let prototypes = make_prototypes(spec.n_classes, spec.feature_dim, &mut proto_rng)?;

    let areas: Vec<f64> = spec.primitives.iter().map(surface_area).collect();
    let total_area: f64 = areas.iter().sum();
    let mut positions = Vec::new();
    let mut gt_class = Vec::new();
    let mut gt_instance = Vec::new();
    for (i, prim) in spec.primitives.iter().enumerate() {
        let n = ((spec.total_points as f64 * areas[i] / total_area).round() as usize).max(16);
        for _ in 0..n {
            positions.push(sample_surface(prim, &mut rng));
            gt_class.push(prim.class_id);
            gt_instance.push(i as u32);
        }
    }
    let mut cloud = PointCloud::new(positions)?;
    cloud.gt_class = Some(gt_class);
    cloud.gt_instance = Some(gt_instance);
    let cloud = crate::geometry::voxel_downsample(&cloud, spec.voxel_size)?;
    let masks = InstanceMaskSet::from_instance_labels(cloud.gt_instance.as_ref().unwrap())?;
    Ok(Scene {
        cloud,
        masks,
        prototypes,
        n_classes: spec.n_classes,
    })
}

/// Rendered views plus per-pixel bleed-corruption flags.
#[derive(Debug, Clone)]
pub struct RenderedViews {
    pub views: Vec<CameraView>,
    /// Per view, `H*W` flags marking pixels whose feature was replaced by
    /// a different class's prototype (boundary bleed).
    pub bleed_flags: Vec<Vec<bool>>,
}

fn look_at(eye: Vector3<f64>, target: Vector3<f64>) -> (Matrix3<f64>, Vector3<f64>) {
    let forward = (target - eye).normalize();
    let up = if forward.z.abs() > 0.99 {
        Vector3::x()
    } else {
        Vector3::z()
    };
    let right = forward.cross(&up).normalize();
    let down = forward.cross(&right);
    let rotation = Matrix3::from_rows(&[
        right.transpose(),
        down.transpose(),
        forward.transpose(),
    ]);
    let translation = -rotation * eye;
    (rotation, translation)
}

/// Camera centers on the upper hemisphere of a bounding sphere, looking
/// at the cloud centroid.
pub fn camera_ring(cloud: &PointCloud, count: usize, image_size: usize) -> Vec<CameraRig> {
    let n = cloud.len() as f64;
    let centroid = cloud
        .positions
        .iter()
        .fold(Vector3::zeros(), |acc, p| acc + Vector3::from_column_slice(p))
        / n;
    let radius = cloud
        .positions
        .iter()
        .map(|p| (Vector3::from_column_slice(p) - centroid).norm())
        .fold(0.0f64, f64::max);
    let dist = 2.5 * radius.max(1.0);
    let f = 0.5 * image_size as f64 / (30.0f64.to_radians()).tan();
    let intrinsics = Matrix3::new(
        f,
        0.0,
        image_size as f64 / 2.0,
        0.0,
        f,
        image_size as f64 / 2.0,
        0.0,
        0.0,
        1.0,
    );
    (0..count)
        .map(|i| {
            // golden-angle spiral over the upper hemisphere
            let t = (i as f64 + 0.5) / count as f64;
            let z = 0.25 + 0.7 * t;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = i as f64 * std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
            let eye = centroid + dist * Vector3::new(r * phi.cos(), r * phi.sin(), z);
            let (rotation, translation) = look_at(eye, centroid);
            CameraRig {
                intrinsics,
                rotation,
                translation,
                width: image_size,
                height: image_size,
            }
        })
        .collect()
}

/// Centroid of the camera centers; used to orient descriptor normals.
pub fn viewpoint_centroid(rigs: &[CameraRig]) -> [f64; 3] {
    let mut acc = Vector3::zeros();
    for rig in rigs {
        // eye = -R^T t
        acc += -(rig.rotation.transpose() * rig.translation);
    }
    acc /= rigs.len().max(1) as f64;
    [acc.x, acc.y, acc.z]
}

/// Render depth and prototype feature maps for every camera, then apply
/// the three corruptions: boundary bleed, per-view instance dropout, and
/// per-(view, class) feature drift.
pub fn render_views(scene: &Scene, spec: &SceneSpec, seed: u64) -> Result<RenderedViews> {
    if spec.camera_count == 0 {
        return Err(Error::Config("camera_count must be at least 1".into()));
    }
    let rigs = camera_ring(&scene.cloud, spec.camera_count, spec.image_size);
    let gt_class = scene.cloud.gt_class.as_ref().ok_or_else(|| {
        Error::Config("render_views needs ground-truth class labels".into())
    })?;
    let gt_instance = scene.cloud.gt_instance.as_ref().ok_or_else(|| {
        Error::Config("render_views needs ground-truth instance labels".into())
    })?;
    let n_instances = scene.masks.len();
    let (w, h, c) = (spec.image_size, spec.image_size, spec.feature_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e4d);

    // per-instance dropout view subsets
    let n_dropped = (spec.corruption.dropout_frac * spec.camera_count as f64).floor() as usize;
    let dropped: Vec<Vec<bool>> = (0..n_instances)
        .map(|_| {
            let mut flags = vec![false; spec.camera_count];
            let mut ids: Vec<usize> = (0..spec.camera_count).collect();
            ids.shuffle(&mut rng);
            for &v in &ids[..n_dropped.min(spec.camera_count)] {
                flags[v] = true;
            }
            flags
        })
        .collect();

    let mut views = Vec::with_capacity(spec.camera_count);
    let mut bleed_flags = Vec::with_capacity(spec.camera_count);
    for (view_idx, rig) in rigs.iter().enumerate() {
        let (depth, ids) = render_depth_with_ids(&scene.cloud, rig, 1);
        let instance_at: Vec<Option<u32>> =
            ids.iter().map(|p| p.map(|i| gt_instance[i])).collect();

        // base features: the owning instance's class prototype
        let mut pixel_class: Vec<Option<u32>> = ids
            .iter()
            .map(|p| p.map(|i| gt_class[i]))
            .collect();
        let mut bleed = vec![false; w * h];

        // boundary bleed
        if spec.corruption.bleed_radius > 0.0 {
            let focal = rig.intrinsics[(0, 0)];
            let mut stamped: Vec<Option<u32>> = vec![None; w * h];
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let Some(inst) = instance_at[i] else { continue };
                    // silhouette pixel: a 4-neighbor belongs to another,
                    // strictly farther instance. Bleed is directional the
                    // way low-resolution 2D feature maps smear: background
                    // context invades foreground boundaries, not the
                    // other way around.
                    let mut other: Option<u32> = None;
                    let mut other_depth = depth[i];
                    for (dx, dy) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                        let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                        if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                            continue;
                        }
                        let j = ny as usize * w + nx as usize;
                        if let Some(oi) = instance_at[j] {
                            if oi != inst && depth[j] > other_depth {
                                other = Some(oi);
                                other_depth = depth[j];
                            }
                        }
                    }
                    let Some(other) = other else { continue };
                    let r_px =
                        ((spec.corruption.bleed_radius * focal / depth[i].max(0.1)).ceil() as i64)
                            .max(1);
                    for dy in -r_px..=r_px {
                        for dx in -r_px..=r_px {
                            let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                            if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                                continue;
                            }
                            let j = ny as usize * w + nx as usize;
                            if instance_at[j].is_some() && stamped[j].is_none() {
                                stamped[j] = Some(other);
                            }
                        }
                    }
                }
            }
            for i in 0..w * h {
                let (Some(own_class), Some(other_inst)) = (pixel_class[i], stamped[i]) else {
                    continue;
                };
                if rng.gen_bool(0.5) {
                    let other_class = gt_class[scene
                        .masks
                        .masks[other_inst as usize]
                        .iter()
                        .position(|&b| b)
                        .expect("nonempty mask")];
                    if other_class != own_class {
                        pixel_class[i] = Some(other_class);
                        bleed[i] = true;
                    }
                }
            }
        }

        // per-(view, class) drift offsets
        let drifted: Vec<Vec<f64>> = (0..scene.n_classes)
            .map(|cls| {
                let mut v: Vec<f64> = scene.prototypes.row(cls).to_vec();
                if spec.corruption.drift_sigma > 0.0 {
                    for x in v.iter_mut() {
                        *x += spec.corruption.drift_sigma * gaussian(&mut rng);
                    }
                    let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if norm > 1e-12 {
                        for x in v.iter_mut() {
                            *x /= norm;
                        }
                    }
                }
                v
            })
            .collect();

        let mut features = vec![0.0f64; w * h * c];
        let mut feature_valid = vec![false; w * h];
        for i in 0..w * h {
            let Some(cls) = pixel_class[i] else { continue };
            let inst = instance_at[i].unwrap() as usize;
            if dropped[inst][view_idx] {
                continue; // depth stays, features dropped
            }
            features[i * c..(i + 1) * c].copy_from_slice(&drifted[cls as usize]);
            feature_valid[i] = true;
        }

        views.push(CameraView {
            rig: rig.clone(),
            depth,
            features,
            feature_valid,
            feature_dim: c,
        });
        bleed_flags.push(bleed);
    }
    Ok(RenderedViews { views, bleed_flags })
}

/// Propagate per-pixel bleed flags to points: the fraction of a point's
/// contributing hits that sampled a corrupted pixel, and a boolean flag
/// at the given threshold.
pub fn point_corruption(
    views: &[CameraView],
    projections: &[Projection],
    bleed_flags: &[Vec<bool>],
    n_points: usize,
    frac_threshold: f64,
) -> (Vec<f64>, Vec<bool>) {
    let mut hits = vec![0usize; n_points];
    let mut corrupt = vec![0usize; n_points];
    for ((view, proj), flags) in views.iter().zip(projections).zip(bleed_flags) {
        for (i, e) in proj.entries.iter().enumerate() {
            if !e.valid {
                continue;
            }
            let idx = e.v.floor() as usize * view.rig.width + e.u.floor() as usize;
            if !view.feature_valid[idx] {
                continue;
            }
            hits[i] += 1;
            if flags[idx] {
                corrupt[i] += 1;
            }
        }
    }
    let frac: Vec<f64> = (0..n_points)
        .map(|i| {
            if hits[i] == 0 {
                0.0
            } else {
                corrupt[i] as f64 / hits[i] as f64
            }
        })
        .collect();
    let flagged = frac.iter().map(|&f| f >= frac_threshold).collect();
    (frac, flagged)
}
