//! On-disk formats: ASCII PLY clouds, raw little-endian f32 matrices with
//! JSON sidecars, scene bundles, and content-hashed manifests.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write as _};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{CameraRig, CameraView, PointCloud};
use crate::inference::TextEmbeddingTable;
use crate::synthbench::{RenderedViews, Scene};
use crate::Mat;

// ---------------------------------------------------------------- PLY

/// ASCII PLY with x, y, z and, when labels are present, uint class and
/// instance properties.
pub fn write_ply(path: &Path, cloud: &PointCloud) -> Result<()> {
    cloud.validate()?;
    let mut w = BufWriter::new(fs::File::create(path)?);
    let has_class = cloud.gt_class.is_some();
    let has_instance = cloud.gt_instance.is_some();
    writeln!(w, "ply")?;
    writeln!(w, "format ascii 1.0")?;
    writeln!(w, "element vertex {}", cloud.len())?;
    writeln!(w, "property float x")?;
    writeln!(w, "property float y")?;
    writeln!(w, "property float z")?;
    if has_class {
        writeln!(w, "property uint class")?;
    }
    if has_instance {
        writeln!(w, "property uint instance")?;
    }
    writeln!(w, "end_header")?;
    for i in 0..cloud.len() {
        let p = cloud.positions[i];
        write!(w, "{} {} {}", p[0], p[1], p[2])?;
        if let Some(c) = &cloud.gt_class {
            write!(w, " {}", c[i])?;
        }
        if let Some(inst) = &cloud.gt_instance {
            write!(w, " {}", inst[i])?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_ply(path: &Path) -> Result<PointCloud> {
    let file = fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let mut next = || -> Result<String> {
        lines
            .next()
            .ok_or_else(|| Error::Format("unexpected end of PLY header".into()))?
            .map_err(Error::from)
    };
    if next()?.trim() != "ply" {
        return Err(Error::Format("missing 'ply' magic".into()));
    }
    if next()?.trim() != "format ascii 1.0" {
        return Err(Error::Format("only ascii 1.0 PLY is supported".into()));
    }
    let mut n_vertices: Option<usize> = None;
    let mut properties: Vec<String> = Vec::new();
    loop {
        let line = next()?;
        let line = line.trim();
        if line == "end_header" {
            break;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["comment", ..] => {}
            ["element", "vertex", n] => {
                n_vertices = Some(n.parse().map_err(|_| {
                    Error::Format(format!("bad vertex count '{n}'"))
                })?);
            }
            ["element", other, _] => {
                return Err(Error::Format(format!("unsupported element '{other}'")));
            }
            ["property", _ty, name] => properties.push((*name).to_string()),
            _ => return Err(Error::Format(format!("bad header line '{line}'"))),
        }
    }
    let n = n_vertices.ok_or_else(|| Error::Format("no vertex element".into()))?;
    let col = |name: &str| properties.iter().position(|p| p == name);
    let (xi, yi, zi) = match (col("x"), col("y"), col("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err(Error::Format("PLY lacks x/y/z properties".into())),
    };
    let ci = col("class");
    let ii = col("instance");

    let mut positions = Vec::with_capacity(n);
    let mut classes = ci.map(|_| Vec::with_capacity(n));
    let mut instances = ii.map(|_| Vec::with_capacity(n));
    for _ in 0..n {
        let line = next()?;
        let vals: Vec<&str> = line.split_whitespace().collect();
        if vals.len() != properties.len() {
            return Err(Error::Format(format!(
                "vertex row has {} fields, header declares {}",
                vals.len(),
                properties.len()
            )));
        }
        let f = |i: usize| -> Result<f64> {
            vals[i]
                .parse()
                .map_err(|_| Error::Format(format!("bad float '{}'", vals[i])))
        };
        let u = |i: usize| -> Result<u32> {
            vals[i]
                .parse()
                .map_err(|_| Error::Format(format!("bad uint '{}'", vals[i])))
        };
        positions.push([f(xi)?, f(yi)?, f(zi)?]);
        if let (Some(c), Some(idx)) = (&mut classes, ci) {
            c.push(u(idx)?);
        }
        if let (Some(v), Some(idx)) = (&mut instances, ii) {
            v.push(u(idx)?);
        }
    }
    let mut cloud = PointCloud::new(positions)?;
    cloud.gt_class = classes;
    cloud.gt_instance = instances;
    Ok(cloud)
}

// ------------------------------------------------------- raw matrices

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatrixSidecar {
    pub rows: usize,
    pub cols: usize,
    pub role: String,
}

fn sidecar_path(bin: &Path) -> PathBuf {
    let mut s = bin.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Write a matrix as raw little-endian f32 plus a `<path>.json` sidecar.
pub fn write_matrix_f32(path: &Path, m: &Mat, role: &str) -> Result<()> {
    let mut bytes = Vec::with_capacity(m.data().len() * 4);
    for &v in m.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes)?;
    let sidecar = MatrixSidecar {
        rows: m.rows(),
        cols: m.cols(),
        role: role.to_string(),
    };
    fs::write(sidecar_path(path), serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(())
}

pub fn read_matrix_f32(path: &Path) -> Result<(Mat, MatrixSidecar)> {
    let sidecar: MatrixSidecar = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
    let bytes = fs::read(path)?;
    let expect = sidecar.rows * sidecar.cols * 4;
    if bytes.len() != expect {
        return Err(Error::Format(format!(
            "{}: {} bytes on disk, sidecar implies {expect}",
            path.display(),
            bytes.len()
        )));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok((Mat::from_vec(sidecar.rows, sidecar.cols, data)?, sidecar))
}

// ----------------------------------------------------------- cameras

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraJson {
    pub intrinsics: [[f64; 3]; 3],
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub width: usize,
    pub height: usize,
}

impl From<&CameraRig> for CameraJson {
    fn from(rig: &CameraRig) -> Self {
        let m3 = |m: &Matrix3<f64>| {
            [
                [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
                [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
                [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
            ]
        };
        CameraJson {
            intrinsics: m3(&rig.intrinsics),
            rotation: m3(&rig.rotation),
            translation: [rig.translation.x, rig.translation.y, rig.translation.z],
            width: rig.width,
            height: rig.height,
        }
    }
}

impl CameraJson {
    pub fn to_rig(&self) -> CameraRig {
        let m3 = |m: &[[f64; 3]; 3]| {
            Matrix3::new(
                m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
            )
        };
        CameraRig {
            intrinsics: m3(&self.intrinsics),
            rotation: m3(&self.rotation),
            translation: Vector3::from_column_slice(&self.translation),
            width: self.width,
            height: self.height,
        }
    }
}

// ------------------------------------------------------ scene bundle

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneMeta {
    pub n_points: usize,
    pub n_views: usize,
    pub feature_dim: usize,
    pub n_classes: usize,
    pub image_size: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorruptionRecord {
    /// Per-point fraction of feature hits that sampled a bleed-corrupted
    /// pixel.
    pub corrupted_frac: Vec<f64>,
}

/// Everything `gen` writes: labeled cloud, per-view depth/feature maps
/// with cameras, instance masks, class prototypes, and per-point
/// corruption bookkeeping.
pub struct SceneBundle {
    pub scene: Scene,
    pub views: Vec<CameraView>,
    pub corruption: CorruptionRecord,
}

/// Prototype rows exposed as the inference-time text-embedding table.
pub fn prototype_table(prototypes: &Mat) -> TextEmbeddingTable {
    TextEmbeddingTable {
        labels: (0..prototypes.rows()).map(|i| format!("class{i}")).collect(),
        embeddings: (0..prototypes.rows())
            .map(|i| prototypes.row(i).to_vec())
            .collect(),
    }
}

pub fn save_scene_bundle(
    dir: &Path,
    scene: &Scene,
    rendered: &RenderedViews,
    corruption: &CorruptionRecord,
) -> Result<()> {
    fs::create_dir_all(dir.join("views"))?;
    write_ply(&dir.join("cloud.ply"), &scene.cloud)?;
    let meta = SceneMeta {
        n_points: scene.cloud.len(),
        n_views: rendered.views.len(),
        feature_dim: rendered.views.first().map_or(0, |v| v.feature_dim),
        n_classes: scene.n_classes,
        image_size: rendered.views.first().map_or(0, |v| v.rig.width),
    };
    fs::write(dir.join("scene.json"), serde_json::to_vec_pretty(&meta)?)?;
    fs::write(
        dir.join("prototypes.json"),
        serde_json::to_vec_pretty(&prototype_table(&scene.prototypes))?,
    )?;
    let masks: Vec<Vec<usize>> = scene
        .masks
        .masks
        .iter()
        .map(|m| m.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect())
        .collect();
    fs::write(dir.join("masks.json"), serde_json::to_vec_pretty(&masks)?)?;
    fs::write(
        dir.join("corruption.json"),
        serde_json::to_vec_pretty(corruption)?,
    )?;
    for (i, view) in rendered.views.iter().enumerate() {
        let stem = dir.join("views").join(format!("view_{i:03}"));
        let camera: CameraJson = (&view.rig).into();
        fs::write(
            stem.with_extension("camera.json"),
            serde_json::to_vec_pretty(&camera)?,
        )?;
        let (w, h, c) = (view.rig.width, view.rig.height, view.feature_dim);
        let depth = Mat::from_vec(h, w, view.depth.clone())?;
        write_matrix_f32(&stem.with_extension("depth.bin"), &depth, "depth")?;
        let feats = Mat::from_vec(w * h, c, view.features.clone())?;
        write_matrix_f32(&stem.with_extension("feat.bin"), &feats, "features")?;
        let valid = Mat::from_vec(
            h,
            w,
            view.feature_valid.iter().map(|&b| b as u8 as f64).collect(),
        )?;
        write_matrix_f32(&stem.with_extension("valid.bin"), &valid, "feature_valid")?;
    }
    Ok(())
}

pub fn load_scene_bundle(dir: &Path) -> Result<SceneBundle> {
    let meta: SceneMeta = serde_json::from_slice(&fs::read(dir.join("scene.json"))?)?;
    let cloud = read_ply(&dir.join("cloud.ply"))?;
    if cloud.len() != meta.n_points {
        return Err(Error::Format(format!(
            "cloud has {} points, scene.json says {}",
            cloud.len(),
            meta.n_points
        )));
    }
    let table: TextEmbeddingTable = serde_json::from_slice(&fs::read(dir.join("prototypes.json"))?)?;
    table.validate()?;
    let prototypes = Mat::from_rows(&table.embeddings)?;
    let mask_indices: Vec<Vec<usize>> = serde_json::from_slice(&fs::read(dir.join("masks.json"))?)?;
    let masks = crate::distill::InstanceMaskSet::new(
        mask_indices
            .iter()
            .map(|idx| {
                let mut m = vec![false; cloud.len()];
                for &i in idx {
                    m[i] = true;
                }
                m
            })
            .collect(),
    )?;
    let corruption: CorruptionRecord =
        serde_json::from_slice(&fs::read(dir.join("corruption.json"))?)?;

    let mut views = Vec::with_capacity(meta.n_views);
    for i in 0..meta.n_views {
        let stem = dir.join("views").join(format!("view_{i:03}"));
        let camera: CameraJson =
            serde_json::from_slice(&fs::read(stem.with_extension("camera.json"))?)?;
        let rig = camera.to_rig();
        let (depth, _) = read_matrix_f32(&stem.with_extension("depth.bin"))?;
        let (feats, _) = read_matrix_f32(&stem.with_extension("feat.bin"))?;
        let (valid, _) = read_matrix_f32(&stem.with_extension("valid.bin"))?;
        let view = CameraView {
            rig,
            depth: depth.data().to_vec(),
            features: feats.data().to_vec(),
            feature_valid: valid.data().iter().map(|&v| v != 0.0).collect(),
            feature_dim: feats.cols(),
        };
        view.validate()?;
        views.push(view);
    }
    let scene = Scene {
        cloud,
        masks,
        prototypes,
        n_classes: meta.n_classes,
    };
    Ok(SceneBundle {
        scene,
        views,
        corruption,
    })
}

// ------------------------------------------------------ prep cache

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrepMeta {
    pub n_points: usize,
    pub n_classes: usize,
}

/// Write a self-contained prepared-scene cache: frozen tensors, the
/// partition, masks, prototypes, labels and corruption bookkeeping.
pub fn save_prepared(dir: &Path, prep: &crate::trainer::PreparedScene) -> Result<()> {
    fs::create_dir_all(dir)?;
    let n = prep.inputs.f2d.rows();
    let meta = PrepMeta {
        n_points: n,
        n_classes: prep.n_classes,
    };
    fs::write(dir.join("prep.json"), serde_json::to_vec_pretty(&meta)?)?;
    write_matrix_f32(&dir.join("f2d.bin"), &prep.inputs.f2d, "fused_2d")?;
    write_matrix_f32(&dir.join("f3dg.bin"), &prep.inputs.f3dg, "geometric_descriptor")?;
    fs::write(dir.join("hits.json"), serde_json::to_vec(&prep.inputs.hits)?)?;
    let export = crate::superpoint::PartitionExport::from(&prep.inputs.part);
    fs::write(dir.join("partition.json"), serde_json::to_vec(&export)?)?;
    let masks: Vec<Vec<usize>> = prep
        .inputs
        .masks
        .masks
        .iter()
        .map(|m| m.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect())
        .collect();
    fs::write(dir.join("masks.json"), serde_json::to_vec(&masks)?)?;
    fs::write(
        dir.join("prototypes.json"),
        serde_json::to_vec_pretty(&prototype_table(&prep.prototypes))?,
    )?;
    fs::write(dir.join("gt_class.json"), serde_json::to_vec(&prep.gt_class)?)?;
    fs::write(
        dir.join("corruption.json"),
        serde_json::to_vec(&CorruptionRecord {
            corrupted_frac: prep.corrupted_frac.clone(),
        })?,
    )?;
    Ok(())
}

pub fn load_prepared(dir: &Path) -> Result<crate::trainer::PreparedScene> {
    let meta: PrepMeta = serde_json::from_slice(&fs::read(dir.join("prep.json"))?)?;
    let (f2d, _) = read_matrix_f32(&dir.join("f2d.bin"))?;
    let (f3dg, _) = read_matrix_f32(&dir.join("f3dg.bin"))?;
    let hits: Vec<usize> = serde_json::from_slice(&fs::read(dir.join("hits.json"))?)?;
    let export: crate::superpoint::PartitionExport =
        serde_json::from_slice(&fs::read(dir.join("partition.json"))?)?;
    let part = crate::superpoint::SuperpointPartition::from_assignment(export.assignment)?;
    let mask_indices: Vec<Vec<usize>> = serde_json::from_slice(&fs::read(dir.join("masks.json"))?)?;
    let n = meta.n_points;
    if f2d.rows() != n || f3dg.rows() != n || hits.len() != n || part.n_points() != n {
        return Err(Error::Format(format!(
            "prep cache at {} is inconsistent with n_points = {n}",
            dir.display()
        )));
    }
    let masks = crate::distill::InstanceMaskSet::new(
        mask_indices
            .iter()
            .map(|idx| {
                let mut m = vec![false; n];
                for &i in idx {
                    m[i] = true;
                }
                m
            })
            .collect(),
    )?;
    let table: TextEmbeddingTable =
        serde_json::from_slice(&fs::read(dir.join("prototypes.json"))?)?;
    table.validate()?;
    let prototypes = Mat::from_rows(&table.embeddings)?;
    let gt_class: Vec<u32> = serde_json::from_slice(&fs::read(dir.join("gt_class.json"))?)?;
    let corruption: CorruptionRecord =
        serde_json::from_slice(&fs::read(dir.join("corruption.json"))?)?;
    Ok(crate::trainer::PreparedScene {
        inputs: crate::distill::SceneInputs {
            f2d,
            f3dg,
            hits,
            part,
            masks,
        },
        gt_class,
        corrupted_frac: corruption.corrupted_frac,
        prototypes,
        n_classes: meta.n_classes,
    })
}

// ---------------------------------------------------------- manifest

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    /// SHA-256 of the canonical JSON of the producing configuration.
    pub config_sha256: String,
    pub entries: BTreeMap<String, String>,
}

pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let json = serde_json::to_vec(config)?;
    let mut hasher = Sha256::new();
    hasher.update(&json);
    Ok(format!("{:x}", hasher.finalize()))
}

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_vec_pretty(manifest)?,
    )?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    Ok(serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?)
}
