//! Training loop for the three small heads over frozen per-scene
//! tensors, plus the ablation harness.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distill::{scene_loss, DistillConfig, LossReport, SceneInputs, Toggles};
use crate::error::{Error, Result};
use crate::geometry::{fuse_views, geometric_descriptor, project, CameraView};
use crate::inference::{classify, metrics, Metrics};
use crate::superpoint::oversegment;
use crate::synthbench::{
    generate, point_corruption, render_views, viewpoint_centroid, CorruptionSpec, Scene, SceneSpec,
};
use crate::tensorkit::Gradients;
use crate::{Mat, ParamStore, Tape};

// ------------------------------------------------------------- config

fn default_steps() -> usize {
    2000
}
fn default_batch() -> usize {
    4
}
fn default_lr() -> f64 {
    1e-3
}
fn default_wd() -> f64 {
    1e-2
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_log_every() -> usize {
    1
}

/// Frozen-tensor preprocessing knobs shared by `prep` and the in-memory
/// benchmark path.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrepConfig {
    pub tau_depth: f64,
    pub knn_k: usize,
    pub theta_max_deg: f64,
    pub min_superpoint_size: usize,
}

impl Default for PrepConfig {
    fn default() -> Self {
        PrepConfig {
            tau_depth: 0.05,
            knn_k: 16,
            theta_max_deg: 15.0,
            min_superpoint_size: 10,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Adapter hidden width; 0 selects twice the descriptor width.
    pub hidden: usize,
    pub toggles: Toggles,
    pub distill: DistillConfig,
    pub prep: PrepConfig,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            steps: default_steps(),
            batch_size: default_batch(),
            lr: default_lr(),
            weight_decay: default_wd(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            hidden: 0,
            toggles: Toggles {
                sd: false,
                usd: true,
                imr: true,
                iirc: true,
            },
            distill: DistillConfig::default(),
            prep: PrepConfig::default(),
            log_every: default_log_every(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.toggles.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("bad learning rate {}", self.lr)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("negative weight decay".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn hidden_for(&self, c1: usize) -> usize {
        if self.hidden == 0 {
            2 * c1
        } else {
            self.hidden
        }
    }
}

// -------------------------------------------------------- preparation

/// Frozen tensors for one scene, ready for the loss.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub inputs: SceneInputs,
    pub gt_class: Vec<u32>,
    /// Per-point fraction of feature hits that sampled a corrupted pixel.
    pub corrupted_frac: Vec<f64>,
    pub prototypes: Mat,
    pub n_classes: usize,
}

/// Project, fuse, run the descriptor, and over-segment one scene.
/// `bleed_flags`, when available, feeds per-point corruption bookkeeping.
pub fn prepare_scene(
    scene: &Scene,
    views: &[CameraView],
    bleed_flags: Option<&[Vec<bool>]>,
    prep: &PrepConfig,
) -> Result<PreparedScene> {
    if views.is_empty() {
        return Err(Error::Config("prepare_scene needs at least one view".into()));
    }
    let projections = views
        .iter()
        .map(|v| project(&scene.cloud, v, prep.tau_depth))
        .collect::<Result<Vec<_>>>()?;
    let (f2d, hits) = fuse_views(&scene.cloud, views, &projections)?;
    let rigs: Vec<_> = views.iter().map(|v| v.rig.clone()).collect();
    let descriptor = geometric_descriptor(
        &scene.cloud,
        prep.knn_k,
        Some(viewpoint_centroid(&rigs)),
    )?;
    let part = oversegment(
        &scene.cloud,
        &descriptor.normals,
        &descriptor.curvature,
        prep.theta_max_deg,
        prep.min_superpoint_size,
    )?;
    let corrupted_frac = match bleed_flags {
        Some(flags) => point_corruption(views, &projections, flags, scene.cloud.len(), 0.5).0,
        None => vec![0.0; scene.cloud.len()],
    };
    let gt_class = scene
        .cloud
        .gt_class
        .clone()
        .ok_or_else(|| Error::Config("scene lacks ground-truth classes".into()))?;
    Ok(PreparedScene {
        inputs: SceneInputs {
            f2d,
            f3dg: descriptor.features,
            hits,
            part,
            masks: scene.masks.clone(),
        },
        gt_class,
        corrupted_frac,
        prototypes: scene.prototypes.clone(),
        n_classes: scene.n_classes,
    })
}

// ------------------------------------------------------------ AdamW

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MatState {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl MatState {
    fn of(m: &Mat) -> Self {
        MatState {
            rows: m.rows(),
            cols: m.cols(),
            data: m.data().to_vec(),
        }
    }
}

/// Adaptive-moment optimizer with decoupled weight decay.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, MatState>,
    v: BTreeMap<String, MatState>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        AdamW {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One optimizer step over the parameters that received gradients.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients<f64>) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let theta = params.get(name)?.clone();
            if g.shape() != theta.shape() {
                return Err(Error::dimension(
                    format!("AdamW gradient for {name}"),
                    format!("{:?}", theta.shape()),
                    format!("{:?}", g.shape()),
                ));
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| MatState::of(&Mat::zeros(theta.rows(), theta.cols())));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| MatState::of(&Mat::zeros(theta.rows(), theta.cols())));
            let mut new = theta.clone();
            for i in 0..theta.data().len() {
                let gi = g.data()[i];
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                new.data_mut()[i] = theta.data()[i]
                    - self.lr * self.weight_decay * theta.data()[i]
                    - self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            params.set(name, new)?;
        }
        Ok(())
    }
}

// ------------------------------------------------------------- train

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub report: LossReport,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: ParamStore,
    pub best_params: ParamStore,
    pub best_step: usize,
    pub log: Vec<StepLog>,
    pub optimizer: AdamW,
}

/// Resumable snapshot: parameters plus optimizer state plus next step.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ParamStore,
    pub optimizer: AdamW,
    pub next_step: usize,
}

fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(
        seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(step as u64),
    )
}

pub fn train(scenes: &[PreparedScene], cfg: &TrainConfig) -> Result<TrainOutput> {
    train_with_callback(scenes, cfg, None, |_, _, _| {})
}

/// Training loop with an optional resume state and a per-step callback
/// (step index, parameters after the step, averaged batch report).
pub fn train_with_callback(
    scenes: &[PreparedScene],
    cfg: &TrainConfig,
    resume: Option<TrainState>,
    mut on_step: impl FnMut(usize, &ParamStore, &LossReport),
) -> Result<TrainOutput> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::Config("train needs at least one scene".into()));
    }
    let c1 = scenes[0].inputs.f3dg.cols();
    let c = scenes[0].inputs.f2d.cols();
    for (i, s) in scenes.iter().enumerate() {
        if s.inputs.f3dg.cols() != c1 || s.inputs.f2d.cols() != c {
            return Err(Error::Config(format!(
                "scene {i} disagrees on feature dimensions"
            )));
        }
    }
    let (mut params, mut opt, start_step) = match resume {
        Some(state) => (state.params, state.optimizer, state.next_step),
        None => (
            ParamStore::init(c1, cfg.hidden_for(c1), c, cfg.seed ^ 0x9ea7),
            AdamW::new(cfg),
            0,
        ),
    };
    let mut best_params = params.clone();
    let mut best_step = start_step;
    let mut best_loss = f64::INFINITY;
    let mut log = Vec::new();
    let mut last_finite: Option<LossReport> = None;

    for step in start_step..cfg.steps {
        let mut rng = step_rng(cfg.seed, step);
        let batch: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rng.gen_range(0..scenes.len()))
            .collect();

        let mut accum: Gradients<f64> = BTreeMap::new();
        let mut mean_report: Option<LossReport> = None;
        let inv = 1.0 / cfg.batch_size as f64;
        for &si in &batch {
            let mut tape = Tape::new();
            let (loss, report) = scene_loss(
                &mut tape,
                &params,
                &scenes[si].inputs,
                &cfg.toggles,
                &cfg.distill,
                &mut rng,
            )?;
            if !report.l_final.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: format!(
                        "loss became non-finite on scene {si}; last finite report: {:?}",
                        last_finite
                    ),
                });
            }
            let grads = tape.backward(loss)?;
            for (name, g) in grads {
                let scaled = g.scale(inv);
                accum
                    .entry(name)
                    .and_modify(|a| a.add_assign(&scaled))
                    .or_insert(scaled);
            }
            mean_report = Some(match mean_report {
                None => scale_report(&report, inv),
                Some(acc) => add_report(&acc, &scale_report(&report, inv)),
            });
        }
        let report = mean_report.expect("nonempty batch");
        if accum.values().any(|g| !g.is_finite()) {
            return Err(Error::Diverged {
                step,
                detail: format!(
                    "non-finite gradient; last finite report: {:?}",
                    last_finite
                ),
            });
        }
        opt.step(&mut params, &accum)?;
        if report.l_final < best_loss {
            best_loss = report.l_final;
            best_step = step;
            best_params = params.clone();
        }
        last_finite = Some(report.clone());
        if cfg.log_every > 0 && step % cfg.log_every == 0 {
            log.push(StepLog {
                step,
                report: report.clone(),
            });
        }
        on_step(step, &params, &report);
    }
    Ok(TrainOutput {
        params,
        best_params,
        best_step,
        log,
        optimizer: opt,
    })
}

fn scale_report(r: &LossReport, s: f64) -> LossReport {
    LossReport {
        l_sp: r.l_sp * s,
        l_mask: r.l_mask * s,
        l_sim: r.l_sim * s,
        l_final: r.l_final * s,
        sp_superpoint_term: r.sp_superpoint_term * s,
        sp_point_term: r.sp_point_term * s,
        mean_uncertainty: r.mean_uncertainty * s,
        masks_used: r.masks_used,
        no_mask_warning: r.no_mask_warning,
    }
}

fn add_report(a: &LossReport, b: &LossReport) -> LossReport {
    LossReport {
        l_sp: a.l_sp + b.l_sp,
        l_mask: a.l_mask + b.l_mask,
        l_sim: a.l_sim + b.l_sim,
        l_final: a.l_final + b.l_final,
        sp_superpoint_term: a.sp_superpoint_term + b.sp_superpoint_term,
        sp_point_term: a.sp_point_term + b.sp_point_term,
        mean_uncertainty: a.mean_uncertainty + b.mean_uncertainty,
        masks_used: a.masks_used + b.masks_used,
        no_mask_warning: a.no_mask_warning || b.no_mask_warning,
    }
}

// -------------------------------------------------------- evaluation

/// Score a feature matrix against a scene's prototypes and ground truth.
/// `restrict`, when given, keeps only the marked points.
pub fn classify_and_score(
    features: &Mat,
    prototypes: &Mat,
    gt: &[u32],
    n_classes: usize,
    restrict: Option<&[bool]>,
) -> Result<Metrics> {
    let table = crate::io::prototype_table(prototypes);
    let pred = classify(features, &table)?;
    match restrict {
        None => metrics(&pred, gt, n_classes),
        Some(keep) => {
            let p: Vec<u32> = pred
                .iter()
                .zip(keep)
                .filter(|(_, &k)| k)
                .map(|(&v, _)| v)
                .collect();
            let g: Vec<u32> = gt
                .iter()
                .zip(keep)
                .filter(|(_, &k)| k)
                .map(|(&v, _)| v)
                .collect();
            metrics(&p, &g, n_classes)
        }
    }
}

/// Evaluate the trained semantic features of one prepared scene.
pub fn evaluate_scene(params: &ParamStore, scene: &PreparedScene) -> Result<Metrics> {
    let f3dsem = params.adapter_eval(&scene.inputs.f3dg)?;
    classify_and_score(
        &f3dsem,
        &scene.prototypes,
        &scene.gt_class,
        scene.n_classes,
        None,
    )
}

// ---------------------------------------------------------- ablation

pub const GROUPS: [(&str, Toggles); 7] = [
    ("A", Toggles { sd: false, usd: false, imr: false, iirc: false }),
    ("D", Toggles { sd: true, usd: false, imr: false, iirc: false }),
    ("E", Toggles { sd: false, usd: true, imr: false, iirc: false }),
    ("F", Toggles { sd: false, usd: false, imr: true, iirc: false }),
    ("G", Toggles { sd: false, usd: true, imr: true, iirc: false }),
    ("H", Toggles { sd: false, usd: false, imr: false, iirc: true }),
    ("I", Toggles { sd: false, usd: true, imr: true, iirc: true }),
];

pub fn group_toggles(name: &str) -> Option<Toggles> {
    GROUPS
        .iter()
        .find(|(g, _)| *g == name)
        .map(|(_, t)| *t)
}

/// Benchmark layout for the ablation study.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub seeds: Vec<u64>,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub total_points: usize,
    pub camera_count: usize,
    pub image_size: usize,
    pub corruption: CorruptionSpec,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            seeds: vec![0, 1, 2, 3, 4],
            train_scenes: 2,
            eval_scenes: 2,
            total_points: 9000,
            camera_count: 12,
            image_size: 96,
            corruption: CorruptionSpec {
                bleed_radius: 0.05,
                dropout_frac: 0.3,
                drift_sigma: 0.3,
            },
        }
    }
}

fn bench_spec(bench: &BenchConfig, scene_seed: u64) -> SceneSpec {
    let mut spec = SceneSpec::benchmark(scene_seed);
    spec.total_points = bench.total_points;
    spec.camera_count = bench.camera_count;
    spec.image_size = bench.image_size;
    spec.corruption = bench.corruption;
    spec
}

/// Generate and prepare one benchmark scene end to end.
pub fn bench_scene(bench: &BenchConfig, prep: &PrepConfig, scene_seed: u64) -> Result<PreparedScene> {
    let spec = bench_spec(bench, scene_seed);
    let scene = generate(&spec, scene_seed)?;
    let rendered = render_views(&scene, &spec, scene_seed ^ 0x51de)?;
    prepare_scene(&scene, &rendered.views, Some(&rendered.bleed_flags), prep)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblateRow {
    pub group: String,
    pub seed: u64,
    pub miou: f64,
    pub macc: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblateTable {
    pub rows: Vec<AblateRow>,
}

impl AblateTable {
    /// Seed-averaged (mean, std) mIoU for a group.
    pub fn group_miou(&self, group: &str) -> Option<(f64, f64)> {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.group == group)
            .map(|r| r.miou)
            .collect();
        if vals.is_empty() {
            return None;
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        Some((mean, var.sqrt()))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("group,seed,miou,macc\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.group, r.seed, r.miou, r.macc));
        }
        out
    }
}

/// Train every ablation group on the corrupted benchmark for each seed
/// and score on held-out scenes.
pub fn ablate(base: &TrainConfig, bench: &BenchConfig) -> Result<AblateTable> {
    if bench.seeds.is_empty() {
        return Err(Error::Config("ablate needs at least one seed".into()));
    }
    let mut rows = Vec::new();
    for &seed in &bench.seeds {
        let train_set: Vec<PreparedScene> = (0..bench.train_scenes)
            .map(|i| bench_scene(bench, &base.prep, seed * 1000 + i as u64))
            .collect::<Result<_>>()?;
        let eval_set: Vec<PreparedScene> = (0..bench.eval_scenes)
            .map(|i| bench_scene(bench, &base.prep, seed * 1000 + 500 + i as u64))
            .collect::<Result<_>>()?;
        for (name, toggles) in GROUPS {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.toggles = toggles;
            cfg.log_every = 0;
            let out = train(&train_set, &cfg)?;
            let mut miou = 0.0;
            let mut macc = 0.0;
            for scene in &eval_set {
                let m = evaluate_scene(&out.params, scene)?;
                miou += m.miou / eval_set.len() as f64;
                macc += m.macc / eval_set.len() as f64;
            }
            rows.push(AblateRow {
                group: name.to_string(),
                seed,
                miou,
                macc,
            });
        }
    }
    Ok(AblateTable { rows })
}
