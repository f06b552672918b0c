//! The three geometry-guided loss modules as taped, differentiable scalars:
//! uncertainty-weighted superpoint distillation, instance mask
//! reconstruction, and inter-instance relation consistency.

use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::superpoint::SuperpointPartition;
use crate::tensorkit::NodeId;
use crate::{Mat, ParamStore, Tape};

/// Boolean point-membership masks, one per instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceMaskSet {
    pub masks: Vec<Vec<bool>>,
}

impl InstanceMaskSet {
    pub fn new(masks: Vec<Vec<bool>>) -> Result<Self> {
        for (i, m) in masks.iter().enumerate() {
            if !m.iter().any(|&b| b) {
                return Err(Error::Config(format!("instance mask {i} is empty")));
            }
        }
        Ok(InstanceMaskSet { masks })
    }

    pub fn from_instance_labels(labels: &[u32]) -> Result<Self> {
        let n_m = labels.iter().copied().max().map_or(0, |m| m as usize + 1);
        let masks = (0..n_m)
            .map(|i| labels.iter().map(|&l| l as usize == i).collect())
            .collect();
        Self::new(masks)
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

/// Which loss branches are taped for a training run. `sd` is the plain
/// mean-pooled superpoint distillation baseline; `usd` its
/// uncertainty-weighted replacement. They are mutually exclusive.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct Toggles {
    pub sd: bool,
    pub usd: bool,
    pub imr: bool,
    pub iirc: bool,
}

impl Toggles {
    pub fn validate(&self) -> Result<()> {
        if self.sd && self.usd {
            return Err(Error::Config(
                "SD and USD are mutually exclusive superpoint branches".into(),
            ));
        }
        Ok(())
    }

    pub fn all_off(&self) -> bool {
        !(self.sd || self.usd || self.imr || self.iirc)
    }
}

/// Loss hyperparameters shared by training and evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistillConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub mask_ratio_min: f64,
    pub mask_ratio_max: f64,
    pub gram_cap: usize,
    /// Skip L2 normalization before Gram products (comparison mode).
    pub raw_gram: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            mask_ratio_min: 0.3,
            mask_ratio_max: 0.7,
            gram_cap: 512,
            raw_gram: false,
        }
    }
}

/// Per-step loss values and diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossReport {
    pub l_sp: f64,
    pub l_mask: f64,
    pub l_sim: f64,
    pub l_final: f64,
    pub sp_superpoint_term: f64,
    pub sp_point_term: f64,
    pub mean_uncertainty: f64,
    pub masks_used: usize,
    pub no_mask_warning: bool,
}

/// Frozen per-scene tensors the losses consume.
#[derive(Debug, Clone)]
pub struct SceneInputs {
    /// Fused 2D features, `N x C`.
    pub f2d: Mat,
    /// Frozen geometric descriptor, `N x C1`.
    pub f3dg: Mat,
    /// Per-point view hit counts; zero-hit points are excluded from
    /// point-level distillation terms.
    pub hits: Vec<usize>,
    pub part: SuperpointPartition,
    pub masks: InstanceMaskSet,
}

fn assignment_rc(part: &SuperpointPartition) -> Rc<Vec<usize>> {
    Rc::new(part.assignment.clone())
}

/// Taped mean pooling per superpoint.
pub fn taped_pool_mean(tape: &mut Tape, a: NodeId, part: &SuperpointPartition) -> Result<NodeId> {
    let sums = tape.segment_sum(a, assignment_rc(part), part.n_superpoints())?;
    let counts = Mat::from_vec(
        part.n_superpoints(),
        1,
        part.sizes.iter().map(|&s| s as f64).collect(),
    )?;
    let counts = tape.constant(counts);
    tape.div_rows(sums, counts)
}

/// Taped weighted pooling of `features` with per-point weights `w`
/// (`N x 1`), normalized within each superpoint with an epsilon guard.
pub fn taped_pool_weighted(
    tape: &mut Tape,
    features: NodeId,
    w: NodeId,
    part: &SuperpointPartition,
) -> Result<NodeId> {
    let seg = assignment_rc(part);
    let wf = tape.scale_rows(features, w)?;
    let num = tape.segment_sum(wf, seg.clone(), part.n_superpoints())?;
    let wsum = tape.segment_sum(w, seg, part.n_superpoints())?;
    let wsum = tape.add_scalar(wsum, crate::superpoint::WEIGHT_POOL_EPS);
    tape.div_rows(num, wsum)
}

/// Taped broadcast of superpoint rows to point rows.
pub fn taped_broadcast(tape: &mut Tape, sp: NodeId, part: &SuperpointPartition) -> Result<NodeId> {
    tape.gather(sp, assignment_rc(part))
}

/// Reliability weights from geometric and semantic residuals:
/// `sigmoid(MLP(concat[(S3dG - F3dG); (S2d - F2d)]))`, taped through the
/// uncertainty head. The residual input itself is frozen.
pub fn usd_weights(
    tape: &mut Tape,
    params: &ParamStore,
    f3dg: &Mat,
    f2d: &Mat,
    part: &SuperpointPartition,
) -> Result<NodeId> {
    if f3dg.rows() != f2d.rows() {
        return Err(Error::dimension("usd_weights", f3dg.rows(), f2d.rows()));
    }
    let s3dg = crate::superpoint::pool_mean(f3dg, part)?;
    let s2d = crate::superpoint::pool_mean(f2d, part)?;
    let r_g = crate::superpoint::broadcast(&s3dg, part)?.sub(f3dg)?;
    let r_s = crate::superpoint::broadcast(&s2d, part)?.sub(f2d)?;
    let mut x = Mat::zeros(f3dg.rows(), f3dg.cols() + f2d.cols());
    for r in 0..x.rows() {
        let row = x.row_mut(r);
        row[..f3dg.cols()].copy_from_slice(r_g.row(r));
        row[f3dg.cols()..].copy_from_slice(r_s.row(r));
    }
    let x = tape.constant(x);
    params.uncertainty_forward(tape, x)
}

/// Mean over rows of `1 - values` restricted to `weights > 0` rows;
/// weights must sum to 1. Returns a `1 x 1` node.
fn one_minus_weighted_mean(tape: &mut Tape, values: NodeId, weights: Rc<Vec<f64>>) -> Result<NodeId> {
    let m = tape.row_weighted_sum(values, weights)?;
    let m = tape.scale(m, -1.0);
    Ok(tape.add_scalar(m, 1.0))
}

fn uniform_weights(n: usize) -> Rc<Vec<f64>> {
    Rc::new(vec![1.0 / n as f64; n])
}

fn valid_point_weights(hits: &[usize]) -> Option<Rc<Vec<f64>>> {
    let n_valid = hits.iter().filter(|&&h| h > 0).count();
    if n_valid == 0 {
        return None;
    }
    Some(Rc::new(
        hits.iter()
            .map(|&h| if h > 0 { 1.0 / n_valid as f64 } else { 0.0 })
            .collect(),
    ))
}

/// Superpoint-and-point-level cosine distillation against the
/// uncertainty-weighted 2D targets. Returns `(loss, weights, sp_term,
/// point_term)` node ids.
pub fn loss_sp(
    tape: &mut Tape,
    params: &ParamStore,
    f3dsem: NodeId,
    inputs: &SceneInputs,
) -> Result<(NodeId, NodeId, NodeId, NodeId)> {
    let w = usd_weights(tape, params, &inputs.f3dg, &inputs.f2d, &inputs.part)?;
    let f2d = tape.constant(inputs.f2d.clone());
    let s2d_bar = taped_pool_weighted(tape, f2d, w, &inputs.part)?;
    let loss = sp_terms(tape, f3dsem, s2d_bar, inputs)?;
    Ok((loss.0, w, loss.1, loss.2))
}

/// Plain mean-pooled superpoint distillation (the SD baseline): identical
/// structure with uniform pooling of the 2D targets.
pub fn loss_sp_mean_pooled(
    tape: &mut Tape,
    f3dsem: NodeId,
    inputs: &SceneInputs,
) -> Result<(NodeId, NodeId, NodeId)> {
    let s2d = crate::superpoint::pool_mean(&inputs.f2d, &inputs.part)?;
    let s2d = tape.constant(s2d);
    sp_terms(tape, f3dsem, s2d, inputs)
}

/// Shared two-level cosine distillation: superpoint-level against
/// `sp_target`, point-level against its broadcast, zero-hit points
/// excluded. Returns `(total, sp_term, point_term)`.
fn sp_terms(
    tape: &mut Tape,
    f3dsem: NodeId,
    sp_target: NodeId,
    inputs: &SceneInputs,
) -> Result<(NodeId, NodeId, NodeId)> {
    let s3dsem = taped_pool_mean(tape, f3dsem, &inputs.part)?;
    let cos_sp = tape.cosine_rows(s3dsem, sp_target)?;
    let sp_term = one_minus_weighted_mean(tape, cos_sp, uniform_weights(inputs.part.n_superpoints()))?;

    let f2d_bar = taped_broadcast(tape, sp_target, &inputs.part)?;
    let cos_pt = tape.cosine_rows(f3dsem, f2d_bar)?;
    let pt_term = match valid_point_weights(&inputs.hits) {
        Some(w) => one_minus_weighted_mean(tape, cos_pt, w)?,
        None => tape.constant(Mat::zeros(1, 1)),
    };
    let total = tape.add(sp_term, pt_term)?;
    Ok((total, sp_term, pt_term))
}

/// Point-wise cosine distillation baseline (no superpoint structure).
pub fn loss_pointwise(tape: &mut Tape, f3dsem: NodeId, inputs: &SceneInputs) -> Result<NodeId> {
    let f2d = tape.constant(inputs.f2d.clone());
    let cos = tape.cosine_rows(f3dsem, f2d)?;
    match valid_point_weights(&inputs.hits) {
        Some(w) => one_minus_weighted_mean(tape, cos, w),
        None => Ok(tape.constant(Mat::zeros(1, 1))),
    }
}

/// Remove `floor(ratio * |mask|)` true entries uniformly at random,
/// always keeping at least one.
pub fn mask_out(mask: &[bool], ratio: f64, rng: &mut impl Rng) -> Vec<bool> {
    let mut trues: Vec<usize> = mask
        .iter()
        .enumerate()
        .filter_map(|(i, &b)| b.then_some(i))
        .collect();
    let n_remove = ((ratio * trues.len() as f64).floor() as usize).min(trues.len() - 1);
    trues.shuffle(rng);
    let mut out = mask.to_vec();
    for &i in &trues[..n_remove] {
        out[i] = false;
    }
    out
}

/// Reconstruct an instance mask from a partial one: pool semantic rows
/// over the partial mask, map through the linear mask head, and score
/// every point by `sigmoid(cos(mask_feature, row))`.
pub fn imr_reconstruct(
    tape: &mut Tape,
    params: &ParamStore,
    f3dsem: NodeId,
    partial: &[bool],
) -> Result<NodeId> {
    let n = tape.value(f3dsem).rows();
    if partial.len() != n {
        return Err(Error::dimension("imr_reconstruct", n, partial.len()));
    }
    let count = partial.iter().filter(|&&b| b).count();
    if count == 0 {
        return Err(Error::Config("imr_reconstruct on empty partial mask".into()));
    }
    let weights = Rc::new(
        partial
            .iter()
            .map(|&b| if b { 1.0 / count as f64 } else { 0.0 })
            .collect::<Vec<f64>>(),
    );
    let pooled = tape.row_weighted_sum(f3dsem, weights)?;
    let feat = params.mask_forward(tape, pooled)?;
    let tiled = tape.gather(feat, Rc::new(vec![0usize; n]))?;
    let cos = tape.cosine_rows(tiled, f3dsem)?;
    Ok(tape.sigmoid(cos))
}

/// Mask reconstruction loss: BCE between each instance mask and its
/// reconstruction from a randomly truncated subset. Masks with fewer
/// than 4 points are skipped; with zero participating masks the loss is
/// 0 and the report carries a warning flag.
pub fn loss_mask(
    tape: &mut Tape,
    params: &ParamStore,
    f3dsem: NodeId,
    masks: &InstanceMaskSet,
    cfg: &DistillConfig,
    rng: &mut impl Rng,
) -> Result<(NodeId, usize)> {
    let mut terms = Vec::new();
    for mask in &masks.masks {
        if mask.iter().filter(|&&b| b).count() < 4 {
            continue;
        }
        let ratio = rng.gen_range(cfg.mask_ratio_min..cfg.mask_ratio_max);
        let partial = mask_out(mask, ratio, rng);
        let pred = imr_reconstruct(tape, params, f3dsem, &partial)?;
        let target = Mat::from_vec(
            mask.len(),
            1,
            mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )?;
        let bce = tape.bce(pred, Rc::new(target))?;
        terms.push(tape.mean(bce));
    }
    if terms.is_empty() {
        return Ok((tape.constant(Mat::zeros(1, 1)), 0));
    }
    let n = terms.len();
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok((tape.scale(acc, 1.0 / n as f64), n))
}

fn mask_selector(masks: &InstanceMaskSet, n: usize) -> Result<Mat> {
    let mut sel = Mat::zeros(masks.len(), n);
    for (i, mask) in masks.masks.iter().enumerate() {
        if mask.len() != n {
            return Err(Error::dimension("mask selector", n, mask.len()));
        }
        let count = mask.iter().filter(|&&b| b).count() as f64;
        for (j, &b) in mask.iter().enumerate() {
            if b {
                sel.set(i, j, 1.0 / count);
            }
        }
    }
    Ok(sel)
}

fn gram_of(tape: &mut Tape, rows: NodeId, raw: bool) -> Result<NodeId> {
    let e = if raw { rows } else { tape.row_normalize(rows) };
    let et = tape.transpose(e);
    tape.matmul(e, et)
}

fn gram_const(m: &Mat, raw: bool) -> Mat {
    let e = if raw {
        m.clone()
    } else {
        let mut e = m.clone();
        for r in 0..e.rows() {
            let n = e.row_norm(r).max(1e-12);
            for v in e.row_mut(r) {
                *v /= n;
            }
        }
        e
    };
    e.matmul(&e.transpose()).expect("square gram")
}

fn mse_against_const(tape: &mut Tape, a: NodeId, target: Mat) -> Result<NodeId> {
    let t = tape.constant(target);
    let d = tape.sub(a, t)?;
    let sq = tape.mul_elem(d, d)?;
    Ok(tape.mean(sq))
}

/// Relation consistency loss: MSE between geometric and semantic Gram
/// matrices at the instance-mask level and at the (subsampled)
/// superpoint level. The geometric branch is frozen; the semantic branch
/// is taped.
pub fn loss_sim(
    tape: &mut Tape,
    f3dsem: NodeId,
    inputs: &SceneInputs,
    cfg: &DistillConfig,
    rng: &mut impl Rng,
) -> Result<NodeId> {
    let n = inputs.f3dg.rows();
    let mut total = tape.constant(Mat::zeros(1, 1));

    if inputs.masks.len() >= 2 {
        let sel = mask_selector(&inputs.masks, n)?;
        let geo_emb = sel.matmul(&inputs.f3dg)?;
        let geo_gram = gram_const(&geo_emb, cfg.raw_gram);
        let sel_node = tape.constant(sel);
        let sem_emb = tape.matmul(sel_node, f3dsem)?;
        let sem_gram = gram_of(tape, sem_emb, cfg.raw_gram)?;
        let term = mse_against_const(tape, sem_gram, geo_gram)?;
        total = tape.add(total, term)?;
    }

    if inputs.part.n_superpoints() >= 2 {
        let n_q = inputs.part.n_superpoints();
        let picked: Vec<usize> = if n_q <= cfg.gram_cap {
            (0..n_q).collect()
        } else {
            let mut ids: Vec<usize> = (0..n_q).collect();
            ids.shuffle(rng);
            let mut ids = ids[..cfg.gram_cap].to_vec();
            ids.sort_unstable();
            ids
        };
        let geo_sp = crate::superpoint::pool_mean(&inputs.f3dg, &inputs.part)?;
        let geo_rows: Vec<Vec<f64>> = picked.iter().map(|&q| geo_sp.row(q).to_vec()).collect();
        let geo_gram = gram_const(&Mat::from_rows(&geo_rows)?, cfg.raw_gram);

        let sem_sp = taped_pool_mean(tape, f3dsem, &inputs.part)?;
        let sem_picked = tape.gather(sem_sp, Rc::new(picked))?;
        let sem_gram = gram_of(tape, sem_picked, cfg.raw_gram)?;
        let term = mse_against_const(tape, sem_gram, geo_gram)?;
        total = tape.add(total, term)?;
    }

    Ok(total)
}

/// Assemble the full scene loss per the active toggles and produce the
/// weighted final scalar plus a [`LossReport`].
pub fn scene_loss(
    tape: &mut Tape,
    params: &ParamStore,
    inputs: &SceneInputs,
    toggles: &Toggles,
    cfg: &DistillConfig,
    rng: &mut impl Rng,
) -> Result<(NodeId, LossReport)> {
    toggles.validate()?;
    let f3dg = tape.constant(inputs.f3dg.clone());
    let f3dsem = params.adapter_forward(tape, f3dg)?;

    let zero = tape.constant(Mat::zeros(1, 1));
    let mut sp_superpoint_term = 0.0;
    let mut sp_point_term = 0.0;
    let mut mean_uncertainty = f64::NAN;

    let l_sp = if toggles.usd {
        let (l, w, sp_t, pt_t) = loss_sp(tape, params, f3dsem, inputs)?;
        let wv = tape.value(w);
        mean_uncertainty = wv.data().iter().sum::<f64>() / wv.rows() as f64;
        sp_superpoint_term = tape.scalar_value(sp_t);
        sp_point_term = tape.scalar_value(pt_t);
        l
    } else if toggles.sd {
        let (l, sp_t, pt_t) = loss_sp_mean_pooled(tape, f3dsem, inputs)?;
        sp_superpoint_term = tape.scalar_value(sp_t);
        sp_point_term = tape.scalar_value(pt_t);
        l
    } else {
        // Without a superpoint pooling scheme the distillation term falls
        // back to plain point-wise cosine alignment.
        loss_pointwise(tape, f3dsem, inputs)?
    };

    let (l_mask, masks_used) = if toggles.imr {
        loss_mask(tape, params, f3dsem, &inputs.masks, cfg, rng)?
    } else {
        (zero, 0)
    };

    let l_sim = if toggles.iirc {
        loss_sim(tape, f3dsem, inputs, cfg, rng)?
    } else {
        zero
    };

    let a = tape.scale(l_sp, cfg.lambda1);
    let b = tape.scale(l_mask, cfg.lambda2);
    let c = tape.scale(l_sim, cfg.lambda3);
    let ab = tape.add(a, b)?;
    let l_final = tape.add(ab, c)?;

    let report = LossReport {
        l_sp: tape.scalar_value(l_sp),
        l_mask: tape.scalar_value(l_mask),
        l_sim: tape.scalar_value(l_sim),
        l_final: tape.scalar_value(l_final),
        sp_superpoint_term,
        sp_point_term,
        mean_uncertainty,
        masks_used,
        no_mask_warning: toggles.imr && masks_used == 0,
    };
    Ok((l_final, report))
}

/// Untaped uncertainty-weight evaluation for diagnostics.
pub fn usd_weights_eval(
    params: &ParamStore,
    f3dg: &Mat,
    f2d: &Mat,
    part: &SuperpointPartition,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let w = usd_weights(&mut tape, params, f3dg, f2d, part)?;
    Ok(tape.value(w).data().to_vec())
}
