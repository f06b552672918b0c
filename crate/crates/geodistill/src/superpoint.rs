//! Normal-based over-segmentation and the pooling/broadcast primitives
//! used by the distillation losses.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{KnnIndex, PointCloud};
use crate::Mat;

pub const GRAPH_K: usize = 16;
pub const WEIGHT_POOL_EPS: f64 = 1e-8;

/// Point-to-superpoint assignment with contiguous ids.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuperpointPartition {
    pub assignment: Vec<usize>,
    pub sizes: Vec<usize>,
}

impl SuperpointPartition {
    pub fn from_assignment(assignment: Vec<usize>) -> Result<Self> {
        let n_sp = assignment.iter().copied().max().map_or(0, |m| m + 1);
        let mut sizes = vec![0usize; n_sp];
        for &a in &assignment {
            sizes[a] += 1;
        }
        if sizes.iter().any(|&s| s == 0) {
            return Err(Error::State("superpoint ids are not contiguous".into()));
        }
        Ok(SuperpointPartition { assignment, sizes })
    }

    pub fn n_points(&self) -> usize {
        self.assignment.len()
    }

    pub fn n_superpoints(&self) -> usize {
        self.sizes.len()
    }

    /// Point indices grouped per superpoint.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.n_superpoints()];
        for (i, &a) in self.assignment.iter().enumerate() {
            groups[a].push(i);
        }
        groups
    }
}

/// Region growing over the k-NN graph. Seeds are visited in ascending
/// curvature; a neighbor joins a region when the angle between the
/// region's running mean normal and the neighbor's normal stays within
/// `theta_max_deg`. Fragments smaller than `min_size` merge into the
/// adjacent superpoint sharing the most k-NN edges.
pub fn oversegment(
    cloud: &PointCloud,
    normals: &[[f64; 3]],
    curvature: &[f64],
    theta_max_deg: f64,
    min_size: usize,
) -> Result<SuperpointPartition> {
    if !(0.0..90.0).contains(&theta_max_deg) || theta_max_deg == 0.0 {
        return Err(Error::Config(format!(
            "theta_max must lie in (0, 90) degrees, got {theta_max_deg}"
        )));
    }
    if min_size < 1 {
        return Err(Error::Config("min_size must be at least 1".into()));
    }
    let n = cloud.len();
    if normals.len() != n || curvature.len() != n {
        return Err(Error::dimension("oversegment normals", n, normals.len()));
    }
    if n < min_size {
        return SuperpointPartition::from_assignment(vec![0; n]);
    }

    let k = GRAPH_K.min(n - 1);
    let index = KnnIndex::build(&cloud.positions, k);
    // symmetric adjacency
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        for j in index.neighbors(i, k) {
            adj[i].push(j);
            adj[j].push(i);
        }
    }
    for l in adj.iter_mut() {
        l.sort_unstable();
        l.dedup();
    }

    let cos_max = theta_max_deg.to_radians().cos();
    let mut seeds: Vec<usize> = (0..n).collect();
    seeds.sort_by(|&a, &b| curvature[a].partial_cmp(&curvature[b]).unwrap().then(a.cmp(&b)));

    let mut assignment = vec![usize::MAX; n];
    let mut region_id = 0usize;
    for &seed in &seeds {
        if assignment[seed] != usize::MAX {
            continue;
        }
        let mut mean = normals[seed];
        let mut count = 1.0;
        assignment[seed] = region_id;
        let mut queue = VecDeque::from([seed]);
        while let Some(p) = queue.pop_front() {
            for &q in &adj[p] {
                if assignment[q] != usize::MAX {
                    continue;
                }
                let norm = (mean[0] * mean[0] + mean[1] * mean[1] + mean[2] * mean[2]).sqrt();
                let dot = if norm > 0.0 {
                    (mean[0] * normals[q][0] + mean[1] * normals[q][1] + mean[2] * normals[q][2])
                        / norm
                } else {
                    1.0
                };
                if dot >= cos_max {
                    assignment[q] = region_id;
                    for a in 0..3 {
                        mean[a] = (mean[a] * count + normals[q][a]) / (count + 1.0);
                    }
                    count += 1.0;
                    queue.push_back(q);
                }
            }
        }
        region_id += 1;
    }

    // fragment merging: each round, merge the smallest fragment that has
    // an adjacent superpoint, into the neighbor with the most shared edges
    let mut part = SuperpointPartition::from_assignment(assignment)?;
    loop {
        let merge_target = |frag: usize| -> Option<usize> {
            let mut shared = vec![0usize; part.n_superpoints()];
            for (i, &a) in part.assignment.iter().enumerate() {
                if a != frag {
                    continue;
                }
                for &j in &adj[i] {
                    let b = part.assignment[j];
                    if b != frag {
                        shared[b] += 1;
                    }
                }
            }
            shared
                .iter()
                .enumerate()
                .filter(|&(_, &c)| c > 0)
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
                .map(|(s, _)| s)
        };
        let candidate = (0..part.n_superpoints())
            .filter(|&s| part.sizes[s] < min_size)
            .filter_map(|s| merge_target(s).map(|t| (s, t)))
            .min_by_key(|&(s, _)| (part.sizes[s], s));
        let Some((frag, target)) = candidate else { break };
        let assignment: Vec<usize> = part
            .assignment
            .iter()
            .map(|&a| {
                let a = if a == frag { target } else { a };
                if a > frag {
                    a - 1
                } else {
                    a
                }
            })
            .collect();
        part = SuperpointPartition::from_assignment(assignment)?;
    }
    Ok(relabel_by_first_point(part))
}

/// Renumber superpoints by the index of their first point, for a stable
/// id ordering independent of seed visiting order.
fn relabel_by_first_point(part: SuperpointPartition) -> SuperpointPartition {
    let mut first = vec![usize::MAX; part.n_superpoints()];
    for (i, &a) in part.assignment.iter().enumerate() {
        if first[a] == usize::MAX {
            first[a] = i;
        }
    }
    let mut order: Vec<usize> = (0..part.n_superpoints()).collect();
    order.sort_by_key(|&s| first[s]);
    let mut remap = vec![0usize; part.n_superpoints()];
    for (new, &old) in order.iter().enumerate() {
        remap[old] = new;
    }
    let assignment = part.assignment.iter().map(|&a| remap[a]).collect();
    SuperpointPartition::from_assignment(assignment).expect("relabel preserves contiguity")
}

/// Arithmetic mean of feature rows per superpoint.
pub fn pool_mean(features: &Mat, part: &SuperpointPartition) -> Result<Mat> {
    if features.rows() != part.n_points() {
        return Err(Error::dimension("pool_mean", part.n_points(), features.rows()));
    }
    let mut out = Mat::zeros(part.n_superpoints(), features.cols());
    for (i, &a) in part.assignment.iter().enumerate() {
        for (o, &f) in out.row_mut(a).iter_mut().zip(features.row(i)) {
            *o += f;
        }
    }
    for (s, &size) in part.sizes.iter().enumerate() {
        let inv = 1.0 / size as f64;
        for o in out.row_mut(s) {
            *o *= inv;
        }
    }
    Ok(out)
}

/// Expand superpoint rows back to point rows.
pub fn broadcast(sp_features: &Mat, part: &SuperpointPartition) -> Result<Mat> {
    if sp_features.rows() != part.n_superpoints() {
        return Err(Error::dimension(
            "broadcast",
            part.n_superpoints(),
            sp_features.rows(),
        ));
    }
    let mut out = Mat::zeros(part.n_points(), sp_features.cols());
    for (i, &a) in part.assignment.iter().enumerate() {
        out.row_mut(i).copy_from_slice(sp_features.row(a));
    }
    Ok(out)
}

/// Weighted pooling: superpoint row `i` is `sum w~_j f_j` with weights
/// normalized within each superpoint, `w~_j = w_j / (sum w + eps)`.
pub fn pool_weighted(features: &Mat, weights: &[f64], part: &SuperpointPartition) -> Result<Mat> {
    if features.rows() != part.n_points() || weights.len() != part.n_points() {
        return Err(Error::dimension("pool_weighted", part.n_points(), weights.len()));
    }
    let mut wsum = vec![WEIGHT_POOL_EPS; part.n_superpoints()];
    for (i, &a) in part.assignment.iter().enumerate() {
        wsum[a] += weights[i];
    }
    let mut out = Mat::zeros(part.n_superpoints(), features.cols());
    for (i, &a) in part.assignment.iter().enumerate() {
        let w = weights[i] / wsum[a];
        for (o, &f) in out.row_mut(a).iter_mut().zip(features.row(i)) {
            *o += w * f;
        }
    }
    Ok(out)
}

/// Export schema for visualization tooling.
#[derive(Debug, Serialize, Deserialize)]
pub struct PartitionExport {
    pub n_points: usize,
    pub n_superpoints: usize,
    pub assignment: Vec<usize>,
}

impl From<&SuperpointPartition> for PartitionExport {
    fn from(p: &SuperpointPartition) -> Self {
        PartitionExport {
            n_points: p.n_points(),
            n_superpoints: p.n_superpoints(),
            assignment: p.assignment.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn part(assignment: Vec<usize>) -> SuperpointPartition {
        SuperpointPartition::from_assignment(assignment).unwrap()
    }

    #[test]
    fn pool_mean_single_superpoint_is_global_mean() {
        let f = Mat::from_fn(4, 2, |r, c| (r * 2 + c) as f64);
        let p = part(vec![0, 0, 0, 0]);
        let m = pool_mean(&f, &p).unwrap();
        assert_eq!(m.row(0), &[3.0, 4.0]);
    }

    #[test]
    fn pool_mean_identity_when_singletons() {
        let f = Mat::from_fn(3, 2, |r, c| (r + c) as f64);
        let p = part(vec![0, 1, 2]);
        assert_eq!(pool_mean(&f, &p).unwrap(), f);
        // broadcast of pool_mean is the identity here too
        assert_eq!(broadcast(&pool_mean(&f, &p).unwrap(), &p).unwrap(), f);
    }

    #[test]
    fn broadcast_constant_row() {
        let s = Mat::from_vec(1, 2, vec![5.0, 6.0]).unwrap();
        let p = part(vec![0, 0, 0]);
        let b = broadcast(&s, &p).unwrap();
        for r in 0..3 {
            assert_eq!(b.row(r), &[5.0, 6.0]);
        }
    }

    #[test]
    fn weighted_uniform_equals_mean() {
        let f = Mat::from_fn(6, 3, |r, c| ((r * 3 + c) as f64).sin());
        let p = part(vec![0, 1, 0, 1, 0, 1]);
        let wp = pool_weighted(&f, &[0.4; 6], &p).unwrap();
        let pm = pool_mean(&f, &p).unwrap();
        for (a, b) in wp.data().iter().zip(pm.data()) {
            assert!((a - b).abs() < 1e-8 * 2.0);
        }
    }

    #[test]
    fn weighted_delta_limit_selects_single_row() {
        let f = Mat::from_fn(3, 2, |r, c| (r * 2 + c) as f64);
        let p = part(vec![0, 0, 0]);
        let wp = pool_weighted(&f, &[1.0, 1e-14, 1e-14], &p).unwrap();
        for (o, &want) in wp.row(0).iter().zip(f.row(0)) {
            assert!((o - want).abs() < 1e-7);
        }
    }

    #[test]
    fn oversegment_single_plane_is_one_superpoint() {
        let mut pts = Vec::new();
        for i in 0..15 {
            for j in 0..15 {
                pts.push([i as f64 * 0.05, j as f64 * 0.05, 0.0]);
            }
        }
        let cloud = PointCloud::new(pts).unwrap();
        let normals = vec![[0.0, 0.0, 1.0]; cloud.len()];
        let curvature = vec![0.0; cloud.len()];
        let part = oversegment(&cloud, &normals, &curvature, 15.0, 10).unwrap();
        assert_eq!(part.n_superpoints(), 1);
    }

    #[test]
    fn tiny_cloud_collapses_to_single_superpoint() {
        let cloud = PointCloud::new(vec![[0.0; 3], [1.0; 3]]).unwrap();
        let normals = vec![[0.0, 0.0, 1.0]; 2];
        let part = oversegment(&cloud, &normals, &[0.0, 0.0], 15.0, 10).unwrap();
        assert_eq!(part.n_superpoints(), 1);
        assert_eq!(part.assignment, vec![0, 0]);
    }

    #[test]
    fn invalid_theta_rejected() {
        let cloud = PointCloud::new(vec![[0.0; 3]]).unwrap();
        assert!(oversegment(&cloud, &[[0.0, 0.0, 1.0]], &[0.0], 95.0, 1).is_err());
        assert!(oversegment(&cloud, &[[0.0, 0.0, 1.0]], &[0.0], 0.0, 1).is_err());
    }
}
