//! Uniform-grid k-nearest-neighbor index for desk-scale clouds.

use std::collections::HashMap;

/// Spatial hash over a uniform grid. Queries expand cell rings until the
/// k-th candidate distance is guaranteed minimal.
pub struct KnnIndex<'a> {
    points: &'a [[f64; 3]],
    cell: f64,
    grid: HashMap<[i64; 3], Vec<usize>>,
    key_lo: [i64; 3],
    key_hi: [i64; 3],
}

impl<'a> KnnIndex<'a> {
    pub fn build(points: &'a [[f64; 3]], k_hint: usize) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        // clamp degenerate axes to a fraction of the largest extent so
        // flat or collinear clouds still get a usable cell size
        let max_ext = (0..3).map(|a| hi[a] - lo[a]).fold(1e-6, f64::max);
        let volume: f64 = (0..3)
            .map(|a| (hi[a] - lo[a]).max(0.01 * max_ext))
            .product();
        let cell = (volume * k_hint.max(1) as f64 / points.len().max(1) as f64)
            .cbrt()
            .max(1e-6);
        let mut grid: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        let mut key_lo = [i64::MAX; 3];
        let mut key_hi = [i64::MIN; 3];
        for (i, p) in points.iter().enumerate() {
            let key = Self::key(p, cell);
            for a in 0..3 {
                key_lo[a] = key_lo[a].min(key[a]);
                key_hi[a] = key_hi[a].max(key[a]);
            }
            grid.entry(key).or_default().push(i);
        }
        KnnIndex {
            points,
            cell,
            grid,
            key_lo,
            key_hi,
        }
    }

    fn key(p: &[f64; 3], cell: f64) -> [i64; 3] {
        [
            (p[0] / cell).floor() as i64,
            (p[1] / cell).floor() as i64,
            (p[2] / cell).floor() as i64,
        ]
    }

    /// The `k` nearest neighbors of point `i`, excluding `i` itself,
    /// ordered by (distance, index) for determinism.
    pub fn neighbors(&self, i: usize, k: usize) -> Vec<usize> {
        let q = &self.points[i];
        let center = Self::key(q, self.cell);
        let mut cands: Vec<(f64, usize)> = Vec::new();
        let mut ring = 0i64;
        loop {
            // cells whose Chebyshev distance from the center equals `ring`
            for dz in -ring..=ring {
                for dy in -ring..=ring {
                    for dx in -ring..=ring {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                            continue;
                        }
                        let key = [center[0] + dx, center[1] + dy, center[2] + dz];
                        if let Some(members) = self.grid.get(&key) {
                            for &j in members {
                                if j == i {
                                    continue;
                                }
                                cands.push((dist2(q, &self.points[j]), j));
                            }
                        }
                    }
                }
            }
            if cands.len() >= k {
                cands.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let kth = cands[k - 1].0.sqrt();
                // everything outside the explored rings is at least
                // `ring * cell` away from the query cell boundary
                if kth <= ring as f64 * self.cell {
                    break;
                }
            }
            // Chebyshev radius from the query cell to the farthest
            // occupied cell; beyond it there is nothing left to visit
            let max_ring = (0..3)
                .map(|a| (center[a] - self.key_lo[a]).max(self.key_hi[a] - center[a]))
                .max()
                .unwrap_or(0);
            if ring >= max_ring {
                cands.sort_by(|a, b| a.partial_cmp(b).unwrap());
                break;
            }
            ring += 1;
        }
        cands.truncate(k);
        cands.into_iter().map(|(_, j)| j).collect()
    }
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
