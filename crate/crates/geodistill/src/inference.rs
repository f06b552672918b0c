//! Open-vocabulary classification via text-embedding similarity, and
//! segmentation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Mat;

/// Unit-norm embedding per category label.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TextEmbeddingTable {
    pub labels: Vec<String>,
    pub embeddings: Vec<Vec<f64>>,
}

impl TextEmbeddingTable {
    pub fn validate(&self) -> Result<()> {
        if self.labels.is_empty() {
            return Err(Error::Config("empty text embedding table".into()));
        }
        if self.labels.len() != self.embeddings.len() {
            return Err(Error::dimension(
                "TextEmbeddingTable",
                self.labels.len(),
                self.embeddings.len(),
            ));
        }
        let mut seen = std::collections::BTreeSet::new();
        for l in &self.labels {
            if !seen.insert(l) {
                return Err(Error::Config(format!("duplicate label '{l}'")));
            }
        }
        for (i, e) in self.embeddings.iter().enumerate() {
            let norm: f64 = e.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "embedding row {i} has norm {norm}, expected unit"
                )));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.embeddings.first().map_or(0, |e| e.len())
    }
}

/// Per-point argmax of cosine similarity against the table rows; ties
/// break toward the lowest class index.
pub fn classify(features: &Mat, table: &TextEmbeddingTable) -> Result<Vec<u32>> {
    table.validate()?;
    if features.cols() != table.dim() {
        return Err(Error::dimension("classify", table.dim(), features.cols()));
    }
    let mut out = Vec::with_capacity(features.rows());
    for r in 0..features.rows() {
        let row = features.row(r);
        let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut best = (f64::NEG_INFINITY, 0u32);
        for (c, emb) in table.embeddings.iter().enumerate() {
            let dot: f64 = row.iter().zip(emb).map(|(a, b)| a * b).sum();
            let cos = if norm < 1e-12 { 0.0 } else { dot / norm };
            if cos > best.0 {
                best = (cos, c as u32);
            }
        }
        out.push(best.1);
    }
    Ok(out)
}

/// Segmentation metrics over `n_classes`; classes absent from ground
/// truth are excluded from the means.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Metrics {
    pub miou: f64,
    pub macc: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub per_class_acc: Vec<Option<f64>>,
    pub confusion: Vec<Vec<u64>>,
}

pub fn metrics(pred: &[u32], gt: &[u32], n_classes: usize) -> Result<Metrics> {
    if pred.len() != gt.len() {
        return Err(Error::dimension("metrics", gt.len(), pred.len()));
    }
    let mut confusion = vec![vec![0u64; n_classes]; n_classes];
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p as usize, g as usize);
        if p >= n_classes || g >= n_classes {
            return Err(Error::Config(format!(
                "label out of range: pred {p}, gt {g}, n_classes {n_classes}"
            )));
        }
        confusion[g][p] += 1;
    }
    let mut per_class_iou = vec![None; n_classes];
    let mut per_class_acc = vec![None; n_classes];
    let mut iou_sum = 0.0;
    let mut acc_sum = 0.0;
    let mut present = 0usize;
    for c in 0..n_classes {
        let tp = confusion[c][c];
        let fn_: u64 = confusion[c].iter().sum::<u64>() - tp;
        let fp: u64 = (0..n_classes).map(|g| confusion[g][c]).sum::<u64>() - tp;
        if tp + fn_ == 0 {
            continue; // class absent from ground truth
        }
        let iou = tp as f64 / (tp + fp + fn_) as f64;
        let acc = tp as f64 / (tp + fn_) as f64;
        per_class_iou[c] = Some(iou);
        per_class_acc[c] = Some(acc);
        iou_sum += iou;
        acc_sum += acc;
        present += 1;
    }
    if present == 0 {
        return Err(Error::Config("no ground-truth class present".into()));
    }
    Ok(Metrics {
        miou: iou_sum / present as f64,
        macc: acc_sum / present as f64,
        per_class_iou,
        per_class_acc,
        confusion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(n: usize) -> TextEmbeddingTable {
        TextEmbeddingTable {
            labels: (0..n).map(|i| format!("class{i}")).collect(),
            embeddings: (0..n)
                .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                .collect(),
        }
    }

    #[test]
    fn self_match_identity_labeling() {
        let t = table(4);
        let f = Mat::from_fn(4, 4, |r, c| if r == c { 3.0 } else { 0.0 });
        assert_eq!(classify(&f, &t).unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn orthogonal_row_ties_to_class_zero() {
        let t = table(3);
        // 4th dimension? keep 3 dims: zero row -> all cosines 0 -> class 0
        let f = Mat::zeros(1, 3);
        assert_eq!(classify(&f, &t).unwrap(), vec![0]);
    }

    #[test]
    fn classify_scale_invariant() {
        let t = table(3);
        let f = Mat::from_vec(2, 3, vec![0.2, 0.9, 0.1, 0.5, 0.1, 0.8]).unwrap();
        let scaled = {
            let mut s = f.clone();
            for r in 0..s.rows() {
                let fac = 1.0 + 10.0 * r as f64;
                for v in s.row_mut(r) {
                    *v *= fac;
                }
            }
            s
        };
        assert_eq!(classify(&f, &t).unwrap(), classify(&scaled, &t).unwrap());
    }

    #[test]
    fn empty_table_is_config_error() {
        let t = TextEmbeddingTable {
            labels: vec![],
            embeddings: vec![],
        };
        assert!(classify(&Mat::zeros(1, 3), &t).is_err());
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let m = metrics(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap();
        assert_eq!(m.miou, 1.0);
        assert_eq!(m.macc, 1.0);
    }

    #[test]
    fn binary_all_zero_prediction() {
        let pred = vec![0, 0, 0, 0];
        let gt = vec![0, 0, 1, 1];
        let m = metrics(&pred, &gt, 2).unwrap();
        assert_eq!(m.per_class_iou[0], Some(0.5));
        assert_eq!(m.per_class_iou[1], Some(0.0));
        assert!((m.miou - 0.25).abs() < 1e-15);
    }

    #[test]
    fn confusion_rows_sum_to_gt_counts() {
        let pred = vec![0, 1, 1, 2, 0, 2, 1];
        let gt = vec![0, 0, 1, 1, 2, 2, 2];
        let m = metrics(&pred, &gt, 3).unwrap();
        for c in 0..3 {
            let want = gt.iter().filter(|&&g| g as usize == c).count() as u64;
            assert_eq!(m.confusion[c].iter().sum::<u64>(), want);
        }
    }

    #[test]
    fn all_absent_classes_error() {
        assert!(metrics(&[], &[], 3).is_err());
    }
}
