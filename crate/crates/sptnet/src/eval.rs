//! Clustering accuracy under the optimal cluster-to-class matching, with
//! All/Old/New breakdown derived from one global matching.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("empty prediction set")]
    Empty,
    #[error("prediction {got} outside {bound} clusters")]
    OutOfRange { got: usize, bound: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Predicted cluster ids alongside the hidden ground truth.
#[derive(Debug, Clone)]
pub struct PredictionSet {
    pub predicted: Vec<usize>,
    pub hidden: Vec<usize>,
    /// Instance membership in the old-class set.
    pub is_old: Vec<bool>,
}

/// Accuracy triple plus the matching that produced it. Subset accuracies are
/// `None` when the subset is empty.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AccReport {
    pub all: f64,
    pub old: Option<f64>,
    pub new: Option<f64>,
    pub matched: usize,
    pub total: usize,
    /// `matching[p]` is the true class assigned to predicted cluster `p`
    /// (`None` for clusters matched to padding).
    pub matching: Vec<Option<usize>>,
}

/// Minimum-cost assignment on a square cost matrix (shortest augmenting
/// paths with potentials). Returns the column chosen for each row.
fn min_cost_assignment(cost: &[Vec<i64>]) -> Vec<usize> {
    let n = cost.len();
    const INF: i64 = i64::MAX / 4;
    // 1-based potentials over rows (u) and columns (v)
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut col_row = vec![0usize; n + 1]; // col -> assigned row (1-based, 0 = none)
    for i in 1..=n {
        col_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_row[j0];
            let mut delta = INF;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_row[j0] = col_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_col = vec![0usize; n];
    for j in 1..=n {
        if col_row[j] != 0 {
            row_col[col_row[j] - 1] = j - 1;
        }
    }
    row_col
}

/// Clustering accuracy: build the `k_pred x k_true` contingency matrix over
/// all instances, solve the maximum-weight assignment (rectangular shapes are
/// zero-padded to square), and score the Old/New subsets under that single
/// global matching.
pub fn hungarian_acc(
    preds: &PredictionSet,
    k_pred: usize,
    k_true: usize,
) -> Result<AccReport, EvalError> {
    let n = preds.predicted.len();
    if n == 0 {
        return Err(EvalError::Empty);
    }
    if preds.hidden.len() != n || preds.is_old.len() != n {
        return Err(EvalError::ShapeMismatch(format!(
            "{n} predictions vs {} hidden / {} flags",
            preds.hidden.len(),
            preds.is_old.len()
        )));
    }
    let mut contingency = vec![vec![0i64; k_true]; k_pred];
    for i in 0..n {
        let (p, t) = (preds.predicted[i], preds.hidden[i]);
        if p >= k_pred {
            return Err(EvalError::OutOfRange { got: p, bound: k_pred });
        }
        if t >= k_true {
            return Err(EvalError::OutOfRange { got: t, bound: k_true });
        }
        contingency[p][t] += 1;
    }

    let side = k_pred.max(k_true);
    let mut cost = vec![vec![0i64; side]; side];
    for (p, row) in contingency.iter().enumerate() {
        for (t, &w) in row.iter().enumerate() {
            cost[p][t] = -w;
        }
    }
    let row_col = min_cost_assignment(&cost);
    let mut matching = vec![None; k_pred];
    for p in 0..k_pred {
        let t = row_col[p];
        if t < k_true {
            matching[p] = Some(t);
        }
    }

    let mut matched = 0usize;
    let (mut old_hit, mut old_n, mut new_hit, mut new_n) = (0usize, 0usize, 0usize, 0usize);
    for i in 0..n {
        let hit = matching[preds.predicted[i]] == Some(preds.hidden[i]);
        matched += hit as usize;
        if preds.is_old[i] {
            old_n += 1;
            old_hit += hit as usize;
        } else {
            new_n += 1;
            new_hit += hit as usize;
        }
    }
    Ok(AccReport {
        all: matched as f64 / n as f64,
        old: (old_n > 0).then(|| old_hit as f64 / old_n as f64),
        new: (new_n > 0).then(|| new_hit as f64 / new_n as f64),
        matched,
        total: n,
        matching,
    })
}

/// Cluster assignment from prototype cosines: argmax per row, ties resolved
/// toward the lower index.
pub fn assign_clusters(cosines: &ArrayD<f32>) -> Result<Vec<usize>, EvalError> {
    if cosines.ndim() != 2 {
        return Err(EvalError::ShapeMismatch(format!(
            "expected (B, C) cosines, got {:?}",
            cosines.shape()
        )));
    }
    let classes = cosines.shape()[1];
    if classes == 0 {
        return Err(EvalError::Empty);
    }
    Ok(cosines
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = (0usize, row[0]);
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > best.1 {
                    best = (j, v);
                }
            }
            best.0
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // Exhaustive maximum over all permutations (oracle for K <= 7).
    fn brute_force_acc(preds: &PredictionSet, k: usize) -> f64 {
        fn permute(k: usize) -> Vec<Vec<usize>> {
            if k == 1 {
                return vec![vec![0]];
            }
            let mut out = Vec::new();
            for rest in permute(k - 1) {
                for slot in 0..k {
                    let mut p = rest.clone();
                    p.insert(slot, k - 1);
                    out.push(p);
                }
            }
            out
        }
        let n = preds.predicted.len();
        let mut best = 0usize;
        for perm in permute(k) {
            let hits = (0..n)
                .filter(|&i| perm[preds.predicted[i]] == preds.hidden[i])
                .count();
            best = best.max(hits);
        }
        best as f64 / n as f64
    }

    fn random_preds(k: usize, n: usize, rng: &mut ChaCha8Rng) -> PredictionSet {
        PredictionSet {
            predicted: (0..n).map(|_| rng.random_range(0..k)).collect(),
            hidden: (0..n).map(|_| rng.random_range(0..k)).collect(),
            is_old: (0..n).map(|_| rng.random_bool(0.5)).collect(),
        }
    }

    #[test]
    fn permuted_truth_scores_one() {
        let perm = [2usize, 0, 3, 1];
        let hidden: Vec<usize> = (0..200).map(|i| i % 4).collect();
        let predicted: Vec<usize> = hidden.iter().map(|&t| perm[t]).collect();
        let preds = PredictionSet {
            is_old: hidden.iter().map(|&t| t < 2).collect(),
            predicted,
            hidden,
        };
        let report = hungarian_acc(&preds, 4, 4).unwrap();
        assert_eq!(report.all, 1.0);
        assert_eq!(report.old, Some(1.0));
        assert_eq!(report.new, Some(1.0));
    }

    #[test]
    fn matches_brute_force_small_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for trial in 0..40 {
            let k = rng.random_range(2..=7);
            let n = rng.random_range(5..=60);
            let preds = random_preds(k, n, &mut rng);
            let report = hungarian_acc(&preds, k, k).unwrap();
            let brute = brute_force_acc(&preds, k);
            assert_eq!(report.all, brute, "trial {trial} k={k} n={n}");
        }
    }

    #[test]
    fn subset_accuracies_recompose_all() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        for _ in 0..20 {
            let k = rng.random_range(2..=6);
            let n = rng.random_range(10..=80);
            let preds = random_preds(k, n, &mut rng);
            let report = hungarian_acc(&preds, k, k).unwrap();
            let old_n = preds.is_old.iter().filter(|&&o| o).count();
            let new_n = n - old_n;
            let weighted = report.old.unwrap_or(0.0) * old_n as f64
                + report.new.unwrap_or(0.0) * new_n as f64;
            assert!((weighted - report.all * n as f64).abs() < 1e-9);
            assert_eq!(report.matched, (report.all * n as f64).round() as usize);
        }
    }

    #[test]
    fn rectangular_shapes_accepted() {
        // more predicted clusters than true classes, and the reverse
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let preds = PredictionSet {
            predicted: (0..300).map(|_| rng.random_range(0..9)).collect(),
            hidden: (0..300).map(|_| rng.random_range(0..5)).collect(),
            is_old: (0..300).map(|i| i % 2 == 0).collect(),
        };
        let report = hungarian_acc(&preds, 9, 5).unwrap();
        assert!(report.all > 0.0 && report.all <= 1.0);
        assert_eq!(report.matching.len(), 9);
        assert!(report.matching.iter().filter(|m| m.is_some()).count() <= 5);

        let swapped = PredictionSet {
            predicted: preds.hidden.clone(),
            hidden: preds.predicted.clone(),
            is_old: preds.is_old.clone(),
        };
        let report = hungarian_acc(&swapped, 5, 9).unwrap();
        assert!(report.all > 0.0 && report.all <= 1.0);
    }

    #[test]
    fn relabeling_invariance_and_degenerate_floor() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let preds = random_preds(5, 100, &mut rng);
        let base = hungarian_acc(&preds, 5, 5).unwrap().all;
        // relabel predicted clusters by a fixed permutation
        let perm = [4usize, 2, 0, 3, 1];
        let relabel = PredictionSet {
            predicted: preds.predicted.iter().map(|&p| perm[p]).collect(),
            hidden: preds.hidden.clone(),
            is_old: preds.is_old.clone(),
        };
        assert_eq!(hungarian_acc(&relabel, 5, 5).unwrap().all, base);

        // single-cluster predictions still capture the largest class
        let collapsed = PredictionSet {
            predicted: vec![0; 100],
            hidden: preds.hidden.clone(),
            is_old: preds.is_old.clone(),
        };
        let largest = (0..5)
            .map(|c| preds.hidden.iter().filter(|&&t| t == c).count())
            .max()
            .unwrap();
        let report = hungarian_acc(&collapsed, 5, 5).unwrap();
        assert!((report.all - largest as f64 / 100.0).abs() < 1e-12);
    }

    #[test]
    fn error_paths() {
        let empty = PredictionSet {
            predicted: vec![],
            hidden: vec![],
            is_old: vec![],
        };
        assert_eq!(hungarian_acc(&empty, 3, 3).unwrap_err(), EvalError::Empty);
        let bad = PredictionSet {
            predicted: vec![3],
            hidden: vec![0],
            is_old: vec![true],
        };
        assert!(matches!(
            hungarian_acc(&bad, 3, 3),
            Err(EvalError::OutOfRange { .. })
        ));
    }

    #[test]
    fn cluster_assignment_rules() {
        let mut cos = ArrayD::<f32>::zeros(IxDyn(&[3, 4]));
        cos[[0, 2]] = 0.9; // clear winner
        cos[[1, 1]] = 0.4;
        cos[[1, 3]] = 0.4; // tie: lower index wins
        // row 2 all zeros: index 0 wins
        let assigned = assign_clusters(&cos).unwrap();
        assert_eq!(assigned, vec![2, 1, 0]);
    }
}
