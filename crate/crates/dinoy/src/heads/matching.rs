//! Hungarian set matching between predicted queries and ground-truth objects.

use ndarray::Array2;

use crate::error::{Error, Result};

use super::boxes::giou;
use super::classify::{focal_cost, FOCAL_ALPHA, FOCAL_GAMMA};

#[derive(Clone, Copy, Debug)]
pub struct MatchWeights {
    pub cls: f32,
    pub l1: f32,
    pub giou: f32,
}

impl Default for MatchWeights {
    fn default() -> Self {
        MatchWeights {
            cls: 2.0,
            l1: 5.0,
            giou: 2.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MatchResult {
    /// `(query_index, gt_index)` sorted by query index; one pair per object
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_queries: Vec<usize>,
}

/// Minimum-cost assignment for an `n × m` cost matrix with `n ≤ m`; returns
/// the column assigned to each row. Shortest-augmenting-path formulation
/// with row/column potentials, O(n²·m).
fn lap_min(cost: &Array2<f64>) -> Vec<usize> {
    let (n, m) = cost.dim();
    assert!(n <= m && n > 0);
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut row_of = vec![0usize; m + 1]; // 1-based row matched to each column
    let mut way = vec![0usize; m + 1];

    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assigned = vec![usize::MAX; n];
    for j in 1..=m {
        if row_of[j] != 0 {
            assigned[row_of[j] - 1] = j - 1;
        }
    }
    debug_assert!(assigned.iter().all(|&c| c != usize::MAX));
    assigned
}

/// Match queries to ground-truth objects by minimizing focal + L1 + GIoU
/// cost. `pred_logits` is `[Q, P]` over phrases, `gt_phrase[g]` the phrase
/// column of object `g`.
pub fn hungarian_match(
    pred_boxes: &Array2<f32>,
    pred_logits: &Array2<f32>,
    gt_boxes: &Array2<f32>,
    gt_phrase: &[usize],
    weights: &MatchWeights,
) -> Result<MatchResult> {
    let q = pred_boxes.nrows();
    let g = gt_boxes.nrows();
    if g == 0 {
        return Ok(MatchResult {
            pairs: Vec::new(),
            unmatched_queries: (0..q).collect(),
        });
    }
    if q < g {
        return Err(Error::Config(format!(
            "cannot match {g} objects against only {q} queries"
        )));
    }
    for (gi, &p) in gt_phrase.iter().enumerate() {
        if p >= pred_logits.ncols() {
            return Err(Error::Config(format!(
                "object {gi} references phrase {p} but logits cover {}",
                pred_logits.ncols()
            )));
        }
    }

    let mut cost = Array2::<f64>::zeros((g, q));
    for gi in 0..g {
        let gb = [
            gt_boxes[[gi, 0]],
            gt_boxes[[gi, 1]],
            gt_boxes[[gi, 2]],
            gt_boxes[[gi, 3]],
        ];
        for qi in 0..q {
            let pb = [
                pred_boxes[[qi, 0]],
                pred_boxes[[qi, 1]],
                pred_boxes[[qi, 2]],
                pred_boxes[[qi, 3]],
            ];
            let cls = focal_cost(pred_logits[[qi, gt_phrase[gi]]], FOCAL_GAMMA, FOCAL_ALPHA);
            let l1: f32 = pb.iter().zip(gb).map(|(a, b)| (a - b).abs()).sum();
            let gv = giou(pb, gb)?;
            cost[[gi, qi]] = (weights.cls * cls + weights.l1 * l1 + weights.giou * (1.0 - gv))
                as f64;
        }
    }

    let assigned = lap_min(&cost);
    let mut pairs: Vec<(usize, usize)> = assigned
        .iter()
        .enumerate()
        .map(|(gi, &qi)| (qi, gi))
        .collect();
    pairs.sort_unstable();
    let matched: std::collections::HashSet<usize> = pairs.iter().map(|&(q, _)| q).collect();
    let unmatched_queries = (0..q).filter(|qi| !matched.contains(qi)).collect();
    Ok(MatchResult {
        pairs,
        unmatched_queries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_query_single_object() {
        let boxes = arr2(&[[0.5f32, 0.5, 0.2, 0.2]]);
        let logits = arr2(&[[1.0f32]]);
        let gt = arr2(&[[0.4f32, 0.4, 0.3, 0.3]]);
        let m = hungarian_match(&boxes, &logits, &gt, &[0], &MatchWeights::default()).unwrap();
        assert_eq!(m.pairs, vec![(0, 0)]);
        assert!(m.unmatched_queries.is_empty());
    }

    #[test]
    fn unique_zero_cells_are_forced() {
        // diagonal-dominant cost: row i has its unique cheap column at i
        let mut cost = Array2::<f64>::from_elem((4, 6), 10.0);
        for i in 0..4 {
            cost[[i, i]] = 0.0;
        }
        assert_eq!(lap_min(&cost), vec![0, 1, 2, 3]);
    }

    #[test]
    fn matches_brute_force_on_random_square_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let mut cost = Array2::<f64>::zeros((6, 6));
            for v in cost.iter_mut() {
                *v = rng.random_range(0.0..1.0f64);
            }
            let assigned = lap_min(&cost);
            let fast: f64 = assigned
                .iter()
                .enumerate()
                .map(|(r, &c)| cost[[r, c]])
                .sum();

            let mut cols = [0usize, 1, 2, 3, 4, 5];
            let mut best = f64::INFINITY;
            permute(&mut cols, 0, &mut |perm| {
                let total: f64 = perm.iter().enumerate().map(|(r, &c)| cost[[r, c]]).sum();
                if total < best {
                    best = total;
                }
            });
            assert!(
                (fast - best).abs() < 1e-9,
                "solver {fast} vs brute force {best}"
            );
        }
    }

    fn permute(items: &mut [usize; 6], k: usize, visit: &mut impl FnMut(&[usize; 6])) {
        if k == items.len() {
            visit(items);
            return;
        }
        for i in k..items.len() {
            items.swap(k, i);
            permute(items, k + 1, visit);
            items.swap(k, i);
        }
    }

    #[test]
    fn too_few_queries_is_an_error() {
        let boxes = arr2(&[[0.5f32, 0.5, 0.2, 0.2]]);
        let logits = arr2(&[[1.0f32]]);
        let gt = arr2(&[[0.4f32, 0.4, 0.3, 0.3], [0.7, 0.7, 0.1, 0.1]]);
        assert!(
            hungarian_match(&boxes, &logits, &gt, &[0, 0], &MatchWeights::default()).is_err()
        );
    }

    #[test]
    fn assignment_is_injective_and_covers_every_object() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..50 {
            let q = 12;
            let g = rng.random_range(1..=8usize);
            let mut boxes = Array2::<f32>::zeros((q, 4));
            for i in 0..q {
                boxes[[i, 0]] = rng.random_range(0.2..0.8);
                boxes[[i, 1]] = rng.random_range(0.2..0.8);
                boxes[[i, 2]] = rng.random_range(0.05..0.3);
                boxes[[i, 3]] = rng.random_range(0.05..0.3);
            }
            let mut logits = Array2::<f32>::zeros((q, 3));
            for v in logits.iter_mut() {
                *v = rng.random_range(-2.0..2.0);
            }
            let mut gt = Array2::<f32>::zeros((g, 4));
            let mut phrases = Vec::new();
            for i in 0..g {
                gt[[i, 0]] = rng.random_range(0.2..0.8);
                gt[[i, 1]] = rng.random_range(0.2..0.8);
                gt[[i, 2]] = rng.random_range(0.05..0.3);
                gt[[i, 3]] = rng.random_range(0.05..0.3);
                phrases.push(rng.random_range(0..3usize));
            }
            let m =
                hungarian_match(&boxes, &logits, &gt, &phrases, &MatchWeights::default()).unwrap();
            assert_eq!(m.pairs.len(), g);
            let qs: std::collections::HashSet<_> = m.pairs.iter().map(|&(q, _)| q).collect();
            let gs: std::collections::HashSet<_> = m.pairs.iter().map(|&(_, g)| g).collect();
            assert_eq!(qs.len(), g);
            assert_eq!(gs.len(), g);
            assert_eq!(m.unmatched_queries.len(), q - g);
        }
    }
}
