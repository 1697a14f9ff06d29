use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::time::Instant;

use super::bounds::margin_bounds;
use super::{
    blocked, BlockRegion, Budget, CancelToken, ReducedQuery, SearchBox, SearchStats, SolveResult, SolveStatus,
    UnknownReason,
};

struct Node {
    priority: f64,
    seq: u64,
    b: SearchBox,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Node {}

impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Node {
    // Max-heap: higher bound first, then earlier creation.
    fn cmp(&self, other: &Self) -> Ordering {
        self.priority
            .total_cmp(&other.priority)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

enum Assess {
    Found(Vec<f64>, f64),
    Prune,
    Keep(f64),
}

/// Shared best-first loop. `assess` computes bounds for one box, tries its
/// witness candidates, and decides whether it can be dropped.
fn search(
    d: usize,
    blocks: &[BlockRegion],
    budget: &Budget,
    mut assess: impl FnMut(&SearchBox) -> Assess,
) -> SolveResult {
    let mut stats = SearchStats::default();
    let mut heap = BinaryHeap::new();
    let mut seq = 0u64;
    let mut floor_hit = false;

    let mut visit = |b: SearchBox, heap: &mut BinaryHeap<Node>, stats: &mut SearchStats| {
        stats.nodes += 1;
        if blocks.iter().any(|r| r.contains_box(&b)) {
            stats.pruned += 1;
            log::trace!("blocked - {}", b.depth);
            return None;
        }
        match assess(&b) {
            Assess::Found(witness, margin) => {
                log::trace!("sat {margin:.6e} {}", b.depth);
                Some(SolveStatus::Sat { witness, margin })
            }
            Assess::Prune => {
                stats.pruned += 1;
                log::trace!("pruned - {}", b.depth);
                None
            }
            Assess::Keep(priority) => {
                log::trace!("open {priority:.6e} {}", b.depth);
                heap.push(Node { priority, seq, b });
                seq += 1;
                None
            }
        }
    };

    if let Some(status) = visit(SearchBox::unit(d), &mut heap, &mut stats) {
        return SolveResult { status, stats };
    }
    while let Some(node) = heap.pop() {
        if budget.deadline.is_some_and(|t| Instant::now() >= t) {
            return SolveResult {
                status: SolveStatus::Unknown(UnknownReason::Timeout),
                stats,
            };
        }
        if budget.cancel.as_ref().is_some_and(CancelToken::is_cancelled) {
            return SolveResult {
                status: SolveStatus::Unknown(UnknownReason::Cancelled),
                stats,
            };
        }
        if node.b.widest().1 < budget.min_width {
            floor_hit = true;
            continue;
        }
        if stats.nodes + 2 > budget.max_nodes {
            return SolveResult {
                status: SolveStatus::Unknown(UnknownReason::NodeBudget),
                stats,
            };
        }
        let (left, right) = node.b.split();
        for child in [left, right] {
            if let Some(status) = visit(child, &mut heap, &mut stats) {
                return SolveResult { status, stats };
            }
        }
    }
    let status = if floor_hit {
        SolveStatus::Unknown(UnknownReason::ResolutionFloor)
    } else {
        SolveStatus::Unsat
    };
    SolveResult { status, stats }
}

/// Searches `[0,1]^d` minus the open `blocks` for `v` with `q.margin(v) > q.delta()`.
pub fn branch_and_bound(q: &ReducedQuery, blocks: &[BlockRegion], budget: &Budget) -> SolveResult {
    let delta = q.delta();
    search(q.dim(), blocks, budget, |b| {
        let mb = margin_bounds(q, b);
        for cand in [b.midpoint(), mb.vertex] {
            if blocked(blocks, &cand) {
                continue;
            }
            let m = q.margin(&cand);
            if m > delta {
                return Assess::Found(cand, m);
            }
        }
        if mb.upper <= delta {
            Assess::Prune
        } else {
            Assess::Keep(mb.upper)
        }
    })
}

/// Searches for one `v` that pushes at least `qs.len() - k` of the queries
/// above their margin threshold.
///
/// The reported margin is the `need`-th largest concrete margin at the
/// witness. All queries must share the same free dimension.
pub fn joint_branch_and_bound(
    qs: &[ReducedQuery],
    k: usize,
    blocks: &[BlockRegion],
    budget: &Budget,
) -> SolveResult {
    let d = qs.first().map_or(0, ReducedQuery::dim);
    assert!(qs.iter().all(|q| q.dim() == d), "queries differ in dimension");
    let need = qs.len().saturating_sub(k);

    let score = |v: &[f64]| -> (usize, f64) {
        let mut margins: Vec<f64> = qs.iter().map(|q| q.margin(v)).collect();
        let hits = qs.iter().zip(&margins).filter(|(q, m)| **m > q.delta()).count();
        margins.sort_by(|a, b| b.total_cmp(a));
        let m = if need == 0 { f64::INFINITY } else { margins[need - 1] };
        (hits, m)
    };

    search(d, blocks, budget, |b| {
        let bounds: Vec<_> = qs.iter().map(|q| margin_bounds(q, b)).collect();
        let live: Vec<usize> = (0..qs.len())
            .filter(|&i| bounds[i].upper > qs[i].delta())
            .collect();
        let mut summed = vec![0.0; d];
        for &i in &live {
            for (s, c) in summed.iter_mut().zip(&bounds[i].lower_coeffs) {
                *s += c;
            }
        }
        for cand in [b.midpoint(), b.maximizing_vertex(&summed)] {
            if blocked(blocks, &cand) {
                continue;
            }
            let (hits, m) = score(&cand);
            if hits >= need {
                return Assess::Found(cand, m);
            }
        }
        if live.len() < need {
            return Assess::Prune;
        }
        let mut ubs: Vec<f64> = live.iter().map(|&i| bounds[i].upper).collect();
        ubs.sort_by(|a, b| b.total_cmp(a));
        Assess::Keep(if need == 0 { f64::INFINITY } else { ubs[need - 1] })
    })
}

#[cfg(test)]
mod tests {
    use super::super::testutil::random_query;
    use super::*;
    use crate::linalg::Matrix;
    use crate::model::AffineStage;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Two logits `(a v + b, 0)`, target 0, so `m(v) = a v + b`.
    fn line(a: f64, b: f64, delta: f64) -> ReducedQuery {
        ReducedQuery::from_stages(
            vec![AffineStage {
                matrix: Matrix::from_rows(&[vec![a], vec![0.0]]).unwrap(),
                bias: vec![b, 0.0],
                relu_after: false,
            }],
            0,
            delta,
        )
        .unwrap()
    }

    #[test]
    fn dominated_target_pruned_at_root() {
        let q = ReducedQuery::from_stages(
            vec![AffineStage {
                matrix: Matrix::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap(),
                bias: vec![-1.0, 0.0],
                relu_after: false,
            }],
            0,
            1e-6,
        )
        .unwrap();
        let r = branch_and_bound(&q, &[], &Budget::default());
        assert_eq!(r.status, SolveStatus::Unsat);
        assert_eq!(r.stats.nodes, 1);
    }

    #[test]
    fn linear_margin_sat() {
        let q = line(4.0, -2.0, 0.0);
        let r = branch_and_bound(&q, &[], &Budget::default());
        let SolveStatus::Sat { witness, margin } = r.status else {
            panic!("expected sat, got {:?}", r.status);
        };
        assert!(witness[0] > 0.5);
        assert!((q.margin(&witness) - margin).abs() < 1e-12 && margin > 0.0);
        let grid = (0..=256).any(|i| 4.0 * (f64::from(i) / 256.0) - 2.0 > 0.0);
        assert!(grid);
    }

    #[test]
    fn feasible_set_inside_block_is_unsat() {
        let q = line(4.0, -2.0, 0.0);
        let block = BlockRegion::new(vec![1.0], 0.6);
        let r = branch_and_bound(&q, std::slice::from_ref(&block), &Budget::default());
        assert_eq!(r.status, SolveStatus::Unsat);
        let grid_sat = (0..=256)
            .map(|i| f64::from(i) / 256.0)
            .any(|v| 4.0 * v - 2.0 > 0.0 && !block.contains_point(&[v]));
        assert!(!grid_sat);
    }

    #[test]
    fn joint_disjoint_halves() {
        let qs = [line(1.0, -0.75, 0.0), line(-1.0, 0.25, 0.0)];
        let r0 = joint_branch_and_bound(&qs, 0, &[], &Budget::default());
        assert_eq!(r0.status, SolveStatus::Unsat);
        let r1 = joint_branch_and_bound(&qs, 1, &[], &Budget::default());
        let SolveStatus::Sat { witness, .. } = r1.status else {
            panic!("expected sat");
        };
        let v = witness[0];
        assert!(!(0.25..=0.75).contains(&v));
        let grid_both = (0..=256)
            .map(|i| f64::from(i) / 256.0)
            .any(|v| v - 0.75 > 0.0 && -v + 0.25 > 0.0);
        assert!(!grid_both);
    }

    #[test]
    fn joint_single_easy_query() {
        let qs = [line(0.0, 1.0, 0.0), line(0.0, -1.0, 0.0), line(0.0, -2.0, 0.0)];
        let r = joint_branch_and_bound(&qs, 2, &[], &Budget::default());
        assert!(r.status.is_sat());
        let r = joint_branch_and_bound(&qs, 1, &[], &Budget::default());
        assert_eq!(r.status, SolveStatus::Unsat);
    }

    #[test]
    fn node_budget_and_floor_are_unknown() {
        // m(v) = relu(2v - 0.8) - relu(2v - 0.8) is identically zero, but the
        // relaxation never proves it on boxes straddling v = 0.4.
        let q = ReducedQuery::from_stages(
            vec![
                AffineStage {
                    matrix: Matrix::from_rows(&[vec![2.0], vec![2.0]]).unwrap(),
                    bias: vec![-0.8, -0.8],
                    relu_after: true,
                },
                AffineStage {
                    matrix: Matrix::from_rows(&[vec![1.0, -1.0], vec![0.0, 0.0]]).unwrap(),
                    bias: vec![0.0, 0.0],
                    relu_after: false,
                },
            ],
            0,
            0.0,
        )
        .unwrap();
        let tight = Budget {
            max_nodes: 1,
            ..Budget::default()
        };
        let r = branch_and_bound(&q, &[], &tight);
        assert_eq!(r.status, SolveStatus::Unknown(UnknownReason::NodeBudget));
        let coarse = Budget {
            min_width: 0.3,
            ..Budget::default()
        };
        let r = branch_and_bound(&q, &[], &coarse);
        assert_eq!(r.status, SolveStatus::Unknown(UnknownReason::ResolutionFloor));
        let past = Budget {
            deadline: Some(Instant::now()),
            ..Budget::default()
        };
        let r = branch_and_bound(&q, &[], &past);
        assert_eq!(r.status, SolveStatus::Unknown(UnknownReason::Timeout));
    }

    /// Random query whose target bias is shifted so the margin at the centre
    /// sits near zero.
    fn balanced_query(rng: &mut impl Rng, d: usize) -> ReducedQuery {
        let layers: Vec<usize> = (0..rng.gen_range(1..=2)).map(|_| rng.gen_range(2..=16)).collect();
        let q = random_query(rng, d, &layers, 3);
        let m0 = q.margin(&vec![0.5; d]);
        let mut stages: Vec<AffineStage> = q.stages().cloned().collect();
        let last = stages.last_mut().unwrap();
        last.bias[q.target()] += -m0 + rng.gen_range(-0.3..0.3);
        ReducedQuery::from_stages(stages, q.target(), 1e-6).unwrap()
    }

    fn grid_best(q: &ReducedQuery, steps: usize) -> f64 {
        let d = q.dim();
        let total = (steps + 1).pow(d as u32);
        let mut v = vec![0.0; d];
        let mut best = f64::NEG_INFINITY;
        for mut idx in 0..total {
            for x in v.iter_mut() {
                *x = (idx % (steps + 1)) as f64 / steps as f64;
                idx /= steps + 1;
            }
            best = best.max(q.margin(&v));
        }
        best
    }

    #[test]
    fn agrees_with_grid_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5150);
        let (mut sat, mut unsat) = (0, 0);
        for _ in 0..60 {
            let d = rng.gen_range(1..=3);
            let q = balanced_query(&mut rng, d);
            let best = grid_best(&q, 64);
            let r = branch_and_bound(&q, &[], &Budget::default());
            if let SolveStatus::Sat { witness, margin } = &r.status {
                assert!(*margin > q.delta() && (q.margin(witness) - margin).abs() < 1e-12);
            }
            if best > q.delta() + 1e-3 {
                assert!(r.status.is_sat(), "grid best {best}, got {:?}", r.status);
                sat += 1;
            } else if best < q.delta() - 1e-3 {
                assert_eq!(r.status, SolveStatus::Unsat, "grid best {best}");
                unsat += 1;
            } else {
                assert!(!matches!(r.status, SolveStatus::Unsat) || best <= q.delta());
            }
        }
        assert!(sat > 5 && unsat > 5, "sat {sat} unsat {unsat}");
    }

    #[test]
    fn single_worker_runs_repeat_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let q = balanced_query(&mut rng, 3);
            let a = branch_and_bound(&q, &[], &Budget::default());
            let b = branch_and_bound(&q, &[], &Budget::default());
            assert_eq!(a, b);
        }
    }
}
