//! Complete search over trigger pixel values.
//!
//! A [`ReducedQuery`] fixes every pixel of a base image except the trigger
//! patch, leaving a network over `d` free variables in `[0,1]^d`. The
//! question "is there a patch that makes the network output `target` with
//! margin above `delta`?" is decided by best-first branch-and-bound over
//! boxes of that cube, pruning with forward linear bound propagation.
//!
//! Outcomes are three-valued: a witness ([`SolveStatus::Sat`]), a proof
//! that none exists outside the blocked regions ([`SolveStatus::Unsat`]), or
//! [`SolveStatus::Unknown`] when a budget ran out. Unsat is only returned
//! once the work queue is empty.

mod bab;
mod bounds;
mod query;
#[cfg(test)]
pub(crate) mod testutil;

pub use bab::{branch_and_bound, joint_branch_and_bound};
pub use bounds::{margin_bounds, margin_upper_bound, propagate_bounds, MarginBounds};
pub use query::{embed_query, embed_query_limited, ReducedQuery, DEFAULT_MAX_FREE_DIMS};

use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

/// Axis-aligned sub-box of `[0,1]^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub depth: usize,
}

impl SearchBox {
    pub fn unit(d: usize) -> Self {
        Self {
            lo: vec![0.0; d],
            hi: vec![1.0; d],
            depth: 0,
        }
    }

    pub fn point(v: &[f64]) -> Self {
        Self {
            lo: v.to_vec(),
            hi: v.to_vec(),
            depth: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn midpoint(&self) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(l, h)| 0.5 * (l + h))
            .collect()
    }

    /// Widest dimension; ties go to the lowest index.
    pub fn widest(&self) -> (usize, f64) {
        let mut best = (0, f64::NEG_INFINITY);
        for (i, (l, h)) in self.lo.iter().zip(&self.hi).enumerate() {
            if h - l > best.1 {
                best = (i, h - l);
            }
        }
        best
    }

    /// Bisects the widest dimension.
    pub fn split(&self) -> (Self, Self) {
        let (i, _) = self.widest();
        let mid = 0.5 * (self.lo[i] + self.hi[i]);
        let mut left = self.clone();
        let mut right = self.clone();
        left.hi[i] = mid;
        right.lo[i] = mid;
        left.depth += 1;
        right.depth += 1;
        (left, right)
    }

    /// The vertex that maximizes `coeffs · v`.
    pub fn maximizing_vertex(&self, coeffs: &[f64]) -> Vec<f64> {
        coeffs
            .iter()
            .zip(self.lo.iter().zip(&self.hi))
            .map(|(&c, (&l, &h))| if c > 0.0 { h } else { l })
            .collect()
    }
}

/// Open L∞ ball of excluded trigger values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockRegion {
    pub center: Vec<f64>,
    pub radius: f64,
}

impl BlockRegion {
    pub fn new(center: Vec<f64>, radius: f64) -> Self {
        assert!(radius > 0.0, "block radius must be positive");
        Self { center, radius }
    }

    pub fn contains_point(&self, v: &[f64]) -> bool {
        v.iter()
            .zip(&self.center)
            .all(|(x, c)| (x - c).abs() < self.radius)
    }

    pub fn contains_box(&self, b: &SearchBox) -> bool {
        b.lo
            .iter()
            .zip(&b.hi)
            .zip(&self.center)
            .all(|((l, h), c)| c - self.radius < *l && *h < c + self.radius)
    }
}

pub(crate) fn blocked(blocks: &[BlockRegion], v: &[f64]) -> bool {
    blocks.iter().any(|b| b.contains_point(v))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnknownReason {
    Timeout,
    NodeBudget,
    ResolutionFloor,
    /// Abandoned because an earlier query already succeeded.
    Cancelled,
}

impl fmt::Display for UnknownReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UnknownReason::Timeout => "timeout",
            UnknownReason::NodeBudget => "node-budget",
            UnknownReason::ResolutionFloor => "resolution-floor",
            UnknownReason::Cancelled => "cancelled",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SolveStatus {
    Sat { witness: Vec<f64>, margin: f64 },
    Unsat,
    Unknown(UnknownReason),
}

impl SolveStatus {
    pub fn is_sat(&self) -> bool {
        matches!(self, SolveStatus::Sat { .. })
    }
}

/// Shared "lowest successful index" cell; a search holding index `i`
/// gives up once some index below `i` has been recorded.
#[derive(Debug, Clone)]
pub struct CancelToken {
    winner: Arc<AtomicUsize>,
    index: usize,
}

impl CancelToken {
    pub fn new(winner: Arc<AtomicUsize>, index: usize) -> Self {
        Self { winner, index }
    }

    pub fn is_cancelled(&self) -> bool {
        self.winner.load(Ordering::Relaxed) < self.index
    }
}

#[derive(Debug, Clone)]
pub struct Budget {
    pub deadline: Option<Instant>,
    pub max_nodes: usize,
    /// Boxes whose widest side is below this are not split further.
    pub min_width: f64,
    pub cancel: Option<CancelToken>,
}

impl Default for Budget {
    fn default() -> Self {
        Self {
            deadline: None,
            max_nodes: 2_000_000,
            min_width: 1.0 / 512.0,
            cancel: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchStats {
    /// Boxes whose bounds were computed.
    pub nodes: usize,
    pub pruned: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    pub status: SolveStatus,
    pub stats: SearchStats,
}
