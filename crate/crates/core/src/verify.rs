//! The search loop over suite inputs, trigger positions and target labels.
//!
//! In [`SearchMode::Iterative`] each `(input, region, label)` query solves
//! for a patch that flips one base image, checks that the patch generalizes
//! to the rest of the suite, and otherwise blocks a ball around it and
//! solves again. [`SearchMode::Joint`] replaces the per-image loop with a
//! single search over the whole suite for each `(region, label)`.
//!
//! Only proven Unsat results count towards a poison-free verdict; timeouts
//! and exhausted budgets surface as [`Verdict::Inconclusive`].

use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::TestSuite;
use crate::error::{Error, Result};
use crate::model::{margin_of, AffineNetwork, Image, Network};
use crate::solver::{
    branch_and_bound, embed_query_limited, joint_branch_and_bound, BlockRegion, Budget,
    CancelToken, ReducedQuery, SearchStats, SolveStatus, UnknownReason,
};
use crate::trigger::{apply_trigger, enumerate_regions, TriggerAssignment, TriggerRegion, TriggerSpec};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SearchMode {
    #[default]
    Iterative,
    Joint,
}

impl FromStr for SearchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iterative" => Ok(SearchMode::Iterative),
            "joint" => Ok(SearchMode::Joint),
            other => Err(Error::Config(format!("unknown search mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VpnConfig {
    /// Suite members a trigger may fail on.
    pub k: usize,
    pub trigger_size: usize,
    pub stride: usize,
    /// Classification as the target requires a margin above this.
    pub delta: f64,
    /// Seconds.
    pub per_query_time: f64,
    /// Seconds; unbounded when absent.
    pub total_time: Option<f64>,
    /// Radius of the ball blocked around a non-generalizing assignment.
    pub r_excl: f64,
    pub mode: SearchMode,
    /// Explicit label order; all labels by suite frequency when absent.
    pub label_order: Option<Vec<usize>>,
    /// Defer labels already predicted for at least `|T| - k` members.
    pub skip_vacuous_labels: bool,
    /// In iterative mode, skip the base image's own label.
    pub skip_base_label: bool,
    pub max_iterative_rounds: usize,
    pub min_width: f64,
    pub max_nodes: usize,
    pub max_free_dims: usize,
    /// Prefer assignments rounded to multiples of 1/255 when they still
    /// generalize.
    pub quantize: bool,
    pub workers: usize,
}

impl Default for VpnConfig {
    fn default() -> Self {
        Self {
            k: 0,
            trigger_size: 3,
            stride: 1,
            delta: 1e-6,
            per_query_time: 1800.0,
            total_time: None,
            r_excl: 0.05,
            mode: SearchMode::Iterative,
            label_order: None,
            skip_vacuous_labels: true,
            skip_base_label: false,
            max_iterative_rounds: 100,
            min_width: 1.0 / 512.0,
            max_nodes: 2_000_000,
            max_free_dims: crate::solver::DEFAULT_MAX_FREE_DIMS,
            quantize: false,
            workers: 1,
        }
    }
}

impl VpnConfig {
    // Negated comparisons so that NaN is rejected too.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self, net: &Network, suite_len: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if suite_len == 0 {
            return bad("test suite is empty".into());
        }
        if self.k >= suite_len {
            return bad(format!("k = {} must be below the suite size {suite_len}", self.k));
        }
        let shape = net.input_shape();
        if self.trigger_size == 0 || self.trigger_size > shape.height.min(shape.width) {
            return bad(format!(
                "trigger size {} does not fit a {shape} input",
                self.trigger_size
            ));
        }
        let d = self.trigger_size * self.trigger_size * shape.channels;
        if d > self.max_free_dims {
            return bad(format!(
                "trigger has {d} free values, above the limit of {}",
                self.max_free_dims
            ));
        }
        if self.stride == 0 {
            return bad("stride must be at least 1".into());
        }
        if !self.delta.is_finite() || self.delta < 0.0 {
            return bad(format!("delta {} must be finite and non-negative", self.delta));
        }
        if !(self.per_query_time > 0.0) || self.total_time.is_some_and(|t| !(t > 0.0)) {
            return bad("time budgets must be positive".into());
        }
        if !(self.r_excl > 0.0) {
            return bad("r_excl must be positive".into());
        }
        if !(self.min_width > 0.0) || self.max_nodes == 0 || self.max_iterative_rounds == 0 {
            return bad("solver budgets must be positive".into());
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        if let Some(order) = &self.label_order {
            let mut seen = vec![false; net.label_count()];
            for &l in order {
                if l >= net.label_count() || std::mem::replace(&mut seen[l], true) {
                    return bad(format!("label order entry {l} is out of range or repeated"));
                }
            }
        }
        Ok(())
    }

    fn budget(&self, deadline: Option<Instant>, cancel: Option<CancelToken>) -> Budget {
        Budget {
            deadline,
            max_nodes: self.max_nodes,
            min_width: self.min_width,
            cancel,
        }
    }
}

/// Box width and block radius a poison-free proof holds at.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Resolution {
    pub min_width: f64,
    pub r_excl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Verdict {
    Poisoned {
        trigger: TriggerSpec,
        target: usize,
        successes: usize,
        misses: usize,
        /// The target was already predicted for enough members that any
        /// harmless patch qualifies.
        vacuous: bool,
    },
    PoisonFree {
        n_unsat: usize,
        resolution: Resolution,
    },
    Inconclusive {
        unknown_count: usize,
    },
}

impl Verdict {
    pub fn kind(&self) -> &'static str {
        match self {
            Verdict::Poisoned { .. } => "poisoned",
            Verdict::PoisonFree { .. } => "poison-free",
            Verdict::Inconclusive { .. } => "inconclusive",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum QueryStatus {
    Sat {
        values: TriggerAssignment,
        successes: usize,
        misses: usize,
    },
    /// Every round found values that flipped the base image but missed too
    /// many other members.
    SatNotGeneral { best_misses: Option<usize> },
    Unsat,
    Unknown { reason: UnknownReason },
}

impl QueryStatus {
    pub fn is_sat(&self) -> bool {
        matches!(self, QueryStatus::Sat { .. })
    }

    fn is_unknown(&self) -> bool {
        matches!(self, QueryStatus::SatNotGeneral { .. } | QueryStatus::Unknown { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    /// Base image index within the suite; absent for joint queries.
    pub input: Option<usize>,
    pub region: TriggerRegion,
    pub target: usize,
    pub status: QueryStatus,
    /// Solver invocations.
    pub rounds: usize,
    pub nodes: usize,
    pub pruned: usize,
    /// Seconds.
    pub wall_time: f64,
}

/// Counts suite members classified as `target` once the trigger is applied.
pub fn generalization_check(
    net: &Network,
    suite: &TestSuite,
    region: &TriggerRegion,
    assignment: &TriggerAssignment,
    target: usize,
) -> Result<(usize, usize)> {
    let mut successes = 0;
    for m in &suite.members {
        let poisoned = apply_trigger(&m.image, region, assignment)?;
        if net.predict(&poisoned)?.label == target {
            successes += 1;
        }
    }
    Ok((successes, suite.len() - successes))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveAttempt {
    pub status: QueryStatus,
    pub rounds: usize,
    pub stats: SearchStats,
}

/// Solves for a patch on `x` alone, retrying with blocked balls until one
/// generalizes to the suite or the search is exhausted.
pub fn solve_trigger_for_label(
    net: &Network,
    suite: &TestSuite,
    k: usize,
    x: &Image,
    region: &TriggerRegion,
    target: usize,
    cfg: &VpnConfig,
) -> Result<SolveAttempt> {
    let cfg = VpnConfig {
        k,
        trigger_size: region.size,
        ..cfg.clone()
    };
    cfg.validate(net, suite.len())?;
    let ctx = Context::new(net, suite, &cfg)?;
    let deadline = ctx.query_deadline(Instant::now());
    ctx.solve_iterative(x, region, target, deadline, None)
}

/// Runs the full search and returns the verdict with every visited query.
pub fn vpn_verify(
    net: &Network,
    suite: &TestSuite,
    cfg: &VpnConfig,
) -> Result<(Verdict, Vec<QueryOutcome>)> {
    cfg.validate(net, suite.len())?;
    let ctx = Context::new(net, suite, cfg)?;
    let regions = enumerate_regions(net.input_shape(), cfg.trigger_size, cfg.stride)?;

    let mut counts = vec![0usize; net.label_count()];
    for m in &suite.members {
        counts[net.predict(&m.image)?.label] += 1;
    }
    let order = match &cfg.label_order {
        Some(order) => order.clone(),
        None => {
            let mut all: Vec<usize> = (0..net.label_count()).collect();
            all.sort_by_key(|&l| (std::cmp::Reverse(counts[l]), l));
            all
        }
    };
    let threshold = suite.len() - cfg.k;
    let (vacuous, active): (Vec<usize>, Vec<usize>) = order
        .iter()
        .partition(|&&l| cfg.skip_vacuous_labels && counts[l] >= threshold);
    if !vacuous.is_empty() {
        log::info!("deferring vacuous labels {vacuous:?}");
    }

    let mut outcomes = Vec::new();
    let first = ctx.run_labels(&regions, &active, !vacuous.is_empty(), &mut outcomes)?;
    let verdict = match first {
        Some(v) => v,
        None if !vacuous.is_empty() && !ctx.expired() => {
            match ctx.run_labels(&regions, &vacuous, true, &mut outcomes)? {
                Some(Verdict::Poisoned {
                    trigger,
                    target,
                    successes,
                    misses,
                    ..
                }) => Verdict::Poisoned {
                    trigger,
                    target,
                    successes,
                    misses,
                    vacuous: true,
                },
                _ => ctx.inconclusive(&outcomes),
            }
        }
        None => ctx.inconclusive(&outcomes),
    };
    log::info!("verdict: {}", verdict.kind());
    Ok((verdict, outcomes))
}

#[derive(Debug, Clone, Copy)]
struct Task {
    input: Option<usize>,
    region: TriggerRegion,
    target: usize,
}

struct Context<'a> {
    net: &'a Network,
    affine: Arc<AffineNetwork>,
    suite: &'a TestSuite,
    cfg: &'a VpnConfig,
    deadline: Option<Instant>,
    pool: Option<rayon::ThreadPool>,
}

impl<'a> Context<'a> {
    fn new(net: &'a Network, suite: &'a TestSuite, cfg: &'a VpnConfig) -> Result<Self> {
        let pool = if cfg.workers > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(cfg.workers)
                    .build()
                    .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?,
            )
        } else {
            None
        };
        Ok(Self {
            net,
            affine: Arc::new(net.lower_to_affine()),
            suite,
            cfg,
            deadline: cfg
                .total_time
                .map(|t| Instant::now() + Duration::from_secs_f64(t)),
            pool,
        })
    }

    fn expired(&self) -> bool {
        self.deadline.is_some_and(|t| Instant::now() >= t)
    }

    fn query_deadline(&self, start: Instant) -> Option<Instant> {
        let own = start.checked_add(Duration::from_secs_f64(self.cfg.per_query_time));
        match (own, self.deadline) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    fn inconclusive(&self, outcomes: &[QueryOutcome]) -> Verdict {
        Verdict::Inconclusive {
            unknown_count: outcomes.iter().filter(|o| o.status.is_unknown()).count(),
        }
    }

    /// One pass of the search over `labels`; `None` when neither a trigger
    /// nor a proof was found.
    fn run_labels(
        &self,
        regions: &[TriggerRegion],
        labels: &[usize],
        labels_skipped: bool,
        outcomes: &mut Vec<QueryOutcome>,
    ) -> Result<Option<Verdict>> {
        match self.cfg.mode {
            SearchMode::Joint => {
                let tasks: Vec<Task> = regions
                    .iter()
                    .flat_map(|&region| {
                        labels.iter().map(move |&target| Task {
                            input: None,
                            region,
                            target,
                        })
                    })
                    .collect();
                let (found, group) = self.run_group(&tasks)?;
                let all_unsat = group.iter().all(|o| o.status == QueryStatus::Unsat);
                outcomes.extend(group);
                if found.is_some() {
                    return Ok(found);
                }
                if all_unsat && !labels_skipped && !self.expired() {
                    return Ok(Some(self.poison_free(self.suite.len())));
                }
                Ok(None)
            }
            SearchMode::Iterative => {
                let mut n_unsat = 0;
                for (i, member) in self.suite.members.iter().enumerate() {
                    if self.expired() {
                        log::info!("total time exhausted before input {i}");
                        break;
                    }
                    let mut skipped = labels_skipped;
                    let mut tasks = Vec::new();
                    for &region in regions {
                        for &target in labels {
                            if self.cfg.skip_base_label && target == member.label {
                                skipped = true;
                                continue;
                            }
                            tasks.push(Task {
                                input: Some(i),
                                region,
                                target,
                            });
                        }
                    }
                    let (found, group) = self.run_group(&tasks)?;
                    let all_unsat = group.iter().all(|o| o.status == QueryStatus::Unsat);
                    log::info!(
                        "input {i}: {} queries, all unsat: {all_unsat}",
                        group.len()
                    );
                    outcomes.extend(group);
                    if found.is_some() {
                        return Ok(found);
                    }
                    if all_unsat && !skipped {
                        n_unsat += 1;
                        if n_unsat > self.cfg.k {
                            return Ok(Some(self.poison_free(n_unsat)));
                        }
                    }
                }
                Ok(None)
            }
        }
    }

    fn poison_free(&self, n_unsat: usize) -> Verdict {
        Verdict::PoisonFree {
            n_unsat,
            resolution: Resolution {
                min_width: self.cfg.min_width,
                r_excl: self.cfg.r_excl,
            },
        }
    }

    /// Runs `tasks` in order, stopping at the first success. With several
    /// workers the lowest-index success wins, so the result matches the
    /// sequential run whenever no budget runs out.
    fn run_group(&self, tasks: &[Task]) -> Result<(Option<Verdict>, Vec<QueryOutcome>)> {
        let outcomes: Vec<QueryOutcome> = match &self.pool {
            None => {
                let mut out = Vec::new();
                for t in tasks {
                    let o = self.run_task(t, None)?;
                    let done = o.status.is_sat();
                    out.push(o);
                    if done || self.expired() {
                        break;
                    }
                }
                out
            }
            Some(pool) => {
                let winner = Arc::new(AtomicUsize::new(usize::MAX));
                let results: Vec<Option<Result<QueryOutcome>>> = pool.install(|| {
                    tasks
                        .par_iter()
                        .enumerate()
                        .map(|(i, t)| {
                            if winner.load(Ordering::Relaxed) < i {
                                return None;
                            }
                            let token = CancelToken::new(Arc::clone(&winner), i);
                            let o = self.run_task(t, Some(token));
                            if o.as_ref().is_ok_and(|o| o.status.is_sat()) {
                                winner.fetch_min(i, Ordering::Relaxed);
                            }
                            Some(o)
                        })
                        .collect()
                });
                let last = winner.load(Ordering::Relaxed);
                let mut out = Vec::new();
                for (i, r) in results.into_iter().enumerate() {
                    if i > last {
                        break;
                    }
                    match r {
                        Some(o) => out.push(o?),
                        None => break,
                    }
                }
                out
            }
        };
        let found = outcomes.last().and_then(|o| match &o.status {
            QueryStatus::Sat {
                values,
                successes,
                misses,
            } => Some(Verdict::Poisoned {
                trigger: TriggerSpec::new(&o.region, values),
                target: o.target,
                successes: *successes,
                misses: *misses,
                vacuous: false,
            }),
            _ => None,
        });
        Ok((found, outcomes))
    }

    fn run_task(&self, t: &Task, cancel: Option<CancelToken>) -> Result<QueryOutcome> {
        let start = Instant::now();
        let deadline = self.query_deadline(start);
        let attempt = match t.input {
            Some(i) => self.solve_iterative(
                &self.suite.members[i].image,
                &t.region,
                t.target,
                deadline,
                cancel,
            )?,
            None => self.solve_joint(&t.region, t.target, deadline, cancel)?,
        };
        log::debug!(
            "input {:?} region ({},{}) label {}: {:?} after {} rounds",
            t.input,
            t.region.row,
            t.region.col,
            t.target,
            attempt.status,
            attempt.rounds
        );
        Ok(QueryOutcome {
            input: t.input,
            region: t.region,
            target: t.target,
            status: attempt.status,
            rounds: attempt.rounds,
            nodes: attempt.stats.nodes,
            pruned: attempt.stats.pruned,
            wall_time: start.elapsed().as_secs_f64(),
        })
    }

    fn embed(&self, base: &Image, region: &TriggerRegion, target: usize) -> Result<ReducedQuery> {
        embed_query_limited(
            &self.affine,
            base,
            region,
            target,
            self.cfg.delta,
            self.cfg.max_free_dims,
        )
    }

    /// Generalization check of a solver witness, trying the 8-bit rounding
    /// first when configured. `None` when the witness fails on the concrete
    /// network.
    fn accept(
        &self,
        region: &TriggerRegion,
        target: usize,
        witness: &[f64],
        base: Option<&Image>,
    ) -> Result<(TriggerAssignment, usize, usize)> {
        let exact = TriggerAssignment::clamped(witness.to_vec());
        if self.cfg.quantize {
            let q = exact.quantized();
            let flips_base = match base {
                Some(x) => self.flips(x, region, &q, target)?,
                None => true,
            };
            if flips_base {
                let (s, m) = generalization_check(self.net, self.suite, region, &q, target)?;
                if m <= self.cfg.k {
                    return Ok((q, s, m));
                }
            }
        }
        let (s, m) = generalization_check(self.net, self.suite, region, &exact, target)?;
        Ok((exact, s, m))
    }

    fn flips(
        &self,
        x: &Image,
        region: &TriggerRegion,
        values: &TriggerAssignment,
        target: usize,
    ) -> Result<bool> {
        let logits = self.net.forward(&apply_trigger(x, region, values)?)?;
        Ok(margin_of(logits.values(), target) > self.cfg.delta)
    }

    fn solve_iterative(
        &self,
        x: &Image,
        region: &TriggerRegion,
        target: usize,
        deadline: Option<Instant>,
        cancel: Option<CancelToken>,
    ) -> Result<SolveAttempt> {
        let q = self.embed(x, region, target)?;
        let budget = self.cfg.budget(deadline, cancel);
        self.refine(region, target, budget, Some(x), |blocks, budget| {
            branch_and_bound(&q, blocks, budget)
        })
    }

    fn solve_joint(
        &self,
        region: &TriggerRegion,
        target: usize,
        deadline: Option<Instant>,
        cancel: Option<CancelToken>,
    ) -> Result<SolveAttempt> {
        let qs = self
            .suite
            .members
            .iter()
            .map(|m| self.embed(&m.image, region, target))
            .collect::<Result<Vec<_>>>()?;
        let budget = self.cfg.budget(deadline, cancel);
        let k = self.cfg.k;
        self.refine(region, target, budget, None, |blocks, budget| {
            joint_branch_and_bound(&qs, k, blocks, budget)
        })
    }

    /// Solve, check, block, repeat.
    fn refine(
        &self,
        region: &TriggerRegion,
        target: usize,
        budget: Budget,
        base: Option<&Image>,
        mut solve: impl FnMut(&[BlockRegion], &Budget) -> crate::solver::SolveResult,
    ) -> Result<SolveAttempt> {
        let mut blocks = Vec::new();
        let mut stats = SearchStats::default();
        let mut best_misses: Option<usize> = None;
        for round in 1..=self.cfg.max_iterative_rounds {
            let r = solve(&blocks, &budget);
            stats.nodes += r.stats.nodes;
            stats.pruned += r.stats.pruned;
            let status = match r.status {
                SolveStatus::Unsat => QueryStatus::Unsat,
                SolveStatus::Unknown(reason) => QueryStatus::Unknown { reason },
                SolveStatus::Sat { witness, .. } => {
                    let valid = match base {
                        Some(x) => self.flips(
                            x,
                            region,
                            &TriggerAssignment::clamped(witness.clone()),
                            target,
                        )?,
                        None => true,
                    };
                    if valid {
                        let (values, successes, misses) =
                            self.accept(region, target, &witness, base)?;
                        if misses <= self.cfg.k {
                            return Ok(SolveAttempt {
                                status: QueryStatus::Sat {
                                    values,
                                    successes,
                                    misses,
                                },
                                rounds: round,
                                stats,
                            });
                        }
                        best_misses = Some(best_misses.map_or(misses, |b| b.min(misses)));
                    }
                    blocks.push(BlockRegion::new(witness, self.cfg.r_excl));
                    continue;
                }
            };
            return Ok(SolveAttempt {
                status,
                rounds: round,
                stats,
            });
        }
        Ok(SolveAttempt {
            status: QueryStatus::SatNotGeneral { best_misses },
            rounds: self.cfg.max_iterative_rounds,
            stats,
        })
    }
}
