//! JSON run report written by the command-line tool.

use serde::{Deserialize, Serialize};

use crate::eval::AttackReport;
use crate::verify::{QueryOutcome, QueryStatus, Verdict};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolverStats {
    pub queries: usize,
    pub solver_calls: usize,
    pub nodes: usize,
    pub pruned: usize,
    pub sat: usize,
    pub sat_not_general: usize,
    pub unsat: usize,
    pub unknown: usize,
}

impl SolverStats {
    pub fn from_outcomes(outcomes: &[QueryOutcome]) -> Self {
        let mut s = Self::default();
        for o in outcomes {
            s.queries += 1;
            s.solver_calls += o.rounds;
            s.nodes += o.nodes;
            s.pruned += o.pruned;
            match o.status {
                QueryStatus::Sat { .. } => s.sat += 1,
                QueryStatus::SatNotGeneral { .. } => s.sat_not_general += 1,
                QueryStatus::Unsat => s.unsat += 1,
                QueryStatus::Unknown { .. } => s.unknown += 1,
            }
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub tool_version: String,
    pub command: String,
    /// Everything needed to repeat the run, including the suite seed.
    pub config: serde_json::Value,
    #[serde(default)]
    pub suite_indices: Vec<usize>,
    #[serde(default)]
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<Verdict>,
    #[serde(default)]
    pub outcomes: Vec<QueryOutcome>,
    #[serde(default)]
    pub attack_reports: Vec<AttackReport>,
    /// Seconds.
    pub wall_time: f64,
    pub solver_stats: SolverStats,
}

impl RunReport {
    pub fn new(command: impl Into<String>, config: serde_json::Value) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.into(),
            config,
            suite_indices: Vec::new(),
            warnings: Vec::new(),
            verdict: None,
            outcomes: Vec::new(),
            attack_reports: Vec::new(),
            wall_time: 0.0,
            solver_stats: SolverStats::default(),
        }
    }

    /// Sets the outcome log and recomputes the statistics from it.
    pub fn set_outcomes(&mut self, outcomes: Vec<QueryOutcome>) {
        self.solver_stats = SolverStats::from_outcomes(&outcomes);
        self.outcomes = outcomes;
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }

    pub fn from_json(text: &str) -> crate::Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}
