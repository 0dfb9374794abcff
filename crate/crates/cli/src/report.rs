//! Machine-readable run reports: every asserted invariant appears as a check
//! line with its measured value and tolerance.

use serde::Serialize;
use serde_json::{Map, Value};

#[derive(Debug, Clone, Serialize)]
pub struct CheckLine {
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Serialize)]
pub struct RunReport {
    pub mode: String,
    /// Echo of the validated input config.
    pub inputs: Value,
    /// Mode-specific result values (prices, gaps, estimates, ...).
    pub values: Map<String, Value>,
    /// Asserted invariants with measured values; all must pass for exit 0.
    pub checks: Vec<CheckLine>,
    /// Files written besides the report itself.
    pub artifacts: Vec<String>,
    /// Wall time; excluded from the determinism contract.
    pub wall_time_ms: u64,
}

impl RunReport {
    pub fn new(mode: &str, inputs: Value) -> Self {
        RunReport {
            mode: mode.to_string(),
            inputs,
            values: Map::new(),
            checks: Vec::new(),
            artifacts: Vec::new(),
            wall_time_ms: 0,
        }
    }

    pub fn put(&mut self, key: &str, value: impl Serialize) {
        self.values.insert(
            key.to_string(),
            serde_json::to_value(value).expect("report values serialize"),
        );
    }

    /// Records `measured <= tolerance` as a named check.
    pub fn check_at_most(&mut self, name: &str, measured: f64, tolerance: f64) {
        self.checks.push(CheckLine {
            name: name.to_string(),
            measured,
            tolerance,
            pass: measured <= tolerance,
        });
    }

    /// Records `measured >= bound` as a named check (tolerance column holds
    /// the bound).
    pub fn check_at_least(&mut self, name: &str, measured: f64, bound: f64) {
        self.checks.push(CheckLine {
            name: name.to_string(),
            measured,
            tolerance: bound,
            pass: measured >= bound,
        });
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}
