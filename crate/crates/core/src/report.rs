//! Structured pass/fail records shared by every check.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
    Warn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub check_id: String,
    pub status: Status,
    pub metric: f64,
    pub tolerance: f64,
    pub details: String,
}

impl ReportEntry {
    /// Pass exactly when `metric <= tolerance`; a NaN metric fails.
    pub fn judged(check_id: impl Into<String>, metric: f64, tolerance: f64, details: impl Into<String>) -> Self {
        let status = if metric <= tolerance { Status::Pass } else { Status::Fail };
        Self { check_id: check_id.into(), status, metric, tolerance, details: details.into() }
    }

    /// Advisory entry: its status never blocks the exit code.
    pub fn warning(check_id: impl Into<String>, metric: f64, tolerance: f64, details: impl Into<String>) -> Self {
        Self { check_id: check_id.into(), status: Status::Warn, metric, tolerance, details: details.into() }
    }

    pub fn passed(&self) -> bool {
        self.status == Status::Pass
    }

    /// Downgrades a would-be failure to a warning, keeping the metric.
    pub fn advisory(mut self) -> Self {
        if self.status == Status::Fail {
            self.status = Status::Warn;
        }
        self
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub entries: Vec<ReportEntry>,
    pub psi_floor_activations: u64,
}

impl ValidationReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, entry: ReportEntry) {
        self.entries.push(entry);
    }

    pub fn extend(&mut self, other: ValidationReport) {
        self.entries.extend(other.entries);
        self.psi_floor_activations += other.psi_floor_activations;
    }

    /// True when no entry failed; warnings are ignored.
    pub fn all_passed(&self) -> bool {
        self.entries.iter().all(|e| e.status != Status::Fail)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ReportEntry> {
        self.entries.iter().filter(|e| e.status == Status::Fail)
    }

    pub fn get(&self, check_id: &str) -> Option<&ReportEntry> {
        self.entries.iter().find(|e| e.check_id == check_id)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn status_follows_metric() {
        assert!(ReportEntry::judged("a", 1e-7, 1e-6, "").passed());
        assert!(!ReportEntry::judged("a", 2e-6, 1e-6, "").passed());
        assert!(!ReportEntry::judged("a", f64::NAN, 1e-6, "").passed());
    }

    #[test]
    fn warnings_do_not_fail_a_report() {
        let mut r = ValidationReport::new();
        r.push(ReportEntry::judged("ok", 0.0, 1.0, ""));
        r.push(ReportEntry::judged("bad", 2.0, 1.0, "").advisory());
        assert!(r.all_passed());
        r.push(ReportEntry::judged("bad2", 2.0, 1.0, ""));
        assert!(!r.all_passed());
    }

    #[test]
    fn json_round_trip() {
        let mut r = ValidationReport::new();
        r.push(ReportEntry::judged("x", 0.5, 1.0, "detail"));
        r.psi_floor_activations = 3;
        let back: ValidationReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }
}
