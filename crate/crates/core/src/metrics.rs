//! JSON-lines metrics: one `round` line per round, then one `summary` line.
//!
//! Only the `wall_ms` and `total_wall_ms` fields vary between two runs of
//! the same configuration.

use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::config::{Branch, ExperimentConfig};
use crate::federation::{RoundRecord, RunOutcome};

pub const WALL_TIME_FIELDS: [&str; 2] = ["wall_ms", "total_wall_ms"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub branch: String,
    pub attack: String,
    pub defence: String,
    pub clients: usize,
    pub alpha: f64,
    pub rounds: usize,
    pub seed: u64,
    pub byzantine: Vec<usize>,
    pub final_test_accuracy: f64,
    pub final_validation_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_byzantine_share: Option<f64>,
    pub config_hash: String,
    pub total_wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Line {
    Round(RoundRecord),
    Summary(Summary),
}

/// Label of the aggregator a run actually used; FedAvg always averages.
pub fn defence_label(config: &ExperimentConfig) -> &'static str {
    match config.branch {
        Branch::Fd => config.defence.label(),
        Branch::Fedavg => "MEAN",
    }
}

pub fn summarize(config: &ExperimentConfig, outcome: &RunOutcome, total_wall_ms: f64) -> Summary {
    let last = outcome.records.last();
    Summary {
        branch: config.branch.name().into(),
        attack: config.attack.kind.name().into(),
        defence: defence_label(config).into(),
        clients: config.clients,
        alpha: config.alpha,
        rounds: config.rounds,
        seed: config.seed,
        byzantine: outcome.byzantine.clone(),
        final_test_accuracy: outcome.final_accuracy(),
        final_validation_accuracy: last.map_or(f64::NAN, |r| r.validation_accuracy),
        final_byzantine_share: last.and_then(|r| r.byzantine_share),
        config_hash: config.hash(),
        total_wall_ms,
    }
}

pub fn write_line<W: Write>(out: &mut W, line: &Line) -> io::Result<()> {
    serde_json::to_writer(&mut *out, line)?;
    out.write_all(b"\n")
}

pub fn read_lines<R: BufRead>(input: R) -> io::Result<Vec<Line>> {
    input
        .lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| serde_json::from_str(&l?).map_err(io::Error::other))
        .collect()
}

/// The file with every wall-time field removed, for byte comparisons.
pub fn without_wall_times(text: &str) -> String {
    let mut out = String::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        match serde_json::from_str::<serde_json::Value>(line) {
            Ok(serde_json::Value::Object(mut map)) => {
                for f in WALL_TIME_FIELDS {
                    map.remove(f);
                }
                out.push_str(&serde_json::Value::Object(map).to_string());
            }
            _ => out.push_str(line),
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, Architecture, ModelParams};

    fn record(round: usize, wall_ms: f64) -> RoundRecord {
        RoundRecord {
            round,
            test_accuracy: 0.5,
            validation_accuracy: 0.25,
            weights: Some(vec![1.5, 0.5]),
            byzantine_share: Some(0.25),
            honest_distance: Some(0.1),
            honest_distance_max: Some(0.2),
            labels_checked: 10,
            labels_valid: 10,
            gm_unconverged: 0,
            wall_ms,
        }
    }

    #[test]
    fn lines_round_trip_and_strip_timing() {
        let config = ExperimentConfig::parse("clients=2\nalpha=0\ndefence.kind=GM").unwrap();
        let arch = Architecture::new(2, vec![], 2, Activation::Tanh).unwrap();
        let outcome = RunOutcome {
            records: vec![record(0, 3.0), record(1, 4.0)],
            byzantine: vec![],
            server: ModelParams::zeros(arch),
        };
        let mut a = Vec::new();
        for r in &outcome.records {
            write_line(&mut a, &Line::Round(r.clone())).unwrap();
        }
        write_line(&mut a, &Line::Summary(summarize(&config, &outcome, 12.0))).unwrap();
        let lines = read_lines(&a[..]).unwrap();
        assert_eq!(lines.len(), 3);
        assert!(matches!(&lines[2], Line::Summary(s) if s.defence == "GM" && s.final_test_accuracy == 0.5));
        let text = String::from_utf8(a).unwrap();
        assert!(text.lines().next().unwrap().starts_with("{\"type\":\"round\""));

        let other = text.replace("\"wall_ms\":3.0", "\"wall_ms\":9.5").replace("12.0", "1.0");
        assert_ne!(other, text);
        assert_eq!(without_wall_times(&other), without_wall_times(&text));
        assert!(!without_wall_times(&text).contains("wall_ms"));
    }
}
