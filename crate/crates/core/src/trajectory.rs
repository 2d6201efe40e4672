//! Line-delimited JSON trajectory files used for replay.
//!
//! The field set is pinned by `schemas/trajectory.schema.json`.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{RapidError, Result};
use crate::kinematics::JointState;
use crate::scenario::{LabeledState, PhaseKind};

pub const SCHEMA: &str = include_str!("../schemas/trajectory.schema.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryRecord {
    pub t: u64,
    pub time_s: f64,
    pub q: Vec<f64>,
    pub qdot: Vec<f64>,
    pub tau: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<PhaseKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub obs_noise: Option<f64>,
}

impl TrajectoryRecord {
    pub fn from_labeled(s: &LabeledState) -> Self {
        TrajectoryRecord {
            t: s.state.t,
            time_s: s.state.time_s,
            q: s.state.q.clone(),
            qdot: s.state.qdot.clone(),
            tau: s.state.tau.clone(),
            phase: Some(s.phase),
            obs_noise: s.obs_noise,
        }
    }

    pub fn into_labeled(self) -> Result<LabeledState> {
        if self.phase == Some(PhaseKind::Unlabeled) {
            return Err(RapidError::Parse("`unlabeled` is not a valid phase label".into()));
        }
        if let Some(n) = self.obs_noise {
            if !(0.0..=1.0).contains(&n) {
                return Err(RapidError::Parse(format!("obs_noise {n} outside [0, 1]")));
            }
        }
        let state = JointState::new(self.t, self.time_s, self.q, self.qdot, self.tau)?;
        Ok(LabeledState {
            state,
            phase: self.phase.unwrap_or(PhaseKind::Unlabeled),
            segment: 0,
            obs_noise: self.obs_noise,
        })
    }
}

/// Parses records, skipping blank lines. Errors carry the 1-based line.
pub fn parse_trajectory(reader: impl BufRead) -> Result<Vec<LabeledState>> {
    let mut out: Vec<LabeledState> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TrajectoryRecord = serde_json::from_str(&line)
            .map_err(|e| RapidError::Parse(format!("line {}: {e}", i + 1)))?;
        let ls = rec
            .into_labeled()
            .map_err(|e| RapidError::Parse(format!("line {}: {e}", i + 1)))?;
        if let Some(prev) = out.last() {
            if ls.state.t != prev.state.t + 1 {
                return Err(RapidError::Sequencing {
                    expected: prev.state.t + 1,
                    got: ls.state.t,
                });
            }
            if ls.state.n_joints() != prev.state.n_joints() {
                return Err(RapidError::Dimension {
                    expected: prev.state.n_joints(),
                    got: ls.state.n_joints(),
                });
            }
        }
        out.push(ls);
    }
    Ok(out)
}

pub fn read_trajectory(path: &Path) -> Result<Vec<LabeledState>> {
    let f = std::fs::File::open(path).map_err(|e| RapidError::io(path, e))?;
    parse_trajectory(BufReader::new(f)).map_err(|e| match e {
        RapidError::Socket(io) => RapidError::io(path, io),
        other => other,
    })
}

pub fn write_trajectory(path: &Path, states: &[LabeledState]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| RapidError::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    for s in states {
        let line = serde_json::to_string(&TrajectoryRecord::from_labeled(s))
            .map_err(|e| RapidError::Parse(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| RapidError::io(path, e))?;
    }
    w.flush().map_err(|e| RapidError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{generate_scenario, Scenario, Segment};
    use std::collections::BTreeSet;

    #[test]
    fn schema_fields_match_record() {
        let schema: serde_json::Value = serde_json::from_str(SCHEMA).unwrap();
        let props: BTreeSet<String> = schema["properties"]
            .as_object()
            .unwrap()
            .keys()
            .cloned()
            .collect();
        let rec = TrajectoryRecord {
            t: 0,
            time_s: 0.0,
            q: vec![0.0],
            qdot: vec![0.0],
            tau: vec![0.0],
            phase: Some(PhaseKind::Approach),
            obs_noise: Some(0.1),
        };
        let keys: BTreeSet<String> = serde_json::to_value(&rec)
            .unwrap()
            .as_object()
            .unwrap()
            .keys()
            .cloned()
            .collect();
        assert_eq!(props, keys);
        let required: BTreeSet<String> = schema["required"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_str().unwrap().to_owned())
            .collect();
        let minimal = r#"{"t":0,"time_s":0.0,"q":[1],"qdot":[0],"tau":[0]}"#;
        let m: serde_json::Value = serde_json::from_str(minimal).unwrap();
        assert_eq!(required, m.as_object().unwrap().keys().cloned().collect());
        assert!(serde_json::from_str::<TrajectoryRecord>(minimal).is_ok());
    }

    #[test]
    fn file_round_trip() {
        let sc = Scenario {
            id: "rt".into(),
            n_joints: 3,
            duration_s: 0.5,
            sensor_hz: 500,
            control_hz: 20,
            segments: vec![Segment::approach(0.3), Segment::interaction(0.2)],
            noise_level: 0.0,
            seed: 1,
        };
        let states = generate_scenario(&sc).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("traj.jsonl");
        write_trajectory(&p, &states).unwrap();
        let back = read_trajectory(&p).unwrap();
        assert_eq!(back.len(), states.len());
        for (a, b) in back.iter().zip(&states) {
            assert_eq!(a.state, b.state);
            assert_eq!(a.phase, b.phase);
        }
    }

    #[test]
    fn bad_input_reports_line() {
        let text = "{\"t\":0,\"time_s\":0.0,\"q\":[0],\"qdot\":[0],\"tau\":[0]}\n\n{\"t\":1,\"time_s\":0.002,\"q\":[0],\"qdot\":[0]}\n";
        let err = parse_trajectory(text.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
        let gap = "{\"t\":0,\"time_s\":0.0,\"q\":[0],\"qdot\":[0],\"tau\":[0]}\n{\"t\":2,\"time_s\":0.004,\"q\":[0],\"qdot\":[0],\"tau\":[0]}\n";
        assert!(matches!(parse_trajectory(gap.as_bytes()), Err(RapidError::Sequencing { .. })));
        let extra = "{\"t\":0,\"time_s\":0.0,\"q\":[0],\"qdot\":[0],\"tau\":[0],\"x\":1}\n";
        assert!(parse_trajectory(extra.as_bytes()).is_err());
        assert!(matches!(read_trajectory(Path::new("/no/such/file.jsonl")), Err(RapidError::Io { .. })));
    }
}
