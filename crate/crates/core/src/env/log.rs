use serde::{Deserialize, Serialize};

use super::{Event, Trajectory};
use crate::geom::{iou, BitMask, GeomError};

#[derive(Debug, thiserror::Error)]
pub enum LogError {
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("malformed trajectory log: {0}")]
    Structure(String),
    #[error(transparent)]
    Geom(#[from] GeomError),
}

/// One JSON line per turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogStep {
    pub t: u32,
    pub turn: String,
    pub events: Vec<Event>,
    /// Masks of the candidates created this turn, in event order.
    pub candidates: Vec<BitMask>,
}

impl LogStep {
    pub fn is_answer(&self) -> bool {
        self.events.iter().any(|e| matches!(e, Event::Answer { .. }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogFinal {
    pub masks: Vec<BitMask>,
    /// IoU of the union of `masks` with the ground truth.
    pub iou: f64,
}

#[derive(Serialize, Deserialize)]
struct FinalLine {
    #[serde(rename = "final")]
    fin: LogFinal,
}

/// JSON-lines record of a finished episode.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryLog {
    pub steps: Vec<LogStep>,
    pub fin: LogFinal,
}

impl TrajectoryLog {
    pub fn from_trajectory(traj: &Trajectory, gt: &BitMask) -> Result<Self, LogError> {
        let pred = traj
            .prediction
            .as_ref()
            .ok_or_else(|| LogError::Structure("episode has not terminated".into()))?;
        let steps = traj
            .steps
            .iter()
            .map(|s| LogStep {
                t: s.t,
                turn: s.raw.clone(),
                events: s.events.clone(),
                candidates: s.candidates.iter().map(|&i| traj.candidates[i].mask.clone()).collect(),
            })
            .collect();
        Ok(Self {
            steps,
            fin: LogFinal {
                masks: pred.masks.clone(),
                iou: iou(&pred.union, gt)?,
            },
        })
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&serde_json::to_string(s).expect("log step serializes"));
            out.push('\n');
        }
        let fin = FinalLine { fin: self.fin.clone() };
        out.push_str(&serde_json::to_string(&fin).expect("final line serializes"));
        out.push('\n');
        out
    }

    pub fn parse(text: &str) -> Result<Self, LogError> {
        let lines: Vec<(usize, &str)> = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| (i + 1, l))
            .collect();
        let ((last_no, last), body) = lines
            .split_last()
            .ok_or_else(|| LogError::Structure("empty log".into()))?;
        let fin: FinalLine = serde_json::from_str(last).map_err(|source| LogError::Json { line: *last_no, source })?;
        let mut steps = Vec::with_capacity(body.len());
        for (i, (no, l)) in body.iter().enumerate() {
            let s: LogStep = serde_json::from_str(l).map_err(|source| LogError::Json { line: *no, source })?;
            if s.t as usize != i + 1 {
                return Err(LogError::Structure(format!("line {no}: expected t={}, got {}", i + 1, s.t)));
            }
            let n_cand = s.events.iter().filter(|e| matches!(e, Event::Candidate { .. })).count();
            if n_cand != s.candidates.len() {
                return Err(LogError::Structure(format!("line {no}: candidate events and masks disagree")));
            }
            steps.push(s);
        }
        Ok(Self { steps, fin: fin.fin })
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::env::{EnvConfig, Episode, Task};
    use crate::geom::PointPrompt;
    use crate::protocol::{AgentTurn, AnswerItem, ToolCall};
    use crate::scene::{generate_scene, SceneSpec};

    #[test]
    fn log_lines_have_documented_shape_and_round_trip() {
        let scene = generate_scene(SceneSpec::default(), 2).unwrap();
        let task = Task::new("a", Arc::new(scene), 1).unwrap();
        let b = task.scene.region_bbox(1).unwrap();
        let (x, y) = ((b.x0 + b.x1) / 2, (b.y0 + b.y1) / 2);
        let (mut ep, _) = Episode::reset(task.clone(), EnvConfig::default()).unwrap();
        ep.step_turn(&AgentTurn::tools(
            "t",
            vec![ToolCall::SegmentPoints {
                points: vec![PointPrompt::positive(x, y)],
            }],
        ))
        .unwrap();
        ep.step_turn(&AgentTurn::answer("", vec![AnswerItem::Points(vec![PointPrompt::positive(x, y)])]))
            .unwrap();
        let log = TrajectoryLog::from_trajectory(ep.trajectory(), &task.gt_mask).unwrap();
        let text = log.to_jsonl();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with(r#"{"t":1,"turn":"<think>t</think>"#));
        assert!(lines[0].contains(r#""candidates":[{"size":"#));
        assert!(lines[2].starts_with(r#"{"final":{"masks":[{"size""#));
        assert!(lines[2].ends_with(r#""iou":1.0}}"#));
        assert_eq!(TrajectoryLog::parse(&text).unwrap(), log);
    }

    #[test]
    fn malformed_logs_rejected() {
        assert!(TrajectoryLog::parse("").is_err());
        assert!(TrajectoryLog::parse("{\"t\":1}\n").is_err());
        let bad_t = "{\"t\":2,\"turn\":\"\",\"events\":[],\"candidates\":[]}\n{\"final\":{\"masks\":[],\"iou\":0.0}}\n";
        assert!(matches!(TrajectoryLog::parse(bad_t), Err(LogError::Structure(_))));
    }
}
