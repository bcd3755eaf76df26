//! Trajectory synthesis, filtering, rescue and SFT emission.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{EnvConfig, EnvError, Episode, Event, Task, Trajectory, TrajectoryLog};
use crate::geom::{iou, GeomError};
use crate::policy::{episode_seed, run_episode, RunError, Teacher};
use crate::protocol::{parse_turn, serialize_turn, AgentTurn, TurnBody};

/// Runs `teacher` on every task. Task `i` uses `episode_seed(seed, i)`.
pub fn synthesize(teacher: Teacher, tasks: &[Task], env: &EnvConfig, seed: u64) -> Result<Vec<Trajectory>, RunError> {
    tasks
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            let s = episode_seed(seed, i);
            run_episode(t, env, teacher.policy(t, env, s).as_mut())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub keep_iou: f64,
    pub max_turns: u32,
    pub rescue_iou: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            keep_iou: 0.9,
            max_turns: 8,
            rescue_iou: 0.9,
        }
    }
}

/// What the filter looks at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajSummary {
    pub final_iou: f64,
    /// All turns, the answer turn included.
    pub turns: u32,
    /// Best candidate IoU per turn (index 0 is turn 1); `None` when the turn
    /// made no candidate.
    pub step_ious: Vec<Option<f64>>,
}

impl TrajSummary {
    pub fn from_log(log: &TrajectoryLog, gt: &crate::geom::BitMask) -> Result<Self, GeomError> {
        let mut step_ious = Vec::with_capacity(log.steps.len());
        for s in &log.steps {
            let mut best = None::<f64>;
            for m in &s.candidates {
                let v = iou(m, gt)?;
                best = Some(best.map_or(v, |b| b.max(v)));
            }
            step_ious.push(best);
        }
        Ok(Self {
            final_iou: log.fin.iou,
            turns: log.steps.len() as u32,
            step_ious,
        })
    }

    pub fn from_trajectory(traj: &Trajectory, gt: &crate::geom::BitMask) -> Result<Self, crate::env::LogError> {
        Ok(Self::from_log(&TrajectoryLog::from_trajectory(traj, gt)?, gt)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    Iou,
    Turns,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Verdict {
    Keep,
    Drop { reason: DropReason },
    /// 1-based turn whose candidate becomes the answer.
    Rescue { step: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterDecision {
    #[serde(flatten)]
    pub verdict: Verdict,
    pub final_iou: f64,
    pub best_intermediate_iou: f64,
    pub turns: u32,
}

/// Keep good short trajectories; otherwise rescue at the earliest turn whose
/// candidate is good and whose rescued length (turn plus answer) fits.
pub fn filter(s: &TrajSummary, cfg: &FilterConfig) -> FilterDecision {
    let best = s.step_ious.iter().flatten().cloned().fold(0.0, f64::max);
    let verdict = if s.final_iou >= cfg.keep_iou && s.turns <= cfg.max_turns {
        Verdict::Keep
    } else if let Some(i) = s
        .step_ious
        .iter()
        .enumerate()
        .position(|(i, v)| v.is_some_and(|v| v >= cfg.rescue_iou) && i as u32 + 2 <= cfg.max_turns)
    {
        Verdict::Rescue { step: i as u32 + 1 }
    } else if s.final_iou < cfg.keep_iou {
        Verdict::Drop { reason: DropReason::Iou }
    } else {
        Verdict::Drop { reason: DropReason::Turns }
    };
    FilterDecision {
        verdict,
        final_iou: s.final_iou,
        best_intermediate_iou: best,
        turns: s.turns,
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RescueError {
    #[error("rescue step {step} outside 1..={turns}")]
    StepOutOfRange { step: u32, turns: usize },
    #[error("turn {0} produced no candidate reaching the rescue threshold")]
    NoCandidate(u32),
    #[error("replay ended before the rescue step")]
    Truncated,
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Geom(#[from] GeomError),
}

/// Replays turns `1..=step`, then answers with that turn's best candidate.
pub fn rescue(task: &Task, env: &EnvConfig, raw_turns: &[&str], step: u32, rescue_iou: f64) -> Result<Trajectory, RescueError> {
    if step == 0 || step as usize > raw_turns.len() {
        return Err(RescueError::StepOutOfRange {
            step,
            turns: raw_turns.len(),
        });
    }
    let (mut ep, _) = Episode::reset(task.clone(), *env)?;
    for raw in &raw_turns[..step as usize] {
        if ep.is_closed() {
            return Err(RescueError::Truncated);
        }
        ep.step(raw)?;
    }
    if ep.is_closed() {
        return Err(RescueError::Truncated);
    }
    let traj = ep.trajectory();
    let mut best: Option<(f64, usize)> = None;
    for &c in &traj.steps[step as usize - 1].candidates {
        let v = iou(&traj.candidates[c].mask, &task.gt_mask)?;
        if best.is_none_or(|(b, _)| v > b) {
            best = Some((v, c));
        }
    }
    let idx = match best {
        Some((v, i)) if v >= rescue_iou => i,
        _ => return Err(RescueError::NoCandidate(step)),
    };
    let prompt = traj.candidates[idx].prompt.clone();
    ep.step_turn(&AgentTurn::answer(
        format!("candidate {idx} already matches the target"),
        vec![prompt],
    ))?;
    Ok(ep.into_trajectory())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnitKind {
    Think,
    Tool,
    Obs,
    Answer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftUnit {
    pub kind: UnitKind,
    pub text: String,
    pub sup: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftExample {
    pub id: String,
    pub units: Vec<SftUnit>,
    pub final_iou: f64,
}

impl SftExample {
    pub fn supervision_mask(&self) -> Vec<u8> {
        self.units.iter().map(|u| u.sup).collect()
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("example serializes")
    }

    pub fn from_json_line(line: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(line)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SftError {
    #[error("turn {0} does not parse; only well-formed trajectories are emitted")]
    Malformed(u32),
    #[error("trajectory has no turns")]
    Empty,
}

/// Block-level units: think, tool calls and answers are supervised; the
/// environment feedback after each tool turn is not.
pub fn emit_sft<'a>(
    id: &str,
    steps: impl IntoIterator<Item = (&'a str, &'a [Event])>,
    final_iou: f64,
) -> Result<SftExample, SftError> {
    let mut units = Vec::new();
    let mut unit = |kind, text: String| {
        let sup = (kind != UnitKind::Obs) as u8;
        units.push(SftUnit { kind, text, sup });
    };
    for (t, (raw, events)) in steps.into_iter().enumerate() {
        let turn = parse_turn(raw).0.ok_or(SftError::Malformed(t as u32 + 1))?;
        if !turn.think.is_empty() {
            unit(UnitKind::Think, format!("<think>{}</think>", turn.think));
        }
        match &turn.body {
            TurnBody::ToolCalls(calls) => {
                for c in calls {
                    unit(UnitKind::Tool, format!("<tool_call>{}</tool_call>", c.to_json()));
                }
                unit(UnitKind::Obs, serde_json::to_string(events).expect("events serialize"));
            }
            TurnBody::Answer(_) => {
                let full = serialize_turn(&AgentTurn {
                    think: String::new(),
                    body: turn.body.clone(),
                });
                let block = full.trim_start_matches("<think></think>").trim_start().to_string();
                unit(UnitKind::Answer, block);
            }
        }
    }
    if units.is_empty() {
        return Err(SftError::Empty);
    }
    Ok(SftExample {
        id: id.to_string(),
        units,
        final_iou,
    })
}

pub fn trajectory_steps(traj: &Trajectory) -> impl Iterator<Item = (&str, &[Event])> {
    traj.steps.iter().map(|s| (s.raw.as_str(), s.events.as_slice()))
}

pub fn log_steps(log: &TrajectoryLog) -> impl Iterator<Item = (&str, &[Event])> {
    log.steps.iter().map(|s| (s.turn.as_str(), s.events.as_slice()))
}

/// Per-verdict counts; rescued ids are listed for human review.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub total: usize,
    pub counts: BTreeMap<String, usize>,
    pub drop_reasons: BTreeMap<String, usize>,
    pub emitted: usize,
    pub flagged_rescues: Vec<String>,
    /// Rescues whose replay failed to re-filter as keep.
    pub failed_rescues: Vec<String>,
}

impl Manifest {
    pub fn record(&mut self, id: &str, d: &FilterDecision) {
        self.total += 1;
        let key = match d.verdict {
            Verdict::Keep => "keep",
            Verdict::Rescue { .. } => {
                self.flagged_rescues.push(id.to_string());
                "rescue"
            }
            Verdict::Drop { reason } => {
                let r = match reason {
                    DropReason::Iou => "iou",
                    DropReason::Turns => "turns",
                };
                *self.drop_reasons.entry(r.into()).or_default() += 1;
                "drop"
            }
        };
        *self.counts.entry(key.into()).or_default() += 1;
    }
}

/// Filters, rescues and emits one trajectory. Returns the decision and, for
/// keep or a successful rescue, the example.
pub fn curate(
    task: &Task,
    env: &EnvConfig,
    log: &TrajectoryLog,
    cfg: &FilterConfig,
) -> Result<(FilterDecision, Option<SftExample>), CurateError> {
    let summary = TrajSummary::from_log(log, &task.gt_mask)?;
    let d = filter(&summary, cfg);
    let ex = match d.verdict {
        Verdict::Keep => Some(emit_sft(&task.id, log_steps(log), log.fin.iou)?),
        Verdict::Drop { .. } => None,
        Verdict::Rescue { step } => {
            let raws: Vec<&str> = log.steps.iter().map(|s| s.turn.as_str()).collect();
            let fixed = rescue(task, env, &raws, step, cfg.rescue_iou)?;
            let flog = TrajectoryLog::from_trajectory(&fixed, &task.gt_mask)?;
            let again = filter(&TrajSummary::from_log(&flog, &task.gt_mask)?, cfg);
            if again.verdict != Verdict::Keep {
                return Err(CurateError::RescueNotKept(task.id.clone()));
            }
            Some(emit_sft(&task.id, log_steps(&flog), flog.fin.iou)?)
        }
    };
    Ok((d, ex))
}

#[derive(Debug, thiserror::Error)]
pub enum CurateError {
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Log(#[from] crate::env::LogError),
    #[error(transparent)]
    Rescue(#[from] RescueError),
    #[error(transparent)]
    Sft(#[from] SftError),
    #[error("rescued trajectory {0} does not re-filter as keep")]
    RescueNotKept(String),
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use proptest::prelude::*;

    use super::*;
    use crate::geom::PointPrompt;
    use crate::protocol::{AnswerItem, ToolCall};
    use crate::scene::{generate_scene, SceneSpec};

    fn tasks(n: u64) -> Vec<Task> {
        (0..n)
            .map(|i| {
                let s = generate_scene(SceneSpec::default(), 100 + i).unwrap();
                Task::new(format!("task_{i:04}"), Arc::new(s), 1 + (i % 4) as u32).unwrap()
            })
            .collect()
    }

    fn summary(final_iou: f64, turns: u32, step_ious: Vec<Option<f64>>) -> TrajSummary {
        TrajSummary {
            final_iou,
            turns,
            step_ious,
        }
    }

    #[test]
    fn filter_examples() {
        let c = FilterConfig::default();
        assert_eq!(filter(&summary(0.95, 5, vec![None; 5]), &c).verdict, Verdict::Keep);
        assert_eq!(
            filter(&summary(0.95, 9, vec![None; 9]), &c).verdict,
            Verdict::Drop { reason: DropReason::Turns }
        );
        let d = filter(&summary(0.40, 4, vec![None, Some(0.3), Some(0.92), None]), &c);
        assert_eq!(d.verdict, Verdict::Rescue { step: 3 });
        assert_eq!(d.best_intermediate_iou, 0.92);
        assert_eq!(
            filter(&summary(0.2, 9, vec![None; 9]), &c).verdict,
            Verdict::Drop { reason: DropReason::Iou }
        );
        // a good candidate at turn 8 would need 9 turns once answered
        let mut late = vec![None; 9];
        late[7] = Some(1.0);
        assert_eq!(
            filter(&summary(0.95, 9, late), &c).verdict,
            Verdict::Drop { reason: DropReason::Turns }
        );
    }

    fn oracle_rule(s: &TrajSummary) -> Verdict {
        if s.final_iou >= 0.9 && s.turns <= 8 {
            return Verdict::Keep;
        }
        for (i, v) in s.step_ious.iter().enumerate() {
            if let Some(v) = v {
                if *v >= 0.9 && i + 2 <= 8 {
                    return Verdict::Rescue { step: i as u32 + 1 };
                }
            }
        }
        if s.final_iou < 0.9 {
            Verdict::Drop { reason: DropReason::Iou }
        } else {
            Verdict::Drop { reason: DropReason::Turns }
        }
    }

    proptest! {
        #[test]
        fn filter_matches_rule_oracle(
            final_iou in prop_oneof![0.0f64..=1.0, Just(0.9)],
            ious in proptest::collection::vec(proptest::option::of(prop_oneof![0.0f64..=1.0, Just(0.9)]), 1..12),
        ) {
            let s = summary(final_iou, ious.len() as u32, ious);
            prop_assert_eq!(filter(&s, &FilterConfig::default()).verdict, oracle_rule(&s));
        }
    }

    #[test]
    fn oracle_synthesis_is_exact_and_deterministic() {
        let ts = tasks(12);
        let env = EnvConfig::default();
        let a = synthesize(Teacher::Oracle, &ts, &env, 5).unwrap();
        let b = synthesize(Teacher::Oracle, &ts, &env, 5).unwrap();
        assert_eq!(a, b);
        for (t, tr) in ts.iter().zip(&a) {
            assert_eq!(iou(&tr.prediction.as_ref().unwrap().union, &t.gt_mask).unwrap(), 1.0);
        }
    }

    #[test]
    fn random_synthesis_stays_in_budget() {
        let ts = tasks(20);
        let env = EnvConfig::default();
        for tr in synthesize(Teacher::Random, &ts, &env, 1).unwrap() {
            assert!(tr.turns() <= env.max_turns as usize + 1);
            assert!(tr.prediction.is_some());
        }
    }

    #[test]
    fn noisy_teacher_yields_every_verdict() {
        let ts = tasks(100);
        let env = EnvConfig::default();
        let cfg = FilterConfig::default();
        let trajs = synthesize(Teacher::NoisyOracle { p: 0.3, refine: 1 }, &ts, &env, 11).unwrap();
        let mut m = Manifest::default();
        for (t, tr) in ts.iter().zip(&trajs) {
            let log = TrajectoryLog::from_trajectory(tr, &t.gt_mask).unwrap();
            let (d, ex) = curate(t, &env, &log, &cfg).unwrap();
            m.record(&t.id, &d);
            if let Some(ex) = ex {
                assert!(ex.units.iter().any(|u| u.sup == 1));
                assert!(ex.units.iter().filter(|u| u.kind == UnitKind::Obs).all(|u| u.sup == 0));
            }
        }
        assert_eq!(m.total, 100);
        for k in ["keep", "rescue", "drop"] {
            assert!(m.counts.get(k).copied().unwrap_or(0) > 0, "{k}: {m:?}");
        }
        assert_eq!(m.flagged_rescues.len(), m.counts["rescue"]);
    }

    fn six_turn_trajectory(t: &Task) -> Vec<String> {
        let (x, y) = crate::policy::central_pixel(&t.gt_mask).unwrap();
        let other = t.scene.region_ids().find(|&i| i != t.target_region).unwrap();
        let (ox, oy) = crate::policy::central_pixel(t.scene.region_mask(other).unwrap()).unwrap();
        let seg = |x, y| {
            serialize_turn(&AgentTurn::tools(
                "",
                vec![ToolCall::SegmentPoints {
                    points: vec![PointPrompt::positive(x, y)],
                }],
            ))
        };
        let (w, h) = (t.scene.width(), t.scene.height());
        let look = serialize_turn(&AgentTurn::tools(
            "",
            vec![ToolCall::ZoomIn {
                crop: crate::geom::BBox::new(0, 0, w, h),
            }],
        ));
        vec![
            seg(ox, oy),
            look.clone(),
            seg(x, y),
            look,
            seg(0, 0),
            serialize_turn(&AgentTurn::answer("", vec![AnswerItem::Points(vec![PointPrompt::positive(ox, oy)])])),
        ]
    }

    #[test]
    fn rescue_truncates_and_rekeeps() {
        let t = &tasks(1)[0];
        let env = EnvConfig::default();
        let raws = six_turn_trajectory(t);
        let refs: Vec<&str> = raws.iter().map(String::as_str).collect();
        let mut ep = Episode::reset(t.clone(), env).unwrap().0;
        for r in &refs {
            ep.step(r).unwrap();
        }
        let orig = ep.into_trajectory();
        let s = TrajSummary::from_trajectory(&orig, &t.gt_mask).unwrap();
        assert_eq!(s.turns, 6);
        let d = filter(&s, &FilterConfig::default());
        assert_eq!(d.verdict, Verdict::Rescue { step: 3 });
        let fixed = rescue(t, &env, &refs, 3, 0.9).unwrap();
        assert_eq!(fixed.turns(), 4);
        assert!(fixed.turns() <= orig.turns());
        let s2 = TrajSummary::from_trajectory(&fixed, &t.gt_mask).unwrap();
        assert_eq!(s2.final_iou, s.step_ious[2].unwrap());
        assert_eq!(filter(&s2, &FilterConfig::default()).verdict, Verdict::Keep);
        assert!(matches!(rescue(t, &env, &refs, 0, 0.9), Err(RescueError::StepOutOfRange { .. })));
        assert!(matches!(rescue(t, &env, &refs, 7, 0.9), Err(RescueError::StepOutOfRange { .. })));
        assert!(matches!(rescue(t, &env, &refs, 1, 0.9), Err(RescueError::NoCandidate(1))));
    }

    #[test]
    fn two_turn_mask_pattern_and_round_trip() {
        let t = &tasks(1)[0];
        let env = EnvConfig::default();
        let tr = run_episode(t, &env, Teacher::Oracle.policy(t, &env, 0).as_mut()).unwrap();
        // strip the think blocks to get one unit per turn
        let plain: Vec<String> = tr
            .steps
            .iter()
            .map(|s| {
                let mut turn = s.turn.clone().unwrap();
                turn.think.clear();
                serialize_turn(&turn)
            })
            .collect();
        let evs: Vec<Vec<Event>> = tr.steps.iter().map(|s| s.events.clone()).collect();
        let ex = emit_sft("x", plain.iter().map(String::as_str).zip(evs.iter().map(Vec::as_slice)), 1.0).unwrap();
        assert_eq!(ex.supervision_mask(), vec![1, 0, 1]);
        let kinds: Vec<UnitKind> = ex.units.iter().map(|u| u.kind).collect();
        assert_eq!(kinds, vec![UnitKind::Tool, UnitKind::Obs, UnitKind::Answer]);
        assert!(ex.units[2].text.starts_with("<answer>"));

        let full = emit_sft("y", trajectory_steps(&tr), 1.0).unwrap();
        assert_eq!(full.supervision_mask(), vec![1, 1, 0, 1, 1]);
        let sup: u32 = full.supervision_mask().iter().map(|&m| m as u32).sum();
        assert_eq!(sup as usize, full.units.iter().filter(|u| u.kind != UnitKind::Obs).count());
        let back = SftExample::from_json_line(&full.to_json_line()).unwrap();
        assert_eq!(back, full);
    }

    #[test]
    fn malformed_turns_are_not_emitted() {
        let evs: Vec<Event> = vec![];
        assert!(matches!(
            emit_sft("z", [("garbage", evs.as_slice())], 0.0),
            Err(SftError::Malformed(1))
        ));
        assert!(matches!(emit_sft("z", std::iter::empty(), 0.0), Err(SftError::Empty)));
    }
}
