//! Finite-horizon episode state machine.
//!
//! Each turn is raw policy text. Tool turns spend one unit of budget; once the
//! budget is gone the next turn must answer, and any other turn closes the
//! episode with an empty prediction. An episode therefore lasts at most
//! `max_turns + 1` turns.

mod log;
mod render;

use std::collections::VecDeque;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::geom::{union_bbox, union_masks, BBox, BitMask, GeomError};
use crate::protocol::{
    parse_turn, serialize_turn, validate_args, AgentTurn, AnswerItem, AnswerPayload, FormatVerdict, ObsPayload,
    ToolCall, ToolKind, TurnBody,
};
use crate::scene::{points_to_scene, segment_scene_box, segment_scene_points, Scene, SegmentorConfig, ViewState};

pub use log::{LogError, LogFinal, LogStep, TrajectoryLog};
pub use render::{nearest, render_overlay, render_view, Thumbnail, HIGHLIGHT, PALETTE};

#[derive(Debug, thiserror::Error)]
pub enum EnvError {
    #[error("invalid environment config: {0}")]
    Config(String),
    #[error("invalid task: {0}")]
    Task(String),
    #[error("episode already terminated")]
    EpisodeClosed,
    #[error(transparent)]
    Geom(#[from] GeomError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    /// Tool-call turns before a direct answer is forced.
    pub max_turns: u32,
    /// History pool capacity (FIFO).
    pub pool_cap: usize,
    /// Side length of overlay thumbnails.
    pub thumb_size: u32,
    pub segmentor: SegmentorConfig,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            max_turns: 8,
            pool_cap: 6,
            thumb_size: 96,
            segmentor: SegmentorConfig::default(),
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.max_turns == 0 {
            return Err(EnvError::Config("max_turns must be at least 1".into()));
        }
        if self.pool_cap == 0 {
            return Err(EnvError::Config("pool_cap must be at least 1".into()));
        }
        if self.thumb_size == 0 || self.thumb_size > 4096 {
            return Err(EnvError::Config("thumb_size must be in 1..=4096".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Task {
    pub id: String,
    pub scene: Arc<Scene>,
    pub target_region: u32,
    pub question: String,
    pub gt_mask: BitMask,
}

impl Task {
    pub fn new(id: impl Into<String>, scene: Arc<Scene>, target_region: u32) -> Result<Self, EnvError> {
        let gt_mask = scene
            .region_mask(target_region)
            .ok_or_else(|| EnvError::Task(format!("scene has no region {target_region}")))?
            .clone();
        Ok(Self {
            id: id.into(),
            question: question_for(target_region),
            scene,
            target_region,
            gt_mask,
        })
    }
}

/// Synthetic question text naming the target region.
pub fn question_for(region: u32) -> String {
    format!("region-{region}")
}

/// Inverse of [`question_for`].
pub fn region_from_question(q: &str) -> Option<u32> {
    q.strip_prefix("region-")?.parse().ok()
}

#[derive(Debug, Clone)]
pub struct Observation {
    pub view: ViewState,
    /// Oldest first; at most `pool_cap` entries.
    pub history_pool: Vec<Arc<Thumbnail>>,
    pub turn_index: u32,
    pub budget_remaining: u32,
    pub context_digest: String,
}

impl Observation {
    /// Wire form, including a render of the current view.
    pub fn payload(&self, task: &Task) -> ObsPayload {
        let (w, h) = self.view.dims();
        ObsPayload {
            question: task.question.clone(),
            turn_index: self.turn_index,
            budget_remaining: self.budget_remaining,
            context_digest: self.context_digest.clone(),
            view: self.view,
            view_size: [w, h],
            view_image: render_view(&task.scene, &self.view),
            history_pool: self.history_pool.iter().map(|t| t.payload()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Event {
    Format {
        verdict: FormatVerdict,
    },
    View {
        call: usize,
        tool: ToolKind,
        view: ViewState,
    },
    Candidate {
        call: usize,
        tool: ToolKind,
        index: usize,
        /// The prompt mapped to scene coordinates.
        prompt: AnswerItem,
    },
    Invalid {
        call: usize,
        tool: ToolKind,
        detail: String,
    },
    BudgetExhausted {
        call: usize,
        tool: ToolKind,
    },
    ItemFailed {
        item: usize,
        detail: String,
    },
    Answer {
        items: usize,
    },
}

impl Event {
    /// True for events that make a turn count as containing an invalid call.
    pub fn is_invalid(&self) -> bool {
        match self {
            Event::Format { verdict } => !verdict.is_ok(),
            Event::Invalid { .. } | Event::BudgetExhausted { .. } => true,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Candidate {
    pub index: usize,
    /// 1-based turn that produced it.
    pub step: u32,
    pub tool: ToolKind,
    pub prompt: AnswerItem,
    pub mask: BitMask,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepRecord {
    pub t: u32,
    pub raw: String,
    pub prior_digest: String,
    pub turn: Option<AgentTurn>,
    pub events: Vec<Event>,
    pub candidates: Vec<usize>,
}

impl StepRecord {
    pub fn is_answer(&self) -> bool {
        self.turn.as_ref().is_some_and(AgentTurn::is_answer)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FinalPrediction {
    pub masks: Vec<BitMask>,
    pub union: BitMask,
    pub union_box: BBox,
}

impl FinalPrediction {
    pub fn from_masks(masks: Vec<BitMask>, width: u32, height: u32) -> Result<Self, GeomError> {
        let union = union_masks(&masks, width, height)?;
        let union_box = union_bbox(&masks)?;
        Ok(Self {
            masks,
            union,
            union_box,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trajectory {
    pub task_id: String,
    pub steps: Vec<StepRecord>,
    pub candidates: Vec<Candidate>,
    pub prediction: Option<FinalPrediction>,
}

impl Trajectory {
    pub fn turns(&self) -> usize {
        self.steps.len()
    }

    pub fn raw_turns(&self) -> impl Iterator<Item = &str> {
        self.steps.iter().map(|s| s.raw.as_str())
    }
}

#[derive(Debug, Clone)]
pub enum Outcome {
    Continue(Observation),
    Terminal(FinalPrediction),
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub outcome: Outcome,
    pub events: Vec<Event>,
}

/// One running episode. Single-writer; move it between threads freely.
pub struct Episode {
    task: Task,
    cfg: EnvConfig,
    view: ViewState,
    pool: VecDeque<Arc<Thumbnail>>,
    turn_index: u32,
    budget_remaining: u32,
    digest: [u8; 32],
    traj: Trajectory,
    closed: bool,
}

impl Episode {
    pub fn reset(task: Task, cfg: EnvConfig) -> Result<(Episode, Observation), EnvError> {
        cfg.validate()?;
        let (w, h) = (task.scene.width(), task.scene.height());
        if task.gt_mask.dims() != (w, h) {
            return Err(EnvError::Task("gt mask does not match scene".into()));
        }
        let digest: [u8; 32] = Sha256::new_with_prefix(task.question.as_bytes()).finalize().into();
        let ep = Episode {
            traj: Trajectory {
                task_id: task.id.clone(),
                steps: Vec::new(),
                candidates: Vec::new(),
                prediction: None,
            },
            view: ViewState::identity(w, h),
            pool: VecDeque::with_capacity(cfg.pool_cap),
            turn_index: 0,
            budget_remaining: cfg.max_turns,
            digest,
            task,
            cfg,
            closed: false,
        };
        let obs = ep.observation();
        Ok((ep, obs))
    }

    pub fn task(&self) -> &Task {
        &self.task
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn trajectory(&self) -> &Trajectory {
        &self.traj
    }

    pub fn into_trajectory(self) -> Trajectory {
        self.traj
    }

    pub fn observation(&self) -> Observation {
        Observation {
            view: self.view,
            history_pool: self.pool.iter().cloned().collect(),
            turn_index: self.turn_index,
            budget_remaining: self.budget_remaining,
            context_digest: hex(&self.digest[..8]),
        }
    }

    pub fn step_turn(&mut self, turn: &AgentTurn) -> Result<StepResult, EnvError> {
        self.step(&serialize_turn(turn))
    }

    /// Applies one raw policy turn.
    pub fn step(&mut self, raw: &str) -> Result<StepResult, EnvError> {
        if self.closed {
            return Err(EnvError::EpisodeClosed);
        }
        let t = self.turn_index + 1;
        let prior_digest = hex(&self.digest[..8]);
        let mut hasher = Sha256::new_with_prefix(self.digest);
        hasher.update(raw.as_bytes());
        self.digest = hasher.finalize().into();

        let (turn, verdict) = parse_turn(raw);
        let mut events = vec![Event::Format { verdict }];
        let mut new_candidates = Vec::new();

        let prediction = match turn.as_ref().map(|t| &t.body) {
            Some(TurnBody::Answer(answer)) => Some(self.finalize(answer, &mut events)?),
            body if self.budget_remaining == 0 => {
                if let Some(TurnBody::ToolCalls(calls)) = body {
                    for (i, c) in calls.iter().enumerate() {
                        events.push(Event::BudgetExhausted { call: i, tool: c.kind() });
                    }
                }
                let (w, h) = (self.task.scene.width(), self.task.scene.height());
                Some(FinalPrediction::from_masks(Vec::new(), w, h)?)
            }
            body => {
                self.budget_remaining -= 1;
                if let Some(TurnBody::ToolCalls(calls)) = body {
                    for (i, call) in calls.iter().enumerate() {
                        self.execute(t, i, call, &mut events, &mut new_candidates);
                    }
                }
                None
            }
        };

        self.turn_index = t;
        self.traj.steps.push(StepRecord {
            t,
            raw: raw.to_string(),
            prior_digest,
            turn,
            events: events.clone(),
            candidates: new_candidates,
        });
        let outcome = match prediction {
            Some(p) => {
                self.closed = true;
                self.traj.prediction = Some(p.clone());
                Outcome::Terminal(p)
            }
            None => Outcome::Continue(self.observation()),
        };
        Ok(StepResult { outcome, events })
    }

    fn execute(&mut self, t: u32, i: usize, call: &ToolCall, events: &mut Vec<Event>, new: &mut Vec<usize>) {
        let tool = call.kind();
        if let Err(detail) = validate_args(call, &self.view) {
            events.push(Event::Invalid { call: i, tool, detail });
            return;
        }
        let scene = Arc::clone(&self.task.scene);
        let seg = &self.cfg.segmentor;
        let result = match call {
            ToolCall::ZoomIn { crop } => {
                let b = [crop.x0, crop.y0, crop.x1, crop.y1].map(i64::from);
                self.view.zoom(b).map(|v| {
                    self.view = v;
                    events.push(Event::View { call: i, tool, view: v });
                })
                .map_err(|e| e.to_string())
            }
            ToolCall::Rotate { angle } => self
                .view
                .rotate(*angle)
                .map(|v| {
                    self.view = v;
                    events.push(Event::View { call: i, tool, view: v });
                })
                .map_err(|e| e.to_string()),
            ToolCall::SegmentPoints { points } => points_to_scene(&self.view, points)
                .and_then(|pts| {
                    let mask = segment_scene_points(&scene, &pts, seg)?;
                    Ok((AnswerItem::Points(pts), mask))
                })
                .map(|(prompt, mask)| self.add_candidate(t, i, tool, prompt, mask, events, new))
                .map_err(|e| e.to_string()),
            ToolCall::SegmentBox { bbox } => {
                let b = [bbox.x0, bbox.y0, bbox.x1, bbox.y1].map(i64::from);
                self.view
                    .box_to_scene(b)
                    .map(|sb| {
                        let mask = segment_scene_box(&scene, sb);
                        self.add_candidate(t, i, tool, AnswerItem::Box(sb), mask, events, new)
                    })
                    .map_err(|e| e.to_string())
            }
        };
        if let Err(detail) = result {
            events.push(Event::Invalid { call: i, tool, detail });
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn add_candidate(
        &mut self,
        t: u32,
        call: usize,
        tool: ToolKind,
        prompt: AnswerItem,
        mask: BitMask,
        events: &mut Vec<Event>,
        new: &mut Vec<usize>,
    ) {
        let index = self.traj.candidates.len();
        let thumb = render_overlay(&self.task.scene, &mask, self.cfg.thumb_size, index);
        if self.pool.len() == self.cfg.pool_cap {
            self.pool.pop_front();
        }
        self.pool.push_back(Arc::new(thumb));
        events.push(Event::Candidate {
            call,
            tool,
            index,
            prompt: prompt.clone(),
        });
        self.traj.candidates.push(Candidate {
            index,
            step: t,
            tool,
            prompt,
            mask,
        });
        new.push(index);
    }

    /// Segments every answer item on the full scene.
    fn finalize(&self, answer: &AnswerPayload, events: &mut Vec<Event>) -> Result<FinalPrediction, EnvError> {
        let scene = &self.task.scene;
        let (w, h) = (scene.width(), scene.height());
        let masks = answer
            .items
            .iter()
            .enumerate()
            .map(|(i, item)| match segment_item(scene, item, &self.cfg.segmentor) {
                Ok(m) => m,
                Err(detail) => {
                    events.push(Event::ItemFailed { item: i, detail });
                    BitMask::empty(w, h)
                }
            })
            .collect();
        events.push(Event::Answer {
            items: answer.items.len(),
        });
        Ok(FinalPrediction::from_masks(masks, w, h)?)
    }
}

/// Segments one answer item on the un-zoomed scene.
pub fn segment_item(scene: &Scene, item: &AnswerItem, cfg: &SegmentorConfig) -> Result<BitMask, String> {
    match item {
        AnswerItem::Points(pts) => segment_scene_points(scene, pts, cfg).map_err(|e| e.to_string()),
        AnswerItem::Box(b) if b.within(&BBox::full(scene.width(), scene.height())) => Ok(segment_scene_box(scene, *b)),
        AnswerItem::Box(b) => Err(format!("box {b:?} exceeds the scene")),
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{iou, PointPrompt};
    use crate::scene::{generate_scene, SceneSpec};

    fn task() -> Task {
        let scene = generate_scene(
            SceneSpec {
                regions: 3,
                width: 48,
                height: 48,
            },
            21,
        )
        .unwrap();
        Task::new("t0", Arc::new(scene), 2).unwrap()
    }

    fn interior(task: &Task, id: u32) -> (u32, u32) {
        let b = task.scene.region_bbox(id).unwrap();
        let c = ((b.x0 + b.x1) / 2, (b.y0 + b.y1) / 2);
        assert_eq!(task.scene.label(c.0, c.1), id);
        c
    }

    fn seg_turn(x: u32, y: u32) -> AgentTurn {
        AgentTurn::tools(
            "",
            vec![ToolCall::SegmentPoints {
                points: vec![PointPrompt::positive(x, y)],
            }],
        )
    }

    #[test]
    fn reset_gives_empty_pool_and_full_budget() {
        let (ep, obs) = Episode::reset(task(), EnvConfig::default()).unwrap();
        assert!(obs.history_pool.is_empty());
        assert_eq!(obs.budget_remaining, 8);
        assert_eq!(obs.turn_index, 0);
        let (_, again) = Episode::reset(task(), EnvConfig::default()).unwrap();
        assert_eq!(obs.context_digest, again.context_digest);
        assert_eq!(obs.payload(ep.task()), again.payload(ep.task()));
    }

    #[test]
    fn invalid_config_rejected() {
        let bad = EnvConfig {
            pool_cap: 0,
            ..Default::default()
        };
        assert!(matches!(Episode::reset(task(), bad), Err(EnvError::Config(_))));
    }

    #[test]
    fn segment_turn_grows_pool_and_spends_budget() {
        let task = task();
        let (x, y) = interior(&task, 2);
        let (mut ep, _) = Episode::reset(task, EnvConfig::default()).unwrap();
        let r = ep.step_turn(&seg_turn(x, y)).unwrap();
        let Outcome::Continue(obs) = r.outcome else { panic!("terminal") };
        assert_eq!(obs.history_pool.len(), 1);
        assert_eq!(obs.budget_remaining, 7);
        assert_eq!(obs.history_pool[0].candidate, 0);
    }

    #[test]
    fn pool_cap_evicts_oldest() {
        let task = task();
        let (x, y) = interior(&task, 1);
        let cfg = EnvConfig {
            pool_cap: 4,
            ..Default::default()
        };
        let (mut ep, _) = Episode::reset(task, cfg).unwrap();
        let mut last = None;
        for _ in 0..7 {
            if let Outcome::Continue(o) = ep.step_turn(&seg_turn(x, y)).unwrap().outcome {
                assert!(o.history_pool.len() <= 4);
                last = Some(o);
            }
        }
        let ids: Vec<usize> = last.unwrap().history_pool.iter().map(|t| t.candidate).collect();
        assert_eq!(ids, vec![3, 4, 5, 6]);
        assert_eq!(ep.trajectory().candidates.len(), 7);
    }

    #[test]
    fn budget_forces_answer() {
        let task = task();
        let (x, y) = interior(&task, 2);
        let (mut ep, _) = Episode::reset(task, EnvConfig::default()).unwrap();
        for _ in 0..8 {
            assert!(matches!(ep.step_turn(&seg_turn(x, y)).unwrap().outcome, Outcome::Continue(_)));
        }
        let r = ep.step_turn(&seg_turn(x, y)).unwrap();
        assert!(r.events.iter().any(|e| matches!(e, Event::BudgetExhausted { .. })));
        let Outcome::Terminal(p) = r.outcome else { panic!("should terminate") };
        assert!(p.masks.is_empty() && p.union.is_empty());
        assert_eq!(ep.trajectory().turns(), 9);
        assert!(matches!(ep.step("x"), Err(EnvError::EpisodeClosed)));
    }

    #[test]
    fn answer_after_budget_is_accepted() {
        let task = task();
        let (x, y) = interior(&task, 2);
        let (mut ep, _) = Episode::reset(task.clone(), EnvConfig::default()).unwrap();
        for _ in 0..8 {
            ep.step("garbage").unwrap();
        }
        let r = ep
            .step_turn(&AgentTurn::answer("", vec![AnswerItem::Points(vec![PointPrompt::positive(x, y)])]))
            .unwrap();
        let Outcome::Terminal(p) = r.outcome else { panic!() };
        assert_eq!(p.union, task.gt_mask);
    }

    #[test]
    fn answer_with_interior_point_matches_gt() {
        let task = task();
        let (x, y) = interior(&task, 2);
        let (mut ep, _) = Episode::reset(task.clone(), EnvConfig::default()).unwrap();
        let r = ep
            .step_turn(&AgentTurn::answer("done", vec![AnswerItem::Points(vec![PointPrompt::positive(x, y)])]))
            .unwrap();
        let Outcome::Terminal(p) = r.outcome else { panic!() };
        assert_eq!(iou(&p.union, &task.gt_mask).unwrap(), 1.0);
    }

    #[test]
    fn two_items_union_both_regions() {
        let task = task();
        let a = interior(&task, 1);
        let b = interior(&task, 3);
        let (mut ep, _) = Episode::reset(task.clone(), EnvConfig::default()).unwrap();
        let items = vec![
            AnswerItem::Points(vec![PointPrompt::positive(a.0, a.1)]),
            AnswerItem::Points(vec![PointPrompt::positive(b.0, b.1)]),
        ];
        let Outcome::Terminal(p) = ep.step_turn(&AgentTurn::answer("", items)).unwrap().outcome else {
            panic!()
        };
        let m1 = task.scene.region_mask(1).unwrap();
        let m3 = task.scene.region_mask(3).unwrap();
        let mut both = m1.clone();
        both.union_with(m3).unwrap();
        assert_eq!(p.union, both);
        assert_eq!(p.union_box, union_bbox(&[m1.clone(), m3.clone()]).unwrap());
    }

    #[test]
    fn failed_item_contributes_empty_mask() {
        let task = task();
        let (mut ep, _) = Episode::reset(task, EnvConfig::default()).unwrap();
        let items = vec![AnswerItem::Points(vec![PointPrompt::positive(999, 0)])];
        let r = ep.step_turn(&AgentTurn::answer("", items)).unwrap();
        assert!(r.events.iter().any(|e| matches!(e, Event::ItemFailed { item: 0, .. })));
        let Outcome::Terminal(p) = r.outcome else { panic!() };
        assert_eq!(p.masks.len(), 1);
        assert!(p.union.is_empty());
    }

    #[test]
    fn view_ops_leave_candidates_alone_and_points_follow_view() {
        let task = task();
        let (sx, sy) = interior(&task, 3);
        let (mut ep, _) = Episode::reset(task.clone(), EnvConfig::default()).unwrap();
        let r = ep
            .step_turn(&AgentTurn::tools(
                "",
                vec![ToolCall::ZoomIn {
                    crop: BBox::new(sx - 3, sy - 3, sx + 4, sy + 4),
                }, ToolCall::Rotate { angle: 90 }],
            ))
            .unwrap();
        let Outcome::Continue(obs) = r.outcome else { panic!() };
        assert!(ep.trajectory().candidates.is_empty());
        assert_eq!(obs.view.dims(), (7, 7));
        let (vx, vy) = obs.view.to_view(sx, sy).unwrap();
        ep.step_turn(&seg_turn(vx, vy)).unwrap();
        let c = &ep.trajectory().candidates[0];
        assert_eq!(&c.mask, task.scene.region_mask(3).unwrap());
        assert_eq!(c.prompt, AnswerItem::Points(vec![PointPrompt::positive(sx, sy)]));
    }

    #[test]
    fn invalid_call_recorded_without_mutation() {
        let (mut ep, obs0) = Episode::reset(task(), EnvConfig::default()).unwrap();
        let r = ep.step_turn(&AgentTurn::tools("", vec![ToolCall::Rotate { angle: 45 }])).unwrap();
        assert!(r.events.iter().any(|e| matches!(e, Event::Invalid { .. })));
        let Outcome::Continue(obs) = r.outcome else { panic!() };
        assert_eq!(obs.view, obs0.view);
        assert_eq!(obs.budget_remaining, 7);
    }

    #[test]
    fn never_answering_takes_max_turns_plus_one() {
        for max_turns in [1, 3, 8] {
            let cfg = EnvConfig {
                max_turns,
                ..Default::default()
            };
            let (mut ep, _) = Episode::reset(task(), cfg).unwrap();
            let mut n = 0;
            while !ep.is_closed() {
                ep.step("<think>no</think>").unwrap();
                n += 1;
            }
            assert_eq!(n, max_turns + 1);
            assert!(ep.trajectory().prediction.as_ref().unwrap().masks.is_empty());
        }
    }

    #[test]
    fn replay_is_bit_identical() {
        let task = task();
        let (x, y) = interior(&task, 2);
        let cfg = EnvConfig {
            segmentor: SegmentorConfig {
                noise_radius: 1,
                noise_seed: 3,
            },
            ..Default::default()
        };
        let (mut ep, _) = Episode::reset(task.clone(), cfg).unwrap();
        ep.step_turn(&seg_turn(x, y)).unwrap();
        ep.step_turn(&AgentTurn::tools("", vec![ToolCall::Rotate { angle: 180 }])).unwrap();
        ep.step_turn(&AgentTurn::answer("", vec![AnswerItem::Points(vec![PointPrompt::positive(x, y)])]))
            .unwrap();
        let first = ep.into_trajectory();
        let (mut ep2, _) = Episode::reset(task, cfg).unwrap();
        let mut observations = Vec::new();
        for raw in first.raw_turns() {
            if let Outcome::Continue(o) = ep2.step(raw).unwrap().outcome {
                observations.push(o.context_digest);
            }
        }
        assert_eq!(ep2.trajectory(), &first);
        assert_eq!(observations.len(), 2);
    }
}
