//! Policies that drive episodes, and the scripted teachers.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::env::{region_from_question, EnvConfig, EnvError, Episode, Outcome, Task, Trajectory};
use crate::geom::{iou, BBox, BitMask, PointPrompt};
use crate::protocol::{serialize_turn, AgentTurn, AnswerItem, ObsPayload, ToolCall};
use crate::scene::{segment_scene_points, splitmix64, Scene};

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("policy transport failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("policy protocol error: {0}")]
    Protocol(String),
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Anything that maps an observation to a raw turn.
pub trait Policy {
    fn act(&mut self, obs: &ObsPayload) -> Result<String, PolicyError>;

    /// Called once after the episode terminates.
    fn finish(&mut self) -> Result<(), PolicyError> {
        Ok(())
    }
}

/// Runs one episode to termination.
pub fn run_episode(task: &Task, cfg: &EnvConfig, policy: &mut dyn Policy) -> Result<Trajectory, RunError> {
    let (mut ep, mut obs) = Episode::reset(task.clone(), *cfg)?;
    loop {
        let raw = policy.act(&obs.payload(task))?;
        match ep.step(&raw)?.outcome {
            Outcome::Continue(next) => obs = next,
            Outcome::Terminal(_) => break,
        }
    }
    policy.finish()?;
    Ok(ep.into_trajectory())
}

/// Per-episode seed derived from a run seed and the task's position.
pub fn episode_seed(seed: u64, index: usize) -> u64 {
    splitmix64(seed ^ splitmix64(index as u64))
}

/// Mask pixel closest to the centre of the mask's box.
pub fn central_pixel(m: &BitMask) -> Option<(u32, u32)> {
    let b = m.bbox();
    let (cx, cy) = ((b.x0 + b.x1) as f64 / 2.0, (b.y0 + b.y1) as f64 / 2.0);
    m.pixels().min_by(|p, q| {
        let d = |(x, y): (u32, u32)| (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2);
        d(*p).total_cmp(&d(*q))
    })
}

/// First background pixel in raster order.
pub fn background_pixel(s: &Scene) -> Option<(u32, u32)> {
    let (w, h) = (s.width(), s.height());
    (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).find(|&(x, y)| s.label(x, y) == 0)
}

fn click(x: u32, y: u32) -> AnswerItem {
    AnswerItem::Points(vec![PointPrompt::positive(x, y)])
}

fn segment_at(think: &str, (x, y): (u32, u32)) -> String {
    serialize_turn(&AgentTurn::tools(
        think,
        vec![ToolCall::SegmentPoints {
            points: vec![PointPrompt::positive(x, y)],
        }],
    ))
}

fn answer(think: &str, item: AnswerItem) -> String {
    serialize_turn(&AgentTurn::answer(think, vec![item]))
}

/// Scripted teachers and baseline policies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Teacher {
    /// Boxes the target and answers with the box.
    Oracle,
    /// Clicks the visible target pixel nearest its centroid, then answers.
    GreedyCentroid,
    /// Oracle clicks with probability `p` of one scripted mistake per episode,
    /// plus `refine` extra clicks before answering with the best candidate.
    NoisyOracle { p: f64, refine: u32 },
    Random,
    /// Never answers.
    ToolOnly,
}

impl fmt::Display for Teacher {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Teacher::Oracle => f.write_str("oracle"),
            Teacher::GreedyCentroid => f.write_str("greedy-centroid"),
            Teacher::NoisyOracle { p, refine } => write!(f, "noisy-oracle({p},{refine})"),
            Teacher::Random => f.write_str("random"),
            Teacher::ToolOnly => f.write_str("tool-only"),
        }
    }
}

impl FromStr for Teacher {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "oracle" => return Ok(Teacher::Oracle),
            "greedy-centroid" => return Ok(Teacher::GreedyCentroid),
            "random" => return Ok(Teacher::Random),
            "tool-only" => return Ok(Teacher::ToolOnly),
            _ => {}
        }
        let args = s
            .strip_prefix("noisy-oracle(")
            .and_then(|r| r.strip_suffix(')'))
            .ok_or_else(|| format!("unknown policy {s:?}"))?;
        let mut parts = args.split(',').map(str::trim);
        let p: f64 = parts
            .next()
            .and_then(|v| v.parse().ok())
            .filter(|p| (0.0..=1.0).contains(p))
            .ok_or_else(|| format!("{s:?}: error rate must be in [0, 1]"))?;
        let refine = match parts.next() {
            None => 0,
            Some(r) => r.parse().map_err(|_| format!("{s:?}: bad refine count"))?,
        };
        if parts.next().is_some() {
            return Err(format!("{s:?}: too many arguments"));
        }
        Ok(Teacher::NoisyOracle { p, refine })
    }
}

impl Teacher {
    /// True for teachers that read the ground truth instead of the observation.
    pub fn is_privileged(&self) -> bool {
        matches!(self, Teacher::Oracle | Teacher::NoisyOracle { .. })
    }

    /// Builds an observation-only policy; `None` for privileged teachers.
    pub fn observer(&self, seed: u64) -> Option<Box<dyn Policy + Send>> {
        match *self {
            Teacher::GreedyCentroid => Some(Box::new(GreedyCentroid { chosen: None })),
            Teacher::Random => Some(Box::new(RandomPolicy {
                rng: ChaCha8Rng::seed_from_u64(seed),
            })),
            Teacher::ToolOnly => Some(Box::new(ToolOnly)),
            Teacher::Oracle | Teacher::NoisyOracle { .. } => None,
        }
    }

    /// Builds the policy for one episode. Privileged teachers read the task.
    pub fn policy(&self, task: &Task, env: &EnvConfig, seed: u64) -> Box<dyn Policy + Send> {
        match *self {
            Teacher::Oracle => {
                let b = task.gt_mask.bbox();
                Box::new(Scripted::new(vec![
                    serialize_turn(&AgentTurn::tools(
                        format!("box around {}", task.question),
                        vec![ToolCall::SegmentBox { bbox: b }],
                    )),
                    answer("the box candidate covers the target", AnswerItem::Box(b)),
                ]))
            }
            Teacher::NoisyOracle { p, refine } => Box::new(Scripted::new(noisy_plan(task, env, seed, p, refine))),
            _ => self.observer(seed).expect("observation-only teacher"),
        }
    }
}

/// Replays a fixed list of turns; repeats the last one if asked for more.
pub struct Scripted {
    turns: VecDeque<String>,
    last: String,
}

impl Scripted {
    pub fn new(turns: Vec<String>) -> Self {
        Self {
            last: turns.last().cloned().unwrap_or_default(),
            turns: turns.into(),
        }
    }
}

impl Policy for Scripted {
    fn act(&mut self, _obs: &ObsPayload) -> Result<String, PolicyError> {
        Ok(self.turns.pop_front().unwrap_or_else(|| self.last.clone()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mistake {
    WrongFirst,
    Distracted,
    Dawdle,
    Lost,
}

fn noisy_plan(task: &Task, env: &EnvConfig, seed: u64, p: f64, refine: u32) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = &task.scene;
    let target = central_pixel(&task.gt_mask).expect("task masks are non-empty");
    let decoy = scene
        .region_ids()
        .find(|&id| id != task.target_region)
        .and_then(|id| scene.region_mask(id).and_then(central_pixel))
        .or_else(|| background_pixel(scene))
        .unwrap_or((0, 0));
    let mistake = rng.gen_bool(p).then(|| match rng.gen_range(0..4) {
        0 => Mistake::WrongFirst,
        1 => Mistake::Distracted,
        2 => Mistake::Dawdle,
        _ => Mistake::Lost,
    });
    let q = &task.question;
    let budget = env.max_turns as usize;
    let mut turns = Vec::new();
    match mistake {
        Some(Mistake::Dawdle) => {
            let (w, h) = (scene.width(), scene.height());
            let zoom = serialize_turn(&AgentTurn::tools(
                "inspect the whole scene again",
                vec![ToolCall::ZoomIn {
                    crop: BBox::new(0, 0, w, h),
                }],
            ));
            turns.extend(std::iter::repeat_n(zoom, budget));
            turns.push(answer(&format!("{q} is at the centre click"), click(target.0, target.1)));
            return turns;
        }
        Some(Mistake::Lost) => {
            turns.push(segment_at(&format!("{q} might be here"), decoy));
            turns.push(answer("this looks right", click(decoy.0, decoy.1)));
            return turns;
        }
        Some(Mistake::WrongFirst) => turns.push(segment_at(&format!("{q} might be here"), decoy)),
        _ => {}
    }
    if refine == 0 && mistake.is_none() {
        turns.push(answer(&format!("{q} is at the centre click"), click(target.0, target.1)));
        return turns;
    }
    let pixels: Vec<(u32, u32)> = task.gt_mask.pixels().collect();
    let mut clicks = vec![target];
    turns.push(segment_at(&format!("click the centre of {q}"), target));
    let room = budget.saturating_sub(turns.len());
    for _ in 0..(refine as usize).min(room) {
        let c = pixels[rng.gen_range(0..pixels.len())];
        clicks.push(c);
        turns.push(segment_at("try another click inside", c));
    }
    if mistake == Some(Mistake::Distracted) {
        turns.push(answer("the other object fits better", click(decoy.0, decoy.1)));
        return turns;
    }
    let score = |c: &(u32, u32)| {
        segment_scene_points(scene, &[PointPrompt::positive(c.0, c.1)], &env.segmentor)
            .ok()
            .and_then(|m| iou(&m, &task.gt_mask).ok())
            .unwrap_or(0.0)
    };
    let mut best = (clicks[0], score(&clicks[0]));
    for c in &clicks[1..] {
        let s = score(c);
        if s > best.1 {
            best = (*c, s);
        }
    }
    turns.push(answer("keep the tightest candidate", click(best.0 .0, best.0 .1)));
    turns
}

struct GreedyCentroid {
    chosen: Option<(u32, u32)>,
}

impl Policy for GreedyCentroid {
    fn act(&mut self, obs: &ObsPayload) -> Result<String, PolicyError> {
        let (vx, vy) = match self.chosen {
            Some(p) => {
                // answers are in scene coordinates
                let s = obs
                    .view
                    .to_scene(p.0 as i64, p.1 as i64)
                    .map_err(|e| PolicyError::Protocol(e.to_string()))?;
                return Ok(answer("the centre click matched", click(s.0, s.1)));
            }
            None => {
                let id = region_from_question(&obs.question)
                    .ok_or_else(|| PolicyError::Protocol(format!("cannot read question {:?}", obs.question)))?;
                let [w, h] = obs.view_size;
                let px: Vec<(u32, u32)> = (0..h)
                    .flat_map(|y| (0..w).map(move |x| (x, y)))
                    .filter(|&(x, y)| obs.view_label(x, y) == id)
                    .collect();
                if px.is_empty() {
                    return Ok(answer("target not visible", click(0, 0)));
                }
                let n = px.len() as f64;
                let cx = px.iter().map(|p| p.0 as f64 + 0.5).sum::<f64>() / n;
                let cy = px.iter().map(|p| p.1 as f64 + 0.5).sum::<f64>() / n;
                let d = |p: &(u32, u32)| (p.0 as f64 + 0.5 - cx).powi(2) + (p.1 as f64 + 0.5 - cy).powi(2);
                *px.iter().min_by(|a, b| d(a).total_cmp(&d(b))).expect("non-empty")
            }
        };
        self.chosen = Some((vx, vy));
        Ok(segment_at(&format!("centroid of {}", obs.question), (vx, vy)))
    }
}

struct RandomPolicy {
    rng: ChaCha8Rng,
}

impl RandomPolicy {
    fn rand_box(&mut self, w: u32, h: u32) -> BBox {
        let x0 = self.rng.gen_range(0..w);
        let y0 = self.rng.gen_range(0..h);
        BBox::new(x0, y0, self.rng.gen_range(x0 + 1..=w), self.rng.gen_range(y0 + 1..=h))
    }
}

impl Policy for RandomPolicy {
    fn act(&mut self, obs: &ObsPayload) -> Result<String, PolicyError> {
        let [w, h] = obs.view_size;
        let r = &mut self.rng;
        if r.gen_bool(0.15) {
            let s = obs
                .view
                .to_scene(r.gen_range(0..w) as i64, r.gen_range(0..h) as i64)
                .map_err(|e| PolicyError::Protocol(e.to_string()))?;
            return Ok(answer("guess", click(s.0, s.1)));
        }
        let call = match r.gen_range(0..4) {
            0 => ToolCall::ZoomIn {
                crop: self.rand_box(w, h),
            },
            1 => ToolCall::Rotate {
                angle: [90, 180, 270, 45][r.gen_range(0..4)],
            },
            2 => ToolCall::SegmentPoints {
                points: vec![PointPrompt::positive(r.gen_range(0..w), r.gen_range(0..h))],
            },
            _ => ToolCall::SegmentBox {
                bbox: self.rand_box(w, h),
            },
        };
        Ok(serialize_turn(&AgentTurn::tools("explore", vec![call])))
    }
}

struct ToolOnly;

impl Policy for ToolOnly {
    fn act(&mut self, _obs: &ObsPayload) -> Result<String, PolicyError> {
        Ok(serialize_turn(&AgentTurn::tools("keep looking", vec![ToolCall::Rotate { angle: 90 }])))
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::scene::{generate_scene, SceneSpec, SegmentorConfig};

    fn task(seed: u64) -> Task {
        let s = generate_scene(SceneSpec::default(), seed).unwrap();
        Task::new(format!("t{seed}"), Arc::new(s), 2).unwrap()
    }

    fn run(t: Teacher, task: &Task, cfg: &EnvConfig, seed: u64) -> Trajectory {
        run_episode(task, cfg, t.policy(task, cfg, seed).as_mut()).unwrap()
    }

    #[test]
    fn teacher_names_round_trip() {
        for s in ["oracle", "greedy-centroid", "random", "tool-only", "noisy-oracle(0.3,2)"] {
            assert_eq!(s.parse::<Teacher>().unwrap().to_string(), s);
        }
        assert_eq!(
            "noisy-oracle(0.5)".parse::<Teacher>().unwrap(),
            Teacher::NoisyOracle { p: 0.5, refine: 0 }
        );
        for bad in ["oracle2", "noisy-oracle(2)", "noisy-oracle(0.1,x)", "noisy-oracle(0.1,1,1)"] {
            assert!(bad.parse::<Teacher>().is_err(), "{bad}");
        }
    }

    #[test]
    fn oracle_and_centroid_are_exact_without_noise() {
        let cfg = EnvConfig::default();
        for seed in 0..10 {
            let t = task(seed);
            for teacher in [Teacher::Oracle, Teacher::GreedyCentroid, Teacher::NoisyOracle { p: 0.0, refine: 2 }] {
                let tr = run(teacher, &t, &cfg, seed);
                let pred = tr.prediction.as_ref().unwrap();
                assert_eq!(iou(&pred.union, &t.gt_mask).unwrap(), 1.0, "{teacher} seed {seed}");
            }
        }
    }

    #[test]
    fn tool_only_hits_the_budget() {
        let cfg = EnvConfig::default();
        let tr = run(Teacher::ToolOnly, &task(1), &cfg, 0);
        assert_eq!(tr.turns(), cfg.max_turns as usize + 1);
        assert!(tr.prediction.unwrap().masks.is_empty());
    }

    #[test]
    fn random_policy_terminates_and_is_seeded() {
        let cfg = EnvConfig::default();
        let t = task(3);
        for seed in 0..20 {
            let a = run(Teacher::Random, &t, &cfg, seed);
            assert!(a.turns() <= cfg.max_turns as usize + 1);
            assert_eq!(a.steps, run(Teacher::Random, &t, &cfg, seed).steps);
        }
    }

    #[test]
    fn refinement_never_hurts_under_noise() {
        let cfg = EnvConfig {
            segmentor: SegmentorConfig {
                noise_radius: 1,
                noise_seed: 9,
            },
            ..Default::default()
        };
        for seed in 0..10 {
            let t = task(seed);
            let single = run(Teacher::NoisyOracle { p: 0.0, refine: 0 }, &t, &cfg, seed);
            let refined = run(Teacher::NoisyOracle { p: 0.0, refine: 3 }, &t, &cfg, seed);
            assert_eq!(single.turns(), 1);
            assert_eq!(refined.turns(), 5);
            let f = |tr: &Trajectory| iou(&tr.prediction.as_ref().unwrap().union, &t.gt_mask).unwrap();
            assert!(f(&refined) >= f(&single));
        }
    }

    #[test]
    fn mistakes_shape_the_trajectory() {
        let cfg = EnvConfig::default();
        let mut seen = [false; 4];
        for seed in 0..200 {
            let t = task(seed % 7);
            let tr = run(Teacher::NoisyOracle { p: 1.0, refine: 1 }, &t, &cfg, seed);
            let fin = iou(&tr.prediction.as_ref().unwrap().union, &t.gt_mask).unwrap();
            match (tr.turns(), fin == 1.0) {
                (9, true) => seen[0] = true,  // dawdle
                (2, false) => seen[1] = true, // lost
                (4, true) => seen[2] = true,  // wrong first
                (3, false) => seen[3] = true, // distracted
                other => panic!("unexpected shape {other:?}"),
            }
        }
        assert_eq!(seen, [true; 4]);
    }
}
