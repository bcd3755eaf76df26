//! Composite episode reward: per-step shaping, format reward, matched final
//! reward and their weighted total.

mod hungarian;

use serde::{Deserialize, Serialize};

pub use hungarian::{hungarian, Assignment};

use crate::env::{Event, Trajectory, TrajectoryLog};
use crate::geom::{box_iou, connected_components, iou, union_bbox, BitMask, Connectivity, GeomError, PointPrompt};
use crate::protocol::{AnswerItem, ToolKind};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RewardError {
    #[error(transparent)]
    Dimension(#[from] GeomError),
    #[error("ground truth mask is empty")]
    GtEmpty,
    #[error("invalid reward weights: {0}")]
    Weights(String),
    #[error("cannot score trajectory: {0}")]
    Log(String),
}

/// Cost multiplier per tool.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToolCosts {
    pub zoom_in: f64,
    pub rotate: f64,
    pub segment_points: f64,
    pub segment_box: f64,
}

impl Default for ToolCosts {
    fn default() -> Self {
        Self {
            zoom_in: 1.0,
            rotate: 1.0,
            segment_points: 2.5,
            segment_box: 2.5,
        }
    }
}

impl ToolCosts {
    pub fn of(&self, kind: ToolKind) -> f64 {
        match kind {
            ToolKind::ZoomIn => self.zoom_in,
            ToolKind::Rotate => self.rotate,
            ToolKind::SegmentPoints => self.segment_points,
            ToolKind::SegmentBox => self.segment_box,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub eta: f64,
    pub lambda_delta: f64,
    pub lambda_best: f64,
    pub lambda_inv: f64,
    pub lambda_cost: f64,
    pub kappa: ToolCosts,
    pub rho_pt: f64,
    pub beta_pt: f64,
    pub eps_pt: f64,
    pub d_min: f64,
    pub clip_lo: f64,
    pub clip_hi: f64,
    pub b_ok: f64,
    pub p_viol: f64,
    /// Weight of the union-box term in the final reward.
    pub box_weight: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.5,
            gamma: 0.2,
            eta: 1.0,
            lambda_delta: 1.0,
            lambda_best: 0.5,
            lambda_inv: 1.0,
            lambda_cost: 0.05,
            kappa: ToolCosts::default(),
            rho_pt: 0.05,
            beta_pt: 0.1,
            eps_pt: 0.01,
            d_min: 8.0,
            clip_lo: -0.1,
            clip_hi: 0.5,
            b_ok: 0.1,
            p_viol: 0.5,
            box_weight: 0.5,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<(), RewardError> {
        let k = &self.kappa;
        let all = [
            self.alpha,
            self.beta,
            self.gamma,
            self.eta,
            self.lambda_delta,
            self.lambda_best,
            self.lambda_inv,
            self.lambda_cost,
            k.zoom_in,
            k.rotate,
            k.segment_points,
            k.segment_box,
            self.rho_pt,
            self.beta_pt,
            self.eps_pt,
            self.d_min,
            self.clip_lo,
            self.clip_hi,
            self.b_ok,
            self.p_viol,
            self.box_weight,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(RewardError::Weights("all weights must be finite".into()));
        }
        if !(self.clip_lo < 0.0 && 0.0 < self.clip_hi) {
            return Err(RewardError::Weights("need clip_lo < 0 < clip_hi".into()));
        }
        if self.d_min <= 0.0 {
            return Err(RewardError::Weights("d_min must be positive".into()));
        }
        Ok(())
    }
}

/// Shaping state threaded through an episode's tool turns.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ShapingState {
    pub iou_prev: f64,
    pub iou_best: f64,
    /// Positive points used so far, scene coordinates.
    pub point_history: Vec<(u32, u32)>,
}

/// What one tool turn did, as seen by the reward.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TurnOutcome {
    /// Masks produced by segmentation calls this turn.
    pub masks: Vec<BitMask>,
    /// Kinds of the calls that actually executed.
    pub calls: Vec<ToolKind>,
    /// Any violation or rejected call this turn.
    pub invalid: bool,
    /// Point prompts issued this turn, scene coordinates.
    pub points: Vec<PointPrompt>,
}

impl TurnOutcome {
    /// Rebuilds the outcome of a logged turn from its events and candidate masks.
    pub fn from_events(events: &[Event], candidates: &[BitMask]) -> Self {
        let mut out = TurnOutcome {
            masks: candidates.to_vec(),
            ..Default::default()
        };
        for e in events {
            out.invalid |= e.is_invalid();
            match e {
                Event::View { tool, .. } => out.calls.push(*tool),
                Event::Candidate { tool, prompt, .. } => {
                    out.calls.push(*tool);
                    if let AnswerItem::Points(pts) = prompt {
                        out.points.extend_from_slice(pts);
                    }
                }
                _ => {}
            }
        }
        out
    }
}

/// Components of one step reward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepTerms {
    pub iou: f64,
    pub delta: f64,
    pub progress: f64,
    pub best_bonus: f64,
    pub cost: f64,
    pub invalid: f64,
    pub point: f64,
    pub r: f64,
}

pub fn step_reward(
    state: &ShapingState,
    outcome: &TurnOutcome,
    gt: &BitMask,
    w: &RewardWeights,
) -> Result<(StepTerms, ShapingState), RewardError> {
    let mut iou_t = None::<f64>;
    for m in &outcome.masks {
        let v = iou(m, gt)?;
        iou_t = Some(iou_t.map_or(v, |b| b.max(v)));
    }
    let iou_t = iou_t.unwrap_or(state.iou_prev);
    let delta = iou_t - state.iou_prev;
    let progress = w.lambda_delta * delta.clamp(w.clip_lo, w.clip_hi);
    let best_bonus = w.lambda_best * (iou_t - state.iou_best).max(0.0);
    let cost = w.lambda_cost * outcome.calls.iter().map(|&k| w.kappa.of(k)).sum::<f64>();
    let invalid = if outcome.invalid { w.lambda_inv } else { 0.0 };
    let point = point_novelty(&outcome.points, &state.point_history, delta, w);
    let r = progress + best_bonus - cost - invalid + point;

    let mut history = state.point_history.clone();
    history.extend(outcome.points.iter().filter(|p| p.is_positive()).map(|p| (p.x, p.y)));
    let next = ShapingState {
        iou_prev: iou_t,
        iou_best: state.iou_best.max(iou_t),
        point_history: history,
    };
    Ok((
        StepTerms {
            iou: iou_t,
            delta,
            progress,
            best_bonus,
            cost,
            invalid,
            point,
            r,
        },
        next,
    ))
}

/// Bonus for new positive clicks minus a penalty for clicks near earlier ones.
///
/// Points are taken in order; each is compared with the history and with the
/// points before it in the same turn.
pub fn point_novelty(points: &[PointPrompt], history: &[(u32, u32)], delta: f64, w: &RewardWeights) -> f64 {
    if delta <= w.eps_pt {
        return 0.0;
    }
    let mut seen: Vec<(u32, u32)> = history.to_vec();
    let (mut n_new, mut redund) = (0u32, 0.0);
    for p in points.iter().filter(|p| p.is_positive()) {
        let d = seen
            .iter()
            .map(|&(x, y)| (x as f64 - p.x as f64).hypot(y as f64 - p.y as f64))
            .fold(f64::INFINITY, f64::min);
        if d >= w.d_min {
            n_new += 1;
        } else {
            redund += (1.0 - d / w.d_min).clamp(0.0, 1.0);
        }
        seen.push((p.x, p.y));
    }
    w.rho_pt * n_new as f64 - w.beta_pt * redund
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FinalScore {
    pub r_final: f64,
    pub matched_iou: f64,
    pub box_iou: f64,
    /// `(prediction, gt component, iou)` for each matched pair.
    pub matches: Vec<(usize, usize, f64)>,
    pub components: usize,
}

/// Matched mean IoU over ground-truth components plus the weighted union-box IoU.
pub fn final_reward(
    pred: &[BitMask],
    gt: &BitMask,
    connectivity: Connectivity,
    w: &RewardWeights,
) -> Result<FinalScore, RewardError> {
    if gt.is_empty() {
        return Err(RewardError::GtEmpty);
    }
    for p in pred {
        p.same_dims(gt)?;
    }
    let comps = connected_components(gt, connectivity);
    let mut ious = vec![vec![0.0; comps.len()]; pred.len()];
    for (i, p) in pred.iter().enumerate() {
        for (j, c) in comps.iter().enumerate() {
            ious[i][j] = iou(p, c)?;
        }
    }
    let cost: Vec<Vec<f64>> = ious.iter().map(|r| r.iter().map(|v| 1.0 - v).collect()).collect();
    let matches: Vec<(usize, usize, f64)> = hungarian(&cost)
        .pairs
        .into_iter()
        .map(|(i, j)| (i, j, ious[i][j]))
        .collect();
    let matched_iou = matches.iter().map(|m| m.2).sum::<f64>() / comps.len() as f64;
    let b = box_iou(&union_bbox(pred)?, &union_bbox(&comps)?);
    Ok(FinalScore {
        r_final: matched_iou + w.box_weight * b,
        matched_iou,
        box_iou: b,
        matches,
        components: comps.len(),
    })
}

/// Sum of per-turn format credit, clamped to `[-1, 1]`.
pub fn format_reward(turn_ok: &[bool], w: &RewardWeights) -> f64 {
    turn_ok
        .iter()
        .map(|&ok| if ok { w.b_ok } else { -w.p_viol })
        .sum::<f64>()
        .clamp(-1.0, 1.0)
}

pub fn total_return(r_final: f64, r_process: f64, r_format: f64, w: &RewardWeights) -> f64 {
    w.alpha * r_final + w.beta * r_process + w.gamma * r_format
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RewardBreakdown {
    pub r_steps: Vec<f64>,
    #[serde(rename = "R_process")]
    pub r_process: f64,
    #[serde(rename = "R_format")]
    pub r_format: f64,
    #[serde(rename = "R_final")]
    pub r_final: f64,
    #[serde(rename = "S")]
    pub s_total: f64,
    pub weights: RewardWeights,
}

impl RewardBreakdown {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("breakdown serializes")
    }
}

/// Scores a logged episode. Answer turns carry no step reward; their masks
/// feed only the final term.
pub fn score_log(
    log: &TrajectoryLog,
    gt: &BitMask,
    connectivity: Connectivity,
    w: &RewardWeights,
) -> Result<RewardBreakdown, RewardError> {
    let mut state = ShapingState::default();
    let mut r_steps = Vec::new();
    let mut ok = Vec::with_capacity(log.steps.len());
    for s in &log.steps {
        ok.push(!s.events.iter().any(Event::is_invalid));
        if s.is_answer() {
            continue;
        }
        let (terms, next) = step_reward(&state, &TurnOutcome::from_events(&s.events, &s.candidates), gt, w)?;
        r_steps.push(terms.r);
        state = next;
    }
    let r_process = w.eta * r_steps.iter().sum::<f64>();
    let r_format = format_reward(&ok, w);
    let r_final = final_reward(&log.fin.masks, gt, connectivity, w)?.r_final;
    Ok(RewardBreakdown {
        s_total: total_return(r_final, r_process, r_format, w),
        r_steps,
        r_process,
        r_format,
        r_final,
        weights: w.clone(),
    })
}

pub fn score_trajectory(
    traj: &Trajectory,
    gt: &BitMask,
    connectivity: Connectivity,
    w: &RewardWeights,
) -> Result<RewardBreakdown, RewardError> {
    let log = TrajectoryLog::from_trajectory(traj, gt).map_err(|e| match e {
        crate::env::LogError::Geom(g) => RewardError::Dimension(g),
        other => RewardError::Log(other.to_string()),
    })?;
    score_log(&log, gt, connectivity, w)
}
