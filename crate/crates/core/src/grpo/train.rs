use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{clipped_loss, loss_gradient, GrpoError, RolloutGroup, ToyPolicy, TokenizedRollout, DELTA};
use crate::env::{EnvConfig, Episode, Task};
use crate::geom::{Connectivity, PointPrompt};
use crate::policy::{background_pixel, central_pixel};
use crate::protocol::{AgentTurn, AnswerItem};
use crate::reward::{score_trajectory, RewardWeights};
use crate::scene::{generate_scene, SceneSpec};

/// One answer template and the return it earns.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Arm {
    pub label: String,
    pub item: AnswerItem,
    pub ret: f64,
}

/// Contextual bandit: each context is a scene and target, each arm a one-turn
/// answer. Returns come from running the episode and scoring it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PromptBandit {
    pub arms: Vec<Vec<Arm>>,
}

impl PromptBandit {
    /// Arms per context: a click inside the target, a click on background and
    /// a click on another region, in seeded random order.
    pub fn build(contexts: usize, seed: u64, env: &EnvConfig, weights: &RewardWeights) -> Result<Self, GrpoError> {
        if contexts == 0 {
            return Err(GrpoError::Config("bandit needs at least one context".into()));
        }
        let spec = SceneSpec {
            regions: 3,
            width: 48,
            height: 48,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut arms = Vec::with_capacity(contexts);
        for c in 0..contexts {
            let scene_seed = seed.wrapping_mul(1_000_003).wrapping_add(c as u64);
            let scene = Arc::new(generate_scene(spec, scene_seed).map_err(|e| GrpoError::Config(e.to_string()))?);
            let task = Task::new(format!("bandit_{c}"), scene.clone(), 1).map_err(|e| GrpoError::Config(e.to_string()))?;
            let pick = |id: u32| scene.region_mask(id).and_then(central_pixel);
            let cands = [
                ("target", pick(1)),
                ("background", background_pixel(&scene)),
                ("other_region", pick(2)),
            ];
            let mut row = Vec::with_capacity(3);
            for (label, px) in cands {
                let (x, y) = px.ok_or_else(|| GrpoError::Config(format!("context {c}: no pixel for {label} arm")))?;
                let item = AnswerItem::Points(vec![PointPrompt::positive(x, y)]);
                let ret = arm_return(&task, env, weights, &item)?;
                row.push(Arm {
                    label: label.to_string(),
                    item,
                    ret,
                });
            }
            row.shuffle(&mut rng);
            arms.push(row);
        }
        Ok(Self { arms })
    }

    pub fn contexts(&self) -> usize {
        self.arms.len()
    }

    pub fn actions(&self) -> usize {
        self.arms.first().map_or(0, Vec::len)
    }

    /// Mean over contexts of the best arm's return.
    pub fn optimal(&self) -> f64 {
        self.mean(|row, _| row.iter().map(|a| a.ret).fold(f64::NEG_INFINITY, f64::max))
    }

    /// Mean over contexts of the greedy arm's return.
    pub fn greedy_return(&self, p: &ToyPolicy) -> f64 {
        self.mean(|row, c| row[p.greedy(c)].ret)
    }

    /// Mean over contexts of the policy's expected return.
    pub fn expected_return(&self, p: &ToyPolicy) -> f64 {
        self.mean(
            |row, c| row.iter().zip(p.probs(c)).map(|(a, pr)| a.ret * pr).sum(),
        )
    }

    fn mean(&self, f: impl Fn(&[Arm], usize) -> f64) -> f64 {
        self.arms.iter().enumerate().map(|(c, row)| f(row, c)).sum::<f64>() / self.arms.len() as f64
    }
}

fn arm_return(task: &Task, env: &EnvConfig, w: &RewardWeights, item: &AnswerItem) -> Result<f64, GrpoError> {
    let cfg_err = |e: String| GrpoError::Config(e);
    let (mut ep, _) = Episode::reset(task.clone(), *env).map_err(|e| cfg_err(e.to_string()))?;
    ep.step_turn(&AgentTurn::answer("", vec![item.clone()]))
        .map_err(|e| cfg_err(e.to_string()))?;
    let b = score_trajectory(ep.trajectory(), &task.gt_mask, Connectivity::Four, w).map_err(|e| cfg_err(e.to_string()))?;
    Ok(b.s_total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub group_size: usize,
    /// Budget of sampled groups.
    pub max_groups: usize,
    /// Groups per update; the old policy is refreshed once per batch.
    pub groups_per_iter: usize,
    pub lr: f64,
    /// Gradient steps per batch.
    pub epochs: usize,
    pub eps_clip: f64,
    pub delta: f64,
    pub seed: u64,
    /// Fraction of the optimal return the greedy policy must reach.
    pub target: f64,
    pub stop_at_target: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            group_size: 4,
            max_groups: 2000,
            groups_per_iter: 4,
            lr: 0.5,
            epochs: 2,
            eps_clip: 0.2,
            delta: DELTA,
            seed: 0,
            target: 0.95,
            stop_at_target: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterStats {
    pub it: usize,
    #[serde(rename = "mean_S")]
    pub mean_s: f64,
    pub loss: f64,
    pub grad_norm: f64,
    #[serde(skip)]
    pub expected: f64,
    #[serde(skip)]
    pub greedy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub curve: Vec<IterStats>,
    pub policy: ToyPolicy,
    pub groups_used: usize,
    /// Groups sampled when the greedy policy first reached the target.
    pub reached_at: Option<usize>,
    pub optimal: f64,
}

impl TrainReport {
    pub fn to_jsonl(&self) -> String {
        self.curve
            .iter()
            .map(|s| serde_json::to_string(s).expect("stats serialize") + "\n")
            .collect()
    }
}

pub fn train_toy(bandit: &PromptBandit, cfg: &TrainConfig) -> Result<TrainReport, GrpoError> {
    if cfg.group_size == 0 || cfg.groups_per_iter == 0 {
        return Err(GrpoError::Config("group_size and groups_per_iter must be positive".into()));
    }
    if !cfg.lr.is_finite() || cfg.lr < 0.0 || cfg.delta <= 0.0 {
        return Err(GrpoError::Config("lr must be finite and non-negative, delta positive".into()));
    }
    let (nc, na) = (bandit.contexts(), bandit.actions());
    if nc == 0 || na == 0 {
        return Err(GrpoError::Config("empty bandit".into()));
    }
    let mut policy = ToyPolicy::uniform(nc, na);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let optimal = bandit.optimal();
    let mut curve = Vec::new();
    let mut used = 0;
    let mut reached_at = None;
    while used < cfg.max_groups {
        let old = policy.clone();
        let n = cfg.groups_per_iter.min(cfg.max_groups - used);
        let mut groups = Vec::with_capacity(n);
        let mut ret_sum = 0.0;
        for b in 0..n {
            let ctx = (used + b) % nc;
            let rollouts = (0..cfg.group_size)
                .map(|_| {
                    let a = old.sample(ctx, &mut rng);
                    let lp = old.log_prob(ctx, a);
                    let ret = bandit.arms[ctx][a].ret;
                    ret_sum += ret;
                    TokenizedRollout {
                        contexts: vec![ctx],
                        tokens: vec![a],
                        logp_old: vec![lp],
                        logp_new: vec![lp],
                        ret,
                    }
                })
                .collect();
            groups.push(RolloutGroup::new(rollouts, cfg.delta));
        }
        used += n;
        let (mut loss, mut grad_norm) = (0.0, 0.0);
        for e in 0..cfg.epochs.max(1) {
            policy.refresh(&mut groups);
            let l = clipped_loss(&groups, cfg.eps_clip)?;
            if !l.is_finite() {
                return Err(GrpoError::Training(format!("loss {l} at iteration {}", curve.len())));
            }
            let g = loss_gradient(&policy, &groups, cfg.eps_clip)?;
            if e == 0 {
                loss = l;
                grad_norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            }
            for (t, d) in policy.theta.iter_mut().zip(&g) {
                *t -= cfg.lr * d;
            }
            if policy.theta.iter().any(|t| !t.is_finite()) {
                return Err(GrpoError::Training(format!("parameters overflowed at iteration {}", curve.len())));
            }
        }
        let greedy = bandit.greedy_return(&policy);
        curve.push(IterStats {
            it: curve.len(),
            mean_s: ret_sum / (n * cfg.group_size) as f64,
            loss,
            grad_norm,
            expected: bandit.expected_return(&policy),
            greedy,
        });
        if reached_at.is_none() && greedy >= cfg.target * optimal {
            reached_at = Some(used);
            if cfg.stop_at_target {
                break;
            }
        }
    }
    Ok(TrainReport {
        curve,
        policy,
        groups_used: used,
        reached_at,
        optimal,
    })
}
