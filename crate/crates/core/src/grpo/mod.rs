//! Group-relative policy optimization for a tabular softmax policy.

mod train;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use train::{train_toy, Arm, IterStats, PromptBandit, TrainConfig, TrainReport};

/// Default stability constant for advantage normalization.
pub const DELTA: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GrpoError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("training diverged: {0}")]
    Training(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// One sampled trajectory reduced to its action tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizedRollout {
    /// Context key under which each token was emitted.
    pub contexts: Vec<usize>,
    pub tokens: Vec<usize>,
    pub logp_old: Vec<f64>,
    pub logp_new: Vec<f64>,
    #[serde(rename = "S")]
    pub ret: f64,
}

impl TokenizedRollout {
    fn check(&self) -> Result<usize, GrpoError> {
        let t = self.tokens.len();
        if t == 0 {
            return Err(GrpoError::Shape("rollout has no tokens".into()));
        }
        if self.contexts.len() != t || self.logp_old.len() != t || self.logp_new.len() != t {
            return Err(GrpoError::Shape(format!(
                "tokens {t}, contexts {}, logp_old {}, logp_new {}",
                self.contexts.len(),
                self.logp_old.len(),
                self.logp_new.len()
            )));
        }
        Ok(t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub rollouts: Vec<TokenizedRollout>,
    pub advantages: Vec<f64>,
}

impl RolloutGroup {
    /// Builds a group with normalized advantages.
    pub fn new(rollouts: Vec<TokenizedRollout>, delta: f64) -> Self {
        let s: Vec<f64> = rollouts.iter().map(|r| r.ret).collect();
        Self {
            advantages: group_advantages(&s, delta),
            rollouts,
        }
    }
}

/// `(S_i - mean) / sqrt(popvar + delta)`; all zeros when every return is equal.
pub fn group_advantages(s: &[f64], delta: f64) -> Vec<f64> {
    if s.is_empty() {
        return Vec::new();
    }
    if s.iter().all(|&v| v == s[0]) {
        return vec![0.0; s.len()];
    }
    let n = s.len() as f64;
    let mu = s.iter().sum::<f64>() / n;
    let var = s.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
    let sigma = (var + delta).sqrt();
    s.iter().map(|v| (v - mu) / sigma).collect()
}

pub fn importance_ratios(r: &TokenizedRollout) -> Result<Vec<f64>, GrpoError> {
    if r.logp_old.len() != r.logp_new.len() {
        return Err(GrpoError::Shape(format!(
            "logp_old has {} entries, logp_new {}",
            r.logp_old.len(),
            r.logp_new.len()
        )));
    }
    Ok(r.logp_new.iter().zip(&r.logp_old).map(|(n, o)| (n - o).exp()).collect())
}

fn check_groups(groups: &[RolloutGroup], eps_clip: f64) -> Result<(), GrpoError> {
    if !(eps_clip > 0.0 && eps_clip < 1.0) {
        return Err(GrpoError::Config(format!("eps_clip must lie in (0, 1), got {eps_clip}")));
    }
    if groups.is_empty() {
        return Err(GrpoError::Shape("no groups".into()));
    }
    for g in groups {
        if g.rollouts.is_empty() || g.rollouts.len() != g.advantages.len() {
            return Err(GrpoError::Shape(format!(
                "group has {} rollouts and {} advantages",
                g.rollouts.len(),
                g.advantages.len()
            )));
        }
        for r in &g.rollouts {
            r.check()?;
        }
    }
    Ok(())
}

/// Clipped surrogate averaged per rollout, per group and over groups, negated.
pub fn clipped_loss(groups: &[RolloutGroup], eps_clip: f64) -> Result<f64, GrpoError> {
    check_groups(groups, eps_clip)?;
    let mut total = 0.0;
    for g in groups {
        let mut gsum = 0.0;
        for (r, &a) in g.rollouts.iter().zip(&g.advantages) {
            let rho = importance_ratios(r)?;
            let per: f64 = rho
                .iter()
                .map(|&p| (p * a).min(p.clamp(1.0 - eps_clip, 1.0 + eps_clip) * a))
                .sum();
            gsum += per / rho.len() as f64;
        }
        total += gsum / g.rollouts.len() as f64;
    }
    Ok(-total / groups.len() as f64)
}

/// Softmax policy with one logit row per context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPolicy {
    pub contexts: usize,
    pub actions: usize,
    /// Row-major `contexts × actions`.
    pub theta: Vec<f64>,
}

impl ToyPolicy {
    pub fn uniform(contexts: usize, actions: usize) -> Self {
        assert!(contexts > 0 && actions > 0, "policy needs at least one context and action");
        Self {
            contexts,
            actions,
            theta: vec![0.0; contexts * actions],
        }
    }

    pub fn logits(&self, ctx: usize) -> &[f64] {
        &self.theta[ctx * self.actions..(ctx + 1) * self.actions]
    }

    pub fn probs(&self, ctx: usize) -> Vec<f64> {
        let l = self.logits(ctx);
        let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = l.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|v| v / z).collect()
    }

    pub fn log_prob(&self, ctx: usize, action: usize) -> f64 {
        let l = self.logits(ctx);
        let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + l.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        l[action] - lse
    }

    pub fn sample<R: Rng>(&self, ctx: usize, rng: &mut R) -> usize {
        WeightedIndex::new(self.probs(ctx))
            .expect("softmax weights are positive")
            .sample(rng)
    }

    /// Highest-probability action, lowest index on ties.
    pub fn greedy(&self, ctx: usize) -> usize {
        let l = self.logits(ctx);
        (0..self.actions).fold(0, |b, a| if l[a] > l[b] { a } else { b })
    }

    /// Overwrites `logp_new` of every rollout with this policy's log-probs.
    pub fn refresh(&self, groups: &mut [RolloutGroup]) {
        for r in groups.iter_mut().flat_map(|g| g.rollouts.iter_mut()) {
            r.logp_new = r.contexts.iter().zip(&r.tokens).map(|(&c, &a)| self.log_prob(c, a)).collect();
        }
    }
}

/// Clipped loss with `logp_new` recomputed from `policy`.
pub fn policy_loss(policy: &ToyPolicy, groups: &[RolloutGroup], eps_clip: f64) -> Result<f64, GrpoError> {
    let mut g = groups.to_vec();
    policy.refresh(&mut g);
    clipped_loss(&g, eps_clip)
}

/// Analytic gradient of [`policy_loss`] with respect to `theta`. Tokens whose
/// clipped branch is active contribute nothing.
pub fn loss_gradient(policy: &ToyPolicy, groups: &[RolloutGroup], eps_clip: f64) -> Result<Vec<f64>, GrpoError> {
    check_groups(groups, eps_clip)?;
    let mut grad = vec![0.0; policy.theta.len()];
    let ng = groups.len() as f64;
    for g in groups {
        let gn = g.rollouts.len() as f64;
        for (r, &a) in g.rollouts.iter().zip(&g.advantages) {
            let t = r.tokens.len() as f64;
            for ((&ctx, &tok), &old) in r.contexts.iter().zip(&r.tokens).zip(&r.logp_old) {
                if ctx >= policy.contexts || tok >= policy.actions {
                    return Err(GrpoError::Shape(format!("token ({ctx}, {tok}) outside policy table")));
                }
                let rho = (policy.log_prob(ctx, tok) - old).exp();
                let unclipped = rho * a;
                if unclipped > rho.clamp(1.0 - eps_clip, 1.0 + eps_clip) * a {
                    continue;
                }
                let coef = -unclipped / (ng * gn * t);
                let p = policy.probs(ctx);
                let row = &mut grad[ctx * policy.actions..(ctx + 1) * policy.actions];
                for (k, gk) in row.iter_mut().enumerate() {
                    let onehot = if k == tok { 1.0 } else { 0.0 };
                    *gk += coef * (onehot - p[k]);
                }
            }
        }
    }
    Ok(grad)
}

/// Central-difference gradient of [`policy_loss`].
pub fn numeric_gradient(policy: &ToyPolicy, groups: &[RolloutGroup], eps_clip: f64, h: f64) -> Result<Vec<f64>, GrpoError> {
    let mut p = policy.clone();
    let mut out = Vec::with_capacity(p.theta.len());
    for i in 0..p.theta.len() {
        let x = p.theta[i];
        p.theta[i] = x + h;
        let up = policy_loss(&p, groups, eps_clip)?;
        p.theta[i] = x - h;
        let down = policy_loss(&p, groups, eps_clip)?;
        p.theta[i] = x;
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Largest componentwise `|a - b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
