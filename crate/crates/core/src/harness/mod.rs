//! Batch commands behind the `segloop` binary.

pub mod wire;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{EnvConfig, Task, TrajectoryLog};
use crate::geom::{c_iou, g_iou, union_masks, BitMask, Connectivity};
use crate::grpo::{train_toy, PromptBandit, TrainConfig};
use crate::pipeline::{curate, FilterConfig, FilterDecision, Manifest};
use crate::policy::{episode_seed, run_episode, Policy, PolicyError, RunError, Teacher};
use crate::reward::{score_log, RewardBreakdown, RewardWeights};
use crate::scene::{generate_scene, Scene, SceneFile, SceneSpec};

pub use wire::{serve, serve_tcp, Endpoint, ExternalPolicy};

/// Environment variable naming a config file when `--config` is absent.
pub const CONFIG_ENV: &str = "SEGLOOP_CONFIG";

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Protocol(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Validation(_) => 2,
            HarnessError::Protocol(_) => 3,
            HarnessError::Io { .. } => 1,
        }
    }
}

impl From<PolicyError> for HarnessError {
    fn from(e: PolicyError) -> Self {
        HarnessError::Protocol(e.to_string())
    }
}

impl From<RunError> for HarnessError {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Policy(p) => p.into(),
            RunError::Env(e) => HarnessError::Validation(e.to_string()),
        }
    }
}

fn invalid(e: impl fmt::Display) -> HarnessError {
    HarnessError::Validation(e.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrpoSettings {
    #[serde(flatten)]
    pub train: TrainConfig,
    /// Scenes in the prompt-selection bandit.
    pub contexts: usize,
}

impl Default for GrpoSettings {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            contexts: 4,
        }
    }
}

/// Everything a command can be configured with. Missing keys take defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessConfig {
    pub env: EnvConfig,
    pub reward: RewardWeights,
    pub grpo: GrpoSettings,
    pub filter: FilterConfig,
    pub scenes: SceneSpec,
    /// Tasks generated by `run` when no scene directory is given.
    pub tasks: usize,
    pub connectivity: Connectivity,
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    pub jobs: usize,
    pub out: PathBuf,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            env: EnvConfig::default(),
            reward: RewardWeights::default(),
            grpo: GrpoSettings::default(),
            filter: FilterConfig::default(),
            scenes: SceneSpec::default(),
            tasks: 100,
            connectivity: Connectivity::Four,
            seed: 0,
            jobs: 0,
            out: PathBuf::from("out"),
        }
    }
}

impl HarnessConfig {
    /// Reads `path`, else the file named by `SEGLOOP_CONFIG`, else defaults.
    pub fn load(path: Option<&Path>) -> Result<Self, HarnessError> {
        let from_env = std::env::var_os(CONFIG_ENV).map(PathBuf::from);
        let cfg = match path.map(Path::to_path_buf).or(from_env) {
            Some(p) => {
                let text = read(&p)?;
                serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", p.display())))?
            }
            None => Self::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.env.validate().map_err(invalid)?;
        self.reward.validate().map_err(invalid)?;
        self.scenes.validate().map_err(invalid)?;
        let t = &self.grpo.train;
        if t.group_size == 0 || t.groups_per_iter == 0 || self.grpo.contexts == 0 {
            return Err(invalid("grpo group_size, groups_per_iter and contexts must be positive"));
        }
        if !(t.eps_clip > 0.0 && t.eps_clip < 1.0) {
            return Err(invalid("grpo eps_clip must lie in (0, 1)"));
        }
        if !(t.delta > 0.0) || !(t.lr >= 0.0) || !t.lr.is_finite() {
            return Err(invalid("grpo delta must be positive and lr finite and non-negative"));
        }
        let f = &self.filter;
        if !(0.0..=1.0).contains(&f.keep_iou) || !(0.0..=1.0).contains(&f.rescue_iou) {
            return Err(invalid("filter thresholds must lie in [0, 1]"));
        }
        Ok(())
    }

    fn pool(&self) -> Result<rayon::ThreadPool, HarnessError> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs)
            .build()
            .map_err(|e| invalid(format!("cannot start worker pool: {e}")))
    }
}

/// How `run` obtains turns.
#[derive(Debug, Clone, PartialEq)]
pub enum PolicyBinding {
    Scripted(Teacher),
    External(Endpoint),
}

impl FromStr for PolicyBinding {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s.starts_with("stdio:") || s.starts_with("tcp:") {
            s.parse().map(PolicyBinding::External)
        } else {
            s.parse().map(PolicyBinding::Scripted)
        }
    }
}

impl fmt::Display for PolicyBinding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicyBinding::Scripted(t) => t.fmt(f),
            PolicyBinding::External(e) => e.fmt(f),
        }
    }
}

impl PolicyBinding {
    /// Fails early when an external endpoint cannot be reached.
    pub fn check(&self) -> Result<(), HarnessError> {
        match self {
            PolicyBinding::Scripted(_) => Ok(()),
            PolicyBinding::External(e) => Ok(e.probe()?),
        }
    }

    fn instantiate(&self, task: &Task, env: &EnvConfig, seed: u64) -> Result<Box<dyn Policy + Send>, PolicyError> {
        match self {
            PolicyBinding::Scripted(t) => Ok(t.policy(task, env, seed)),
            PolicyBinding::External(e) => Ok(Box::new(ExternalPolicy::connect(e)?)),
        }
    }
}

fn read(p: &Path) -> Result<String, HarnessError> {
    fs::read_to_string(p).map_err(|source| HarnessError::Io {
        path: p.to_path_buf(),
        source,
    })
}

fn write(p: &Path, text: &str) -> Result<(), HarnessError> {
    if let Some(dir) = p.parent() {
        fs::create_dir_all(dir).map_err(|source| HarnessError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    fs::write(p, text).map_err(|source| HarnessError::Io {
        path: p.to_path_buf(),
        source,
    })
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report serializes") + "\n"
}

fn list(dir: &Path, ext: &str) -> Result<Vec<PathBuf>, HarnessError> {
    let rd = fs::read_dir(dir).map_err(|source| HarnessError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut out: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == ext))
        .collect();
    out.sort();
    Ok(out)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub file: String,
    pub seed: u64,
    pub regions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub n: usize,
    pub seed: u64,
    pub spec: SceneSpec,
    pub scenes: Vec<SceneEntry>,
}

/// Scene `i` of a corpus uses `episode_seed(seed, i)`.
pub fn make_scenes(n: usize, spec: SceneSpec, seed: u64, cfg: &HarnessConfig) -> Result<Vec<Scene>, HarnessError> {
    cfg.pool()?.install(|| {
        (0..n)
            .into_par_iter()
            .map(|i| generate_scene(spec, episode_seed(seed, i)).map_err(invalid))
            .collect()
    })
}

pub fn gen_scenes(n: usize, cfg: &HarnessConfig, out: &Path) -> Result<SceneManifest, HarnessError> {
    let scenes = make_scenes(n, cfg.scenes, cfg.seed, cfg)?;
    let mut entries = Vec::with_capacity(n);
    for (i, s) in scenes.iter().enumerate() {
        let file = format!("scene_{i:04}.json");
        write(&out.join(&file), &(serde_json::to_string(&s.to_file()).expect("scene serializes") + "\n"))?;
        entries.push(SceneEntry {
            file,
            seed: s.seed(),
            regions: s.region_count(),
        });
    }
    let m = SceneManifest {
        n,
        seed: cfg.seed,
        spec: cfg.scenes,
        scenes: entries,
    };
    write(&out.join("manifest.json"), &to_json(&m))?;
    Ok(m)
}

pub fn load_scenes(dir: &Path) -> Result<Vec<Scene>, HarnessError> {
    list(dir, "json")?
        .into_iter()
        .filter(|p| stem(p).starts_with("scene_"))
        .map(|p| {
            let f: SceneFile = serde_json::from_str(&read(&p)?).map_err(|e| invalid(format!("{}: {e}", p.display())))?;
            Scene::from_file(&f).map_err(|e| invalid(format!("{}: {e}", p.display())))
        })
        .collect()
}

/// On-disk task: scene plus target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskFile {
    pub id: String,
    pub target_region: u32,
    pub scene: SceneFile,
}

impl TaskFile {
    pub fn to_task(&self) -> Result<Task, HarnessError> {
        let scene = Scene::from_file(&self.scene).map_err(invalid)?;
        Task::new(self.id.clone(), Arc::new(scene), self.target_region).map_err(invalid)
    }
}

/// One task per scene; the target of task `i` is drawn from `episode_seed(seed, i)`.
pub fn tasks_for(scenes: Vec<Scene>, seed: u64) -> Result<Vec<Task>, HarnessError> {
    scenes
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let k = s.region_count() as u64;
            let target = 1 + (episode_seed(seed ^ 0x7461_7267, i) % k) as u32;
            Task::new(format!("task_{i:04}"), Arc::new(s), target).map_err(invalid)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub policy: String,
    pub tasks: usize,
    #[serde(rename = "gIoU")]
    pub giou: f64,
    #[serde(rename = "cIoU")]
    pub ciou: f64,
    #[serde(rename = "mean_S")]
    pub mean_s: f64,
    pub mean_turns: f64,
    pub seed: u64,
}

/// Runs every task, writing `tasks/`, `gt/`, `traj/` and `reward/` files
/// under `out`, plus `summary.json`.
pub fn run(binding: &PolicyBinding, tasks: &[Task], cfg: &HarnessConfig, out: &Path) -> Result<RunSummary, HarnessError> {
    if tasks.is_empty() {
        return Err(invalid("no tasks to run"));
    }
    binding.check()?;
    let results: Vec<(BitMask, f64, usize)> = cfg.pool()?.install(|| {
        tasks
            .par_iter()
            .enumerate()
            .map(|(i, t)| {
                let mut policy = binding.instantiate(t, &cfg.env, episode_seed(cfg.seed, i))?;
                let traj = run_episode(t, &cfg.env, policy.as_mut())?;
                let log = TrajectoryLog::from_trajectory(&traj, &t.gt_mask).map_err(invalid)?;
                let rb = score_log(&log, &t.gt_mask, cfg.connectivity, &cfg.reward).map_err(invalid)?;
                let tf = TaskFile {
                    id: t.id.clone(),
                    target_region: t.target_region,
                    scene: t.scene.to_file(),
                };
                write(&out.join("tasks").join(format!("{}.json", t.id)), &(serde_json::to_string(&tf).expect("task serializes") + "\n"))?;
                write(&out.join("gt").join(format!("{}.json", t.id)), &(serde_json::to_string(&t.gt_mask).expect("mask serializes") + "\n"))?;
                write(&out.join("traj").join(format!("{}.jsonl", t.id)), &log.to_jsonl())?;
                write(&out.join("reward").join(format!("{}.json", t.id)), &(rb.to_json() + "\n"))?;
                let union = traj.prediction.expect("terminated").union;
                Ok((union, rb.s_total, traj.steps.len()))
            })
            .collect::<Result<Vec<_>, HarnessError>>()
    })?;
    let pairs: Vec<(BitMask, BitMask)> = results
        .iter()
        .zip(tasks)
        .map(|((u, _, _), t)| (u.clone(), t.gt_mask.clone()))
        .collect();
    let n = tasks.len() as f64;
    let summary = RunSummary {
        policy: binding.to_string(),
        tasks: tasks.len(),
        giou: g_iou(&pairs).map_err(invalid)?,
        ciou: c_iou(&pairs).map_err(invalid)?,
        mean_s: results.iter().map(|r| r.1).sum::<f64>() / n,
        mean_turns: results.iter().map(|r| r.2 as f64).sum::<f64>() / n,
        seed: cfg.seed,
    };
    write(&out.join("summary.json"), &to_json(&summary))?;
    Ok(summary)
}

pub fn load_gt(path: &Path) -> Result<BitMask, HarnessError> {
    serde_json::from_str(&read(path)?).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

pub fn load_log(path: &Path) -> Result<TrajectoryLog, HarnessError> {
    TrajectoryLog::parse(&read(path)?).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

pub fn score(log: &Path, gt: &Path, cfg: &HarnessConfig) -> Result<RewardBreakdown, HarnessError> {
    let log = load_log(log)?;
    let gt = load_gt(gt)?;
    score_log(&log, &gt, cfg.connectivity, &cfg.reward).map_err(invalid)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    #[serde(rename = "gIoU")]
    pub giou: f64,
    #[serde(rename = "cIoU")]
    pub ciou: f64,
}

/// Pairs `preds/NAME.jsonl` with `gts/NAME.json`.
pub fn eval(preds: &Path, gts: &Path) -> Result<EvalReport, HarnessError> {
    let mut pairs = Vec::new();
    for p in list(preds, "jsonl")? {
        let log = load_log(&p)?;
        let gt = load_gt(&gts.join(format!("{}.json", stem(&p))))?;
        let (w, h) = gt.dims();
        let union = union_masks(&log.fin.masks, w, h).map_err(invalid)?;
        pairs.push((union, gt));
    }
    Ok(EvalReport {
        n: pairs.len(),
        giou: g_iou(&pairs).map_err(invalid)?,
        ciou: c_iou(&pairs).map_err(invalid)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    #[serde(flatten)]
    pub manifest: Manifest,
    pub decisions: Vec<(String, FilterDecision)>,
}

/// Curates a `run` output directory into `sft.jsonl` and `manifest.json`.
/// Rescues replay turns, so `cfg.env` must match the run's.
pub fn filter(run_dir: &Path, cfg: &HarnessConfig, out: &Path) -> Result<FilterReport, HarnessError> {
    let trajs = list(&run_dir.join("traj"), "jsonl")?;
    let items = cfg.pool()?.install(|| {
        trajs
            .par_iter()
            .map(|p| {
                let id = stem(p);
                let tf: TaskFile = serde_json::from_str(&read(&run_dir.join("tasks").join(format!("{id}.json")))?)
                    .map_err(|e| invalid(format!("task {id}: {e}")))?;
                let task = tf.to_task()?;
                let log = load_log(p)?;
                let (d, ex) = curate(&task, &cfg.env, &log, &cfg.filter).map_err(|e| invalid(format!("{id}: {e}")))?;
                Ok((id, d, ex))
            })
            .collect::<Result<Vec<_>, HarnessError>>()
    })?;
    let mut manifest = Manifest::default();
    let mut sft = String::new();
    let mut decisions = Vec::with_capacity(items.len());
    for (id, d, ex) in items {
        manifest.record(&id, &d);
        if let Some(ex) = ex {
            manifest.emitted += 1;
            sft.push_str(&ex.to_json_line());
            sft.push('\n');
        }
        decisions.push((id, d));
    }
    write(&out.join("sft.jsonl"), &sft)?;
    let report = FilterReport { manifest, decisions };
    write(&out.join("manifest.json"), &to_json(&report))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub groups_used: usize,
    pub reached_at: Option<usize>,
    pub optimal: f64,
    pub greedy_return: f64,
    pub expected_return: f64,
}

/// Trains the toy policy; writes `train_log.jsonl` and `train_summary.json`.
pub fn train(cfg: &HarnessConfig, out: &Path) -> Result<TrainSummary, HarnessError> {
    let bandit = PromptBandit::build(cfg.grpo.contexts, cfg.seed, &cfg.env, &cfg.reward).map_err(invalid)?;
    let tc = TrainConfig {
        seed: cfg.seed,
        ..cfg.grpo.train.clone()
    };
    let report = train_toy(&bandit, &tc).map_err(invalid)?;
    write(&out.join("train_log.jsonl"), &report.to_jsonl())?;
    let s = TrainSummary {
        groups_used: report.groups_used,
        reached_at: report.reached_at,
        optimal: report.optimal,
        greedy_return: bandit.greedy_return(&report.policy),
        expected_return: bandit.expected_return(&report.policy),
    };
    write(&out.join("train_summary.json"), &to_json(&s))?;
    Ok(s)
}
