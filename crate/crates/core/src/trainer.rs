//! The training schedule: video-only pretraining (VSC + LFR), latent policy
//! cloning (UPC), then `R` rounds of reward-free collection and action
//! grounding (GAP).
//!
//! Each phase owns one optimizer whose parameter set mirrors the gradient-flow
//! table in [`crate::losses`]. After a phase ends its components stay frozen,
//! which lets later phases cache encoder features and latent codes.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array1, Array2, Array4, Array5, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::databank::{to_array4, InteractionBuffer, PairBatch, Transition, VideoDataset};
use crate::envsuite::{hash_seed, level_seed_range, make_env, EnvSpec, LevelState, N_ACTIONS};
use crate::error::{Error, Result};
use crate::eval::{self, EvalMetrics, EvalSet};
use crate::exec::ExecMode;
use crate::losses::{self, LossName, LossReport};
use crate::nets::checkpoint::{load_checkpoint, save_checkpoint, CheckpointExtras};
use crate::nets::{all_finite, argmax, ema_update, Component, GroupOptimizer, ModelBundle, Quantized, Real};

/// Rows between forced flushes of the metrics CSV.
pub const METRICS_FLUSH_EVERY: usize = 100;

/// Frames encoded per call when filling feature caches.
const ENCODE_CHUNK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Named count presets. `paper` requests the published schedule verbatim.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    #[default]
    Desk,
    Paper,
}

/// Which objectives take part in a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    /// `f` stays at initialization.
    NoVsc,
    /// `g`, codebook and world model stay at initialization.
    NoLfr,
    /// `h` is never trained; actions come from a world-model decoder.
    NoGap,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoVsc, Variant::NoLfr, Variant::NoGap];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoVsc => "no_vsc",
            Variant::NoLfr => "no_lfr",
            Variant::NoGap => "no_gap",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                Error::config(
                    "variant",
                    format!("unknown variant `{s}` (expected full, no_vsc, no_lfr or no_gap)"),
                )
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub scale: Scale,
    pub env: EnvSpec,
    pub expert_levels: usize,
    pub expert_frames: usize,
    pub expert_seed: u64,
    pub eval_levels: usize,
    pub eval_seed: u64,
    pub eval_frames: usize,
    pub eval_episodes: usize,
    pub batch_video: usize,
    pub batch_transition: usize,
    pub lr_vsc: f64,
    pub lr_lfr: f64,
    pub lr_gap: f64,
    pub lr_upc: f64,
    pub updates_vsc_lfr: usize,
    pub updates_upc: usize,
    /// Total over all grounding rounds, split evenly.
    pub updates_gap: usize,
    pub shift: usize,
    pub ema_m: f64,
    pub n_parallel_envs: usize,
    /// Environment steps each env takes per collection slice.
    pub update_frequency: usize,
    pub interaction_budget: usize,
    pub grounding_rounds: usize,
    /// Exploration rate during policy collection (rounds after the first).
    pub epsilon: f64,
    pub arch: crate::nets::ArchConfig,
    pub precision: Precision,
    pub exec: ExecMode,
    pub deterministic: bool,
    pub seed: u64,
    /// Model seeds for multi-seed reports (ablations, sweeps).
    pub eval_seeds: Vec<u64>,
    pub variant: Variant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::preset(Scale::Desk)
    }
}

impl TrainConfig {
    pub fn preset(scale: Scale) -> Self {
        let desk = TrainConfig {
            scale,
            env: EnvSpec::procgrid(8),
            expert_levels: 200,
            expert_frames: 100_000,
            expert_seed: 0,
            eval_levels: 50,
            eval_seed: 1,
            eval_frames: 10_000,
            eval_episodes: 100,
            batch_video: 128,
            batch_transition: 512,
            lr_vsc: 3e-5,
            lr_lfr: 3e-4,
            lr_gap: 1e-3,
            lr_upc: 2e-4,
            updates_vsc_lfr: 6_000,
            updates_upc: 5_000,
            updates_gap: 1_000,
            shift: 1,
            ema_m: 0.05,
            n_parallel_envs: 8,
            update_frequency: 64,
            interaction_budget: 20_000,
            grounding_rounds: 4,
            epsilon: 0.05,
            arch: crate::nets::ArchConfig::default(),
            precision: Precision::F32,
            exec: ExecMode::default(),
            deterministic: false,
            seed: 0,
            eval_seeds: vec![0, 1, 2],
            variant: Variant::Full,
        };
        match scale {
            Scale::Desk => desk,
            Scale::Paper => TrainConfig {
                updates_vsc_lfr: 60_000,
                updates_upc: 50_000,
                updates_gap: 3_000,
                n_parallel_envs: 64,
                interaction_budget: 100_000,
                ..desk
            },
        }
    }

    /// Strict parse: the `scale` key picks the preset, every other key
    /// overrides it, and unknown keys are rejected.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let serde_json::Value::Object(overrides) = value else {
            return Err(Error::config("<root>", "config must be a JSON object"));
        };
        let scale = match overrides.get("scale") {
            Some(v) => serde_json::from_value::<Scale>(v.clone())
                .map_err(|e| Error::config("scale", e.to_string()))?,
            None => Scale::Desk,
        };
        let mut merged = serde_json::to_value(TrainConfig::preset(scale))?;
        let base = merged.as_object_mut().expect("config serializes to an object");
        for (k, v) in overrides {
            if !base.contains_key(&k) {
                return Err(Error::config(k, "unknown config key"));
            }
            if k == "arch" || k == "env" {
                merge_object(base.get_mut(&k).expect("present"), v, &k)?;
            } else {
                base.insert(k, v);
            }
        }
        let config: TrainConfig = serde_json::from_value(merged).map_err(|e| Error::config("<config>", e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("<file>", format!("cannot read {}: {e}", path.display())))?;
        TrainConfig::from_json_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.arch.validate(self.env.n_actions)?;
        let positive = [
            ("expert_levels", self.expert_levels),
            ("expert_frames", self.expert_frames),
            ("eval_levels", self.eval_levels),
            ("eval_frames", self.eval_frames),
            ("eval_episodes", self.eval_episodes),
            ("batch_video", self.batch_video),
            ("batch_transition", self.batch_transition),
            ("updates_vsc_lfr", self.updates_vsc_lfr),
            ("updates_upc", self.updates_upc),
            ("updates_gap", self.updates_gap),
            ("n_parallel_envs", self.n_parallel_envs),
            ("update_frequency", self.update_frequency),
            ("interaction_budget", self.interaction_budget),
            ("grounding_rounds", self.grounding_rounds),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(name, "must be positive"));
            }
        }
        if self.batch_video < 2 {
            return Err(Error::config("batch_video", "must be at least 2 (contrastive negatives)"));
        }
        if self.expert_frames < 2 || self.eval_frames < 2 {
            return Err(Error::config("expert_frames", "need at least 2 frames"));
        }
        for (name, lr) in [
            ("lr_vsc", self.lr_vsc),
            ("lr_lfr", self.lr_lfr),
            ("lr_gap", self.lr_gap),
            ("lr_upc", self.lr_upc),
        ] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::config(name, "must be a positive finite number"));
            }
        }
        if !(0.0..=1.0).contains(&self.ema_m) {
            return Err(Error::config("ema_m", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::config("epsilon", "must lie in [0, 1]"));
        }
        if self.shift >= self.env.obs_height.min(self.env.obs_width) {
            return Err(Error::config("shift", "must be smaller than the observation side"));
        }
        if self.interaction_budget < self.grounding_rounds {
            return Err(Error::config(
                "interaction_budget",
                "must be at least grounding_rounds (every round collects)",
            ));
        }
        if self.updates_gap < self.grounding_rounds {
            return Err(Error::config("updates_gap", "must be at least grounding_rounds"));
        }
        if self.expert_seed == self.eval_seed {
            return Err(Error::config(
                "eval_seed",
                "must differ from expert_seed so train and eval levels are disjoint",
            ));
        }
        Ok(())
    }

    /// Level seeds of the expert videos; interactions use the same levels.
    pub fn train_levels(&self) -> std::ops::Range<u64> {
        level_seed_range(self.expert_seed, self.expert_levels)
    }

    /// Held-out levels for labeling and rollout evaluation.
    pub fn eval_level_range(&self) -> std::ops::Range<u64> {
        level_seed_range(self.eval_seed, self.eval_levels)
    }

    pub fn exec_mode(&self) -> ExecMode {
        if self.deterministic {
            ExecMode::Sequential
        } else {
            self.exec
        }
    }

    /// Interaction steps collected in `round`; the last round takes the remainder.
    pub fn round_quota(&self, round: usize) -> usize {
        let base = self.interaction_budget / self.grounding_rounds;
        if round + 1 == self.grounding_rounds {
            base + self.interaction_budget % self.grounding_rounds
        } else {
            base
        }
    }

    /// GAP steps in `round`; the last round takes the remainder.
    pub fn round_gap_updates(&self, round: usize) -> usize {
        let base = self.updates_gap / self.grounding_rounds;
        if round + 1 == self.grounding_rounds {
            base + self.updates_gap % self.grounding_rounds
        } else {
            base
        }
    }
}

fn merge_object(dst: &mut serde_json::Value, src: serde_json::Value, field: &str) -> Result<()> {
    let (Some(d), serde_json::Value::Object(s)) = (dst.as_object_mut(), src) else {
        return Err(Error::config(field, "must be a JSON object"));
    };
    for (k, v) in s {
        if !d.contains_key(&k) {
            return Err(Error::config(format!("{field}.{k}"), "unknown config key"));
        }
        d.insert(k, v);
    }
    Ok(())
}

/// Fail if two level-seed ranges overlap.
pub fn assert_disjoint(train: &std::ops::Range<u64>, eval: &std::ops::Range<u64>) -> Result<()> {
    if train.start < eval.end && eval.start < train.end {
        return Err(Error::config(
            "eval_seed",
            format!("eval levels {eval:?} overlap training levels {train:?}"),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Clone,
    Collect,
    Ground,
    Done,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Clone => "clone",
            Phase::Collect => "collect",
            Phase::Ground => "ground",
            Phase::Done => "done",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub phase: Phase,
    pub round: usize,
    pub steps: BTreeMap<LossName, usize>,
    pub interactions_used: usize,
    pub interaction_budget: usize,
    pub checkpoints: Vec<PathBuf>,
}

impl RunState {
    fn new(budget: usize) -> Self {
        RunState {
            phase: Phase::Pretrain,
            round: 0,
            steps: BTreeMap::new(),
            interactions_used: 0,
            interaction_budget: budget,
            checkpoints: Vec::new(),
        }
    }

    pub fn remaining_budget(&self) -> usize {
        self.interaction_budget - self.interactions_used
    }
}

/// One metrics row: a single optimizer step of one loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub phase: Phase,
    pub report: LossReport,
}

/// Every aux column in CSV order.
pub fn aux_columns() -> Vec<&'static str> {
    [LossName::Vsc, LossName::Lfr, LossName::Gap, LossName::Upc]
        .iter()
        .flat_map(|n| n.aux_keys().iter().copied())
        .collect()
}

/// In-memory metrics, optionally streamed to CSV.
pub struct Metrics {
    pub rows: Vec<MetricRow>,
    sink: Option<csv::Writer<File>>,
}

impl std::fmt::Debug for Metrics {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Metrics")
            .field("rows", &self.rows.len())
            .field("streaming", &self.sink.is_some())
            .finish()
    }
}

impl Metrics {
    pub fn in_memory() -> Self {
        Metrics {
            rows: Vec::new(),
            sink: None,
        }
    }

    pub fn to_csv(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        let mut header = vec!["step".to_string(), "phase".into(), "loss_name".into(), "value".into()];
        header.extend(aux_columns().iter().map(|k| format!("aux_{k}")));
        w.write_record(&header)?;
        Ok(Metrics {
            rows: Vec::new(),
            sink: Some(w),
        })
    }

    fn record(&mut self, phase: Phase, report: LossReport) -> Result<()> {
        let step = self.rows.len();
        if let Some(w) = &mut self.sink {
            let mut rec = vec![
                step.to_string(),
                phase.as_str().to_string(),
                report.name.as_str().to_string(),
                report.value.to_string(),
            ];
            rec.extend(
                aux_columns()
                    .iter()
                    .map(|k| report.aux.get(*k).map(|v| v.to_string()).unwrap_or_default()),
            );
            w.write_record(&rec)?;
            if (step + 1) % METRICS_FLUSH_EVERY == 0 {
                w.flush().map_err(|e| Error::io("metrics.csv", e))?;
            }
        }
        self.rows.push(MetricRow { step, phase, report });
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(w) = &mut self.sink {
            w.flush().map_err(|e| Error::io("metrics.csv", e))?;
        }
        Ok(())
    }

    /// Values of one loss in step order.
    pub fn series(&self, name: LossName) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.report.name == name)
            .map(|r| r.report.value)
            .collect()
    }

    pub fn last(&self, name: LossName) -> Option<&LossReport> {
        self.rows.iter().rev().map(|r| &r.report).find(|r| r.name == name)
    }

    fn detach(&self) -> Metrics {
        Metrics {
            rows: self.rows.clone(),
            sink: None,
        }
    }
}

/// How latent codes become environment actions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionHead {
    /// `h` applied to the quantized latent.
    Grounded,
    /// Code-to-action table from world-model matching.
    Decoder { table: Vec<usize> },
}

/// A bundle plus the head that maps its latents to actions.
#[derive(Debug, Clone, PartialEq)]
pub struct Agent<T> {
    pub bundle: ModelBundle<T>,
    pub head: ActionHead,
}

impl<T: Real> Agent<T> {
    pub fn actions_for(&self, q: &Quantized<T>) -> Result<Vec<usize>> {
        match &self.head {
            ActionHead::Grounded => {
                let logits = self.bundle.project_action(&q.vectors)?;
                Ok(logits.outer_iter().map(argmax).collect())
            }
            ActionHead::Decoder { table } => Ok(q.indices.iter().map(|&k| table[k]).collect()),
        }
    }

    /// Labeling model: the action V assigns to each observation pair.
    pub fn label(&self, batch: &PairBatch<T>) -> Result<(Quantized<T>, Vec<usize>)> {
        let q = losses::label_latents(&self.bundle, batch)?;
        let a = self.actions_for(&q)?;
        Ok((q, a))
    }

    /// Greedy policy.
    pub fn act(&self, obs: &Array4<T>, hist: &Array5<T>) -> Result<Vec<usize>> {
        let b = &self.bundle;
        let feat = b.encode(obs)?;
        let fh = b.encode_history(&b.f, hist)?;
        let q = b.quantize(&b.policy_latent(&feat, &fh)?)?;
        self.actions_for(&q)
    }
}

/// One parallel environment slot with its own RNG stream and frame history.
#[derive(Debug, Clone)]
struct EnvSlot {
    level: LevelState,
    rng: ChaCha8Rng,
    obs: Vec<u8>,
    hist: Vec<u8>,
    episode_id: u64,
    episodes: u64,
}

/// `n_parallel_envs` environments cycling over the training levels.
#[derive(Debug, Clone)]
pub struct EnvPool {
    templates: Vec<LevelState>,
    slots: Vec<EnvSlot>,
    history: usize,
    frame_len: usize,
    seed: u64,
}

impl EnvPool {
    pub fn new(spec: &EnvSpec, levels: std::ops::Range<u64>, n_envs: usize, history: usize, seed: u64) -> Result<Self> {
        if levels.is_empty() || n_envs == 0 {
            return Err(Error::config("n_parallel_envs", "need at least one env and one level"));
        }
        let templates = levels.map(|s| make_env(spec, s)).collect::<Result<Vec<_>>>()?;
        let frame_len = spec.obs_shape().len();
        let mut pool = EnvPool {
            slots: Vec::with_capacity(n_envs),
            templates,
            history,
            frame_len,
            seed,
        };
        for i in 0..n_envs {
            let rng = ChaCha8Rng::seed_from_u64(hash_seed(&[seed, 0x656e76, i as u64]));
            let level = pool.templates[0].clone();
            pool.slots.push(EnvSlot {
                level,
                rng,
                obs: Vec::new(),
                hist: Vec::new(),
                episode_id: 0,
                episodes: 0,
            });
            pool.begin_episode(i);
        }
        Ok(pool)
    }

    pub fn n_envs(&self) -> usize {
        self.slots.len()
    }

    fn begin_episode(&mut self, i: usize) {
        let n_envs = self.slots.len() as u64;
        let slot = &mut self.slots[i];
        let li = slot.rng.random_range(0..self.templates.len());
        slot.level = self.templates[li].clone();
        slot.level.reset(hash_seed(&[self.seed, i as u64, slot.episodes]));
        slot.episode_id = slot.episodes * n_envs + i as u64;
        slot.episodes += 1;
        slot.obs = slot.level.observe().data;
        slot.hist = vec![0; self.history * self.frame_len];
    }
}

/// What one collection round did.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CollectLog {
    pub steps: usize,
    pub slices: usize,
    /// Per collected step: the action taken and whether it bypassed the policy.
    pub actions: Vec<usize>,
    pub explored: Vec<bool>,
    /// Buffer indices written this round, in step order.
    pub records: std::ops::Range<usize>,
}

impl CollectLog {
    pub fn histogram(&self) -> [usize; N_ACTIONS] {
        let mut h = [0; N_ACTIONS];
        self.actions.iter().for_each(|&a| h[a] += 1);
        h
    }
}

/// Frozen-encoder features for every frame of a video dataset.
#[derive(Debug, Clone)]
struct FrameFeatures<T> {
    feats: Array2<T>,
    zero: Array1<T>,
}

impl<T: Real> FrameFeatures<T> {
    fn build(bundle: &ModelBundle<T>, videos: &VideoDataset) -> Result<Self> {
        let shape = videos.shape();
        let n = videos.n_frames();
        let mut feats = Array2::zeros((n, bundle.arch.d_f));
        for start in (0..n).step_by(ENCODE_CHUNK) {
            let end = (start + ENCODE_CHUNK).min(n);
            let bytes = &videos.frames()[start * shape.len()..end * shape.len()];
            let f = bundle.encode(&to_array4(shape, end - start, bytes))?;
            feats.slice_mut(ndarray::s![start..end, ..]).assign(&f);
        }
        let zero_frame = to_array4::<T>(shape, 1, &vec![0; shape.len()]);
        let zero = bundle.encode(&zero_frame)?.row(0).to_owned();
        Ok(FrameFeatures { feats, zero })
    }

    /// History features for frame `i`, oldest first, zero frames before the episode.
    fn history(&self, videos: &VideoDataset, i: usize, k: usize) -> Array1<T> {
        let d = self.zero.len();
        let start = videos.episode_starts()[videos.episode_of(i)] as usize;
        let mut out = Array1::zeros(k * d);
        for j in 0..k {
            let back = k - j;
            let src = if i >= start + back {
                self.feats.row(i - back)
            } else {
                self.zero.view()
            };
            out.slice_mut(ndarray::s![j * d..(j + 1) * d]).assign(&src);
        }
        out
    }
}

/// Everything a finished (or stopped) run produced.
#[derive(Debug)]
pub struct RunOutcome<T> {
    pub agent: Agent<T>,
    pub state: RunState,
    pub metrics: Metrics,
    pub summary: RunSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub variant: Variant,
    pub shift: usize,
    pub final_losses: BTreeMap<String, f64>,
    pub initial_losses: BTreeMap<String, f64>,
    pub steps: BTreeMap<String, usize>,
    pub interactions_used: usize,
    pub interaction_budget: usize,
    pub eval: Option<EvalMetrics>,
    pub wall_clock_secs: f64,
}

/// A training run in progress.
#[derive(Debug)]
pub struct Run<T: Real> {
    pub config: TrainConfig,
    pub bundle: ModelBundle<T>,
    pub state: RunState,
    pub buffer: InteractionBuffer,
    pub metrics: Metrics,
    pub head: ActionHead,
    out_dir: Option<PathBuf>,
    opt_vsc: GroupOptimizer<T>,
    opt_lfr: GroupOptimizer<T>,
    opt_gap: GroupOptimizer<T>,
    opt_upc: GroupOptimizer<T>,
    /// Labeling code of each buffer record, filled lazily once `g` is frozen.
    codes: Vec<usize>,
    /// Decoder evidence: `votes[code][action]`.
    votes: Vec<[usize; N_ACTIONS]>,
    last_good: Option<ModelBundle<T>>,
    started: Instant,
}

fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    let tag = name.bytes().fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(u64::from(b)));
    ChaCha8Rng::seed_from_u64(hash_seed(&[seed, tag]))
}

fn tag_step(e: Error, phase: Phase, step: usize) -> Error {
    match e {
        Error::Divergence { detail, .. } => Error::Divergence {
            phase: phase.as_str().to_string(),
            step,
            detail,
        },
        e => e,
    }
}

impl<T: Real> Run<T> {
    /// Fresh run. With `out_dir`, metrics stream to `metrics.csv` and phase
    /// checkpoints are written there.
    pub fn new(config: &TrainConfig, out_dir: Option<&Path>) -> Result<Self> {
        config.validate()?;
        assert_disjoint(&config.train_levels(), &config.eval_level_range())?;
        let shape = config.env.obs_shape();
        let mut bundle = ModelBundle::<T>::new(&config.arch, shape, config.env.n_actions, config.seed)?;
        bundle.set_exec(config.exec_mode());
        let lr = |v: f64| T::lit(v);
        let metrics = match out_dir {
            Some(d) => Metrics::to_csv(&d.join("metrics.csv"))?,
            None => Metrics::in_memory(),
        };
        Ok(Run {
            buffer: InteractionBuffer::new(shape, config.arch.history, config.interaction_budget)?,
            state: RunState::new(config.interaction_budget),
            metrics,
            head: ActionHead::Grounded,
            out_dir: out_dir.map(Path::to_path_buf),
            opt_vsc: GroupOptimizer::new(&[Component::F, Component::U, Component::W], lr(config.lr_vsc)),
            opt_lfr: GroupOptimizer::new(
                &[Component::G, Component::Codebook, Component::World],
                lr(config.lr_lfr),
            ),
            opt_gap: GroupOptimizer::new(&[Component::H], lr(config.lr_gap)),
            opt_upc: GroupOptimizer::new(&[Component::GPi], lr(config.lr_upc)),
            codes: Vec::new(),
            votes: vec![[0; N_ACTIONS]; config.arch.codebook_size],
            last_good: None,
            config: config.clone(),
            bundle,
            started: Instant::now(),
        })
    }

    /// Independent copy that continues as `variant`; the copy does not stream metrics.
    pub fn fork(&self, variant: Variant) -> Self {
        let mut config = self.config.clone();
        config.variant = variant;
        Run {
            config,
            bundle: self.bundle.clone(),
            state: self.state.clone(),
            buffer: self.buffer.clone(),
            metrics: self.metrics.detach(),
            head: self.head.clone(),
            out_dir: None,
            opt_vsc: self.opt_vsc.clone(),
            opt_lfr: self.opt_lfr.clone(),
            opt_gap: self.opt_gap.clone(),
            opt_upc: self.opt_upc.clone(),
            codes: self.codes.clone(),
            votes: self.votes.clone(),
            last_good: self.last_good.clone(),
            started: Instant::now(),
        }
    }

    pub fn agent(&self) -> Agent<T> {
        Agent {
            bundle: self.bundle.clone(),
            head: self.head.clone(),
        }
    }

    fn count(&mut self, name: LossName) -> usize {
        let c = self.state.steps.entry(name).or_insert(0);
        *c += 1;
        *c
    }

    fn check_finite(&self, phase: Phase, step: usize) -> Result<()> {
        let bad = Component::ALL
            .iter()
            .find(|&&c| !all_finite(self.bundle.component(c)));
        match bad {
            Some(c) => Err(Error::Divergence {
                phase: phase.as_str().to_string(),
                step,
                detail: format!("non-finite parameters in {}", c.name()),
            }),
            None => Ok(()),
        }
    }

    fn mark_good(&mut self, tag: &str) -> Result<()> {
        self.last_good = Some(self.bundle.clone());
        if let Some(dir) = &self.out_dir {
            let path = dir.join(format!("{tag}.ckpt"));
            save_checkpoint(&path, &self.bundle, &self.extras()?)?;
            self.state.checkpoints.push(path);
        }
        Ok(())
    }

    pub fn extras(&self) -> Result<CheckpointExtras> {
        Ok(CheckpointExtras {
            config: serde_json::json!({
                "train": self.config,
                "action_head": self.head,
            }),
            rng_states: serde_json::json!({ "seed": self.config.seed, "state": self.state }),
        })
    }

    /// Write the last completed phase's parameters next to the metrics.
    pub fn save_last_good(&mut self) -> Result<()> {
        if let (Some(dir), Some(b)) = (&self.out_dir, &self.last_good) {
            self.metrics.flush()?;
            save_checkpoint(&dir.join("last_good.ckpt"), b, &self.extras()?)?;
        }
        Ok(())
    }

    /// `updates_vsc_lfr` steps, each one VSC step (then the EMA update) and one
    /// LFR step on independent batches. Consumes no interactions.
    pub fn pretrain_on_videos(&mut self, videos: &VideoDataset) -> Result<()> {
        self.state.phase = Phase::Pretrain;
        if videos.valid_pairs().is_empty() {
            return Err(Error::Data("expert videos contain no observation pairs".into()));
        }
        let cfg = self.config.clone();
        let k = cfg.arch.history;
        let mut vsc_rng = stream(cfg.seed, "vsc");
        let mut lfr_rng = stream(cfg.seed, "lfr");
        let shape = videos.shape();
        let m = T::lit(cfg.ema_m);
        for step in 0..cfg.updates_vsc_lfr {
            if cfg.variant != Variant::NoVsc {
                let idx: Vec<usize> = (0..cfg.batch_video)
                    .map(|_| vsc_rng.random_range(0..videos.n_frames()))
                    .collect();
                let mut bytes = Vec::with_capacity(idx.len() * shape.len());
                idx.iter().for_each(|&i| bytes.extend_from_slice(videos.frame(i)));
                let obs = to_array4::<T>(shape, idx.len(), &bytes);
                let (report, grads) = losses::loss_vsc(&self.bundle, &obs, cfg.shift, &mut vsc_rng)
                    .map_err(|e| tag_step(e, Phase::Pretrain, step))?;
                self.opt_vsc.step(&mut self.bundle, &grads);
                let b = &mut self.bundle;
                ema_update(&mut b.f_ema, &b.f, m)?;
                self.count(LossName::Vsc);
                self.metrics.record(Phase::Pretrain, report)?;
            }
            if cfg.variant != Variant::NoLfr {
                let batch = crate::databank::sample_pairs::<T, _>(videos, cfg.batch_video, k, &mut lfr_rng)?;
                let (report, grads) =
                    losses::loss_lfr(&self.bundle, &batch).map_err(|e| tag_step(e, Phase::Pretrain, step))?;
                self.opt_lfr.step(&mut self.bundle, &grads);
                self.count(LossName::Lfr);
                self.metrics.record(Phase::Pretrain, report)?;
            }
            if (step + 1) % METRICS_FLUSH_EVERY == 0 {
                self.check_finite(Phase::Pretrain, step)?;
            }
        }
        self.check_finite(Phase::Pretrain, cfg.updates_vsc_lfr)?;
        self.mark_good("pretrain")
    }

    /// `updates_upc` steps of UPC on V-labeled videos. Only `g_pi` changes, so
    /// frame features and V's codes are computed once up front.
    pub fn clone_latent_policy(&mut self, videos: &VideoDataset) -> Result<()> {
        self.state.phase = Phase::Clone;
        let cfg = self.config.clone();
        let k = cfg.arch.history;
        let d = cfg.arch.d_f;
        let cache = FrameFeatures::build(&self.bundle, videos)?;
        let pairs = videos.valid_pairs();
        if pairs.is_empty() {
            return Err(Error::Data("expert videos contain no observation pairs".into()));
        }
        let hist_of = |i: usize| cache.history(videos, i, k);
        let mut targets = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(ENCODE_CHUNK) {
            let n = chunk.len();
            let mut ft = Array2::zeros((n, d));
            let mut ft1 = Array2::zeros((n, d));
            let mut fh = Array2::zeros((n, k * d));
            for (r, &i) in chunk.iter().enumerate() {
                let i = i as usize;
                ft.row_mut(r).assign(&cache.feats.row(i));
                ft1.row_mut(r).assign(&cache.feats.row(i + 1));
                fh.row_mut(r).assign(&hist_of(i));
            }
            let pre = self.bundle.predict_latent(&ft, &ft1, &fh)?;
            targets.extend(self.bundle.quantize(&pre)?.indices);
        }
        let mut rng = stream(cfg.seed, "upc");
        let n = cfg.batch_video;
        for step in 0..cfg.updates_upc {
            let pick: Vec<usize> = (0..n).map(|_| rng.random_range(0..pairs.len())).collect();
            let mut feat = Array2::zeros((n, d));
            let mut fh = Array2::zeros((n, k * d));
            let mut vectors = Array2::zeros((n, cfg.arch.d_z));
            let mut indices = Vec::with_capacity(n);
            for (r, &p) in pick.iter().enumerate() {
                let i = pairs[p] as usize;
                feat.row_mut(r).assign(&cache.feats.row(i));
                fh.row_mut(r).assign(&hist_of(i));
                vectors.row_mut(r).assign(&self.bundle.codebook.codes.row(targets[p]));
                indices.push(targets[p]);
            }
            let policy_in = self.bundle.policy_input(&feat, &fh)?;
            let q = Quantized { indices, vectors };
            let (report, grads) = losses::upc_from_features(&self.bundle, &policy_in, &q)
                .map_err(|e| tag_step(e, Phase::Clone, step))?;
            self.opt_upc.step(&mut self.bundle, &grads);
            self.count(LossName::Upc);
            self.metrics.record(Phase::Clone, report)?;
        }
        self.check_finite(Phase::Clone, cfg.updates_upc)?;
        self.mark_good("clone")
    }

    /// Collect this round's share of the interaction budget. Round 0 acts
    /// uniformly at random; later rounds run the greedy policy with
    /// epsilon-uniform exploration. Every step stores its true action.
    pub fn collect_interactions(&mut self, pool: &mut EnvPool, round: usize) -> Result<CollectLog> {
        self.state.phase = Phase::Collect;
        self.state.round = round;
        let quota = self.config.round_quota(round);
        if quota > self.state.remaining_budget() {
            return Err(Error::Budget {
                requested: quota,
                remaining: self.state.remaining_budget(),
            });
        }
        let agent = self.agent();
        let shape = self.config.env.obs_shape();
        let k = self.config.arch.history;
        let eps = self.config.epsilon;
        let first = self.buffer.len();
        let mut log = CollectLog::default();
        while log.steps < quota {
            log.slices += 1;
            for _ in 0..self.config.update_frequency {
                let active = pool.n_envs().min(quota - log.steps);
                if active == 0 {
                    break;
                }
                let mut draws = Vec::with_capacity(active);
                for slot in &mut pool.slots[..active] {
                    let u: f64 = slot.rng.random();
                    let a = slot.rng.random_range(0..N_ACTIONS);
                    draws.push((round == 0 || u < eps, a));
                }
                let greedy = if round == 0 {
                    vec![0; active]
                } else {
                    let mut obs = Vec::with_capacity(active * shape.len());
                    let mut hist = Vec::with_capacity(active * k * shape.len());
                    for slot in &pool.slots[..active] {
                        obs.extend_from_slice(&slot.obs);
                        hist.extend_from_slice(&slot.hist);
                    }
                    let o = to_array4::<T>(shape, active, &obs);
                    let h = crate::databank::to_array5::<T>(shape, active, k, &hist);
                    agent.act(&o, &h)?
                };
                for (i, ((explore, random_a), greedy_a)) in draws.into_iter().zip(greedy).enumerate() {
                    let action = if explore { random_a } else { greedy_a };
                    let slot = &mut pool.slots[i];
                    let out = slot.level.step(action)?;
                    self.buffer.push(Transition {
                        o_t: slot.obs.clone(),
                        action: action as u8,
                        o_t1: out.obs.data.clone(),
                        o_hist: slot.hist.clone(),
                        episode_id: slot.episode_id,
                    })?;
                    if k > 0 {
                        slot.hist.drain(..shape.len());
                        slot.hist.extend_from_slice(&slot.obs);
                    }
                    slot.obs = out.obs.data;
                    self.state.interactions_used += 1;
                    log.steps += 1;
                    log.actions.push(action);
                    log.explored.push(explore);
                    if out.done {
                        pool.begin_episode(i);
                    }
                }
                debug_assert!(self.state.interactions_used <= self.state.interaction_budget);
            }
        }
        log.records = first..self.buffer.len();
        Ok(log)
    }

    /// Labeling codes for buffer records not yet coded (`g` is frozen here).
    fn code_new_records(&mut self) -> Result<std::ops::Range<usize>> {
        if self.codes.len() > self.buffer.len() {
            return Err(Error::Data("interaction buffer evicted records mid-run".into()));
        }
        let from = self.codes.len();
        let idx: Vec<usize> = (from..self.buffer.len()).collect();
        for chunk in idx.chunks(ENCODE_CHUNK) {
            let batch = self.buffer.batch_at::<T>(chunk);
            let q = losses::label_latents(&self.bundle, &batch.pairs)?;
            if self.config.variant == Variant::NoGap {
                self.vote(&batch.pairs, &batch.actions)?;
            }
            self.codes.extend(q.indices);
        }
        Ok(from..self.buffer.len())
    }

    /// Decoder evidence: the code whose world-model prediction best matches
    /// each observed outcome votes for the logged action.
    fn vote(&mut self, pairs: &PairBatch<T>, actions: &[usize]) -> Result<()> {
        let b = &self.bundle;
        let ft = b.encode(&pairs.o_t)?;
        let ft1 = b.encode(&pairs.o_t1)?;
        let n = ft.nrows();
        let mut best = vec![(T::infinity(), 0usize); n];
        for (code, row) in b.codebook.codes.outer_iter().enumerate() {
            let z = row.insert_axis(Axis(0)).broadcast((n, row.len())).expect("broadcast").to_owned();
            let pred = b.world_forward(&ft, &z)?;
            for (i, (p, t)) in pred.outer_iter().zip(ft1.outer_iter()).enumerate() {
                let err = p.iter().zip(t.iter()).fold(T::zero(), |a, (&x, &y)| a + (x - y) * (x - y));
                if err < best[i].0 {
                    best[i] = (err, code);
                }
            }
        }
        for ((_, code), &a) in best.into_iter().zip(actions) {
            self.votes[code][a] += 1;
        }
        Ok(())
    }

    /// One grounding round: `updates_gap / R` GAP steps on the buffer (only
    /// `h` changes), or, for `no_gap`, a decoder rebuild.
    pub fn ground_actions(&mut self) -> Result<()> {
        self.state.phase = Phase::Ground;
        if self.buffer.is_empty() {
            return Err(Error::Data("interaction buffer is empty".into()));
        }
        self.code_new_records()?;
        if self.config.variant == Variant::NoGap {
            let fallback = (0..N_ACTIONS)
                .max_by_key(|&a| (self.votes.iter().map(|v| v[a]).sum::<usize>(), std::cmp::Reverse(a)))
                .unwrap_or(0);
            let table = self
                .votes
                .iter()
                .map(|v| {
                    if v.iter().all(|&c| c == 0) {
                        fallback
                    } else {
                        argmax(ndarray::ArrayView1::from(&v.map(|c| c as f64)[..]))
                    }
                })
                .collect();
            self.head = ActionHead::Decoder { table };
            return Ok(());
        }
        let steps = self.config.round_gap_updates(self.state.round);
        let mut rng = stream(self.config.seed, &format!("gap{}", self.state.round));
        let m = self.config.batch_transition;
        let d_z = self.config.arch.d_z;
        for step in 0..steps {
            let mut z = Array2::zeros((m, d_z));
            let mut actions = Vec::with_capacity(m);
            for r in 0..m {
                let i = rng.random_range(0..self.buffer.len());
                z.row_mut(r).assign(&self.bundle.codebook.codes.row(self.codes[i]));
                actions.push(self.buffer.get(i).expect("index in range").action as usize);
            }
            let (report, grads) = losses::gap_from_latents(&self.bundle, &z, &actions)
                .map_err(|e| tag_step(e, Phase::Ground, step))?;
            self.opt_gap.step(&mut self.bundle, &grads);
            self.count(LossName::Gap);
            self.metrics.record(Phase::Ground, report)?;
        }
        self.check_finite(Phase::Ground, steps)?;
        Ok(())
    }

    /// All grounding rounds with a fresh environment pool.
    pub fn interact_and_ground(&mut self) -> Result<Vec<CollectLog>> {
        let cfg = &self.config;
        let mut pool = EnvPool::new(
            &cfg.env,
            cfg.train_levels(),
            cfg.n_parallel_envs,
            cfg.arch.history,
            hash_seed(&[cfg.seed, 0x706f6f6c]),
        )?;
        let mut logs = Vec::with_capacity(cfg.grounding_rounds);
        for round in 0..self.config.grounding_rounds {
            logs.push(
                self.collect_interactions(&mut pool, round)
                    .map_err(|e| e.in_phase(Phase::Collect.as_str()))?,
            );
            self.ground_actions().map_err(|e| e.in_phase(Phase::Ground.as_str()))?;
        }
        if self.state.interactions_used != self.config.interaction_budget {
            return Err(Error::Budget {
                requested: self.config.interaction_budget,
                remaining: self.state.remaining_budget(),
            });
        }
        self.mark_good("ground")?;
        Ok(logs)
    }

    /// Close the run: optional evaluation, summary, final checkpoint.
    pub fn finish(mut self, eval_set: Option<&EvalSet>) -> Result<RunOutcome<T>> {
        self.state.phase = Phase::Done;
        self.metrics.flush()?;
        let agent = self.agent();
        let eval = match eval_set {
            Some(set) => Some(eval::evaluate(&agent, set, &self.config)?),
            None => None,
        };
        let pick = |first: bool| -> BTreeMap<String, f64> {
            [LossName::Vsc, LossName::Lfr, LossName::Gap, LossName::Upc]
                .iter()
                .filter_map(|&n| {
                    let s = self.metrics.series(n);
                    let v = if first { s.first() } else { s.last() };
                    v.map(|&v| (n.as_str().to_string(), v))
                })
                .collect()
        };
        let summary = RunSummary {
            seed: self.config.seed,
            variant: self.config.variant,
            shift: self.config.shift,
            final_losses: pick(false),
            initial_losses: pick(true),
            steps: self
                .state
                .steps
                .iter()
                .map(|(k, v)| (k.as_str().to_string(), *v))
                .collect(),
            interactions_used: self.state.interactions_used,
            interaction_budget: self.state.interaction_budget,
            eval,
            wall_clock_secs: self.started.elapsed().as_secs_f64(),
        };
        if let Some(dir) = &self.out_dir {
            let path = dir.join("model.ckpt");
            save_checkpoint(&path, &self.bundle, &self.extras()?)?;
            self.state.checkpoints.push(path);
            let text = serde_json::to_string_pretty(&summary)?;
            let p = dir.join("summary.json");
            std::fs::write(&p, text).map_err(|e| Error::io(p, e))?;
        }
        Ok(RunOutcome {
            agent,
            state: self.state,
            metrics: self.metrics,
            summary,
        })
    }
}

/// Agent and training config from a checkpoint written by a run.
pub fn load_agent<T: Real>(path: &Path) -> Result<(Agent<T>, TrainConfig)> {
    let (mut bundle, extras) = load_checkpoint::<T>(path)?;
    let field = |key: &str| {
        extras.config.get(key).cloned().ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            offset: 12,
            reason: format!("checkpoint header lacks `{key}`"),
        })
    };
    let config: TrainConfig = serde_json::from_value(field("train")?)?;
    let head: ActionHead = serde_json::from_value(field("action_head")?)?;
    bundle.set_exec(config.exec_mode());
    Ok((Agent { bundle, head }, config))
}

/// Pretrain, clone, then `R` rounds of collect and ground, then evaluate.
/// Errors are tagged with their phase; a `last_good.ckpt` is written when an
/// output directory is given.
pub fn run_full<T: Real>(
    config: &TrainConfig,
    videos: &VideoDataset,
    eval_set: Option<&EvalSet>,
    out_dir: Option<&Path>,
) -> Result<RunOutcome<T>> {
    let mut run = Run::<T>::new(config, out_dir)?;
    check_videos(config, videos)?;
    let result = (|| {
        run.pretrain_on_videos(videos)
            .map_err(|e| e.in_phase(Phase::Pretrain.as_str()))?;
        run.clone_latent_policy(videos)
            .map_err(|e| e.in_phase(Phase::Clone.as_str()))?;
        run.interact_and_ground()?;
        Ok(())
    })();
    if let Err(e) = result {
        run.save_last_good()?;
        return Err(e);
    }
    run.finish(eval_set)
}

/// The expert videos must come from this config's training levels.
pub fn check_videos(config: &TrainConfig, videos: &VideoDataset) -> Result<()> {
    if videos.shape() != config.env.obs_shape() {
        return Err(Error::Data(format!(
            "video frames are {:?}, config expects {:?}",
            videos.shape(),
            config.env.obs_shape()
        )));
    }
    if let Some(meta) = &videos.meta {
        let train = meta.first_level_seed..meta.first_level_seed + u64::from(meta.n_levels);
        assert_disjoint(&train, &config.eval_level_range())?;
    }
    Ok(())
}

/// Wrap an observation as a batch of one, for single-env inference.
pub fn single<T: Real>(shape: crate::envsuite::ObsShape, obs: &[u8], hist: &[u8], k: usize) -> (Array4<T>, Array5<T>) {
    (
        to_array4(shape, 1, obs),
        crate::databank::to_array5(shape, 1, k, hist),
    )
}
