//! Evaluation: labeling accuracy and latent purity on held-out expert data,
//! greedy rollouts on held-out levels, and the multi-seed ablation and
//! shift-sweep harnesses.

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::databank::{ActionLog, VideoDataset, NO_ACTION};
use crate::envsuite::{generate_expert_videos_in, hash_seed, make_env, oracle_inverse_dynamics, EnvSpec, N_ACTIONS};
use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::nets::Real;
use crate::trainer::{assert_disjoint, check_videos, single, Agent, Run, RunSummary, TrainConfig, Variant};

/// Model seeds a reported mean must average over.
pub const MIN_SEEDS: usize = 3;

const LABEL_CHUNK: usize = 512;

/// Held-out expert videos with their true actions.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub videos: VideoDataset,
    pub actions: ActionLog,
    pub levels: Range<u64>,
}

impl EvalSet {
    /// Expert videos over the config's held-out levels.
    pub fn generate(config: &TrainConfig) -> Result<Self> {
        let levels = config.eval_level_range();
        assert_disjoint(&config.train_levels(), &levels)?;
        let (videos, actions) =
            generate_expert_videos_in(&config.env, levels.clone(), config.eval_frames, config.eval_seed)?;
        Ok(EvalSet {
            videos,
            actions,
            levels,
        })
    }

    /// Pair indices carrying a logged action.
    fn labeled_pairs(&self) -> Vec<usize> {
        self.videos
            .valid_pairs()
            .iter()
            .map(|&i| i as usize)
            .filter(|&i| self.actions.actions[i] != NO_ACTION)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub labeling_accuracy: f64,
    pub latent_purity: f64,
    pub policy_success: f64,
    /// Mean episode length of the greedy policy, in steps.
    pub mean_steps: f64,
    pub random_success: f64,
}

/// Codes and predicted actions of the labeling model on `indices`.
fn label_pairs<T: Real>(agent: &Agent<T>, set: &EvalSet, indices: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let k = agent.bundle.arch.history;
    let mut codes = Vec::with_capacity(indices.len());
    let mut preds = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(LABEL_CHUNK) {
        let batch = set.videos.batch_at::<T>(chunk, k);
        let (q, a) = agent.label(&batch)?;
        codes.extend(q.indices);
        preds.extend(a);
    }
    Ok((codes, preds))
}

/// Fraction of held-out pairs whose labeled action equals the logged one.
pub fn labeling_accuracy<T: Real>(agent: &Agent<T>, set: &EvalSet) -> Result<f64> {
    let idx = set.labeled_pairs();
    if idx.is_empty() {
        return Err(Error::Data("evaluation set has no labeled pairs".into()));
    }
    let (_, preds) = label_pairs(agent, set, &idx)?;
    let hits = idx
        .iter()
        .zip(&preds)
        .filter(|(&i, &p)| set.actions.actions[i] as usize == p)
        .count();
    Ok(hits as f64 / idx.len() as f64)
}

/// Each used code takes its majority action (ties to the lowest); purity is
/// the fraction of pairs whose code's majority action is their own.
pub fn purity(codes: &[usize], actions: &[usize]) -> Result<f64> {
    if codes.is_empty() || codes.len() != actions.len() {
        return Err(Error::Data("purity needs equal, non-empty code and action lists".into()));
    }
    let mut counts: BTreeMap<usize, [usize; N_ACTIONS]> = BTreeMap::new();
    for (&c, &a) in codes.iter().zip(actions) {
        if a >= N_ACTIONS {
            return Err(Error::Data(format!("action {a} out of range")));
        }
        counts.entry(c).or_insert([0; N_ACTIONS])[a] += 1;
    }
    let agree: usize = counts.values().map(|v| *v.iter().max().expect("non-empty")).sum();
    Ok(agree as f64 / codes.len() as f64)
}

/// Purity of the labeling codes over unambiguous held-out transitions.
pub fn latent_purity<T: Real>(agent: &Agent<T>, set: &EvalSet) -> Result<f64> {
    let idx: Vec<usize> = set
        .labeled_pairs()
        .into_iter()
        .filter(|&i| {
            oracle_inverse_dynamics(&set.videos.observation(i), &set.videos.observation(i + 1))
                .map(|s| s.len() == 1)
                .unwrap_or(false)
        })
        .collect();
    if idx.is_empty() {
        return Err(Error::Data("evaluation set has no unambiguous transitions".into()));
    }
    let (codes, _) = label_pairs(agent, set, &idx)?;
    let truth: Vec<usize> = idx.iter().map(|&i| set.actions.actions[i] as usize).collect();
    purity(&codes, &truth)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub success: f64,
    pub mean_steps: f64,
    pub episodes: usize,
}

/// Roll `n_episodes` episodes over `levels` (round-robin), each from a seeded
/// start. `policy(obs, hist, rng)` picks actions; `hist` holds the `history`
/// previous frames, oldest first, zeroed before the episode start.
pub fn rollout_with<P>(
    spec: &EnvSpec,
    levels: Range<u64>,
    n_episodes: usize,
    seed: u64,
    history: usize,
    mode: ExecMode,
    policy: P,
) -> Result<Rollout>
where
    P: Fn(&[u8], &[u8], &mut ChaCha8Rng) -> Result<usize> + Sync + Send,
{
    if levels.is_empty() || n_episodes == 0 {
        return Err(Error::Data("rollouts need at least one level and one episode".into()));
    }
    let n_levels = levels.end - levels.start;
    let len = spec.obs_shape().len();
    let results = exec::map_range(mode, n_episodes, |e| -> Result<(bool, usize)> {
        let mut level = make_env(spec, levels.start + e as u64 % n_levels)?;
        level.reset(hash_seed(&[seed, e as u64]));
        let mut rng = ChaCha8Rng::seed_from_u64(hash_seed(&[seed, e as u64, 0x726f6c6c]));
        let mut obs = level.observe().data;
        let mut hist = vec![0u8; history * len];
        loop {
            let a = policy(&obs, &hist, &mut rng)?;
            let out = level.step(a)?;
            if history > 0 {
                hist.drain(..len);
                hist.extend_from_slice(&obs);
            }
            obs = out.obs.data;
            if out.done {
                return Ok((out.info.success, level.step_count));
            }
        }
    });
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;
    let wins = results.iter().filter(|r| r.0).count();
    let steps: usize = results.iter().map(|r| r.1).sum();
    Ok(Rollout {
        success: wins as f64 / n_episodes as f64,
        mean_steps: steps as f64 / n_episodes as f64,
        episodes: n_episodes,
    })
}

/// Greedy policy rollouts (no exploration).
pub fn rollout_policy<T: Real>(
    agent: &Agent<T>,
    spec: &EnvSpec,
    n_episodes: usize,
    levels: Range<u64>,
    seed: u64,
    mode: ExecMode,
) -> Result<Rollout> {
    let shape = spec.obs_shape();
    let k = agent.bundle.arch.history;
    rollout_with(spec, levels, n_episodes, seed, k, mode, |obs, hist, _| {
        let (o, h) = single::<T>(shape, obs, hist, k);
        Ok(agent.act(&o, &h)?[0])
    })
}

/// Uniform-random baseline.
pub fn rollout_random(spec: &EnvSpec, n_episodes: usize, levels: Range<u64>, seed: u64, mode: ExecMode) -> Result<Rollout> {
    rollout_with(spec, levels, n_episodes, seed, 0, mode, |_, _, rng| {
        Ok(rng.random_range(0..N_ACTIONS))
    })
}

/// All headline metrics for one trained agent.
pub fn evaluate<T: Real>(agent: &Agent<T>, set: &EvalSet, config: &TrainConfig) -> Result<EvalMetrics> {
    assert_disjoint(&config.train_levels(), &set.levels)?;
    let mode = config.exec_mode();
    let seed = hash_seed(&[config.eval_seed, 0x6576616c]);
    let policy = rollout_policy(agent, &config.env, config.eval_episodes, set.levels.clone(), seed, mode)?;
    let random = rollout_random(&config.env, config.eval_episodes, set.levels.clone(), seed, mode)?;
    Ok(EvalMetrics {
        labeling_accuracy: labeling_accuracy(agent, set)?,
        latent_purity: latent_purity(agent, set)?,
        policy_success: policy.success,
        mean_steps: policy.mean_steps,
        random_success: random.success,
    })
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One row per (variant, seed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRow {
    pub variant: String,
    pub seed: u64,
    pub shift: usize,
    pub labeling_accuracy: f64,
    pub latent_purity: f64,
    pub policy_success: f64,
    pub mean_steps: f64,
    pub interactions_used: usize,
}

/// Aggregate over seeds; always carries its seed count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub variant: String,
    pub seeds: usize,
    pub labeling_accuracy: (f64, f64),
    pub latent_purity: (f64, f64),
    pub policy_success: (f64, f64),
    pub mean_steps: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub name: String,
    pub per_seed: Vec<SeedRow>,
    pub table: Vec<TableRow>,
}

impl EvalReport {
    /// Group per-seed rows by variant label, in first-seen order. Refuses
    /// any group with fewer than [`MIN_SEEDS`] seeds.
    pub fn from_rows(name: &str, per_seed: Vec<SeedRow>) -> Result<Self> {
        let mut order: Vec<String> = Vec::new();
        for r in &per_seed {
            if !order.contains(&r.variant) {
                order.push(r.variant.clone());
            }
        }
        let mut table = Vec::with_capacity(order.len());
        for v in order {
            let rows: Vec<&SeedRow> = per_seed.iter().filter(|r| r.variant == v).collect();
            if rows.len() < MIN_SEEDS {
                return Err(Error::config(
                    "eval_seeds",
                    format!("`{v}` has {} seeds; reports need at least {MIN_SEEDS}", rows.len()),
                ));
            }
            let col = |f: fn(&SeedRow) -> f64| mean_std(&rows.iter().map(|r| f(r)).collect::<Vec<_>>());
            table.push(TableRow {
                variant: v,
                seeds: rows.len(),
                labeling_accuracy: col(|r| r.labeling_accuracy),
                latent_purity: col(|r| r.latent_purity),
                policy_success: col(|r| r.policy_success),
                mean_steps: col(|r| r.mean_steps),
            });
        }
        Ok(EvalReport {
            name: name.to_string(),
            per_seed,
            table,
        })
    }

    pub fn row(&self, variant: &str) -> Option<&TableRow> {
        self.table.iter().find(|r| r.variant == variant)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.per_seed {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(name: &str, path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let rows = r.deserialize().collect::<std::result::Result<Vec<SeedRow>, _>>()?;
        EvalReport::from_rows(name, rows)
    }

    /// Plain-text `mean ± std` table.
    pub fn summary_text(&self) -> String {
        let mut s = format!(
            "{}\n{:<10} {:>5} {:>16} {:>16} {:>16} {:>16}\n",
            self.name, "variant", "seeds", "label_acc", "purity", "success", "steps"
        );
        for r in &self.table {
            let f = |(m, sd): (f64, f64)| format!("{m:.3} ± {sd:.3}");
            s.push_str(&format!(
                "{:<10} {:>5} {:>16} {:>16} {:>16} {:>16}\n",
                r.variant,
                r.seeds,
                f(r.labeling_accuracy),
                f(r.latent_purity),
                f(r.policy_success),
                f(r.mean_steps)
            ));
        }
        s
    }
}

/// Report row for one finished run under `label`.
pub fn seed_row(label: &str, s: &RunSummary) -> Result<SeedRow> {
    let m = s
        .eval
        .ok_or_else(|| Error::Data("run finished without evaluation".into()))?;
    Ok(SeedRow {
        variant: label.to_string(),
        seed: s.seed,
        shift: s.shift,
        labeling_accuracy: m.labeling_accuracy,
        latent_purity: m.latent_purity,
        policy_success: m.policy_success,
        mean_steps: m.mean_steps,
        interactions_used: s.interactions_used,
    })
}

/// Train and evaluate `variants` for one seed. `full` and `no_gap` share
/// pretraining and cloning, which they run identically.
pub fn run_variants<T: Real>(
    config: &TrainConfig,
    videos: &VideoDataset,
    set: &EvalSet,
    variants: &[Variant],
) -> Result<Vec<(Variant, RunSummary)>> {
    check_videos(config, videos)?;
    let mut shared: Option<Run<T>> = None;
    let mut out = Vec::with_capacity(variants.len());
    for &v in variants {
        let mut run = match v {
            Variant::Full | Variant::NoGap => {
                if shared.is_none() {
                    let mut base = Run::<T>::new(&TrainConfig { variant: Variant::Full, ..config.clone() }, None)?;
                    base.pretrain_on_videos(videos)?;
                    base.clone_latent_policy(videos)?;
                    shared = Some(base);
                }
                shared.as_ref().expect("just built").fork(v)
            }
            _ => {
                let mut run = Run::<T>::new(&TrainConfig { variant: v, ..config.clone() }, None)?;
                run.pretrain_on_videos(videos)?;
                run.clone_latent_policy(videos)?;
                run
            }
        };
        run.interact_and_ground()?;
        out.push((v, run.finish(Some(set))?.summary));
    }
    Ok(out)
}

/// Ablation table: every variant over every seed in `config.eval_seeds`.
pub fn ablate<T: Real>(
    config: &TrainConfig,
    videos: &VideoDataset,
    set: &EvalSet,
    variants: &[Variant],
) -> Result<EvalReport> {
    if config.eval_seeds.len() < MIN_SEEDS {
        return Err(Error::config("eval_seeds", format!("need at least {MIN_SEEDS} seeds")));
    }
    let mut rows = Vec::new();
    for &seed in &config.eval_seeds {
        let cfg = TrainConfig { seed, ..config.clone() };
        for (v, s) in run_variants::<T>(&cfg, videos, set, variants)? {
            rows.push(seed_row(v.as_str(), &s)?);
        }
    }
    EvalReport::from_rows("ablation", rows)
}

/// Default sweep of the maximum shift distance.
pub const DEFAULT_SHIFTS: [usize; 4] = [0, 1, 2, 4];

pub fn shift_label(s: usize) -> String {
    format!("s={s}")
}

/// Full runs at each shift distance over every seed in `config.eval_seeds`.
pub fn sweep_shift<T: Real>(
    config: &TrainConfig,
    videos: &VideoDataset,
    set: &EvalSet,
    shifts: &[usize],
) -> Result<EvalReport> {
    if config.eval_seeds.len() < MIN_SEEDS {
        return Err(Error::config("eval_seeds", format!("need at least {MIN_SEEDS} seeds")));
    }
    let mut rows = Vec::new();
    for &s in shifts {
        for &seed in &config.eval_seeds {
            let cfg = TrainConfig {
                seed,
                shift: s,
                variant: Variant::Full,
                ..config.clone()
            };
            cfg.validate()?;
            let (_, summary) = run_variants::<T>(&cfg, videos, set, &[Variant::Full])?
                .pop()
                .expect("one variant");
            rows.push(seed_row(&shift_label(s), &summary)?);
        }
    }
    EvalReport::from_rows("shift_sweep", rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn purity_extremes() {
        let actions = [0, 1, 2, 3, 4, 0, 1, 2, 3, 4];
        assert_eq!(purity(&actions, &actions).unwrap(), 1.0);
        assert!((purity(&[7; 10], &actions).unwrap() - 0.2).abs() < 1e-12);
        assert!(purity(&[], &[]).is_err());
    }

    #[test]
    fn report_refuses_single_seed() {
        let row = SeedRow {
            variant: "full".into(),
            seed: 0,
            shift: 1,
            labeling_accuracy: 0.5,
            latent_purity: 0.5,
            policy_success: 0.5,
            mean_steps: 3.0,
            interactions_used: 10,
        };
        assert!(EvalReport::from_rows("x", vec![row.clone()]).is_err());
        let rows = (0..3).map(|s| SeedRow { seed: s, ..row.clone() }).collect();
        let rep = EvalReport::from_rows("x", rows).unwrap();
        assert_eq!(rep.table[0].seeds, 3);
        assert_eq!(rep.table[0].labeling_accuracy, (0.5, 0.0));
    }

    #[test]
    fn mean_std_sample() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-12);
    }
}
