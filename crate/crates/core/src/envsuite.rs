//! ProcGrid: seeded, procedurally generated gridworlds with a scripted BFS
//! expert and an exact inverse-dynamics oracle.
//!
//! Each level is a pure function of `(EnvSpec, level_seed)`: wall layout,
//! goal, optional hazard, default start cell and a per-level texture. The
//! step interface is reward-free; [`StepInfo::success`] exists for evaluation
//! only and carries no scalar reward.

use std::collections::{BTreeSet, VecDeque};
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::databank::{ActionLog, DatasetMeta, VideoDataset, NO_ACTION};
use crate::error::{Error, Result};

pub const N_ACTIONS: usize = 5;
/// Occupancy channels preceding the texture channels.
pub const OCCUPANCY_CHANNELS: usize = 4;
pub const CH_AGENT: usize = 0;
pub const CH_WALL: usize = 1;
pub const CH_GOAL: usize = 2;
pub const CH_HAZARD: usize = 3;

const MAX_GENERATION_ATTEMPTS: u64 = 16;
/// Smallest goal-reachable region (goal included) a playable level may have.
const MIN_REACHABLE_CELLS: usize = 3;

/// Shortest start-to-goal path length a level may have. Keeps trivially
/// short levels from inflating the success of an uninformed policy.
pub fn min_start_distance(grid_size: usize) -> usize {
    (grid_size / 2).max(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Action {
    Noop = 0,
    Up = 1,
    Down = 2,
    Left = 3,
    Right = 4,
}

impl Action {
    pub const ALL: [Action; N_ACTIONS] = [
        Action::Noop,
        Action::Up,
        Action::Down,
        Action::Left,
        Action::Right,
    ];
    pub const MOVES: [Action; 4] = [Action::Up, Action::Down, Action::Left, Action::Right];

    pub fn from_index(i: usize) -> Result<Action> {
        Action::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Env(format!("action {i} out of range [0, {N_ACTIONS})")))
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn delta(self) -> (i32, i32) {
        match self {
            Action::Noop => (0, 0),
            Action::Up => (-1, 0),
            Action::Down => (1, 0),
            Action::Left => (0, -1),
            Action::Right => (0, 1),
        }
    }
}

pub type Pos = (usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ObsShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ObsShape {
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSpec {
    pub grid_size: usize,
    pub wall_density: f64,
    pub n_actions: usize,
    pub texture_channels: usize,
    pub max_steps: usize,
    pub obs_height: usize,
    pub obs_width: usize,
}

impl Default for EnvSpec {
    fn default() -> Self {
        EnvSpec::procgrid(8)
    }
}

impl EnvSpec {
    pub fn procgrid(grid_size: usize) -> Self {
        EnvSpec {
            grid_size,
            wall_density: 0.2,
            n_actions: N_ACTIONS,
            texture_channels: 1,
            max_steps: 4 * grid_size,
            obs_height: grid_size,
            obs_width: grid_size,
        }
    }

    /// Resolve a named preset such as `procgrid8`.
    pub fn by_name(name: &str) -> Result<Self> {
        let size = name
            .strip_prefix("procgrid")
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| Error::config("env", format!("unknown environment `{name}`")))?;
        let spec = EnvSpec::procgrid(size);
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_density(mut self, wall_density: f64) -> Self {
        self.wall_density = wall_density;
        self
    }

    pub fn obs_channels(&self) -> usize {
        OCCUPANCY_CHANNELS + self.texture_channels
    }

    pub fn obs_shape(&self) -> ObsShape {
        ObsShape {
            channels: self.obs_channels(),
            height: self.obs_height,
            width: self.obs_width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_actions != N_ACTIONS {
            return Err(Error::config("env.n_actions", "must be 5"));
        }
        if self.grid_size < 2 {
            return Err(Error::config("env.grid_size", "must be at least 2"));
        }
        if self.max_steps == 0 {
            return Err(Error::config("env.max_steps", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.wall_density) {
            return Err(Error::config("env.wall_density", "must lie in [0, 1)"));
        }
        if self.obs_height != self.grid_size || self.obs_width != self.grid_size {
            return Err(Error::config(
                "env.obs_height/obs_width",
                "must equal grid_size (one cell per pixel)",
            ));
        }
        Ok(())
    }

    /// Stable content hash used in dataset metadata.
    pub fn content_hash(&self) -> u64 {
        let mut h = splitmix(self.grid_size as u64);
        for v in [
            self.wall_density.to_bits(),
            self.n_actions as u64,
            self.texture_channels as u64,
            self.max_steps as u64,
            self.obs_height as u64,
            self.obs_width as u64,
        ] {
            h = splitmix(h ^ v);
        }
        h
    }
}

/// One ProcGrid observation: `(channels, height, width)` bytes where 255
/// encodes 1.0. Occupancy channels are exactly 0 or 255; texture bytes are
/// read as `byte / 255`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Observation {
    pub shape: ObsShape,
    pub data: Vec<u8>,
}

impl Observation {
    pub fn zeros(shape: ObsShape) -> Self {
        Observation {
            shape,
            data: vec![0; shape.len()],
        }
    }

    pub fn from_bytes(shape: ObsShape, data: Vec<u8>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::Shape(format!(
                "observation has {} bytes, shape {:?} needs {}",
                data.len(),
                shape,
                shape.len()
            )));
        }
        Ok(Observation { shape, data })
    }

    fn index(&self, c: usize, r: usize, col: usize) -> usize {
        (c * self.shape.height + r) * self.shape.width + col
    }

    pub fn byte(&self, c: usize, r: usize, col: usize) -> u8 {
        self.data[self.index(c, r, col)]
    }

    pub fn value(&self, c: usize, r: usize, col: usize) -> f32 {
        f32::from(self.byte(c, r, col)) / 255.0
    }

    pub fn channel(&self, c: usize) -> &[u8] {
        let p = self.shape.plane();
        &self.data[c * p..(c + 1) * p]
    }

    /// Cells set in an occupancy channel.
    pub fn occupied(&self, c: usize) -> Vec<Pos> {
        let w = self.shape.width;
        self.channel(c)
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0)
            .map(|(i, _)| (i / w, i % w))
            .collect()
    }

    pub fn agent_pos(&self) -> Result<Pos> {
        match self.occupied(CH_AGENT).as_slice() {
            [p] => Ok(*p),
            cells => Err(Error::Env(format!(
                "agent channel marks {} cells, expected exactly one",
                cells.len()
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StepInfo {
    /// Reached the goal. Evaluation-only signal.
    pub success: bool,
    pub hit_hazard: bool,
    pub timed_out: bool,
    pub moved: bool,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub obs: Observation,
    pub done: bool,
    pub info: StepInfo,
}

/// A generated level plus the mutable episode state.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelState {
    pub spec: EnvSpec,
    pub level_seed: u64,
    pub agent_pos: Pos,
    pub start_pos: Pos,
    pub walls: Vec<bool>,
    pub goal_pos: Pos,
    pub hazard_pos: Option<Pos>,
    pub texture: Vec<u8>,
    pub step_count: usize,
    pub done: bool,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix several words into one seed.
pub fn hash_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x5EED_u64, |h, &p| splitmix(h ^ splitmix(p)))
}

fn level_texture(spec: &EnvSpec, level_seed: u64) -> Vec<u8> {
    let n = spec.grid_size;
    let mut out = Vec::with_capacity(spec.texture_channels * n * n);
    for ch in 0..spec.texture_channels {
        let base = (hash_seed(&[level_seed, 0x7E47, ch as u64]) % 256) as i32;
        for r in 0..n {
            for c in 0..n {
                let jitter =
                    (hash_seed(&[level_seed, 0x7E47, ch as u64, r as u64, c as u64]) % 49) as i32
                        - 24;
                out.push((base + jitter).clamp(0, 255) as u8);
            }
        }
    }
    out
}

/// Make a playable level. Identical arguments give bitwise-identical levels.
pub fn make_env(spec: &EnvSpec, level_seed: u64) -> Result<LevelState> {
    spec.validate()?;
    let n = spec.grid_size;
    let texture = level_texture(spec, level_seed);
    for attempt in 0..MAX_GENERATION_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(hash_seed(&[level_seed, attempt]));
        let walls: Vec<bool> = (0..n * n)
            .map(|_| rng.random::<f64>() < spec.wall_density)
            .collect();
        let free: Vec<usize> = (0..n * n).filter(|&i| !walls[i]).collect();
        if free.len() < 2 {
            continue;
        }
        let goal = free[rng.random_range(0..free.len())];
        let to_pos = |i: usize| (i / n, i % n);
        let mut level = LevelState {
            spec: spec.clone(),
            level_seed,
            agent_pos: to_pos(goal),
            start_pos: to_pos(goal),
            walls,
            goal_pos: to_pos(goal),
            hazard_pos: None,
            texture: texture.clone(),
            step_count: 0,
            done: false,
        };
        let dist = level.goal_distances();
        if dist.iter().filter(|d| d.is_some()).count() < MIN_REACHABLE_CELLS {
            continue;
        }
        let min_dist = min_start_distance(n);
        let starts: Vec<usize> = free
            .iter()
            .copied()
            .filter(|&i| dist[i].is_some_and(|d| d >= min_dist))
            .collect();
        if starts.is_empty() {
            continue;
        }
        let agent = starts[rng.random_range(0..starts.len())];
        level.agent_pos = to_pos(agent);
        level.start_pos = to_pos(agent);
        if rng.random_bool(0.5) {
            let cands: Vec<usize> = free.iter().copied().filter(|&i| i != goal && i != agent).collect();
            if !cands.is_empty() {
                level.hazard_pos = Some(to_pos(cands[rng.random_range(0..cands.len())]));
            }
        }
        if level.goal_distances()[agent].is_some() {
            return Ok(level);
        }
    }
    Err(Error::Env(format!(
        "level generation for seed {level_seed} exceeded {MAX_GENERATION_ATTEMPTS} attempts \
         (wall_density {})",
        spec.wall_density
    )))
}

impl LevelState {
    fn n(&self) -> usize {
        self.spec.grid_size
    }

    pub fn is_wall(&self, p: Pos) -> bool {
        self.walls[p.0 * self.n() + p.1]
    }

    /// Cell reached by `action` from `p` (unchanged on a bump).
    pub fn target(&self, p: Pos, action: Action) -> Pos {
        let (dr, dc) = action.delta();
        let r = p.0 as i32 + dr;
        let c = p.1 as i32 + dc;
        let n = self.n() as i32;
        if r < 0 || c < 0 || r >= n || c >= n {
            return p;
        }
        let t = (r as usize, c as usize);
        if self.is_wall(t) {
            p
        } else {
            t
        }
    }

    fn passable(&self, p: Pos) -> bool {
        !self.is_wall(p) && Some(p) != self.hazard_pos
    }

    /// BFS distances to the goal over wall- and hazard-free cells.
    pub fn goal_distances(&self) -> Vec<Option<usize>> {
        let n = self.n();
        let mut dist = vec![None; n * n];
        let mut queue = VecDeque::new();
        dist[self.goal_pos.0 * n + self.goal_pos.1] = Some(0);
        queue.push_back(self.goal_pos);
        while let Some(p) = queue.pop_front() {
            let d = dist[p.0 * n + p.1].unwrap_or(0);
            for a in Action::MOVES {
                let q = self.target(p, a);
                if q != p && self.passable(q) && dist[q.0 * n + q.1].is_none() {
                    dist[q.0 * n + q.1] = Some(d + 1);
                    queue.push_back(q);
                }
            }
        }
        dist
    }

    pub fn distance_to_goal(&self, p: Pos) -> Option<usize> {
        self.goal_distances()[p.0 * self.n() + p.1]
    }

    /// Start a new episode from a seeded start cell at least
    /// [`min_start_distance`] steps from the goal.
    pub fn reset(&mut self, episode_seed: u64) {
        let n = self.n();
        let dist = self.goal_distances();
        let min_dist = min_start_distance(n);
        let cands: Vec<Pos> = (0..n * n)
            .filter(|&i| matches!(dist[i], Some(d) if d >= min_dist))
            .map(|i| (i / n, i % n))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(hash_seed(&[self.level_seed, episode_seed]));
        // make_env guarantees the default start is a candidate, so cands is non-empty
        self.agent_pos = cands[rng.random_range(0..cands.len())];
        self.start_pos = self.agent_pos;
        self.step_count = 0;
        self.done = false;
    }

    /// Return to the level's default start.
    pub fn restart(&mut self) {
        self.agent_pos = self.start_pos;
        self.step_count = 0;
        self.done = false;
    }

    pub fn observe(&self) -> Observation {
        let shape = self.spec.obs_shape();
        let n = self.n();
        let plane = shape.plane();
        let mut data = vec![0u8; shape.len()];
        data[CH_AGENT * plane + self.agent_pos.0 * n + self.agent_pos.1] = 255;
        for (i, &w) in self.walls.iter().enumerate() {
            if w {
                data[CH_WALL * plane + i] = 255;
            }
        }
        data[CH_GOAL * plane + self.goal_pos.0 * n + self.goal_pos.1] = 255;
        if let Some(h) = self.hazard_pos {
            data[CH_HAZARD * plane + h.0 * n + h.1] = 255;
        }
        data[OCCUPANCY_CHANNELS * plane..].copy_from_slice(&self.texture);
        Observation { shape, data }
    }

    pub fn step(&mut self, action: usize) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::Env("step called on a finished episode".into()));
        }
        let action = Action::from_index(action)?;
        let next = self.target(self.agent_pos, action);
        let moved = next != self.agent_pos;
        self.agent_pos = next;
        self.step_count += 1;
        let success = next == self.goal_pos;
        let hit_hazard = Some(next) == self.hazard_pos;
        let timed_out = !success && !hit_hazard && self.step_count >= self.spec.max_steps;
        self.done = success || hit_hazard || timed_out;
        Ok(StepOutcome {
            obs: self.observe(),
            done: self.done,
            info: StepInfo {
                success,
                hit_hazard,
                timed_out,
                moved,
            },
        })
    }
}

/// First move of a BFS shortest path to the goal, ties broken up < down < left < right.
pub fn expert_action(state: &LevelState) -> Result<Action> {
    let n = state.n();
    let dist = state.goal_distances();
    let here = dist[state.agent_pos.0 * n + state.agent_pos.1]
        .ok_or_else(|| Error::Env("no path from agent to goal".into()))?;
    if here == 0 {
        return Err(Error::Env("agent already at goal".into()));
    }
    Action::MOVES
        .into_iter()
        .find(|&a| {
            let q = state.target(state.agent_pos, a);
            q != state.agent_pos && dist[q.0 * n + q.1] == Some(here - 1)
        })
        .ok_or_else(|| Error::Env("BFS distance map inconsistent".into()))
}

/// All actions consistent with the transition `o_t -> o_t1`, sorted ascending.
pub fn oracle_inverse_dynamics(o_t: &Observation, o_t1: &Observation) -> Result<BTreeSet<usize>> {
    if o_t.shape != o_t1.shape {
        return Err(Error::Shape("observation shapes differ".into()));
    }
    let plane = o_t.shape.plane();
    if o_t.data[plane..] != o_t1.data[plane..] {
        return Err(Error::Env(
            "static channels differ: observations are not from one level".into(),
        ));
    }
    let (r0, c0) = o_t.agent_pos()?;
    let (r1, c1) = o_t1.agent_pos()?;
    let dr = r1 as i64 - r0 as i64;
    let dc = c1 as i64 - c0 as i64;
    let mut set = BTreeSet::new();
    if dr == 0 && dc == 0 {
        set.insert(Action::Noop.index());
        for a in Action::MOVES {
            let (ar, ac) = a.delta();
            let r = r0 as i64 + ar as i64;
            let c = c0 as i64 + ac as i64;
            let outside =
                r < 0 || c < 0 || r >= o_t.shape.height as i64 || c >= o_t.shape.width as i64;
            if outside || o_t.byte(CH_WALL, r as usize, c as usize) != 0 {
                set.insert(a.index());
            }
        }
        return Ok(set);
    }
    let moved = Action::MOVES
        .into_iter()
        .find(|a| a.delta() == (dr as i32, dc as i32))
        .ok_or_else(|| {
            Error::Env(format!(
                "agent displacement ({dr}, {dc}) is not a single-cell move"
            ))
        })?;
    set.insert(moved.index());
    Ok(set)
}

/// Expert rollout over one episode: observations, actions, success flag.
pub fn expert_episode(level: &mut LevelState) -> Result<(Vec<Observation>, Vec<Action>, bool)> {
    let mut obs = vec![level.observe()];
    let mut actions = Vec::new();
    let mut success = false;
    while !level.done {
        let a = expert_action(level)?;
        let out = level.step(a.index())?;
        actions.push(a);
        obs.push(out.obs);
        success = out.info.success;
    }
    Ok((obs, actions, success))
}

/// Level seeds reserved for a generation seed; distinct seeds give disjoint ranges.
pub fn level_seed_range(seed: u64, n_levels: usize) -> Range<u64> {
    let start = seed.wrapping_mul(1 << 32);
    start..start + n_levels as u64
}

/// Expert videos over levels `level_seed_range(seed, n_levels)`.
pub fn generate_expert_videos(
    spec: &EnvSpec,
    n_levels: usize,
    total_frames: usize,
    seed: u64,
) -> Result<(VideoDataset, ActionLog)> {
    generate_expert_videos_in(spec, level_seed_range(seed, n_levels), total_frames, seed)
}

/// Roll the expert over `levels` round-robin, one freshly seeded start per
/// episode, until exactly `total_frames` observations are stored. The
/// returned [`ActionLog`] is the held-out ground truth.
pub fn generate_expert_videos_in(
    spec: &EnvSpec,
    levels: Range<u64>,
    total_frames: usize,
    seed: u64,
) -> Result<(VideoDataset, ActionLog)> {
    if levels.is_empty() {
        return Err(Error::Data("n_levels must be at least 1".into()));
    }
    if total_frames < 2 {
        return Err(Error::Data("total_frames must be at least 2".into()));
    }
    let shape = spec.obs_shape();
    let mut templates = levels
        .clone()
        .map(|s| make_env(spec, s))
        .collect::<Result<Vec<_>>>()?;
    let mut frames = Vec::with_capacity(total_frames * shape.len());
    let mut actions = Vec::with_capacity(total_frames);
    let mut episode_starts = Vec::new();
    let mut stored = 0usize;
    let mut episode = 0u64;
    while stored < total_frames {
        let li = (episode % templates.len() as u64) as usize;
        let level = &mut templates[li];
        level.reset(hash_seed(&[seed, episode]));
        episode += 1;
        let (obs, acts, success) = expert_episode(level)?;
        if !success {
            return Err(Error::Env(format!(
                "expert failed on level {} (episode {})",
                level.level_seed,
                episode - 1
            )));
        }
        let remaining = total_frames - stored;
        let mut take = obs.len().min(remaining);
        if remaining - take == 1 {
            // a trailing 1-frame episode would be invalid
            if take >= 3 {
                take -= 1;
            } else {
                continue;
            }
        }
        episode_starts.push(stored as u32);
        for (i, o) in obs.iter().take(take).enumerate() {
            frames.extend_from_slice(&o.data);
            actions.push(if i + 1 < take {
                acts[i] as u8
            } else {
                NO_ACTION
            });
        }
        stored += take;
    }
    let meta = DatasetMeta {
        spec_hash: spec.content_hash(),
        seed,
        n_levels: (levels.end - levels.start) as u32,
        first_level_seed: levels.start,
    };
    let dataset = VideoDataset::new(shape, frames, episode_starts, Some(meta))?;
    let log = ActionLog { actions };
    Ok((dataset, log))
}
