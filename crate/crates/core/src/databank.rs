//! Expert video storage (the UPSV container), the interaction ring buffer,
//! and batch samplers that attach zero-padded history frames.
//!
//! UPSV layout, all integers little-endian:
//!
//! ```text
//! 0..4    magic "UPSV"
//! 4       version (1)
//! 5       dtype code (0 = u8)
//! 6..8    reserved, zero
//! 8..24   u32 n_frames, C, H, W
//! 24..28  u32 n_episodes, then n_episodes x u32 episode_starts
//! ...     n_frames*C*H*W frame bytes in (frame, channel, row, col) order
//! ...     optional: u32 n_action_records, then that many u8 actions
//! ```
//!
//! The action block appears only in the held-out `.actions` companion.

use std::collections::VecDeque;
use std::path::Path;

use ndarray::{Array4, Array5};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envsuite::{ObsShape, Observation, N_ACTIONS};
use crate::error::{Error, Result};
use crate::nets::Real;

pub const MAGIC: &[u8; 4] = b"UPSV";
pub const VERSION: u8 = 1;
pub const DTYPE_U8: u8 = 0;
/// Action-log marker for the last frame of an episode.
pub const NO_ACTION: u8 = 255;
const HEADER_LEN: usize = 28;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub spec_hash: u64,
    pub seed: u64,
    pub n_levels: u32,
    pub first_level_seed: u64,
}

/// Ordered, action-free expert observation sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoDataset {
    shape: ObsShape,
    frames: Vec<u8>,
    episode_starts: Vec<u32>,
    /// Frame indices `i` such that `(i, i + 1)` lies inside one episode.
    valid: Vec<u32>,
    episode_of: Vec<u32>,
    /// Not part of the UPSV container; present for freshly generated data.
    pub meta: Option<DatasetMeta>,
}

/// Per-frame ground-truth actions; [`NO_ACTION`] on episode-final frames.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionLog {
    pub actions: Vec<u8>,
}

impl VideoDataset {
    pub fn new(
        shape: ObsShape,
        frames: Vec<u8>,
        episode_starts: Vec<u32>,
        meta: Option<DatasetMeta>,
    ) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::Data("observation shape has zero size".into()));
        }
        if frames.len() % shape.len() != 0 {
            return Err(Error::Data(format!(
                "{} frame bytes is not a multiple of the frame size {}",
                frames.len(),
                shape.len()
            )));
        }
        let n = frames.len() / shape.len();
        if n == 0 {
            return Err(Error::Data("dataset has no frames".into()));
        }
        if episode_starts.first() != Some(&0) {
            return Err(Error::Data("episode_starts must begin at 0".into()));
        }
        let mut valid = Vec::with_capacity(n);
        let mut episode_of = vec![0u32; n];
        for (e, &start) in episode_starts.iter().enumerate() {
            let end = episode_starts.get(e + 1).copied().unwrap_or(n as u32);
            if end <= start {
                return Err(Error::Data("episode_starts must be strictly increasing".into()));
            }
            if end as usize > n {
                return Err(Error::Data(format!(
                    "episode start {start} beyond frame count {n}"
                )));
            }
            if end - start < 2 {
                return Err(Error::Data(format!(
                    "episode {e} has length {}, minimum is 2",
                    end - start
                )));
            }
            valid.extend(start..end - 1);
            episode_of[start as usize..end as usize].fill(e as u32);
        }
        Ok(VideoDataset {
            shape,
            frames,
            episode_starts,
            valid,
            episode_of,
            meta,
        })
    }

    pub fn shape(&self) -> ObsShape {
        self.shape
    }

    pub fn n_frames(&self) -> usize {
        self.frames.len() / self.shape.len()
    }

    pub fn episode_starts(&self) -> &[u32] {
        &self.episode_starts
    }

    pub fn n_episodes(&self) -> usize {
        self.episode_starts.len()
    }

    pub fn episode_of(&self, frame: usize) -> usize {
        self.episode_of[frame] as usize
    }

    pub fn frames(&self) -> &[u8] {
        &self.frames
    }

    /// Indices `i` for which `(o_i, o_{i+1})` is a within-episode pair.
    pub fn valid_pairs(&self) -> &[u32] {
        &self.valid
    }

    pub fn frame(&self, i: usize) -> &[u8] {
        let len = self.shape.len();
        &self.frames[i * len..(i + 1) * len]
    }

    pub fn observation(&self, i: usize) -> Observation {
        Observation {
            shape: self.shape,
            data: self.frame(i).to_vec(),
        }
    }

    /// `k` frames preceding `i`, oldest first, zeroed before the episode start.
    pub fn history_into(&self, i: usize, k: usize, out: &mut [u8]) {
        let len = self.shape.len();
        let start = self.episode_starts[self.episode_of(i)] as usize;
        for j in 0..k {
            let back = k - j;
            let dst = &mut out[j * len..(j + 1) * len];
            if i >= start + back {
                dst.copy_from_slice(self.frame(i - back));
            } else {
                dst.fill(0);
            }
        }
    }

    /// Deterministic batch over explicit pair indices.
    pub fn batch_at<T: Real>(&self, indices: &[usize], k: usize) -> PairBatch<T> {
        let len = self.shape.len();
        let n = indices.len();
        let mut t = Vec::with_capacity(n * len);
        let mut t1 = Vec::with_capacity(n * len);
        let mut hist = vec![0u8; n * k * len];
        for (b, &i) in indices.iter().enumerate() {
            t.extend_from_slice(self.frame(i));
            t1.extend_from_slice(self.frame(i + 1));
            self.history_into(i, k, &mut hist[b * k * len..(b + 1) * k * len]);
        }
        PairBatch {
            o_t: to_array4(self.shape, n, &t),
            o_t1: to_array4(self.shape, n, &t1),
            o_hist: to_array5(self.shape, n, k, &hist),
            indices: indices.to_vec(),
        }
    }
}

pub(crate) fn byte_to_real<T: Real>(b: u8) -> T {
    T::from_f64(f64::from(b) / 255.0).unwrap_or_else(T::zero)
}

pub fn to_array4<T: Real>(shape: ObsShape, n: usize, bytes: &[u8]) -> Array4<T> {
    let data = bytes.iter().map(|&b| byte_to_real(b)).collect();
    Array4::from_shape_vec((n, shape.channels, shape.height, shape.width), data)
        .expect("frame bytes match batch shape")
}

pub fn to_array5<T: Real>(shape: ObsShape, n: usize, k: usize, bytes: &[u8]) -> Array5<T> {
    let data = bytes.iter().map(|&b| byte_to_real(b)).collect();
    Array5::from_shape_vec((n, k, shape.channels, shape.height, shape.width), data)
        .expect("history bytes match batch shape")
}

/// Index-aligned observation pairs with history: `o_hist[i]` precedes `o_t[i]`.
#[derive(Debug, Clone)]
pub struct PairBatch<T> {
    pub o_t: Array4<T>,
    pub o_t1: Array4<T>,
    pub o_hist: Array5<T>,
    /// Dataset frame index of each `o_t` (buffer slot for transitions).
    pub indices: Vec<usize>,
}

impl<T> PairBatch<T> {
    pub fn len(&self) -> usize {
        self.o_t.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn history_len(&self) -> usize {
        self.o_hist.shape()[1]
    }
}

#[derive(Debug, Clone)]
pub struct TransitionBatch<T> {
    pub pairs: PairBatch<T>,
    pub actions: Vec<usize>,
}

/// Uniform sample of `n` within-episode pairs, with replacement.
pub fn sample_pairs<T: Real, R: Rng + ?Sized>(
    dataset: &VideoDataset,
    n: usize,
    k: usize,
    rng: &mut R,
) -> Result<PairBatch<T>> {
    if dataset.valid.is_empty() {
        return Err(Error::Data("dataset has no valid observation pairs".into()));
    }
    if n == 0 {
        return Err(Error::Data("batch size must be at least 1".into()));
    }
    let indices: Vec<usize> = (0..n)
        .map(|_| dataset.valid[rng.random_range(0..dataset.valid.len())] as usize)
        .collect();
    Ok(dataset.batch_at(&indices, k))
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

/// Serialize to UPSV bytes, with the action block when `actions` is given.
pub fn encode(dataset: &VideoDataset, actions: Option<&ActionLog>) -> Vec<u8> {
    let s = dataset.shape;
    let mut buf = Vec::with_capacity(HEADER_LEN + dataset.frames.len() + 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&[VERSION, DTYPE_U8, 0, 0]);
    for v in [dataset.n_frames(), s.channels, s.height, s.width] {
        put_u32(&mut buf, v as u32);
    }
    put_u32(&mut buf, dataset.episode_starts.len() as u32);
    for &e in &dataset.episode_starts {
        put_u32(&mut buf, e);
    }
    buf.extend_from_slice(&dataset.frames);
    if let Some(log) = actions {
        put_u32(&mut buf, log.actions.len() as u32);
        buf.extend_from_slice(&log.actions);
    }
    buf
}

pub fn write_dataset(path: &Path, dataset: &VideoDataset) -> Result<()> {
    std::fs::write(path, encode(dataset, None)).map_err(|e| Error::io(path, e))
}

/// Write the held-out companion: the full container plus the action block.
pub fn write_dataset_with_actions(path: &Path, dataset: &VideoDataset, log: &ActionLog) -> Result<()> {
    if log.actions.len() != dataset.n_frames() {
        return Err(Error::Data(format!(
            "action log has {} records for {} frames",
            log.actions.len(),
            dataset.n_frames()
        )));
    }
    std::fs::write(path, encode(dataset, Some(log))).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(self.fail(format!(
                "truncated {what}: expected {n} bytes, found {available}"
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn decode(path: &Path, bytes: &[u8]) -> Result<(VideoDataset, Option<ActionLog>)> {
    let mut cur = Cursor { path, bytes, pos: 0 };
    if cur.take(4, "magic")? != MAGIC {
        cur.pos = 0;
        return Err(cur.fail("bad magic, expected \"UPSV\""));
    }
    let head = cur.take(4, "version/dtype")?;
    if head[0] != VERSION {
        cur.pos = 4;
        return Err(cur.fail(format!("unsupported version {}", head[0])));
    }
    if head[1] != DTYPE_U8 {
        cur.pos = 5;
        return Err(cur.fail(format!("unsupported dtype code {}", head[1])));
    }
    if head[2] != 0 || head[3] != 0 {
        cur.pos = 6;
        return Err(cur.fail("reserved bytes must be zero"));
    }
    let n_frames = cur.u32("n_frames")? as usize;
    if n_frames == 0 {
        cur.pos = 8;
        return Err(cur.fail("header declares zero frames"));
    }
    let channels = cur.u32("channels")? as usize;
    let height = cur.u32("height")? as usize;
    let width = cur.u32("width")? as usize;
    let shape = ObsShape {
        channels,
        height,
        width,
    };
    if shape.is_empty() {
        return Err(cur.fail("zero-sized observation shape"));
    }
    let n_episodes = cur.u32("n_episodes")? as usize;
    let ep_bytes = cur.take(
        n_episodes
            .checked_mul(4)
            .ok_or_else(|| cur.fail("episode count overflows"))?,
        "episode table",
    )?;
    let episode_starts: Vec<u32> = ep_bytes
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let frame_len = n_frames
        .checked_mul(shape.len())
        .ok_or_else(|| cur.fail("frame block size overflows"))?;
    let frames_at = cur.pos;
    let frames = cur.take(frame_len, "frame block")?.to_vec();
    let actions = if cur.pos < bytes.len() {
        let n = cur.u32("action count")? as usize;
        let acts = cur.take(n, "action block")?.to_vec();
        if cur.pos != bytes.len() {
            return Err(cur.fail(format!(
                "{} trailing bytes after action block",
                bytes.len() - cur.pos
            )));
        }
        if n != n_frames {
            return Err(cur.fail(format!("{n} action records for {n_frames} frames")));
        }
        if let Some(bad) = acts
            .iter()
            .find(|&&a| a != NO_ACTION && a as usize >= N_ACTIONS)
        {
            return Err(cur.fail(format!("action {bad} out of range")));
        }
        Some(ActionLog { actions: acts })
    } else {
        None
    };
    let dataset = VideoDataset::new(shape, frames, episode_starts, None).map_err(|e| {
        Error::Format {
            path: path.to_path_buf(),
            offset: frames_at as u64,
            reason: e.to_string(),
        }
    })?;
    Ok((dataset, actions))
}

pub fn read_dataset(path: &Path) -> Result<VideoDataset> {
    Ok(read_dataset_with_actions(path)?.0)
}

pub fn read_dataset_with_actions(path: &Path) -> Result<(VideoDataset, Option<ActionLog>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(path, &bytes)
}

/// One environment transition with the ground-truth action taken.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transition {
    pub o_t: Vec<u8>,
    pub action: u8,
    pub o_t1: Vec<u8>,
    /// `k` frames before `o_t`, oldest first, zero-padded at episode start.
    pub o_hist: Vec<u8>,
    pub episode_id: u64,
}

/// Fixed-capacity FIFO of transitions; oldest records are evicted first.
#[derive(Debug, Clone)]
pub struct InteractionBuffer {
    shape: ObsShape,
    history: usize,
    capacity: usize,
    records: VecDeque<Transition>,
}

impl InteractionBuffer {
    pub fn new(shape: ObsShape, history: usize, capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Data("buffer capacity must be positive".into()));
        }
        Ok(InteractionBuffer {
            shape,
            history,
            capacity,
            records: VecDeque::with_capacity(capacity.min(1 << 16)),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn shape(&self) -> ObsShape {
        self.shape
    }

    pub fn history(&self) -> usize {
        self.history
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.records.get(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.records.iter()
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        if t.action as usize >= N_ACTIONS {
            return Err(Error::Data(format!("action {} out of range", t.action)));
        }
        let len = self.shape.len();
        if t.o_t.len() != len || t.o_t1.len() != len || t.o_hist.len() != len * self.history {
            return Err(Error::Shape("transition does not match buffer shape".into()));
        }
        if self.records.len() == self.capacity {
            self.records.pop_front();
        }
        self.records.push_back(t);
        Ok(())
    }

    /// Deterministic batch over explicit record indices.
    pub fn batch_at<T: Real>(&self, indices: &[usize]) -> TransitionBatch<T> {
        let len = self.shape.len();
        let n = indices.len();
        let k = self.history;
        let mut t = Vec::with_capacity(n * len);
        let mut t1 = Vec::with_capacity(n * len);
        let mut hist = Vec::with_capacity(n * k * len);
        let mut actions = Vec::with_capacity(n);
        for &i in indices {
            let r = &self.records[i];
            t.extend_from_slice(&r.o_t);
            t1.extend_from_slice(&r.o_t1);
            hist.extend_from_slice(&r.o_hist);
            actions.push(r.action as usize);
        }
        TransitionBatch {
            pairs: PairBatch {
                o_t: to_array4(self.shape, n, &t),
                o_t1: to_array4(self.shape, n, &t1),
                o_hist: to_array5(self.shape, n, k, &hist),
                indices: indices.to_vec(),
            },
            actions,
        }
    }
}

/// Uniform sample of `m` transitions, with replacement.
pub fn sample_transitions<T: Real, R: Rng + ?Sized>(
    buffer: &InteractionBuffer,
    m: usize,
    rng: &mut R,
) -> Result<TransitionBatch<T>> {
    let size = buffer.len();
    if size == 0 {
        return Err(Error::Data("interaction buffer is empty".into()));
    }
    if m == 0 {
        return Err(Error::Data("batch size must be at least 1".into()));
    }
    let indices: Vec<usize> = (0..m).map(|_| rng.random_range(0..size)).collect();
    Ok(buffer.batch_at(&indices))
}
