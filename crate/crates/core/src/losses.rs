//! The four training objectives and the random-shift augmentation.
//!
//! Each loss returns its value and a full gradient bundle. Gradients are
//! written only where the loss is allowed to train:
//!
//! | loss | trains |
//! |------|--------|
//! | VSC  | `f`, `u`, `w` |
//! | LFR  | `g`, `codebook`, `world` |
//! | GAP  | `h` |
//! | UPC  | `g_pi` |
//!
//! Every other component, including `f_ema`, receives an all-zero gradient
//! because the backward pass never reaches it.

use std::collections::BTreeMap;

use ndarray::{s, Array2, Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::databank::{PairBatch, TransitionBatch};
use crate::envsuite::Observation;
use crate::error::{Error, Result};
use crate::nets::{argmax, quantize, ModelBundle, Quantized, Real};

/// Default commitment weight; the value in use is `ArchConfig::vq_beta`.
pub const VQ_BETA: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LossName {
    #[serde(rename = "VSC")]
    Vsc,
    #[serde(rename = "LFR")]
    Lfr,
    #[serde(rename = "GAP")]
    Gap,
    #[serde(rename = "UPC")]
    Upc,
}

impl LossName {
    pub fn as_str(self) -> &'static str {
        match self {
            LossName::Vsc => "VSC",
            LossName::Lfr => "LFR",
            LossName::Gap => "GAP",
            LossName::Upc => "UPC",
        }
    }

    /// Fixed aux keys reported by each loss.
    pub fn aux_keys(self) -> &'static [&'static str] {
        match self {
            LossName::Vsc => &["positive_similarity", "temperature", "contrast_accuracy"],
            LossName::Lfr => &["reconstruction", "vq_codebook", "vq_commit", "codebook_usage"],
            LossName::Gap => &["action_accuracy"],
            LossName::Upc => &["code_agreement"],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub name: LossName,
    pub value: f64,
    pub aux: BTreeMap<String, f64>,
}

impl LossReport {
    fn new(name: LossName, value: f64, aux: &[(&str, f64)]) -> Result<Self> {
        let aux: BTreeMap<String, f64> = aux.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        if !value.is_finite() {
            return Err(Error::Divergence {
                phase: name.as_str().to_string(),
                step: 0,
                detail: format!("non-finite loss {value}; aux {aux:?}"),
            });
        }
        Ok(LossReport { name, value, aux })
    }

    pub fn aux(&self, key: &str) -> f64 {
        self.aux.get(key).copied().unwrap_or(f64::NAN)
    }
}

fn to_f64<T: Real>(v: T) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

/// Translate every channel by `(dr, dc)` with zero fill.
fn translate<T: Copy + Default>(src: &[T], dst: &mut [T], h: usize, w: usize, dr: isize, dc: isize) {
    let planes = src.len() / (h * w);
    dst.iter_mut().for_each(|v| *v = T::default());
    for p in 0..planes {
        for r in 0..h {
            let sr = r as isize - dr;
            if sr < 0 || sr >= h as isize {
                continue;
            }
            for c in 0..w {
                let sc = c as isize - dc;
                if sc < 0 || sc >= w as isize {
                    continue;
                }
                dst[(p * h + r) * w + c] = src[(p * h + sr as usize) * w + sc as usize];
            }
        }
    }
}

fn check_shift(s: usize, h: usize, w: usize) -> Result<()> {
    if s >= h.min(w) {
        return Err(Error::config(
            "shift",
            format!("shift {s} must be smaller than min(H, W) = {}", h.min(w)),
        ));
    }
    Ok(())
}

fn draw_offset<R: Rng + ?Sized>(rng: &mut R, s: usize) -> (isize, isize) {
    let s = s as i64;
    (
        rng.random_range(-s..=s) as isize,
        rng.random_range(-s..=s) as isize,
    )
}

/// Translate the whole observation by an offset drawn uniformly from `[-s, s]^2`.
pub fn random_shift<R: Rng + ?Sized>(o: &Observation, s: usize, rng: &mut R) -> Result<Observation> {
    check_shift(s, o.shape.height, o.shape.width)?;
    if s == 0 {
        return Ok(o.clone());
    }
    let (dr, dc) = draw_offset(rng, s);
    let mut data = vec![0u8; o.data.len()];
    translate(&o.data, &mut data, o.shape.height, o.shape.width, dr, dc);
    Ok(Observation {
        shape: o.shape,
        data,
    })
}

/// Independent random shift per sample of a `(N, C, H, W)` batch.
pub fn shift_batch<T: Real, R: Rng + ?Sized>(x: &Array4<T>, s: usize, rng: &mut R) -> Result<Array4<T>> {
    let (n, c, h, w) = x.dim();
    check_shift(s, h, w)?;
    if s == 0 {
        return Ok(x.clone());
    }
    let src = x.as_standard_layout();
    let src = src.as_slice().expect("standard layout");
    let mut out = vec![T::zero(); src.len()];
    let len = c * h * w;
    for i in 0..n {
        let (dr, dc) = draw_offset(rng, s);
        translate(&src[i * len..(i + 1) * len], &mut out[i * len..(i + 1) * len], h, w, dr, dc);
    }
    Ok(Array4::from_shape_vec((n, c, h, w), out).expect("shift shape"))
}

/// `q / sqrt(|q|^2 + eps^2)` per row, plus the norms.
fn normalize_rows<T: Real>(q: &Array2<T>) -> (Array2<T>, Vec<T>) {
    let eps = T::lit(crate::nets::COS_EPS);
    let mut out = q.clone();
    let mut norms = Vec::with_capacity(q.nrows());
    for mut row in out.outer_iter_mut() {
        let n = (row.dot(&row) + eps * eps).sqrt();
        row.mapv_inplace(|v| v / n);
        norms.push(n);
    }
    (out, norms)
}

/// Backward of [`normalize_rows`]: `dq = dq~/n - q (q . dq~) / n^3`.
fn normalize_rows_backward<T: Real>(q: &Array2<T>, norms: &[T], d_unit: &Array2<T>) -> Array2<T> {
    let mut dq = Array2::zeros(q.raw_dim());
    for i in 0..q.nrows() {
        let n = norms[i];
        let qi = q.row(i);
        let di = d_unit.row(i);
        let proj = qi.dot(&di) / (n * n * n);
        dq.row_mut(i)
            .assign(&(&di.mapv(|v| v / n) - &qi.mapv(|v| v * proj)));
    }
    dq
}

/// Row-wise cross-entropy of `logits` against integer targets; returns the mean
/// loss and `d loss / d logits`.
fn cross_entropy<T: Real>(logits: &Array2<T>, targets: &[usize]) -> (T, Array2<T>, f64) {
    let n = logits.nrows();
    let nt = T::from_usize(n).expect("batch size");
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut total = T::zero();
    let mut correct = 0usize;
    for (i, row) in logits.outer_iter().enumerate() {
        let m = row.fold(T::neg_infinity(), |a, &b| a.max(b));
        let z: T = row.iter().map(|&v| (v - m).exp()).sum();
        let lse = m + z.ln();
        total = total + lse - row[targets[i]];
        for (j, &v) in row.iter().enumerate() {
            let p = (v - lse).exp();
            let onehot = if j == targets[i] { T::one() } else { T::zero() };
            grad[[i, j]] = (p - onehot) / nt;
        }
        if argmax(row) == targets[i] {
            correct += 1;
        }
    }
    (total / nt, grad, correct as f64 / n as f64)
}

/// Visual shift contrast: InfoNCE between `u(f(shift(o)))` and `f_ema(shift'(o))`
/// over the batch, logits `exp(w) * cos`. `f_ema` receives no gradient.
pub fn loss_vsc<T: Real, R: Rng + ?Sized>(
    bundle: &ModelBundle<T>,
    obs: &Array4<T>,
    s: usize,
    rng: &mut R,
) -> Result<(LossReport, ModelBundle<T>)> {
    let n = obs.shape()[0];
    if n < 2 {
        return Err(Error::Data("VSC needs at least 2 observations for negatives".into()));
    }
    let anchors_in = shift_batch(obs, s, rng)?;
    let targets_in = shift_batch(obs, s, rng)?;
    let (anchor, f_cache) = bundle.f.forward_train(&anchors_in)?;
    let target = bundle.f_ema.encode(&targets_in)?;
    let (q, u_cache) = bundle.u.forward_train(&anchor)?;
    let (q_unit, q_norms) = normalize_rows(&q);
    let (t_unit, _) = normalize_rows(&target);
    let cos = q_unit.dot(&t_unit.t());
    let tau = bundle.w.get().exp();
    let logits = cos.mapv(|c| tau * c);
    let labels: Vec<usize> = (0..n).collect();
    let (loss, g_logits, acc) = cross_entropy(&logits, &labels);

    let mut grads = bundle.zeros_like();
    let dw = (&g_logits * &logits).sum();
    grads.w.set(dw);
    let d_cos = g_logits.mapv(|g| g * tau);
    let d_q_unit = d_cos.dot(&t_unit);
    let d_q = normalize_rows_backward(&q, &q_norms, &d_q_unit);
    let d_anchor = bundle
        .u
        .backward(&u_cache, &d_q, &mut grads.u, true)
        .expect("dx requested");
    bundle.f.backward(&f_cache, &d_anchor, &mut grads.f);

    let pos = (0..n).map(|i| to_f64(cos[[i, i]])).sum::<f64>() / n as f64;
    let report = LossReport::new(
        LossName::Vsc,
        to_f64(loss),
        &[
            ("positive_similarity", pos),
            ("temperature", to_f64(tau)),
            ("contrast_accuracy", acc),
        ],
    )?;
    Ok((report, grads))
}

/// Latent future reconstruction on precomputed (gradient-stopped) features.
///
/// `value = mean |f(o_t1) - G_w(f(o_t), z_q)|^2 + mean |sg(pre) - code|^2
///          + beta * mean |pre - sg(code)|^2`, with `z_q` passed straight
/// through to `pre`.
pub fn lfr_from_features<T: Real>(
    bundle: &ModelBundle<T>,
    feat_t: &Array2<T>,
    feat_t1: &Array2<T>,
    feat_hist: &Array2<T>,
) -> Result<(LossReport, ModelBundle<T>)> {
    let n = feat_t.nrows();
    let nt = T::from_usize(n).expect("batch size");
    let g_in = bundle.latent_input(feat_t, feat_t1, feat_hist)?;
    let (pre, g_cache) = bundle.g.forward_train(&g_in)?;
    let q = quantize(&bundle.codebook.codes, &pre)?;
    let w_in = ndarray::concatenate(Axis(1), &[feat_t.view(), q.vectors.view()])
        .map_err(|e| Error::Shape(e.to_string()))?;
    let (pred, w_cache) = bundle.world.forward_train(&w_in)?;

    let diff = &pred - feat_t1;
    let recon = diff.iter().map(|&v| v * v).sum::<T>() / nt;
    let two = T::lit(2.0);
    let d_pred = diff.mapv(|v| two * v / nt);

    let mut grads = bundle.zeros_like();
    let d_w_in = bundle
        .world
        .backward(&w_cache, &d_pred, &mut grads.world, true)
        .expect("dx requested");
    let d_f = bundle.arch.d_f;
    // straight-through: dL/dpre gets dL/dz_q unchanged
    let mut d_pre = d_w_in.slice(s![.., d_f..]).to_owned();

    let gap = &pre - &q.vectors;
    let sq = gap.iter().map(|&v| v * v).sum::<T>() / nt;
    let beta = T::lit(bundle.arch.vq_beta);
    d_pre.zip_mut_with(&gap, |d, &g| *d = *d + beta * two * g / nt);
    for (i, &k) in q.indices.iter().enumerate() {
        let mut row = grads.codebook.codes.row_mut(k);
        row.zip_mut_with(&gap.row(i), |c, &g| *c = *c - two * g / nt);
    }
    bundle.g.backward(&g_cache, &d_pre, &mut grads.g, false);

    let total = recon + sq + beta * sq;
    let report = LossReport::new(
        LossName::Lfr,
        to_f64(total),
        &[
            ("reconstruction", to_f64(recon)),
            ("vq_codebook", to_f64(sq)),
            ("vq_commit", to_f64(beta * sq)),
            ("codebook_usage", q.usage(bundle.arch.codebook_size)),
        ],
    )?;
    Ok((report, grads))
}

/// Encode a pair batch with `f` (no gradient): `(feat_t, feat_t1, feat_hist)`.
pub fn encode_pairs<T: Real>(
    bundle: &ModelBundle<T>,
    batch: &PairBatch<T>,
) -> Result<(Array2<T>, Array2<T>, Array2<T>)> {
    Ok((
        bundle.encode(&batch.o_t)?,
        bundle.encode(&batch.o_t1)?,
        bundle.encode_history(&bundle.f, &batch.o_hist)?,
    ))
}

/// Latent future reconstruction. Both `f` branches are gradient-stopped.
pub fn loss_lfr<T: Real>(bundle: &ModelBundle<T>, batch: &PairBatch<T>) -> Result<(LossReport, ModelBundle<T>)> {
    let (ft, ft1, fh) = encode_pairs(bundle, batch)?;
    lfr_from_features(bundle, &ft, &ft1, &fh)
}

/// Ground-truth action prediction on quantized latents; trains `h` only.
pub fn gap_from_latents<T: Real>(
    bundle: &ModelBundle<T>,
    z_q: &Array2<T>,
    actions: &[usize],
) -> Result<(LossReport, ModelBundle<T>)> {
    if let Some(&bad) = actions.iter().find(|&&a| a >= bundle.n_actions) {
        return Err(Error::Data(format!(
            "action {bad} out of range [0, {})",
            bundle.n_actions
        )));
    }
    if actions.len() != z_q.nrows() {
        return Err(Error::Shape("actions not aligned with latents".into()));
    }
    let (logits, cache) = bundle.h.forward_train(z_q)?;
    let (loss, d_logits, acc) = cross_entropy(&logits, actions);
    let mut grads = bundle.zeros_like();
    bundle.h.backward(&cache, &d_logits, &mut grads.h, false);
    let report = LossReport::new(LossName::Gap, to_f64(loss), &[("action_accuracy", acc)])?;
    Ok((report, grads))
}

/// Quantized labeling latents for a pair batch (fully gradient-stopped).
pub fn label_latents<T: Real>(bundle: &ModelBundle<T>, batch: &PairBatch<T>) -> Result<Quantized<T>> {
    let (ft, ft1, fh) = encode_pairs(bundle, batch)?;
    let pre = bundle.predict_latent(&ft, &ft1, &fh)?;
    bundle.quantize(&pre)
}

/// Ground-truth action prediction: cross-entropy of `h(z_q)` against the logged
/// action. Gradient stops at `g`'s input and `g` itself is frozen.
pub fn loss_gap<T: Real>(
    bundle: &ModelBundle<T>,
    batch: &TransitionBatch<T>,
) -> Result<(LossReport, ModelBundle<T>)> {
    if let Some(&bad) = batch.actions.iter().find(|&&a| a >= bundle.n_actions) {
        return Err(Error::Data(format!("action {bad} out of range")));
    }
    let q = label_latents(bundle, &batch.pairs)?;
    gap_from_latents(bundle, &q.vectors, &batch.actions)
}

/// Policy cloning on precomputed `g_pi` inputs and quantized targets.
pub fn upc_from_features<T: Real>(
    bundle: &ModelBundle<T>,
    policy_in: &Array2<T>,
    targets: &Quantized<T>,
) -> Result<(LossReport, ModelBundle<T>)> {
    let n = policy_in.nrows();
    let nt = T::from_usize(n).expect("batch size");
    let (pred, cache) = bundle.g_pi.forward_train(policy_in)?;
    let diff = &pred - &targets.vectors;
    let loss = diff.iter().map(|&v| v * v).sum::<T>() / nt;
    let two = T::lit(2.0);
    let d_pred = diff.mapv(|v| two * v / nt);
    let mut grads = bundle.zeros_like();
    bundle.g_pi.backward(&cache, &d_pred, &mut grads.g_pi, false);
    let pq = bundle.quantize(&pred)?;
    let agree = pq
        .indices
        .iter()
        .zip(&targets.indices)
        .filter(|(a, b)| a == b)
        .count() as f64
        / n as f64;
    let report = LossReport::new(LossName::Upc, to_f64(loss), &[("code_agreement", agree)])?;
    Ok((report, grads))
}

/// Unsupervised policy cloning: `mean |g_pi(f(o_t), f(hist)) - z^v|^2` where
/// `z^v` is V's quantized latent. Gradient stops before `f`.
pub fn loss_upc<T: Real>(bundle: &ModelBundle<T>, batch: &PairBatch<T>) -> Result<(LossReport, ModelBundle<T>)> {
    let (ft, ft1, fh) = encode_pairs(bundle, batch)?;
    let pre = bundle.predict_latent(&ft, &ft1, &fh)?;
    let targets = bundle.quantize(&pre)?;
    let policy_in = bundle.policy_input(&ft, &fh)?;
    upc_from_features(bundle, &policy_in, &targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envsuite::{EnvSpec, ObsShape};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn obs(shape: ObsShape) -> Observation {
        let data = (0..shape.len()).map(|i| (i % 251) as u8).collect();
        Observation { shape, data }
    }

    #[test]
    fn zero_shift_is_identity() {
        let o = obs(EnvSpec::procgrid(8).obs_shape());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(random_shift(&o, 0, &mut rng).unwrap(), o);
    }

    #[test]
    fn shift_offsets_cover_the_nine_cell_square() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..2000 {
            let (dr, dc) = draw_offset(&mut rng, 1);
            assert!(dr.abs() <= 1 && dc.abs() <= 1);
            seen.insert((dr, dc));
        }
        assert_eq!(seen.len(), 9);
    }

    #[test]
    fn shift_keeps_at_most_one_agent() {
        let spec = EnvSpec::procgrid(8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for seed in 0..40 {
            let level = crate::envsuite::make_env(&spec, seed).unwrap();
            let o = level.observe();
            let sh = random_shift(&o, 2, &mut rng).unwrap();
            let agents = sh.channel(0).iter().filter(|&&v| v == 255).count();
            assert!(agents <= 1);
        }
        assert!(random_shift(&obs(spec.obs_shape()), 8, &mut rng).is_err());
    }

    #[test]
    fn translate_moves_content() {
        let src = [1u8, 2, 3, 4];
        let mut dst = [9u8; 4];
        translate(&src, &mut dst, 2, 2, 0, 1);
        assert_eq!(dst, [0, 1, 0, 3]);
    }

    #[test]
    fn cross_entropy_uniform_is_ln_k() {
        let logits = Array2::<f64>::zeros((4, 5));
        let (l, _, _) = cross_entropy(&logits, &[0, 1, 2, 3]);
        assert!((l - 5f64.ln()).abs() < 1e-12);
        let confident = array![[0.0f64, 800.0, 0.0]];
        let (l, _, acc) = cross_entropy(&confident, &[1]);
        assert_eq!(l, 0.0);
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn report_rejects_non_finite() {
        assert!(LossReport::new(LossName::Gap, f64::NAN, &[]).is_err());
    }
}
