use ndarray::{concatenate, Array1, Array2, Array4, Array5, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{copy_params, Encoder, Mlp, Params, Real};
use crate::databank::PairBatch;
use crate::envsuite::ObsShape;
use crate::error::{Error, Result};

/// Network widths and VQ sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub conv_channels: Vec<usize>,
    pub conv_strides: Vec<usize>,
    pub kernel: usize,
    pub d_f: usize,
    pub d_z: usize,
    pub codebook_size: usize,
    pub mlp_hidden: usize,
    pub world_hidden: usize,
    /// Number of history frames fed to `g` and `g_pi`.
    pub history: usize,
    /// Initial value of the contrastive log-temperature `w` (`tau = exp(w)`).
    pub init_log_temperature: f64,
    /// Commitment weight on `|pre - sg(code)|^2`.
    pub vq_beta: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            conv_channels: vec![16, 32, 32],
            conv_strides: vec![1, 2, 2],
            kernel: 3,
            d_f: 128,
            d_z: 16,
            codebook_size: 16,
            mlp_hidden: 128,
            world_hidden: 256,
            history: 1,
            init_log_temperature: 10f64.ln(),
            vq_beta: crate::losses::VQ_BETA,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self, n_actions: usize) -> Result<()> {
        let positive = [
            ("arch.kernel", self.kernel),
            ("arch.d_f", self.d_f),
            ("arch.d_z", self.d_z),
            ("arch.mlp_hidden", self.mlp_hidden),
            ("arch.world_hidden", self.world_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(name, "must be positive"));
            }
        }
        if self.conv_channels.len() != self.conv_strides.len() {
            return Err(Error::config(
                "arch.conv_strides",
                "must have one entry per conv_channels entry",
            ));
        }
        if self.conv_channels.iter().chain(&self.conv_strides).any(|&v| v == 0) {
            return Err(Error::config("arch.conv_channels", "entries must be positive"));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::config("arch.kernel", "must be odd"));
        }
        if self.codebook_size < n_actions {
            return Err(Error::config(
                "arch.codebook_size",
                format!("must be at least n_actions = {n_actions}"),
            ));
        }
        if !(self.vq_beta.is_finite() && self.vq_beta >= 0.0) {
            return Err(Error::config("arch.vq_beta", "must be finite and non-negative"));
        }
        if !self.init_log_temperature.is_finite() {
            return Err(Error::config("arch.init_log_temperature", "must be finite"));
        }
        Ok(())
    }
}

/// VQ codebook, one code per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook<T> {
    pub codes: Array2<T>,
}

impl<T: Real> Params<T> for Codebook<T> {
    fn tensors(&self) -> Vec<&[T]> {
        vec![self.codes.as_slice().expect("standard layout")]
    }
    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        vec![self.codes.as_slice_mut().expect("standard layout")]
    }
}

/// The single trainable contrast scalar `w`; scores are scaled by `exp(w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogTemperature<T> {
    pub value: Array1<T>,
}

impl<T: Real> LogTemperature<T> {
    pub fn get(&self) -> T {
        self.value[0]
    }
    pub fn set(&mut self, v: T) {
        self.value[0] = v;
    }
}

impl<T: Real> Params<T> for LogTemperature<T> {
    fn tensors(&self) -> Vec<&[T]> {
        vec![self.value.as_slice().expect("standard layout")]
    }
    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        vec![self.value.as_slice_mut().expect("standard layout")]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    F,
    FEma,
    G,
    Codebook,
    H,
    U,
    W,
    World,
    GPi,
}

impl Component {
    pub const ALL: [Component; 9] = [
        Component::F,
        Component::FEma,
        Component::G,
        Component::Codebook,
        Component::H,
        Component::U,
        Component::W,
        Component::World,
        Component::GPi,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::F => "f",
            Component::FEma => "f_ema",
            Component::G => "g",
            Component::Codebook => "codebook",
            Component::H => "h",
            Component::U => "u",
            Component::W => "w",
            Component::World => "world",
            Component::GPi => "g_pi",
        }
    }
}

/// Every trainable piece. `f` and `h` exist once and serve both the labeling
/// model `V = h . quantize . g . f` and the policy `h . quantize . g_pi . f`.
/// The same type doubles as a gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle<T> {
    pub arch: ArchConfig,
    pub obs_shape: ObsShape,
    pub n_actions: usize,
    pub f: Encoder<T>,
    pub f_ema: Encoder<T>,
    pub g: Mlp<T>,
    pub codebook: Codebook<T>,
    pub h: Mlp<T>,
    pub u: Mlp<T>,
    pub w: LogTemperature<T>,
    pub world: Mlp<T>,
    pub g_pi: Mlp<T>,
}

/// Batched nearest-code assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct Quantized<T> {
    pub indices: Vec<usize>,
    pub vectors: Array2<T>,
}

/// One latent action: pre-quantization vector, its code index, and the code.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentAction<T> {
    pub pre: Vec<T>,
    pub index: usize,
    pub quantized: Vec<T>,
}

impl<T: Real> Quantized<T> {
    pub fn latent(&self, i: usize, pre: &Array2<T>) -> LatentAction<T> {
        LatentAction {
            pre: pre.row(i).to_vec(),
            index: self.indices[i],
            quantized: self.vectors.row(i).to_vec(),
        }
    }

    /// Fraction of the `k` codes selected at least once.
    pub fn usage(&self, k: usize) -> f64 {
        let mut seen = vec![false; k];
        self.indices.iter().for_each(|&i| seen[i] = true);
        seen.iter().filter(|&&s| s).count() as f64 / k as f64
    }
}

/// Nearest codebook row by squared Euclidean distance, ties to the lowest index.
pub fn quantize<T: Real>(codebook: &Array2<T>, pre: &Array2<T>) -> Result<Quantized<T>> {
    if codebook.nrows() == 0 {
        return Err(Error::Shape("codebook is empty".into()));
    }
    if pre.ncols() != codebook.ncols() {
        return Err(Error::Shape(format!(
            "latent has {} dims, codebook {}",
            pre.ncols(),
            codebook.ncols()
        )));
    }
    if pre.iter().any(|v| !v.is_finite()) {
        // Latents come from trained networks, so this is a numerical blow-up.
        return Err(Error::Divergence {
            phase: "quantize".into(),
            step: 0,
            detail: "non-finite latent passed to quantize".into(),
        });
    }
    let mut indices = Vec::with_capacity(pre.nrows());
    let mut vectors = Array2::zeros(pre.raw_dim());
    for (r, z) in pre.outer_iter().enumerate() {
        let mut best = 0;
        let mut best_d = T::infinity();
        for (k, code) in codebook.outer_iter().enumerate() {
            let d = z
                .iter()
                .zip(code.iter())
                .fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b));
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        indices.push(best);
        vectors.row_mut(r).assign(&codebook.row(best));
    }
    Ok(Quantized { indices, vectors })
}

/// Index of the largest entry, ties to the lowest index.
pub fn argmax<T: Real>(row: ArrayView1<T>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn softmax_rows<T: Real>(logits: &Array2<T>) -> Array2<T> {
    let mut out = logits.clone();
    for mut row in out.outer_iter_mut() {
        let m = row.fold(T::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

pub const COS_EPS: f64 = 1e-8;

/// Norm used for cosine similarity: `sqrt(|a|^2 + eps^2)`, finite and smooth at 0.
pub(crate) fn soft_norm<T: Real>(a: ArrayView1<T>) -> T {
    let eps = T::lit(COS_EPS);
    (a.dot(&a) + eps * eps).sqrt()
}

pub fn cosine<T: Real>(a: ArrayView1<T>, b: ArrayView1<T>) -> T {
    a.dot(&b) / (soft_norm(a) * soft_norm(b))
}

/// `exp(w) * cos(u(anchor), target)` for single feature vectors.
pub fn contrast_score<T: Real>(
    w: &LogTemperature<T>,
    u: &Mlp<T>,
    anchor: &[T],
    target: &[T],
) -> Result<T> {
    if anchor.len() != target.len() {
        return Err(Error::Shape("anchor and target dimensions differ".into()));
    }
    let a = Array2::from_shape_vec((1, anchor.len()), anchor.to_vec()).expect("row");
    let ua = u.forward(&a)?;
    let t = ArrayView1::from(target);
    Ok(w.get().exp() * cosine(ua.row(0), t))
}

/// `p' <- (1 - m) p' + m p` for every parameter.
pub fn ema_update<T: Real>(f_ema: &mut Encoder<T>, f: &Encoder<T>, m: T) -> Result<()> {
    if !(m >= T::zero() && m <= T::one()) {
        return Err(Error::config("ema_m", "momentum must lie in [0, 1]"));
    }
    let src = f.tensors();
    let dst = f_ema.tensors_mut();
    if src.len() != dst.len() || src.iter().zip(&dst).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::Shape("EMA encoder shape differs from f".into()));
    }
    let keep = T::one() - m;
    for (d, s) in dst.into_iter().zip(src) {
        d.iter_mut()
            .zip(s.iter())
            .for_each(|(pd, &ps)| *pd = keep * *pd + m * ps);
    }
    Ok(())
}

impl<T: Real> ModelBundle<T> {
    pub fn new(arch: &ArchConfig, obs_shape: ObsShape, n_actions: usize, seed: u64) -> Result<Self> {
        arch.validate(n_actions)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = Encoder::new(
            &mut rng,
            obs_shape.channels,
            obs_shape.height,
            obs_shape.width,
            &arch.conv_channels,
            &arch.conv_strides,
            arch.kernel,
            arch.d_f,
        );
        let (d_f, d_z, hid, k) = (arch.d_f, arch.d_z, arch.mlp_hidden, arch.history);
        let g = Mlp::new(&mut rng, &[(k + 2) * d_f, hid, d_z], true);
        let bound = 1.0 / arch.codebook_size as f64;
        let codes = Array2::from_shape_fn((arch.codebook_size, d_z), |_| {
            T::lit(rand::Rng::random_range(&mut rng, -bound..=bound))
        });
        let h = Mlp::new(&mut rng, &[d_z, hid, n_actions], false);
        let u = Mlp::new(&mut rng, &[d_f, hid, d_f], false);
        let world = Mlp::new(
            &mut rng,
            &[d_f + d_z, arch.world_hidden, arch.world_hidden, d_f],
            true,
        );
        let g_pi = Mlp::new(&mut rng, &[(k + 1) * d_f, hid, d_z], false);
        Ok(ModelBundle {
            arch: arch.clone(),
            obs_shape,
            n_actions,
            f_ema: f.clone(),
            f,
            g,
            codebook: Codebook { codes },
            h,
            u,
            w: LogTemperature {
                value: Array1::from_elem(1, T::lit(arch.init_log_temperature)),
            },
            world,
            g_pi,
        })
    }

    /// Same shapes, all zeros: a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        ModelBundle {
            arch: self.arch.clone(),
            obs_shape: self.obs_shape,
            n_actions: self.n_actions,
            f: self.f.zeros_like(),
            f_ema: self.f_ema.zeros_like(),
            g: self.g.zeros_like(),
            codebook: Codebook {
                codes: Array2::zeros(self.codebook.codes.raw_dim()),
            },
            h: self.h.zeros_like(),
            u: self.u.zeros_like(),
            w: LogTemperature {
                value: Array1::zeros(1),
            },
            world: self.world.zeros_like(),
            g_pi: self.g_pi.zeros_like(),
        }
    }

    pub fn component(&self, c: Component) -> &dyn Params<T> {
        match c {
            Component::F => &self.f,
            Component::FEma => &self.f_ema,
            Component::G => &self.g,
            Component::Codebook => &self.codebook,
            Component::H => &self.h,
            Component::U => &self.u,
            Component::W => &self.w,
            Component::World => &self.world,
            Component::GPi => &self.g_pi,
        }
    }

    pub fn component_mut(&mut self, c: Component) -> &mut dyn Params<T> {
        match c {
            Component::F => &mut self.f,
            Component::FEma => &mut self.f_ema,
            Component::G => &mut self.g,
            Component::Codebook => &mut self.codebook,
            Component::H => &mut self.h,
            Component::U => &mut self.u,
            Component::W => &mut self.w,
            Component::World => &mut self.world,
            Component::GPi => &mut self.g_pi,
        }
    }

    /// Overwrite `dst` component with this bundle's values.
    pub fn copy_component_into(&self, c: Component, dst: &mut ModelBundle<T>) {
        copy_params(dst.component_mut(c), self.component(c));
    }

    pub fn set_exec(&mut self, mode: crate::exec::ExecMode) {
        self.f.exec = mode;
        self.f_ema.exec = mode;
    }

    pub fn encode(&self, x: &Array4<T>) -> Result<Array2<T>> {
        self.f.encode(x)
    }

    /// History features `(N, k*d_f)`, frame `j` of sample `n` at columns `j*d_f..`.
    pub fn encode_history(&self, encoder: &Encoder<T>, hist: &Array5<T>) -> Result<Array2<T>> {
        let (n, k, c, h, w) = hist.dim();
        let d_f = encoder.d_f();
        if k == 0 {
            return Ok(Array2::zeros((n, 0)));
        }
        let flat = hist
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((n * k, c, h, w))
            .expect("history reshape");
        let feats = encoder.encode(&flat)?;
        Ok(feats
            .into_shape_with_order((n, k * d_f))
            .expect("history features"))
    }

    fn check_feat(&self, x: &Array2<T>, what: &str) -> Result<()> {
        if x.ncols() != self.arch.d_f {
            return Err(Error::Shape(format!(
                "{what} has {} dims, expected d_f = {}",
                x.ncols(),
                self.arch.d_f
            )));
        }
        Ok(())
    }

    /// `g` input, concatenated in the fixed order `(hist..., t, t+1)`.
    pub fn latent_input(
        &self,
        feat_t: &Array2<T>,
        feat_t1: &Array2<T>,
        feat_hist: &Array2<T>,
    ) -> Result<Array2<T>> {
        self.check_feat(feat_t, "feat_t")?;
        self.check_feat(feat_t1, "feat_t1")?;
        if feat_hist.ncols() != self.arch.history * self.arch.d_f {
            return Err(Error::Shape("history features have the wrong width".into()));
        }
        concatenate(Axis(1), &[feat_hist.view(), feat_t.view(), feat_t1.view()])
            .map_err(|e| Error::Shape(e.to_string()))
    }

    pub fn predict_latent(
        &self,
        feat_t: &Array2<T>,
        feat_t1: &Array2<T>,
        feat_hist: &Array2<T>,
    ) -> Result<Array2<T>> {
        self.g.forward(&self.latent_input(feat_t, feat_t1, feat_hist)?)
    }

    pub fn quantize(&self, pre: &Array2<T>) -> Result<Quantized<T>> {
        quantize(&self.codebook.codes, pre)
    }

    pub fn project_action(&self, z_q: &Array2<T>) -> Result<Array2<T>> {
        self.h.forward(z_q)
    }

    /// The labeling model V: encode, predict latent, quantize, project.
    pub fn label_video(&self, batch: &PairBatch<T>) -> Result<(Quantized<T>, Array2<T>)> {
        let ft = self.encode(&batch.o_t)?;
        let ft1 = self.encode(&batch.o_t1)?;
        let fh = self.encode_history(&self.f, &batch.o_hist)?;
        let pre = self.predict_latent(&ft, &ft1, &fh)?;
        let q = self.quantize(&pre)?;
        let logits = self.project_action(&q.vectors)?;
        Ok((q, logits))
    }

    /// World model prediction of the next feature from `(feat_t, z_q)`.
    pub fn world_forward(&self, feat_t: &Array2<T>, z_q: &Array2<T>) -> Result<Array2<T>> {
        self.check_feat(feat_t, "feat_t")?;
        if z_q.ncols() != self.arch.d_z {
            return Err(Error::Shape("latent action has the wrong width".into()));
        }
        let x = concatenate(Axis(1), &[feat_t.view(), z_q.view()])
            .map_err(|e| Error::Shape(e.to_string()))?;
        self.world.forward(&x)
    }

    /// `g_pi` input, concatenated as `(hist..., t)`.
    pub fn policy_input(&self, feat: &Array2<T>, feat_hist: &Array2<T>) -> Result<Array2<T>> {
        self.check_feat(feat, "feat")?;
        if feat_hist.ncols() != self.arch.history * self.arch.d_f {
            return Err(Error::Shape("history features have the wrong width".into()));
        }
        concatenate(Axis(1), &[feat_hist.view(), feat.view()])
            .map_err(|e| Error::Shape(e.to_string()))
    }

    pub fn policy_latent(&self, feat: &Array2<T>, feat_hist: &Array2<T>) -> Result<Array2<T>> {
        self.g_pi.forward(&self.policy_input(feat, feat_hist)?)
    }

    /// Policy logits `h(quantize(g_pi(f(o), f(hist))))`.
    pub fn policy_logits(&self, obs: &Array4<T>, hist: &Array5<T>) -> Result<Array2<T>> {
        let feat = self.encode(obs)?;
        let fh = self.encode_history(&self.f, hist)?;
        let z = self.policy_latent(&feat, &fh)?;
        let q = self.quantize(&z)?;
        self.project_action(&q.vectors)
    }

    /// Greedy deployed policy.
    pub fn act(&self, obs: &Array4<T>, hist: &Array5<T>) -> Result<Vec<usize>> {
        let logits = self.policy_logits(obs, hist)?;
        Ok(logits.outer_iter().map(argmax).collect())
    }
}
