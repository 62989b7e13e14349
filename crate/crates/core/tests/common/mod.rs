//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use ndarray::{concatenate, s, Array2, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use upesv::envsuite::{ObsShape, N_ACTIONS};
use upesv::losses::{gap_from_latents, lfr_from_features, loss_vsc, upc_from_features};
use upesv::nets::{quantize, sq_norm, ArchConfig, Component, ModelBundle, Quantized};
use upesv::trainer::TrainConfig;

pub fn tiny_arch() -> ArchConfig {
    ArchConfig {
        conv_channels: vec![2],
        conv_strides: vec![1],
        kernel: 3,
        d_f: 4,
        d_z: 3,
        codebook_size: 5,
        mlp_hidden: 5,
        world_hidden: 6,
        ..ArchConfig::default()
    }
}

pub fn tiny_bundle() -> ModelBundle<f64> {
    let shape = ObsShape {
        channels: 2,
        height: 4,
        width: 4,
    };
    ModelBundle::new(&tiny_arch(), shape, N_ACTIONS, 3).unwrap()
}

/// Add uniform noise to every parameter so no layer sits at an exact zero.
pub fn jitter(mut b: ModelBundle<f64>, seed: u64) -> ModelBundle<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for c in Component::ALL {
        for t in b.component_mut(c).tensors_mut() {
            t.iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
        }
    }
    b
}

pub fn random_array2(n: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0))
}

pub fn random_obs(b: &ModelBundle<f64>, n: usize, seed: u64) -> Array4<f64> {
    let s = b.obs_shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array4::from_shape_fn((n, s.channels, s.height, s.width), |_| rng.random_range(0.0..1.0))
}

/// Linear encoder on 1x2x2 frames with identity weights, so the four one-hot
/// frames map to orthogonal features; `u` is an identity MLP.
pub fn orthogonal_vsc_bundle(w: f64) -> ModelBundle<f64> {
    let arch = ArchConfig {
        conv_channels: vec![],
        conv_strides: vec![],
        d_f: 4,
        d_z: 2,
        codebook_size: 5,
        mlp_hidden: 4,
        world_hidden: 4,
        init_log_temperature: w,
        ..ArchConfig::default()
    };
    let shape = ObsShape {
        channels: 1,
        height: 2,
        width: 2,
    };
    let mut b = ModelBundle::<f64>::new(&arch, shape, N_ACTIONS, 0).unwrap();
    b.f.fc.weight = Array2::eye(4);
    b.f.fc.bias.fill(0.0);
    b.f_ema = b.f.clone();
    for layer in &mut b.u.layers {
        layer.weight = Array2::eye(4);
        layer.bias.fill(0.0);
    }
    b
}

pub fn one_hot_obs(b: &ModelBundle<f64>) -> Array4<f64> {
    let s = b.obs_shape;
    let n = s.height * s.width;
    Array4::from_shape_fn((n, 1, s.height, s.width), |(i, _, r, c)| f64::from(u8::from(r * s.width + c == i)))
}

/// A seconds-scale configuration with every phase active.
pub fn tiny_config() -> TrainConfig {
    TrainConfig::from_json_str(
        r#"{
          "expert_levels": 10, "expert_frames": 2000, "eval_levels": 5, "eval_frames": 500,
          "eval_episodes": 20, "updates_vsc_lfr": 20, "updates_upc": 10, "updates_gap": 10,
          "interaction_budget": 500, "grounding_rounds": 2, "n_parallel_envs": 4,
          "update_frequency": 16, "batch_video": 16, "batch_transition": 16,
          "arch": {"conv_channels": [4], "conv_strides": [1], "d_f": 16, "mlp_hidden": 16, "world_hidden": 16}
        }"#,
    )
    .unwrap()
}

// Finite-difference oracle. Losses that stop gradients (LFR's straight-through
// quantizer and its `sg(.)` terms) are checked against a surrogate: the same
// forward pass with every stop-gradient quantity frozen at the base point.

pub const H: f64 = 1e-6;
pub const REL_TOL: f64 = 1e-4;

/// Relative error `|a - n| / max(|a|, |n|)` between the analytic gradient of
/// `comp` and its central-difference estimate.
pub fn fd_rel_error(
    bundle: &ModelBundle<f64>,
    analytic: &ModelBundle<f64>,
    comp: Component,
    loss: &dyn Fn(&ModelBundle<f64>) -> f64,
) -> f64 {
    let a: Vec<f64> = analytic.component(comp).tensors().concat();
    let mut num = Vec::with_capacity(a.len());
    let mut probe = bundle.clone();
    let sizes: Vec<usize> = bundle.component(comp).tensors().iter().map(|t| t.len()).collect();
    for (ti, &len) in sizes.iter().enumerate() {
        for j in 0..len {
            let orig = probe.component_mut(comp).tensors_mut()[ti][j];
            probe.component_mut(comp).tensors_mut()[ti][j] = orig + H;
            let up = loss(&probe);
            probe.component_mut(comp).tensors_mut()[ti][j] = orig - H;
            let down = loss(&probe);
            probe.component_mut(comp).tensors_mut()[ti][j] = orig;
            num.push((up - down) / (2.0 * H));
        }
    }
    let diff: f64 = a.iter().zip(&num).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn: f64 = num.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!(na.max(nn) > 1e-10, "{} gradient is identically zero", comp.name());
    diff / na.max(nn)
}

pub fn check(bundle: &ModelBundle<f64>, analytic: &ModelBundle<f64>, comps: &[Component], loss: &dyn Fn(&ModelBundle<f64>) -> f64) {
    for &c in comps {
        let e = fd_rel_error(bundle, analytic, c, loss);
        assert!(e <= REL_TOL, "{}: relative error {e:e}", c.name());
    }
}

pub struct LfrInputs {
    pub ft: Array2<f64>,
    pub ft1: Array2<f64>,
    pub fh: Array2<f64>,
}

/// Surrogate LFR with the code indices, `sg(pre)` and `sg(code)` frozen at
/// the base bundle `b0`.
pub fn lfr_surrogate(b0: &ModelBundle<f64>, x: &LfrInputs) -> impl Fn(&ModelBundle<f64>) -> f64 {
    let pre0 = b0.predict_latent(&x.ft, &x.ft1, &x.fh).unwrap();
    let Quantized { indices, vectors: code0 } = quantize(&b0.codebook.codes, &pre0).unwrap();
    let beta = b0.arch.vq_beta;
    let (ft, ft1, fh) = (x.ft.clone(), x.ft1.clone(), x.fh.clone());
    move |b: &ModelBundle<f64>| {
        let n = ft.nrows() as f64;
        let pre = b.predict_latent(&ft, &ft1, &fh).unwrap();
        let z = &pre + &(&code0 - &pre0);
        let w_in = concatenate(Axis(1), &[ft.view(), z.view()]).unwrap();
        let pred = b.world.forward(&w_in).unwrap();
        let recon = (&pred - &ft1).mapv(|v| v * v).sum() / n;
        let mut codebook = 0.0;
        let mut commit = 0.0;
        for (i, &k) in indices.iter().enumerate() {
            let c = b.codebook.codes.row(k);
            codebook += (&pre0.row(i) - &c).mapv(|v| v * v).sum();
            commit += (&pre.row(i) - &code0.row(i)).mapv(|v| v * v).sum();
        }
        recon + codebook / n + beta * commit / n
    }
}

pub fn lfr_inputs(b: &ModelBundle<f64>, n: usize, seed: u64) -> LfrInputs {
    let d = b.arch.d_f;
    LfrInputs {
        ft: random_array2(n, d, seed),
        ft1: random_array2(n, d, seed + 1),
        fh: random_array2(n, d * b.arch.history, seed + 2),
    }
}


/// Components with a nonzero gradient.
pub fn nonzero(grads: &ModelBundle<f64>) -> Vec<Component> {
    Component::ALL
        .into_iter()
        .filter(|&c| sq_norm(grads.component(c)) != 0.0)
        .collect()
}

/// Measured gradient support of VSC, LFR, GAP and UPC, in that order.
pub fn flow_matrix(bundle: &ModelBundle<f64>) -> [Vec<Component>; 4] {
    let obs = random_obs(bundle, 4, 40);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (_, vsc) = loss_vsc(bundle, &obs, 1, &mut rng).unwrap();

    let x = lfr_inputs(bundle, 5, 41);
    let (_, lfr) = lfr_from_features(bundle, &x.ft, &x.ft1, &x.fh).unwrap();

    let z = random_array2(5, bundle.arch.d_z, 42);
    let (_, gap) = gap_from_latents(bundle, &z, &[0, 1, 2, 3, 4]).unwrap();

    let input = random_array2(5, bundle.arch.d_f * (bundle.arch.history + 1), 43);
    let targets = quantize(&bundle.codebook.codes, &random_array2(5, bundle.arch.d_z, 44)).unwrap();
    let (_, upc) = upc_from_features(bundle, &input, &targets).unwrap();
    [nonzero(&vsc), nonzero(&lfr), nonzero(&gap), nonzero(&upc)]
}

/// Largest gap between the straight-through gradient reaching g and the
/// finite-difference gradient of the reconstruction w.r.t. the quantized code.
///
/// With g's output layer reduced to its bias, dL/d(bias) sums dL/dpre over
/// the batch; with beta = 0 and the codebook term independent of g, that
/// must equal the summed gradient of the reconstruction w.r.t. z_q.
pub fn straight_through_gap() -> f64 {
    let mut bundle = jitter(tiny_bundle(), 7);
    bundle.arch.vq_beta = 0.0;
    let last = bundle.g.layers.len() - 1;
    bundle.g.layers[last].weight.fill(0.0);
    let x = lfr_inputs(&bundle, 4, 60);
    let (_, grads) = lfr_from_features(&bundle, &x.ft, &x.ft1, &x.fh).unwrap();
    let pre = bundle.predict_latent(&x.ft, &x.ft1, &x.fh).unwrap();
    let z_q = quantize(&bundle.codebook.codes, &pre).unwrap().vectors;
    let n = x.ft.nrows() as f64;
    let recon = |z: &Array2<f64>| {
        let pred = bundle.world_forward(&x.ft, z).unwrap();
        (&pred - &x.ft1).mapv(|v| v * v).sum() / n
    };
    let mut worst = 0f64;
    for j in 0..bundle.arch.d_z {
        let mut up = z_q.clone();
        let mut down = z_q.clone();
        up.slice_mut(s![.., j]).mapv_inplace(|v| v + H);
        down.slice_mut(s![.., j]).mapv_inplace(|v| v - H);
        let fd = (recon(&up) - recon(&down)) / (2.0 * H);
        let st = grads.g.layers[last].bias[j];
        worst = worst.max((fd - st).abs() / fd.abs().max(1.0));
    }
    worst
}

/// VSC, LFR, GAP and UPC evaluated at constructed fixed points.
pub fn fixed_point_losses() -> [f64; 4] {
    // LFR: g outputs 0, code 0 is the origin, the world model outputs ft1.
    let mut b = tiny_bundle();
    let g_last = b.g.layers.len() - 1;
    b.g.layers[g_last].weight.fill(0.0);
    b.g.layers[g_last].bias.fill(0.0);
    b.codebook.codes.row_mut(0).fill(0.0);
    let x = lfr_inputs(&b, 4, 80);
    let target = x.ft.row(0).to_owned();
    let ft1 = Array2::from_shape_fn(x.ft1.raw_dim(), |(_, j)| target[j]);
    let w_last = b.world.layers.len() - 1;
    b.world.layers[w_last].weight.fill(0.0);
    b.world.layers[w_last].bias.assign(&target);
    let lfr = lfr_from_features(&b, &x.ft, &ft1, &x.fh).unwrap().0.value;

    // UPC: g_pi reproduces the quantized target exactly.
    let p_last = b.g_pi.layers.len() - 1;
    b.g_pi.layers[p_last].weight.fill(0.0);
    b.g_pi.layers[p_last].bias.fill(0.0);
    let input = random_array2(4, b.arch.d_f * 2, 81);
    let targets = quantize(&b.codebook.codes, &Array2::zeros((4, b.arch.d_z))).unwrap();
    let upc = upc_from_features(&b, &input, &targets).unwrap().0.value;

    // GAP: a saturated head on the logged action.
    let h_last = b.h.layers.len() - 1;
    b.h.layers[h_last].weight.fill(0.0);
    b.h.layers[h_last].bias.fill(0.0);
    b.h.layers[h_last].bias[2] = 60.0;
    let z = random_array2(4, b.arch.d_z, 82);
    let gap = gap_from_latents(&b, &z, &[2, 2, 2, 2]).unwrap().0.value;

    // VSC: identical encoders mapping distinct inputs to orthogonal directions,
    // an identity projection and a large temperature.
    let v = orthogonal_vsc_bundle(60f64.ln());
    let obs = one_hot_obs(&v);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let vsc = loss_vsc(&v, &obs, 0, &mut rng).unwrap().0.value;
    [vsc, lfr, gap, upc]
}

/// GAP loss of a head predicting the uniform distribution.
pub fn gap_uniform_loss() -> f64 {
    let mut bundle = tiny_bundle();
    let last = bundle.h.layers.len() - 1;
    bundle.h.layers[last].weight.fill(0.0);
    bundle.h.layers[last].bias.fill(0.0);
    let z = random_array2(9, bundle.arch.d_z, 70);
    gap_from_latents(&bundle, &z, &[0, 1, 2, 3, 4, 0, 1, 2, 3]).unwrap().0.value
}
