//! Analytic gradients against central finite differences in f64, the
//! per-loss gradient-flow matrix, loss anchors and the EMA/VQ contracts.

mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use upesv::losses::{gap_from_latents, lfr_from_features, loss_vsc, upc_from_features};
use upesv::nets::{ema_update, quantize, Component, ModelBundle, Params};

use common::{
    check, fixed_point_losses, flow_matrix, gap_uniform_loss, jitter, lfr_inputs, lfr_surrogate, nonzero,
    random_array2, random_obs, straight_through_gap, tiny_bundle,
};

#[test]
fn vsc_gradient_matches_finite_differences() {
    let bundle = jitter(tiny_bundle(), 1);
    let obs = random_obs(&bundle, 5, 2);
    let eval = |b: &ModelBundle<f64>| {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        loss_vsc(b, &obs, 1, &mut rng).unwrap().0.value
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (_, grads) = loss_vsc(&bundle, &obs, 1, &mut rng).unwrap();
    check(&bundle, &grads, &[Component::F, Component::U, Component::W], &eval);
}

#[test]
fn lfr_gradient_matches_stop_gradient_surrogate() {
    let bundle = jitter(tiny_bundle(), 3);
    let x = lfr_inputs(&bundle, 6, 10);
    let (report, grads) = lfr_from_features(&bundle, &x.ft, &x.ft1, &x.fh).unwrap();
    let sur = lfr_surrogate(&bundle, &x);
    assert!((sur(&bundle) - report.value).abs() < 1e-12, "surrogate reproduces the loss value");
    check(&bundle, &grads, &[Component::G, Component::Codebook, Component::World], &sur);
}

#[test]
fn gap_gradient_matches_finite_differences() {
    let bundle = jitter(tiny_bundle(), 4);
    let z = random_array2(7, bundle.arch.d_z, 20);
    let actions = [0, 1, 2, 3, 4, 1, 2];
    let (_, grads) = gap_from_latents(&bundle, &z, &actions).unwrap();
    let eval = |b: &ModelBundle<f64>| gap_from_latents(b, &z, &actions).unwrap().0.value;
    check(&bundle, &grads, &[Component::H], &eval);
}

#[test]
fn upc_gradient_matches_finite_differences() {
    let bundle = jitter(tiny_bundle(), 5);
    let d = bundle.arch.d_f * (bundle.arch.history + 1);
    let input = random_array2(6, d, 30);
    let targets = quantize(&bundle.codebook.codes, &random_array2(6, bundle.arch.d_z, 31)).unwrap();
    let (_, grads) = upc_from_features(&bundle, &input, &targets).unwrap();
    let eval = |b: &ModelBundle<f64>| upc_from_features(b, &input, &targets).unwrap().0.value;
    check(&bundle, &grads, &[Component::GPi], &eval);
}

#[test]
fn gradient_flow_matrix() {
    use Component::*;
    let [vsc, lfr, gap, upc] = flow_matrix(&jitter(tiny_bundle(), 6));
    assert_eq!(vsc, vec![F, U, W]);
    assert_eq!(lfr, vec![G, Codebook, World]);
    assert_eq!(gap, vec![H]);
    assert_eq!(upc, vec![GPi]);
}

#[test]
fn fresh_bundle_gradients_respect_the_matrix() {
    // Zero-initialised output layers must not hide a component from its loss.
    use Component::*;
    let bundle = tiny_bundle();
    let x = lfr_inputs(&bundle, 5, 50);
    let (_, g) = lfr_from_features(&bundle, &x.ft, &x.ft1, &x.fh).unwrap();
    let nz = nonzero(&g);
    assert!(nz.contains(&World) && nz.iter().all(|c| [G, Codebook, World].contains(c)));
}

#[test]
fn straight_through_passes_the_gradient_unchanged() {
    let gap = straight_through_gap();
    assert!(gap <= 1e-6, "{gap}");
}

#[test]
fn gap_uniform_prediction_is_ln_5() {
    let v = gap_uniform_loss();
    assert!((v - 5f64.ln()).abs() <= 1e-6, "{v}");
}

#[test]
fn losses_vanish_at_their_fixed_points() {
    let [vsc, lfr, gap, upc] = fixed_point_losses();
    assert_eq!(lfr, 0.0);
    assert_eq!(upc, 0.0);
    assert!(gap <= 1e-6, "{gap}");
    assert!(vsc <= 1e-6, "{vsc}");
}

#[test]
fn ema_extremes_are_exact() {
    let b = jitter(tiny_bundle(), 8);
    let mut target = b.f_ema.clone();
    for t in target.tensors_mut() {
        t.iter_mut().for_each(|v| *v += 0.5);
    }
    let before = target.clone();
    ema_update(&mut target, &b.f, 0.0).unwrap();
    assert_eq!(target, before, "m = 0 is a no-op");
    ema_update(&mut target, &b.f, 1.0).unwrap();
    assert_eq!(target.tensors(), b.f.tensors(), "m = 1 copies");
    assert!(ema_update(&mut target, &b.f, 1.5).is_err());
}

#[test]
fn quantize_ties_go_to_the_lowest_index() {
    let codes = ndarray::array![[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [1.0, 0.0]];
    let q = quantize(&codes, &ndarray::array![[0.0, 0.0], [1.0, 0.0]]).unwrap();
    assert_eq!(q.indices, vec![0, 0]);
    let again = quantize(&codes, &ndarray::array![[0.0, 0.0], [1.0, 0.0]]).unwrap();
    assert_eq!(q, again);
}
