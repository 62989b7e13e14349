//! Data-parallel core against the sequential fallback on the hot paths:
//! encoder forward/backward, the VSC step and random rollouts.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use upesv::databank::sample_pairs;
use upesv::envsuite::{generate_expert_videos, level_seed_range, EnvSpec, N_ACTIONS};
use upesv::eval::rollout_random;
use upesv::exec::ExecMode;
use upesv::losses::loss_vsc;
use upesv::nets::{ArchConfig, ModelBundle};

const MODES: [(&str, ExecMode); 2] = [("parallel", ExecMode::Parallel), ("sequential", ExecMode::Sequential)];

fn encoder(c: &mut Criterion) {
    let spec = EnvSpec::procgrid(8);
    let (videos, _) = generate_expert_videos(&spec, 20, 4000, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batch = sample_pairs::<f32, _>(&videos, 128, 1, &mut rng).unwrap();
    let mut bundle = ModelBundle::<f32>::new(&ArchConfig::default(), spec.obs_shape(), N_ACTIONS, 0).unwrap();

    let mut group = c.benchmark_group("encoder_fwd_bwd_128");
    for (name, mode) in MODES {
        bundle.set_exec(mode);
        let mut grad = bundle.f.clone();
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                let (feat, cache) = bundle.f.forward_train(&batch.o_t).unwrap();
                bundle.f.backward(&cache, &feat, &mut grad);
            })
        });
    }
    group.finish();

    let mut group = c.benchmark_group("vsc_step_128");
    for (name, mode) in MODES {
        bundle.set_exec(mode);
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            b.iter(|| loss_vsc(&bundle, &batch.o_t, 1, &mut rng).unwrap())
        });
    }
    group.finish();
}

fn rollouts(c: &mut Criterion) {
    let spec = EnvSpec::procgrid(8);
    let mut group = c.benchmark_group("random_rollouts_64");
    for (name, mode) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| rollout_random(&spec, 64, level_seed_range(1, 50), 0, mode).unwrap())
        });
    }
    group.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = encoder, rollouts
}
criterion_main!(benches);
