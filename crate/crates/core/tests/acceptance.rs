//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Contract criteria (1-5, 9, 10) fail the process when they fail. The
//! desk-scale outcome criteria (6-8) are measured with default settings and
//! reported; their lines are informational and never affect the exit code.
//! Set `UPESV_ACCEPTANCE_SKIP_DESK=1` to skip the desk-scale runs.

mod common;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use upesv::databank::{sample_pairs, write_dataset_with_actions, VideoDataset};
use upesv::envsuite::{
    expert_episode, generate_expert_videos, level_seed_range, make_env, oracle_inverse_dynamics, EnvSpec, N_ACTIONS,
};
use upesv::eval::{run_variants, seed_row, shift_label, EvalReport, EvalSet, SeedRow};
use upesv::losses::{gap_from_latents, lfr_from_features, loss_vsc, upc_from_features};
use upesv::nets::{ema_update, quantize, ArchConfig, Component, ModelBundle, Params};
use upesv::plot;
use upesv::trainer::{run_full, Precision, RunSummary, TrainConfig, Variant};

use common::{
    fd_rel_error, fixed_point_losses, flow_matrix, gap_uniform_loss, jitter, lfr_inputs, lfr_surrogate,
    random_array2, random_obs, straight_through_gap, tiny_bundle, tiny_config, REL_TOL,
};

struct Line {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
    gating: bool,
}

type Check = Result<(bool, String), String>;

fn run(id: usize, name: &'static str, gating: bool, f: impl FnOnce() -> Check) -> Line {
    let t = Instant::now();
    let (pass, detail) = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(r)) => r,
        Ok(Err(e)) => (false, format!("error: {e}")),
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panic: {msg}"))
        }
    };
    let line = Line {
        id,
        name,
        pass,
        detail: format!("{detail} [{:.1}s]", t.elapsed().as_secs_f64()),
        gating,
    };
    print_line(&line);
    line
}

fn print_line(l: &Line) {
    let tag = if l.pass { "PASS" } else { "FAIL" };
    let kind = if l.gating { "" } else { " (reported)" };
    println!("{tag} {:>2} {}{kind}: {}", l.id, l.name, l.detail);
}

fn e(x: impl std::fmt::Display) -> String {
    x.to_string()
}

fn gradient_correctness() -> Check {
    use Component::*;
    let t = Instant::now();
    let mut worst: Vec<(String, f64)> = Vec::new();

    let b = jitter(tiny_bundle(), 1);
    let obs = random_obs(&b, 5, 2);
    let vsc = |m: &ModelBundle<f64>| {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        loss_vsc(m, &obs, 1, &mut rng).unwrap().0.value
    };
    let (_, g) = loss_vsc(&b, &obs, 1, &mut ChaCha8Rng::seed_from_u64(9)).map_err(e)?;
    let err = [F, U, W].map(|c| fd_rel_error(&b, &g, c, &vsc));
    worst.push(("VSC".into(), err.into_iter().fold(0.0, f64::max)));

    let b = jitter(tiny_bundle(), 3);
    let x = lfr_inputs(&b, 6, 10);
    let (_, g) = lfr_from_features(&b, &x.ft, &x.ft1, &x.fh).map_err(e)?;
    let sur = lfr_surrogate(&b, &x);
    let err = [G, Codebook, World].map(|c| fd_rel_error(&b, &g, c, &sur));
    worst.push(("LFR".into(), err.into_iter().fold(0.0, f64::max)));

    let b = jitter(tiny_bundle(), 4);
    let z = random_array2(7, b.arch.d_z, 20);
    let actions = [0, 1, 2, 3, 4, 1, 2];
    let (_, g) = gap_from_latents(&b, &z, &actions).map_err(e)?;
    let gap = |m: &ModelBundle<f64>| gap_from_latents(m, &z, &actions).unwrap().0.value;
    worst.push(("GAP".into(), fd_rel_error(&b, &g, H, &gap)));

    let b = jitter(tiny_bundle(), 5);
    let input = random_array2(6, b.arch.d_f * (b.arch.history + 1), 30);
    let targets = quantize(&b.codebook.codes, &random_array2(6, b.arch.d_z, 31)).map_err(e)?;
    let (_, g) = upc_from_features(&b, &input, &targets).map_err(e)?;
    let upc = |m: &ModelBundle<f64>| upc_from_features(m, &input, &targets).unwrap().0.value;
    worst.push(("UPC".into(), fd_rel_error(&b, &g, GPi, &upc)));

    let secs = t.elapsed().as_secs_f64();
    let ok = worst.iter().all(|(_, v)| *v <= REL_TOL) && secs <= 60.0;
    let detail = worst
        .iter()
        .map(|(n, v)| format!("{n} {v:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    Ok((ok, format!("max relative error {detail} (tol {REL_TOL:e}); {secs:.2}s (limit 60s)")))
}

fn gradient_flow() -> Check {
    use Component::*;
    let expected = [vec![F, U, W], vec![G, Codebook, World], vec![H], vec![GPi]];
    let measured = flow_matrix(&jitter(tiny_bundle(), 6));
    let names = ["VSC", "LFR", "GAP", "UPC"];
    let detail = names
        .iter()
        .zip(&measured)
        .map(|(n, cs)| format!("{n}->{{{}}}", cs.iter().map(|c| c.name()).collect::<Vec<_>>().join(",")))
        .collect::<Vec<_>>()
        .join(" ");
    Ok((measured == expected, detail))
}

/// VSC at initialisation on real expert frames with the default architecture.
fn vsc_at_init(n: usize) -> Result<f64, String> {
    let spec = EnvSpec::procgrid(8);
    let (videos, _) = generate_expert_videos(&spec, 20, 4000, 0).map_err(e)?;
    let bundle = ModelBundle::<f64>::new(&ArchConfig::default(), spec.obs_shape(), N_ACTIONS, 0).map_err(e)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batch = sample_pairs::<f64, _>(&videos, n, 1, &mut rng).map_err(e)?;
    Ok(loss_vsc(&bundle, &batch.o_t, 1, &mut rng).map_err(e)?.0.value)
}

fn loss_anchors() -> Check {
    let gap = gap_uniform_loss();
    let vsc = vsc_at_init(128)?;
    let fixed = fixed_point_losses();
    let ln128 = 128f64.ln();
    let ok = (gap - 5f64.ln()).abs() <= 1e-6 && (vsc - ln128).abs() <= 0.3 && fixed.iter().all(|&v| v <= 1e-6);
    Ok((
        ok,
        format!(
            "GAP uniform {gap:.8} (ln5 {:.8}); VSC init {vsc:.4} (ln128 {ln128:.4} ± 0.3); fixed points VSC/LFR/GAP/UPC {:.1e}/{:.1e}/{:.1e}/{:.1e}",
            5f64.ln(),
            fixed[0],
            fixed[1],
            fixed[2],
            fixed[3]
        ),
    ))
}

fn ema_and_vq() -> Check {
    let b = jitter(tiny_bundle(), 8);
    let mut target = b.f_ema.clone();
    for t in target.tensors_mut() {
        t.iter_mut().for_each(|v| *v += 0.5);
    }
    let before = target.clone();
    ema_update(&mut target, &b.f, 0.0).map_err(e)?;
    let noop = target == before;
    ema_update(&mut target, &b.f, 1.0).map_err(e)?;
    let copy = target.tensors() == b.f.tensors();

    let mut idempotent = true;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..50 {
        let k = rng.random_range(1..17);
        let d = rng.random_range(1..9);
        let codes = random_array2(k, d, trial);
        let q = quantize(&codes, &random_array2(32, d, trial + 1000)).map_err(e)?;
        let again = quantize(&codes, &q.vectors).map_err(e)?;
        idempotent &= again == q;
    }

    let st = straight_through_gap();
    let codes = ndarray::array![[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [1.0, 0.0]];
    let point = ndarray::array![[0.0, 0.0], [1.0, 0.0]];
    let ties = quantize(&codes, &point).map_err(e)?;
    let ties_ok = ties.indices == vec![0, 0] && quantize(&codes, &point).map_err(e)? == ties;

    let ok = noop && copy && idempotent && st <= 1e-6 && ties_ok;
    Ok((
        ok,
        format!(
            "m=0 no-op {noop}, m=1 copy {copy}, idempotent over 50 codebooks {idempotent}, straight-through gap {st:.1e}, ties to lowest index {ties_ok}"
        ),
    ))
}

fn oracle_consistency() -> Check {
    let spec = EnvSpec::procgrid(8);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let levels = level_seed_range(0, 200);
    let (mut checked, mut missing) = (0usize, 0usize);
    while checked < 10_000 {
        let mut level = make_env(&spec, rng.random_range(levels.clone())).map_err(e)?;
        level.reset(rng.random());
        while !level.done && checked < 10_000 {
            let before = level.observe();
            let a = rng.random_range(0..N_ACTIONS);
            let after = level.step(a).map_err(e)?.obs;
            missing += usize::from(!oracle_inverse_dynamics(&before, &after).map_err(e)?.contains(&a));
            checked += 1;
        }
    }
    let (mut episodes, mut successes, mut non_singleton) = (0usize, 0usize, 0usize);
    for seed in level_seed_range(0, 200) {
        let mut level = make_env(&spec, seed).map_err(e)?;
        level.reset(seed ^ 0xabc);
        let (obs, actions, success) = expert_episode(&mut level).map_err(e)?;
        episodes += 1;
        successes += usize::from(success);
        for (i, a) in actions.iter().enumerate() {
            let set = oracle_inverse_dynamics(&obs[i], &obs[i + 1]).map_err(e)?;
            non_singleton += usize::from(set.len() != 1 || !set.contains(&a.index()));
        }
    }
    let ok = missing == 0 && non_singleton == 0 && successes == episodes;
    Ok((
        ok,
        format!(
            "{missing}/{checked} random transitions miss the logged action; expert: {non_singleton} non-singleton steps, success {successes}/{episodes}"
        ),
    ))
}

/// Every run of the desk-scale study, keyed for the three reports.
struct DeskStudy {
    ablation: Vec<SeedRow>,
    sweep: Vec<SeedRow>,
    full: Vec<RunSummary>,
    budgets: Vec<(usize, usize)>,
    full_run_secs: Vec<f64>,
}

fn desk_runs<T: upesv::nets::Real>(cfg: &TrainConfig, out: &Path) -> Result<DeskStudy, String> {
    let t = Instant::now();
    let (videos, _) = generate_expert_videos(&cfg.env, cfg.expert_levels, cfg.expert_frames, cfg.expert_seed).map_err(e)?;
    let data_secs = t.elapsed().as_secs_f64();
    let set = EvalSet::generate(cfg).map_err(e)?;
    let mut study = DeskStudy {
        ablation: Vec::new(),
        sweep: Vec::new(),
        full: Vec::new(),
        budgets: Vec::new(),
        full_run_secs: Vec::new(),
    };
    let keep = |label: String, s: &RunSummary, into_sweep: bool, study: &mut DeskStudy| -> Result<(), String> {
        eprintln!(
            "  {label:<8} seed {} acc {:.3} purity {:.3} success {:.3} ({:.0}s)",
            s.seed,
            s.eval.map_or(f64::NAN, |m| m.labeling_accuracy),
            s.eval.map_or(f64::NAN, |m| m.latent_purity),
            s.eval.map_or(f64::NAN, |m| m.policy_success),
            s.wall_clock_secs
        );
        study.budgets.push((s.interactions_used, s.interaction_budget));
        let row = seed_row(&label, s).map_err(e)?;
        if into_sweep {
            study.sweep.push(row);
        } else {
            study.ablation.push(row);
        }
        Ok(())
    };
    for &seed in &cfg.eval_seeds {
        let base = TrainConfig { seed, ..cfg.clone() };
        // Full and no_gap share pretraining and cloning; the full run's time
        // is bounded by this call plus dataset generation.
        let t = Instant::now();
        let runs = run_variants::<T>(&base, &videos, &set, &[Variant::Full, Variant::NoGap]).map_err(e)?;
        study.full_run_secs.push(data_secs + t.elapsed().as_secs_f64());
        for (v, s) in &runs {
            keep(v.as_str().into(), s, false, &mut study)?;
            if *v == Variant::Full {
                keep(shift_label(base.shift), s, true, &mut study)?;
                study.full.push(s.clone());
            }
        }
        for v in [Variant::NoVsc, Variant::NoLfr] {
            for (v, s) in run_variants::<T>(&base, &videos, &set, &[v]).map_err(e)? {
                keep(v.as_str().into(), &s, false, &mut study)?;
            }
        }
        for shift in [0, 2, 4] {
            let c = TrainConfig { shift, ..base.clone() };
            for (_, s) in run_variants::<T>(&c, &videos, &set, &[Variant::Full]).map_err(e)? {
                keep(shift_label(shift), &s, true, &mut study)?;
            }
        }
    }
    let mut ablation = EvalReport::from_rows("ablation", study.ablation.clone()).map_err(e)?;
    let order = ["full", "no_vsc", "no_lfr", "no_gap"];
    ablation.table.sort_by_key(|r| order.iter().position(|o| *o == r.variant));
    let mut sweep = EvalReport::from_rows("shift_sweep", study.sweep.clone()).map_err(e)?;
    sweep.table.sort_by_key(|r| r.variant.trim_start_matches("s=").parse::<usize>().unwrap_or(0));
    for (r, svg) in [(&ablation, plot::ablation_bars(&ablation)), (&sweep, plot::sweep_curve(&sweep))] {
        r.write_csv(&out.join(format!("{}.csv", r.name))).map_err(e)?;
        fs::write(out.join(format!("{}.svg", r.name)), svg).map_err(e)?;
        fs::write(out.join(format!("{}.txt", r.name)), r.summary_text()).map_err(e)?;
        eprint!("{}", r.summary_text());
    }
    Ok(study)
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn table_mean(rows: &[SeedRow], label: &str) -> f64 {
    mean(rows.iter().filter(|r| r.variant == label).map(|r| r.labeling_accuracy))
}

fn desk_end_to_end(study: &DeskStudy) -> Check {
    let m = |f: fn(&upesv::eval::EvalMetrics) -> f64| mean(study.full.iter().map(|s| f(&s.eval.expect("evaluated"))));
    let acc = m(|x| x.labeling_accuracy);
    let purity = m(|x| x.latent_purity);
    let success = m(|x| x.policy_success);
    let random = m(|x| x.random_success);
    let secs = study.full_run_secs.iter().copied().fold(0.0, f64::max);
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let ok = acc >= 0.9 && purity >= 0.9 && success >= 0.8 && random <= 0.15 && secs <= 1800.0;
    Ok((
        ok,
        format!(
            "mean over {} seeds: labeling accuracy {acc:.3} (>= 0.90), purity {purity:.3} (>= 0.90), policy success {success:.3} (>= 0.80), random {random:.3} (<= 0.15), slowest run {secs:.0}s on {cores} core(s) (<= 1800s)",
            study.full.len()
        ),
    ))
}

fn ablation_direction(study: &DeskStudy) -> Check {
    let full = table_mean(&study.ablation, "full");
    let mut ok = true;
    let mut parts = vec![format!("full {full:.3}")];
    for v in ["no_vsc", "no_lfr", "no_gap"] {
        let acc = table_mean(&study.ablation, v);
        ok &= full - acc >= 0.05;
        parts.push(format!("{v} {acc:.3} (margin {:+.3})", full - acc));
    }
    Ok((ok, format!("labeling accuracy: {} (margin >= 0.05)", parts.join(", "))))
}

fn sweep_direction(study: &DeskStudy) -> Check {
    let acc = |s: usize| table_mean(&study.sweep, &shift_label(s));
    let best = [1, 2, 4].map(acc).into_iter().fold(f64::MIN, f64::max);
    let s0 = acc(0);
    Ok((
        s0 < best,
        format!(
            "labeling accuracy s=0 {s0:.3}, s=1 {:.3}, s=2 {:.3}, s=4 {:.3}; s=0 below best {best:.3}",
            acc(1),
            acc(2),
            acc(4)
        ),
    ))
}

fn reward_free(study: Option<&DeskStudy>) -> Check {
    let sources = [
        ("trainer.rs", include_str!("../src/trainer.rs")),
        ("losses.rs", include_str!("../src/losses.rs")),
        ("databank.rs", include_str!("../src/databank.rs")),
        ("nets/bundle.rs", include_str!("../src/nets/bundle.rs")),
        ("nets/optim.rs", include_str!("../src/nets/optim.rs")),
    ];
    let mut hits = Vec::new();
    for (name, text) in sources {
        for (i, line) in text.lines().enumerate() {
            let code = line.split("//").next().unwrap_or("");
            for banned in ["success", "reward", ".info", "hit_hazard"] {
                if code.contains(banned) {
                    hits.push(format!("{name}:{}", i + 1));
                }
            }
        }
    }
    let mut budgets: Vec<(usize, usize)> = Vec::new();
    let videos = tiny_videos(&tiny_config())?;
    for (budget, rounds, envs) in [(500, 2, 4), (503, 3, 7), (64, 4, 1)] {
        let cfg = TrainConfig {
            interaction_budget: budget,
            grounding_rounds: rounds,
            n_parallel_envs: envs,
            ..tiny_config()
        };
        let out = run_full::<f32>(&cfg, &videos, None, None).map_err(e)?;
        budgets.push((out.state.interactions_used, budget));
    }
    if let Some(s) = study {
        budgets.extend(&s.budgets);
    }
    let exact = budgets.iter().all(|(used, b)| used == b);
    Ok((
        hits.is_empty() && exact,
        format!(
            "reward/success reads in training sources: {}; interactions == budget in {}/{} runs",
            if hits.is_empty() { "none".to_string() } else { hits.join(" ") },
            budgets.iter().filter(|(u, b)| u == b).count(),
            budgets.len()
        ),
    ))
}

fn tiny_videos(cfg: &TrainConfig) -> Result<VideoDataset, String> {
    Ok(generate_expert_videos(&cfg.env, cfg.expert_levels, cfg.expert_frames, cfg.expert_seed)
        .map_err(e)?
        .0)
}

fn csv_max_diff(a: &Path, b: &Path) -> Result<f64, String> {
    let (a, b) = (fs::read_to_string(a).map_err(e)?, fs::read_to_string(b).map_err(e)?);
    let (la, lb): (Vec<&str>, Vec<&str>) = (a.lines().collect(), b.lines().collect());
    if la.len() != lb.len() {
        return Ok(f64::INFINITY);
    }
    let mut worst = 0f64;
    for (ra, rb) in la.iter().zip(&lb) {
        let (ca, cb): (Vec<&str>, Vec<&str>) = (ra.split(',').collect(), rb.split(',').collect());
        if ca.len() != cb.len() {
            return Ok(f64::INFINITY);
        }
        for (x, y) in ca.iter().zip(&cb) {
            worst = worst.max(match (x.parse::<f64>(), y.parse::<f64>()) {
                (Ok(x), Ok(y)) if x == y => 0.0,
                (Ok(x), Ok(y)) => (x - y).abs(),
                _ if x == y => 0.0,
                _ => f64::INFINITY,
            });
        }
    }
    Ok(worst)
}

fn determinism(dir: &Path) -> Check {
    let cfg = TrainConfig {
        deterministic: true,
        seed: 5,
        ..tiny_config()
    };
    let mut csvs = Vec::new();
    let mut datasets = Vec::new();
    for tag in ["a", "b"] {
        let (videos, log) =
            generate_expert_videos(&cfg.env, cfg.expert_levels, cfg.expert_frames, cfg.expert_seed).map_err(e)?;
        let data = dir.join(format!("experts_{tag}.actions"));
        write_dataset_with_actions(&data, &videos, &log).map_err(e)?;
        datasets.push(fs::read(&data).map_err(e)?);
        let out = dir.join(format!("run_{tag}"));
        fs::create_dir_all(&out).map_err(e)?;
        run_full::<f32>(&cfg, &videos, None, Some(&out)).map_err(e)?;
        csvs.push(out.join("metrics.csv"));
    }
    let diff = csv_max_diff(&csvs[0], &csvs[1])?;
    let same_data = datasets[0] == datasets[1];
    Ok((
        diff <= 1e-6 && same_data,
        format!("metrics CSV max cell difference {diff:.1e} (<= 1e-6); dataset files bitwise identical {same_data}"),
    ))
}

fn out_dir() -> PathBuf {
    let dir = PathBuf::from(option_env!("CARGO_TARGET_TMPDIR").unwrap_or("target/tmp")).join("acceptance");
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).expect("acceptance output directory");
    dir
}

fn main() {
    let dir = out_dir();
    let mut lines = vec![
        run(1, "gradient correctness", true, gradient_correctness),
        run(2, "gradient-flow matrix", true, gradient_flow),
        run(3, "analytic loss anchors", true, loss_anchors),
        run(4, "EMA and VQ contracts", true, ema_and_vq),
        run(5, "oracle consistency", true, oracle_consistency),
    ];

    let skip = std::env::var("UPESV_ACCEPTANCE_SKIP_DESK").is_ok_and(|v| v == "1");
    let study = if skip {
        None
    } else {
        let cfg = TrainConfig::default();
        eprintln!("desk-scale study: {} seeds x 6 configurations", cfg.eval_seeds.len());
        let r = catch_unwind(AssertUnwindSafe(|| match cfg.precision {
            Precision::F32 => desk_runs::<f32>(&cfg, &dir),
            Precision::F64 => desk_runs::<f64>(&cfg, &dir),
        }));
        Some(r.unwrap_or_else(|_| Err("desk study panicked".into())))
    };
    type Desk = fn(&DeskStudy) -> Check;
    let desk: [(usize, &'static str, Desk); 3] = [
        (6, "desk-scale end-to-end", desk_end_to_end),
        (7, "ablation direction", ablation_direction),
        (8, "shift sweep direction", sweep_direction),
    ];
    for (id, name, f) in desk {
        match &study {
            None => println!("SKIP {id:>2} {name} (reported): UPESV_ACCEPTANCE_SKIP_DESK=1"),
            Some(Ok(s)) => lines.push(run(id, name, false, || f(s))),
            Some(Err(err)) => lines.push(run(id, name, false, || Err(err.clone()))),
        }
    }
    let finished = match &study {
        Some(Ok(s)) => Some(s),
        _ => None,
    };
    lines.push(run(9, "reward-free and budget guarantees", true, || reward_free(finished)));
    lines.push(run(10, "determinism", true, || determinism(&dir)));

    let failed: Vec<String> = lines.iter().filter(|l| !l.pass).map(|l| l.id.to_string()).collect();
    let gating_failed = lines.iter().any(|l| !l.pass && l.gating);
    println!(
        "acceptance: {}/{} passed{}; reports in {}",
        lines.len() - failed.len(),
        lines.len(),
        if failed.is_empty() { String::new() } else { format!(", failed: {}", failed.join(",")) },
        dir.display()
    );
    if gating_failed {
        std::process::exit(1);
    }
}
