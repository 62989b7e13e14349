//! `upesv`: generate expert videos, train, evaluate, ablate and sweep.

mod rundir;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use upesv::databank::{self, DatasetMeta, VideoDataset};
use upesv::envsuite::{generate_expert_videos, EnvSpec, N_ACTIONS};
use upesv::eval::{self, EvalReport, EvalSet, DEFAULT_SHIFTS};
use upesv::nets::checkpoint::checkpoint_dtype;
use upesv::nets::Real;
use upesv::trainer::{self, Precision, TrainConfig, Variant};
use upesv::{plot, Error};

use rundir::{sha256_file, sha256_hex, RunDir};

#[derive(Parser)]
#[command(name = "upesv", version, about = "Policy learning from action-free expert videos")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate expert videos (`{out}.upsv`) and the held-out action companion (`{out}.actions`).
    GenExperts(GenArgs),
    /// Train a full run and evaluate it on held-out levels.
    Train(TrainArgs),
    /// Evaluate a trained checkpoint on held-out levels.
    Eval(EvalArgs),
    /// Train every ablation variant over several seeds.
    Ablate(AblateArgs),
    /// Train full runs over a list of maximum shift distances.
    Sweep(SweepArgs),
    /// Print a summary of a UPSV dataset.
    InspectDataset(InspectArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value = "procgrid8")]
    env: String,
    #[arg(long, default_value_t = 200)]
    levels: usize,
    #[arg(long, default_value_t = 100_000)]
    frames: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output path prefix.
    #[arg(long)]
    out: PathBuf,
    /// Overwrite existing output files.
    #[arg(long)]
    force: bool,
    #[arg(long)]
    run_id: Option<String>,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON config; missing keys take the preset selected by `scale`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Expert dataset prefix or `.upsv` path; generated from the config when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Single-threaded, bitwise-reproducible execution.
    #[arg(long)]
    deterministic: bool,
    #[arg(long)]
    run_id: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: ConfigArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory holding `model.ckpt`.
    #[arg(long, conflicts_with = "checkpoint")]
    run: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    run_id: Option<String>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Comma-separated model seeds (at least 3).
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',', default_value = "full,no_vsc,no_lfr,no_gap")]
    variants: Vec<String>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: ConfigArgs,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',')]
    shifts: Option<Vec<usize>>,
}

#[derive(Args)]
struct InspectArgs {
    path: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<Error>().map_or(1, Error::exit_code);
            ExitCode::from(u8::try_from(code).unwrap_or(1))
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenExperts(a) => gen_experts(&a),
        Command::Train(a) => train(&a.common),
        Command::Eval(a) => evaluate(&a),
        Command::Ablate(a) => ablate(&a),
        Command::Sweep(a) => sweep(&a),
        Command::InspectDataset(a) => inspect(&a.path),
    }
}

fn with_ext(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn strip_upsv(path: &Path) -> PathBuf {
    if path.extension().is_some_and(|e| e == "upsv") {
        path.with_extension("")
    } else {
        path.to_path_buf()
    }
}

fn gen_experts(a: &GenArgs) -> Result<()> {
    let spec = EnvSpec::by_name(&a.env)?;
    let prefix = strip_upsv(&a.out);
    let (upsv, actions, sidecar) = (with_ext(&prefix, "upsv"), with_ext(&prefix, "actions"), with_ext(&prefix, "json"));
    if !a.force {
        if let Some(p) = [&upsv, &actions, &sidecar].into_iter().find(|p| p.exists()) {
            return Err(Error::config("out", format!("{} exists; pass --force to overwrite", p.display())).into());
        }
    }
    let mut run = RunDir::create("gen-experts", a.run_id.clone())?;
    let args = json!({"env": a.env, "levels": a.levels, "frames": a.frames, "seed": a.seed, "out": prefix});
    let outputs = json!({"upsv": upsv, "actions": actions, "sidecar": sidecar});
    run.write_manifest("gen-experts", args, outputs, &[a.seed])?;

    let (videos, log) = generate_expert_videos(&spec, a.levels, a.frames, a.seed)?;
    let plain = databank::encode(&videos, None);
    let companion = databank::encode(&videos, Some(&log));
    write(&upsv, &plain)?;
    write(&actions, &companion)?;
    let side = json!({
        "env": spec,
        "levels": a.levels,
        "frames": videos.n_frames(),
        "episodes": videos.n_episodes(),
        "seed": a.seed,
        "meta": videos.meta,
        "sha256": {"upsv": sha256_hex(&plain), "actions": sha256_hex(&companion)},
    });
    write(&sidecar, serde_json::to_string_pretty(&side)?.as_bytes())?;
    run.record("outputs_sha256", side["sha256"].clone())?;
    run.finish_manifest()?;
    println!("{}", serde_json::to_string_pretty(run.manifest())?);
    Ok(())
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

/// Dataset plus the provenance recorded in its sidecar, if any.
fn load_videos(path: &Path) -> Result<(VideoDataset, Value)> {
    let prefix = strip_upsv(path);
    let upsv = with_ext(&prefix, "upsv");
    if !upsv.exists() {
        return Err(Error::Data(format!("dataset {} not found", upsv.display())).into());
    }
    let mut videos = databank::read_dataset(&upsv)?;
    let hash = sha256_file(&upsv)?;
    let sidecar = with_ext(&prefix, "json");
    if sidecar.exists() {
        let side: Value = serde_json::from_slice(&fs::read(&sidecar)?)
            .map_err(|e| Error::Data(format!("{}: {e}", sidecar.display())))?;
        if side["sha256"]["upsv"].as_str() != Some(hash.as_str()) {
            return Err(Error::Data(format!("{} does not match the hash in {}", upsv.display(), sidecar.display())).into());
        }
        videos.meta = serde_json::from_value::<Option<DatasetMeta>>(side["meta"].clone())
            .map_err(|e| Error::Data(format!("{}: {e}", sidecar.display())))?;
    }
    Ok((videos, json!({"path": upsv, "sha256": hash})))
}

fn load_config(c: &ConfigArgs) -> Result<TrainConfig> {
    let mut config = match &c.config {
        Some(p) => TrainConfig::from_file(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = c.seed {
        config.seed = s;
    }
    config.deterministic |= c.deterministic;
    config.validate()?;
    Ok(config)
}

/// Expert videos for `config`: read from `--data`, or generated in memory.
fn experts(config: &TrainConfig, data: Option<&Path>) -> Result<(VideoDataset, Value)> {
    match data {
        Some(p) => {
            let (videos, info) = load_videos(p)?;
            if let Some(meta) = &videos.meta {
                let levels = meta.first_level_seed..meta.first_level_seed + u64::from(meta.n_levels);
                if levels != config.train_levels() {
                    return Err(Error::Data(format!(
                        "dataset covers levels {levels:?} but the config trains on {:?} \
                         (set expert_levels / expert_seed to match)",
                        config.train_levels()
                    ))
                    .into());
                }
            }
            Ok((videos, info))
        }
        None => {
            let (videos, _) =
                generate_expert_videos(&config.env, config.expert_levels, config.expert_frames, config.expert_seed)?;
            let hash = sha256_hex(&databank::encode(&videos, None));
            Ok((videos, json!({"generated": true, "sha256": hash})))
        }
    }
}

fn eval_set_info(set: &EvalSet) -> Value {
    json!({
        "levels": [set.levels.start, set.levels.end],
        "sha256": sha256_hex(&databank::encode(&set.videos, Some(&set.actions))),
    })
}

fn train(c: &ConfigArgs) -> Result<()> {
    let config = load_config(c)?;
    let (videos, data) = experts(&config, c.data.as_deref())?;
    let set = EvalSet::generate(&config)?;
    let mut run = RunDir::create("train", c.run_id.clone())?;
    run.write_manifest(
        "train",
        serde_json::to_value(&config)?,
        json!({"experts": data, "eval": eval_set_info(&set)}),
        &[config.seed],
    )?;
    let summary = match config.precision {
        Precision::F32 => train_as::<f32>(&config, &videos, &set, &run.path)?,
        Precision::F64 => train_as::<f64>(&config, &videos, &set, &run.path)?,
    };
    let svg = plot::loss_curves_from_csv(&run.file("metrics.csv"))?;
    write(&run.file("loss_curves.svg"), svg.as_bytes())?;
    run.finish_manifest()?;
    println!("run {} -> {}", run.id, run.path.display());
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn train_as<T: Real>(config: &TrainConfig, videos: &VideoDataset, set: &EvalSet, dir: &Path) -> Result<Value> {
    let outcome = trainer::run_full::<T>(config, videos, Some(set), Some(dir))?;
    Ok(serde_json::to_value(&outcome.summary)?)
}

fn evaluate(a: &EvalArgs) -> Result<()> {
    let ckpt = match (&a.run, &a.checkpoint) {
        (Some(r), _) => r.join("model.ckpt"),
        (None, Some(c)) => c.clone(),
        (None, None) => return Err(Error::config("checkpoint", "pass --run or --checkpoint").into()),
    };
    if !ckpt.exists() {
        return Err(Error::Data(format!("checkpoint {} not found", ckpt.display())).into());
    }
    let mut run = RunDir::create("eval", a.run_id.clone())?;
    let metrics = match checkpoint_dtype(&ckpt)?.as_str() {
        "f64" => eval_as::<f64>(&ckpt, &mut run)?,
        _ => eval_as::<f32>(&ckpt, &mut run)?,
    };
    let csv = format!(
        "labeling_accuracy,latent_purity,policy_success,mean_steps,random_success\n{},{},{},{},{}\n",
        metrics.labeling_accuracy, metrics.latent_purity, metrics.policy_success, metrics.mean_steps, metrics.random_success
    );
    write(&run.file("eval.csv"), csv.as_bytes())?;
    write(&run.file("eval.json"), serde_json::to_string_pretty(&metrics)?.as_bytes())?;
    run.finish_manifest()?;
    println!("run {} -> {}", run.id, run.path.display());
    println!("{}", serde_json::to_string_pretty(&metrics)?);
    Ok(())
}

fn eval_as<T: Real>(ckpt: &Path, run: &mut RunDir) -> Result<eval::EvalMetrics> {
    let (agent, config) = trainer::load_agent::<T>(ckpt)?;
    let set = EvalSet::generate(&config)?;
    run.write_manifest(
        "eval",
        serde_json::to_value(&config)?,
        json!({"checkpoint": {"path": ckpt, "sha256": sha256_file(ckpt)?}, "eval": eval_set_info(&set)}),
        &[config.seed],
    )?;
    Ok(eval::evaluate(&agent, &set, &config)?)
}

fn multi_seed_config(c: &ConfigArgs, seeds: Option<&Vec<u64>>) -> Result<TrainConfig> {
    let mut config = load_config(c)?;
    if let Some(s) = seeds {
        config.eval_seeds = s.clone();
    }
    if config.eval_seeds.len() < eval::MIN_SEEDS {
        return Err(Error::config("eval_seeds", format!("need at least {} seeds", eval::MIN_SEEDS)).into());
    }
    Ok(config)
}

fn report_run(
    command: &str,
    c: &ConfigArgs,
    config: &TrainConfig,
    extra: Value,
    body: impl FnOnce(&VideoDataset, &EvalSet) -> upesv::Result<EvalReport>,
    chart: fn(&EvalReport) -> String,
) -> Result<()> {
    let (videos, data) = experts(config, c.data.as_deref())?;
    let set = EvalSet::generate(config)?;
    let mut run = RunDir::create(command, c.run_id.clone())?;
    let mut snapshot = serde_json::to_value(config)?;
    snapshot[command] = extra;
    run.write_manifest(
        command,
        snapshot,
        json!({"experts": data, "eval": eval_set_info(&set)}),
        &config.eval_seeds,
    )?;
    let report = body(&videos, &set)?;
    let csv = run.file(&format!("{}.csv", report.name));
    report.write_csv(&csv)?;
    // Charts are rendered from the CSV so they can be regenerated from it alone.
    let reread = EvalReport::read_csv(&report.name, &csv)?;
    write(&run.file(&format!("{}.svg", report.name)), chart(&reread).as_bytes())?;
    let text = report.summary_text();
    write(&run.file(&format!("{}.txt", report.name)), text.as_bytes())?;
    run.finish_manifest()?;
    println!("run {} -> {}", run.id, run.path.display());
    print!("{text}");
    Ok(())
}

fn ablate(a: &AblateArgs) -> Result<()> {
    let config = multi_seed_config(&a.common, a.seeds.as_ref())?;
    let variants = a
        .variants
        .iter()
        .map(|v| v.parse::<Variant>())
        .collect::<upesv::Result<Vec<_>>>()?;
    let extra = json!({"variants": variants});
    report_run(
        "ablate",
        &a.common,
        &config,
        extra,
        |videos, set| match config.precision {
            Precision::F32 => eval::ablate::<f32>(&config, videos, set, &variants),
            Precision::F64 => eval::ablate::<f64>(&config, videos, set, &variants),
        },
        plot::ablation_bars,
    )
}

fn sweep(a: &SweepArgs) -> Result<()> {
    let config = multi_seed_config(&a.common, a.seeds.as_ref())?;
    let shifts = a.shifts.clone().unwrap_or_else(|| DEFAULT_SHIFTS.to_vec());
    if shifts.is_empty() {
        return Err(Error::config("shifts", "empty shift list").into());
    }
    report_run(
        "sweep",
        &a.common,
        &config,
        json!({"shifts": shifts}),
        |videos, set| match config.precision {
            Precision::F32 => eval::sweep_shift::<f32>(&config, videos, set, &shifts),
            Precision::F64 => eval::sweep_shift::<f64>(&config, videos, set, &shifts),
        },
        plot::sweep_curve,
    )
}

fn inspect(path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(Error::Data(format!("{} not found", path.display())).into());
    }
    let (videos, log) = databank::read_dataset_with_actions(path)?;
    let starts = videos.episode_starts();
    let lens: Vec<usize> = (0..starts.len())
        .map(|e| {
            let end = starts.get(e + 1).map_or(videos.n_frames(), |&s| s as usize);
            end - starts[e] as usize
        })
        .collect();
    let shape = videos.shape();
    let mut report = json!({
        "path": path,
        "sha256": sha256_file(path)?,
        "frames": videos.n_frames(),
        "episodes": videos.n_episodes(),
        "pairs": videos.valid_pairs().len(),
        "shape": {"channels": shape.channels, "height": shape.height, "width": shape.width},
        "episode_length": {
            "min": lens.iter().min(),
            "max": lens.iter().max(),
            "mean": lens.iter().sum::<usize>() as f64 / lens.len() as f64,
        },
        "has_actions": log.is_some(),
    });
    if let Some(log) = log {
        let mut hist = [0usize; N_ACTIONS];
        for &a in log.actions.iter().filter(|&&a| usize::from(a) < N_ACTIONS) {
            hist[usize::from(a)] += 1;
        }
        report["action_histogram"] = json!(hist);
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
