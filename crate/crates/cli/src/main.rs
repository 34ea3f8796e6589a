//! `lane`: synthesize, tokenize, train, generate, repair, evaluate and
//! benchmark from one binary. Every command prints a JSON object on
//! success; failures print `{"error": ...}` to stderr and exit with 1.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use lane_core::config::RunConfig;
use lane_core::engine::{default_batch_limit, generate_mesh, DecodeMode, GenerateInput};
use lane_core::eval::{crossover, evaluate_meshes, sweep, sweep_csv, throughput_bench};
use lane_core::mesh::{
    corrupt_mesh, load_obj, make_pointcloud_set, normalize, synth_shape, synth_shape_jittered, write_obj,
    PointCloudSet, ShapeKind,
};
use lane_core::model::{
    append_jsonl, checkpoint_config, load_model, LaneModel, ModelConfig, ModelError, Trainer,
};
use lane_core::tensor::{gradcheck_store, GradcheckOptions, Tensor};
use lane_core::tokenizer::{
    detokenize, detokenize_best_effort, read_tokens, seq_stats, tokenize, write_tokens, Scheme,
};

#[derive(Parser)]
#[command(name = "lane", version, about = "Latent-space mesh generation pipeline")]
struct Cli {
    /// JSON run configuration; every field is optional.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the seed the command draws from (see each command).
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic shape as OBJ. `--seed` drives vertex jitter.
    Synth(SynthArgs),
    /// Mesh OBJ to a token file.
    Tokenize(TokenizeArgs),
    /// Token file back to OBJ.
    Detokenize(DetokenizeArgs),
    /// Sample the four point clouds of a mesh into JSON. `--seed` drives sampling.
    Sample(SampleArgs),
    /// Train on the configured dataset with checkpoints and a JSON-lines log.
    Train(TrainArgs),
    /// Generate a token sequence and mesh from a cloud or mesh.
    Generate(GenerateArgs),
    /// Generate from a mesh with a fraction of its faces removed first.
    Repair(GenerateArgs),
    /// Geometric metrics of a generated mesh against a reference.
    Eval(EvalArgs),
    /// Decode throughput by mode and batch limit, plus the analytic cost sweep.
    Bench(BenchArgs),
    /// Finite differences against backprop on the micro configuration.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    kind: ShapeKind,
    #[arg(long, default_value_t = 1)]
    resolution: usize,
    /// Vertex jitter amplitude.
    #[arg(long, default_value_t = 0.0)]
    jitter: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TokenizeArgs {
    #[arg(long)]
    input: PathBuf,
    /// Defaults to the configured scheme.
    #[arg(long)]
    scheme: Option<Scheme>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DetokenizeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Keep the faces read before a grammar error instead of failing.
    #[arg(long)]
    best_effort: bool,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    corrupt_fraction: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Output directory; defaults to the configured one.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the configured step count.
    #[arg(long)]
    steps: Option<u64>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// `.obj` mesh or point-cloud JSON written by `sample`.
    #[arg(long)]
    input: PathBuf,
    /// Requested sequence length.
    #[arg(long)]
    length: usize,
    #[arg(long, default_value = "adagraph")]
    mode: DecodeMode,
    /// Pathways per batched forward; defaults to the thread count.
    #[arg(long)]
    batch_limit: Option<usize>,
    #[arg(long)]
    scheme: Option<Scheme>,
    /// Faces removed before sampling a mesh input (repair defaults to 0.2).
    #[arg(long)]
    corrupt_fraction: Option<f64>,
    /// Token file to write.
    #[arg(long)]
    out: PathBuf,
    /// Also write the decoded mesh here.
    #[arg(long)]
    obj: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    generated: PathBuf,
    #[arg(long)]
    reference: PathBuf,
    /// Surface samples per mesh.
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
}

#[derive(Args)]
struct BenchArgs {
    /// Parameters to time; a fresh model from the config otherwise.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Requested length; defaults to the model capacity.
    #[arg(long)]
    length: Option<usize>,
    /// Largest batch limit timed; defaults to the thread count.
    #[arg(long)]
    batch_limit: Option<usize>,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = 2)]
    warmup: usize,
    /// Comma-separated lengths for the analytic cost sweep.
    #[arg(long = "sweep-L", value_name = "L,...", value_delimiter = ',')]
    sweep_l: Vec<usize>,
    /// Skip timing and only run the sweep.
    #[arg(long)]
    sweep_only: bool,
    /// Sweep CSV destination; embedded in the report otherwise.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Standard deviation of the noise added to every parameter first.
    #[arg(long, default_value_t = 0.2)]
    perturb: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Check only this subsequence index instead of all of them.
    #[arg(long)]
    m: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = setup_threads() {
        return fail(e);
    }
    match run(cli) {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("json"));
            ExitCode::SUCCESS
        }
        Err(e) => fail(e),
    }
}

fn fail(e: anyhow::Error) -> ExitCode {
    let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
    eprintln!("{}", json!({ "error": e.to_string(), "causes": &chain[1..] }));
    ExitCode::FAILURE
}

/// `LANE_THREADS` caps the worker pool.
fn setup_threads() -> Result<()> {
    if let Ok(v) = std::env::var("LANE_THREADS") {
        let n: usize = v.parse().with_context(|| format!("LANE_THREADS={v:?} is not a count"))?;
        if n == 0 {
            bail!("LANE_THREADS must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn run(cli: Cli) -> Result<Value> {
    let mut cfg = load_config(cli.config.as_deref())?;
    let explicit_config = cli.config.is_some();
    match cli.cmd {
        Cmd::Synth(a) => {
            let seed = cli.seed.unwrap_or(cfg.seeds.data);
            let mesh = if a.jitter > 0.0 {
                synth_shape_jittered(a.kind, a.resolution, seed, a.jitter)?
            } else {
                synth_shape(a.kind, a.resolution, seed)?
            };
            write_obj(&mesh, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
            Ok(json!({
                "out": a.out,
                "kind": a.kind.name(),
                "resolution": a.resolution,
                "vertices": mesh.num_vertices(),
                "faces": mesh.num_faces(),
            }))
        }
        Cmd::Tokenize(a) => {
            let scheme = a.scheme.unwrap_or(cfg.scheme);
            let mesh = normalize(&load_obj(&a.input).with_context(|| format!("reading {}", a.input.display()))?)?;
            let seq = tokenize(&mesh, scheme)?;
            write_tokens(&seq, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
            let stats = seq_stats(&seq)?;
            Ok(json!({ "out": a.out, "scheme": scheme.name(), "L": seq.len(), "stats": stats }))
        }
        Cmd::Detokenize(a) => {
            let seq = read_tokens(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
            let (mesh, partial, error) = if a.best_effort {
                let d = detokenize_best_effort(&seq);
                (d.mesh, d.partial, d.error.map(|e| e.to_string()))
            } else {
                (detokenize(&seq)?, false, None)
            };
            write_obj(&mesh, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
            Ok(json!({ "out": a.out, "faces": mesh.num_faces(), "partial": partial, "error": error }))
        }
        Cmd::Sample(a) => {
            let seed = cli.seed.unwrap_or(cfg.seeds.data);
            let mut mesh = normalize(&load_obj(&a.input).with_context(|| format!("reading {}", a.input.display()))?)?;
            if a.corrupt_fraction > 0.0 {
                mesh = corrupt_mesh(&mesh, a.corrupt_fraction, seed)?;
            }
            let pcs = make_pointcloud_set(&mesh, cfg.model.counts, seed)?;
            std::fs::write(&a.out, serde_json::to_vec(&pcs)?).with_context(|| format!("writing {}", a.out.display()))?;
            Ok(json!({ "out": a.out, "counts": pcs.counts(), "seed": seed }))
        }
        Cmd::Train(a) => {
            if let Some(s) = cli.seed {
                cfg.seeds.init = s;
            }
            if let Some(steps) = a.steps {
                cfg.schedule.steps = steps;
            }
            cfg.validate()?;
            train(&cfg, a.out.unwrap_or_else(|| cfg.output_dir.clone()), a.resume.as_deref())
        }
        Cmd::Generate(a) => generate_cmd(&cfg, explicit_config, cli.seed, a, false),
        Cmd::Repair(a) => generate_cmd(&cfg, explicit_config, cli.seed, a, true),
        Cmd::Eval(a) => {
            let seed = cli.seed.unwrap_or(cfg.seeds.data);
            let generated = load_obj(&a.generated).with_context(|| format!("reading {}", a.generated.display()))?;
            let reference = load_obj(&a.reference).with_context(|| format!("reading {}", a.reference.display()))?;
            let report = evaluate_meshes(&generated, &reference, a.samples, seed)?;
            Ok(serde_json::to_value(report)?)
        }
        Cmd::Bench(a) => bench(&cfg, explicit_config, cli.seed, a),
        Cmd::Gradcheck(a) => gradcheck(cli.seed.unwrap_or(cfg.seeds.init), a),
    }
}

fn train(cfg: &RunConfig, out: PathBuf, resume: Option<&Path>) -> Result<Value> {
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    std::fs::write(out.join("config.json"), cfg.to_json())?;
    let data: Vec<_> = cfg.build_dataset()?.into_iter().map(|(_, s)| s).collect();
    let model = LaneModel::new(cfg.model.clone(), cfg.seeds.init)?;
    let mut trainer = Trainer::new(model, cfg.trainer_config());
    if let Some(p) = resume {
        trainer.resume(p).with_context(|| format!("resuming from {}", p.display()))?;
    }
    let ckpt = out.join("checkpoint.bin");
    let log = out.join("metrics.jsonl");
    let bs = cfg.schedule.batch_size;
    let mut last = None;
    while trainer.step() < cfg.schedule.steps {
        let start = (trainer.step() as usize * bs) % data.len();
        let batch: Vec<_> = (0..bs).map(|k| data[(start + k) % data.len()].clone()).collect();
        let r = trainer.train_step(&batch)?;
        append_jsonl(&log, &r)?;
        last = Some(r.loss);
        let every = cfg.schedule.checkpoint_every.max(1);
        if trainer.step() % every == 0 || trainer.step() == cfg.schedule.steps {
            trainer.save(&ckpt)?;
        }
    }
    if last.is_none() {
        trainer.save(&ckpt)?;
    }
    let eval_loss = trainer.evaluate(&data)?;
    Ok(json!({
        "checkpoint": ckpt,
        "metrics": log,
        "steps": trainer.step(),
        "last_loss": last,
        "eval_loss": eval_loss,
        "config_hash": cfg.model.hash(),
    }))
}

/// Checkpoint parameters under the configured model when a config was
/// given (a hash mismatch is fatal), else under the stored one.
fn model_from_checkpoint(cfg: &RunConfig, explicit: bool, path: &Path) -> Result<LaneModel> {
    let model_cfg: ModelConfig = if explicit {
        cfg.model.clone()
    } else {
        checkpoint_config(path).with_context(|| format!("reading {}", path.display()))?
    };
    load_model(path, &model_cfg).with_context(|| format!("loading {}", path.display()))
}

fn load_input(path: &Path, corrupt_fraction: f64, seed: u64) -> Result<GenerateInput> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("obj")) {
        let mesh = load_obj(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(GenerateInput::Mesh {
            mesh,
            corrupt_fraction,
            seed,
        })
    } else {
        if corrupt_fraction > 0.0 {
            bail!("--corrupt-fraction needs a mesh input");
        }
        let text = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        let pcs: PointCloudSet = serde_json::from_slice(&text).with_context(|| format!("parsing {}", path.display()))?;
        Ok(GenerateInput::Cloud(pcs))
    }
}

fn generate_cmd(cfg: &RunConfig, explicit: bool, seed: Option<u64>, a: GenerateArgs, repair: bool) -> Result<Value> {
    let model = model_from_checkpoint(cfg, explicit, &a.checkpoint)?;
    let fraction = a.corrupt_fraction.unwrap_or(if repair { 0.2 } else { 0.0 });
    if !(0.0..1.0).contains(&fraction) {
        bail!("--corrupt-fraction {fraction} outside [0, 1)");
    }
    let input = load_input(&a.input, fraction, seed.unwrap_or(cfg.seeds.data))?;
    let scheme = a.scheme.unwrap_or(cfg.scheme);
    let limit = a.batch_limit.unwrap_or_else(default_batch_limit);
    let (decoded, r) = generate_mesh(&model, input, a.length, scheme, a.mode, limit)?;
    write_tokens(&r.tokens, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(p) = &a.obj {
        write_obj(&decoded.mesh, p).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(json!({
        "out": a.out,
        "obj": a.obj,
        "tokens": r.tokens.len(),
        "faces": decoded.mesh.num_faces(),
        "partial": decoded.partial,
        "decode_error": decoded.error.map(|e| e.to_string()),
        "corrupt_fraction": fraction,
        "timing": r.timing,
        "summaries": r.summaries,
    }))
}

fn bench(cfg: &RunConfig, explicit: bool, seed: Option<u64>, a: BenchArgs) -> Result<Value> {
    let mut out = serde_json::Map::new();
    if !a.sweep_l.is_empty() {
        let c = &cfg.model;
        let rows = sweep(c, &a.sweep_l);
        let csv = sweep_csv(&rows);
        match &a.out {
            Some(p) => std::fs::write(p, &csv).with_context(|| format!("writing {}", p.display()))?,
            None => {
                out.insert("csv".into(), json!(csv));
            }
        }
        let max = a.sweep_l.iter().copied().max().unwrap_or(0);
        out.insert("sweep".into(), serde_json::to_value(&rows)?);
        out.insert("crossover".into(), json!(crossover(c, max)));
    }
    if !a.sweep_only {
        let model = match &a.checkpoint {
            Some(p) => model_from_checkpoint(cfg, explicit, p)?,
            None => LaneModel::new(cfg.model.clone(), seed.unwrap_or(cfg.seeds.init))?,
        };
        let mesh = normalize(&synth_shape(ShapeKind::Cube, 1, 0)?)?;
        let pcs = make_pointcloud_set(&mesh, model.config.counts, cfg.seeds.data)?;
        let length = a.length.unwrap_or_else(|| model.config.capacity());
        let top = a.batch_limit.unwrap_or_else(default_batch_limit);
        if top == 0 {
            bail!("--batch-limit must be at least 1");
        }
        let mut settings = vec![(DecodeMode::Serial, 1), (DecodeMode::Adagraph, 1)];
        let mut b = 2;
        while b < top {
            settings.push((DecodeMode::Adagraph, b));
            b *= 2;
        }
        if top > 1 {
            settings.push((DecodeMode::Adagraph, top));
        }
        let report = throughput_bench(&model, &pcs, length, &settings, a.repeats, a.warmup)?;
        out.insert("throughput".into(), serde_json::to_value(report)?);
    }
    Ok(Value::Object(out))
}

fn gradcheck(seed: u64, a: GradcheckArgs) -> Result<Value> {
    let mut model = LaneModel::new(ModelConfig::micro(), seed)?;
    let mut rng = lane_core::rng::derived(seed, "gradcheck-perturb");
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let noise = Tensor::randn(model.store.get(id).shape(), a.perturb, &mut rng);
        for (x, n) in model.store.get_mut(id).data_mut().iter_mut().zip(noise.data()) {
            *x += n;
        }
    }
    let mesh = normalize(&synth_shape(ShapeKind::Grid, 1, 0)?)?;
    let clouds = make_pointcloud_set(&mesh, model.config.counts, seed)?;
    let tokens = tokenize(&mesh, Scheme::HalfEdge)?;
    let mut results = Vec::new();
    let mut worst: f64 = 0.0;
    let all = model.config.num_subsequences(tokens.len());
    let ms: Vec<usize> = match a.m {
        Some(m) if m == 0 || m > all => bail!("--m {m} outside 1..={all}"),
        Some(m) => vec![m],
        None => (1..=all).collect(),
    };
    for m in ms {
        let report = gradcheck_store(
            &model.store,
            |t, s| {
                model
                    .loss(t, s, &clouds, &tokens.tokens, tokens.len(), m)
                    .map_err(|e| match e {
                        ModelError::Tensor(e) => e,
                        other => lane_core::tensor::TensorError::Invalid {
                            op: "loss",
                            msg: other.to_string(),
                        },
                    })
            },
            GradcheckOptions {
                atol: 1e-9,
                ..GradcheckOptions::default()
            },
        )?;
        worst = worst.max(report.max_rel_error);
        results.push(json!({
            "m": m,
            "max_rel_error": report.max_rel_error,
            "max_abs_error": report.max_abs_error,
            "max_abs_grad": report.max_abs_grad,
            "checked": report.checked,
            "worst": report.worst,
        }));
    }
    if worst >= a.tolerance {
        return Err(anyhow!("gradcheck failed: max relative error {worst} >= {}", a.tolerance));
    }
    Ok(json!({ "max_rel_error": worst, "tolerance": a.tolerance, "pathways": results }))
}
