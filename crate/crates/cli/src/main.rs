//! `sparsepatch`: dataset generation, encoding, selection, forward passes,
//! training, cost estimation, gradient checks and threshold sweeps.
//!
//! Exit codes: 0 success, 2 usage, 3 I/O, 4 numerical failure, 5 validation.
//! Failures print one line `error[<kind>]: <message>` to stderr.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sparsepatch_core::config::RunConfig;
use sparsepatch_core::costmodel::{estimate_ours, estimate_vit, fit_kept_fraction, CostInputs, Geometry, OursOptions};
use sparsepatch_core::gopcodec::{encode_gop, read_gop, write_gop, GopClip};
use sparsepatch_core::gradsuite::{run_suite, table, Suite};
use sparsepatch_core::pipeline::{infer_clip, Model};
use sparsepatch_core::psformer::PsformerConfig;
use sparsepatch_core::selector::{select_patches, SelectOptions, SelectorConfig};
use sparsepatch_core::training::{
    save_log_csv, split_dataset, sweep_threshold, two_stage_train, write_sweep_csv, Stage,
};
use sparsepatch_core::videoio::{read_rawvid, synth_dataset, write_rawvid, RawClip, PATCH};
use sparsepatch_core::{Error, ErrorKind};
use sparsepatch_numcore::{Graph, SplitSeed};

const SEED_ENV: &str = "SPARSEPATCH_SEED";

#[derive(Parser)]
#[command(
    name = "sparsepatch",
    version,
    about = "Sparse-patch video re-identification toolkit"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic identity dataset as .rv1 clips.
    Synth(SynthArgs),
    /// Encode a raw clip into a GOP file.
    Encode(EncodeArgs),
    /// Score and select P-frame patches.
    Select(SelectArgs),
    /// Run the sparse pipeline on one clip.
    Forward(ForwardArgs),
    /// Two-stage training on the configured synthetic set.
    Train(TrainArgs),
    /// Analytic MAC estimate.
    Macs(MacsArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Held-out routing sweep over thresholds.
    SweepS(SweepArgs),
}

#[derive(Args)]
struct SeedArg {
    /// Seed; SPARSEPATCH_SEED overrides it when set.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SynthArgs {
    /// Run configuration (only dataset keys are used); defaults when absent.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Infer,
    Train,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    clip: PathBuf,
    /// GOP of the clip; encoded on the fly when absent.
    #[arg(long)]
    gop: Option<PathBuf>,
    /// Model checkpoint; a seeded toy model when absent.
    #[arg(long)]
    params: Option<PathBuf>,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Args)]
struct SelectArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_enum, default_value = "infer")]
    mode: Mode,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ForwardArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Routing threshold; the checkpoint's value when absent.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Replaces the configured training seed when given (or via SPARSEPATCH_SEED).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct MacsArgs {
    /// `HxWxT`.
    #[arg(long, default_value = "128x256x8")]
    geometry: String,
    #[arg(long, default_value_t = 768)]
    dim: usize,
    #[arg(long, default_value_t = 12)]
    layers: usize,
    #[arg(long, default_value_t = 12)]
    heads: usize,
    #[arg(long, default_value_t = 1.0)]
    kept_fraction: f64,
    #[arg(long, default_value_t = 0.0)]
    open_rate: f64,
    /// Dense ViT baseline instead of the selective pipeline.
    #[arg(long)]
    baseline: bool,
    /// Leave the selection CNN and selector MLP out of the estimate.
    #[arg(long)]
    exclude_selection: bool,
    /// Bisect the uniform kept fraction that reaches this many GMACs.
    #[arg(long)]
    fit_target: Option<f64>,
    #[arg(long)]
    json: bool,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value = "all")]
    module: String,
    /// Also write the rows as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, default_value_t = 0.4)]
    from: f64,
    #[arg(long, default_value_t = 0.9)]
    to: f64,
    #[arg(long, default_value_t = 0.1)]
    step: f64,
    /// Run configuration describing the data and, without --params, the model.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    seed: SeedArg,
}

/// Failure with the exit class it maps to.
struct Failure {
    kind: ErrorKind,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            kind: e.kind(),
            msg: e.to_string(),
        }
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure {
        kind: ErrorKind::Usage,
        msg: msg.into(),
    }
}

type CmdResult = Result<(), Failure>;

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Usage => 2,
        ErrorKind::Io => 3,
        ErrorKind::Numerical => 4,
        ErrorKind::Validation => 5,
    }
}

fn kind_name(kind: ErrorKind) -> &'static str {
    match kind {
        ErrorKind::Usage => "usage",
        ErrorKind::Io => "io",
        ErrorKind::Numerical => "numerical",
        ErrorKind::Validation => "validation",
    }
}

fn resolve_seed(flag: u64) -> Result<u64, Failure> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(flag),
    }
}

fn write_file(path: &Path, contents: &[u8]) -> CmdResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("output serializes");
    s.push('\n');
    s
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn cmd_synth(a: SynthArgs) -> CmdResult {
    let mut cfg = load_config(a.spec.as_deref())?;
    cfg.synth.seed = resolve_seed(a.seed.seed)?;
    let clips = synth_dataset(&cfg.synth)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let per = cfg.synth.clips_per_identity as usize;
    for (i, clip) in clips.iter().enumerate() {
        let path = a.out.join(format!("id{:03}_clip{:02}.rv1", i / per, i % per));
        write_rawvid(clip, &path)?;
    }
    println!("wrote {} clips to {}", clips.len(), a.out.display());
    Ok(())
}

fn cmd_encode(a: EncodeArgs) -> CmdResult {
    let clip = read_rawvid(&a.input)?;
    let gop = encode_gop(&clip)?;
    write_gop(&gop, &a.out)?;
    Ok(())
}

fn load_inputs(a: &ModelArgs) -> Result<(Model, RawClip, GopClip), Failure> {
    let clip = read_rawvid(&a.clip)?;
    let gop = match &a.gop {
        Some(p) => read_gop(p)?,
        None => encode_gop(&clip)?,
    };
    if gop.height != clip.height || gop.width != clip.width || gop.frames() != clip.frames {
        return Err(Error::validation("inputs", "clip and GOP geometry differ").into());
    }
    let model = match &a.params {
        Some(p) => Model::load(p)?,
        None => {
            let cfg = PsformerConfig::toy(clip.height / PATCH, clip.width / PATCH, clip.frames);
            Model::init(SelectorConfig::toy(), cfg, 0, resolve_seed(a.seed.seed)?)?
        }
    };
    Ok((model, clip, gop))
}

fn cmd_select(a: SelectArgs) -> CmdResult {
    let (model, clip, gop) = load_inputs(&a.model)?;
    let opts = match a.mode {
        Mode::Infer => SelectOptions::infer(),
        Mode::Train => SelectOptions::train(resolve_seed(a.model.seed.seed)?.split(0x5E1)),
    };
    let mut g = Graph::new();
    let run = select_patches(&mut g, &model.params, &model.selector, &clip, &gop, &opts)?;
    let mut s = run.result.to_json();
    s.push('\n');
    write_file(&a.out, s.as_bytes())
}

#[derive(Serialize)]
struct ForwardJson {
    feature: Vec<f64>,
    routing: serde_json::Value,
    kept_counts: Vec<usize>,
    kept_fraction: f64,
    counted_gmacs: Option<f64>,
    cost: sparsepatch_core::costmodel::CostReport,
}

fn cmd_forward(a: ForwardArgs) -> CmdResult {
    let (mut model, clip, gop) = load_inputs(&a.model)?;
    if let Some(s) = a.threshold {
        model.psformer.threshold = s;
        model.psformer.validate()?;
    }
    let run = infer_clip(&model, &clip, Some(&gop))?;
    let counts = run.forward.kept_counts.clone();
    let n = model.psformer.patches();
    let kept_fraction = if counts.is_empty() {
        0.0
    } else {
        counts.iter().sum::<usize>() as f64 / (counts.len() * n) as f64
    };
    let out = ForwardJson {
        feature: run.feature,
        routing: run.forward.output.routing.to_json_value(),
        kept_counts: counts,
        kept_fraction,
        counted_gmacs: run.cost.counted_gmacs,
        cost: run.cost,
    };
    write_file(&a.out, to_json(&out).as_bytes())
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let mut cfg = load_config(a.config.as_deref())?;
    if std::env::var_os(SEED_ENV).is_some() || a.seed.is_some() {
        cfg.train.seed = resolve_seed(a.seed.unwrap_or(cfg.train.seed))?;
    }
    let model = match &cfg.init_params {
        Some(p) => Model::load(p)?,
        None => Model::init(
            cfg.selector.clone(),
            cfg.psformer.clone(),
            cfg.synth.identity_count as usize,
            cfg.train.seed,
        )?,
    };
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    write_file(&a.out.join("config.txt"), cfg.to_text().as_bytes())?;
    let stage1_last = cfg.train.stage1_epochs.checked_sub(1);
    let out_dir = a.out.clone();
    let outcome = two_stage_train(model, &cfg.synth, &cfg.train, |row, m| {
        eprintln!(
            "epoch {:>3} stage {} cent {:.4} tri {:.4} err {:.4} train {:.3} heldout {:.3}",
            row.epoch, row.stage, row.loss_cent, row.loss_tri, row.loss_error, row.train_rank1, row.heldout_rank1
        );
        if Some(row.epoch) == stage1_last && row.stage == Stage::Dense.number() {
            m.save(&out_dir.join("model_stage1.json"))?;
        }
        Ok(())
    })?;
    outcome.model.save(&a.out.join("model.json"))?;
    save_log_csv(&outcome.log, &a.out.join("log.csv"))?;
    Ok(())
}

fn parse_geometry(s: &str) -> Result<(usize, usize, usize), Failure> {
    let parts: Vec<&str> = s.split('x').collect();
    let bad = || usage(format!("--geometry {s:?} is not HxWxT"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let v: Vec<usize> = parts
        .iter()
        .map(|p| p.parse())
        .collect::<Result<_, _>>()
        .map_err(|_| bad())?;
    Ok((v[0], v[1], v[2]))
}

#[derive(Serialize)]
struct FitJson {
    target_gmacs: f64,
    open_rate: f64,
    kept_fraction: Option<f64>,
    report: Option<sparsepatch_core::costmodel::CostReport>,
}

fn cmd_macs(a: MacsArgs) -> CmdResult {
    let (height, width, frames) = parse_geometry(&a.geometry)?;
    let geom = Geometry {
        height,
        width,
        frames,
        dim: a.dim,
        layers: a.layers,
        heads: a.heads,
    };
    let opts = OursOptions {
        include_selection: !a.exclude_selection,
        ..OursOptions::base()
    };
    let text = if let Some(target) = a.fit_target {
        let f = fit_kept_fraction(&geom, target, a.open_rate, &opts, 0.0, 1.0)?;
        let report = f
            .map(|f| estimate_ours(&geom, &CostInputs::uniform(&geom, f, a.open_rate), &opts))
            .transpose()?;
        if a.json {
            to_json(&FitJson {
                target_gmacs: target,
                open_rate: a.open_rate,
                kept_fraction: f,
                report,
            })
        } else {
            match (f, report) {
                (Some(f), Some(r)) => format!("fitted kept_fraction {f:.6}\n{}", r.to_table()),
                _ => format!("target {target} GMACs is not reachable at open_rate {}\n", a.open_rate),
            }
        }
    } else {
        let report = if a.baseline {
            estimate_vit(&geom)?
        } else {
            estimate_ours(&geom, &CostInputs::uniform(&geom, a.kept_fraction, a.open_rate), &opts)?
        };
        if a.json {
            to_json(&report)
        } else {
            report.to_table()
        }
    };
    match &a.out {
        Some(p) => write_file(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_gradcheck(a: GradcheckArgs) -> CmdResult {
    let suite: Suite = a.module.parse().map_err(usage)?;
    let rows = run_suite(suite, resolve_seed(a.seed.seed)?)?;
    print!("{}", table(&rows));
    if let Some(p) = &a.out {
        write_file(p, to_json(&rows).as_bytes())?;
    }
    let failed: Vec<String> = rows
        .iter()
        .filter(|r| !r.pass)
        .map(|r| format!("{}/{}", r.module, r.check))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure {
            kind: ErrorKind::Numerical,
            msg: format!("gradient check failed: {}", failed.join(", ")),
        })
    }
}

/// `from, from + step, ..` up to `to` inclusive, rounded to nine decimals.
fn thresholds(from: f64, to: f64, step: f64) -> Result<Vec<f64>, Failure> {
    if !(step > 0.0) || !from.is_finite() || !to.is_finite() || to < from {
        return Err(usage("sweep needs finite --from <= --to and a positive --step"));
    }
    let count = ((to - from) / step + 1e-9).floor() as usize + 1;
    Ok((0..count)
        .map(|i| ((from + i as f64 * step) * 1e9).round() / 1e9)
        .collect())
}

fn cmd_sweep(a: SweepArgs) -> CmdResult {
    let values = thresholds(a.from, a.to, a.step)?;
    let cfg = load_config(a.config.as_deref())?;
    let seed = resolve_seed(a.seed.seed)?;
    let model = match &a.params {
        Some(p) => Model::load(p)?,
        None => Model::init(cfg.selector.clone(), cfg.psformer.clone(), 0, seed)?,
    };
    let (_, held) = split_dataset(&cfg.synth, cfg.train.heldout_per_id)?;
    let rows = sweep_threshold(&model, &held, cfg.train.frames, seed, &values)?;
    let mut buf = Vec::new();
    write_sweep_csv(&rows, &mut buf)?;
    write_file(&a.out, &buf)
}

fn run(cli: Cli) -> CmdResult {
    match cli.cmd {
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::Encode(a) => cmd_encode(a),
        Cmd::Select(a) => cmd_select(a),
        Cmd::Forward(a) => cmd_forward(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Macs(a) => cmd_macs(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
        Cmd::SweepS(a) => cmd_sweep(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind as Clap;
            if matches!(e.kind(), Clap::DisplayHelp | Clap::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let first = e.to_string();
            let line = first
                .lines()
                .next()
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            eprintln!("error[usage]: {line}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error[{}]: {}", kind_name(f.kind), f.msg.replace('\n', " "));
            ExitCode::from(exit_code(f.kind))
        }
    }
}
