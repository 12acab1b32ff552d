use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use glsmamba::blocks::{Ablation, Model};
use glsmamba::bench::{run_bench, BenchConfig};
use glsmamba::checks::{run_gradchecks, Scope, GRAD_TOLERANCE};
use glsmamba::error::Error;
use glsmamba::pipeline::{
    evaluate, predict, synth_dataset, train, Checkpoint, PckTally, StopReason, TrainConfig, Trainer, CHECKPOINT_FILE,
};
use glsmamba::routes::{Grid, PixelOrder, RouteId, RouteLayout, RouteOptions, Stacking};

const CONFIG_FILE: &str = "config.toml";

#[derive(Parser)]
#[command(name = "glsm", version, about = "Spatiotemporal selective-scan pose estimation at desk scale")]
#[command(after_help = "Config fields can be overridden with --section.key=value, e.g. --train.epochs=3 or --model.window.wh=4.")]
struct Cli {
    /// Where runs write their artifacts.
    #[arg(long, global = true, env = "GLSM_OUT_DIR", default_value = "glsm-out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the synthetic dataset; writes metrics.jsonl, checkpoint.bin and config.toml.
    Train(TrainArgs),
    /// Score a checkpoint with PCK.
    Eval(EvalArgs),
    /// Run the 64-bit finite-difference suite.
    Gradcheck(GradArgs),
    /// Time the selective scan against naive self-attention.
    Bench(BenchArgs),
    /// Emit token_index,t,y,x for scan routes.
    RoutesDump(RoutesArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// backbone-only, gsm-only, full, unified-routes, unified-space-routes or no-stmm.
    #[arg(long)]
    ablation: Option<Ablation>,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Defaults to checkpoint.bin in the output directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Must describe the same model as the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset seed; defaults to the held-out seed of the run.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    clips: Option<usize>,
    /// Score the training clips instead of the held-out split.
    #[arg(long, conflicts_with = "seed")]
    train_split: bool,
    /// Write each predicted heatmap as a grayscale PNG.
    #[arg(long)]
    dump_heatmaps: bool,
}

#[derive(Args)]
struct GradArgs {
    #[arg(long, default_value = "op")]
    scope: Scope,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',')]
    lengths: Option<Vec<usize>>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    state: Option<usize>,
    #[arg(long)]
    memory_cap_mib: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct RoutesArgs {
    #[arg(long, default_value_t = 5)]
    frames: usize,
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 24)]
    width: usize,
    /// Print one route to stdout; without it all six go to route<N>.csv files.
    #[arg(long)]
    route: Option<RouteId>,
    #[arg(long, default_value = "vertical")]
    stacking: String,
    #[arg(long, default_value = "row-major")]
    depth_order: String,
}

enum Failure {
    Lib(Error),
    Suite(usize),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Lib(e.into())
    }
}

type CmdResult = Result<(), Failure>;

/// Splits `--section.key=value` overrides from the arguments clap sees.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for a in args {
        match a.strip_prefix("--").and_then(|s| s.split_once('=')) {
            Some((key, value)) if key.contains('.') => overrides.push((key.to_string(), value.to_string())),
            _ => rest.push(a),
        }
    }
    (rest, overrides)
}

/// TOML literal if it parses as one, else a bare string.
fn parse_scalar(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(root: &mut toml::Table, key: &str, raw: &str) -> Result<(), Error> {
    let parts: Vec<&str> = key.split('.').collect();
    let (last, path) = parts.split_last().expect("split yields at least one part");
    let mut table = root;
    for p in path {
        let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("--{key}: {p} is not a section")))?;
    }
    table.insert(last.to_string(), parse_scalar(raw));
    Ok(())
}

/// File values, then flag overrides, validated.
fn resolve_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<TrainConfig, Error> {
    let text = match path {
        Some(p) => fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut root: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    for (k, v) in overrides {
        apply_override(&mut root, k, v)?;
    }
    let cfg: TrainConfig = toml::Value::Table(root).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: TrainArgs, out: &Path, overrides: &[(String, String)]) -> CmdResult {
    let mut cfg = resolve_config(a.config.as_deref(), overrides)?;
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(ab) = a.ablation {
        ab.apply(&mut cfg.model);
    }
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let trainer = if a.resume {
        let mut ckpt = Checkpoint::load(&out.join(CHECKPOINT_FILE))?;
        ckpt.check_model(&cfg)?;
        ckpt.config = cfg.clone();
        Trainer::from_checkpoint(&ckpt)?
    } else {
        Trainer::new(&cfg)?
    };
    fs::write(out.join(CONFIG_FILE), cfg.to_toml()?)?;
    println!("parameters: {}", trainer.store.numel());
    let outcome = train(trainer, Some(out), |m| {
        println!("epoch {:>3}  lr {:.1e}  loss {:.6}  pck {:.4}  skipped {}", m.epoch, m.lr, m.loss, m.pck, m.skipped_steps)
    })?;
    let held_out = synth_dataset(&cfg.data.spec(&cfg.model), cfg.data.eval_clips, cfg.data.eval_seed)?;
    let r = outcome.trainer.evaluate(&held_out)?;
    if outcome.stop == StopReason::TimeBudget {
        println!("stopped at the time budget after {} epochs", outcome.trainer.epoch);
    }
    println!("held-out loss {:.6}  pck {:.4}  ({:.1} s)", r.loss, r.pck.mean(), outcome.seconds);
    Ok(())
}

fn print_pck(pck: &PckTally) {
    for (k, v) in pck.per_keypoint().iter().enumerate() {
        println!("keypoint {k}: {v:.4}");
    }
    println!("mean: {:.4}", pck.mean());
}

fn save_heatmap(path: &Path, map: &[f32], h: usize, w: usize) -> Result<(), Error> {
    let (lo, hi) = map.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let bytes = map.iter().map(|&v| ((v - lo) / span * 255.0).round() as u8).collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, bytes).expect("buffer sized h * w");
    img.save(path).map_err(|e| Error::Io(std::io::Error::other(e)))
}

fn cmd_eval(a: EvalArgs, out: &Path) -> CmdResult {
    let path = a.checkpoint.unwrap_or_else(|| out.join(CHECKPOINT_FILE));
    let ckpt = Checkpoint::load(&path)?;
    if let Some(c) = &a.config {
        ckpt.check_model(&resolve_config(Some(c), &[])?)?;
    }
    let cfg = &ckpt.config;
    let (model, mut store) = Model::new(&cfg.model, cfg.train.seed)?;
    store.load_from(&ckpt.params)?;
    let (seed, default_n) = if a.train_split {
        (cfg.data.seed, cfg.data.train_clips)
    } else {
        (a.seed.unwrap_or(cfg.data.eval_seed), cfg.data.eval_clips)
    };
    let samples = synth_dataset(&cfg.data.spec(&cfg.model), a.clips.unwrap_or(default_n), seed)?;
    let report = evaluate(&model, &store, &samples, cfg.train.pck_threshold)?;
    println!("clips {}  seed {seed}  loss {:.6}", samples.len(), report.loss);
    print_pck(&report.pck);
    if a.dump_heatmaps {
        let dir = out.join("heatmaps");
        fs::create_dir_all(&dir)?;
        let (h, w) = (cfg.model.height, cfg.model.width);
        for (i, s) in samples.iter().enumerate() {
            let maps = predict(&model, &store, &s.features)?;
            for (k, map) in maps.data().chunks_exact(h * w).enumerate() {
                save_heatmap(&dir.join(format!("sample{i:03}_kp{k}.png")), map, h, w)?;
            }
        }
        println!("heatmaps written to {}", dir.display());
    }
    Ok(())
}

fn cmd_gradcheck(a: GradArgs) -> CmdResult {
    let rows = run_gradchecks(a.scope, a.seed)?;
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut failed = 0;
    for r in &rows {
        let verdict = if r.passed() { "PASS" } else { "FAIL" };
        failed += usize::from(!r.passed());
        println!("{:<width$}  {:.3e}  {verdict}", r.name, r.max_rel);
    }
    println!("{} of {} within {GRAD_TOLERANCE:e}", rows.len() - failed, rows.len());
    if failed > 0 {
        return Err(Failure::Suite(failed));
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs, out: &Path) -> CmdResult {
    let d = BenchConfig::default();
    let cfg = BenchConfig {
        lengths: a.lengths.unwrap_or(d.lengths),
        reps: a.reps.unwrap_or(d.reps),
        channels: a.channels.unwrap_or(d.channels),
        state: a.state.unwrap_or(d.state),
        memory_cap_bytes: a.memory_cap_mib.map_or(d.memory_cap_bytes, |m| m << 20),
        seed: a.seed,
    };
    println!("L,scan_ms,attn_ms");
    let report = run_bench(&cfg, |r| {
        let attn = r.attn_ms.map_or("OOM".to_string(), |v| format!("{v:.3}"));
        println!("{},{:.3},{attn}", r.len, r.scan_ms);
    })?;
    fs::create_dir_all(out)?;
    fs::write(out.join("bench.csv"), report.to_csv())?;
    println!("scan exponent {:.3}", report.scan_exponent);
    match report.attn_exponent {
        Some(e) => println!("attention exponent {e:.3}"),
        None => println!("attention exponent n/a"),
    }
    Ok(())
}

fn route_csv(layout: &RouteLayout) -> String {
    let mut s = String::from("token_index,t,y,x\n");
    for [i, t, y, x] in layout.rows() {
        s.push_str(&format!("{i},{t},{y},{x}\n"));
    }
    s
}

fn cmd_routes(a: RoutesArgs, out: &Path) -> CmdResult {
    let stacking = match a.stacking.as_str() {
        "vertical" => Stacking::Vertical,
        "horizontal" => Stacking::Horizontal,
        s => return Err(Error::Config(format!("--stacking {s:?}: expected vertical or horizontal")).into()),
    };
    let depth_order = match a.depth_order.as_str() {
        "row-major" => PixelOrder::RowMajor,
        "column-major" => PixelOrder::ColumnMajor,
        s => return Err(Error::Config(format!("--depth-order {s:?}: expected row-major or column-major")).into()),
    };
    if a.frames == 0 || a.height == 0 || a.width == 0 {
        return Err(Error::Config("grid extents must be positive".into()).into());
    }
    let opts = RouteOptions { stacking, depth_order };
    let grid = Grid::new(a.frames, a.height, a.width);
    match a.route {
        Some(id) => print!("{}", route_csv(&RouteLayout::new(id, grid, opts))),
        None => {
            fs::create_dir_all(out)?;
            for id in RouteId::ALL {
                let path = out.join(format!("route{}.csv", id.number()));
                fs::write(&path, route_csv(&RouteLayout::new(id, grid, opts)))?;
                println!("{} ({}) -> {}", id.number(), id.name(), path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let (args, overrides) = split_overrides(std::env::args().collect());
    let cli = Cli::parse_from(args);
    let uses_config = matches!(cli.cmd, Command::Train(_));
    if !overrides.is_empty() && !uses_config {
        eprintln!("error: --section.key=value overrides apply to train only");
        return ExitCode::from(2);
    }
    let out = cli.out_dir;
    let result = match cli.cmd {
        Command::Train(a) => cmd_train(a, &out, &overrides),
        Command::Eval(a) => cmd_eval(a, &out),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Bench(a) => cmd_bench(a, &out),
        Command::RoutesDump(a) => cmd_routes(a, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Suite(n)) => {
            eprintln!("error: {n} check(s) failed");
            ExitCode::from(4)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                Error::NonFinite(_) => 3,
                _ => 1,
            })
        }
    }
}
