//! `randattn`: train, evaluate, benchmark and inspect random token-grouping
//! attention models.
//!
//! Exit status is 0 on success, 1 on usage errors (bad flags, unreadable or
//! invalid configuration) and 2 when the requested work fails.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use randattn::backbone::Backbone;
use randattn::diagnostics::{
    bench_attention, gradient_suite, AttentionBench, BenchMode, BenchReport,
};
use randattn::harness::{
    evaluate, fingerprint_text, head_similarity_report, load_datasets, roadmap_sweep, train,
    write_roadmap_csv, ExperimentConfig,
};
use randattn::randgroup::{deserialize_plan, serialize_plan, GroupPlan, GroupingMode};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(
    name = "randattn",
    version,
    about = "Random token-grouping attention experiments"
)]
struct Cli {
    /// Flat key=value file overriding the built-in defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Experiment seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory, depending on the subcommand.
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Extra config override, `key=value`; repeatable, applied last.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a backbone; writes epochs.csv, head_similarity.csv, report.json,
    /// checkpoint.rack and config.txt into the output directory.
    Train,
    /// Top-1 accuracy of a checkpoint on the configured dataset.
    Eval(EvalArgs),
    /// Median forward time of one attention layer.
    Bench(BenchArgs),
    /// Finite-difference checks of every op and a 2-block backbone.
    Gradcheck,
    /// Adjacent-head similarity curves of a checkpoint.
    Simhead(SimheadArgs),
    /// The four-stage grouping ablation sweep.
    Roadmap(RoadmapArgs),
    /// Generate, inspect or interpolate a plan file.
    Plan(PlanArgs),
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// `train` or `val`.
    #[arg(long, default_value = "val")]
    split: String,
}

#[derive(Args)]
struct BenchArgs {
    /// `random`, `window` or `dense`.
    #[arg(long, default_value = "random")]
    mode: String,
    #[arg(long, default_value_t = 16)]
    group: usize,
    /// Token grid side; N = side * side.
    #[arg(long, default_value_t = 32)]
    side: usize,
    #[arg(long, default_value_t = 64)]
    d: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 20)]
    reps: usize,
    #[arg(long, default_value_t = 10)]
    warmups: usize,
}

#[derive(Args)]
struct SimheadArgs {
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct RoadmapArgs {
    /// Comma-separated run seeds.
    #[arg(long, default_value = "0,1,2", value_delimiter = ',')]
    seeds: Vec<u64>,
}

#[derive(Args)]
struct PlanArgs {
    /// Print the plan stored in FILE.
    #[arg(long, value_name = "FILE", conflicts_with = "interpolate")]
    inspect: Option<PathBuf>,
    /// Resample the plan in FILE to --h x --w with --group.
    #[arg(long, value_name = "FILE")]
    interpolate: Option<PathBuf>,
    #[arg(long)]
    h: Option<usize>,
    #[arg(long)]
    w: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    group: Option<usize>,
    /// Grouping mode label, e.g. `per-head-fixed` or `window-4x4`.
    #[arg(long, default_value = "per-head-fixed")]
    mode: String,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<randattn::Error> for Failure {
    fn from(e: randattn::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nUsage: randattn [--config FILE] [--seed N] [--out PATH] <COMMAND>\nRun `randattn --help` for details.");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Outcome {
    let config = build_config(&cli)?;
    let out = cli.out.as_deref();
    match cli.command {
        Command::Train => cmd_train(config, out),
        Command::Eval(a) => cmd_eval(config, &a, out),
        Command::Bench(a) => cmd_bench(&config, &a, out),
        Command::Gradcheck => cmd_gradcheck(&config, out),
        Command::Simhead(a) => cmd_simhead(config, &a, out),
        Command::Roadmap(a) => cmd_roadmap(config, &a, out),
        Command::Plan(a) => cmd_plan(&config, &a, out),
    }
}

fn build_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let mut text = String::new();
    if let Some(path) = &cli.config {
        text = fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
        text.push('\n');
    }
    for kv in &cli.overrides {
        if !kv.contains('=') {
            return Err(Failure::Usage(format!(
                "--set expects key=value, got '{kv}'"
            )));
        }
        text.push_str(kv);
        text.push('\n');
    }
    if let Some(seed) = cli.seed {
        let _ = writeln!(text, "seed={seed}");
    }
    ExperimentConfig::from_kv_str(&text).map_err(|e| Failure::Usage(e.to_string()))
}

/// Writes `contents` to `path`, or to stdout without a path.
fn emit(path: Option<&Path>, contents: &str) -> Outcome {
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(p, contents)?;
        }
        None => std::io::stdout().write_all(contents.as_bytes())?,
    }
    Ok(())
}

fn out_dir(config: &ExperimentConfig, out: Option<&Path>, default: &str) -> PathBuf {
    out.map(Path::to_path_buf)
        .or_else(|| config.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from(default))
}

fn cmd_train(mut config: ExperimentConfig, out: Option<&Path>) -> Outcome {
    let dir = out_dir(&config, out, "randattn-train");
    config.output_dir = Some(dir.clone());
    let (report, _) = train(&config)?;
    let fp = config.fingerprint();
    fs::write(
        dir.join("config.txt"),
        format!("# fingerprint={fp}\n{}", config.to_kv()),
    )?;
    for e in &report.epochs {
        println!(
            "epoch {:>3}  loss {:.6}  val_acc {:.4}",
            e.epoch, e.train_loss, e.val_acc
        );
    }
    println!(
        "final_val_acc={:.6} head_sim={:.6} checkpoint={} fingerprint={fp} out={}",
        report.final_val_acc,
        report.head_similarity.mean(),
        report.checkpoint_hash,
        dir.display()
    );
    Ok(())
}

/// `config` with the checkpoint's architecture.
fn load_checkpoint(
    config: &mut ExperimentConfig,
    path: &Path,
) -> Result<(Backbone, Option<String>), Failure> {
    let mut f =
        fs::File::open(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    let (model, fp) = Backbone::read_checkpoint_tagged(&mut f)?;
    config.backbone = model.config().clone();
    Ok((model, fp))
}

fn cmd_eval(mut config: ExperimentConfig, a: &EvalArgs, out: Option<&Path>) -> Outcome {
    let (model, trained_fp) = load_checkpoint(&mut config, &a.checkpoint)?;
    let (train_set, val_set) = load_datasets(&config)?;
    let data = match a.split.as_str() {
        "train" => &train_set,
        "val" => &val_set,
        s => return Err(Failure::Usage(format!("unknown split '{s}' (train, val)"))),
    };
    let acc = evaluate(&model, data)?;
    let fp = config.fingerprint();
    let json = serde_json::json!({
        "fingerprint": fp,
        "checkpoint_fingerprint": trained_fp,
        "checkpoint": a.checkpoint.display().to_string(),
        "split": a.split,
        "n": data.len(),
        "accuracy": acc,
    });
    println!(
        "accuracy={acc:.6} split={} n={} fingerprint={fp}",
        a.split,
        data.len()
    );
    if let Some(p) = out {
        emit(
            Some(p),
            &(serde_json::to_string_pretty(&json).map_err(randattn::Error::from)? + "\n"),
        )?;
    }
    Ok(())
}

fn cmd_bench(config: &ExperimentConfig, a: &BenchArgs, out: Option<&Path>) -> Outcome {
    let mode = BenchMode::parse(&a.mode).map_err(|e| Failure::Usage(e.to_string()))?;
    let spec = AttentionBench {
        side: a.side,
        d_model: a.d,
        n_heads: a.heads,
        group_size: a.group,
        reps: a.reps,
        warmups: a.warmups,
        seed: config.seed,
    };
    let fp = fingerprint_text(&format!(
        "bench\nmode={}\nside={}\nd={}\nheads={}\ngroup={}\nreps={}\nwarmups={}\nseed={}\n",
        a.mode, a.side, a.d, a.heads, a.group, a.reps, a.warmups, config.seed
    ));
    let report = bench_attention(mode, &spec)?;
    emit(
        out,
        &format!("{}\n{}\n", BenchReport::CSV_HEADER, report.csv_row(&fp)),
    )?;
    if out.is_some() {
        println!(
            "{} n={} group={} median {:.3} ms",
            report.label, report.n, report.group_size, report.time_ms
        );
    }
    Ok(())
}

fn cmd_gradcheck(config: &ExperimentConfig, out: Option<&Path>) -> Outcome {
    let cases = gradient_suite(config.seed)?;
    let fp = fingerprint_text(&format!("gradcheck\nseed={}\n", config.seed));
    let mut csv =
        String::from("name,max_rel_err,max_abs_err,checked,tolerance,passed,fingerprint\n");
    let (mut op_max, mut model_max) = (0.0f64, 0.0f64);
    for c in &cases {
        println!(
            "{:<24} rel {:.3e}  abs {:.3e}  ({} entries, tol {:.0e})  {}",
            c.name,
            c.max_rel_err,
            c.max_abs_err,
            c.checked,
            c.tolerance,
            if c.passed() { "ok" } else { "FAIL" }
        );
        let _ = writeln!(
            csv,
            "{},{:e},{:e},{},{:e},{},{fp}",
            c.name,
            c.max_rel_err,
            c.max_abs_err,
            c.checked,
            c.tolerance,
            c.passed()
        );
        if c.name.starts_with("backbone") {
            model_max = model_max.max(c.max_rel_err);
        } else {
            op_max = op_max.max(c.max_rel_err);
        }
    }
    println!("max relative error: ops {op_max:.3e}, backbone {model_max:.3e}");
    if let Some(p) = out {
        emit(Some(p), &csv)?;
    }
    match cases.iter().filter(|c| !c.passed()).count() {
        0 => Ok(()),
        n => Err(Failure::Runtime(format!(
            "{n} gradient checks exceeded their tolerance"
        ))),
    }
}

fn cmd_simhead(mut config: ExperimentConfig, a: &SimheadArgs, out: Option<&Path>) -> Outcome {
    let (model, _) = load_checkpoint(&mut config, &a.checkpoint)?;
    let (_, val_set) = load_datasets(&config)?;
    let report = head_similarity_report(&model, &val_set, &config.fingerprint())?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    emit(out, &String::from_utf8_lossy(&csv))
}

fn cmd_roadmap(mut config: ExperimentConfig, a: &RoadmapArgs, out: Option<&Path>) -> Outcome {
    if a.seeds.is_empty() {
        return Err(Failure::Usage("--seeds needs at least one seed".into()));
    }
    let dir = out_dir(&config, out, "randattn-roadmap");
    config.output_dir = Some(dir.clone());
    let rows = roadmap_sweep(&config, &a.seeds)?;
    let fp = config.fingerprint();
    let mut csv = Vec::new();
    write_roadmap_csv(&rows, &config, &mut csv)?;
    fs::write(dir.join("roadmap.csv"), &csv)?;
    let mut blocks = String::from("stage,label,block,sim,fingerprint\n");
    for row in &rows {
        for (b, s) in row.block_head_similarity().iter().enumerate() {
            let _ = writeln!(blocks, "{},{},{b},{s:.12},{fp}", row.stage, row.label);
        }
    }
    fs::write(dir.join("roadmap_blocks.csv"), blocks)?;
    std::io::stdout().write_all(&csv)?;
    Ok(())
}

fn cmd_plan(config: &ExperimentConfig, a: &PlanArgs, out: Option<&Path>) -> Outcome {
    let read = |p: &Path| -> Result<GroupPlan, Failure> {
        let bytes = fs::read(p).map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))?;
        Ok(deserialize_plan(&bytes)?)
    };
    if let Some(p) = &a.inspect {
        print_plan(&read(p)?);
        return Ok(());
    }
    let plan = if let Some(p) = &a.interpolate {
        let src = read(p)?;
        let (h, w) = match (a.h, a.w) {
            (Some(h), Some(w)) => (h, w),
            _ => return Err(Failure::Usage("--interpolate needs --h and --w".into())),
        };
        src.interpolate(h, w, a.group.unwrap_or(src.group_size()))?
    } else {
        let (Some(h), Some(w), Some(group)) = (a.h, a.w, a.group) else {
            return Err(Failure::Usage(
                "plan generation needs --h, --w and --group (or use --inspect / --interpolate)"
                    .into(),
            ));
        };
        let mode = GroupingMode::parse(&a.mode).map_err(|e| Failure::Usage(e.to_string()))?;
        GroupPlan::generate(config.seed, a.heads.unwrap_or(1), h, w, group, mode)?
    };
    let bytes = serialize_plan(&plan);
    let path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("plan.rgpl"));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&path, &bytes)?;
    println!(
        "wrote {} ({} bytes) fingerprint={}",
        path.display(),
        bytes.len(),
        plan_fingerprint(&plan)
    );
    Ok(())
}

/// A plan file is its own configuration: the fingerprint covers its bytes.
fn plan_fingerprint(plan: &GroupPlan) -> String {
    let hex: String = serialize_plan(plan)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();
    fingerprint_text(&hex)
}

fn print_plan(plan: &GroupPlan) {
    println!("fingerprint {}", plan_fingerprint(plan));
    println!("seed {}", plan.seed());
    println!("mode {}", plan.mode().label());
    println!("grid {}x{}", plan.height(), plan.width());
    println!("heads {}", plan.n_heads());
    println!("group_size {}", plan.group_size());
    println!("pad {}", plan.n_pad());
    println!("origin {}x{}", plan.origin().0, plan.origin().1);
    for h in 0..plan.n_heads() {
        let perm: Vec<String> = plan.perm(h).iter().map(usize::to_string).collect();
        println!("perm {h} {}", perm.join(" "));
    }
}
