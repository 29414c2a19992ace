use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ragtrack_core::crm::MockProvider;
use ragtrack_core::harness::selftest;
use ragtrack_core::harness::{
    find_sequences, gen_sequence, load_checkpoint, read_sequence, run_tracker, save_checkpoint, train_with,
    write_sequence, MetricSummary, Model, RunLog, SequenceSpec, TrackerConfig, ENV_OUT,
};

#[derive(Parser)]
#[command(name = "ragtrack", version, about = "Language-guided RGB-thermal tracking on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic two-modality sequences.
    Gen(GenArgs),
    /// Train from a config and a dataset; writes a checkpoint and a loss log.
    Train(TrainArgs),
    /// Track one sequence with a checkpoint; writes a JSON-lines run log.
    Track(TrackArgs),
    /// Summarize run logs as a table and a metric,value CSV.
    Eval(EvalArgs),
    /// Run the built-in oracle checks.
    Selftest(SelftestArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 40)]
    len: usize,
    /// Output directory; sequences go to `seq_000`, `seq_001`, …
    /// [default: $RAGTRACK_OUT]
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, default_value_t = 128)]
    edge: usize,
    #[arg(long, default_value_t = 16.0)]
    size: f64,
    #[arg(long, default_value = "red")]
    color: String,
    #[arg(long, default_value_t = 2.0)]
    speed: f64,
    /// Night frames as `START:END` (end exclusive).
    #[arg(long, value_parser = parse_range)]
    night: Option<[usize; 2]>,
    #[arg(long)]
    occluder: bool,
    #[arg(long, default_value_t = 0)]
    distractors: usize,
    /// Offset `DX,DY` of a second annotation stream.
    #[arg(long, value_parser = parse_offset)]
    misalign: Option<[f64; 2]>,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON config; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// A sequence directory or a directory of them.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint path [default: $RAGTRACK_OUT/model.ckpt]
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args)]
struct TrackArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    sequence: PathBuf,
    /// Run log path [default: $RAGTRACK_OUT/run.jsonl]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the checkpoint's update threshold.
    #[arg(long)]
    update_threshold: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(required = true)]
    logs: Vec<PathBuf>,
    /// CSV path [default: stdout after the table]
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_range(s: &str) -> Result<[usize; 2], String> {
    let (a, b) = s.split_once(':').ok_or("expected START:END")?;
    let a = a.trim().parse().map_err(|_| format!("bad start in {s}"))?;
    let b = b.trim().parse().map_err(|_| format!("bad end in {s}"))?;
    Ok([a, b])
}

fn parse_offset(s: &str) -> Result<[f64; 2], String> {
    let (a, b) = s.split_once(',').ok_or("expected DX,DY")?;
    let a = a.trim().parse().map_err(|_| format!("bad dx in {s}"))?;
    let b = b.trim().parse().map_err(|_| format!("bad dy in {s}"))?;
    Ok([a, b])
}

type CliResult = Result<(), String>;

const MISSING_CHECKPOINT: &str = "checkpoint not found";

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// `flag`, else `$RAGTRACK_OUT` joined with `file` (or itself when `file`
/// is empty).
fn output_path(flag: Option<PathBuf>, file: &str) -> Result<PathBuf, String> {
    if let Some(p) = flag {
        return Ok(p);
    }
    match std::env::var_os(ENV_OUT) {
        Some(dir) if file.is_empty() => Ok(PathBuf::from(dir)),
        Some(dir) => Ok(Path::new(&dir).join(file)),
        None => Err(format!("no --out given and {ENV_OUT} is not set")),
    }
}

fn ensure_parent(path: &Path) -> CliResult {
    if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(d).map_err(err)?;
    }
    Ok(())
}

fn gen(a: GenArgs) -> CliResult {
    let out = output_path(a.out, "")?;
    for i in 0..a.count {
        let spec = SequenceSpec {
            length: a.len,
            edge: a.edge,
            target_size: a.size,
            color: a.color.clone(),
            speed: a.speed,
            night: a.night,
            occluder: a.occluder,
            distractors: a.distractors,
            misalign: a.misalign,
            seed: a.seed.wrapping_add(i as u64),
        };
        let seq = gen_sequence(&spec).map_err(err)?;
        let dir = out.join(format!("seq_{i:03}"));
        write_sequence(&seq, &dir).map_err(err)?;
        println!("wrote {} ({} frames)", dir.display(), seq.len());
    }
    Ok(())
}

fn train(a: TrainArgs) -> CliResult {
    let mut cfg = match &a.config {
        Some(p) => TrackerConfig::load(p).map_err(err)?,
        None => TrackerConfig::default(),
    }
    .with_env()
    .map_err(err)?;
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(lr) = a.lr {
        cfg.train.lr = lr;
    }
    let out = output_path(a.out, "model.ckpt")?;
    let data = find_sequences(&a.data)
        .map_err(err)?
        .iter()
        .map(|d| read_sequence(d))
        .collect::<Result<Vec<_>, _>>()
        .map_err(err)?;
    let (mut store, model) = Model::init(&cfg).map_err(err)?;
    eprintln!("training {} steps on {} sequence(s)", cfg.train.steps, data.len());
    let log = train_with(&data, &cfg, &mut store, &model, |r| {
        if r.step % 25 == 0 {
            eprintln!("step {:>5}  loss {:.4}", r.step, r.total);
        }
    })
    .map_err(err)?;
    ensure_parent(&out)?;
    save_checkpoint(&out, &store, &cfg).map_err(err)?;
    let loss_path = out.with_extension("loss.jsonl");
    std::fs::write(&loss_path, log.to_jsonl().map_err(err)?).map_err(err)?;
    println!(
        "eval loss {:.4} -> {:.4}; wrote {} and {}",
        log.initial_eval,
        log.final_eval,
        out.display(),
        loss_path.display()
    );
    Ok(())
}

fn track(a: TrackArgs) -> CliResult {
    if !a.checkpoint.is_file() {
        return Err(format!("{MISSING_CHECKPOINT}: {}", a.checkpoint.display()));
    }
    let (mut cfg, store, model) = load_checkpoint(&a.checkpoint).map_err(err)?;
    if let Some(t) = a.update_threshold {
        cfg.update_threshold = t;
    }
    let seq = read_sequence(&a.sequence).map_err(err)?;
    let log = run_tracker(&seq, &store, &model, &cfg, &MockProvider).map_err(err)?;
    let out = output_path(a.out, "run.jsonl")?;
    ensure_parent(&out)?;
    log.save(&out).map_err(err)?;
    let s = log.summary;
    println!(
        "{} frames; PR {:.4} SR {:.4} NPR {:.4}; wrote {}",
        log.frames.len(),
        s.pr,
        s.sr,
        s.npr,
        out.display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult {
    let mut rows = Vec::new();
    for p in &a.logs {
        let log = RunLog::load(p).map_err(|e| format!("{}: {e}", p.display()))?;
        let s = log.recompute_summary().map_err(err)?;
        rows.push((p.display().to_string(), s));
    }
    let n = rows.len() as f64;
    let mean = |f: fn(&MetricSummary) -> f64| rows.iter().map(|(_, s)| f(s)).sum::<f64>() / n;
    let overall = MetricSummary {
        pr: mean(|s| s.pr),
        sr: mean(|s| s.sr),
        npr: mean(|s| s.npr),
        mpr: mean(|s| s.mpr),
        msr: mean(|s| s.msr),
    };
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(4);
    println!("{:<width$}  {:>7} {:>7} {:>7} {:>7} {:>7}", "run", "PR", "SR", "NPR", "MPR", "MSR");
    for (name, s) in rows.iter().map(|(n, s)| (n.as_str(), s)).chain([("mean", &overall)]) {
        println!(
            "{name:<width$}  {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4}",
            s.pr, s.sr, s.npr, s.mpr, s.msr
        );
    }
    match a.csv {
        Some(p) => {
            ensure_parent(&p)?;
            std::fs::write(&p, overall.to_csv()).map_err(err)?;
            println!("wrote {}", p.display());
        }
        None => print!("\n{}", overall.to_csv()),
    }
    Ok(())
}

fn run_selftest(a: SelftestArgs) -> CliResult {
    let results = selftest::run_all(a.seed);
    for r in &results {
        let status = if r.passed { "PASS" } else { "FAIL" };
        if r.detail.is_empty() {
            println!("{status}  {}", r.name);
        } else {
            println!("{status}  {}: {}", r.name, r.detail);
        }
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(format!("{failed} self-test check(s) failed"));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train(a),
        Command::Track(a) => track(a),
        Command::Eval(a) => eval(a),
        Command::Selftest(a) => run_selftest(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.starts_with(MISSING_CHECKPOINT) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
