mod config;

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use epcnet::data::{
    build_descriptor_db, build_full_descriptor_db, evaluate, generate_synthetic, Dataset, Rotation, Split,
};
use epcnet::graph::memory_model;
use epcnet::heads::gfc_param_count;
use epcnet::model::{config_param_count, count_flops, EpcNetConfig, ModelParams};
use epcnet::train::{train_student_distill_logged, train_teacher_logged, EpochLog, TrainRun};
use epcnet::Error;
use sha2::{Digest, Sha256};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "epcnet", version, about = "Point-cloud place recognition: data, training, evaluation, costs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-traversal dataset.
    Synth(SynthArgs),
    /// Train a network with the lazy quadruplet loss.
    Train(TrainArgs),
    /// Train a student against a frozen teacher checkpoint.
    Distill(DistillArgs),
    /// Report recall@K of query submaps against the database split.
    Eval(EvalArgs),
    /// Print parameter, FLOP and activation-memory figures.
    Bench(BenchArgs),
    /// Write descriptors for a dataset to an EPCD file.
    Export(ExportArgs),
}

#[derive(Args)]
struct Common {
    /// Optional key=value file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    places: Option<usize>,
    #[arg(long)]
    traversals: Option<usize>,
    #[arg(long)]
    spacing: Option<f64>,
    #[arg(long)]
    points: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    rotation: Option<Rotation>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ModelFlags {
    /// Starting preset: epcnet, epcnet-l, desk or desk-l.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    groups: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args)]
struct FitFlags {
    /// Dataset directory or its index.csv.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint path to write.
    #[arg(long, default_value = "model.ckpt")]
    out: PathBuf,
    /// Optional CSV file receiving the per-epoch losses.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    fit: FitFlags,
}

#[derive(Args)]
struct DistillArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    fit: FitFlags,
    /// Frozen teacher checkpoint.
    #[arg(long)]
    teacher: Option<PathBuf>,
    #[arg(long)]
    lambda: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Success radius in meters.
    #[arg(long)]
    radius: Option<f64>,
    /// Report file (JSON).
    #[arg(long, default_value = "eval.json")]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    /// Starting preset: epcnet, epcnet-l, desk or desk-l.
    #[arg(long)]
    model: Option<String>,
    /// Points per cloud for the FLOP count.
    #[arg(long, default_value_t = 4096)]
    points: u64,
    /// Comma-separated group counts for the parameter table.
    #[arg(long, value_delimiter = ',')]
    groups: Vec<usize>,
    #[arg(long, default_value_t = 4096)]
    mem_n: u64,
    #[arg(long, default_value_t = 20)]
    mem_k: u64,
    #[arg(long, default_value_t = 64)]
    mem_d: u64,
    #[arg(long, default_value_t = 4)]
    mem_m: u64,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// all, train, database or query.
    #[arg(long, default_value = "all")]
    split: String,
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(e.into())
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(1);
    }
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Distill(a) => cmd_distill(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Export(a) => cmd_export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 1 for bad arguments, 3 for a numeric failure, 2 for everything that went
/// wrong with the data.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) => 1,
        Error::NumericFailure(_) => 3,
        _ => 2,
    }
}

fn configure_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("EPC_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("EPC_THREADS must be a positive integer, got `{v}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn base_config(common: &Common, model: Option<&ModelFlags>, default_model: &str) -> CliResult<RunConfig> {
    let name = model.and_then(|m| m.model.as_deref()).unwrap_or(default_model);
    let mut rc = RunConfig::new(config::preset(name)?);
    if let Some(path) = &common.config {
        rc.apply_file(path)?;
    }
    if let Some(m) = model {
        if let Some(g) = m.groups {
            rc.model.groups = g;
        }
        if let Some(k) = m.k {
            rc.model.neighbor_count = k;
        }
    }
    Ok(rc)
}

fn apply_fit(rc: &mut RunConfig, fit: &FitFlags) {
    let t = &mut rc.train;
    t.epochs = fit.epochs.unwrap_or(t.epochs);
    t.batch_size = fit.batch_size.unwrap_or(t.batch_size);
    t.lr = fit.lr.unwrap_or(t.lr);
    t.seed = fit.seed.unwrap_or(t.seed);
}

fn index_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join("index.csv")
    } else {
        data.to_path_buf()
    }
}

fn load_checkpoint(path: &Path) -> CliResult<ModelParams<f32>> {
    let file = File::open(path).map_err(|e| Error::invalid(format!("cannot open checkpoint {}: {e}", path.display())))?;
    Ok(ModelParams::read_checkpoint(&mut BufReader::new(file))?)
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn cmd_synth(a: SynthArgs) -> CliResult {
    let mut rc = base_config(&a.common, None, "epcnet")?;
    let s = &mut rc.synth;
    s.place_count = a.places.unwrap_or(s.place_count);
    s.traversal_count = a.traversals.unwrap_or(s.traversal_count);
    s.grid_spacing = a.spacing.unwrap_or(s.grid_spacing);
    s.points_per_submap = a.points.unwrap_or(s.points_per_submap);
    s.noise_sigma = a.noise.unwrap_or(s.noise_sigma);
    s.dropout_fraction = a.dropout.unwrap_or(s.dropout_fraction);
    s.rotation = a.rotation.unwrap_or(s.rotation);
    s.seed = a.seed.unwrap_or(s.seed);
    rc.synth.validate()?;
    let index = generate_synthetic(&rc.synth, &a.out)?;
    println!("wrote {} submaps", index.len());
    println!("{}", a.out.join("index.csv").display());
    Ok(())
}

fn finish_run(run: &TrainRun, fit: &FitFlags) -> CliResult {
    if let Some(path) = &fit.log {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "epoch,lazy,sse,tuples,seconds")?;
        for e in &run.log {
            writeln!(w, "{},{},{},{},{:.3}", e.epoch, e.lazy, e.sse, e.tuples, e.seconds)?;
        }
        w.flush()?;
    }
    let bytes = run.model.to_checkpoint_bytes()?;
    fs::write(&fit.out, &bytes)?;
    println!("checkpoint {} sha256={}", fit.out.display(), sha256_hex(&bytes));
    Ok(())
}

fn print_epoch(e: &EpochLog) {
    println!("{e}");
}

fn cmd_train(a: TrainArgs) -> CliResult {
    let mut rc = base_config(&a.common, Some(&a.model), "epcnet")?;
    apply_fit(&mut rc, &a.fit);
    let dataset = Dataset::load(&index_path(&a.fit.data))?;
    let run = train_teacher_logged(&dataset, &rc.model, &rc.train, print_epoch)?;
    finish_run(&run, &a.fit)
}

fn cmd_distill(a: DistillArgs) -> CliResult {
    let teacher_path = a
        .teacher
        .as_ref()
        .ok_or_else(|| Failure::Usage("distill requires --teacher <checkpoint> (the frozen teacher network)".into()))?;
    let mut rc = base_config(&a.common, Some(&a.model), "epcnet-l")?;
    apply_fit(&mut rc, &a.fit);
    if let Some(l) = a.lambda {
        rc.train.loss.lambda = l;
    }
    let teacher = load_checkpoint(teacher_path)?;
    let dataset = Dataset::load(&index_path(&a.fit.data))?;
    let run = train_student_distill_logged(&dataset, &teacher, &rc.model, &rc.train, print_epoch)?;
    finish_run(&run, &a.fit)
}

fn cmd_eval(a: EvalArgs) -> CliResult {
    let rc = base_config(&a.common, None, "epcnet")?;
    let radius = a.radius.unwrap_or(rc.radius);
    let model = load_checkpoint(&a.checkpoint)?;
    let dataset = Dataset::load(&index_path(&a.data))?;
    let db = build_descriptor_db(&model, &dataset, Split::Database)?;
    let queries = build_descriptor_db(&model, &dataset, Split::Query)?;
    let ks: Vec<usize> = (1..=25).collect();
    let report = evaluate(&db, &queries, &dataset.index, &ks, radius)?;
    let json = serde_json::to_string_pretty(&report).map_err(Error::from)?;
    println!("{json}");
    fs::write(&a.out, format!("{json}\n"))?;
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> CliResult {
    let flags = ModelFlags {
        model: a.model.clone(),
        groups: None,
        k: None,
    };
    let rc = base_config(&a.common, Some(&flags), "epcnet")?;
    let cfg = &rc.model;
    cfg.validate()?;
    let mem = memory_model(a.mem_n, a.mem_k, a.mem_d, a.mem_m)?;
    println!(
        "memory n={} k={} d={} m={} proxy_elements={} edge_elements={} ratio={:.4}",
        a.mem_n, a.mem_k, a.mem_d, a.mem_m, mem.proxy_elements, mem.edge_elements, mem.ratio
    );
    let cost = count_flops(cfg, a.points)?;
    println!(
        "model head={} groups={} params={} ({:.2}M) flops={} ({:.2}G at n={}) activations={}",
        cfg.head,
        cfg.groups,
        cost.parameter_count,
        cost.parameter_count as f64 / 1e6,
        cost.flop_count,
        cost.flop_count as f64 / 1e9,
        a.points,
        cost.activation_elements
    );
    if !a.groups.is_empty() {
        print_groups_table(cfg, &a.groups)?;
    }
    Ok(())
}

fn print_groups_table(cfg: &EpcNetConfig, groups: &[usize]) -> CliResult {
    let in_dim = cfg.mlp_width as u64;
    println!("{:>6} {:>12} {:>9} {:>12} {:>12}", "groups", "params", "millions", "gfc", "delta");
    let mut prev: Option<u64> = None;
    for &g in groups {
        let mut c = cfg.clone();
        c.groups = g;
        let total = config_param_count(&c)?;
        let gfc = gfc_param_count(c.clusters as u64, in_dim, c.output_dim as u64, g as u64)?;
        let delta = prev.map_or(String::from("-"), |p| (total as i64 - p as i64).to_string());
        println!("{g:>6} {total:>12} {:>9.2} {gfc:>12} {delta:>12}", total as f64 / 1e6);
        prev = Some(total);
    }
    Ok(())
}

fn cmd_export(a: ExportArgs) -> CliResult {
    let model = load_checkpoint(&a.checkpoint)?;
    let dataset = Dataset::load(&index_path(&a.data))?;
    let table = match a.split.as_str() {
        "all" => build_full_descriptor_db(&model, &dataset)?,
        s => build_descriptor_db(&model, &dataset, s.parse()?)?,
    };
    let mut w = BufWriter::new(File::create(&a.out)?);
    table.write(&mut w)?;
    w.flush()?;
    println!("wrote {} descriptors of dimension {} to {}", table.len(), table.dim, a.out.display());
    Ok(())
}
