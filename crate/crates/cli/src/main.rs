use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mvbigan::dataio::{parse_idx_bytes, TaskKind, SIDE};
use mvbigan::eval::{
    eval_sequence, input_canvas, render_grid, sample_conditional, seeded_rng, synthetic_report, variance_profile,
    GridRow,
};
use mvbigan::kv;
use mvbigan::trainer::{
    final_checkpoint_path, load_checkpoint, load_dataset, load_eval_dataset, Checkpoint, TrainConfig, Trainer,
};
use mvbigan::view::SubsetMask;
use mvbigan::Error;

/// Epoch count used for MNIST tasks unless configured otherwise.
const DESK_EPOCHS: usize = 30;

#[derive(Parser)]
#[command(name = "mvbigan", version, about = "Train and evaluate multi-view BiGANs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics.tsv, config.txt and final.ckpt to the output directory.
    #[command(after_help = train_help())]
    Train(TrainArgs),
    /// Print conditional samples for one held-out item as tab-separated rows.
    Sample(SampleArgs),
    /// Sample variance along random view sequences of held-out items.
    EvalVariance(VarianceArgs),
    /// Compare conditional moments of a synthetic-task model with their analytic values.
    EvalSynthetic(SyntheticArgs),
    /// Print the dimensions of an IDX file.
    InspectData(InspectArgs),
    /// Write a PGM grid: one row per sequence step, the input then the samples.
    RenderGrid(GridArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Task: quarters, stream, hetero or synthetic.
    #[arg(long)]
    task: Option<String>,
    /// Run seed (train.seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (train.out_dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override a config key; repeatable, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Continue from a checkpoint; only `train.epochs` may be overridden.
    #[arg(long, conflicts_with_all = ["config", "task", "seed"])]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct Common {
    /// Trained model.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Sampling seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dataset directory; defaults to the one recorded in the checkpoint.
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    common: Common,
    /// Held-out item index.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Available views as bits, e.g. 1010; all views by default.
    #[arg(long)]
    mask: Option<String>,
    /// Number of samples.
    #[arg(long, default_value_t = 8)]
    m: usize,
    /// Output file; standard output by default.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VarianceArgs {
    #[command(flatten)]
    common: Common,
    /// Number of held-out items.
    #[arg(long, default_value_t = 100)]
    items: usize,
    /// Samples per step.
    #[arg(long, default_value_t = 16)]
    m: usize,
    /// Sequence length; the task's training length by default.
    #[arg(long)]
    len: Option<usize>,
    /// Write variance.json here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SyntheticArgs {
    #[command(flatten)]
    common: Common,
    /// Sample batches per conditioning.
    #[arg(long, default_value_t = 8)]
    n_eval: usize,
    /// Samples per batch.
    #[arg(long, default_value_t = 128)]
    m: usize,
    /// Write synthetic_report.txt and synthetic_report.json here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    /// IDX file.
    #[arg(long)]
    idx: PathBuf,
}

#[derive(Args)]
struct GridArgs {
    #[command(flatten)]
    common: Common,
    /// Number of held-out items, stacked vertically.
    #[arg(long, default_value_t = 1)]
    items: usize,
    /// Samples per row.
    #[arg(long, default_value_t = 8)]
    m: usize,
    /// Output PGM file.
    #[arg(long)]
    out: PathBuf,
}

fn train_help() -> String {
    let mut cfg = TrainConfig::for_task(TaskKind::Quarters);
    cfg.epochs = DESK_EPOCHS;
    let mut s = String::from("Config keys and their defaults for --task quarters:\n");
    for (k, v) in cfg.to_kv() {
        let _ = writeln!(s, "  {k} = {v}");
    }
    s.push_str("Synthetic defaults differ; `--task synthetic` selects them. MVBIGAN_DATA_DIR sets task.data_dir.");
    s
}

enum Failure {
    Usage(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Lib(Error::Io(e))
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Lib(e) => match e {
                Error::NonFiniteLoss { .. } | Error::NonFinite(_) | Error::NonFiniteActivation(_) => 3,
                Error::Io(_)
                | Error::BadMagic(_)
                | Error::TruncatedFile(_)
                | Error::CorruptCheckpoint(_)
                | Error::VersionMismatch { .. }
                | Error::EmptyDataset => 2,
                _ => 1,
            },
        }
    }
}

type Outcome = Result<(), Failure>;

fn split_set(raw: &str) -> Result<(String, String), Failure> {
    raw.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got `{raw}`")))
}

fn resolve_config(args: &TrainArgs) -> Result<TrainConfig, Failure> {
    let mut pairs = Vec::new();
    if let Some(path) = &args.config {
        pairs.extend(kv::parse(&fs::read_to_string(path)?)?);
    }
    if let Some(task) = &args.task {
        pairs.push(("task.kind".into(), task.clone()));
    }
    if let Some(seed) = args.seed {
        pairs.push(("train.seed".into(), seed.to_string()));
    }
    if let Some(out) = &args.out {
        pairs.push(("train.out_dir".into(), out.display().to_string()));
    }
    for raw in &args.sets {
        pairs.push(split_set(raw)?);
    }
    let kind: TaskKind = match pairs.iter().rev().find(|(k, _)| k == "task.kind") {
        Some((k, v)) => kv::value(k, v)?,
        None => TaskKind::Quarters,
    };
    if kind != TaskKind::Synthetic && !pairs.iter().any(|(k, _)| k == "train.epochs") {
        pairs.insert(0, ("train.epochs".into(), DESK_EPOCHS.to_string()));
    }
    Ok(TrainConfig::from_pairs(&pairs)?)
}

fn train(args: TrainArgs) -> Outcome {
    let trainer = match &args.resume {
        Some(path) => {
            let mut t = Trainer::from_checkpoint(load_checkpoint(path)?);
            for raw in &args.sets {
                match split_set(raw)? {
                    (k, v) if k == "train.epochs" => t.set_epochs(kv::value(&k, &v)?),
                    (k, _) => return Err(Failure::Usage(format!("`{k}` cannot change when resuming"))),
                }
            }
            t
        }
        None => Trainer::new(resolve_config(&args)?)?,
    };
    let out = args.out.clone().or_else(|| trainer.config().out_dir.clone());
    let cfg = trainer.config().clone();
    let data = load_dataset(&cfg)?;
    if let Some(dir) = &out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.txt"), kv::render(&cfg.to_kv()))?;
    }
    println!(
        "task {} | {} items | {} parameters | epochs {}..{}",
        cfg.task.kind,
        data.len(),
        trainer.model().num_parameters(),
        trainer.epoch(),
        cfg.epochs
    );
    let mut out_cfg = cfg.clone();
    out_cfg.out_dir = out.clone();
    let mut trainer = Trainer::from_checkpoint(Checkpoint {
        config: out_cfg,
        ..trainer.checkpoint()
    });
    for m in trainer.run(&data)? {
        println!("{}", m.to_line());
    }
    if let Some(dir) = &out {
        println!("checkpoint {}", final_checkpoint_path(dir).display());
    }
    Ok(())
}

fn load(common: &Common) -> Result<Checkpoint, Failure> {
    let mut ck = load_checkpoint(&common.checkpoint)?;
    if let Some(dir) = &common.data_dir {
        ck.config.data_dir = dir.clone();
    }
    Ok(ck)
}

fn sample(args: SampleArgs) -> Outcome {
    let ck = load(&args.common)?;
    let data = load_eval_dataset(&ck.config, args.index + 1)?;
    let ex = data
        .examples
        .get(args.index)
        .ok_or_else(|| Failure::Usage(format!("no held-out item {}", args.index)))?;
    let views = data.task.num_views();
    let mask = match &args.mask {
        Some(bits) => {
            let bits: Vec<u8> = bits
                .chars()
                .map(|c| c.to_digit(10).map(|d| d as u8).unwrap_or(u8::MAX))
                .collect();
            SubsetMask::from_bits(&bits, views)?
        }
        None => SubsetMask::full(views),
    };
    let vs = ex.viewset.restrict(&mask)?;
    let samples = sample_conditional(&ck.model, &vs, args.m, &mut seeded_rng(args.common.seed))?;
    let mut text = String::new();
    for s in samples {
        let row: Vec<String> = s.iter().map(|x| x.to_string()).collect();
        text.push_str(&row.join("\t"));
        text.push('\n');
    }
    match &args.out {
        Some(path) => fs::write(path, text)?,
        None => io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn eval_variance(args: VarianceArgs) -> Outcome {
    let ck = load(&args.common)?;
    let data = load_eval_dataset(&ck.config, args.items)?;
    let len = args.len.unwrap_or(data.task.seq_len);
    let profile = variance_profile(&ck.model, &data, len, args.m, args.common.seed)?;
    let means: Vec<String> = profile.step_means.iter().map(|v| format!("{v:.6}")).collect();
    println!("items = {}", data.len());
    println!("step_means = {}", means.join(", "));
    println!("fraction_monotone = {:.3}", profile.fraction_monotone);
    println!("population_decreasing = {}", profile.population_decreasing());
    println!("mean_ratio_last_first = {:.4}", profile.mean_ratio());
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("variance.json"), profile.to_json())?;
    }
    Ok(())
}

fn eval_synthetic(args: SyntheticArgs) -> Outcome {
    let ck = load(&args.common)?;
    let report = synthetic_report(&ck.model, &ck.config.synthetic, args.n_eval, args.m, &mut seeded_rng(args.common.seed))?;
    let text = report.to_text();
    print!("{text}");
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("synthetic_report.txt"), &text)?;
        fs::write(dir.join("synthetic_report.json"), report.to_json())?;
    }
    Ok(())
}

fn inspect_data(args: InspectArgs) -> Outcome {
    let idx = parse_idx_bytes(&args.idx)?;
    let dims: Vec<String> = idx.dims.iter().map(|d| d.to_string()).collect();
    println!("dims {}", dims.join("x"));
    Ok(())
}

fn render(args: GridArgs) -> Outcome {
    let ck = load(&args.common)?;
    if ck.config.task.kind == TaskKind::Synthetic {
        return Err(Failure::Usage("render-grid needs an image task".into()));
    }
    let data = load_eval_dataset(&ck.config, args.items)?;
    let mut rng = seeded_rng(args.common.seed);
    let mut rows = Vec::new();
    for ex in &data.examples {
        let seq = eval_sequence(&data.task, data.task.seq_len, &mut rng)?;
        for mask in seq.masks() {
            let vs = ex.viewset.restrict(mask)?;
            rows.push(GridRow {
                input: input_canvas(&data.task, &vs)?,
                samples: sample_conditional(&ck.model, &vs, args.m, &mut rng)?,
            });
        }
    }
    render_grid(&rows, SIDE, SIDE, &args.out)?;
    println!("wrote {} ({} rows x {} cells)", args.out.display(), rows.len(), args.m + 1);
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Train(a) => train(a),
        Command::Sample(a) => sample(a),
        Command::EvalVariance(a) => eval_variance(a),
        Command::EvalSynthetic(a) => eval_synthetic(a),
        Command::InspectData(a) => inspect_data(a),
        Command::RenderGrid(a) => render(a),
    }
}

fn report(path: &Path, failure: &Failure) {
    match failure {
        Failure::Usage(msg) => eprintln!("{}: {msg}", path.display()),
        Failure::Lib(e) => eprintln!("{}: {e}", path.display()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            report(Path::new("mvbigan"), &f);
            ExitCode::from(f.code())
        }
    }
}
