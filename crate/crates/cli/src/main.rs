mod config;

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use mswa::cost::{self, ratio_to_f64};
use mswa::decode::bench_decode;
use mswa::model::checkpoint::Checkpoint;
use mswa::model::compare::compare;
use mswa::model::corpus::{synthetic_text, Corpus, Split};
use mswa::model::eval::evaluate;
use mswa::model::train::Trainer;
use mswa::model::{Model, ModelConfig};
use mswa::plan::{Strategy, WindowPlan};

use config::{Keys, RunConfig};

/// Environment variable selecting the worker-thread count.
const THREADS_VAR: &str = "MSWA_THREADS";

#[derive(Parser)]
#[command(name = "mswa", version, about = "Multi-scale window attention toolkit")]
struct Cli {
    /// Flat TOML file of configuration keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for machine-readable outputs.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the window plan and its budget.
    Plan {
        #[arg(long)]
        strategy: Option<Strategy>,
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long)]
        heads: Option<usize>,
        #[arg(long = "base")]
        base: Option<usize>,
    },
    /// Train a model on a byte corpus.
    Train {
        #[command(flatten)]
        keys: Keys,
    },
    /// Score a checkpoint on a corpus split.
    Eval {
        #[command(flatten)]
        keys: Keys,
        #[arg(long, default_value = "valid")]
        split: Split,
    },
    /// Time single-token decode steps and record the cache size.
    Bench {
        #[command(flatten)]
        keys: Keys,
        #[arg(long, default_value_t = 2048)]
        positions: usize,
        #[arg(long, default_value_t = 4)]
        bytes_per_scalar: usize,
    },
    /// Report attention cost of the configured model.
    Cost {
        #[command(flatten)]
        keys: Keys,
        /// Also print the base-window ablation priced against multi-scale w = 128.
        #[arg(long)]
        compare: bool,
    },
    /// Train a baseline and a candidate with verified budgets and compare them.
    Compare {
        #[command(flatten)]
        keys: Keys,
        #[arg(long, default_value = "mswa")]
        candidate_strategy: Strategy,
        /// Defaults to the baseline's base window.
        #[arg(long)]
        candidate_base_window: Option<usize>,
    },
    /// Write a seeded synthetic text corpus.
    Corpus {
        path: PathBuf,
        #[arg(long, default_value_t = 1_200_000)]
        bytes: usize,
    },
}

fn layered(cli: &Cli, keys: Keys) -> Result<Keys> {
    let file = match &cli.config {
        Some(path) => config::read_file(path)?,
        None => Keys::default(),
    };
    let top = Keys { seed: cli.seed, ..Keys::default() };
    Ok(top.over(keys).over(file))
}

fn out_dir(cli: &Cli) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from("mswa-out"))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("{}: cannot create directory", parent.display()))?;
    }
    fs::write(path, text).with_context(|| format!("{}: cannot write", path.display()))
}

fn load_corpus(run: &RunConfig) -> Result<Corpus> {
    let Some(path) = &run.corpus else {
        bail!(mswa::Error::Config { keys: vec!["corpus".into()], message: "no corpus path given".into() });
    };
    Ok(Corpus::load(path, run.splits)?)
}

fn plan(
    cli: &Cli,
    strategy: Option<Strategy>,
    layers: Option<usize>,
    heads: Option<usize>,
    base: Option<usize>,
) -> Result<()> {
    let keys = layered(cli, Keys { strategy, layers, heads, base_window: base, ..Keys::default() })?;
    let plan = WindowPlan::build(
        keys.strategy.unwrap_or(Strategy::Mswa),
        keys.layers.unwrap_or(4),
        keys.heads.unwrap_or(4),
        keys.base_window.unwrap_or(32),
    )?;
    let budget = plan.total_budget();
    print!("{}", plan.to_text());
    println!("budget total={} ratio={}", budget.total_windows, budget.ratio_to_uniform);
    if let Some(dir) = &cli.out {
        write(&dir.join("plan.txt"), &plan.to_text())?;
    }
    Ok(())
}

fn train(cli: &Cli, keys: Keys) -> Result<()> {
    let run = RunConfig::resolve(&layered(cli, keys)?)?;
    let dir = out_dir(cli);
    let corpus = load_corpus(&run)?;
    run.persist(&dir)?;
    // A checkpoint with optimizer state resumes its own run; a bare one only seeds the weights.
    let mut trainer = match &run.checkpoint {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            match ckpt.train {
                Some(_) => Trainer::resume(&ckpt)?,
                None => Trainer::new(ckpt.model()?, run.train)?,
            }
        }
        None => Trainer::new(Model::new(run.model.clone())?, run.train)?,
    };
    let steps = trainer.config.steps;
    println!("training {} parameters, steps {}..{}", trainer.model.num_parameters(), trainer.step(), steps);
    let ckpt_dir = dir.join("checkpoints");
    if trainer.config.checkpoint_every > 0 {
        fs::create_dir_all(&ckpt_dir).with_context(|| format!("{}: cannot create directory", ckpt_dir.display()))?;
    }
    let metrics_path = dir.join("metrics.csv");
    let mut csv =
        fs::File::create(&metrics_path).with_context(|| format!("{}: cannot create", metrics_path.display()))?;
    writeln!(csv, "step,loss_bpc,lr,elapsed_s")?;
    let every = (steps / 20).max(1);
    let mut io_error = None;
    trainer.run(corpus.split(Split::Train), Some(&ckpt_dir), |m| {
        if let Err(e) = writeln!(csv, "{},{:.6},{:.6e},{:.3}", m.step, m.loss_bpc, m.lr, m.elapsed_s) {
            io_error.get_or_insert(e);
        }
        if m.step % every == 0 || m.step + 1 == steps {
            println!("step {:>6}  loss {:.4} bpc  lr {:.2e}  {:.1}s", m.step, m.loss_bpc, m.lr, m.elapsed_s);
        }
    })?;
    if let Some(e) = io_error {
        return Err(e).with_context(|| format!("{}: write failed", metrics_path.display()));
    }
    let final_path = dir.join("final.ckpt");
    trainer.checkpoint().save(&final_path)?;
    println!("metrics: {}", metrics_path.display());
    println!("checkpoint: {}", final_path.display());
    Ok(())
}

fn require_checkpoint(run: &RunConfig) -> Result<Checkpoint> {
    let Some(path) = &run.checkpoint else {
        bail!(mswa::Error::Config { keys: vec!["checkpoint".into()], message: "no checkpoint path given".into() });
    };
    Ok(Checkpoint::load(path)?)
}

fn eval(cli: &Cli, keys: Keys, split: Split) -> Result<()> {
    let run = RunConfig::resolve(&layered(cli, keys)?)?;
    let checkpoint = require_checkpoint(&run)?;
    let corpus = load_corpus(&run)?;
    let model = checkpoint.model()?;
    let seq_len = run.train.seq_len.min(model.config().max_seq_len);
    let report = evaluate(&model, corpus.split(split), seq_len, run.train.batch_size)?;
    println!("ppl={:.2} bpc={:.3}", report.ppl, report.bpc);
    if let Some(dir) = &cli.out {
        run.persist(dir)?;
        let csv = format!(
            "split,tokens,mean_nll,ppl,bpc\n{split:?},{},{:.10},{:.6},{:.6}\n",
            report.tokens, report.mean_nll, report.ppl, report.bpc
        );
        write(&dir.join("eval.csv"), &csv.to_lowercase())?;
    }
    Ok(())
}

fn bench(cli: &Cli, keys: Keys, positions: usize, bytes_per_scalar: usize) -> Result<()> {
    let mut run = RunConfig::resolve(&layered(cli, keys)?)?;
    let model = match &run.checkpoint {
        Some(path) => {
            let mut config = Checkpoint::load(path)?.config;
            config.max_seq_len = config.max_seq_len.max(positions);
            let ckpt = Checkpoint { config, ..Checkpoint::load(path)? };
            ckpt.model()?
        }
        None => {
            run.model.max_seq_len = run.model.max_seq_len.max(positions);
            Model::new(run.model.clone())?
        }
    };
    let tokens: Vec<usize> = match &run.corpus {
        Some(_) => load_corpus(&run)?.split(Split::Test).iter().cycle().take(positions).map(|&b| b as usize).collect(),
        None => synthetic_text(run.model.seed, positions).into_iter().map(usize::from).collect(),
    };
    let rows = bench_decode(&model, &tokens, bytes_per_scalar)?;
    let dir = out_dir(cli);
    run.persist(&dir)?;
    let mut csv = String::from("position,step_micros,cache_bytes\n");
    for r in &rows {
        let _ = writeln!(csv, "{},{:.3},{}", r.position, r.step_micros, r.cache_bytes);
    }
    let path = dir.join("bench.csv");
    write(&path, &csv)?;
    if let Some(last) = rows.last() {
        let tail = &rows[rows.len() - rows.len().div_ceil(10)..];
        let mean = tail.iter().map(|r| r.step_micros).sum::<f64>() / tail.len() as f64;
        println!("{} positions: last-10% mean step {:.1} us, final cache {} bytes", rows.len(), mean, last.cache_bytes);
    }
    println!("bench: {}", path.display());
    Ok(())
}

fn cost_report(cli: &Cli, keys: Keys, with_ablation: bool) -> Result<()> {
    let run = RunConfig::resolve(&layered(cli, keys)?)?;
    let n = run.train.seq_len;
    let report = cost::report(&run.model, n)?;
    println!("sequence length {n}, head_dim {}", run.model.head_dim);
    print!("{}", report.to_text());
    println!("cache bytes at 32-bit: {}", report.cache_bytes(4));
    let mut ablation_csv =
        String::from("attention,base_window,min_window,max_window,relative_cost,relative_cost_value\n");
    if with_ablation {
        let m = &run.model;
        let rows = cost::base_window_ablation(m.layers, m.heads, m.head_dim)?;
        println!("\n{:<10} {:>6} {:>14} {:>14}", "attention", "w", "windows", "relative cost");
        for r in &rows {
            let label = if r.strategy == Strategy::Uniform { "swa" } else { "mswa" };
            let span = format!("{}..{}", r.min_window, r.max_window);
            println!("{label:<10} {:>6} {span:>14} {:>14.2}", r.base_window, ratio_to_f64(r.relative_cost));
            let _ = writeln!(
                ablation_csv,
                "{label},{},{},{},{},{:.6}",
                r.base_window,
                r.min_window,
                r.max_window,
                r.relative_cost,
                ratio_to_f64(r.relative_cost)
            );
        }
    }
    if let Some(dir) = &cli.out {
        run.persist(dir)?;
        write(&dir.join("cost.csv"), &report.to_csv())?;
        if with_ablation {
            write(&dir.join("cost_compare.csv"), &ablation_csv)?;
        }
    }
    Ok(())
}

fn compare_runs(cli: &Cli, keys: Keys, strategy: Strategy, base: Option<usize>) -> Result<()> {
    let run = RunConfig::resolve(&layered(cli, keys)?)?;
    let corpus = load_corpus(&run)?;
    let candidate = ModelConfig { strategy, base_window: base.unwrap_or(run.model.base_window), ..run.model.clone() };
    candidate.validate()?;
    let result = compare(&run.model, &candidate, run.train, &corpus)?;
    let dir = out_dir(cli);
    run.persist(&dir)?;
    let path = dir.join("compare.csv");
    write(&path, &result.to_csv())?;
    for r in [&result.baseline, &result.candidate] {
        println!(
            "{:<9} {:<22} w={:<5} budget={:<8} train_bpc={:.4} valid_bpc={:.4}",
            r.label,
            r.config.strategy.name(),
            r.config.base_window,
            r.window_budget,
            r.final_train_bpc,
            r.valid_bpc
        );
    }
    println!("budget ratio {} ({:.4})", result.budget_ratio, ratio_to_f64(result.budget_ratio));
    println!("compare: {}", path.display());
    Ok(())
}

fn configure_threads() -> Result<()> {
    if let Ok(value) = std::env::var(THREADS_VAR) {
        let n: usize = value.parse().with_context(|| format!("{THREADS_VAR}={value} is not a thread count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring worker threads")?;
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    configure_threads()?;
    match &cli.command {
        Command::Plan { strategy, layers, heads, base } => plan(&cli, *strategy, *layers, *heads, *base),
        Command::Train { keys } => train(&cli, keys.clone()),
        Command::Eval { keys, split } => eval(&cli, keys.clone(), *split),
        Command::Bench { keys, positions, bytes_per_scalar } => {
            bench(&cli, keys.clone(), *positions, *bytes_per_scalar)
        }
        Command::Cost { keys, compare } => cost_report(&cli, keys.clone(), *compare),
        Command::Compare { keys, candidate_strategy, candidate_base_window } => {
            compare_runs(&cli, keys.clone(), *candidate_strategy, *candidate_base_window)
        }
        Command::Corpus { path, bytes } => {
            let text = synthetic_text(cli.seed.unwrap_or(0), *bytes);
            fs::write(path, &text).with_context(|| format!("{}: cannot write", path.display()))?;
            println!("wrote {} bytes to {}", text.len(), path.display());
            Ok(())
        }
    }
}

/// Plan and configuration errors exit with 2, everything else with 1.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<mswa::Error>() {
        Some(mswa::Error::Plan { .. } | mswa::Error::InvalidPlan(_) | mswa::Error::Config { .. }) => 2,
        _ => 1,
    }
}

/// The error chain joined by `: `, skipping causes already quoted by their parent.
fn describe(err: &anyhow::Error) -> String {
    let mut text = String::new();
    for cause in err.chain() {
        let part = cause.to_string();
        if !text.contains(&part) {
            if !text.is_empty() {
                text.push_str(": ");
            }
            text.push_str(&part);
        }
    }
    text
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", describe(&err));
            ExitCode::from(exit_code(&err))
        }
    }
}
