//! `magdi-lab`: corpus generation, training, and evaluation from one binary.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on runtime errors.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use magdi_lab::eval::{
    compare_levels, efficiency_report, evaluate, reference_token_cost, self_consistency,
    EvalReport, DEFAULT_MAX_NEW_TOKENS,
};
use magdi_lab::graph::{corpus_stats, filter_corpus, read_corpus, write_corpus, StructureClass};
use magdi_lab::model::Vocab;
use magdi_lab::sim::{gen_corpus, gen_testset, read_testset, write_testset, AgentProfile, SimConfig, TaskFamily};
use magdi_lab::train::{train, Level, TrainConfig};
use magdi_lab::{checkpoint, EdgeVariant};

#[derive(Parser)]
#[command(
    name = "magdi-lab",
    version,
    about = "Multi-agent interaction graph distillation lab"
)]
struct Cli {
    /// Verbose logging (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate discussions and write a training corpus.
    GenCorpus(GenCorpusArgs),
    /// Print the round/agent/structure breakdown of a corpus.
    Stats(StatsArgs),
    /// Keep or drop graphs by structure class.
    Filter(FilterArgs),
    /// Train a student on one or more corpora.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a test set.
    Eval(EvalArgs),
    /// Evaluate per-level checkpoints across seeds and summarize.
    Compare(CompareArgs),
    /// Generated-token reduction factor of a student versus its teachers.
    Efficiency(EfficiencyArgs),
}

#[derive(Args)]
struct GenCorpusArgs {
    /// Task family: modsum or listmax.
    #[arg(long, default_value = "modsum")]
    task: String,
    /// Number of training graphs.
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 3)]
    agents: usize,
    #[arg(long, default_value_t = 3)]
    max_rounds: usize,
    /// Per-agent step error rates, comma separated (cycled over agents).
    #[arg(long, default_value = "0.1,0.25,0.4")]
    error_rates: String,
    /// Follow rate shared by all agents.
    #[arg(long, default_value_t = 0.8)]
    follow: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also write this many held-out test instances.
    #[arg(long, default_value_t = 0)]
    test_n: usize,
    #[arg(long)]
    test_out: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long = "in")]
    input: PathBuf,
}

#[derive(Args)]
struct FilterArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Structure classes to drop, e.g. "g3" or "g2,g3".
    #[arg(long, conflicts_with = "keep")]
    drop: Option<String>,
    /// Structure classes to keep, e.g. "g0,g1".
    #[arg(long)]
    keep: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON file with a full training config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus path; repeat for multi-task mixing.
    #[arg(long)]
    corpus: Vec<PathBuf>,
    /// Training level: r0, cn, an, magdi.
    #[arg(long)]
    level: Option<String>,
    /// Edge variant: directed, undirected, fully-connected.
    #[arg(long)]
    edge_variant: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    margin: Option<f64>,
    /// Skip per-epoch checkpoints; keep only the final one.
    #[arg(long)]
    final_only: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Self-consistency sample count; omit for greedy evaluation.
    #[arg(long)]
    sc: Option<usize>,
    #[arg(long, default_value_t = 0.7)]
    temp: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_MAX_NEW_TOKENS)]
    max_new: usize,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    /// Comma-separated checkpoint entries, one per level. Each entry is a
    /// checkpoint file (single seed), a directory holding
    /// `seed-<s>/final.magdi`, or a path template containing `{seed}`.
    #[arg(long)]
    ckpts: String,
    #[arg(long)]
    test: PathBuf,
    #[arg(long, default_value_t = 1)]
    seeds: usize,
    #[arg(long, default_value_t = DEFAULT_MAX_NEW_TOKENS)]
    max_new: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EfficiencyArgs {
    /// Corpus whose recorded discussions define the reference token cost.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Explicit reference cost, overriding --corpus.
    #[arg(long)]
    reference: Option<f64>,
    /// Evaluation report JSON produced by `eval`.
    #[arg(long)]
    report: PathBuf,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            std::process::exit(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    if let Err(err) = run(cli.command) {
        eprintln!("error: {err:#}");
        std::process::exit(2);
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenCorpus(args) => cmd_gen_corpus(args),
        Command::Stats(args) => cmd_stats(args),
        Command::Filter(args) => cmd_filter(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Efficiency(args) => cmd_efficiency(args),
    }
}

fn parse_rates(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .with_context(|| format!("bad error rate {p:?}"))
        })
        .collect()
}

fn cmd_gen_corpus(args: GenCorpusArgs) -> Result<()> {
    let family = TaskFamily::parse(&args.task)?;
    let rates = parse_rates(&args.error_rates)?;
    if rates.is_empty() {
        bail!("--error-rates must name at least one rate");
    }
    let profiles: Vec<AgentProfile> = (0..args.agents)
        .map(|agent_id| AgentProfile {
            agent_id,
            step_error_rate: rates[agent_id % rates.len()],
            follow_rate: args.follow,
        })
        .collect();
    let config = SimConfig {
        family,
        n_instances: args.n,
        n_agents: args.agents,
        max_rounds: args.max_rounds,
        profiles,
        seed: args.seed,
    };
    let stats = gen_corpus(&config, &args.out)?;
    println!("wrote {} graphs to {}", stats.n_graphs, args.out.display());
    println!("{stats}");
    if args.test_n > 0 {
        let test_out = args
            .test_out
            .clone()
            .unwrap_or_else(|| args.out.with_extension("test.jsonl"));
        let instances = gen_testset(family, args.test_n, args.seed);
        write_testset(&test_out, &instances)?;
        println!("wrote {} test instances to {}", args.test_n, test_out.display());
    }
    Ok(())
}

fn cmd_stats(args: StatsArgs) -> Result<()> {
    let corpus = read_corpus(&args.input)?;
    let stats = corpus_stats(&corpus)?;
    println!("{stats}");
    Ok(())
}

fn parse_classes(text: &str) -> Result<Vec<StructureClass>> {
    text.split(',')
        .map(|p| StructureClass::parse(p).with_context(|| format!("unknown structure class {p:?}")))
        .collect()
}

fn cmd_filter(args: FilterArgs) -> Result<()> {
    let corpus = read_corpus(&args.input)?;
    let kept = match (&args.drop, &args.keep) {
        (Some(drop), None) => {
            let classes = parse_classes(drop)?;
            filter_corpus(&corpus, |c| !classes.contains(&c))
        }
        (None, Some(keep)) => {
            let classes = parse_classes(keep)?;
            filter_corpus(&corpus, |c| classes.contains(&c))
        }
        (None, None) => bail!("pass --drop or --keep"),
        (Some(_), Some(_)) => unreachable!("clap conflicts_with"),
    };
    if kept.is_empty() {
        eprintln!("warning: filter kept no graphs");
    }
    write_corpus(&args.out, &kept)?;
    println!(
        "kept {} of {} graphs -> {}",
        kept.len(),
        corpus.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut config: TrainConfig = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            serde_json::from_str(&text).context("parsing training config")?
        }
        None => TrainConfig::default(),
    };
    if !args.corpus.is_empty() {
        config.corpora = args.corpus.clone();
    }
    if let Some(level) = &args.level {
        config.level = Level::parse(level).with_context(|| format!("unknown level {level:?}"))?;
    }
    if let Some(variant) = &args.edge_variant {
        config.edge_variant = EdgeVariant::parse(variant)
            .with_context(|| format!("unknown edge variant {variant:?}"))?;
    }
    if let Some(out) = &args.out {
        config.out_dir = out.clone();
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        config.epochs = epochs;
    }
    if let Some(lr) = args.lr {
        config.learning_rate = lr;
    }
    if let Some(batch) = args.batch {
        config.batch_size = batch;
    }
    if let Some(alpha) = args.alpha {
        config.alpha = alpha;
    }
    if let Some(beta) = args.beta {
        config.beta = beta;
    }
    if let Some(gamma) = args.gamma {
        config.gamma = gamma;
    }
    if let Some(margin) = args.margin {
        config.margin = margin;
    }
    if args.final_only {
        config.epoch_checkpoints = false;
    }
    let outcome = train(&config)?;
    println!(
        "trained level {} for {} steps -> {}",
        config.level,
        outcome.records.len(),
        outcome.final_checkpoint.display()
    );
    if let Some(last) = outcome.records.last() {
        println!(
            "final step: l_pos={:.4} l_neg={:.4} l_int={} l_mag={:.4}",
            last.l_pos,
            last.l_neg,
            last.l_int.map_or("n/a".to_string(), |v| format!("{v:.4}")),
            last.l_mag
        );
    }
    Ok(())
}

fn emit_report(report: &EvalReport, out: Option<&Path>) -> Result<()> {
    let json = report.to_json();
    match out {
        Some(path) => {
            fs::write(path, json.as_bytes())?;
            println!(
                "accuracy {:.4}, mean tokens {:.2} -> {}",
                report.accuracy,
                report.mean_generated_tokens,
                path.display()
            );
        }
        None => println!("{json}"),
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let student = checkpoint::load_student(&args.ckpt)?;
    let testset = read_testset(&args.test)?;
    let report = match args.sc {
        Some(k) => self_consistency(&student, &testset, k, args.temp, args.seed, args.max_new)?,
        None => evaluate(&student, &testset, args.max_new)?,
    };
    emit_report(&report, args.out.as_deref())
}

fn resolve_ckpt_entry(entry: &str, seeds: usize) -> Result<(String, Vec<PathBuf>)> {
    let label = Path::new(entry)
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| entry.to_string());
    if entry.contains("{seed}") {
        let paths = (1..=seeds)
            .map(|s| PathBuf::from(entry.replace("{seed}", &s.to_string())))
            .collect();
        return Ok((label, paths));
    }
    let path = PathBuf::from(entry);
    if path.is_dir() {
        let mut paths = Vec::with_capacity(seeds);
        for s in 1..=seeds {
            let per_seed = path.join(format!("seed-{s}")).join("final.magdi");
            if per_seed.exists() {
                paths.push(per_seed);
            } else if seeds == 1 && path.join("final.magdi").exists() {
                paths.push(path.join("final.magdi"));
            } else {
                bail!("missing checkpoint {}", per_seed.display());
            }
        }
        return Ok((label, paths));
    }
    if seeds != 1 {
        bail!(
            "{entry} is a single checkpoint file but --seeds {seeds} was requested; \
             use a {{seed}} template or a directory of seed-<s>/final.magdi"
        );
    }
    Ok((label, vec![path]))
}

fn cmd_compare(args: CompareArgs) -> Result<()> {
    let entries: Vec<&str> = args.ckpts.split(',').map(str::trim).collect();
    let mut checkpoints = Vec::with_capacity(entries.len());
    for entry in entries {
        checkpoints.push(resolve_ckpt_entry(entry, args.seeds)?);
    }
    let testset = read_testset(&args.test)?;
    let comparison = compare_levels(&checkpoints, &testset, args.max_new)?;
    print!("{}", comparison.render_table());
    if let Some(path) = &args.out {
        fs::write(path, comparison.to_json())?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_efficiency(args: EfficiencyArgs) -> Result<()> {
    let reference = match (args.reference, &args.corpus) {
        (Some(reference), _) => reference,
        (None, Some(corpus_path)) => {
            let corpus = read_corpus(corpus_path)?;
            reference_token_cost(&corpus, &Vocab::default_grammar())?
        }
        (None, None) => bail!("pass --corpus or --reference"),
    };
    let text = fs::read_to_string(&args.report)
        .with_context(|| format!("reading report {}", args.report.display()))?;
    let report: EvalReport = serde_json::from_str(&text).context("parsing report")?;
    let reduction = efficiency_report(reference, &report)?;
    println!(
        "reference {reference:.1} tokens, student {:.1} tokens: {reduction:.1}x reduction",
        report.mean_generated_tokens
    );
    Ok(())
}
