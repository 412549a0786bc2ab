use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use pou_core::analytics::{reward_report, tool_call_ratios};
use pou_core::environment::simulate::{policy_registry, simulate, SimConfig, Task, World, WorldConfig};
use pou_core::environment::{Corpus, Environment, ProxyConfig};
use pou_core::filter::filter_corpus;
use pou_core::io::{read_records, Record, RecordFormat};
use pou_core::masking::compute_masks;
use pou_core::oracle::{helpfulness_registry, judge_registry, HelpfulnessOracle, JudgeOracle};
use pou_core::perturbation::{passing_steps, perturber_registry, probe_step, step_seed, Perturber};
use pou_core::protocol::Trajectory;
use pou_core::registry::Settings;
use pou_core::rewards::{RewardBreakdown, Scorer};
use pou_core::validation::{check_format, check_steps};

#[derive(Parser)]
#[command(name = "pou", version, about = "Parse, validate and score evidence-citing agent rollouts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse one tagged rollout text file and print it as JSON.
    Parse(ParseArgs),
    /// Check format and step contracts; exits non-zero unless every record is valid.
    Validate(InputArgs),
    /// Compute reward breakdowns against gold answers.
    Score(ScoreArgs),
    /// Perturb the evidence behind steps and report the oracle's reaction.
    Perturb(PerturbArgs),
    /// Split records into accepted and rejected startup trajectories.
    Filter(FilterArgs),
    /// Tool-call ratios and reward summaries.
    Stats(StatsArgs),
    /// Run scripted policies in the mock environment.
    Simulate(SimulateArgs),
    /// Emit train/mask byte spans for each record.
    Mask(InputArgs),
}

#[derive(Args)]
struct InputArgs {
    /// JSONL input, `-` for stdin.
    #[arg(long = "in", default_value = "-")]
    input: PathBuf,
    /// Records are `{"query", "raw"}` holding tagged text instead of trajectory JSON.
    #[arg(long)]
    raw: bool,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ParseArgs {
    /// Rollout text file, `-` for stdin.
    #[arg(long = "in", default_value = "-")]
    input: PathBuf,
    #[arg(long, default_value = "")]
    query: String,
}

#[derive(Args)]
struct OracleArgs {
    /// Helpfulness oracle: stub or remote.
    #[arg(long, default_value = "stub")]
    oracle: String,
    #[arg(long)]
    oracle_addr: Option<String>,
    /// Extra oracle settings as key=value.
    #[arg(long = "oracle-opt", value_parser = key_value)]
    oracle_opts: Vec<(String, String)>,
    /// Answer judge: stub or remote.
    #[arg(long, default_value = "stub")]
    judge: String,
    #[arg(long)]
    judge_addr: Option<String>,
    #[arg(long, default_value = "pool")]
    perturber: String,
}

#[derive(Args)]
struct ScoreArgs {
    #[command(flatten)]
    input: InputArgs,
    /// JSONL of `{"answer", "query"?, "label"?}`, one per input record in order.
    #[arg(long)]
    gold: PathBuf,
    #[arg(long, default_value_t = 1)]
    b_max: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    oracles: OracleArgs,
}

#[derive(Args)]
struct PerturbArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Step to perturb; every passing step when omitted.
    #[arg(long)]
    step: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    oracles: OracleArgs,
}

#[derive(Args)]
struct FilterArgs {
    #[arg(long = "in", default_value = "-")]
    input: PathBuf,
    #[arg(long)]
    raw: bool,
    #[arg(long)]
    out_accept: PathBuf,
    #[arg(long)]
    out_report: PathBuf,
}

#[derive(Args)]
struct StatsArgs {
    /// Trajectory JSONL for tool-call ratios.
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long)]
    raw: bool,
    /// Score output JSONL for reward summaries, grouped by `label` when present.
    #[arg(long)]
    scores: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct SimulateArgs {
    /// Policies to run, e.g. `--policy grounded --policy hacking`.
    #[arg(long = "policy", default_values_t = ["grounded".to_string(), "hacking".to_string()])]
    policies: Vec<String>,
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Seed of the generated world when no corpus is given.
    #[arg(long, default_value_t = 42)]
    world_seed: u64,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    kg: Option<PathBuf>,
    /// Task JSONL of `{"question", "answer"}`; required with --corpus.
    #[arg(long)]
    tasks: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    top_k: usize,
    #[arg(long, default_value_t = 10)]
    max_steps: usize,
    /// Replace every response's content with this token.
    #[arg(long)]
    blank: Option<String>,
    /// Trajectory JSONL output; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Gold JSONL aligned with the trajectories, usable with `score --gold`.
    #[arg(long)]
    gold_out: Option<PathBuf>,
    /// Score each episode and print a per-policy reward summary to stderr.
    #[arg(long)]
    score: bool,
    #[arg(long, default_value_t = 1)]
    b_max: usize,
}

fn key_value(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_owned(), v.trim().to_owned()))
        .ok_or_else(|| format!("expected key=value, got `{s}`"))
}

fn open_input(path: &Path) -> Result<Box<dyn BufRead>> {
    if path.as_os_str() == "-" {
        Ok(Box::new(BufReader::new(io::stdin())))
    } else {
        let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
        Ok(Box::new(BufReader::new(f)))
    }
}

fn open_output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    match path {
        Some(p) => {
            let f = File::create(p).with_context(|| format!("creating {}", p.display()))?;
            Ok(Box::new(BufWriter::new(f)))
        }
        None => Ok(Box::new(BufWriter::new(io::stdout()))),
    }
}

fn format_of(raw: bool) -> RecordFormat {
    if raw {
        RecordFormat::Raw
    } else {
        RecordFormat::Json
    }
}

fn records(args: &InputArgs) -> Result<Vec<Record>> {
    Ok(read_records(open_input(&args.input)?, format_of(args.raw))?)
}

fn emit<T: Serialize>(out: &mut dyn Write, value: &T) -> Result<()> {
    serde_json::to_writer(&mut *out, value)?;
    writeln!(out)?;
    Ok(())
}

struct Oracles {
    oracle: Box<dyn HelpfulnessOracle>,
    judge: Box<dyn JudgeOracle>,
    perturber: Box<dyn Perturber>,
}

impl OracleArgs {
    fn build(&self) -> Result<Oracles> {
        let mut settings: Settings = self.oracle_opts.iter().cloned().collect();
        if let Some(addr) = &self.oracle_addr {
            settings.insert("addr".into(), addr.clone());
        }
        let mut judge_settings = Settings::new();
        if let Some(addr) = &self.judge_addr {
            judge_settings.insert("addr".into(), addr.clone());
        }
        Ok(Oracles {
            oracle: helpfulness_registry().build(&self.oracle, &settings)?,
            judge: judge_registry().build(&self.judge, &judge_settings)?,
            perturber: perturber_registry().build(&self.perturber, &Settings::new())?,
        })
    }
}

#[derive(Serialize)]
struct LineError<'a> {
    line: usize,
    error: &'a str,
}

fn cmd_parse(args: ParseArgs) -> Result<ExitCode> {
    let mut text = String::new();
    open_input(&args.input)?.read_to_string(&mut text)?;
    match Trajectory::from_raw(args.query, &text) {
        Ok(t) => {
            let mut out = open_output(None)?;
            serde_json::to_writer_pretty(&mut out, &t)?;
            writeln!(out)?;
            Ok(ExitCode::SUCCESS)
        }
        Err(e) => {
            eprintln!("{e}");
            Ok(ExitCode::FAILURE)
        }
    }
}

#[derive(Serialize)]
struct ValidationLine {
    line: usize,
    valid: bool,
    format: pou_core::validation::FormatVerdict,
    steps: Vec<StepLine>,
}

#[derive(Serialize)]
struct StepLine {
    step: usize,
    #[serde(flatten)]
    verdict: pou_core::validation::StepVerdict,
}

fn cmd_validate(args: InputArgs) -> Result<ExitCode> {
    let mut out = open_output(args.out.as_deref())?;
    let mut all_valid = true;
    for rec in records(&args)? {
        match &rec.parsed {
            Ok(t) => {
                let format = check_format(t);
                for w in &format.warnings {
                    log::warn!("line {}: {w}", rec.line);
                }
                all_valid &= format.valid;
                let steps = check_steps(t).into_iter().map(|(step, verdict)| StepLine { step, verdict }).collect();
                emit(&mut out, &ValidationLine { line: rec.line, valid: format.valid, format, steps })?;
            }
            Err(e) => {
                all_valid = false;
                emit(&mut out, &LineError { line: rec.line, error: &e.to_string() })?;
            }
        }
    }
    out.flush()?;
    Ok(if all_valid { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

#[derive(Deserialize)]
struct Gold {
    answer: String,
    #[serde(default)]
    query: Option<String>,
    #[serde(default)]
    label: Option<String>,
}

fn read_gold(path: &Path) -> Result<Vec<Gold>> {
    let mut out = Vec::new();
    for (i, line) in open_input(path)?.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{}: line {}", path.display(), i + 1))?);
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct ScoreLine {
    line: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
    breakdown: RewardBreakdown,
}

fn cmd_score(args: ScoreArgs) -> Result<ExitCode> {
    let recs = records(&args.input)?;
    let gold = read_gold(&args.gold)?;
    if gold.len() != recs.len() {
        bail!("{} gold answers for {} records", gold.len(), recs.len());
    }
    let o = args.oracles.build()?;
    let scorer = Scorer {
        oracle: o.oracle.as_ref(),
        judge: o.judge.as_ref(),
        perturber: o.perturber.as_ref(),
        b_max: args.b_max,
        seed: args.seed,
    };
    let mut out = open_output(args.input.out.as_deref())?;
    let mut failures = 0;
    for (rec, g) in recs.iter().zip(gold) {
        let result = rec.parsed.as_ref().map_err(|e| e.to_string()).and_then(|t| {
            if let Some(q) = &g.query {
                if !t.query.is_empty() && q != &t.query {
                    return Err(format!("gold query `{q}` does not match record query `{}`", t.query));
                }
            }
            scorer.score(t, &g.answer).map_err(|e| e.to_string())
        });
        match result {
            Ok(breakdown) => emit(&mut out, &ScoreLine { line: rec.line, label: g.label, breakdown })?,
            Err(e) => {
                failures += 1;
                emit(&mut out, &LineError { line: rec.line, error: &e })?;
            }
        }
    }
    out.flush()?;
    Ok(if failures == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

#[derive(Serialize)]
struct PerturbLine {
    line: usize,
    record: pou_core::perturbation::PerturbationRecord,
    #[serde(skip_serializing_if = "Option::is_none")]
    perturbed: Option<pou_core::protocol::ProxyResponse>,
}

fn cmd_perturb(args: PerturbArgs) -> Result<ExitCode> {
    let o = args.oracles.build()?;
    let mut out = open_output(args.input.out.as_deref())?;
    let mut failures = 0;
    for rec in records(&args.input)? {
        let t = match &rec.parsed {
            Ok(t) => t,
            Err(e) => {
                failures += 1;
                emit(&mut out, &LineError { line: rec.line, error: &e.to_string() })?;
                continue;
            }
        };
        let steps = match args.step {
            Some(s) => vec![s],
            None => passing_steps(t),
        };
        for k in steps {
            match probe_step(t, k, o.oracle.as_ref(), o.perturber.as_ref(), step_seed(args.seed, k)) {
                Ok((record, perturbed)) => emit(&mut out, &PerturbLine { line: rec.line, record, perturbed })?,
                Err(e) => {
                    failures += 1;
                    emit(&mut out, &LineError { line: rec.line, error: &e.to_string() })?;
                }
            }
        }
    }
    out.flush()?;
    Ok(if failures == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn cmd_filter(args: FilterArgs) -> Result<ExitCode> {
    let accepted = open_output(Some(&args.out_accept))?;
    let reports = open_output(Some(&args.out_report))?;
    let summary = filter_corpus(open_input(&args.input)?, format_of(args.raw), accepted, reports)?;
    eprintln!("{} records: {} accepted, {} rejected", summary.total, summary.accepted, summary.rejected);
    Ok(ExitCode::SUCCESS)
}

fn cmd_stats(args: StatsArgs) -> Result<ExitCode> {
    if args.input.is_none() && args.scores.is_none() {
        bail!("give --in, --scores, or both");
    }
    let mut out = open_output(None)?;
    if let Some(path) = &args.input {
        let recs = read_records(open_input(path)?, format_of(args.raw))?;
        let mut ts = Vec::new();
        for rec in recs {
            match rec.parsed {
                Ok(t) => ts.push(t),
                Err(e) => log::warn!("line {}: skipped: {e}", rec.line),
            }
        }
        let stats = tool_call_ratios(&ts)?;
        if args.json {
            emit(&mut out, &stats)?;
        } else {
            write!(out, "{}", stats.to_text())?;
        }
    }
    if let Some(path) = &args.scores {
        let mut breakdowns = Vec::new();
        let mut labels = Vec::new();
        for line in open_input(path)?.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let Ok(s) = serde_json::from_str::<ScoreLine>(&line) else {
                log::warn!("skipping non-score line");
                continue;
            };
            labels.push(s.label.unwrap_or_default());
            breakdowns.push(s.breakdown);
        }
        let grouped = labels.iter().any(|l| !l.is_empty());
        let report = reward_report(&breakdowns, grouped.then_some(labels.as_slice()))?;
        if args.json {
            emit(&mut out, &report)?;
        } else {
            write!(out, "{}", report.to_text())?;
        }
    }
    out.flush()?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct GoldLine<'a> {
    query: &'a str,
    answer: &'a str,
    label: &'a str,
}

fn cmd_simulate(args: SimulateArgs) -> Result<ExitCode> {
    let (corpus, tasks) = match &args.corpus {
        Some(path) => {
            let tasks_path = args.tasks.as_ref().ok_or_else(|| anyhow!("--tasks is required with --corpus"))?;
            let corpus = Corpus::load(path, args.kg.as_deref(), Corpus::DEFAULT_CHUNK_SENTENCES)?;
            let mut tasks: Vec<Task> = Vec::new();
            for line in open_input(tasks_path)?.lines() {
                let line = line?;
                if !line.trim().is_empty() {
                    tasks.push(serde_json::from_str(&line)?);
                }
            }
            (corpus, tasks)
        }
        None => {
            let world = World::generate(args.world_seed, WorldConfig::default());
            (world.corpus, world.tasks)
        }
    };
    if tasks.is_empty() {
        bail!("no tasks to run");
    }
    let mut env = Environment::new(corpus, ProxyConfig::with_top_k(args.top_k)?)?;
    if let Some(token) = &args.blank {
        env = env.blanked(token.clone());
    }
    let cfg = SimConfig {
        episodes: args.episodes,
        seed: args.seed,
        max_steps: args.max_steps,
    };
    let registry = policy_registry();
    let mut out = open_output(args.out.as_deref())?;
    let mut gold_out = args.gold_out.as_deref().map(|p| open_output(Some(p))).transpose()?;
    let o = OracleArgs {
        oracle: "stub".into(),
        oracle_addr: None,
        oracle_opts: Vec::new(),
        judge: "stub".into(),
        judge_addr: None,
        perturber: "pool".into(),
    }
    .build()?;
    let (mut breakdowns, mut labels) = (Vec::new(), Vec::new());
    for policy in &args.policies {
        let episodes = simulate(&env, &tasks, &registry, policy, &Settings::new(), &cfg)?;
        for e in episodes {
            emit(&mut out, &e.trajectory)?;
            if let Some(g) = gold_out.as_mut() {
                emit(g.as_mut(), &GoldLine { query: &e.task.question, answer: &e.task.answer, label: policy })?;
            }
            if args.score {
                let scorer = Scorer {
                    oracle: o.oracle.as_ref(),
                    judge: o.judge.as_ref(),
                    perturber: o.perturber.as_ref(),
                    b_max: args.b_max,
                    seed: e.seed,
                };
                breakdowns.push(scorer.score(&e.trajectory, &e.task.answer)?);
                labels.push(policy.clone());
            }
        }
    }
    out.flush()?;
    if let Some(mut g) = gold_out {
        g.flush()?;
    }
    if args.score {
        eprint!("{}", reward_report(&breakdowns, Some(&labels))?.to_text());
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct MaskLine {
    line: usize,
    spans: Vec<pou_core::masking::MaskSpan>,
}

fn cmd_mask(args: InputArgs) -> Result<ExitCode> {
    let mut out = open_output(args.out.as_deref())?;
    let mut failures = 0;
    for rec in records(&args)? {
        let result = rec
            .parsed
            .as_ref()
            .map_err(|e| e.to_string())
            .and_then(|t| compute_masks(t).map_err(|e| e.to_string()));
        match result {
            Ok(spans) => emit(&mut out, &MaskLine { line: rec.line, spans })?,
            Err(e) => {
                failures += 1;
                emit(&mut out, &LineError { line: rec.line, error: &e })?;
            }
        }
    }
    out.flush()?;
    Ok(if failures == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Parse(a) => cmd_parse(a),
        Command::Validate(a) => cmd_validate(a),
        Command::Score(a) => cmd_score(a),
        Command::Perturb(a) => cmd_perturb(a),
        Command::Filter(a) => cmd_filter(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Mask(a) => cmd_mask(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
