use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use stree_core::cost::{fit_linear, fit_quadratic, required_tau_ratio, select_model, FitReport, RuntimeSample};
use stree_core::decode::{autoregressive, decode, DecodeParams, DraftStrategy, Verifier};
use stree_core::model::{Model, ModelConfig};

use stree_cli::bench::{run_bench, BenchConfig};
use stree_cli::formats::{
    bench_csv_to_string, read_bench_csv, read_model_config, read_tree_preset, AnalyzeReport,
    GenerateReport, RatioReport,
};
use stree_cli::suites::{run_suites, SuiteSelection};

#[derive(Parser)]
#[command(
    name = "stree",
    version,
    about = "Tree speculative decoding on toy state-space models",
    after_help = "Set STREE_LOG=debug for progress logging. Exit codes: \
                  0 success, 1 a check or verification failed, 2 usage or input error."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate tokens and report acceptance statistics.
    Generate(GenerateArgs),
    /// Time packed tree forwarding against the unrolled baseline.
    Bench(BenchArgs),
    /// Fit cost models to a bench CSV and compare tree sizes.
    Analyze(AnalyzeArgs),
    /// Run randomized equivalence suites; fails with exit code 1.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Target model config JSON; omit for the built-in demo target.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Draft model config JSON, or "self" to self-draft with the target.
    /// Omit for the built-in smaller draft.
    #[arg(long)]
    draft: Option<String>,
    /// Draft tree: chain:N, binary:D, beam:M,N, a preset letter A..E, or a
    /// path to a preset JSON file.
    #[arg(long, default_value = "binary:3")]
    tree: String,
    #[arg(long, value_enum, default_value_t = VerifierArg::Greedy)]
    verifier: VerifierArg,
    #[arg(long, default_value_t = 0.0)]
    temperature: f64,
    #[arg(long, default_value_t = 64)]
    max_tokens: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated prompt token ids.
    #[arg(long, default_value = "1")]
    prompt: String,
    #[arg(long, value_enum, default_value_t = ModeArg::Speculative)]
    mode: ModeArg,
    #[arg(long, value_enum, default_value_t = FormatArg::Text)]
    format: FormatArg,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Model config JSON; omit for the built-in demo target.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Full binary tree depths to time, comma separated.
    #[arg(long, default_value = "4,5,6")]
    depths: String,
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    #[arg(long, default_value_t = 11)]
    reps: usize,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Bench CSV produced by `stree bench`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = FitArg::Auto)]
    fit: FitArg,
    /// Which measured column to fit.
    #[arg(long, value_enum, default_value_t = SeriesArg::Packed)]
    series: SeriesArg,
    /// Baseline tree size for the acceptance-ratio comparison.
    #[arg(long)]
    n1: Option<usize>,
    /// Candidate tree size for the acceptance-ratio comparison.
    #[arg(long)]
    n2: Option<usize>,
    #[arg(long, value_enum, default_value_t = FormatArg::Text)]
    format: FormatArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, value_enum, default_value_t = SuiteArg::All)]
    suite: SuiteArg,
    /// Random instances per suite.
    #[arg(long, default_value_t = 200)]
    instances: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = FormatArg::Text)]
    format: FormatArg,
    /// Corrupt one scan output to prove failures are caught.
    #[arg(long)]
    inject_error: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum VerifierArg {
    Greedy,
    Mss,
    Naive,
}

impl VerifierArg {
    fn to_core(self) -> Verifier {
        match self {
            VerifierArg::Greedy => Verifier::Greedy,
            VerifierArg::Mss => Verifier::Mss,
            VerifierArg::Naive => Verifier::Naive,
        }
    }
    fn name(self) -> &'static str {
        match self {
            VerifierArg::Greedy => "greedy",
            VerifierArg::Mss => "mss",
            VerifierArg::Naive => "naive",
        }
    }
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum ModeArg {
    Speculative,
    Autoregressive,
    VanillaSd,
}

impl ModeArg {
    fn name(self) -> &'static str {
        match self {
            ModeArg::Speculative => "speculative",
            ModeArg::Autoregressive => "autoregressive",
            ModeArg::VanillaSd => "vanilla-sd",
        }
    }
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum FormatArg {
    Text,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum FitArg {
    Auto,
    Linear,
    Quadratic,
}

#[derive(Clone, Copy, ValueEnum)]
enum SeriesArg {
    Packed,
    Unrolled,
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    All,
    Scan,
    Chain,
    Replay,
    Losslessness,
}

impl SuiteArg {
    fn to_selection(self) -> SuiteSelection {
        match self {
            SuiteArg::All => SuiteSelection::All,
            SuiteArg::Scan => SuiteSelection::Scan,
            SuiteArg::Chain => SuiteSelection::Chain,
            SuiteArg::Replay => SuiteSelection::Replay,
            SuiteArg::Losslessness => SuiteSelection::Losslessness,
        }
    }
}

fn default_target_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 64,
        d_model: 32,
        d_state: 8,
        n_layers: 4,
        attn_layers: vec![],
        seed: 11,
    }
}

fn default_draft_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 64,
        d_model: 32,
        d_state: 8,
        n_layers: 2,
        attn_layers: vec![],
        seed: 13,
    }
}

fn load_model(path: Option<&Path>, fallback: ModelConfig) -> Result<Model> {
    let config = match path {
        Some(p) => read_model_config(p)?,
        None => fallback,
    };
    Ok(Model::init(config)?)
}

/// Builtin specs win; anything else must be a preset file on disk.
fn resolve_tree(spec: &str) -> Result<(String, DraftStrategy)> {
    if let Ok(strategy) = DraftStrategy::parse(spec) {
        return Ok((spec.to_string(), strategy));
    }
    let path = Path::new(spec);
    if path.exists() {
        let preset = read_tree_preset(path)?;
        let shape = preset.shape();
        log::info!(
            "loaded preset {} ({}): {} nodes",
            preset.name,
            preset.label,
            shape.node_count()
        );
        return Ok((preset.name, DraftStrategy::Static(shape)));
    }
    bail!(
        "--tree {spec:?} is neither a builtin spec (chain:N, binary:D, beam:M,N, A..E) \
         nor a readable preset file"
    )
}

fn parse_prompt(s: &str, vocab: usize) -> Result<Vec<u32>> {
    let mut prompt = Vec::new();
    for part in s.split(',') {
        let tok: u32 = part
            .trim()
            .parse()
            .with_context(|| format!("bad prompt token {part:?}"))?;
        if tok as usize >= vocab {
            bail!("prompt token {tok} out of vocab 0..{vocab}");
        }
        prompt.push(tok);
    }
    Ok(prompt)
}

fn emit(out: Option<&Path>, content: &str) -> Result<()> {
    match out {
        Some(path) => {
            fs::write(path, content).with_context(|| format!("writing {}", path.display()))?;
            eprintln!("wrote {}", path.display());
        }
        None => print!("{content}"),
    }
    Ok(())
}

fn cmd_generate(args: &GenerateArgs) -> Result<i32> {
    let target = load_model(args.model.as_deref(), default_target_config())?;
    let draft_model = match args.draft.as_deref() {
        None => load_model(None, default_draft_config())?,
        Some("self") => load_model(args.model.as_deref(), default_target_config())?,
        Some(path) => load_model(Some(Path::new(path)), default_draft_config())?,
    };
    let prompt = parse_prompt(&args.prompt, target.config.vocab_size)?;

    let (mut draft_name, mut strategy) = resolve_tree(&args.tree)?;
    let mut verifier = args.verifier.to_core();
    let mut verifier_name = args.verifier.name().to_string();
    if args.mode == ModeArg::Autoregressive {
        draft_name = "none".to_string();
        verifier_name = "none".to_string();
    }
    if args.mode == ModeArg::VanillaSd {
        // Classic draft-then-verify: one sampled chain, rejection sampling.
        if !matches!(strategy, DraftStrategy::Chain { .. }) {
            strategy = DraftStrategy::Chain { depth: 4 };
            draft_name = "chain:4".to_string();
            log::info!("vanilla-sd mode replaces --tree with {draft_name}");
        }
        verifier = Verifier::Mss;
        verifier_name = "mss".to_string();
    }

    let output = match args.mode {
        ModeArg::Autoregressive => {
            autoregressive(&target, &prompt, args.max_tokens, args.temperature, args.seed)?
        }
        _ => {
            let params = DecodeParams {
                max_tokens: args.max_tokens,
                temperature: args.temperature,
                seed: args.seed,
                verifier,
                draft: strategy,
            };
            decode(&target, &draft_model, &prompt, &params)?
        }
    };
    log::info!(
        "emitted {} tokens in {} target calls (tau {:.3})",
        output.stats.tokens,
        output.stats.calls,
        output.stats.tau
    );

    let report = GenerateReport {
        mode: args.mode.name().to_string(),
        draft: draft_name,
        verifier: verifier_name,
        temperature: args.temperature,
        seed: args.seed,
        prompt,
        output: output.tokens,
        stats: output.stats,
    };
    let content = match args.format {
        FormatArg::Json => format!("{}\n", serde_json::to_string_pretty(&report)?),
        FormatArg::Text => {
            let toks: Vec<String> = report.output.iter().map(|t| t.to_string()).collect();
            let hist: Vec<String> = report.stats.histogram.iter().map(|h| h.to_string()).collect();
            format!(
                "mode: {}\ndraft: {}\nverifier: {}\ntemperature: {}\nseed: {}\n\
                 tokens: {}\ncalls: {}\ntau: {:.4}\nhistogram: [{}]\noutput: {}\n",
                report.mode,
                report.draft,
                report.verifier,
                report.temperature,
                report.seed,
                report.stats.tokens,
                report.stats.calls,
                report.stats.tau,
                hist.join(", "),
                toks.join(" ")
            )
        }
    };
    emit(args.out.as_deref(), &content)?;
    Ok(0)
}

fn cmd_bench(args: &BenchArgs) -> Result<i32> {
    let model = load_model(args.model.as_deref(), default_target_config())?;
    let mut depths = Vec::new();
    for part in args.depths.split(',') {
        let d: usize = part
            .trim()
            .parse()
            .with_context(|| format!("bad depth {part:?}"))?;
        depths.push(d);
    }
    let cfg = BenchConfig {
        depths,
        warmup: args.warmup,
        reps: args.reps,
    };
    let rows = run_bench(&model, &cfg)?;
    emit(args.out.as_deref(), &bench_csv_to_string(&rows))?;
    Ok(0)
}

fn cmd_analyze(args: &AnalyzeArgs) -> Result<i32> {
    let rows = read_bench_csv(&args.input)?;
    let (series_name, samples): (&str, Vec<RuntimeSample>) = match args.series {
        SeriesArg::Packed => (
            "packed",
            rows.iter()
                .map(|r| RuntimeSample {
                    n: r.packed_tokens,
                    millis: r.packed_ms,
                })
                .collect(),
        ),
        SeriesArg::Unrolled => (
            "unrolled",
            rows.iter()
                .map(|r| RuntimeSample {
                    n: r.unrolled_tokens,
                    millis: r.unrolled_ms,
                })
                .collect(),
        ),
    };

    let model = match args.fit {
        FitArg::Linear => fit_linear(&samples)?,
        FitArg::Quadratic => fit_quadratic(&samples)?,
        FitArg::Auto => select_model(&samples)?,
    };
    let fit = FitReport::from(&model);

    let ratio = match (args.n1, args.n2) {
        (Some(n1), Some(n2)) => Some(RatioReport {
            n1,
            n2,
            required_tau_ratio: required_tau_ratio(&model, n1, &model, n2)?,
        }),
        (None, None) => None,
        _ => bail!("--n1 and --n2 must be given together"),
    };

    let report = AnalyzeReport {
        series: series_name.to_string(),
        fit,
        ratio,
    };
    let content = match args.format {
        FormatArg::Json => format!("{}\n", serde_json::to_string_pretty(&report)?),
        FormatArg::Text => {
            let params: Vec<String> = report
                .fit
                .params
                .iter()
                .map(|p| format!("{p:.6}"))
                .collect();
            let mut text = format!(
                "series: {}\nfit: {} [{}] residual {:.3e}\n",
                report.series,
                report.fit.kind,
                params.join(", "),
                report.fit.residual
            );
            if let Some(r) = &report.ratio {
                text.push_str(&format!(
                    "required tau ratio N={} -> N={}: {:.4}\n",
                    r.n1, r.n2, r.required_tau_ratio
                ));
            }
            text
        }
    };
    emit(args.out.as_deref(), &content)?;
    Ok(0)
}

fn cmd_verify(args: &VerifyArgs) -> Result<i32> {
    let reports = run_suites(
        args.suite.to_selection(),
        args.seed,
        args.instances,
        args.inject_error,
    )?;
    let all_pass = reports.iter().all(|r| r.pass);
    match args.format {
        FormatArg::Json => {
            println!("{}", serde_json::to_string_pretty(&reports)?);
        }
        FormatArg::Text => {
            for r in &reports {
                println!(
                    "suite {}: {} instances, max rel err {:.3e} (tol {:.0e}) .. {}",
                    r.name,
                    r.instances,
                    r.max_rel_error,
                    r.tolerance,
                    if r.pass { "ok" } else { "FAILED" }
                );
            }
            println!(
                "{}",
                if all_pass {
                    "all suites passed"
                } else {
                    "VERIFICATION FAILED"
                }
            );
        }
    }
    Ok(if all_pass { 0 } else { 1 })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("STREE_LOG", "off")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Analyze(args) => cmd_analyze(args),
        Command::Verify(args) => cmd_verify(args),
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}
