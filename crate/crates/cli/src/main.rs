use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use ctxmt::analysis::{
    context_sweep, corpus_diagnostics, occlusion_saliency, quality_bins, Binning, GreedyChrfPipeline, Normalization,
    SegmentInput,
};
use ctxmt::backend::{self, Backend, OpenAiClient, OpenAiConfig, SamplingParams, StubBackend};
use ctxmt::corpus::{corpus_stats, corpus_stats_with_tagger, parse_corpus, Conversation, CorpusFormat};
use ctxmt::decoder::{build_pool, MbrOptions, QualityDecoder};
use ctxmt::evalharness::{load_config, run_experiment, Injected};
use ctxmt::metrics::{ChrfParams, Metric, MetricRegistry};
use ctxmt::muda::{muda_f1, tag_segment, RuleBook};
use ctxmt::promptkit::{
    build_context, export_sft, prompt_for_turn, ContextPolicy, ExportMode, ExportOptions, LanguageMode, LanguageTable,
    MbrOutputs, Window,
};

#[derive(Parser)]
#[command(name = "ctxmt", version, about = "Context-aware translation of bilingual conversations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Corpus statistics and validation.
    #[command(subcommand)]
    Corpus(CorpusCmd),
    /// Export prompt/completion training records.
    ExportSft(ExportArgs),
    /// Translate a corpus with greedy, MBR or QE decoding.
    Decode(DecodeArgs),
    /// Discourse phenomenon tagging and F1.
    #[command(subcommand)]
    Muda(MudaCmd),
    /// Context-usage diagnostics.
    #[command(subcommand)]
    Analyze(AnalyzeCmd),
    /// Run an experiment described by a TOML config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct CorpusArgs {
    path: PathBuf,
    #[arg(long, default_value = "canonical_jsonl")]
    format: String,
}

impl CorpusArgs {
    fn load(&self) -> Result<Vec<Conversation>> {
        let format: CorpusFormat = self.format.parse()?;
        let parsed = parse_corpus(&self.path, format)?;
        for r in &parsed.rejected {
            log::warn!("rejected {} (line {}): {}", r.conversation_id, r.line, r.reason);
        }
        Ok(parsed.conversations)
    }
}

#[derive(Subcommand)]
enum CorpusCmd {
    Stats {
        #[command(flatten)]
        corpus: CorpusArgs,
        /// Also report the share of references with a MuDA tag.
        #[arg(long)]
        muda: bool,
        #[arg(long, default_value_t = 2)]
        decimals: usize,
    },
    /// Exits with status 1 when any conversation is rejected.
    Validate {
        #[command(flatten)]
        corpus: CorpusArgs,
    },
}

#[derive(Args)]
struct BackendArgs {
    /// JSON program for the stub backend.
    #[arg(long, conflicts_with = "base_url")]
    stub: Option<PathBuf>,
    /// OpenAI-compatible endpoint; defaults come from the environment.
    #[arg(long)]
    base_url: Option<String>,
    #[arg(long)]
    model: Option<String>,
    /// Request field that carries the epsilon-sampling threshold.
    #[arg(long)]
    epsilon_field: Option<String>,
}

impl BackendArgs {
    fn build(&self) -> Result<Arc<dyn Backend>> {
        if let Some(p) = &self.stub {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            return Ok(Arc::new(StubBackend::from_json(&text)?));
        }
        let mut cfg = OpenAiConfig::from_env()?;
        if let Some(u) = &self.base_url {
            cfg.base_url = u.clone();
        }
        if let Some(m) = &self.model {
            cfg.model = m.clone();
        }
        if self.epsilon_field.is_some() {
            cfg.epsilon_field = self.epsilon_field.clone();
        }
        Ok(Arc::new(OpenAiClient::new(cfg)?))
    }
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long, default_value = "reference")]
    mode: ExportMode,
    #[arg(long, default_value = "full")]
    context: Window,
    #[arg(long, default_value = "bilingual")]
    lang_mode: LanguageMode,
    #[arg(long)]
    max_context_chars: Option<usize>,
    /// Decoder output (JSONL with conversation_id, t, hypothesis) for mbr-distill.
    #[arg(long)]
    mbr_outputs: Option<PathBuf>,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum DecodeStrategy {
    Greedy,
    Mbr,
    Qe,
}

#[derive(Args)]
struct DecodeArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[command(flatten)]
    backend: BackendArgs,
    #[arg(long, value_enum, default_value = "greedy")]
    strategy: DecodeStrategy,
    /// Utility (MBR) or quality-estimation (QE) metric id.
    #[arg(long, default_value = "chrf")]
    metric: String,
    /// TOML file defining additional metrics.
    #[arg(long)]
    metrics_config: Option<PathBuf>,
    /// Prompt context window.
    #[arg(long, default_value = "full")]
    context: Window,
    #[arg(long, default_value = "bilingual")]
    lang_mode: LanguageMode,
    /// Source turns prepended to metric inputs.
    #[arg(long, default_value = "none")]
    context_k: Window,
    #[arg(long, default_value_t = 100)]
    n_candidates: usize,
    #[arg(long, default_value_t = 0.02)]
    epsilon: f64,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum MudaCmd {
    /// Tag one segment; earlier turns given with --prior act as antecedents.
    Tag {
        #[arg(long)]
        lang: String,
        text: String,
        #[arg(long)]
        prior: Vec<String>,
        #[arg(long)]
        rules_dir: Option<PathBuf>,
    },
    /// F1 between two files of segments, one per line, in conversation order.
    F1 {
        #[arg(long)]
        lang: String,
        #[arg(long)]
        refs: PathBuf,
        #[arg(long)]
        hyps: PathBuf,
        #[arg(long)]
        rules_dir: Option<PathBuf>,
    },
}

#[derive(Args)]
struct AnalysisArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[command(flatten)]
    backend: BackendArgs,
    #[arg(long, default_value = "full")]
    context: Window,
    /// Average log-probabilities per token instead of summing.
    #[arg(long)]
    per_token: bool,
}

impl AnalysisArgs {
    fn normalization(&self) -> Normalization {
        if self.per_token {
            Normalization::PerToken
        } else {
            Normalization::Sum
        }
    }
}

#[derive(Subcommand)]
enum AnalyzeCmd {
    /// P-CXMI of each reference (JSONL).
    Pcxmi(AnalysisArgs),
    /// Likelihood difference of greedy outputs with and without context (JSONL).
    Ld(AnalysisArgs),
    /// Occlusion saliency of each context turn (JSONL).
    Saliency(AnalysisArgs),
    /// Quality bins from two files of per-segment scores (CSV).
    Bins {
        #[arg(long)]
        noctx: PathBuf,
        #[arg(long)]
        ctx: PathBuf,
        #[arg(long, default_value_t = 5)]
        n_bins: usize,
        #[arg(long)]
        quantile: bool,
    },
    /// Corpus chrF of greedy decoding across context windows (CSV).
    Sweep {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        backend: BackendArgs,
        #[arg(long, value_delimiter = ',', default_values_t = vec![1, 2, 4, 8])]
        k: Vec<usize>,
        #[arg(long, default_value = "bilingual")]
        lang_mode: LanguageMode,
    },
}

fn emit(output: Option<&Path>, text: &str) -> Result<()> {
    match output {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn rules(dir: Option<&Path>) -> Result<RuleBook> {
    Ok(match dir {
        Some(d) => RuleBook::load_dir(d)?,
        None => RuleBook::starter(),
    })
}

fn read_lines(p: &Path) -> Result<Vec<String>> {
    Ok(fs::read_to_string(p)
        .with_context(|| format!("reading {}", p.display()))?
        .lines()
        .map(str::to_string)
        .collect())
}

fn corpus_cmd(cmd: CorpusCmd) -> Result<ExitCode> {
    match cmd {
        CorpusCmd::Stats { corpus, muda, decimals } => {
            let convs = corpus.load()?;
            let stats = if muda {
                corpus_stats_with_tagger(&convs, &RuleBook::starter())
            } else {
                corpus_stats(&convs)
            };
            println!("{}", serde_json::to_string_pretty(&stats.rounded(decimals))?);
            Ok(ExitCode::SUCCESS)
        }
        CorpusCmd::Validate { corpus } => {
            let parsed = parse_corpus(&corpus.path, corpus.format.parse()?)?;
            for r in &parsed.rejected {
                println!("rejected {} (line {}): {}", r.conversation_id, r.line, r.reason);
            }
            println!("{} conversations valid, {} rejected", parsed.conversations.len(), parsed.rejected.len());
            Ok(if parsed.rejected.is_empty() { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
    }
}

fn export_cmd(args: ExportArgs) -> Result<ExitCode> {
    let convs = args.corpus.load()?;
    let outputs: Option<MbrOutputs> = match &args.mbr_outputs {
        Some(p) => {
            let mut m = HashMap::new();
            for line in read_lines(p)?.iter().filter(|l| !l.trim().is_empty()) {
                let v: serde_json::Value = serde_json::from_str(line)?;
                let (Some(id), Some(t), Some(h)) = (v["conversation_id"].as_str(), v["t"].as_u64(), v["hypothesis"].as_str()) else {
                    bail!("{}: expected conversation_id, t and hypothesis", p.display());
                };
                m.insert((id.to_string(), t as usize), h.to_string());
            }
            Some(m)
        }
        None if args.mode == ExportMode::MbrDistill => bail!("--mode mbr-distill needs --mbr-outputs"),
        None => None,
    };
    let opts = ExportOptions {
        policy: ContextPolicy::new(args.context, args.lang_mode),
        mode: args.mode,
        max_context_chars: args.max_context_chars,
    };
    let export = export_sft(&convs, &opts, outputs.as_ref(), &LanguageTable::default())?;
    if export.skipped > 0 {
        log::warn!("skipped {} turns without a completion", export.skipped);
    }
    emit(args.output.as_deref(), &export.to_jsonl())?;
    Ok(ExitCode::SUCCESS)
}

fn decode_cmd(args: DecodeArgs) -> Result<ExitCode> {
    let convs = args.corpus.load()?;
    let backend = args.backend.build()?;
    let registry = match &args.metrics_config {
        Some(p) => MetricRegistry::from_toml(&fs::read_to_string(p)?)?,
        None => MetricRegistry::default(),
    };
    let metric: Arc<dyn Metric<f64>> = registry.build(&args.metric)?;
    let decoder = QualityDecoder::<f64>::new();
    let policy = ContextPolicy::new(args.context, args.lang_mode);
    let languages = LanguageTable::default();
    let params = SamplingParams {
        n_samples: args.n_candidates,
        epsilon: args.epsilon,
        temperature: args.temperature,
        seed: Some(args.seed),
        ..Default::default()
    };
    let mut out = String::new();
    for conv in &convs {
        let mut outputs: HashMap<usize, String> = HashMap::new();
        for t in 1..=conv.len() {
            let (_, prompt) = prompt_for_turn(conv, t, policy, Some(&outputs), &languages)?;
            let turn = conv.turn(t).expect("in range");
            let hyp = match args.strategy {
                DecodeStrategy::Greedy => backend::greedy(backend.as_ref(), &prompt.text)?,
                DecodeStrategy::Mbr | DecodeStrategy::Qe => {
                    let samples = backend.generate(&prompt.text, &params)?;
                    let full = build_context(conv, t, ContextPolicy::full(), None)?;
                    let pool = build_pool(&samples, &params, &turn.source_text, full)?;
                    let sel = match args.strategy {
                        DecodeStrategy::Mbr => decoder.mbr_select(&pool, metric.as_ref(), &MbrOptions::with_context(args.context_k))?,
                        _ => decoder.qe_rerank(&pool, metric.as_ref(), args.context_k)?,
                    };
                    sel.winner(&pool).to_string()
                }
            };
            out.push_str(&json!({"conversation_id": conv.id, "t": t, "hypothesis": hyp}).to_string());
            out.push('\n');
            outputs.insert(turn.index, hyp);
        }
    }
    emit(args.output.as_deref(), &out)?;
    Ok(ExitCode::SUCCESS)
}

fn muda_cmd(cmd: MudaCmd) -> Result<ExitCode> {
    match cmd {
        MudaCmd::Tag { lang, text, prior, rules_dir } => {
            let book = rules(rules_dir.as_deref())?;
            let prior: Vec<&str> = prior.iter().map(String::as_str).collect();
            let tags = tag_segment(&text, &prior, &lang, &book)?;
            println!("{}", serde_json::to_string_pretty(&tags)?);
        }
        MudaCmd::F1 { lang, refs, hyps, rules_dir } => {
            let book = rules(rules_dir.as_deref())?;
            let tag_all = |lines: &[String]| -> Result<Vec<_>> {
                (0..lines.len())
                    .map(|i| {
                        let prior: Vec<&str> = lines[..i].iter().map(String::as_str).collect();
                        Ok(tag_segment(&lines[i], &prior, &lang, &book)?)
                    })
                    .collect()
            };
            let report = muda_f1(&tag_all(&read_lines(&refs)?)?, &tag_all(&read_lines(&hyps)?)?)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn analyze_cmd(cmd: AnalyzeCmd) -> Result<ExitCode> {
    let languages = LanguageTable::default();
    match cmd {
        AnalyzeCmd::Pcxmi(a) | AnalyzeCmd::Ld(a) => {
            let convs = a.corpus.load()?;
            let backend = a.backend.build()?;
            for row in corpus_diagnostics(backend.as_ref(), &convs, a.context, &languages, a.normalization())? {
                println!("{}", serde_json::to_string(&row)?);
            }
        }
        AnalyzeCmd::Saliency(a) => {
            let convs = a.corpus.load()?;
            let backend = a.backend.build()?;
            let policy = ContextPolicy::bilingual(a.context);
            for conv in &convs {
                for t in 2..=conv.len() {
                    let seg = SegmentInput::from_turn(conv, t, policy, None)?;
                    if seg.context.is_empty() {
                        continue;
                    }
                    let (_, with) = prompt_for_turn(conv, t, policy, None, &languages)?;
                    let (_, without) = prompt_for_turn(conv, t, ContextPolicy::none(), None, &languages)?;
                    let hyp_ctx = backend::greedy(backend.as_ref(), &with.text)?;
                    let hyp_noctx = backend::greedy(backend.as_ref(), &without.text)?;
                    let map = occlusion_saliency(backend.as_ref(), &seg, &hyp_ctx, &hyp_noctx, &languages, a.normalization())?;
                    println!("{}", json!({"conversation_id": conv.id, "t": t, "saliency": map}));
                }
            }
        }
        AnalyzeCmd::Bins { noctx, ctx, n_bins, quantile } => {
            let parse = |p: &Path| -> Result<Vec<f64>> {
                read_lines(p)?
                    .iter()
                    .filter(|l| !l.trim().is_empty())
                    .map(|l| l.trim().parse::<f64>().with_context(|| format!("bad score {l:?} in {}", p.display())))
                    .collect()
            };
            let binning = if quantile { Binning::Quantile } else { Binning::EqualWidth };
            print!("{}", quality_bins(&parse(&noctx)?, &parse(&ctx)?, n_bins, binning)?.to_csv());
        }
        AnalyzeCmd::Sweep { corpus, backend, k, lang_mode } => {
            let convs = corpus.load()?;
            let backend = backend.build()?;
            let pipeline = GreedyChrfPipeline {
                backend: backend.as_ref(),
                conversations: &convs,
                languages: &languages,
                language_mode: lang_mode,
                chrf: ChrfParams::default(),
            };
            let table = context_sweep(&pipeline, &k);
            print!("{}", table.to_csv());
            if table.rows.iter().any(|r| r.error.is_some()) {
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Corpus(c) => corpus_cmd(c),
        Command::ExportSft(a) => export_cmd(a),
        Command::Decode(a) => decode_cmd(a),
        Command::Muda(c) => muda_cmd(c),
        Command::Analyze(c) => analyze_cmd(c),
        Command::Run { config, out } => (|| {
            let (cfg, base) = load_config(&config)?;
            let outcome = run_experiment(&cfg, &base, &out, &Injected::default())?;
            eprintln!("wrote {}", outcome.output_dir.display());
            if outcome.failed_legs > 0 {
                eprintln!("{} legs failed", outcome.failed_legs);
                return Ok(ExitCode::from(1));
            }
            Ok(ExitCode::SUCCESS)
        })(),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
