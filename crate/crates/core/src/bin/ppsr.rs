use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use ppsr_core::config::{self, PipelineConfig};
use ppsr_core::domain::Product;
use ppsr_core::eval::{MetricReport, MetricSpec};
use ppsr_core::ingest::{SplitDataset, SplitSpec, SplitStrategy};
use ppsr_core::pipeline::{
    self, LogSplit, PipelineSpec, RerankInputs, SummarizePaths, STORE_STAGE,
};
use ppsr_core::prompt::{self, TemplateSet};
use ppsr_core::select::{self, EmbeddingStore};
use ppsr_core::service::{self, LoadSpec, PORT_ENV};
use ppsr_core::training::{self, Stage};
use ppsr_core::util;

#[derive(Parser)]
#[command(
    name = "ppsr",
    version,
    about = "Personalized product search reranking"
)]
struct Cli {
    /// key=value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Backend id: `mock`, `http`, or an endpoint URL.
    #[arg(long, global = true, default_value = "mock", env = "PPSR_BACKEND")]
    backend: String,
    /// Directory of `<id>.tpl` template overrides.
    #[arg(long, global = true)]
    templates: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum LogsArg {
    Test,
    Train,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Chronological,
    LeaveOneOut,
}

#[derive(Subcommand)]
enum Command {
    /// Parse raw metadata and interactions, derive queries and split logs.
    Ingest {
        #[arg(long)]
        name: String,
        #[arg(long)]
        meta: PathBuf,
        #[arg(long)]
        interactions: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "chronological")]
        split: SplitArg,
    },
    /// Extract core perspectives and summarize product descriptions.
    Summarize {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        perspectives: Option<PathBuf>,
        #[arg(long)]
        stats: Option<PathBuf>,
        /// Summary template id: summary, summary_direct or summary_reasoning.
        #[arg(long, default_value = prompt::SUMMARY)]
        template: String,
    },
    /// Emit instruction-tuning records for one stage.
    EmitTrain {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        stage: Stage,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long)]
        summaries: Option<PathBuf>,
        /// Fraction of train logs to use.
        #[arg(long)]
        fraction: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed every product and query.
    Embed {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        summaries: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the history selected for one log and candidate.
    Select {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        log: String,
        #[arg(long)]
        candidate: String,
    },
    /// Rerank the base retriever's top candidates for each selected log.
    Rerank(RerankArgs),
    /// Score a ranking file on the test split.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        /// Ingested dataset directory.
        #[arg(long)]
        test: PathBuf,
        /// Baseline report for Rel.Impr.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long, default_value = ppsr_core::eval::DEFAULT_METRICS)]
        metrics: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve POST /v1/rerank and GET /v1/health.
    Serve {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        summaries: Option<PathBuf>,
        #[arg(long, env = PORT_ENV, default_value_t = 8080)]
        port: u16,
    },
    /// Run every step, resuming from the work directory's manifest.
    Pipeline {
        #[arg(long)]
        name: String,
        #[arg(long)]
        meta: PathBuf,
        #[arg(long)]
        interactions: PathBuf,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        work: PathBuf,
        /// Stop after this step.
        #[arg(long)]
        until: Option<String>,
        #[arg(long, default_value = prompt::SUMMARY)]
        summary_template: String,
    },
    /// Prompt utilities.
    Prompt {
        #[command(subcommand)]
        command: PromptCommand,
    },
}

#[derive(Args)]
struct RerankArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    summaries: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    stats: Option<PathBuf>,
    /// Logs to rerank.
    #[arg(long, value_enum, default_value = "test")]
    logs: LogsArg,
}

#[derive(Subcommand)]
enum PromptCommand {
    /// Render the rerank prompt for one log and candidate.
    Render {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        log: String,
        #[arg(long)]
        candidate: String,
        /// Select history with the cascade; without it a seeded random
        /// sample is used.
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long)]
        summaries: Option<PathBuf>,
    },
    /// List template ids.
    List,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.rng_seed = s;
    }
    let problems = config::validate_config(&cfg);
    if !problems.is_empty() {
        bail!("invalid config: {}", problems.join("; "));
    }
    Ok(cfg)
}

fn load_templates(cli: &Cli) -> Result<TemplateSet> {
    Ok(match &cli.templates {
        Some(d) => TemplateSet::with_overrides(d)?,
        None => TemplateSet::builtin(),
    })
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join(name)
}

fn render(
    dataset: &Path,
    summaries: Option<&Path>,
    store: Option<&Path>,
    log_id: &str,
    candidate: &str,
    templates: &TemplateSet,
    cfg: &PipelineConfig,
) -> Result<String> {
    let (ds, use_summary) = pipeline::load_dataset_with_summaries(dataset, summaries)?;
    let log = ds
        .all_logs()
        .find(|l| l.log_id == log_id)
        .with_context(|| format!("unknown log id: {log_id}"))?;
    let history = ds.train.visible_history(log)?;
    let ids = match store {
        Some(p) => {
            let store = EmbeddingStore::load(p)?;
            select::select_history(
                history,
                &log.query_id,
                candidate,
                &store,
                cfg.k_s2,
                cfg.exclude_candidate_from_history,
            )?
        }
        None => training::sample_stage1_history(
            history,
            cfg.k_s1,
            util::derive_seed(cfg.rng_seed, log_id),
        ),
    };
    let hist: Vec<&Product> = ids
        .iter()
        .map(|id| ds.train.product(id))
        .collect::<Result<_, _>>()?;
    let rendered = prompt::render_rerank_prompt(
        &hist,
        ds.train.query(&log.query_id)?,
        ds.train.product(candidate)?,
        templates.get(prompt::RERANK)?,
        use_summary,
        cfg.prompt_char_budget,
    )?;
    let mut out = rendered.text;
    for r in &rendered.image_refs {
        out.push_str(&format!("\n# image: {r}"));
    }
    Ok(out)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let templates = load_templates(&cli)?;
    match &cli.command {
        Command::Ingest {
            name,
            meta,
            interactions,
            out,
            split,
        } => {
            let split = SplitSpec {
                train_fraction: cfg.split_fraction,
                strategy: match split {
                    SplitArg::Chronological => SplitStrategy::PerUserChronological,
                    SplitArg::LeaveOneOut => SplitStrategy::LeaveOneOut,
                },
            };
            let report = pipeline::run_ingest(name, meta, interactions, &cfg, &split, out)?;
            let ds = SplitDataset::load(out)?;
            println!(
                "{name}: {} products, {} users, {} queries, {} train logs, {} test logs, {} malformed lines",
                ds.train.catalog.len(),
                ds.train.users.len(),
                ds.train.queries.len(),
                ds.train.logs.len(),
                ds.test.logs.len(),
                report.metadata_malformed + report.interaction_malformed
            );
        }
        Command::Summarize {
            dataset,
            out,
            perspectives,
            stats,
            template,
        } => {
            let backend = pipeline::make_backend(&cli.backend, &cfg, STORE_STAGE)?;
            let perspectives = perspectives
                .clone()
                .unwrap_or_else(|| sibling(out, "perspectives.json"));
            let stats_path = stats
                .clone()
                .unwrap_or_else(|| sibling(out, "summary_stats.json"));
            let cfg = PipelineConfig {
                rng_seed: util::derive_seed(cfg.rng_seed, "summarize"),
                ..cfg
            };
            let s = pipeline::run_summarize(
                dataset,
                backend.as_ref(),
                &templates,
                template,
                &cfg,
                &SummarizePaths {
                    summaries: out,
                    perspectives: &perspectives,
                    stats: &stats_path,
                },
            )?;
            println!(
                "summarized {}, cached {}, skipped {}; words avg {:.1} -> {:.1}, max {} -> {}",
                s.summarized,
                s.cached,
                s.skipped.len(),
                s.original_words_avg,
                s.summary_words_avg,
                s.original_words_max,
                s.summary_words_max
            );
        }
        Command::EmitTrain {
            dataset,
            stage,
            base,
            store,
            summaries,
            fraction,
            out,
        } => {
            let mut cfg = cfg.clone();
            if let Some(f) = fraction {
                if !(*f > 0.0 && *f <= 1.0) {
                    bail!("--fraction must be in (0, 1]");
                }
                cfg.train_fraction = *f;
            }
            let problems = config::validate_for_training(&cfg);
            if !problems.is_empty() {
                bail!("invalid config: {}", problems.join("; "));
            }
            let step = format!("emit-train-{stage}");
            let stats = pipeline::run_emit(
                dataset,
                summaries.as_deref(),
                store.as_deref(),
                base,
                *stage,
                &templates,
                &cfg,
                util::derive_seed(cfg.rng_seed, &step),
                out,
            )?;
            println!("{} records from {} logs", stats.records, stats.logs);
        }
        Command::Embed {
            dataset,
            summaries,
            out,
        } => {
            let backend = pipeline::make_backend(&cli.backend, &cfg, STORE_STAGE)?;
            let store = pipeline::run_embed(dataset, summaries.as_deref(), backend.as_ref(), out)?;
            println!("{} embeddings", store.len());
        }
        Command::Select {
            dataset,
            store,
            log,
            candidate,
        } => {
            let ds = SplitDataset::load(dataset)?;
            let l = ds
                .all_logs()
                .find(|l| &l.log_id == log)
                .with_context(|| format!("unknown log id: {log}"))?;
            let store = EmbeddingStore::load(store)?;
            let picked = select::select_history(
                ds.train.visible_history(l)?,
                &l.query_id,
                candidate,
                &store,
                cfg.k_s2,
                cfg.exclude_candidate_from_history,
            )?;
            println!("{}", serde_json::to_string(&picked)?);
        }
        Command::Rerank(a) => {
            let stats = pipeline::run_rerank(
                &RerankInputs {
                    dataset_dir: &a.dataset,
                    summaries: a.summaries.as_deref(),
                    store: &a.store,
                    base: &a.base,
                    logs: match a.logs {
                        LogsArg::Test => LogSplit::Test,
                        LogsArg::Train => LogSplit::Train,
                        LogsArg::All => LogSplit::All,
                    },
                },
                &cli.backend,
                &templates,
                &cfg,
                &a.out,
            )?;
            if let Some(p) = &a.stats {
                util::write_json(p, &stats)?;
            }
            println!(
                "reranked {} of {} logs ({} short, {} without base ranking)",
                stats.reranked,
                stats.logs,
                stats.short.len(),
                stats.missing_base.len()
            );
        }
        Command::Evaluate {
            run,
            test,
            baseline,
            metrics,
            out,
        } => {
            let spec: MetricSpec = metrics.parse()?;
            let baseline = baseline.as_deref().map(MetricReport::load).transpose()?;
            let report = pipeline::run_evaluate(run, test, baseline.as_ref(), &spec)?;
            if let Some(p) = out {
                report.save(p)?;
            }
            print!("{}", report.to_table("run"));
        }
        Command::Serve {
            dataset,
            store,
            summaries,
            port,
        } => {
            let spec = LoadSpec {
                dataset: dataset.clone(),
                summaries: summaries.clone(),
                store: store.clone(),
                backend_id: cli.backend.clone(),
                cfg,
                template_dir: cli.templates.clone(),
            };
            tokio::runtime::Runtime::new()?.block_on(service::serve(spec, *port))?;
        }
        Command::Pipeline {
            name,
            meta,
            interactions,
            base,
            work,
            until,
            summary_template,
        } => {
            let mut spec = PipelineSpec::new(name, meta, interactions, base, work);
            spec.split.train_fraction = cfg.split_fraction;
            spec.cfg = cfg;
            spec.backend_id = cli.backend.clone();
            spec.summary_template = summary_template.clone();
            spec.template_dir = cli.templates.clone();
            let outcome = pipeline::run_pipeline(&spec, until.as_deref())?;
            for s in &outcome.executed {
                println!("ran     {s}");
            }
            for s in &outcome.skipped {
                println!("skipped {s}");
            }
            let report = pipeline::Layout::new(work).report_table();
            if report.exists() {
                print!("{}", std::fs::read_to_string(report)?);
            }
        }
        Command::Prompt { command } => match command {
            PromptCommand::Render {
                dataset,
                log,
                candidate,
                store,
                summaries,
            } => {
                let text = render(
                    dataset,
                    summaries.as_deref(),
                    store.as_deref(),
                    log,
                    candidate,
                    &templates,
                    &cfg,
                )?;
                println!("{text}");
            }
            PromptCommand::List => {
                for id in templates.ids() {
                    println!("{id}");
                }
            }
        },
    }
    Ok(())
}

fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("PPSR_LOG")
                .unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
