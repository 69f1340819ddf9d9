//! Pipeline steps and manifest-driven resumption.
//!
//! Every step reads and writes files, so each can also run on its own from
//! the command line. The pipeline records content hashes of each step's
//! inputs and outputs in `manifest.json`; a later run skips a step whose
//! outputs are present and whose inputs, parameters and upstream steps are
//! unchanged.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backend::{self, Backend};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::eval::{self, MetricSpec};
use crate::ingest::{self, SplitDataset, SplitSpec};
use crate::prompt::{self, TemplateSet};
use crate::rerank::{self, RerankContext};
use crate::select::{self, EmbeddingStore};
use crate::summarize::{self, PerspectiveSet, SummaryStore};
use crate::training::{self, EmitContext, Stage};
use crate::util;

pub const STEPS: [&str; 7] = [
    "ingest",
    "summarize",
    "emit-train-stage1",
    "embed",
    "emit-train-stage2",
    "rerank",
    "evaluate",
];

/// Stage tag of the model that produces the embedding store.
pub const STORE_STAGE: &str = "stage1";
/// Stage tag of the model that scores candidates.
pub const SCORE_STAGE: &str = "stage2";

pub fn make_backend(id: &str, cfg: &PipelineConfig, stage_tag: &str) -> Result<Box<dyn Backend>> {
    backend::from_id(id, cfg.rng_seed, cfg.embedding_dim, stage_tag)
}

/// A split dataset with summaries applied when a summary store is given.
pub fn load_dataset_with_summaries(
    dir: &Path,
    summaries: Option<&Path>,
) -> Result<(SplitDataset, bool)> {
    let mut ds = SplitDataset::load(dir)?;
    let Some(path) = summaries else {
        return Ok((ds, false));
    };
    let store = SummaryStore::load(path)?;
    store.apply(&mut ds.train);
    store.apply(&mut ds.test);
    Ok((ds, !store.is_empty()))
}

pub fn run_ingest(
    name: &str,
    meta: &Path,
    interactions: &Path,
    cfg: &PipelineConfig,
    split: &SplitSpec,
    out_dir: &Path,
) -> Result<ingest::LoadReport> {
    let (ds, report) = ingest::load_dataset(name, meta, interactions, cfg.malformed_threshold)?;
    let (train, test) = ingest::split_dataset(&ds, split, cfg.rng_seed)?;
    SplitDataset { train, test }.save(out_dir, split)?;
    Ok(report)
}

pub struct SummarizePaths<'a> {
    pub summaries: &'a Path,
    pub perspectives: &'a Path,
    pub stats: &'a Path,
}

/// Summarize the catalog. An existing summary file is reused as a cache and
/// an existing perspectives file skips extraction.
pub fn run_summarize(
    dataset_dir: &Path,
    backend: &dyn Backend,
    templates: &TemplateSet,
    template_id: &str,
    cfg: &PipelineConfig,
    out: &SummarizePaths,
) -> Result<summarize::SummaryStats> {
    let ds = SplitDataset::load(dataset_dir)?;
    let cached = out
        .summaries
        .exists()
        .then(|| SummaryStore::load(out.summaries))
        .transpose()?;
    let perspectives: Option<PerspectiveSet> = if out.perspectives.exists() && cached.is_some() {
        Some(util::read_json(out.perspectives)?)
    } else {
        None
    };
    let outcome = summarize::run_summarization(
        &ds,
        backend,
        templates,
        template_id,
        cfg,
        cached.as_ref(),
        perspectives.as_ref(),
    )?;
    outcome.store.save(out.summaries)?;
    if perspectives.is_none() && !outcome.perspectives.core.is_empty() {
        util::write_json(out.perspectives, &outcome.perspectives)?;
    }
    util::write_json(out.stats, &outcome.stats)?;
    Ok(outcome.stats)
}

pub fn run_embed(
    dataset_dir: &Path,
    summaries: Option<&Path>,
    backend: &dyn Backend,
    out: &Path,
) -> Result<EmbeddingStore> {
    let (ds, use_summary) = load_dataset_with_summaries(dataset_dir, summaries)?;
    let checkpoint = out.with_extension("partial");
    let store = select::build_embedding_store(&ds.train, backend, use_summary, Some(&checkpoint))?;
    store.save(out)?;
    std::fs::remove_file(&checkpoint).map_err(|e| Error::io(&checkpoint, e))?;
    Ok(store)
}

#[allow(clippy::too_many_arguments)]
pub fn run_emit(
    dataset_dir: &Path,
    summaries: Option<&Path>,
    store: Option<&Path>,
    base: &Path,
    stage: Stage,
    templates: &TemplateSet,
    cfg: &PipelineConfig,
    seed: u64,
    out: &Path,
) -> Result<training::EmitStats> {
    let (ds, use_summary) = load_dataset_with_summaries(dataset_dir, summaries)?;
    let store = match (stage, store) {
        (Stage::Stage2, None) => return Err(Error::MissingStore),
        (Stage::Stage2, Some(p)) if !p.exists() => return Err(Error::MissingStore),
        (Stage::Stage2, Some(p)) => Some(EmbeddingStore::load(p)?),
        (Stage::Stage1, _) => None,
    };
    let base = rerank::load_rankings(base)?;
    let ctx = EmitContext {
        dataset: &ds.train,
        base: &base,
        store: store.as_ref(),
        templates,
        cfg,
        use_summary,
    };
    let (records, stats) = training::emit_training_set(&ctx, stage, seed)?;
    training::save_records(out, &records)?;
    Ok(stats)
}

/// Which logs a batch rerank covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LogSplit {
    #[default]
    Test,
    Train,
    All,
}

pub struct RerankInputs<'a> {
    pub dataset_dir: &'a Path,
    pub summaries: Option<&'a Path>,
    pub store: &'a Path,
    pub base: &'a Path,
    pub logs: LogSplit,
}

/// Rerank the selected logs and write the ranking file.
pub fn run_rerank(
    inputs: &RerankInputs,
    backend_id: &str,
    templates: &TemplateSet,
    cfg: &PipelineConfig,
    out: &Path,
) -> Result<rerank::RerankStats> {
    let (ds, use_summary) = load_dataset_with_summaries(inputs.dataset_dir, inputs.summaries)?;
    let store = EmbeddingStore::load(inputs.store)?;
    let backend = make_backend(backend_id, cfg, SCORE_STAGE)?;
    let base = rerank::load_rankings(inputs.base)?;
    let ctx = RerankContext {
        dataset: &ds.test,
        store: &store,
        backend: backend.as_ref(),
        templates,
        cfg,
        use_summary,
    };
    let logs: Vec<_> = match inputs.logs {
        LogSplit::Test => ds.test.logs.clone(),
        LogSplit::Train => ds.train.logs.clone(),
        LogSplit::All => ds.all_logs().cloned().collect(),
    };
    let (rankings, stats) = rerank::rerank_all(&ctx, &logs, &base)?;
    rerank::save_rankings(out, &rankings)?;
    Ok(stats)
}

/// Evaluate a run on the test split. With a baseline report, Rel.Impr is
/// added for every metric whose baseline is positive.
pub fn run_evaluate(
    run: &Path,
    dataset_dir: &Path,
    baseline: Option<&eval::MetricReport>,
    spec: &MetricSpec,
) -> Result<eval::MetricReport> {
    let ds = SplitDataset::load(dataset_dir)?;
    let rankings = rerank::load_rankings(run)?;
    let mut report = eval::evaluate(&rankings, &ds.test.logs, spec)?;
    if let Some(b) = baseline {
        report.rel_impr = Some(eval::relative_improvement_defined(&report, b));
    }
    Ok(report)
}

/// Artifact locations inside a pipeline work directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub work: PathBuf,
}

impl Layout {
    pub fn new(work: impl Into<PathBuf>) -> Self {
        Layout { work: work.into() }
    }
    pub fn dataset(&self) -> PathBuf {
        self.work.join("dataset")
    }
    pub fn ingest_report(&self) -> PathBuf {
        self.work.join("ingest_report.json")
    }
    pub fn summaries(&self) -> PathBuf {
        self.work.join("summaries.jsonl")
    }
    pub fn perspectives(&self) -> PathBuf {
        self.work.join("perspectives.json")
    }
    pub fn summary_stats(&self) -> PathBuf {
        self.work.join("summary_stats.json")
    }
    pub fn train(&self, stage: Stage) -> PathBuf {
        self.work.join(format!("train_{stage}.jsonl"))
    }
    pub fn store(&self) -> PathBuf {
        self.work.join("embeddings.jsonl")
    }
    pub fn reranked(&self) -> PathBuf {
        self.work.join("reranked.jsonl")
    }
    pub fn rerank_stats(&self) -> PathBuf {
        self.work.join("rerank_stats.json")
    }
    pub fn base_report(&self) -> PathBuf {
        self.work.join("base_report.json")
    }
    pub fn report(&self) -> PathBuf {
        self.work.join("report.json")
    }
    pub fn report_table(&self) -> PathBuf {
        self.work.join("report.txt")
    }
    pub fn manifest(&self) -> PathBuf {
        self.work.join("manifest.json")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactHash {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    pub name: String,
    pub seed: u64,
    /// Hash of everything besides files that affects the step's output.
    pub params: String,
    pub inputs: Vec<ArtifactHash>,
    pub outputs: Vec<ArtifactHash>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: String,
    pub seed: u64,
    pub backend_id: String,
    pub steps: Vec<StepRecord>,
}

impl RunManifest {
    pub fn step(&self, name: &str) -> Option<&StepRecord> {
        self.steps.iter().find(|s| s.name == name)
    }

    pub fn load(path: &Path) -> Result<Self> {
        util::read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        util::write_json(path, self)
    }
}

fn hash_files(paths: &[PathBuf]) -> Result<Vec<ArtifactHash>> {
    paths
        .iter()
        .map(|p| {
            Ok(ArtifactHash {
                path: p.clone(),
                sha256: util::file_sha256(p)?,
            })
        })
        .collect()
}

/// Pipeline inputs. The base ranking file covers train logs (hard negatives)
/// and test logs (reranking).
#[derive(Debug, Clone)]
pub struct PipelineSpec {
    pub name: String,
    pub metadata: PathBuf,
    pub interactions: PathBuf,
    pub base: PathBuf,
    pub work: PathBuf,
    pub backend_id: String,
    pub cfg: PipelineConfig,
    pub split: SplitSpec,
    pub summary_template: String,
    pub metrics: MetricSpec,
    pub template_dir: Option<PathBuf>,
}

impl PipelineSpec {
    pub fn new(
        name: impl Into<String>,
        metadata: impl Into<PathBuf>,
        interactions: impl Into<PathBuf>,
        base: impl Into<PathBuf>,
        work: impl Into<PathBuf>,
    ) -> Self {
        let cfg = PipelineConfig::default();
        PipelineSpec {
            name: name.into(),
            metadata: metadata.into(),
            interactions: interactions.into(),
            base: base.into(),
            work: work.into(),
            backend_id: "mock".into(),
            split: SplitSpec {
                train_fraction: cfg.split_fraction,
                ..SplitSpec::default()
            },
            cfg,
            summary_template: prompt::SUMMARY.into(),
            metrics: MetricSpec::default(),
            template_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PipelineOutcome {
    pub executed: Vec<String>,
    pub skipped: Vec<String>,
    pub manifest: RunManifest,
}

struct StepPlan {
    name: &'static str,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    extra_params: String,
}

fn plan(spec: &PipelineSpec, layout: &Layout) -> Vec<StepPlan> {
    let ds_files = SplitDataset::files(&layout.dataset());
    let with = |extra: &[PathBuf]| {
        let mut v = ds_files.clone();
        v.extend_from_slice(extra);
        v
    };
    vec![
        StepPlan {
            name: "ingest",
            inputs: vec![spec.metadata.clone(), spec.interactions.clone()],
            outputs: [ds_files.clone(), vec![layout.ingest_report()]].concat(),
            extra_params: format!("{}|{:?}", spec.name, spec.split),
        },
        StepPlan {
            name: "summarize",
            inputs: ds_files.clone(),
            outputs: vec![
                layout.summaries(),
                layout.perspectives(),
                layout.summary_stats(),
            ],
            extra_params: spec.summary_template.clone(),
        },
        StepPlan {
            name: "emit-train-stage1",
            inputs: with(&[layout.summaries(), spec.base.clone()]),
            outputs: vec![layout.train(Stage::Stage1)],
            extra_params: String::new(),
        },
        StepPlan {
            name: "embed",
            inputs: with(&[layout.summaries()]),
            outputs: vec![layout.store()],
            extra_params: String::new(),
        },
        StepPlan {
            name: "emit-train-stage2",
            inputs: with(&[layout.summaries(), layout.store(), spec.base.clone()]),
            outputs: vec![layout.train(Stage::Stage2)],
            extra_params: String::new(),
        },
        StepPlan {
            name: "rerank",
            inputs: with(&[layout.summaries(), layout.store(), spec.base.clone()]),
            outputs: vec![layout.reranked(), layout.rerank_stats()],
            extra_params: String::new(),
        },
        StepPlan {
            name: "evaluate",
            inputs: with(&[layout.reranked(), spec.base.clone()]),
            outputs: vec![layout.base_report(), layout.report(), layout.report_table()],
            extra_params: spec
                .metrics
                .0
                .iter()
                .map(|m| m.to_string())
                .collect::<Vec<_>>()
                .join(","),
        },
    ]
}

/// Decide whether a step must run, failing if a recorded output was changed
/// by someone else.
fn needs_run(
    step: &StepPlan,
    params: &str,
    prev: Option<&StepRecord>,
    upstream_ran: bool,
) -> Result<bool> {
    let Some(prev) = prev else { return Ok(true) };
    if step.outputs.iter().any(|p| !p.exists()) {
        return Ok(true);
    }
    for out in &prev.outputs {
        if util::file_sha256(&out.path)? != out.sha256 {
            return Err(Error::StaleArtifact {
                path: out.path.clone(),
            });
        }
    }
    if upstream_ran || prev.params != params {
        return Ok(true);
    }
    let recorded: BTreeMap<&Path, &str> = prev
        .inputs
        .iter()
        .map(|a| (a.path.as_path(), a.sha256.as_str()))
        .collect();
    for p in &step.inputs {
        match recorded.get(p.as_path()) {
            Some(h) if p.exists() && util::file_sha256(p)? == *h => {}
            _ => return Ok(true),
        }
    }
    Ok(false)
}

fn execute(
    name: &str,
    spec: &PipelineSpec,
    layout: &Layout,
    templates: &TemplateSet,
    seed: u64,
) -> Result<()> {
    let cfg = &spec.cfg;
    let summaries = layout.summaries();
    let summaries = Some(summaries.as_path());
    match name {
        "ingest" => {
            let report = run_ingest(
                &spec.name,
                &spec.metadata,
                &spec.interactions,
                cfg,
                &spec.split,
                &layout.dataset(),
            )?;
            util::write_json(&layout.ingest_report(), &report)
        }
        "summarize" => {
            let backend = make_backend(&spec.backend_id, cfg, STORE_STAGE)?;
            let cfg = PipelineConfig {
                rng_seed: seed,
                ..cfg.clone()
            };
            let stats = run_summarize(
                &layout.dataset(),
                backend.as_ref(),
                templates,
                &spec.summary_template,
                &cfg,
                &SummarizePaths {
                    summaries: &layout.summaries(),
                    perspectives: &layout.perspectives(),
                    stats: &layout.summary_stats(),
                },
            )?;
            if !layout.perspectives().exists() {
                util::write_json(
                    &layout.perspectives(),
                    &PerspectiveSet {
                        dataset_name: spec.name.clone(),
                        core: Vec::new(),
                        counts: BTreeMap::new(),
                    },
                )?;
            }
            tracing::info!(
                summarized = stats.summarized,
                cached = stats.cached,
                skipped = stats.skipped.len(),
                "summaries"
            );
            Ok(())
        }
        "emit-train-stage1" | "emit-train-stage2" => {
            let stage = if name.ends_with('1') {
                Stage::Stage1
            } else {
                Stage::Stage2
            };
            let store = layout.store();
            let stats = run_emit(
                &layout.dataset(),
                summaries,
                (stage == Stage::Stage2).then_some(store.as_path()),
                &spec.base,
                stage,
                templates,
                cfg,
                seed,
                &layout.train(stage),
            )?;
            tracing::info!(%stage, records = stats.records, "training records");
            Ok(())
        }
        "embed" => {
            let backend = make_backend(&spec.backend_id, cfg, STORE_STAGE)?;
            let store = run_embed(
                &layout.dataset(),
                summaries,
                backend.as_ref(),
                &layout.store(),
            )?;
            tracing::info!(entries = store.len(), "embedding store");
            Ok(())
        }
        "rerank" => {
            let stats = run_rerank(
                &RerankInputs {
                    dataset_dir: &layout.dataset(),
                    summaries,
                    store: &layout.store(),
                    base: &spec.base,
                    logs: LogSplit::Test,
                },
                &spec.backend_id,
                templates,
                cfg,
                &layout.reranked(),
            )?;
            util::write_json(&layout.rerank_stats(), &stats)
        }
        "evaluate" => {
            let base = run_evaluate(&spec.base, &layout.dataset(), None, &spec.metrics)?;
            base.save(&layout.base_report())?;
            let report = run_evaluate(
                &layout.reranked(),
                &layout.dataset(),
                Some(&base),
                &spec.metrics,
            )?;
            report.save(&layout.report())?;
            let table = format!("{}{}", base.to_table("base"), report.to_table("reranked"));
            util::write_atomic(&layout.report_table(), |w| w.write_all(table.as_bytes()))
        }
        other => Err(Error::InvalidInput(format!("unknown step {other}"))),
    }
}

/// Run the pipeline, resuming from the manifest in the work directory.
/// With `until`, steps after the named one are not run.
pub fn run_pipeline(spec: &PipelineSpec, until: Option<&str>) -> Result<PipelineOutcome> {
    let problems = crate::config::validate_for_training(&spec.cfg);
    if !problems.is_empty() {
        return Err(Error::Config(problems.join("; ")));
    }
    if let Some(u) = until.filter(|u| !STEPS.contains(u)) {
        return Err(Error::InvalidInput(format!("unknown step {u}")));
    }
    let layout = Layout::new(&spec.work);
    std::fs::create_dir_all(&layout.work).map_err(|e| Error::io(&layout.work, e))?;
    let templates = match &spec.template_dir {
        Some(dir) => TemplateSet::with_overrides(dir)?,
        None => TemplateSet::builtin(),
    };
    let config_text = spec.cfg.to_config_string();
    let prev = if layout.manifest().exists() {
        RunManifest::load(&layout.manifest())?
    } else {
        RunManifest::default()
    };
    let mut manifest = RunManifest {
        config: config_text.clone(),
        seed: spec.cfg.rng_seed,
        backend_id: spec.backend_id.clone(),
        steps: Vec::new(),
    };
    let mut outcome = PipelineOutcome {
        executed: Vec::new(),
        skipped: Vec::new(),
        manifest: RunManifest::default(),
    };
    let mut upstream_ran = false;
    for step in plan(spec, &layout) {
        let seed = util::derive_seed(spec.cfg.rng_seed, step.name);
        let params = util::sha256_hex(
            format!(
                "{config_text}|{}|{}|{}",
                spec.backend_id, seed, step.extra_params
            )
            .as_bytes(),
        );
        let wrap = |e: Error| Error::Step {
            step: step.name.to_string(),
            source: Box::new(e),
        };
        let run = needs_run(&step, &params, prev.step(step.name), upstream_ran).map_err(wrap)?;
        if run {
            tracing::info!(step = step.name, "running");
            let inputs = hash_files(&step.inputs).map_err(wrap)?;
            execute(step.name, spec, &layout, &templates, seed).map_err(wrap)?;
            manifest.steps.push(StepRecord {
                name: step.name.to_string(),
                seed,
                params,
                inputs,
                outputs: hash_files(&step.outputs).map_err(wrap)?,
            });
            outcome.executed.push(step.name.to_string());
            upstream_ran = true;
        } else {
            tracing::info!(step = step.name, "up to date");
            manifest.steps.push(
                prev.step(step.name)
                    .cloned()
                    .expect("skipped steps have a record"),
            );
            outcome.skipped.push(step.name.to_string());
        }
        manifest.save(&layout.manifest())?;
        if until == Some(step.name) {
            break;
        }
    }
    outcome.manifest = manifest;
    Ok(outcome)
}
