use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use agentsynth::curator::{filter_corpus, subsample_to_budget, FilterReport};
use agentsynth::datastore::{
    count_stores, export_sft, load_index, manifest, read_jsonl, render_stats_table, save_index,
    write_json, write_jsonl, DatasetManifest, StorePaths,
};
use agentsynth::env::{
    Environment, SimWorldSpec, WorldRegistry, DEMO_DOCUMENTS_JSONL, DEMO_MOCK_TABLE_JSON,
    SETTINGS_WORLD_JSON, SHOP_WORLD_JSON,
};
use agentsynth::gateway::{HttpProvider, LanguageModel, ScriptedMock, ScriptedMockTable};
use agentsynth::retrieval::{Embedder, HttpEmbedder, KnowledgeBase, MockEmbedder};
use agentsynth::runtime::{Agent, Mode};
use agentsynth::synth::{SynthCounters, SynthEvent, Synthesizer};
use agentsynth::{Document, Example, Termination};
use serde::Serialize;

use crate::config::{PipelineConfig, MOCK_PROVIDER};
use crate::error::{CliError, EXIT_MAX_STEPS, EXIT_OK};

pub const RAW_TRAJECTORIES_FILE: &str = "raw_trajectories.jsonl";
pub const EXAMPLES_FILE: &str = "examples.jsonl";
pub const FILTERED_EXAMPLES_FILE: &str = "examples.filtered.jsonl";
pub const SFT_FILE: &str = "sft.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SYNTH_REPORT_FILE: &str = "synth_report.json";
pub const FILTER_REPORT_FILE: &str = "filter_report.json";
pub const INDEX_DIR: &str = "index";
pub const TRACE_FILE: &str = "trace.jsonl";

pub const DEMO_CONFIG_TOML: &str = include_str!("../assets/demo.toml");

pub fn build_gateway(config: &PipelineConfig) -> Result<Box<dyn LanguageModel>, CliError> {
    if config.provider == MOCK_PROVIDER {
        let path = config
            .paths
            .mock_table
            .as_ref()
            .map(|p| config.resolve(p))
            .ok_or_else(|| CliError::Config("paths.mock_table is required for the mock provider".into()))?;
        let text = fs::read_to_string(&path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let table = ScriptedMockTable::from_json(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        return Ok(Box::new(ScriptedMock::new(table)?));
    }
    let provider = config.providers[&config.provider].clone();
    Ok(Box::new(HttpProvider::new(provider)?))
}

pub fn build_embedder(config: &PipelineConfig) -> Result<Arc<dyn Embedder>, CliError> {
    match config.retrieval.embedder.as_str() {
        "http" => {
            let id = config.retrieval.embedding_provider.as_deref().unwrap_or_default();
            let provider = config.providers[id].clone();
            let dim = config.retrieval.embedding_dimension.unwrap_or_default();
            Ok(Arc::new(HttpEmbedder::new(provider, dim)?))
        }
        _ => Ok(Arc::new(MockEmbedder)),
    }
}

pub fn load_registry(config: &PipelineConfig) -> Result<WorldRegistry, CliError> {
    let Some(dir) = &config.paths.worlds else {
        return Ok(WorldRegistry::builtin());
    };
    let dir = config.resolve(dir);
    let mut files: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| CliError::Config(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    let mut worlds = Vec::new();
    for f in files {
        let text = fs::read_to_string(&f).map_err(|e| CliError::Config(format!("{}: {e}", f.display())))?;
        worlds.push(SimWorldSpec::from_json(&text).map_err(|e| CliError::Config(format!("{}: {e}", f.display())))?);
    }
    Ok(WorldRegistry::new(worlds)?)
}

fn store_paths(config: &PipelineConfig, only_existing: bool) -> StorePaths {
    let pick = |p: PathBuf| (!only_existing || p.exists()).then_some(p);
    StorePaths {
        documents: pick(config.documents_path()),
        raw_trajectories: pick(config.out(RAW_TRAJECTORIES_FILE)),
        examples: pick(config.out(EXAMPLES_FILE)),
        filtered_examples: pick(config.out(FILTERED_EXAMPLES_FILE)),
    }
}

fn write_manifest(config: &PipelineConfig, paths: &StorePaths) -> Result<DatasetManifest, CliError> {
    let m = manifest(paths, &config.fingerprint())?;
    write_json(&config.out(MANIFEST_FILE), &m)?;
    Ok(m)
}

#[derive(Serialize)]
struct SynthReport<'a> {
    counters: &'a SynthCounters,
    events: &'a [SynthEvent],
}

pub fn cmd_synth(config: &PipelineConfig) -> Result<i32, CliError> {
    let docs_path = config.documents_path();
    if !docs_path.is_file() {
        return Err(CliError::Config(format!("paths.documents: {} does not exist", docs_path.display())));
    }
    let docs: Vec<Document> = read_jsonl(&docs_path)?;
    let gateway = build_gateway(config)?;
    let registry = load_registry(config)?;
    let synth = Synthesizer {
        gateway: gateway.as_ref(),
        model_id: &config.models.generator,
        system_message: config.system_message(),
        config: &config.synthesis,
    };
    let factory = |d: &Document, seed: u64| {
        registry
            .env_for_document_seeded(d, seed)
            .map(|e| Box::new(e) as Box<dyn Environment>)
    };
    let out = synth.synthesize_corpus(&docs, &factory)?;
    for e in &out.events {
        log::warn!("{:?} {}: {}", e.stage, e.item.as_deref().unwrap_or(&e.doc_id), e.message);
    }
    write_jsonl(&config.out(RAW_TRAJECTORIES_FILE), &out.rollouts)?;
    write_jsonl(&config.out(EXAMPLES_FILE), &out.examples)?;
    write_json(
        &config.out(SYNTH_REPORT_FILE),
        &SynthReport {
            counters: &out.counters,
            events: &out.events,
        },
    )?;
    let paths = StorePaths {
        filtered_examples: None,
        ..store_paths(config, false)
    };
    let m = write_manifest(config, &paths)?;
    log::info!(
        "synthesized {} examples from {} rollouts over {} documents",
        m.counts.examples,
        m.counts.raw_trajectories,
        m.counts.documents
    );
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct FilterSummary<'a> {
    #[serde(flatten)]
    report: &'a FilterReport,
    token_budget: Option<usize>,
    after_subsample: usize,
}

pub fn cmd_filter(config: &PipelineConfig) -> Result<i32, CliError> {
    let examples: Vec<Example> = read_jsonl(&config.out(EXAMPLES_FILE))?;
    let gateway = build_gateway(config)?;
    let outcome = filter_corpus(examples, &config.committee, gateway.as_ref())?;
    let kept = match config.filter.token_budget {
        Some(budget) => subsample_to_budget(&outcome.kept, budget, config.seed),
        None => outcome.kept,
    };
    write_jsonl(&config.out(FILTERED_EXAMPLES_FILE), &kept)?;
    write_json(
        &config.out(FILTER_REPORT_FILE),
        &FilterSummary {
            report: &outcome.report,
            token_budget: config.filter.token_budget,
            after_subsample: kept.len(),
        },
    )?;
    write_manifest(config, &store_paths(config, false))?;
    log::info!("kept {} of {} examples", kept.len(), outcome.report.input);
    Ok(EXIT_OK)
}

pub fn cmd_index(config: &PipelineConfig) -> Result<i32, CliError> {
    let examples: Vec<Example> = read_jsonl(&config.out(FILTERED_EXAMPLES_FILE))?;
    let kb = KnowledgeBase::build(examples, config.retrieval.sparse_options(), build_embedder(config)?)?;
    save_index(&config.out(INDEX_DIR), kb.examples(), kb.sparse(), kb.dense())?;
    log::info!("indexed {} examples", kb.examples().len());
    Ok(EXIT_OK)
}

pub fn load_knowledge_base(config: &PipelineConfig) -> Result<KnowledgeBase, CliError> {
    let dir = config.out(INDEX_DIR);
    let (examples, sparse, dense) = load_index(&dir)?;
    Ok(KnowledgeBase::from_parts(examples, sparse, dense, build_embedder(config)?)?)
}

pub fn cmd_export(config: &PipelineConfig) -> Result<i32, CliError> {
    let examples: Vec<Example> = read_jsonl(&config.out(FILTERED_EXAMPLES_FILE))?;
    let export = export_sft(&examples, config.system_message());
    if export.skipped > 0 {
        log::warn!("skipped {} examples without actions", export.skipped);
    }
    write_jsonl(&config.out(SFT_FILE), &export.pairs)?;
    log::info!("exported {} pairs", export.pairs.len());
    Ok(EXIT_OK)
}

pub fn stats_table(config: &PipelineConfig) -> Result<String, CliError> {
    let counts = count_stores(&store_paths(config, true))?;
    Ok(render_stats_table(&[(config.dataset_name.clone(), counts)]))
}

pub fn cmd_stats(config: &PipelineConfig, json: bool, out: &mut dyn Write) -> Result<i32, CliError> {
    let text = if json {
        let m = manifest(&store_paths(config, true), &config.fingerprint())?;
        let mut s = serde_json::to_string_pretty(&m).expect("manifest serializes");
        s.push('\n');
        s
    } else {
        stats_table(config)?
    };
    out.write_all(text.as_bytes())
        .map_err(|e| CliError::Failed(e.to_string()))?;
    Ok(EXIT_OK)
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub instruction: String,
    pub mode: Option<Mode>,
    pub world: Option<String>,
    pub trace: Option<PathBuf>,
}

#[derive(Serialize)]
struct RunSummary<'a> {
    world: &'a str,
    termination: Termination,
    steps: usize,
    turns: usize,
    trace: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    failure: Option<&'a agentsynth::runtime::EpisodeFailure>,
}

pub fn cmd_run(config: &PipelineConfig, opts: &RunOptions, out: &mut dyn Write) -> Result<i32, CliError> {
    if opts.instruction.trim().is_empty() {
        return Err(CliError::Config("--instruction must not be empty".into()));
    }
    let mut runtime = config.runtime.clone();
    if let Some(mode) = opts.mode {
        runtime.mode = mode;
    }
    let world = opts
        .world
        .clone()
        .or_else(|| config.run.world.clone())
        .ok_or_else(|| CliError::Config("no world: pass --world or set run.world".into()))?;
    let registry = load_registry(config)?;
    let spec = registry
        .get(&world)
        .ok_or_else(|| CliError::Config(format!("unknown world {world:?}")))?;
    let mut env = agentsynth::env::SimEnv::with_seed(spec.clone(), config.seed)?;
    let gateway = build_gateway(config)?;
    let kb = match runtime.mode {
        Mode::AgenticRetrieval => Some(load_knowledge_base(config)?),
        Mode::ZeroShot => None,
    };
    let agent = Agent {
        gateway: gateway.as_ref(),
        model_id: &config.models.actor,
        system_message: config.system_message(),
        retriever: kb.as_ref().map(|k| k as &dyn agentsynth::retrieval::ExampleRetriever),
        config: &runtime,
    };
    let run = agent.run_episode(&mut env, &opts.instruction);

    let trace = opts
        .trace
        .clone()
        .unwrap_or_else(|| config.out(TRACE_FILE));
    write_jsonl(&trace, &run.turns)?;
    let summary = RunSummary {
        world: &world,
        termination: run.result.termination,
        steps: run.result.steps,
        turns: run.turns.len(),
        trace: trace.display().to_string(),
        failure: run.failure.as_ref(),
    };
    writeln!(out, "{}", serde_json::to_string(&summary).expect("summary serializes"))
        .map_err(|e| CliError::Failed(e.to_string()))?;

    match (run.result.termination, run.failure) {
        (Termination::StopPredicted | Termination::EnvFinished, _) => Ok(EXIT_OK),
        (Termination::MaxSteps, _) => Ok(EXIT_MAX_STEPS),
        (Termination::Aborted { .. }, Some(f)) => Err(CliError::from_failure(f.kind, f.message)),
        (Termination::Aborted { step }, None) => Err(CliError::Failed(format!("aborted at step {step}"))),
    }
}

/// Writes a self-contained demo project into `dir`.
pub fn init_demo(dir: &Path, force: bool) -> Result<i32, CliError> {
    let config_path = dir.join("agentsynth.toml");
    if config_path.exists() && !force {
        return Err(CliError::Config(format!(
            "{} already exists; pass --force to overwrite",
            config_path.display()
        )));
    }
    let files: BTreeMap<PathBuf, &str> = [
        (config_path, DEMO_CONFIG_TOML),
        (dir.join("documents.jsonl"), DEMO_DOCUMENTS_JSONL),
        (dir.join("mock_table.json"), DEMO_MOCK_TABLE_JSON),
        (dir.join("worlds/shop.json"), SHOP_WORLD_JSON),
        (dir.join("worlds/settings.json"), SETTINGS_WORLD_JSON),
    ]
    .into_iter()
    .collect();
    for (path, text) in files {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::Failed(format!("{}: {e}", parent.display())))?;
        }
        fs::write(&path, text).map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))?;
    }
    log::info!("demo project written to {}", dir.display());
    Ok(EXIT_OK)
}
