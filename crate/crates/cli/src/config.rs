//! The pipeline configuration file and its command-line overrides.
//!
//! Precedence is flag > file > default. Relative paths are resolved against
//! the directory of the config file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use agentsynth::curator::CommitteeConfig;
use agentsynth::datastore::config_fingerprint;
use agentsynth::gateway::ProviderConfig;
use agentsynth::retrieval::{Bm25Params, MockEmbedder, SparseOptions, DEFAULT_QUERY_TOKEN_LIMIT};
use agentsynth::runtime::RuntimeConfig;
use agentsynth::synth::SynthesisConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const MOCK_PROVIDER: &str = "mock";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    /// Worker threads for synthesis and filtering; 0 picks one per core.
    #[serde(default)]
    pub jobs: usize,
    /// `mock` or a key of `providers`.
    #[serde(default = "default_provider")]
    pub provider: String,
    /// Row label used by `stats`.
    #[serde(default = "default_dataset_name")]
    pub dataset_name: String,
    pub paths: PathsConfig,
    #[serde(default)]
    pub models: ModelsConfig,
    #[serde(default)]
    pub synthesis: SynthesisConfig,
    #[serde(default = "default_committee")]
    pub committee: CommitteeConfig,
    #[serde(default)]
    pub filter: FilterConfig,
    #[serde(default)]
    pub retrieval: RetrievalConfig,
    #[serde(default)]
    pub runtime: RuntimeConfig,
    #[serde(default)]
    pub run: RunConfig,
    #[serde(default)]
    pub providers: BTreeMap<String, ProviderConfig>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_provider() -> String {
    MOCK_PROVIDER.into()
}
fn default_dataset_name() -> String {
    "dataset".into()
}
fn default_committee() -> CommitteeConfig {
    CommitteeConfig {
        members: vec!["judge".into()],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub documents: PathBuf,
    /// Directory of world JSON files; the bundled worlds when absent.
    #[serde(default)]
    pub worlds: Option<PathBuf>,
    /// Scripted responses for the mock provider.
    #[serde(default)]
    pub mock_table: Option<PathBuf>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelsConfig {
    /// Proposes, rolls out and relabels during synthesis.
    #[serde(default = "default_model")]
    pub generator: String,
    /// Acts during `run` and writes retrieval queries.
    #[serde(default = "default_model")]
    pub actor: String,
    #[serde(default)]
    pub system_message: Option<String>,
}

fn default_model() -> String {
    "generator".into()
}

impl Default for ModelsConfig {
    fn default() -> Self {
        Self {
            generator: default_model(),
            actor: default_model(),
            system_message: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    /// Subsample the kept examples to this many estimated tokens.
    #[serde(default)]
    pub token_budget: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalConfig {
    #[serde(default = "default_k1")]
    pub k1: f64,
    #[serde(default = "default_b")]
    pub b: f64,
    #[serde(default = "default_query_token_limit")]
    pub query_token_limit: usize,
    #[serde(default)]
    pub index_actions: bool,
    /// `mock-hash-64`, or `http` to use `embedding_provider`.
    #[serde(default = "default_embedder")]
    pub embedder: String,
    #[serde(default)]
    pub embedding_provider: Option<String>,
    #[serde(default)]
    pub embedding_dimension: Option<usize>,
}

fn default_k1() -> f64 {
    Bm25Params::default().k1
}
fn default_b() -> f64 {
    Bm25Params::default().b
}
fn default_query_token_limit() -> usize {
    DEFAULT_QUERY_TOKEN_LIMIT
}
fn default_embedder() -> String {
    MockEmbedder::ID.into()
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            k1: default_k1(),
            b: default_b(),
            query_token_limit: default_query_token_limit(),
            index_actions: false,
            embedder: default_embedder(),
            embedding_provider: None,
            embedding_dimension: None,
        }
    }
}

impl RetrievalConfig {
    pub fn sparse_options(&self) -> SparseOptions {
        SparseOptions {
            params: Bm25Params { k1: self.k1, b: self.b },
            query_token_limit: self.query_token_limit,
            index_actions: self.index_actions,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// World used by `run` when `--world` is not given.
    #[serde(default)]
    pub world: Option<String>,
}

/// Flag-level overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub provider: Option<String>,
    /// `dotted.key=value` pairs; values are read as TOML, else as strings.
    pub set: Vec<String>,
}

fn parse_scalar(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), CliError> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| CliError::Config(format!("empty override key {key:?}")))?;
    let mut table = root;
    for part in parts {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override {key:?}: {part} is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

impl PipelineConfig {
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base_dir = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."))
            .to_path_buf();
        Self::from_toml(&text, base_dir, overrides)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn from_toml(text: &str, base_dir: PathBuf, overrides: &Overrides) -> Result<Self, CliError> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        for kv in &overrides.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("override {kv:?} is not key=value")))?;
            set_path(&mut table, k.trim(), parse_scalar(v.trim()))?;
        }
        if let Some(seed) = overrides.seed {
            let seed = i64::try_from(seed).map_err(|_| CliError::Config("seed must fit in i64".into()))?;
            table.insert("seed".into(), toml::Value::Integer(seed));
        }
        if let Some(jobs) = overrides.jobs {
            table.insert("jobs".into(), toml::Value::Integer(jobs as i64));
        }
        if let Some(p) = &overrides.provider {
            table.insert("provider".into(), toml::Value::String(p.clone()));
        }
        let mut config: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        config.synthesis.seed = config.seed;
        config.base_dir = base_dir;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |field: &str, msg: String| Err(CliError::Config(format!("{field}: {msg}")));
        if let Err(e) = self.synthesis.validate() {
            return bad("synthesis", e.to_string());
        }
        if let Err(e) = self.committee.validate() {
            return bad("committee.members", e.to_string());
        }
        if let Err(e) = self.runtime.validate() {
            return bad("runtime", e.to_string());
        }
        if self.provider != MOCK_PROVIDER && !self.providers.contains_key(&self.provider) {
            return bad("provider", format!("{:?} is neither \"mock\" nor a key of [providers]", self.provider));
        }
        for (id, p) in &self.providers {
            if let Err(e) = p.validate() {
                return bad(&format!("providers.{id}"), e.to_string());
            }
        }
        if !(self.retrieval.k1 >= 0.0 && (0.0..=1.0).contains(&self.retrieval.b)) {
            return bad("retrieval", "k1 must be >= 0 and b within [0, 1]".into());
        }
        match self.retrieval.embedder.as_str() {
            MockEmbedder::ID => {}
            "http" => {
                let Some(p) = &self.retrieval.embedding_provider else {
                    return bad("retrieval.embedding_provider", "required for the http embedder".into());
                };
                if !self.providers.contains_key(p) {
                    return bad("retrieval.embedding_provider", format!("unknown provider {p:?}"));
                }
                if self.retrieval.embedding_dimension.unwrap_or(0) == 0 {
                    return bad("retrieval.embedding_dimension", "required for the http embedder".into());
                }
            }
            other => return bad("retrieval.embedder", format!("unknown embedder {other:?}")),
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn documents_path(&self) -> PathBuf {
        self.resolve(&self.paths.documents)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.resolve(&self.paths.out_dir)
    }

    pub fn out(&self, file: &str) -> PathBuf {
        self.out_dir().join(file)
    }

    pub fn system_message(&self) -> &str {
        self.models
            .system_message
            .as_deref()
            .unwrap_or_else(|| agentsynth::prompts::default_system_message())
    }

    /// Stable hash of every setting that can change an artifact.
    pub fn fingerprint(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("jobs");
        }
        config_fingerprint(&v.to_string())
    }
}
