//! Environment interface and a deterministic page-graph simulator.
//!
//! The simulator renders each page as accessibility-tree-style text:
//!
//! ```text
//! [cart] page Shopping cart
//!   [checkout] button Proceed to checkout
//! ```
//!
//! The only command it understands is `click [widget_id]`. Anything else,
//! including clicks on widgets that have no transition from the current
//! page, is a silent no-op that still advances the step counter.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::EnvError;
use crate::model::{Action, Document, Observation};

pub trait Environment: Send {
    fn env_id(&self) -> &str;

    /// Returns to the initial state and yields `o0`.
    fn reset(&mut self) -> Result<Observation, EnvError>;

    fn get_observation(&self) -> Observation;

    fn execute(&mut self, action: &Action) -> Result<Observation, EnvError>;

    fn finished(&self) -> bool;

    fn step_counter(&self) -> usize;

    /// Marks the episode as finished after the runtime saw a stop action.
    fn record_stop(&mut self);
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Widget {
    pub widget_id: String,
    pub label: String,
    pub kind: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Page {
    pub title: String,
    pub widgets: Vec<Widget>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Transition {
    pub from: String,
    pub widget: String,
    pub to: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskGoal {
    pub goal_id: String,
    pub description: String,
}

/// Declarative description of a simulated world, loaded from JSON.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimWorldSpec {
    /// Matched against [`Document::domain_tag`].
    pub world_id: String,
    pub pages: BTreeMap<String, Page>,
    pub transitions: Vec<Transition>,
    /// Candidate initial pages; the seed picks one.
    pub start_pages: Vec<String>,
    #[serde(default)]
    pub terminal_pages: Vec<String>,
    #[serde(default)]
    pub task_goals: Vec<TaskGoal>,
    #[serde(default)]
    pub seed: u64,
}

impl SimWorldSpec {
    pub fn from_json(text: &str) -> Result<Self, EnvError> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let invalid = |msg: String| Err(EnvError::InvalidWorld(format!("{}: {msg}", self.world_id)));
        if self.start_pages.is_empty() {
            return invalid("no start pages".into());
        }
        for p in self.start_pages.iter().chain(&self.terminal_pages) {
            if !self.pages.contains_key(p) {
                return invalid(format!("unknown page {p:?}"));
            }
        }
        let mut seen = BTreeSet::new();
        for t in &self.transitions {
            let Some(src) = self.pages.get(&t.from) else {
                return invalid(format!("transition from unknown page {:?}", t.from));
            };
            if !self.pages.contains_key(&t.to) {
                return invalid(format!("transition to unknown page {:?}", t.to));
            }
            if !src.widgets.iter().any(|w| w.widget_id == t.widget) {
                return invalid(format!("page {:?} has no widget {:?}", t.from, t.widget));
            }
            if !seen.insert((&t.from, &t.widget)) {
                return invalid(format!("duplicate transition ({:?}, {:?})", t.from, t.widget));
            }
        }
        Ok(())
    }

    pub fn render_page(&self, page_id: &str) -> String {
        let page = &self.pages[page_id];
        let mut out = format!("[{page_id}] page {}", page.title);
        for w in &page.widgets {
            out.push_str(&format!("\n  [{}] {} {}", w.widget_id, w.kind, w.label));
        }
        out
    }
}

fn click_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)^\s*click\s*\[([^\]]+)\]").unwrap())
}

/// One simulator instance. Owned by a single rollout at a time.
#[derive(Debug, Clone)]
pub struct SimEnv {
    spec: SimWorldSpec,
    env_id: String,
    start_page: String,
    transitions: BTreeMap<(String, String), String>,
    current: String,
    steps: usize,
    stopped: bool,
}

impl SimEnv {
    pub fn new(spec: SimWorldSpec) -> Result<Self, EnvError> {
        let seed = spec.seed;
        Self::with_seed(spec, seed)
    }

    pub fn with_seed(spec: SimWorldSpec, seed: u64) -> Result<Self, EnvError> {
        spec.validate()?;
        let start_page = spec.start_pages[(seed % spec.start_pages.len() as u64) as usize].clone();
        let transitions = spec
            .transitions
            .iter()
            .map(|t| ((t.from.clone(), t.widget.clone()), t.to.clone()))
            .collect();
        Ok(Self {
            env_id: format!("{}-{seed}", spec.world_id),
            current: start_page.clone(),
            start_page,
            transitions,
            spec,
            steps: 0,
            stopped: false,
        })
    }

    pub fn current_page(&self) -> &str {
        &self.current
    }

    fn observe(&self) -> Observation {
        Observation::new(self.spec.render_page(&self.current), self.steps)
    }

    fn at_terminal(&self) -> bool {
        self.spec.terminal_pages.contains(&self.current)
    }
}

impl Environment for SimEnv {
    fn env_id(&self) -> &str {
        &self.env_id
    }

    fn reset(&mut self) -> Result<Observation, EnvError> {
        self.current = self.start_page.clone();
        self.steps = 0;
        self.stopped = false;
        Ok(self.observe())
    }

    fn get_observation(&self) -> Observation {
        self.observe()
    }

    fn execute(&mut self, action: &Action) -> Result<Observation, EnvError> {
        if action.is_stop() {
            return Err(EnvError::StopNotExecutable);
        }
        if self.finished() {
            return Err(EnvError::Finished);
        }
        if let Some(caps) = click_pattern().captures(&action.raw) {
            let key = (self.current.clone(), caps[1].trim().to_string());
            if let Some(next) = self.transitions.get(&key) {
                self.current = next.clone();
            }
        }
        self.steps += 1;
        Ok(self.observe())
    }

    fn finished(&self) -> bool {
        self.stopped || self.at_terminal()
    }

    fn step_counter(&self) -> usize {
        self.steps
    }

    fn record_stop(&mut self) {
        self.stopped = true;
    }
}

/// Maps document domain tags to world specs.
#[derive(Debug, Clone, Default)]
pub struct WorldRegistry {
    worlds: BTreeMap<String, SimWorldSpec>,
}

impl WorldRegistry {
    pub fn new(worlds: impl IntoIterator<Item = SimWorldSpec>) -> Result<Self, EnvError> {
        let mut map = BTreeMap::new();
        for w in worlds {
            w.validate()?;
            if map.insert(w.world_id.clone(), w).is_some() {
                return Err(EnvError::InvalidWorld("duplicate world_id".into()));
            }
        }
        Ok(Self { worlds: map })
    }

    pub fn builtin() -> Self {
        Self::new(builtin_worlds()).expect("bundled worlds are valid")
    }

    pub fn get(&self, world_id: &str) -> Option<&SimWorldSpec> {
        self.worlds.get(world_id)
    }

    pub fn world_ids(&self) -> impl Iterator<Item = &str> {
        self.worlds.keys().map(String::as_str)
    }

    pub fn env_for(&self, world_id: &str) -> Result<SimEnv, EnvError> {
        let spec = self
            .get(world_id)
            .ok_or_else(|| EnvError::UnknownWorld(world_id.to_string()))?;
        SimEnv::new(spec.clone())
    }

    pub fn env_for_document(&self, doc: &Document) -> Result<SimEnv, EnvError> {
        self.env_for(&doc.domain_tag)
    }

    pub fn env_for_document_seeded(&self, doc: &Document, seed: u64) -> Result<SimEnv, EnvError> {
        let spec = self
            .get(&doc.domain_tag)
            .ok_or_else(|| EnvError::UnknownWorld(doc.domain_tag.clone()))?;
        SimEnv::with_seed(spec.clone(), seed)
    }
}

pub const SHOP_WORLD_JSON: &str = include_str!("../assets/demo/worlds/shop.json");
pub const SETTINGS_WORLD_JSON: &str = include_str!("../assets/demo/worlds/settings.json");
pub const DEMO_DOCUMENTS_JSONL: &str = include_str!("../assets/demo/documents.jsonl");
/// Scripted model answers that drive the demo documents through the whole
/// pipeline.
pub const DEMO_MOCK_TABLE_JSON: &str = include_str!("../assets/demo/mock_table.json");

/// The bundled shop-like and settings-like worlds.
pub fn builtin_worlds() -> Vec<SimWorldSpec> {
    [SHOP_WORLD_JSON, SETTINGS_WORLD_JSON]
        .iter()
        .map(|s| SimWorldSpec::from_json(s).expect("bundled world parses"))
        .collect()
}

/// Documentation pages describing workflows in the bundled worlds.
pub fn builtin_documents() -> Vec<Document> {
    DEMO_DOCUMENTS_JSONL
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).expect("bundled document parses"))
        .collect()
}
