//! Python bindings for the agentsynth pipeline.
//!
//! Structured values (documents, episode reports, filter reports) cross the
//! boundary as JSON text or plain dicts; trajectories, examples, worlds,
//! scripted models and knowledge bases are exposed as classes.

use std::fmt::Display;
use std::sync::Arc;

use agentsynth::curator::{self, CommitteeConfig, Granularity};
use agentsynth::datastore;
use agentsynth::env::{builtin_documents, Environment, SimWorldSpec, WorldRegistry, DEMO_MOCK_TABLE_JSON};
use agentsynth::gateway::{ScriptedMock, ScriptedMockTable};
use agentsynth::prompts;
use agentsynth::retrieval::{KnowledgeBase, MockEmbedder, SparseOptions};
use agentsynth::runtime::{Agent, Mode, RuntimeConfig};
use agentsynth::synth::{SynthesisConfig, Synthesizer};
use agentsynth::{Action, Document, Example, Trajectory};
use pyo3::exceptions::{PyIndexError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn value_err(e: impl Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn json_to_py<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(runtime_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

#[pyclass(name = "Trajectory", module = "agentsynth_py", eq, skip_from_py_object)]
#[derive(Clone, PartialEq)]
struct PyTrajectory {
    inner: Trajectory,
}

#[pymethods]
impl PyTrajectory {
    #[new]
    #[pyo3(signature = (observations, actions=Vec::new()))]
    fn new(observations: Vec<String>, actions: Vec<String>) -> PyResult<Self> {
        Trajectory::from_parts(observations, actions)
            .map(|inner| Self { inner })
            .map_err(value_err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        serde_json::from_str(text).map(|inner| Self { inner }).map_err(value_err)
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(runtime_err)
    }

    fn push(&mut self, action: &str, observation: &str) {
        self.inner.push(Action::parse(action), observation);
    }

    #[getter]
    fn observations(&self) -> Vec<String> {
        self.inner.observations().iter().map(|o| o.text.clone()).collect()
    }

    #[getter]
    fn actions(&self) -> Vec<String> {
        self.inner.actions().iter().map(|a| a.raw.clone()).collect()
    }

    fn action_count(&self) -> usize {
        self.inner.action_count()
    }

    /// Actions `i+1..=j` with the observations around them.
    fn sub_trajectory(&self, i: usize, j: usize) -> PyResult<Self> {
        self.inner
            .sub_trajectory(i, j)
            .map(|inner| Self { inner })
            .map_err(|e| PyIndexError::new_err(e.to_string()))
    }

    fn render(&self) -> String {
        self.inner.render()
    }

    fn __len__(&self) -> usize {
        self.inner.action_count()
    }

    fn __repr__(&self) -> String {
        format!("Trajectory(actions={})", self.inner.action_count())
    }
}

#[pyclass(name = "Example", module = "agentsynth_py", eq, skip_from_py_object)]
#[derive(Clone, PartialEq)]
struct PyExample {
    inner: Example,
}

#[pymethods]
impl PyExample {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        serde_json::from_str(text).map(|inner| Self { inner }).map_err(value_err)
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(runtime_err)
    }

    #[getter]
    fn id(&self) -> &str {
        &self.inner.id
    }

    #[getter]
    fn instruction(&self) -> &str {
        &self.inner.instruction
    }

    #[getter]
    fn trajectory(&self) -> PyTrajectory {
        PyTrajectory {
            inner: self.inner.trajectory.clone(),
        }
    }

    #[getter]
    fn kind(&self) -> String {
        self.inner.provenance.kind.to_string()
    }

    #[getter]
    fn doc_id(&self) -> &str {
        &self.inner.provenance.doc_id
    }

    #[getter]
    fn span(&self) -> (usize, usize) {
        (self.inner.provenance.span_start, self.inner.provenance.span_end)
    }

    #[getter]
    fn token_count(&self) -> usize {
        self.inner.token_count
    }

    fn __repr__(&self) -> String {
        format!("Example(id={:?}, instruction={:?})", self.inner.id, self.inner.instruction)
    }
}

fn unwrap_examples(examples: &[PyRef<'_, PyExample>]) -> Vec<Example> {
    examples.iter().map(|e| e.inner.clone()).collect()
}

fn wrap_examples(examples: Vec<Example>) -> Vec<PyExample> {
    examples.into_iter().map(|inner| PyExample { inner }).collect()
}

#[pyclass(name = "SimEnv", module = "agentsynth_py")]
struct PySimEnv {
    inner: agentsynth::env::SimEnv,
}

#[pymethods]
impl PySimEnv {
    /// One of the bundled worlds (`shop`, `settings`).
    #[staticmethod]
    #[pyo3(signature = (world_id, seed=0))]
    fn builtin(world_id: &str, seed: u64) -> PyResult<Self> {
        let registry = WorldRegistry::builtin();
        let spec = registry
            .get(world_id)
            .ok_or_else(|| value_err(format!("unknown world {world_id:?}")))?;
        Self::with_spec(spec.clone(), seed)
    }

    #[staticmethod]
    #[pyo3(signature = (spec_json, seed=0))]
    fn from_json(spec_json: &str, seed: u64) -> PyResult<Self> {
        Self::with_spec(SimWorldSpec::from_json(spec_json).map_err(value_err)?, seed)
    }

    fn reset(&mut self) -> PyResult<String> {
        self.inner.reset().map(|o| o.text).map_err(value_err)
    }

    fn execute(&mut self, action: &str) -> PyResult<String> {
        self.inner.execute(&Action::parse(action)).map(|o| o.text).map_err(value_err)
    }

    #[getter]
    fn finished(&self) -> bool {
        self.inner.finished()
    }

    #[getter]
    fn current_page(&self) -> &str {
        self.inner.current_page()
    }
}

impl PySimEnv {
    fn with_spec(spec: SimWorldSpec, seed: u64) -> PyResult<Self> {
        agentsynth::env::SimEnv::with_seed(spec, seed)
            .map(|inner| Self { inner })
            .map_err(value_err)
    }
}

/// A model that answers from a table of scripted rules.
#[pyclass(name = "MockModel", module = "agentsynth_py")]
struct PyMockModel {
    inner: Arc<ScriptedMock>,
}

#[pymethods]
impl PyMockModel {
    #[new]
    fn new(table_json: &str) -> PyResult<Self> {
        let table = ScriptedMockTable::from_json(table_json).map_err(value_err)?;
        let inner = ScriptedMock::new(table).map_err(value_err)?;
        Ok(Self { inner: Arc::new(inner) })
    }

    /// The table that drives the bundled demo documents.
    #[staticmethod]
    fn demo() -> PyResult<Self> {
        Self::new(DEMO_MOCK_TABLE_JSON)
    }

    fn respond(&self, model_id: &str, prompt: &str) -> String {
        self.inner.respond(model_id, prompt)
    }

    #[getter]
    fn calls(&self) -> usize {
        self.inner.calls()
    }
}

#[pyclass(name = "KnowledgeBase", module = "agentsynth_py")]
struct PyKnowledgeBase {
    inner: KnowledgeBase,
}

#[pymethods]
impl PyKnowledgeBase {
    #[new]
    #[pyo3(signature = (examples, index_actions=false))]
    fn new(examples: Vec<PyRef<'_, PyExample>>, index_actions: bool) -> PyResult<Self> {
        let options = SparseOptions {
            index_actions,
            ..SparseOptions::default()
        };
        KnowledgeBase::build(unwrap_examples(&examples), options, Arc::new(MockEmbedder))
            .map(|inner| Self { inner })
            .map_err(value_err)
    }

    /// BM25 hits for `text` as `(example_id, score)` pairs.
    #[pyo3(signature = (text, limit=5))]
    fn query_sparse(&self, text: &str, limit: usize) -> Vec<(String, f64)> {
        self.inner
            .sparse()
            .query(text, limit)
            .into_iter()
            .map(|h| (h.example_id, h.score))
            .collect()
    }

    /// Cosine hits for `text`, skipping the ids in `exclude`.
    #[pyo3(signature = (text, limit=5, exclude=Vec::new()))]
    fn query_dense(&self, text: &str, limit: usize, exclude: Vec<String>) -> PyResult<Vec<(String, f64)>> {
        let exclude = exclude.into_iter().collect();
        self.inner
            .dense()
            .query(text, limit, &exclude, self.inner.embedder())
            .map(|hits| hits.into_iter().map(|h| (h.example_id, h.score)).collect())
            .map_err(runtime_err)
    }

    fn __len__(&self) -> usize {
        self.inner.examples().len()
    }
}

/// Proposes instructions for every document, rolls them out in the matching
/// bundled world and relabels every sub-trajectory. Returns the examples.
#[pyfunction]
#[pyo3(signature = (model, documents_jsonl=None, model_id="mock-gen", seed=0, instructions_per_doc=3, max_steps=20))]
fn synthesize(
    py: Python<'_>,
    model: &PyMockModel,
    documents_jsonl: Option<&str>,
    model_id: &str,
    seed: u64,
    instructions_per_doc: usize,
    max_steps: usize,
) -> PyResult<Vec<PyExample>> {
    let docs: Vec<Document> = match documents_jsonl {
        Some(text) => text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()
            .map_err(value_err)?,
        None => builtin_documents(),
    };
    let config = SynthesisConfig {
        instructions_per_doc,
        max_steps,
        seed,
        ..SynthesisConfig::default()
    };
    let registry = WorldRegistry::builtin();
    let gateway = model.inner.clone();
    let out = py.detach(|| {
        let synth = Synthesizer {
            gateway: gateway.as_ref(),
            model_id,
            system_message: prompts::default_system_message(),
            config: &config,
        };
        let factory = |d: &Document, s: u64| {
            registry
                .env_for_document_seeded(d, s)
                .map(|e| Box::new(e) as Box<dyn Environment>)
        };
        synth.synthesize_corpus(&docs, &factory)
    });
    out.map(|o| wrap_examples(o.examples)).map_err(runtime_err)
}

/// Deduplicates states and keeps examples every committee member approves.
/// Returns `(kept, report)`.
#[pyfunction]
fn filter_examples<'py>(
    py: Python<'py>,
    examples: Vec<PyRef<'py, PyExample>>,
    model: &PyMockModel,
    committee: Vec<String>,
) -> PyResult<(Vec<PyExample>, Bound<'py, PyAny>)> {
    let committee = CommitteeConfig::new(committee).map_err(value_err)?;
    let examples = unwrap_examples(&examples);
    let gateway = model.inner.clone();
    let outcome = py
        .detach(|| curator::filter_corpus(examples, &committee, gateway.as_ref()))
        .map_err(runtime_err)?;
    let report = json_to_py(py, &outcome.report)?;
    Ok((wrap_examples(outcome.kept), report))
}

/// Acts in a bundled world. With a knowledge base the agent retrieves
/// examples every turn; without one it runs zero-shot.
#[pyfunction]
#[pyo3(signature = (model, world_id, instruction, knowledge_base=None, model_id="mock-gen", max_steps=20))]
fn run_episode<'py>(
    py: Python<'py>,
    model: &PyMockModel,
    world_id: &str,
    instruction: &str,
    knowledge_base: Option<&PyKnowledgeBase>,
    model_id: &str,
    max_steps: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let mut env = WorldRegistry::builtin().env_for(world_id).map_err(value_err)?;
    let config = RuntimeConfig {
        max_steps,
        mode: if knowledge_base.is_some() {
            Mode::AgenticRetrieval
        } else {
            Mode::ZeroShot
        },
        ..RuntimeConfig::default()
    };
    config.validate().map_err(value_err)?;
    let agent = Agent {
        gateway: model.inner.as_ref(),
        model_id,
        system_message: prompts::default_system_message(),
        retriever: knowledge_base.map(|kb| &kb.inner as _),
        config: &config,
    };
    let run = agent.run_episode(&mut env, instruction);
    let out = PyDict::new(py);
    out.set_item("termination", json_to_py(py, &run.result.termination)?)?;
    out.set_item("steps", run.result.steps)?;
    out.set_item("trajectory", PyTrajectory { inner: run.result.trajectory })?;
    out.set_item("turns", json_to_py(py, &run.turns)?)?;
    out.set_item(
        "failure",
        match &run.failure {
            Some(f) => Some(json_to_py(py, f)?),
            None => None,
        },
    )?;
    Ok(out)
}

/// One `(input, output)` pair per action of every example.
#[pyfunction]
#[pyo3(signature = (examples, system_message=None))]
fn export_sft(examples: Vec<PyRef<'_, PyExample>>, system_message: Option<&str>) -> Vec<(String, String)> {
    let system = system_message.unwrap_or(prompts::default_system_message());
    datastore::export_sft(&unwrap_examples(&examples), system)
        .pairs
        .into_iter()
        .map(|p| (p.input, p.output))
        .collect()
}

#[pyfunction]
fn dedup_states(trajectory: &PyTrajectory) -> PyTrajectory {
    PyTrajectory {
        inner: curator::dedup_states(&trajectory.inner),
    }
}

/// `short`, `medium` or `long` for a trajectory of `steps` actions.
#[pyfunction]
fn granularity(steps: usize) -> &'static str {
    match Granularity::of(steps) {
        Granularity::Short => "short",
        Granularity::Medium => "medium",
        Granularity::Long => "long",
    }
}

#[pyfunction]
fn subsample_to_budget(examples: Vec<PyRef<'_, PyExample>>, budget: usize, seed: u64) -> Vec<PyExample> {
    wrap_examples(curator::subsample_to_budget(&unwrap_examples(&examples), budget, seed))
}

#[pyfunction]
fn enumerate_spans(n: usize) -> Vec<(usize, usize)> {
    agentsynth::enumerate_spans(n)
}

#[pyfunction]
fn estimate_tokens(text: &str) -> usize {
    agentsynth::estimate_tokens(text)
}

#[pyfunction]
fn format_reason_action(reason: &str, action: &str) -> String {
    prompts::format_reason_action(reason, &Action::parse(action))
}

/// Splits model output into `(reason, action)`.
#[pyfunction]
fn parse_reason_action(text: &str) -> PyResult<(String, String)> {
    prompts::parse_reason_action(text)
        .map(|(r, a)| (r, a.raw))
        .map_err(value_err)
}

#[pymodule]
fn agentsynth_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTrajectory>()?;
    m.add_class::<PyExample>()?;
    m.add_class::<PySimEnv>()?;
    m.add_class::<PyMockModel>()?;
    m.add_class::<PyKnowledgeBase>()?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(filter_examples, m)?)?;
    m.add_function(wrap_pyfunction!(run_episode, m)?)?;
    m.add_function(wrap_pyfunction!(export_sft, m)?)?;
    m.add_function(wrap_pyfunction!(dedup_states, m)?)?;
    m.add_function(wrap_pyfunction!(granularity, m)?)?;
    m.add_function(wrap_pyfunction!(subsample_to_budget, m)?)?;
    m.add_function(wrap_pyfunction!(enumerate_spans, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_tokens, m)?)?;
    m.add_function(wrap_pyfunction!(format_reason_action, m)?)?;
    m.add_function(wrap_pyfunction!(parse_reason_action, m)?)?;
    Ok(())
}
