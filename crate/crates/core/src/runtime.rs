//! The acting loop: observe, optionally retrieve examples, predict
//! `REASON`/`ACTION`, execute.

use serde::{Deserialize, Serialize};

use crate::env::Environment;
use crate::error::{GatewayError, RuntimeError};
use crate::gateway::{complete_parsed, LanguageModel};
use crate::model::{
    estimate_tokens, Action, EpisodeResult, Observation, RetrievalHit, Termination, Trajectory,
};
use crate::prompts::{parse_reason_action, render_act, render_reference, HistoryTurn, FORMAT_REMINDER};
use crate::retrieval::{
    ExampleRetriever, QueryWriter, RetrievalContext, DEFAULT_MODEL_HITS, DEFAULT_OBSERVATION_HITS,
};

pub const DEFAULT_MAX_STEPS: usize = 20;
pub const DEFAULT_CONTEXT_BUDGET: usize = 32_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    ZeroShot,
    AgenticRetrieval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuntimeConfig {
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
    #[serde(default = "default_m1")]
    pub m1: usize,
    #[serde(default = "default_m2")]
    pub m2: usize,
    #[serde(default = "default_budget")]
    pub context_budget_tokens: usize,
    #[serde(default = "default_mode")]
    pub mode: Mode,
}

fn default_max_steps() -> usize {
    DEFAULT_MAX_STEPS
}
fn default_m1() -> usize {
    DEFAULT_OBSERVATION_HITS
}
fn default_m2() -> usize {
    DEFAULT_MODEL_HITS
}
fn default_budget() -> usize {
    DEFAULT_CONTEXT_BUDGET
}
fn default_mode() -> Mode {
    Mode::AgenticRetrieval
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self {
            max_steps: DEFAULT_MAX_STEPS,
            m1: DEFAULT_OBSERVATION_HITS,
            m2: DEFAULT_MODEL_HITS,
            context_budget_tokens: DEFAULT_CONTEXT_BUDGET,
            mode: Mode::AgenticRetrieval,
        }
    }
}

impl RuntimeConfig {
    pub fn zero_shot(max_steps: usize) -> Self {
        Self {
            max_steps,
            mode: Mode::ZeroShot,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), RuntimeError> {
        if self.max_steps == 0 {
            return Err(RuntimeError::Config("max_steps must be at least 1".into()));
        }
        if self.context_budget_tokens == 0 {
            return Err(RuntimeError::Config("context_budget_tokens must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    /// 1-based turn number.
    pub step: usize,
    pub observation: Observation,
    pub retrieved: Vec<RetrievalHit>,
    pub reason: String,
    pub action: Action,
}

impl HistoryTurn for TurnRecord {
    fn observation_text(&self) -> &str {
        &self.observation.text
    }
    fn action_text(&self) -> &str {
        &self.action.raw
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PackedPrompt {
    pub prompt: String,
    /// How many of the offered references made it in (a prefix).
    pub references_included: usize,
    /// Oldest history turns left out to fit the budget.
    pub history_dropped: usize,
}

/// Renders the action prompt within `budget` estimated tokens.
///
/// The oldest history turns are dropped first if the prompt does not fit
/// even without references. References are then added best-first as whole
/// units while they fit.
pub fn pack_context<H: HistoryTurn>(
    system_message: &str,
    instruction: &str,
    history: &[H],
    observation: &str,
    references: &[String],
    budget: usize,
) -> Result<PackedPrompt, RuntimeError> {
    let render = |skip: usize, k: usize| {
        render_act(system_message, instruction, &history[skip..], observation, &references[..k])
    };
    let mut skip = 0;
    let mut base = render(0, 0);
    while estimate_tokens(&base) > budget {
        if skip == history.len() {
            return Err(RuntimeError::Budget {
                needed: estimate_tokens(&base),
                budget,
            });
        }
        skip += 1;
        base = render(skip, 0);
    }
    let mut prompt = base;
    let mut included = 0;
    for k in 1..=references.len() {
        let candidate = render(skip, k);
        if estimate_tokens(&candidate) > budget {
            break;
        }
        prompt = candidate;
        included = k;
    }
    Ok(PackedPrompt {
        prompt,
        references_included: included,
        history_dropped: skip,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    /// The model answer had no parseable action, even after a reminder.
    Parse,
    /// The provider could not be reached.
    Provider,
    /// Credentials or request settings were rejected.
    Config,
    /// The prompt cannot fit the context budget.
    Budget,
    Environment,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeFailure {
    pub kind: FailureKind,
    pub step: usize,
    pub message: String,
}

impl EpisodeFailure {
    fn from_error(step: usize, err: &RuntimeError) -> Self {
        let kind = match err {
            RuntimeError::Gateway(GatewayError::Parse(_)) => FailureKind::Parse,
            RuntimeError::Gateway(GatewayError::Transport { .. }) => FailureKind::Provider,
            RuntimeError::Gateway(_) | RuntimeError::Config(_) => FailureKind::Config,
            RuntimeError::Budget { .. } => FailureKind::Budget,
            RuntimeError::Env(_) => FailureKind::Environment,
        };
        Self {
            kind,
            step,
            message: err.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRun {
    pub result: EpisodeResult,
    pub turns: Vec<TurnRecord>,
    pub failure: Option<EpisodeFailure>,
}

/// An acting agent: a model, its prompt settings and an optional example
/// store.
#[derive(Clone, Copy)]
pub struct Agent<'a> {
    pub gateway: &'a dyn LanguageModel,
    pub model_id: &'a str,
    pub system_message: &'a str,
    pub retriever: Option<&'a dyn ExampleRetriever>,
    pub config: &'a RuntimeConfig,
}

impl<'a> Agent<'a> {
    /// One turn. Command actions are executed; a stop action marks the
    /// environment finished without executing anything. The new turn is
    /// appended to `history` and returned.
    pub fn step(
        &self,
        env: &mut dyn Environment,
        instruction: &str,
        history: &mut Vec<TurnRecord>,
    ) -> Result<TurnRecord, RuntimeError> {
        if env.finished() {
            return Err(crate::error::EnvError::Finished.into());
        }
        let observation = env.get_observation();

        let mut hits = Vec::new();
        let mut references = Vec::new();
        if let (Mode::AgenticRetrieval, Some(retriever)) = (self.config.mode, self.retriever) {
            let pairs: Vec<(&str, &str)> = history
                .iter()
                .map(|t| (t.observation.text.as_str(), t.action.raw.as_str()))
                .collect();
            let ctx = RetrievalContext {
                instruction,
                history: &pairs,
                observation: &observation.text,
            };
            let writer = QueryWriter {
                gateway: self.gateway,
                model_id: self.model_id,
                system_message: self.system_message,
            };
            let outcome = retriever.retrieve(&ctx, self.config.m1, self.config.m2, &writer);
            for note in &outcome.notes {
                log::warn!("step {}: {note}", history.len() + 1);
            }
            for hit in outcome.hits {
                if let Some(ex) = retriever.example(&hit.example_id) {
                    references.push(render_reference(references.len() + 1, &ex.instruction, &ex.trajectory));
                    hits.push(hit);
                }
            }
        }

        let packed = pack_context(
            self.system_message,
            instruction,
            history,
            &observation.text,
            &references,
            self.config.context_budget_tokens,
        )?;
        hits.truncate(packed.references_included);

        let (reason, action) = complete_parsed(
            self.gateway,
            self.model_id,
            &packed.prompt,
            FORMAT_REMINDER,
            parse_reason_action,
        )?;

        if action.is_stop() {
            env.record_stop();
        } else {
            env.execute(&action)?;
        }
        let turn = TurnRecord {
            step: history.len() + 1,
            observation,
            retrieved: hits,
            reason,
            action,
        };
        history.push(turn.clone());
        Ok(turn)
    }

    /// Steps until a stop action, a finished environment, or `max_steps`
    /// turns. The environment is used as-is; reset it first.
    pub fn run_episode(&self, env: &mut dyn Environment, instruction: &str) -> EpisodeRun {
        let mut trajectory = Trajectory::new(env.get_observation().text);
        let mut turns = Vec::new();
        let mut failure = None;
        let termination = loop {
            if env.finished() {
                break Termination::EnvFinished;
            }
            if turns.len() >= self.config.max_steps {
                break Termination::MaxSteps;
            }
            let step = turns.len() + 1;
            match self.step(env, instruction, &mut turns) {
                Ok(turn) if turn.action.is_stop() => break Termination::StopPredicted,
                Ok(turn) => trajectory.push(turn.action, env.get_observation().text),
                Err(e) => {
                    failure = Some(EpisodeFailure::from_error(step, &e));
                    break Termination::Aborted { step };
                }
            }
        };
        EpisodeRun {
            result: EpisodeResult {
                steps: trajectory.action_count(),
                trajectory,
                termination,
            },
            turns,
            failure,
        }
    }
}

#[cfg(test)]
mod tests {
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    use super::*;
    use crate::env::{Environment, WorldRegistry};
    use crate::gateway::{MockRule, ScriptedMock, ScriptedMockTable};
    use crate::model::{Example, InstructionKind, Provenance, RetrievalSource};
    use crate::prompts::REFERENCE_HEADER;
    use crate::retrieval::{KnowledgeBase, MockEmbedder, RetrievalOutcome, SparseOptions};

    fn mock(rules: Vec<MockRule>, default: &str) -> ScriptedMock {
        ScriptedMock::new(ScriptedMockTable {
            rules,
            default_response: default.into(),
        })
        .unwrap()
    }

    fn shop() -> crate::env::SimEnv {
        WorldRegistry::builtin().env_for("shop").unwrap()
    }

    const SYS: &str = "sys";

    #[test]
    fn pack_context_takes_best_prefix() {
        let refs: Vec<String> = (0..10).map(|k| format!("Example {k}: a b c d {k}")).collect();
        let none: [(String, String); 0] = [];
        let base = estimate_tokens(&render_act(SYS, "goal", &none, "obs", &[]));
        let header = estimate_tokens(REFERENCE_HEADER);
        let first4: usize = refs[..4].iter().map(|r| estimate_tokens(r)).sum();
        let budget = base + header + first4;
        let p = pack_context(SYS, "goal", &none, "obs", &refs, budget).unwrap();
        assert_eq!(p.references_included, 4);
        assert_eq!(estimate_tokens(&p.prompt), budget);
        let slack = budget + estimate_tokens(&refs[4]) - 1;
        assert_eq!(pack_context(SYS, "goal", &none, "obs", &refs, slack).unwrap().references_included, 4);

        let p = pack_context(SYS, "goal", &none, "obs", &[], budget).unwrap();
        assert!(!p.prompt.contains(REFERENCE_HEADER));

        let p = pack_context(SYS, "goal", &none, "obs", &refs, 1_000_000).unwrap();
        assert_eq!(p.references_included, 10);
        let positions: Vec<usize> = refs.iter().map(|r| p.prompt.find(r.as_str()).unwrap()).collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn pack_context_budget_errors_and_history_truncation() {
        let none: [(String, String); 0] = [];
        assert!(matches!(
            pack_context(SYS, "goal", &none, "obs", &[], 3),
            Err(RuntimeError::Budget { .. })
        ));
        let hist: Vec<(String, String)> = (0..5)
            .map(|k| (format!("page {k} with many words here"), format!("click [{k}]")))
            .collect();
        let base = estimate_tokens(&render_act(SYS, "goal", &hist[2..], "obs", &[]));
        let p = pack_context(SYS, "goal", &hist, "obs", &[], base).unwrap();
        assert_eq!(p.history_dropped, 2);
        assert!(!p.prompt.contains("page 1 with"));
        assert!(p.prompt.contains("page 2 with"));
    }

    #[test]
    fn step_executes_commands() {
        let m = mock(vec![], "REASON: r ACTION: click [search]");
        let cfg = RuntimeConfig::zero_shot(5);
        let agent = Agent { gateway: &m, model_id: "gen", system_message: SYS, retriever: None, config: &cfg };
        let mut env = shop();
        let mut hist = Vec::new();
        let turn = agent.step(&mut env, "find things", &mut hist).unwrap();
        assert_eq!(turn.action.raw, "click [search]");
        assert_eq!(turn.step, 1);
        assert!(turn.observation.text.starts_with("[home]"));
        assert_eq!(env.current_page(), "results");
        assert_eq!(hist.len(), 1);
        assert!(turn.retrieved.is_empty());
    }

    #[test]
    fn stop_is_not_executed() {
        let m = mock(vec![], "REASON: done\nACTION: stop: nothing to do");
        let cfg = RuntimeConfig::zero_shot(5);
        let agent = Agent { gateway: &m, model_id: "gen", system_message: SYS, retriever: None, config: &cfg };
        let mut env = shop();
        let mut hist = Vec::new();
        let turn = agent.step(&mut env, "x", &mut hist).unwrap();
        assert!(turn.action.is_stop());
        assert_eq!(env.step_counter(), 0);
        assert!(env.finished());
    }

    #[test]
    fn episode_terminations() {
        // three commands then stop
        let m = mock(
            vec![
                MockRule::contains("OBSERVATIONS:\n[cart]", "REASON: ok\nACTION: stop: added"),
                MockRule::contains("OBSERVATIONS:\n[product-kettle]", "REASON: r\nACTION: click [add-to-cart]"),
                MockRule::contains("OBSERVATIONS:\n[results]", "REASON: r\nACTION: click [item-kettle]"),
                MockRule::contains("OBSERVATIONS:\n[home]", "REASON: r\nACTION: click [search]"),
            ],
            "",
        );
        let cfg = RuntimeConfig::zero_shot(20);
        let agent = Agent { gateway: &m, model_id: "gen", system_message: SYS, retriever: None, config: &cfg };
        let mut env = shop();
        let run = agent.run_episode(&mut env, "buy a kettle");
        assert_eq!(run.result.termination, Termination::StopPredicted);
        assert_eq!(run.result.steps, 3);
        assert_eq!(run.turns.len(), 4);
        assert!(run.turns[..3].iter().all(|t| !t.action.is_stop()));
        assert_eq!(run.result.trajectory.action_count(), 3);
        assert!(run.result.trajectory.last_observation().text.starts_with("[cart]"));

        // never stops
        let m = mock(vec![], "REASON: r\nACTION: click [nowhere]");
        let cfg = RuntimeConfig::zero_shot(2);
        let agent = Agent { gateway: &m, model_id: "gen", system_message: SYS, retriever: None, config: &cfg };
        let mut env = shop();
        let run = agent.run_episode(&mut env, "x");
        assert_eq!(run.result.termination, Termination::MaxSteps);
        assert_eq!(run.turns.len(), 2);

        // terminal page after one step
        let mut env = WorldRegistry::builtin().env_for("shop").unwrap();
        for w in ["search", "item-mug", "add-to-cart"] {
            env.execute(&Action::parse(format!("click [{w}]"))).unwrap();
        }
        let m = mock(vec![], "REASON: r\nACTION: click [checkout]");
        let cfg = RuntimeConfig::zero_shot(10);
        let agent = Agent { gateway: &m, model_id: "gen", system_message: SYS, retriever: None, config: &cfg };
        let run = agent.run_episode(&mut env, "x");
        assert_eq!(run.result.termination, Termination::EnvFinished);
        assert_eq!(run.turns.len(), 1);
    }

    #[test]
    fn parse_failure_aborts_with_partial_trace() {
        let m = mock(
            vec![MockRule::contains("OBSERVATIONS:\n[home]", "REASON: r\nACTION: click [search]")],
            "I am confused",
        );
        let cfg = RuntimeConfig::zero_shot(10);
        let agent = Agent { gateway: &m, model_id: "gen", system_message: SYS, retriever: None, config: &cfg };
        let mut env = shop();
        let run = agent.run_episode(&mut env, "x");
        assert_eq!(run.result.termination, Termination::Aborted { step: 2 });
        assert_eq!(run.failure.as_ref().unwrap().kind, FailureKind::Parse);
        assert_eq!(run.turns.len(), 1);
        assert_eq!(run.result.trajectory.action_count(), 1);
        // first answer, then one reminder retry for step 2
        assert_eq!(m.calls(), 3);
    }

    struct Counting<'a> {
        inner: &'a KnowledgeBase,
        calls: AtomicUsize,
    }

    impl ExampleRetriever for Counting<'_> {
        fn retrieve(&self, ctx: &RetrievalContext<'_>, m1: usize, m2: usize, w: &QueryWriter<'_>) -> RetrievalOutcome {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.inner.retrieve(ctx, m1, m2, w)
        }
        fn example(&self, id: &str) -> Option<&Example> {
            self.inner.example(id)
        }
    }

    fn kb() -> KnowledgeBase {
        let mut env = shop();
        let o0 = env.get_observation().text;
        let o1 = env.execute(&Action::parse("click [search]")).unwrap().text;
        let traj = Trajectory::from_parts([o0, o1], ["click [search]"]).unwrap();
        let ex = Example::new(
            "ex-1",
            "Open the search results",
            traj,
            Provenance {
                doc_id: "d".into(),
                parent_trajectory_id: "p".into(),
                span_start: 0,
                span_end: 1,
                kind: InstructionKind::Abstraction,
            },
        )
        .unwrap();
        KnowledgeBase::build(vec![ex], SparseOptions::default(), Arc::new(MockEmbedder)).unwrap()
    }

    #[test]
    fn zero_shot_never_retrieves() {
        let kb = kb();
        let counting = Counting { inner: &kb, calls: AtomicUsize::new(0) };
        let m = mock(vec![], "REASON: r\nACTION: click [nowhere]");
        let cfg = RuntimeConfig::zero_shot(4);
        let agent = Agent { gateway: &m, model_id: "gen", system_message: SYS, retriever: Some(&counting), config: &cfg };
        let run = agent.run_episode(&mut shop(), "x");
        assert_eq!(run.turns.len(), 4);
        assert_eq!(counting.calls.load(Ordering::SeqCst), 0);

        let cfg = RuntimeConfig { max_steps: 4, ..RuntimeConfig::default() };
        let agent = Agent { config: &cfg, ..agent };
        let run = agent.run_episode(&mut shop(), "x");
        assert_eq!(counting.calls.load(Ordering::SeqCst), 4);
        let t = &run.turns[0];
        assert_eq!(t.retrieved.len(), 1);
        assert_eq!(t.retrieved[0].source, RetrievalSource::ObservationBased);
    }

    #[test]
    fn retrieved_examples_reach_the_prompt() {
        let kb = kb();
        let m = mock(
            vec![MockRule::contains("Task: Open the search results", "REASON: seen\nACTION: stop: ok")],
            "REASON: r\nACTION: click [nowhere]",
        );
        let cfg = RuntimeConfig { max_steps: 3, ..RuntimeConfig::default() };
        let agent = Agent { gateway: &m, model_id: "gen", system_message: SYS, retriever: Some(&kb), config: &cfg };
        let run = agent.run_episode(&mut shop(), "x");
        assert_eq!(run.result.termination, Termination::StopPredicted);
        assert_eq!(run.turns[0].reason, "seen");
    }

    #[test]
    fn history_is_faithful() {
        let m = mock(vec![], "REASON: r\nACTION: click [nowhere]");
        let cfg = RuntimeConfig::zero_shot(4);
        let agent = Agent { gateway: &m, model_id: "gen", system_message: SYS, retriever: None, config: &cfg };
        let mut env = shop();
        let mut hist = Vec::new();
        for k in 0..4 {
            assert_eq!(hist.len(), k);
            agent.step(&mut env, "x", &mut hist).unwrap();
        }
        let steps: Vec<usize> = hist.iter().map(|t| t.step).collect();
        assert_eq!(steps, [1, 2, 3, 4]);
    }
}
