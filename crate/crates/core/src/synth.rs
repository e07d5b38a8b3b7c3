//! Document-driven data synthesis: propose instructions, roll them out, and
//! relabel every sub-trajectory of each rollout with new instructions.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::Environment;
use crate::error::{EnvError, GatewayError, SynthError};
use crate::gateway::{complete_parsed, LanguageModel};
use crate::model::{
    enumerate_spans, Document, Example, InstructionKind, Provenance, Termination, Trajectory,
};
use crate::prompts::{
    extract_fenced, parse_starred_list, render_new_task, render_self_instruct, render_summarize,
    FENCE_REMINDER, LIST_REMINDER,
};
use crate::runtime::{Agent, EpisodeFailure, FailureKind, RuntimeConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisConfig {
    #[serde(default = "default_instructions_per_doc")]
    pub instructions_per_doc: usize,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
    /// Relabeling strategies applied to every span.
    #[serde(default = "default_kinds")]
    pub kinds: Vec<InstructionKind>,
    /// Also emit the full rollout under its proposed instruction.
    #[serde(default)]
    pub keep_original: bool,
    /// Tasks shown to the model as exemplars when proposing instructions.
    #[serde(default)]
    pub exemplars: Vec<String>,
    /// Base seed; rollout `k` of a document gets environment seed `seed + k`.
    #[serde(default)]
    pub seed: u64,
}

fn default_instructions_per_doc() -> usize {
    3
}
fn default_max_steps() -> usize {
    crate::runtime::DEFAULT_MAX_STEPS
}
fn default_kinds() -> Vec<InstructionKind> {
    vec![InstructionKind::Summary, InstructionKind::Abstraction]
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            instructions_per_doc: default_instructions_per_doc(),
            max_steps: default_max_steps(),
            kinds: default_kinds(),
            keep_original: false,
            exemplars: Vec::new(),
            seed: 0,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.instructions_per_doc == 0 {
            return Err(SynthError::Config("instructions_per_doc must be at least 1".into()));
        }
        if self.max_steps == 0 {
            return Err(SynthError::Config("max_steps must be at least 1".into()));
        }
        if self.kinds.contains(&InstructionKind::Original) {
            return Err(SynthError::Config(
                "kinds may only list summary and abstraction; use keep_original".into(),
            ));
        }
        if self.kinds.is_empty() && !self.keep_original {
            return Err(SynthError::Config("no instruction kinds enabled".into()));
        }
        Ok(())
    }
}

/// One rollout of a proposed instruction, as written to the raw store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRollout {
    /// `{doc_id}#{k}`.
    pub id: String,
    pub doc_id: String,
    pub env_id: String,
    pub instruction: String,
    pub trajectory: Trajectory,
    pub termination: Termination,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<EpisodeFailure>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthStage {
    Environment,
    SelfInstruct,
    Rollout,
    Relabel,
}

/// Something that was skipped or degraded without stopping the run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthEvent {
    pub stage: SynthStage,
    pub doc_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub item: Option<String>,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthCounters {
    pub documents: usize,
    pub documents_skipped: usize,
    pub instructions: usize,
    pub rollouts: usize,
    pub empty_rollouts: usize,
    pub aborted_rollouts: usize,
    pub spans: usize,
    pub examples: usize,
    pub relabel_failures: usize,
}

impl SynthCounters {
    fn add(&mut self, o: &Self) {
        self.documents += o.documents;
        self.documents_skipped += o.documents_skipped;
        self.instructions += o.instructions;
        self.rollouts += o.rollouts;
        self.empty_rollouts += o.empty_rollouts;
        self.aborted_rollouts += o.aborted_rollouts;
        self.spans += o.spans;
        self.examples += o.examples;
        self.relabel_failures += o.relabel_failures;
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SynthesisOutput {
    pub rollouts: Vec<RawRollout>,
    pub examples: Vec<Example>,
    pub events: Vec<SynthEvent>,
    pub counters: SynthCounters,
}

/// Builds a fresh environment for a document from an environment seed.
pub type EnvFactory<'a> = dyn Fn(&Document, u64) -> Result<Box<dyn Environment>, EnvError> + Sync + 'a;

#[derive(Clone, Copy)]
pub struct Synthesizer<'a> {
    pub gateway: &'a dyn LanguageModel,
    pub model_id: &'a str,
    pub system_message: &'a str,
    pub config: &'a SynthesisConfig,
}

impl<'a> Synthesizer<'a> {
    /// Up to `instructions_per_doc` distinct tasks for `doc`. An answer that
    /// still has no list after one reminder yields an empty list.
    pub fn propose_instructions(&self, doc: &Document) -> Result<Vec<String>, GatewayError> {
        let prompt = render_self_instruct(doc, self.config.instructions_per_doc, &self.config.exemplars);
        let limit = self.config.instructions_per_doc;
        let items = match complete_parsed(self.gateway, self.model_id, &prompt, LIST_REMINDER, |t| {
            parse_starred_list(t, usize::MAX)
        }) {
            Ok(items) => items,
            Err(GatewayError::Parse(_)) => return Ok(Vec::new()),
            Err(e) => return Err(e),
        };
        let mut seen = HashSet::new();
        Ok(items
            .into_iter()
            .filter(|i| seen.insert(i.to_lowercase()))
            .take(limit)
            .collect())
    }

    /// Resets `env` and acts zero-shot on `instruction`.
    pub fn rollout(
        &self,
        env: &mut dyn Environment,
        id: &str,
        doc_id: &str,
        instruction: &str,
    ) -> Result<RawRollout, SynthError> {
        env.reset().map_err(|e| SynthError::Rollout {
            trajectory_id: id.to_string(),
            kind: FailureKind::Environment,
            message: e.to_string(),
        })?;
        let runtime = RuntimeConfig::zero_shot(self.config.max_steps);
        let agent = Agent {
            gateway: self.gateway,
            model_id: self.model_id,
            system_message: self.system_message,
            retriever: None,
            config: &runtime,
        };
        let run = agent.run_episode(env, instruction);
        if let Some(f) = &run.failure {
            if matches!(f.kind, FailureKind::Provider | FailureKind::Config) {
                return Err(SynthError::Rollout {
                    trajectory_id: id.to_string(),
                    kind: f.kind,
                    message: f.message.clone(),
                });
            }
        }
        Ok(RawRollout {
            id: id.to_string(),
            doc_id: doc_id.to_string(),
            env_id: env.env_id().to_string(),
            instruction: instruction.to_string(),
            trajectory: run.result.trajectory,
            termination: run.result.termination,
            failure: run.failure,
        })
    }

    /// Relabels every span of a rollout with each configured kind, in span
    /// order then kind order. Spans whose answer cannot be parsed are
    /// skipped and reported.
    pub fn backward_construct(
        &self,
        rollout: &RawRollout,
    ) -> Result<(Vec<Example>, Vec<SynthEvent>), SynthError> {
        let n = rollout.trajectory.action_count();
        let mut examples = Vec::new();
        let mut events = Vec::new();
        if n == 0 {
            return Ok((examples, events));
        }
        if self.config.keep_original {
            examples.push(self.example(rollout, 0, n, InstructionKind::Original, rollout.instruction.clone(), rollout.trajectory.clone()));
        }
        for (i, j) in enumerate_spans(n) {
            let sub = rollout.trajectory.sub_trajectory(i, j).expect("span in range");
            for &kind in &self.config.kinds {
                let prompt = match kind {
                    InstructionKind::Summary => render_summarize(&sub),
                    _ => render_new_task(&sub),
                };
                match complete_parsed(self.gateway, self.model_id, &prompt, FENCE_REMINDER, extract_fenced) {
                    Ok(instruction) => {
                        examples.push(self.example(rollout, i, j, kind, instruction, sub.clone()))
                    }
                    Err(GatewayError::Parse(msg)) => events.push(SynthEvent {
                        stage: SynthStage::Relabel,
                        doc_id: rollout.doc_id.clone(),
                        item: Some(example_id(&rollout.id, i, j, kind)),
                        message: msg,
                    }),
                    Err(e) => return Err(e.into()),
                }
            }
        }
        Ok((examples, events))
    }

    fn example(
        &self,
        rollout: &RawRollout,
        i: usize,
        j: usize,
        kind: InstructionKind,
        instruction: String,
        trajectory: Trajectory,
    ) -> Example {
        Example::new(
            example_id(&rollout.id, i, j, kind),
            instruction,
            trajectory,
            Provenance {
                doc_id: rollout.doc_id.clone(),
                parent_trajectory_id: rollout.id.clone(),
                span_start: i,
                span_end: j,
                kind,
            },
        )
        .expect("i < j")
    }

    fn synthesize_document(
        &self,
        doc: &Document,
        env_factory: &EnvFactory<'_>,
    ) -> Result<SynthesisOutput, SynthError> {
        let mut out = SynthesisOutput::default();
        out.counters.documents = 1;
        let skip = |out: &mut SynthesisOutput, stage, message: String| {
            out.counters.documents_skipped = 1;
            out.events.push(SynthEvent {
                stage,
                doc_id: doc.id.clone(),
                item: None,
                message,
            });
        };
        if let Err(e) = doc.validate() {
            skip(&mut out, SynthStage::Environment, e.to_string());
            return Ok(out);
        }
        let instructions = self.propose_instructions(doc)?;
        if instructions.is_empty() {
            skip(&mut out, SynthStage::SelfInstruct, "no instructions could be parsed".into());
            return Ok(out);
        }
        out.counters.instructions = instructions.len();
        log::info!("{}: {} instructions", doc.id, instructions.len());
        for (k, instruction) in instructions.iter().enumerate() {
            let id = format!("{}#{k}", doc.id);
            let mut env = match env_factory(doc, self.config.seed.wrapping_add(k as u64)) {
                Ok(env) => env,
                Err(e) => {
                    skip(&mut out, SynthStage::Environment, e.to_string());
                    return Ok(out);
                }
            };
            let rollout = self.rollout(env.as_mut(), &id, &doc.id, instruction)?;
            out.counters.rollouts += 1;
            if let Some(f) = &rollout.failure {
                out.counters.aborted_rollouts += 1;
                out.events.push(SynthEvent {
                    stage: SynthStage::Rollout,
                    doc_id: doc.id.clone(),
                    item: Some(id.clone()),
                    message: f.message.clone(),
                });
            }
            let n = rollout.trajectory.action_count();
            if n == 0 {
                out.counters.empty_rollouts += 1;
            }
            out.counters.spans += n * (n + 1) / 2;
            let (examples, events) = self.backward_construct(&rollout)?;
            out.counters.relabel_failures += events.len();
            out.counters.examples += examples.len();
            out.examples.extend(examples);
            out.events.extend(events);
            log::info!("{id}: {n} actions, {:?}", rollout.termination);
            out.rollouts.push(rollout);
        }
        Ok(out)
    }

    /// Runs the whole synthesis over `docs`. Documents are processed in
    /// parallel; the output order follows `docs`.
    pub fn synthesize_corpus(
        &self,
        docs: &[Document],
        env_factory: &EnvFactory<'_>,
    ) -> Result<SynthesisOutput, SynthError> {
        self.config.validate()?;
        if docs.is_empty() {
            return Err(SynthError::NoDocuments);
        }
        let parts: Vec<SynthesisOutput> = docs
            .par_iter()
            .map(|d| self.synthesize_document(d, env_factory))
            .collect::<Result<_, _>>()?;
        let mut out = SynthesisOutput::default();
        for p in parts {
            out.counters.add(&p.counters);
            out.rollouts.extend(p.rollouts);
            out.examples.extend(p.examples);
            out.events.extend(p.events);
        }
        Ok(out)
    }
}

pub fn example_id(parent_id: &str, i: usize, j: usize, kind: InstructionKind) -> String {
    format!("{parent_id}:{i}-{j}:{kind}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{SimEnv, WorldRegistry};
    use crate::gateway::{MockRule, ScriptedMock, ScriptedMockTable};
    use crate::model::Action;

    fn mock(rules: Vec<MockRule>, default: &str) -> ScriptedMock {
        ScriptedMock::new(ScriptedMockTable {
            rules,
            default_response: default.into(),
        })
        .unwrap()
    }

    fn doc(id: &str, tag: &str) -> Document {
        Document {
            id: id.into(),
            source_uri: format!("file://{id}"),
            text: format!("How to use the {tag} app."),
            domain_tag: tag.into(),
        }
    }

    fn registry_factory() -> impl Fn(&Document, u64) -> Result<Box<dyn Environment>, EnvError> + Sync {
        let reg = WorldRegistry::builtin();
        move |d: &Document, seed| reg.env_for_document_seeded(d, seed).map(|e| Box::new(e) as Box<dyn Environment>)
    }

    fn shop_rules() -> Vec<MockRule> {
        vec![
            MockRule::contains("examplify", "* Buy a kettle\n* buy a KETTLE\n* Find a mug\n* Check orders"),
            MockRule::contains("OBSERVATIONS:\n[results]", "REASON: r\nACTION: stop: done"),
            MockRule::contains("OBSERVATIONS:\n[home]", "REASON: r\nACTION: click [search]"),
            MockRule::contains("Please summarize", "```\nSummary text\n```"),
            MockRule::contains("Please write a reasonable task", "```Open search```"),
        ]
    }

    #[test]
    fn proposals_are_deduplicated_and_capped() {
        let m = mock(shop_rules(), "");
        let cfg = SynthesisConfig::default();
        let s = Synthesizer { gateway: &m, model_id: "gen", system_message: "sys", config: &cfg };
        assert_eq!(s.propose_instructions(&doc("d", "shop")).unwrap(), ["Buy a kettle", "Find a mug", "Check orders"]);

        let bad = mock(vec![], "nothing useful");
        let s = Synthesizer { gateway: &bad, ..s };
        assert!(s.propose_instructions(&doc("d", "shop")).unwrap().is_empty());
        assert_eq!(bad.calls(), 2);
    }

    fn rollout_of(n: usize) -> RawRollout {
        let traj = Trajectory::from_parts(
            (0..=n).map(|k| format!("obs {k}")),
            (1..=n).map(|k| format!("click [{k}]")),
        )
        .unwrap();
        RawRollout {
            id: "d#0".into(),
            doc_id: "d".into(),
            env_id: "e".into(),
            instruction: "orig".into(),
            trajectory: traj,
            termination: Termination::StopPredicted,
            failure: None,
        }
    }

    #[test]
    fn backward_construction_covers_every_span() {
        let m = mock(shop_rules(), "");
        let cfg = SynthesisConfig::default();
        let s = Synthesizer { gateway: &m, model_id: "gen", system_message: "sys", config: &cfg };
        let r = rollout_of(3);
        let (examples, events) = s.backward_construct(&r).unwrap();
        assert!(events.is_empty());
        assert_eq!(examples.len(), 6 * 2);
        assert_eq!(examples[0].id, "d#0:0-1:summary");
        assert_eq!(examples[1].id, "d#0:0-1:abstraction");
        assert_eq!(examples[0].instruction, "Summary text");
        assert_eq!(examples[1].instruction, "Open search");
        for e in &examples {
            let p = &e.provenance;
            assert_eq!(e.trajectory, r.trajectory.sub_trajectory(p.span_start, p.span_end).unwrap());
            assert_eq!(p.parent_trajectory_id, "d#0");
        }

        let cfg = SynthesisConfig { kinds: vec![InstructionKind::Abstraction], keep_original: true, ..Default::default() };
        let s = Synthesizer { config: &cfg, ..s };
        let (examples, _) = s.backward_construct(&r).unwrap();
        assert_eq!(examples.len(), 7);
        assert_eq!(examples[0].instruction, "orig");
        assert_eq!(examples[0].provenance.kind, InstructionKind::Original);

        assert!(s.backward_construct(&rollout_of(0)).unwrap().0.is_empty());
    }

    #[test]
    fn unparseable_relabels_are_skipped() {
        let m = mock(vec![MockRule::contains("Please summarize", "```\nok\n```")], "no fence here");
        let cfg = SynthesisConfig::default();
        let s = Synthesizer { gateway: &m, model_id: "gen", system_message: "sys", config: &cfg };
        let (examples, events) = s.backward_construct(&rollout_of(2)).unwrap();
        assert_eq!(examples.len(), 3);
        assert_eq!(events.len(), 3);
        assert!(events.iter().all(|e| e.stage == SynthStage::Relabel));
    }

    #[test]
    fn corpus_synthesis_is_ordered_and_counted() {
        let m = mock(shop_rules(), "");
        let cfg = SynthesisConfig::default();
        let s = Synthesizer { gateway: &m, model_id: "gen", system_message: "sys", config: &cfg };
        let docs = [doc("a", "shop"), doc("b", "shop"), doc("c", "nowhere")];
        let factory = registry_factory();
        let out = s.synthesize_corpus(&docs, &factory).unwrap();
        assert_eq!(out.counters.documents, 3);
        assert_eq!(out.counters.documents_skipped, 1);
        assert_eq!(out.rollouts.len(), 6);
        assert_eq!(out.rollouts[0].id, "a#0");
        assert_eq!(out.rollouts[3].id, "b#0");
        assert!(out.rollouts.iter().all(|r| r.trajectory.action_count() == 1));
        assert_eq!(out.examples.len(), 6 * 2);
        assert_eq!(out.counters.examples, 12);
        assert!(out.events.iter().any(|e| e.doc_id == "c"));

        let again = s.synthesize_corpus(&docs, &factory).unwrap();
        assert_eq!(again, out);
        assert!(matches!(s.synthesize_corpus(&[], &factory), Err(SynthError::NoDocuments)));
    }

    #[test]
    fn rollout_resets_the_environment() {
        let m = mock(shop_rules(), "");
        let cfg = SynthesisConfig::default();
        let s = Synthesizer { gateway: &m, model_id: "gen", system_message: "sys", config: &cfg };
        let mut env: SimEnv = WorldRegistry::builtin().env_for("shop").unwrap();
        env.execute(&Action::parse("click [orders]")).unwrap();
        let r = s.rollout(&mut env, "x#0", "x", "Buy").unwrap();
        assert!(r.trajectory.observations()[0].text.starts_with("[home]"));
        assert_eq!(r.termination, Termination::StopPredicted);
    }

    #[test]
    fn config_validation() {
        assert!(SynthesisConfig::default().validate().is_ok());
        let bad = SynthesisConfig { kinds: vec![InstructionKind::Original], ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = SynthesisConfig { kinds: vec![], ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
