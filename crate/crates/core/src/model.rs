//! Domain types shared across the pipeline and the structural operations on
//! trajectories.
//!
//! A [`Trajectory`] is the alternating sequence `o0, a1, o1, ..., an, on`. It
//! is stored as `n + 1` observations and `n` actions so the alternation
//! invariant holds by construction; the item-list view is used for
//! serialization and for validating externally supplied sequences.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::ModelError;

/// A source text that seeds task instructions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub source_uri: String,
    pub text: String,
    pub domain_tag: String,
}

impl Document {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.id.is_empty() {
            return Err(ModelError::InvalidDocument("empty id".into()));
        }
        if self.text.trim().is_empty() {
            return Err(ModelError::InvalidDocument(format!(
                "document {} has empty text",
                self.id
            )));
        }
        Ok(())
    }
}

/// Serialized environment state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub text: String,
    pub step_index: usize,
}

impl Observation {
    pub fn new(text: impl Into<String>, step_index: usize) -> Self {
        Self {
            text: text.into(),
            step_index,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Command,
    Stop,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Action {
    pub raw: String,
    pub kind: ActionKind,
}

impl Action {
    /// Parses an action literal. Anything whose trimmed text starts with
    /// `stop` (any case) is a stop directive.
    pub fn parse(raw: impl Into<String>) -> Self {
        let raw = raw.into();
        let kind = if is_stop_literal(&raw) {
            ActionKind::Stop
        } else {
            ActionKind::Command
        };
        Self { raw, kind }
    }

    pub fn is_stop(&self) -> bool {
        self.kind == ActionKind::Stop
    }
}

fn is_stop_literal(raw: &str) -> bool {
    raw.trim_start()
        .get(..4)
        .is_some_and(|head| head.eq_ignore_ascii_case("stop"))
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.raw)
    }
}

/// One position of the alternating item view.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TrajectoryItem {
    Observation(Observation),
    Action(Action),
}

/// Number of actions in an alternating item sequence, validating parity.
pub fn action_count(items: &[TrajectoryItem]) -> Result<usize, ModelError> {
    if items.len().is_multiple_of(2) {
        return Err(ModelError::Structure(format!(
            "trajectory must have odd length, got {}",
            items.len()
        )));
    }
    for (pos, item) in items.iter().enumerate() {
        let ok = matches!(
            (pos % 2, item),
            (0, TrajectoryItem::Observation(_)) | (1, TrajectoryItem::Action(_))
        );
        if !ok {
            return Err(ModelError::Structure(format!(
                "item {pos} breaks observation/action alternation"
            )));
        }
    }
    Ok((items.len() - 1) / 2)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<TrajectoryItem>", into = "Vec<TrajectoryItem>")]
pub struct Trajectory {
    observations: Vec<Observation>,
    actions: Vec<Action>,
}

impl Trajectory {
    /// A single-observation trajectory.
    pub fn new(initial: impl Into<String>) -> Self {
        Self {
            observations: vec![Observation::new(initial, 0)],
            actions: Vec::new(),
        }
    }

    /// Builds from `n + 1` observation texts and `n` action literals.
    pub fn from_parts<O, A>(observations: O, actions: A) -> Result<Self, ModelError>
    where
        O: IntoIterator,
        O::Item: Into<String>,
        A: IntoIterator,
        A::Item: Into<String>,
    {
        let observations: Vec<Observation> = observations
            .into_iter()
            .enumerate()
            .map(|(i, text)| Observation::new(text, i))
            .collect();
        let actions: Vec<Action> = actions.into_iter().map(Action::parse).collect();
        if observations.len() != actions.len() + 1 {
            return Err(ModelError::Structure(format!(
                "{} observations cannot alternate with {} actions",
                observations.len(),
                actions.len()
            )));
        }
        Ok(Self {
            observations,
            actions,
        })
    }

    pub fn from_items(items: Vec<TrajectoryItem>) -> Result<Self, ModelError> {
        action_count(&items)?;
        let mut observations = Vec::with_capacity(items.len() / 2 + 1);
        let mut actions = Vec::with_capacity(items.len() / 2);
        for item in items {
            match item {
                TrajectoryItem::Observation(o) => {
                    if o.step_index != observations.len() {
                        return Err(ModelError::Structure(format!(
                            "observation at ordinal {} carries step_index {}",
                            observations.len(),
                            o.step_index
                        )));
                    }
                    observations.push(o);
                }
                TrajectoryItem::Action(a) => actions.push(a),
            }
        }
        Ok(Self {
            observations,
            actions,
        })
    }

    pub fn into_items(self) -> Vec<TrajectoryItem> {
        let mut items = Vec::with_capacity(self.len());
        let mut actions = self.actions.into_iter();
        for obs in self.observations {
            if !items.is_empty() {
                if let Some(a) = actions.next() {
                    items.push(TrajectoryItem::Action(a));
                }
            }
            items.push(TrajectoryItem::Observation(obs));
        }
        items
    }

    /// Appends an executed action and the observation it produced.
    pub fn push(&mut self, action: Action, observation_text: impl Into<String>) {
        let idx = self.observations.len();
        self.actions.push(action);
        self.observations.push(Observation::new(observation_text, idx));
    }

    pub fn action_count(&self) -> usize {
        self.actions.len()
    }

    /// Length of the alternating item view, always odd.
    #[allow(clippy::len_without_is_empty)]
    pub fn len(&self) -> usize {
        self.observations.len() + self.actions.len()
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn actions(&self) -> &[Action] {
        &self.actions
    }

    pub fn last_observation(&self) -> &Observation {
        self.observations
            .last()
            .expect("trajectory holds at least one observation")
    }

    /// `(a_k, o_k)` for `k` in `1..=n`.
    pub fn steps(&self) -> impl Iterator<Item = (&Action, &Observation)> {
        self.actions.iter().zip(self.observations.iter().skip(1))
    }

    /// The observation-bounded slice `(o_i, a_{i+1}, ..., a_j, o_j)`.
    /// Observations are renumbered from zero.
    pub fn sub_trajectory(&self, i: usize, j: usize) -> Result<Self, ModelError> {
        let n = self.action_count();
        if i >= j || j > n {
            return Err(ModelError::Range { i, j, n });
        }
        let observations = self.observations[i..=j]
            .iter()
            .enumerate()
            .map(|(k, o)| Observation::new(o.text.clone(), k))
            .collect();
        let actions = self.actions[i..j].to_vec();
        Ok(Self {
            observations,
            actions,
        })
    }

    /// Text form used in prompts and token estimates:
    /// `Observation:` / `Action:` blocks in order.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, obs) in self.observations.iter().enumerate() {
            if k > 0 {
                out.push_str("Action:\n");
                out.push_str(&self.actions[k - 1].raw);
                out.push('\n');
            }
            out.push_str("Observation:\n");
            out.push_str(&obs.text);
            out.push('\n');
        }
        out
    }
}

impl TryFrom<Vec<TrajectoryItem>> for Trajectory {
    type Error = ModelError;

    fn try_from(items: Vec<TrajectoryItem>) -> Result<Self, Self::Error> {
        Self::from_items(items)
    }
}

impl From<Trajectory> for Vec<TrajectoryItem> {
    fn from(t: Trajectory) -> Self {
        t.into_items()
    }
}

/// All spans `0 <= i < j <= n` in `(i asc, j asc)` order.
pub fn enumerate_spans(n: usize) -> Vec<(usize, usize)> {
    let mut spans = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        for j in (i + 1)..=n {
            spans.push((i, j));
        }
    }
    spans
}

/// Lowercased whitespace-delimited token count. Used for every budget in the
/// crate so numbers are reproducible across providers.
pub fn estimate_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Lowercased tokens under the same rule as [`estimate_tokens`].
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstructionKind {
    Original,
    Summary,
    Abstraction,
}

impl fmt::Display for InstructionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Original => "original",
            Self::Summary => "summary",
            Self::Abstraction => "abstraction",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub doc_id: String,
    pub parent_trajectory_id: String,
    pub span_start: usize,
    pub span_end: usize,
    pub kind: InstructionKind,
}

/// An instruction paired with a (sub-)trajectory.
///
/// Fields not known to this version are kept in `extra` and written back
/// unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub instruction: String,
    pub trajectory: Trajectory,
    pub provenance: Provenance,
    pub token_count: usize,
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl Example {
    pub fn new(
        id: impl Into<String>,
        instruction: impl Into<String>,
        trajectory: Trajectory,
        provenance: Provenance,
    ) -> Result<Self, ModelError> {
        if provenance.span_start >= provenance.span_end {
            return Err(ModelError::Range {
                i: provenance.span_start,
                j: provenance.span_end,
                n: trajectory.action_count(),
            });
        }
        let instruction = instruction.into();
        let token_count = example_tokens(&instruction, &trajectory);
        Ok(Self {
            id: id.into(),
            instruction,
            trajectory,
            provenance,
            token_count,
            extra: BTreeMap::new(),
        })
    }

    pub fn action_count(&self) -> usize {
        self.trajectory.action_count()
    }

    pub fn recount_tokens(&mut self) {
        self.token_count = example_tokens(&self.instruction, &self.trajectory);
    }
}

/// Token estimate of an instruction together with its serialized trajectory.
pub fn example_tokens(instruction: &str, trajectory: &Trajectory) -> usize {
    estimate_tokens(instruction) + estimate_tokens(&trajectory.render())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalSource {
    ObservationBased,
    ModelBased,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub example_id: String,
    pub score: f64,
    pub source: RetrievalSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum Termination {
    StopPredicted,
    MaxSteps,
    EnvFinished,
    /// Aborted before the given step could complete.
    Aborted { step: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub trajectory: Trajectory,
    pub termination: Termination,
    pub steps: usize,
}
