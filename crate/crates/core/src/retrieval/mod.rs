//! Example retrieval for in-context learning.
//!
//! Two channels feed each acting step: observation-based retrieval ranks
//! stored examples by BM25 against the current observation, and model-based
//! retrieval asks the model to write a query that is then matched densely,
//! excluding whatever the first channel already returned.

mod dense;
mod sparse;

pub use dense::{l2_normalize, DenseIndex, Embedder, HttpEmbedder, MockEmbedder, DENSE_FORMAT_VERSION};
pub use sparse::{
    indexed_text, Bm25Params, SparseIndex, SparseOptions, DEFAULT_QUERY_TOKEN_LIMIT,
    EXACT_MATCH_BOOST, SPARSE_FORMAT_VERSION,
};

use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use crate::error::RetrievalError;
use crate::gateway::{complete, CompletionRequest, LanguageModel};
use crate::model::{Example, RetrievalHit};
use crate::prompts::render_query;

/// Upper bound on examples taken from each channel per step.
pub const DEFAULT_OBSERVATION_HITS: usize = 5;
pub const DEFAULT_MODEL_HITS: usize = 5;

/// What the agent knows at the current step.
#[derive(Debug, Clone, Copy)]
pub struct RetrievalContext<'a> {
    pub instruction: &'a str,
    /// `(observation, action)` pairs, oldest first.
    pub history: &'a [(&'a str, &'a str)],
    pub observation: &'a str,
}

/// Model used to write dense-retrieval queries.
#[derive(Clone, Copy)]
pub struct QueryWriter<'a> {
    pub gateway: &'a dyn LanguageModel,
    pub model_id: &'a str,
    pub system_message: &'a str,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RetrievalOutcome {
    pub hits: Vec<RetrievalHit>,
    /// Query used for the model-based channel, if it ran.
    pub query: Option<String>,
    /// Degradations worth logging (fallback query, failed channel).
    pub notes: Vec<String>,
}

/// Asks the model for a retrieval query. Falls back to the instruction plus
/// the current observation when the call fails or returns nothing.
pub fn write_retrieval_query(ctx: &RetrievalContext<'_>, writer: &QueryWriter<'_>) -> (String, Option<String>) {
    let prompt = render_query(writer.system_message, ctx.instruction, ctx.history, ctx.observation);
    let fallback = || format!("{}\n{}", ctx.instruction, ctx.observation);
    match complete(writer.gateway, &CompletionRequest::new(prompt, writer.model_id)) {
        Ok(q) if !q.trim().is_empty() => (q.trim().to_string(), None),
        Ok(_) => (fallback(), Some("query writer returned empty text; using fallback query".into())),
        Err(e) => (fallback(), Some(format!("query writer failed ({e}); using fallback query"))),
    }
}

/// Observation-based hits first, then model-based hits that are not already
/// present. At most `m1 + m2` hits, no duplicate ids.
pub fn agentic_retrieve(
    ctx: &RetrievalContext<'_>,
    m1: usize,
    m2: usize,
    sparse: &SparseIndex,
    dense: &DenseIndex,
    embedder: &dyn Embedder,
    writer: &QueryWriter<'_>,
) -> RetrievalOutcome {
    let mut out = RetrievalOutcome {
        hits: sparse.query(ctx.observation, m1),
        ..Default::default()
    };
    if m2 == 0 {
        return out;
    }
    let (query, note) = write_retrieval_query(ctx, writer);
    out.notes.extend(note);
    let exclude: HashSet<String> = out.hits.iter().map(|h| h.example_id.clone()).collect();
    match dense.query(&query, m2, &exclude, embedder) {
        Ok(hits) => out.hits.extend(hits),
        Err(e) => out.notes.push(format!("model-based retrieval failed: {e}")),
    }
    out.query = Some(query);
    out
}

/// Source of retrieved examples for the acting loop.
pub trait ExampleRetriever: Send + Sync {
    fn retrieve(
        &self,
        ctx: &RetrievalContext<'_>,
        m1: usize,
        m2: usize,
        writer: &QueryWriter<'_>,
    ) -> RetrievalOutcome;

    fn example(&self, id: &str) -> Option<&Example>;
}

/// Stored examples together with both indexes over them.
pub struct KnowledgeBase {
    examples: Vec<Example>,
    by_id: HashMap<String, usize>,
    sparse: SparseIndex,
    dense: DenseIndex,
    embedder: Arc<dyn Embedder>,
}

impl KnowledgeBase {
    pub fn build(
        examples: Vec<Example>,
        options: SparseOptions,
        embedder: Arc<dyn Embedder>,
    ) -> Result<Self, RetrievalError> {
        let sparse = SparseIndex::build(&examples, options)?;
        let dense = DenseIndex::build(&examples, embedder.as_ref(), |e| {
            indexed_text(e, options.index_actions)
        })?;
        Self::from_parts(examples, sparse, dense, embedder)
    }

    /// Reassembles a knowledge base from persisted indexes.
    pub fn from_parts(
        examples: Vec<Example>,
        sparse: SparseIndex,
        dense: DenseIndex,
        embedder: Arc<dyn Embedder>,
    ) -> Result<Self, RetrievalError> {
        sparse.check_version()?;
        dense.check_version()?;
        if dense.embedder_id != embedder.embedder_id() {
            return Err(RetrievalError::EmbedderMismatch {
                index: dense.embedder_id.clone(),
                query: embedder.embedder_id().to_string(),
            });
        }
        let by_id = examples
            .iter()
            .enumerate()
            .map(|(i, e)| (e.id.clone(), i))
            .collect();
        Ok(Self {
            examples,
            by_id,
            sparse,
            dense,
            embedder,
        })
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn sparse(&self) -> &SparseIndex {
        &self.sparse
    }

    pub fn dense(&self) -> &DenseIndex {
        &self.dense
    }

    pub fn embedder(&self) -> &dyn Embedder {
        self.embedder.as_ref()
    }
}

impl ExampleRetriever for KnowledgeBase {
    fn retrieve(
        &self,
        ctx: &RetrievalContext<'_>,
        m1: usize,
        m2: usize,
        writer: &QueryWriter<'_>,
    ) -> RetrievalOutcome {
        agentic_retrieve(ctx, m1, m2, &self.sparse, &self.dense, self.embedder.as_ref(), writer)
    }

    fn example(&self, id: &str) -> Option<&Example> {
        self.by_id.get(id).map(|&i| &self.examples[i])
    }
}
