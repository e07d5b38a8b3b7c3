//! Okapi BM25 over an inverted index of stored examples.
//!
//! ```text
//! score(q, d) = Σ_{t ∈ q} idf(t) · tf·(k1 + 1) / (tf + k1·(1 − b + b·|d| / avgdl))
//! idf(t)      = ln(1 + (N − df + 0.5) / (df + 0.5))
//! ```
//!
//! Query terms are deduplicated. An example one of whose observations
//! contains the full query observation verbatim gets [`EXACT_MATCH_BOOST`]
//! added, so exact state matches always rank first.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::RetrievalError;
use crate::model::{tokenize, Example, RetrievalHit, RetrievalSource};

pub const SPARSE_FORMAT_VERSION: u32 = 1;
pub const EXACT_MATCH_BOOST: f64 = 1.0e6;
pub const DEFAULT_QUERY_TOKEN_LIMIT: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparseOptions {
    pub params: Bm25Params,
    /// Queries longer than this are cut to their first tokens.
    pub query_token_limit: usize,
    /// Also index action text, not just instruction and observations.
    pub index_actions: bool,
}

impl Default for SparseOptions {
    fn default() -> Self {
        Self {
            params: Bm25Params::default(),
            query_token_limit: DEFAULT_QUERY_TOKEN_LIMIT,
            index_actions: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseIndex {
    pub format_version: u32,
    pub options: SparseOptions,
    ids: Vec<String>,
    doc_lengths: Vec<u32>,
    avg_doc_length: f64,
    /// term -> (document ordinal, term frequency), ordinals ascending.
    postings: BTreeMap<String, Vec<(u32, u32)>>,
    observations: Vec<Vec<String>>,
}

/// Text an example is indexed under.
pub fn indexed_text(example: &Example, index_actions: bool) -> String {
    let mut parts = vec![example.instruction.as_str()];
    let traj = &example.trajectory;
    for (k, obs) in traj.observations().iter().enumerate() {
        if index_actions && k > 0 {
            parts.push(&traj.actions()[k - 1].raw);
        }
        parts.push(&obs.text);
    }
    parts.join("\n")
}

impl SparseIndex {
    pub fn build(examples: &[Example], options: SparseOptions) -> Result<Self, RetrievalError> {
        if examples.is_empty() {
            return Err(RetrievalError::EmptyCorpus);
        }
        let mut postings: BTreeMap<String, Vec<(u32, u32)>> = BTreeMap::new();
        let mut doc_lengths = Vec::with_capacity(examples.len());
        for (ord, ex) in examples.iter().enumerate() {
            let tokens = tokenize(&indexed_text(ex, options.index_actions));
            doc_lengths.push(tokens.len() as u32);
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in tokens {
                *tf.entry(t).or_default() += 1;
            }
            for (term, count) in tf {
                postings.entry(term).or_default().push((ord as u32, count));
            }
        }
        let avg_doc_length =
            doc_lengths.iter().map(|&l| l as f64).sum::<f64>() / doc_lengths.len() as f64;
        Ok(Self {
            format_version: SPARSE_FORMAT_VERSION,
            options,
            ids: examples.iter().map(|e| e.id.clone()).collect(),
            doc_lengths,
            avg_doc_length,
            postings,
            observations: examples
                .iter()
                .map(|e| e.trajectory.observations().iter().map(|o| o.text.clone()).collect())
                .collect(),
        })
    }

    pub fn check_version(&self) -> Result<(), RetrievalError> {
        if self.format_version != SPARSE_FORMAT_VERSION {
            return Err(RetrievalError::FormatVersion(self.format_version));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn doc_length(&self, example_id: &str) -> Option<u32> {
        self.ids
            .iter()
            .position(|id| id == example_id)
            .map(|i| self.doc_lengths[i])
    }

    /// `(example_id, term_frequency)` for every example containing `term`.
    pub fn postings(&self, term: &str) -> Vec<(&str, u32)> {
        self.postings
            .get(&term.to_lowercase())
            .map(|list| {
                list.iter()
                    .map(|&(ord, tf)| (self.ids[ord as usize].as_str(), tf))
                    .collect()
            })
            .unwrap_or_default()
    }

    fn idf(&self, df: usize) -> f64 {
        let n = self.ids.len() as f64;
        let df = df as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// Raw BM25 scores of every example sharing a term with `query`.
    pub fn bm25_scores(&self, query: &str) -> HashMap<usize, f64> {
        let Bm25Params { k1, b } = self.options.params;
        let avgdl = if self.avg_doc_length > 0.0 {
            self.avg_doc_length
        } else {
            1.0
        };
        let terms: BTreeSet<String> = tokenize(query)
            .into_iter()
            .take(self.options.query_token_limit)
            .collect();
        let mut scores: HashMap<usize, f64> = HashMap::new();
        for term in &terms {
            let Some(list) = self.postings.get(term) else {
                continue;
            };
            let idf = self.idf(list.len());
            for &(ord, tf) in list {
                let tf = tf as f64;
                let dl = self.doc_lengths[ord as usize] as f64;
                let norm = tf + k1 * (1.0 - b + b * dl / avgdl);
                *scores.entry(ord as usize).or_default() += idf * tf * (k1 + 1.0) / norm;
            }
        }
        scores
    }

    /// Top `limit` examples for an observation, best first, ties by id.
    pub fn query(&self, observation: &str, limit: usize) -> Vec<RetrievalHit> {
        if limit == 0 {
            return Vec::new();
        }
        let mut scores = self.bm25_scores(observation);
        if !observation.trim().is_empty() {
            for (ord, obs) in self.observations.iter().enumerate() {
                if obs.iter().any(|o| o.contains(observation)) {
                    *scores.entry(ord).or_default() += EXACT_MATCH_BOOST;
                }
            }
        }
        let mut ranked: Vec<(usize, f64)> = scores.into_iter().filter(|&(_, s)| s > 0.0).collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| self.ids[a.0].cmp(&self.ids[b.0])));
        ranked
            .into_iter()
            .take(limit)
            .map(|(ord, score)| RetrievalHit {
                example_id: self.ids[ord].clone(),
                score,
                source: RetrievalSource::ObservationBased,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{InstructionKind, Provenance, Trajectory};

    fn ex(id: &str, instruction: &str, obs: &[&str]) -> Example {
        let traj = Trajectory::from_parts(
            obs.iter().copied(),
            (1..obs.len()).map(|k| format!("click [{k}]")),
        )
        .unwrap();
        Example::new(
            id,
            instruction,
            traj,
            Provenance {
                doc_id: "d".into(),
                parent_trajectory_id: "p".into(),
                span_start: 0,
                span_end: obs.len() - 1,
                kind: InstructionKind::Summary,
            },
        )
        .unwrap()
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(matches!(
            SparseIndex::build(&[], SparseOptions::default()),
            Err(RetrievalError::EmptyCorpus)
        ));
    }

    #[test]
    fn single_example_avg_length() {
        let e = ex("a", "buy kettle", &["home page", "cart page"]);
        let idx = SparseIndex::build(&[e], SparseOptions::default()).unwrap();
        assert_eq!(idx.avg_doc_length(), 6.0);
        assert_eq!(idx.doc_length("a"), Some(6));
        assert!(idx.postings("absent").is_empty());
    }

    #[test]
    fn postings_match_hand_built_index() {
        let corpus = [
            ex("a", "red shoe", &["shop", "cart"]),
            ex("b", "blue shoe", &["shop", "shop"]),
            ex("c", "red hat", &["home", "cart"]),
        ];
        let idx = SparseIndex::build(&corpus, SparseOptions::default()).unwrap();
        assert_eq!(idx.postings("red"), [("a", 1), ("c", 1)]);
        assert_eq!(idx.postings("shoe"), [("a", 1), ("b", 1)]);
        assert_eq!(idx.postings("shop"), [("a", 1), ("b", 2)]);
        assert_eq!(idx.postings("cart"), [("a", 1), ("c", 1)]);
        assert_eq!(idx.postings("Home"), [("c", 1)]);
        assert_eq!(idx.postings("click"), []);

        let with_actions = SparseIndex::build(
            &corpus,
            SparseOptions {
                index_actions: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(with_actions.postings("click").len(), 3);
    }

    #[test]
    fn zero_limit_and_no_overlap() {
        let corpus = [ex("a", "red shoe", &["shop", "cart"])];
        let idx = SparseIndex::build(&corpus, SparseOptions::default()).unwrap();
        assert!(idx.query("red", 0).is_empty());
        assert!(idx.query("green", 5).is_empty());
    }

    #[test]
    fn exact_containment_dominates() {
        let corpus = [
            ex("1", "shopping cart", &["shopping cart page", "cart"]),
            ex(
                "2",
                "review the order before paying for the items in your basket",
                &["[cart] page Shopping cart\n  [checkout] button Proceed to checkout now", "done"],
            ),
            ex("3", "kettle", &["kettle", "z"]),
        ];
        let idx = SparseIndex::build(&corpus, SparseOptions::default()).unwrap();
        let raw = idx.bm25_scores("[cart] page Shopping cart");
        assert!(raw[&0] > raw[&1], "raw BM25 should prefer the short example");
        let hits = idx.query("[cart] page Shopping cart", 3);
        assert_eq!(hits[0].example_id, "2");
        assert!(hits[0].score > EXACT_MATCH_BOOST);
        assert!(hits.iter().all(|h| h.source == RetrievalSource::ObservationBased));
    }

    #[test]
    fn ties_break_by_id() {
        let corpus = [
            ex("b", "same text", &["o", "o"]),
            ex("a", "same text", &["o", "o"]),
        ];
        let idx = SparseIndex::build(&corpus, SparseOptions::default()).unwrap();
        let hits = idx.query("text", 2);
        assert_eq!(hits[0].example_id, "a");
        assert_eq!(hits[1].example_id, "b");
        assert_eq!(hits[0].score, hits[1].score);
    }

    #[test]
    fn long_queries_are_truncated() {
        let corpus = [ex("a", "alpha", &["o", "o"]), ex("b", "omega", &["o", "o"])];
        let idx = SparseIndex::build(
            &corpus,
            SparseOptions {
                query_token_limit: 2,
                ..Default::default()
            },
        )
        .unwrap();
        let hits = idx.query("alpha filler omega", 5);
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].example_id, "a");
    }
}
