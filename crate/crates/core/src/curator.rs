//! Quality filtering and granularity-aware subsampling of synthesized
//! examples.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::CurateError;
use crate::gateway::{complete_parsed, LanguageModel};
use crate::model::{tokenize, Example, Trajectory};
use crate::prompts::{parse_yes_no, render_filter, YES_NO_REMINDER};

/// Removes every `(a_k, o_k)` that exactly repeats `(a_{k-1}, o_{k-1})`.
pub fn dedup_states(traj: &Trajectory) -> Trajectory {
    let mut out = Trajectory::new(traj.observations()[0].text.clone());
    let mut prev: Option<(&str, &str)> = None;
    for (a, o) in traj.steps() {
        let pair = (a.raw.as_str(), o.text.as_str());
        if prev != Some(pair) {
            out.push(a.clone(), o.text.clone());
        }
        prev = Some(pair);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommitteeConfig {
    /// Model ids; every one must approve.
    pub members: Vec<String>,
}

impl CommitteeConfig {
    pub fn new<S: Into<String>>(members: impl IntoIterator<Item = S>) -> Result<Self, CurateError> {
        let c = Self {
            members: members.into_iter().map(Into::into).collect(),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), CurateError> {
        if self.members.is_empty() {
            return Err(CurateError::EmptyCommittee);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitteeVerdict {
    pub approved: bool,
    /// First member that did not approve, if any.
    pub rejected_by: Option<String>,
    /// Whether that rejection came from an unusable answer rather than "no".
    pub member_failure: bool,
}

/// Unanimous vote. A member whose answer cannot be read, even after one
/// reminder, or whose provider fails, counts as a "no".
pub fn committee_check(
    example: &Example,
    committee: &CommitteeConfig,
    gateway: &dyn LanguageModel,
) -> Result<CommitteeVerdict, CurateError> {
    committee.validate()?;
    let prompt = render_filter(&example.instruction, &example.trajectory);
    for member in &committee.members {
        let (yes, failure) = match complete_parsed(gateway, member, &prompt, YES_NO_REMINDER, parse_yes_no) {
            Ok(v) => (v, false),
            Err(e) => {
                log::warn!("committee member {member} gave no usable verdict for {}: {e}", example.id);
                (false, true)
            }
        };
        if !yes {
            return Ok(CommitteeVerdict {
                approved: false,
                rejected_by: Some(member.clone()),
                member_failure: failure,
            });
        }
    }
    Ok(CommitteeVerdict {
        approved: true,
        rejected_by: None,
        member_failure: false,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub input: usize,
    pub kept: usize,
    pub rejected_by_committee: usize,
    /// Rejections caused by unreadable answers or provider failures.
    pub member_failures: usize,
    pub rejections_by_member: BTreeMap<String, usize>,
    pub examples_deduplicated: usize,
    pub duplicate_pairs_removed: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub kept: Vec<Example>,
    pub report: FilterReport,
}

/// Removes duplicate states from every example, then keeps those the whole
/// committee approves. Order is preserved.
pub fn filter_corpus(
    examples: Vec<Example>,
    committee: &CommitteeConfig,
    gateway: &dyn LanguageModel,
) -> Result<FilterOutcome, CurateError> {
    committee.validate()?;
    let input = examples.len();
    let judged: Vec<(Example, usize, CommitteeVerdict)> = examples
        .into_par_iter()
        .map(|mut ex| {
            let cleaned = dedup_states(&ex.trajectory);
            let removed = ex.trajectory.action_count() - cleaned.action_count();
            if removed > 0 {
                ex.trajectory = cleaned;
                ex.recount_tokens();
            }
            let verdict = committee_check(&ex, committee, gateway)?;
            Ok((ex, removed, verdict))
        })
        .collect::<Result<_, CurateError>>()?;

    let mut report = FilterReport {
        input,
        ..Default::default()
    };
    let mut kept = Vec::new();
    for (ex, removed, verdict) in judged {
        if removed > 0 {
            report.examples_deduplicated += 1;
            report.duplicate_pairs_removed += removed;
        }
        if verdict.approved {
            kept.push(ex);
        } else {
            report.rejected_by_committee += 1;
            if verdict.member_failure {
                report.member_failures += 1;
            }
            if let Some(m) = verdict.rejected_by {
                *report.rejections_by_member.entry(m).or_default() += 1;
            }
        }
    }
    report.kept = kept.len();
    Ok(FilterOutcome { kept, report })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// Fewer than 5 actions.
    Short,
    /// 5 to 9 actions.
    Medium,
    /// 10 or more actions.
    Long,
}

impl Granularity {
    pub const ALL: [Granularity; 3] = [Self::Short, Self::Medium, Self::Long];

    pub fn of(steps: usize) -> Self {
        match steps {
            0..=4 => Self::Short,
            5..=9 => Self::Medium,
            _ => Self::Long,
        }
    }
}

/// Partitions examples by action count. Every bucket is present in the
/// result, possibly empty.
pub fn bucket(examples: &[Example]) -> BTreeMap<Granularity, Vec<Example>> {
    let mut out: BTreeMap<Granularity, Vec<Example>> =
        Granularity::ALL.iter().map(|&g| (g, Vec::new())).collect();
    for ex in examples {
        out.entry(Granularity::of(ex.action_count()))
            .or_default()
            .push(ex.clone());
    }
    out
}

/// Instructions more similar than this to an already selected one are
/// skipped during subsampling.
pub const DIVERSITY_THRESHOLD: f64 = 0.9;

fn counts(text: &str) -> HashMap<String, usize> {
    let mut m = HashMap::new();
    for t in tokenize(text) {
        *m.entry(t).or_default() += 1;
    }
    m
}

/// Multiset Jaccard similarity: `Σ min(count) / Σ max(count)`.
pub fn multiset_jaccard(a: &str, b: &str) -> f64 {
    let (ca, cb) = (counts(a), counts(b));
    let mut inter = 0;
    let mut union = 0;
    for (t, &x) in &ca {
        let y = cb.get(t).copied().unwrap_or(0);
        inter += x.min(y);
        union += x.max(y);
    }
    for (t, &y) in &cb {
        if !ca.contains_key(t) {
            union += y;
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Picks a diverse subset whose total `token_count` stays within `budget`.
///
/// Examples are visited in a seeded shuffle; near-duplicate instructions are
/// skipped and selection stops at the first example that would overflow the
/// budget. The result keeps the input order. If everything fits, the input
/// is returned unchanged.
pub fn subsample_to_budget(examples: &[Example], budget: usize, seed: u64) -> Vec<Example> {
    let total: usize = examples.iter().map(|e| e.token_count).sum();
    if total <= budget {
        return examples.to_vec();
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut used = 0;
    let mut picked: Vec<usize> = Vec::new();
    for i in order {
        let ex = &examples[i];
        if used + ex.token_count > budget {
            break;
        }
        let near_dup = picked
            .iter()
            .any(|&j| multiset_jaccard(&examples[j].instruction, &ex.instruction) > DIVERSITY_THRESHOLD);
        if near_dup {
            continue;
        }
        used += ex.token_count;
        picked.push(i);
    }
    picked.sort_unstable();
    picked.into_iter().map(|i| examples[i].clone()).collect()
}
