use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::vote::{vote, TieBreak, Vote, VoteMethod, VoteResult};
use super::EnsembleError;
use crate::taxonomy::ClassTaxonomy;

/// How per-box and global results combine into one image label.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationPolicy {
    /// Highest-priority per-box label; the global result only stands in when
    /// no box survived detection.
    #[default]
    Priority,
    /// Every box vote and global vote pooled into one vote.
    Pooled,
}

impl AggregationPolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            AggregationPolicy::Priority => "priority",
            AggregationPolicy::Pooled => "pooled",
        }
    }
}

impl fmt::Display for AggregationPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AggregationPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "priority" => Ok(AggregationPolicy::Priority),
            "pooled" => Ok(AggregationPolicy::Pooled),
            other => Err(format!("unknown aggregation policy {other:?} (expected priority or pooled)")),
        }
    }
}

/// Settings that shape aggregation; a subset of the pipeline config.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AggregateOptions {
    pub policy: AggregationPolicy,
    pub method: VoteMethod,
    /// Use the global result when no box survived detection.
    pub global_fallback: bool,
}

fn fallback(image_id: &str, method: VoteMethod, votes: Vec<Vote>, taxonomy: &ClassTaxonomy, why: &str) -> VoteResult {
    let label = taxonomy.fallback_label().to_owned();
    VoteResult {
        image_id: image_id.to_owned(),
        final_label: label.clone(),
        method,
        votes,
        audit: vec![TieBreak { rule: "fallback".into(), candidates: Vec::new(), chosen: label, detail: why.to_owned() }],
    }
}

/// Combines per-box results and an optional global result. With neither, the
/// image gets the taxonomy's fallback class.
pub fn aggregate_image_label(
    image_id: &str,
    box_results: &[VoteResult],
    global_result: Option<&VoteResult>,
    opts: AggregateOptions,
    taxonomy: &ClassTaxonomy,
) -> Result<VoteResult, EnsembleError> {
    for r in box_results.iter().chain(global_result) {
        if r.image_id != image_id {
            return Err(EnsembleError::MixedImages { expected: image_id.to_owned(), got: r.image_id.clone() });
        }
        if !taxonomy.contains(&r.final_label) {
            return Err(EnsembleError::UnknownLabel { label: r.final_label.clone(), taxonomy: taxonomy.name.clone() });
        }
    }
    let all_votes: Vec<Vote> = box_results.iter().chain(global_result).flat_map(|r| r.votes.iter().cloned()).collect();

    match opts.policy {
        AggregationPolicy::Pooled => {
            if all_votes.is_empty() {
                return Ok(fallback(image_id, opts.method, all_votes, taxonomy, "no votes to pool"));
            }
            let mut r = vote(opts.method, image_id, &all_votes, taxonomy)?;
            r.audit.insert(
                0,
                TieBreak {
                    rule: "pooled".into(),
                    candidates: Vec::new(),
                    chosen: r.final_label.clone(),
                    detail: format!("{} votes from {} boxes{}", all_votes.len(), box_results.len(), if global_result.is_some() { " and global" } else { "" }),
                },
            );
            Ok(r)
        }
        AggregationPolicy::Priority => {
            let mut audit: Vec<TieBreak> = box_results.iter().flat_map(|r| r.audit.iter().cloned()).collect();
            if box_results.is_empty() {
                return Ok(match global_result {
                    Some(g) if opts.global_fallback => {
                        audit.push(TieBreak {
                            rule: "global_fallback".into(),
                            candidates: Vec::new(),
                            chosen: g.final_label.clone(),
                            detail: "no surviving boxes".into(),
                        });
                        audit.extend(g.audit.iter().cloned());
                        VoteResult {
                            image_id: image_id.to_owned(),
                            final_label: g.final_label.clone(),
                            method: opts.method,
                            votes: all_votes,
                            audit,
                        }
                    }
                    _ => fallback(image_id, opts.method, all_votes, taxonomy, "no surviving boxes"),
                });
            }
            let mut labels: Vec<usize> =
                box_results.iter().map(|r| taxonomy.priority(&r.final_label).expect("checked above")).collect();
            labels.sort_unstable();
            labels.dedup();
            let chosen = taxonomy.classes[labels[0]].clone();
            if labels.len() > 1 {
                audit.push(TieBreak {
                    rule: "box_priority".into(),
                    candidates: labels.iter().map(|&i| taxonomy.classes[i].clone()).collect(),
                    chosen: chosen.clone(),
                    detail: String::new(),
                });
            }
            Ok(VoteResult { image_id: image_id.to_owned(), final_label: chosen, method: opts.method, votes: all_votes, audit })
        }
    }
}
