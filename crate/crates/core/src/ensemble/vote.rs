use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::EnsembleError;
use crate::stages::{ClassScores, Scale};
use crate::taxonomy::ClassTaxonomy;

/// Two means closer than this are treated as tied.
pub const MEAN_SCORE_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoteMethod {
    /// Highest-priority class any model predicted.
    Hierarchical,
    /// Most frequent predicted class with mean-score then priority tie-breaks.
    #[default]
    BestAccuracy,
}

impl VoteMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            VoteMethod::Hierarchical => "hierarchical",
            VoteMethod::BestAccuracy => "best_accuracy",
        }
    }
}

impl fmt::Display for VoteMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VoteMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hierarchical" => Ok(VoteMethod::Hierarchical),
            "best_accuracy" | "plurality" => Ok(VoteMethod::BestAccuracy),
            other => Err(format!("unknown vote method {other:?} (expected hierarchical or best_accuracy)")),
        }
    }
}

/// One model's opinion on one view of an image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vote {
    pub model_id: String,
    pub scale: Scale,
    pub scores: ClassScores,
    pub argmax_label: String,
}

impl Vote {
    pub fn new(model_id: &str, scale: Scale, scores: ClassScores, taxonomy: &ClassTaxonomy) -> Self {
        let argmax_label = taxonomy.classes[scores.argmax()].clone();
        Self { model_id: model_id.to_owned(), scale, scores, argmax_label }
    }
}

/// Record of a tie-break decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TieBreak {
    /// `mean_score`, `priority`, `fallback`, `global_fallback` or `box_priority`.
    pub rule: String,
    pub candidates: Vec<String>,
    pub chosen: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteResult {
    pub image_id: String,
    pub final_label: String,
    pub method: VoteMethod,
    pub votes: Vec<Vote>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub audit: Vec<TieBreak>,
}

fn check_votes(votes: &[Vote], taxonomy: &ClassTaxonomy) -> Result<Vec<usize>, EnsembleError> {
    if votes.is_empty() {
        return Err(EnsembleError::EmptyVotes);
    }
    votes
        .iter()
        .map(|v| {
            if v.scores.taxonomy != taxonomy.name || v.scores.scores.len() != taxonomy.len() {
                return Err(EnsembleError::TaxonomyMismatch {
                    expected: taxonomy.name.clone(),
                    got: v.scores.taxonomy.clone(),
                });
            }
            taxonomy.priority(&v.argmax_label).ok_or_else(|| EnsembleError::UnknownLabel {
                label: v.argmax_label.clone(),
                taxonomy: taxonomy.name.clone(),
            })
        })
        .collect()
}

pub fn hierarchical_vote(image_id: &str, votes: &[Vote], taxonomy: &ClassTaxonomy) -> Result<VoteResult, EnsembleError> {
    let idx = check_votes(votes, taxonomy)?;
    let best = *idx.iter().min().expect("non-empty");
    Ok(VoteResult {
        image_id: image_id.to_owned(),
        final_label: taxonomy.classes[best].clone(),
        method: VoteMethod::Hierarchical,
        votes: votes.to_vec(),
        audit: Vec::new(),
    })
}

pub fn plurality_vote(image_id: &str, votes: &[Vote], taxonomy: &ClassTaxonomy) -> Result<VoteResult, EnsembleError> {
    let idx = check_votes(votes, taxonomy)?;
    let mut counts = vec![0usize; taxonomy.len()];
    for &i in &idx {
        counts[i] += 1;
    }
    let top = *counts.iter().max().expect("non-empty taxonomy");
    let mut tied: Vec<usize> = (0..counts.len()).filter(|&c| counts[c] == top).collect();
    let mut audit = Vec::new();
    let names = |cs: &[usize]| cs.iter().map(|&c| taxonomy.classes[c].clone()).collect::<Vec<_>>();

    if tied.len() > 1 {
        let n = votes.len() as f64;
        let mean = |c: usize| votes.iter().map(|v| v.scores.scores[c]).sum::<f64>() / n;
        let means: Vec<f64> = tied.iter().map(|&c| mean(c)).collect();
        let best = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let detail = tied
            .iter()
            .zip(&means)
            .map(|(&c, m)| format!("{}={m:.6}", taxonomy.classes[c]))
            .collect::<Vec<_>>()
            .join(" ");
        let candidates = names(&tied);
        let survivors: Vec<usize> =
            tied.iter().zip(&means).filter(|(_, m)| **m >= best - MEAN_SCORE_EPSILON).map(|(&c, _)| c).collect();
        if survivors.len() == 1 {
            audit.push(TieBreak {
                rule: "mean_score".into(),
                candidates,
                chosen: taxonomy.classes[survivors[0]].clone(),
                detail,
            });
        } else {
            // `tied` is ascending, so the first survivor has top priority.
            audit.push(TieBreak {
                rule: "priority".into(),
                candidates: names(&survivors),
                chosen: taxonomy.classes[survivors[0]].clone(),
                detail,
            });
        }
        tied = vec![survivors[0]];
    }
    Ok(VoteResult {
        image_id: image_id.to_owned(),
        final_label: taxonomy.classes[tied[0]].clone(),
        method: VoteMethod::BestAccuracy,
        votes: votes.to_vec(),
        audit,
    })
}

pub fn vote(method: VoteMethod, image_id: &str, votes: &[Vote], taxonomy: &ClassTaxonomy) -> Result<VoteResult, EnsembleError> {
    match method {
        VoteMethod::Hierarchical => hierarchical_vote(image_id, votes, taxonomy),
        VoteMethod::BestAccuracy => plurality_vote(image_id, votes, taxonomy),
    }
}
