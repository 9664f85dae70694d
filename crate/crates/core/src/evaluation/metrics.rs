use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::EvaluationError;
use crate::ensemble::VoteResult;
use crate::taxonomy::ClassTaxonomy;

/// Manual review throughput: 75 images per 3 minutes.
pub const DEFAULT_REVIEW_RATE_PER_MINUTE: f64 = 75.0 / 3.0;

/// Exact count ratio; formatting happens only at the edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ratio {
    pub num: u64,
    pub den: u64,
}

impl Ratio {
    pub fn new(num: u64, den: u64) -> Option<Self> {
        (den > 0).then_some(Self { num, den })
    }

    pub fn value(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// Percentage with one decimal, rounded half up in integer arithmetic.
    pub fn percent(self) -> String {
        let tenths = (u128::from(self.num) * 2000 + u128::from(self.den)) / (2 * u128::from(self.den));
        format!("{}.{}%", tenths / 10, tenths % 10)
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({}/{})", self.percent(), self.num, self.den)
    }
}

fn pct(r: Option<Ratio>) -> String {
    r.map_or_else(|| "n/a".to_owned(), Ratio::percent)
}

/// Rows are ground truth, columns are predictions, both in taxonomy order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub taxonomy: String,
    pub classes: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(taxonomy: &ClassTaxonomy) -> Self {
        let n = taxonomy.len();
        Self { taxonomy: taxonomy.name.clone(), classes: taxonomy.classes.clone(), counts: vec![vec![0; n]; n] }
    }

    fn index(&self, label: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == label)
    }

    pub fn add(&mut self, truth: &str, predicted: &str) -> Result<(), EvaluationError> {
        let unknown = |l: &str| EvaluationError::UnknownLabel { label: l.to_owned(), taxonomy: self.taxonomy.clone() };
        let t = self.index(truth).ok_or_else(|| unknown(truth))?;
        let p = self.index(predicted).ok_or_else(|| unknown(predicted))?;
        self.counts[t][p] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }

    pub fn accuracy(&self) -> Option<Ratio> {
        Ratio::new(self.trace(), self.total())
    }

    /// Accuracy over images whose ground truth is not `excluded`.
    pub fn accuracy_excluding(&self, excluded: usize) -> Option<Ratio> {
        let rows = (0..self.classes.len()).filter(|&r| r != excluded);
        let (hit, all) = rows.fold((0, 0), |(h, a), r| (h + self.counts[r][r], a + self.row_sum(r)));
        Ratio::new(hit, all)
    }

    pub fn recall(&self, c: usize) -> Option<Ratio> {
        Ratio::new(self.counts[c][c], self.row_sum(c))
    }

    pub fn precision(&self, c: usize) -> Option<Ratio> {
        Ratio::new(self.counts[c][c], self.col_sum(c))
    }

    /// Images of any class in `group` predicted as any class in `group`,
    /// over images of any class in `group`.
    pub fn group_recall(&self, group: &[usize]) -> Option<Ratio> {
        let hit = group.iter().flat_map(|&r| group.iter().map(move |&c| (r, c))).map(|(r, c)| self.counts[r][c]).sum();
        Ratio::new(hit, group.iter().map(|&r| self.row_sum(r)).sum())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    /// Ground-truth images of this class.
    pub support: u64,
    pub predicted: u64,
    /// `None` when the class is absent from ground truth.
    pub recall: Option<Ratio>,
    pub precision: Option<Ratio>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub taxonomy: String,
    pub n_images: u64,
    pub overall_accuracy: Option<Ratio>,
    /// Same, with images whose ground truth is the fallback class left out
    /// of the denominator.
    pub overall_accuracy_excluding_fallback: Option<Ratio>,
    pub fallback_class: String,
    /// Recall of the target (wildcat) classes taken together.
    pub target_recall: Option<Ratio>,
    pub target_classes: Vec<String>,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: ConfusionMatrix,
    /// Populated by callers that know which labels are auto-discarded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub review_savings_minutes: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
}

impl EvaluationReport {
    pub fn from_confusion(confusion: ConfusionMatrix, taxonomy: &ClassTaxonomy) -> Self {
        let fallback = taxonomy.len() - 1;
        let targets = taxonomy.target_classes();
        let per_class = (0..taxonomy.len())
            .map(|c| ClassMetrics {
                class: taxonomy.classes[c].clone(),
                support: confusion.row_sum(c),
                predicted: confusion.col_sum(c),
                recall: confusion.recall(c),
                precision: confusion.precision(c),
            })
            .collect();
        Self {
            taxonomy: taxonomy.name.clone(),
            n_images: confusion.total(),
            overall_accuracy: confusion.accuracy(),
            overall_accuracy_excluding_fallback: confusion.accuracy_excluding(fallback),
            fallback_class: taxonomy.fallback_label().to_owned(),
            target_recall: confusion.group_recall(&targets),
            target_classes: targets.iter().map(|&i| taxonomy.classes[i].clone()).collect(),
            per_class,
            confusion,
            review_savings_minutes: None,
            metadata: BTreeMap::new(),
        }
    }

    pub fn overall_percent(&self) -> String {
        pct(self.overall_accuracy)
    }

    pub fn target_percent(&self) -> String {
        pct(self.target_recall)
    }
}

/// Scores predictions against ground truth. Every prediction needs a truth
/// record and vice versa; orphans on either side are reported together.
pub fn evaluate(
    predictions: &[VoteResult],
    ground_truth: &[(String, String)],
    taxonomy: &ClassTaxonomy,
) -> Result<EvaluationReport, EvaluationError> {
    let mut truth: HashMap<&str, &str> = HashMap::with_capacity(ground_truth.len());
    for (id, label) in ground_truth {
        if truth.insert(id, label).is_some() {
            return Err(EvaluationError::Duplicate(id.clone()));
        }
    }
    let predicted: BTreeSet<&str> = predictions.iter().map(|p| p.image_id.as_str()).collect();
    if predicted.len() != predictions.len() {
        let mut seen = BTreeSet::new();
        let dup = predictions.iter().find(|p| !seen.insert(&p.image_id)).expect("duplicate exists");
        return Err(EvaluationError::Duplicate(dup.image_id.clone()));
    }
    let without_truth: Vec<String> =
        predicted.iter().filter(|id| !truth.contains_key(*id)).map(|s| (*s).to_owned()).collect();
    let mut without_prediction: Vec<String> =
        truth.keys().filter(|id| !predicted.contains(*id)).map(|s| (*s).to_owned()).collect();
    without_prediction.sort();
    if !without_truth.is_empty() || !without_prediction.is_empty() {
        return Err(EvaluationError::Orphans { without_truth, without_prediction });
    }
    let mut m = ConfusionMatrix::new(taxonomy);
    for p in predictions {
        m.add(truth[p.image_id.as_str()], &p.final_label)?;
    }
    Ok(EvaluationReport::from_confusion(m, taxonomy))
}

/// Minutes of manual review avoided by discarding images with the given labels.
pub fn estimate_review_savings<'a>(
    results: impl IntoIterator<Item = &'a VoteResult>,
    auto_discard_labels: &BTreeSet<String>,
    review_rate_per_minute: f64,
) -> Result<f64, EvaluationError> {
    if !(review_rate_per_minute > 0.0 && review_rate_per_minute.is_finite()) {
        return Err(EvaluationError::BadRate(review_rate_per_minute));
    }
    let discarded = results.into_iter().filter(|r| auto_discard_labels.contains(&r.final_label)).count();
    Ok(discarded as f64 / review_rate_per_minute)
}
