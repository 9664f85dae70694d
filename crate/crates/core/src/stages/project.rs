use super::{Classifier, ClassifierInput, StageError};
use crate::taxonomy::{ClassTaxonomy, TaxonomyRegistry};

/// Serves a classifier trained on a finer vocabulary under a coarser one:
/// scores of merged classes are summed, dropped classes are removed and the
/// remainder renormalized.
pub struct ProjectingClassifier {
    inner: Box<dyn Classifier>,
    source_len: usize,
    /// Source class index → target class index, `None` when dropped.
    bins: Vec<Option<usize>>,
    target: ClassTaxonomy,
}

impl ProjectingClassifier {
    pub fn new(inner: Box<dyn Classifier>, registry: &TaxonomyRegistry, target: &ClassTaxonomy) -> Result<Self, StageError> {
        let labels = inner.declared_labels().ok_or_else(|| {
            StageError::Config(format!("classifier {} does not declare labels; cannot project", inner.id()))
        })?;
        let source = registry.find_by_classes(&labels).ok_or_else(|| {
            StageError::Config(format!("classifier {} labels {labels:?} match no known taxonomy", inner.id()))
        })?;
        let map = registry
            .projection(&source.name, &target.name)
            .map_err(|e| StageError::Config(format!("classifier {}: {e}", inner.id())))?;
        let bins = labels
            .iter()
            .map(|l| map[l].as_deref().map(|t| target.priority(t).expect("projection lands in target")))
            .collect();
        Ok(Self { inner, source_len: labels.len(), bins, target: target.clone() })
    }
}

impl Classifier for ProjectingClassifier {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn version(&self) -> String {
        format!("{}+projected:{}", self.inner.version(), self.target.name)
    }

    fn needs_pixels(&self) -> bool {
        self.inner.needs_pixels()
    }

    fn declared_classes(&self) -> Option<usize> {
        Some(self.target.len())
    }

    fn declared_labels(&self) -> Option<Vec<String>> {
        Some(self.target.classes.clone())
    }

    fn score(&self, input: &ClassifierInput<'_>, _n: usize) -> Result<Vec<f64>, StageError> {
        let raw = self.inner.score(input, self.source_len)?;
        if raw.len() != self.source_len {
            return Err(StageError::Protocol {
                backend: self.inner.id().to_owned(),
                message: format!("{} scores for {} classes", raw.len(), self.source_len),
                line: format!("{raw:?}"),
            });
        }
        let mut out = vec![0.0; self.target.len()];
        for (v, bin) in raw.iter().zip(&self.bins) {
            if let Some(b) = bin {
                out[*b] += v;
            }
        }
        let kept: f64 = out.iter().sum();
        if kept <= 0.0 {
            return Err(StageError::Backend {
                backend: self.inner.id().to_owned(),
                message: format!("all score mass falls on dropped classes for {}", input.image_id),
                diagnostics: String::new(),
            });
        }
        Ok(out.into_iter().map(|v| v / kept).collect())
    }
}
