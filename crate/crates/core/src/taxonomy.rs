//! Ordered class vocabularies and the remapping tables between them.
//!
//! Class order is priority order: index 0 is the class an ecologist least
//! wants to miss. The last class is the fallback assigned to frames with no
//! surviving boxes.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Remap target meaning "remove boxes with this label".
pub const DROP: &str = "DROP";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TaxonomyError {
    #[error("taxonomy {name}: {message}")]
    Invalid { name: String, message: String },
    #[error("unknown taxonomy {name:?}; known: {known:?}")]
    Unknown { name: String, known: Vec<String> },
    #[error("no remap path from taxonomy {from} to {to}")]
    NoPath { from: String, to: String },
    #[error("label {label:?} is not covered by the remap into {taxonomy}")]
    Uncovered { label: String, taxonomy: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassTaxonomy {
    pub name: String,
    pub classes: Vec<String>,
    /// Taxonomy whose labels `remap` is keyed by.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    /// Parent label → label of this taxonomy, or [`DROP`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub remap: Option<BTreeMap<String, String>>,
}

impl ClassTaxonomy {
    pub fn new(name: &str, classes: &[&str]) -> Self {
        Self {
            name: name.to_owned(),
            classes: classes.iter().map(|c| (*c).to_owned()).collect(),
            parent: None,
            remap: None,
        }
    }

    pub fn with_remap(mut self, parent: &str, pairs: &[(&str, &str)]) -> Self {
        self.parent = Some(parent.to_owned());
        self.remap = Some(pairs.iter().map(|(a, b)| ((*a).to_owned(), (*b).to_owned())).collect());
        self
    }

    pub fn validate(&self) -> Result<(), TaxonomyError> {
        let invalid = |message: String| TaxonomyError::Invalid { name: self.name.clone(), message };
        if self.classes.is_empty() {
            return Err(invalid("no classes".into()));
        }
        let mut seen = HashSet::new();
        for c in &self.classes {
            if c == DROP {
                return Err(invalid(format!("{DROP} is reserved")));
            }
            if !seen.insert(c) {
                return Err(invalid(format!("duplicate class {c:?}")));
            }
        }
        if let Some(remap) = &self.remap {
            if self.parent.is_none() {
                return Err(invalid("remap without parent".into()));
            }
            for (from, to) in remap {
                if to != DROP && !seen.contains(to) {
                    return Err(invalid(format!("remap {from:?} -> {to:?} targets an unknown class")));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Priority index of `label`; lower is more important.
    pub fn priority(&self, label: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == label)
    }

    pub fn contains(&self, label: &str) -> bool {
        self.priority(label).is_some()
    }

    /// Label for frames without any surviving box.
    pub fn fallback_label(&self) -> &str {
        self.classes.last().expect("validated taxonomy is non-empty")
    }

    /// Classes treated as the target species when scoring recall.
    pub fn target_classes(&self) -> Vec<usize> {
        self.classes
            .iter()
            .enumerate()
            .filter(|(_, c)| c.starts_with("Wildcat"))
            .map(|(i, _)| i)
            .collect()
    }

    /// Remap a parent-taxonomy label. `Ok(None)` means dropped.
    pub fn remap_label(&self, label: &str) -> Result<Option<&str>, TaxonomyError> {
        let remap = self.remap.as_ref().ok_or_else(|| TaxonomyError::Uncovered {
            label: label.to_owned(),
            taxonomy: self.name.clone(),
        })?;
        match remap.get(label) {
            Some(t) if t == DROP => Ok(None),
            Some(t) => Ok(Some(t.as_str())),
            None => Err(TaxonomyError::Uncovered { label: label.to_owned(), taxonomy: self.name.clone() }),
        }
    }

    /// Labels mapped to [`DROP`].
    pub fn dropped_labels(&self) -> Vec<String> {
        self.remap
            .iter()
            .flat_map(|m| m.iter())
            .filter(|(_, t)| t.as_str() == DROP)
            .map(|(f, _)| f.clone())
            .collect()
    }

    pub fn from_toml(text: &str) -> Result<Self, TaxonomyError> {
        let t: ClassTaxonomy = toml::from_str(text).map_err(|e| TaxonomyError::Invalid {
            name: "<document>".into(),
            message: e.to_string(),
        })?;
        t.validate()?;
        Ok(t)
    }
}

/// Named taxonomies plus composed projections between them.
#[derive(Debug, Clone)]
pub struct TaxonomyRegistry {
    by_name: HashMap<String, ClassTaxonomy>,
}

impl Default for TaxonomyRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl TaxonomyRegistry {
    /// The vocabularies used by the experiment grid.
    ///
    /// `five_class` is the annotation vocabulary (wildcat split into daytime
    /// colour and night-time IR); the others are derived from it.
    pub fn builtin() -> Self {
        let five = ClassTaxonomy::new(
            "five_class",
            &["WildcatDay", "WildcatNight", "AnimalOther", "AnimalUnknown", "Background"],
        );
        let four = ClassTaxonomy::new("four_class", &["Wildcat", "AnimalOther", "AnimalUnknown", "Background"])
            .with_remap(
                "five_class",
                &[
                    ("WildcatDay", "Wildcat"),
                    ("WildcatNight", "Wildcat"),
                    ("AnimalOther", "AnimalOther"),
                    ("AnimalUnknown", "AnimalUnknown"),
                    ("Background", "Background"),
                ],
            );
        let two = ClassTaxonomy::new("two_class", &["Wildcat", "NotWildcat"]).with_remap(
            "four_class",
            &[
                ("Wildcat", "Wildcat"),
                ("AnimalOther", "NotWildcat"),
                ("AnimalUnknown", "NotWildcat"),
                ("Background", "NotWildcat"),
            ],
        );
        let two_no_unknown = ClassTaxonomy::new("two_class_no_unknown", &["Wildcat", "NotWildcat"]).with_remap(
            "four_class",
            &[
                ("Wildcat", "Wildcat"),
                ("AnimalOther", "NotWildcat"),
                ("AnimalUnknown", DROP),
                ("Background", "NotWildcat"),
            ],
        );
        let mut reg = Self { by_name: HashMap::new() };
        for t in [five, four, two, two_no_unknown] {
            reg.insert(t).expect("builtin taxonomies are valid");
        }
        reg
    }

    pub fn insert(&mut self, t: ClassTaxonomy) -> Result<(), TaxonomyError> {
        t.validate()?;
        self.by_name.insert(t.name.clone(), t);
        Ok(())
    }

    pub fn load_file(&mut self, path: &Path) -> Result<(), TaxonomyError> {
        let text = std::fs::read_to_string(path).map_err(|e| TaxonomyError::Invalid {
            name: path.display().to_string(),
            message: e.to_string(),
        })?;
        self.insert(ClassTaxonomy::from_toml(&text)?)
    }

    pub fn get(&self, name: &str) -> Result<&ClassTaxonomy, TaxonomyError> {
        self.by_name.get(name).ok_or_else(|| {
            let mut known: Vec<String> = self.by_name.keys().cloned().collect();
            known.sort();
            TaxonomyError::Unknown { name: name.to_owned(), known }
        })
    }

    /// Composed label map from `from` to `to` following `parent` links
    /// upward from `to`. `None` values are dropped labels.
    pub fn projection(&self, from: &str, to: &str) -> Result<BTreeMap<String, Option<String>>, TaxonomyError> {
        let source = self.get(from)?;
        let mut chain = Vec::new();
        let mut cur = self.get(to)?;
        while cur.name != from {
            chain.push(cur);
            let parent = cur.parent.as_deref().ok_or_else(|| TaxonomyError::NoPath {
                from: from.to_owned(),
                to: to.to_owned(),
            })?;
            if chain.len() > self.by_name.len() {
                return Err(TaxonomyError::NoPath { from: from.to_owned(), to: to.to_owned() });
            }
            cur = self.get(parent)?;
        }
        let mut out = BTreeMap::new();
        for label in &source.classes {
            let mut mapped = Some(label.clone());
            for step in chain.iter().rev() {
                mapped = match mapped {
                    Some(l) => step.remap_label(&l)?.map(str::to_owned),
                    None => None,
                };
            }
            out.insert(label.clone(), mapped);
        }
        Ok(out)
    }

    /// Finds a registered taxonomy whose class list equals `labels`.
    pub fn find_by_classes(&self, labels: &[String]) -> Option<&ClassTaxonomy> {
        let mut matches: Vec<&ClassTaxonomy> = self.by_name.values().filter(|t| t.classes == labels).collect();
        matches.sort_by(|a, b| a.name.cmp(&b.name));
        matches.into_iter().next()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_are_priority_ordered() {
        let reg = TaxonomyRegistry::builtin();
        let four = reg.get("four_class").unwrap();
        assert_eq!(four.priority("Wildcat"), Some(0));
        assert_eq!(four.priority("Background"), Some(3));
        assert_eq!(four.fallback_label(), "Background");
        assert_eq!(reg.get("two_class").unwrap().fallback_label(), "NotWildcat");
        assert_eq!(reg.get("five_class").unwrap().target_classes(), [0, 1]);
    }

    #[test]
    fn projection_composes_through_parents() {
        let reg = TaxonomyRegistry::builtin();
        let p = reg.projection("five_class", "two_class").unwrap();
        assert_eq!(p["WildcatNight"].as_deref(), Some("Wildcat"));
        assert_eq!(p["AnimalUnknown"].as_deref(), Some("NotWildcat"));
        let p = reg.projection("five_class", "two_class_no_unknown").unwrap();
        assert_eq!(p["AnimalUnknown"], None);
        let id = reg.projection("four_class", "four_class").unwrap();
        assert!(id.iter().all(|(k, v)| v.as_deref() == Some(k.as_str())));
        assert!(matches!(reg.projection("two_class", "five_class"), Err(TaxonomyError::NoPath { .. })));
    }

    #[test]
    fn validation_catches_bad_documents() {
        assert!(ClassTaxonomy::new("x", &[]).validate().is_err());
        assert!(ClassTaxonomy::new("x", &["A", "A"]).validate().is_err());
        let bad = ClassTaxonomy::new("x", &["A"]).with_remap("p", &[("B", "C")]);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn toml_document_round_trip() {
        let doc = r#"
            name = "custom"
            classes = ["Wildcat", "NotWildcat"]
            parent = "four_class"
            [remap]
            Wildcat = "Wildcat"
            AnimalOther = "NotWildcat"
            AnimalUnknown = "DROP"
            Background = "NotWildcat"
        "#;
        let t = ClassTaxonomy::from_toml(doc).unwrap();
        assert_eq!(t.dropped_labels(), ["AnimalUnknown"]);
        let mut reg = TaxonomyRegistry::builtin();
        reg.insert(t).unwrap();
        assert_eq!(reg.projection("five_class", "custom").unwrap()["AnimalUnknown"], None);
    }
}
