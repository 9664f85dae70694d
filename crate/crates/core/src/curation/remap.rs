use super::CurationError;
use crate::catalog::{Annotation, CameraTrapImage, LabelSet, LabeledBox};
use crate::taxonomy::{ClassTaxonomy, TaxonomyError};

/// Rewrites box labels through `target.remap`, removing dropped boxes.
/// Annotations left without boxes are kept; they read as the fallback class.
pub fn remap_taxonomy(annotations: &[Annotation], target: &ClassTaxonomy) -> Result<Vec<Annotation>, CurationError> {
    annotations
        .iter()
        .map(|a| {
            let mut boxes = Vec::with_capacity(a.boxes.len());
            for b in &a.boxes {
                if let Some(label) = target.remap_label(&b.label)? {
                    boxes.push(LabeledBox { bbox: b.bbox, label: label.to_owned() });
                }
            }
            Ok(Annotation { image_id: a.image_id.clone(), boxes, label_set: a.label_set })
        })
        .collect()
}

/// Lifts an annotation into the five-class vocabulary. Wild-set `Wildcat`
/// boxes become `WildcatNight` or `WildcatDay` by the frame's IR flag.
pub fn to_base_vocabulary(annotation: &Annotation, image: &CameraTrapImage) -> Annotation {
    let boxes = annotation
        .boxes
        .iter()
        .map(|b| {
            let label = match (annotation.label_set, b.label.as_str()) {
                (LabelSet::Wild, "Wildcat") if image.is_infrared => "WildcatNight".to_owned(),
                (LabelSet::Wild, "Wildcat") => "WildcatDay".to_owned(),
                _ => b.label.clone(),
            };
            LabeledBox { bbox: b.bbox, label }
        })
        .collect();
    Annotation { image_id: annotation.image_id.clone(), boxes, label_set: annotation.label_set }
}

/// Image-level label: the highest-priority box label, else the fallback class.
pub fn image_label<'t>(annotation: &Annotation, taxonomy: &'t ClassTaxonomy) -> Result<&'t str, TaxonomyError> {
    let mut best: Option<usize> = None;
    for b in &annotation.boxes {
        let p = taxonomy.priority(&b.label).ok_or_else(|| TaxonomyError::Uncovered {
            label: b.label.clone(),
            taxonomy: taxonomy.name.clone(),
        })?;
        best = Some(best.map_or(p, |q: usize| q.min(p)));
    }
    Ok(best.map_or(taxonomy.fallback_label(), |p| taxonomy.classes[p].as_str()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::ImageSource;
    use crate::geometry::BoundingBox;
    use crate::taxonomy::{TaxonomyRegistry, DROP};
    use proptest::prelude::*;

    const FOUR: [&str; 4] = ["Wildcat", "AnimalOther", "AnimalUnknown", "Background"];

    fn ann(id: &str, labels: &[&str]) -> Annotation {
        Annotation {
            image_id: id.into(),
            boxes: labels
                .iter()
                .enumerate()
                .map(|(i, l)| LabeledBox {
                    bbox: BoundingBox::new(0.0, 0.0, 0.1 + 0.01 * i as f64, 0.2).unwrap(),
                    label: (*l).into(),
                })
                .collect(),
            label_set: LabelSet::Wild,
        }
    }

    fn count(anns: &[Annotation], label: &str) -> usize {
        anns.iter().flat_map(|a| &a.boxes).filter(|b| b.label == label).count()
    }

    #[test]
    fn four_to_two_class_keeps_wildcats() {
        let reg = TaxonomyRegistry::builtin();
        let input = vec![ann("a", &["Wildcat", "AnimalOther"]), ann("b", &["AnimalUnknown"]), ann("c", &["Wildcat"])];
        let out = remap_taxonomy(&input, reg.get("two_class").unwrap()).unwrap();
        assert_eq!(count(&out, "Wildcat"), 2);
        assert_eq!(count(&out, "NotWildcat"), 2);
    }

    #[test]
    fn identity_remap_is_identity() {
        let ident = ClassTaxonomy::new("ident", &FOUR).with_remap("four_class", &FOUR.map(|l| (l, l)));
        let input = vec![ann("a", &["Wildcat", "AnimalOther"]), ann("b", &[])];
        assert_eq!(remap_taxonomy(&input, &ident).unwrap(), input);
    }

    #[test]
    fn drop_removes_exactly_the_dropped_boxes() {
        let reg = TaxonomyRegistry::builtin();
        let mut input: Vec<Annotation> = (0..10).map(|i| ann(&format!("u{i}"), &["AnimalUnknown"])).collect();
        input.push(ann("w", &["Wildcat", "AnimalUnknown", "AnimalOther"]));
        let out = remap_taxonomy(&input, reg.get("two_class_no_unknown").unwrap()).unwrap();
        assert_eq!(out.len(), input.len(), "emptied annotations are retained");
        assert_eq!(out.iter().map(|a| a.boxes.len()).sum::<usize>(), 2);
        assert!(out[0].boxes.is_empty());
        let two = reg.get("two_class").unwrap();
        assert_eq!(image_label(&out[0], two).unwrap(), "NotWildcat");
    }

    #[test]
    fn uncovered_label_named_in_error() {
        let partial = ClassTaxonomy::new("p", &["Wildcat", "Other"]).with_remap("four_class", &[("Wildcat", "Wildcat")]);
        let err = remap_taxonomy(&[ann("a", &["AnimalOther"])], &partial).unwrap_err();
        assert!(err.to_string().contains("AnimalOther"), "{err}");
    }

    #[test]
    fn wild_wildcat_split_by_infrared() {
        let mut img = CameraTrapImage {
            image_id: "w".into(),
            camera_id: "W1".into(),
            captured_at: None,
            file_ref: String::new(),
            width_px: 10,
            height_px: 10,
            source: ImageSource::Wild,
            is_infrared: true,
        };
        let a = ann("w", &["Wildcat", "AnimalOther"]);
        assert_eq!(to_base_vocabulary(&a, &img).boxes[0].label, "WildcatNight");
        img.is_infrared = false;
        assert_eq!(to_base_vocabulary(&a, &img).boxes[0].label, "WildcatDay");
        assert_eq!(to_base_vocabulary(&a, &img).boxes[1].label, "AnimalOther");
    }

    proptest! {
        #[test]
        fn remap_conserves_or_drops_counts(labels in proptest::collection::vec(proptest::collection::vec(0usize..4, 0..5), 0..20), drop_idx in 0usize..4) {
            let anns: Vec<Annotation> = labels.iter().enumerate()
                .map(|(i, ls)| ann(&format!("i{i}"), &ls.iter().map(|&k| FOUR[k]).collect::<Vec<_>>()))
                .collect();
            let total: usize = anns.iter().map(|a| a.boxes.len()).sum();
            let pairs: Vec<(&str, &str)> = FOUR.iter().map(|l| (*l, if *l == "Wildcat" { "Wildcat" } else { "NotWildcat" })).collect();
            let keep = ClassTaxonomy::new("k", &["Wildcat", "NotWildcat"]).with_remap("four_class", &pairs);
            prop_assert_eq!(remap_taxonomy(&anns, &keep).unwrap().iter().map(|a| a.boxes.len()).sum::<usize>(), total);

            let mut dropping = pairs.clone();
            dropping[drop_idx].1 = DROP;
            let dropper = ClassTaxonomy::new("d", &["Wildcat", "NotWildcat"]).with_remap("four_class", &dropping);
            let dropped = count(&anns, FOUR[drop_idx]);
            prop_assert_eq!(remap_taxonomy(&anns, &dropper).unwrap().iter().map(|a| a.boxes.len()).sum::<usize>(), total - dropped);
        }
    }
}
