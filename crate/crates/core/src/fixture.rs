//! Synthetic dataset generator: manifest, VOC annotations for every label
//! set, canned detector/classifier tables and a suite file, all derived from
//! one seed. The checked-in `fixtures/synthetic-200` is its default output.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Duration, Utc};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::catalog::{write_voc_xml, Annotation, CameraTrapImage, Catalog, ImageSource, LabelSet, LabeledBox};
use crate::geometry::BoundingBox;
use crate::seed::rng_for;
use crate::stages::{ClassifierTableRow, DetectorTableRow, RegionProposal, Scale};

const FIVE: [&str; 5] = ["WildcatDay", "WildcatNight", "AnimalOther", "AnimalUnknown", "Background"];
const BG: usize = 4;

/// Classifier architectures and how often each ranks the true class first.
pub const FIXTURE_MODELS: [(&str, f64); 3] = [("densenet201", 0.88), ("mobilenet", 0.82), ("resnet152v2", 0.80)];

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureSpec {
    pub seed: u64,
    /// `(camera, bursts, frames per burst)` for captivity footage.
    pub captivity: Vec<(String, usize, usize)>,
    pub wild_cameras: Vec<String>,
    /// Wild image counts: wildcat, other animal, unknown animal, empty.
    pub wild_counts: [usize; 4],
    pub width: u32,
    pub height: u32,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            seed: 42,
            captivity: vec![("C1".into(), 10, 3), ("C2".into(), 10, 3), ("C3".into(), 6, 8)],
            wild_cameras: (1..=4).map(|i| format!("W{i:02}")).collect(),
            wild_counts: [4, 20, 10, 58],
            width: 640,
            height: 480,
        }
    }
}

/// Generated files keyed by path relative to the fixture root.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedFixture {
    pub files: BTreeMap<PathBuf, String>,
}

impl GeneratedFixture {
    pub fn write_to(&self, root: &Path) -> io::Result<()> {
        for (rel, text) in &self.files {
            let path = root.join(rel);
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(path, text)?;
        }
        Ok(())
    }
}

struct Planned {
    image: CameraTrapImage,
    /// Five-class index of the animal in frame; `None` for empty frames.
    class: Option<usize>,
    bbox: Option<BoundingBox>,
    /// Set-2 label when it differs from set 1.
    relabel: Option<usize>,
}

fn random_box(rng: &mut ChaCha8Rng) -> BoundingBox {
    let w = rng.gen_range(0.15..0.4);
    let h = rng.gen_range(0.15..0.4);
    let x = rng.gen_range(0.0..1.0 - w);
    let y = rng.gen_range(0.0..1.0 - h);
    snap(x, y, x + w, y + h)
}

/// Rounds to a 1/1000 grid so boxes print compactly.
fn snap(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
    let r = |v: f64| (v.clamp(0.0, 1.0) * 1000.0).round() / 1000.0;
    BoundingBox::new(r(x0), r(y0), r(x1), r(y1)).expect("generated box is valid")
}

fn jitter(b: &BoundingBox, rng: &mut ChaCha8Rng, amount: f64) -> BoundingBox {
    let [x0, y0, x1, y1]: [f64; 4] = (*b).into();
    let mut d = || rng.gen_range(-amount..amount);
    let (nx0, ny0) = ((x0 + d()).max(0.0), (y0 + d()).max(0.0));
    let (nx1, ny1) = ((x1 + d()).min(1.0), (y1 + d()).min(1.0));
    if nx1 - nx0 < 0.02 || ny1 - ny0 < 0.02 {
        return *b;
    }
    snap(nx0, ny0, nx1, ny1)
}

fn five_class(kind: usize, infrared: bool) -> usize {
    match kind {
        0 if infrared => 1,
        0 => 0,
        1 => 2,
        2 => 3,
        _ => BG,
    }
}

fn plan(spec: &FixtureSpec) -> Vec<Planned> {
    let mut out = Vec::new();
    let start: DateTime<Utc> = DateTime::from_timestamp(1_577_872_800, 0).expect("valid"); // 2020-01-01T10:00:00Z
    let (w, h) = (spec.width, spec.height);
    // Captivity: one animal per burst, cycling wildcat/other/wildcat/unknown/empty.
    let pattern = [0usize, 1, 0, 2, 3];
    for (ci, (cam, n_bursts, frames)) in spec.captivity.iter().enumerate() {
        let mut rng = rng_for(spec.seed, &format!("captivity:{cam}"));
        for b in 0..*n_bursts {
            let kind = pattern[(b + ci) % pattern.len()];
            let infrared = b % 2 == 1;
            let class = (kind != 3).then(|| five_class(kind, infrared));
            let relabel = (kind == 2 && b % 2 == 0).then_some(2);
            let base = random_box(&mut rng);
            let t0 = start + Duration::hours(ci as i64 * 24) + Duration::minutes(b as i64 * 7);
            for f in 0..*frames {
                let image_id = format!("cap-{cam}-{b:02}-{f}");
                out.push(Planned {
                    image: CameraTrapImage {
                        file_ref: format!("images/{image_id}.jpg"),
                        image_id,
                        camera_id: cam.clone(),
                        captured_at: Some(t0 + Duration::seconds(f as i64)),
                        width_px: w,
                        height_px: h,
                        source: ImageSource::Captivity,
                        is_infrared: infrared,
                    },
                    class,
                    bbox: class.map(|_| jitter(&base, &mut rng, 0.02)),
                    relabel,
                });
            }
        }
    }
    // Wild: independent triggers spread over the cameras.
    let mut rng = rng_for(spec.seed, "wild");
    let mut kinds: Vec<usize> = (0..4).flat_map(|k| std::iter::repeat_n(k, spec.wild_counts[k])).collect();
    kinds.shuffle(&mut rng);
    let n_cams = spec.wild_cameras.len().max(1);
    for (i, kind) in kinds.into_iter().enumerate() {
        let cam = &spec.wild_cameras[i % n_cams];
        let infrared = rng.gen_bool(0.4);
        let class = (kind != 3).then(|| five_class(kind, infrared));
        let image_id = format!("wild-{cam}-{:03}", i / n_cams);
        out.push(Planned {
            image: CameraTrapImage {
                file_ref: format!("images/{image_id}.jpg"),
                image_id,
                camera_id: cam.clone(),
                captured_at: Some(start + Duration::days(30) + Duration::minutes((i / n_cams) as i64 * 45)),
                width_px: w,
                height_px: h,
                source: ImageSource::Wild,
                is_infrared: infrared,
            },
            class,
            bbox: class.map(|_| random_box(&mut rng)),
            relabel: None,
        });
    }
    out
}

/// Wild-set label names: day and night wildcats share one name.
fn wild_name(class: usize) -> &'static str {
    if class <= 1 {
        "Wildcat"
    } else {
        FIVE[class]
    }
}

/// Detector output with what each proposal really contains (five-class index).
fn proposals_for(p: &Planned, seed: u64) -> Vec<(RegionProposal, usize)> {
    let mut rng = rng_for(seed, &format!("detector:{}", p.image.image_id));
    let mut out: Vec<(RegionProposal, usize)> = Vec::new();
    let mut used = std::collections::BTreeSet::new();
    let mut conf = |rng: &mut ChaCha8Rng, lo: u32, hi: u32| loop {
        let c = rng.gen_range(lo..hi);
        if used.insert(c) {
            break f64::from(c) / 1000.0;
        }
    };
    let class_name = |rng: &mut ChaCha8Rng| if rng.gen_bool(0.15) { "person" } else { "animal" }.to_owned();
    if let (Some(class), Some(b)) = (p.class, p.bbox) {
        let roll: f64 = rng.gen();
        if roll < 0.9 {
            let c = conf(&mut rng, 450, 990);
            out.push((RegionProposal { bbox: jitter(&b, &mut rng, 0.03), confidence: c, detector_class: class_name(&mut rng) }, class));
        } else if roll < 0.95 {
            let c = conf(&mut rng, 20, 90);
            out.push((RegionProposal { bbox: jitter(&b, &mut rng, 0.05), confidence: c, detector_class: class_name(&mut rng) }, class));
        }
        if rng.gen_bool(0.2) {
            let c = conf(&mut rng, 120, 440);
            out.push((RegionProposal { bbox: random_box(&mut rng), confidence: c, detector_class: class_name(&mut rng) }, BG));
        }
    } else {
        if rng.gen_bool(0.3) {
            let c = conf(&mut rng, 120, 600);
            out.push((RegionProposal { bbox: random_box(&mut rng), confidence: c, detector_class: class_name(&mut rng) }, BG));
        }
        if rng.gen_bool(0.2) {
            let c = conf(&mut rng, 20, 90);
            out.push((RegionProposal { bbox: random_box(&mut rng), confidence: c, detector_class: class_name(&mut rng) }, BG));
        }
    }
    out.sort_by(|a, b| b.0.confidence.total_cmp(&a.0.confidence));
    out
}

/// Five scores in millionths summing to exactly one million, with the
/// winner strictly highest.
fn score_vector(rng: &mut ChaCha8Rng, truth: usize, accuracy: f64) -> Vec<f64> {
    let winner = if rng.gen_bool(accuracy.clamp(0.0, 1.0)) {
        truth
    } else {
        // Confusions stay plausible: wildcats mostly for other animals.
        let others: Vec<usize> = match truth {
            0 | 1 => vec![2, 3, 2, BG],
            2 => vec![3, 0, 1, BG, 3],
            3 => vec![2, BG, 2, 0],
            _ => vec![2, 3, 0, 1, 3],
        };
        *others.choose(rng).expect("non-empty")
    };
    let top: u64 = rng.gen_range(510_000..950_000);
    let rest = 1_000_000 - top;
    let weights: Vec<u64> = (0..4).map(|_| rng.gen_range(1..100)).collect();
    let total: u64 = weights.iter().sum();
    let mut shares: Vec<u64> = weights.iter().map(|w| rest * w / total).collect();
    let assigned: u64 = shares.iter().sum();
    shares[0] += rest - assigned;
    let mut it = shares.into_iter();
    (0..5)
        .map(|c| if c == winner { top } else { it.next().expect("four shares") })
        .map(|m| m as f64 / 1_000_000.0)
        .collect()
}

fn ndjson<T: serde::Serialize>(rows: impl IntoIterator<Item = T>) -> String {
    let mut s = String::new();
    for r in rows {
        s.push_str(&serde_json::to_string(&r).expect("row serializes"));
        s.push('\n');
    }
    s
}

const SUITE: &str = r#"# Experiment grid over the synthetic fixture. Paths are relative to this file.
seed = 42
workers = 1
manifest = "manifest.ndjson"
annotations_dir = "annotations"
no_pixels = true
pixel_source = "none"
split_fractions = [0.7, 0.2, 0.1]
review_rate_per_minute = 25.0
min_confidence = 0.1

[burst_policy]
mode = "gap"
max_gap_secs = 5

[detector]
id = "megadetector-fixture"
kind = "fixture"
config = { table = "detector.ndjson" }

[segmenter]
id = "ellipse"
kind = "fixture"
"#;

const PIPELINE: &str = r#"# Two-class segmented ensemble over the fixture tables.
seed = 42
taxonomy = "two_class"
vote_method = "best_accuracy"
aggregation = "priority"
segmentation = true
pixel_source = "none"

[detector]
id = "megadetector-fixture"
kind = "fixture"
config = { table = "detector.ndjson" }

[segmenter]
id = "ellipse"
kind = "fixture"
"#;

fn model_slots(section: &str) -> String {
    let mut s = String::new();
    for (m, _) in FIXTURE_MODELS {
        let _ = write!(
            s,
            "\n[[{section}]]\nid = \"{m}\"\nkind = \"fixture\"\nconfig = {{ table = \"classifier.ndjson\", model = \"{m}\", labels = \"{}\" }}\n",
            FIVE.join(",")
        );
    }
    s
}

pub fn generate(spec: &FixtureSpec) -> GeneratedFixture {
    let planned = plan(spec);
    let mut files = BTreeMap::new();

    let catalog = Catalog::from_images(planned.iter().map(|p| p.image.clone()).collect(), ".")
        .expect("generated ids are unique");
    files.insert(PathBuf::from("manifest.ndjson"), catalog.to_ndjson());

    for p in &planned {
        let img = &p.image;
        let sets: &[LabelSet] = match img.source {
            ImageSource::Captivity => &[LabelSet::Set1, LabelSet::Set2],
            _ => &[LabelSet::Wild],
        };
        for &set in sets {
            let label = p.class.map(|c| match set {
                LabelSet::Wild => wild_name(c).to_owned(),
                LabelSet::Set2 => FIVE[p.relabel.unwrap_or(c)].to_owned(),
                LabelSet::Set1 => FIVE[c].to_owned(),
            });
            let boxes = match (label, p.bbox) {
                (Some(label), Some(bbox)) => vec![LabeledBox { bbox, label }],
                _ => Vec::new(),
            };
            let ann = Annotation { image_id: img.image_id.clone(), boxes, label_set: set };
            files.insert(
                PathBuf::from(format!("annotations/{set}/{}.xml", img.image_id)),
                write_voc_xml(&ann, img),
            );
        }
    }

    let mut det_rows = Vec::new();
    let mut cls_rows = Vec::new();
    for p in &planned {
        let props = proposals_for(p, spec.seed);
        // Captive animals look like the training data; wild frames do not.
        let shift = if p.image.source == ImageSource::Wild { 0.85 } else { 1.0 };
        for (m, acc) in FIXTURE_MODELS {
            let mut rng = rng_for(spec.seed, &format!("scores:{m}:{}", p.image.image_id));
            for (i, (_, truth)) in props.iter().enumerate() {
                for masked in [false, true] {
                    let a = (acc + if masked { 0.05 } else { 0.0 }) * shift;
                    cls_rows.push(ClassifierTableRow {
                        model: m.into(),
                        image_id: p.image.image_id.clone(),
                        scale: Scale::Local { box_index: i },
                        masked,
                        scores: score_vector(&mut rng, *truth, a),
                    });
                }
            }
            cls_rows.push(ClassifierTableRow {
                model: m.into(),
                image_id: p.image.image_id.clone(),
                scale: Scale::Global,
                masked: false,
                scores: score_vector(&mut rng, p.class.unwrap_or(BG), (acc - 0.15) * shift),
            });
        }
        det_rows.push(DetectorTableRow { image_id: p.image.image_id.clone(), proposals: props.into_iter().map(|(r, _)| r).collect() });
    }
    files.insert(PathBuf::from("detector.ndjson"), ndjson(det_rows));
    files.insert(PathBuf::from("classifier.ndjson"), ndjson(cls_rows));

    files.insert(PathBuf::from("experiments.toml"), format!("{SUITE}{}", model_slots("models")));
    files.insert(PathBuf::from("pipeline.toml"), format!("{PIPELINE}{}", model_slots("local_models")));
    GeneratedFixture { files }
}
