use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::CurationError;
use crate::catalog::Burst;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitStrategy {
    BurstBased,
    CameraHoldout { camera_id: String },
}

impl fmt::Display for SplitStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitStrategy::BurstBased => f.write_str("burst_based"),
            SplitStrategy::CameraHoldout { camera_id } => write!(f, "camera_holdout({camera_id})"),
        }
    }
}

/// Burst → split mapping. Bursts never span splits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub assignments: BTreeMap<String, Split>,
    pub strategy: SplitStrategy,
    pub seed: u64,
}

impl SplitAssignment {
    pub fn split_of(&self, burst_id: &str) -> Option<Split> {
        self.assignments.get(burst_id).copied()
    }

    pub fn bursts_in(&self, split: Split) -> impl Iterator<Item = &str> {
        self.assignments.iter().filter(move |(_, s)| **s == split).map(|(b, _)| b.as_str())
    }

    /// Image ids of `split`, given the bursts the assignment was built from.
    pub fn images_in<'a>(&self, split: Split, bursts: &'a [Burst]) -> BTreeSet<&'a str> {
        bursts
            .iter()
            .filter(|b| self.split_of(&b.burst_id) == Some(split))
            .flat_map(|b| b.image_ids.iter().map(String::as_str))
            .collect()
    }

    /// `burst_id,split` lines after a `#` header naming strategy and seed.
    pub fn to_lines(&self) -> String {
        let mut out = format!("# strategy={} seed={}\n", self.strategy, self.seed);
        for (burst, split) in &self.assignments {
            out.push_str(burst);
            out.push(',');
            out.push_str(split.as_str());
            out.push('\n');
        }
        out
    }

    pub fn from_lines(text: &str) -> Result<Self, CurationError> {
        let mut assignments = BTreeMap::new();
        let mut strategy = SplitStrategy::BurstBased;
        let mut seed = 0;
        for (i, line) in text.lines().enumerate() {
            let err = |message: String| CurationError::SplitFormat { line: i + 1, message };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(header) = line.strip_prefix('#') {
                for kv in header.split_whitespace() {
                    match kv.split_once('=') {
                        Some(("seed", v)) => seed = v.parse().map_err(|_| err(format!("bad seed {v:?}")))?,
                        Some(("strategy", "burst_based")) => strategy = SplitStrategy::BurstBased,
                        Some(("strategy", v)) => {
                            let cam = v
                                .strip_prefix("camera_holdout(")
                                .and_then(|r| r.strip_suffix(')'))
                                .ok_or_else(|| err(format!("bad strategy {v:?}")))?;
                            strategy = SplitStrategy::CameraHoldout { camera_id: cam.to_owned() };
                        }
                        _ => {}
                    }
                }
                continue;
            }
            let (burst, split) = line.split_once(',').ok_or_else(|| err("expected burst_id,split".into()))?;
            let split: Split = split.trim().parse().map_err(err)?;
            if assignments.insert(burst.trim().to_owned(), split).is_some() {
                return Err(err(format!("burst {burst} assigned twice")));
            }
        }
        Ok(Self { assignments, strategy, seed })
    }
}

fn check_fractions(fractions: &[f64]) -> Result<(), CurationError> {
    let sum: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| !f.is_finite() || *f < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(CurationError::BadFractions(fractions.to_vec()));
    }
    Ok(())
}

/// Seeded shuffle of bursts (after sorting by id, so caller order does not
/// matter), then greedy assignment of each burst to the split whose image
/// deficit is currently largest. Splits with a zero fraction receive nothing.
fn assign_greedy(bursts: &[&Burst], fractions: &[f64; 3], seed: u64) -> BTreeMap<String, Split> {
    let mut order: Vec<&Burst> = bursts.to_vec();
    order.sort_by(|a, b| a.burst_id.cmp(&b.burst_id));
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    // Exact arithmetic: fractions in parts per billion, so equal deficits
    // compare equal and ties fall to the lower split index.
    const PPB: i128 = 1_000_000_000;
    let total: i128 = order.iter().map(|b| b.len() as i128).sum();
    let target: Vec<i128> = fractions.iter().map(|f| (f * PPB as f64).round() as i128 * total).collect();
    let mut assigned = [0i128; 3];
    let mut out = BTreeMap::new();
    for burst in order {
        let deficit = |k: usize| target[k] - assigned[k] * PPB;
        let mut best: Option<usize> = None;
        for (k, &f) in fractions.iter().enumerate() {
            if f <= 0.0 {
                continue;
            }
            if best.is_none_or(|b| deficit(k) > deficit(b)) {
                best = Some(k);
            }
        }
        let k = best.expect("at least one positive fraction");
        assigned[k] += burst.len() as i128;
        out.insert(burst.burst_id.clone(), Split::ALL[k]);
    }
    out
}

pub fn burst_split(bursts: &[Burst], fractions: [f64; 3], seed: u64) -> Result<SplitAssignment, CurationError> {
    if bursts.is_empty() {
        return Err(CurationError::NoBursts);
    }
    check_fractions(&fractions)?;
    let refs: Vec<&Burst> = bursts.iter().collect();
    Ok(SplitAssignment {
        assignments: assign_greedy(&refs, &fractions, seed),
        strategy: SplitStrategy::BurstBased,
        seed,
    })
}

/// All bursts of `holdout_camera` go to test; the rest are split between
/// train and val with the burst-based rule.
pub fn camera_holdout_split(
    bursts: &[Burst],
    holdout_camera: &str,
    fractions_train_val: [f64; 2],
    seed: u64,
) -> Result<SplitAssignment, CurationError> {
    if bursts.is_empty() {
        return Err(CurationError::NoBursts);
    }
    if !bursts.iter().any(|b| b.camera_id == holdout_camera) {
        let known: BTreeSet<String> = bursts.iter().map(|b| b.camera_id.clone()).collect();
        return Err(CurationError::UnknownCamera {
            camera: holdout_camera.to_owned(),
            known: known.into_iter().collect(),
        });
    }
    check_fractions(&fractions_train_val)?;
    let (held, rest): (Vec<&Burst>, Vec<&Burst>) = bursts.iter().partition(|b| b.camera_id == holdout_camera);
    let mut assignments = if rest.is_empty() {
        BTreeMap::new()
    } else {
        assign_greedy(&rest, &[fractions_train_val[0], fractions_train_val[1], 0.0], seed)
    };
    for b in held {
        assignments.insert(b.burst_id.clone(), Split::Test);
    }
    Ok(SplitAssignment {
        assignments,
        strategy: SplitStrategy::CameraHoldout { camera_id: holdout_camera.to_owned() },
        seed,
    })
}
