use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{CameraTrapImage, CatalogError};

/// How consecutive frames of one camera are grouped into activations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum BurstPolicy {
    /// A new burst starts when the gap to the previous frame exceeds
    /// `max_gap_secs`.
    Gap { max_gap_secs: i64 },
    /// Every `count` consecutive frames form a burst. Cameras missing from
    /// `per_camera` use `default_count`.
    FixedCount { per_camera: BTreeMap<String, usize>, default_count: usize },
}

impl Default for BurstPolicy {
    fn default() -> Self {
        BurstPolicy::Gap { max_gap_secs: 5 }
    }
}

/// The images of one camera activation, in capture order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Burst {
    pub burst_id: String,
    pub camera_id: String,
    pub image_ids: Vec<String>,
    /// Set for a trailing fixed-count burst with fewer frames than configured.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub partial: bool,
}

impl Burst {
    pub fn len(&self) -> usize {
        self.image_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image_ids.is_empty()
    }
}

/// Partitions `images` into bursts. Output is ordered by camera, then by the
/// first timestamp of each burst.
pub fn group_bursts(images: &[CameraTrapImage], policy: &BurstPolicy) -> Result<Vec<Burst>, CatalogError> {
    let mut by_camera: BTreeMap<&str, Vec<&CameraTrapImage>> = BTreeMap::new();
    for img in images {
        if img.captured_at.is_none() {
            return Err(CatalogError::MissingTimestamp(img.image_id.clone()));
        }
        by_camera.entry(img.camera_id.as_str()).or_default().push(img);
    }

    let mut bursts = Vec::new();
    for (camera, mut frames) in by_camera {
        frames.sort_by(|a, b| (a.captured_at, &a.image_id).cmp(&(b.captured_at, &b.image_id)));
        let groups: Vec<(Vec<&CameraTrapImage>, bool)> = match policy {
            BurstPolicy::Gap { max_gap_secs } => {
                let mut groups: Vec<Vec<&CameraTrapImage>> = Vec::new();
                for f in frames {
                    let split = match groups.last().and_then(|g| g.last()) {
                        Some(prev) => {
                            let gap = f.captured_at.unwrap() - prev.captured_at.unwrap();
                            gap.num_seconds() > *max_gap_secs
                        }
                        None => true,
                    };
                    if split {
                        groups.push(vec![f]);
                    } else {
                        groups.last_mut().unwrap().push(f);
                    }
                }
                groups.into_iter().map(|g| (g, false)).collect()
            }
            BurstPolicy::FixedCount { per_camera, default_count } => {
                let count = per_camera.get(camera).copied().unwrap_or(*default_count).max(1);
                frames
                    .chunks(count)
                    .map(|c| (c.to_vec(), c.len() < count))
                    .collect()
            }
        };
        for (i, (group, partial)) in groups.into_iter().enumerate() {
            bursts.push(Burst {
                burst_id: format!("{camera}-b{i:04}"),
                camera_id: camera.to_owned(),
                image_ids: group.iter().map(|f| f.image_id.clone()).collect(),
                partial,
            });
        }
    }
    Ok(bursts)
}
