//! Precomputed object-feature records, one JSONL line per image.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FEATURE_DIM: usize = 2048;
pub const MAX_OBJECTS: usize = 25;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("story {story_id} image {image_index}: object {object} has {found} feature values, expected {expected}")]
    FeatureDim {
        story_id: String,
        image_index: usize,
        object: usize,
        found: usize,
        expected: usize,
    },
    #[error("story {story_id}: confidence {value} outside [0, 1]")]
    Confidence { story_id: String, value: f64 },
    #[error("story {story_id}: image indices {found:?} are not consecutive from 0")]
    NonConsecutive { story_id: String, found: Vec<usize> },
    #[error("story {story_id} image {image_index}: no objects")]
    EmptySlot { story_id: String, image_index: usize },
    #[error("{0}: {1}")]
    Json(String, #[source] serde_json::Error),
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectedObject {
    pub confidence: f64,
    pub feature: Vec<f64>,
}

/// Objects detected in one image, highest confidence first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectFeatureSet {
    pub image_index: usize,
    pub objects: Vec<DetectedObject>,
}

impl ObjectFeatureSet {
    /// Sorts by descending confidence (stable) and keeps the top `limit`.
    pub fn new(image_index: usize, mut objects: Vec<DetectedObject>, limit: usize) -> Self {
        objects.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
        objects.truncate(limit);
        Self { image_index, objects }
    }
}

/// The ordered images of one story.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageSequence {
    pub story_id: String,
    pub slots: Vec<ObjectFeatureSet>,
}

impl ImageSequence {
    pub fn validate(&self, feature_dim: usize) -> Result<(), FeatureError> {
        let found: Vec<usize> = self.slots.iter().map(|s| s.image_index).collect();
        if found.iter().enumerate().any(|(i, &t)| i != t) {
            return Err(FeatureError::NonConsecutive {
                story_id: self.story_id.clone(),
                found,
            });
        }
        for slot in &self.slots {
            if slot.objects.is_empty() {
                return Err(FeatureError::EmptySlot {
                    story_id: self.story_id.clone(),
                    image_index: slot.image_index,
                });
            }
            for (i, o) in slot.objects.iter().enumerate() {
                if o.feature.len() != feature_dim {
                    return Err(FeatureError::FeatureDim {
                        story_id: self.story_id.clone(),
                        image_index: slot.image_index,
                        object: i,
                        found: o.feature.len(),
                        expected: feature_dim,
                    });
                }
                if !(0.0..=1.0).contains(&o.confidence) {
                    return Err(FeatureError::Confidence {
                        story_id: self.story_id.clone(),
                        value: o.confidence,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn num_objects(&self) -> usize {
        self.slots.iter().map(|s| s.objects.len()).sum()
    }
}

/// One line of the object-feature file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub story_id: String,
    pub image_index: usize,
    pub objects: Vec<DetectedObject>,
}

/// Groups records by story, orders slots by image index, keeps the `limit`
/// most confident objects per image and validates each sequence.
pub fn assemble(records: Vec<FeatureRecord>, limit: usize) -> Result<BTreeMap<String, ImageSequence>, FeatureError> {
    let mut by_story: BTreeMap<String, Vec<FeatureRecord>> = BTreeMap::new();
    for r in records {
        by_story.entry(r.story_id.clone()).or_default().push(r);
    }
    let mut out = BTreeMap::new();
    for (story_id, mut recs) in by_story {
        recs.sort_by_key(|r| r.image_index);
        let slots = recs
            .into_iter()
            .map(|r| ObjectFeatureSet::new(r.image_index, r.objects, limit))
            .collect();
        let seq = ImageSequence {
            story_id: story_id.clone(),
            slots,
        };
        seq.validate(FEATURE_DIM)?;
        out.insert(story_id, seq);
    }
    Ok(out)
}

pub fn read_feature_file(path: &Path, limit: usize) -> Result<BTreeMap<String, ImageSequence>, FeatureError> {
    let text = fs::read_to_string(path).map_err(|e| FeatureError::Io(path.display().to_string(), e))?;
    let records = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| FeatureError::Json(format!("{}:{}", path.display(), i + 1), e))
        })
        .collect::<Result<Vec<FeatureRecord>, _>>()?;
    assemble(records, limit)
}

pub fn write_feature_file(path: &Path, records: &[FeatureRecord]) -> Result<(), FeatureError> {
    let io = |e| FeatureError::Io(path.display().to_string(), e);
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(io)?);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| FeatureError::Json(path.display().to_string(), e))?;
        writeln!(f, "{line}").map_err(io)?;
    }
    f.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obj(conf: f64, dim: usize) -> DetectedObject {
        DetectedObject {
            confidence: conf,
            feature: vec![conf; dim],
        }
    }

    #[test]
    fn keeps_the_most_confident_objects() {
        let objects: Vec<_> = (0..40).map(|i| obj(i as f64 / 40.0, 4)).collect();
        let slot = ObjectFeatureSet::new(0, objects, MAX_OBJECTS);
        assert_eq!(slot.objects.len(), 25);
        let confs: Vec<f64> = slot.objects.iter().map(|o| o.confidence).collect();
        let expected: Vec<f64> = (15..40).rev().map(|i| i as f64 / 40.0).collect();
        assert_eq!(confs, expected);
    }

    #[test]
    fn assembles_and_orders_slots() {
        let recs = vec![
            FeatureRecord {
                story_id: "s".into(),
                image_index: 1,
                objects: vec![obj(0.5, FEATURE_DIM)],
            },
            FeatureRecord {
                story_id: "s".into(),
                image_index: 0,
                objects: vec![obj(0.9, FEATURE_DIM)],
            },
        ];
        let seqs = assemble(recs, MAX_OBJECTS).unwrap();
        let s = &seqs["s"];
        assert_eq!(s.slots[0].image_index, 0);
        assert_eq!(s.slots[1].objects[0].confidence, 0.5);
    }

    #[test]
    fn wrong_feature_dimension_is_rejected() {
        let recs = vec![FeatureRecord {
            story_id: "s".into(),
            image_index: 0,
            objects: vec![obj(0.5, 10)],
        }];
        assert!(matches!(
            assemble(recs, MAX_OBJECTS),
            Err(FeatureError::FeatureDim { found: 10, .. })
        ));
    }

    #[test]
    fn gaps_in_image_indices_are_rejected() {
        let recs = vec![FeatureRecord {
            story_id: "s".into(),
            image_index: 1,
            objects: vec![obj(0.5, FEATURE_DIM)],
        }];
        assert!(matches!(
            assemble(recs, MAX_OBJECTS),
            Err(FeatureError::NonConsecutive { .. })
        ));
    }
}
