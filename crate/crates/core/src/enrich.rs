//! Term paths and their knowledge-graph enrichment: insert one bridge group
//! between adjacent images and keep whichever path the term LM finds least
//! perplexing.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::{Bridge, RelationIndex};
use crate::lm::{perplexity, LanguageModel, TermSequence};

pub const DEFAULT_CANDIDATE_CAP: usize = 500;

#[derive(Debug, Error)]
pub enum EnrichError {
    #[error("no candidate paths to select from")]
    NoCandidates,
    #[error("story {story_id}: {detail}")]
    InvalidPath { story_id: String, detail: String },
}

/// Where a group of a term path came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GroupOrigin {
    /// Distilled from image `index`.
    Slot { index: usize },
    /// Inserted between images `after` and `after + 1`.
    Bridge { after: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BridgeRecord {
    pub after_slot: usize,
    #[serde(flatten)]
    pub bridge: Bridge,
}

/// Ordered term groups, one per story sentence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermPath {
    #[serde(default)]
    pub story_id: String,
    pub groups: Vec<Vec<String>>,
    pub origins: Vec<GroupOrigin>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bridge: Option<BridgeRecord>,
}

impl TermPath {
    /// An unenriched path: group `i` comes from image `i`.
    pub fn from_groups(story_id: impl Into<String>, groups: Vec<Vec<String>>) -> Self {
        let origins = (0..groups.len()).map(|index| GroupOrigin::Slot { index }).collect();
        Self {
            story_id: story_id.into(),
            groups,
            origins,
            bridge: None,
        }
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn is_enriched(&self) -> bool {
        self.bridge.is_some()
    }

    /// Inserts the bridge's terms as a new group right after slot `after`.
    pub fn with_bridge(&self, after: usize, bridge: Bridge) -> Result<Self, EnrichError> {
        let invalid = |detail: String| EnrichError::InvalidPath {
            story_id: self.story_id.clone(),
            detail,
        };
        if self.bridge.is_some() {
            return Err(invalid("path already carries a bridge".into()));
        }
        if after + 1 >= self.groups.len() {
            return Err(invalid(format!(
                "no slot pair ({after}, {}) in a {}-group path",
                after + 1,
                self.groups.len()
            )));
        }
        if !self.groups[after].contains(&bridge.head) || !self.groups[after + 1].contains(&bridge.tail) {
            return Err(invalid(format!(
                "bridge {} -> {} does not connect slots {after} and {}",
                bridge.head,
                bridge.tail,
                after + 1
            )));
        }
        let mut out = self.clone();
        out.groups.insert(after + 1, bridge.terms());
        out.origins.insert(after + 1, GroupOrigin::Bridge { after });
        out.bridge = Some(BridgeRecord {
            after_slot: after,
            bridge,
        });
        Ok(out)
    }

    /// The path with its bridge group removed.
    pub fn without_bridge(&self) -> Self {
        let mut out = self.clone();
        if let Some(pos) = out.origins.iter().position(|o| matches!(o, GroupOrigin::Bridge { .. })) {
            out.groups.remove(pos);
            out.origins.remove(pos);
        }
        out.bridge = None;
        out
    }

    pub fn linearize(&self) -> TermSequence {
        TermSequence::from_groups(&self.groups)
    }

    pub fn validate(&self) -> Result<(), EnrichError> {
        let invalid = |detail: String| EnrichError::InvalidPath {
            story_id: self.story_id.clone(),
            detail,
        };
        if self.origins.len() != self.groups.len() {
            return Err(invalid(format!(
                "{} origins for {} groups",
                self.origins.len(),
                self.groups.len()
            )));
        }
        let bridges: Vec<usize> = self
            .origins
            .iter()
            .enumerate()
            .filter(|(_, o)| matches!(o, GroupOrigin::Bridge { .. }))
            .map(|(i, _)| i)
            .collect();
        match (&self.bridge, bridges.as_slice()) {
            (None, []) => Ok(()),
            (Some(rec), [pos]) => {
                let pos = *pos;
                let ok = pos > 0
                    && pos + 1 < self.groups.len()
                    && self.origins[pos - 1] == GroupOrigin::Slot { index: rec.after_slot }
                    && self.origins[pos + 1]
                        == GroupOrigin::Slot {
                            index: rec.after_slot + 1,
                        }
                    && self.groups[pos] == rec.bridge.terms()
                    && self.groups[pos - 1].contains(&rec.bridge.head)
                    && self.groups[pos + 1].contains(&rec.bridge.tail);
                if ok {
                    Ok(())
                } else {
                    Err(invalid("bridge group does not sit between its source slots".into()))
                }
            }
            _ => Err(invalid(format!("{} bridge groups", bridges.len()))),
        }
    }
}

/// A scored candidate path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnrichmentCandidate {
    pub path: TermPath,
    pub perplexity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnrichConfig {
    pub cap: usize,
    pub allow_two_hop: bool,
}

impl Default for EnrichConfig {
    fn default() -> Self {
        Self {
            cap: DEFAULT_CANDIDATE_CAP,
            allow_two_hop: true,
        }
    }
}

/// The base path followed by one candidate per bridge between each pair of
/// adjacent slots, ordered by slot then bridge. At most `cap` paths in total;
/// the base is always first.
pub fn build_candidates(
    base: &TermPath,
    index: &RelationIndex,
    config: &EnrichConfig,
) -> Result<Vec<TermPath>, EnrichError> {
    let mut out = vec![base.clone()];
    let limit = config.cap.max(1);
    'slots: for k in 0..base.groups.len().saturating_sub(1) {
        let (a, b) = (&base.groups[k], &base.groups[k + 1]);
        if a.is_empty() || b.is_empty() {
            continue;
        }
        for bridge in index.enumerate_bridges(a, b, config.allow_two_hop) {
            if out.len() >= limit {
                break 'slots;
            }
            out.push(base.with_bridge(k, bridge)?);
        }
    }
    Ok(out)
}

/// Lowest-perplexity candidate; ties go to the earlier candidate.
pub fn select_best<M>(candidates: &[TermPath], lm: &M) -> Result<EnrichmentCandidate, EnrichError>
where
    M: LanguageModel + Sync + ?Sized,
{
    let scores: Vec<f64> = candidates.par_iter().map(|c| perplexity(lm, &c.linearize())).collect();
    let best = scores
        .iter()
        .enumerate()
        .min_by(|(i, a), (j, b)| a.total_cmp(b).then(i.cmp(j)))
        .map(|(i, _)| i)
        .ok_or(EnrichError::NoCandidates)?;
    Ok(EnrichmentCandidate {
        path: candidates[best].clone(),
        perplexity: scores[best],
    })
}

pub fn enrich<M>(
    base: &TermPath,
    index: &RelationIndex,
    lm: &M,
    config: &EnrichConfig,
) -> Result<EnrichmentCandidate, EnrichError>
where
    M: LanguageModel + Sync + ?Sized,
{
    let candidates = build_candidates(base, index, config)?;
    select_best(&candidates, lm)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::kg::KgSource;

    fn groups(spec: &[&[&str]]) -> Vec<Vec<String>> {
        spec.iter().map(|g| g.iter().map(|s| s.to_string()).collect()).collect()
    }

    fn base() -> TermPath {
        TermPath::from_groups(
            "s1",
            groups(&[
                &["family_NOUN"],
                &["graduates_NOUN", "hats_NOUN"],
                &["diplomas_NOUN"],
                &["party_NOUN"],
                &["cake_NOUN"],
            ]),
        )
    }

    #[test]
    fn no_cross_slot_tuples_leaves_only_the_base() {
        let idx = RelationIndex::new();
        let c = build_candidates(&base(), &idx, &EnrichConfig::default()).unwrap();
        assert_eq!(c, vec![base()]);
    }

    #[test]
    fn single_bridge_inserts_one_group() {
        let mut idx = RelationIndex::new();
        let src = Arc::new(KgSource::new("vg", true));
        idx.insert("graduates_NOUN", "Arriving_Frame", "diplomas_NOUN", &src)
            .unwrap();
        let c = build_candidates(&base(), &idx, &EnrichConfig::default()).unwrap();
        assert_eq!(c.len(), 2);
        let enriched = &c[1];
        assert_eq!(enriched.len(), 6);
        assert_eq!(
            enriched.groups[2],
            vec!["graduates_NOUN", "Arriving_Frame", "diplomas_NOUN"]
        );
        assert_eq!(enriched.origins[2], GroupOrigin::Bridge { after: 1 });
        enriched.validate().unwrap();
        assert_eq!(enriched.without_bridge(), base());
    }

    #[test]
    fn cap_bounds_the_total_and_keeps_the_base() {
        let mut idx = RelationIndex::new();
        let src = Arc::new(KgSource::new("vg", true));
        for r in ["r1", "r2", "r3", "r4"] {
            idx.insert("family_NOUN", r, "hats_NOUN", &src).unwrap();
        }
        let cfg = EnrichConfig {
            cap: 3,
            allow_two_hop: true,
        };
        let c = build_candidates(&base(), &idx, &cfg).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c[0], base());
        assert_eq!(c[1].bridge.as_ref().unwrap().bridge.relation, "r1");
        assert_eq!(c[2].bridge.as_ref().unwrap().bridge.relation, "r2");
    }

    #[test]
    fn bridges_must_connect_their_slots() {
        let b = Bridge::one_hop("cake_NOUN", "r", "family_NOUN");
        assert!(base().with_bridge(0, b).is_err());
        let b = Bridge::one_hop("party_NOUN", "r", "cake_NOUN");
        assert!(base().with_bridge(4, b).is_err());
    }

    #[test]
    fn select_best_on_empty_input_is_an_error() {
        let lm = crate::lm::NGramLm::train(
            &[vec!["<bos>".to_string(), "<eos>".to_string()]],
            crate::lm::NGramConfig::default(),
        )
        .unwrap();
        assert!(matches!(select_best(&[], &lm), Err(EnrichError::NoCandidates)));
    }

    #[test]
    fn path_json_shape() {
        let p = base()
            .with_bridge(1, Bridge::one_hop("graduates_NOUN", "Arriving_Frame", "diplomas_NOUN"))
            .unwrap();
        let v: serde_json::Value = serde_json::to_value(&p).unwrap();
        assert_eq!(v["origins"][2]["kind"], "bridge");
        assert_eq!(v["bridge"]["after_slot"], 1);
        assert_eq!(v["bridge"]["relation"], "Arriving_Frame");
        let back: TermPath = serde_json::from_value(v).unwrap();
        assert_eq!(back, p);
    }
}
