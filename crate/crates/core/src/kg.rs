//! Tuple store for knowledge-graph relations with one-hop and two-hop bridge
//! queries between term sets.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum KgError {
    #[error("{path}:{line}: expected `head<TAB>relation<TAB>tail`, got {found:?}")]
    Malformed { path: String, line: usize, found: String },
    #[error("empty {field} in tuple")]
    EmptyField { field: &'static str },
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
}

/// Provenance of a tuple. Two-hop joins only use edges whose source allows
/// them (open-IE style graphs contribute one-hop relations only).
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct KgSource {
    pub id: String,
    pub two_hop: bool,
}

impl KgSource {
    pub fn new(id: impl Into<String>, two_hop: bool) -> Self {
        Self { id: id.into(), two_hop }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct KgTuple {
    pub head: String,
    pub relation: String,
    pub tail: String,
    pub source: Arc<KgSource>,
}

/// A relation path from a term of one image to a term of the next.
///
/// Field order gives the deterministic candidate order: head, relation,
/// tail, then the optional two-hop continuation.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Bridge {
    pub head: String,
    pub relation: String,
    pub tail: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub via: Option<SecondHop>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SecondHop {
    pub middle: String,
    pub relation: String,
}

impl Bridge {
    pub fn one_hop(head: &str, relation: &str, tail: &str) -> Self {
        Self {
            head: head.into(),
            relation: relation.into(),
            tail: tail.into(),
            via: None,
        }
    }

    pub fn two_hop(head: &str, first: &str, middle: &str, second: &str, tail: &str) -> Self {
        Self {
            head: head.into(),
            relation: first.into(),
            tail: tail.into(),
            via: Some(SecondHop {
                middle: middle.into(),
                relation: second.into(),
            }),
        }
    }

    /// Terms inserted into the story path: `[head, r, tail]` or
    /// `[head, r1, middle, r2, tail]`.
    pub fn terms(&self) -> Vec<String> {
        let mut out = vec![self.head.clone(), self.relation.clone()];
        if let Some(v) = &self.via {
            out.push(v.middle.clone());
            out.push(v.relation.clone());
        }
        out.push(self.tail.clone());
        out
    }
}

#[derive(Clone, Debug)]
struct Edge {
    relation: String,
    tail: String,
    two_hop: bool,
}

/// Forward and pair indexes over a deduplicated tuple set. Immutable
/// queries only need `&self`, so a built index can be shared across threads.
#[derive(Clone, Debug, Default)]
pub struct RelationIndex {
    tuples: Vec<KgTuple>,
    seen: HashSet<(String, String, String, String)>,
    forward: HashMap<String, Vec<Edge>>,
    pairs: HashMap<(String, String), Vec<String>>,
}

impl RelationIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    pub fn tuples(&self) -> &[KgTuple] {
        &self.tuples
    }

    /// Adds a tuple; returns `false` for a duplicate of an existing
    /// `(head, relation, tail, source)`.
    pub fn insert(&mut self, head: &str, relation: &str, tail: &str, source: &Arc<KgSource>) -> Result<bool, KgError> {
        for (field, v) in [("head", head), ("relation", relation), ("tail", tail)] {
            if v.is_empty() {
                return Err(KgError::EmptyField { field });
            }
        }
        let key = (
            head.to_string(),
            relation.to_string(),
            tail.to_string(),
            source.id.clone(),
        );
        if !self.seen.insert(key) {
            return Ok(false);
        }
        self.tuples.push(KgTuple {
            head: head.into(),
            relation: relation.into(),
            tail: tail.into(),
            source: Arc::clone(source),
        });
        self.forward.entry(head.into()).or_default().push(Edge {
            relation: relation.into(),
            tail: tail.into(),
            two_hop: source.two_hop,
        });
        self.pairs
            .entry((head.into(), tail.into()))
            .or_default()
            .push(relation.into());
        Ok(true)
    }

    /// Parses `head<TAB>relation<TAB>tail` lines. Blank lines are skipped.
    /// Returns the number of new tuples added.
    pub fn load_str(&mut self, text: &str, origin: &str, source: &Arc<KgSource>) -> Result<usize, KgError> {
        let mut added = 0;
        for (i, line) in text.lines().enumerate() {
            let line = line.strip_suffix('\r').unwrap_or(line);
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let malformed = || KgError::Malformed {
                path: origin.to_string(),
                line: i + 1,
                found: line.to_string(),
            };
            if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
                return Err(malformed());
            }
            if self.insert(fields[0], fields[1], fields[2], source)? {
                added += 1;
            }
        }
        Ok(added)
    }

    pub fn load_tsv(&mut self, path: &Path, source: KgSource) -> Result<usize, KgError> {
        let text = fs::read_to_string(path).map_err(|e| KgError::Io(path.display().to_string(), e))?;
        self.load_str(&text, &path.display().to_string(), &Arc::new(source))
    }

    /// Relations `r` with `(head, r, tail)` present, sorted and distinct.
    pub fn one_hop(&self, head: &str, tail: &str) -> Vec<String> {
        let Some(rels) = self.pairs.get(&(head.to_string(), tail.to_string())) else {
            return Vec::new();
        };
        let set: BTreeSet<&String> = rels.iter().collect();
        set.into_iter().cloned().collect()
    }

    /// `(r1, middle, r2)` with `(head, r1, middle)` and `(middle, r2, tail)`
    /// both from two-hop eligible sources. Middles equal to either endpoint
    /// are excluded. Sorted and distinct.
    pub fn two_hop(&self, head: &str, tail: &str) -> Vec<(String, String, String)> {
        let mut out = BTreeSet::new();
        let Some(first) = self.forward.get(head) else {
            return Vec::new();
        };
        for e1 in first.iter().filter(|e| e.two_hop) {
            if e1.tail == head || e1.tail == tail {
                continue;
            }
            let Some(second) = self.forward.get(&e1.tail) else {
                continue;
            };
            for e2 in second.iter().filter(|e| e.two_hop && e.tail == tail) {
                out.insert((e1.relation.clone(), e1.tail.clone(), e2.relation.clone()));
            }
        }
        out.into_iter().collect()
    }

    /// Every bridge from a term in `terms_a` to a term in `terms_b`, sorted.
    pub fn enumerate_bridges<A, B>(&self, terms_a: &[A], terms_b: &[B], allow_two_hop: bool) -> Vec<Bridge>
    where
        A: AsRef<str>,
        B: AsRef<str>,
    {
        let mut out = BTreeSet::new();
        for a in terms_a {
            for b in terms_b {
                let (a, b) = (a.as_ref(), b.as_ref());
                for r in self.one_hop(a, b) {
                    out.insert(Bridge::one_hop(a, &r, b));
                }
                if allow_two_hop {
                    for (r1, m, r2) in self.two_hop(a, b) {
                        out.insert(Bridge::two_hop(a, &r1, &m, &r2, b));
                    }
                }
            }
        }
        out.into_iter().collect()
    }
}
