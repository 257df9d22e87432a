//! State hierarchy, training classes, and the per-object admissible-state map.
//!
//! The taxonomy is loaded from a JSON document with three core arrays
//! (`fine_states`, `classes`, `objects`) plus the intermediate tree nodes.
//! Every structural invariant is checked at load time, so a [`Taxonomy`]
//! value is always valid and immutable afterwards.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// The canonical taxonomy shipped with the crate.
pub const CANONICAL_TAXONOMY: &str = include_str!("../data/taxonomy.json");

/// Number of fine states in the canonical hierarchy.
pub const FINE_STATE_COUNT: usize = 22;
/// Number of fine states promoted to training classes.
pub const SELECTED_STATE_COUNT: usize = 10;
/// The training classes in canonical index order.
pub const CLASS_NAMES: [&str; 11] = [
    "whole", "peeled", "floured", "sliced", "diced", "grated", "julienne", "juice", "creamy", "mixed", "other",
];
/// Name of the catch-all class.
pub const OTHER: &str = "other";

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error("cannot read taxonomy file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("taxonomy parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("duplicate {kind} `{name}`")]
    Duplicate { kind: &'static str, name: String },
    #[error("expected {expected} {kind}, found {found}")]
    Count {
        kind: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("fine state `{name}` has parent `{parent}`, which is not a hierarchy node")]
    Orphan { name: String, parent: String },
    #[error("fine state `{name}` is attached to more than one parent ({parents})")]
    MultipleParents { name: String, parents: String },
    #[error("hierarchy node `{name}`: {reason}")]
    BadNode { name: String, reason: String },
    #[error("class `{name}`: {reason}")]
    BadClass { name: String, reason: String },
    #[error("object `{name}`: {reason}")]
    BadObject { name: String, reason: String },
    #[error("unknown object `{0}`")]
    UnknownObject(String),
    #[error("unknown state class `{0}`")]
    UnknownClass(String),
}

/// A leaf of the state hierarchy.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FineState {
    pub name: String,
    pub parent: String,
    pub selected: bool,
}

/// One of the 11 training labels.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StateClass {
    pub name: String,
    pub index: usize,
}

impl fmt::Display for StateClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectCategory {
    pub name: String,
    /// Admissible classes in canonical index order.
    pub admissible_states: Vec<StateClass>,
    pub state_count: usize,
    pub aliases: Vec<String>,
    pub note: Option<String>,
}

// ---------------------------------------------------------------------------
// file schema

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaxonomyFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<String>,
    pub roots: Vec<String>,
    #[serde(default)]
    pub nodes: Vec<NodeEntry>,
    pub fine_states: Vec<FineState>,
    pub classes: Vec<ClassEntry>,
    pub objects: Vec<ObjectEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeEntry {
    pub name: String,
    pub parent: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub name: String,
    pub index: usize,
    #[serde(default)]
    pub fine_members: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectEntry {
    pub name: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub aliases: Vec<String>,
    pub admissible: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// A validated state taxonomy.
#[derive(Clone, Debug, PartialEq)]
pub struct Taxonomy {
    source: TaxonomyFile,
    classes: Vec<StateClass>,
    objects: Vec<ObjectCategory>,
    fine_to_class: BTreeMap<String, usize>,
    alias_index: BTreeMap<String, usize>,
    digest: String,
}

impl Taxonomy {
    /// The taxonomy bundled with the crate.
    pub fn canonical() -> Self {
        Self::from_json(CANONICAL_TAXONOMY).expect("bundled taxonomy is valid")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TaxonomyError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| TaxonomyError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, TaxonomyError> {
        let file: TaxonomyFile = serde_json::from_str(text)?;
        let mut taxonomy = Self::validate(file)?;
        taxonomy.digest = hex::encode(Sha256::digest(text.as_bytes()));
        Ok(taxonomy)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TaxonomyError> {
        let path = path.as_ref();
        let text = self.to_json();
        std::fs::write(path, text).map_err(|source| TaxonomyError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.source).expect("taxonomy serializes") + "\n"
    }

    /// SHA-256 of the document this taxonomy was parsed from.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn file(&self) -> &TaxonomyFile {
        &self.source
    }

    pub fn fine_states(&self) -> &[FineState] {
        &self.source.fine_states
    }

    /// The 11 training classes in canonical index order.
    pub fn classes(&self) -> &[StateClass] {
        &self.classes
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn class(&self, name: &str) -> Result<&StateClass, TaxonomyError> {
        self.classes
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| TaxonomyError::UnknownClass(name.to_string()))
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c.name == name)
    }

    /// Training class a fine state (or synonym) maps to. Unmapped fine
    /// states fall into `other`.
    pub fn class_of_fine_state(&self, fine: &str) -> Option<&StateClass> {
        if let Some(&idx) = self.fine_to_class.get(fine) {
            return Some(&self.classes[idx]);
        }
        if self.source.fine_states.iter().any(|f| f.name == fine) {
            return self.classes.iter().find(|c| c.name == OTHER);
        }
        None
    }

    pub fn objects(&self) -> &[ObjectCategory] {
        &self.objects
    }

    /// Looks up an object by canonical name or alias.
    pub fn object(&self, name: &str) -> Result<&ObjectCategory, TaxonomyError> {
        self.alias_index
            .get(name)
            .map(|&i| &self.objects[i])
            .ok_or_else(|| TaxonomyError::UnknownObject(name.to_string()))
    }

    pub fn admissible_states(&self, object: &str) -> Result<&[StateClass], TaxonomyError> {
        Ok(&self.object(object)?.admissible_states)
    }

    /// Whether `state` may label an image of `object`. `other` is always allowed.
    pub fn is_admissible(&self, object: &str, state: &str) -> Result<bool, TaxonomyError> {
        if state == OTHER {
            return Ok(true);
        }
        Ok(self.admissible_states(object)?.iter().any(|c| c.name == state))
    }

    fn validate(file: TaxonomyFile) -> Result<Self, TaxonomyError> {
        // tree: roots -> nodes -> fine states
        let mut node_names = BTreeSet::new();
        for root in &file.roots {
            if !node_names.insert(root.clone()) {
                return Err(TaxonomyError::Duplicate {
                    kind: "hierarchy node",
                    name: root.clone(),
                });
            }
        }
        let roots: BTreeSet<_> = file.roots.iter().cloned().collect();
        let mut node_parents: BTreeMap<&str, &str> = BTreeMap::new();
        for node in &file.nodes {
            if !node_names.insert(node.name.clone()) {
                return Err(TaxonomyError::Duplicate {
                    kind: "hierarchy node",
                    name: node.name.clone(),
                });
            }
            node_parents.insert(&node.name, &node.parent);
        }
        for node in &file.nodes {
            if !node_names.contains(&node.parent) {
                return Err(TaxonomyError::BadNode {
                    name: node.name.clone(),
                    reason: format!("unknown parent `{}`", node.parent),
                });
            }
            // walk to a root; a cycle never reaches one
            let mut cursor = node.name.as_str();
            let mut steps = 0;
            while !roots.contains(cursor) {
                cursor = node_parents[cursor];
                steps += 1;
                if steps > node_parents.len() {
                    return Err(TaxonomyError::BadNode {
                        name: node.name.clone(),
                        reason: "parent chain does not reach a root".into(),
                    });
                }
            }
        }

        let mut fine_parents: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for fine in &file.fine_states {
            fine_parents.entry(&fine.name).or_default().push(&fine.parent);
            if node_names.contains(&fine.name) {
                return Err(TaxonomyError::BadNode {
                    name: fine.name.clone(),
                    reason: "name used both as hierarchy node and fine state".into(),
                });
            }
        }
        for (name, parents) in &fine_parents {
            if parents.len() > 1 {
                let distinct: BTreeSet<_> = parents.iter().collect();
                if distinct.len() > 1 {
                    return Err(TaxonomyError::MultipleParents {
                        name: name.to_string(),
                        parents: parents.join(", "),
                    });
                }
                return Err(TaxonomyError::Duplicate {
                    kind: "fine state",
                    name: name.to_string(),
                });
            }
        }
        for fine in &file.fine_states {
            if !node_names.contains(&fine.parent) {
                return Err(TaxonomyError::Orphan {
                    name: fine.name.clone(),
                    parent: fine.parent.clone(),
                });
            }
        }
        if file.fine_states.len() != FINE_STATE_COUNT {
            return Err(TaxonomyError::Count {
                kind: "fine states",
                expected: FINE_STATE_COUNT,
                found: file.fine_states.len(),
            });
        }
        let selected: BTreeSet<&str> = file
            .fine_states
            .iter()
            .filter(|f| f.selected)
            .map(|f| f.name.as_str())
            .collect();
        if selected.len() != SELECTED_STATE_COUNT {
            return Err(TaxonomyError::Count {
                kind: "selected fine states",
                expected: SELECTED_STATE_COUNT,
                found: selected.len(),
            });
        }

        // classes
        if file.classes.len() != CLASS_NAMES.len() {
            return Err(TaxonomyError::Count {
                kind: "classes",
                expected: CLASS_NAMES.len(),
                found: file.classes.len(),
            });
        }
        let mut by_index: Vec<Option<&ClassEntry>> = vec![None; CLASS_NAMES.len()];
        let mut seen_names = BTreeSet::new();
        for class in &file.classes {
            if !seen_names.insert(class.name.as_str()) {
                return Err(TaxonomyError::Duplicate {
                    kind: "class",
                    name: class.name.clone(),
                });
            }
            let slot = by_index.get_mut(class.index).ok_or_else(|| TaxonomyError::BadClass {
                name: class.name.clone(),
                reason: format!("index {} outside 0..{}", class.index, CLASS_NAMES.len()),
            })?;
            if slot.is_some() {
                return Err(TaxonomyError::BadClass {
                    name: class.name.clone(),
                    reason: format!("index {} already taken", class.index),
                });
            }
            *slot = Some(class);
        }
        let mut classes = Vec::with_capacity(CLASS_NAMES.len());
        let mut fine_to_class = BTreeMap::new();
        for (index, entry) in by_index.into_iter().enumerate() {
            let entry = entry.expect("bijection checked above");
            if entry.name != CLASS_NAMES[index] {
                return Err(TaxonomyError::BadClass {
                    name: entry.name.clone(),
                    reason: format!("index {index} must be `{}`", CLASS_NAMES[index]),
                });
            }
            let is_other = entry.name == OTHER;
            if is_other && !entry.fine_members.is_empty() {
                return Err(TaxonomyError::BadClass {
                    name: entry.name.clone(),
                    reason: "`other` must not list fine members".into(),
                });
            }
            if !is_other && !selected.contains(entry.name.as_str()) {
                return Err(TaxonomyError::BadClass {
                    name: entry.name.clone(),
                    reason: "no selected fine state with this name".into(),
                });
            }
            if !is_other && !entry.fine_members.iter().any(|m| m == &entry.name) {
                return Err(TaxonomyError::BadClass {
                    name: entry.name.clone(),
                    reason: "fine_members must include the class's own fine state".into(),
                });
            }
            for member in &entry.fine_members {
                if !fine_parents.contains_key(member.as_str()) {
                    return Err(TaxonomyError::BadClass {
                        name: entry.name.clone(),
                        reason: format!("unknown fine member `{member}`"),
                    });
                }
                if member != &entry.name && selected.contains(member.as_str()) {
                    return Err(TaxonomyError::BadClass {
                        name: entry.name.clone(),
                        reason: format!("selected fine state `{member}` belongs to its own class"),
                    });
                }
                if fine_to_class.insert(member.clone(), index).is_some() {
                    return Err(TaxonomyError::Duplicate {
                        kind: "class fine member",
                        name: member.clone(),
                    });
                }
            }
            classes.push(StateClass {
                name: entry.name.clone(),
                index,
            });
        }

        // objects
        let mut objects = Vec::with_capacity(file.objects.len());
        let mut alias_index = BTreeMap::new();
        for (i, entry) in file.objects.iter().enumerate() {
            for key in std::iter::once(&entry.name).chain(entry.aliases.iter()) {
                if alias_index.insert(key.clone(), i).is_some() {
                    return Err(TaxonomyError::Duplicate {
                        kind: "object name or alias",
                        name: key.clone(),
                    });
                }
            }
            let mut members = BTreeSet::new();
            for state in &entry.admissible {
                let index = CLASS_NAMES
                    .iter()
                    .position(|c| c == state)
                    .ok_or_else(|| TaxonomyError::BadObject {
                        name: entry.name.clone(),
                        reason: format!("admissible state `{state}` is not a class"),
                    })?;
                if !members.insert(index) {
                    return Err(TaxonomyError::BadObject {
                        name: entry.name.clone(),
                        reason: format!("admissible state `{state}` listed twice"),
                    });
                }
            }
            let admissible_states: Vec<StateClass> = members.into_iter().map(|i| classes[i].clone()).collect();
            objects.push(ObjectCategory {
                name: entry.name.clone(),
                state_count: admissible_states.len(),
                admissible_states,
                aliases: entry.aliases.clone(),
                note: entry.note.clone(),
            });
        }
        let covered: BTreeSet<usize> = objects
            .iter()
            .flat_map(|o| o.admissible_states.iter().map(|c| c.index))
            .collect();
        if !objects.is_empty() && covered.len() != classes.len() {
            let missing: Vec<_> = classes
                .iter()
                .filter(|c| !covered.contains(&c.index))
                .map(|c| c.name.as_str())
                .collect();
            return Err(TaxonomyError::BadClass {
                name: missing.join(", "),
                reason: "not admissible for any object".into(),
            });
        }

        Ok(Taxonomy {
            source: file,
            classes,
            objects,
            fine_to_class,
            alias_index,
            digest: String::new(),
        })
    }
}
