//! DialogRE-format ingestion, the relation inventory, and the seen/unseen
//! split.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::text;

/// The 36 substantive DialogRE relation identifiers.
pub const INVENTORY: [&str; 36] = [
    "per:positive_impression",
    "per:negative_impression",
    "per:acquaintance",
    "per:alumni",
    "per:boss",
    "per:subordinate",
    "per:client",
    "per:dates",
    "per:friends",
    "per:girl/boyfriend",
    "per:neighbor",
    "per:roommate",
    "per:children",
    "per:other_family",
    "per:parents",
    "per:siblings",
    "per:spouse",
    "per:place_of_residence",
    "per:place_of_birth",
    "per:visited_place",
    "per:origin",
    "per:employee/member_of",
    "per:schools_attended",
    "per:works",
    "per:age",
    "per:date_of_birth",
    "per:major",
    "per:place_of_work",
    "per:title",
    "per:alternate_names",
    "per:pet",
    "gpe:residents_of_place",
    "gpe:births_in_place",
    "gpe:visitors_of_place",
    "org:employees/members",
    "org:students",
];

/// Seen relations used for training.
pub const DEFAULT_SEEN: [&str; 20] = [
    "per:positive_impression",
    "per:client",
    "per:origin",
    "per:works",
    "per:place_of_work",
    "per:title",
    "per:alternate_names",
    "per:acquaintance",
    "per:alumni",
    "per:friends",
    "per:girl/boyfriend",
    "per:neighbor",
    "per:roommate",
    "per:boss",
    "per:children",
    "gpe:residents_of_place",
    "per:place_of_birth",
    "per:visited_place",
    "per:employee/member_of",
    "org:students",
];

/// Relations held out of training.
pub const DEFAULT_UNSEEN: [&str; 16] = [
    "per:subordinate",
    "gpe:visitors_of_place",
    "per:place_of_residence",
    "per:schools_attended",
    "per:parents",
    "gpe:births_in_place",
    "org:employees/members",
    "per:dates",
    "per:other_family",
    "per:siblings",
    "per:spouse",
    "per:negative_impression",
    "per:age",
    "per:date_of_birth",
    "per:major",
    "per:pet",
];

/// Pairs of closely related relations that must fall on opposite sides of
/// the split.
pub const SIMILAR_PAIRS: [(&str, &str); 8] = [
    ("per:positive_impression", "per:negative_impression"),
    ("per:boss", "per:subordinate"),
    ("per:children", "per:parents"),
    ("gpe:residents_of_place", "per:place_of_residence"),
    ("per:place_of_birth", "gpe:births_in_place"),
    ("org:students", "per:schools_attended"),
    ("per:visited_place", "gpe:visitors_of_place"),
    ("per:employee/member_of", "org:employees/members"),
];

/// Label used by DialogRE for pairs without a substantive relation.
pub const NO_RELATION: &str = "unanswerable";

const PREFIXES: [&str; 3] = ["per:", "org:", "gpe:"];

/// Maps spelling variants found in released DialogRE files to the
/// inventory spelling.
pub fn canonical_relation(id: &str) -> &str {
    match id {
        "per:employee_or_member_of" => "per:employee/member_of",
        "org:employees_or_members" => "org:employees/members",
        other => other,
    }
}

pub fn in_inventory(id: &str) -> bool {
    INVENTORY.contains(&id)
}

/// Lowercase natural-language phrase for an inventory relation.
pub fn verbalize_relation(relation_id: &str) -> Result<String> {
    let id = canonical_relation(relation_id);
    if !in_inventory(id) {
        return Err(Error::UnknownRelation(relation_id.to_string()));
    }
    Ok(verbalize_any(id).expect("inventory ids are well-formed"))
}

/// Applies the verbalization rule to an arbitrary `prefix:name` identifier.
///
/// Returns `None` when the identifier has no name part to verbalize.
pub fn verbalize_any(relation_id: &str) -> Option<String> {
    let lower = relation_id.trim().to_lowercase();
    let name = PREFIXES
        .iter()
        .find_map(|p| lower.strip_prefix(p))
        .or_else(|| lower.split_once(':').map(|(_, n)| n))
        .unwrap_or(&lower);
    let words: Vec<&str> = name
        .split(|c: char| c == '_' || c == '/' || c.is_whitespace())
        .filter(|w| !w.is_empty())
        .collect();
    if words.is_empty() {
        None
    } else {
        Some(words.join(" "))
    }
}

/// One conversation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    pub turns: Vec<String>,
    pub flat_text: String,
    /// Character offset of each turn within `flat_text`.
    pub turn_offsets: Vec<usize>,
}

impl Dialogue {
    pub fn new(id: impl Into<String>, turns: Vec<String>) -> Result<Self> {
        let id = id.into();
        if turns.is_empty() {
            return Err(Error::InvalidDialogue {
                id,
                message: "no turns".into(),
            });
        }
        let turns: Vec<String> = turns.iter().map(|t| normalize_turn(t)).collect();
        if let Some(i) = turns.iter().position(|t| t.trim().is_empty()) {
            return Err(Error::InvalidDialogue {
                id,
                message: format!("turn {i} is empty"),
            });
        }
        let mut flat_text = String::new();
        let mut turn_offsets = Vec::with_capacity(turns.len());
        let mut chars = 0usize;
        for (i, t) in turns.iter().enumerate() {
            if i > 0 {
                flat_text.push(' ');
                chars += 1;
            }
            turn_offsets.push(chars);
            flat_text.push_str(t);
            chars += t.chars().count();
        }
        Ok(Self {
            id,
            turns,
            flat_text,
            turn_offsets,
        })
    }

    pub fn char_len(&self) -> usize {
        self.flat_text.chars().count()
    }

    /// First case-insensitive occurrence of `needle`, as a character span.
    pub fn find(&self, needle: &str) -> Option<(usize, usize)> {
        text::find_case_insensitive(&self.flat_text, needle)
    }
}

/// Rewrites a leading "Speaker N:" marker to the short "SN:" form.
pub fn normalize_turn(turn: &str) -> String {
    let t = turn.trim();
    if let Some(rest) = t.strip_prefix("Speaker ") {
        let digits: String = rest.chars().take_while(|c| c.is_ascii_digit()).collect();
        if !digits.is_empty() {
            let after = &rest[digits.len()..];
            if after.starts_with(':') {
                return format!("S{digits}{after}");
            }
        }
    }
    t.to_string()
}

/// Rewrites "Speaker N" argument strings to "SN"; other arguments pass through.
pub fn normalize_argument(arg: &str) -> String {
    let a = arg.trim();
    if let Some(rest) = a.strip_prefix("Speaker ") {
        if !rest.is_empty() && rest.chars().all(|c| c.is_ascii_digit()) {
            return format!("S{rest}");
        }
    }
    a.to_string()
}

/// One annotated argument pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationInstance {
    pub dialogue_id: String,
    pub subject: String,
    pub object: String,
    pub relations: Vec<String>,
    /// Parallel to `relations`; empty strings mean "no trigger annotated".
    pub triggers: Vec<String>,
}

impl RelationInstance {
    /// Trigger of the first listed relation that has one.
    pub fn first_trigger(&self) -> Option<&str> {
        self.triggers
            .iter()
            .map(|t| t.as_str())
            .find(|t| !t.trim().is_empty())
    }

    pub fn trigger_for(&self, relation: &str) -> Option<&str> {
        self.relations
            .iter()
            .position(|r| r == relation)
            .and_then(|i| self.triggers.get(i))
            .map(|t| t.as_str())
            .filter(|t| !t.trim().is_empty())
    }

    pub fn gold_set(&self) -> BTreeSet<String> {
        self.relations.iter().cloned().collect()
    }
}

/// Partition of the relation inventory into training-visible and held-out
/// relations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationSplit {
    pub seen: BTreeSet<String>,
    pub unseen: BTreeSet<String>,
    /// Optional natural-language descriptions overriding the default
    /// verbalization of a relation identifier.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub descriptions: BTreeMap<String, String>,
}

impl RelationSplit {
    pub fn new<I, J, S, T>(seen: I, unseen: J) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        J: IntoIterator<Item = T>,
        S: Into<String>,
        T: Into<String>,
    {
        let split = Self {
            seen: seen.into_iter().map(Into::into).collect(),
            unseen: unseen.into_iter().map(Into::into).collect(),
            descriptions: BTreeMap::new(),
        };
        split.validate()?;
        Ok(split)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(r) = self.seen.intersection(&self.unseen).next() {
            return Err(Error::InvalidSplit(format!("`{r}` is both seen and unseen")));
        }
        for r in self.seen.iter().chain(&self.unseen) {
            if verbalize_any(r).is_none() && !self.descriptions.contains_key(r) {
                return Err(Error::InvalidSplit(format!("`{r}` has no verbalizable name")));
            }
        }
        Ok(())
    }

    /// All relations in the split, sorted.
    pub fn all(&self) -> Vec<String> {
        self.seen.union(&self.unseen).cloned().collect()
    }

    pub fn contains(&self, relation: &str) -> bool {
        self.seen.contains(relation) || self.unseen.contains(relation)
    }

    /// Text injected after `[CLS]` for a candidate relation.
    pub fn describe(&self, relation: &str) -> Result<String> {
        if let Some(d) = self.descriptions.get(relation) {
            return Ok(d.clone());
        }
        verbalize_any(relation).ok_or_else(|| Error::UnknownRelation(relation.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut split: Self = serde_json::from_str(&text)?;
        split.seen = split.seen.iter().map(|r| canonical_relation(r).to_string()).collect();
        split.unseen = split.unseen.iter().map(|r| canonical_relation(r).to_string()).collect();
        split.validate()?;
        Ok(split)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// The seen/unseen assignment used for the zero-shot experiments.
pub fn default_split() -> RelationSplit {
    RelationSplit::new(DEFAULT_SEEN, DEFAULT_UNSEEN).expect("default split is valid")
}

/// Loaded corpus: dialogues plus their annotated pairs, in file order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    pub dialogues: Vec<Dialogue>,
    pub instances: Vec<RelationInstance>,
}

impl Corpus {
    pub fn dialogue(&self, id: &str) -> Option<&Dialogue> {
        // ids are record indices for loaded corpora
        id.parse::<usize>()
            .ok()
            .and_then(|i| self.dialogues.get(i))
            .filter(|d| d.id == id)
            .or_else(|| self.dialogues.iter().find(|d| d.id == id))
    }

    pub fn relation_counts(&self) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for inst in &self.instances {
            for r in &inst.relations {
                *counts.entry(r.clone()).or_insert(0) += 1;
            }
        }
        counts
    }
}

#[derive(Deserialize)]
struct RawAnnotation {
    x: String,
    y: String,
    r: Vec<String>,
    #[serde(default)]
    t: Vec<String>,
}

/// Loads a DialogRE JSON file, validating relations against the inventory.
pub fn load_dialogre(path: &Path) -> Result<Corpus> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dialogre(&text, &|r| in_inventory(r))
}

/// Loads a DialogRE JSON file, accepting any relation the predicate allows.
pub fn load_dialogre_with(path: &Path, accept: &dyn Fn(&str) -> bool) -> Result<Corpus> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dialogre(&text, accept)
}

pub fn parse_dialogre(text: &str, accept: &dyn Fn(&str) -> bool) -> Result<Corpus> {
    let root: Value = serde_json::from_str(text).map_err(|e| Error::Parse {
        index: 0,
        message: format!("not valid JSON: {e}"),
    })?;
    let records = root.as_array().ok_or_else(|| Error::Parse {
        index: 0,
        message: "top level is not an array".into(),
    })?;

    let mut corpus = Corpus::default();
    for (index, record) in records.iter().enumerate() {
        let parse_err = |message: String| Error::Parse { index, message };
        let pair = record
            .as_array()
            .filter(|a| a.len() == 2)
            .ok_or_else(|| parse_err("expected a two-element [turns, annotations] array".into()))?;
        let turns: Vec<String> =
            serde_json::from_value(pair[0].clone()).map_err(|e| parse_err(format!("turns: {e}")))?;
        let annotations: Vec<RawAnnotation> = serde_json::from_value(pair[1].clone())
            .map_err(|e| parse_err(format!("annotations: {e}")))?;

        let dialogue = Dialogue::new(index.to_string(), turns).map_err(|e| parse_err(e.to_string()))?;

        for (ai, ann) in annotations.into_iter().enumerate() {
            if !ann.t.is_empty() && ann.t.len() != ann.r.len() {
                return Err(parse_err(format!(
                    "annotation {ai}: {} relations but {} triggers",
                    ann.r.len(),
                    ann.t.len()
                )));
            }
            let mut relations = Vec::new();
            let mut triggers = Vec::new();
            for (ri, rel) in ann.r.iter().enumerate() {
                let rel = canonical_relation(rel.trim());
                if rel == NO_RELATION {
                    continue;
                }
                if !accept(rel) {
                    return Err(Error::UnknownRelation(rel.to_string()));
                }
                if relations.iter().any(|r| r == rel) {
                    continue;
                }
                let trig = ann.t.get(ri).map(|t| t.trim().to_string()).unwrap_or_default();
                if !trig.is_empty() && dialogue.find(&trig).is_none() {
                    return Err(parse_err(format!(
                        "annotation {ai}: trigger `{trig}` not found in dialogue"
                    )));
                }
                relations.push(rel.to_string());
                triggers.push(trig);
            }
            if relations.is_empty() {
                continue;
            }
            corpus.instances.push(RelationInstance {
                dialogue_id: dialogue.id.clone(),
                subject: normalize_argument(&ann.x),
                object: normalize_argument(&ann.y),
                relations,
                triggers,
            });
        }
        corpus.dialogues.push(dialogue);
    }
    Ok(corpus)
}

/// Serializes a corpus back to the DialogRE JSON layout.
pub fn to_dialogre_json(corpus: &Corpus) -> Value {
    let records: Vec<Value> = corpus
        .dialogues
        .iter()
        .map(|d| {
            let anns: Vec<Value> = corpus
                .instances
                .iter()
                .filter(|i| i.dialogue_id == d.id)
                .map(|i| {
                    serde_json::json!({
                        "x": i.subject,
                        "y": i.object,
                        "r": i.relations,
                        "t": i.triggers,
                    })
                })
                .collect();
            serde_json::json!([d.turns, anns])
        })
        .collect();
    Value::Array(records)
}

pub fn save_dialogre(path: &Path, corpus: &Corpus) -> Result<()> {
    let text = serde_json::to_string_pretty(&to_dialogre_json(corpus))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}
