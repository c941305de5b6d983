//! Candidate scoring under the three inference modes, ranking, and the
//! prediction dump.

use std::cmp::Ordering;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::corpus::{Corpus, Dialogue, RelationSplit};
use crate::error::{Error, Result};
use crate::model::{KeySource, Model, ModelKind};
use crate::text::char_slice;
use crate::trigger_head::Span;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    PredictedTrigger,
    GeneralEmbedding,
    GoldTrigger,
}

impl InferenceMode {
    pub const ALL: [InferenceMode; 3] = [
        InferenceMode::PredictedTrigger,
        InferenceMode::GeneralEmbedding,
        InferenceMode::GoldTrigger,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            InferenceMode::PredictedTrigger => "predicted_trigger",
            InferenceMode::GeneralEmbedding => "general_embedding",
            InferenceMode::GoldTrigger => "gold_trigger",
        }
    }
}

impl fmt::Display for InferenceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InferenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown inference mode `{s}`")))
    }
}

/// A (dialogue, subject, object) question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub dialogue_id: String,
    pub subject: String,
    pub object: String,
    #[serde(default)]
    pub gold_relations: Vec<String>,
    /// Annotated trigger; `Some("")` means annotated as trigger-less.
    #[serde(default)]
    pub gold_trigger: Option<String>,
}

/// One query per annotated pair, identified by its pair index.
pub fn queries_from_corpus(corpus: &Corpus) -> Vec<Query> {
    corpus
        .instances
        .iter()
        .enumerate()
        .map(|(i, inst)| Query {
            id: i.to_string(),
            dialogue_id: inst.dialogue_id.clone(),
            subject: inst.subject.clone(),
            object: inst.object.clone(),
            gold_relations: inst.relations.clone(),
            gold_trigger: Some(inst.first_trigger().unwrap_or("").to_string()),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationScore {
    pub relation_id: String,
    pub probability: f64,
    /// Token span used as keys (absent in general-embedding mode).
    pub span: Option<Span>,
    /// Dialogue text covered by the span; absent for `(0, 0)`.
    pub span_text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedPrediction {
    pub query_id: String,
    pub mode: InferenceMode,
    pub k: usize,
    /// Every candidate, best first.
    pub candidates: Vec<RelationScore>,
}

impl RankedPrediction {
    pub fn top_k(&self) -> &[RelationScore] {
        &self.candidates[..self.k.min(self.candidates.len())]
    }

    pub fn top(&self, k: usize) -> &[RelationScore] {
        &self.candidates[..k.min(self.candidates.len())]
    }
}

/// Probability descending, then relation id ascending.
pub fn score_order(a: &RelationScore, b: &RelationScore) -> Ordering {
    b.probability
        .total_cmp(&a.probability)
        .then_with(|| a.relation_id.cmp(&b.relation_id))
}

pub fn rank(query_id: &str, mode: InferenceMode, mut scores: Vec<RelationScore>, k: usize) -> Result<RankedPrediction> {
    if k > scores.len() {
        return Err(Error::Config(format!("k = {k} exceeds {} candidates", scores.len())));
    }
    scores.sort_by(score_order);
    Ok(RankedPrediction {
        query_id: query_id.to_string(),
        mode,
        k,
        candidates: scores,
    })
}

fn gold_char_span(query: &Query, dialogue: &Dialogue) -> Result<Option<(usize, usize)>> {
    match query.gold_trigger.as_deref() {
        None => Err(Error::MissingGoldSpan(query.id.clone())),
        Some(t) if t.trim().is_empty() => Ok(None),
        Some(t) => dialogue
            .find(t)
            .map(Some)
            .ok_or_else(|| Error::MissingGoldSpan(query.id.clone())),
    }
}

/// Scores each candidate with its own encoder pass.
pub fn score_candidates(
    model: &Model,
    dialogue: &Dialogue,
    query: &Query,
    candidates: &[String],
    mode: InferenceMode,
) -> Result<Vec<RelationScore>> {
    if candidates.is_empty() {
        return Err(Error::Config("no candidate relations".into()));
    }
    if model.kind() == ModelKind::Multiclass {
        return score_multiclass(model, dialogue, query, candidates);
    }
    let trigger_chars = match mode {
        InferenceMode::GoldTrigger => gold_char_span(query, dialogue)?,
        _ => None,
    };
    candidates
        .iter()
        .map(|relation_id| {
            let text = model.relation_text(relation_id)?;
            let seq = model.layout(Some(&text), &query.subject, &query.object, dialogue, trigger_chars)?;
            let keys = match mode {
                InferenceMode::PredictedTrigger => KeySource::Predicted,
                InferenceMode::GeneralEmbedding => KeySource::General,
                InferenceMode::GoldTrigger => KeySource::Span(seq.trigger_tokens),
            };
            let mut g = Graph::new(&model.store);
            let f = model.forward_binary::<rand_chacha::ChaCha8Rng>(&mut g, &seq, keys, None)?;
            let span_text = f
                .span
                .and_then(|s| seq.span_chars(s))
                .map(|(a, b)| char_slice(&dialogue.flat_text, a, b));
            Ok(RelationScore {
                relation_id: relation_id.clone(),
                probability: g.scalar(f.prob),
                span: f.span,
                span_text,
            })
        })
        .collect()
}

/// Baseline scores: softmax probability for seen labels, 0 for the rest.
fn score_multiclass(model: &Model, dialogue: &Dialogue, query: &Query, candidates: &[String]) -> Result<Vec<RelationScore>> {
    let seq = model.layout(None, &query.subject, &query.object, dialogue, None)?;
    let mut g = Graph::new(&model.store);
    let lp = model.multiclass_log_probs(&mut g, &seq)?;
    let probs = g.value(lp).mapv(f64::exp);
    let labels = model.labels();
    candidates
        .iter()
        .map(|r| {
            model.relation_text(r)?;
            let probability = labels.binary_search(r).map(|i| probs[[0, i]]).unwrap_or(0.0);
            Ok(RelationScore {
                relation_id: r.clone(),
                probability,
                span: None,
                span_text: None,
            })
        })
        .collect()
}

/// Which split the gold relations of a query fall in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitMembership {
    pub seen: bool,
    pub unseen: bool,
}

impl SplitMembership {
    pub fn of(gold: &[String], split: &RelationSplit) -> Self {
        Self {
            seen: gold.iter().any(|r| split.seen.contains(r)),
            unseen: gold.iter().any(|r| split.unseen.contains(r)),
        }
    }

    pub fn straddles(self) -> bool {
        self.seen && self.unseen
    }
}

/// One line of the prediction dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub query_id: String,
    pub dialogue_id: String,
    pub subject: String,
    pub object: String,
    pub mode: InferenceMode,
    pub k: usize,
    pub candidates: Vec<RelationScore>,
    pub gold_relations: Vec<String>,
    pub gold_trigger: Option<String>,
    pub membership: SplitMembership,
}

impl PredictionRecord {
    pub fn ranked(&self) -> RankedPrediction {
        RankedPrediction {
            query_id: self.query_id.clone(),
            mode: self.mode,
            k: self.k,
            candidates: self.candidates.clone(),
        }
    }
}

/// Scores every query of a corpus against `candidates`.
pub fn predict_corpus(
    model: &Model,
    corpus: &Corpus,
    candidates: &[String],
    mode: InferenceMode,
    k: usize,
) -> Result<Vec<PredictionRecord>> {
    queries_from_corpus(corpus)
        .into_iter()
        .map(|q| predict_query(model, corpus, &q, candidates, mode, k))
        .collect()
}

pub fn predict_query(
    model: &Model,
    corpus: &Corpus,
    query: &Query,
    candidates: &[String],
    mode: InferenceMode,
    k: usize,
) -> Result<PredictionRecord> {
    let dialogue = corpus.dialogue(&query.dialogue_id).ok_or_else(|| Error::InvalidDialogue {
        id: query.dialogue_id.clone(),
        message: "not loaded".into(),
    })?;
    let scores = score_candidates(model, dialogue, query, candidates, mode)?;
    let ranked = rank(&query.id, mode, scores, k)?;
    Ok(PredictionRecord {
        query_id: query.id.clone(),
        dialogue_id: query.dialogue_id.clone(),
        subject: query.subject.clone(),
        object: query.object.clone(),
        mode,
        k,
        candidates: ranked.candidates,
        gold_relations: query.gold_relations.clone(),
        gold_trigger: query.gold_trigger.clone(),
        membership: SplitMembership::of(&query.gold_relations, &model.split),
    })
}

pub fn write_prediction_dump(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_prediction_dump(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(index, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                index,
                message: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn score(r: &str, p: f64) -> RelationScore {
        RelationScore {
            relation_id: r.into(),
            probability: p,
            span: None,
            span_text: None,
        }
    }

    #[test]
    fn ranking_sorts_and_breaks_ties() {
        let r = rank(
            "q",
            InferenceMode::GeneralEmbedding,
            vec![score("a", 0.9), score("b", 0.2), score("c", 0.7)],
            2,
        )
        .unwrap();
        let top: Vec<&str> = r.top_k().iter().map(|s| s.relation_id.as_str()).collect();
        assert_eq!(top, vec!["a", "c"]);
        assert_eq!(r.candidates.len(), 3);

        let r = rank(
            "q",
            InferenceMode::GeneralEmbedding,
            vec![score("per:pet", 0.5), score("per:age", 0.5)],
            1,
        )
        .unwrap();
        assert_eq!(r.top_k()[0].relation_id, "per:age");
        assert!(rank("q", InferenceMode::GoldTrigger, vec![score("a", 0.1)], 2).is_err());
    }

    #[test]
    fn mode_names_round_trip() {
        for m in InferenceMode::ALL {
            assert_eq!(m.as_str().parse::<InferenceMode>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.as_str()));
        }
        assert!("best".parse::<InferenceMode>().is_err());
    }
}
