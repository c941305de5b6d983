//! Expansion of annotated pairs into relation-conditioned binary instances,
//! negative sampling, and encoder input layout.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Dialogue, RelationSplit};
use crate::error::{Error, Result};
use crate::text::char_slice;
use crate::tokenizer::{Tokenizer, CLS, SEP};
use crate::trigger_head::Span;

pub const DEFAULT_MAX_SEQUENCE_LENGTH: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuildMode {
    /// Positives for seen relations only.
    Train,
    /// Positives for every gold relation.
    Eval,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryInstance {
    pub dialogue_id: String,
    /// Index of the source pair in the corpus.
    pub pair: usize,
    pub subject: String,
    pub object: String,
    pub relation_id: String,
    pub relation_text: String,
    pub label: u8,
    /// Annotated trigger text, when one was resolved.
    pub trigger: Option<String>,
    /// `[start, end)` character span of the trigger in the dialogue text.
    pub trigger_char_span: Option<(usize, usize)>,
    pub is_negative: bool,
}

/// Relations eligible as negatives, with their injected text.
#[derive(Debug, Clone)]
pub struct CandidatePool {
    relations: Vec<(String, String)>,
}

impl CandidatePool {
    pub fn from_relations<'a>(
        relations: impl IntoIterator<Item = &'a String>,
        split: &RelationSplit,
    ) -> Result<Self> {
        let relations = relations
            .into_iter()
            .map(|r| Ok((r.clone(), split.describe(r)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { relations })
    }

    /// Seen relations of a split.
    pub fn seen(split: &RelationSplit) -> Result<Self> {
        Self::from_relations(&split.seen, split)
    }

    pub fn len(&self) -> usize {
        self.relations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.relations.is_empty()
    }
}

fn resolve_trigger(dialogue: &Dialogue, trigger: Option<&str>) -> (Option<String>, Option<(usize, usize)>) {
    match trigger {
        Some(t) => match dialogue.find(t) {
            Some(span) => (Some(char_slice(&dialogue.flat_text, span.0, span.1)), Some(span)),
            None => (None, None),
        },
        None => (None, None),
    }
}

/// One positive per (pair, gold relation), filtered to seen relations in
/// train mode.
pub fn build_positive_instances(
    corpus: &Corpus,
    split: &RelationSplit,
    mode: BuildMode,
) -> Result<Vec<BinaryInstance>> {
    let mut out = Vec::new();
    for (pair, inst) in corpus.instances.iter().enumerate() {
        let dialogue = corpus
            .dialogue(&inst.dialogue_id)
            .ok_or_else(|| Error::InvalidDialogue {
                id: inst.dialogue_id.clone(),
                message: "referenced by an annotation but not loaded".into(),
            })?;
        for relation in &inst.relations {
            if mode == BuildMode::Train && !split.seen.contains(relation) {
                continue;
            }
            let (trigger, trigger_char_span) = resolve_trigger(dialogue, inst.trigger_for(relation));
            out.push(BinaryInstance {
                dialogue_id: inst.dialogue_id.clone(),
                pair,
                subject: inst.subject.clone(),
                object: inst.object.clone(),
                relation_id: relation.clone(),
                relation_text: split.describe(relation)?,
                label: 1,
                trigger,
                trigger_char_span,
                is_negative: false,
            });
        }
    }
    Ok(out)
}

/// Draws `k` negatives uniformly without replacement from `pool` minus the
/// pair's gold relations. The trigger span is copied from the positive.
pub fn sample_negatives<R: Rng + ?Sized>(
    positive: &BinaryInstance,
    gold_relations: &BTreeSet<String>,
    pool: &CandidatePool,
    k: usize,
    rng: &mut R,
) -> Result<Vec<BinaryInstance>> {
    if k == 0 {
        return Ok(Vec::new());
    }
    let eligible: Vec<&(String, String)> = pool
        .relations
        .iter()
        .filter(|(r, _)| !gold_relations.contains(r))
        .collect();
    if eligible.len() < k {
        return Err(Error::PoolTooSmall {
            required: k,
            available: eligible.len(),
        });
    }
    Ok(index::sample(rng, eligible.len(), k)
        .into_iter()
        .map(|i| {
            let (relation_id, relation_text) = eligible[i];
            BinaryInstance {
                relation_id: relation_id.clone(),
                relation_text: relation_text.clone(),
                label: 0,
                is_negative: true,
                ..positive.clone()
            }
        })
        .collect())
}

/// Positives interleaved with their sampled negatives, built once from a
/// seed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingSet {
    pub instances: Vec<BinaryInstance>,
    pub seed: u64,
    pub negatives_k: usize,
}

impl TrainingSet {
    pub fn positives(&self) -> usize {
        self.instances.iter().filter(|i| !i.is_negative).count()
    }

    pub fn negatives(&self) -> usize {
        self.instances.iter().filter(|i| i.is_negative).count()
    }
}

pub fn build_training_set(
    corpus: &Corpus,
    split: &RelationSplit,
    negatives_k: usize,
    seed: u64,
) -> Result<TrainingSet> {
    let positives = build_positive_instances(corpus, split, BuildMode::Train)?;
    let pool = CandidatePool::seen(split)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut instances = Vec::with_capacity(positives.len() * (negatives_k + 1));
    for pos in positives {
        let gold = corpus.instances[pos.pair].gold_set();
        let negs = sample_negatives(&pos, &gold, &pool, negatives_k, &mut rng)?;
        instances.push(pos);
        instances.extend(negs);
    }
    Ok(TrainingSet {
        instances,
        seed,
        negatives_k,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingSetManifest {
    pub seed: u64,
    pub negatives_k: usize,
    pub positives: usize,
    pub negatives: usize,
}

/// Writes instances as JSON lines plus a `<path>.manifest.json` sidecar.
pub fn save_training_set(path: &Path, set: &TrainingSet) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for inst in &set.instances {
        serde_json::to_writer(&mut w, inst)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    let manifest = TrainingSetManifest {
        seed: set.seed,
        negatives_k: set.negatives_k,
        positives: set.positives(),
        negatives: set.negatives(),
    };
    let sidecar = manifest_path(path);
    fs::write(&sidecar, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&sidecar, e))
}

pub fn load_training_set(path: &Path) -> Result<TrainingSet> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut instances = Vec::new();
    for (index, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        instances.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            index,
            message: e.to_string(),
        })?);
    }
    let sidecar = manifest_path(path);
    let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    let manifest: TrainingSetManifest = serde_json::from_str(&text)?;
    Ok(TrainingSet {
        instances,
        seed: manifest.seed,
        negatives_k: manifest.negatives_k,
    })
}

fn manifest_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    path.with_file_name(name)
}

/// Token ranges of each input segment (half-open).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentLayout {
    pub relation: Range<usize>,
    pub subject: Range<usize>,
    pub object: Range<usize>,
    pub dialogue: Range<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InputSequence {
    pub tokens: Vec<String>,
    pub ids: Vec<u32>,
    /// 0 for the relation/argument block, 1 for the dialogue block.
    pub segment_ids: Vec<u32>,
    pub layout: SegmentLayout,
    /// Token index for every character of the dialogue text; `None` for
    /// characters removed by truncation.
    pub char_to_token: Vec<Option<usize>>,
    /// Character span of each dialogue token, aligned with `layout.dialogue`.
    pub dialogue_char_spans: Vec<(usize, usize)>,
    /// Token span of the trigger; `(0, 0)` when there is none.
    pub trigger_tokens: Span,
    /// The annotated trigger fell (partly) in the truncated tail.
    pub trigger_lost: bool,
}

impl InputSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Positions a trigger span may cover: the dialogue segment and index 0.
    pub fn span_mask(&self) -> Vec<bool> {
        (0..self.len())
            .map(|i| i == 0 || self.layout.dialogue.contains(&i))
            .collect()
    }

    /// Character span in the dialogue covered by a token span, if the span
    /// lies in the dialogue segment.
    pub fn span_chars(&self, span: Span) -> Option<(usize, usize)> {
        let d = &self.layout.dialogue;
        if span.is_none() || !d.contains(&span.start) || !d.contains(&span.end) {
            return None;
        }
        let s = self.dialogue_char_spans[span.start - d.start].0;
        let e = self.dialogue_char_spans[span.end - d.start].1;
        Some((s, e))
    }

    /// Maps a dialogue character span to a token span.
    pub fn token_span(&self, chars: (usize, usize)) -> Option<Span> {
        let (s, e) = chars;
        if e <= s || e > self.char_to_token.len() {
            return None;
        }
        let start = self.char_to_token[s]?;
        let end = self.char_to_token[e - 1]?;
        if !self.layout.dialogue.contains(&start) || !self.layout.dialogue.contains(&end) {
            return None;
        }
        Some(Span::new(start, end))
    }
}

/// Lays out `[CLS] relation [SEP] subject [SEP] object [SEP] dialogue [SEP]`.
pub fn build_input_sequence(
    instance: &BinaryInstance,
    dialogue: &Dialogue,
    tokenizer: &Tokenizer,
    max_len: usize,
) -> Result<InputSequence> {
    layout_sequence(
        Some(&instance.relation_text),
        &instance.subject,
        &instance.object,
        dialogue,
        instance.trigger_char_span,
        tokenizer,
        max_len,
    )
}

/// General layout; with `relation_text = None` the relation segment and its
/// separator are omitted (multi-class baseline input).
pub fn layout_sequence(
    relation_text: Option<&str>,
    subject: &str,
    object: &str,
    dialogue: &Dialogue,
    trigger_char_span: Option<(usize, usize)>,
    tokenizer: &Tokenizer,
    max_len: usize,
) -> Result<InputSequence> {
    let cls = tokenizer.special(CLS);
    let sep = tokenizer.special(SEP);
    let mut tokens = vec![CLS.to_string()];
    let mut ids = vec![cls];

    let push_segment = |text: &str, tokens: &mut Vec<String>, ids: &mut Vec<u32>| {
        let start = ids.len();
        for t in tokenizer.tokenize(text) {
            tokens.push(t.text);
            ids.push(t.id);
        }
        let range = start..ids.len();
        tokens.push(SEP.to_string());
        ids.push(sep);
        range
    };

    let relation = match relation_text {
        Some(text) => push_segment(text, &mut tokens, &mut ids),
        None => 1..1,
    };
    let subject = push_segment(subject, &mut tokens, &mut ids);
    let object = push_segment(object, &mut tokens, &mut ids);

    // room for the trailing [SEP]
    let fixed = ids.len() + 1;
    if fixed > max_len {
        return Err(Error::SequenceTooLong { len: fixed, max: max_len });
    }
    let budget = max_len - fixed;

    let dialogue_tokens = tokenizer.tokenize(&dialogue.flat_text);
    let kept = dialogue_tokens.len().min(budget);
    let dstart = ids.len();
    let mut dialogue_char_spans = Vec::with_capacity(kept);
    for t in &dialogue_tokens[..kept] {
        tokens.push(t.text.clone());
        ids.push(t.id);
        dialogue_char_spans.push((t.start, t.end));
    }
    let dialogue_range = dstart..ids.len();
    tokens.push(SEP.to_string());
    ids.push(sep);

    let mut segment_ids = vec![0u32; dstart];
    segment_ids.resize(ids.len(), 1);

    // Each character maps to the token covering it, or the next token when
    // it falls between tokens; characters after the last kept token are
    // truncated.
    let nchars = dialogue.char_len();
    let mut char_to_token = vec![None; nchars];
    let covered_until = dialogue_char_spans.last().map(|s| s.1).unwrap_or(0);
    let mut cursor = 0;
    for (c, slot) in char_to_token.iter_mut().enumerate().take(covered_until) {
        while cursor < dialogue_char_spans.len() && dialogue_char_spans[cursor].1 <= c {
            cursor += 1;
        }
        *slot = Some(dstart + cursor);
    }

    let layout = SegmentLayout {
        relation,
        subject,
        object,
        dialogue: dialogue_range,
    };
    let mut seq = InputSequence {
        tokens,
        ids,
        segment_ids,
        layout,
        char_to_token,
        dialogue_char_spans,
        trigger_tokens: Span::NONE,
        trigger_lost: false,
    };
    if let Some(chars) = trigger_char_span {
        if chars.1 > nchars || chars.0 >= chars.1 {
            return Err(Error::InvalidSpan(format!(
                "trigger characters {chars:?} outside dialogue of length {nchars}"
            )));
        }
        match seq.token_span(chars) {
            Some(span) => seq.trigger_tokens = span,
            None => seq.trigger_lost = true,
        }
    }
    Ok(seq)
}
