//! The full scoring model: shared encoder plus either the trigger/relation
//! heads or the multi-class baseline classifier.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::corpus::{canonical_relation, in_inventory, verbalize_any, verbalize_relation, Dialogue, RelationSplit};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::reformulate::{layout_sequence, InputSequence};
use crate::relation_head::{binary_loss_var, RelationHead, DEFAULT_DROPOUT};
use crate::tokenizer::Tokenizer;
use crate::trigger_head::{decode_span, logits_from_graph, trigger_loss_var, Span, SpanLogits, TriggerHead};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Relation-conditioned binary scorer with a trigger head.
    Binary,
    /// Softmax over seen relations from the general embedding.
    Multiclass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub encoder: EncoderConfig,
    pub max_span_len: usize,
    pub max_sequence_length: usize,
    pub dropout: f64,
    pub head_init_std: f64,
}

impl ModelConfig {
    pub fn new(kind: ModelKind, encoder: EncoderConfig) -> Self {
        Self {
            kind,
            encoder,
            max_span_len: crate::trigger_head::DEFAULT_MAX_SPAN_LEN,
            max_sequence_length: crate::reformulate::DEFAULT_MAX_SEQUENCE_LENGTH,
            dropout: DEFAULT_DROPOUT,
            head_init_std: 0.02,
        }
    }

    /// Sequence limit after clamping to the encoder's position table.
    pub fn sequence_limit(&self) -> usize {
        self.max_sequence_length.min(self.encoder.max_position)
    }
}

pub const CLASSIFIER_WEIGHT: &str = "classifier.weight";
pub const CLASSIFIER_BIAS: &str = "classifier.bias";

#[derive(Debug, Clone)]
pub struct MulticlassHead {
    pub labels: Vec<String>,
    weight: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
pub enum Heads {
    Binary { trigger: TriggerHead, relation: RelationHead },
    Multiclass(MulticlassHead),
}

/// Where the relation head takes its keys and values from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeySource {
    /// Token embeddings of a given span; `(0, 0)` selects the general row.
    Span(Span),
    /// The span decoded from the trigger head on the same pass.
    Predicted,
    /// The general (`[CLS]`) embedding alone.
    General,
}

/// Nodes produced by one binary forward pass.
pub struct BinaryForward {
    pub hidden: Var,
    pub start: Var,
    pub end: Var,
    pub prob: Var,
    /// Span used as keys, when keys came from a span.
    pub span: Option<Span>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub tokenizer: Tokenizer,
    pub split: RelationSplit,
    pub encoder: Encoder,
    pub heads: Heads,
}

impl Model {
    /// Builds a model, initializing the encoder unless `encoder_store` already
    /// holds its weights, and initializing the task heads.
    pub fn init<R: Rng + ?Sized>(
        config: ModelConfig,
        tokenizer: Tokenizer,
        split: RelationSplit,
        encoder_store: Option<ParamStore>,
        rng: &mut R,
    ) -> Result<Self> {
        if tokenizer.vocab_size() != config.encoder.vocab_size {
            return Err(Error::Config(format!(
                "tokenizer has {} entries, encoder expects {}",
                tokenizer.vocab_size(),
                config.encoder.vocab_size
            )));
        }
        let (mut store, encoder) = match encoder_store {
            Some(store) => {
                let enc = Encoder::bind(config.encoder.clone(), &store)?;
                (store, enc)
            }
            None => {
                let mut store = ParamStore::new();
                let enc = Encoder::init(config.encoder.clone(), &mut store, rng)?;
                (store, enc)
            }
        };
        let h = config.encoder.hidden_dim;
        let std = config.head_init_std;
        let heads = match config.kind {
            ModelKind::Binary => Heads::Binary {
                trigger: TriggerHead::init(h, std, &mut store, rng)?,
                relation: RelationHead::init(h, config.dropout, std, &mut store, rng)?,
            },
            ModelKind::Multiclass => {
                let labels: Vec<String> = split.seen.iter().cloned().collect();
                if labels.is_empty() {
                    return Err(Error::EmptyTrainingSet);
                }
                let normal = Normal::new(0.0, std).map_err(|e| Error::Config(format!("init_std: {e}")))?;
                store.insert(
                    CLASSIFIER_WEIGHT,
                    Array2::from_shape_simple_fn((h, labels.len()), || normal.sample(rng)),
                );
                store.insert(CLASSIFIER_BIAS, Array2::zeros((1, labels.len())));
                Heads::Multiclass(MulticlassHead::bind(labels, h, &store)?)
            }
        };
        Ok(Self {
            config,
            store,
            tokenizer,
            split,
            encoder,
            heads,
        })
    }

    /// Binds a model to already-populated parameters.
    pub fn bind(
        config: ModelConfig,
        tokenizer: Tokenizer,
        split: RelationSplit,
        labels: Vec<String>,
        store: ParamStore,
    ) -> Result<Self> {
        let encoder = Encoder::bind(config.encoder.clone(), &store)?;
        let h = config.encoder.hidden_dim;
        let heads = match config.kind {
            ModelKind::Binary => Heads::Binary {
                trigger: TriggerHead::bind(h, &store)?,
                relation: RelationHead::bind(h, config.dropout, &store)?,
            },
            ModelKind::Multiclass => Heads::Multiclass(MulticlassHead::bind(labels, h, &store)?),
        };
        Ok(Self {
            config,
            store,
            tokenizer,
            split,
            encoder,
            heads,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn labels(&self) -> &[String] {
        match &self.heads {
            Heads::Multiclass(m) => &m.labels,
            Heads::Binary { .. } => &[],
        }
    }

    fn binary_heads(&self) -> Result<(&TriggerHead, &RelationHead)> {
        match &self.heads {
            Heads::Binary { trigger, relation } => Ok((trigger, relation)),
            Heads::Multiclass(_) => Err(Error::Config("operation requires a binary model".into())),
        }
    }

    pub fn trigger_head(&self) -> Result<&TriggerHead> {
        self.binary_heads().map(|(t, _)| t)
    }

    pub fn relation_head(&self) -> Result<&RelationHead> {
        self.binary_heads().map(|(_, r)| r)
    }

    /// Text injected for a candidate relation. Split and inventory ids use
    /// their description or verbalization; other `prefix:name` ids are
    /// verbalized by rule.
    pub fn relation_text(&self, relation_id: &str) -> Result<String> {
        if self.split.contains(relation_id) {
            return self.split.describe(relation_id);
        }
        let canonical = canonical_relation(relation_id);
        if in_inventory(canonical) {
            return verbalize_relation(canonical);
        }
        if relation_id.contains(':') {
            if let Some(text) = verbalize_any(relation_id) {
                return Ok(text);
            }
        }
        Err(Error::UnknownRelation(relation_id.to_string()))
    }

    /// Lays out an input for this model's kind. The baseline omits the
    /// relation segment.
    pub fn layout(
        &self,
        relation_text: Option<&str>,
        subject: &str,
        object: &str,
        dialogue: &Dialogue,
        trigger_char_span: Option<(usize, usize)>,
    ) -> Result<InputSequence> {
        let text = match self.config.kind {
            ModelKind::Binary => relation_text,
            ModelKind::Multiclass => None,
        };
        layout_sequence(
            text,
            subject,
            object,
            dialogue,
            trigger_char_span,
            &self.tokenizer,
            self.config.sequence_limit(),
        )
    }

    pub fn encode(&self, g: &mut Graph, seq: &InputSequence) -> Result<Var> {
        self.encoder.forward(g, &seq.ids, &seq.segment_ids, None)
    }

    /// Encoder, trigger head and relation head on one sequence.
    pub fn forward_binary<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        seq: &InputSequence,
        keys: KeySource,
        dropout_rng: Option<&mut R>,
    ) -> Result<BinaryForward> {
        let (trigger, relation) = self.binary_heads()?;
        let hidden = self.encode(g, seq)?;
        let mask = seq.span_mask();
        let (start, end) = trigger.forward(g, hidden, &mask);
        let span = match keys {
            KeySource::Span(s) => Some(s),
            KeySource::Predicted => Some(decode_span(
                &logits_from_graph(g, start, end, &mask),
                self.config.max_span_len,
            )),
            KeySource::General => None,
        };
        let rows = span.map(Span::rows).unwrap_or_else(|| vec![0]);
        if let Some(&bad) = rows.iter().find(|&&r| r >= seq.len()) {
            return Err(Error::InvalidSpan(format!("row {bad} outside sequence of {}", seq.len())));
        }
        let query = g.gather(hidden, &[0]);
        let kv = g.gather(hidden, &rows);
        let prob = relation.predict(g, query, kv, dropout_rng)?;
        Ok(BinaryForward {
            hidden,
            start,
            end,
            prob,
            span,
        })
    }

    /// Per-instance training objective `trigger + λ·binary`. The relation
    /// head reads the gold span, or the general embedding when
    /// `general_keys` is set; the trigger target is the gold span either
    /// way. Returns the total node and the two component values.
    pub fn binary_objective<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        seq: &InputSequence,
        label: u8,
        lambda: f64,
        general_keys: bool,
        dropout_rng: Option<&mut R>,
    ) -> Result<(Var, f64, f64)> {
        let keys = if general_keys {
            KeySource::General
        } else {
            KeySource::Span(seq.trigger_tokens)
        };
        let f = self.forward_binary(g, seq, keys, dropout_rng)?;
        let lb = binary_loss_var(g, f.prob, label);
        let weighted = g.scale(lb, lambda);
        let lb_value = g.scalar(lb);
        if seq.trigger_lost {
            return Ok((weighted, 0.0, lb_value));
        }
        let lt = trigger_loss_var(g, f.start, f.end, &seq.span_mask(), seq.trigger_tokens)?;
        let lt_value = g.scalar(lt);
        Ok((g.add(lt, weighted), lt_value, lb_value))
    }

    /// Span logits of one sequence in inference mode.
    pub fn span_logits(&self, seq: &InputSequence) -> Result<SpanLogits> {
        let (trigger, _) = self.binary_heads()?;
        let mut g = Graph::new(&self.store);
        let hidden = self.encode(&mut g, seq)?;
        let mask = seq.span_mask();
        let (s, e) = trigger.forward(&mut g, hidden, &mask);
        Ok(logits_from_graph(&g, s, e, &mask))
    }

    /// Baseline `1 × L` log-probabilities over the seen labels.
    pub fn multiclass_log_probs(&self, g: &mut Graph, seq: &InputSequence) -> Result<Var> {
        let head = match &self.heads {
            Heads::Multiclass(m) => m,
            Heads::Binary { .. } => return Err(Error::Config("operation requires a multiclass model".into())),
        };
        let hidden = self.encode(g, seq)?;
        let cls = g.gather(hidden, &[0]);
        let w = g.param(head.weight);
        let b = g.param(head.bias);
        let y = g.matmul(cls, w);
        let logits = g.add_row(y, b);
        Ok(g.log_softmax_rows(logits))
    }
}

impl MulticlassHead {
    pub fn bind(labels: Vec<String>, hidden: usize, store: &ParamStore) -> Result<Self> {
        let get = |name: &str, shape: (usize, usize)| {
            let id = store.id(name).ok_or_else(|| Error::MissingWeights(name.into()))?;
            if store.get(id).dim() != shape {
                return Err(Error::Shape(format!("{name}: expected {shape:?}")));
            }
            Ok(id)
        };
        Ok(Self {
            weight: get(CLASSIFIER_WEIGHT, (hidden, labels.len()))?,
            bias: get(CLASSIFIER_BIAS, (1, labels.len()))?,
            labels,
        })
    }
}
