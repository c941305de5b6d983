//! Multi-task training of the binary scorer and the multi-class baseline.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, ParamGrads};
use crate::checkpoint;
use crate::corpus::{Corpus, RelationSplit};
use crate::encoder::{load_pretrained, Backend, EncoderConfig};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelKind};
use crate::optim::Adam;
use crate::reformulate::{build_training_set, InputSequence, TrainingSet};
use crate::tokenizer::Tokenizer;

/// Shape of the randomly initialized encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TinyShape {
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub intermediate_dim: usize,
    pub init_std: f64,
    #[serde(default)]
    pub tied_qk_layers: usize,
}

impl Default for TinyShape {
    fn default() -> Self {
        let c = EncoderConfig::tiny(1);
        Self {
            hidden_dim: c.hidden_dim,
            num_layers: c.num_layers,
            num_heads: c.num_heads,
            intermediate_dim: c.intermediate_dim,
            init_std: c.init_std,
            tied_qk_layers: c.tied_qk_layers,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub backend: Backend,
    /// Model directory for the pretrained backend.
    pub pretrained_dir: Option<PathBuf>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub negatives_k: usize,
    pub loss_weight_lambda: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub max_span_len: usize,
    pub max_sequence_length: usize,
    pub dropout: f64,
    pub head_init_std: f64,
    /// Fraction of binary training instances whose relation head reads the
    /// general embedding instead of the gold trigger span.
    #[serde(default)]
    pub general_key_rate: f64,
    pub tiny: TinyShape,
}

impl TrainConfig {
    pub fn tiny() -> Self {
        Self {
            backend: Backend::Tiny,
            pretrained_dir: None,
            learning_rate: 1e-3,
            epochs: 10,
            negatives_k: 3,
            loss_weight_lambda: 1.0,
            batch_size: 8,
            seed: 0,
            max_span_len: crate::trigger_head::DEFAULT_MAX_SPAN_LEN,
            max_sequence_length: crate::reformulate::DEFAULT_MAX_SEQUENCE_LENGTH,
            dropout: crate::relation_head::DEFAULT_DROPOUT,
            head_init_std: 0.1,
            general_key_rate: 0.5,
            tiny: TinyShape::default(),
        }
    }

    pub fn pretrained(dir: impl Into<PathBuf>) -> Self {
        Self {
            backend: Backend::Pretrained,
            pretrained_dir: Some(dir.into()),
            learning_rate: 3e-5,
            batch_size: 8,
            head_init_std: 0.02,
            general_key_rate: 0.0,
            ..Self::tiny()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if !(self.loss_weight_lambda >= 0.0 && self.loss_weight_lambda.is_finite()) {
            return bad("loss_weight_lambda must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.general_key_rate) {
            return bad("general_key_rate must lie in [0, 1]");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.max_span_len == 0 {
            return bad("max_span_len must be at least 1");
        }
        if self.backend == Backend::Pretrained && self.pretrained_dir.is_none() {
            return bad("pretrained backend needs a model directory");
        }
        Ok(())
    }
}

/// Loss components of one step or epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub trigger: f64,
    pub binary: f64,
    pub total: f64,
}

pub fn combine_losses(lt: f64, lb: f64, lambda: f64) -> LossBundle {
    LossBundle {
        trigger: lt,
        binary: lb,
        total: lt + lambda * lb,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub instances: usize,
    pub mean: LossBundle,
    pub checkpoint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainManifest {
    pub kind: ModelKind,
    pub config: TrainConfig,
    pub seed: u64,
    pub split_hash: String,
    pub positives: usize,
    pub negatives: usize,
    pub epochs: Vec<EpochSummary>,
}

pub struct TrainingRun {
    pub model: Model,
    pub steps: Vec<LossBundle>,
    pub manifest: TrainManifest,
}

/// SHA-256 of the split's JSON form.
pub fn split_hash(split: &RelationSplit) -> String {
    let json = serde_json::to_string(split).expect("split serializes");
    hex::encode(Sha256::digest(json.as_bytes()))
}

/// Word vocabulary for the tiny backend: dialogue text, arguments, and the
/// injected text of every split relation.
pub fn build_tiny_tokenizer(corpus: &Corpus, split: &RelationSplit) -> Result<Tokenizer> {
    let mut texts: Vec<String> = corpus.dialogues.iter().map(|d| d.flat_text.clone()).collect();
    for inst in &corpus.instances {
        texts.push(inst.subject.clone());
        texts.push(inst.object.clone());
    }
    for r in split.all() {
        texts.push(split.describe(&r)?);
    }
    Ok(Tokenizer::build_word(texts.iter().map(String::as_str)))
}

/// Fresh model of the requested kind for a corpus and split.
pub fn init_model(corpus: &Corpus, split: &RelationSplit, config: &TrainConfig, kind: ModelKind) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (tokenizer, encoder, store) = match config.backend {
        Backend::Tiny => {
            let tokenizer = build_tiny_tokenizer(corpus, split)?;
            let t = &config.tiny;
            let encoder = EncoderConfig {
                hidden_dim: t.hidden_dim,
                num_layers: t.num_layers,
                num_heads: t.num_heads,
                intermediate_dim: t.intermediate_dim,
                init_std: t.init_std,
                tied_qk_layers: t.tied_qk_layers,
                max_position: config.max_sequence_length,
                ..EncoderConfig::tiny(tokenizer.vocab_size())
            };
            (tokenizer, encoder, None)
        }
        Backend::Pretrained => {
            let dir = config.pretrained_dir.as_ref().expect("validated");
            let p = load_pretrained(dir)?;
            (p.tokenizer, p.config, Some(p.store))
        }
    };
    let model_config = ModelConfig {
        kind,
        max_span_len: config.max_span_len,
        max_sequence_length: config.max_sequence_length,
        dropout: config.dropout,
        head_init_std: config.head_init_std,
        ..ModelConfig::new(kind, encoder)
    };
    Model::init(model_config, tokenizer, split.clone(), store, &mut rng)
}

/// One laid-out training example.
#[derive(Debug, Clone)]
pub struct Example {
    pub seq: InputSequence,
    /// Binary label, or the class index for the baseline.
    pub target: usize,
}

/// Lays out every instance of a built training set.
pub fn binary_examples(model: &Model, corpus: &Corpus, set: &TrainingSet) -> Result<Vec<Example>> {
    set.instances
        .iter()
        .map(|inst| {
            let dialogue = corpus.dialogue(&inst.dialogue_id).ok_or_else(|| Error::InvalidDialogue {
                id: inst.dialogue_id.clone(),
                message: "not loaded".into(),
            })?;
            let seq = model.layout(
                Some(&inst.relation_text),
                &inst.subject,
                &inst.object,
                dialogue,
                inst.trigger_char_span,
            )?;
            Ok(Example {
                seq,
                target: inst.label as usize,
            })
        })
        .collect()
}

fn instance_rng(seed: u64, step: usize, slot: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d0d0);
    rng.set_stream(((step as u64) << 20) | slot as u64);
    rng
}

/// Gradient and loss components of one example.
fn example_grads(
    model: &Model,
    ex: &Example,
    opts: &StepOptions,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<(ParamGrads, f64, f64)> {
    let mut g = Graph::new(&model.store);
    let (loss, lt, lb) = match model.kind() {
        ModelKind::Binary => {
            let general = match rng.as_deref_mut() {
                Some(r) if opts.general_key_rate > 0.0 => r.random_bool(opts.general_key_rate),
                _ => false,
            };
            let (total, lt, lb) =
                model.binary_objective(&mut g, &ex.seq, ex.target as u8, opts.lambda, general, rng)?;
            (total, lt, lb)
        }
        ModelKind::Multiclass => {
            let lp = model.multiclass_log_probs(&mut g, &ex.seq)?;
            let pick = g.pick(lp, 0, ex.target);
            let nll = g.scale(pick, -1.0);
            let v = g.scalar(nll);
            (nll, 0.0, v)
        }
    };
    Ok((g.backward(loss).into_param_grads(), lt, lb))
}

/// Per-step settings of [`train_step`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOptions {
    pub lambda: f64,
    pub general_key_rate: f64,
    /// `(seed, step)` for dropout and key sampling; `None` disables both.
    pub rng_seed: Option<(u64, usize)>,
}

impl StepOptions {
    /// Deterministic step: no dropout, gold-span keys.
    pub fn plain(lambda: f64) -> Self {
        Self {
            lambda,
            general_key_rate: 0.0,
            rng_seed: None,
        }
    }
}

/// One optimizer step over a batch; gradients are averaged over the batch.
pub fn train_step(model: &mut Model, opt: &mut Adam, batch: &[&Example], opts: &StepOptions) -> Result<LossBundle> {
    let lambda = opts.lambda;
    let scale = 1.0 / batch.len() as f64;
    let mut grads = ParamGrads::zeros_like(&model.store);
    let (mut lt, mut lb) = (0.0, 0.0);
    // at most one gradient buffer per worker is alive; summation order is
    // the batch order regardless of scheduling
    let width = rayon::current_num_threads().max(1);
    for (c, chunk) in batch.chunks(width).enumerate() {
        let m = &*model;
        let results: Vec<Result<(ParamGrads, f64, f64)>> = chunk
            .par_iter()
            .enumerate()
            .map(|(i, ex)| {
                let slot = c * width + i;
                let mut rng = opts.rng_seed.map(|(seed, step)| instance_rng(seed, step, slot));
                example_grads(m, ex, opts, rng.as_mut())
            })
            .collect();
        for r in results {
            let (g, t, b) = r?;
            grads.add_scaled(&g, scale);
            lt += t * scale;
            lb += b * scale;
        }
    }
    let bundle = match model.kind() {
        ModelKind::Binary => combine_losses(lt, lb, lambda),
        ModelKind::Multiclass => combine_losses(0.0, lb, 1.0),
    };
    opt.step(&mut model.store, &grads);
    Ok(bundle)
}

/// Runs `config.epochs` epochs over prepared examples, checkpointing after
/// each epoch when `out_dir` is given.
pub fn fit(
    mut model: Model,
    examples: &[Example],
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<(Model, Vec<LossBundle>, Vec<EpochSummary>)> {
    config.validate()?;
    if examples.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let lambda = config.loss_weight_lambda;
    let mut opt = Adam::new(config.learning_rate);
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut order_rng);
        let first = steps.len();
        let mut sums = (0.0, 0.0);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
            let step = steps.len();
            let opts = StepOptions {
                lambda,
                general_key_rate: config.general_key_rate,
                rng_seed: Some((config.seed, step)),
            };
            let bundle = train_step(&mut model, &mut opt, &batch, &opts)?;
            if !(bundle.trigger.is_finite() && bundle.binary.is_finite() && bundle.total.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    trigger: bundle.trigger,
                    binary: bundle.binary,
                });
            }
            let w = batch.len() as f64;
            sums.0 += bundle.trigger * w;
            sums.1 += bundle.binary * w;
            steps.push(bundle);
        }
        let n = examples.len() as f64;
        let mean = match model.kind() {
            ModelKind::Binary => combine_losses(sums.0 / n, sums.1 / n, lambda),
            ModelKind::Multiclass => combine_losses(0.0, sums.1 / n, 1.0),
        };
        let checkpoint = match out_dir {
            Some(dir) => {
                let name = format!("epoch-{epoch}.safetensors");
                checkpoint::save(&model, &dir.join(&name))?;
                Some(name)
            }
            None => None,
        };
        epochs.push(EpochSummary {
            epoch,
            steps: steps.len() - first,
            instances: examples.len(),
            mean,
            checkpoint,
        });
    }
    Ok((model, steps, epochs))
}

fn finish(
    model: Model,
    steps: Vec<LossBundle>,
    epochs: Vec<EpochSummary>,
    config: &TrainConfig,
    split: &RelationSplit,
    counts: (usize, usize),
    out_dir: Option<&Path>,
) -> Result<TrainingRun> {
    let manifest = TrainManifest {
        kind: model.kind(),
        config: config.clone(),
        seed: config.seed,
        split_hash: split_hash(split),
        positives: counts.0,
        negatives: counts.1,
        epochs,
    };
    if let Some(dir) = out_dir {
        checkpoint::save(&model, &dir.join("model.safetensors"))?;
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&path, e))?;
    }
    Ok(TrainingRun {
        model,
        steps,
        manifest,
    })
}

/// Trains the relation-conditioned scorer on seen relations.
pub fn train(corpus: &Corpus, split: &RelationSplit, config: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainingRun> {
    config.validate()?;
    split.validate()?;
    let set = build_training_set(corpus, split, config.negatives_k, config.seed)?;
    if set.instances.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let model = init_model(corpus, split, config, ModelKind::Binary)?;
    let examples = binary_examples(&model, corpus, &set)?;
    let (model, steps, epochs) = fit(model, &examples, config, out_dir)?;
    finish(model, steps, epochs, config, split, (set.positives(), set.negatives()), out_dir)
}

/// Trains the multi-class baseline: one example per (pair, seen gold
/// relation), relation segment omitted.
pub fn train_multiclass_baseline(
    corpus: &Corpus,
    split: &RelationSplit,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainingRun> {
    config.validate()?;
    split.validate()?;
    let model = init_model(corpus, split, config, ModelKind::Multiclass)?;
    let labels = model.labels().to_vec();
    let mut examples = Vec::new();
    for inst in &corpus.instances {
        let dialogue = corpus.dialogue(&inst.dialogue_id).ok_or_else(|| Error::InvalidDialogue {
            id: inst.dialogue_id.clone(),
            message: "not loaded".into(),
        })?;
        for r in &inst.relations {
            if let Ok(target) = labels.binary_search(r) {
                let seq = model.layout(None, &inst.subject, &inst.object, dialogue, None)?;
                examples.push(Example { seq, target });
            }
        }
    }
    if examples.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let n = examples.len();
    let (model, steps, epochs) = fit(model, &examples, config, out_dir)?;
    finish(model, steps, epochs, config, split, (n, 0), out_dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn combine_losses_arithmetic() {
        assert_eq!(combine_losses(2.0, 3.0, 1.0).total, 5.0);
        assert_eq!(combine_losses(2.0, 3.0, 0.0).total, 2.0);
        assert!((combine_losses(0.7, 0.3, 2.0).total - 1.3).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::tiny().validate().is_ok());
        let mut c = TrainConfig::tiny();
        c.learning_rate = 0.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::tiny();
        c.epochs = 0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::tiny();
        c.loss_weight_lambda = -1.0;
        assert!(c.validate().is_err());
        assert_eq!(TrainConfig::pretrained("x").learning_rate, 3e-5);
        assert_eq!(TrainConfig::pretrained("x").batch_size, 8);
    }
}
