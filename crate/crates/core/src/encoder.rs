//! Post-LN transformer encoder with two interchangeable backends: a small
//! randomly initialized model and BERT-compatible weights loaded from disk.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::reformulate::InputSequence;
use crate::tokenizer::Tokenizer;

/// Additive attention bias for masked key positions.
const MASK_BIAS: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    /// BERT-style weights read from a model directory.
    Pretrained,
    /// Small encoder trained from scratch.
    Tiny,
}

impl Backend {
    pub fn as_str(self) -> &'static str {
        match self {
            Backend::Pretrained => "pretrained",
            Backend::Tiny => "tiny",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub backend: Backend,
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub intermediate_dim: usize,
    pub max_position: usize,
    pub type_vocab_size: usize,
    pub layer_norm_eps: f64,
    pub init_std: f64,
    /// Leading layers whose key projection starts as a copy of the query
    /// projection, so fresh attention already prefers identical tokens.
    #[serde(default)]
    pub tied_qk_layers: usize,
}

impl EncoderConfig {
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            backend: Backend::Tiny,
            vocab_size,
            hidden_dim: 64,
            num_layers: 3,
            num_heads: 2,
            intermediate_dim: 128,
            max_position: 512,
            type_vocab_size: 2,
            layer_norm_eps: 1e-12,
            init_std: 0.1,
            tied_qk_layers: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 {
            return Err(Error::Config("hidden_dim must be positive".into()));
        }
        if self.backend == Backend::Tiny && !(16..=256).contains(&self.hidden_dim) {
            return Err(Error::Config(format!(
                "tiny backend hidden_dim must lie in [16, 256], got {}",
                self.hidden_dim
            )));
        }
        if self.num_heads == 0 || !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden_dim {} is not divisible by {} heads",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.num_layers == 0 || self.vocab_size == 0 || self.max_position == 0 || self.type_vocab_size == 0 {
            return Err(Error::Config("encoder sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }
}

#[derive(Debug, Clone)]
struct Linear {
    weight: ParamId,
    bias: ParamId,
}

impl Linear {
    fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

#[derive(Debug, Clone)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Debug, Clone)]
struct Layer {
    query: Linear,
    key: Linear,
    value: Linear,
    attn_out: Linear,
    attn_norm: Norm,
    ff_in: Linear,
    ff_out: Linear,
    ff_norm: Norm,
}

/// Parameter layout. Linear weights are stored `in × out`; biases and
/// norm parameters as `1 × n` rows.
fn param_shapes(c: &EncoderConfig) -> Vec<(String, (usize, usize), Init)> {
    let h = c.hidden_dim;
    let mut v = vec![
        ("embeddings.word_embeddings.weight".to_string(), (c.vocab_size, h), Init::Normal),
        ("embeddings.position_embeddings.weight".to_string(), (c.max_position, h), Init::Normal),
        ("embeddings.token_type_embeddings.weight".to_string(), (c.type_vocab_size, h), Init::Normal),
        ("embeddings.LayerNorm.weight".to_string(), (1, h), Init::Ones),
        ("embeddings.LayerNorm.bias".to_string(), (1, h), Init::Zeros),
    ];
    for i in 0..c.num_layers {
        let p = format!("encoder.layer.{i}");
        let mut linear = |name: &str, rows: usize, cols: usize| {
            v.push((format!("{p}.{name}.weight"), (rows, cols), Init::Normal));
            v.push((format!("{p}.{name}.bias"), (1, cols), Init::Zeros));
        };
        linear("attention.self.query", h, h);
        linear("attention.self.key", h, h);
        linear("attention.self.value", h, h);
        linear("attention.output.dense", h, h);
        linear("intermediate.dense", h, c.intermediate_dim);
        linear("output.dense", c.intermediate_dim, h);
        for norm in ["attention.output.LayerNorm", "output.LayerNorm"] {
            v.push((format!("{p}.{norm}.weight"), (1, h), Init::Ones));
            v.push((format!("{p}.{norm}.bias"), (1, h), Init::Zeros));
        }
    }
    v
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Normal,
    Ones,
    Zeros,
}

/// Contextual embeddings of one input sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmbeddings {
    pub matrix: Array2<f64>,
    pub attention_mask: Vec<bool>,
}

impl TokenEmbeddings {
    pub fn len(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.nrows() == 0
    }

    /// Row 0, the `[CLS]` position.
    pub fn general_embedding(&self) -> Array2<f64> {
        self.matrix.slice(ndarray::s![0..1, ..]).to_owned()
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    word: ParamId,
    position: ParamId,
    token_type: ParamId,
    emb_norm: Norm,
    layers: Vec<Layer>,
}

impl Encoder {
    /// Adds freshly initialized encoder parameters to `store`.
    pub fn init<R: Rng + ?Sized>(config: EncoderConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let normal = Normal::new(0.0, config.init_std)
            .map_err(|e| Error::Config(format!("init_std: {e}")))?;
        for (name, shape, init) in param_shapes(&config) {
            let value = match init {
                Init::Normal => Array2::from_shape_simple_fn(shape, || normal.sample(rng)),
                Init::Ones => Array2::ones(shape),
                Init::Zeros => Array2::zeros(shape),
            };
            store.insert(name, value);
        }
        for i in 0..config.tied_qk_layers.min(config.num_layers) {
            let p = format!("encoder.layer.{i}.attention.self");
            let q = store.by_name(&format!("{p}.query.weight")).expect("just inserted").clone();
            store.insert(format!("{p}.key.weight"), q);
        }
        Self::bind(config, store)
    }

    /// Resolves parameter handles in a populated store, checking shapes.
    pub fn bind(config: EncoderConfig, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        for (name, shape, _) in param_shapes(&config) {
            let value = store.by_name(&name).ok_or_else(|| Error::MissingWeights(name.clone()))?;
            if value.dim() != shape {
                return Err(Error::Shape(format!(
                    "{name}: expected {shape:?}, found {:?}",
                    value.dim()
                )));
            }
        }
        let id = |name: &str| store.id(name).expect("checked above");
        let linear = |p: &str| Linear {
            weight: id(&format!("{p}.weight")),
            bias: id(&format!("{p}.bias")),
        };
        let norm = |p: &str| Norm {
            gamma: id(&format!("{p}.weight")),
            beta: id(&format!("{p}.bias")),
        };
        let layers = (0..config.num_layers)
            .map(|i| {
                let p = format!("encoder.layer.{i}");
                Layer {
                    query: linear(&format!("{p}.attention.self.query")),
                    key: linear(&format!("{p}.attention.self.key")),
                    value: linear(&format!("{p}.attention.self.value")),
                    attn_out: linear(&format!("{p}.attention.output.dense")),
                    attn_norm: norm(&format!("{p}.attention.output.LayerNorm")),
                    ff_in: linear(&format!("{p}.intermediate.dense")),
                    ff_out: linear(&format!("{p}.output.dense")),
                    ff_norm: norm(&format!("{p}.output.LayerNorm")),
                }
            })
            .collect();
        Ok(Self {
            word: id("embeddings.word_embeddings.weight"),
            position: id("embeddings.position_embeddings.weight"),
            token_type: id("embeddings.token_type_embeddings.weight"),
            emb_norm: norm("embeddings.LayerNorm"),
            layers,
            config,
        })
    }

    /// Encodes token ids on a graph. `mask[i] = false` excludes position `i`
    /// as an attention key.
    pub fn forward(&self, g: &mut Graph, ids: &[u32], segments: &[u32], mask: Option<&[bool]>) -> Result<Var> {
        let n = ids.len();
        let c = &self.config;
        if n == 0 {
            return Err(Error::Shape("empty input sequence".into()));
        }
        if n > c.max_position {
            return Err(Error::SequenceTooLong {
                len: n,
                max: c.max_position,
            });
        }
        if segments.len() != n || mask.is_some_and(|m| m.len() != n) {
            return Err(Error::Shape("ids, segments and mask lengths differ".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= c.vocab_size) {
            return Err(Error::Shape(format!("token id {bad} outside vocabulary of {}", c.vocab_size)));
        }
        if let Some(&bad) = segments.iter().find(|&&s| s as usize >= c.type_vocab_size) {
            return Err(Error::Shape(format!("segment id {bad} outside {} types", c.type_vocab_size)));
        }
        let rows = |xs: &[u32]| xs.iter().map(|&i| i as usize).collect::<Vec<_>>();

        let word = g.param(self.word);
        let pos = g.param(self.position);
        let typ = g.param(self.token_type);
        let we = g.gather(word, &rows(ids));
        let pe = g.gather(pos, &(0..n).collect::<Vec<_>>());
        let te = g.gather(typ, &rows(segments));
        let x = g.add(we, pe);
        let x = g.add(x, te);
        let mut x = self.norm(g, x, &self.emb_norm);

        let bias = mask.map(|m| {
            Array2::from_shape_fn((1, n), |(_, j)| if m[j] { 0.0 } else { MASK_BIAS })
        });
        let d = c.head_dim();
        let scale = 1.0 / (d as f64).sqrt();
        for layer in &self.layers {
            let q = layer.query.forward(g, x);
            let k = layer.key.forward(g, x);
            let v = layer.value.forward(g, x);
            let mut heads = Vec::with_capacity(c.num_heads);
            for h in 0..c.num_heads {
                let qh = g.cols(q, h * d, d);
                let kh = g.cols(k, h * d, d);
                let vh = g.cols(v, h * d, d);
                let scores = g.matmul_t(qh, kh);
                let mut scores = g.scale(scores, scale);
                if let Some(b) = &bias {
                    scores = g.shift(scores, b);
                }
                let p = g.softmax_rows(scores);
                heads.push(g.matmul(p, vh));
            }
            let ctx = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
            let attn = layer.attn_out.forward(g, ctx);
            let res = g.add(x, attn);
            x = self.norm(g, res, &layer.attn_norm);

            let hidden = layer.ff_in.forward(g, x);
            let hidden = g.gelu(hidden);
            let ff = layer.ff_out.forward(g, hidden);
            let res = g.add(x, ff);
            x = self.norm(g, res, &layer.ff_norm);
        }
        Ok(x)
    }

    fn norm(&self, g: &mut Graph, x: Var, n: &Norm) -> Var {
        let gamma = g.param(n.gamma);
        let beta = g.param(n.beta);
        g.layer_norm(x, gamma, beta, self.config.layer_norm_eps)
    }

    /// Inference-mode encoding of a laid-out sequence.
    pub fn encode(&self, store: &ParamStore, seq: &InputSequence) -> Result<TokenEmbeddings> {
        let mut g = Graph::new(store);
        let out = self.forward(&mut g, &seq.ids, &seq.segment_ids, None)?;
        Ok(TokenEmbeddings {
            matrix: g.value(out).clone(),
            attention_mask: vec![true; seq.len()],
        })
    }
}

#[derive(Debug, Deserialize)]
struct HfConfig {
    vocab_size: usize,
    hidden_size: usize,
    num_hidden_layers: usize,
    num_attention_heads: usize,
    intermediate_size: usize,
    max_position_embeddings: usize,
    #[serde(default = "default_type_vocab")]
    type_vocab_size: usize,
    #[serde(default = "default_ln_eps")]
    layer_norm_eps: f64,
    #[serde(default)]
    hidden_act: Option<String>,
}

fn default_type_vocab() -> usize {
    2
}

fn default_ln_eps() -> f64 {
    1e-12
}

#[derive(Debug, Deserialize)]
struct HfTokenizerConfig {
    #[serde(default = "default_lower")]
    do_lower_case: bool,
}

fn default_lower() -> bool {
    true
}

/// Pretrained encoder weights and tokenizer read from a directory holding
/// `config.json`, `vocab.txt` and `model.safetensors`.
pub struct PretrainedEncoder {
    pub config: EncoderConfig,
    pub store: ParamStore,
    pub tokenizer: Tokenizer,
}

pub fn load_pretrained(dir: &Path) -> Result<PretrainedEncoder> {
    let config_path = dir.join("config.json");
    let text = fs::read_to_string(&config_path).map_err(|e| Error::io(&config_path, e))?;
    let hf: HfConfig = serde_json::from_str(&text)?;
    if let Some(act) = &hf.hidden_act {
        if act != "gelu" {
            return Err(Error::Config(format!("unsupported activation `{act}`")));
        }
    }
    let config = EncoderConfig {
        backend: Backend::Pretrained,
        vocab_size: hf.vocab_size,
        hidden_dim: hf.hidden_size,
        num_layers: hf.num_hidden_layers,
        num_heads: hf.num_attention_heads,
        intermediate_dim: hf.intermediate_size,
        max_position: hf.max_position_embeddings,
        type_vocab_size: hf.type_vocab_size,
        layer_norm_eps: hf.layer_norm_eps,
        init_std: 0.02,
        tied_qk_layers: 0,
    };
    config.validate()?;

    let tok_config_path = dir.join("tokenizer_config.json");
    let lowercase = match fs::read_to_string(&tok_config_path) {
        Ok(t) => serde_json::from_str::<HfTokenizerConfig>(&t)?.do_lower_case,
        Err(_) => true,
    };
    let tokenizer = Tokenizer::from_vocab_file(&dir.join("vocab.txt"), lowercase)?;
    if tokenizer.vocab_size() != config.vocab_size {
        return Err(Error::Config(format!(
            "vocab.txt has {} entries but config declares {}",
            tokenizer.vocab_size(),
            config.vocab_size
        )));
    }

    let weights_path = dir.join("model.safetensors");
    let bytes = fs::read(&weights_path).map_err(|e| Error::io(&weights_path, e))?;
    let tensors = SafeTensors::deserialize(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let available: HashMap<String, ()> = tensors.names().into_iter().map(|n| (n.to_string(), ())).collect();

    let mut store = ParamStore::new();
    for (name, shape, _) in param_shapes(&config) {
        let source = hf_candidates(&name)
            .into_iter()
            .find(|c| available.contains_key(c))
            .ok_or_else(|| Error::MissingWeights(name.clone()))?;
        let view = tensors.tensor(&source).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let data = tensor_f64(view.dtype(), view.data())
            .ok_or_else(|| Error::Checkpoint(format!("{source}: unsupported dtype {:?}", view.dtype())))?;
        let dims = view.shape();
        let value = match dims {
            [n] => Array2::from_shape_vec((1, *n), data),
            [r, c] => Array2::from_shape_vec((*r, *c), data),
            _ => return Err(Error::Shape(format!("{source}: rank {} tensor", dims.len()))),
        }
        .map_err(|e| Error::Shape(format!("{source}: {e}")))?;
        // torch linear layers store `out × in`
        let value = if is_linear_weight(&name) {
            value.t().to_owned()
        } else {
            value
        };
        if value.dim() != shape {
            return Err(Error::Shape(format!("{source}: expected {shape:?}, found {:?}", value.dim())));
        }
        store.insert(name, value);
    }
    Ok(PretrainedEncoder {
        config,
        store,
        tokenizer,
    })
}

fn is_linear_weight(name: &str) -> bool {
    name.starts_with("encoder.") && name.ends_with(".weight") && !name.contains("LayerNorm")
}

fn hf_candidates(name: &str) -> Vec<String> {
    let mut names = vec![name.to_string()];
    if name.contains("LayerNorm.weight") {
        names.push(name.replace("LayerNorm.weight", "LayerNorm.gamma"));
    }
    if name.contains("LayerNorm.bias") {
        names.push(name.replace("LayerNorm.bias", "LayerNorm.beta"));
    }
    let prefixed: Vec<String> = names.iter().map(|n| format!("bert.{n}")).collect();
    names.extend(prefixed);
    names
}

pub(crate) fn tensor_f64(dtype: Dtype, data: &[u8]) -> Option<Vec<f64>> {
    match dtype {
        Dtype::F64 => Some(
            data.chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        ),
        Dtype::F32 => Some(
            data.chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect(),
        ),
        _ => None,
    }
}
