//! Transformer encoder with optional cross-layer sharing and factorized
//! embeddings.
//!
//! Parameters live in a name-keyed [`ParameterSet`]. When `share_layers` is set
//! only `layer.0.*` exists and every layer application binds those same
//! tensors. The masked-LM output projection has no tensor of its own: it reads
//! `embeddings.word` directly.
//!
//! Layer layout (post-norm):
//!
//! ```text
//! e = norm(word[ids] + position[0..seq] + token_type[segments]) -> dropout -> (projection E->H)
//! per layer:  h = norm(h + dropout(attn(h) W_o))
//!             h = norm(h + dropout(gelu(h W_1) W_2))
//! ```

use std::collections::BTreeMap;

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::kv::KvDocument;
use crate::tokenizer::{EncodedSequence, PRESET_VOCAB_SIZE};

pub type Tensor = ArrayD<f64>;

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub embedding: usize,
    pub heads: usize,
    pub intermediate: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub share_layers: bool,
    pub use_token_type: bool,
    pub use_pooler: bool,
    pub dropout: f64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.num_layers == 0 {
            problems.push("num_layers must be at least 1".to_string());
        }
        if self.hidden == 0 || self.embedding == 0 || self.intermediate == 0 {
            problems.push("hidden, embedding and intermediate must be positive".to_string());
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            problems.push(format!(
                "hidden {} is not divisible by heads {}",
                self.hidden, self.heads
            ));
        }
        if self.embedding > self.hidden {
            problems.push(format!("embedding {} exceeds hidden {}", self.embedding, self.hidden));
        }
        if self.vocab_size == 0 || self.max_positions == 0 {
            problems.push("vocab_size and max_positions must be positive".to_string());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            problems.push(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn factorized(&self) -> bool {
        self.embedding != self.hidden
    }

    /// Number of physically distinct layer weight sets.
    pub fn physical_layers(&self) -> usize {
        if self.share_layers {
            1
        } else {
            self.num_layers
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn to_kv(&self) -> KvDocument {
        let mut doc = KvDocument::new();
        doc.set("num_layers", self.num_layers);
        doc.set("hidden", self.hidden);
        doc.set("embedding", self.embedding);
        doc.set("heads", self.heads);
        doc.set("intermediate", self.intermediate);
        doc.set("vocab_size", self.vocab_size);
        doc.set("max_positions", self.max_positions);
        doc.set("share_layers", self.share_layers);
        doc.set("use_token_type", self.use_token_type);
        doc.set("use_pooler", self.use_pooler);
        doc.set("dropout", self.dropout);
        doc
    }

    pub fn from_kv(doc: &KvDocument) -> Result<Self> {
        let hidden: usize = doc.require("hidden")?;
        let config = Self {
            num_layers: doc.require("num_layers")?,
            hidden,
            embedding: doc.optional("embedding", hidden)?,
            heads: doc.require("heads")?,
            intermediate: doc.optional("intermediate", 4 * hidden)?,
            vocab_size: doc.require("vocab_size")?,
            max_positions: doc.optional("max_positions", 512)?,
            share_layers: doc.require("share_layers")?,
            use_token_type: doc.optional("use_token_type", true)?,
            use_pooler: doc.optional("use_pooler", true)?,
            dropout: doc.optional("dropout", 0.0)?,
        };
        config.validate()?;
        Ok(config)
    }
}

/// The published model family plus the unshared teacher they are compared to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelPreset {
    AlbetoTiny,
    AlbetoBase,
    AlbetoLarge,
    AlbetoXlarge,
    AlbetoXxlarge,
    DistilBeto,
    BetoTeacher,
}

impl ModelPreset {
    pub const ALL: [ModelPreset; 7] = [
        ModelPreset::AlbetoTiny,
        ModelPreset::AlbetoBase,
        ModelPreset::AlbetoLarge,
        ModelPreset::AlbetoXlarge,
        ModelPreset::AlbetoXxlarge,
        ModelPreset::DistilBeto,
        ModelPreset::BetoTeacher,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelPreset::AlbetoTiny => "albeto-tiny",
            ModelPreset::AlbetoBase => "albeto-base",
            ModelPreset::AlbetoLarge => "albeto-large",
            ModelPreset::AlbetoXlarge => "albeto-xlarge",
            ModelPreset::AlbetoXxlarge => "albeto-xxlarge",
            ModelPreset::DistilBeto => "distilbeto",
            ModelPreset::BetoTeacher => "beto-teacher",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }

    /// Rounded parameter count the model is published with.
    pub fn published_parameters(self) -> u64 {
        match self {
            ModelPreset::AlbetoTiny => 5_000_000,
            ModelPreset::AlbetoBase => 12_000_000,
            ModelPreset::AlbetoLarge => 18_000_000,
            ModelPreset::AlbetoXlarge => 59_000_000,
            ModelPreset::AlbetoXxlarge => 223_000_000,
            ModelPreset::DistilBeto => 67_000_000,
            ModelPreset::BetoTeacher => 110_000_000,
        }
    }

    pub fn config(self) -> EncoderConfig {
        let shared = |layers, hidden, heads| EncoderConfig {
            num_layers: layers,
            hidden,
            embedding: 128,
            heads,
            intermediate: 4 * hidden,
            vocab_size: PRESET_VOCAB_SIZE,
            max_positions: 512,
            share_layers: true,
            use_token_type: true,
            use_pooler: true,
            dropout: 0.0,
        };
        match self {
            ModelPreset::AlbetoTiny => shared(4, 312, 12),
            ModelPreset::AlbetoBase => shared(12, 768, 12),
            ModelPreset::AlbetoLarge => shared(24, 1024, 16),
            ModelPreset::AlbetoXlarge => shared(24, 2048, 16),
            ModelPreset::AlbetoXxlarge => shared(12, 4096, 64),
            ModelPreset::DistilBeto => EncoderConfig {
                num_layers: 6,
                hidden: 768,
                embedding: 768,
                heads: 12,
                intermediate: 3072,
                vocab_size: PRESET_VOCAB_SIZE,
                max_positions: 512,
                share_layers: false,
                use_token_type: false,
                use_pooler: false,
                dropout: 0.1,
            },
            ModelPreset::BetoTeacher => EncoderConfig {
                num_layers: 12,
                hidden: 768,
                embedding: 768,
                heads: 12,
                intermediate: 3072,
                vocab_size: PRESET_VOCAB_SIZE,
                max_positions: 512,
                share_layers: false,
                use_token_type: true,
                use_pooler: true,
                dropout: 0.1,
            },
        }
    }
}

/// Exact number of trainable scalars in the embeddings, encoder stack, pooler
/// and masked-LM transform. The tied output matrix is counted once, under the
/// word embeddings; task heads are not included.
pub fn count_parameters(config: &EncoderConfig) -> u64 {
    let v = config.vocab_size as u64;
    let e = config.embedding as u64;
    let h = config.hidden as u64;
    let i = config.intermediate as u64;
    let p = config.max_positions as u64;

    let mut embeddings = v * e + p * e + 2 * e;
    if config.use_token_type {
        embeddings += 2 * e;
    }
    if config.factorized() {
        embeddings += e * h + h;
    }
    let attention = 4 * (h * h + h);
    let norms = 2 * (2 * h);
    let feed_forward = h * i + i + i * h + h;
    let layers = config.physical_layers() as u64 * (attention + norms + feed_forward);
    let pooler = if config.use_pooler { h * h + h } else { 0 };
    let mlm = h * e + e + 2 * e + v;
    embeddings + layers + pooler + mlm
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    TruncatedNormal,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl TensorSpec {
    fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

fn linear_specs(out: &mut Vec<TensorSpec>, prefix: &str, inputs: usize, outputs: usize) {
    out.push(TensorSpec::new(
        format!("{prefix}.weight"),
        &[inputs, outputs],
        Init::TruncatedNormal,
    ));
    out.push(TensorSpec::new(format!("{prefix}.bias"), &[outputs], Init::Zeros));
}

fn norm_specs(out: &mut Vec<TensorSpec>, prefix: &str, width: usize) {
    out.push(TensorSpec::new(format!("{prefix}.gain"), &[width], Init::Ones));
    out.push(TensorSpec::new(format!("{prefix}.bias"), &[width], Init::Zeros));
}

/// Prefix of the weights used by layer application `index`.
pub fn layer_prefix(config: &EncoderConfig, index: usize) -> String {
    if config.share_layers {
        "layer.0".to_string()
    } else {
        format!("layer.{index}")
    }
}

/// Every tensor `build_model` allocates, in allocation order.
pub fn parameter_layout(config: &EncoderConfig) -> Vec<TensorSpec> {
    let (v, e, h, i) = (config.vocab_size, config.embedding, config.hidden, config.intermediate);
    let mut specs = vec![
        TensorSpec::new("embeddings.word", &[v, e], Init::TruncatedNormal),
        TensorSpec::new("embeddings.position", &[config.max_positions, e], Init::TruncatedNormal),
    ];
    if config.use_token_type {
        specs.push(TensorSpec::new("embeddings.token_type", &[2, e], Init::TruncatedNormal));
    }
    norm_specs(&mut specs, "embeddings.norm", e);
    if config.factorized() {
        linear_specs(&mut specs, "embeddings.projection", e, h);
    }
    for layer in 0..config.physical_layers() {
        let prefix = format!("layer.{layer}");
        for proj in ["query", "key", "value", "output"] {
            linear_specs(&mut specs, &format!("{prefix}.attention.{proj}"), h, h);
        }
        norm_specs(&mut specs, &format!("{prefix}.attention_norm"), h);
        linear_specs(&mut specs, &format!("{prefix}.ffn.inner"), h, i);
        linear_specs(&mut specs, &format!("{prefix}.ffn.outer"), i, h);
        norm_specs(&mut specs, &format!("{prefix}.output_norm"), h);
    }
    if config.use_pooler {
        linear_specs(&mut specs, "pooler", h, h);
    }
    linear_specs(&mut specs, "mlm.transform", h, e);
    norm_specs(&mut specs, "mlm.norm", e);
    specs.push(TensorSpec::new("mlm.output_bias", &[v], Init::Zeros));
    specs
}

/// Name prefix of task and pretraining heads living next to the encoder.
pub const HEAD_PREFIX: &str = "head.";

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    config: EncoderConfig,
    tensors: BTreeMap<String, Tensor>,
}

impl ParameterSet {
    /// Assembles a set from loaded tensors, checking that exactly the encoder
    /// layout is present (plus any `head.*` tensors).
    pub fn from_tensors(config: EncoderConfig, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let layout = parameter_layout(&config);
        for spec in &layout {
            let tensor = tensors
                .get(&spec.name)
                .ok_or_else(|| Error::Shape(format!("missing tensor {}", spec.name)))?;
            if tensor.shape() != spec.shape.as_slice() {
                return Err(Error::Shape(format!(
                    "{} has shape {:?}, expected {:?}",
                    spec.name,
                    tensor.shape(),
                    spec.shape
                )));
            }
        }
        let expected = layout.len() + tensors.keys().filter(|k| k.starts_with(HEAD_PREFIX)).count();
        if tensors.len() != expected {
            let unknown: Vec<_> = tensors
                .keys()
                .filter(|k| !k.starts_with(HEAD_PREFIX) && !layout.iter().any(|s| &s.name == *k))
                .collect();
            return Err(Error::Shape(format!("unexpected tensors {unknown:?}")));
        }
        Ok(Self { config, tensors })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total allocated scalars, heads included.
    pub fn num_scalars(&self) -> u64 {
        self.tensors.values().map(|t| t.len() as u64).sum()
    }

    /// Allocated scalars excluding `head.*` tensors.
    pub fn num_encoder_scalars(&self) -> u64 {
        self.tensors
            .iter()
            .filter(|(k, _)| !k.starts_with(HEAD_PREFIX))
            .map(|(_, t)| t.len() as u64)
            .sum()
    }

    /// Adds a head tensor; the name must start with `head.`.
    pub fn insert_head(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if !name.starts_with(HEAD_PREFIX) {
            return Err(Error::InvalidArgument(format!(
                "head tensor {name:?} must start with {HEAD_PREFIX}"
            )));
        }
        self.tensors.insert(name.to_string(), tensor);
        Ok(())
    }

    pub fn has_head(&self, prefix: &str) -> bool {
        self.tensors.keys().any(|k| k.starts_with(prefix))
    }
}

/// Adds a freshly initialized `hidden -> outputs` linear layer under
/// `{prefix}.weight` / `{prefix}.bias`, replacing any existing one.
pub fn add_linear_head(params: &mut ParameterSet, prefix: &str, outputs: usize, seed: u64) -> Result<()> {
    if outputs == 0 {
        return Err(Error::InvalidArgument(format!("head {prefix} needs outputs")));
    }
    let hidden = params.config().hidden;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weight = init_tensor(&[hidden, outputs], Init::TruncatedNormal, &mut rng);
    params.insert_head(&format!("{prefix}.weight"), weight)?;
    params.insert_head(&format!("{prefix}.bias"), Tensor::zeros(IxDyn(&[outputs])))
}

/// Samples from N(0, std²) restricted to two standard deviations.
pub(crate) fn truncated_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    let normal = Normal::new(0.0, std).expect("positive std");
    loop {
        let x: f64 = normal.sample(rng);
        if x.abs() <= 2.0 * std {
            return x;
        }
    }
}

pub(crate) fn init_tensor(shape: &[usize], init: Init, rng: &mut ChaCha8Rng) -> Tensor {
    match init {
        Init::Zeros => Tensor::zeros(IxDyn(shape)),
        Init::Ones => Tensor::ones(IxDyn(shape)),
        Init::TruncatedNormal => {
            let n = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| truncated_normal(rng, INIT_STD)).collect();
            Tensor::from_shape_vec(IxDyn(shape), data).expect("shape matches length")
        }
    }
}

/// Allocates and initializes every encoder tensor. Weights are drawn from a
/// truncated normal with σ = 0.02, biases start at zero and norm gains at one.
pub fn build_model(config: &EncoderConfig, seed: u64) -> Result<ParameterSet> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = parameter_layout(config)
        .into_iter()
        .map(|spec| {
            let tensor = init_tensor(&spec.shape, spec.init, &mut rng);
            (spec.name, tensor)
        })
        .collect();
    Ok(ParameterSet {
        config: config.clone(),
        tensors,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout active, masks drawn from a generator seeded with `seed`.
    Train {
        seed: u64,
    },
}

impl Mode {
    pub fn graph<'p>(self, params: &'p ParameterSet) -> Graph<'p> {
        match self {
            Mode::Eval => Graph::new(params),
            Mode::Train { seed } => Graph::new(params).with_dropout(ChaCha8Rng::seed_from_u64(seed)),
        }
    }
}

/// Final hidden states on the tape as `(batch * seq) x hidden` rows.
#[derive(Debug, Clone, Copy)]
pub struct EncoderOutput {
    pub hidden: Var,
    pub batch: usize,
    pub seq: usize,
}

impl EncoderOutput {
    pub fn row(&self, batch_index: usize, position: usize) -> usize {
        batch_index * self.seq + position
    }
}

fn validate_batch(config: &EncoderConfig, batch: &[EncodedSequence]) -> Result<usize> {
    let first = batch
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let seq = first.len();
    if seq == 0 {
        return Err(Error::InvalidArgument("empty sequence".into()));
    }
    if seq > config.max_positions {
        return Err(Error::Shape(format!(
            "sequence length {seq} exceeds max_positions {}",
            config.max_positions
        )));
    }
    for (b, item) in batch.iter().enumerate() {
        if item.len() != seq || item.attention_mask.len() != seq || item.segment_ids.len() != seq {
            return Err(Error::Shape(format!("sequence {b} has inconsistent length")));
        }
        if let Some(&id) = item.ids.iter().find(|&&id| id as usize >= config.vocab_size) {
            return Err(Error::Shape(format!(
                "token id {id} in sequence {b} outside vocabulary of {}",
                config.vocab_size
            )));
        }
        if item.segment_ids.iter().any(|&s| s > 1) {
            return Err(Error::Shape(format!("sequence {b} has a segment id above 1")));
        }
    }
    Ok(seq)
}

/// Drops trailing columns that are padding in every sequence of the batch.
pub fn trim_padding(batch: &mut [EncodedSequence]) {
    let keep = batch
        .iter()
        .map(|s| s.attention_mask.iter().rposition(|&m| m == 1).map_or(1, |p| p + 1))
        .max()
        .unwrap_or(0);
    for s in batch.iter_mut() {
        s.ids.truncate(keep);
        s.attention_mask.truncate(keep);
        s.segment_ids.truncate(keep);
        s.char_offsets.truncate(keep);
    }
}

/// Runs the encoder on the tape bound to the model's parameters.
pub fn encode_on_tape(g: &mut Graph<'_>, batch: &[EncodedSequence]) -> Result<EncoderOutput> {
    let config = g
        .params()
        .ok_or_else(|| Error::InvalidArgument("graph has no parameters".into()))?
        .config()
        .clone();
    let seq = validate_batch(&config, batch)?;
    let ids: Vec<usize> = batch.iter().flat_map(|s| s.ids.iter().map(|&id| id as usize)).collect();
    let positions: Vec<usize> = (0..batch.len()).flat_map(|_| 0..seq).collect();
    let key_mask: Vec<bool> = batch
        .iter()
        .flat_map(|s| s.attention_mask.iter().map(|&m| m == 1))
        .collect();

    let word = g.param("embeddings.word")?;
    let mut x = g.gather(word, &ids)?;
    let pos_table = g.param("embeddings.position")?;
    let pos = g.gather(pos_table, &positions)?;
    x = g.add(x, pos)?;
    if config.use_token_type {
        let segments: Vec<usize> = batch
            .iter()
            .flat_map(|s| s.segment_ids.iter().map(|&t| t as usize))
            .collect();
        let table = g.param("embeddings.token_type")?;
        let tt = g.gather(table, &segments)?;
        x = g.add(x, tt)?;
    }
    x = norm(g, x, "embeddings.norm")?;
    x = g.dropout(x, config.dropout);
    if config.factorized() {
        x = dense(g, x, "embeddings.projection")?;
    }

    for layer in 0..config.num_layers {
        let prefix = layer_prefix(&config, layer);
        let q = dense(g, x, &format!("{prefix}.attention.query"))?;
        let k = dense(g, x, &format!("{prefix}.attention.key"))?;
        let v = dense(g, x, &format!("{prefix}.attention.value"))?;
        let ctx = g.attention(q, k, v, seq, config.heads, &key_mask)?;
        let attn = dense(g, ctx, &format!("{prefix}.attention.output"))?;
        let attn = g.dropout(attn, config.dropout);
        let res = g.add(x, attn)?;
        x = norm(g, res, &format!("{prefix}.attention_norm"))?;

        let inner = dense(g, x, &format!("{prefix}.ffn.inner"))?;
        let inner = g.gelu(inner);
        let outer = dense(g, inner, &format!("{prefix}.ffn.outer"))?;
        let outer = g.dropout(outer, config.dropout);
        let res = g.add(x, outer)?;
        x = norm(g, res, &format!("{prefix}.output_norm"))?;
    }
    Ok(EncoderOutput {
        hidden: x,
        batch: batch.len(),
        seq,
    })
}

/// `x · W + b` with the `{prefix}.weight` / `{prefix}.bias` parameters.
pub fn dense(g: &mut Graph<'_>, x: Var, prefix: &str) -> Result<Var> {
    let w = g.param(&format!("{prefix}.weight"))?;
    let b = g.param(&format!("{prefix}.bias"))?;
    g.linear(x, w, b)
}

fn norm(g: &mut Graph<'_>, x: Var, prefix: &str) -> Result<Var> {
    let gain = g.param(&format!("{prefix}.gain"))?;
    let bias = g.param(&format!("{prefix}.bias"))?;
    g.layer_norm(x, gain, bias)
}

/// Masked-LM logits at `(batch index, position)` pairs: transform, GELU,
/// norm, then the tied word-embedding projection plus output bias.
pub fn mlm_logits_on_tape(g: &mut Graph<'_>, out: &EncoderOutput, positions: &[(usize, usize)]) -> Result<Var> {
    let mut rows = Vec::with_capacity(positions.len());
    for &(b, p) in positions {
        if b >= out.batch || p >= out.seq {
            return Err(Error::InvalidArgument(format!(
                "position ({b}, {p}) outside {}x{}",
                out.batch, out.seq
            )));
        }
        rows.push(out.row(b, p));
    }
    let x = g.gather(out.hidden, &rows)?;
    let x = dense(g, x, "mlm.transform")?;
    let x = g.gelu(x);
    let x = norm(g, x, "mlm.norm")?;
    let word = g.param("embeddings.word")?;
    let logits = g.matmul_bt(x, word)?;
    let bias = g.param("mlm.output_bias")?;
    g.add_row(logits, bias)
}

/// `[CLS]` representation: pooler output when the model has a pooler,
/// otherwise the raw final hidden state.
pub fn pooled_on_tape(g: &mut Graph<'_>, out: &EncoderOutput) -> Result<Var> {
    let rows: Vec<usize> = (0..out.batch).map(|b| out.row(b, 0)).collect();
    let cls = g.gather(out.hidden, &rows)?;
    let use_pooler = g.params().is_some_and(|p| p.config().use_pooler);
    if use_pooler {
        let x = dense(g, cls, "pooler")?;
        Ok(g.tanh(x))
    } else {
        Ok(cls)
    }
}

/// Final hidden states as a `batch x seq x hidden` array.
pub fn forward(params: &ParameterSet, batch: &[EncodedSequence], mode: Mode) -> Result<Array3<f64>> {
    let mut g = mode.graph(params);
    let out = encode_on_tape(&mut g, batch)?;
    let hidden = g.value(out.hidden).clone();
    let width = hidden.ncols();
    Ok(hidden
        .into_shape_with_order((out.batch, out.seq, width))
        .expect("rows are batch * seq"))
}

/// Eval-mode masked-LM logits for the given positions.
pub fn mlm_logits(
    params: &ParameterSet,
    batch: &[EncodedSequence],
    positions: &[(usize, usize)],
) -> Result<Array2<f64>> {
    let mut g = Graph::frozen(params);
    let out = encode_on_tape(&mut g, batch)?;
    let logits = mlm_logits_on_tape(&mut g, &out, positions)?;
    Ok(g.value(logits).clone())
}

/// Gradients laid out exactly like the [`ParameterSet`] they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    tensors: BTreeMap<String, Tensor>,
}

impl GradientSet {
    pub fn zeros_like(params: &ParameterSet) -> Self {
        Self {
            tensors: params
                .iter()
                .map(|(k, t)| (k.to_string(), Tensor::zeros(t.raw_dim())))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn add_assign(&mut self, other: &GradientSet) -> Result<()> {
        for (name, g) in &mut self.tensors {
            let o = other
                .tensors
                .get(name)
                .ok_or_else(|| Error::Shape(format!("gradient for {name} missing")))?;
            *g += o;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.tensors.values_mut() {
            *g *= factor;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.iter().all(|x| x.is_finite()))
    }
}

/// Evaluates a scalar loss built on a tape bound to `params` and returns it
/// with the gradient of every parameter (zero for parameters the loss does not
/// touch).
pub fn gradients<F>(params: &ParameterSet, mode: Mode, loss_fn: F) -> Result<(f64, GradientSet)>
where
    F: FnOnce(&mut Graph<'_>) -> Result<Var>,
{
    let mut g = mode.graph(params);
    let loss = loss_fn(&mut g)?;
    let value = g.scalar(loss);
    let raw = g.backward(loss)?;
    let mut set = GradientSet::zeros_like(params);
    for (name, grad) in raw {
        let target = set
            .tensors
            .get_mut(&name)
            .ok_or_else(|| Error::Shape(format!("gradient for unknown {name}")))?;
        let shaped = grad
            .into_shape_with_order(target.raw_dim())
            .map_err(|e| Error::Shape(format!("{name}: {e}")))?;
        *target = shaped;
    }
    Ok((value, set))
}
