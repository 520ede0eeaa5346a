//! Tiny conditional decoder-only transformer.
//!
//! Three parameter components:
//!
//! * `cond_encoder`: embeds the three condition ids and refines them with a
//!   residual GELU MLP.
//! * `decoder_blocks`: token and position embeddings, pre-norm blocks of
//!   causal self-attention, cross-attention over the encoded condition and a
//!   GELU MLP, and a final layer norm.
//! * `output_head`: projection to vocabulary logits.
//!
//! Gradients are derived by hand in [`transformer`] and checked against
//! central differences in the tests.

mod transformer;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpus::{vocab, TokenSequence};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub(crate) use transformer::{backward_seq, forward_seq};

/// Hidden width multiplier of every MLP.
pub const FFN_MULT: usize = 4;
/// Length of the encoded condition sequence.
pub const COND_LEN: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Component {
    CondEncoder,
    DecoderBlocks,
    OutputHead,
}

impl Component {
    pub const ALL: [Component; 3] = [
        Component::CondEncoder,
        Component::DecoderBlocks,
        Component::OutputHead,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Component::CondEncoder => "cond_encoder",
            Component::DecoderBlocks => "decoder_blocks",
            Component::OutputHead => "output_head",
        }
    }

    pub fn code(&self) -> u8 {
        match self {
            Component::CondEncoder => 0,
            Component::DecoderBlocks => 1,
            Component::OutputHead => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Component::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Component::ALL
            .iter()
            .copied()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown component `{s}`")))
    }
}

/// Parameter group of a tensor: the first two dotted segments of its name.
pub fn group_of(name: &str) -> &str {
    match name.match_indices('.').nth(1) {
        Some((i, _)) => &name[..i],
        None => name,
    }
}

/// Architecture hyperparameters plus the component assignment of every
/// parameter group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_len: usize,
    pub cond_vocab: usize,
    pub component_tags: BTreeMap<String, Component>,
}

impl ModelSpec {
    pub fn new(
        vocab_size: usize,
        d_model: usize,
        n_layers: usize,
        n_heads: usize,
        max_len: usize,
        cond_vocab: usize,
    ) -> Result<Self> {
        let tags = [
            ("cond.embed", Component::CondEncoder),
            ("cond.pos", Component::CondEncoder),
            ("cond.mlp", Component::CondEncoder),
            ("dec.embed", Component::DecoderBlocks),
            ("dec.layers", Component::DecoderBlocks),
            ("dec.norm", Component::DecoderBlocks),
            ("head.proj", Component::OutputHead),
        ]
        .into_iter()
        .map(|(g, c)| (g.to_string(), c))
        .collect();
        Self::with_tags(vocab_size, d_model, n_layers, n_heads, max_len, cond_vocab, tags)
    }

    pub fn with_tags(
        vocab_size: usize,
        d_model: usize,
        n_layers: usize,
        n_heads: usize,
        max_len: usize,
        cond_vocab: usize,
        component_tags: BTreeMap<String, Component>,
    ) -> Result<Self> {
        let spec = Self {
            vocab_size,
            d_model,
            n_layers,
            n_heads,
            max_len,
            cond_vocab,
            component_tags,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Teacher: width 128, four layers, four heads.
    pub fn teacher_default() -> Self {
        Self::new(vocab::SIZE, 128, 4, 4, 128, vocab::COND_SIZE).expect("default teacher spec is valid")
    }

    /// Student: width 64, two layers, four heads.
    pub fn student_default() -> Self {
        Self::new(vocab::SIZE, 64, 2, 4, 128, vocab::COND_SIZE).expect("default student spec is valid")
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("max_len", self.max_len),
            ("cond_vocab", self.cond_vocab),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::invalid(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.cond_vocab < vocab::COND_SIZE {
            return Err(Error::invalid(format!(
                "cond_vocab {} is smaller than the {} condition ids",
                self.cond_vocab,
                vocab::COND_SIZE
            )));
        }
        let groups: std::collections::BTreeSet<String> = self
            .layout()
            .iter()
            .map(|(n, _)| group_of(n).to_string())
            .collect();
        for g in &groups {
            if !self.component_tags.contains_key(g) {
                return Err(Error::invalid(format!("parameter group `{g}` has no component tag")));
            }
        }
        for g in self.component_tags.keys() {
            if !groups.contains(g) {
                return Err(Error::invalid(format!("component tag for unknown group `{g}`")));
            }
        }
        for c in Component::ALL {
            if !self.component_tags.values().any(|v| *v == c) {
                return Err(Error::invalid(format!("no parameter group is tagged {c}")));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn component_of(&self, tensor_name: &str) -> Component {
        self.component_tags[group_of(tensor_name)]
    }

    /// Every parameter tensor, in canonical order, with its shape.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let ff = FFN_MULT * d;
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();
        let mut push = |name: String, shape: Vec<usize>| out.push((name, shape));
        push("cond.embed.table".into(), vec![self.cond_vocab, d]);
        push("cond.pos.table".into(), vec![COND_LEN, d]);
        push("cond.mlp.w_in".into(), vec![ff, d]);
        push("cond.mlp.b_in".into(), vec![ff]);
        push("cond.mlp.w_out".into(), vec![d, ff]);
        push("cond.mlp.b_out".into(), vec![d]);
        push("dec.embed.tokens".into(), vec![self.vocab_size, d]);
        push("dec.embed.positions".into(), vec![self.max_len, d]);
        for l in 0..self.n_layers {
            let p = format!("dec.layers.{l}");
            push(format!("{p}.ln1.gain"), vec![d]);
            push(format!("{p}.ln1.bias"), vec![d]);
            for m in ["wq", "wk", "wv", "wo"] {
                push(format!("{p}.attn.{m}"), vec![d, d]);
            }
            push(format!("{p}.ln2.gain"), vec![d]);
            push(format!("{p}.ln2.bias"), vec![d]);
            for m in ["wq", "wk", "wv", "wo"] {
                push(format!("{p}.xattn.{m}"), vec![d, d]);
            }
            push(format!("{p}.ln3.gain"), vec![d]);
            push(format!("{p}.ln3.bias"), vec![d]);
            push(format!("{p}.mlp.w_in"), vec![ff, d]);
            push(format!("{p}.mlp.b_in"), vec![ff]);
            push(format!("{p}.mlp.w_out"), vec![d, ff]);
            push(format!("{p}.mlp.b_out"), vec![d]);
        }
        push("dec.norm.gain".into(), vec![d]);
        push("dec.norm.bias".into(), vec![d]);
        push("head.proj.weight".into(), vec![self.vocab_size, d]);
        push("head.proj.bias".into(), vec![self.vocab_size]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// Parameters per component; the counts partition the total.
pub fn param_count_by_component(spec: &ModelSpec) -> BTreeMap<Component, usize> {
    let mut out: BTreeMap<Component, usize> = Component::ALL.iter().map(|c| (*c, 0)).collect();
    for (name, shape) in spec.layout() {
        *out.get_mut(&spec.component_of(&name)).expect("all components present") +=
            shape.iter().product::<usize>();
    }
    out
}

/// Tensor indices into the canonical layout.
pub(crate) mod idx {
    pub const COND_TABLE: usize = 0;
    pub const COND_POS: usize = 1;
    pub const COND_W_IN: usize = 2;
    pub const COND_B_IN: usize = 3;
    pub const COND_W_OUT: usize = 4;
    pub const COND_B_OUT: usize = 5;
    pub const TOK: usize = 6;
    pub const POS: usize = 7;
    const LAYER_BASE: usize = 8;
    pub const PER_LAYER: usize = 18;

    pub const LN1_G: usize = 0;
    pub const LN1_B: usize = 1;
    pub const WQ: usize = 2;
    pub const WK: usize = 3;
    pub const WV: usize = 4;
    pub const WO: usize = 5;
    pub const LN2_G: usize = 6;
    pub const LN2_B: usize = 7;
    pub const XWQ: usize = 8;
    pub const XWK: usize = 9;
    pub const XWV: usize = 10;
    pub const XWO: usize = 11;
    pub const LN3_G: usize = 12;
    pub const LN3_B: usize = 13;
    pub const MLP_W_IN: usize = 14;
    pub const MLP_B_IN: usize = 15;
    pub const MLP_W_OUT: usize = 16;
    pub const MLP_B_OUT: usize = 17;

    pub fn layer(l: usize, which: usize) -> usize {
        LAYER_BASE + l * PER_LAYER + which
    }

    pub fn norm_gain(n_layers: usize) -> usize {
        LAYER_BASE + n_layers * PER_LAYER
    }

    pub fn head_weight(n_layers: usize) -> usize {
        norm_gain(n_layers) + 2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// All parameters of one model, in the canonical layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    spec: ModelSpec,
    seed: u64,
    tensors: Vec<Tensor>,
}

impl ModelWeights {
    /// Deterministic initialization: uniform `+-1/sqrt(fan_in)` for matrices,
    /// zeros for biases, ones for norm gains. Values are rounded to binary32
    /// so full-precision checkpoints store them exactly.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = spec
            .layout()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data = if shape.len() == 2 {
                    let bound = 1.0 / (shape[1] as f64).sqrt();
                    (0..n)
                        .map(|_| round_f32(rng.gen_range(-bound..bound)))
                        .collect()
                } else if name.ends_with("gain") {
                    vec![1.0; n]
                } else {
                    vec![0.0; n]
                };
                Tensor { name, shape, data }
            })
            .collect();
        Ok(Self { spec: spec.clone(), seed, tensors })
    }

    /// Assembles weights from named tensors; order and shapes must match the
    /// spec's layout.
    pub fn from_tensors(spec: ModelSpec, seed: u64, tensors: Vec<Tensor>) -> Result<Self> {
        spec.validate()?;
        let layout = spec.layout();
        if layout.len() != tensors.len() {
            return Err(Error::invalid(format!(
                "expected {} tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if *name != t.name || *shape != t.shape || t.data.len() != shape.iter().product::<usize>() {
                return Err(Error::invalid(format!(
                    "tensor `{}` {:?} does not match layout entry `{name}` {shape:?}",
                    t.name, t.shape
                )));
            }
            crate::tensor::ensure_finite(&t.data, &t.name)?;
        }
        Ok(Self { spec, seed, tensors })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub(crate) fn p(&self, i: usize) -> &[f64] {
        &self.tensors[i].data
    }

    #[cfg(test)]
    pub(crate) fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Little-endian bytes of every value, for bitwise comparisons.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.tensors
            .iter()
            .flat_map(|t| t.data.iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    }

    /// Applies `p -= lr * g` and rounds back to binary32 storage precision.
    pub(crate) fn sgd_step(&mut self, grads: &Gradients, lr: f64) {
        for (t, g) in self.tensors.iter_mut().zip(&grads.tensors) {
            for (p, gi) in t.data.iter_mut().zip(g) {
                *p = round_f32(*p - lr * gi);
            }
        }
    }
}

pub(crate) fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// Parameter gradients aligned with [`ModelWeights::tensors`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(w: &ModelWeights) -> Self {
        Self {
            tensors: w.tensors.iter().map(|t| vec![0.0; t.numel()]).collect(),
        }
    }

    pub fn add(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            crate::tensor::add_assign(a, b);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.tensors
            .iter_mut()
            .flatten()
            .for_each(|v| *v *= factor);
    }

    pub fn norm(&self) -> f64 {
        self.tensors.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Rescales so the global norm is at most `max_norm`.
    pub fn clip(&mut self, max_norm: f64) {
        let n = self.norm();
        if n > max_norm {
            self.scale(max_norm / n);
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flatten().copied().collect()
    }
}

fn validate_batch(w: &ModelWeights, batch: &[TokenSequence], dropped: &[bool]) -> Result<()> {
    if batch.len() != dropped.len() {
        return Err(Error::invalid(format!(
            "{} sequences but {} condition-dropped flags",
            batch.len(),
            dropped.len()
        )));
    }
    for (b, seq) in batch.iter().enumerate() {
        validate_tokens(w.spec(), &seq.tokens).map_err(|e| Error::invalid(format!("sequence {b}: {e}")))?;
    }
    Ok(())
}

pub(crate) fn validate_tokens(spec: &ModelSpec, tokens: &[u32]) -> Result<()> {
    if tokens.len() > spec.max_len {
        return Err(Error::invalid(format!(
            "length {} exceeds max_len {}",
            tokens.len(),
            spec.max_len
        )));
    }
    if let Some(t) = tokens.iter().find(|&&t| t as usize >= spec.vocab_size) {
        return Err(Error::invalid(format!(
            "token {t} outside vocabulary of {}",
            spec.vocab_size
        )));
    }
    Ok(())
}

pub(crate) fn cond_ids(seq: &TokenSequence, dropped: bool) -> [usize; COND_LEN] {
    if dropped {
        [vocab::COND_NULL; COND_LEN]
    } else {
        seq.condition.cond_ids()
    }
}

/// Logits for every position of every sequence (`len x vocab_size` each).
/// A dropped condition is replaced by the learned null embedding.
pub fn forward(w: &ModelWeights, batch: &[TokenSequence], condition_dropped: &[bool]) -> Result<Vec<Matrix>> {
    validate_batch(w, batch, condition_dropped)?;
    let v = w.spec().vocab_size;
    Ok(batch
        .par_iter()
        .zip(condition_dropped.par_iter())
        .map(|(seq, &drop)| {
            let (logits, _) = forward_seq(w, &seq.tokens, cond_ids(seq, drop));
            Matrix { rows: seq.tokens.len(), cols: v, data: logits }
        })
        .collect())
}

/// Parameter gradients of `sum_b sum_i <logit_grads[b][i], logits[b][i]>`.
pub fn backward(
    w: &ModelWeights,
    batch: &[TokenSequence],
    condition_dropped: &[bool],
    logit_grads: &[Matrix],
) -> Result<Gradients> {
    validate_batch(w, batch, condition_dropped)?;
    if logit_grads.len() != batch.len() {
        return Err(Error::invalid(format!(
            "{} gradient matrices for {} sequences",
            logit_grads.len(),
            batch.len()
        )));
    }
    for (b, (g, seq)) in logit_grads.iter().zip(batch).enumerate() {
        if g.rows != seq.tokens.len() || g.cols != w.spec().vocab_size || g.data.len() != g.rows * g.cols {
            return Err(Error::invalid(format!(
                "gradient {b} has shape {}x{}, expected {}x{}",
                g.rows,
                g.cols,
                seq.tokens.len(),
                w.spec().vocab_size
            )));
        }
    }
    let per_item = |b: usize| {
        let ids = cond_ids(&batch[b], condition_dropped[b]);
        let (_, cache) = forward_seq(w, &batch[b].tokens, ids);
        let mut g = Gradients::zeros_like(w);
        backward_seq(w, &cache, &logit_grads[b].data, &mut g);
        Ok((g, 0.0))
    };
    Ok(sum_in_order(w, batch.len(), per_item)?.0)
}

/// Sums per-item gradients in item order, evaluating a few items at a time
/// in parallel, and returns the per-item scalars alongside. The result does
/// not depend on the thread count.
pub(crate) fn sum_in_order<F>(w: &ModelWeights, n: usize, per_item: F) -> Result<(Gradients, Vec<f64>)>
where
    F: Fn(usize) -> Result<(Gradients, f64)> + Sync,
{
    let mut total = Gradients::zeros_like(w);
    let mut values = Vec::with_capacity(n);
    let chunk = rayon::current_num_threads().max(1);
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let parts: Vec<Result<(Gradients, f64)>> = (start..end).into_par_iter().map(&per_item).collect();
        for p in parts {
            let (g, v) = p?;
            total.add(&g);
            values.push(v);
        }
        start = end;
    }
    Ok((total, values))
}

#[cfg(test)]
mod tests;
