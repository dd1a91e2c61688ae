//! Toy decoder-only student model: symbol-level tokenizer over the closed
//! task grammar, causal transformer blocks with pre-normalization, tied
//! embeddings, chain embedding extraction, and generation.
//!
//! The student is the only component used at inference time.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{ParamId, ParamSet, Tape, Tensor, TensorError, ValueId};

/// Reserved token ids.
pub const PAD: usize = 0;
/// Separates the question from the reasoning chain.
pub const SEP: usize = 1;
/// Begin-of-answer marker inside a chain.
pub const ANS: usize = 2;
/// End of sequence.
pub const EOS: usize = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<sep>", "<ans>", "<eos>"];

/// Closure of the task grammars: digits, operators, and the letters used by
/// the step keywords.
const GRAMMAR_CHARS: &str = "0123456789 +-=;:,()?ademnorswx";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown symbol {symbol:?} at position {position}")]
    UnknownSymbol { symbol: char, position: usize },
    #[error("token id {id} out of vocabulary range")]
    UnknownTokenId { id: usize },
    #[error("token id {id} is reserved and cannot be decoded to text")]
    SpecialInDecode { id: usize },
    #[error("sequence of {needed} tokens exceeds context {context}")]
    ContextOverflow { needed: usize, context: usize },
    #[error("chain is empty")]
    EmptyChain,
    #[error("batch is empty")]
    EmptyBatch,
    #[error("model width {width} not divisible by {heads} heads")]
    BadHeadSplit { width: usize, heads: usize },
    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),
    #[error("parameter set mismatch: {0}")]
    ParamMismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Bijection between grammar symbols and token ids, with reserved specials.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    symbols: Vec<String>,
}

impl Vocab {
    /// The fixed vocabulary covering every built-in task family.
    pub fn default_grammar() -> Self {
        let mut symbols: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        symbols.extend(GRAMMAR_CHARS.chars().map(String::from));
        Self { symbols }
    }

    /// Rebuild a vocabulary from checkpoint symbols.
    pub fn from_symbols(symbols: Vec<String>) -> Result<Self, ModelError> {
        if symbols.len() < SPECIALS.len() {
            return Err(ModelError::VocabMismatch("too few symbols".into()));
        }
        for (i, expected) in SPECIALS.iter().enumerate() {
            if symbols[i] != *expected {
                return Err(ModelError::VocabMismatch(format!(
                    "reserved slot {i} holds {:?}, expected {expected:?}",
                    symbols[i]
                )));
            }
        }
        Ok(Self { symbols })
    }

    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    fn id_of_char(&self, c: char) -> Option<usize> {
        let needle = c.to_string();
        self.symbols[SPECIALS.len()..]
            .iter()
            .position(|s| *s == needle)
            .map(|p| p + SPECIALS.len())
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>, ModelError> {
        text.chars()
            .enumerate()
            .map(|(position, c)| {
                self.id_of_char(c)
                    .ok_or(ModelError::UnknownSymbol { symbol: c, position })
            })
            .collect()
    }

    /// Inverse of `encode`; reserved ids are rejected.
    pub fn decode(&self, ids: &[usize]) -> Result<String, ModelError> {
        let mut out = String::with_capacity(ids.len());
        for &id in ids {
            if id >= self.symbols.len() {
                return Err(ModelError::UnknownTokenId { id });
            }
            if id < SPECIALS.len() {
                return Err(ModelError::SpecialInDecode { id });
            }
            out.push_str(&self.symbols[id]);
        }
        Ok(out)
    }

    /// Decode for display, dropping reserved ids instead of failing.
    pub fn decode_lossy(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| id >= SPECIALS.len() && id < self.symbols.len())
            .map(|&id| self.symbols[id].as_str())
            .collect()
    }

    /// Token ids of one node's chain: reasoning, begin-of-answer marker,
    /// answer, end-of-sequence.
    pub fn chain_ids(&self, reasoning: &str, answer: &str) -> Result<Vec<usize>, ModelError> {
        let mut ids = self.encode(reasoning)?;
        ids.push(ANS);
        ids.extend(self.encode(answer)?);
        ids.push(EOS);
        Ok(ids)
    }
}

/// Student dimensions. Width must split evenly across heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub context: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 32,
            heads: 4,
            layers: 2,
            context: 256,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(ModelError::BadHeadSplit {
                width: self.width,
                heads: self.heads,
            });
        }
        Ok(())
    }

    fn ffn_width(&self) -> usize {
        4 * self.width
    }
}

/// Decoder-only student language model.
#[derive(Debug, Clone)]
pub struct StudentModel {
    pub cfg: ModelConfig,
    pub vocab: Vocab,
    pub params: ParamSet,
}

/// Forward products for one (question, chain) sequence.
pub struct LmOut {
    /// `[seq, V]` next-token logits per position.
    pub logits: ValueId,
    /// `[seq, d]` final-layer hidden states per position.
    pub hidden: ValueId,
    /// The full token sequence `question ++ SEP ++ chain`.
    pub seq: Vec<usize>,
    /// Length of the question prefix (excluding the separator).
    pub q_len: usize,
}

/// Output of `generate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub chain: String,
    pub answer: String,
    /// Newly produced tokens, reserved markers included.
    pub n_tokens: usize,
}

/// Decoding strategy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecodeMode {
    Greedy,
    /// Temperature 0 degenerates to greedy.
    Sample { temperature: f64 },
}

fn expected_param_shapes(cfg: &ModelConfig, vocab_size: usize) -> Vec<(String, Vec<usize>)> {
    let d = cfg.width;
    let f = cfg.ffn_width();
    let mut shapes = vec![
        ("tok_emb".to_string(), vec![vocab_size, d]),
        ("pos_emb".to_string(), vec![cfg.context, d]),
    ];
    for b in 0..cfg.layers {
        // Attention projections carry no biases: a key bias in particular is
        // a softmax shift-invariance null direction, and the normalization
        // biases already provide shifts.
        for (suffix, shape) in [
            ("ln1.g", vec![d]),
            ("ln1.b", vec![d]),
            ("attn.wq", vec![d, d]),
            ("attn.wk", vec![d, d]),
            ("attn.wv", vec![d, d]),
            ("attn.wo", vec![d, d]),
            ("attn.bo", vec![d]),
            ("ln2.g", vec![d]),
            ("ln2.b", vec![d]),
            ("ffn.w1", vec![d, f]),
            ("ffn.b1", vec![f]),
            ("ffn.w2", vec![f, d]),
            ("ffn.b2", vec![d]),
        ] {
            shapes.push((format!("blk{b}.{suffix}"), shape));
        }
    }
    shapes.push(("lnf.g".to_string(), vec![d]));
    shapes.push(("lnf.b".to_string(), vec![d]));
    shapes
}

fn init_tensor(name: &str, shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let last = name.rsplit('.').next().unwrap_or(name);
    if last == "g" {
        return Tensor::filled(shape, 1.0);
    }
    if last.starts_with('b') {
        return Tensor::zeros(shape);
    }
    let std = match name {
        "tok_emb" => 0.08,
        "pos_emb" => 0.02,
        _ => {
            let fan_in = shape[0] as f64;
            1.0 / fan_in.sqrt()
        }
    };
    let normal = Normal::new(0.0, std).expect("valid std");
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

impl StudentModel {
    /// Fresh model with seeded random initialization.
    pub fn init(cfg: ModelConfig, vocab: Vocab, rng: &mut ChaCha8Rng) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        for (name, shape) in expected_param_shapes(&cfg, vocab.size()) {
            let tensor = init_tensor(&name, &shape, rng);
            params.insert(name, tensor);
        }
        Ok(Self { cfg, vocab, params })
    }

    /// All-zero parameters (gains included): every logit is exactly zero, so
    /// the output distribution is exactly uniform. Used by loss identities.
    pub fn init_zero(cfg: ModelConfig, vocab: Vocab) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        for (name, shape) in expected_param_shapes(&cfg, vocab.size()) {
            params.insert(name, Tensor::zeros(&shape));
        }
        Ok(Self { cfg, vocab, params })
    }

    /// Reassemble a model from checkpoint parts, checking names and shapes.
    pub fn from_parts(
        cfg: ModelConfig,
        vocab: Vocab,
        params: ParamSet,
    ) -> Result<Self, ModelError> {
        cfg.validate()?;
        let expected = expected_param_shapes(&cfg, vocab.size());
        if params.len() != expected.len() {
            return Err(ModelError::ParamMismatch(format!(
                "{} parameters, expected {}",
                params.len(),
                expected.len()
            )));
        }
        for (id, (name, shape)) in params.ids().zip(expected.iter()) {
            if params.name(id) != name || params.get(id).shape() != shape.as_slice() {
                return Err(ModelError::ParamMismatch(format!(
                    "parameter {} {:?}, expected {name} {shape:?}",
                    params.name(id),
                    params.get(id).shape(),
                )));
            }
        }
        Ok(Self { cfg, vocab, params })
    }

    pub fn n_params(&self) -> usize {
        self.params.n_scalars()
    }

    fn pid(&self, params: &ParamSet, name: &str) -> ParamId {
        params.id_of(name).expect("validated parameter layout")
    }

    /// Forward pass over `ids` with an explicit parameter set (gradient
    /// checks run this against perturbed copies).
    pub fn forward_with(
        &self,
        tape: &Tape,
        params: &ParamSet,
        ids: &[usize],
    ) -> Result<(ValueId, ValueId), ModelError> {
        let t = ids.len();
        if t == 0 {
            return Err(ModelError::EmptyChain);
        }
        if t > self.cfg.context {
            return Err(ModelError::ContextOverflow {
                needed: t,
                context: self.cfg.context,
            });
        }
        let d = self.cfg.width;
        let heads = self.cfg.heads;
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();

        let tok_emb = tape.param(params, self.pid(params, "tok_emb"));
        let pos_emb = tape.param(params, self.pid(params, "pos_emb"));
        let positions: Vec<usize> = (0..t).collect();
        let tok = tape.gather(tok_emb, ids)?;
        let pos = tape.gather(pos_emb, &positions)?;
        let mut x = tape.add(tok, pos)?;

        // 0 where attention is allowed (j <= i), a large negative elsewhere.
        let mut mask = vec![0.0; t * t];
        for i in 0..t {
            for j in (i + 1)..t {
                mask[i * t + j] = -1e9;
            }
        }
        let causal = tape.leaf(Tensor::new(vec![t, t], mask)?);

        for b in 0..self.cfg.layers {
            let ln1 = self.affine_norm(tape, params, x, &format!("blk{b}.ln1"))?;
            let q = self.project(tape, params, ln1, &format!("blk{b}.attn.wq"))?;
            let k = self.project(tape, params, ln1, &format!("blk{b}.attn.wk"))?;
            let v = self.project(tape, params, ln1, &format!("blk{b}.attn.wv"))?;
            let mut head_outputs = Vec::with_capacity(heads);
            for h in 0..heads {
                let lo = h * dk;
                let hi = (h + 1) * dk;
                let qh = tape.slice(q, 1, lo, hi)?;
                let kh = tape.slice(k, 1, lo, hi)?;
                let vh = tape.slice(v, 1, lo, hi)?;
                let kt = tape.transpose(kh)?;
                let scores = tape.matmul(qh, kt)?;
                let scores = tape.scale(scores, scale)?;
                let scores = tape.add(scores, causal)?;
                let attn = tape.softmax(scores)?;
                head_outputs.push(tape.matmul(attn, vh)?);
            }
            let ctx = tape.concat(&head_outputs, 1)?;
            let proj = self.linear(tape, params, ctx, &format!("blk{b}.attn.wo"), &format!("blk{b}.attn.bo"))?;
            x = tape.add(x, proj)?;

            let ln2 = self.affine_norm(tape, params, x, &format!("blk{b}.ln2"))?;
            let h1 = self.linear(tape, params, ln2, &format!("blk{b}.ffn.w1"), &format!("blk{b}.ffn.b1"))?;
            let h1 = tape.relu(h1)?;
            let h2 = self.linear(tape, params, h1, &format!("blk{b}.ffn.w2"), &format!("blk{b}.ffn.b2"))?;
            x = tape.add(x, h2)?;
        }

        let hidden = self.affine_norm(tape, params, x, "lnf")?;
        // Output projection tied to the token embeddings.
        let emb_t = tape.transpose(tok_emb)?;
        let logits = tape.matmul(hidden, emb_t)?;
        Ok((logits, hidden))
    }

    fn linear(
        &self,
        tape: &Tape,
        params: &ParamSet,
        x: ValueId,
        w: &str,
        b: &str,
    ) -> Result<ValueId, ModelError> {
        let y = self.project(tape, params, x, w)?;
        let bv = tape.param(params, self.pid(params, b));
        Ok(tape.add_row(y, bv)?)
    }

    fn project(
        &self,
        tape: &Tape,
        params: &ParamSet,
        x: ValueId,
        w: &str,
    ) -> Result<ValueId, ModelError> {
        let wv = tape.param(params, self.pid(params, w));
        Ok(tape.matmul(x, wv)?)
    }

    fn affine_norm(
        &self,
        tape: &Tape,
        params: &ParamSet,
        x: ValueId,
        prefix: &str,
    ) -> Result<ValueId, ModelError> {
        let g = tape.param(params, self.pid(params, &format!("{prefix}.g")));
        let b = tape.param(params, self.pid(params, &format!("{prefix}.b")));
        let normed = tape.layer_norm(x)?;
        let scaled = tape.mul_row(normed, g)?;
        Ok(tape.add_row(scaled, b)?)
    }

    /// Forward over `question ++ SEP ++ chain`; question positions are never
    /// scored by the losses built on top.
    pub fn lm_forward(
        &self,
        tape: &Tape,
        params: &ParamSet,
        question_ids: &[usize],
        chain_ids: &[usize],
    ) -> Result<LmOut, ModelError> {
        if chain_ids.is_empty() {
            return Err(ModelError::EmptyChain);
        }
        let mut seq = Vec::with_capacity(question_ids.len() + 1 + chain_ids.len());
        seq.extend_from_slice(question_ids);
        seq.push(SEP);
        seq.extend_from_slice(chain_ids);
        let (logits, hidden) = self.forward_with(tape, params, &seq)?;
        Ok(LmOut {
            logits,
            hidden,
            seq,
            q_len: question_ids.len(),
        })
    }

    /// Sum of `-log p(token)` over the chain tokens of `out`, plus the
    /// number of scored positions.
    pub fn chain_nll_sum(
        &self,
        tape: &Tape,
        out: &LmOut,
    ) -> Result<(ValueId, usize), ModelError> {
        let seq_len = out.seq.len();
        let targets: Vec<usize> = out.seq[out.q_len + 1..].to_vec();
        let rows = tape.slice(out.logits, 0, out.q_len, seq_len - 1)?;
        let log_probs = tape.log(tape.softmax(rows)?)?;
        let picked = tape.row_select(log_probs, &targets)?;
        let total = tape.sum(picked)?;
        let nll = tape.scale(total, -1.0)?;
        Ok((nll, targets.len()))
    }

    /// Mean next-token NLL over a batch of correct chains: total `-log p`
    /// over every scored token divided by the token count. Question tokens
    /// are excluded from the sum.
    pub fn positive_loss(
        &self,
        tape: &Tape,
        params: &ParamSet,
        batch: &[(Vec<usize>, Vec<usize>)],
    ) -> Result<ValueId, ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let mut sums = Vec::with_capacity(batch.len());
        let mut tokens = 0;
        for (question_ids, chain_ids) in batch {
            let out = self.lm_forward(tape, params, question_ids, chain_ids)?;
            let (nll, count) = self.chain_nll_sum(tape, &out)?;
            sums.push(nll);
            tokens += count;
        }
        let mut total = sums[0];
        for s in &sums[1..] {
            total = tape.add(total, *s)?;
        }
        Ok(tape.scale(total, 1.0 / tokens as f64)?)
    }

    /// Chain embedding: uniform mean of the final-layer hidden states over
    /// the chain's non-pad tokens (question and separator excluded).
    pub fn embed_chain(&self, tape: &Tape, out: &LmOut) -> Result<ValueId, ModelError> {
        let seq_len = out.seq.len();
        let first_chain = out.q_len + 1;
        if first_chain >= seq_len {
            return Err(ModelError::EmptyChain);
        }
        let mut mask = vec![0.0; seq_len];
        for (pos, &tok) in out.seq.iter().enumerate().skip(first_chain) {
            if tok != PAD {
                mask[pos] = 1.0;
            }
        }
        Ok(tape.masked_mean_pool(out.hidden, &mask)?)
    }

    /// Zero-shot generation from the question alone.
    pub fn generate(
        &self,
        question: &str,
        mode: DecodeMode,
        max_new_tokens: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Generation, ModelError> {
        let mut ids = self.vocab.encode(question)?;
        if ids.len() + 1 > self.cfg.context {
            return Err(ModelError::ContextOverflow {
                needed: ids.len() + 1,
                context: self.cfg.context,
            });
        }
        ids.push(SEP);
        let prompt_len = ids.len();
        let mut produced = 0;
        while produced < max_new_tokens && ids.len() < self.cfg.context {
            let tape = Tape::new();
            let (logits, _) = self.forward_with(&tape, &self.params, &ids)?;
            let last = ids.len() - 1;
            let row = tape.with_value(logits, |t| t.row(last).to_vec());
            let next = match mode {
                DecodeMode::Greedy => argmax(&row),
                DecodeMode::Sample { temperature } => {
                    if temperature <= 0.0 {
                        argmax(&row)
                    } else {
                        sample_from_logits(&row, temperature, rng)
                    }
                }
            };
            ids.push(next);
            produced += 1;
            if next == EOS {
                break;
            }
        }
        let generated = &ids[prompt_len..];
        let ans_pos = generated.iter().position(|&t| t == ANS);
        let end = generated
            .iter()
            .position(|&t| t == EOS)
            .unwrap_or(generated.len());
        let (chain_span, answer_span) = match ans_pos {
            Some(p) if p < end => (&generated[..p], &generated[p + 1..end]),
            _ => (&generated[..end], &generated[end..end]),
        };
        Ok(Generation {
            chain: self.vocab.decode_lossy(chain_span),
            answer: self.vocab.decode_lossy(answer_span),
            n_tokens: produced,
        })
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

fn sample_from_logits(row: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = row.iter().map(|&v| ((v - max) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        u -= w;
        if u <= 0.0 {
            return i;
        }
    }
    weights.len() - 1
}
