//! Train-time distillation head: margin scoring of chain embeddings,
//! minority-group pair sampling, a two-layer GCN over the discussion
//! structure, node classification, and the combined weighted loss.
//!
//! Everything here exists only during training; the inference path never
//! touches these parameters.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::Mag;
use crate::model::{LmOut, ModelError, StudentModel};
use crate::tensor::{ParamSet, Tape, Tensor, TensorError, ValueId};

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("node label {label} outside {{0, 1}}")]
    BadLabel { label: u8 },
    #[error("loss weight {name} = {value} outside [0, 1]")]
    BadWeight { name: &'static str, value: f64 },
    #[error("margin {0} outside [-1, 1]")]
    BadMargin(f64),
    #[error("head parameter set mismatch: {0}")]
    ParamMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Head dimensions and margin. GCN hidden width defaults to the embedding
/// width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub embed_width: usize,
    pub hidden_width: usize,
    pub margin: f64,
}

impl HeadConfig {
    pub fn for_width(width: usize) -> Self {
        Self {
            embed_width: width,
            hidden_width: width,
            margin: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), DistillError> {
        if !(-1.0..=1.0).contains(&self.margin) {
            return Err(DistillError::BadMargin(self.margin));
        }
        Ok(())
    }
}

/// Weights of the three loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.1,
            gamma: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), DistillError> {
        for (name, value) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(DistillError::BadWeight { name, value });
            }
        }
        Ok(())
    }
}

fn head_param_shapes(cfg: &HeadConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.embed_width;
    let g = cfg.hidden_width;
    vec![
        ("head.score.w".to_string(), vec![d, 1]),
        ("head.gcn.w0".to_string(), vec![d, g]),
        ("head.gcn.w1".to_string(), vec![g, g]),
        ("head.cls.w".to_string(), vec![g, 2]),
    ]
}

/// Train-time parameters: margin projection, GCN weights, classifier.
/// Parameter names carry a `head.` prefix so the head can share a joint
/// parameter set with the student during training and be split back out
/// for checkpointing.
#[derive(Debug, Clone)]
pub struct DistillHead {
    pub cfg: HeadConfig,
    pub params: ParamSet,
}

impl DistillHead {
    pub fn init(cfg: HeadConfig, rng: &mut ChaCha8Rng) -> Result<Self, DistillError> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        for (name, shape) in head_param_shapes(&cfg) {
            // Output-side projections start at zero so the auxiliary terms
            // exert no pressure on the backbone until the head has aligned
            // itself with the label structure.
            let tensor = if name == "head.score.w" || name == "head.cls.w" {
                Tensor::zeros(&shape)
            } else {
                let fan_in = shape[0] as f64;
                let normal = Normal::new(0.0, 1.0 / fan_in.sqrt()).expect("valid std");
                let len: usize = shape.iter().product();
                let data = (0..len).map(|_| normal.sample(rng)).collect();
                Tensor::new(shape, data).expect("shape matches")
            };
            params.insert(name, tensor);
        }
        Ok(Self { cfg, params })
    }

    pub fn from_parts(cfg: HeadConfig, params: ParamSet) -> Result<Self, DistillError> {
        cfg.validate()?;
        let expected = head_param_shapes(&cfg);
        if params.len() != expected.len() {
            return Err(DistillError::ParamMismatch(format!(
                "{} parameters, expected {}",
                params.len(),
                expected.len()
            )));
        }
        for (id, (name, shape)) in params.ids().zip(expected.iter()) {
            if params.name(id) != name || params.get(id).shape() != shape.as_slice() {
                return Err(DistillError::ParamMismatch(format!(
                    "parameter {} {:?}, expected {name} {shape:?}",
                    params.name(id),
                    params.get(id).shape(),
                )));
            }
        }
        Ok(Self { cfg, params })
    }
}

/// Score a chain embedding into (-1, 1): `tanh(h · w)`.
pub fn score_chain(tape: &Tape, params: &ParamSet, h: ValueId) -> Result<ValueId, DistillError> {
    let w = tape.param(params, params.id_of("head.score.w")?);
    let s = tape.matmul(h, w)?;
    Ok(tape.tanh(s)?)
}

/// Pair every majority-group node with a minority-group node, resampling
/// the minority uniformly to fill up to `max(|plus|, |minus|)` pairs.
///
/// Returns `(positive, negative)` node-id pairs; empty when either side is
/// empty.
pub fn sample_pairs(
    plus: &[usize],
    minus: &[usize],
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, usize)> {
    if plus.is_empty() || minus.is_empty() {
        return Vec::new();
    }
    let mut pairs = Vec::with_capacity(plus.len().max(minus.len()));
    if plus.len() >= minus.len() {
        for (i, &p) in plus.iter().enumerate() {
            let m = if i < minus.len() {
                minus[i]
            } else {
                minus[rng.gen_range(0..minus.len())]
            };
            pairs.push((p, m));
        }
    } else {
        for (i, &m) in minus.iter().enumerate() {
            let p = if i < plus.len() {
                plus[i]
            } else {
                plus[rng.gen_range(0..plus.len())]
            };
            pairs.push((p, m));
        }
    }
    pairs
}

/// Hinge margin objective, mean-reduced over pairs:
/// `mean( max(0, rho - s_plus + s_minus) )`.
pub fn margin_loss(
    tape: &Tape,
    s_plus: ValueId,
    s_minus: ValueId,
    rho: f64,
) -> Result<ValueId, DistillError> {
    let neg_plus = tape.scale(s_plus, -1.0)?;
    let diff = tape.add(neg_plus, s_minus)?;
    let shifted = tape.add_scalar(diff, rho)?;
    let hinge = tape.relu(shifted)?;
    Ok(tape.mean(hinge)?)
}

/// Two rounds of message passing: `H_{l+1} = ReLU(A_norm · H_l · W_l)`.
pub fn gcn_forward(
    tape: &Tape,
    params: &ParamSet,
    h0: ValueId,
    adj_norm: ValueId,
) -> Result<ValueId, DistillError> {
    let w0 = tape.param(params, params.id_of("head.gcn.w0")?);
    let w1 = tape.param(params, params.id_of("head.gcn.w1")?);
    let mixed = tape.matmul(adj_norm, h0)?;
    let h1 = tape.relu(tape.matmul(mixed, w0)?)?;
    let mixed = tape.matmul(adj_norm, h1)?;
    let h2 = tape.relu(tape.matmul(mixed, w1)?)?;
    Ok(h2)
}

/// Mean cross-entropy of the node classifier over all nodes.
pub fn node_class_loss(
    tape: &Tape,
    params: &ParamSet,
    h_last: ValueId,
    labels: &[u8],
) -> Result<ValueId, DistillError> {
    for &label in labels {
        if label > 1 {
            return Err(DistillError::BadLabel { label });
        }
    }
    let w = tape.param(params, params.id_of("head.cls.w")?);
    let logits = tape.matmul(h_last, w)?;
    let log_probs = tape.log(tape.softmax(logits)?)?;
    let classes: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let picked = tape.row_select(log_probs, &classes)?;
    let mean = tape.mean(picked)?;
    Ok(tape.scale(mean, -1.0)?)
}

/// Which parts of a graph a loss evaluation uses.
#[derive(Debug, Clone)]
pub struct MagLossSpec {
    /// Node ids whose chains feed the next-token term.
    pub positives: Vec<usize>,
    /// Node ids treated as contrastive negatives (empty disables the term).
    pub negatives: Vec<usize>,
    /// Normalized adjacency; present only when structure is modeled.
    pub adjacency: Option<Tensor>,
}

/// Per-term values from one graph's loss evaluation, before weighting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub positive: f64,
    pub negative: f64,
    pub interaction: Option<f64>,
    pub total: f64,
}

impl LossBreakdown {
    pub fn zero() -> Self {
        Self {
            positive: 0.0,
            negative: 0.0,
            interaction: None,
            total: 0.0,
        }
    }
}

/// Assemble the weighted combination `alpha·L+ + beta·L- + gamma·L_I` for
/// one graph on the given tape, returning the scalar loss node and the
/// unweighted per-term values.
///
/// Degenerate cases: an empty positive or pair set contributes zero, and
/// the interaction term is evaluated for the report but excluded from the
/// total when the graph holds a single label class.
#[allow(clippy::too_many_arguments)]
pub fn mag_loss(
    tape: &Tape,
    mag: &Mag,
    spec: &MagLossSpec,
    student: &StudentModel,
    params: &ParamSet,
    margin: f64,
    weights: &LossWeights,
    couple_backbone: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(ValueId, LossBreakdown), DistillError> {
    weights.validate()?;
    let question_ids = student.vocab.encode(&mag.instance.question)?;

    let needs_embeddings = !spec.negatives.is_empty() || spec.adjacency.is_some();
    let forwarded: Vec<usize> = if spec.adjacency.is_some() {
        (0..mag.nodes.len()).collect()
    } else if needs_embeddings {
        let mut ids: Vec<usize> = spec
            .positives
            .iter()
            .chain(spec.negatives.iter())
            .copied()
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    } else {
        spec.positives.clone()
    };

    let mut outs: Vec<Option<LmOut>> = (0..mag.nodes.len()).map(|_| None).collect();
    for &node_id in &forwarded {
        let node = mag.node(node_id);
        let chain_ids = student.vocab.chain_ids(&node.reasoning, &node.answer)?;
        let out = student.lm_forward(tape, params, &question_ids, &chain_ids)?;
        outs[node_id] = Some(out);
    }

    // L+: token-mean NLL over the positive chains.
    let mut positive_term = None;
    if !spec.positives.is_empty() {
        let mut total = None;
        let mut tokens = 0;
        for &node_id in &spec.positives {
            let out = outs[node_id].as_ref().expect("positive was forwarded");
            let (nll, count) = student.chain_nll_sum(tape, out)?;
            tokens += count;
            total = Some(match total {
                None => nll,
                Some(acc) => tape.add(acc, nll)?,
            });
        }
        let sum = total.expect("non-empty positives");
        positive_term = Some(tape.scale(sum, 1.0 / tokens as f64)?);
    }

    // Chain embeddings for scoring and the GCN, optionally detached so the
    // auxiliary terms stay out of the backbone.
    let mut embeddings: Vec<Option<ValueId>> = (0..mag.nodes.len()).map(|_| None).collect();
    if needs_embeddings {
        for &node_id in &forwarded {
            let out = outs[node_id].as_ref().expect("forwarded");
            let h = student.embed_chain(tape, out)?;
            let h = if couple_backbone { h } else { tape.detach(h) };
            embeddings[node_id] = Some(h);
        }
    }

    // L-: hinge margin over sampled positive/negative pairs.
    let pairs = sample_pairs(&spec.positives, &spec.negatives, rng);
    let mut negative_term = None;
    if !pairs.is_empty() {
        let pos_rows: Vec<ValueId> = pairs
            .iter()
            .map(|&(p, _)| embeddings[p].expect("scored node embedded"))
            .collect();
        let neg_rows: Vec<ValueId> = pairs
            .iter()
            .map(|&(_, m)| embeddings[m].expect("scored node embedded"))
            .collect();
        let h_pos = tape.concat(&pos_rows, 0)?;
        let h_neg = tape.concat(&neg_rows, 0)?;
        let s_pos = score_chain(tape, params, h_pos)?;
        let s_neg = score_chain(tape, params, h_neg)?;
        negative_term = Some(margin_loss(tape, s_pos, s_neg, margin)?);
    }

    // L_I: node classification over the GCN output, all nodes.
    let mut interaction_term = None;
    let mut interaction_active = false;
    if let Some(adj) = &spec.adjacency {
        let rows: Vec<ValueId> = (0..mag.nodes.len())
            .map(|i| embeddings[i].expect("all nodes embedded"))
            .collect();
        let h0 = tape.concat(&rows, 0)?;
        let adj_leaf = tape.leaf(adj.clone());
        let h_last = gcn_forward(tape, params, h0, adj_leaf)?;
        let labels: Vec<u8> = mag.nodes.iter().map(|n| n.label).collect();
        interaction_term = Some(node_class_loss(tape, params, h_last, &labels)?);
        let n_correct = labels.iter().filter(|&&l| l == 1).count();
        interaction_active = n_correct != 0 && n_correct != labels.len();
    }

    let mut total = tape.leaf(Tensor::scalar(0.0));
    if let Some(lp) = positive_term {
        let weighted = tape.scale(lp, weights.alpha)?;
        total = tape.add(total, weighted)?;
    }
    if let Some(ln) = negative_term {
        let weighted = tape.scale(ln, weights.beta)?;
        total = tape.add(total, weighted)?;
    }
    if let (Some(li), true) = (interaction_term, interaction_active) {
        let weighted = tape.scale(li, weights.gamma)?;
        total = tape.add(total, weighted)?;
    }

    let breakdown = LossBreakdown {
        positive: positive_term.map_or(0.0, |id| tape.scalar(id)),
        negative: negative_term.map_or(0.0, |id| tape.scalar(id)),
        interaction: interaction_term.map(|id| tape.scalar(id)),
        total: tape.scalar(total),
    };
    Ok((total, breakdown))
}

/// Forward-only evaluation of the full combined loss on one graph: all
/// correct nodes as positives, all incorrect as negatives, structure
/// included.
pub fn evaluate_combined_loss(
    mag: &Mag,
    student: &StudentModel,
    head: &DistillHead,
    weights: &LossWeights,
    variant: crate::graph::EdgeVariant,
    rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown, DistillError> {
    let tape = Tape::new();
    let joint = student.params.merged(&head.params);
    let spec = MagLossSpec {
        positives: mag.correct_nodes(),
        negatives: mag.incorrect_nodes(),
        adjacency: Some(mag.adjacency(variant).normalized),
    };
    let (_, breakdown) = mag_loss(
        &tape,
        mag,
        &spec,
        student,
        &joint,
        head.cfg.margin,
        weights,
        true,
        rng,
    )?;
    Ok(breakdown)
}
