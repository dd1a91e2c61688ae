//! Optimization loop over graph corpora: the four training levels, edge
//! variant ablations, Adam, epoch checkpoints, and a JSONL training log.
//!
//! One batch element is one graph; the margin and classification terms are
//! graph-scoped, so the loss unit has to be too.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::PathBuf;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
use crate::distill::{
    mag_loss, DistillError, DistillHead, HeadConfig, LossBreakdown, LossWeights, MagLossSpec,
};
use crate::graph::{read_corpus, EdgeVariant, GraphError, Mag};
use crate::model::{ModelConfig, ModelError, StudentModel, Vocab};
use crate::seeding::rng_for;
use crate::tensor::{Gradients, ParamSet, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite {term} at step {step}; parameter norms: {norms}")]
    NonFinite {
        step: u64,
        term: &'static str,
        norms: String,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Training level: which graph components the student learns from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    /// Correct pre-interaction chains only.
    R0,
    /// All correct chains, pre- and post-interaction.
    Cn,
    /// All chains, correct and incorrect, as a disconnected set.
    An,
    /// All chains plus the interaction structure.
    Magdi,
}

impl Level {
    pub const ALL: [Level; 4] = [Level::R0, Level::Cn, Level::An, Level::Magdi];

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "r0" => Some(Level::R0),
            "cn" => Some(Level::Cn),
            "an" => Some(Level::An),
            "magdi" => Some(Level::Magdi),
            _ => None,
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Level::R0 => write!(f, "r0"),
            Level::Cn => write!(f, "cn"),
            Level::An => write!(f, "an"),
            Level::Magdi => write!(f, "magdi"),
        }
    }
}

/// The chains and structure one level extracts from a graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingView {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
    pub use_graph: bool,
}

/// Level-dependent slice of a graph's content.
pub fn select_training_view(mag: &Mag, level: Level) -> TrainingView {
    match level {
        Level::R0 => TrainingView {
            positives: mag
                .nodes
                .iter()
                .filter(|n| n.is_correct() && n.round == 0)
                .map(|n| n.id)
                .collect(),
            negatives: Vec::new(),
            use_graph: false,
        },
        Level::Cn => TrainingView {
            positives: mag.correct_nodes(),
            negatives: Vec::new(),
            use_graph: false,
        },
        Level::An => TrainingView {
            positives: mag.correct_nodes(),
            negatives: mag.incorrect_nodes(),
            use_graph: false,
        },
        Level::Magdi => TrainingView {
            positives: mag.correct_nodes(),
            negatives: mag.incorrect_nodes(),
            use_graph: true,
        },
    }
}

/// Full training configuration; serializable so runs can be described by a
/// JSON file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub level: Level,
    pub edge_variant: EdgeVariant,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub margin: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Graphs per optimizer step.
    pub batch_size: usize,
    pub seed: u64,
    /// One or more corpora; more than one means multi-task mixing.
    pub corpora: Vec<PathBuf>,
    pub model: ModelConfig,
    /// Propagate margin/classification gradients into the student backbone.
    pub couple_backbone: bool,
    pub out_dir: PathBuf,
    /// Keep per-epoch checkpoints next to the final one.
    pub epoch_checkpoints: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            level: Level::Magdi,
            edge_variant: EdgeVariant::Directed,
            alpha: 1.0,
            beta: 0.1,
            gamma: 0.1,
            margin: 1.0,
            learning_rate: 1e-3,
            epochs: 6,
            batch_size: 8,
            seed: 7,
            corpora: Vec::new(),
            model: ModelConfig::default(),
            couple_backbone: true,
            out_dir: PathBuf::from("ckpt"),
            epoch_checkpoints: true,
        }
    }
}

impl TrainConfig {
    /// Loss weights after level forcing: R0 and CN run with the positive
    /// term alone, AN adds the margin term, the full level adds all three.
    pub fn effective_weights(&self) -> LossWeights {
        match self.level {
            Level::R0 | Level::Cn => LossWeights {
                alpha: self.alpha,
                beta: 0.0,
                gamma: 0.0,
            },
            Level::An => LossWeights {
                alpha: self.alpha,
                beta: self.beta,
                gamma: 0.0,
            },
            Level::Magdi => LossWeights {
                alpha: self.alpha,
                beta: self.beta,
                gamma: self.gamma,
            },
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.corpora.is_empty() {
            return Err(TrainError::Config("no corpus paths given".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::Config(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if self.learning_rate <= 0.0 {
            return Err(TrainError::Config("learning rate must be positive".into()));
        }
        self.effective_weights().validate()?;
        self.model.validate()?;
        Ok(())
    }
}

/// Adam with bias correction.
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(learning_rate: f64, params: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = params.ids().map(|id| Tensor::zeros(params.get(id).shape())).collect();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &Gradients) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for id in params.ids() {
            let g = grads.get(id).data();
            let m = self.m[id.0].data_mut();
            let v = self.v[id.0].data_mut();
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

/// One optimizer step's log line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: u64,
    pub epoch: usize,
    pub graphs: usize,
    pub l_pos: f64,
    pub l_neg: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_int: Option<f64>,
    pub l_mag: f64,
}

/// Results of a training run. The returned student and head are reloaded
/// from the final checkpoint so in-memory and on-disk states agree exactly.
pub struct TrainOutcome {
    pub student: StudentModel,
    pub head: DistillHead,
    pub final_checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub records: Vec<TrainLogRecord>,
}

#[allow(clippy::too_many_arguments)]
fn graph_gradient(
    mag: &Mag,
    level: Level,
    edge_variant: EdgeVariant,
    student: &StudentModel,
    joint: &ParamSet,
    margin: f64,
    weights: &LossWeights,
    couple_backbone: bool,
    pair_rng: &mut ChaCha8Rng,
) -> Result<(Gradients, LossBreakdown), TrainError> {
    let view = select_training_view(mag, level);
    let spec = MagLossSpec {
        positives: view.positives,
        negatives: view.negatives,
        adjacency: view
            .use_graph
            .then(|| mag.adjacency(edge_variant).normalized),
    };
    let tape = Tape::new();
    let (total, breakdown) = mag_loss(
        &tape,
        mag,
        &spec,
        student,
        joint,
        margin,
        weights,
        couple_backbone,
        pair_rng,
    )?;
    let grads = tape.backward(total, joint)?;
    Ok((grads, breakdown))
}

fn param_norm_snapshot(params: &ParamSet) -> String {
    let parts: Vec<String> = params
        .iter()
        .map(|(name, t)| format!("{name}={:.3e}", t.norm()))
        .collect();
    parts.join(", ")
}

/// Load and concatenate all configured corpora.
pub fn load_corpora(paths: &[PathBuf]) -> Result<Vec<Mag>, TrainError> {
    let mut graphs = Vec::new();
    for path in paths {
        graphs.extend(read_corpus(path)?);
    }
    if graphs.is_empty() {
        return Err(TrainError::Config("corpora contain no graphs".into()));
    }
    Ok(graphs)
}

fn shuffled_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// Run the optimization loop and write checkpoints plus a JSONL log.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    let graphs = load_corpora(&config.corpora)?;
    train_on_graphs(config, &graphs)
}

/// Training loop over an in-memory corpus.
pub fn train_on_graphs(config: &TrainConfig, graphs: &[Mag]) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if graphs.is_empty() {
        return Err(TrainError::Config("corpus is empty".into()));
    }
    fs::create_dir_all(&config.out_dir)?;

    let mut init_rng = rng_for(config.seed, "train/init/student");
    let student = StudentModel::init(config.model, Vocab::default_grammar(), &mut init_rng)?;
    let mut head_rng = rng_for(config.seed, "train/init/head");
    let head_cfg = HeadConfig {
        margin: config.margin,
        ..HeadConfig::for_width(config.model.width)
    };
    let head = DistillHead::init(head_cfg, &mut head_rng)?;

    let mut joint = student.params.merged(&head.params);
    let template = StudentModel {
        cfg: student.cfg,
        vocab: student.vocab.clone(),
        params: ParamSet::new(),
    };
    let weights = config.effective_weights();
    let mut adam = Adam::new(config.learning_rate, &joint);

    let log_path = config.out_dir.join("train-log.jsonl");
    let mut log_file = fs::File::create(&log_path)?;
    let mut records = Vec::new();
    let mut step: u64 = 0;

    for epoch in 1..=config.epochs {
        let mut shuffle_rng = rng_for(config.seed, &format!("train/shuffle/{epoch}"));
        let order = shuffled_indices(graphs.len(), &mut shuffle_rng);
        for batch in order.chunks(config.batch_size) {
            step += 1;
            let results: Result<Vec<(Gradients, LossBreakdown)>, TrainError> = batch
                .par_iter()
                .map(|&graph_idx| {
                    let mut pair_rng =
                        rng_for(config.seed, &format!("train/pairs/{epoch}/{graph_idx}"));
                    graph_gradient(
                        &graphs[graph_idx],
                        config.level,
                        config.edge_variant,
                        &template,
                        &joint,
                        config.margin,
                        &weights,
                        config.couple_backbone,
                        &mut pair_rng,
                    )
                })
                .collect();
            let results = results?;

            let scale = 1.0 / results.len() as f64;
            let mut grads = Gradients::zeros_like(&joint);
            let mut l_pos = 0.0;
            let mut l_neg = 0.0;
            let mut l_mag = 0.0;
            let mut l_int_sum = 0.0;
            let mut l_int_n = 0usize;
            for (g, breakdown) in &results {
                grads.add_scaled(g, scale);
                l_pos += breakdown.positive * scale;
                l_neg += breakdown.negative * scale;
                l_mag += breakdown.total * scale;
                if let Some(li) = breakdown.interaction {
                    l_int_sum += li;
                    l_int_n += 1;
                }
            }
            if !l_mag.is_finite() {
                return Err(TrainError::NonFinite {
                    step,
                    term: "loss",
                    norms: param_norm_snapshot(&joint),
                });
            }
            if !grads.all_finite() {
                return Err(TrainError::NonFinite {
                    step,
                    term: "gradient",
                    norms: param_norm_snapshot(&joint),
                });
            }
            adam.step(&mut joint, &grads);

            let record = TrainLogRecord {
                step,
                epoch,
                graphs: results.len(),
                l_pos,
                l_neg,
                l_int: (l_int_n > 0).then(|| l_int_sum / l_int_n as f64),
                l_mag,
            };
            serde_json::to_writer(&mut log_file, &record)
                .map_err(|e| TrainError::Config(format!("log write: {e}")))?;
            log_file.write_all(b"\n")?;
            records.push(record);
        }

        if config.epoch_checkpoints {
            let (student_now, head_now) = split_joint(&joint, &template, head_cfg)?;
            let path = config.out_dir.join(format!("epoch-{epoch:02}.magdi"));
            save_checkpoint(&path, &student_now, Some(&head_now))?;
        }
    }

    let (student_final, head_final) = split_joint(&joint, &template, head_cfg)?;
    let final_checkpoint = config.out_dir.join("final.magdi");
    save_checkpoint(&final_checkpoint, &student_final, Some(&head_final))?;
    // Hand back the checkpointed state so generation matches a fresh load.
    let (student, head) = load_checkpoint(&final_checkpoint)?;
    let head = head.expect("final checkpoint carries a head section");
    Ok(TrainOutcome {
        student,
        head,
        final_checkpoint,
        log_path,
        records,
    })
}

fn split_joint(
    joint: &ParamSet,
    template: &StudentModel,
    head_cfg: HeadConfig,
) -> Result<(StudentModel, DistillHead), TrainError> {
    let (head_params, student_params) = joint.partition(|name| name.starts_with("head."));
    let student = StudentModel::from_parts(template.cfg, template.vocab.clone(), student_params)?;
    let head = DistillHead::from_parts(head_cfg, head_params)?;
    Ok((student, head))
}
