//! Zero-shot evaluation, self-consistency voting, level comparison, and
//! generated-token efficiency accounting.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{load_student, CheckpointError};
use crate::graph::{canonical_answer, Mag};
use crate::model::{DecodeMode, Generation, ModelError, StudentModel, Vocab};
use crate::seeding::rng_for;
use crate::sim::TaskInstance;

/// Generation budget per example; generous for the built-in grammars.
pub const DEFAULT_MAX_NEW_TOKENS: usize = 64;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("test set is empty")]
    EmptyTestset,
    #[error("student generated zero tokens; reduction factor undefined")]
    ZeroStudentTokens,
    #[error("reference token cost must be positive, got {0}")]
    BadReference(f64),
    #[error("incompatible checkpoints: {0}")]
    IncompatibleCheckpoints(String),
    #[error("self-consistency needs k >= 1")]
    BadSampleCount,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Per-example evaluation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub id: String,
    pub predicted: String,
    pub gold: String,
    pub correct: bool,
    pub tokens: usize,
}

/// Evaluation summary plus the per-example records backing it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub mean_generated_tokens: f64,
    pub examples: Vec<ExampleRecord>,
}

impl EvalReport {
    fn from_examples(examples: Vec<ExampleRecord>) -> Self {
        let n = examples.len() as f64;
        let correct = examples.iter().filter(|e| e.correct).count() as f64;
        let tokens: usize = examples.iter().map(|e| e.tokens).sum();
        Self {
            accuracy: correct / n,
            mean_generated_tokens: tokens as f64 / n,
            examples,
        }
    }

    /// Recompute accuracy from the per-example records.
    pub fn recount_accuracy(&self) -> f64 {
        self.examples.iter().filter(|e| e.correct).count() as f64 / self.examples.len() as f64
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization")
    }
}

fn record_from(instance: &TaskInstance, predicted: String, tokens: usize) -> ExampleRecord {
    let correct = canonical_answer(&predicted) == canonical_answer(&instance.gold);
    ExampleRecord {
        id: instance.id.clone(),
        predicted,
        gold: instance.gold.clone(),
        correct,
        tokens,
    }
}

/// Evaluation over an injectable generator; tests drive this with stubs.
pub fn evaluate_with<F>(testset: &[TaskInstance], generate: F) -> Result<EvalReport, EvalError>
where
    F: Fn(&TaskInstance) -> Result<(String, usize), EvalError> + Sync,
{
    if testset.is_empty() {
        return Err(EvalError::EmptyTestset);
    }
    let examples: Result<Vec<ExampleRecord>, EvalError> = testset
        .par_iter()
        .map(|instance| {
            let (predicted, tokens) = generate(instance)?;
            Ok(record_from(instance, predicted, tokens))
        })
        .collect();
    Ok(EvalReport::from_examples(examples?))
}

/// Zero-shot greedy evaluation: the student sees only the question.
pub fn evaluate(
    student: &StudentModel,
    testset: &[TaskInstance],
    max_new_tokens: usize,
) -> Result<EvalReport, EvalError> {
    evaluate_with(testset, |instance| {
        let mut rng = rng_for(0, "eval/greedy");
        let gen = student.generate(
            &instance.question,
            DecodeMode::Greedy,
            max_new_tokens,
            &mut rng,
        )?;
        Ok((gen.answer, gen.n_tokens))
    })
}

/// Modal answer under canonicalization; ties break toward the answer of the
/// lowest-index sample.
pub fn majority_vote(answers: &[String]) -> String {
    let canon: Vec<String> = answers.iter().map(|a| canonical_answer(a)).collect();
    let mut best_idx = 0;
    let mut best_count = 0;
    for (i, a) in canon.iter().enumerate() {
        let count = canon.iter().filter(|b| *b == a).count();
        if count > best_count {
            best_count = count;
            best_idx = i;
        }
    }
    canon[best_idx].clone()
}

/// Self-consistency: k sampled generations per example, majority vote over
/// canonicalized answers. `k = 1` at temperature 0 reproduces greedy
/// evaluation exactly. Token counts sum over all k samples.
pub fn self_consistency(
    student: &StudentModel,
    testset: &[TaskInstance],
    k: usize,
    temperature: f64,
    seed: u64,
    max_new_tokens: usize,
) -> Result<EvalReport, EvalError> {
    if k == 0 {
        return Err(EvalError::BadSampleCount);
    }
    evaluate_with(testset, |instance| {
        let mut answers = Vec::with_capacity(k);
        let mut tokens = 0;
        for sample in 0..k {
            let mut rng = rng_for(seed, &format!("eval/sc/{}/{sample}", instance.id));
            let gen: Generation = student.generate(
                &instance.question,
                DecodeMode::Sample { temperature },
                max_new_tokens,
                &mut rng,
            )?;
            tokens += gen.n_tokens;
            answers.push(gen.answer);
        }
        Ok((majority_vote(&answers), tokens))
    })
}

/// One level's accuracies over seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LevelSummary {
    pub level: String,
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// Mean accuracy delta against the previous level in the listing.
    pub delta_vs_prev: Option<f64>,
}

/// Pairwise comparison entry: how often the row level beats the column
/// level across seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WinCount {
    pub left: String,
    pub right: String,
    pub left_wins: usize,
    pub right_wins: usize,
    pub ties: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Comparison {
    pub levels: Vec<LevelSummary>,
    pub win_counts: Vec<WinCount>,
}

impl Comparison {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("comparison serialization")
    }

    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str("level   mean      std       per-seed\n");
        for level in &self.levels {
            let seeds: Vec<String> = level.per_seed.iter().map(|a| format!("{a:.4}")).collect();
            out.push_str(&format!(
                "{:<7} {:<9.4} {:<9.4} {}\n",
                level.level,
                level.mean,
                level.std,
                seeds.join(" ")
            ));
        }
        for w in &self.win_counts {
            out.push_str(&format!(
                "{} vs {}: {}-{} ({} ties)\n",
                w.left, w.right, w.left_wins, w.right_wins, w.ties
            ));
        }
        out
    }
}

/// Summarize per-seed accuracies for an ordered list of levels.
pub fn summarize_levels(named: &[(String, Vec<f64>)]) -> Comparison {
    let mut levels = Vec::with_capacity(named.len());
    let mut prev_mean: Option<f64> = None;
    for (name, per_seed) in named {
        let n = per_seed.len() as f64;
        let mean = per_seed.iter().sum::<f64>() / n;
        let var = per_seed.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
        levels.push(LevelSummary {
            level: name.clone(),
            per_seed: per_seed.clone(),
            mean,
            std: var.sqrt(),
            delta_vs_prev: prev_mean.map(|p| mean - p),
        });
        prev_mean = Some(mean);
    }
    let mut win_counts = Vec::new();
    for i in 0..named.len() {
        for j in (i + 1)..named.len() {
            let (ref left, ref a) = named[i];
            let (ref right, ref b) = named[j];
            let mut left_wins = 0;
            let mut right_wins = 0;
            let mut ties = 0;
            for (x, y) in a.iter().zip(b.iter()) {
                if x > y {
                    left_wins += 1;
                } else if y > x {
                    right_wins += 1;
                } else {
                    ties += 1;
                }
            }
            win_counts.push(WinCount {
                left: left.clone(),
                right: right.clone(),
                left_wins,
                right_wins,
                ties,
            });
        }
    }
    Comparison { levels, win_counts }
}

/// Evaluate one checkpoint per (level, seed) and summarize. All checkpoints
/// must share vocabulary and dimensions.
pub fn compare_levels(
    checkpoints: &[(String, Vec<PathBuf>)],
    testset: &[TaskInstance],
    max_new_tokens: usize,
) -> Result<Comparison, EvalError> {
    let mut reference: Option<(crate::model::ModelConfig, Vocab)> = None;
    let mut named = Vec::with_capacity(checkpoints.len());
    for (level, paths) in checkpoints {
        let mut per_seed = Vec::with_capacity(paths.len());
        for path in paths {
            let student = load_student(path)?;
            match &reference {
                None => reference = Some((student.cfg, student.vocab.clone())),
                Some((cfg, vocab)) => {
                    if student.cfg != *cfg || student.vocab != *vocab {
                        return Err(EvalError::IncompatibleCheckpoints(format!(
                            "{} differs in dimensions or vocabulary",
                            path.display()
                        )));
                    }
                }
            }
            let report = evaluate(&student, testset, max_new_tokens)?;
            per_seed.push(report.accuracy);
        }
        named.push((level.clone(), per_seed));
    }
    Ok(summarize_levels(&named))
}

/// Reduction factor: reference generated-token cost per example divided by
/// the student's mean generated tokens.
pub fn efficiency_report(reference_cost: f64, report: &EvalReport) -> Result<f64, EvalError> {
    if reference_cost <= 0.0 {
        return Err(EvalError::BadReference(reference_cost));
    }
    if report.mean_generated_tokens == 0.0 {
        return Err(EvalError::ZeroStudentTokens);
    }
    Ok(reference_cost / report.mean_generated_tokens)
}

/// Mean generated tokens per example for a recorded multi-agent discussion
/// corpus: every node's chain counts, mirroring how the student's own
/// generation counter works (reasoning, answer marker, answer, terminator).
pub fn reference_token_cost(corpus: &[Mag], vocab: &Vocab) -> Result<f64, EvalError> {
    if corpus.is_empty() {
        return Err(EvalError::EmptyTestset);
    }
    let mut total = 0usize;
    for mag in corpus {
        for node in &mag.nodes {
            total += vocab.chain_ids(&node.reasoning, &node.answer)?.len();
        }
    }
    Ok(total as f64 / corpus.len() as f64)
}

/// Testset convention check: ids from the training range must not appear.
pub fn check_id_ranges(testset: &[TaskInstance]) -> bool {
    testset.iter().all(|t| !t.id.contains("-train-"))
}

/// Load a checkpoint and evaluate it on a testset file.
pub fn evaluate_checkpoint(
    ckpt: &Path,
    testset: &[TaskInstance],
    max_new_tokens: usize,
) -> Result<EvalReport, EvalError> {
    let student = load_student(ckpt)?;
    evaluate(&student, testset, max_new_tokens)
}
