//! Scripted multi-agent discussions over synthetic reasoning tasks.
//!
//! Agents produce reasoning chains in a closed grammar, make per-step
//! arithmetic mistakes at a configurable rate, and optionally adopt the
//! previous round's majority answer. A discussion runs until the agents
//! reach unanimous consensus or the round cap, and is recorded as a graph.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{
    build_mag, canonical_answer, corpus_stats, CorpusStats, GraphError, InstanceRef, Mag,
    MAX_ROUNDS,
};
use crate::seeding::rng_for;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("unknown task family {0:?}")]
    UnknownFamily(String),
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("cannot parse question {question:?} for family {family}")]
    QuestionParse { family: TaskFamily, question: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Synthetic reasoning problem with an oracle chain ending in the gold answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub id: String,
    pub question: String,
    pub gold: String,
    pub oracle_chain: String,
}

impl TaskInstance {
    pub fn to_ref(&self) -> InstanceRef {
        InstanceRef {
            id: self.id.clone(),
            question: self.question.clone(),
            gold: self.gold.clone(),
        }
    }
}

/// Built-in task families with a closed reasoning-step grammar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    /// Sum three operands, reduce mod 10.
    Modsum,
    /// Running maximum of three operands.
    Listmax,
}

impl TaskFamily {
    pub fn parse(s: &str) -> Result<Self, SimError> {
        match s.trim().to_ascii_lowercase().as_str() {
            "modsum" => Ok(TaskFamily::Modsum),
            "listmax" => Ok(TaskFamily::Listmax),
            other => Err(SimError::UnknownFamily(other.to_string())),
        }
    }

    fn operand_range(self) -> std::ops::RangeInclusive<i64> {
        match self {
            TaskFamily::Modsum => 0..=19,
            TaskFamily::Listmax => 10..=99,
        }
    }

    fn question_text(self, ops: &[i64; 3]) -> String {
        match self {
            TaskFamily::Modsum => format!("{}+{}+{} mod 10 = ?", ops[0], ops[1], ops[2]),
            TaskFamily::Listmax => format!("max({}, {}, {}) = ?", ops[0], ops[1], ops[2]),
        }
    }

    fn parse_question(self, question: &str) -> Result<[i64; 3], SimError> {
        let fail = || SimError::QuestionParse {
            family: self,
            question: question.to_string(),
        };
        let nums: Vec<i64> = match self {
            TaskFamily::Modsum => question
                .strip_suffix(" mod 10 = ?")
                .ok_or_else(fail)?
                .split('+')
                .map(|p| p.trim().parse().map_err(|_| fail()))
                .collect::<Result<_, _>>()?,
            TaskFamily::Listmax => question
                .strip_prefix("max(")
                .and_then(|s| s.strip_suffix(") = ?"))
                .ok_or_else(fail)?
                .split(',')
                .map(|p| p.trim().parse().map_err(|_| fail()))
                .collect::<Result<_, _>>()?,
        };
        nums.try_into().map_err(|_| fail())
    }

    fn gold_value(self, ops: &[i64; 3]) -> i64 {
        match self {
            TaskFamily::Modsum => (ops[0] + ops[1] + ops[2]).rem_euclid(10),
            TaskFamily::Listmax => *ops.iter().max().expect("three operands"),
        }
    }
}

impl fmt::Display for TaskFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskFamily::Modsum => write!(f, "modsum"),
            TaskFamily::Listmax => write!(f, "listmax"),
        }
    }
}

/// Teacher behavior knobs. `step_error_rate` is the chance each reasoning
/// step is corrupted; `follow_rate` the chance (rounds >= 1) of regenerating
/// the chain toward the previous round's majority answer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentProfile {
    pub agent_id: usize,
    pub step_error_rate: f64,
    pub follow_rate: f64,
}

impl AgentProfile {
    pub fn validate(&self) -> Result<(), SimError> {
        for (name, rate) in [
            ("step_error_rate", self.step_error_rate),
            ("follow_rate", self.follow_rate),
        ] {
            if !(0.0..=1.0).contains(&rate) {
                return Err(SimError::InvalidConfig(format!(
                    "{name} {rate} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

/// Anything that can answer an instance given the previous round's outputs.
pub trait Agent {
    fn respond(
        &self,
        instance: &TaskInstance,
        prior_round: Option<&[(String, String)]>,
        rng: &mut ChaCha8Rng,
    ) -> (String, String);
}

/// Profile-driven agent emitting chains in the task family's grammar.
#[derive(Debug, Clone)]
pub struct ScriptedAgent {
    pub profile: AgentProfile,
    pub family: TaskFamily,
}

impl Agent for ScriptedAgent {
    fn respond(
        &self,
        instance: &TaskInstance,
        prior_round: Option<&[(String, String)]>,
        rng: &mut ChaCha8Rng,
    ) -> (String, String) {
        agent_answer(&self.profile, self.family, instance, prior_round, rng)
            .expect("instances produced by this simulator always parse")
    }
}

/// Full corpus-generation configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimConfig {
    pub family: TaskFamily,
    pub n_instances: usize,
    pub n_agents: usize,
    pub max_rounds: usize,
    pub profiles: Vec<AgentProfile>,
    pub seed: u64,
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.n_agents < 2 {
            return Err(SimError::InvalidConfig(format!(
                "n_agents {} < 2",
                self.n_agents
            )));
        }
        if !(1..=MAX_ROUNDS).contains(&self.max_rounds) {
            return Err(SimError::InvalidConfig(format!(
                "max_rounds {} outside [1, {MAX_ROUNDS}]",
                self.max_rounds
            )));
        }
        if self.profiles.len() != self.n_agents {
            return Err(SimError::InvalidConfig(format!(
                "{} profiles for {} agents",
                self.profiles.len(),
                self.n_agents
            )));
        }
        for profile in &self.profiles {
            profile.validate()?;
        }
        Ok(())
    }

    fn agents(&self) -> Vec<ScriptedAgent> {
        self.profiles
            .iter()
            .map(|&profile| ScriptedAgent {
                profile,
                family: self.family,
            })
            .collect()
    }
}

/// Build an instance from explicit operands; the random generators below
/// funnel through here.
pub fn instance_from_operands(
    family: TaskFamily,
    id: impl Into<String>,
    ops: [i64; 3],
) -> TaskInstance {
    let gold = family.gold_value(&ops);
    let chain = honest_chain(family, &ops);
    TaskInstance {
        id: id.into(),
        question: family.question_text(&ops),
        gold: gold.to_string(),
        oracle_chain: format!("{}; answer: {}", chain.reasoning, chain.answer),
    }
}

/// Draw a fresh instance of the family.
pub fn gen_instance(
    family: TaskFamily,
    id: impl Into<String>,
    rng: &mut ChaCha8Rng,
) -> TaskInstance {
    let range = family.operand_range();
    let ops = [
        rng.gen_range(range.clone()),
        rng.gen_range(range.clone()),
        rng.gen_range(range),
    ];
    instance_from_operands(family, id, ops)
}

/// Re-derive the gold answer from the question and check the oracle chain's
/// final answer against it. Used as an independent pass in tests.
pub fn verify_oracle(family: TaskFamily, instance: &TaskInstance) -> Result<bool, SimError> {
    let ops = family.parse_question(&instance.question)?;
    let recomputed = family.gold_value(&ops).to_string();
    let chain_answer = instance
        .oracle_chain
        .rsplit("answer:")
        .next()
        .unwrap_or("")
        .trim();
    Ok(canonical_answer(&recomputed) == canonical_answer(&instance.gold)
        && canonical_answer(chain_answer) == canonical_answer(&instance.gold))
}

struct Chain {
    reasoning: String,
    answer: String,
}

fn honest_chain(family: TaskFamily, ops: &[i64; 3]) -> Chain {
    generate_chain(family, ops, 0.0, None, &mut rng_for(0, "sim/honest"))
}

/// Emit a reasoning chain, corrupting each step with probability
/// `step_error_rate`.
///
/// Corruption offsets a step's result by a nonzero delta in [-3, 3] and the
/// offset propagates through later steps. The delta's sign is drawn once per
/// chain, so the accumulated drift over at most three steps stays in
/// [1, 9] in magnitude and a corrupted chain can never land back on the
/// gold answer mod 10. A `target` answer overrides the final step, modeling
/// an agent that adopts the majority.
fn generate_chain(
    family: TaskFamily,
    ops: &[i64; 3],
    step_error_rate: f64,
    target: Option<i64>,
    rng: &mut ChaCha8Rng,
) -> Chain {
    let sign: i64 = if rng.gen_bool(0.5) { 1 } else { -1 };
    let corrupt = |rng: &mut ChaCha8Rng, value: i64| -> i64 {
        if step_error_rate > 0.0 && rng.gen_bool(step_error_rate) {
            value + sign * rng.gen_range(1..=3)
        } else {
            value
        }
    };
    let mut steps = Vec::with_capacity(3);
    let answer = match family {
        TaskFamily::Modsum => {
            let s1 = corrupt(rng, ops[0] + ops[1]);
            steps.push(format!("{}+{}={}", ops[0], ops[1], s1));
            let mut s2 = corrupt(rng, s1 + ops[2]);
            let g = match target {
                Some(t) => {
                    // Adopting an answer rewrites the chain so the final
                    // reduction genuinely derives it: shift the running sum
                    // to the nearest value congruent to the target.
                    s2 += (t - s2).rem_euclid(10);
                    t.rem_euclid(10)
                }
                None => corrupt(rng, s2.rem_euclid(10)).rem_euclid(10),
            };
            steps.push(format!("{}+{}={}", s1, ops[2], s2));
            steps.push(format!("{} mod 10 = {}", s2, g));
            g
        }
        TaskFamily::Listmax => {
            let mut m1 = corrupt(rng, ops[0].max(ops[1]));
            let m2 = match target {
                // Same consistency rule: the adopted answer becomes the
                // honest maximum of the written operands when possible.
                Some(t) if t >= ops[2] => {
                    m1 = t;
                    t
                }
                Some(t) => t,
                None => corrupt(rng, m1.max(ops[2])),
            };
            steps.push(format!("max({},{})={}", ops[0], ops[1], m1));
            steps.push(format!("max({},{})={}", m1, ops[2], m2));
            m2
        }
    };
    Chain {
        reasoning: steps.join("; "),
        answer: answer.to_string(),
    }
}

/// Majority answer under canonicalization; ties break toward the
/// lexicographically smallest answer.
pub fn majority_answer(answers: &[String]) -> String {
    let mut counts: Vec<(String, usize)> = Vec::new();
    for answer in answers {
        let canon = canonical_answer(answer);
        match counts.iter_mut().find(|(a, _)| *a == canon) {
            Some((_, c)) => *c += 1,
            None => counts.push((canon, 1)),
        }
    }
    counts
        .into_iter()
        .max_by(|(a, ca), (b, cb)| ca.cmp(cb).then_with(|| b.cmp(a)))
        .map(|(a, _)| a)
        .unwrap_or_default()
}

/// One agent's output for one round.
///
/// Round 0 passes no context; later rounds pass the full set of
/// previous-round `(reasoning, answer)` pairs.
pub fn agent_answer(
    profile: &AgentProfile,
    family: TaskFamily,
    instance: &TaskInstance,
    prior_round: Option<&[(String, String)]>,
    rng: &mut ChaCha8Rng,
) -> Result<(String, String), SimError> {
    let ops = family.parse_question(&instance.question)?;
    let target = match prior_round {
        Some(prior) if !prior.is_empty() && rng.gen_bool(profile.follow_rate) => {
            let answers: Vec<String> = prior.iter().map(|(_, a)| a.clone()).collect();
            majority_answer(&answers).parse::<i64>().ok()
        }
        _ => None,
    };
    let chain = generate_chain(family, &ops, profile.step_error_rate, target, rng);
    Ok((chain.reasoning, chain.answer))
}

/// Run one discussion: round 0 always happens, then rounds continue until
/// the previous round is unanimous or `max_rounds` post-initial rounds ran.
pub fn run_discussion<A: Agent>(
    instance: &TaskInstance,
    agents: &[A],
    max_rounds: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Mag, GraphError> {
    let mut per_round: Vec<Vec<(String, String)>> = Vec::new();
    let round0: Vec<(String, String)> = agents
        .iter()
        .map(|agent| agent.respond(instance, None, rng))
        .collect();
    per_round.push(round0);
    for _ in 1..=max_rounds {
        let prior = per_round.last().expect("round 0 present");
        if unanimous(prior) {
            break;
        }
        let prior = prior.clone();
        let next: Vec<(String, String)> = agents
            .iter()
            .map(|agent| agent.respond(instance, Some(&prior), rng))
            .collect();
        per_round.push(next);
    }
    build_mag(instance.to_ref(), &per_round)
}

fn unanimous(outputs: &[(String, String)]) -> bool {
    let mut canon = outputs.iter().map(|(_, a)| canonical_answer(a));
    match canon.next() {
        Some(first) => canon.all(|a| a == first),
        None => true,
    }
}

fn train_instance(config: &SimConfig, index: usize) -> (TaskInstance, ChaCha8Rng) {
    let mut rng = rng_for(config.seed, &format!("sim/instance/{index}"));
    let id = format!("{}-train-{index:05}", config.family);
    let instance = gen_instance(config.family, id, &mut rng);
    (instance, rng)
}

/// Generate the full training corpus in memory. Instances are independent
/// and own deterministic sub-generators, so parallel and serial runs agree.
pub fn gen_corpus_mags(config: &SimConfig) -> Result<Vec<Mag>, SimError> {
    config.validate()?;
    let agents = config.agents();
    (0..config.n_instances)
        .into_par_iter()
        .map(|i| {
            let (instance, mut rng) = train_instance(config, i);
            run_discussion(&instance, &agents, config.max_rounds, &mut rng)
                .map_err(SimError::from)
        })
        .collect()
}

/// Generate a corpus, write it as newline-delimited JSON, and report stats.
pub fn gen_corpus(config: &SimConfig, out: &Path) -> Result<CorpusStats, SimError> {
    let mags = gen_corpus_mags(config)?;
    crate::graph::write_corpus(out, &mags)?;
    Ok(corpus_stats(&mags)?)
}

/// Held-out instances drawn from an id range disjoint from training.
pub fn gen_testset(
    family: TaskFamily,
    n_instances: usize,
    seed: u64,
) -> Vec<TaskInstance> {
    (0..n_instances)
        .map(|i| {
            let mut rng = rng_for(seed, &format!("sim/test/{i}"));
            gen_instance(family, format!("{family}-test-{i:05}"), &mut rng)
        })
        .collect()
}

/// Write instances as newline-delimited JSON.
pub fn write_testset(path: &Path, instances: &[TaskInstance]) -> Result<(), SimError> {
    let mut out = String::new();
    for instance in instances {
        out.push_str(&serde_json::to_string(instance).expect("instance serialization"));
        out.push('\n');
    }
    let mut file = fs::File::create(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}

/// Read instances from newline-delimited JSON.
pub fn read_testset(path: &Path) -> Result<Vec<TaskInstance>, SimError> {
    let file = fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut instances = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let instance: TaskInstance = serde_json::from_str(&line)
            .map_err(|e| SimError::InvalidConfig(format!("bad testset line: {e}")))?;
        instances.push(instance);
    }
    Ok(instances)
}
