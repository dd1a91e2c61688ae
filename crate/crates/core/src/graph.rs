//! Multi-agent interaction graphs: validation, adjacency construction,
//! corpus statistics, and the newline-delimited JSON corpus format.
//!
//! A graph records one multi-round discussion: one labeled node per
//! (agent, round) plus conditioning edges from every round-`j` node to every
//! round-`j+1` node. Graphs are immutable once built and every operation
//! here is pure.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

/// Discussion protocol cap: at most three post-initial rounds.
pub const MAX_ROUNDS: usize = 3;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("malformed JSON: {0}")]
    MalformedJson(String),
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("graph has no nodes")]
    EmptyGraph,
    #[error("agent {agent} out of range for {n_agents} agents")]
    AgentOutOfRange { agent: usize, n_agents: usize },
    #[error("duplicate node for agent {agent}, round {round}")]
    DuplicateAgentRound { agent: usize, round: usize },
    #[error("node {node} violates the id convention (expected {expected})")]
    IdConvention { node: usize, expected: usize },
    #[error("node {id} listed at position {position}; nodes must appear in id order")]
    NodeOrder { position: usize, id: usize },
    #[error("round {round} is missing a node for agent {agent}")]
    RoundIncomplete { round: usize, agent: usize },
    #[error("node {node} label {label} contradicts answer/gold comparison")]
    LabelMismatch { node: usize, label: u8 },
    #[error("node label {label} outside {{0, 1}}")]
    LabelOutOfRange { label: u8 },
    #[error("edge references unknown node {node}")]
    UnknownNode { node: usize },
    #[error("acyclicity violated: edge {src} (round {src_round}) -> {dst} (round {dst_round}) does not advance one round")]
    Acyclicity {
        src: usize,
        dst: usize,
        src_round: usize,
        dst_round: usize,
    },
    #[error("duplicate edge {src} -> {dst}")]
    DuplicateEdge { src: usize, dst: usize },
    #[error("missing conditioning edge {src} -> {dst}")]
    MissingEdge { src: usize, dst: usize },
    #[error("round {round}: expected {expected} agent outputs, got {got}")]
    MissingAgentOutput {
        round: usize,
        expected: usize,
        got: usize,
    },
    #[error("unsupported structure: {rounds} rounds exceeds the {MAX_ROUNDS}-round protocol")]
    UnsupportedStructure { rounds: usize },
    #[error("mixed agent counts in corpus: {expected} vs {found}")]
    MixedAgentCounts { expected: usize, found: usize },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("corpus line {line}: {source}")]
    CorpusLine {
        line: usize,
        #[source]
        source: Box<GraphError>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Canonical form used whenever two answers are compared: trimmed,
/// lowercased, trailing punctuation stripped.
pub fn canonical_answer(s: &str) -> String {
    let mut t = s.trim().to_lowercase();
    while t
        .chars()
        .last()
        .is_some_and(|c| c.is_ascii_punctuation() || c.is_whitespace())
    {
        t.pop();
    }
    t
}

/// The task instance a graph was recorded for.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceRef {
    pub id: String,
    pub question: String,
    pub gold: String,
}

/// One agent output in one round, labeled by gold-answer comparison.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeRecord {
    pub id: usize,
    pub agent: usize,
    pub round: usize,
    pub reasoning: String,
    pub answer: String,
    pub label: u8,
}

impl NodeRecord {
    pub fn is_correct(&self) -> bool {
        self.label == 1
    }
}

/// A multi-agent interaction graph.
///
/// Node ids follow `agent + n_agents * round`, so structural position is
/// recoverable from the id and adjacency rows are ordered canonically.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mag {
    pub instance: InstanceRef,
    pub n_agents: usize,
    pub nodes: Vec<NodeRecord>,
    pub edges: Vec<(usize, usize)>,
}

/// Structure class: the number of post-initial discussion rounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StructureClass {
    G0,
    G1,
    G2,
    G3,
}

impl StructureClass {
    pub const ALL: [StructureClass; 4] = [
        StructureClass::G0,
        StructureClass::G1,
        StructureClass::G2,
        StructureClass::G3,
    ];

    pub fn from_rounds(rounds: usize) -> Result<Self, GraphError> {
        match rounds {
            0 => Ok(StructureClass::G0),
            1 => Ok(StructureClass::G1),
            2 => Ok(StructureClass::G2),
            3 => Ok(StructureClass::G3),
            _ => Err(GraphError::UnsupportedStructure { rounds }),
        }
    }

    pub fn rounds(self) -> usize {
        match self {
            StructureClass::G0 => 0,
            StructureClass::G1 => 1,
            StructureClass::G2 => 2,
            StructureClass::G3 => 3,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "g0" | "0" => Some(StructureClass::G0),
            "g1" | "1" => Some(StructureClass::G1),
            "g2" | "2" => Some(StructureClass::G2),
            "g3" | "3" => Some(StructureClass::G3),
            _ => None,
        }
    }
}

impl fmt::Display for StructureClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "G{}", self.rounds())
    }
}

/// Adjacency flavor used when encoding a graph for the GCN.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EdgeVariant {
    /// Edges as recorded: target rows aggregate their conditioning sources.
    #[default]
    Directed,
    /// Interaction edges, symmetrized.
    Undirected,
    /// Every node connected to every other node.
    FullyConnected,
}

impl EdgeVariant {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "directed" | "d" => Some(EdgeVariant::Directed),
            "undirected" | "ud" => Some(EdgeVariant::Undirected),
            "fully-connected" | "fullyconnected" | "fc" => Some(EdgeVariant::FullyConnected),
            _ => None,
        }
    }
}

impl fmt::Display for EdgeVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EdgeVariant::Directed => write!(f, "directed"),
            EdgeVariant::Undirected => write!(f, "undirected"),
            EdgeVariant::FullyConnected => write!(f, "fully-connected"),
        }
    }
}

/// Adjacency matrix with self-connections plus its row-normalized form.
#[derive(Debug, Clone)]
pub struct Adjacency {
    /// `M`: 1 on the diagonal, 1 where the variant places an edge.
    pub matrix: Tensor,
    /// `D⁻¹M`: every row sums to 1.
    pub normalized: Tensor,
}

impl Mag {
    /// Number of post-initial rounds (0 for a consensus-at-start graph).
    pub fn n_rounds(&self) -> usize {
        self.nodes.iter().map(|n| n.round).max().unwrap_or(0)
    }

    pub fn structure_class(&self) -> Result<StructureClass, GraphError> {
        StructureClass::from_rounds(self.n_rounds())
    }

    pub fn node_id(&self, agent: usize, round: usize) -> usize {
        agent + self.n_agents * round
    }

    /// Indices (= ids) of correct nodes, in node order.
    pub fn correct_nodes(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .filter(|n| n.is_correct())
            .map(|n| n.id)
            .collect()
    }

    /// Indices (= ids) of incorrect nodes, in node order.
    pub fn incorrect_nodes(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .filter(|n| !n.is_correct())
            .map(|n| n.id)
            .collect()
    }

    pub fn node(&self, id: usize) -> &NodeRecord {
        &self.nodes[id]
    }

    /// Check every structural invariant. Construction goes through here, and
    /// so does every graph loaded from disk.
    pub fn validate(&self) -> Result<(), GraphError> {
        if self.nodes.is_empty() {
            return Err(GraphError::EmptyGraph);
        }
        if self.n_agents == 0 {
            return Err(GraphError::Schema("n_agents must be positive".into()));
        }
        let n = self.n_agents;
        let r = self.n_rounds();

        let mut seen = HashSet::new();
        for (position, node) in self.nodes.iter().enumerate() {
            if node.id != position {
                return Err(GraphError::NodeOrder {
                    position,
                    id: node.id,
                });
            }
            if node.agent >= n {
                return Err(GraphError::AgentOutOfRange {
                    agent: node.agent,
                    n_agents: n,
                });
            }
            if node.label > 1 {
                return Err(GraphError::LabelOutOfRange { label: node.label });
            }
            if !seen.insert((node.agent, node.round)) {
                return Err(GraphError::DuplicateAgentRound {
                    agent: node.agent,
                    round: node.round,
                });
            }
            let expected = self.node_id(node.agent, node.round);
            if node.id != expected {
                return Err(GraphError::IdConvention {
                    node: node.id,
                    expected,
                });
            }
            let should_be = canonical_answer(&node.answer) == canonical_answer(&self.instance.gold);
            if node.is_correct() != should_be {
                return Err(GraphError::LabelMismatch {
                    node: node.id,
                    label: node.label,
                });
            }
        }
        for round in 0..=r {
            for agent in 0..n {
                if !seen.contains(&(agent, round)) {
                    return Err(GraphError::RoundIncomplete { round, agent });
                }
            }
        }
        // Node ids follow the convention and (agent, round) pairs are unique,
        // so nodes must be sorted for round-trip-stable serialization.
        let node_count = n * (r + 1);
        debug_assert_eq!(self.nodes.len(), node_count);

        let mut edge_set = HashSet::new();
        for &(src, dst) in &self.edges {
            for node in [src, dst] {
                if node >= node_count {
                    return Err(GraphError::UnknownNode { node });
                }
            }
            let src_round = src / n;
            let dst_round = dst / n;
            if dst_round != src_round + 1 {
                return Err(GraphError::Acyclicity {
                    src,
                    dst,
                    src_round,
                    dst_round,
                });
            }
            if !edge_set.insert((src, dst)) {
                return Err(GraphError::DuplicateEdge { src, dst });
            }
        }
        for round in 1..=r {
            for target in 0..n {
                for source in 0..n {
                    let src = self.node_id(source, round - 1);
                    let dst = self.node_id(target, round);
                    if !edge_set.contains(&(src, dst)) {
                        return Err(GraphError::MissingEdge { src, dst });
                    }
                }
            }
        }
        debug_assert_eq!(self.edges.len(), n * n * r);
        Ok(())
    }

    /// Adjacency matrix with self-connections for the requested variant,
    /// plus its row-normalized form.
    pub fn adjacency(&self, variant: EdgeVariant) -> Adjacency {
        let n = self.nodes.len();
        let mut m = vec![0.0; n * n];
        match variant {
            EdgeVariant::FullyConnected => m.fill(1.0),
            EdgeVariant::Directed => {
                for &(src, dst) in &self.edges {
                    m[dst * n + src] = 1.0;
                }
            }
            EdgeVariant::Undirected => {
                for &(src, dst) in &self.edges {
                    m[dst * n + src] = 1.0;
                    m[src * n + dst] = 1.0;
                }
            }
        }
        for i in 0..n {
            m[i * n + i] = 1.0;
        }
        let mut normalized = m.clone();
        for row in normalized.chunks_exact_mut(n) {
            let degree: f64 = row.iter().sum();
            for v in row {
                *v /= degree;
            }
        }
        Adjacency {
            matrix: Tensor::new(vec![n, n], m).expect("square adjacency"),
            normalized: Tensor::new(vec![n, n], normalized).expect("square adjacency"),
        }
    }
}

/// Assemble a graph from per-round agent outputs, labeling every node by
/// canonical comparison of its answer with the instance gold.
///
/// `per_round_outputs[j]` holds one `(reasoning, answer)` pair per agent for
/// round `j`; round 0 must be present and every listed round complete.
pub fn build_mag(
    instance: InstanceRef,
    per_round_outputs: &[Vec<(String, String)>],
) -> Result<Mag, GraphError> {
    let n_agents = per_round_outputs.first().map_or(0, Vec::len);
    if per_round_outputs.is_empty() || n_agents == 0 {
        return Err(GraphError::MissingAgentOutput {
            round: 0,
            expected: n_agents.max(1),
            got: 0,
        });
    }
    let gold = canonical_answer(&instance.gold);
    let mut nodes = Vec::with_capacity(n_agents * per_round_outputs.len());
    for (round, outputs) in per_round_outputs.iter().enumerate() {
        if outputs.len() != n_agents {
            return Err(GraphError::MissingAgentOutput {
                round,
                expected: n_agents,
                got: outputs.len(),
            });
        }
        for (agent, (reasoning, answer)) in outputs.iter().enumerate() {
            let label = u8::from(canonical_answer(answer) == gold);
            nodes.push(NodeRecord {
                id: agent + n_agents * round,
                agent,
                round,
                reasoning: reasoning.clone(),
                answer: answer.clone(),
                label,
            });
        }
    }
    let mut edges = Vec::new();
    for round in 1..per_round_outputs.len() {
        for target in 0..n_agents {
            for source in 0..n_agents {
                edges.push((
                    source + n_agents * (round - 1),
                    target + n_agents * round,
                ));
            }
        }
    }
    let mag = Mag {
        instance,
        n_agents,
        nodes,
        edges,
    };
    mag.validate()?;
    Ok(mag)
}

/// Corpus breakdown along rounds, agents, and graph structures.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_graphs: usize,
    pub n_agents: usize,
    /// Node counts indexed by round 0..=3.
    pub nodes_per_round: [usize; 4],
    /// Node counts indexed by agent; all equal since every agent engages in
    /// every round.
    pub nodes_per_agent: Vec<usize>,
    /// Graph counts indexed by structure class G0..=G3.
    pub graphs_per_structure: [usize; 4],
}

impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "graphs: {} (G0/G1/G2/G3 = {}/{}/{}/{})",
            self.n_graphs,
            self.graphs_per_structure[0],
            self.graphs_per_structure[1],
            self.graphs_per_structure[2],
            self.graphs_per_structure[3],
        )?;
        writeln!(
            f,
            "nodes by round (0/1/2/3): {}/{}/{}/{}",
            self.nodes_per_round[0],
            self.nodes_per_round[1],
            self.nodes_per_round[2],
            self.nodes_per_round[3],
        )?;
        let per_agent: Vec<String> = self.nodes_per_agent.iter().map(usize::to_string).collect();
        write!(f, "nodes by agent: {}", per_agent.join("/"))
    }
}

/// Tally a corpus along rounds, agents, and structures. All graphs must
/// share the same agent count.
pub fn corpus_stats(corpus: &[Mag]) -> Result<CorpusStats, GraphError> {
    let first = corpus.first().ok_or(GraphError::EmptyCorpus)?;
    let n_agents = first.n_agents;
    let mut nodes_per_round = [0usize; 4];
    let mut nodes_per_agent = vec![0usize; n_agents];
    let mut graphs_per_structure = [0usize; 4];
    for mag in corpus {
        if mag.n_agents != n_agents {
            return Err(GraphError::MixedAgentCounts {
                expected: n_agents,
                found: mag.n_agents,
            });
        }
        let class = mag.structure_class()?;
        graphs_per_structure[class.rounds()] += 1;
        for node in &mag.nodes {
            nodes_per_round[node.round] += 1;
            nodes_per_agent[node.agent] += 1;
        }
    }
    Ok(CorpusStats {
        n_graphs: corpus.len(),
        n_agents,
        nodes_per_round,
        nodes_per_agent,
        graphs_per_structure,
    })
}

/// Keep exactly the graphs whose structure class satisfies the predicate.
/// The input corpus is left untouched.
pub fn filter_corpus(corpus: &[Mag], keep: impl Fn(StructureClass) -> bool) -> Vec<Mag> {
    let kept: Vec<Mag> = corpus
        .iter()
        .filter(|mag| mag.structure_class().map(&keep).unwrap_or(false))
        .cloned()
        .collect();
    if kept.is_empty() {
        log::warn!("corpus filter matched no graphs");
    }
    kept
}

/// Canonical single-line JSON for one graph.
pub fn serialize_mag(mag: &Mag) -> String {
    serde_json::to_string(mag).expect("graph serialization is infallible")
}

/// Parse and fully validate one graph from JSON text.
pub fn deserialize_mag(text: &str) -> Result<Mag, GraphError> {
    let mag: Mag = serde_json::from_str(text).map_err(classify_json_error)?;
    mag.validate()?;
    Ok(mag)
}

fn classify_json_error(err: serde_json::Error) -> GraphError {
    match err.classify() {
        serde_json::error::Category::Syntax | serde_json::error::Category::Eof => {
            GraphError::MalformedJson(err.to_string())
        }
        _ => GraphError::Schema(err.to_string()),
    }
}

/// Read a newline-delimited JSON corpus, validating every graph.
pub fn read_corpus(path: &Path) -> Result<Vec<Mag>, GraphError> {
    let file = fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut corpus = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mag = deserialize_mag(&line).map_err(|source| GraphError::CorpusLine {
            line: idx + 1,
            source: Box::new(source),
        })?;
        corpus.push(mag);
    }
    Ok(corpus)
}

/// Write a corpus as newline-delimited JSON, one graph per line.
pub fn write_corpus(path: &Path, corpus: &[Mag]) -> Result<(), GraphError> {
    let mut out = String::new();
    for mag in corpus {
        out.push_str(&serialize_mag(mag));
        out.push('\n');
    }
    let mut file = fs::File::create(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn instance() -> InstanceRef {
        InstanceRef {
            id: "t-0".into(),
            question: "3+5+9 mod 10 = ?".into(),
            gold: "7".into(),
        }
    }

    /// Graph with `rounds` post-initial rounds; agent 0 answers wrong in
    /// round 0 when `with_negative` is set.
    fn fixture(rounds: usize, with_negative: bool) -> Mag {
        let mut per_round = Vec::new();
        for round in 0..=rounds {
            let mut outputs = Vec::new();
            for agent in 0..3 {
                let answer = if with_negative && round == 0 && agent == 0 {
                    "4".to_string()
                } else {
                    "7".to_string()
                };
                outputs.push((format!("chain a{agent} r{round}"), answer));
            }
            per_round.push(outputs);
        }
        build_mag(instance(), &per_round).unwrap()
    }

    #[test]
    fn one_round_three_agents_has_six_nodes_nine_edges() {
        let mag = fixture(1, false);
        assert_eq!(mag.nodes.len(), 6);
        assert_eq!(mag.edges.len(), 9);
        assert_eq!(mag.structure_class().unwrap(), StructureClass::G1);
    }

    #[test]
    fn consensus_at_start_is_three_disconnected_nodes() {
        let mag = fixture(0, false);
        assert_eq!(mag.nodes.len(), 3);
        assert!(mag.edges.is_empty());
        assert_eq!(mag.structure_class().unwrap(), StructureClass::G0);
    }

    #[test]
    fn two_rounds_has_nine_nodes_eighteen_edges() {
        let mag = fixture(2, false);
        assert_eq!(mag.nodes.len(), 9);
        assert_eq!(mag.edges.len(), 18);
    }

    #[test]
    fn twelve_node_graph_is_g3() {
        let mag = fixture(3, false);
        assert_eq!(mag.nodes.len(), 12);
        assert_eq!(mag.structure_class().unwrap(), StructureClass::G3);
    }

    #[test]
    fn labels_follow_gold_comparison() {
        let mag = fixture(1, true);
        assert_eq!(mag.node(0).label, 0);
        assert_eq!(mag.node(1).label, 1);
        assert_eq!(mag.correct_nodes().len(), 5);
        assert_eq!(mag.incorrect_nodes(), vec![0]);
    }

    #[test]
    fn build_rejects_missing_agent_output() {
        let bad = vec![vec![
            ("a".to_string(), "7".to_string()),
            ("b".to_string(), "7".to_string()),
        ]];
        let mut rounds = bad.clone();
        rounds.push(vec![("c".to_string(), "7".to_string())]);
        assert!(matches!(
            build_mag(instance(), &rounds),
            Err(GraphError::MissingAgentOutput { round: 1, .. })
        ));
    }

    #[test]
    fn canonicalization_matches_trailing_punctuation_and_case() {
        assert_eq!(canonical_answer("  Yes. "), "yes");
        assert_eq!(canonical_answer("7"), canonical_answer("7 ."));
        assert_eq!(canonical_answer("A-1"), "a-1");
    }

    #[test]
    fn serialization_round_trips() {
        let mag = fixture(2, true);
        let text = serialize_mag(&mag);
        assert!(!text.contains('\n'));
        let back = deserialize_mag(&text).unwrap();
        assert_eq!(back, mag);
    }

    #[test]
    fn backward_edge_rejected_as_acyclicity_error() {
        let mut mag = fixture(2, false);
        // Redirect one edge to point from round 2 back to round 1.
        mag.edges.push((mag.node_id(0, 2), mag.node_id(0, 1)));
        let text = serialize_mag(&mag);
        assert!(matches!(
            deserialize_mag(&text),
            Err(GraphError::Acyclicity { .. })
        ));
    }

    #[test]
    fn duplicate_agent_round_rejected() {
        let mut mag = fixture(0, false);
        let mut dup = mag.nodes[1].clone();
        dup.id = mag.nodes.len();
        mag.nodes.push(dup);
        // Re-align the duplicate's id with the convention so uniqueness is
        // the first violated invariant.
        mag.nodes[3].id = 3;
        mag.nodes[3].agent = 1;
        mag.nodes[3].round = 0;
        let err = {
            let text = serialize_mag(&mag);
            deserialize_mag(&text).unwrap_err()
        };
        assert!(
            matches!(
                err,
                GraphError::DuplicateAgentRound { .. } | GraphError::IdConvention { .. }
            ),
            "{err}"
        );
    }

    #[test]
    fn unknown_fields_rejected_with_schema_error() {
        let mag = fixture(0, false);
        let mut value: serde_json::Value = serde_json::from_str(&serialize_mag(&mag)).unwrap();
        value["confidence"] = serde_json::json!(0.9);
        assert!(matches!(
            deserialize_mag(&value.to_string()),
            Err(GraphError::Schema(_))
        ));
    }

    #[test]
    fn malformed_json_distinct_from_schema_error() {
        assert!(matches!(
            deserialize_mag("{not json"),
            Err(GraphError::MalformedJson(_))
        ));
    }

    #[test]
    fn adjacency_identity_for_g0() {
        let mag = fixture(0, false);
        for variant in [EdgeVariant::Directed, EdgeVariant::Undirected] {
            let adj = mag.adjacency(variant);
            assert_eq!(
                adj.matrix,
                Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap()
            );
            assert_eq!(adj.normalized, adj.matrix);
        }
    }

    #[test]
    fn adjacency_rows_normalize_to_one() {
        let mag = fixture(1, false);
        for variant in [
            EdgeVariant::Directed,
            EdgeVariant::Undirected,
            EdgeVariant::FullyConnected,
        ] {
            let adj = mag.adjacency(variant);
            let (rows, _) = adj.normalized.rows_cols();
            for r in 0..rows {
                let sum: f64 = adj.normalized.row(r).iter().sum();
                assert!((sum - 1.0).abs() < 1e-12, "{variant}: row {r} sums to {sum}");
            }
        }
    }

    #[test]
    fn fully_connected_is_all_ones() {
        let mag = fixture(1, false);
        let adj = mag.adjacency(EdgeVariant::FullyConnected);
        assert!(adj.matrix.data().iter().all(|&v| v == 1.0));
        assert_eq!(adj.matrix.shape(), &[6, 6]);
    }

    #[test]
    fn directed_round1_rows_average_four_entries() {
        let mag = fixture(1, false);
        let adj = mag.adjacency(EdgeVariant::Directed);
        for target in 3..6 {
            let row = adj.normalized.row(target);
            let nonzero: Vec<f64> = row.iter().copied().filter(|&v| v != 0.0).collect();
            assert_eq!(nonzero.len(), 4);
            assert!(nonzero.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        }
    }

    #[test]
    fn corpus_stats_single_g0() {
        let stats = corpus_stats(&[fixture(0, false)]).unwrap();
        assert_eq!(stats.nodes_per_round, [3, 0, 0, 0]);
        assert_eq!(stats.graphs_per_structure, [1, 0, 0, 0]);
        assert_eq!(stats.nodes_per_agent, vec![1, 1, 1]);
    }

    #[test]
    fn corpus_stats_rejects_mixed_agent_counts() {
        let three = fixture(0, false);
        let two = build_mag(
            instance(),
            &[vec![
                ("a".to_string(), "7".to_string()),
                ("b".to_string(), "7".to_string()),
            ]],
        )
        .unwrap();
        assert!(matches!(
            corpus_stats(&[three, two]),
            Err(GraphError::MixedAgentCounts { .. })
        ));
    }

    #[test]
    fn filter_drops_requested_structures() {
        let corpus = vec![fixture(0, false), fixture(1, false), fixture(3, false)];
        let kept = filter_corpus(&corpus, |c| c != StructureClass::G3);
        assert_eq!(kept.len(), 2);
        let all = filter_corpus(&corpus, |_| true);
        assert_eq!(all.len(), corpus.len());
        assert_eq!(corpus.len(), 3, "input unchanged");
    }
}
