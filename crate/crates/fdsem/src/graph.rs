//! Dependency graphs, vocabularies, and the corpus / benchmark file formats.
//!
//! A corpus ("sembank") is UTF-8 JSON Lines, one graph per line:
//!
//! ```text
//! {"nodes":["_picture_n","_tell_v","_story_n"],"edges":[[1,"ARG1",0],[1,"ARG2",2]]}
//! ```
//!
//! A `null` node is a masked predicate: the graph structure is known but the
//! word at that node is not. Benchmarks are tab-separated files described on
//! the loader functions.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Interned predicate and dependency-label names.
///
/// Ids are dense 0-based indices in first-appearance order; predicate
/// frequencies count occurrences across the corpus the vocabulary was built
/// from.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    predicates: Vec<(String, u64)>,
    labels: Vec<String>,
    predicate_index: HashMap<String, usize>,
    label_index: HashMap<String, usize>,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.predicates == other.predicates && self.labels == other.labels
    }
}

impl Vocabulary {
    pub fn from_parts(predicates: Vec<(String, u64)>, labels: Vec<String>) -> Result<Self> {
        let mut predicate_index = HashMap::new();
        for (id, (name, freq)) in predicates.iter().enumerate() {
            if *freq == 0 {
                return Err(Error::Vocab(format!("predicate {name:?} has frequency 0")));
            }
            if predicate_index.insert(name.clone(), id).is_some() {
                return Err(Error::Vocab(format!("duplicate predicate name {name:?}")));
            }
        }
        let mut label_index = HashMap::new();
        for (id, name) in labels.iter().enumerate() {
            if label_index.insert(name.clone(), id).is_some() {
                return Err(Error::Vocab(format!("duplicate label name {name:?}")));
            }
        }
        Ok(Vocabulary { predicates, labels, predicate_index, label_index })
    }

    pub fn num_predicates(&self) -> usize {
        self.predicates.len()
    }

    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn predicate_id(&self, name: &str) -> Option<usize> {
        self.predicate_index.get(name).copied()
    }

    pub fn label_id(&self, name: &str) -> Option<usize> {
        self.label_index.get(name).copied()
    }

    pub fn predicate_name(&self, id: usize) -> &str {
        &self.predicates[id].0
    }

    pub fn label_name(&self, id: usize) -> &str {
        &self.labels[id]
    }

    pub fn frequency(&self, id: usize) -> u64 {
        self.predicates[id].1
    }

    pub fn predicates(&self) -> &[(String, u64)] {
        &self.predicates
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

/// Incrementally interns names while parsing a corpus.
#[derive(Default)]
struct VocabularyBuilder {
    predicates: Vec<(String, u64)>,
    labels: Vec<String>,
    predicate_index: HashMap<String, usize>,
    label_index: HashMap<String, usize>,
}

impl VocabularyBuilder {
    fn intern_predicate(&mut self, name: &str) -> usize {
        if let Some(&id) = self.predicate_index.get(name) {
            self.predicates[id].1 += 1;
            id
        } else {
            let id = self.predicates.len();
            self.predicates.push((name.to_owned(), 1));
            self.predicate_index.insert(name.to_owned(), id);
            id
        }
    }

    fn intern_label(&mut self, name: &str) -> usize {
        if let Some(&id) = self.label_index.get(name) {
            id
        } else {
            let id = self.labels.len();
            self.labels.push(name.to_owned());
            self.label_index.insert(name.to_owned(), id);
            id
        }
    }

    fn finish(self) -> Vocabulary {
        Vocabulary {
            predicates: self.predicates,
            labels: self.labels,
            predicate_index: self.predicate_index,
            label_index: self.label_index,
        }
    }
}

/// A labelled directed edge between two nodes of a dependency graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edge {
    pub source: usize,
    pub label: usize,
    pub target: usize,
}

/// A semantic dependency graph. Each node carries a predicate id or `None`
/// when the predicate is masked.
#[derive(Debug, Clone, PartialEq)]
pub struct DependencyGraph {
    nodes: Vec<Option<usize>>,
    edges: Vec<Edge>,
}

impl DependencyGraph {
    /// Validates the structural invariants: at least one node, no self-loops,
    /// at most one edge per (source, label), in-range indices, and a connected
    /// underlying undirected graph.
    pub fn new(nodes: Vec<Option<usize>>, edges: Vec<Edge>) -> Result<Self> {
        let n = nodes.len();
        if n == 0 {
            return Err(Error::Graph("graph has no nodes".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for e in &edges {
            if e.source >= n || e.target >= n {
                return Err(Error::Graph(format!(
                    "edge ({}, {}, {}) references a node outside 0..{n}",
                    e.source, e.label, e.target
                )));
            }
            if e.source == e.target {
                return Err(Error::Graph(format!("self-loop on node {}", e.source)));
            }
            if !seen.insert((e.source, e.label)) {
                return Err(Error::Graph(format!(
                    "duplicate edge for (source {}, label {})",
                    e.source, e.label
                )));
            }
        }
        let g = DependencyGraph { nodes, edges };
        if !g.is_connected() {
            return Err(Error::Graph("underlying undirected graph is disconnected".into()));
        }
        Ok(g)
    }

    fn is_connected(&self) -> bool {
        let n = self.nodes.len();
        let mut adj = vec![Vec::new(); n];
        for e in &self.edges {
            adj[e.source].push(e.target);
            adj[e.target].push(e.source);
        }
        let mut visited = vec![false; n];
        let mut stack = vec![0usize];
        visited[0] = true;
        let mut count = 1;
        while let Some(v) = stack.pop() {
            for &w in &adj[v] {
                if !visited[w] {
                    visited[w] = true;
                    count += 1;
                    stack.push(w);
                }
            }
        }
        count == n
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Predicate id at `node`, or `None` if the node is masked.
    pub fn predicate(&self, node: usize) -> Option<usize> {
        self.nodes[node]
    }

    pub fn nodes(&self) -> &[Option<usize>] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }
}

/// A dependency graph with all predicates erased: edge structure and labels
/// only.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphTopology {
    num_nodes: usize,
    edges: Vec<Edge>,
}

impl GraphTopology {
    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// The topology as a dependency graph with every node masked.
    pub fn to_graph(&self) -> DependencyGraph {
        DependencyGraph { nodes: vec![None; self.num_nodes], edges: self.edges.clone() }
    }
}

/// Erases predicates, keeping structure and labels. Idempotent in the sense
/// that the topology of `topology.to_graph()` is `topology` again.
pub fn topology_of(graph: &DependencyGraph) -> GraphTopology {
    GraphTopology { num_nodes: graph.num_nodes(), edges: graph.edges.clone() }
}

/// Masks each node's predicate independently with probability `rate`.
/// Edges and node count are never altered.
pub fn apply_mask<R: Rng>(
    graph: &DependencyGraph,
    rate: f64,
    rng: &mut R,
) -> Result<DependencyGraph> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Invalid(format!("mask rate {rate} outside [0, 1]")));
    }
    let nodes = graph
        .nodes
        .iter()
        .map(|p| if rng.random::<f64>() < rate { None } else { *p })
        .collect();
    Ok(DependencyGraph { nodes, edges: graph.edges.clone() })
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    nodes: Vec<Option<String>>,
    edges: Vec<(usize, String, usize)>,
}

#[derive(Serialize)]
struct RawRecordOut<'a> {
    nodes: Vec<Option<&'a str>>,
    edges: Vec<(usize, &'a str, usize)>,
}

/// Parses a JSON Lines sembank, building the vocabulary as it goes.
/// Blank lines are skipped; errors report 1-based line numbers.
pub fn parse_sembank<R: BufRead>(reader: R) -> Result<(Vec<DependencyGraph>, Vocabulary)> {
    let mut builder = VocabularyBuilder::default();
    let mut graphs = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: RawRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: lineno, message: e.to_string() })?;
        let nodes: Vec<Option<usize>> = record
            .nodes
            .iter()
            .map(|p| p.as_deref().map(|name| builder.intern_predicate(name)))
            .collect();
        let edges: Vec<Edge> = record
            .edges
            .iter()
            .map(|(s, l, t)| Edge { source: *s, label: builder.intern_label(l), target: *t })
            .collect();
        let graph = DependencyGraph::new(nodes, edges).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        graphs.push(graph);
    }
    Ok((graphs, builder.finish()))
}

/// Parses a single graph record against a fixed vocabulary; unknown predicate
/// or label names are errors rather than new entries.
pub fn parse_graph_record(json: &str, vocab: &Vocabulary) -> Result<DependencyGraph> {
    let record: RawRecord =
        serde_json::from_str(json).map_err(|e| Error::Parse { line: 0, message: e.to_string() })?;
    let nodes: Vec<Option<usize>> = record
        .nodes
        .iter()
        .map(|p| match p.as_deref() {
            None => Ok(None),
            Some(name) => vocab
                .predicate_id(name)
                .map(Some)
                .ok_or_else(|| Error::Vocab(format!("unknown predicate {name:?}"))),
        })
        .collect::<Result<_>>()?;
    let edges: Vec<Edge> = record
        .edges
        .iter()
        .map(|(s, l, t)| {
            let label = vocab
                .label_id(l)
                .ok_or_else(|| Error::Vocab(format!("unknown dependency label {l:?}")))?;
            Ok(Edge { source: *s, label, target: *t })
        })
        .collect::<Result<_>>()?;
    DependencyGraph::new(nodes, edges)
}

/// Serialises one graph as a sembank JSON line (no trailing newline).
pub fn graph_to_json(graph: &DependencyGraph, vocab: &Vocabulary) -> String {
    let record = RawRecordOut {
        nodes: graph
            .nodes
            .iter()
            .map(|p| p.map(|id| vocab.predicate_name(id)))
            .collect(),
        edges: graph
            .edges
            .iter()
            .map(|e| (e.source, vocab.label_name(e.label), e.target))
            .collect(),
    };
    serde_json::to_string(&record).expect("graph records are always serialisable")
}

/// Writes a whole sembank, one graph per line.
pub fn write_sembank<W: Write>(
    graphs: &[DependencyGraph],
    vocab: &Vocabulary,
    mut writer: W,
) -> Result<()> {
    for g in graphs {
        writeln!(writer, "{}", graph_to_json(g, vocab))?;
    }
    Ok(())
}

/// Which argument slot of a subject-verb-object property graph is queried.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Subject,
    Object,
}

impl Role {
    fn parse(s: &str) -> Option<Role> {
        match s {
            "SBJ" => Some(Role::Subject),
            "OBJ" => Some(Role::Object),
            _ => None,
        }
    }
}

/// One row of a ranking benchmark: a term paired with a property given as a
/// head noun plus a verb-argument pair, the role saying which argument slot
/// the head noun (and hence the queried pixie) occupies.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingRow {
    pub term: String,
    pub role: Role,
    pub headnoun: String,
    pub verb: String,
    pub argnoun: String,
}

/// One similarity judgement: a subject-verb-object triple for the first verb,
/// a second verb to compare against, a numeric score, and an annotator id.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityRow {
    pub verb1: String,
    pub subject: String,
    pub object: String,
    pub verb2: String,
    pub score: f64,
    pub annotator: String,
}

fn split_tsv(line: &str, want: usize, lineno: usize) -> Result<Vec<&str>> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != want {
        return Err(Error::Parse {
            line: lineno,
            message: format!("expected {want} tab-separated fields, found {}", fields.len()),
        });
    }
    Ok(fields)
}

/// Loads a ranking benchmark (term, role, headnoun, verb, argnoun per row).
/// An empty file is an empty benchmark.
pub fn load_ranking_benchmark<R: BufRead>(reader: R) -> Result<Vec<RankingRow>> {
    let mut rows = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f = split_tsv(&line, 5, lineno)?;
        let role = Role::parse(f[1]).ok_or_else(|| Error::Parse {
            line: lineno,
            message: format!("unknown role tag {:?} (expected SBJ or OBJ)", f[1]),
        })?;
        rows.push(RankingRow {
            term: f[0].to_owned(),
            role,
            headnoun: f[2].to_owned(),
            verb: f[3].to_owned(),
            argnoun: f[4].to_owned(),
        });
    }
    Ok(rows)
}

/// Loads a similarity benchmark (verb1, subject, object, verb2, score,
/// annotator per row).
pub fn load_similarity_benchmark<R: BufRead>(reader: R) -> Result<Vec<SimilarityRow>> {
    let mut rows = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f = split_tsv(&line, 6, lineno)?;
        let score: f64 = f[4].parse().map_err(|_| Error::Parse {
            line: lineno,
            message: format!("score {:?} is not a number", f[4]),
        })?;
        rows.push(SimilarityRow {
            verb1: f[0].to_owned(),
            subject: f[1].to_owned(),
            object: f[2].to_owned(),
            verb2: f[3].to_owned(),
            score,
            annotator: f[5].to_owned(),
        });
    }
    Ok(rows)
}
