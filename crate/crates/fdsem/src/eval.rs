//! Logical inference over a trained model and the two benchmark protocols.
//!
//! A query builds a small dependency graph, encodes it (no dropout), and
//! applies one predicate's semantic function to a chosen node's activation
//! vector. Ranking benchmarks score every property for every term and report
//! mean average precision; similarity benchmarks correlate truth
//! probabilities with human judgements via Spearman's rho.

use std::collections::HashMap;

use serde::Serialize;

use crate::encoder::{encode, EncoderParams};
use crate::error::{Error, Result};
use crate::graph::{DependencyGraph, Edge, RankingRow, Role, SimilarityRow, Vocabulary};
use crate::lexicon::{expected_truth, LexicalModel};
use crate::world::WorldModel;

/// A frozen model plus the vocabulary it was trained with.
#[derive(Clone, Copy)]
pub struct ModelStack<'a> {
    pub vocab: &'a Vocabulary,
    pub world: &'a WorldModel,
    pub lexical: &'a LexicalModel,
    pub encoder: &'a EncoderParams,
}

/// Probability that `predicate` is true of the pixie at `node`, after
/// contextualised inference over the whole graph.
pub fn infer_truth(
    graph: &DependencyGraph,
    node: usize,
    predicate: usize,
    stack: &ModelStack,
) -> Result<f64> {
    if node >= graph.num_nodes() {
        return Err(Error::Invalid(format!(
            "node {node} out of range for a {}-node graph",
            graph.num_nodes()
        )));
    }
    let mf = encode(graph, stack.encoder, stack.world.card())?;
    expected_truth(mf.node(node), predicate, stack.lexical)
}

/// Average precision of a ranked relevance list. Requires at least one
/// relevant item.
pub fn average_precision(relevance: &[bool]) -> Result<f64> {
    if relevance.is_empty() {
        return Err(Error::Invalid("average precision of an empty ranking".into()));
    }
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank0, &rel) in relevance.iter().enumerate() {
        if rel {
            hits += 1;
            total += hits as f64 / (rank0 + 1) as f64;
        }
    }
    if hits == 0 {
        return Err(Error::Invalid("ranking contains no relevant items".into()));
    }
    Ok(total / hits as f64)
}

fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("no NaN scores"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        // ties share the mean of the ranks they span (1-based)
        let mean = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            ranks[k] = mean;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties. A zero-variance
/// input has no defined correlation; by convention the result is 0 with the
/// degenerate flag set.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<(f64, bool)> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(Error::Invalid(format!(
            "spearman needs two equal-length non-empty sequences, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..xs.len() {
        let dx = rx[i] - mx;
        let dy = ry[i] - my;
        cov += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    if vx == 0.0 || vy == 0.0 {
        return Ok((0.0, true));
    }
    Ok((cov / (vx * vy).sqrt(), false))
}

/// A property with resolved predicate ids: a subject-verb-object graph and
/// the node the term is applied to.
#[derive(Debug, Clone, PartialEq)]
struct ResolvedProperty {
    row: RankingRow,
    graph: DependencyGraph,
    target: usize,
}

/// Builds the three-node subject-verb-object graph for a property; the head
/// noun occupies the role slot, which is also the queried node.
fn property_graph(
    row: &RankingRow,
    arg1: usize,
    arg2: usize,
    resolve: &impl Fn(&str) -> Option<usize>,
) -> Option<(DependencyGraph, usize)> {
    let verb = resolve(&row.verb)?;
    let head = resolve(&row.headnoun)?;
    let arg = resolve(&row.argnoun)?;
    let (subject, object, target) = match row.role {
        Role::Subject => (head, arg, 0usize),
        Role::Object => (arg, head, 2usize),
    };
    let graph = DependencyGraph::new(
        vec![Some(subject), Some(verb), Some(object)],
        vec![
            Edge { source: 1, label: arg1, target: 0 },
            Edge { source: 1, label: arg2, target: 2 },
        ],
    )
    .ok()?;
    Some((graph, target))
}

fn svo_labels(vocab: &Vocabulary) -> Result<(usize, usize)> {
    let arg1 = vocab
        .label_id("ARG1")
        .ok_or_else(|| Error::Vocab("vocabulary has no ARG1 label; cannot build property graphs".into()))?;
    let arg2 = vocab
        .label_id("ARG2")
        .ok_or_else(|| Error::Vocab("vocabulary has no ARG2 label; cannot build property graphs".into()))?;
    Ok((arg1, arg2))
}

/// Per-term ranking outcome.
#[derive(Debug, Clone, Serialize)]
pub struct TermResult {
    pub term: String,
    pub average_precision: f64,
    /// 1-based ranks of this term's confounder properties, if any.
    pub mean_confounder_rank: Option<f64>,
    /// Property indices into the report's property list, best first, with
    /// scores (non-increasing) and relevance flags.
    pub ranking: Vec<(usize, f64, bool)>,
}

/// Ranking-benchmark report.
#[derive(Debug, Clone, Serialize)]
pub struct RankingReport {
    pub map: f64,
    pub terms: Vec<TermResult>,
    /// Distinct properties in benchmark order (head, role, verb, argument).
    pub properties: Vec<String>,
    pub oov_terms: usize,
    pub skipped_properties: usize,
    /// Terms dropped because no relevant property survived resolution.
    pub skipped_terms: usize,
}

/// Scores every property for every term and reports mean average precision.
/// A property is relevant to the terms it is listed under; a property whose
/// head noun or argument equals a term, without being relevant to it, counts
/// as a confounder for that term. Out-of-vocabulary terms and properties are
/// skipped and counted. `lexeme_map` optionally maps benchmark lexemes to
/// vocabulary predicate names before lookup.
pub fn score_ranking(
    rows: &[RankingRow],
    stack: &ModelStack,
    lexeme_map: Option<&HashMap<String, String>>,
) -> Result<RankingReport> {
    let vocab = stack.vocab;
    let (arg1, arg2) = svo_labels(vocab)?;
    let resolve = |lexeme: &str| -> Option<usize> {
        let name = lexeme_map.and_then(|m| m.get(lexeme).map(String::as_str)).unwrap_or(lexeme);
        vocab.predicate_id(name)
    };

    // distinct properties in order of first appearance
    let mut prop_rows: Vec<RankingRow> = Vec::new();
    let mut prop_index: HashMap<(Role, String, String, String), usize> = HashMap::new();
    let mut relevant: HashMap<String, Vec<usize>> = HashMap::new();
    let mut term_order: Vec<String> = Vec::new();
    for row in rows {
        let key = (row.role, row.headnoun.clone(), row.verb.clone(), row.argnoun.clone());
        let idx = *prop_index.entry(key).or_insert_with(|| {
            prop_rows.push(row.clone());
            prop_rows.len() - 1
        });
        if !relevant.contains_key(&row.term) {
            term_order.push(row.term.clone());
        }
        relevant.entry(row.term.clone()).or_default().push(idx);
    }

    let mut skipped_properties = 0usize;
    let mut resolved: Vec<Option<ResolvedProperty>> = Vec::new();
    for row in &prop_rows {
        match property_graph(row, arg1, arg2, &resolve) {
            Some((graph, target)) => {
                resolved.push(Some(ResolvedProperty { row: row.clone(), graph, target }))
            }
            None => {
                skipped_properties += 1;
                resolved.push(None);
            }
        }
    }

    let mut oov_terms = 0usize;
    let mut skipped_terms = 0usize;
    let mut terms = Vec::new();
    let mut ap_sum = 0.0;
    for term in &term_order {
        let Some(term_id) = resolve(term) else {
            oov_terms += 1;
            continue;
        };
        let rel = &relevant[term];
        let mut scored: Vec<(usize, f64)> = Vec::new();
        for (idx, prop) in resolved.iter().enumerate() {
            let Some(p) = prop else { continue };
            let score = infer_truth(&p.graph, p.target, term_id, stack)?;
            scored.push((idx, score));
        }
        // order only depends on scores; ties break on benchmark order
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("no NaN scores").then(a.0.cmp(&b.0)));
        let flags: Vec<bool> = scored.iter().map(|(idx, _)| rel.contains(idx)).collect();
        if !flags.iter().any(|&f| f) {
            skipped_terms += 1;
            continue;
        }
        let ap = average_precision(&flags)?;
        ap_sum += ap;
        // confounders: properties mentioning the term without being relevant
        let mut confounder_ranks = Vec::new();
        for (rank0, (idx, _)) in scored.iter().enumerate() {
            let row = &prop_rows[*idx];
            if (row.headnoun == *term || row.argnoun == *term) && !rel.contains(idx) {
                confounder_ranks.push((rank0 + 1) as f64);
            }
        }
        let mean_confounder_rank = if confounder_ranks.is_empty() {
            None
        } else {
            Some(confounder_ranks.iter().sum::<f64>() / confounder_ranks.len() as f64)
        };
        terms.push(TermResult {
            term: term.clone(),
            average_precision: ap,
            mean_confounder_rank,
            ranking: scored
                .iter()
                .zip(&flags)
                .map(|(&(idx, score), &f)| (idx, score, f))
                .collect(),
        });
    }
    if terms.is_empty() {
        return Err(Error::Invalid("no scorable terms in the ranking benchmark".into()));
    }
    Ok(RankingReport {
        map: ap_sum / terms.len() as f64,
        properties: prop_rows
            .iter()
            .map(|r| {
                let role = match r.role {
                    Role::Subject => "SBJ",
                    Role::Object => "OBJ",
                };
                format!("{} {role} {} {}", r.headnoun, r.verb, r.argnoun)
            })
            .collect(),
        terms,
        oov_terms,
        skipped_properties,
        skipped_terms,
    })
}

/// Direction of contextualised similarity scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimilarityMode {
    /// Contextualise only the first verb's graph and apply the second verb.
    OneDirection,
    /// Average the two directed probabilities.
    BothDirections,
}

#[derive(Debug, Clone, Serialize)]
pub struct PairScore {
    pub verb1: String,
    pub subject: String,
    pub object: String,
    pub verb2: String,
    pub model_score: f64,
    pub judgement: f64,
    pub annotator: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimilarityReport {
    /// Rho over individual judgements.
    pub separate: f64,
    pub separate_degenerate: bool,
    /// Rho over per-distinct-pair mean judgements.
    pub averaged: f64,
    pub averaged_degenerate: bool,
    pub skipped_rows: usize,
    pub pairs: Vec<PairScore>,
}

fn svo_graph(
    subject: usize,
    verb: usize,
    object: usize,
    arg1: usize,
    arg2: usize,
) -> Result<DependencyGraph> {
    DependencyGraph::new(
        vec![Some(subject), Some(verb), Some(object)],
        vec![
            Edge { source: 1, label: arg1, target: 0 },
            Edge { source: 1, label: arg2, target: 2 },
        ],
    )
}

/// Scores verb-pair similarity in context against human judgements.
pub fn score_similarity(
    rows: &[SimilarityRow],
    mode: SimilarityMode,
    stack: &ModelStack,
    lexeme_map: Option<&HashMap<String, String>>,
) -> Result<SimilarityReport> {
    let vocab = stack.vocab;
    let (arg1, arg2) = svo_labels(vocab)?;
    let resolve = |lexeme: &str| -> Option<usize> {
        let name = lexeme_map.and_then(|m| m.get(lexeme).map(String::as_str)).unwrap_or(lexeme);
        vocab.predicate_id(name)
    };
    let mut skipped_rows = 0usize;
    let mut pairs: Vec<PairScore> = Vec::new();
    let mut score_cache: HashMap<(usize, usize, usize, usize), f64> = HashMap::new();
    for row in rows {
        let ids = (
            resolve(&row.verb1),
            resolve(&row.subject),
            resolve(&row.object),
            resolve(&row.verb2),
        );
        let (Some(v1), Some(s), Some(o), Some(v2)) = ids else {
            skipped_rows += 1;
            continue;
        };
        let key = (v1, s, o, v2);
        let model_score = match score_cache.get(&key) {
            Some(&cached) => cached,
            None => {
                let forward = infer_truth(&svo_graph(s, v1, o, arg1, arg2)?, 1, v2, stack)?;
                let score = match mode {
                    SimilarityMode::OneDirection => forward,
                    SimilarityMode::BothDirections => {
                        let backward =
                            infer_truth(&svo_graph(s, v2, o, arg1, arg2)?, 1, v1, stack)?;
                        0.5 * (forward + backward)
                    }
                };
                score_cache.insert(key, score);
                score
            }
        };
        pairs.push(PairScore {
            verb1: row.verb1.clone(),
            subject: row.subject.clone(),
            object: row.object.clone(),
            verb2: row.verb2.clone(),
            model_score,
            judgement: row.score,
            annotator: row.annotator.clone(),
        });
    }
    if pairs.is_empty() {
        return Err(Error::Invalid("no scorable rows in the similarity benchmark".into()));
    }
    let xs: Vec<f64> = pairs.iter().map(|p| p.model_score).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.judgement).collect();
    let (separate, separate_degenerate) = spearman(&xs, &ys)?;

    // collapse to distinct pairs, averaging the judgements
    let mut pair_order: Vec<(String, String, String, String)> = Vec::new();
    let mut grouped: HashMap<(String, String, String, String), (f64, f64, usize)> = HashMap::new();
    for p in &pairs {
        let key = (p.verb1.clone(), p.subject.clone(), p.object.clone(), p.verb2.clone());
        let entry = grouped.entry(key.clone()).or_insert_with(|| {
            pair_order.push(key);
            (p.model_score, 0.0, 0)
        });
        entry.1 += p.judgement;
        entry.2 += 1;
    }
    let gx: Vec<f64> = pair_order.iter().map(|k| grouped[k].0).collect();
    let gy: Vec<f64> = pair_order.iter().map(|k| grouped[k].1 / grouped[k].2 as f64).collect();
    let (averaged, averaged_degenerate) = spearman(&gx, &gy)?;

    Ok(SimilarityReport {
        separate,
        separate_degenerate,
        averaged,
        averaged_degenerate,
        skipped_rows,
        pairs,
    })
}
