//! Exact brute-force inference over tiny models: the ground truth that every
//! approximation in this crate is checked against. All operations enumerate
//! the full joint space of cardinality-constrained pixie assignments and are
//! guarded by an enumeration budget.


use crate::error::{Error, Result};
use crate::graph::{topology_of, DependencyGraph};
use crate::lexicon::{clamp_truth, truth_prob, LexicalModel};
use crate::util::{combinations, logsumexp};
use crate::world::{
    enumerate_log_energies, enumeration_size, MeanFieldSituation, Pixie, SituationTable,
    WorldModel,
};

fn check_lex(world: &WorldModel, lex: &LexicalModel) -> Result<()> {
    if lex.dim() != world.dim() {
        return Err(Error::Shape(format!(
            "lexical dimension {} does not match world dimension {}",
            lex.dim(),
            world.dim()
        )));
    }
    if lex.num_predicates() == 0 {
        return Err(Error::Vocab("lexical model has no predicates".into()));
    }
    Ok(())
}

/// Per-subset log generation probabilities `log P(r | x)` for one observed
/// predicate, normalised over the whole vocabulary.
fn log_generation_per_subset(
    subsets: &[Vec<usize>],
    r: usize,
    lex: &LexicalModel,
) -> Result<Vec<f64>> {
    subsets
        .iter()
        .map(|s| {
            let pixie = Pixie::new(s.clone());
            let t_obs = clamp_truth(truth_prob(&pixie, r, lex)?);
            let mut total = 0.0;
            for cand in 0..lex.num_predicates() {
                total += clamp_truth(truth_prob(&pixie, cand, lex)?);
            }
            Ok((t_obs / total).ln())
        })
        .collect()
}

/// Exact posterior over situations given a fully observed graph:
/// `P(s | g) ∝ exp(-E(s)) · Π_nodes P(r | x)`.
pub fn exact_posterior(
    graph: &DependencyGraph,
    world: &WorldModel,
    lex: &LexicalModel,
    budget: u64,
) -> Result<SituationTable> {
    check_lex(world, lex)?;
    let topo = topology_of(graph);
    let n = topo.num_nodes();
    let total = enumeration_size(world.dim(), world.card(), n, budget)?;
    let subsets = combinations(world.dim(), world.card());
    let mut log_weights = enumerate_log_energies(&subsets, total, n, &topo, world)?;
    let base = subsets.len();
    for v in 0..n {
        let r = graph
            .predicate(v)
            .ok_or_else(|| Error::Invalid(format!("node {v} is masked; posterior needs all predicates observed")))?;
        let log_gen = log_generation_per_subset(&subsets, r, lex)?;
        let divisor = base.pow(v as u32);
        for (idx, lw) in log_weights.iter_mut().enumerate() {
            *lw += log_gen[idx / divisor % base];
        }
    }
    let lse = logsumexp(&log_weights);
    let log_probs: Vec<f64> = log_weights.iter().map(|lw| lw - lse).collect();
    let probs: Vec<f64> = log_probs.iter().map(|lp| lp.exp()).collect();
    Ok(SituationTable { subsets, num_nodes: n, probs, log_probs })
}

/// Divergence from the exact posterior to the mean-field distribution, with
/// each node's independent Bernoulli vector conditioned on exact cardinality
/// (the posterior has no support elsewhere). Non-negative; zero only when
/// they match.
pub fn exact_kl(
    mf: &MeanFieldSituation,
    graph: &DependencyGraph,
    world: &WorldModel,
    lex: &LexicalModel,
    budget: u64,
) -> Result<f64> {
    if mf.num_nodes() != graph.num_nodes() || mf.dim() != world.dim() {
        return Err(Error::Shape("mean field does not match graph and world shapes".into()));
    }
    let posterior = exact_posterior(graph, world, lex, budget)?;
    let subsets = &posterior.subsets;
    // per node: conditioned log-weights over subsets
    let n = graph.num_nodes();
    let mut node_log_q = Vec::with_capacity(n);
    for v in 0..n {
        let q = mf.node(v);
        let logs: Vec<f64> = subsets
            .iter()
            .map(|s| {
                (0..world.dim())
                    .map(|i| {
                        let qi = q[i].clamp(1e-300, 1.0 - 1e-16);
                        if s.contains(&i) {
                            qi.ln()
                        } else {
                            (1.0 - qi).ln()
                        }
                    })
                    .sum()
            })
            .collect();
        let z = logsumexp(&logs);
        node_log_q.push(logs.into_iter().map(|l| l - z).collect::<Vec<f64>>());
    }
    let base = subsets.len();
    let mut kl = 0.0;
    for idx in 0..posterior.num_configs() {
        let mut rem = idx;
        let mut log_q = 0.0;
        for nq in node_log_q.iter() {
            log_q += nq[rem % base];
            rem /= base;
        }
        if log_q == f64::NEG_INFINITY {
            continue;
        }
        kl += log_q.exp() * (log_q - posterior.log_probs[idx]);
    }
    Ok(kl.max(0.0))
}

/// Exact log-likelihood of a fully observed graph:
/// `log Σ_s P(s) Π_nodes P(r | x)`.
pub fn exact_log_likelihood(
    graph: &DependencyGraph,
    world: &WorldModel,
    lex: &LexicalModel,
    budget: u64,
) -> Result<f64> {
    check_lex(world, lex)?;
    let topo = topology_of(graph);
    let n = topo.num_nodes();
    let total = enumeration_size(world.dim(), world.card(), n, budget)?;
    let subsets = combinations(world.dim(), world.card());
    let prior_log = enumerate_log_energies(&subsets, total, n, &topo, world)?;
    let log_z = logsumexp(&prior_log);
    let mut joint_log = prior_log;
    let base = subsets.len();
    for v in 0..n {
        let r = graph
            .predicate(v)
            .ok_or_else(|| Error::Invalid(format!("node {v} is masked; likelihood needs all predicates observed")))?;
        let log_gen = log_generation_per_subset(&subsets, r, lex)?;
        let divisor = base.pow(v as u32);
        for (idx, lw) in joint_log.iter_mut().enumerate() {
            *lw += log_gen[idx / divisor % base];
        }
    }
    Ok(logsumexp(&joint_log) - log_z)
}

/// Unit marginals of the exact posterior, as a mean-field situation. The
/// best product-form summary of the true posterior.
pub fn exact_posterior_marginals(
    graph: &DependencyGraph,
    world: &WorldModel,
    lex: &LexicalModel,
    budget: u64,
) -> Result<MeanFieldSituation> {
    let table = exact_posterior(graph, world, lex, budget)?;
    Ok(MeanFieldSituation::new(table.unit_marginals(world.dim())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::sigmoid;
    use crate::world::{exact_prior, DEFAULT_ENUM_BUDGET};
    use ndarray::{array, Array1, Array2};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single_node_graph() -> DependencyGraph {
        DependencyGraph::new(vec![Some(0)], vec![]).unwrap()
    }

    fn two_node_graph() -> DependencyGraph {
        DependencyGraph::new(
            vec![Some(0), Some(1)],
            vec![crate::graph::Edge { source: 0, label: 0, target: 1 }],
        )
        .unwrap()
    }

    #[test]
    fn uniform_model_gives_uniform_posterior() {
        let world = WorldModel::zeros(3, 1, 1).unwrap();
        let lex = LexicalModel::zeros(2, 3);
        let post = exact_posterior(&two_node_graph(), &world, &lex, DEFAULT_ENUM_BUDGET).unwrap();
        for &p in &post.probs {
            assert!((p - 1.0 / 9.0).abs() < 1e-12);
        }
        let total: f64 = post.probs.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_node_posterior_ratio() {
        // vocabulary {p, q} with opposing unit preferences, p observed
        let world = WorldModel::zeros(2, 1, 0).unwrap();
        let lex =
            LexicalModel::new(array![[2.0, 0.0], [0.0, 2.0]], array![0.0, 0.0]).unwrap();
        let post = exact_posterior(&single_node_graph(), &world, &lex, DEFAULT_ENUM_BUDGET).unwrap();
        // subsets in order: {0}, {1}
        let ratio = post.probs[0] / post.probs[1];
        let expect = (sigmoid(2.0) / (sigmoid(2.0) + 0.5)) / (0.5 / (sigmoid(2.0) + 0.5));
        assert!((ratio - expect).abs() < 1e-12);
        assert!((ratio - 1.7616).abs() < 1e-4);
    }

    #[test]
    fn identical_semantic_functions_leave_prior_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = ndarray::Array2::from_shape_fn((3, 3), |_| rng.random::<f64>() - 0.5);
        let world = WorldModel::new(3, 1, vec![w]).unwrap();
        let v = array![[0.4, -0.2, 0.9], [0.4, -0.2, 0.9]];
        let lex = LexicalModel::new(v, Array1::zeros(2)).unwrap();
        let graph = two_node_graph();
        let post = exact_posterior(&graph, &world, &lex, DEFAULT_ENUM_BUDGET).unwrap();
        let prior = exact_prior(&topology_of(&graph), &world, DEFAULT_ENUM_BUDGET).unwrap();
        let pm = post.unit_marginals(3);
        let qm = prior.unit_marginals(3);
        for n in 0..2 {
            for i in 0..3 {
                assert!((pm[(n, i)] - qm[(n, i)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kl_zero_for_uniform_match() {
        let world = WorldModel::zeros(4, 2, 0).unwrap();
        let lex = LexicalModel::zeros(1, 4);
        let graph = single_node_graph();
        let mf = MeanFieldSituation::new(Array2::from_elem((1, 4), 0.5));
        let kl = exact_kl(&mf, &graph, &world, &lex, DEFAULT_ENUM_BUDGET).unwrap();
        assert!(kl.abs() < 1e-12, "kl {kl}");
    }

    #[test]
    fn kl_zero_when_mean_field_matches_product_posterior() {
        // a single node with a one-predicate vocabulary: the posterior is the
        // uniform prior over subsets, so matching marginals give zero KL
        let world = WorldModel::zeros(3, 1, 0).unwrap();
        let lex = LexicalModel::zeros(1, 3);
        let graph = single_node_graph();
        let mf = MeanFieldSituation::new(Array2::from_elem((1, 3), 1.0 / 3.0));
        let kl = exact_kl(&mf, &graph, &world, &lex, DEFAULT_ENUM_BUDGET).unwrap();
        assert!(kl.abs() < 1e-9, "kl {kl}");
    }

    #[test]
    fn kl_nonnegative_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..10 {
            let dim = 4;
            let world = WorldModel::new(
                dim,
                2,
                vec![ndarray::Array2::from_shape_fn((dim, dim), |_| rng.random::<f64>() - 0.5)],
            )
            .unwrap();
            let lex = LexicalModel::new(
                ndarray::Array2::from_shape_fn((3, dim), |_| 1.5 * (rng.random::<f64>() - 0.5)),
                Array1::zeros(3),
            )
            .unwrap();
            let graph = DependencyGraph::new(
                vec![Some(rng.random_range(0..3)), Some(rng.random_range(0..3))],
                vec![crate::graph::Edge { source: 0, label: 0, target: 1 }],
            )
            .unwrap();
            let mf = MeanFieldSituation::new(Array2::from_shape_fn((2, dim), |_| {
                0.1 + 0.8 * rng.random::<f64>()
            }));
            let kl = exact_kl(&mf, &graph, &world, &lex, DEFAULT_ENUM_BUDGET).unwrap();
            assert!(kl >= 0.0);
        }
    }

    #[test]
    fn uniform_likelihood_is_one_over_vocab() {
        for vocab_size in [1usize, 2, 5] {
            let world = WorldModel::zeros(4, 2, 0).unwrap();
            let lex = LexicalModel::zeros(vocab_size, 4);
            let ll =
                exact_log_likelihood(&single_node_graph(), &world, &lex, DEFAULT_ENUM_BUDGET)
                    .unwrap();
            assert!((ll - (1.0 / vocab_size as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn unused_label_matrix_does_not_change_likelihood() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w0 = ndarray::Array2::from_shape_fn((3, 3), |_| rng.random::<f64>() - 0.5);
        let lex = LexicalModel::new(
            ndarray::Array2::from_shape_fn((2, 3), |_| rng.random::<f64>() - 0.5),
            Array1::zeros(2),
        )
        .unwrap();
        let graph = two_node_graph();
        let world1 = WorldModel::new(3, 1, vec![w0.clone()]).unwrap();
        let extra = ndarray::Array2::from_elem((3, 3), 7.0);
        let world2 = WorldModel::new(3, 1, vec![w0, extra]).unwrap();
        let a = exact_log_likelihood(&graph, &world1, &lex, DEFAULT_ENUM_BUDGET).unwrap();
        let b = exact_log_likelihood(&graph, &world2, &lex, DEFAULT_ENUM_BUDGET).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn budget_is_enforced() {
        let world = WorldModel::zeros(20, 10, 0).unwrap();
        let lex = LexicalModel::zeros(1, 20);
        let err = exact_posterior(&two_node_graph(), &world, &lex, 1000).unwrap_err();
        assert!(matches!(err, Error::Budget { .. }));
    }

    #[test]
    fn masked_node_rejected() {
        let world = WorldModel::zeros(3, 1, 0).unwrap();
        let lex = LexicalModel::zeros(1, 3);
        let graph = DependencyGraph::new(vec![None], vec![]).unwrap();
        assert!(exact_posterior(&graph, &world, &lex, DEFAULT_ENUM_BUDGET).is_err());
    }
}
