//! The world model: an energy-based prior over situations.
//!
//! A situation assigns one pixie (a binary vector of `dim` units with exactly
//! `card` active) to each node of a graph topology. The prior weights a
//! situation by `exp(-E)` where the energy couples linked pixies through one
//! weight matrix per dependency label:
//!
//! ```text
//! E(s) = - Σ_{x -l-> y} Σ_{i,j} w[l][i,j] x_i y_j
//! ```
//!
//! Besides the energy itself this module provides exact enumeration at desk
//! scale, the counting-chain dynamic programme for cardinality-constrained
//! marginals, and a damped synchronous belief-propagation pass that pulls a
//! mean-field distribution toward the prior.

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};
use crate::graph::GraphTopology;
use crate::util::{binomial, combinations, logaddexp, logit, logsumexp};

/// Default cap on the number of configurations exact enumeration may visit.
pub const DEFAULT_ENUM_BUDGET: u64 = 1_000_000;

/// Per-label pairwise weights defining the situation energy.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldModel {
    dim: usize,
    card: usize,
    /// One `dim x dim` matrix per dependency label id.
    pub weights: Vec<Array2<f64>>,
}

impl WorldModel {
    pub fn new(dim: usize, card: usize, weights: Vec<Array2<f64>>) -> Result<Self> {
        if card == 0 || card > dim {
            return Err(Error::Shape(format!("cardinality {card} outside 1..={dim}")));
        }
        for (l, w) in weights.iter().enumerate() {
            if w.nrows() != dim || w.ncols() != dim {
                return Err(Error::Shape(format!(
                    "label {l} weight matrix is {}x{}, expected {dim}x{dim}",
                    w.nrows(),
                    w.ncols()
                )));
            }
            if !w.iter().all(|x| x.is_finite()) {
                return Err(Error::Shape(format!("label {l} weight matrix has non-finite entries")));
            }
        }
        Ok(WorldModel { dim, card, weights })
    }

    pub fn zeros(dim: usize, card: usize, num_labels: usize) -> Result<Self> {
        WorldModel::new(dim, card, vec![Array2::zeros((dim, dim)); num_labels])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn card(&self) -> usize {
        self.card
    }

    pub fn num_labels(&self) -> usize {
        self.weights.len()
    }

    fn label_weights(&self, label: usize) -> Result<&Array2<f64>> {
        self.weights
            .get(label)
            .ok_or_else(|| Error::Vocab(format!("no weight matrix for label id {label}")))
    }
}

/// A binary feature vector given by its set of active units.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pixie {
    active: Vec<usize>,
}

impl Pixie {
    /// Active unit indices; sorted and deduplicated.
    pub fn new(active: impl IntoIterator<Item = usize>) -> Pixie {
        let mut active: Vec<usize> = active.into_iter().collect();
        active.sort_unstable();
        active.dedup();
        Pixie { active }
    }

    pub fn active(&self) -> &[usize] {
        &self.active
    }

    pub fn num_active(&self) -> usize {
        self.active.len()
    }

    /// 0/1 indicator vector of length `dim`.
    pub fn indicator(&self, dim: usize) -> Array1<f64> {
        let mut v = Array1::zeros(dim);
        for &i in &self.active {
            v[i] = 1.0;
        }
        v
    }
}

/// An assignment of one pixie to every node of a topology.
#[derive(Debug, Clone, PartialEq)]
pub struct Situation {
    pub topology: GraphTopology,
    pub pixies: Vec<Pixie>,
}

impl Situation {
    pub fn new(topology: GraphTopology, pixies: Vec<Pixie>) -> Result<Self> {
        if pixies.len() != topology.num_nodes() {
            return Err(Error::Shape(format!(
                "{} pixies for a topology with {} nodes",
                pixies.len(),
                topology.num_nodes()
            )));
        }
        Ok(Situation { topology, pixies })
    }
}

/// Per-node independent unit-activation probabilities: the mean-field
/// relaxation of a situation. Row `n` holds the probabilities for node `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldSituation {
    pub probs: Array2<f64>,
}

impl MeanFieldSituation {
    pub fn new(probs: Array2<f64>) -> MeanFieldSituation {
        MeanFieldSituation { probs }
    }

    pub fn num_nodes(&self) -> usize {
        self.probs.nrows()
    }

    pub fn dim(&self) -> usize {
        self.probs.ncols()
    }

    pub fn node(&self, n: usize) -> ArrayView1<'_, f64> {
        self.probs.row(n)
    }

    /// Checks entries lie in [0, 1] and each node's total activation does not
    /// exceed the cardinality (up to 1e-9 slack).
    pub fn validate(&self, card: usize) -> Result<()> {
        for (n, row) in self.probs.rows().into_iter().enumerate() {
            let mut sum = 0.0;
            for &q in row.iter() {
                if !(0.0..=1.0).contains(&q) {
                    return Err(Error::Invalid(format!(
                        "node {n} has activation probability {q} outside [0, 1]"
                    )));
                }
                sum += q;
            }
            if sum > card as f64 + 1e-9 {
                return Err(Error::Invalid(format!(
                    "node {n} total activation {sum} exceeds cardinality {card}"
                )));
            }
        }
        Ok(())
    }
}

/// Energy of an exact situation; lower energy means higher prior probability.
pub fn energy(situation: &Situation, world: &WorldModel) -> Result<f64> {
    let mut total = 0.0;
    for e in situation.topology.edges() {
        let w = world.label_weights(e.label)?;
        let x = &situation.pixies[e.source];
        let y = &situation.pixies[e.target];
        for &i in x.active() {
            for &j in y.active() {
                total += w[(i, j)];
            }
        }
    }
    Ok(-total)
}

/// Energy evaluated at the mean vectors. Because the energy is multilinear
/// across distinct nodes, this equals the exact expectation of [`energy`]
/// under the independent-Bernoulli distribution.
pub fn mean_energy(
    mf: &MeanFieldSituation,
    topology: &GraphTopology,
    world: &WorldModel,
) -> Result<f64> {
    check_mf_topology(mf, topology, world)?;
    let mut total = 0.0;
    for e in topology.edges() {
        let w = world.label_weights(e.label)?;
        total += mf.node(e.source).dot(&w.dot(&mf.node(e.target)));
    }
    Ok(-total)
}

/// Per-label sufficient statistics `Σ_edges q_src ⊗ q_tgt`: the expectation of
/// the negative-energy gradient with respect to each weight matrix.
pub fn energy_stats(
    mf: &MeanFieldSituation,
    topology: &GraphTopology,
    num_labels: usize,
) -> Result<Vec<Array2<f64>>> {
    let dim = mf.dim();
    if mf.num_nodes() != topology.num_nodes() {
        return Err(Error::Shape(format!(
            "mean field has {} nodes, topology has {}",
            mf.num_nodes(),
            topology.num_nodes()
        )));
    }
    let mut stats = vec![Array2::zeros((dim, dim)); num_labels];
    for e in topology.edges() {
        if e.label >= num_labels {
            return Err(Error::Vocab(format!("no weight matrix for label id {}", e.label)));
        }
        let qx = mf.node(e.source);
        let qy = mf.node(e.target);
        let s = &mut stats[e.label];
        for i in 0..dim {
            let qi = qx[i];
            if qi == 0.0 {
                continue;
            }
            for j in 0..dim {
                s[(i, j)] += qi * qy[j];
            }
        }
    }
    Ok(stats)
}

fn check_mf_topology(
    mf: &MeanFieldSituation,
    topology: &GraphTopology,
    world: &WorldModel,
) -> Result<()> {
    if mf.num_nodes() != topology.num_nodes() {
        return Err(Error::Shape(format!(
            "mean field has {} nodes, topology has {}",
            mf.num_nodes(),
            topology.num_nodes()
        )));
    }
    if mf.dim() != world.dim() {
        return Err(Error::Shape(format!(
            "mean field dimension {} does not match world dimension {}",
            mf.dim(),
            world.dim()
        )));
    }
    Ok(())
}

/// An explicit distribution over all situations of one topology. Node `n`'s
/// pixie is `subsets[assignment[n]]`; the flat probability table is indexed
/// in mixed radix with node 0 as the least-significant digit.
#[derive(Debug, Clone)]
pub struct SituationTable {
    pub subsets: Vec<Vec<usize>>,
    pub num_nodes: usize,
    pub probs: Vec<f64>,
    pub log_probs: Vec<f64>,
}

impl SituationTable {
    /// Decodes a flat index into one subset index per node.
    pub fn assignment(&self, mut index: usize) -> Vec<usize> {
        let base = self.subsets.len();
        let mut out = Vec::with_capacity(self.num_nodes);
        for _ in 0..self.num_nodes {
            out.push(index % base);
            index /= base;
        }
        out
    }

    pub fn num_configs(&self) -> usize {
        self.probs.len()
    }

    /// Per-node unit marginals as a `(nodes, dim)` matrix.
    pub fn unit_marginals(&self, dim: usize) -> Array2<f64> {
        let mut marg = Array2::zeros((self.num_nodes, dim));
        for (idx, &p) in self.probs.iter().enumerate() {
            for (n, &s) in self.assignment(idx).iter().enumerate() {
                for &i in &self.subsets[s] {
                    marg[(n, i)] += p;
                }
            }
        }
        marg
    }

    /// `E[x_i y_j]` between two nodes, as a `dim x dim` matrix.
    pub fn pair_expectation(&self, node_a: usize, node_b: usize, dim: usize) -> Array2<f64> {
        let mut out = Array2::zeros((dim, dim));
        for (idx, &p) in self.probs.iter().enumerate() {
            let assign = self.assignment(idx);
            for &i in &self.subsets[assign[node_a]] {
                for &j in &self.subsets[assign[node_b]] {
                    out[(i, j)] += p;
                }
            }
        }
        out
    }
}

/// Number of joint configurations, checked against the budget.
pub fn enumeration_size(dim: usize, card: usize, num_nodes: usize, budget: u64) -> Result<usize> {
    let per_node = binomial(dim, card);
    let mut total: u128 = 1;
    for _ in 0..num_nodes {
        total = total.saturating_mul(per_node);
        if total > budget as u128 {
            return Err(Error::Budget { required: total, budget });
        }
    }
    Ok(total as usize)
}

/// Builds a normalised situation table from per-configuration log-weights.
fn table_from_log_weights(
    subsets: Vec<Vec<usize>>,
    num_nodes: usize,
    log_weights: Vec<f64>,
) -> SituationTable {
    let lse = logsumexp(&log_weights);
    let log_probs: Vec<f64> = log_weights.iter().map(|lw| lw - lse).collect();
    let probs: Vec<f64> = log_probs.iter().map(|lp| lp.exp()).collect();
    SituationTable { subsets, num_nodes, probs, log_probs }
}

/// Exact prior over situations by full enumeration. Feasible only when
/// `binomial(dim, card) ^ num_nodes` fits the budget.
pub fn exact_prior(
    topology: &GraphTopology,
    world: &WorldModel,
    budget: u64,
) -> Result<SituationTable> {
    let n = topology.num_nodes();
    let total = enumeration_size(world.dim(), world.card(), n, budget)?;
    let subsets = combinations(world.dim(), world.card());
    let log_weights = enumerate_log_energies(&subsets, total, n, topology, world)?;
    Ok(table_from_log_weights(subsets, n, log_weights))
}

/// Per-configuration `-E(s)` over the full enumeration, in table order.
pub(crate) fn enumerate_log_energies(
    subsets: &[Vec<usize>],
    total: usize,
    num_nodes: usize,
    topology: &GraphTopology,
    world: &WorldModel,
) -> Result<Vec<f64>> {
    // pair coupling of two concrete subsets under one label matrix
    let couple = |w: &Array2<f64>, a: &[usize], b: &[usize]| -> f64 {
        let mut s = 0.0;
        for &i in a {
            for &j in b {
                s += w[(i, j)];
            }
        }
        s
    };
    for e in topology.edges() {
        world.label_weights(e.label)?;
    }
    let base = subsets.len();
    let mut log_weights = Vec::with_capacity(total);
    let mut assign = vec![0usize; num_nodes];
    for idx in 0..total {
        let mut rem = idx;
        for slot in assign.iter_mut() {
            *slot = rem % base;
            rem /= base;
        }
        let mut neg_energy = 0.0;
        for e in topology.edges() {
            let w = &world.weights[e.label];
            neg_energy += couple(w, &subsets[assign[e.source]], &subsets[assign[e.target]]);
        }
        log_weights.push(neg_energy);
    }
    Ok(log_weights)
}

/// log Σ_{|x| = card} exp(θ·x) via the counting chain, O(dim·card).
pub fn log_partition_cardinality(theta: &[f64], card: usize) -> f64 {
    debug_assert!(card <= theta.len());
    let mut acc = vec![f64::NEG_INFINITY; card + 1];
    acc[0] = 0.0;
    for &t in theta {
        for c in (1..=card).rev() {
            acc[c] = logaddexp(acc[c], acc[c - 1] + t);
        }
    }
    acc[card]
}

/// Marginals `P(x_i = 1)` under `P(x) ∝ exp(θ·x)` subject to exactly `card`
/// active units, via the forward-backward counting chain. Marginals sum to
/// `card`. The all-equal-θ case short-circuits to the exact symmetric answer
/// `card / dim`.
pub fn cardinality_marginals(theta: &[f64], card: usize) -> Array1<f64> {
    let dim = theta.len();
    assert!(card <= dim, "cardinality {card} exceeds dimension {dim}");
    if card == 0 {
        return Array1::zeros(dim);
    }
    if theta.iter().all(|&t| t == theta[0]) {
        return Array1::from_elem(dim, card as f64 / dim as f64);
    }
    let neg = f64::NEG_INFINITY;
    // forward[k][c]: log-weight of assignments to units 0..k with c active
    let mut forward = vec![vec![neg; card + 1]; dim + 1];
    forward[0][0] = 0.0;
    for k in 0..dim {
        for c in 0..=card {
            let mut v = forward[k][c];
            if c > 0 {
                v = logaddexp(v, forward[k][c - 1] + theta[k]);
            }
            forward[k + 1][c] = v;
        }
    }
    // backward[k][c]: log-weight of assignments to units k..dim with c active
    let mut backward = vec![vec![neg; card + 1]; dim + 1];
    backward[dim][0] = 0.0;
    for k in (0..dim).rev() {
        for c in 0..=card {
            let mut v = backward[k + 1][c];
            if c > 0 {
                v = logaddexp(v, backward[k + 1][c - 1] + theta[k]);
            }
            backward[k][c] = v;
        }
    }
    let log_z = forward[dim][card];
    let mut marginals = Array1::zeros(dim);
    for i in 0..dim {
        let mut terms = Vec::with_capacity(card);
        for c in 0..card {
            let rest = backward[i + 1][card - 1 - c];
            if forward[i][c] != neg && rest != neg {
                terms.push(forward[i][c] + theta[i] + rest);
            }
        }
        marginals[i] = (logsumexp(&terms) - log_z).exp().clamp(0.0, 1.0);
    }
    marginals
}

const BP_CLAMP: f64 = 1e-6;

fn unary_potentials(mf: &MeanFieldSituation) -> Vec<Array1<f64>> {
    mf.probs
        .rows()
        .into_iter()
        .map(|row| row.mapv(|q| logit(q.clamp(BP_CLAMP, 1.0 - BP_CLAMP))))
        .collect()
}

/// One node-to-node message: log-odds contribution to each unit of the target
/// node, with the source node's cardinality constraint summed through exactly.
/// `weight_of_pair(i, j)` is the coupling between source unit i and target
/// unit j.
fn bp_message(
    cavity: &Array1<f64>,
    weights: &Array2<f64>,
    source_is_rows: bool,
    card: usize,
) -> Array1<f64> {
    let dim = cavity.len();
    let phi = cavity.as_slice().expect("contiguous");
    let base = log_partition_cardinality(phi, card);
    let mut msg = Array1::zeros(dim);
    let mut shifted = vec![0.0; dim];
    for j in 0..dim {
        for i in 0..dim {
            let w = if source_is_rows { weights[(i, j)] } else { weights[(j, i)] };
            shifted[i] = phi[i] + w;
        }
        msg[j] = log_partition_cardinality(&shifted, card) - base;
    }
    msg
}

/// Pulls a mean-field distribution toward the prior by damped synchronous
/// sum-product over pixie nodes. The input activations enter as unary
/// potentials `logit(q)` (clamped away from 0 and 1); each node's cardinality
/// factor is handled exactly by the counting chain, so a two-node model is
/// solved exactly once messages settle. With zero iterations the result is
/// the input projected through each node's cardinality factor.
pub fn bp_refine(
    mf: &MeanFieldSituation,
    topology: &GraphTopology,
    world: &WorldModel,
    iterations: usize,
    damping: f64,
) -> Result<MeanFieldSituation> {
    if !(0.0..1.0).contains(&damping) {
        return Err(Error::Invalid(format!("damping {damping} outside [0, 1)")));
    }
    check_mf_topology(mf, topology, world)?;
    for e in topology.edges() {
        world.label_weights(e.label)?;
    }
    let dim = world.dim();
    let card = world.card();
    let theta = unary_potentials(mf);
    let edges = topology.edges();
    // one message per edge direction: fwd lands on the target, bwd on the source
    let mut fwd = vec![Array1::<f64>::zeros(dim); edges.len()];
    let mut bwd = vec![Array1::<f64>::zeros(dim); edges.len()];

    let cavity = |node: usize,
                  skip_fwd: Option<usize>,
                  skip_bwd: Option<usize>,
                  fwd: &[Array1<f64>],
                  bwd: &[Array1<f64>]| {
        let mut phi = theta[node].clone();
        for (k, e) in edges.iter().enumerate() {
            if e.target == node && skip_fwd != Some(k) {
                phi += &fwd[k];
            }
            if e.source == node && skip_bwd != Some(k) {
                phi += &bwd[k];
            }
        }
        phi
    };

    for _ in 0..iterations {
        let mut new_fwd = Vec::with_capacity(edges.len());
        let mut new_bwd = Vec::with_capacity(edges.len());
        for (k, e) in edges.iter().enumerate() {
            let w = &world.weights[e.label];
            // exclude what previously flowed back through this edge
            let phi_src = cavity(e.source, None, Some(k), &fwd, &bwd);
            new_fwd.push(bp_message(&phi_src, w, true, card));
            let phi_tgt = cavity(e.target, Some(k), None, &fwd, &bwd);
            new_bwd.push(bp_message(&phi_tgt, w, false, card));
        }
        for k in 0..edges.len() {
            fwd[k] = damping * &fwd[k] + (1.0 - damping) * &new_fwd[k];
            bwd[k] = damping * &bwd[k] + (1.0 - damping) * &new_bwd[k];
        }
    }

    let mut probs = Array2::zeros((mf.num_nodes(), dim));
    for n in 0..mf.num_nodes() {
        let belief = cavity(n, None, None, &fwd, &bwd);
        let marg = cardinality_marginals(belief.as_slice().expect("contiguous"), card);
        probs.row_mut(n).assign(&marg);
    }
    Ok(MeanFieldSituation::new(probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{topology_of, DependencyGraph, Edge};
    use ndarray::array;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_node_topology() -> GraphTopology {
        let g = DependencyGraph::new(
            vec![Some(0), Some(0)],
            vec![Edge { source: 0, label: 0, target: 1 }],
        )
        .unwrap();
        topology_of(&g)
    }

    fn single_node_topology() -> GraphTopology {
        topology_of(&DependencyGraph::new(vec![Some(0)], vec![]).unwrap())
    }

    #[test]
    fn energy_zero_weights() {
        let world = WorldModel::zeros(3, 1, 1).unwrap();
        let s = Situation::new(two_node_topology(), vec![Pixie::new([0]), Pixie::new([2])]).unwrap();
        assert_eq!(energy(&s, &world).unwrap(), 0.0);
    }

    #[test]
    fn energy_single_term() {
        let w = array![[1.0, -1.0], [0.0, 2.0]];
        let world = WorldModel::new(2, 1, vec![w]).unwrap();
        let s = Situation::new(two_node_topology(), vec![Pixie::new([0]), Pixie::new([1])]).unwrap();
        assert_eq!(energy(&s, &world).unwrap(), 1.0);
    }

    #[test]
    fn energy_edgeless_topology() {
        let w = array![[5.0, 5.0], [5.0, 5.0]];
        let world = WorldModel::new(2, 1, vec![w]).unwrap();
        let s = Situation::new(single_node_topology(), vec![Pixie::new([1])]).unwrap();
        assert_eq!(energy(&s, &world).unwrap(), 0.0);
    }

    #[test]
    fn energy_missing_label_matrix() {
        let world = WorldModel::zeros(2, 1, 0).unwrap();
        let s = Situation::new(two_node_topology(), vec![Pixie::new([0]), Pixie::new([1])]).unwrap();
        assert!(energy(&s, &world).is_err());
    }

    #[test]
    fn mean_energy_degenerate_equals_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Array2::from_shape_fn((3, 3), |_| rng.random::<f64>() - 0.5);
        let world = WorldModel::new(3, 1, vec![w]).unwrap();
        let topo = two_node_topology();
        let s = Situation::new(topo.clone(), vec![Pixie::new([2]), Pixie::new([0])]).unwrap();
        let mut probs = Array2::zeros((2, 3));
        probs.row_mut(0).assign(&s.pixies[0].indicator(3));
        probs.row_mut(1).assign(&s.pixies[1].indicator(3));
        let mf = MeanFieldSituation::new(probs);
        let exact = energy(&s, &world).unwrap();
        let mean = mean_energy(&mf, &topo, &world).unwrap();
        assert!((exact - mean).abs() < 1e-12);
    }

    #[test]
    fn mean_energy_half_half() {
        let w = array![[0.0, 0.0], [0.0, 1.0]];
        let world = WorldModel::new(2, 1, vec![w]).unwrap();
        let mf = MeanFieldSituation::new(array![[0.5, 0.5], [0.5, 0.5]]);
        let e = mean_energy(&mf, &two_node_topology(), &world).unwrap();
        assert!((e - (-0.25)).abs() < 1e-15);
    }

    /// Per-node subset distribution for an independent-Bernoulli vector
    /// conditioned on exactly `card` active units, plus its unit marginals.
    fn conditioned_node_distribution(
        q: ArrayView1<f64>,
        subsets: &[Vec<usize>],
    ) -> (Vec<f64>, Vec<f64>) {
        let dim = q.len();
        let mut weights: Vec<f64> = subsets
            .iter()
            .map(|s| {
                (0..dim)
                    .map(|i| if s.contains(&i) { q[i] } else { 1.0 - q[i] })
                    .product()
            })
            .collect();
        let z: f64 = weights.iter().sum();
        for w in weights.iter_mut() {
            *w /= z;
        }
        let mut marg = vec![0.0; dim];
        for (s, w) in subsets.iter().zip(&weights) {
            for &i in s {
                marg[i] += w;
            }
        }
        (weights, marg)
    }

    #[test]
    fn mean_energy_matches_enumeration() {
        // multilinearity: for any product distribution over nodes, the
        // expected energy equals the energy of the per-node marginal means
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let dim = 3;
            let world = WorldModel::new(
                dim,
                1,
                vec![Array2::from_shape_fn((dim, dim), |_| rng.random::<f64>() - 0.5)],
            )
            .unwrap();
            let topo = two_node_topology();
            let subsets = combinations(dim, 1);
            let q = Array2::from_shape_fn((2, dim), |_| 0.05 + 0.9 * rng.random::<f64>());
            let mut node_weights = Vec::new();
            let mut probs = Array2::zeros((2, dim));
            for n in 0..2 {
                let (w, m) = conditioned_node_distribution(q.row(n), &subsets);
                node_weights.push(w);
                for i in 0..dim {
                    probs[(n, i)] = m[i];
                }
            }
            let mf = MeanFieldSituation::new(probs);
            let mean = mean_energy(&mf, &topo, &world).unwrap();
            let mut brute = 0.0;
            for (a, &wa) in node_weights[0].iter().enumerate() {
                for (b, &wb) in node_weights[1].iter().enumerate() {
                    let s = Situation::new(
                        topo.clone(),
                        vec![Pixie::new(subsets[a].clone()), Pixie::new(subsets[b].clone())],
                    )
                    .unwrap();
                    brute += wa * wb * energy(&s, &world).unwrap();
                }
            }
            assert!(
                (mean - brute).abs() < 1e-10,
                "mean {mean} vs enumeration {brute}"
            );
        }
    }

    #[test]
    fn energy_stats_outer_product() {
        let mf = MeanFieldSituation::new(array![[1.0, 0.0], [0.0, 1.0]]);
        let stats = energy_stats(&mf, &two_node_topology(), 1).unwrap();
        assert_eq!(stats.len(), 1);
        assert_eq!(stats[0], array![[0.0, 1.0], [0.0, 0.0]]);
    }

    #[test]
    fn energy_stats_additive_over_edges() {
        // two parallel edges with the same label, distinct sources
        let g = DependencyGraph::new(
            vec![Some(0), Some(0), Some(0)],
            vec![
                Edge { source: 0, label: 0, target: 1 },
                Edge { source: 2, label: 0, target: 1 },
            ],
        )
        .unwrap();
        let topo = topology_of(&g);
        let mf = MeanFieldSituation::new(array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]);
        let stats = energy_stats(&mf, &topo, 1).unwrap();
        assert_eq!(stats[0], array![[0.0, 2.0], [0.0, 0.0]]);
    }

    #[test]
    fn energy_stats_match_enumerated_pair_expectations() {
        // brute force E[x_i y_j] under a product distribution over the two
        // nodes and compare with the outer-product statistics
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let dim = 3;
        let card = 2;
        let topo = two_node_topology();
        let subsets = combinations(dim, card);
        let q = Array2::from_shape_fn((2, dim), |_| 0.05 + 0.9 * rng.random::<f64>());
        let mut node_weights = Vec::new();
        let mut probs = Array2::zeros((2, dim));
        for n in 0..2 {
            let (w, m) = conditioned_node_distribution(q.row(n), &subsets);
            node_weights.push(w);
            for i in 0..dim {
                probs[(n, i)] = m[i];
            }
        }
        let mf = MeanFieldSituation::new(probs);
        let stats = energy_stats(&mf, &topo, 1).unwrap();
        let mut brute = Array2::<f64>::zeros((dim, dim));
        for (a, &wa) in node_weights[0].iter().enumerate() {
            for (b, &wb) in node_weights[1].iter().enumerate() {
                for &i in &subsets[a] {
                    for &j in &subsets[b] {
                        brute[(i, j)] += wa * wb;
                    }
                }
            }
        }
        for i in 0..dim {
            for j in 0..dim {
                assert!((stats[0][(i, j)] - brute[(i, j)]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn exact_prior_four_configurations() {
        let w = array![[0.0, 0.0], [0.0, (2.0f64).ln()]];
        let world = WorldModel::new(2, 1, vec![w]).unwrap();
        let table = exact_prior(&two_node_topology(), &world, DEFAULT_ENUM_BUDGET).unwrap();
        // subsets in lexicographic order: [0], [1]; node 0 is the low digit
        assert_eq!(table.num_configs(), 4);
        let probs: Vec<f64> = table.probs.clone();
        assert!((probs[0] - 0.2).abs() < 1e-12); // x={0}, y={0}
        assert!((probs[1] - 0.2).abs() < 1e-12); // x={1}, y={0}
        assert!((probs[2] - 0.2).abs() < 1e-12); // x={0}, y={1}
        assert!((probs[3] - 0.4).abs() < 1e-12); // x={1}, y={1}
        let total: f64 = probs.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn exact_prior_zero_weights_uniform() {
        let world = WorldModel::zeros(3, 1, 1).unwrap();
        let table = exact_prior(&two_node_topology(), &world, DEFAULT_ENUM_BUDGET).unwrap();
        for &p in &table.probs {
            assert!((p - 1.0 / 9.0).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_prior_single_node_uniform() {
        let world = WorldModel::zeros(4, 2, 1).unwrap();
        let table = exact_prior(&single_node_topology(), &world, DEFAULT_ENUM_BUDGET).unwrap();
        assert_eq!(table.num_configs(), 6);
        for &p in &table.probs {
            assert!((p - 1.0 / 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_prior_budget_exceeded() {
        let world = WorldModel::zeros(30, 15, 1).unwrap();
        let err = exact_prior(&two_node_topology(), &world, 1000).unwrap_err();
        assert!(matches!(err, Error::Budget { .. }));
    }

    #[test]
    fn cardinality_marginals_uniform_theta_is_exact() {
        let m = cardinality_marginals(&[0.7; 4], 2);
        for i in 0..4 {
            assert_eq!(m[i], 0.5);
        }
    }

    #[test]
    fn cardinality_marginals_two_units() {
        let m = cardinality_marginals(&[(3.0f64).ln(), 0.0], 1);
        assert!((m[0] - 0.75).abs() < 1e-12);
        assert!((m[1] - 0.25).abs() < 1e-12);
    }

    fn brute_cardinality_marginals(theta: &[f64], card: usize) -> Vec<f64> {
        let dim = theta.len();
        let mut marg = vec![0.0; dim];
        let mut z = 0.0;
        for s in combinations(dim, card) {
            let w: f64 = s.iter().map(|&i| theta[i].exp()).product();
            z += w;
            for &i in &s {
                marg[i] += w;
            }
        }
        marg.iter().map(|m| m / z).collect()
    }

    #[test]
    fn cardinality_marginals_match_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..20 {
            let dim = 10;
            let card = 1 + trial % 9;
            let theta: Vec<f64> = (0..dim).map(|_| 3.0 * (rng.random::<f64>() - 0.5)).collect();
            let dp = cardinality_marginals(&theta, card);
            let brute = brute_cardinality_marginals(&theta, card);
            for i in 0..dim {
                assert!((dp[i] - brute[i]).abs() < 1e-10, "unit {i}: {} vs {}", dp[i], brute[i]);
            }
            let sum: f64 = dp.iter().sum();
            assert!((sum - card as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn cardinality_marginals_permutation_equivariant() {
        let theta = [0.3, -1.2, 0.9, 0.0, 2.0];
        let perm = [4, 2, 0, 1, 3];
        let permuted: Vec<f64> = perm.iter().map(|&i| theta[i]).collect();
        let base = cardinality_marginals(&theta, 2);
        let moved = cardinality_marginals(&permuted, 2);
        for (pos, &i) in perm.iter().enumerate() {
            assert!((moved[pos] - base[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn energy_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let dim = 4;
        let w = Array2::from_shape_fn((dim, dim), |_| rng.random::<f64>() - 0.5);
        let perm = [2, 0, 3, 1];
        let w_perm = Array2::from_shape_fn((dim, dim), |(i, j)| w[(perm[i], perm[j])]);
        let world = WorldModel::new(dim, 2, vec![w]).unwrap();
        let world_perm = WorldModel::new(dim, 2, vec![w_perm]).unwrap();
        let topo = two_node_topology();
        // pixie under permuted indexing: position p is active iff perm[p] was
        let inv = |units: &[usize]| {
            Pixie::new(units.iter().map(|&u| perm.iter().position(|&p| p == u).unwrap()))
        };
        let x = Pixie::new([0, 3]);
        let y = Pixie::new([1, 2]);
        let s = Situation::new(topo.clone(), vec![x.clone(), y.clone()]).unwrap();
        let s_perm = Situation::new(topo, vec![inv(x.active()), inv(y.active())]).unwrap();
        let a = energy(&s, &world).unwrap();
        let b = energy(&s_perm, &world_perm).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn bp_single_node_uniform() {
        let world = WorldModel::zeros(5, 2, 1).unwrap();
        let mf = MeanFieldSituation::new(Array2::from_elem((1, 5), 0.4));
        let out = bp_refine(&mf, &single_node_topology(), &world, 5, 0.5).unwrap();
        for i in 0..5 {
            assert_eq!(out.probs[(0, i)], 0.4);
        }
    }

    #[test]
    fn bp_zero_weights_decouples() {
        let world = WorldModel::zeros(3, 1, 1).unwrap();
        let probs = array![[0.6, 0.3, 0.1], [0.2, 0.2, 0.6]];
        let mf = MeanFieldSituation::new(probs.clone());
        let out = bp_refine(&mf, &two_node_topology(), &world, 7, 0.3).unwrap();
        for n in 0..2 {
            let theta: Vec<f64> =
                probs.row(n).iter().map(|&q| logit(q.clamp(1e-6, 1.0 - 1e-6))).collect();
            let expect = cardinality_marginals(&theta, 1);
            for i in 0..3 {
                assert!((out.probs[(n, i)] - expect[i]).abs() < 1e-12);
            }
        }
    }

    /// Exact unit marginals of the prior multiplied by per-node unary factors.
    fn exact_conditioned_marginals(
        topo: &GraphTopology,
        world: &WorldModel,
        theta: &[Array1<f64>],
    ) -> Array2<f64> {
        let subsets = combinations(world.dim(), world.card());
        let total = subsets.len().pow(topo.num_nodes() as u32);
        let mut log_weights =
            enumerate_log_energies(&subsets, total, topo.num_nodes(), topo, world).unwrap();
        let base = subsets.len();
        for (idx, lw) in log_weights.iter_mut().enumerate() {
            let mut rem = idx;
            for th in theta {
                let s = rem % base;
                rem /= base;
                for &i in &subsets[s] {
                    *lw += th[i];
                }
            }
        }
        let table = table_from_log_weights(subsets, topo.num_nodes(), log_weights);
        table.unit_marginals(world.dim())
    }

    #[test]
    fn bp_two_node_matches_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..10 {
            let dim = 3;
            let world = WorldModel::new(
                dim,
                1,
                vec![Array2::from_shape_fn((dim, dim), |_| 0.8 * (rng.random::<f64>() - 0.5))],
            )
            .unwrap();
            let topo = two_node_topology();
            let probs = Array2::from_shape_fn((2, dim), |_| 0.05 + 0.9 * rng.random::<f64>());
            let mf = MeanFieldSituation::new(probs);
            let out = bp_refine(&mf, &topo, &world, 5, 0.0).unwrap();
            let theta = unary_potentials(&mf);
            let exact = exact_conditioned_marginals(&topo, &world, &theta);
            for n in 0..2 {
                for i in 0..dim {
                    assert!(
                        (out.probs[(n, i)] - exact[(n, i)]).abs() < 1e-6,
                        "node {n} unit {i}: {} vs {}",
                        out.probs[(n, i)],
                        exact[(n, i)]
                    );
                }
            }
        }
    }

    #[test]
    fn bp_zero_iterations_projects_through_cardinality() {
        let world = WorldModel::new(
            3,
            1,
            vec![array![[0.0, 2.0, 0.0], [0.0, 2.0, 0.0], [0.0, 2.0, 0.0]]],
        )
        .unwrap();
        let probs = array![[0.9, 0.3, 0.3], [0.5, 0.2, 0.8]];
        let mf = MeanFieldSituation::new(probs.clone());
        let out = bp_refine(&mf, &two_node_topology(), &world, 0, 0.5).unwrap();
        for n in 0..2 {
            let theta: Vec<f64> =
                probs.row(n).iter().map(|&q| logit(q.clamp(1e-6, 1.0 - 1e-6))).collect();
            let expect = cardinality_marginals(&theta, 1);
            for i in 0..3 {
                assert!((out.probs[(n, i)] - expect[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bp_output_is_valid_mean_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        // three-node chain with two labels, loopy enough once aggregated
        let g = DependencyGraph::new(
            vec![Some(0), Some(0), Some(0)],
            vec![
                Edge { source: 1, label: 0, target: 0 },
                Edge { source: 1, label: 1, target: 2 },
            ],
        )
        .unwrap();
        let topo = topology_of(&g);
        let dim = 4;
        let card = 2;
        let weights = (0..2)
            .map(|_| Array2::from_shape_fn((dim, dim), |_| rng.random::<f64>() - 0.5))
            .collect();
        let world = WorldModel::new(dim, card, weights).unwrap();
        let probs = Array2::from_shape_fn((3, dim), |_| 0.1 + 0.8 * rng.random::<f64>());
        let mf = MeanFieldSituation::new(probs);
        let out = bp_refine(&mf, &topo, &world, 10, 0.5).unwrap();
        out.validate(card).unwrap();
        for n in 0..3 {
            let sum: f64 = out.probs.row(n).sum();
            assert!((sum - card as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn mean_field_validation() {
        let ok = MeanFieldSituation::new(array![[0.5, 0.5], [1.0, 0.0]]);
        ok.validate(1).unwrap();
        let too_big = MeanFieldSituation::new(array![[0.9, 0.9]]);
        assert!(too_big.validate(1).is_err());
        let out_of_range = MeanFieldSituation::new(array![[1.2, -0.1]]);
        assert!(out_of_range.validate(2).is_err());
    }
}
