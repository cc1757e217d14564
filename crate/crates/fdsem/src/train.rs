//! Training: the encoder objective and its exact reverse-mode gradients, the
//! generative-model gradients, negative sampling, the optimiser, and the
//! epoch loop.
//!
//! Two objectives are optimised together. The inference network minimises
//!
//! ```text
//! L = mean_energy(q) - beta * Σ_observed [ log_gen + alpha * log truth ] - H(q)
//! ```
//!
//! (an estimate of the divergence from the model posterior, up to a constant),
//! while the generative parameters ascend the likelihood: the world weights
//! move along the difference between posterior and refined-prior sufficient
//! statistics, and the lexical weights along the generation and truth terms
//! with the activations held fixed.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::{encode, encode_trace, Activation, EncoderParams, GraphConvLayer};
use crate::error::{Error, Result};
use crate::graph::{apply_mask, topology_of, DependencyGraph, GraphTopology, Vocabulary};
use crate::lexicon::{clamp_truth, LexicalModel, TRUTH_FLOOR};
use crate::util::{sigmoid, splitmix64};
use crate::world::{
    bp_refine, energy_stats, mean_energy, MeanFieldSituation, WorldModel, DEFAULT_ENUM_BUDGET,
};

/// All training knobs. Learning rates and L2 weights are per parameter group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_world: f64,
    pub lr_lexical: f64,
    pub lr_encoder: f64,
    pub l2_world: f64,
    pub l2_lexical: f64,
    pub l2_encoder: f64,
    /// Upweighting of the generation term.
    pub beta: f64,
    /// Weight of the truth-anchoring term inside the generation objective.
    pub alpha: f64,
    /// Negative samples per observed node.
    pub n_neg: usize,
    /// When set, negative samples are uniform instead of
    /// frequency-proportional.
    pub uniform_negative: bool,
    pub dropout_rate: f64,
    pub bp_iterations: usize,
    pub bp_damping: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub enum_budget: u64,
    /// Train per-predicate biases (off keeps them at zero).
    pub train_bias: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_world: 0.01,
            lr_lexical: 0.01,
            lr_encoder: 0.01,
            l2_world: 1e-4,
            l2_lexical: 1e-4,
            l2_encoder: 1e-4,
            beta: 5.0,
            alpha: 1.0,
            n_neg: 20,
            uniform_negative: false,
            dropout_rate: 0.2,
            bp_iterations: 5,
            bp_damping: 0.5,
            batch_size: 32,
            epochs: 10,
            seed: 42,
            enum_budget: DEFAULT_ENUM_BUDGET,
            train_bias: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lr_world", self.lr_world),
            ("lr_lexical", self.lr_lexical),
            ("lr_encoder", self.lr_encoder),
        ] {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.beta < 0.0 || self.alpha < 0.0 {
            return Err(Error::Config("beta and alpha must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate {} outside [0, 1]",
                self.dropout_rate
            )));
        }
        if !(0.0..1.0).contains(&self.bp_damping) {
            return Err(Error::Config(format!("bp_damping {} outside [0, 1)", self.bp_damping)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Signed contributions to the encoder objective; they sum to `total`.
/// `neg_entropy` is the negated entropy, as it enters the objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ObjectiveTerms {
    pub energy: f64,
    pub generation: f64,
    pub truth: f64,
    pub neg_entropy: f64,
    pub total: f64,
}

/// Entropy of a mean-field situation: the summed Bernoulli entropies of all
/// variational parameters, with 0·log 0 = 0. Non-negative, maximal at 1/2.
pub fn entropy(mf: &MeanFieldSituation) -> f64 {
    let term = |q: f64| {
        let mut h = 0.0;
        if q > 0.0 {
            h -= q * q.ln();
        }
        if q < 1.0 {
            h -= (1.0 - q) * (1.0 - q).ln();
        }
        h
    };
    mf.probs.iter().map(|&q| term(q)).sum()
}

/// Expected truth of one predicate with the partial derivatives needed for
/// both the activation and weight gradients.
struct TruthEval {
    /// Raw corrected sigmoid value.
    t: f64,
    /// 1 when the value is inside the clamp range so log-derivatives flow.
    gate: f64,
    du_dq: Array1<f64>,
    du_dv: Array1<f64>,
    du_db: f64,
}

fn eval_truth(q: ArrayView1<f64>, v: ArrayView1<f64>, b: f64) -> TruthEval {
    let dim = q.len();
    let mut mean = b;
    let mut var = 0.0;
    for i in 0..dim {
        mean += v[i] * q[i];
        var += v[i] * v[i] * q[i] * (1.0 - q[i]);
    }
    let pi8 = std::f64::consts::FRAC_PI_8;
    let s2 = 1.0 + pi8 * var;
    let s = s2.sqrt();
    let s3 = s2 * s;
    let t = sigmoid(mean / s);
    let mut du_dq = Array1::zeros(dim);
    let mut du_dv = Array1::zeros(dim);
    for i in 0..dim {
        du_dq[i] = v[i] / s - mean * pi8 * v[i] * v[i] * (1.0 - 2.0 * q[i]) / (2.0 * s3);
        du_dv[i] = q[i] / s - mean * pi8 * v[i] * q[i] * (1.0 - q[i]) / s3;
    }
    let gate = if t > TRUTH_FLOOR && t < 1.0 - TRUTH_FLOOR { 1.0 } else { 0.0 };
    TruthEval { t, gate, du_dq, du_dv, du_db: 1.0 / s }
}

fn check_samples(graph: &DependencyGraph, samples: &[Vec<usize>]) -> Result<()> {
    if samples.len() != graph.num_nodes() {
        return Err(Error::Shape(format!(
            "{} sample lists for {} nodes",
            samples.len(),
            graph.num_nodes()
        )));
    }
    Ok(())
}

/// Objective terms plus the gradient with respect to the activations.
/// `targets` carries the predicates the generation term reconstructs; a
/// `None` target contributes no generation or truth term.
fn objective_and_activation_grad(
    graph: &DependencyGraph,
    targets: &[Option<usize>],
    mf: &MeanFieldSituation,
    world: &WorldModel,
    lex: &LexicalModel,
    samples: &[Vec<usize>],
    cfg: &TrainConfig,
) -> Result<(ObjectiveTerms, Array2<f64>)> {
    check_samples(graph, samples)?;
    if mf.num_nodes() != graph.num_nodes() || targets.len() != graph.num_nodes() {
        return Err(Error::Shape(format!(
            "mean field has {} nodes, targets {}, graph {}",
            mf.num_nodes(),
            targets.len(),
            graph.num_nodes()
        )));
    }
    let topo = topology_of(graph);
    let dim = mf.dim();
    let n = graph.num_nodes();
    let mut dq = Array2::zeros((n, dim));

    // energy term and its activation gradient
    let energy = mean_energy(mf, &topo, world)?;
    for e in topo.edges() {
        let w = &world.weights[e.label];
        let grad_src = w.dot(&mf.node(e.target));
        let grad_tgt = w.t().dot(&mf.node(e.source));
        for i in 0..dim {
            dq[(e.source, i)] -= grad_src[i];
            dq[(e.target, i)] -= grad_tgt[i];
        }
    }

    // generation and truth terms over observed target nodes
    let mut generation_raw = 0.0;
    let mut truth_raw = 0.0;
    for v in 0..n {
        let Some(r) = targets[v] else { continue };
        let q = mf.node(v);
        let obs = eval_truth(q, lex.weights.row(r), lex.bias[r]);
        let t_obs = clamp_truth(obs.t);
        let mut total = t_obs;
        let mut d_total = Array1::<f64>::zeros(dim);
        d_total += &(obs.gate * obs.t * (1.0 - obs.t) * &obs.du_dq);
        let mut sample_evals = Vec::with_capacity(samples[v].len());
        for &s in &samples[v] {
            let ev = eval_truth(q, lex.weights.row(s), lex.bias[s]);
            let tc = clamp_truth(ev.t);
            total += tc;
            d_total += &(ev.gate * ev.t * (1.0 - ev.t) * &ev.du_dq);
            sample_evals.push(ev);
        }
        generation_raw += t_obs.ln() - total.ln();
        truth_raw += t_obs.ln();
        // d/dq of (1 + alpha) * ln t_obs - ln total, scaled by -beta
        let dlog_obs = obs.gate * (1.0 - obs.t);
        for i in 0..dim {
            let g = (1.0 + cfg.alpha) * dlog_obs * obs.du_dq[i] - d_total[i] / total;
            dq[(v, i)] -= cfg.beta * g;
        }
    }

    // negated entropy and its gradient
    let neg_entropy = -entropy(mf);
    for v in 0..n {
        for i in 0..dim {
            let q = mf.probs[(v, i)].clamp(f64::MIN_POSITIVE, 1.0 - 1e-16);
            dq[(v, i)] += q.ln() - (1.0 - q).ln();
        }
    }

    let generation = -cfg.beta * generation_raw;
    let truth = -cfg.beta * cfg.alpha * truth_raw;
    let terms = ObjectiveTerms {
        energy,
        generation,
        truth,
        neg_entropy,
        total: energy + generation + truth + neg_entropy,
    };
    Ok((terms, dq))
}

/// The encoder objective for a given mean-field situation (normally the
/// encoder's output for `graph`). Masked nodes contribute only to the energy
/// and entropy terms.
pub fn encoder_objective(
    graph: &DependencyGraph,
    mf: &MeanFieldSituation,
    world: &WorldModel,
    lex: &LexicalModel,
    samples: &[Vec<usize>],
    cfg: &TrainConfig,
) -> Result<ObjectiveTerms> {
    objective_and_activation_grad(graph, mf, world, lex, samples, cfg).map(|(t, _)| t)
}

/// The objective as a function of the encoder parameters: encode, then score.
pub fn encoder_loss(
    graph: &DependencyGraph,
    params: &EncoderParams,
    world: &WorldModel,
    lex: &LexicalModel,
    samples: &[Vec<usize>],
    cfg: &TrainConfig,
) -> Result<ObjectiveTerms> {
    let mf = encode(graph, params, world.card())?;
    encoder_objective(graph, &mf, world, lex, samples, cfg)
}

/// Exact reverse-mode gradient of [`encoder_loss`] with respect to every
/// encoder parameter, together with the objective value.
pub fn grad_encoder(
    graph: &DependencyGraph,
    world: &WorldModel,
    lex: &LexicalModel,
    params: &EncoderParams,
    samples: &[Vec<usize>],
    cfg: &TrainConfig,
) -> Result<(ObjectiveTerms, EncoderParams)> {
    let trace = encode_trace(graph, params, world.card())?;
    let mf = MeanFieldSituation::new(trace.probs.clone());
    let (terms, dq) = objective_and_activation_grad(graph, &mf, world, lex, samples, cfg)?;

    let n = graph.num_nodes();
    let card = world.card() as f64;
    let mut grads = params.zeros_like();

    // through the cardinality normalisation into the sigmoid layer
    let mut delta2: Vec<Array1<f64>> = Vec::with_capacity(n);
    for v in 0..n {
        let draw = match trace.scaled_sum[v] {
            Some(sum) => {
                let scale = card / sum;
                let raw = &trace.raw[v];
                let inner: f64 =
                    (0..raw.len()).map(|i| dq[(v, i)] * raw[i]).sum::<f64>() / sum;
                Array1::from_shape_fn(raw.len(), |i| scale * (dq[(v, i)] - inner))
            }
            None => Array1::from_shape_fn(trace.raw[v].len(), |i| dq[(v, i)]),
        };
        let raw = &trace.raw[v];
        delta2.push(Array1::from_shape_fn(raw.len(), |i| {
            draw[i] * Activation::Sigmoid.derivative_from_output(raw[i])
        }));
    }

    // layer 2 backward
    let dhidden =
        backward_layer(&mut grads.layer2, &params.layer2, &delta2, &trace.hidden, graph);
    // tanh derivative
    let delta1: Vec<Array1<f64>> = (0..n)
        .map(|v| {
            let h = &trace.hidden[v];
            Array1::from_shape_fn(h.len(), |i| {
                dhidden[v][i] * Activation::Tanh.derivative_from_output(h[i])
            })
        })
        .collect();

    // layer 1 backward into the embeddings
    let dembed = backward_layer(&mut grads.layer1, &params.layer1, &delta1, &trace.embeds, graph);
    for v in 0..n {
        match graph.predicate(v) {
            Some(p) => {
                let mut row = grads.embeddings.row_mut(p);
                row += &dembed[v];
            }
            None => {
                grads.masked_base += &dembed[v];
                for e in graph.edges() {
                    if e.source == v {
                        let mut row = grads.masked_out.row_mut(e.label);
                        row += &dembed[v];
                    }
                    if e.target == v {
                        let mut row = grads.masked_in.row_mut(e.label);
                        row += &dembed[v];
                    }
                }
            }
        }
    }
    Ok((terms, grads))
}

fn add_outer(m: &mut Array2<f64>, a: &Array1<f64>, b: &Array1<f64>) {
    for i in 0..a.len() {
        let ai = a[i];
        if ai == 0.0 {
            continue;
        }
        for j in 0..b.len() {
            m[(i, j)] += ai * b[j];
        }
    }
}

/// Accumulates one layer's weight gradients from pre-activation deltas and
/// returns the gradient with respect to the layer inputs.
fn backward_layer(
    grads: &mut GraphConvLayer,
    layer: &GraphConvLayer,
    delta: &[Array1<f64>],
    inputs: &[Array1<f64>],
    graph: &DependencyGraph,
) -> Vec<Array1<f64>> {
    let n = inputs.len();
    let mut dinput: Vec<Array1<f64>> = inputs.iter().map(|h| Array1::zeros(h.len())).collect();
    for v in 0..n {
        grads.bias += &delta[v];
        add_outer(&mut grads.self_weight, &delta[v], &inputs[v]);
        dinput[v] += &layer.self_weight.t().dot(&delta[v]);
    }
    for e in graph.edges() {
        add_outer(&mut grads.out_weight[e.label], &delta[e.source], &inputs[e.target]);
        dinput[e.target] += &layer.out_weight[e.label].t().dot(&delta[e.source]);
        add_outer(&mut grads.in_weight[e.label], &delta[e.target], &inputs[e.source]);
        dinput[e.source] += &layer.in_weight[e.label].t().dot(&delta[e.target]);
    }
    dinput
}

/// Likelihood-ascent direction for the world weights: the difference between
/// the posterior and refined-prior sufficient statistics.
pub fn grad_world(
    mf_posterior: &MeanFieldSituation,
    mf_prior_refined: &MeanFieldSituation,
    topology: &GraphTopology,
    num_labels: usize,
) -> Result<Vec<Array2<f64>>> {
    if mf_posterior.num_nodes() != mf_prior_refined.num_nodes()
        || mf_posterior.dim() != mf_prior_refined.dim()
    {
        return Err(Error::Shape("posterior and prior mean fields disagree in shape".into()));
    }
    let post = energy_stats(mf_posterior, topology, num_labels)?;
    let prior = energy_stats(mf_prior_refined, topology, num_labels)?;
    Ok(post.into_iter().zip(prior).map(|(p, q)| p - q).collect())
}

/// Gradient containers for the lexical model.
#[derive(Debug, Clone, PartialEq)]
pub struct LexGrads {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LexGrads {
    pub fn zeros(num_predicates: usize, dim: usize) -> Self {
        LexGrads { weights: Array2::zeros((num_predicates, dim)), bias: Array1::zeros(num_predicates) }
    }
}

/// Likelihood-ascent direction for the lexical weights: the gradient of
/// `beta * Σ_observed [ log_gen + alpha * log truth ]` with the activations
/// held fixed. Predicates neither observed nor sampled get zero gradient.
pub fn grad_lexical(
    mf_posterior: &MeanFieldSituation,
    observed: &[Option<usize>],
    samples: &[Vec<usize>],
    lex: &LexicalModel,
    cfg: &TrainConfig,
) -> Result<LexGrads> {
    if observed.len() != mf_posterior.num_nodes() || samples.len() != observed.len() {
        return Err(Error::Shape("node counts disagree in lexical gradient".into()));
    }
    let dim = lex.dim();
    if mf_posterior.dim() != dim {
        return Err(Error::Shape("mean field and lexical dimensions disagree".into()));
    }
    let mut grads = LexGrads::zeros(lex.num_predicates(), dim);
    for (v, obs_pred) in observed.iter().enumerate() {
        let Some(r) = *obs_pred else { continue };
        if r >= lex.num_predicates() {
            return Err(Error::Vocab(format!("unknown predicate id {r}")));
        }
        let q = mf_posterior.node(v);
        let obs = eval_truth(q, lex.weights.row(r), lex.bias[r]);
        let t_obs = clamp_truth(obs.t);
        let mut total = t_obs;
        let mut evals = Vec::with_capacity(samples[v].len());
        for &s in &samples[v] {
            let ev = eval_truth(q, lex.weights.row(s), lex.bias[s]);
            total += clamp_truth(ev.t);
            evals.push(ev);
        }
        // observed predicate: (1 + alpha) d log t - (1/total) d t
        let dt_obs = obs.gate * obs.t * (1.0 - obs.t);
        let coeff = (1.0 + cfg.alpha) * obs.gate * (1.0 - obs.t) - dt_obs / total;
        {
            let mut row = grads.weights.row_mut(r);
            for i in 0..dim {
                row[i] += cfg.beta * coeff * obs.du_dv[i];
            }
            if cfg.train_bias {
                grads.bias[r] += cfg.beta * coeff * obs.du_db;
            }
        }
        for (&s, ev) in samples[v].iter().zip(&evals) {
            let dt = ev.gate * ev.t * (1.0 - ev.t);
            let coeff = -dt / total;
            let mut row = grads.weights.row_mut(s);
            for i in 0..dim {
                row[i] += cfg.beta * coeff * ev.du_dv[i];
            }
            if cfg.train_bias {
                grads.bias[s] += cfg.beta * coeff * ev.du_db;
            }
        }
    }
    Ok(grads)
}

/// Draws `n` predicate ids with replacement, proportionally to corpus
/// frequency (or uniformly when `uniform` is set).
pub fn negative_sample<R: Rng>(
    vocab: &Vocabulary,
    n: usize,
    uniform: bool,
    rng: &mut R,
) -> Vec<usize> {
    let v = vocab.num_predicates();
    assert!(v > 0, "cannot sample from an empty vocabulary");
    if uniform {
        return (0..n).map(|_| rng.random_range(0..v)).collect();
    }
    let mut cumulative = Vec::with_capacity(v);
    let mut total = 0u64;
    for id in 0..v {
        total += vocab.frequency(id);
        cumulative.push(total);
    }
    (0..n)
        .map(|_| {
            let draw = rng.random_range(0..total);
            cumulative.partition_point(|&c| c <= draw)
        })
        .collect()
}

/// Flat views over a parameter group, in a stable field order, so the
/// optimiser and accumulators can treat all groups uniformly.
pub trait ParamBlocks {
    fn blocks(&self) -> Vec<&[f64]>;
    fn blocks_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    fn l2_norm(&self) -> f64 {
        self.blocks()
            .iter()
            .flat_map(|b| b.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    fn scale(&mut self, a: f64) {
        for b in self.blocks_mut() {
            for x in b {
                *x *= a;
            }
        }
    }

    /// `self += a * other`, block by block.
    fn axpy(&mut self, a: f64, other: &Self) -> Result<()> {
        let mut mine = self.blocks_mut();
        let theirs = other.blocks();
        if mine.len() != theirs.len() {
            return Err(Error::Shape("parameter block counts disagree".into()));
        }
        for (m, t) in mine.iter_mut().zip(theirs) {
            if m.len() != t.len() {
                return Err(Error::Shape("parameter block lengths disagree".into()));
            }
            for (x, y) in m.iter_mut().zip(t) {
                *x += a * y;
            }
        }
        Ok(())
    }
}

impl ParamBlocks for Vec<Array2<f64>> {
    fn blocks(&self) -> Vec<&[f64]> {
        self.iter().map(|m| m.as_slice().expect("standard layout")).collect()
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        self.iter_mut().map(|m| m.as_slice_mut().expect("standard layout")).collect()
    }
}

impl ParamBlocks for WorldModel {
    fn blocks(&self) -> Vec<&[f64]> {
        self.weights.blocks()
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        self.weights.blocks_mut()
    }
}

impl ParamBlocks for LexicalModel {
    fn blocks(&self) -> Vec<&[f64]> {
        vec![
            self.weights.as_slice().expect("standard layout"),
            self.bias.as_slice().expect("standard layout"),
        ]
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.weights.as_slice_mut().expect("standard layout"),
            self.bias.as_slice_mut().expect("standard layout"),
        ]
    }
}

impl ParamBlocks for LexGrads {
    fn blocks(&self) -> Vec<&[f64]> {
        vec![
            self.weights.as_slice().expect("standard layout"),
            self.bias.as_slice().expect("standard layout"),
        ]
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.weights.as_slice_mut().expect("standard layout"),
            self.bias.as_slice_mut().expect("standard layout"),
        ]
    }
}

impl ParamBlocks for EncoderParams {
    fn blocks(&self) -> Vec<&[f64]> {
        let mut out = vec![
            self.embeddings.as_slice().expect("standard layout"),
            self.masked_base.as_slice().expect("standard layout"),
            self.masked_out.as_slice().expect("standard layout"),
            self.masked_in.as_slice().expect("standard layout"),
        ];
        for layer in [&self.layer1, &self.layer2] {
            out.push(layer.self_weight.as_slice().expect("standard layout"));
            for w in &layer.out_weight {
                out.push(w.as_slice().expect("standard layout"));
            }
            for w in &layer.in_weight {
                out.push(w.as_slice().expect("standard layout"));
            }
            out.push(layer.bias.as_slice().expect("standard layout"));
        }
        out
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![
            self.embeddings.as_slice_mut().expect("standard layout"),
            self.masked_base.as_slice_mut().expect("standard layout"),
            self.masked_out.as_slice_mut().expect("standard layout"),
            self.masked_in.as_slice_mut().expect("standard layout"),
        ];
        for layer in [&mut self.layer1, &mut self.layer2] {
            out.push(layer.self_weight.as_slice_mut().expect("standard layout"));
            for w in &mut layer.out_weight {
                out.push(w.as_slice_mut().expect("standard layout"));
            }
            for w in &mut layer.in_weight {
                out.push(w.as_slice_mut().expect("standard layout"));
            }
            out.push(layer.bias.as_slice_mut().expect("standard layout"));
        }
        out
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// First and second moment accumulators plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(num_params: usize) -> Self {
        AdamState { first: vec![0.0; num_params], second: vec![0.0; num_params], step: 0 }
    }
}

/// One bias-corrected update; L2 is added to the gradient before the moments.
pub fn adam_step<P, G>(
    params: &mut P,
    grads: &G,
    state: &mut AdamState,
    lr: f64,
    l2: f64,
) -> Result<()>
where
    P: ParamBlocks + ?Sized,
    G: ParamBlocks + ?Sized,
{
    let mut pb = params.blocks_mut();
    let gb = grads.blocks();
    if pb.len() != gb.len() || pb.iter().zip(&gb).any(|(p, g)| p.len() != g.len()) {
        return Err(Error::Shape("gradient blocks do not match parameter blocks".into()));
    }
    let total: usize = pb.iter().map(|b| b.len()).sum();
    if total != state.first.len() {
        return Err(Error::Shape(format!(
            "optimiser state holds {} parameters, group has {total}",
            state.first.len()
        )));
    }
    state.step += 1;
    let c1 = 1.0 - ADAM_BETA1.powi(state.step as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(state.step as i32);
    let mut k = 0;
    for (p, g) in pb.iter_mut().zip(&gb) {
        for (x, &grad) in p.iter_mut().zip(g.iter()) {
            let grad = grad + l2 * *x;
            state.first[k] = ADAM_BETA1 * state.first[k] + (1.0 - ADAM_BETA1) * grad;
            state.second[k] = ADAM_BETA2 * state.second[k] + (1.0 - ADAM_BETA2) * grad * grad;
            let m_hat = state.first[k] / c1;
            let v_hat = state.second[k] / c2;
            *x -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            k += 1;
        }
    }
    Ok(())
}

/// Shape and initialisation settings for a fresh model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub dim: usize,
    pub card: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Scale of the random sparse world/lexical initialisation.
    pub init_scale: f64,
    /// Fraction of world/lexical entries initialised away from zero.
    pub init_density: f64,
    /// Scale of the dense encoder initialisation (biases stay zero).
    pub encoder_init_scale: f64,
}

impl ModelDims {
    pub fn new(dim: usize, card: usize) -> Self {
        ModelDims {
            dim,
            card,
            embed_dim: dim,
            hidden_dim: dim,
            init_scale: 0.1,
            init_density: 0.2,
            encoder_init_scale: 0.1,
        }
    }
}

/// The three trainable components.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub world: WorldModel,
    pub lexical: LexicalModel,
    pub encoder: EncoderParams,
}

impl Model {
    /// Random sparse world and lexical weights, dense small encoder weights,
    /// all biases zero.
    pub fn init<R: Rng>(vocab: &Vocabulary, dims: &ModelDims, rng: &mut R) -> Result<Model> {
        let normal = Normal::new(0.0, dims.init_scale)
            .map_err(|e| Error::Config(format!("bad init_scale: {e}")))?;
        let sparse = |rng: &mut R| {
            if rng.random::<f64>() < dims.init_density {
                normal.sample(rng)
            } else {
                0.0
            }
        };
        let weights = (0..vocab.num_labels())
            .map(|_| Array2::from_shape_simple_fn((dims.dim, dims.dim), || sparse(rng)))
            .collect();
        let world = WorldModel::new(dims.dim, dims.card, weights)?;
        let lex_weights =
            Array2::from_shape_simple_fn((vocab.num_predicates(), dims.dim), || sparse(rng));
        let lexical = LexicalModel::new(lex_weights, Array1::zeros(vocab.num_predicates()))?;
        let enc_normal = Normal::new(0.0, dims.encoder_init_scale)
            .map_err(|e| Error::Config(format!("bad encoder_init_scale: {e}")))?;
        let mut encoder = EncoderParams::zeros(
            vocab.num_predicates(),
            vocab.num_labels(),
            dims.embed_dim,
            dims.hidden_dim,
            dims.dim,
        );
        let fill = |a: &mut [f64], rng: &mut R| {
            for x in a {
                *x = enc_normal.sample(rng);
            }
        };
        fill(encoder.embeddings.as_slice_mut().unwrap(), rng);
        fill(encoder.masked_base.as_slice_mut().unwrap(), rng);
        fill(encoder.masked_out.as_slice_mut().unwrap(), rng);
        fill(encoder.masked_in.as_slice_mut().unwrap(), rng);
        for layer in [&mut encoder.layer1, &mut encoder.layer2] {
            fill(layer.self_weight.as_slice_mut().unwrap(), rng);
            for w in layer.out_weight.iter_mut().chain(layer.in_weight.iter_mut()) {
                fill(w.as_slice_mut().unwrap(), rng);
            }
            // biases stay zero
        }
        Ok(Model { world, lexical, encoder })
    }
}

/// Adam state per parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimisers {
    pub world: AdamState,
    pub lexical: AdamState,
    pub encoder: AdamState,
}

impl Optimisers {
    pub fn new(model: &Model) -> Self {
        Optimisers {
            world: AdamState::new(model.world.num_params()),
            lexical: AdamState::new(model.lexical.num_params()),
            encoder: AdamState::new(model.encoder.num_params()),
        }
    }
}

/// Per-epoch means of the objective terms and gradient norms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub objective: f64,
    pub energy: f64,
    pub generation: f64,
    pub truth: f64,
    pub neg_entropy: f64,
    pub grad_norm_world: f64,
    pub grad_norm_lexical: f64,
    pub grad_norm_encoder: f64,
}

/// Per-epoch RNG stream derived from the run seed, so resumed training can
/// replay exactly.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(
        seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
    ))
}

/// One pass over the corpus in minibatches. For each graph the masked copy
/// drives the encoder objective and its gradients, while the unmasked encode
/// plus the refined prior drive the generative gradients. Deterministic given
/// the seed and the corpus order.
pub fn train_epoch(
    corpus: &[DependencyGraph],
    vocab: &Vocabulary,
    model: &mut Model,
    opt: &mut Optimisers,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochMetrics> {
    cfg.validate()?;
    let mut rng = epoch_rng(cfg.seed, epoch);
    let num_labels = vocab.num_labels();
    let card = model.world.card();

    let mut sums = [0.0f64; 5];
    let mut norm_sums = [0.0f64; 3];
    let mut num_batches = 0usize;
    let mut num_graphs = 0usize;

    for batch in corpus.chunks(cfg.batch_size) {
        let mut enc_acc = model.encoder.zeros_like();
        let mut world_acc: Vec<Array2<f64>> =
            vec![Array2::zeros((model.world.dim(), model.world.dim())); num_labels];
        let mut lex_acc = LexGrads::zeros(model.lexical.num_predicates(), model.lexical.dim());

        for graph in batch {
            let masked = apply_mask(graph, cfg.dropout_rate, &mut rng)?;
            let samples: Vec<Vec<usize>> = (0..graph.num_nodes())
                .map(|v| match graph.predicate(v) {
                    Some(r) => {
                        let draws =
                            negative_sample(vocab, cfg.n_neg, cfg.uniform_negative, &mut rng);
                        let mut kept = Vec::with_capacity(draws.len());
                        for id in draws {
                            if id != r && !kept.contains(&id) {
                                kept.push(id);
                            }
                        }
                        kept
                    }
                    None => Vec::new(),
                })
                .collect();

            let (terms, enc_grads) =
                grad_encoder(&masked, &model.world, &model.lexical, &model.encoder, &samples, cfg)?;
            enc_acc.axpy(1.0, &enc_grads)?;
            sums[0] += terms.total;
            sums[1] += terms.energy;
            sums[2] += terms.generation;
            sums[3] += terms.truth;
            sums[4] += terms.neg_entropy;
            num_graphs += 1;

            let topo = topology_of(graph);
            let mf_posterior = encode(graph, &model.encoder, card)?;
            let mf_prior =
                bp_refine(&mf_posterior, &topo, &model.world, cfg.bp_iterations, cfg.bp_damping)?;
            let gw = grad_world(&mf_posterior, &mf_prior, &topo, num_labels)?;
            // ascent on the likelihood becomes descent for the optimiser
            world_acc.axpy(-1.0, &gw)?;
            let gl = grad_lexical(&mf_posterior, graph.nodes(), &samples, &model.lexical, cfg)?;
            lex_acc.axpy(-1.0, &gl)?;
        }

        let inv = 1.0 / batch.len() as f64;
        enc_acc.scale(inv);
        world_acc.scale(inv);
        lex_acc.scale(inv);
        norm_sums[0] += world_acc.l2_norm();
        norm_sums[1] += lex_acc.l2_norm();
        norm_sums[2] += enc_acc.l2_norm();
        num_batches += 1;

        adam_step(&mut model.world, &world_acc, &mut opt.world, cfg.lr_world, cfg.l2_world)?;
        adam_step(&mut model.lexical, &lex_acc, &mut opt.lexical, cfg.lr_lexical, cfg.l2_lexical)?;
        adam_step(&mut model.encoder, &enc_acc, &mut opt.encoder, cfg.lr_encoder, cfg.l2_encoder)?;
    }

    let gmean = |s: f64| if num_graphs > 0 { s / num_graphs as f64 } else { 0.0 };
    let bmean = |s: f64| if num_batches > 0 { s / num_batches as f64 } else { 0.0 };
    Ok(EpochMetrics {
        epoch,
        objective: gmean(sums[0]),
        energy: gmean(sums[1]),
        generation: gmean(sums[2]),
        truth: gmean(sums[3]),
        neg_entropy: gmean(sums[4]),
        grad_norm_world: bmean(norm_sums[0]),
        grad_norm_lexical: bmean(norm_sums[1]),
        grad_norm_encoder: bmean(norm_sums[2]),
    })
}
