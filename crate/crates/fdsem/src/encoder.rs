//! The inference network: a two-layer graph convolution mapping a dependency
//! graph to per-node mean-field activation vectors.
//!
//! Each node starts from its predicate embedding (masked nodes get a shared
//! mask embedding plus one vector per incident dependency label and
//! direction). Every layer combines a node's own vector with its neighbours'
//! vectors through label- and direction-specific weight matrices. The first
//! layer uses tanh, the second a sigmoid; if a node's total activation then
//! exceeds the cardinality it is scaled down to sum to it.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::graph::{DependencyGraph, Edge};
use crate::util::sigmoid;
use crate::world::MeanFieldSituation;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative expressed in terms of the activation output.
    pub fn derivative_from_output(&self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

/// One graph-convolution layer: a self matrix, per-label matrices for
/// outgoing and incoming dependencies, and a bias.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphConvLayer {
    pub self_weight: Array2<f64>,
    pub out_weight: Vec<Array2<f64>>,
    pub in_weight: Vec<Array2<f64>>,
    pub bias: Array1<f64>,
}

impl GraphConvLayer {
    pub fn zeros(output: usize, input: usize, num_labels: usize) -> Self {
        GraphConvLayer {
            self_weight: Array2::zeros((output, input)),
            out_weight: vec![Array2::zeros((output, input)); num_labels],
            in_weight: vec![Array2::zeros((output, input)); num_labels],
            bias: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.self_weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.self_weight.nrows()
    }

    pub fn num_labels(&self) -> usize {
        self.out_weight.len()
    }
}

/// All parameters of the inference network.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    /// One row per predicate.
    pub embeddings: Array2<f64>,
    /// Base embedding for a masked node.
    pub masked_base: Array1<f64>,
    /// Per-label addition for each outgoing dependency of a masked node.
    pub masked_out: Array2<f64>,
    /// Per-label addition for each incoming dependency of a masked node.
    pub masked_in: Array2<f64>,
    pub layer1: GraphConvLayer,
    pub layer2: GraphConvLayer,
}

impl EncoderParams {
    pub fn zeros(
        num_predicates: usize,
        num_labels: usize,
        embed_dim: usize,
        hidden_dim: usize,
        output_dim: usize,
    ) -> Self {
        EncoderParams {
            embeddings: Array2::zeros((num_predicates, embed_dim)),
            masked_base: Array1::zeros(embed_dim),
            masked_out: Array2::zeros((num_labels, embed_dim)),
            masked_in: Array2::zeros((num_labels, embed_dim)),
            layer1: GraphConvLayer::zeros(hidden_dim, embed_dim, num_labels),
            layer2: GraphConvLayer::zeros(output_dim, hidden_dim, num_labels),
        }
    }

    pub fn zeros_like(&self) -> Self {
        EncoderParams::zeros(
            self.num_predicates(),
            self.num_labels(),
            self.embed_dim(),
            self.hidden_dim(),
            self.output_dim(),
        )
    }

    pub fn num_predicates(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn num_labels(&self) -> usize {
        self.masked_out.nrows()
    }

    pub fn embed_dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.layer1.output_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layer2.output_dim()
    }

    /// Internal shape consistency plus coverage of a graph's ids.
    pub fn validate_for(&self, graph: &DependencyGraph) -> Result<()> {
        let e = self.embed_dim();
        if self.masked_base.len() != e
            || self.masked_out.ncols() != e
            || self.masked_in.ncols() != e
        {
            return Err(Error::Shape("mask embedding widths disagree".into()));
        }
        if self.masked_in.nrows() != self.num_labels() {
            return Err(Error::Shape("mask embedding label counts disagree".into()));
        }
        for (name, layer, input) in [
            ("layer1", &self.layer1, e),
            ("layer2", &self.layer2, self.hidden_dim()),
        ] {
            if layer.input_dim() != input {
                return Err(Error::Shape(format!("{name} expects input {input}", )));
            }
            if layer.num_labels() != self.num_labels()
                || layer.in_weight.len() != self.num_labels()
            {
                return Err(Error::Shape(format!("{name} label count disagrees")));
            }
            if layer.bias.len() != layer.output_dim() {
                return Err(Error::Shape(format!("{name} bias length disagrees")));
            }
            for w in layer.out_weight.iter().chain(&layer.in_weight) {
                if w.dim() != layer.self_weight.dim() {
                    return Err(Error::Shape(format!("{name} matrices disagree in shape")));
                }
            }
        }
        for p in graph.nodes().iter().flatten() {
            if *p >= self.num_predicates() {
                return Err(Error::Vocab(format!("no embedding for predicate id {p}")));
            }
        }
        for edge in graph.edges() {
            if edge.label >= self.num_labels() {
                return Err(Error::Vocab(format!("no weights for label id {}", edge.label)));
            }
        }
        Ok(())
    }
}

/// Input vector for one node: the predicate embedding if observed, otherwise
/// the mask embedding plus one per-label vector per incident edge (summed per
/// edge, so repeated labels contribute repeatedly).
pub fn embed_node(graph: &DependencyGraph, node: usize, params: &EncoderParams) -> Array1<f64> {
    match graph.predicate(node) {
        Some(p) => params.embeddings.row(p).to_owned(),
        None => {
            let mut e = params.masked_base.clone();
            for edge in graph.edges() {
                if edge.source == node {
                    e += &params.masked_out.row(edge.label);
                }
                if edge.target == node {
                    e += &params.masked_in.row(edge.label);
                }
            }
            e
        }
    }
}

/// One convolution pass over all nodes.
pub fn conv_layer(
    layer: &GraphConvLayer,
    inputs: &[Array1<f64>],
    edges: &[Edge],
    activation: Activation,
) -> Result<Vec<Array1<f64>>> {
    for h in inputs {
        if h.len() != layer.input_dim() {
            return Err(Error::Shape(format!(
                "layer expects input size {}, got {}",
                layer.input_dim(),
                h.len()
            )));
        }
    }
    let mut pre: Vec<Array1<f64>> = inputs
        .iter()
        .map(|h| layer.self_weight.dot(h) + &layer.bias)
        .collect();
    for e in edges {
        let from_target = layer.out_weight[e.label].dot(&inputs[e.target]);
        pre[e.source] += &from_target;
        let from_source = layer.in_weight[e.label].dot(&inputs[e.source]);
        pre[e.target] += &from_source;
    }
    Ok(pre
        .into_iter()
        .map(|z| z.mapv(|x| activation.apply(x)))
        .collect())
}

/// Scales a vector down to sum to `card` when its total exceeds `card`;
/// vectors already within the cardinality pass through unchanged.
pub fn normalise_cardinality(q: &Array1<f64>, card: usize) -> Array1<f64> {
    let sum = q.sum();
    if sum > card as f64 {
        q * (card as f64 / sum)
    } else {
        q.clone()
    }
}

/// Forward pass with intermediates kept for backpropagation.
#[derive(Debug, Clone)]
pub(crate) struct EncodeTrace {
    pub embeds: Vec<Array1<f64>>,
    pub hidden: Vec<Array1<f64>>,
    pub raw: Vec<Array1<f64>>,
    /// Per node, the pre-normalisation activation total when it exceeded the
    /// cardinality (the downscaling branch), else None.
    pub scaled_sum: Vec<Option<f64>>,
    pub probs: Array2<f64>,
}

pub(crate) fn encode_trace(
    graph: &DependencyGraph,
    params: &EncoderParams,
    card: usize,
) -> Result<EncodeTrace> {
    params.validate_for(graph)?;
    if card > params.output_dim() {
        return Err(Error::Shape(format!(
            "cardinality {card} exceeds encoder output dimension {}",
            params.output_dim()
        )));
    }
    let n = graph.num_nodes();
    let embeds: Vec<Array1<f64>> = (0..n).map(|v| embed_node(graph, v, params)).collect();
    let hidden = conv_layer(&params.layer1, &embeds, graph.edges(), Activation::Tanh)?;
    let raw = conv_layer(&params.layer2, &hidden, graph.edges(), Activation::Sigmoid)?;
    let mut scaled_sum = Vec::with_capacity(n);
    let mut probs = Array2::zeros((n, params.output_dim()));
    for (v, r) in raw.iter().enumerate() {
        let sum = r.sum();
        if sum > card as f64 {
            scaled_sum.push(Some(sum));
            probs.row_mut(v).assign(&(r * (card as f64 / sum)));
        } else {
            scaled_sum.push(None);
            probs.row_mut(v).assign(r);
        }
    }
    Ok(EncodeTrace { embeds, hidden, raw, scaled_sum, probs })
}

/// Maps a graph to a mean-field situation. Deterministic in its inputs.
pub fn encode(
    graph: &DependencyGraph,
    params: &EncoderParams,
    card: usize,
) -> Result<MeanFieldSituation> {
    Ok(MeanFieldSituation::new(encode_trace(graph, params, card)?.probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::parse_sembank;
    use ndarray::array;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::io::Cursor;

    fn random_params(
        num_predicates: usize,
        num_labels: usize,
        dims: (usize, usize, usize),
        seed: u64,
    ) -> EncoderParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = EncoderParams::zeros(num_predicates, num_labels, dims.0, dims.1, dims.2);
        let mut fill = |a: &mut [f64]| {
            for x in a {
                *x = 0.4 * (rng.random::<f64>() - 0.5);
            }
        };
        fill(params.embeddings.as_slice_mut().unwrap());
        fill(params.masked_base.as_slice_mut().unwrap());
        fill(params.masked_out.as_slice_mut().unwrap());
        fill(params.masked_in.as_slice_mut().unwrap());
        for layer in [&mut params.layer1, &mut params.layer2] {
            fill(layer.self_weight.as_slice_mut().unwrap());
            for w in layer.out_weight.iter_mut().chain(layer.in_weight.iter_mut()) {
                fill(w.as_slice_mut().unwrap());
            }
            fill(layer.bias.as_slice_mut().unwrap());
        }
        params
    }

    const FIG1: &str =
        r#"{"nodes":["_picture_n","_tell_v","_story_n"],"edges":[[1,"ARG1",0],[1,"ARG2",2]]}"#;

    #[test]
    fn embed_observed_node_is_lookup() {
        let (graphs, vocab) = parse_sembank(Cursor::new(FIG1)).unwrap();
        let params = random_params(vocab.num_predicates(), vocab.num_labels(), (4, 4, 4), 1);
        let e = embed_node(&graphs[0], 1, &params);
        let tell = vocab.predicate_id("_tell_v").unwrap();
        assert_eq!(e, params.embeddings.row(tell).to_owned());
    }

    #[test]
    fn embed_masked_isolated_node_is_base() {
        let (graphs, _) =
            parse_sembank(Cursor::new(r#"{"nodes":[null],"edges":[]}"#)).unwrap();
        let params = random_params(1, 2, (3, 3, 3), 2);
        assert_eq!(embed_node(&graphs[0], 0, &params), params.masked_base);
    }

    #[test]
    fn embed_masked_verb_sums_outgoing_labels() {
        let line = r#"{"nodes":["_picture_n",null,"_story_n"],"edges":[[1,"ARG1",0],[1,"ARG2",2]]}"#;
        let (graphs, vocab) = parse_sembank(Cursor::new(line)).unwrap();
        let params = random_params(vocab.num_predicates(), vocab.num_labels(), (4, 4, 4), 3);
        let arg1 = vocab.label_id("ARG1").unwrap();
        let arg2 = vocab.label_id("ARG2").unwrap();
        let expect = &params.masked_base + &params.masked_out.row(arg1) + &params.masked_out.row(arg2);
        assert_eq!(embed_node(&graphs[0], 1, &params), expect);
    }

    #[test]
    fn conv_zero_weights_activations() {
        let (graphs, vocab) = parse_sembank(Cursor::new(FIG1)).unwrap();
        let params = EncoderParams::zeros(vocab.num_predicates(), vocab.num_labels(), 3, 3, 3);
        let inputs: Vec<Array1<f64>> = vec![array![0.3, -0.2, 0.9]; 3];
        let tanh_out =
            conv_layer(&params.layer1, &inputs, graphs[0].edges(), Activation::Tanh).unwrap();
        assert!(tanh_out.iter().all(|h| h.iter().all(|&x| x == 0.0)));
        let sig_out =
            conv_layer(&params.layer2, &inputs, graphs[0].edges(), Activation::Sigmoid).unwrap();
        assert!(sig_out.iter().all(|h| h.iter().all(|&x| x == 0.5)));
    }

    #[test]
    fn conv_isolated_node_sees_only_itself() {
        let (graphs, _) = parse_sembank(Cursor::new(r#"{"nodes":["_a"],"edges":[]}"#)).unwrap();
        let params = random_params(1, 1, (3, 3, 3), 5);
        let inputs = vec![array![0.5, -0.1, 0.2]];
        let out = conv_layer(&params.layer1, &inputs, graphs[0].edges(), Activation::Tanh).unwrap();
        let expect =
            (params.layer1.self_weight.dot(&inputs[0]) + &params.layer1.bias).mapv(f64::tanh);
        assert_eq!(out[0], expect);
    }

    #[test]
    fn conv_shape_mismatch_is_error() {
        let params = EncoderParams::zeros(1, 1, 3, 3, 3);
        let inputs = vec![array![0.5, -0.1]];
        assert!(conv_layer(&params.layer1, &inputs, &[], Activation::Tanh).is_err());
    }

    #[test]
    fn normalise_cardinality_cases() {
        let scaled = normalise_cardinality(&array![0.9, 0.8, 0.3], 1);
        assert!((scaled[0] - 0.45).abs() < 1e-15);
        assert!((scaled[1] - 0.40).abs() < 1e-15);
        assert!((scaled[2] - 0.15).abs() < 1e-15);
        let kept = normalise_cardinality(&array![0.2, 0.3], 1);
        assert_eq!(kept, array![0.2, 0.3]);
        let boundary = normalise_cardinality(&Array1::from_elem(10, 0.5), 5);
        assert_eq!(boundary, Array1::from_elem(10, 0.5));
    }

    #[test]
    fn encode_zero_params_gives_card_over_dim() {
        let (graphs, vocab) = parse_sembank(Cursor::new(FIG1)).unwrap();
        let params = EncoderParams::zeros(vocab.num_predicates(), vocab.num_labels(), 10, 10, 10);
        let mf = encode(&graphs[0], &params, 2).unwrap();
        for v in 0..3 {
            for i in 0..10 {
                assert!((mf.probs[(v, i)] - 0.2).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn encode_output_is_valid_mean_field() {
        let (graphs, vocab) = parse_sembank(Cursor::new(FIG1)).unwrap();
        let params = random_params(vocab.num_predicates(), vocab.num_labels(), (6, 6, 6), 8);
        let mf = encode(&graphs[0], &params, 2).unwrap();
        mf.validate(2).unwrap();
    }

    #[test]
    fn encode_is_permutation_equivariant() {
        let line = r#"{"nodes":["_a","_b","_c"],"edges":[[1,"L",0],[1,"M",2]]}"#;
        let permuted = r#"{"nodes":["_c","_a","_b"],"edges":[[2,"L",1],[2,"M",0]]}"#;
        let (g1, vocab) = parse_sembank(Cursor::new(line)).unwrap();
        // reuse the same vocabulary for the permuted graph so ids line up
        let g2 = crate::graph::parse_graph_record(permuted, &vocab).unwrap();
        let params = random_params(vocab.num_predicates(), vocab.num_labels(), (5, 5, 5), 13);
        let a = encode(&g1[0], &params, 2).unwrap();
        let b = encode(&g2, &params, 2).unwrap();
        // node v of the original sits at position (v + 1) % 3 in the permuted graph
        for v in 0..3 {
            let moved = (v + 1) % 3;
            for i in 0..5 {
                assert_eq!(a.probs[(v, i)], b.probs[(moved, i)]);
            }
        }
    }

    #[test]
    fn encode_is_local_to_two_hops() {
        let line = r#"{"nodes":["_a","_b","_c","_d","_e","_f"],"edges":[[0,"L",1],[1,"L",2],[2,"L",3],[3,"L",4],[4,"L",5]]}"#;
        let edited = r#"{"nodes":["_a","_b","_c","_e","_d","_f"],"edges":[[0,"L",1],[1,"L",2],[2,"L",3],[3,"L",4],[4,"L",5]]}"#;
        let (graphs, vocab) = parse_sembank(Cursor::new(line)).unwrap();
        let g2 = crate::graph::parse_graph_record(edited, &vocab).unwrap();
        let params = random_params(vocab.num_predicates(), vocab.num_labels(), (4, 4, 4), 21);
        let a = encode(&graphs[0], &params, 1).unwrap();
        let b = encode(&g2, &params, 1).unwrap();
        // nodes 3 and 4 swapped predicates: distance from node 0 is 3 and 4,
        // beyond the two-layer receptive field
        for i in 0..4 {
            assert_eq!(a.probs[(0, i)], b.probs[(0, i)]);
        }
        // but node 2 (distance 1 from the edit) must see the change
        assert!((0..4).any(|i| a.probs[(2, i)] != b.probs[(2, i)]));
    }
}
