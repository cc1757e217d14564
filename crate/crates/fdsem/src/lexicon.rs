//! Semantic functions: per-predicate truth classifiers over pixies.
//!
//! Each predicate has a weight vector (and an optional bias, zero by
//! default); its truth probability for a pixie is the logistic of the summed
//! weights of the active units. Under a mean-field distribution the expected
//! truth is approximated by rescaling the pre-activation mean with its
//! variance (a probit-style correction):
//!
//! ```text
//! E[σ(a)] ≈ σ( E[a] / sqrt(1 + (π/8)·Var[a]) )
//! ```
//!
//! with `E[a] = Σ v_i q_i + b` and `Var[a] = Σ v_i² q_i (1 - q_i)`.

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};
use crate::util::sigmoid;
use crate::world::Pixie;

/// Truth probabilities are clamped into this range before ratios and logs.
pub const TRUTH_FLOOR: f64 = 1e-12;

/// Per-predicate classifier weights. Row `r` of `weights` is predicate `r`'s
/// weight vector; `bias` holds one scalar per predicate (zero unless enabled).
#[derive(Debug, Clone, PartialEq)]
pub struct LexicalModel {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LexicalModel {
    pub fn new(weights: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if weights.nrows() != bias.len() {
            return Err(Error::Shape(format!(
                "{} weight vectors but {} biases",
                weights.nrows(),
                bias.len()
            )));
        }
        if !weights.iter().all(|x| x.is_finite()) || !bias.iter().all(|x| x.is_finite()) {
            return Err(Error::Shape("lexical model has non-finite entries".into()));
        }
        Ok(LexicalModel { weights, bias })
    }

    pub fn zeros(num_predicates: usize, dim: usize) -> Self {
        LexicalModel {
            weights: Array2::zeros((num_predicates, dim)),
            bias: Array1::zeros(num_predicates),
        }
    }

    pub fn num_predicates(&self) -> usize {
        self.weights.nrows()
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    fn check_predicate(&self, r: usize) -> Result<()> {
        if r >= self.num_predicates() {
            return Err(Error::Vocab(format!("unknown predicate id {r}")));
        }
        Ok(())
    }
}

/// Probability that predicate `r` is true of an exact pixie.
pub fn truth_prob(pixie: &Pixie, r: usize, lex: &LexicalModel) -> Result<f64> {
    lex.check_predicate(r)?;
    let v = lex.weights.row(r);
    let a: f64 = pixie.active().iter().map(|&i| v[i]).sum::<f64>() + lex.bias[r];
    Ok(sigmoid(a))
}

/// Variance-corrected expected truth of predicate `r` under independent
/// per-unit activation probabilities.
pub fn expected_truth(q: ArrayView1<f64>, r: usize, lex: &LexicalModel) -> Result<f64> {
    lex.check_predicate(r)?;
    let v = lex.weights.row(r);
    if v.len() != q.len() {
        return Err(Error::Shape(format!(
            "mean vector has {} units, lexical model {}",
            q.len(),
            v.len()
        )));
    }
    let mut mean = lex.bias[r];
    let mut var = 0.0;
    for i in 0..q.len() {
        mean += v[i] * q[i];
        var += v[i] * v[i] * q[i] * (1.0 - q[i]);
    }
    Ok(sigmoid(mean / (1.0 + std::f64::consts::FRAC_PI_8 * var).sqrt()))
}

/// Exact expectation of the truth probability by enumerating all unit
/// configurations; the test oracle for [`expected_truth`]. Limited to
/// `dim <= 20`.
pub fn exact_expected_truth(q: ArrayView1<f64>, r: usize, lex: &LexicalModel) -> Result<f64> {
    lex.check_predicate(r)?;
    let dim = q.len();
    if dim > 20 {
        return Err(Error::Budget { required: 1u128 << dim, budget: 1 << 20 });
    }
    let v = lex.weights.row(r);
    let b = lex.bias[r];
    let mut total = 0.0;
    for mask in 0u32..(1 << dim) {
        let mut weight = 1.0;
        let mut a = b;
        for i in 0..dim {
            if mask >> i & 1 == 1 {
                weight *= q[i];
                a += v[i];
            } else {
                weight *= 1.0 - q[i];
            }
        }
        total += weight * sigmoid(a);
    }
    Ok(total)
}

/// Clamps a truth value into the range used for ratios and logarithms.
pub fn clamp_truth(t: f64) -> f64 {
    t.clamp(TRUTH_FLOOR, 1.0 - TRUTH_FLOOR)
}

/// Normalises positive truth values into a probability vector.
pub(crate) fn normalise_truth_values(truths: &[f64]) -> Result<Vec<f64>> {
    if truths.is_empty() {
        return Err(Error::Invalid("empty candidate set".into()));
    }
    let total: f64 = truths.iter().map(|&t| clamp_truth(t)).sum();
    Ok(truths.iter().map(|&t| clamp_truth(t) / total).collect())
}

/// Generation probabilities over a candidate set for an exact pixie:
/// each candidate's probability is its truth value divided by the candidates'
/// total truth.
pub fn predicate_distribution(
    pixie: &Pixie,
    candidates: &[usize],
    lex: &LexicalModel,
) -> Result<Vec<f64>> {
    let truths: Vec<f64> = candidates
        .iter()
        .map(|&r| truth_prob(pixie, r, lex))
        .collect::<Result<_>>()?;
    normalise_truth_values(&truths)
}

/// Generation probabilities over a candidate set under a mean-field vector,
/// using [`expected_truth`] per candidate.
pub fn predicate_distribution_mean(
    q: ArrayView1<f64>,
    candidates: &[usize],
    lex: &LexicalModel,
) -> Result<Vec<f64>> {
    let truths: Vec<f64> = candidates
        .iter()
        .map(|&r| expected_truth(q, r, lex))
        .collect::<Result<_>>()?;
    normalise_truth_values(&truths)
}

/// Log-probability of generating the observed predicate against a sample of
/// competitors: `log[ t(r) / (t(r) + Σ_{r' in samples} t(r')) ]`, with
/// expected truths throughout. Callers must pass `samples` deduplicated and
/// not containing `r`. Always <= 0.
pub fn sampled_log_gen_prob(
    q: ArrayView1<f64>,
    r: usize,
    samples: &[usize],
    lex: &LexicalModel,
) -> Result<f64> {
    debug_assert!(!samples.contains(&r), "observed predicate must not be in the sample");
    let t_obs = clamp_truth(expected_truth(q, r, lex)?);
    let mut total = t_obs;
    for &s in samples {
        total += clamp_truth(expected_truth(q, s, lex)?);
    }
    Ok((t_obs / total).ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1, Array2};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_give_half() {
        let lex = LexicalModel::zeros(2, 3);
        let x = Pixie::new([0, 2]);
        assert_eq!(truth_prob(&x, 0, &lex).unwrap(), 0.5);
        assert_eq!(expected_truth(array![0.2, 0.9, 0.4].view(), 1, &lex).unwrap(), 0.5);
    }

    #[test]
    fn truth_prob_ln3_case() {
        let lex =
            LexicalModel::new(array![[3.0f64.ln(), 0.0]], array![0.0]).unwrap();
        let x = Pixie::new([0]);
        assert!((truth_prob(&x, 0, &lex).unwrap() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn truth_prob_monotone_in_active_weight() {
        let mut lex = LexicalModel::new(array![[0.3, -0.7, 0.1]], array![0.0]).unwrap();
        let x = Pixie::new([1]);
        let before = truth_prob(&x, 0, &lex).unwrap();
        lex.weights[(0, 1)] += 0.5;
        let after = truth_prob(&x, 0, &lex).unwrap();
        assert!(after > before);
    }

    #[test]
    fn unknown_predicate_is_error() {
        let lex = LexicalModel::zeros(1, 2);
        assert!(truth_prob(&Pixie::new([0]), 3, &lex).is_err());
    }

    #[test]
    fn expected_truth_degenerate_matches_exact_pixie() {
        let lex = LexicalModel::new(array![[0.7, -1.1, 2.0]], array![0.0]).unwrap();
        let x = Pixie::new([0, 2]);
        let q = x.indicator(3);
        let expect = expected_truth(q.view(), 0, &lex).unwrap();
        let exact = truth_prob(&x, 0, &lex).unwrap();
        assert_eq!(expect, exact);
    }

    #[test]
    fn probit_correction_one_unit_case() {
        // v = 2, q = 0.5: two-point oracle gives 0.6904, the corrected
        // sigmoid about 0.700, so the approximation error is about 0.010
        let lex = LexicalModel::new(array![[2.0]], array![0.0]).unwrap();
        let q = array![0.5];
        let approx = expected_truth(q.view(), 0, &lex).unwrap();
        let exact = exact_expected_truth(q.view(), 0, &lex).unwrap();
        let two_point = 0.5 * sigmoid(0.0) + 0.5 * sigmoid(2.0);
        assert!((exact - two_point).abs() < 1e-15);
        assert!((exact - 0.6904).abs() < 1e-4);
        assert!((approx - 0.7000).abs() < 1e-4);
        assert!(((approx - exact).abs() - 0.010).abs() < 2e-3);
    }

    #[test]
    fn exact_expected_truth_linear_in_single_q() {
        let lex = LexicalModel::new(array![[1.3, -0.4, 0.9]], array![0.0]).unwrap();
        let at = |q0: f64| {
            exact_expected_truth(array![q0, 0.3, 0.8].view(), 0, &lex).unwrap()
        };
        let lo = at(0.2);
        let hi = at(0.6);
        let mid = at(0.4);
        assert!((mid - 0.5 * (lo + hi)).abs() < 1e-12);
    }

    #[test]
    fn exact_expected_truth_budget() {
        let lex = LexicalModel::zeros(1, 21);
        let q = Array1::from_elem(21, 0.5);
        assert!(exact_expected_truth(q.view(), 0, &lex).is_err());
    }

    #[test]
    fn probit_error_small_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut done = 0;
        while done < 100 {
            let dim = 1 + (rng.random::<u32>() % 12) as usize;
            let v: Vec<f64> = (0..dim).map(|_| 2.4 * (rng.random::<f64>() - 0.5)).collect();
            let q: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();
            let var: f64 = v.iter().zip(&q).map(|(v, q)| v * v * q * (1.0 - q)).sum();
            if var > 4.0 {
                continue;
            }
            let lex =
                LexicalModel::new(Array2::from_shape_vec((1, dim), v).unwrap(), array![0.0])
                    .unwrap();
            let q = Array1::from_vec(q);
            let approx = expected_truth(q.view(), 0, &lex).unwrap();
            let exact = exact_expected_truth(q.view(), 0, &lex).unwrap();
            assert!(
                (approx - exact).abs() <= 0.05,
                "dim {dim}: approx {approx} exact {exact}"
            );
            done += 1;
        }
    }

    #[test]
    fn distribution_symmetric_candidates() {
        let lex = LexicalModel::new(array![[0.4, 0.4], [0.4, 0.4]], array![0.0, 0.0]).unwrap();
        let p = predicate_distribution(&Pixie::new([0]), &[0, 1], &lex).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn distribution_normalises_and_is_scale_invariant() {
        let p = normalise_truth_values(&[0.2, 0.3, 0.5]).unwrap();
        assert!((p[0] - 0.2).abs() < 1e-12);
        assert!((p[1] - 0.3).abs() < 1e-12);
        assert!((p[2] - 0.5).abs() < 1e-12);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let doubled = normalise_truth_values(&[0.4, 0.6, 1.0]).unwrap();
        for (a, b) in p.iter().zip(&doubled) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn distribution_permutation_equivariant() {
        let lex = LexicalModel::new(
            array![[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]],
            array![0.0, 0.0, 0.0],
        )
        .unwrap();
        let q = array![0.8, 0.1];
        let p = predicate_distribution_mean(q.view(), &[0, 1, 2], &lex).unwrap();
        let shuffled = predicate_distribution_mean(q.view(), &[2, 0, 1], &lex).unwrap();
        assert!((p[0] - shuffled[1]).abs() < 1e-15);
        assert!((p[1] - shuffled[2]).abs() < 1e-15);
        assert!((p[2] - shuffled[0]).abs() < 1e-15);
    }

    #[test]
    fn distribution_empty_candidates_is_error() {
        let lex = LexicalModel::zeros(1, 2);
        assert!(predicate_distribution(&Pixie::new([0]), &[], &lex).is_err());
    }

    #[test]
    fn sampled_log_gen_prob_empty_sample() {
        let lex = LexicalModel::zeros(2, 2);
        let q = array![0.5, 0.5];
        assert_eq!(sampled_log_gen_prob(q.view(), 0, &[], &lex).unwrap(), 0.0);
    }

    #[test]
    fn sampled_log_gen_prob_symmetric_pair() {
        let lex = LexicalModel::zeros(2, 2);
        let q = array![0.3, 0.9];
        let lp = sampled_log_gen_prob(q.view(), 0, &[1], &lex).unwrap();
        assert!((lp - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn sampled_log_gen_prob_full_vocab_matches_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dim = 4;
        let vocab = 6;
        let weights = Array2::from_shape_fn((vocab, dim), |_| rng.random::<f64>() - 0.5);
        let lex = LexicalModel::new(weights, Array1::zeros(vocab)).unwrap();
        let q = Array1::from_shape_fn(dim, |_| rng.random::<f64>());
        let candidates: Vec<usize> = (0..vocab).collect();
        let dist = predicate_distribution_mean(q.view(), &candidates, &lex).unwrap();
        for r in 0..vocab {
            let samples: Vec<usize> = (0..vocab).filter(|&s| s != r).collect();
            let lp = sampled_log_gen_prob(q.view(), r, &samples, &lex).unwrap();
            assert!((lp - dist[r].ln()).abs() < 1e-12);
            assert!(lp <= 0.0);
        }
    }
}
