//! Versioned JSON checkpoints. Matrices are stored as nested arrays of
//! decimal numbers, so a checkpoint is human-inspectable and re-serialises
//! byte-identically after a load (shortest round-trip float formatting).
//! Optimiser state is included so a resumed run continues exactly where the
//! interrupted one left off.

use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderParams, GraphConvLayer};
use crate::error::{Error, Result};
use crate::graph::Vocabulary;
use crate::lexicon::LexicalModel;
use crate::train::{AdamState, Model, Optimisers, ParamBlocks, TrainConfig};
use crate::world::WorldModel;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabularyData {
    pub predicates: Vec<(String, u64)>,
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LexicalData {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerData {
    pub self_weight: Vec<Vec<f64>>,
    pub out_weight: Vec<Vec<Vec<f64>>>,
    pub in_weight: Vec<Vec<Vec<f64>>>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderData {
    pub embeddings: Vec<Vec<f64>>,
    pub masked_base: Vec<f64>,
    pub masked_out: Vec<Vec<f64>>,
    pub masked_in: Vec<Vec<f64>>,
    pub layer1: LayerData,
    pub layer2: LayerData,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamData {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimiserData {
    pub world: AdamData,
    pub lexical: AdamData,
    pub encoder: AdamData,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub dim: usize,
    pub card: usize,
    pub vocabulary: VocabularyData,
    /// One dim x dim matrix per label id.
    pub world: Vec<Vec<Vec<f64>>>,
    pub lexical: LexicalData,
    pub encoder: EncoderData,
    pub config: TrainConfig,
    pub seed: u64,
    pub epoch: usize,
    pub optimiser: OptimiserData,
}

fn matrix_rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn rows_matrix(rows: &[Vec<f64>], what: &str) -> Result<Array2<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map(Vec::len).unwrap_or(0);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Checkpoint(format!("{what} is not rectangular")));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((nrows, ncols), flat)
        .map_err(|e| Error::Checkpoint(format!("{what}: {e}")))
}

fn layer_data(layer: &GraphConvLayer) -> LayerData {
    LayerData {
        self_weight: matrix_rows(&layer.self_weight),
        out_weight: layer.out_weight.iter().map(matrix_rows).collect(),
        in_weight: layer.in_weight.iter().map(matrix_rows).collect(),
        bias: layer.bias.to_vec(),
    }
}

fn layer_from(data: &LayerData, what: &str) -> Result<GraphConvLayer> {
    Ok(GraphConvLayer {
        self_weight: rows_matrix(&data.self_weight, what)?,
        out_weight: data
            .out_weight
            .iter()
            .map(|m| rows_matrix(m, what))
            .collect::<Result<_>>()?,
        in_weight: data
            .in_weight
            .iter()
            .map(|m| rows_matrix(m, what))
            .collect::<Result<_>>()?,
        bias: Array1::from_vec(data.bias.clone()),
    })
}

fn adam_data(state: &AdamState) -> AdamData {
    AdamData { first: state.first.clone(), second: state.second.clone(), step: state.step }
}

fn adam_from(data: &AdamData, expected: usize, what: &str) -> Result<AdamState> {
    if data.first.len() != expected || data.second.len() != expected {
        return Err(Error::Checkpoint(format!(
            "{what} optimiser state holds {} parameters, expected {expected}",
            data.first.len()
        )));
    }
    Ok(AdamState { first: data.first.clone(), second: data.second.clone(), step: data.step })
}

impl Checkpoint {
    pub fn from_parts(
        vocab: &Vocabulary,
        model: &Model,
        opt: &Optimisers,
        config: &TrainConfig,
        epoch: usize,
    ) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            dim: model.world.dim(),
            card: model.world.card(),
            vocabulary: VocabularyData {
                predicates: vocab.predicates().to_vec(),
                labels: vocab.labels().to_vec(),
            },
            world: model.world.weights.iter().map(matrix_rows).collect(),
            lexical: LexicalData {
                weights: matrix_rows(&model.lexical.weights),
                bias: model.lexical.bias.to_vec(),
            },
            encoder: EncoderData {
                embeddings: matrix_rows(&model.encoder.embeddings),
                masked_base: model.encoder.masked_base.to_vec(),
                masked_out: matrix_rows(&model.encoder.masked_out),
                masked_in: matrix_rows(&model.encoder.masked_in),
                layer1: layer_data(&model.encoder.layer1),
                layer2: layer_data(&model.encoder.layer2),
            },
            config: config.clone(),
            seed: config.seed,
            epoch,
            optimiser: OptimiserData {
                world: adam_data(&opt.world),
                lexical: adam_data(&opt.lexical),
                encoder: adam_data(&opt.encoder),
            },
        }
    }

    /// Reconstructs the model, validating every shape against the declared
    /// dimensions and vocabulary.
    pub fn into_parts(self) -> Result<(Vocabulary, Model, Optimisers, TrainConfig, usize)> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unrecognised checkpoint version {} (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        let vocab = Vocabulary::from_parts(self.vocabulary.predicates, self.vocabulary.labels)?;
        if self.world.len() != vocab.num_labels() {
            return Err(Error::Checkpoint(format!(
                "{} world matrices for {} labels",
                self.world.len(),
                vocab.num_labels()
            )));
        }
        let weights = self
            .world
            .iter()
            .map(|m| {
                let m = rows_matrix(m, "world matrix")?;
                if m.nrows() != self.dim || m.ncols() != self.dim {
                    return Err(Error::Checkpoint(format!(
                        "world matrix is {}x{}, expected {}x{}",
                        m.nrows(),
                        m.ncols(),
                        self.dim,
                        self.dim
                    )));
                }
                Ok(m)
            })
            .collect::<Result<Vec<_>>>()?;
        let world = WorldModel::new(self.dim, self.card, weights).map_err(checkpoint_shape)?;
        let lex_weights = rows_matrix(&self.lexical.weights, "lexical weights")?;
        if lex_weights.nrows() != vocab.num_predicates() || lex_weights.ncols() != self.dim {
            return Err(Error::Checkpoint(format!(
                "lexical weights are {}x{}, expected {}x{}",
                lex_weights.nrows(),
                lex_weights.ncols(),
                vocab.num_predicates(),
                self.dim
            )));
        }
        let lexical =
            LexicalModel::new(lex_weights, Array1::from_vec(self.lexical.bias.clone()))
                .map_err(checkpoint_shape)?;
        let encoder = EncoderParams {
            embeddings: rows_matrix(&self.encoder.embeddings, "embeddings")?,
            masked_base: Array1::from_vec(self.encoder.masked_base.clone()),
            masked_out: rows_matrix(&self.encoder.masked_out, "mask embeddings")?,
            masked_in: rows_matrix(&self.encoder.masked_in, "mask embeddings")?,
            layer1: layer_from(&self.encoder.layer1, "layer1")?,
            layer2: layer_from(&self.encoder.layer2, "layer2")?,
        };
        if encoder.num_predicates() != vocab.num_predicates()
            || encoder.num_labels() != vocab.num_labels()
            || encoder.output_dim() != self.dim
        {
            return Err(Error::Checkpoint("encoder shapes disagree with the vocabulary".into()));
        }
        let model = Model { world, lexical, encoder };
        let opt = Optimisers {
            world: adam_from(&self.optimiser.world, model.world.num_params(), "world")?,
            lexical: adam_from(&self.optimiser.lexical, model.lexical.num_params(), "lexical")?,
            encoder: adam_from(&self.optimiser.encoder, model.encoder.num_params(), "encoder")?,
        };
        Ok((vocab, model, opt, self.config, self.epoch))
    }

    pub fn to_json(&self) -> String {
        let mut text =
            serde_json::to_string_pretty(self).expect("checkpoints are always serialisable");
        text.push('\n');
        text
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}

fn checkpoint_shape(e: Error) -> Error {
    Error::Checkpoint(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::parse_sembank;
    use crate::train::ModelDims;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::io::Cursor;

    fn sample_checkpoint() -> Checkpoint {
        let corpus = r#"{"nodes":["_a","_b"],"edges":[[0,"ARG1",1]]}"#;
        let (_, vocab) = parse_sembank(Cursor::new(corpus)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = Model::init(&vocab, &ModelDims::new(4, 2), &mut rng).unwrap();
        let opt = Optimisers::new(&model);
        Checkpoint::from_parts(&vocab, &model, &opt, &TrainConfig::default(), 3)
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let ck = sample_checkpoint();
        let first = ck.to_json();
        let parsed: Checkpoint = serde_json::from_str(&first).unwrap();
        let second = parsed.to_json();
        assert_eq!(first, second);
    }

    #[test]
    fn into_parts_reconstructs_model() {
        let ck = sample_checkpoint();
        let dim = ck.dim;
        let (vocab, model, opt, cfg, epoch) = ck.into_parts().unwrap();
        assert_eq!(model.world.dim(), dim);
        assert_eq!(vocab.num_predicates(), 2);
        assert_eq!(opt.world.step, 0);
        assert_eq!(cfg, TrainConfig::default());
        assert_eq!(epoch, 3);
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let mut ck = sample_checkpoint();
        ck.version = 99;
        assert!(ck.into_parts().is_err());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut ck = sample_checkpoint();
        ck.world[0][0].push(7.0);
        assert!(ck.into_parts().is_err());
        let mut ck = sample_checkpoint();
        ck.optimiser.world.first.pop();
        assert!(ck.into_parts().is_err());
    }
}
