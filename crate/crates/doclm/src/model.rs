//! The full model: layout encoder, linear adapter, causal decoder, and one
//! ordered parameter store for all three.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::Document;
use crate::decoder::{Adapter, AssembledSequence, Decoder, DecoderConfig, FusionError};
use crate::encoder::{DocumentFeatures, EncoderConfig, EncoderError, LayoutEncoder};
use crate::prompts::TaskSample;
use crate::tensor::{ParamSet, Tensor};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
}

pub struct ModelBundle {
    pub encoder: LayoutEncoder,
    pub adapter: Adapter,
    pub decoder: Decoder,
    pub params: ParamSet,
}

impl ModelBundle {
    /// Initializes all weights from one seed. Construction order (encoder,
    /// adapter, decoder) fixes the parameter order, so identical seeds give
    /// bit-identical models.
    pub fn init(
        enc_cfg: EncoderConfig,
        dec_cfg: DecoderConfig,
        seed: u64,
    ) -> Result<Self, ModelError> {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = LayoutEncoder::init(enc_cfg, &mut params, &mut rng)?;
        let adapter = Adapter::init(encoder.cfg.d_enc, dec_cfg.d_dec, &mut params, &mut rng);
        let decoder = Decoder::init(dec_cfg, &mut params, &mut rng)?;
        Ok(ModelBundle {
            encoder,
            adapter,
            decoder,
            params,
        })
    }

    pub fn n_scalars(&self) -> usize {
        self.params.iter().map(|(_, p)| p.tensor.numel()).sum()
    }

    pub fn encode(&self, doc: &Document) -> Result<DocumentFeatures, ModelError> {
        Ok(self.encoder.encode(&self.params, doc)?)
    }

    /// Encoder features through the adapter, ready to prefix the decoder.
    pub fn project(&self, features: &DocumentFeatures) -> Result<Tensor, ModelError> {
        Ok(self.adapter.project_features(&self.params, features)?)
    }

    pub fn assemble(
        &self,
        sample: &TaskSample,
        features: Option<&DocumentFeatures>,
    ) -> Result<AssembledSequence, ModelError> {
        let projected = features.map(|f| self.project(f)).transpose()?;
        Ok(self.decoder.assemble(sample, projected)?)
    }

    pub fn loss(&self, seq: &AssembledSequence) -> Result<f64, ModelError> {
        Ok(self.decoder.loss(&self.params, seq)?)
    }

    pub fn generate_greedy(
        &self,
        features: Option<&DocumentFeatures>,
        prompt_ids: &[usize],
        max_new: usize,
    ) -> Result<Vec<usize>, ModelError> {
        let projected = features.map(|f| self.project(f)).transpose()?;
        Ok(self
            .decoder
            .generate_greedy(&self.params, projected.as_ref(), prompt_ids, max_new)?)
    }

    /// Marks encoder parameters as frozen (or thaws them).
    pub fn set_encoder_frozen(&mut self, frozen: bool) {
        for (_, p) in self.params.iter_mut() {
            if p.name.starts_with("encoder.") {
                p.trainable = !frozen;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SyntheticSpec};

    fn tiny_bundle(seed: u64) -> ModelBundle {
        ModelBundle::init(
            EncoderConfig {
                d_enc: 16,
                n_layers: 1,
                n_heads: 2,
                patch_grid: 2,
                image_size: 8,
                ..EncoderConfig::default()
            },
            DecoderConfig {
                d_dec: 16,
                n_layers: 1,
                n_heads: 2,
                ..DecoderConfig::default()
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn same_seed_same_model() {
        let a = tiny_bundle(11);
        let b = tiny_bundle(11);
        assert_eq!(a.params.len(), b.params.len());
        for ((_, pa), (_, pb)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(pa.name, pb.name);
            assert_eq!(pa.tensor, pb.tensor);
        }
        let c = tiny_bundle(12);
        let differs = a
            .params
            .iter()
            .zip(c.params.iter())
            .any(|((_, pa), (_, pc))| pa.tensor != pc.tensor);
        assert!(differs);
    }

    #[test]
    fn parameter_names_are_unique_and_scoped() {
        let m = tiny_bundle(3);
        let mut names: Vec<&str> = m.params.iter().map(|(_, p)| p.name.as_str()).collect();
        let before = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), before);
        for name in names {
            assert!(
                name.starts_with("encoder.")
                    || name.starts_with("adapter.")
                    || name.starts_with("decoder."),
                "unscoped parameter {name}"
            );
        }
    }

    #[test]
    fn end_to_end_document_answer_path() {
        let m = tiny_bundle(5);
        let docs = synth_generate(&SyntheticSpec {
            n_docs: 1,
            image_size: 8,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let f = m.encode(&docs[0]).unwrap();
        assert_eq!(f.features.shape()[0], 512);
        let p = m.project(&f).unwrap();
        assert_eq!(p.shape(), &[512, 16]);
        let out = m
            .generate_greedy(Some(&f), &[crate::data::ByteCodec::BOS, b'Q' as usize], 4)
            .unwrap();
        assert!(out.len() <= 4);
    }

    #[test]
    fn freezing_flags_only_encoder_params() {
        let mut m = tiny_bundle(5);
        m.set_encoder_frozen(true);
        for (_, p) in m.params.iter() {
            assert_eq!(p.trainable, !p.name.starts_with("encoder."));
        }
        m.set_encoder_frozen(false);
        assert!(m.params.iter().all(|(_, p)| p.trainable));
    }
}
