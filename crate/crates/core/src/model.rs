//! The full dual-branch model: embedding table, per-modality multi-level
//! encoders, and one similarity head per level.

use rand_chacha::ChaCha20Rng;

use crate::config::{EncoderKind, ModelConfig};
use crate::encoders::ModalityEncoder;
use crate::error::{HslError, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::similarity::{batch_similarity_tables, GranularityHead, SimilarityTable};
use crate::tensor::Tensor;

pub struct HslModel {
    pub cfg: ModelConfig,
    pub embedding: ParamId,
    pub image_encoder: ModalityEncoder,
    pub text_encoder: ModalityEncoder,
    pub heads: Vec<GranularityHead>,
}

impl HslModel {
    /// Register every parameter in a deterministic order and build the model.
    /// `cfg.vocab_size` must already reflect the built vocabulary.
    pub fn init(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut ChaCha20Rng) -> Result<Self> {
        cfg.validate()?;
        if cfg.vocab_size < 2 {
            return Err(HslError::Config(
                "vocab_size must cover at least the pad and unk ids".into(),
            ));
        }
        let embedding = store.xavier("embedding", cfg.vocab_size, cfg.word_dim, rng)?;
        let image_encoder = ModalityEncoder::init(
            store,
            rng,
            cfg,
            "img",
            cfg.object_dim,
            cfg.image_sublayers,
            false,
        )?;
        let text_encoder = ModalityEncoder::init(
            store,
            rng,
            cfg,
            "txt",
            cfg.word_dim,
            cfg.text_sublayers,
            cfg.encoder == EncoderKind::Transformer,
        )?;
        let mut heads = Vec::with_capacity(cfg.levels);
        for level in 1..=cfg.levels {
            heads.push(GranularityHead::init(store, rng, cfg, level)?);
        }
        Ok(HslModel {
            cfg: cfg.clone(),
            embedding,
            image_encoder,
            text_encoder,
            heads,
        })
    }

    /// Encode one image's object features through every level.
    pub fn encode_image(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        features: &Tensor,
        mask: &[bool],
    ) -> Result<Vec<Var>> {
        let n = features.rows();
        if n == 0 || !mask.iter().any(|&m| m) {
            return Err(HslError::Data("image with no objects".into()));
        }
        if n > self.cfg.max_objects {
            return Err(HslError::Data(format!(
                "{n} objects exceed max_objects {}",
                self.cfg.max_objects
            )));
        }
        if features.cols() != self.cfg.object_dim {
            return Err(HslError::ShapeMismatch {
                op: "encode_image",
                detail: format!(
                    "object features have {} columns, config says {}",
                    features.cols(),
                    self.cfg.object_dim
                ),
            });
        }
        let x = g.input(features.clone());
        self.image_encoder.encode(g, store, x, mask)
    }

    /// Embed one query's token ids and encode them through every level.
    pub fn encode_text(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        ids: &[usize],
        mask: &[bool],
    ) -> Result<Vec<Var>> {
        if ids.is_empty() || !mask.iter().any(|&m| m) {
            return Err(HslError::Data("query with no tokens".into()));
        }
        if ids.len() > self.cfg.max_tokens {
            return Err(HslError::Data(format!(
                "{} tokens exceed max_tokens {}",
                ids.len(),
                self.cfg.max_tokens
            )));
        }
        let table = g.param(store, self.embedding);
        let x = g.embed(table, ids)?;
        self.text_encoder.encode(g, store, x, mask)
    }

    /// Encode an aligned batch and produce all 2*levels similarity tables.
    pub fn batch_tables(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        images: &[(Tensor, Vec<bool>)],
        queries: &[(Vec<usize>, Vec<bool>)],
    ) -> Result<Vec<SimilarityTable>> {
        if images.len() != queries.len() || images.is_empty() {
            return Err(HslError::ShapeMismatch {
                op: "batch_tables",
                detail: format!("{} images vs {} queries", images.len(), queries.len()),
            });
        }
        let mut image_levels = Vec::with_capacity(images.len());
        let mut image_masks = Vec::with_capacity(images.len());
        for (features, mask) in images {
            image_levels.push(self.encode_image(g, store, features, mask)?);
            image_masks.push(mask.clone());
        }
        let mut query_levels = Vec::with_capacity(queries.len());
        let mut query_masks = Vec::with_capacity(queries.len());
        for (ids, mask) in queries {
            query_levels.push(self.encode_text(g, store, ids, mask)?);
            query_masks.push(mask.clone());
        }
        batch_similarity_tables(
            g,
            store,
            &self.heads,
            &image_levels,
            &image_masks,
            &query_levels,
            &query_masks,
        )
    }
}
