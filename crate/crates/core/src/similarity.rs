//! Multi-granularity cross-modal similarity.
//!
//! Per level, an image/query pair is scored two ways:
//!  * object granularity — each projected object is compared with the pooled,
//!    projected query and the per-object projection lengths are averaged;
//!  * image granularity — objects are attention-pooled into one image vector
//!    and compared with a separately projected query.
//!
//! The query projections of the two granularities never share weights: they
//! define two distinct embedding spaces.

use std::fmt;

use rand_chacha::ChaCha20Rng;

use crate::config::ModelConfig;
use crate::encoders::Linear;
use crate::error::{HslError, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Granularity {
    Object,
    Image,
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Granularity::Object => write!(f, "object"),
            Granularity::Image => write!(f, "image"),
        }
    }
}

/// Similarity parameters for one level.
#[derive(Clone, Debug)]
pub struct GranularityHead {
    /// 1-based level this head scores.
    pub level: usize,
    /// Objects into the object-query space.
    pub object_visual: Linear,
    /// Pooled query into the object-query space.
    pub object_query: Linear,
    /// Pooled query into the image-query space.
    pub image_query: Linear,
    /// Attention MLP, hidden layer.
    pub attn_hidden: Linear,
    /// Attention MLP, scalar score layer.
    pub attn_score: Linear,
}

impl GranularityHead {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha20Rng,
        cfg: &ModelConfig,
        level: usize,
    ) -> Result<Self> {
        let p = format!("head.level{level}");
        Ok(GranularityHead {
            level,
            object_visual: Linear::init(store, rng, &format!("{p}.obj.visual"), cfg.model_dim, cfg.embed_dim)?,
            object_query: Linear::init(store, rng, &format!("{p}.obj.query"), cfg.model_dim, cfg.embed_dim)?,
            image_query: Linear::init(store, rng, &format!("{p}.img.query"), cfg.model_dim, cfg.embed_dim)?,
            attn_hidden: Linear::init(store, rng, &format!("{p}.attn.hidden"), cfg.model_dim, cfg.attn_hidden())?,
            attn_score: Linear::init(store, rng, &format!("{p}.attn.score"), cfg.attn_hidden(), 1)?,
        })
    }
}

/// Projection length of `q` onto the direction of `v`: v.q / |v|.
/// Both arguments are (1,d) rows. A zero-norm visual vector is an error.
pub fn projection_similarity(g: &mut Graph, v: Var, q: Var) -> Result<Var> {
    let norm = g.l2_norm_rows(v)?;
    if g.value(norm).numel() != 1 {
        return Err(HslError::ShapeMismatch {
            op: "projection_similarity",
            detail: "expected single-row vectors".into(),
        });
    }
    if g.item(norm) == 0.0 {
        return Err(HslError::ZeroNormVisual);
    }
    let num = g.dot(v, q)?;
    g.div(num, norm)
}

/// Mask-aware mean over tokens followed by an affine map into an embedding
/// space: the pooled-query side of both granularities.
pub fn pooled_query(
    g: &mut Graph,
    store: &ParamStore,
    proj: &Linear,
    query_level: Var,
    token_mask: &[bool],
) -> Result<Var> {
    let mean = g.mean_axis0(query_level, Some(token_mask))?;
    proj.apply(g, store, mean)
}

/// Mean over objects of the per-object projection similarity (masked objects
/// are excluded from the mean).
pub fn object_granularity_sim(
    g: &mut Graph,
    store: &ParamStore,
    head: &GranularityHead,
    image_level: Var,
    query_level: Var,
    object_mask: &[bool],
    token_mask: &[bool],
) -> Result<Var> {
    let qbar = pooled_query(g, store, &head.object_query, query_level, token_mask)?;
    let vbar = head.object_visual.apply(g, store, image_level)?;
    let mut scores = Vec::new();
    for (k, &keep) in object_mask.iter().enumerate() {
        if keep {
            let row = g.slice_rows(vbar, k, 1)?;
            scores.push(projection_similarity(g, row, qbar)?);
        }
    }
    if scores.is_empty() {
        return Err(HslError::AllMasked {
            op: "object_granularity_sim",
            row: 0,
        });
    }
    let mut acc = scores[0];
    for &s in &scores[1..] {
        acc = g.add(acc, s)?;
    }
    g.scale(acc, 1.0 / scores.len() as f64)
}

/// Softmax-normalized MLP attention over objects, returning the weighted sum
/// of object features. Masked objects receive weight zero.
pub fn attention_pool(
    g: &mut Graph,
    store: &ParamStore,
    head: &GranularityHead,
    image_level: Var,
    object_mask: &[bool],
) -> Result<Var> {
    let hidden = head.attn_hidden.apply(g, store, image_level)?;
    let act = g.relu(hidden)?;
    let scores = head.attn_score.apply(g, store, act)?;
    let row = g.transpose(scores)?;
    let weights = g.softmax_rows(row, Some(object_mask))?;
    g.matmul(weights, image_level)
}

/// Projection similarity between the attention-pooled image vector and the
/// image-space query projection.
pub fn image_granularity_sim(
    g: &mut Graph,
    store: &ParamStore,
    head: &GranularityHead,
    image_level: Var,
    query_level: Var,
    object_mask: &[bool],
    token_mask: &[bool],
) -> Result<Var> {
    let pooled = attention_pool(g, store, head, image_level, object_mask)?;
    let qbar = pooled_query(g, store, &head.image_query, query_level, token_mask)?;
    projection_similarity(g, pooled, qbar)
}

/// One N x N batch table: entry (i,j) scores image i against query j.
pub struct SimilarityTable {
    pub level: usize,
    pub granularity: Granularity,
    pub values: Var,
}

fn select_valid_rows(g: &mut Graph, x: Var, mask: &[bool]) -> Result<Var> {
    if mask.iter().all(|&m| m) {
        return Ok(x);
    }
    let mut rows = Vec::new();
    for (i, &keep) in mask.iter().enumerate() {
        if keep {
            rows.push(g.slice_rows(x, i, 1)?);
        }
    }
    if rows.is_empty() {
        return Err(HslError::AllMasked {
            op: "select_valid_rows",
            row: 0,
        });
    }
    g.concat_rows(&rows)
}

fn normalize_visual(g: &mut Graph, x: Var) -> Result<Var> {
    g.l2_normalize_rows(x).map_err(|e| match e {
        HslError::NonFinite { .. } => HslError::ZeroNormVisual,
        other => other,
    })
}

/// All-pairs similarity tables for every (level, granularity).
///
/// Because the projection similarity is linear in the query argument, the
/// object-granularity table factorizes: the mean over unit-normalized
/// projected objects forms one row per image, and the table is a single
/// matrix product against the stacked query projections. Entry (i,j) agrees
/// with the pairwise functions up to summation order.
pub fn batch_similarity_tables(
    g: &mut Graph,
    store: &ParamStore,
    heads: &[GranularityHead],
    image_levels: &[Vec<Var>],
    image_masks: &[Vec<bool>],
    query_levels: &[Vec<Var>],
    query_masks: &[Vec<bool>],
) -> Result<Vec<SimilarityTable>> {
    let n = image_levels.len();
    if n == 0 || query_levels.len() != n || image_masks.len() != n || query_masks.len() != n {
        return Err(HslError::ShapeMismatch {
            op: "batch_similarity_tables",
            detail: format!(
                "aligned batch required: {} images, {} queries",
                n,
                query_levels.len()
            ),
        });
    }
    let mut tables = Vec::with_capacity(2 * heads.len());
    for (level_idx, head) in heads.iter().enumerate() {
        let mut object_rows = Vec::with_capacity(n);
        let mut image_rows = Vec::with_capacity(n);
        for i in 0..n {
            let image_level = image_levels[i][level_idx];
            let projected = head.object_visual.apply(g, store, image_level)?;
            let valid = select_valid_rows(g, projected, &image_masks[i])?;
            let unit = normalize_visual(g, valid)?;
            object_rows.push(g.mean_axis0(unit, None)?);
            let pooled = attention_pool(g, store, head, image_level, &image_masks[i])?;
            image_rows.push(normalize_visual(g, pooled)?);
        }
        let mut q1_rows = Vec::with_capacity(n);
        let mut q2_rows = Vec::with_capacity(n);
        for j in 0..n {
            let query_level = query_levels[j][level_idx];
            q1_rows.push(pooled_query(g, store, &head.object_query, query_level, &query_masks[j])?);
            q2_rows.push(pooled_query(g, store, &head.image_query, query_level, &query_masks[j])?);
        }
        let u = g.concat_rows(&object_rows)?;
        let q1 = g.concat_rows(&q1_rows)?;
        let q1t = g.transpose(q1)?;
        let object_table = g.matmul(u, q1t)?;
        tables.push(SimilarityTable {
            level: head.level,
            granularity: Granularity::Object,
            values: object_table,
        });

        let vhat = g.concat_rows(&image_rows)?;
        let q2 = g.concat_rows(&q2_rows)?;
        let q2t = g.transpose(q2)?;
        let image_table = g.matmul(vhat, q2t)?;
        tables.push(SimilarityTable {
            level: head.level,
            granularity: Granularity::Image,
            values: image_table,
        });
    }
    Ok(tables)
}
