//! Inference-time scoring, ranking, the nDCG@k metric, and the
//! level x granularity ablation harness.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::config::{ModelConfig, TrainConfig};
use crate::data::{tokenize, Dataset, ObjectFeatureSet, Vocabulary};
use crate::error::{HslError, Result};
use crate::graph::{Graph, Var};
use crate::model::HslModel;
use crate::params::ParamStore;
use crate::similarity::{image_granularity_sim, object_granularity_sim, Granularity};
use crate::tensor::Tensor;
use crate::training::{train, TrainResult};

/// A restriction of the hierarchical score to a subset of levels and
/// granularities. The full spec reproduces the complete score.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct AblationSpec {
    pub levels: BTreeSet<usize>,
    pub granularities: BTreeSet<Granularity>,
}

impl AblationSpec {
    pub fn full(level_count: usize) -> Self {
        AblationSpec {
            levels: (1..=level_count).collect(),
            granularities: BTreeSet::from([Granularity::Object, Granularity::Image]),
        }
    }

    pub fn new(levels: &[usize], granularities: &[Granularity]) -> Self {
        AblationSpec {
            levels: levels.iter().copied().collect(),
            granularities: granularities.iter().copied().collect(),
        }
    }

    pub fn validate(&self, level_count: usize) -> Result<()> {
        if self.levels.is_empty() || self.granularities.is_empty() {
            return Err(HslError::Eval("ablation spec must enable at least one level and granularity".into()));
        }
        if let Some(&bad) = self.levels.iter().find(|&&l| l == 0 || l > level_count) {
            return Err(HslError::Eval(format!(
                "ablation spec references level {bad} of a {level_count}-level model"
            )));
        }
        Ok(())
    }

    pub fn levels_label(&self) -> String {
        self.levels
            .iter()
            .map(|l| l.to_string())
            .collect::<Vec<_>>()
            .join("+")
    }

    pub fn granularities_label(&self) -> String {
        self.granularities
            .iter()
            .map(|g| g.to_string())
            .collect::<Vec<_>>()
            .join("+")
    }

    pub fn label(&self) -> String {
        format!("L{}/{}", self.levels_label(), self.granularities_label())
    }

    /// The ablation grid: every non-empty combination of
    /// {each single level, all levels} x {object, image, both}.
    /// For a 2-level model this is exactly the 3x3 table.
    pub fn grid(level_count: usize) -> Vec<AblationSpec> {
        let mut level_sets: Vec<Vec<usize>> = (1..=level_count).map(|l| vec![l]).collect();
        level_sets.push((1..=level_count).collect());
        let gran_sets: Vec<Vec<Granularity>> = vec![
            vec![Granularity::Object],
            vec![Granularity::Image],
            vec![Granularity::Object, Granularity::Image],
        ];
        let mut out = Vec::new();
        for levels in &level_sets {
            for grans in &gran_sets {
                let spec = AblationSpec::new(levels, grans);
                if !out.contains(&spec) {
                    out.push(spec);
                }
            }
        }
        out
    }
}

/// Weighted hierarchical score of one already-encoded pair, restricted to the
/// spec: sum over enabled levels of weight_l * (enabled granularity scores).
#[allow(clippy::too_many_arguments)]
fn score_from_levels(
    g: &mut Graph,
    store: &ParamStore,
    model: &HslModel,
    image_levels: &[Var],
    query_levels: &[Var],
    object_mask: &[bool],
    token_mask: &[bool],
    spec: &AblationSpec,
) -> Result<f64> {
    let mut score = 0.0;
    for head in &model.heads {
        if !spec.levels.contains(&head.level) {
            continue;
        }
        let weight = model.cfg.level_weights[head.level - 1];
        let image_level = image_levels[head.level - 1];
        let query_level = query_levels[head.level - 1];
        if spec.granularities.contains(&Granularity::Object) {
            let s = object_granularity_sim(g, store, head, image_level, query_level, object_mask, token_mask)?;
            score += weight * g.item(s);
        }
        if spec.granularities.contains(&Granularity::Image) {
            let s = image_granularity_sim(g, store, head, image_level, query_level, object_mask, token_mask)?;
            score += weight * g.item(s);
        }
    }
    Ok(score)
}

/// Encode one (image, query) pair from raw inputs and score it under the spec.
pub fn hierarchical_score(
    model: &HslModel,
    store: &ParamStore,
    features: &Tensor,
    token_ids: &[usize],
    spec: &AblationSpec,
) -> Result<f64> {
    spec.validate(model.cfg.levels)?;
    let mut g = Graph::new();
    let object_mask = vec![true; features.rows()];
    let token_mask = vec![true; token_ids.len()];
    let image_levels = model.encode_image(&mut g, store, features, &object_mask)?;
    let query_levels = model.encode_text(&mut g, store, token_ids, &token_mask)?;
    score_from_levels(
        &mut g,
        store,
        model,
        &image_levels,
        &query_levels,
        &object_mask,
        &token_mask,
        spec,
    )
}

/// Candidates in descending score order; ties break on ascending image id.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedList {
    pub query_id: String,
    pub entries: Vec<(String, f64)>,
}

impl RankedList {
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for (rank, (image_id, score)) in self.entries.iter().enumerate() {
            writeln!(s, "{}\t{}\t{}\t{}", self.query_id, rank + 1, image_id, score)
                .expect("string writes cannot fail");
        }
        s
    }
}

/// Rank a candidate pool for one query. The query is encoded once; every
/// candidate is scored with the same pairwise functions used at training time.
pub fn rank_candidates(
    model: &HslModel,
    store: &ParamStore,
    vocab: &Vocabulary,
    query_id: &str,
    query_text: &str,
    pool: &[&ObjectFeatureSet],
    spec: &AblationSpec,
) -> Result<RankedList> {
    spec.validate(model.cfg.levels)?;
    if pool.is_empty() {
        return Err(HslError::Eval(format!("empty candidate pool for query {query_id:?}")));
    }
    let seq = tokenize(query_id, query_text, vocab, model.cfg.max_tokens)?;
    let token_mask = vec![true; seq.ids.len()];
    let mut g = Graph::new();
    let query_levels = model.encode_text(&mut g, store, &seq.ids, &token_mask)?;

    let mut entries = Vec::with_capacity(pool.len());
    for set in pool {
        let object_mask = vec![true; set.object_count()];
        let image_levels = model.encode_image(&mut g, store, &set.features, &object_mask)?;
        let score = score_from_levels(
            &mut g,
            store,
            model,
            &image_levels,
            &query_levels,
            &object_mask,
            &token_mask,
            spec,
        )?;
        entries.push((set.image_id.clone(), score));
    }
    entries.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(RankedList {
        query_id: query_id.to_string(),
        entries,
    })
}

/// nDCG@k with linear gain: DCG = sum_i rel_i / log2(i+1) over the ranked
/// order, normalized by the ideal DCG of the pool's grades. Pools without a
/// positive grade score 0.
pub fn ndcg_at_k(ranked: &RankedList, grades: &BTreeMap<String, f64>, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(HslError::Eval("ndcg@k requires k >= 1".into()));
    }
    if let Some((id, &g)) = grades.iter().find(|(_, &g)| g < 0.0) {
        let _ = g;
        return Err(HslError::Eval(format!("negative relevance grade for image {id:?}")));
    }
    let gain_at = |rank: usize, rel: f64| rel / ((rank + 2) as f64).log2();
    let dcg: f64 = ranked
        .entries
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, (id, _))| gain_at(i, grades.get(id).copied().unwrap_or(0.0)))
        .sum();
    let mut ideal: Vec<f64> = grades.values().copied().collect();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let idcg: f64 = ideal.iter().take(k).enumerate().map(|(i, &rel)| gain_at(i, rel)).sum();
    if idcg == 0.0 {
        return Ok(0.0);
    }
    Ok(dcg / idcg)
}

/// Mean nDCG@k over every evaluation query of the dataset.
pub fn mean_ndcg(
    model: &HslModel,
    store: &ParamStore,
    vocab: &Vocabulary,
    dataset: &Dataset,
    spec: &AblationSpec,
    k: usize,
) -> Result<f64> {
    if dataset.eval.is_empty() {
        return Err(HslError::Eval("dataset has no evaluation queries".into()));
    }
    let mut total = 0.0;
    for eq in &dataset.eval {
        let text = dataset
            .queries
            .get(&eq.query_id)
            .ok_or_else(|| HslError::Eval(format!("unknown query {:?}", eq.query_id)))?;
        let pool: Vec<&ObjectFeatureSet> = eq
            .pool
            .iter()
            .map(|(id, _)| {
                dataset
                    .features
                    .get(id)
                    .ok_or_else(|| HslError::Eval(format!("unknown image {id:?} in pool")))
            })
            .collect::<Result<_>>()?;
        let ranked = rank_candidates(model, store, vocab, &eq.query_id, text, &pool, spec)?;
        let grades: BTreeMap<String, f64> = eq.pool.iter().cloned().collect();
        total += ndcg_at_k(&ranked, &grades, k)?;
    }
    Ok(total / dataset.eval.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationMode {
    /// Retrain the model with the restricted objective for each spec.
    Retrain,
    /// Train the full model once and mask components at inference.
    Mask,
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub spec: AblationSpec,
    pub k: usize,
    pub ndcg: f64,
}

pub fn ablation_rows_to_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("spec,levels,granularities,k,ndcg\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{}",
            r.spec.label(),
            r.spec.levels_label(),
            r.spec.granularities_label(),
            r.k,
            r.ndcg
        )
        .expect("string writes cannot fail");
    }
    s
}

/// Train/evaluate every spec at every cutoff. Duplicate specs are dropped,
/// keeping their first occurrence.
pub fn run_ablation(
    dataset: &Dataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    specs: &[AblationSpec],
    mode: AblationMode,
    ks: &[usize],
    checkpoint_dir: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    let mut unique: Vec<AblationSpec> = Vec::new();
    for spec in specs {
        spec.validate(model_cfg.levels)?;
        if !unique.contains(spec) {
            unique.push(spec.clone());
        }
    }
    let full_result = match mode {
        AblationMode::Mask => Some(train(dataset, model_cfg, train_cfg, None, None)?),
        AblationMode::Retrain => None,
    };

    let mut rows = Vec::new();
    for (idx, spec) in unique.iter().enumerate() {
        let owned;
        let result: &TrainResult = match mode {
            AblationMode::Mask => full_result.as_ref().expect("trained above"),
            AblationMode::Retrain => {
                let path = checkpoint_dir.map(|d| d.join(format!("ablation_{idx}.hsl")));
                owned = train(dataset, model_cfg, train_cfg, Some(spec), path.as_deref())?;
                &owned
            }
        };
        for &k in ks {
            let ndcg = mean_ndcg(&result.model, &result.store, &result.vocab, dataset, spec, k)?;
            rows.push(AblationRow {
                spec: spec.clone(),
                k,
                ndcg,
            });
        }
    }
    Ok(rows)
}
