//! Data ingestion: object features, query text, relevance labels, vocabulary
//! construction, and the synthetic dataset generator used for desk-scale
//! experiments.
//!
//! File formats (UTF-8, tab-separated, floats printed at round-trip precision):
//!   features.tsv   image_id <TAB> n <TAB> comma-joined row-major floats
//!   queries.tsv    query_id <TAB> text
//!   relevance.tsv  query_id <TAB> image_id <TAB> grade
//! A dataset directory holds features.tsv, queries.tsv, train_pairs.tsv
//! (relevance format, grade 1 rows) and eval_relevance.tsv, plus manifest.txt.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{HslError, Result};
use crate::tensor::Tensor;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// One image's detected-region feature matrix (n x object_dim).
#[derive(Clone, Debug)]
pub struct ObjectFeatureSet {
    pub image_id: String,
    pub features: Tensor,
}

impl ObjectFeatureSet {
    pub fn object_count(&self) -> usize {
        self.features.rows()
    }
}

/// One query's token ids after lowercasing / unk-mapping / truncation.
#[derive(Clone, Debug)]
pub struct TokenSequence {
    pub query_id: String,
    pub ids: Vec<usize>,
}

/// Token -> id map with reserved pad and unk ids.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    tokens: Vec<String>,
    lookup: BTreeMap<String, usize>,
    pub min_count: usize,
}

/// Lowercase, split on whitespace, strip punctuation from token edges.
/// Tokens that are pure punctuation disappear.
pub fn split_tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter_map(|raw| {
            let t = raw
                .trim_matches(|c: char| c.is_ascii_punctuation())
                .to_lowercase();
            if t.is_empty() {
                None
            } else {
                Some(t)
            }
        })
        .collect()
}

impl Vocabulary {
    /// Count tokens over the corpus and keep those occurring at least
    /// `min_count` times. Ids are assigned by (count desc, token asc) after
    /// the two reserved ids, so construction is deterministic.
    pub fn build<I, S>(corpus: I, min_count: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        let mut saw_any = false;
        for text in corpus {
            for tok in split_tokens(text.as_ref()) {
                saw_any = true;
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        if !saw_any {
            return Err(HslError::Vocab("empty corpus".into()));
        }
        let mut retained: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count)
            .collect();
        retained.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        tokens.extend(retained.into_iter().map(|(t, _)| t));
        Ok(Vocabulary::from_tokens(tokens, min_count))
    }

    /// Rebuild from an ordered token list (checkpoint loading). The first two
    /// entries must be the reserved pad and unk tokens.
    pub fn from_tokens(tokens: Vec<String>, min_count: usize) -> Self {
        let lookup = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary {
            tokens,
            lookup,
            min_count,
        }
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.lookup.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.lookup.contains_key(token)
    }
}

/// Lowercase, tokenize, map through the vocabulary and truncate.
pub fn tokenize(
    query_id: &str,
    text: &str,
    vocab: &Vocabulary,
    max_tokens: usize,
) -> Result<TokenSequence> {
    let words = split_tokens(text);
    if words.is_empty() {
        return Err(HslError::Data(format!(
            "query {query_id:?} is empty after tokenization"
        )));
    }
    let ids = words
        .iter()
        .take(max_tokens)
        .map(|w| vocab.id(w))
        .collect();
    Ok(TokenSequence {
        query_id: query_id.to_string(),
        ids,
    })
}

// ---- TSV formats -------------------------------------------------------------

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> HslError {
    HslError::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

/// Load `image_id \t n \t floats` rows. When `expected_dim` is absent the
/// feature width is inferred from the first row and enforced on the rest.
pub fn load_features(
    path: &Path,
    expected_dim: Option<usize>,
) -> Result<BTreeMap<String, ObjectFeatureSet>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = BTreeMap::new();
    let mut dim = expected_dim;
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let mut parts = raw.split('\t');
        let (Some(image_id), Some(count), Some(values)) = (parts.next(), parts.next(), parts.next())
        else {
            return Err(parse_err(path, lineno, "expected image_id<TAB>n<TAB>floats"));
        };
        let n: usize = count
            .parse()
            .map_err(|_| parse_err(path, lineno, format!("bad object count {count:?}")))?;
        if n == 0 {
            return Err(parse_err(path, lineno, "object count must be >= 1"));
        }
        let floats: Vec<f64> = values
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| parse_err(path, lineno, format!("bad float {v:?}")))
            })
            .collect::<Result<_>>()?;
        let d = match dim {
            Some(d) => d,
            None => {
                if floats.len() % n != 0 {
                    return Err(parse_err(
                        path,
                        lineno,
                        format!("{} floats not divisible by {n} objects", floats.len()),
                    ));
                }
                let d = floats.len() / n;
                dim = Some(d);
                d
            }
        };
        if floats.len() != n * d {
            return Err(parse_err(
                path,
                lineno,
                format!("expected {n}x{d}={} floats, got {}", n * d, floats.len()),
            ));
        }
        let set = ObjectFeatureSet {
            image_id: image_id.to_string(),
            features: Tensor::new(vec![n, d], floats)?,
        };
        match out.entry(image_id.to_string()) {
            Entry::Vacant(e) => {
                e.insert(set);
            }
            Entry::Occupied(_) => {
                return Err(parse_err(path, lineno, format!("duplicate image_id {image_id:?}")));
            }
        }
    }
    if out.is_empty() {
        return Err(HslError::Data(format!("no feature rows in {}", path.display())));
    }
    Ok(out)
}

pub fn save_features(path: &Path, sets: &BTreeMap<String, ObjectFeatureSet>) -> Result<()> {
    let mut s = String::new();
    for set in sets.values() {
        let joined = set
            .features
            .data()
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",");
        writeln!(s, "{}\t{}\t{}", set.image_id, set.object_count(), joined)
            .expect("string writes cannot fail");
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn load_queries(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let Some((query_id, body)) = raw.split_once('\t') else {
            return Err(parse_err(path, lineno, "expected query_id<TAB>text"));
        };
        if out.insert(query_id.to_string(), body.to_string()).is_some() {
            return Err(parse_err(path, lineno, format!("duplicate query_id {query_id:?}")));
        }
    }
    if out.is_empty() {
        return Err(HslError::Data(format!("no queries in {}", path.display())));
    }
    Ok(out)
}

pub fn save_queries(path: &Path, queries: &BTreeMap<String, String>) -> Result<()> {
    let mut s = String::new();
    for (id, text) in queries {
        writeln!(s, "{id}\t{text}").expect("string writes cannot fail");
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Relevance rows in file order: (query_id, image_id, grade).
pub fn load_relevance(path: &Path) -> Result<Vec<(String, String, f64)>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = raw.split('\t').collect();
        if parts.len() != 3 {
            return Err(parse_err(path, lineno, "expected query_id<TAB>image_id<TAB>grade"));
        }
        let grade: f64 = parts[2]
            .parse()
            .map_err(|_| parse_err(path, lineno, format!("bad grade {:?}", parts[2])))?;
        out.push((parts[0].to_string(), parts[1].to_string(), grade));
    }
    Ok(out)
}

pub fn save_relevance(path: &Path, rows: &[(String, String, f64)]) -> Result<()> {
    let mut s = String::new();
    for (q, i, g) in rows {
        writeln!(s, "{q}\t{i}\t{g}").expect("string writes cannot fail");
    }
    std::fs::write(path, s)?;
    Ok(())
}

// ---- dataset ------------------------------------------------------------------

/// One evaluation query with its graded candidate pool.
#[derive(Clone, Debug)]
pub struct EvalQuery {
    pub query_id: String,
    /// (image_id, grade); pool membership is defined by these rows.
    pub pool: Vec<(String, f64)>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub features: BTreeMap<String, ObjectFeatureSet>,
    pub queries: BTreeMap<String, String>,
    /// Relevant (query_id, image_id) pairs for training.
    pub train_pairs: Vec<(String, String)>,
    pub eval: Vec<EvalQuery>,
    pub object_dim: usize,
}

impl Dataset {
    /// Every id referenced by pairs and pools must resolve.
    pub fn validate(&self) -> Result<()> {
        for (q, i) in &self.train_pairs {
            if !self.queries.contains_key(q) {
                return Err(HslError::Data(format!("train pair references unknown query {q:?}")));
            }
            if !self.features.contains_key(i) {
                return Err(HslError::Data(format!("train pair references unknown image {i:?}")));
            }
        }
        for eq in &self.eval {
            if !self.queries.contains_key(&eq.query_id) {
                return Err(HslError::Data(format!(
                    "eval pool references unknown query {:?}",
                    eq.query_id
                )));
            }
            for (i, grade) in &eq.pool {
                if !self.features.contains_key(i) {
                    return Err(HslError::Data(format!("eval pool references unknown image {i:?}")));
                }
                if *grade < 0.0 {
                    return Err(HslError::Data(format!(
                        "negative relevance grade for ({:?}, {i:?})",
                        eq.query_id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Training-query texts, in pair order (the vocabulary corpus).
    pub fn train_texts(&self) -> Vec<&str> {
        self.train_pairs
            .iter()
            .filter_map(|(q, _)| self.queries.get(q).map(|s| s.as_str()))
            .collect()
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        save_features(&dir.join("features.tsv"), &self.features)?;
        save_queries(&dir.join("queries.tsv"), &self.queries)?;
        let train_rows: Vec<(String, String, f64)> = self
            .train_pairs
            .iter()
            .map(|(q, i)| (q.clone(), i.clone(), 1.0))
            .collect();
        save_relevance(&dir.join("train_pairs.tsv"), &train_rows)?;
        let mut eval_rows = Vec::new();
        for eq in &self.eval {
            for (i, g) in &eq.pool {
                eval_rows.push((eq.query_id.clone(), i.clone(), *g));
            }
        }
        save_relevance(&dir.join("eval_relevance.tsv"), &eval_rows)?;
        let manifest = format!(
            "object_dim={}\nimages={}\nqueries={}\ntrain_pairs={}\neval_queries={}\n",
            self.object_dim,
            self.features.len(),
            self.queries.len(),
            self.train_pairs.len(),
            self.eval.len()
        );
        std::fs::write(dir.join("manifest.txt"), manifest)?;
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Dataset> {
        let features = load_features(&dir.join("features.tsv"), None)?;
        let object_dim = features
            .values()
            .next()
            .map(|s| s.features.cols())
            .unwrap_or(0);
        let queries = load_queries(&dir.join("queries.tsv"))?;
        let train_rows = load_relevance(&dir.join("train_pairs.tsv"))?;
        let train_pairs = train_rows
            .into_iter()
            .filter(|(_, _, g)| *g > 0.0)
            .map(|(q, i, _)| (q, i))
            .collect();
        let eval_rows = load_relevance(&dir.join("eval_relevance.tsv"))?;
        let mut pools: BTreeMap<String, Vec<(String, f64)>> = BTreeMap::new();
        for (q, i, g) in eval_rows {
            pools.entry(q).or_default().push((i, g));
        }
        let eval = pools
            .into_iter()
            .map(|(query_id, pool)| EvalQuery { query_id, pool })
            .collect();
        let ds = Dataset {
            features,
            queries,
            train_pairs,
            eval,
            object_dim,
        };
        ds.validate()?;
        Ok(ds)
    }
}

// ---- synthetic generation -------------------------------------------------------

#[derive(Clone, Debug)]
pub struct SyntheticConfig {
    /// Latent classes; each has its own feature direction and token set.
    pub classes: usize,
    pub pairs_per_class: usize,
    /// Pairs per class held out of training and used as the eval pool.
    pub holdout_per_class: usize,
    pub objects_per_image: usize,
    pub tokens_per_query: usize,
    pub object_dim: usize,
    /// Size of the synthetic token universe.
    pub vocab_size: usize,
    pub tokens_per_class: usize,
    /// Gaussian noise applied per object coordinate.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            classes: 8,
            pairs_per_class: 25,
            holdout_per_class: 5,
            objects_per_image: 4,
            tokens_per_query: 6,
            object_dim: 16,
            vocab_size: 48,
            tokens_per_class: 6,
            noise: 0.1,
            seed: 7,
        }
    }
}

/// Generated dataset plus the ground truth behind it.
#[derive(Clone, Debug)]
pub struct SyntheticOutput {
    pub dataset: Dataset,
    pub prototypes: Vec<Vec<f64>>,
    pub image_class: BTreeMap<String, usize>,
    pub query_class: BTreeMap<String, usize>,
}

fn gaussian(rng: &mut ChaCha20Rng) -> f64 {
    // Box-Muller from two uniforms.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Unit-norm class prototypes, orthonormalized when the dimension allows it.
fn make_prototypes(rng: &mut ChaCha20Rng, classes: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut protos: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dim).map(|_| gaussian(rng)).collect())
        .collect();
    if classes <= dim {
        for c in 0..classes {
            for prev in 0..c {
                let dot: f64 = protos[c].iter().zip(&protos[prev]).map(|(a, b)| a * b).sum();
                let prev_row = protos[prev].clone();
                for (v, p) in protos[c].iter_mut().zip(prev_row) {
                    *v -= dot * p;
                }
            }
            let norm = protos[c].iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in &mut protos[c] {
                *v /= norm;
            }
        }
    } else {
        for p in &mut protos {
            let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in p.iter_mut() {
                *v /= norm;
            }
        }
    }
    protos
}

/// Build a class-structured dataset: images are noisy copies of a class
/// prototype, queries draw tokens from disjoint per-class token sets, and an
/// image is relevant to a query exactly when their classes match.
pub fn gen_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticOutput> {
    if cfg.classes < 2 {
        return Err(HslError::Config("synthetic generator needs at least 2 classes".into()));
    }
    if cfg.vocab_size < cfg.classes * cfg.tokens_per_class {
        return Err(HslError::Config(format!(
            "vocab_size {} cannot host {} classes x {} tokens",
            cfg.vocab_size, cfg.classes, cfg.tokens_per_class
        )));
    }
    if cfg.holdout_per_class >= cfg.pairs_per_class {
        return Err(HslError::Config(
            "holdout_per_class must leave at least one training pair per class".into(),
        ));
    }
    if cfg.objects_per_image == 0 || cfg.tokens_per_query == 0 || cfg.object_dim == 0 {
        return Err(HslError::Config("synthetic sizes must be >= 1".into()));
    }

    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let prototypes = make_prototypes(&mut rng, cfg.classes, cfg.object_dim);
    let class_tokens: Vec<Vec<String>> = (0..cfg.classes)
        .map(|c| {
            (0..cfg.tokens_per_class)
                .map(|t| format!("w{:03}", c * cfg.tokens_per_class + t))
                .collect()
        })
        .collect();

    let mut features = BTreeMap::new();
    let mut queries = BTreeMap::new();
    let mut train_pairs = Vec::new();
    let mut image_class = BTreeMap::new();
    let mut query_class = BTreeMap::new();
    let mut eval_images: Vec<(String, usize)> = Vec::new();
    let mut eval_queries: Vec<(String, usize)> = Vec::new();

    for c in 0..cfg.classes {
        for p in 0..cfg.pairs_per_class {
            let image_id = format!("img_c{c}_{p:03}");
            let query_id = format!("qry_c{c}_{p:03}");
            let mut data = Vec::with_capacity(cfg.objects_per_image * cfg.object_dim);
            for _ in 0..cfg.objects_per_image {
                for d in 0..cfg.object_dim {
                    data.push(prototypes[c][d] + cfg.noise * gaussian(&mut rng));
                }
            }
            features.insert(
                image_id.clone(),
                ObjectFeatureSet {
                    image_id: image_id.clone(),
                    features: Tensor::new(vec![cfg.objects_per_image, cfg.object_dim], data)?,
                },
            );
            let text = (0..cfg.tokens_per_query)
                .map(|_| class_tokens[c][rng.gen_range(0..cfg.tokens_per_class)].clone())
                .collect::<Vec<_>>()
                .join(" ");
            queries.insert(query_id.clone(), text);
            image_class.insert(image_id.clone(), c);
            query_class.insert(query_id.clone(), c);

            if p < cfg.pairs_per_class - cfg.holdout_per_class {
                train_pairs.push((query_id, image_id));
            } else {
                eval_images.push((image_id, c));
                eval_queries.push((query_id, c));
            }
        }
    }

    let eval = eval_queries
        .iter()
        .map(|(query_id, qc)| EvalQuery {
            query_id: query_id.clone(),
            pool: eval_images
                .iter()
                .map(|(image_id, ic)| (image_id.clone(), if ic == qc { 1.0 } else { 0.0 }))
                .collect(),
        })
        .collect();

    let dataset = Dataset {
        features,
        queries,
        train_pairs,
        eval,
        object_dim: cfg.object_dim,
    };
    dataset.validate()?;
    Ok(SyntheticOutput {
        dataset,
        prototypes,
        image_class,
        query_class,
    })
}
