//! The optimization loop: Adam with per-epoch learning-rate decay, seeded
//! batch shuffling, per-step loss records, and self-describing checkpoints.

use std::io::Read as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::config::{apply_kv, parse_kv_text, render_kv, ModelConfig, TrainConfig};
use crate::data::{tokenize, Dataset, Vocabulary, PAD_ID};
use crate::error::{HslError, Result};
use crate::evaluation::AblationSpec;
use crate::graph::{Gradients, Graph};
use crate::model::HslModel;
use crate::objective::{total_loss, LossBreakdown};
use crate::params::ParamStore;
use crate::similarity::Granularity;
use crate::tensor::Tensor;

/// lr(e) = lr0 * decay^e.
pub fn lr_at_epoch(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr * cfg.lr_decay.powi(epoch as i32)
}

/// Adam moment estimates, aligned with the parameter store.
pub struct AdamState {
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step_count: usize,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let first = store.iter().map(|(_, e)| vec![0.0; e.data.len()]).collect();
        let second = store.iter().map(|(_, e)| vec![0.0; e.data.len()]).collect();
        AdamState {
            first,
            second,
            step_count: 0,
        }
    }

    /// Standard bias-corrected update. Parameters absent from `grads`
    /// (never touched by the step's graph) are left unchanged.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &Gradients,
        lr: f64,
        cfg: &TrainConfig,
    ) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (&pid, grad) in grads.iter() {
            let idx = pid.0;
            if grad.data().len() != self.first[idx].len() {
                return Err(HslError::ShapeMismatch {
                    op: "adam_step",
                    detail: format!(
                        "gradient for {} has {} entries, state has {}",
                        store.entry(pid).name,
                        grad.data().len(),
                        self.first[idx].len()
                    ),
                });
            }
            let m = &mut self.first[idx];
            let v = &mut self.second[idx];
            let data = store.data_mut(pid);
            for (i, &g) in grad.data().iter().enumerate() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= lr * mhat / (vhat.sqrt() + cfg.adam_eps);
            }
        }
        Ok(())
    }
}

/// One per-(level, granularity) loss record of one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    pub epoch: usize,
    pub step: usize,
    pub level: usize,
    pub granularity: Granularity,
    pub loss: f64,
}

pub fn loss_rows_to_csv(rows: &[LossRow]) -> String {
    let mut s = String::from("epoch,step,level,granularity,loss\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.step, r.level, r.granularity, r.loss
        ));
    }
    s
}

pub struct TrainResult {
    pub model: HslModel,
    pub store: ParamStore,
    pub vocab: Vocabulary,
    pub model_cfg: ModelConfig,
    pub train_cfg: TrainConfig,
    pub loss_rows: Vec<LossRow>,
    pub epochs_run: usize,
    pub rng: ChaCha20Rng,
}

/// Pre-tokenized training pair.
struct PreparedPair {
    features: Tensor,
    object_count: usize,
    ids: Vec<usize>,
}

fn prepare_pairs(dataset: &Dataset, cfg: &ModelConfig, vocab: &Vocabulary) -> Result<Vec<PreparedPair>> {
    let mut out = Vec::with_capacity(dataset.train_pairs.len());
    for (query_id, image_id) in &dataset.train_pairs {
        let set = dataset
            .features
            .get(image_id)
            .ok_or_else(|| HslError::Data(format!("unknown image {image_id:?}")))?;
        let n = set.object_count();
        if n > cfg.max_objects {
            return Err(HslError::Data(format!(
                "image {image_id:?} has {n} objects, max_objects is {}",
                cfg.max_objects
            )));
        }
        if set.features.cols() != cfg.object_dim {
            return Err(HslError::ShapeMismatch {
                op: "prepare_pairs",
                detail: format!(
                    "image {image_id:?} feature width {} vs object_dim {}",
                    set.features.cols(),
                    cfg.object_dim
                ),
            });
        }
        let text = dataset
            .queries
            .get(query_id)
            .ok_or_else(|| HslError::Data(format!("unknown query {query_id:?}")))?;
        let seq = tokenize(query_id, text, vocab, cfg.max_tokens)?;
        out.push(PreparedPair {
            features: set.features.clone(),
            object_count: n,
            ids: seq.ids,
        });
    }
    Ok(out)
}

/// Pad a batch to its own max object/token counts, with prefix-true masks.
fn assemble_batch(
    pairs: &[PreparedPair],
    chunk: &[usize],
    object_dim: usize,
) -> (Vec<(Tensor, Vec<bool>)>, Vec<(Vec<usize>, Vec<bool>)>) {
    let max_n = chunk.iter().map(|&i| pairs[i].object_count).max().unwrap_or(1);
    let max_m = chunk.iter().map(|&i| pairs[i].ids.len()).max().unwrap_or(1);
    let mut images = Vec::with_capacity(chunk.len());
    let mut queries = Vec::with_capacity(chunk.len());
    for &i in chunk {
        let pair = &pairs[i];
        let n = pair.object_count;
        let mut data = pair.features.data().to_vec();
        data.resize(max_n * object_dim, 0.0);
        let mut mask = vec![true; n];
        mask.resize(max_n, false);
        images.push((
            Tensor::new(vec![max_n, object_dim], data).expect("padded shape is consistent"),
            mask,
        ));

        let mut ids = pair.ids.clone();
        let m = ids.len();
        ids.resize(max_m, PAD_ID);
        let mut tmask = vec![true; m];
        tmask.resize(max_m, false);
        queries.push((ids, tmask));
    }
    (images, queries)
}

/// Train on the dataset's relevant pairs. `restriction` drops disabled
/// (level, granularity) loss components, which is how ablation retraining
/// works; `None` trains the full objective. A checkpoint is written to
/// `checkpoint_path` every `checkpoint_every` epochs and at the end.
pub fn train(
    dataset: &Dataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    restriction: Option<&AblationSpec>,
    checkpoint_path: Option<&Path>,
) -> Result<TrainResult> {
    train_cfg.validate()?;
    dataset.validate()?;
    if let Some(spec) = restriction {
        spec.validate(model_cfg.levels)?;
    }

    let vocab = Vocabulary::build(dataset.train_texts(), train_cfg.min_count)?;
    let mut cfg = model_cfg.clone();
    cfg.vocab_size = vocab.size();
    cfg.validate()?;

    let pairs = prepare_pairs(dataset, &cfg, &vocab)?;
    if pairs.len() < train_cfg.batch_size {
        return Err(HslError::Data(format!(
            "{} training pairs cannot fill one batch of {}",
            pairs.len(),
            train_cfg.batch_size
        )));
    }

    let mut rng = ChaCha20Rng::seed_from_u64(train_cfg.seed);
    let mut store = ParamStore::new();
    let model = HslModel::init(&cfg, &mut store, &mut rng)?;
    let mut adam = AdamState::new(&store);
    let mut loss_rows = Vec::new();

    let mut indices: Vec<usize> = (0..pairs.len()).collect();
    for epoch in 0..train_cfg.epochs {
        let lr = lr_at_epoch(epoch, train_cfg);
        indices.shuffle(&mut rng);
        // Partial trailing batches are dropped.
        for (step, chunk) in indices.chunks_exact(train_cfg.batch_size).enumerate() {
            let (images, queries) = assemble_batch(&pairs, chunk, cfg.object_dim);
            let breakdown =
                run_step(&model, &mut store, &mut adam, &cfg, train_cfg, restriction, lr, &images, &queries)
                    .map_err(|e| annotate_abort(e, epoch, step))?;
            for c in &breakdown.components {
                loss_rows.push(LossRow {
                    epoch,
                    step,
                    level: c.level,
                    granularity: c.granularity,
                    loss: c.value,
                });
            }
        }
        let last_epoch = epoch + 1 == train_cfg.epochs;
        if let Some(path) = checkpoint_path {
            if (epoch + 1) % train_cfg.checkpoint_every == 0 || last_epoch {
                save_checkpoint(path, &cfg, train_cfg, epoch + 1, &rng, &vocab, &store)?;
            }
        }
    }

    Ok(TrainResult {
        model,
        store,
        vocab,
        model_cfg: cfg,
        train_cfg: train_cfg.clone(),
        loss_rows,
        epochs_run: train_cfg.epochs,
        rng,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_step(
    model: &HslModel,
    store: &mut ParamStore,
    adam: &mut AdamState,
    cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    restriction: Option<&AblationSpec>,
    lr: f64,
    images: &[(Tensor, Vec<bool>)],
    queries: &[(Vec<usize>, Vec<bool>)],
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let mut tables = model.batch_tables(&mut g, store, images, queries)?;
    if let Some(spec) = restriction {
        tables.retain(|t| spec.levels.contains(&t.level) && spec.granularities.contains(&t.granularity));
    }
    let max_level = tables.iter().map(|t| t.level).max().unwrap_or(0);
    let (loss, breakdown) = total_loss(&mut g, &tables, &cfg.level_weights[..max_level])?;
    let grads = g.backward(loss, store)?;
    adam.step(store, &grads, lr, train_cfg)?;
    Ok(breakdown)
}

fn annotate_abort(e: HslError, epoch: usize, step: usize) -> HslError {
    match e {
        HslError::NonFinite { op } => HslError::TrainAbort {
            epoch,
            step,
            msg: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

// ---- checkpointing ---------------------------------------------------------------

const CHECKPOINT_MAGIC: &str = "HSL-CHECKPOINT-V1";

/// Everything needed to resume evaluation: configs, epoch, rng state,
/// vocabulary, and raw little-endian f64 parameter blocks.
pub struct Checkpoint {
    pub model_cfg: ModelConfig,
    pub train_cfg: TrainConfig,
    pub epoch: usize,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
    pub vocab: Vocabulary,
    pub params: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    /// Rebuild the model and store with exactly the saved values.
    pub fn rebuild(&self) -> Result<(HslModel, ParamStore, ChaCha20Rng)> {
        let mut throwaway = ChaCha20Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let model = HslModel::init(&self.model_cfg, &mut store, &mut throwaway)?;
        if store.len() != self.params.len() {
            return Err(HslError::Checkpoint(format!(
                "checkpoint has {} parameters, model defines {}",
                self.params.len(),
                store.len()
            )));
        }
        for (name, shape, data) in &self.params {
            let id = store.id_by_name(name).ok_or_else(|| {
                HslError::Checkpoint(format!("checkpoint parameter {name:?} not in model"))
            })?;
            let entry = store.entry(id);
            if &entry.shape != shape {
                return Err(HslError::Checkpoint(format!(
                    "parameter {name:?}: checkpoint shape {shape:?} vs model {:?}",
                    entry.shape
                )));
            }
            *store.data_mut(id) = data.clone();
        }
        let mut rng = ChaCha20Rng::from_seed(self.rng_seed);
        rng.set_word_pos(self.rng_word_pos);
        Ok((model, store, rng))
    }
}

pub fn save_checkpoint(
    path: &Path,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    epoch: usize,
    rng: &ChaCha20Rng,
    vocab: &Vocabulary,
    store: &ParamStore,
) -> Result<()> {
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(format!("epoch={epoch}\n").as_bytes());
    let seed_hex: String = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
    out.extend_from_slice(format!("rng_seed={seed_hex}\n").as_bytes());
    out.extend_from_slice(format!("rng_word_pos={}\n", rng.get_word_pos()).as_bytes());
    out.extend_from_slice(b"[config]\n");
    out.extend_from_slice(render_kv(model_cfg, train_cfg).as_bytes());
    out.extend_from_slice(b"[vocab]\n");
    out.extend_from_slice(format!("count={}\n", vocab.size()).as_bytes());
    for token in vocab.tokens() {
        out.extend_from_slice(token.as_bytes());
        out.push(b'\n');
    }
    out.extend_from_slice(b"[params]\n");
    out.extend_from_slice(format!("count={}\n", store.len()).as_bytes());
    for (_, entry) in store.iter() {
        let shape = entry
            .shape
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join(",");
        out.extend_from_slice(format!("{}\t{}\t{}\n", entry.name, shape, entry.data.len() * 8).as_bytes());
        for v in &entry.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(b'\n');
    }
    out.extend_from_slice(b"[end]\n");
    std::fs::write(path, out)?;
    Ok(())
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> ByteReader<'a> {
    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| HslError::Checkpoint(format!("{}: truncated", self.path)))?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end])
            .map_err(|_| HslError::Checkpoint(format!("{}: invalid UTF-8 header", self.path)))
    }

    fn raw(&mut self, len: usize) -> Result<&'a [u8]> {
        if self.pos + len > self.bytes.len() {
            return Err(HslError::Checkpoint(format!("{}: truncated block", self.path)));
        }
        let out = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }

    fn expect(&mut self, wanted: &str) -> Result<()> {
        let got = self.line()?;
        if got != wanted {
            return Err(HslError::Checkpoint(format!(
                "{}: expected {wanted:?}, found {got:?}",
                self.path
            )));
        }
        Ok(())
    }

    fn keyed(&mut self, key: &str) -> Result<&'a str> {
        let line = self.line()?;
        line.strip_prefix(key)
            .and_then(|rest| rest.strip_prefix('='))
            .ok_or_else(|| HslError::Checkpoint(format!("{}: expected {key}=..., found {line:?}", self.path)))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = ByteReader {
        bytes: &bytes,
        pos: 0,
        path: path.display().to_string(),
    };
    r.expect(CHECKPOINT_MAGIC)?;
    let epoch: usize = r
        .keyed("epoch")?
        .parse()
        .map_err(|_| HslError::Checkpoint("bad epoch".into()))?;
    let seed_hex = r.keyed("rng_seed")?;
    if seed_hex.len() != 64 {
        return Err(HslError::Checkpoint("rng seed must be 32 hex bytes".into()));
    }
    let mut rng_seed = [0u8; 32];
    for (i, chunk) in seed_hex.as_bytes().chunks(2).enumerate() {
        let s = std::str::from_utf8(chunk).expect("hex is ascii");
        rng_seed[i] =
            u8::from_str_radix(s, 16).map_err(|_| HslError::Checkpoint("bad rng seed hex".into()))?;
    }
    let rng_word_pos: u128 = r
        .keyed("rng_word_pos")?
        .parse()
        .map_err(|_| HslError::Checkpoint("bad rng word position".into()))?;

    r.expect("[config]")?;
    let mut config_text = String::new();
    loop {
        let line = r.line()?;
        if line == "[vocab]" {
            break;
        }
        config_text.push_str(line);
        config_text.push('\n');
    }
    let mut model_cfg = ModelConfig::default();
    let mut train_cfg = TrainConfig::default();
    let kv = parse_kv_text(&config_text, "checkpoint")?;
    apply_kv(&kv, &mut model_cfg, &mut train_cfg)?;

    let vocab_count: usize = r
        .keyed("count")?
        .parse()
        .map_err(|_| HslError::Checkpoint("bad vocab count".into()))?;
    let mut tokens = Vec::with_capacity(vocab_count);
    for _ in 0..vocab_count {
        tokens.push(r.line()?.to_string());
    }
    let vocab = Vocabulary::from_tokens(tokens, train_cfg.min_count);
    model_cfg.vocab_size = vocab.size();

    r.expect("[params]")?;
    let param_count: usize = r
        .keyed("count")?
        .parse()
        .map_err(|_| HslError::Checkpoint("bad param count".into()))?;
    let mut params = Vec::with_capacity(param_count);
    for _ in 0..param_count {
        let header = r.line()?;
        let parts: Vec<&str> = header.split('\t').collect();
        if parts.len() != 3 {
            return Err(HslError::Checkpoint(format!("bad parameter header {header:?}")));
        }
        let name = parts[0].to_string();
        let shape: Vec<usize> = parts[1]
            .split(',')
            .map(|d| {
                d.parse()
                    .map_err(|_| HslError::Checkpoint(format!("bad shape in {header:?}")))
            })
            .collect::<Result<_>>()?;
        let byte_len: usize = parts[2]
            .parse()
            .map_err(|_| HslError::Checkpoint(format!("bad byte count in {header:?}")))?;
        if byte_len % 8 != 0 {
            return Err(HslError::Checkpoint("parameter bytes not a multiple of 8".into()));
        }
        let raw = r.raw(byte_len)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunks are 8 bytes")))
            .collect();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(HslError::Checkpoint(format!(
                "parameter {name:?}: shape {shape:?} vs {} stored values",
                data.len()
            )));
        }
        r.expect("")?; // block separator
        params.push((name, shape, data));
    }
    r.expect("[end]")?;

    Ok(Checkpoint {
        model_cfg,
        train_cfg,
        epoch,
        rng_seed,
        rng_word_pos,
        vocab,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::EncoderKind;
    use crate::data::{gen_synthetic, SyntheticConfig};
    use tempfile::tempdir;

    #[test]
    fn lr_schedule_examples() {
        let cfg = TrainConfig {
            lr: 2e-4,
            lr_decay: 0.1,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at_epoch(0, &cfg), 2e-4);
        assert!((lr_at_epoch(1, &cfg) - 2e-5).abs() < 1e-18);
        let flat = TrainConfig {
            lr_decay: 1.0,
            ..cfg
        };
        assert_eq!(lr_at_epoch(7, &flat), 2e-4);
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters_unchanged() {
        let mut store = ParamStore::new();
        let id = store.add("w", vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let mut adam = AdamState::new(&store);
        // Build a zero gradient by backpropagating a loss that ignores w.
        let mut g = Graph::new();
        let _w = g.param(&store, id);
        let c = g.input(Tensor::scalar(5.0));
        let loss = g.mean_all(c).unwrap();
        let grads = g.backward(loss, &store).unwrap();
        adam.step(&mut store, &grads, 0.1, &TrainConfig::default()).unwrap();
        assert_eq!(store.entry(id).data, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn adam_first_step_matches_reference_update() {
        // From zero state with constant gradient g: m-hat = g, v-hat = g^2,
        // so the update is lr * g / (|g| + eps).
        let cfg = TrainConfig::default();
        let mut store = ParamStore::new();
        let id = store.add("w", vec![2], vec![0.0, 0.0]).unwrap();
        let mut adam = AdamState::new(&store);

        let grad_values = [0.3f64, -1.7];
        let mut g = Graph::new();
        let w = g.param(&store, id);
        let coeff = g.input(Tensor::new(vec![1, 2], grad_values.to_vec()).unwrap());
        let w_row = w; // shape (2) acts as a row
        let prod = g.mul(w_row, coeff).unwrap();
        let sum = g.mean_all(prod).unwrap();
        let loss = g.scale(sum, 2.0).unwrap(); // d loss / d w = grad_values
        let grads = g.backward(loss, &store).unwrap();
        adam.step(&mut store, &grads, 0.01, &cfg).unwrap();

        for (i, &gv) in grad_values.iter().enumerate() {
            let expect = -0.01 * gv / (gv.abs() + cfg.adam_eps);
            assert!(
                (store.entry(id).data[i] - expect).abs() < 1e-12,
                "param {i}: {} vs {expect}",
                store.entry(id).data[i]
            );
        }
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let cfg = TrainConfig::default();
        let mut store = ParamStore::new();
        let id = store.add("x", vec![1], vec![3.0]).unwrap();
        let mut adam = AdamState::new(&store);
        let value = |store: &ParamStore| store.entry(id).data[0];
        let loss_of = |x: f64| x * x;
        let start = loss_of(value(&store));
        for _ in 0..2 {
            let mut g = Graph::new();
            let x = g.param(&store, id);
            let sq = g.mul(x, x).unwrap();
            let loss = g.mean_all(sq).unwrap();
            let grads = g.backward(loss, &store).unwrap();
            adam.step(&mut store, &grads, 0.05, &cfg).unwrap();
        }
        assert!(loss_of(value(&store)) < start);
    }

    fn small_synth() -> Dataset {
        gen_synthetic(&SyntheticConfig {
            classes: 3,
            pairs_per_class: 6,
            holdout_per_class: 2,
            objects_per_image: 2,
            tokens_per_query: 3,
            object_dim: 6,
            vocab_size: 12,
            tokens_per_class: 4,
            noise: 0.05,
            seed: 11,
        })
        .unwrap()
        .dataset
    }

    fn small_cfgs(seed: u64) -> (ModelConfig, TrainConfig) {
        let model = ModelConfig {
            levels: 2,
            object_dim: 6,
            word_dim: 6,
            model_dim: 8,
            embed_dim: 8,
            encoder: EncoderKind::Transformer,
            heads: 2,
            image_sublayers: 1,
            text_sublayers: 1,
            max_objects: 4,
            max_tokens: 6,
            vocab_size: 0,
            level_weights: vec![0.5, 1.0],
        };
        let train = TrainConfig {
            lr: 1e-3,
            lr_decay: 0.95,
            epochs: 2,
            batch_size: 4,
            seed,
            min_count: 1,
            ..TrainConfig::default()
        };
        (model, train)
    }

    #[test]
    fn training_is_deterministic_under_seed() {
        let dataset = small_synth();
        let (model_cfg, train_cfg) = small_cfgs(21);
        let a = train(&dataset, &model_cfg, &train_cfg, None, None).unwrap();
        let b = train(&dataset, &model_cfg, &train_cfg, None, None).unwrap();
        assert_eq!(loss_rows_to_csv(&a.loss_rows), loss_rows_to_csv(&b.loss_rows));
        for (pid, entry) in a.store.iter() {
            assert_eq!(entry.data, b.store.entry(pid).data, "{}", entry.name);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_identical() {
        let dataset = small_synth();
        let (model_cfg, train_cfg) = small_cfgs(22);
        let dir = tempdir().unwrap();
        let path = dir.path().join("checkpoint.hsl");
        let result = train(&dataset, &model_cfg, &train_cfg, None, Some(&path)).unwrap();

        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.epoch, train_cfg.epochs);
        assert_eq!(loaded.vocab.tokens(), result.vocab.tokens());
        let (_, store, rng) = loaded.rebuild().unwrap();
        for (pid, entry) in result.store.iter() {
            let restored = &store.entry(store.id_by_name(&entry.name).unwrap()).data;
            assert_eq!(&entry.data, restored, "{}", entry.name);
            let _ = pid;
        }
        assert_eq!(rng.get_word_pos(), result.rng.get_word_pos());
        assert_eq!(rng.get_seed(), result.rng.get_seed());
    }

    #[test]
    fn restricted_training_freezes_disabled_heads() {
        use std::collections::BTreeSet;
        let dataset = small_synth();
        let (model_cfg, train_cfg) = small_cfgs(23);
        let spec = AblationSpec {
            levels: BTreeSet::from([2]),
            granularities: BTreeSet::from([Granularity::Object, Granularity::Image]),
        };

        // Reference init: same seed, no training.
        let vocab = Vocabulary::build(dataset.train_texts(), train_cfg.min_count).unwrap();
        let mut cfg = model_cfg.clone();
        cfg.vocab_size = vocab.size();
        let mut rng = ChaCha20Rng::seed_from_u64(train_cfg.seed);
        let mut init_store = ParamStore::new();
        HslModel::init(&cfg, &mut init_store, &mut rng).unwrap();

        let result = train(&dataset, &model_cfg, &train_cfg, Some(&spec), None).unwrap();
        for (_, entry) in result.store.iter() {
            let initial = &init_store
                .entry(init_store.id_by_name(&entry.name).unwrap())
                .data;
            if entry.name.starts_with("head.level1.") {
                assert_eq!(&entry.data, initial, "{} should be untouched", entry.name);
            }
        }
        // Level-2 heads must have moved.
        let moved = result.store.iter().any(|(_, e)| {
            e.name.starts_with("head.level2.")
                && &init_store
                    .entry(init_store.id_by_name(&e.name).unwrap())
                    .data
                    != &e.data
        });
        assert!(moved);
        // Only level-2 components are recorded.
        assert!(result.loss_rows.iter().all(|r| r.level == 2));
    }

    #[test]
    fn too_small_dataset_is_rejected() {
        let dataset = small_synth();
        let (model_cfg, mut train_cfg) = small_cfgs(1);
        train_cfg.batch_size = 10_000;
        assert!(train(&dataset, &model_cfg, &train_cfg, None, None).is_err());
    }
}
