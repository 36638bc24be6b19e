//! Multi-level input encoders.
//!
//! Each modality is a linear input projection followed by `levels` stacked
//! encoders; the output of every level is kept, not just the deepest one.
//! Object sets carry no positional signal, token sequences do (sinusoidal
//! encodings for the transformer, recurrence order for the bi-GRU).

use rand_chacha::ChaCha20Rng;

use crate::config::{EncoderKind, ModelConfig};
use crate::error::{HslError, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// An affine map applied per row: x (r, din) -> (r, dout).
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha20Rng,
        name: &str,
        din: usize,
        dout: usize,
    ) -> Result<Self> {
        Ok(Linear {
            w: store.xavier(&format!("{name}.w"), din, dout, rng)?,
            b: store.zeros(&format!("{name}.b"), vec![dout])?,
        })
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let xw = g.matmul(x, w)?;
        g.add_bias(xw, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn init(store: &mut ParamStore, name: &str, width: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.ones(&format!("{name}.gamma"), vec![width])?,
            beta: store.zeros(&format!("{name}.beta"), vec![width])?,
        })
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm_rows(x, gamma, beta, LAYER_NORM_EPS)
    }
}

/// Post-norm transformer sublayer: x + MHSA(x) -> norm -> + FFN -> norm.
/// The feed-forward inner width is 4x the model width with ReLU.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub norm_attn: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub norm_ffn: LayerNorm,
    pub heads: usize,
}

impl TransformerBlock {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha20Rng,
        name: &str,
        width: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(TransformerBlock {
            wq: Linear::init(store, rng, &format!("{name}.attn.q"), width, width)?,
            wk: Linear::init(store, rng, &format!("{name}.attn.k"), width, width)?,
            wv: Linear::init(store, rng, &format!("{name}.attn.v"), width, width)?,
            wo: Linear::init(store, rng, &format!("{name}.attn.out"), width, width)?,
            norm_attn: LayerNorm::init(store, &format!("{name}.norm_attn"), width)?,
            ffn_in: Linear::init(store, rng, &format!("{name}.ffn.in"), width, 4 * width)?,
            ffn_out: Linear::init(store, rng, &format!("{name}.ffn.out"), 4 * width, width)?,
            norm_ffn: LayerNorm::init(store, &format!("{name}.norm_ffn"), width)?,
            heads,
        })
    }

    /// Multi-head self-attention with the key mask applied inside softmax.
    fn attention(&self, g: &mut Graph, store: &ParamStore, x: Var, mask: &[bool]) -> Result<Var> {
        let width = g.value(x).cols();
        let head_dim = width / self.heads;
        let q = self.wq.apply(g, store, x)?;
        let k = self.wk.apply(g, store, x)?;
        let v = self.wv.apply(g, store, x)?;
        let mut merged = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * head_dim, head_dim)?;
            let kh = g.slice_cols(k, h * head_dim, head_dim)?;
            let vh = g.slice_cols(v, h * head_dim, head_dim)?;
            let kt = g.transpose(kh)?;
            let raw = g.matmul(qh, kt)?;
            let scores = g.scale(raw, 1.0 / (head_dim as f64).sqrt())?;
            let attn = g.softmax_rows(scores, Some(mask))?;
            merged.push(g.matmul(attn, vh)?);
        }
        let cat = g.concat_cols(&merged)?;
        self.wo.apply(g, store, cat)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mask: &[bool]) -> Result<Var> {
        let attn = self.attention(g, store, x, mask)?;
        let res1 = g.add(x, attn)?;
        let h = self.norm_attn.apply(g, store, res1)?;
        let inner = self.ffn_in.apply(g, store, h)?;
        let act = g.relu(inner)?;
        let ff = self.ffn_out.apply(g, store, act)?;
        let res2 = g.add(h, ff)?;
        self.norm_ffn.apply(g, store, res2)
    }
}

/// One direction of a gated recurrent unit layer.
#[derive(Clone, Debug)]
pub struct GruDirection {
    // Gate parameter triples: input map (din x h), state map (h x h), bias (h).
    pub reset_x: ParamId,
    pub reset_h: ParamId,
    pub reset_b: ParamId,
    pub update_x: ParamId,
    pub update_h: ParamId,
    pub update_b: ParamId,
    pub cand_x: ParamId,
    pub cand_h: ParamId,
    pub cand_b: ParamId,
    pub hidden: usize,
}

impl GruDirection {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha20Rng,
        name: &str,
        din: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(GruDirection {
            reset_x: store.xavier(&format!("{name}.reset.x"), din, hidden, rng)?,
            reset_h: store.xavier(&format!("{name}.reset.h"), hidden, hidden, rng)?,
            reset_b: store.zeros(&format!("{name}.reset.b"), vec![hidden])?,
            update_x: store.xavier(&format!("{name}.update.x"), din, hidden, rng)?,
            update_h: store.xavier(&format!("{name}.update.h"), hidden, hidden, rng)?,
            update_b: store.zeros(&format!("{name}.update.b"), vec![hidden])?,
            cand_x: store.xavier(&format!("{name}.cand.x"), din, hidden, rng)?,
            cand_h: store.xavier(&format!("{name}.cand.h"), hidden, hidden, rng)?,
            cand_b: store.zeros(&format!("{name}.cand.b"), vec![hidden])?,
            hidden,
        })
    }

    fn gate(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x_t: Var,
        h_state: Var,
        wx: ParamId,
        wh: ParamId,
        b: ParamId,
    ) -> Result<Var> {
        let wx = g.param(store, wx);
        let wh = g.param(store, wh);
        let b = g.param(store, b);
        let xs = g.matmul(x_t, wx)?;
        let hs = g.matmul(h_state, wh)?;
        let sum = g.add(xs, hs)?;
        g.add_bias(sum, b)
    }

    /// One recurrence step:
    ///   r = sigmoid(W_r x + U_r h + b_r)
    ///   z = sigmoid(W_z x + U_z h + b_z)
    ///   c = tanh(W_c x + U_c (r * h) + b_c)
    ///   h' = z * h + (1 - z) * c
    pub fn step(&self, g: &mut Graph, store: &ParamStore, x_t: Var, h_state: Var) -> Result<Var> {
        let r_pre = self.gate(g, store, x_t, h_state, self.reset_x, self.reset_h, self.reset_b)?;
        let r = g.sigmoid(r_pre)?;
        let z_pre = self.gate(g, store, x_t, h_state, self.update_x, self.update_h, self.update_b)?;
        let z = g.sigmoid(z_pre)?;
        let gated = g.mul(r, h_state)?;
        let c_pre = self.gate(g, store, x_t, gated, self.cand_x, self.cand_h, self.cand_b)?;
        let c = g.tanh(c_pre)?;
        let keep = g.mul(z, h_state)?;
        let z_neg = g.scale(z, -1.0)?;
        let one_minus_z = g.add_const(z_neg, 1.0)?;
        let fresh = g.mul(one_minus_z, c)?;
        g.add(keep, fresh)
    }

    /// Run over the given step order, starting from a zero state. Returns one
    /// (1, hidden) state per step, in the order supplied.
    fn run(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        order: impl Iterator<Item = usize>,
    ) -> Result<Vec<(usize, Var)>> {
        let mut state = g.input(Tensor::zeros(vec![1, self.hidden]));
        let mut out = Vec::new();
        for t in order {
            let x_t = g.slice_rows(x, t, 1)?;
            state = self.step(g, store, x_t, state)?;
            out.push((t, state));
        }
        Ok(out)
    }
}

/// One bi-directional GRU level: hidden size is half the model width per
/// direction, outputs concatenated back to the full width.
#[derive(Clone, Debug)]
pub struct BiGruLevel {
    pub forward_dir: GruDirection,
    pub backward_dir: GruDirection,
}

impl BiGruLevel {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha20Rng,
        name: &str,
        width: usize,
    ) -> Result<Self> {
        let hidden = width / 2;
        Ok(BiGruLevel {
            forward_dir: GruDirection::init(store, rng, &format!("{name}.fwd"), width, hidden)?,
            backward_dir: GruDirection::init(store, rng, &format!("{name}.bwd"), width, hidden)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mask: &[bool]) -> Result<Var> {
        let len = g.value(x).rows();
        let valid = mask.iter().filter(|&&m| m).count();
        if valid == 0 {
            return Err(HslError::AllMasked {
                op: "bigru",
                row: 0,
            });
        }
        // Recurrence only makes sense over a contiguous valid prefix.
        if !mask[..valid].iter().all(|&m| m) {
            return Err(HslError::ShapeMismatch {
                op: "bigru",
                detail: "mask must be a contiguous prefix of valid positions".into(),
            });
        }
        let fwd = self.forward_dir.run(g, store, x, 0..valid)?;
        let bwd = self.backward_dir.run(g, store, x, (0..valid).rev())?;
        let hidden = self.forward_dir.hidden;
        let mut by_pos: Vec<Option<(Var, Var)>> = vec![None; len];
        for ((t, f), (u, b)) in fwd.into_iter().zip(bwd.into_iter().rev()) {
            debug_assert_eq!(t, u);
            by_pos[t] = Some((f, b));
        }
        let mut rows = Vec::with_capacity(len);
        for slot in by_pos {
            match slot {
                Some((f, b)) => rows.push(g.concat_cols(&[f, b])?),
                None => rows.push(g.input(Tensor::zeros(vec![1, 2 * hidden]))),
            }
        }
        g.concat_rows(&rows)
    }
}

#[derive(Clone, Debug)]
pub enum LevelEncoder {
    Transformer(Vec<TransformerBlock>),
    BiGru(BiGruLevel),
}

impl LevelEncoder {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mask: &[bool]) -> Result<Var> {
        match self {
            LevelEncoder::Transformer(blocks) => {
                let mut h = x;
                for block in blocks {
                    h = block.forward(g, store, h, mask)?;
                }
                Ok(h)
            }
            LevelEncoder::BiGru(level) => level.forward(g, store, x, mask),
        }
    }
}

/// Sinusoidal position table, added to projected token features before the
/// first transformer text level.
pub fn sinusoidal_positions(len: usize, width: usize) -> Tensor {
    let mut data = vec![0.0; len * width];
    for pos in 0..len {
        for j in 0..width {
            let pair = (j / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / width as f64);
            data[pos * width + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![len, width], data).expect("shape is consistent by construction")
}

/// Input projection plus the stacked per-level encoders for one modality.
#[derive(Clone, Debug)]
pub struct ModalityEncoder {
    pub proj: Linear,
    pub levels: Vec<LevelEncoder>,
    pub positional: bool,
}

impl ModalityEncoder {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha20Rng,
        cfg: &ModelConfig,
        name: &str,
        input_dim: usize,
        sublayers: usize,
        positional: bool,
    ) -> Result<Self> {
        let proj = Linear::init(store, rng, &format!("{name}.proj"), input_dim, cfg.model_dim)?;
        let mut levels = Vec::with_capacity(cfg.levels);
        for level in 1..=cfg.levels {
            let enc = match cfg.encoder {
                EncoderKind::Transformer => {
                    let mut blocks = Vec::with_capacity(sublayers);
                    for s in 0..sublayers {
                        blocks.push(TransformerBlock::init(
                            store,
                            rng,
                            &format!("{name}.level{level}.sub{s}"),
                            cfg.model_dim,
                            cfg.heads,
                        )?);
                    }
                    LevelEncoder::Transformer(blocks)
                }
                EncoderKind::BiGru => LevelEncoder::BiGru(BiGruLevel::init(
                    store,
                    rng,
                    &format!("{name}.level{level}"),
                    cfg.model_dim,
                )?),
            };
            levels.push(enc);
        }
        Ok(ModalityEncoder {
            proj,
            levels,
            positional,
        })
    }

    /// Project the raw features and run every level, returning all level
    /// outputs in order. Sequence length is preserved at every level.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, x: Var, mask: &[bool]) -> Result<Vec<Var>> {
        let len = g.value(x).rows();
        if mask.len() != len {
            return Err(HslError::ShapeMismatch {
                op: "encode",
                detail: format!("mask length {} vs {len} rows", mask.len()),
            });
        }
        let mut h = self.proj.apply(g, store, x)?;
        if self.positional {
            let pe = g.input(sinusoidal_positions(len, g.value(h).cols()));
            h = g.add(h, pe)?;
        }
        let mut outputs = Vec::with_capacity(self.levels.len());
        for level in &self.levels {
            h = level.forward(g, store, h, mask)?;
            outputs.push(h);
        }
        Ok(outputs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn full_mask(n: usize) -> Vec<bool> {
        vec![true; n]
    }

    /// Deterministic non-random fill so reference computations can read the
    /// exact same numbers back out of the store.
    fn fill_pattern(store: &mut ParamStore) {
        let ids: Vec<_> = store.ids().collect();
        let mut k = 0u64;
        for id in ids {
            for v in store.data_mut(id).iter_mut() {
                k = k.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                // Small values in [-0.1, 0.1).
                *v = ((k >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * 0.2;
            }
        }
    }

    #[test]
    fn projection_identity_weights_pass_through() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let lin = Linear::init(&mut store, &mut rng, "p", 3, 3).unwrap();
        let eye = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        *store.data_mut(lin.w) = eye;
        let mut g = Graph::new();
        let x = g.input(Tensor::from_rows(&[vec![1.0, -2.0, 3.0], vec![0.5, 0.0, -1.0]]).unwrap());
        let y = lin.apply(&mut g, &store, x).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn projection_zero_input_yields_bias_rows() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let lin = Linear::init(&mut store, &mut rng, "p", 4, 2).unwrap();
        *store.data_mut(lin.b) = vec![0.25, -1.5];
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(vec![3, 4]));
        let y = lin.apply(&mut g, &store, x).unwrap();
        for i in 0..3 {
            assert_eq!(g.value(y).get2(i, 0), 0.25);
            assert_eq!(g.value(y).get2(i, 1), -1.5);
        }
    }

    #[test]
    fn projection_matches_independent_matmul_oracle() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let lin = Linear::init(&mut store, &mut rng, "p", 4, 8).unwrap();
        fill_pattern(&mut store);
        let xdata: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![3, 4], xdata.clone()).unwrap());
        let y = lin.apply(&mut g, &store, x).unwrap();

        // Independent oracle: jki-order accumulation, separate code path.
        let w = &store.entry(lin.w).data;
        let b = &store.entry(lin.b).data;
        let mut expect = vec![0.0f64; 3 * 8];
        for j in 0..8 {
            for p in 0..4 {
                for i in 0..3 {
                    expect[i * 8 + j] += xdata[i * 4 + p] * w[p * 8 + j];
                }
            }
        }
        for i in 0..3 {
            for j in 0..8 {
                expect[i * 8 + j] += b[j];
            }
        }
        for (got, want) in g.value(y).data().iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    /// Step-by-step reference of one post-norm transformer sublayer, written
    /// against plain slices so it shares no code with the graph ops.
    fn reference_block(
        store: &ParamStore,
        block: &TransformerBlock,
        x: &[Vec<f64>],
        width: usize,
    ) -> Vec<Vec<f64>> {
        let n = x.len();
        let heads = block.heads;
        let hd = width / heads;
        let get = |id: ParamId| store.entry(id).data.clone();
        let affine = |x: &[Vec<f64>], w: &[f64], b: &[f64], dout: usize| -> Vec<Vec<f64>> {
            x.iter()
                .map(|row| {
                    (0..dout)
                        .map(|j| {
                            b[j] + row.iter().enumerate().map(|(p, v)| v * w[p * dout + j]).sum::<f64>()
                        })
                        .collect()
                })
                .collect()
        };
        let q = affine(x, &get(block.wq.w), &get(block.wq.b), width);
        let k = affine(x, &get(block.wk.w), &get(block.wk.b), width);
        let v = affine(x, &get(block.wv.w), &get(block.wv.b), width);
        let mut cat = vec![vec![0.0; width]; n];
        for h in 0..heads {
            let cols = h * hd..(h + 1) * hd;
            for i in 0..n {
                let mut scores: Vec<f64> = (0..n)
                    .map(|j| {
                        cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (hd as f64).sqrt()
                    })
                    .collect();
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let total: f64 = exps.iter().sum();
                scores = exps.iter().map(|e| e / total).collect();
                for (c_out, c_in) in cols.clone().enumerate() {
                    cat[i][h * hd + c_out] = (0..n).map(|j| scores[j] * v[j][c_in]).sum();
                }
            }
        }
        let attn = affine(&cat, &get(block.wo.w), &get(block.wo.b), width);
        let norm = |x: &[Vec<f64>], gamma: &[f64], beta: &[f64]| -> Vec<Vec<f64>> {
            x.iter()
                .map(|row| {
                    let mean = row.iter().sum::<f64>() / width as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    row.iter()
                        .enumerate()
                        .map(|(j, v)| (v - mean) * inv * gamma[j] + beta[j])
                        .collect()
                })
                .collect()
        };
        let res1: Vec<Vec<f64>> = x
            .iter()
            .zip(&attn)
            .map(|(a, b)| a.iter().zip(b).map(|(u, v)| u + v).collect())
            .collect();
        let h1 = norm(&res1, &get(block.norm_attn.gamma), &get(block.norm_attn.beta));
        let inner = affine(&h1, &get(block.ffn_in.w), &get(block.ffn_in.b), 4 * width);
        let act: Vec<Vec<f64>> = inner
            .iter()
            .map(|row| row.iter().map(|v| v.max(0.0)).collect())
            .collect();
        let ff = affine(&act, &get(block.ffn_out.w), &get(block.ffn_out.b), width);
        let res2: Vec<Vec<f64>> = h1
            .iter()
            .zip(&ff)
            .map(|(a, b)| a.iter().zip(b).map(|(u, v)| u + v).collect())
            .collect();
        norm(&res2, &get(block.norm_ffn.gamma), &get(block.norm_ffn.beta))
    }

    #[test]
    fn transformer_block_matches_stepwise_reference() {
        let width = 4;
        let mut store = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let block = TransformerBlock::init(&mut store, &mut rng, "t", width, 2).unwrap();
        fill_pattern(&mut store);
        let x = vec![vec![0.3, -0.7, 1.1, 0.2], vec![-0.4, 0.9, 0.0, -1.3]];
        let expect = reference_block(&store, &block, &x, width);

        let mut g = Graph::new();
        let xv = g.input(Tensor::from_rows(&x).unwrap());
        let y = block.forward(&mut g, &store, xv, &full_mask(2)).unwrap();
        for i in 0..2 {
            for j in 0..width {
                assert!(
                    (g.value(y).get2(i, j) - expect[i][j]).abs() < 1e-12,
                    "({i},{j}): {} vs {}",
                    g.value(y).get2(i, j),
                    expect[i][j]
                );
            }
        }
    }

    #[test]
    fn single_object_attention_is_identity_weight() {
        // With one position, softmax collapses to weight 1, so the attention
        // mix must return the value projection itself.
        let width = 4;
        let mut store = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let block = TransformerBlock::init(&mut store, &mut rng, "t", width, 2).unwrap();
        fill_pattern(&mut store);
        let x = vec![vec![0.5, -0.2, 0.8, 0.1]];
        let expect = reference_block(&store, &block, &x, width);
        let mut g = Graph::new();
        let xv = g.input(Tensor::from_rows(&x).unwrap());
        let y = block.forward(&mut g, &store, xv, &full_mask(1)).unwrap();
        for j in 0..width {
            assert!((g.value(y).get2(0, j) - expect[0][j]).abs() < 1e-12);
        }
    }

    #[test]
    fn image_encoder_is_permutation_equivariant() {
        let cfg = ModelConfig {
            levels: 2,
            object_dim: 5,
            word_dim: 5,
            model_dim: 8,
            embed_dim: 8,
            heads: 2,
            image_sublayers: 1,
            text_sublayers: 1,
            ..ModelConfig::default()
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let enc =
            ModalityEncoder::init(&mut store, &mut rng, &cfg, "img", cfg.object_dim, 1, false).unwrap();

        let rows = vec![
            vec![0.1, 0.9, -0.3, 0.4, 0.0],
            vec![-0.5, 0.2, 0.8, -0.1, 0.6],
            vec![0.7, -0.6, 0.05, 0.3, -0.9],
        ];
        let perm = [2usize, 0, 1];
        let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();

        let mut g1 = Graph::new();
        let x1 = g1.input(Tensor::from_rows(&rows).unwrap());
        let out1 = enc.encode(&mut g1, &store, x1, &full_mask(3)).unwrap();
        let mut g2 = Graph::new();
        let x2 = g2.input(Tensor::from_rows(&permuted).unwrap());
        let out2 = enc.encode(&mut g2, &store, x2, &full_mask(3)).unwrap();

        for (a, b) in out1.iter().zip(out2.iter()) {
            for (new_row, &old_row) in perm.iter().enumerate() {
                for j in 0..cfg.model_dim {
                    let v1 = g1.value(*a).get2(old_row, j);
                    let v2 = g2.value(*b).get2(new_row, j);
                    assert!((v1 - v2).abs() < 1e-12, "level output not equivariant");
                }
            }
        }
    }

    #[test]
    fn text_transformer_is_order_sensitive() {
        let cfg = ModelConfig {
            levels: 1,
            object_dim: 4,
            word_dim: 4,
            model_dim: 8,
            embed_dim: 8,
            heads: 2,
            level_weights: vec![1.0],
            ..ModelConfig::default()
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let enc = ModalityEncoder::init(&mut store, &mut rng, &cfg, "txt", cfg.word_dim, 1, true).unwrap();
        let rows = vec![vec![0.4, -0.2, 0.9, 0.1], vec![-0.8, 0.3, 0.2, 0.7]];
        let swapped = vec![rows[1].clone(), rows[0].clone()];

        let mut g1 = Graph::new();
        let x1 = g1.input(Tensor::from_rows(&rows).unwrap());
        let y1 = enc.encode(&mut g1, &store, x1, &full_mask(2)).unwrap()[0];
        let mut g2 = Graph::new();
        let x2 = g2.input(Tensor::from_rows(&swapped).unwrap());
        let y2 = enc.encode(&mut g2, &store, x2, &full_mask(2)).unwrap()[0];

        // Swapping rows 0 and 1 must NOT merely swap outputs: positions differ.
        let mut any_differs = false;
        for j in 0..cfg.model_dim {
            if (g1.value(y1).get2(0, j) - g2.value(y2).get2(1, j)).abs() > 1e-9 {
                any_differs = true;
            }
        }
        assert!(any_differs, "positional encoding had no effect");
    }

    /// Plain-slice GRU reference for short sequences.
    fn reference_gru(
        store: &ParamStore,
        dir: &GruDirection,
        x: &[Vec<f64>],
    ) -> Vec<Vec<f64>> {
        let h = dir.hidden;
        let get = |id: ParamId| store.entry(id).data.clone();
        let mv = |v: &[f64], w: &[f64], dout: usize| -> Vec<f64> {
            (0..dout)
                .map(|j| v.iter().enumerate().map(|(p, x)| x * w[p * dout + j]).sum())
                .collect()
        };
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut state = vec![0.0; h];
        let mut out = Vec::new();
        for x_t in x {
            let rx = mv(x_t, &get(dir.reset_x), h);
            let rh = mv(&state, &get(dir.reset_h), h);
            let rb = get(dir.reset_b);
            let r: Vec<f64> = (0..h).map(|i| sig(rx[i] + rh[i] + rb[i])).collect();
            let zx = mv(x_t, &get(dir.update_x), h);
            let zh = mv(&state, &get(dir.update_h), h);
            let zb = get(dir.update_b);
            let z: Vec<f64> = (0..h).map(|i| sig(zx[i] + zh[i] + zb[i])).collect();
            let gated: Vec<f64> = (0..h).map(|i| r[i] * state[i]).collect();
            let cx = mv(x_t, &get(dir.cand_x), h);
            let ch = mv(&gated, &get(dir.cand_h), h);
            let cb = get(dir.cand_b);
            let c: Vec<f64> = (0..h).map(|i| (cx[i] + ch[i] + cb[i]).tanh()).collect();
            state = (0..h).map(|i| z[i] * state[i] + (1.0 - z[i]) * c[i]).collect();
            out.push(state.clone());
        }
        out
    }

    #[test]
    fn gru_matches_hand_unrolled_reference() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        let dir = GruDirection::init(&mut store, &mut rng, "gru", 3, 2).unwrap();
        fill_pattern(&mut store);
        let x = vec![
            vec![0.2, -0.5, 0.7],
            vec![-0.1, 0.4, 0.3],
            vec![0.9, 0.0, -0.6],
        ];
        let expect = reference_gru(&store, &dir, &x);

        let mut g = Graph::new();
        let xv = g.input(Tensor::from_rows(&x).unwrap());
        let states = dir.run(&mut g, &store, xv, 0..3).unwrap();
        for (t, (_, var)) in states.iter().enumerate() {
            for j in 0..2 {
                assert!(
                    (g.value(*var).get2(0, j) - expect[t][j]).abs() < 1e-12,
                    "step {t}, unit {j}"
                );
            }
        }
    }

    #[test]
    fn bigru_single_token_concatenates_both_directions() {
        let width = 6;
        let mut store = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(19);
        let level = BiGruLevel::init(&mut store, &mut rng, "bg", width).unwrap();
        fill_pattern(&mut store);
        let x = vec![vec![0.3, -0.2, 0.5, 0.0, 0.8, -0.4]];
        let fw = reference_gru(&store, &level.forward_dir, &x);
        let bw = reference_gru(&store, &level.backward_dir, &x);

        let mut g = Graph::new();
        let xv = g.input(Tensor::from_rows(&x).unwrap());
        let y = level.forward(&mut g, &store, xv, &full_mask(1)).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 6]);
        for j in 0..3 {
            assert!((g.value(y).get2(0, j) - fw[0][j]).abs() < 1e-12);
            assert!((g.value(y).get2(0, 3 + j) - bw[0][j]).abs() < 1e-12);
        }
    }

    #[test]
    fn bigru_backward_direction_reads_sequence_reversed() {
        let width = 4;
        let mut store = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(23);
        let level = BiGruLevel::init(&mut store, &mut rng, "bg", width).unwrap();
        fill_pattern(&mut store);
        let x = vec![
            vec![0.1, 0.2, -0.3, 0.4],
            vec![0.5, -0.6, 0.7, -0.8],
            vec![-0.9, 1.0, 0.1, -0.2],
        ];
        let reversed: Vec<Vec<f64>> = x.iter().rev().cloned().collect();
        let bw_expect = reference_gru(&store, &level.backward_dir, &reversed);

        let mut g = Graph::new();
        let xv = g.input(Tensor::from_rows(&x).unwrap());
        let y = level.forward(&mut g, &store, xv, &full_mask(3)).unwrap();
        // Output row t holds the backward state computed after consuming
        // positions len-1 ..= t, i.e. reversed-run step (len-1-t).
        for t in 0..3 {
            for j in 0..2 {
                let got = g.value(y).get2(t, 2 + j);
                let want = bw_expect[2 - t][j];
                assert!((got - want).abs() < 1e-12, "row {t} unit {j}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn level_outputs_preserve_shape_and_count() {
        for kind in [EncoderKind::Transformer, EncoderKind::BiGru] {
            let cfg = ModelConfig {
                levels: 3,
                object_dim: 5,
                word_dim: 5,
                model_dim: 8,
                embed_dim: 8,
                heads: 2,
                encoder: kind,
                level_weights: vec![1.0, 1.0, 1.0],
                ..ModelConfig::default()
            };
            let mut store = ParamStore::new();
            let mut rng = ChaCha20Rng::seed_from_u64(29);
            let enc =
                ModalityEncoder::init(&mut store, &mut rng, &cfg, "m", cfg.object_dim, 1, false)
                    .unwrap();
            let mut g = Graph::new();
            let x = g.input(Tensor::from_rows(&[vec![0.1; 5], vec![0.2; 5], vec![0.3; 5], vec![0.4; 5]]).unwrap());
            let outs = enc.encode(&mut g, &store, x, &full_mask(4)).unwrap();
            assert_eq!(outs.len(), 3);
            for o in outs {
                assert_eq!(g.value(o).shape(), &[4, 8]);
                assert!(g.value(o).all_finite());
            }
        }
    }

    #[test]
    fn padded_masked_encoding_matches_exact_length() {
        // Valid rows of a padded+masked batch must equal the unpadded run.
        for kind in [EncoderKind::Transformer, EncoderKind::BiGru] {
            let cfg = ModelConfig {
                levels: 2,
                object_dim: 4,
                word_dim: 4,
                model_dim: 8,
                embed_dim: 8,
                heads: 2,
                encoder: kind,
                ..ModelConfig::default()
            };
            let mut store = ParamStore::new();
            let mut rng = ChaCha20Rng::seed_from_u64(31);
            let enc =
                ModalityEncoder::init(&mut store, &mut rng, &cfg, "m", cfg.object_dim, 1, false)
                    .unwrap();

            let rows = vec![vec![0.4, -0.1, 0.7, 0.2], vec![-0.3, 0.6, 0.0, -0.5]];
            let mut padded = rows.clone();
            padded.push(vec![9.0, 9.0, 9.0, 9.0]); // garbage pad row
            let mask = vec![true, true, false];

            let mut g1 = Graph::new();
            let x1 = g1.input(Tensor::from_rows(&rows).unwrap());
            let exact = enc.encode(&mut g1, &store, x1, &full_mask(2)).unwrap();
            let mut g2 = Graph::new();
            let x2 = g2.input(Tensor::from_rows(&padded).unwrap());
            let padded_out = enc.encode(&mut g2, &store, x2, &mask).unwrap();

            for (a, b) in exact.iter().zip(padded_out.iter()) {
                for i in 0..2 {
                    for j in 0..8 {
                        let va = g1.value(*a).get2(i, j);
                        let vb = g2.value(*b).get2(i, j);
                        assert!(
                            (va - vb).abs() < 1e-12,
                            "{kind:?} valid row {i} diverged under padding"
                        );
                    }
                }
            }
        }
    }
}
