//! Pre-norm transformer stack over arbitrary position ids and attention masks.
//!
//! All three entry points (joint masked pass, standalone window encoding, and
//! decoding over merged caches) share one implementation, [`Model::run`]. A
//! query's key list is always the concatenation of the cached prefix keys (in
//! the order given) followed by the keys of the tokens being processed, and
//! one masked softmax is taken over that whole list.

use std::path::Path;

use rayon::prelude::*;

use super::config::{ModelConfig, PositionalKind};
use super::rotary::apply_rotary_in_place;
use super::weights::{load_weights, Weights};
use crate::error::{Error, Result};
use crate::layout::{BlockCausalMask, PositionAssignment};
use crate::tensor::{self, add_bias, dot, embedding_gather, layer_norm_rows, matmul, Matrix};

/// Keys and values of one layer, `[tokens, d_model]`; head `h` occupies
/// columns `h·head_dim .. (h+1)·head_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerKv {
    pub keys: Matrix,
    pub values: Matrix,
}

/// Cached keys/values for a run of tokens encoded together, plus the position
/// ids they were encoded at. Keys are stored after rotary rotation.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheSegment {
    layers: Vec<LayerKv>,
    position_ids: Vec<usize>,
}

impl CacheSegment {
    pub fn token_count(&self) -> usize {
        self.position_ids.len()
    }

    pub fn position_ids(&self) -> &[usize] {
        &self.position_ids
    }

    pub fn layers(&self) -> &[LayerKv] {
        &self.layers
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Appends another segment's tokens after this one's.
    pub fn extend(&mut self, other: &CacheSegment) -> Result<()> {
        if other.layers.len() != self.layers.len() {
            return Err(Error::Shape(format!(
                "cannot merge a {}-layer segment into a {}-layer one",
                other.layers.len(),
                self.layers.len()
            )));
        }
        for (mine, theirs) in self.layers.iter_mut().zip(&other.layers) {
            let d = mine.keys.cols();
            mine.keys = Matrix::vstack([&mine.keys, &theirs.keys], d)?;
            mine.values = Matrix::vstack([&mine.values, &theirs.values], d)?;
        }
        self.position_ids.extend_from_slice(&other.position_ids);
        Ok(())
    }
}

/// Decoder-only transformer with immutable weights.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    weights: Weights,
}

impl Model {
    pub fn new(config: ModelConfig, weights: Weights) -> Result<Self> {
        config.validate()?;
        // round-tripping through the container re-checks every shape
        let weights = Weights::from_container(weights.to_container(), &config)?;
        Ok(Self { config, weights })
    }

    pub fn load(path: impl AsRef<Path>, config: ModelConfig) -> Result<Self> {
        let weights = load_weights(path, &config)?;
        Ok(Self { config, weights })
    }

    pub fn random(config: ModelConfig, seed: u64, std: f32) -> Result<Self> {
        let weights = Weights::random(&config, seed, std)?;
        Ok(Self { config, weights })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    /// Logits for every token of a jointly processed sequence under `mask`.
    pub fn forward_full(
        &self,
        tokens: &[u32],
        positions: &PositionAssignment,
        mask: &BlockCausalMask,
    ) -> Result<Matrix> {
        if positions.len() != tokens.len() || mask.size() != tokens.len() {
            return Err(Error::Shape(format!(
                "{} tokens, {} positions, mask of size {}",
                tokens.len(),
                positions.len(),
                mask.size()
            )));
        }
        let (hidden, _) = self.run(tokens, positions.as_slice(), &[], &|q, k| mask.allowed(q, k))?;
        self.logits(&hidden)
    }

    /// [`Model::forward_full`] that also returns every token's keys/values.
    pub fn forward_full_cached(
        &self,
        tokens: &[u32],
        positions: &PositionAssignment,
        mask: &BlockCausalMask,
    ) -> Result<(Matrix, CacheSegment)> {
        if mask.size() != tokens.len() {
            return Err(Error::Shape(format!(
                "{} tokens, mask of size {}",
                tokens.len(),
                mask.size()
            )));
        }
        let (hidden, cache) = self.run(tokens, positions.as_slice(), &[], &|q, k| mask.allowed(q, k))?;
        Ok((self.logits(&hidden)?, cache))
    }

    /// Plain causal pass over `tokens` at positions `0..n`.
    pub fn forward_causal(&self, tokens: &[u32]) -> Result<Matrix> {
        let (hidden, _) = self.run(tokens, &(0..tokens.len()).collect::<Vec<_>>(), &[], &|q, k| k <= q)?;
        self.logits(&hidden)
    }

    /// Encodes one window causally and on its own.
    pub fn encode_window(&self, tokens: &[u32], positions: &[usize]) -> Result<CacheSegment> {
        self.encode_window_after(&[], tokens, positions)
    }

    /// Encodes one window causally, also attending to every token of
    /// `prefix` (used for a shared BOS segment).
    pub fn encode_window_after(
        &self,
        prefix: &[&CacheSegment],
        tokens: &[u32],
        positions: &[usize],
    ) -> Result<CacheSegment> {
        if tokens.is_empty() {
            return Err(Error::Shape("cannot encode an empty window".into()));
        }
        let (_, segment) = self.run(tokens, positions, prefix, &|q, k| k <= q)?;
        Ok(segment)
    }

    /// Task-token logits when the task attends to every cached segment plus
    /// causally to itself.
    pub fn decode_with_caches(
        &self,
        segments: &[&CacheSegment],
        task_tokens: &[u32],
        task_positions: &[usize],
    ) -> Result<Matrix> {
        Ok(self.decode_step(segments, task_tokens, task_positions)?.0)
    }

    /// Like [`Model::decode_with_caches`] but also returns the task tokens'
    /// own cache, so decoding can continue.
    pub fn decode_step(
        &self,
        segments: &[&CacheSegment],
        task_tokens: &[u32],
        task_positions: &[usize],
    ) -> Result<(Matrix, CacheSegment)> {
        if segments.is_empty() {
            return Err(Error::Shape("decode needs at least one cache segment".into()));
        }
        if task_tokens.is_empty() {
            return Err(Error::Shape("decode needs at least one task token".into()));
        }
        let (hidden, segment) = self.run(task_tokens, task_positions, segments, &|q, k| k <= q)?;
        Ok((self.logits(&hidden)?, segment))
    }

    /// Final-norm hidden states to vocabulary logits.
    pub fn logits(&self, hidden: &Matrix) -> Result<Matrix> {
        let head = self.weights.lm_head.as_ref().unwrap_or(&self.weights.token_embedding);
        tensor::matmul_transposed(hidden, head)
    }

    fn check_inputs(&self, tokens: &[u32], positions: &[usize]) -> Result<()> {
        if tokens.len() != positions.len() {
            return Err(Error::Shape(format!(
                "{} tokens but {} positions",
                tokens.len(),
                positions.len()
            )));
        }
        if let Some(&id) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Shape(format!(
                "token id {id} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        let n = self.config.max_positions;
        if let Some((i, &p)) = positions.iter().enumerate().find(|(_, &p)| p >= n) {
            return Err(Error::Position(format!("token {i} has position {p}, capacity is {n}")));
        }
        Ok(())
    }

    /// Runs the stack over `tokens`. Every token sees every prefix key; among
    /// the new tokens, query `q` sees key `k` iff `own_mask(q, k)`. Returns
    /// the final-layer-normed hidden states and the new tokens' cache.
    pub(crate) fn run(
        &self,
        tokens: &[u32],
        positions: &[usize],
        prefix: &[&CacheSegment],
        own_mask: &(dyn Fn(usize, usize) -> bool + Sync),
    ) -> Result<(Matrix, CacheSegment)> {
        self.check_inputs(tokens, positions)?;
        let cfg = &self.config;
        if let Some(seg) = prefix.iter().find(|s| s.n_layers() != cfg.n_layers) {
            return Err(Error::Shape(format!(
                "cache segment has {} layers, model has {}",
                seg.n_layers(),
                cfg.n_layers
            )));
        }
        let w = &self.weights;
        let d = cfg.d_model;

        let mut x = embedding_gather(&w.token_embedding, tokens)?;
        if let Some(table) = &w.positional_table {
            for (i, &p) in positions.iter().enumerate() {
                for (v, pv) in x.row_mut(i).iter_mut().zip(table.row(p)) {
                    *v += pv;
                }
            }
        }

        let mut layers_kv = Vec::with_capacity(cfg.n_layers);
        for (l, lw) in w.layers.iter().enumerate() {
            let h = layer_norm_rows(&x, &lw.ln_1_gamma, &lw.ln_1_beta, cfg.ln_eps)?;
            let mut qkv = matmul(&h, &lw.attn_qkv)?;
            add_bias(&mut qkv, &lw.attn_qkv_bias)?;
            let (mut q, mut k, v) = split_qkv(&qkv, d)?;
            if cfg.positional_kind == PositionalKind::Rotary {
                self.rotate(&mut q, positions)?;
                self.rotate(&mut k, positions)?;
            }
            let prefix_kv: Vec<&LayerKv> = prefix.iter().map(|s| &s.layers[l]).collect();
            let attn = self.attend(&q, &k, &v, &prefix_kv, own_mask)?;
            let mut proj = matmul(&attn, &lw.attn_out)?;
            add_bias(&mut proj, &lw.attn_out_bias)?;
            add_in_place(&mut x, &proj);

            let h2 = layer_norm_rows(&x, &lw.ln_2_gamma, &lw.ln_2_beta, cfg.ln_eps)?;
            let mut f = matmul(&h2, &lw.mlp_in)?;
            add_bias(&mut f, &lw.mlp_in_bias)?;
            tensor::gelu_in_place(&mut f, cfg.gelu);
            let mut out = matmul(&f, &lw.mlp_out)?;
            add_bias(&mut out, &lw.mlp_out_bias)?;
            add_in_place(&mut x, &out);

            layers_kv.push(LayerKv { keys: k, values: v });
        }
        let hidden = layer_norm_rows(&x, &w.ln_f_gamma, &w.ln_f_beta, cfg.ln_eps)?;
        Ok((
            hidden,
            CacheSegment {
                layers: layers_kv,
                position_ids: positions.to_vec(),
            },
        ))
    }

    fn rotate(&self, m: &mut Matrix, positions: &[usize]) -> Result<()> {
        let hd = self.config.head_dim();
        for (i, &p) in positions.iter().enumerate() {
            for head in m.row_mut(i).chunks_mut(hd) {
                apply_rotary_in_place(head, p, self.config.rotary_base)?;
            }
        }
        Ok(())
    }

    /// Multi-head attention for the new tokens' queries.
    fn attend(
        &self,
        q: &Matrix,
        k: &Matrix,
        v: &Matrix,
        prefix: &[&LayerKv],
        own_mask: &(dyn Fn(usize, usize) -> bool + Sync),
    ) -> Result<Matrix> {
        let n = q.rows();
        let d = self.config.d_model;
        let hd = self.config.head_dim();
        let scale = 1.0 / (hd as f32).sqrt();
        let n_prefix: usize = prefix.iter().map(|kv| kv.keys.rows()).sum();
        let total = n_prefix + n;

        // (keys, values) for key index `j` in canonical order
        let key_source = |j: usize| -> (&[f32], &[f32]) {
            let mut j = j;
            for kv in prefix {
                if j < kv.keys.rows() {
                    return (kv.keys.row(j), kv.values.row(j));
                }
                j -= kv.keys.rows();
            }
            (k.row(j), v.row(j))
        };

        let mut out = Matrix::zeros(n, d);
        let work = n * total * d;
        let row_job = |i: usize, row: &mut [f32]| -> Result<()> {
            let allowed: Vec<bool> = (0..total).map(|j| j < n_prefix || own_mask(i, j - n_prefix)).collect();
            let mut scores = vec![0.0f32; total];
            let mut probs = vec![0.0f32; total];
            let qrow = q.row(i);
            for h in 0..self.config.n_heads {
                let cols = h * hd..(h + 1) * hd;
                let qh = &qrow[cols.clone()];
                for (j, s) in scores.iter_mut().enumerate() {
                    if allowed[j] {
                        *s = dot(qh, &key_source(j).0[cols.clone()]) * scale;
                    }
                }
                tensor::masked_softmax_into(&scores, &allowed, &mut probs).map_err(|_| Error::EmptyAttention(i))?;
                let dst = &mut row[cols.clone()];
                for (j, &p) in probs.iter().enumerate() {
                    if allowed[j] {
                        let vh = &key_source(j).1[cols.clone()];
                        for (o, &vv) in dst.iter_mut().zip(vh) {
                            *o += p * vv;
                        }
                    }
                }
            }
            Ok(())
        };
        if work >= 1 << 16 {
            out.data_mut()
                .par_chunks_mut(d)
                .enumerate()
                .try_for_each(|(i, r)| row_job(i, r))?;
        } else {
            out.data_mut()
                .chunks_mut(d)
                .enumerate()
                .try_for_each(|(i, r)| row_job(i, r))?;
        }
        Ok(out)
    }
}

fn split_qkv(qkv: &Matrix, d: usize) -> Result<(Matrix, Matrix, Matrix)> {
    let n = qkv.rows();
    let mut parts = [
        Vec::with_capacity(n * d),
        Vec::with_capacity(n * d),
        Vec::with_capacity(n * d),
    ];
    for i in 0..n {
        let row = qkv.row(i);
        for (p, part) in parts.iter_mut().enumerate() {
            part.extend_from_slice(&row[p * d..(p + 1) * d]);
        }
    }
    let [q, k, v] = parts;
    Ok((
        Matrix::from_vec(n, d, q)?,
        Matrix::from_vec(n, d, k)?,
        Matrix::from_vec(n, d, v)?,
    ))
}

fn add_in_place(x: &mut Matrix, y: &Matrix) {
    for i in 0..x.rows() {
        for (a, b) in x.row_mut(i).iter_mut().zip(y.row(i)) {
            *a += b;
        }
    }
}
