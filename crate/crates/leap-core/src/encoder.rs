//! Compact pre-norm transformer encoder exposing per-layer pooled
//! representations. Two forward paths share the same kernels: a plain path
//! for inference (layer by layer, so early exit can stop mid-stack) and a
//! graph path that records onto the autodiff tape for training. For the same
//! weights and tokens the two produce bit-identical pooled vectors.

use std::io::Read as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LeapError, Result};
use crate::scalar::{fl, Scalar};
use crate::tensor::kernels;
use crate::tensor::{Graph, Tensor, TensorData};

const LN_EPS: f64 = 1e-5;
const CHECKPOINT_MAGIC: &[u8; 8] = b"LEAPCK01";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Mean,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub pooling: Pooling,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers < 2 {
            return Err(LeapError::config(format!(
                "num_layers must be at least 2, got {}",
                self.num_layers
            )));
        }
        if self.hidden_dim == 0 || self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            return Err(LeapError::config(format!(
                "hidden_dim {} must be a positive multiple of num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.ff_dim == 0 || self.vocab_size == 0 || self.max_seq_len == 0 {
            return Err(LeapError::config(
                "ff_dim, vocab_size, and max_seq_len must all be positive".to_string(),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }
}

/// One residual block: pre-norm attention then pre-norm feed-forward.
#[derive(Debug, Clone, PartialEq)]
struct Block<F: Scalar> {
    ln1_gain: TensorData<F>,
    ln1_bias: TensorData<F>,
    ln2_gain: TensorData<F>,
    ln2_bias: TensorData<F>,
    wq: Vec<TensorData<F>>,
    wk: Vec<TensorData<F>>,
    wv: Vec<TensorData<F>>,
    wo: Vec<TensorData<F>>,
    w1: TensorData<F>,
    b1: TensorData<F>,
    w2: TensorData<F>,
    b2: TensorData<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel<F: Scalar> {
    config: EncoderConfig,
    seed: u64,
    token_embedding: TensorData<F>,
    pos_embedding: TensorData<F>,
    blocks: Vec<Block<F>>,
}

/// Per-layer pooled outputs of one sample, plus the unit-norm final
/// embedding.
#[derive(Debug, Clone)]
pub struct LayerTrace<F: Scalar> {
    pub pooled: Vec<TensorData<F>>,
    pub final_embedding: TensorData<F>,
}

/// Graph-side counterpart of [`LayerTrace`]: handles into the tape, with
/// per-layer unit-norm embeddings precomputed for the losses.
#[derive(Debug, Clone)]
pub struct GraphTrace {
    pub pooled: Vec<Tensor>,
    pub normalized: Vec<Tensor>,
    pub final_embedding: Tensor,
}

impl<F: Scalar> LayerTrace<F> {
    /// Mount a precomputed trace onto a tape as frozen constants, e.g. a
    /// cached trace of a model that must receive no gradient.
    pub fn bind_constants(&self, g: &mut Graph<F>) -> Result<GraphTrace> {
        let mut pooled = Vec::with_capacity(self.pooled.len());
        let mut normalized = Vec::with_capacity(self.pooled.len());
        for p in &self.pooled {
            let h = g.constant(p.clone());
            pooled.push(h);
            normalized.push(g.normalize(h)?);
        }
        let final_embedding = *normalized.last().expect("nonempty trace");
        Ok(GraphTrace { pooled, normalized, final_embedding })
    }

    /// Unit-norm version of every pooled vector.
    pub fn normalized_layers(&self) -> Result<Vec<TensorData<F>>> {
        self.pooled
            .iter()
            .map(|p| {
                let n = kernels::l2_norm(p.data());
                if n < fl(1e-30) {
                    return Err(LeapError::degenerate("pooled vector has zero norm"));
                }
                Ok(TensorData::vector(p.data().iter().map(|&v| v / n).collect()))
            })
            .collect()
    }
}

/// Learned linear map from student hidden size to teacher hidden size.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection<F: Scalar> {
    pub weight: TensorData<F>,
    pub trainable: bool,
}

impl<F: Scalar> Projection<F> {
    pub fn init(in_dim: usize, out_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 1.0 / (in_dim as f64).sqrt();
        Projection { weight: TensorData::randn(vec![in_dim, out_dim], std, &mut rng), trainable: true }
    }

    pub fn bind(&self, g: &mut Graph<F>) -> Tensor {
        if self.trainable {
            g.param(self.weight.clone())
        } else {
            g.constant(self.weight.clone())
        }
    }

    pub fn apply(g: &mut Graph<F>, weight: Tensor, v: Tensor) -> Result<Tensor> {
        g.matmul(v, weight)
    }
}

/// Average of the unmasked rows of `hidden`. Errors when the mask keeps
/// nothing.
pub fn mean_pool<F: Scalar>(hidden: &TensorData<F>, mask: &[bool]) -> Result<TensorData<F>> {
    let (rows, cols) = (hidden.rows(), hidden.cols());
    if mask.len() != rows {
        return Err(LeapError::dimension(format!(
            "mean_pool: mask length {} does not match {} rows",
            mask.len(),
            rows
        )));
    }
    let mut out = vec![F::zero(); cols];
    let count = kernels::masked_mean_rows(hidden.data(), cols, mask, &mut out);
    if count == 0 {
        return Err(LeapError::degenerate("mean_pool: mask excludes every position"));
    }
    Ok(TensorData::vector(out))
}

/// Map each of `l_s` layers onto a layer of an `l_t`-deep stack:
/// `map[l-1] = round(l * l_t / l_s)` (1-indexed layers), so the final layers
/// always align.
pub fn uniform_layer_map(l_s: usize, l_t: usize) -> Result<Vec<usize>> {
    if l_s > l_t {
        return Err(LeapError::contract(format!(
            "uniform_layer_map: shallow depth {l_s} exceeds deep depth {l_t}"
        )));
    }
    if l_s == 0 {
        return Err(LeapError::contract("uniform_layer_map: zero layers".to_string()));
    }
    let map: Vec<usize> =
        (1..=l_s).map(|l| ((l * l_t) as f64 / l_s as f64).round() as usize).collect();
    debug_assert_eq!(*map.last().unwrap(), l_t);
    debug_assert!(map.windows(2).all(|w| w[0] <= w[1]));
    Ok(map)
}

impl<F: Scalar> EncoderModel<F> {
    /// Fresh model with gaussian weights of the given standard deviation.
    /// Layer-norm gains start at one and all biases at zero.
    pub fn init(config: EncoderConfig, seed: u64, init_std: f64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.hidden_dim;
        let dh = config.head_dim();
        let token_embedding = TensorData::randn(vec![config.vocab_size, d], init_std, &mut rng);
        let pos_embedding = TensorData::randn(vec![config.max_seq_len, d], init_std, &mut rng);
        let blocks = (0..config.num_layers)
            .map(|_| Block {
                ln1_gain: TensorData::vector(vec![F::one(); d]),
                ln1_bias: TensorData::vector(vec![F::zero(); d]),
                ln2_gain: TensorData::vector(vec![F::one(); d]),
                ln2_bias: TensorData::vector(vec![F::zero(); d]),
                wq: (0..config.num_heads)
                    .map(|_| TensorData::randn(vec![d, dh], init_std, &mut rng))
                    .collect(),
                wk: (0..config.num_heads)
                    .map(|_| TensorData::randn(vec![d, dh], init_std, &mut rng))
                    .collect(),
                wv: (0..config.num_heads)
                    .map(|_| TensorData::randn(vec![d, dh], init_std, &mut rng))
                    .collect(),
                wo: (0..config.num_heads)
                    .map(|_| TensorData::randn(vec![dh, d], init_std, &mut rng))
                    .collect(),
                w1: TensorData::randn(vec![d, config.ff_dim], init_std, &mut rng),
                b1: TensorData::vector(vec![F::zero(); config.ff_dim]),
                w2: TensorData::randn(vec![config.ff_dim, d], init_std, &mut rng),
                b2: TensorData::vector(vec![F::zero(); d]),
            })
            .collect();
        Ok(EncoderModel { config, seed, token_embedding, pos_embedding, blocks })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Truncated copy keeping only the first `layers` blocks.
    pub fn truncate(&self, layers: usize) -> Result<Self> {
        if layers < 2 || layers > self.config.num_layers {
            return Err(LeapError::contract(format!(
                "truncate: {layers} outside 2..={}",
                self.config.num_layers
            )));
        }
        let mut out = self.clone();
        out.blocks.truncate(layers);
        out.config.num_layers = layers;
        Ok(out)
    }

    /// Copy of the model with every weight replaced from `values`, in
    /// [`EncoderModel::param_refs`] order. Drives finite-difference
    /// re-evaluation at perturbed parameters.
    pub fn with_params(&self, values: &[TensorData<F>]) -> Result<Self> {
        let mut out = self.clone();
        let mut refs = out.param_refs_mut();
        if refs.len() != values.len() {
            return Err(LeapError::contract(format!(
                "with_params: expected {} tensors, got {}",
                refs.len(),
                values.len()
            )));
        }
        for ((name, slot), v) in refs.iter_mut().zip(values) {
            if slot.shape() != v.shape() {
                return Err(LeapError::dimension(format!(
                    "with_params: {} expects shape {:?}, got {:?}",
                    name,
                    slot.shape(),
                    v.shape()
                )));
            }
            **slot = v.clone();
        }
        Ok(out)
    }

    pub fn cast<G: Scalar>(&self) -> EncoderModel<G> {
        EncoderModel {
            config: self.config.clone(),
            seed: self.seed,
            token_embedding: self.token_embedding.cast(),
            pos_embedding: self.pos_embedding.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    ln1_gain: b.ln1_gain.cast(),
                    ln1_bias: b.ln1_bias.cast(),
                    ln2_gain: b.ln2_gain.cast(),
                    ln2_bias: b.ln2_bias.cast(),
                    wq: b.wq.iter().map(|t| t.cast()).collect(),
                    wk: b.wk.iter().map(|t| t.cast()).collect(),
                    wv: b.wv.iter().map(|t| t.cast()).collect(),
                    wo: b.wo.iter().map(|t| t.cast()).collect(),
                    w1: b.w1.cast(),
                    b1: b.b1.cast(),
                    w2: b.w2.cast(),
                    b2: b.b2.cast(),
                })
                .collect(),
        }
    }

    /// Canonical parameter enumeration. Checkpoints, the optimizer, and
    /// graph binding all rely on this single ordering.
    pub fn param_refs(&self) -> Vec<(String, &TensorData<F>)> {
        let mut out = Vec::new();
        out.push(("token_embedding".to_string(), &self.token_embedding));
        out.push(("pos_embedding".to_string(), &self.pos_embedding));
        for (l, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{l}.ln1_gain"), &b.ln1_gain));
            out.push((format!("block{l}.ln1_bias"), &b.ln1_bias));
            out.push((format!("block{l}.ln2_gain"), &b.ln2_gain));
            out.push((format!("block{l}.ln2_bias"), &b.ln2_bias));
            for (h, t) in b.wq.iter().enumerate() {
                out.push((format!("block{l}.head{h}.wq"), t));
            }
            for (h, t) in b.wk.iter().enumerate() {
                out.push((format!("block{l}.head{h}.wk"), t));
            }
            for (h, t) in b.wv.iter().enumerate() {
                out.push((format!("block{l}.head{h}.wv"), t));
            }
            for (h, t) in b.wo.iter().enumerate() {
                out.push((format!("block{l}.head{h}.wo"), t));
            }
            out.push((format!("block{l}.w1"), &b.w1));
            out.push((format!("block{l}.b1"), &b.b1));
            out.push((format!("block{l}.w2"), &b.w2));
            out.push((format!("block{l}.b2"), &b.b2));
        }
        out
    }

    pub fn param_refs_mut(&mut self) -> Vec<(String, &mut TensorData<F>)> {
        let mut out: Vec<(String, &mut TensorData<F>)> = Vec::new();
        out.push(("token_embedding".to_string(), &mut self.token_embedding));
        out.push(("pos_embedding".to_string(), &mut self.pos_embedding));
        for (l, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("block{l}.ln1_gain"), &mut b.ln1_gain));
            out.push((format!("block{l}.ln1_bias"), &mut b.ln1_bias));
            out.push((format!("block{l}.ln2_gain"), &mut b.ln2_gain));
            out.push((format!("block{l}.ln2_bias"), &mut b.ln2_bias));
            for (h, t) in b.wq.iter_mut().enumerate() {
                out.push((format!("block{l}.head{h}.wq"), t));
            }
            for (h, t) in b.wk.iter_mut().enumerate() {
                out.push((format!("block{l}.head{h}.wk"), t));
            }
            for (h, t) in b.wv.iter_mut().enumerate() {
                out.push((format!("block{l}.head{h}.wv"), t));
            }
            for (h, t) in b.wo.iter_mut().enumerate() {
                out.push((format!("block{l}.head{h}.wo"), t));
            }
            out.push((format!("block{l}.w1"), &mut b.w1));
            out.push((format!("block{l}.b1"), &mut b.b1));
            out.push((format!("block{l}.w2"), &mut b.w2));
            out.push((format!("block{l}.b2"), &mut b.b2));
        }
        out
    }

    /// Indices into [`EncoderModel::param_refs`] belonging to block `l`
    /// (0-based). Used to isolate which parameters a loss may touch.
    pub fn block_param_range(&self, l: usize) -> std::ops::Range<usize> {
        let per_block = 8 + 4 * self.config.num_heads;
        let start = 2 + l * per_block;
        start..start + per_block
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(LeapError::degenerate("empty token sequence"));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(LeapError::dimension(format!(
                "sequence length {} exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(LeapError::dimension(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Token plus positional embeddings: the residual-stream input.
    fn embed(&self, tokens: &[u32]) -> TensorData<F> {
        let d = self.config.hidden_dim;
        let mut data = Vec::with_capacity(tokens.len() * d);
        for (pos, &t) in tokens.iter().enumerate() {
            let tok_row = &self.token_embedding.data()[t as usize * d..(t as usize + 1) * d];
            let pos_row = &self.pos_embedding.data()[pos * d..(pos + 1) * d];
            data.extend(tok_row.iter().zip(pos_row).map(|(&a, &b)| a + b));
        }
        TensorData::new(vec![tokens.len(), d], data).expect("embedding shape")
    }

    /// Advance the residual stream through block `l` in place. `mask_add` is
    /// the additive attention mask over key positions, if any.
    fn apply_block(&self, l: usize, x: &mut TensorData<F>, mask_add: Option<&[F]>) {
        let block = &self.blocks[l];
        let t = x.rows();
        let d = self.config.hidden_dim;
        let dh = self.config.head_dim();
        let ff = self.config.ff_dim;
        let scale: F = fl(1.0 / (dh as f64).sqrt());

        let mut xn = vec![F::zero(); t * d];
        let mut mean = vec![F::zero(); t];
        let mut rstd = vec![F::zero(); t];
        kernels::layer_norm_rows(
            x.data(),
            block.ln1_gain.data(),
            block.ln1_bias.data(),
            &mut xn,
            &mut mean,
            &mut rstd,
            t,
            d,
            fl(LN_EPS),
        );

        let mut attn = vec![F::zero(); t * d];
        let mut q = vec![F::zero(); t * dh];
        let mut k = vec![F::zero(); t * dh];
        let mut v = vec![F::zero(); t * dh];
        let mut kt = vec![F::zero(); t * dh];
        let mut scores = vec![F::zero(); t * t];
        let mut ctx = vec![F::zero(); t * dh];
        let mut head_out = vec![F::zero(); t * d];
        for h in 0..self.config.num_heads {
            kernels::matmul(&xn, block.wq[h].data(), &mut q, t, d, dh);
            kernels::matmul(&xn, block.wk[h].data(), &mut k, t, d, dh);
            kernels::matmul(&xn, block.wv[h].data(), &mut v, t, d, dh);
            kernels::transpose(&k, t, dh, &mut kt);
            kernels::matmul(&q, &kt, &mut scores, t, dh, t);
            for s in scores.iter_mut() {
                *s = *s * scale;
            }
            if let Some(m) = mask_add {
                for (i, s) in scores.iter_mut().enumerate() {
                    *s = *s + m[i % t];
                }
            }
            kernels::softmax_rows(&mut scores, t, t);
            kernels::matmul(&scores, &v, &mut ctx, t, t, dh);
            kernels::matmul(&ctx, block.wo[h].data(), &mut head_out, t, dh, d);
            if h == 0 {
                attn.copy_from_slice(&head_out);
            } else {
                for (a, &ho) in attn.iter_mut().zip(&head_out) {
                    *a = *a + ho;
                }
            }
        }
        for (xv, &a) in x.data_mut().iter_mut().zip(&attn) {
            *xv = *xv + a;
        }

        kernels::layer_norm_rows(
            x.data(),
            block.ln2_gain.data(),
            block.ln2_bias.data(),
            &mut xn,
            &mut mean,
            &mut rstd,
            t,
            d,
            fl(LN_EPS),
        );
        let mut f1 = vec![F::zero(); t * ff];
        kernels::matmul(&xn, block.w1.data(), &mut f1, t, d, ff);
        let b1 = block.b1.data();
        for (i, fv) in f1.iter_mut().enumerate() {
            *fv = *fv + b1[i % ff];
        }
        for fv in f1.iter_mut() {
            *fv = kernels::gelu(*fv);
        }
        let mut f2 = vec![F::zero(); t * d];
        kernels::matmul(&f1, block.w2.data(), &mut f2, t, ff, d);
        let b2 = block.b2.data();
        for (i, fv) in f2.iter_mut().enumerate() {
            *fv = *fv + b2[i % d];
        }
        for (xv, &a) in x.data_mut().iter_mut().zip(&f2) {
            *xv = *xv + a;
        }
    }

    fn pool_and_normalize(pooled: &TensorData<F>) -> Result<TensorData<F>> {
        let norm = kernels::l2_norm(pooled.data());
        if norm < fl(1e-30) {
            return Err(LeapError::degenerate("final pooled vector has zero norm"));
        }
        Ok(TensorData::vector(pooled.data().iter().map(|&p| p / norm).collect()))
    }

    /// Full-depth forward of one sample, collecting every layer's pooled
    /// vector. `mask` marks real (non-pad) positions; `None` means all real.
    /// Validate an optional padding mask and derive the additive attention
    /// mask over key positions.
    fn resolve_mask(
        &self,
        tokens: &[u32],
        mask: Option<&[bool]>,
    ) -> Result<(Vec<bool>, Option<Vec<F>>)> {
        let t = tokens.len();
        let mask: Vec<bool> = match mask {
            Some(m) => {
                if m.len() != t {
                    return Err(LeapError::dimension(format!(
                        "mask length {} does not match {} tokens",
                        m.len(),
                        t
                    )));
                }
                if !m.iter().any(|&b| b) {
                    return Err(LeapError::degenerate("mask excludes every position"));
                }
                m.to_vec()
            }
            None => vec![true; t],
        };
        let all_valid = mask.iter().all(|&b| b);
        let mask_add: Option<Vec<F>> = if all_valid {
            None
        } else {
            Some(mask.iter().map(|&b| if b { F::zero() } else { fl(-1e9) }).collect())
        };
        Ok((mask, mask_add))
    }

    pub fn forward_trace(&self, tokens: &[u32], mask: Option<&[bool]>) -> Result<LayerTrace<F>> {
        self.check_tokens(tokens)?;
        let (mask, mask_add) = self.resolve_mask(tokens, mask)?;

        let mut x = self.embed(tokens);
        let mut pooled = Vec::with_capacity(self.config.num_layers);
        for l in 0..self.config.num_layers {
            self.apply_block(l, &mut x, mask_add.as_deref());
            pooled.push(mean_pool(&x, &mask)?);
        }
        let final_embedding = Self::pool_and_normalize(pooled.last().unwrap())?;
        Ok(LayerTrace { pooled, final_embedding })
    }

    pub fn forward_trace_batch(&self, samples: &[Vec<u32>]) -> Result<Vec<LayerTrace<F>>> {
        samples.iter().map(|s| self.forward_trace(s, None)).collect()
    }

    /// Final unit-norm embedding only: runs every block and pools once at
    /// the end. This is the cheapest full-depth path and the baseline that
    /// per-layer monitoring is compared against.
    pub fn encode_final(&self, tokens: &[u32], mask: Option<&[bool]>) -> Result<TensorData<F>> {
        self.check_tokens(tokens)?;
        let (mask, mask_add) = self.resolve_mask(tokens, mask)?;
        let mut x = self.embed(tokens);
        for l in 0..self.config.num_layers {
            self.apply_block(l, &mut x, mask_add.as_deref());
        }
        Self::pool_and_normalize(&mean_pool(&x, &mask)?)
    }

    /// Layer-at-a-time forward used by the exit engine: each step runs one
    /// block and yields that layer's pooled vector.
    pub fn stepwise(&self, tokens: &[u32]) -> Result<StepwiseForward<'_, F>> {
        self.stepwise_masked(tokens, None)
    }

    /// [`stepwise`](Self::stepwise) with an optional padding mask, matching
    /// [`forward_trace`](Self::forward_trace)'s masking semantics.
    pub fn stepwise_masked(
        &self,
        tokens: &[u32],
        mask: Option<&[bool]>,
    ) -> Result<StepwiseForward<'_, F>> {
        self.check_tokens(tokens)?;
        let (mask, mask_add) = self.resolve_mask(tokens, mask)?;
        Ok(StepwiseForward { model: self, x: self.embed(tokens), mask, mask_add, layers_done: 0 })
    }

    /// Record the forward pass on the tape. `trainable` decides whether the
    /// weights become gradient-bearing leaves or frozen constants. Returns
    /// the bound weights for reuse across samples in one graph.
    pub fn bind(&self, g: &mut Graph<F>, trainable: bool) -> BoundEncoder {
        let mut leaf = |t: &TensorData<F>| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
        let token_embedding = leaf(&self.token_embedding);
        let pos_embedding = leaf(&self.pos_embedding);
        let mut handles = vec![token_embedding, pos_embedding];
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let bb = BoundBlock {
                ln1_gain: leaf(&b.ln1_gain),
                ln1_bias: leaf(&b.ln1_bias),
                ln2_gain: leaf(&b.ln2_gain),
                ln2_bias: leaf(&b.ln2_bias),
                wq: b.wq.iter().map(&mut leaf).collect(),
                wk: b.wk.iter().map(&mut leaf).collect(),
                wv: b.wv.iter().map(&mut leaf).collect(),
                wo: b.wo.iter().map(&mut leaf).collect(),
                w1: leaf(&b.w1),
                b1: leaf(&b.b1),
                w2: leaf(&b.w2),
                b2: leaf(&b.b2),
            };
            handles.push(bb.ln1_gain);
            handles.push(bb.ln1_bias);
            handles.push(bb.ln2_gain);
            handles.push(bb.ln2_bias);
            handles.extend(&bb.wq);
            handles.extend(&bb.wk);
            handles.extend(&bb.wv);
            handles.extend(&bb.wo);
            handles.push(bb.w1);
            handles.push(bb.b1);
            handles.push(bb.w2);
            handles.push(bb.b2);
            blocks.push(bb);
        }
        BoundEncoder { config: self.config.clone(), token_embedding, pos_embedding, blocks, handles }
    }

    pub fn save_weights(&self, path: &Path) -> Result<()> {
        let refs = self.param_refs();
        let tensors: Vec<TensorHeaderEntry> = refs
            .iter()
            .map(|(name, t)| TensorHeaderEntry { name: name.clone(), shape: t.shape().to_vec() })
            .collect();
        let header = CheckpointHeader { config: self.config.clone(), seed: self.seed, tensors };
        let header_bytes = serde_json::to_vec(&header)?;

        let mut buf: Vec<u8> =
            Vec::with_capacity(16 + header_bytes.len() + refs.iter().map(|(_, t)| t.numel() * 8).sum::<usize>());
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
        buf.extend_from_slice(&header_bytes);
        for (_, t) in &refs {
            for v in t.data() {
                buf.extend_from_slice(&v.to_f64().expect("finite weight").to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load_weights(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < CHECKPOINT_MAGIC.len() + 8 {
            return Err(LeapError::checkpoint("file too short to be a checkpoint"));
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            if &bytes[..6] == &CHECKPOINT_MAGIC[..6] {
                let found = String::from_utf8_lossy(&bytes[6..8]).into_owned();
                let want = String::from_utf8_lossy(&CHECKPOINT_MAGIC[6..]).into_owned();
                return Err(LeapError::checkpoint(format!(
                    "unsupported checkpoint version {found} (this build reads {want})"
                )));
            }
            return Err(LeapError::checkpoint("bad magic bytes"));
        }
        let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
        let stored_crc = u32::from_le_bytes(crc_bytes.try_into().unwrap());
        if crc32fast::hash(body) != stored_crc {
            return Err(LeapError::checkpoint("checksum mismatch: corrupt or truncated file"));
        }
        let header_len = u32::from_le_bytes(body[8..12].try_into().unwrap()) as usize;
        if 12 + header_len > body.len() {
            return Err(LeapError::checkpoint("header length exceeds file size"));
        }
        let header: CheckpointHeader = serde_json::from_slice(&body[12..12 + header_len])
            .map_err(|e| LeapError::checkpoint(format!("unparseable header: {e}")))?;
        header.config.validate().map_err(|e| LeapError::checkpoint(format!("bad config: {e}")))?;

        let mut model = EncoderModel::<F>::init(header.config.clone(), header.seed, 0.0)?;
        {
            let refs = model.param_refs();
            if refs.len() != header.tensors.len() {
                return Err(LeapError::checkpoint(format!(
                    "expected {} tensors for this config, header lists {}",
                    refs.len(),
                    header.tensors.len()
                )));
            }
            for ((name, t), entry) in refs.iter().zip(&header.tensors) {
                if *name != entry.name || t.shape() != entry.shape {
                    return Err(LeapError::checkpoint(format!(
                        "tensor {} with shape {:?} does not match header entry {} {:?}",
                        name,
                        t.shape(),
                        entry.name,
                        entry.shape
                    )));
                }
            }
        }
        let payload = &body[12 + header_len..];
        let expected: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        if payload.len() != expected * 8 {
            return Err(LeapError::checkpoint(format!(
                "payload holds {} bytes, config implies {}",
                payload.len(),
                expected * 8
            )));
        }
        let mut cursor = 0usize;
        for (_, t) in model.param_refs_mut() {
            for v in t.data_mut() {
                let raw = f64::from_le_bytes(payload[cursor..cursor + 8].try_into().unwrap());
                *v = F::from_f64(raw)
                    .ok_or(LeapError::checkpoint("weight not representable in scalar type"))?;
                cursor += 8;
            }
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct TensorHeaderEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: EncoderConfig,
    seed: u64,
    tensors: Vec<TensorHeaderEntry>,
}

/// Plain-path forward that advances one block per call.
pub struct StepwiseForward<'m, F: Scalar> {
    model: &'m EncoderModel<F>,
    x: TensorData<F>,
    mask: Vec<bool>,
    mask_add: Option<Vec<F>>,
    layers_done: usize,
}

impl<F: Scalar> StepwiseForward<'_, F> {
    /// Run the next block; returns that layer's pooled vector, or `None`
    /// when the stack is exhausted.
    pub fn step(&mut self) -> Option<TensorData<F>> {
        if self.layers_done >= self.model.config.num_layers {
            return None;
        }
        self.model.apply_block(self.layers_done, &mut self.x, self.mask_add.as_deref());
        self.layers_done += 1;
        Some(mean_pool(&self.x, &self.mask).expect("mask validated at construction"))
    }

    pub fn layers_done(&self) -> usize {
        self.layers_done
    }

    pub fn total_layers(&self) -> usize {
        self.model.config.num_layers
    }
}

struct BoundBlock {
    ln1_gain: Tensor,
    ln1_bias: Tensor,
    ln2_gain: Tensor,
    ln2_bias: Tensor,
    wq: Vec<Tensor>,
    wk: Vec<Tensor>,
    wv: Vec<Tensor>,
    wo: Vec<Tensor>,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

/// Encoder weights bound onto a tape. One binding serves every sample in a
/// batch; gradient handles come back in [`EncoderModel::param_refs`] order.
pub struct BoundEncoder {
    config: EncoderConfig,
    token_embedding: Tensor,
    pos_embedding: Tensor,
    blocks: Vec<BoundBlock>,
    handles: Vec<Tensor>,
}

impl BoundEncoder {
    /// Weight handles in the canonical parameter order.
    pub fn handles(&self) -> &[Tensor] {
        &self.handles
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Tape-recorded forward of one unpadded sample, mirroring the plain
    /// path op for op.
    pub fn forward_trace<F: Scalar>(&self, g: &mut Graph<F>, tokens: &[u32]) -> Result<GraphTrace> {
        if tokens.is_empty() {
            return Err(LeapError::degenerate("empty token sequence"));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(LeapError::dimension(format!(
                "sequence length {} exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        let t = tokens.len();
        let d = self.config.hidden_dim;
        let dh = self.config.head_dim();
        let indices: Vec<usize> = tokens.iter().map(|&x| x as usize).collect();
        let positions: Vec<usize> = (0..t).collect();
        let tok = g.gather_rows(self.token_embedding, &indices)?;
        let pos = g.gather_rows(self.pos_embedding, &positions)?;
        let mut x = g.add(tok, pos)?;

        let mut pooled = Vec::with_capacity(self.config.num_layers);
        let mut normalized = Vec::with_capacity(self.config.num_layers);
        for b in &self.blocks {
            let xn = g.layer_norm(x, b.ln1_gain, b.ln1_bias, LN_EPS)?;
            let mut attn: Option<Tensor> = None;
            for h in 0..self.config.num_heads {
                let q = g.matmul(xn, b.wq[h])?;
                let k = g.matmul(xn, b.wk[h])?;
                let v = g.matmul(xn, b.wv[h])?;
                let kt = g.transpose(k)?;
                let scores = g.matmul(q, kt)?;
                let scaled = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
                let probs = g.softmax_rows(scaled)?;
                let ctx = g.matmul(probs, v)?;
                let head_out = g.matmul(ctx, b.wo[h])?;
                attn = Some(match attn {
                    None => head_out,
                    Some(acc) => g.add(acc, head_out)?,
                });
            }
            x = g.add(x, attn.expect("at least one head"))?;

            let xn2 = g.layer_norm(x, b.ln2_gain, b.ln2_bias, LN_EPS)?;
            let f1 = g.matmul(xn2, b.w1)?;
            let f1b = g.add_row(f1, b.b1)?;
            let act = g.gelu(f1b)?;
            let f2 = g.matmul(act, b.w2)?;
            let f2b = g.add_row(f2, b.b2)?;
            x = g.add(x, f2b)?;

            let p = g.mean_rows_prefix(x, t)?;
            let e = g.normalize(p)?;
            pooled.push(p);
            normalized.push(e);
        }
        let _ = d;
        let final_embedding = *normalized.last().unwrap();
        Ok(GraphTrace { pooled, normalized, final_embedding })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::kernels::cosine;

    fn small_config() -> EncoderConfig {
        EncoderConfig {
            num_layers: 3,
            hidden_dim: 16,
            num_heads: 2,
            ff_dim: 24,
            vocab_size: 50,
            max_seq_len: 12,
            pooling: Pooling::Mean,
        }
    }

    fn small_model() -> EncoderModel<f64> {
        EncoderModel::init(small_config(), 42, 0.2).unwrap()
    }

    #[test]
    fn encode_final_matches_traced_final_embedding_bitwise() {
        let model = small_model();
        let tokens: Vec<u32> = vec![4, 9, 17, 2, 30, 7];
        let traced = model.forward_trace(&tokens, None).unwrap();
        let direct = model.encode_final(&tokens, None).unwrap();
        assert_eq!(direct, traced.final_embedding);

        let mask = vec![true, true, true, true, false, false];
        let traced = model.forward_trace(&tokens, Some(&mask)).unwrap();
        let direct = model.encode_final(&tokens, Some(&mask)).unwrap();
        assert_eq!(direct, traced.final_embedding);
    }

    #[test]
    fn config_rejects_bad_shapes() {
        let mut c = small_config();
        c.num_heads = 3;
        assert!(matches!(c.validate(), Err(LeapError::Config(_))));
        let mut c = small_config();
        c.num_layers = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn mean_pool_examples() {
        let h = TensorData::matrix(2, 2, vec![1.0, 1.0, 3.0, 3.0]).unwrap();
        let both = mean_pool(&h, &[true, true]).unwrap();
        assert_eq!(both.data(), &[2.0, 2.0]);
        let first = mean_pool(&h, &[true, false]).unwrap();
        assert_eq!(first.data(), &[1.0, 1.0]);
        assert!(matches!(mean_pool(&h, &[false, false]), Err(LeapError::Degenerate(_))));
    }

    #[test]
    fn mean_pool_matches_loop_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (rows, cols) = (9, 7);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h = TensorData::matrix(rows, cols, data.clone()).unwrap();
        let mask: Vec<bool> = (0..rows).map(|_| rng.gen_bool(0.7)).collect();
        if !mask.iter().any(|&b| b) {
            return;
        }
        let got = mean_pool(&h, &mask).unwrap();
        for c in 0..cols {
            let mut sum = 0.0;
            let mut n = 0.0;
            for r in 0..rows {
                if mask[r] {
                    sum += data[r * cols + c];
                    n += 1.0;
                }
            }
            assert!((got.data()[c] - sum / n).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_map_examples() {
        assert_eq!(uniform_layer_map(12, 24).unwrap(), (1..=12).map(|l| 2 * l).collect::<Vec<_>>());
        assert_eq!(uniform_layer_map(5, 5).unwrap(), vec![1, 2, 3, 4, 5]);
        let m = uniform_layer_map(6, 8).unwrap();
        assert_eq!(*m.last().unwrap(), 8);
        assert!(m.windows(2).all(|w| w[0] <= w[1]));
        assert!(matches!(uniform_layer_map(8, 6), Err(LeapError::Contract(_))));
    }

    #[test]
    fn trace_has_all_layers_and_unit_final_norm() {
        let model = small_model();
        let trace = model.forward_trace(&[1, 2, 3, 4], None).unwrap();
        assert_eq!(trace.pooled.len(), 3);
        let n = kernels::l2_norm(trace.final_embedding.data());
        assert!((n - 1.0).abs() < 1e-9);
    }

    #[test]
    fn token_validation() {
        let model = small_model();
        assert!(matches!(model.forward_trace(&[], None), Err(LeapError::Degenerate(_))));
        assert!(matches!(model.forward_trace(&[99], None), Err(LeapError::Dimension(_))));
        let long: Vec<u32> = vec![0; 13];
        assert!(matches!(model.forward_trace(&long, None), Err(LeapError::Dimension(_))));
    }

    #[test]
    fn single_token_pooled_equals_hidden_state() {
        // Mean over one position is that position.
        let model = small_model();
        let trace = model.forward_trace(&[7], None).unwrap();
        let mut sw = model.stepwise(&[7]).unwrap();
        let p1 = sw.step().unwrap();
        assert_eq!(trace.pooled[0], p1);
    }

    #[test]
    fn prefix_property_via_truncated_model() {
        let model = small_model();
        let full = model.forward_trace(&[5, 6, 7, 8, 9], None).unwrap();
        let cut = model.truncate(2).unwrap();
        let short = cut.forward_trace(&[5, 6, 7, 8, 9], None).unwrap();
        for l in 0..2 {
            assert_eq!(full.pooled[l], short.pooled[l], "layer {l} diverged");
        }
    }

    #[test]
    fn stepwise_matches_full_trace_bitwise() {
        let model = small_model();
        let tokens = [3, 1, 4, 1, 5, 9];
        let trace = model.forward_trace(&tokens, None).unwrap();
        let mut sw = model.stepwise(&tokens).unwrap();
        let mut l = 0;
        while let Some(p) = sw.step() {
            assert_eq!(trace.pooled[l], p, "layer {l} diverged");
            l += 1;
        }
        assert_eq!(l, 3);
    }

    #[test]
    fn suffix_padding_never_changes_pooled_vectors() {
        let model = small_model();
        let tokens = [11, 22, 33];
        let clean = model.forward_trace(&tokens, None).unwrap();
        let padded_tokens = [11, 22, 33, 0, 0, 0];
        let mask = [true, true, true, false, false, false];
        let padded = model.forward_trace(&padded_tokens, Some(&mask)).unwrap();
        for l in 0..3 {
            assert_eq!(clean.pooled[l], padded.pooled[l], "layer {l} affected by padding");
        }
        assert_eq!(clean.final_embedding, padded.final_embedding);
    }

    #[test]
    fn residual_dominant_init_keeps_layers_aligned() {
        // Near-zero weights make each block close to identity, so every
        // layer's pooled vector points where the final one does.
        let model = EncoderModel::<f64>::init(small_config(), 7, 1e-3).unwrap();
        let trace = model.forward_trace(&[10, 20, 30, 40], None).unwrap();
        let last = trace.pooled.last().unwrap();
        for p in &trace.pooled {
            let c = cosine(p.data(), last.data()).unwrap();
            assert!(c > 0.99, "cos {c} too low for residual-dominant blocks");
        }
    }

    #[test]
    fn graph_forward_matches_plain_forward_bitwise() {
        let model = small_model();
        let tokens = [2, 7, 1, 8, 2, 8];
        let plain = model.forward_trace(&tokens, None).unwrap();

        let mut g = Graph::new();
        let bound = model.bind(&mut g, true);
        let gtrace = bound.forward_trace(&mut g, &tokens).unwrap();
        for l in 0..3 {
            assert_eq!(
                g.value(gtrace.pooled[l]).data(),
                plain.pooled[l].data(),
                "layer {l} diverged between graph and plain paths"
            );
        }
        assert_eq!(g.value(gtrace.final_embedding).data(), plain.final_embedding.data());
    }

    #[test]
    fn bind_handle_order_matches_param_refs() {
        let model = small_model();
        let mut g = Graph::new();
        let bound = model.bind(&mut g, true);
        let refs = model.param_refs();
        assert_eq!(bound.handles().len(), refs.len());
        for (h, (name, t)) in bound.handles().iter().zip(&refs) {
            assert_eq!(g.shape(*h), t.shape(), "handle order mismatch at {name}");
            assert_eq!(g.value(*h).data(), t.data(), "handle value mismatch at {name}");
        }
    }

    #[test]
    fn block_param_range_isolates_blocks() {
        let model = small_model();
        let refs = model.param_refs();
        for l in 0..3 {
            for i in model.block_param_range(l) {
                assert!(refs[i].0.starts_with(&format!("block{l}.")), "{} not in block {l}", refs[i].0);
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = small_model();
        model.save_weights(&path).unwrap();
        let loaded = EncoderModel::<f64>::load_weights(&path).unwrap();
        assert_eq!(model, loaded);
        let a = model.forward_trace(&[1, 2, 3], None).unwrap();
        let b = loaded.forward_trace(&[1, 2, 3], None).unwrap();
        assert_eq!(a.final_embedding, b.final_embedding);
    }

    #[test]
    fn checkpoint_truncation_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        small_model().save_weights(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 100]).unwrap();
        assert!(matches!(
            EncoderModel::<f64>::load_weights(&path),
            Err(LeapError::Checkpoint(_))
        ));
    }

    #[test]
    fn checkpoint_bitflip_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        small_model().save_weights(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            EncoderModel::<f64>::load_weights(&path),
            Err(LeapError::Checkpoint(_))
        ));
    }

    #[test]
    fn checkpoint_wrong_magic_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        std::fs::write(&path, b"NOTACKPTxxxxxxxxxxxxxxxx").unwrap();
        assert!(matches!(
            EncoderModel::<f64>::load_weights(&path),
            Err(LeapError::Checkpoint(_))
        ));
    }

    #[test]
    fn projection_applies_as_matrix_product() {
        let proj = Projection::<f64>::init(4, 6, 9);
        assert_eq!(proj.weight.shape(), &[4, 6]);
        let mut g = Graph::new();
        let w = proj.bind(&mut g);
        let v = g.constant(TensorData::vector(vec![1.0, 0.0, 0.0, 0.0]));
        let out = Projection::<f64>::apply(&mut g, w, v).unwrap();
        assert_eq!(g.shape(out), &[6]);
        assert_eq!(g.value(out).data(), &proj.weight.data()[0..6]);
    }
}
