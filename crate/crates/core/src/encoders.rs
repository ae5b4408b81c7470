//! Patch-embedding image encoder, token text encoder and the single shared
//! cross-attention block ("Q-Former-lite") whose maps feed the attention
//! alignment loss.
//!
//! Queries come from linear projections of image region tokens; keys and
//! values come from text token features. No learned query tokens.

use thiserror::Error;

use crate::data::Image;
use crate::numerics::{Graph, ParamId, Params, Rng, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncoderError {
    #[error("image {width}x{height} is not divisible by patch size {patch}")]
    NotDivisible {
        width: usize,
        height: usize,
        patch: usize,
    },
    #[error("image has {0} channels, expected 3")]
    Channels(usize),
    #[error("image {got:?} does not match encoder geometry {expected:?}")]
    Geometry {
        got: (usize, usize),
        expected: (usize, usize),
    },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("sequence length {len} exceeds maximum {max}")]
    TooLong { len: usize, max: usize },
    #[error("token id {id} outside vocabulary of size {vocab}")]
    OutOfVocabulary { id: usize, vocab: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn normal_tensor(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.normal(0.0, std)).collect();
    Tensor::new(shape.to_vec(), data).expect("positive shape")
}

/// `x · W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(params: &mut Params, rng: &mut Rng, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        let std = 1.0 / (fan_in as f64).sqrt();
        let weight = params.add(format!("{name}.w"), normal_tensor(rng, &[fan_in, fan_out], std));
        let bias = bias.then(|| params.add(format!("{name}.b"), Tensor::zeros(&[fan_out])));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, params: &Params, x: Var) -> Result<Var, TensorError> {
        let w = g.param(params, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(params, b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Layer norm with learned gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new(params: &mut Params, name: &str, dim: usize) -> Self {
        Self {
            gain: params.add(format!("{name}.g"), Tensor::filled(&[dim], 1.0)),
            shift: params.add(format!("{name}.b"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, params: &Params, x: Var) -> Result<Var, TensorError> {
        let n = g.layer_norm_rows(x);
        let gain = g.param(params, self.gain);
        let shift = g.param(params, self.shift);
        let y = g.mul_row(n, gain)?;
        g.add_row(y, shift)
    }
}

/// Pre-norm transformer block: multi-head self-attention then a GELU MLP,
/// each wrapped in a residual connection.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    dim: usize,
    heads: usize,
    ln1: LayerNorm,
    qkv: Linear,
    out: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl TransformerBlock {
    pub fn new(params: &mut Params, rng: &mut Rng, name: &str, dim: usize, heads: usize, mlp_ratio: usize) -> Self {
        assert!(heads > 0 && dim % heads == 0, "embed dim {dim} not divisible by {heads} heads");
        let hidden = dim * mlp_ratio;
        Self {
            dim,
            heads,
            ln1: LayerNorm::new(params, &format!("{name}.ln1"), dim),
            qkv: Linear::new(params, rng, &format!("{name}.qkv"), dim, 3 * dim, true),
            out: Linear::new(params, rng, &format!("{name}.attn_out"), dim, dim, true),
            ln2: LayerNorm::new(params, &format!("{name}.ln2"), dim),
            fc1: Linear::new(params, rng, &format!("{name}.fc1"), dim, hidden, true),
            fc2: Linear::new(params, rng, &format!("{name}.fc2"), hidden, dim, true),
        }
    }

    pub fn forward(&self, g: &mut Graph, params: &Params, x: Var) -> Result<Var, TensorError> {
        let h = self.ln1.forward(g, params, x)?;
        let qkv = self.qkv.forward(g, params, h)?;
        let head_dim = self.dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let q = g.slice_cols(qkv, head * head_dim, head_dim)?;
            let k = g.slice_cols(qkv, self.dim + head * head_dim, head_dim)?;
            let v = g.slice_cols(qkv, 2 * self.dim + head * head_dim, head_dim)?;
            let scores = g.matmul_nt(q, k)?;
            let scores = g.scale(scores, scale);
            let att = g.softmax_rows(scores);
            heads.push(g.matmul(att, v)?);
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)?
        };
        let attn = self.out.forward(g, params, merged)?;
        let x = g.add(x, attn)?;

        let h = self.ln2.forward(g, params, x)?;
        let h = self.fc1.forward(g, params, h)?;
        let h = g.gelu(h);
        let h = self.fc2.forward(g, params, h)?;
        g.add(x, h)
    }
}

/// Token features plus their mean-pooled, L2-normalized summary.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub tokens: Var,
    pub pooled: Var,
}

fn pool(g: &mut Graph, tokens: Var) -> Result<Var, TensorError> {
    let mean = g.mean_rows(tokens);
    let row = g.reshape(mean, &[1, g.value(mean).numel()])?;
    let unit = g.normalize_rows(row)?;
    let n = g.value(unit).numel();
    g.reshape(unit, &[n])
}

/// Patch-embedding transformer over square RGB images.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub patch_proj: Linear,
    pub pos: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub final_norm: LayerNorm,
}

impl ImageEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut Params,
        rng: &mut Rng,
        name: &str,
        image_size: usize,
        patch_size: usize,
        embed_dim: usize,
        layers: usize,
        heads: usize,
        mlp_ratio: usize,
    ) -> Self {
        assert!(patch_size > 0 && image_size % patch_size == 0);
        let regions = (image_size / patch_size).pow(2);
        let patch_dim = 3 * patch_size * patch_size;
        let patch_proj = Linear::new(params, rng, &format!("{name}.patch"), patch_dim, embed_dim, true);
        let pos = params.add(format!("{name}.pos"), normal_tensor(rng, &[regions, embed_dim], 1.0));
        let blocks = (0..layers)
            .map(|l| TransformerBlock::new(params, rng, &format!("{name}.block{l}"), embed_dim, heads, mlp_ratio))
            .collect();
        let final_norm = LayerNorm::new(params, &format!("{name}.ln_f"), embed_dim);
        Self {
            image_size,
            patch_size,
            embed_dim,
            patch_proj,
            pos,
            blocks,
            final_norm,
        }
    }

    pub fn num_regions(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    /// Flattens non-overlapping patches (row-major patch order) into
    /// `[regions × 3·p²]`, pixel values mapped to `[-1, 1]`.
    pub fn patchify(&self, img: &Image) -> Result<Tensor, EncoderError> {
        let p = self.patch_size;
        if img.channels != 3 {
            return Err(EncoderError::Channels(img.channels));
        }
        if img.width % p != 0 || img.height % p != 0 {
            return Err(EncoderError::NotDivisible {
                width: img.width,
                height: img.height,
                patch: p,
            });
        }
        if (img.width, img.height) != (self.image_size, self.image_size) {
            return Err(EncoderError::Geometry {
                got: (img.width, img.height),
                expected: (self.image_size, self.image_size),
            });
        }
        let (gw, gh) = (img.width / p, img.height / p);
        let mut data = Vec::with_capacity(gw * gh * 3 * p * p);
        for py in 0..gh {
            for px in 0..gw {
                for y in 0..p {
                    for x in 0..p {
                        for &c in img.pixel(px * p + x, py * p + y) {
                            data.push(c as f64 / 127.5 - 1.0);
                        }
                    }
                }
            }
        }
        Ok(Tensor::new(vec![gw * gh, 3 * p * p], data)?)
    }

    /// Region features `[r × d]` (pre-normalization) and pooled unit vector.
    pub fn encode(&self, g: &mut Graph, params: &Params, img: &Image) -> Result<Encoded, EncoderError> {
        let patches = g.constant(self.patchify(img)?);
        let x = self.patch_proj.forward(g, params, patches)?;
        let pos = g.param(params, self.pos);
        let mut x = g.add(x, pos)?;
        for block in &self.blocks {
            x = block.forward(g, params, x)?;
        }
        let tokens = self.final_norm.forward(g, params, x)?;
        let pooled = pool(g, tokens)?;
        Ok(Encoded { tokens, pooled })
    }
}

/// Token-embedding transformer. Soft prompt vectors can be prepended to the
/// embedded tokens.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub vocab_size: usize,
    pub max_len: usize,
    pub embed_dim: usize,
    pub token_embed: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub final_norm: LayerNorm,
}

impl TextEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut Params,
        rng: &mut Rng,
        name: &str,
        vocab_size: usize,
        max_len: usize,
        embed_dim: usize,
        layers: usize,
        heads: usize,
        mlp_ratio: usize,
    ) -> Self {
        let token_embed = params.add(format!("{name}.tok"), normal_tensor(rng, &[vocab_size, embed_dim], 1.0));
        let pos = params.add(format!("{name}.pos"), normal_tensor(rng, &[max_len, embed_dim], 0.02));
        let blocks = (0..layers)
            .map(|l| TransformerBlock::new(params, rng, &format!("{name}.block{l}"), embed_dim, heads, mlp_ratio))
            .collect();
        let final_norm = LayerNorm::new(params, &format!("{name}.ln_f"), embed_dim);
        Self {
            vocab_size,
            max_len,
            embed_dim,
            token_embed,
            pos,
            blocks,
            final_norm,
        }
    }

    fn check_tokens(&self, tokens: &[usize], extra: usize) -> Result<(), EncoderError> {
        if tokens.is_empty() {
            return Err(EncoderError::EmptySequence);
        }
        if tokens.len() + extra > self.max_len {
            return Err(EncoderError::TooLong {
                len: tokens.len() + extra,
                max: self.max_len,
            });
        }
        if let Some(&id) = tokens.iter().find(|&&id| id >= self.vocab_size) {
            return Err(EncoderError::OutOfVocabulary {
                id,
                vocab: self.vocab_size,
            });
        }
        Ok(())
    }

    fn run(&self, g: &mut Graph, params: &Params, embedded: Var) -> Result<Encoded, EncoderError> {
        let len = g.value(embedded).rows();
        let table = g.param(params, self.pos);
        let positions: Vec<usize> = (0..len).collect();
        let pos = g.gather_rows(table, &positions)?;
        let mut x = g.add(embedded, pos)?;
        for block in &self.blocks {
            x = block.forward(g, params, x)?;
        }
        let tokens = self.final_norm.forward(g, params, x)?;
        let pooled = pool(g, tokens)?;
        Ok(Encoded { tokens, pooled })
    }

    /// Per-token features `[t × d]` and pooled unit vector.
    pub fn encode(&self, g: &mut Graph, params: &Params, tokens: &[usize]) -> Result<Encoded, EncoderError> {
        self.check_tokens(tokens, 0)?;
        let table = g.param(params, self.token_embed);
        let embedded = g.gather_rows(table, tokens)?;
        self.run(g, params, embedded)
    }

    /// Encodes `[prompt ; tokens]` where `prompt` is a `[p × d]` sequence of
    /// soft prompt vectors.
    pub fn encode_with_prompt(
        &self,
        g: &mut Graph,
        params: &Params,
        prompt: Var,
        tokens: &[usize],
    ) -> Result<Encoded, EncoderError> {
        let prompt_len = g.value(prompt).rows();
        self.check_tokens(tokens, prompt_len)?;
        let table = g.param(params, self.token_embed);
        let embedded = g.gather_rows(table, tokens)?;
        let seq = g.concat_rows(&[prompt, embedded])?;
        self.run(g, params, seq)
    }
}

/// Single-head cross-attention from image regions (queries) to text tokens
/// (keys/values). One instance serves both the reference and the target
/// branch.
#[derive(Clone, Debug)]
pub struct CrossAttentionBlock {
    pub embed_dim: usize,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct CrossAttention {
    /// `[r × d]`, the output-projected attended values.
    pub attended: Var,
    /// `[r × t]`, row-stochastic attention map.
    pub map: Var,
}

impl CrossAttentionBlock {
    pub fn new(params: &mut Params, rng: &mut Rng, name: &str, dim: usize) -> Self {
        let std = 1.0 / (dim as f64).sqrt();
        let mut mat = |suffix: &str| params.add(format!("{name}.{suffix}"), normal_tensor(rng, &[dim, dim], std));
        Self {
            embed_dim: dim,
            w_q: mat("w_q"),
            w_k: mat("w_k"),
            w_v: mat("w_v"),
            w_o: mat("w_o"),
        }
    }

    /// `map = softmax_rows((R·W_q)(T·W_k)ᵀ / √d)`,
    /// `attended = (map · T·W_v) · W_o`.
    pub fn forward(&self, g: &mut Graph, params: &Params, regions: Var, text: Var) -> Result<CrossAttention, TensorError> {
        let (r, t) = (g.value(regions), g.value(text));
        if r.cols() != self.embed_dim || t.cols() != self.embed_dim {
            return Err(TensorError::DimensionMismatch {
                op: "cross_attention",
                left: r.shape().to_vec(),
                right: t.shape().to_vec(),
            });
        }
        let w_q = g.param(params, self.w_q);
        let w_k = g.param(params, self.w_k);
        let w_v = g.param(params, self.w_v);
        let w_o = g.param(params, self.w_o);
        let q = g.matmul(regions, w_q)?;
        let k = g.matmul(text, w_k)?;
        let v = g.matmul(text, w_v)?;
        let logits = g.matmul_nt(q, k)?;
        let logits = g.scale(logits, 1.0 / (self.embed_dim as f64).sqrt());
        let map = g.softmax_rows(logits);
        let mixed = g.matmul(map, v)?;
        let attended = g.matmul(mixed, w_o)?;
        Ok(CrossAttention { attended, map })
    }
}

/// Reference-branch and target-branch maps for one triplet.
#[derive(Clone, Copy, Debug)]
pub struct AttentionPair {
    pub reference: Var,
    pub target: Var,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image_encoder(params: &mut Params, rng: &mut Rng) -> ImageEncoder {
        ImageEncoder::new(params, rng, "img", 32, 8, 16, 1, 2, 2)
    }

    fn test_image(seed: u8) -> Image {
        let mut img = Image::filled(32, 32, [0, 0, 0]);
        for y in 8..20 {
            for x in 4..(10 + seed as usize) {
                img.set_pixel(x, y, [200, seed.wrapping_mul(40), 30]);
            }
        }
        img
    }

    #[test]
    fn image_regions_shape_and_unit_pool() {
        let mut params = Params::new();
        let mut rng = Rng::new(1);
        let enc = image_encoder(&mut params, &mut rng);
        let mut g = Graph::new();
        let out = enc.encode(&mut g, &params, &test_image(3)).unwrap();
        assert_eq!(g.value(out.tokens).shape(), &[16, 16]);
        assert!((g.value(out.pooled).l2_norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn image_encoding_is_deterministic() {
        let mut params = Params::new();
        let mut rng = Rng::new(1);
        let enc = image_encoder(&mut params, &mut rng);
        let img = test_image(2);
        let mut g = Graph::new();
        let a = enc.encode(&mut g, &params, &img).unwrap();
        let b = enc.encode(&mut g, &params, &img.clone()).unwrap();
        assert_eq!(g.value(a.tokens), g.value(b.tokens));
        assert_eq!(g.value(a.pooled), g.value(b.pooled));
    }

    #[test]
    fn image_errors() {
        let mut params = Params::new();
        let mut rng = Rng::new(1);
        let enc = image_encoder(&mut params, &mut rng);
        let mut g = Graph::new();
        let odd = Image::filled(30, 32, [0, 0, 0]);
        assert!(matches!(
            enc.encode(&mut g, &params, &odd),
            Err(EncoderError::NotDivisible { .. })
        ));
        let gray = Image::new(32, 32, 1, vec![0; 1024]).unwrap();
        assert!(matches!(
            enc.encode(&mut g, &params, &gray),
            Err(EncoderError::Channels(1))
        ));
    }

    #[test]
    fn scaling_patch_weights_keeps_unit_norm() {
        let mut params = Params::new();
        let mut rng = Rng::new(5);
        let enc = image_encoder(&mut params, &mut rng);
        for c in [0.01, 3.0, 250.0] {
            let mut scaled = params.clone();
            scaled
                .value_mut(enc.patch_proj.weight)
                .data_mut()
                .iter_mut()
                .for_each(|w| *w *= c);
            let mut g = Graph::new();
            let out = enc.encode(&mut g, &scaled, &test_image(1)).unwrap();
            assert!((g.value(out.pooled).l2_norm() - 1.0).abs() < 1e-9);
        }
    }

    fn text_encoder(params: &mut Params, rng: &mut Rng) -> TextEncoder {
        TextEncoder::new(params, rng, "txt", 10, 8, 16, 1, 2, 2)
    }

    #[test]
    fn text_shapes_and_errors() {
        let mut params = Params::new();
        let mut rng = Rng::new(2);
        let enc = text_encoder(&mut params, &mut rng);
        let mut g = Graph::new();
        let out = enc.encode(&mut g, &params, &[1, 2, 3]).unwrap();
        assert_eq!(g.value(out.tokens).shape(), &[3, 16]);
        assert!((g.value(out.pooled).l2_norm() - 1.0).abs() < 1e-9);
        assert_eq!(
            enc.encode(&mut g, &params, &[]).unwrap_err(),
            EncoderError::EmptySequence
        );
        assert_eq!(
            enc.encode(&mut g, &params, &[1, 10]).unwrap_err(),
            EncoderError::OutOfVocabulary { id: 10, vocab: 10 }
        );
        assert!(matches!(
            enc.encode(&mut g, &params, &[1; 9]),
            Err(EncoderError::TooLong { .. })
        ));
    }

    #[test]
    fn single_token_pool_is_normalized_feature() {
        let mut params = Params::new();
        let mut rng = Rng::new(2);
        let enc = text_encoder(&mut params, &mut rng);
        let mut g = Graph::new();
        let out = enc.encode(&mut g, &params, &[4]).unwrap();
        let feat = g.value(out.tokens).clone();
        let norm = feat.l2_norm();
        for (p, f) in g.value(out.pooled).data().iter().zip(feat.data()) {
            assert!((p - f / norm).abs() < 1e-12);
        }
    }

    #[test]
    fn permutation_invariance_without_positions() {
        let mut params = Params::new();
        let mut rng = Rng::new(3);
        let enc = text_encoder(&mut params, &mut rng);
        params
            .value_mut(enc.pos)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.0);
        let mut g = Graph::new();
        let a = enc.encode(&mut g, &params, &[1, 5, 7, 2]).unwrap();
        let b = enc.encode(&mut g, &params, &[7, 2, 1, 5]).unwrap();
        for (x, y) in g.value(a.pooled).data().iter().zip(g.value(b.pooled).data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn prompt_changes_text_output() {
        let mut params = Params::new();
        let mut rng = Rng::new(3);
        let enc = text_encoder(&mut params, &mut rng);
        let mut g = Graph::new();
        let p1 = g.constant(Tensor::matrix(&[vec![0.1; 16], vec![-0.3; 16]]));
        let mut other = vec![0.1; 16];
        other[3] = 2.0;
        let p2 = g.constant(Tensor::matrix(&[other, vec![-0.3; 16]]));
        let a = enc.encode_with_prompt(&mut g, &params, p1, &[1, 2]).unwrap();
        let b = enc.encode_with_prompt(&mut g, &params, p2, &[1, 2]).unwrap();
        assert_eq!(g.value(a.tokens).shape(), &[4, 16]);
        assert_ne!(g.value(a.pooled), g.value(b.pooled));
    }

    fn direct_attention(regions: &Tensor, text: &Tensor, wq: &Tensor, wk: &Tensor) -> Vec<Vec<f64>> {
        // Independent evaluation straight from the formula, row by row.
        let d = regions.cols();
        let proj = |x: &[f64], w: &Tensor| -> Vec<f64> {
            (0..d)
                .map(|c| (0..d).map(|k| x[k] * w.at(k, c)).sum())
                .collect()
        };
        let keys: Vec<Vec<f64>> = (0..text.rows()).map(|j| proj(text.row(j), wk)).collect();
        (0..regions.rows())
            .map(|i| {
                let q = proj(regions.row(i), wq);
                let logits: Vec<f64> = keys
                    .iter()
                    .map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
                    .collect();
                let exps: Vec<f64> = logits.iter().map(|l| l.exp()).collect();
                let z: f64 = exps.iter().sum();
                exps.iter().map(|e| e / z).collect()
            })
            .collect()
    }

    #[test]
    fn cross_attention_map_matches_direct_formula() {
        let mut params = Params::new();
        let mut rng = Rng::new(11);
        let block = CrossAttentionBlock::new(&mut params, &mut rng, "x", 8);
        let regions = normal_tensor(&mut rng, &[4, 8], 1.0);
        let text = normal_tensor(&mut rng, &[3, 8], 1.0);
        let mut g = Graph::new();
        let r = g.constant(regions.clone());
        let t = g.constant(text.clone());
        let out = block.forward(&mut g, &params, r, t).unwrap();
        let map = g.value(out.map);
        assert_eq!(map.shape(), &[4, 3]);
        let expected = direct_attention(&regions, &text, params.value(block.w_q), params.value(block.w_k));
        for i in 0..4 {
            let row_sum: f64 = map.row(i).iter().sum();
            assert!((row_sum - 1.0).abs() < 1e-9);
            for j in 0..3 {
                assert!((map.at(i, j) - expected[i][j]).abs() < 1e-10);
                assert!(map.at(i, j) > 0.0);
            }
        }
        assert_eq!(g.value(out.attended).shape(), &[4, 8]);
    }

    #[test]
    fn zero_query_weights_give_uniform_rows() {
        let mut params = Params::new();
        let mut rng = Rng::new(12);
        let block = CrossAttentionBlock::new(&mut params, &mut rng, "x", 8);
        params
            .value_mut(block.w_q)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.0);
        let mut g = Graph::new();
        let r = g.constant(normal_tensor(&mut rng, &[5, 8], 1.0));
        let t = g.constant(normal_tensor(&mut rng, &[4, 8], 1.0));
        let out = block.forward(&mut g, &params, r, t).unwrap();
        assert!(g.value(out.map).data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn single_token_map_is_all_ones() {
        let mut params = Params::new();
        let mut rng = Rng::new(13);
        let block = CrossAttentionBlock::new(&mut params, &mut rng, "x", 8);
        let mut g = Graph::new();
        let r = g.constant(normal_tensor(&mut rng, &[5, 8], 1.0));
        let t = g.constant(normal_tensor(&mut rng, &[1, 8], 1.0));
        let out = block.forward(&mut g, &params, r, t).unwrap();
        assert_eq!(g.value(out.map).shape(), &[5, 1]);
        assert!(g.value(out.map).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn cross_attention_dimension_mismatch() {
        let mut params = Params::new();
        let mut rng = Rng::new(13);
        let block = CrossAttentionBlock::new(&mut params, &mut rng, "x", 8);
        let mut g = Graph::new();
        let r = g.constant(Tensor::zeros(&[5, 6]));
        let t = g.constant(Tensor::zeros(&[2, 8]));
        assert!(block.forward(&mut g, &params, r, t).is_err());
    }
}
