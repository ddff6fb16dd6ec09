//! Toy dual encoder: a patch transformer for images and a causal
//! transformer for token sequences.
//!
//! Both encoders process a whole batch as one stacked matrix so the linear
//! layers run as single matrix products; attention is restricted to each
//! sample's rows through key ranges.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::{Array, KeyRange, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{init_embedding, init_matrix, Bound, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d: 64,
            n_layers: 2,
            n_heads: 4,
            patch_size: 8,
            image_size: 32,
            vocab_size: 64,
            max_text_len: 77,
            mlp_ratio: 2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n_heads == 0 || self.d % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d={} must be a positive multiple of n_heads={}",
                self.d, self.n_heads
            )));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size={} not divisible by patch_size={}",
                self.image_size, self.patch_size
            )));
        }
        if self.vocab_size == 0 || self.max_text_len < 2 || self.mlp_ratio == 0 {
            return Err(Error::Config("vocab_size, max_text_len and mlp_ratio must be usable".into()));
        }
        Ok(())
    }

    /// Local image tokens per image.
    pub fn num_patches(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }
}

/// Per-image encoder output.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTokens {
    /// `n × d` local patch embeddings.
    pub v_loc: Array,
    /// `d` global embedding.
    pub v_g: Array,
}

/// Per-caption encoder output.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding {
    pub t_g: Array,
    /// `m × d` per-token embeddings.
    pub t_loc: Option<Array>,
}

fn init_block<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: &EncoderConfig, rng: &mut R) {
    let d = cfg.d;
    let hidden = d * cfg.mlp_ratio;
    let depth_scale = 1.0 / (2.0 * cfg.n_layers as f64).sqrt();
    store.insert(format!("{prefix}.ln1.g"), Array::filled(&[d], 1.0), false);
    store.insert(format!("{prefix}.ln1.b"), Array::zeros(&[d]), false);
    for w in ["wq", "wk", "wv"] {
        store.insert(format!("{prefix}.attn.{w}"), init_matrix(rng, d, d, 1.0), true);
        store.insert(format!("{prefix}.attn.b{}", &w[1..]), Array::zeros(&[d]), false);
    }
    store.insert(format!("{prefix}.attn.wo"), init_matrix(rng, d, d, depth_scale), true);
    store.insert(format!("{prefix}.attn.bo"), Array::zeros(&[d]), false);
    store.insert(format!("{prefix}.ln2.g"), Array::filled(&[d], 1.0), false);
    store.insert(format!("{prefix}.ln2.b"), Array::zeros(&[d]), false);
    store.insert(format!("{prefix}.mlp.w1"), init_matrix(rng, d, hidden, 1.0), true);
    store.insert(format!("{prefix}.mlp.b1"), Array::zeros(&[hidden]), false);
    store.insert(format!("{prefix}.mlp.w2"), init_matrix(rng, hidden, d, depth_scale), true);
    store.insert(format!("{prefix}.mlp.b2"), Array::zeros(&[d]), false);
}

pub(crate) fn init_image_encoder<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut R) {
    let d = cfg.d;
    store.insert("img.patch.w", init_matrix(rng, cfg.patch_dim(), d, 1.0), true);
    store.insert("img.patch.b", Array::zeros(&[d]), false);
    store.insert("img.cls", init_embedding(rng, 1, d, 0.5), false);
    store.insert("img.pos", init_embedding(rng, cfg.num_patches() + 1, d, 0.5), false);
    for l in 0..cfg.n_layers {
        init_block(store, &format!("img.blocks.{l}"), cfg, rng);
    }
    store.insert("img.ln_f.g", Array::filled(&[d], 1.0), false);
    store.insert("img.ln_f.b", Array::zeros(&[d]), false);
    store.insert("img.proj", init_matrix(rng, d, d, 1.0), true);
}

pub(crate) fn init_text_encoder<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut R) {
    let d = cfg.d;
    store.insert("txt.tok", init_embedding(rng, cfg.vocab_size, d, 1.0), true);
    store.insert("txt.pos", init_embedding(rng, cfg.max_text_len, d, 0.5), false);
    for l in 0..cfg.n_layers {
        init_block(store, &format!("txt.blocks.{l}"), cfg, rng);
    }
    store.insert("txt.ln_f.g", Array::filled(&[d], 1.0), false);
    store.insert("txt.ln_f.b", Array::zeros(&[d]), false);
    store.insert("txt.proj", init_matrix(rng, d, d, 1.0), true);
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => tape.add_row(y, b),
        None => Ok(y),
    }
}

/// Pre-norm residual block: `x + Attn(LN(x))`, then `x + MLP(LN(x))`.
fn block(tape: &mut Tape, p: &Bound<'_>, prefix: &str, x: Var, ranges: &[KeyRange], heads: usize) -> Result<Var> {
    let v = |n: &str| p.var(&format!("{prefix}.{n}"));
    let h = tape.layer_norm(x, v("ln1.g")?, v("ln1.b")?)?;
    let q = linear(tape, h, v("attn.wq")?, Some(v("attn.bq")?))?;
    let k = linear(tape, h, v("attn.wk")?, Some(v("attn.bk")?))?;
    let val = linear(tape, h, v("attn.wv")?, Some(v("attn.bv")?))?;
    let a = tape.attention(q, k, val, ranges, heads)?;
    let a = linear(tape, a, v("attn.wo")?, Some(v("attn.bo")?))?;
    let x = tape.add(x, a)?;
    let h = tape.layer_norm(x, v("ln2.g")?, v("ln2.b")?)?;
    let h = linear(tape, h, v("mlp.w1")?, Some(v("mlp.b1")?))?;
    let h = tape.gelu(h);
    let h = linear(tape, h, v("mlp.w2")?, Some(v("mlp.b2")?))?;
    tape.add(x, h)
}

/// Encoded image batch: `count × (n + 1)` rows, the first row of every image
/// being its global token and the following `n` rows its local tokens.
#[derive(Clone, Copy, Debug)]
pub struct ImageBatch {
    pub tokens: Var,
    pub count: usize,
    pub n_local: usize,
}

impl ImageBatch {
    pub fn stride(&self) -> usize {
        self.n_local + 1
    }

    pub fn global_rows(&self) -> Vec<usize> {
        (0..self.count).map(|i| i * self.stride()).collect()
    }

    pub fn local_rows(&self) -> Vec<usize> {
        (0..self.count)
            .flat_map(|i| (1..=self.n_local).map(move |p| i * (self.n_local + 1) + p))
            .collect()
    }
}

/// Splits an `H × W × 3` image into row-major patches of
/// `patch × patch × 3` values.
pub fn patchify(pixels: &Array, cfg: &EncoderConfig) -> Result<Vec<f64>> {
    let s = cfg.image_size;
    if pixels.shape() != [s, s, 3] {
        return Err(Error::dim("encode_image", pixels.shape(), &[s, s, 3]));
    }
    let p = cfg.patch_size;
    let g = cfg.grid();
    let x = pixels.data();
    let mut out = Vec::with_capacity(s * s * 3);
    for py in 0..g {
        for px in 0..g {
            for y in 0..p {
                let start = ((py * p + y) * s + px * p) * 3;
                out.extend_from_slice(&x[start..start + p * 3]);
            }
        }
    }
    Ok(out)
}

pub fn encode_images(tape: &mut Tape, p: &Bound<'_>, cfg: &EncoderConfig, images: &[&Array]) -> Result<ImageBatch> {
    if images.is_empty() {
        return Err(Error::Input("no images to encode".into()));
    }
    let n = cfg.num_patches();
    let mut patches = Vec::with_capacity(images.len() * n * cfg.patch_dim());
    for img in images {
        patches.extend(patchify(img, cfg)?);
    }
    let b = images.len();
    let patches = tape.constant(Array::matrix(b * n, cfg.patch_dim(), patches)?);
    let emb = linear(tape, patches, p.var("img.patch.w")?, Some(p.var("img.patch.b")?))?;
    // rows: [cls, emb...]; reorder to [cls, patches of image 0, cls, ...]
    let with_cls = tape.concat_rows(&[p.var("img.cls")?, emb])?;
    let order: Vec<usize> = (0..b)
        .flat_map(|i| std::iter::once(0).chain((0..n).map(move |j| 1 + i * n + j)))
        .collect();
    let x = tape.gather_rows(with_cls, &order)?;
    let pos_idx: Vec<usize> = (0..b).flat_map(|_| 0..=n).collect();
    let pos = tape.gather_rows(p.var("img.pos")?, &pos_idx)?;
    let mut x = tape.add(x, pos)?;
    let ranges: Vec<KeyRange> = (0..b)
        .flat_map(|i| std::iter::repeat(KeyRange::new(i * (n + 1), n + 1)).take(n + 1))
        .collect();
    for l in 0..cfg.n_layers {
        x = block(tape, p, &format!("img.blocks.{l}"), x, &ranges, cfg.n_heads)?;
    }
    let x = tape.layer_norm(x, p.var("img.ln_f.g")?, p.var("img.ln_f.b")?)?;
    let tokens = tape.matmul(x, p.var("img.proj")?)?;
    Ok(ImageBatch {
        tokens,
        count: b,
        n_local: n,
    })
}

/// Encoded caption batch.
#[derive(Clone, Debug)]
pub struct TextBatch {
    /// `count × d` global embeddings (end-token rows).
    pub global: Var,
    /// All token rows, captions stacked.
    pub tokens: Var,
    /// Row span of each caption inside `tokens`.
    pub spans: Vec<KeyRange>,
}

pub fn encode_texts(tape: &mut Tape, p: &Bound<'_>, cfg: &EncoderConfig, captions: &[Vec<usize>]) -> Result<TextBatch> {
    if captions.is_empty() {
        return Err(Error::Input("no captions to encode".into()));
    }
    let mut ids = Vec::new();
    let mut positions = Vec::new();
    let mut spans = Vec::with_capacity(captions.len());
    let mut ranges = Vec::new();
    for c in captions {
        if c.is_empty() || c.len() > cfg.max_text_len {
            return Err(Error::Input(format!(
                "caption length {} outside 1..={}",
                c.len(),
                cfg.max_text_len
            )));
        }
        if let Some(&bad) = c.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::Input(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size)));
        }
        let start = ids.len();
        spans.push(KeyRange::new(start, c.len()));
        for (pos, &t) in c.iter().enumerate() {
            ids.push(t);
            positions.push(pos);
            ranges.push(KeyRange::new(start, pos + 1));
        }
    }
    let tok = tape.gather_rows(p.var("txt.tok")?, &ids)?;
    let pos = tape.gather_rows(p.var("txt.pos")?, &positions)?;
    let mut x = tape.add(tok, pos)?;
    for l in 0..cfg.n_layers {
        x = block(tape, p, &format!("txt.blocks.{l}"), x, &ranges, cfg.n_heads)?;
    }
    let x = tape.layer_norm(x, p.var("txt.ln_f.g")?, p.var("txt.ln_f.b")?)?;
    let tokens = tape.matmul(x, p.var("txt.proj")?)?;
    let ends: Vec<usize> = spans.iter().map(|s| s.start + s.len - 1).collect();
    let global = tape.gather_rows(tokens, &ends)?;
    Ok(TextBatch { global, tokens, spans })
}
