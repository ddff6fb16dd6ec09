//! A dual encoder, its pooling layer, the loss scalars and the vocabulary,
//! bundled as one unit.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::{Array, Tape};
use crate::encoders::{encode_images, encode_texts, init_image_encoder, init_text_encoder, EncoderConfig};
use crate::encoders::{ImageTokens, TextEmbedding};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::pooling::{init_pool, AttnPoolParams, PoolConfig};
use crate::tokenizer::Tokenizer;

pub const LOG_T: &str = "loss.log_t";
pub const BIAS: &str = "loss.b";

/// Images and captions encoded per forward pass during inference.
const ENCODE_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub pool: PoolConfig,
    /// Initial temperature `t` (stored as `log t`).
    pub init_t: f64,
    pub init_b: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            pool: PoolConfig::default(),
            init_t: 10.0,
            init_b: -10.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.pool.n_heads == 0 || self.encoder.d % self.pool.n_heads != 0 {
            return Err(Error::Config(format!(
                "d={} not divisible by {} pooling heads",
                self.encoder.d, self.pool.n_heads
            )));
        }
        if !(self.init_t > 0.0 && self.init_t.is_finite() && self.init_b.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive and finite (t={}, b={})",
                self.init_t, self.init_b
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub tokenizer: Tokenizer,
}

impl Model {
    /// Fresh random initialization. `config.encoder.vocab_size` is replaced
    /// by the tokenizer's size.
    pub fn init<R: Rng + ?Sized>(mut config: ModelConfig, tokenizer: Tokenizer, rng: &mut R) -> Result<Self> {
        config.encoder.vocab_size = tokenizer.vocab_size();
        config.validate()?;
        let mut params = ParamStore::new();
        init_image_encoder(&mut params, &config.encoder, rng);
        init_text_encoder(&mut params, &config.encoder, rng);
        init_pool(&mut params, config.encoder.d, &config.pool, rng);
        params.insert(LOG_T, Array::scalar(config.init_t.ln()), false);
        params.insert(BIAS, Array::scalar(config.init_b), false);
        Ok(Self {
            config,
            params,
            tokenizer,
        })
    }

    pub fn temperature(&self) -> f64 {
        self.params.get(LOG_T).map(|a| a.data()[0].exp()).unwrap_or(f64::NAN)
    }

    pub fn bias(&self) -> f64 {
        self.params.get(BIAS).map(|a| a.data()[0]).unwrap_or(f64::NAN)
    }

    pub fn pool_params(&self) -> Result<AttnPoolParams> {
        AttnPoolParams::from_store(&self.params, &self.config.pool)
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        self.tokenizer.encode(text, self.config.encoder.max_text_len)
    }

    pub fn encode_image(&self, pixels: &Array) -> Result<ImageTokens> {
        Ok(self.encode_images(std::slice::from_ref(pixels))?.remove(0))
    }

    pub fn encode_images(&self, images: &[Array]) -> Result<Vec<ImageTokens>> {
        let cfg = &self.config.encoder;
        let (n, d) = (cfg.num_patches(), cfg.d);
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(ENCODE_CHUNK) {
            let mut tape = Tape::new();
            let p = self.params.bind_frozen(&mut tape);
            let refs: Vec<&Array> = chunk.iter().collect();
            let batch = encode_images(&mut tape, &p, cfg, &refs)?;
            let tokens = tape.value(batch.tokens);
            for i in 0..chunk.len() {
                let base = i * (n + 1);
                let v_g = Array::vector(tokens.row(base).to_vec());
                let v_loc = Array::matrix(n, d, tokens.data()[(base + 1) * d..(base + 1 + n) * d].to_vec())?;
                out.push(ImageTokens { v_loc, v_g });
            }
        }
        Ok(out)
    }

    pub fn encode_text(&self, token_ids: &[usize]) -> Result<TextEmbedding> {
        Ok(self.encode_token_batch(&[token_ids.to_vec()], true)?.remove(0))
    }

    /// Tokenizes and encodes; per-token outputs are dropped.
    pub fn encode_texts<S: AsRef<str>>(&self, texts: &[S]) -> Result<Vec<TextEmbedding>> {
        let ids: Vec<Vec<usize>> = texts.iter().map(|t| self.tokenize(t.as_ref())).collect();
        self.encode_token_batch(&ids, false)
    }

    fn encode_token_batch(&self, ids: &[Vec<usize>], keep_tokens: bool) -> Result<Vec<TextEmbedding>> {
        let cfg = &self.config.encoder;
        let mut out = Vec::with_capacity(ids.len());
        for chunk in ids.chunks(ENCODE_CHUNK) {
            let mut tape = Tape::new();
            let p = self.params.bind_frozen(&mut tape);
            let batch = encode_texts(&mut tape, &p, cfg, chunk)?;
            let global = tape.value(batch.global);
            let tokens = tape.value(batch.tokens);
            for (i, span) in batch.spans.iter().enumerate() {
                let t_loc = if keep_tokens {
                    let d = cfg.d;
                    Some(Array::matrix(span.len, d, tokens.data()[span.start * d..(span.start + span.len) * d].to_vec())?)
                } else {
                    None
                };
                out.push(TextEmbedding {
                    t_g: Array::vector(global.row(i).to_vec()),
                    t_loc,
                });
            }
        }
        Ok(out)
    }
}
