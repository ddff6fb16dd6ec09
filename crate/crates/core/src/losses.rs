//! Pairwise sigmoid losses with a shared learnable temperature and bias.
//!
//! Every pair with cosine similarity `s` and label `y ∈ {+1, −1}` costs
//! `−log σ(y·(t·s − b))`; each loss is the mean over its pairs.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::diffmath::{cosine, log_sigmoid, Array, Tape, Var};
use crate::error::{Error, Result};
use crate::pairing::{CaptionRef, PairSet};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParams {
    pub log_t: f64,
    pub b: f64,
}

impl LossParams {
    pub fn new(t: f64, b: f64) -> Result<Self> {
        if !(t > 0.0 && t.is_finite() && b.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive and finite (t={t}, b={b})")));
        }
        Ok(Self { log_t: t.ln(), b })
    }

    pub fn t(&self) -> f64 {
        self.log_t.exp()
    }
}

/// Named initial values for `t` and `b`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossInit {
    /// `t = 0.07`, `b = −10`.
    #[default]
    Literal,
    /// `t = 10`, `b = −10`.
    Siglip,
    /// `t = 10`, `b = 0`, for short runs where `b` cannot travel far.
    Desk,
}

impl LossInit {
    pub fn values(self) -> (f64, f64) {
        match self {
            Self::Literal => (0.07, -10.0),
            Self::Siglip => (10.0, -10.0),
            Self::Desk => (10.0, 0.0),
        }
    }

    pub fn params(self) -> LossParams {
        let (t, b) = self.values();
        LossParams { log_t: t.ln(), b }
    }
}

impl std::str::FromStr for LossInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(Self::Literal),
            "siglip" | "siglip-init" => Ok(Self::Siglip),
            "desk" => Ok(Self::Desk),
            _ => Err(Error::Config(format!("unknown loss init {s:?}; expected literal, siglip or desk"))),
        }
    }
}

pub fn pairwise_nll(sim: f64, y: i8, params: &LossParams) -> f64 {
    let y = f64::from(y.signum());
    -log_sigmoid(y * (params.t() * sim - params.b))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub tcs: Option<f64>,
    pub mps: Option<f64>,
    pub per_pair: Option<Vec<f64>>,
}

/// Mean of two enabled branches, or the single enabled one.
pub fn combined_loss(tcs: Option<f64>, mps: Option<f64>) -> Result<f64> {
    match (tcs, mps) {
        (Some(a), Some(b)) => Ok(0.5 * (a + b)),
        (Some(a), None) | (None, Some(a)) => Ok(a),
        (None, None) => Err(Error::Config("both loss branches are disabled".into())),
    }
}

fn lookup<'a, K: std::fmt::Debug + Eq + std::hash::Hash>(table: &'a HashMap<K, Array>, key: &K) -> Result<&'a Array> {
    table
        .get(key)
        .ok_or_else(|| Error::Internal(format!("no embedding for {key:?}")))
}

fn mean(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::Input("no pairs".into()));
    }
    Ok(xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Per-triple terms of the text-conditioned loss. `v_tc` maps
/// `(image, condition)` to the pooled vector, `t_g` maps captions to their
/// global embeddings.
pub fn tcs_terms(
    pairs: &PairSet,
    v_tc: &HashMap<(usize, CaptionRef), Array>,
    t_g: &HashMap<CaptionRef, Array>,
    params: &LossParams,
) -> Result<Vec<f64>> {
    pairs
        .triples
        .iter()
        .map(|tr| {
            let v = lookup(v_tc, &(tr.image, tr.condition))?;
            let t = lookup(t_g, &tr.target)?;
            Ok(pairwise_nll(cosine(v.data(), t.data()), tr.label, params))
        })
        .collect()
}

pub fn tcs_loss(
    pairs: &PairSet,
    v_tc: &HashMap<(usize, CaptionRef), Array>,
    t_g: &HashMap<CaptionRef, Array>,
    params: &LossParams,
) -> Result<f64> {
    mean(&tcs_terms(pairs, v_tc, t_g, params)?)
}

/// Global-embedding loss; `v_g[i]` is image `i`'s global embedding.
pub fn mps_loss(pairs: &PairSet, v_g: &[Array], t_g: &HashMap<CaptionRef, Array>, params: &LossParams) -> Result<f64> {
    let terms = pairs
        .global_pairs
        .iter()
        .map(|p| {
            let v = v_g
                .get(p.image)
                .ok_or_else(|| Error::Internal(format!("no global embedding for image {}", p.image)))?;
            let t = lookup(t_g, &p.caption)?;
            Ok(pairwise_nll(cosine(v.data(), t.data()), p.label, params))
        })
        .collect::<Result<Vec<_>>>()?;
    mean(&terms)
}

/// Mean sigmoid loss on a tape: `sims` is a column of cosine similarities,
/// `log_t` and `b` single-element variables.
pub fn sigmoid_loss_on_tape(tape: &mut Tape, sims: Var, labels: &[i8], log_t: Var, b: Var) -> Result<Var> {
    let n = tape.value(sims).len();
    if labels.len() != n {
        return Err(Error::dim("sigmoid_loss", &[n], &[labels.len()]));
    }
    let t = tape.exp(log_t);
    let scaled = tape.scale_by(sims, t)?;
    let neg_b = tape.scale(b, -1.0);
    let logits = tape.add_scalar(scaled, neg_b)?;
    let y = tape.constant(Array::new(
        tape.shape(sims).to_vec(),
        labels.iter().map(|&l| f64::from(l.signum())).collect(),
    )?);
    let signed = tape.mul(logits, y)?;
    let ls = tape.log_sigmoid(signed);
    let m = tape.mean(ls);
    Ok(tape.scale(m, -1.0))
}
