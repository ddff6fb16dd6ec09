//! Mini-batch training: sub-caption sampling, encoding, pooling, pairing,
//! loss, AdamW with decoupled decay, warmup + cosine schedule.
//!
//! Every step draws its randomness from a generator derived from
//! `(seed, step)` and every epoch's image order from `(seed, epoch)`, so a
//! run resumed from a checkpoint replays exactly the batches an
//! uninterrupted run would have seen.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::caption::{sample_subcaptions, LongCaption, SamplerConfig};
use crate::diffmath::{finite_diff_check, Array, GradCheckConfig, GradCheckReport, Grads, Tape, Var};
use crate::encoders::{encode_images, encode_texts};
use crate::error::{Error, Result};
use crate::losses::{sigmoid_loss_on_tape, LossInit};
use crate::model::{Model, ModelConfig, BIAS, LOG_T};
use crate::pairing::{build_pairs, NegativeType, PairSet};
use crate::params::Bound;
use crate::pooling::{pool_on_tape, PoolVars};
use crate::rng;
use crate::synth::SyntheticScene;
use crate::tokenizer::Tokenizer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    /// Upper bound; the effective warmup is `min(warmup_steps, total/10)`.
    pub warmup_steps: usize,
    pub grad_clip: f64,
    pub seed: u64,
    pub enable_tcs: bool,
    pub enable_mps: bool,
    pub sampler: SamplerConfig,
    pub negative: NegativeType,
    pub loss_init: LossInit,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let loss_init = LossInit::default();
        let (init_t, init_b) = loss_init.values();
        Self {
            batch_size: 16,
            epochs: 30,
            lr: 5e-4,
            weight_decay: 0.5,
            betas: (0.9, 0.98),
            eps: 1e-8,
            warmup_steps: 2000,
            grad_clip: 1.0,
            seed: 0,
            enable_tcs: true,
            enable_mps: true,
            sampler: SamplerConfig {
                k: 4,
                s: 2,
                token_limit: 77,
            },
            negative: NegativeType::default(),
            loss_init,
            model: ModelConfig {
                init_t,
                init_b,
                ..ModelConfig::default()
            },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be >= 2, got {}", self.batch_size)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0) || !(self.eps > 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::Config("weight_decay >= 0, eps > 0 and grad_clip > 0 required".into()));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::Config(format!("betas must lie in [0, 1), got ({b1}, {b2})")));
        }
        if !self.enable_tcs && !self.enable_mps {
            return Err(Error::Config("both loss branches are disabled".into()));
        }
        self.sampler.validate()?;
        if self.sampler.token_limit > self.model.encoder.max_text_len {
            return Err(Error::Config(format!(
                "token_limit {} exceeds the text encoder's {} positions",
                self.sampler.token_limit, self.model.encoder.max_text_len
            )));
        }
        match self.negative {
            NegativeType::JkLk if self.batch_size < 3 => {
                Err(Error::Config(format!("{} needs batch_size >= 3", self.negative)))
            }
            NegativeType::IkIm if self.sampler.k < 2 => Err(Error::Config(format!("{} needs K >= 2", self.negative))),
            _ => Ok(()),
        }
    }

    /// Applies a loss-init preset to the model's initial `t` and `b`.
    pub fn with_loss_init(mut self, init: LossInit) -> Self {
        let (t, b) = init.values();
        self.loss_init = init;
        self.model.init_t = t;
        self.model.init_b = b;
        self
    }

    /// Settings tuned for the synthetic corpus at desk scale: `b` starts at
    /// 0, a larger learning rate and a lighter weight decay.
    pub fn reference() -> Self {
        Self {
            lr: 2e-3,
            weight_decay: 0.05,
            ..Self::default()
        }
        .with_loss_init(LossInit::Desk)
    }
}

/// Images and their long captions.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSet {
    pub images: Vec<Array>,
    pub captions: Vec<LongCaption>,
}

impl TrainingSet {
    pub fn new(images: Vec<Array>, captions: Vec<LongCaption>) -> Result<Self> {
        if images.is_empty() || images.len() != captions.len() {
            return Err(Error::Input(format!(
                "need matching non-empty images and captions, got {} and {}",
                images.len(),
                captions.len()
            )));
        }
        Ok(Self { images, captions })
    }

    pub fn from_scenes(scenes: &[SyntheticScene]) -> Result<Self> {
        Self::new(
            scenes.iter().map(SyntheticScene::image).collect(),
            scenes.iter().map(|s| s.caption.clone()).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn tokenizer(&self) -> Tokenizer {
        Tokenizer::build(self.captions.iter().flat_map(|c| c.sentences.iter().map(String::as_str)))
    }
}

/// Step counts and the learning-rate schedule of a run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub peak_lr: f64,
    pub warmup: usize,
    pub total: usize,
}

impl Schedule {
    pub fn new(peak_lr: f64, warmup_cap: usize, total: usize) -> Self {
        Self {
            peak_lr,
            warmup: warmup_cap.min(total / 10),
            total,
        }
    }

    /// Linear warmup from 0, then cosine decay reaching 0 at `total`.
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.peak_lr * step as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup).max(1);
        let progress = ((step - self.warmup) as f64 / span as f64).min(1.0);
        0.5 * self.peak_lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// One logged step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub tcs: Option<f64>,
    pub mps: Option<f64>,
    pub total: f64,
    pub t: f64,
    pub b: f64,
}

impl StepLog {
    pub const CSV_HEADER: &'static str = "step,tcs,mps,total,t,b";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            self.step,
            opt(self.tcs),
            opt(self.mps),
            self.total,
            self.t,
            self.b
        )
    }
}

/// Loss variables of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Objective {
    pub total: Var,
    pub tcs: Option<Var>,
    pub mps: Option<Var>,
}

/// Builds the combined objective for one batch on `tape`. `captions[i]`
/// holds the `K` token sequences sampled for image `i`.
pub fn batch_objective(
    tape: &mut Tape,
    p: &Bound<'_>,
    model: &ModelConfig,
    images: &[&Array],
    captions: &[Vec<Vec<usize>>],
    pairs: &PairSet,
    enable_tcs: bool,
    enable_mps: bool,
) -> Result<Objective> {
    let b = images.len();
    if captions.len() != b {
        return Err(Error::dim("batch_objective", &[b], &[captions.len()]));
    }
    let k = captions[0].len();
    if k == 0 || captions.iter().any(|c| c.len() != k) {
        return Err(Error::Input("every image needs the same positive number of captions".into()));
    }
    let img = encode_images(tape, p, &model.encoder, images)?;
    let flat: Vec<Vec<usize>> = captions.iter().flatten().cloned().collect();
    let txt = encode_texts(tape, p, &model.encoder, &flat)?;
    let t_norm = tape.l2_normalize(txt.global)?;
    let text_row = |c: crate::pairing::CaptionRef| c.image * k + c.caption;
    let log_t = p.var(LOG_T)?;
    let bias = p.var(BIAS)?;

    let tcs = if enable_tcs {
        let keys = pairs.conditioned_keys();
        let index: std::collections::HashMap<_, _> = keys.iter().enumerate().map(|(r, key)| (*key, r)).collect();
        let local = tape.gather_rows(img.tokens, &img.local_rows())?;
        let queries = tape.gather_rows(txt.global, &keys.iter().map(|(_, c)| text_row(*c)).collect::<Vec<_>>())?;
        let image_of: Vec<usize> = keys.iter().map(|(i, _)| *i).collect();
        let pv = PoolVars::bind(p, &model.pool)?;
        let pooled = pool_on_tape(tape, &pv, local, img.n_local, queries, &image_of)?;
        let v_norm = tape.l2_normalize(pooled.pooled)?;
        let v_rows: Vec<usize> = pairs.triples.iter().map(|t| index[&(t.image, t.condition)]).collect();
        let t_rows: Vec<usize> = pairs.triples.iter().map(|t| text_row(t.target)).collect();
        let v = tape.gather_rows(v_norm, &v_rows)?;
        let t = tape.gather_rows(t_norm, &t_rows)?;
        let sims = tape.row_dot(v, t)?;
        let labels: Vec<i8> = pairs.triples.iter().map(|t| t.label).collect();
        Some(sigmoid_loss_on_tape(tape, sims, &labels, log_t, bias)?)
    } else {
        None
    };

    let mps = if enable_mps {
        let g = tape.gather_rows(img.tokens, &img.global_rows())?;
        let g_norm = tape.l2_normalize(g)?;
        let v_rows: Vec<usize> = pairs.global_pairs.iter().map(|gp| gp.image).collect();
        let t_rows: Vec<usize> = pairs.global_pairs.iter().map(|gp| text_row(gp.caption)).collect();
        let v = tape.gather_rows(g_norm, &v_rows)?;
        let t = tape.gather_rows(t_norm, &t_rows)?;
        let sims = tape.row_dot(v, t)?;
        let labels: Vec<i8> = pairs.global_pairs.iter().map(|gp| gp.label).collect();
        Some(sigmoid_loss_on_tape(tape, sims, &labels, log_t, bias)?)
    } else {
        None
    };

    let total = match (tcs, mps) {
        (Some(a), Some(b)) => {
            let s = tape.add(a, b)?;
            tape.scale(s, 0.5)
        }
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => return Err(Error::Config("both loss branches are disabled".into())),
    };
    Ok(Objective { total, tcs, mps })
}

/// Sampled inputs of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub image_indices: Vec<usize>,
    pub captions: Vec<Vec<Vec<usize>>>,
    pub caption_texts: Vec<Vec<String>>,
    pub pairs: PairSet,
    pub seed: u64,
}

/// Optimizer and progress state; everything a checkpoint must hold.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: Model,
    pub step: usize,
    pub adam_m: Vec<Array>,
    pub adam_v: Vec<Array>,
}

pub struct Trainer<'a> {
    pub state: TrainState,
    data: &'a TrainingSet,
    schedule: Schedule,
    steps_per_epoch: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(data: &'a TrainingSet, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut init_rng = rng::stream(config.seed, &[rng::STREAM_INIT]);
        let model = Model::init(config.model, data.tokenizer(), &mut init_rng)?;
        let zeros: Vec<Array> = model.params.iter().map(|p| Array::zeros(p.value.shape())).collect();
        let state = TrainState {
            config,
            model,
            step: 0,
            adam_m: zeros.clone(),
            adam_v: zeros,
        };
        Self::resume(data, state)
    }

    /// Continues from a saved state. The training set must be the one the
    /// state was trained on.
    pub fn resume(data: &'a TrainingSet, state: TrainState) -> Result<Self> {
        state.config.validate()?;
        if data.len() < state.config.batch_size {
            return Err(Error::Input(format!(
                "training set of {} images is smaller than one batch of {}",
                data.len(),
                state.config.batch_size
            )));
        }
        let steps_per_epoch = data.len() / state.config.batch_size;
        let total = steps_per_epoch * state.config.epochs;
        let schedule = Schedule::new(state.config.lr, state.config.warmup_steps, total);
        Ok(Self {
            state,
            data,
            schedule,
            steps_per_epoch,
        })
    }

    pub fn total_steps(&self) -> usize {
        self.schedule.total
    }

    pub fn schedule(&self) -> Schedule {
        self.schedule
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.schedule.total
    }

    pub fn model(&self) -> &Model {
        &self.state.model
    }

    fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.shuffle(&mut rng::stream(self.state.config.seed, &[rng::STREAM_EPOCH_ORDER, epoch as u64]));
        order
    }

    /// The batch of the current step.
    pub fn batch(&self) -> Result<Batch> {
        let cfg = &self.state.config;
        let step = self.state.step;
        let (epoch, pos) = (step / self.steps_per_epoch, step % self.steps_per_epoch);
        let order = self.epoch_order(epoch);
        let image_indices = order[pos * cfg.batch_size..(pos + 1) * cfg.batch_size].to_vec();
        let seed = rng::derive(cfg.seed, &[rng::STREAM_TRAIN_LOOP, step as u64]);
        let mut r = rng::stream(cfg.seed, &[rng::STREAM_TRAIN_LOOP, step as u64]);
        let mut captions = Vec::with_capacity(image_indices.len());
        let mut caption_texts = Vec::with_capacity(image_indices.len());
        for &i in &image_indices {
            let subs = sample_subcaptions(&self.data.captions[i], &cfg.sampler, &mut r);
            captions.push(subs.iter().map(|s| self.state.model.tokenize(&s.text)).collect());
            caption_texts.push(subs.into_iter().map(|s| s.text).collect());
        }
        let pairs = build_pairs(cfg.batch_size, cfg.sampler.k, cfg.negative, &mut r)?;
        Ok(Batch {
            image_indices,
            captions,
            caption_texts,
            pairs,
            seed,
        })
    }

    /// Loss and gradients of the current step without updating anything.
    pub fn evaluate_step(&self) -> Result<(StepLog, Grads, Vec<Var>)> {
        let batch = self.batch()?;
        let cfg = &self.state.config;
        let model = &self.state.model;
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape);
        let images: Vec<&Array> = batch.image_indices.iter().map(|&i| &self.data.images[i]).collect();
        let obj = batch_objective(
            &mut tape,
            &p,
            &model.config,
            &images,
            &batch.captions,
            &batch.pairs,
            cfg.enable_tcs,
            cfg.enable_mps,
        )?;
        let scalar = |v: Option<Var>| v.map(|v| tape.value(v).data()[0]);
        let log = StepLog {
            step: self.state.step,
            tcs: scalar(obj.tcs),
            mps: scalar(obj.mps),
            total: tape.value(obj.total).data()[0],
            t: model.temperature(),
            b: model.bias(),
        };
        if !log.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.state.step as u64,
                batch_seed: batch.seed,
                detail: format!(
                    "tcs={:?} mps={:?} t={} b={} images={:?}",
                    log.tcs, log.mps, log.t, log.b, batch.image_indices
                ),
            });
        }
        let grads = tape.backward(obj.total)?;
        Ok((log, grads, p.vars().to_vec()))
    }

    /// Runs one optimizer step and returns its log row (loss before the update).
    pub fn step(&mut self) -> Result<StepLog> {
        if self.is_done() {
            return Err(Error::Input("training already finished".into()));
        }
        let (log, grads, vars) = self.evaluate_step()?;
        let mut g: Vec<Vec<f64>> = vars.iter().map(|&v| grads.get(v).into_data()).collect();
        let norm = g.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
        if !norm.is_finite() {
            let batch_seed = rng::derive(self.state.config.seed, &[rng::STREAM_TRAIN_LOOP, self.state.step as u64]);
            return Err(Error::NonFiniteLoss {
                step: self.state.step as u64,
                batch_seed,
                detail: "non-finite gradient".into(),
            });
        }
        let clip = self.state.config.grad_clip;
        if norm > clip {
            let s = clip / norm;
            g.iter_mut().flatten().for_each(|x| *x *= s);
        }
        let lr = self.schedule.lr(self.state.step);
        adamw_update(&mut self.state, &g, lr);
        self.state.step += 1;
        Ok(log)
    }

    /// Trains to the end, writing a CSV row per step to `log` if given.
    pub fn run(&mut self, mut log: Option<&mut dyn Write>) -> Result<Vec<StepLog>> {
        if let Some(w) = log.as_deref_mut() {
            write_log_header(w, &self.state.config).map_err(|e| Error::Internal(format!("log write: {e}")))?;
        }
        let mut rows = Vec::new();
        while !self.is_done() {
            let row = self.step()?;
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{}", row.csv_row()).map_err(|e| Error::Internal(format!("log write: {e}")))?;
            }
            rows.push(row);
        }
        Ok(rows)
    }
}

impl Trainer<'_> {
    /// Compares the gradients of the current step's objective with central
    /// differences.
    pub fn grad_check(&self, gc: &GradCheckConfig) -> Result<GradCheckReport> {
        let (_, grads, vars) = self.evaluate_step()?;
        let analytic: Vec<Array> = vars.iter().map(|&v| grads.get(v)).collect();
        let batch = self.batch()?;
        let cfg = &self.state.config;
        let model = &self.state.model;
        let images: Vec<&Array> = batch.image_indices.iter().map(|&i| &self.data.images[i]).collect();
        let mut probe = model.params.clone();
        let loss = |values: &[Array]| -> Result<f64> {
            probe.set_values(values)?;
            let mut tape = Tape::new();
            let p = probe.bind_frozen(&mut tape);
            let obj = batch_objective(
                &mut tape,
                &p,
                &model.config,
                &images,
                &batch.captions,
                &batch.pairs,
                cfg.enable_tcs,
                cfg.enable_mps,
            )?;
            Ok(tape.value(obj.total).data()[0])
        };
        finite_diff_check(loss, &model.params.names(), &model.params.values(), &analytic, gc)
    }
}

/// Decoupled weight decay on flagged parameters, then an Adam step.
fn adamw_update(state: &mut TrainState, grads: &[Vec<f64>], lr: f64) {
    let cfg = &state.config;
    let (b1, b2) = cfg.betas;
    let t = (state.step + 1) as i32;
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    for (((param, m), v), g) in state
        .model
        .params
        .iter_mut()
        .zip(state.adam_m.iter_mut())
        .zip(state.adam_v.iter_mut())
        .zip(grads)
    {
        let decay = if param.decay { lr * cfg.weight_decay } else { 0.0 };
        let w = param.value.data_mut();
        for (((w, m), v), &g) in w.iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *w -= decay * *w;
            *w -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
        }
    }
}

/// Comment line naming the run's switches, then the column header.
pub fn write_log_header(w: &mut dyn Write, cfg: &TrainConfig) -> std::io::Result<()> {
    writeln!(
        w,
        "# enable_tcs={} enable_mps={} negative={} seed={}",
        cfg.enable_tcs, cfg.enable_mps, cfg.negative, cfg.seed
    )?;
    writeln!(w, "{}", StepLog::CSV_HEADER)
}

/// Trains from scratch; the per-step CSV goes to `log_path` when given.
pub fn train(data: &TrainingSet, config: TrainConfig, log_path: Option<&Path>) -> Result<(TrainState, Vec<StepLog>)> {
    let mut trainer = Trainer::new(data, config)?;
    let rows = match log_path {
        Some(path) => {
            let mut f = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
            let rows = trainer.run(Some(&mut f))?;
            f.flush().map_err(|e| Error::io(path, e))?;
            rows
        }
        None => trainer.run(None)?,
    };
    Ok((trainer.state, rows))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::encoders::EncoderConfig;
    use crate::pooling::PoolConfig;
    use crate::synth::{generate_corpus, CorpusSpec};

    pub(crate) fn tiny_config() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            epochs: 2,
            lr: 1e-3,
            sampler: SamplerConfig {
                k: 2,
                s: 2,
                token_limit: 24,
            },
            model: ModelConfig {
                encoder: EncoderConfig {
                    d: 16,
                    n_layers: 1,
                    n_heads: 2,
                    max_text_len: 24,
                    ..EncoderConfig::default()
                },
                pool: PoolConfig {
                    n_heads: 2,
                    ..PoolConfig::default()
                },
                ..TrainConfig::default().model
            },
            ..TrainConfig::default()
        }
    }

    pub(crate) fn tiny_data(n: usize) -> TrainingSet {
        let c = generate_corpus(&CorpusSpec {
            n_train: n,
            n_test: 0,
            objects_per_scene: 3,
            seed: 3,
        })
        .unwrap();
        TrainingSet::from_scenes(&c.train).unwrap()
    }

    #[test]
    fn schedule_endpoints() {
        let s = Schedule::new(5e-4, 2000, 1000);
        assert_eq!(s.warmup, 100);
        assert_eq!(s.lr(0), 0.0);
        assert_eq!(s.lr(100), 5e-4);
        assert!(s.lr(999) < 1e-8);
        assert_eq!(s.lr(1000), 0.0);
        let long = Schedule::new(1.0, 2000, 100_000);
        assert_eq!(long.warmup, 2000);
        assert!((long.lr(1000) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = |f: fn(&mut TrainConfig)| {
            let mut c = TrainConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.batch_size = 1));
        assert!(bad(|c| c.lr = 0.0));
        assert!(bad(|c| {
            c.enable_tcs = false;
            c.enable_mps = false
        }));
        assert!(bad(|c| c.sampler.token_limit = 100));
        assert!(bad(|c| {
            c.negative = NegativeType::IkIm;
            c.sampler.k = 1
        }));
    }

    #[test]
    fn config_json_round_trip() {
        let c = tiny_config().with_loss_init(LossInit::Literal);
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&s).unwrap(), c);
        let partial: TrainConfig = serde_json::from_str(r#"{"epochs": 3}"#).unwrap();
        assert_eq!(partial.epochs, 3);
        assert_eq!(partial.batch_size, 16);
    }

    #[test]
    fn zero_gradient_decay_is_exact() {
        let data = tiny_data(8);
        let mut t = Trainer::new(&data, tiny_config()).unwrap();
        t.state.step = 50;
        let before = t.state.model.params.clone();
        let zeros: Vec<Vec<f64>> = before.iter().map(|p| vec![0.0; p.value.len()]).collect();
        let lr = 1e-3;
        adamw_update(&mut t.state, &zeros, lr);
        for (a, b) in before.iter().zip(t.state.model.params.iter()) {
            let d = if a.decay { lr * 0.5 } else { 0.0 };
            for (x, y) in a.value.data().iter().zip(b.value.data()) {
                assert_eq!(x - d * x, *y);
            }
        }
    }

    #[test]
    fn batches_cover_epoch_without_replacement() {
        let data = tiny_data(12);
        let mut t = Trainer::new(&data, tiny_config()).unwrap();
        let mut seen = Vec::new();
        for s in 0..3 {
            t.state.step = s;
            let b = t.batch().unwrap();
            assert_eq!(b.captions.len(), 4);
            assert!(b.captions.iter().all(|c| c.len() == 2));
            seen.extend(b.image_indices);
        }
        seen.sort_unstable();
        assert_eq!(seen, (0..12).collect::<Vec<_>>());
    }

    #[test]
    fn training_is_deterministic() {
        let data = tiny_data(16);
        let cfg = TrainConfig {
            epochs: 6,
            ..tiny_config()
        };
        let (s1, l1) = train(&data, cfg.clone(), None).unwrap();
        let (s2, l2) = train(&data, cfg, None).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(s1, s2);
        assert_eq!(l1.len(), 24);
        assert!(l1.iter().all(|r| r.t > 0.0 && r.total.is_finite()));
    }

    #[test]
    fn log_has_header_and_rows() {
        let data = tiny_data(8);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        let cfg = TrainConfig {
            enable_mps: false,
            epochs: 1,
            ..tiny_config()
        };
        train(&data, cfg, Some(&path)).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert!(lines[0].starts_with("# enable_tcs=true enable_mps=false"));
        assert_eq!(lines[1], StepLog::CSV_HEADER);
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[2].split(',').nth(2), Some(""));
    }

    #[test]
    fn combined_loss_gradients_match_finite_differences() {
        let data = tiny_data(2);
        let mut cfg = tiny_config().with_loss_init(LossInit::Desk);
        cfg.batch_size = 2;
        let t = Trainer::new(&data, cfg).unwrap();
        let gc = GradCheckConfig {
            max_coords: Some(6),
            ..GradCheckConfig::default()
        };
        let r = t.grad_check(&gc).unwrap();
        assert!(r.passed, "{:?}", r.failures().collect::<Vec<_>>());
        assert_eq!(r.params.len(), t.model().params.len());
    }

    #[test]
    fn reference_preset() {
        let r = TrainConfig::reference();
        r.validate().unwrap();
        assert_eq!(r.loss_init, LossInit::Desk);
        assert_eq!((r.model.init_t, r.model.init_b), (10.0, 0.0));
        assert_eq!(TrainConfig::default().loss_init, LossInit::Literal);
    }

    // Bound pinned from one reference run (2000 scenes, 30 epochs), which
    // ended at 0.140 averaged over the last 20 steps. About 6 minutes.
    #[test]
    #[ignore]
    fn reference_run_final_loss() {
        let corpus = generate_corpus(&CorpusSpec::default()).unwrap();
        let data = TrainingSet::from_scenes(&corpus.train).unwrap();
        let (_, logs) = train(&data, TrainConfig::reference(), None).unwrap();
        let tail = &logs[logs.len() - 20..];
        let mean = tail.iter().map(|l| l.total).sum::<f64>() / 20.0;
        assert!(mean < 0.15, "final loss {mean}");
    }
}
