mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use tcpool::caption::{sample_subcaptions, SamplerConfig};
use tcpool::checkpoint::{load_checkpoint, save_checkpoint};
use tcpool::diffmath::GradCheckConfig;
use tcpool::eval::{
    self, HeatmapKind, RetrievalReport, ScoreMatrix, ScoreMode, SegMode, DEFAULT_TEMPLATES,
};
use tcpool::losses::LossInit;
use tcpool::model::Model;
use tcpool::pairing::NegativeType;
use tcpool::rng;
use tcpool::synth::{class_names, export_corpus, generate_scenes, import_corpus, SyntheticScene};
use tcpool::trainer::{train, TrainConfig, Trainer, TrainingSet};

#[derive(Parser)]
#[command(name = "tcpool", version, about = "Text-conditioned attention pooling on synthetic scenes")]
struct Cli {
    /// Cap on worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus (JSONL plus a masks sidecar).
    GenData(GenData),
    /// Print sampled sub-captions for each scene of a corpus.
    SampleCaptions(SampleCaptions),
    /// Train a model and write a checkpoint.
    Train(Box<Train>),
    /// Image-text retrieval with each scene's full caption.
    EvalRetrieval(EvalRetrieval),
    /// Retrieval with every caption sentence as its own query.
    EvalFinegrained(EvalRetrieval),
    /// Zero-shot segmentation against all shape classes.
    EvalSeg(EvalSeg),
    /// Zero-shot classification of single-object scenes.
    EvalClassify(EvalClassify),
    /// Export a token heatmap for one scene and one text.
    Heatmap(HeatmapArgs),
    /// Check the combined loss gradients against finite differences.
    GradCheck(GradCheck),
}

#[derive(Args)]
struct GenData {
    #[arg(long, default_value_t = 2000)]
    scenes: usize,
    #[arg(long, default_value_t = 3)]
    objects: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Prefix of the generated image ids.
    #[arg(long, default_value = "scene")]
    prefix: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SampleCaptions {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 4)]
    k: usize,
    #[arg(long, default_value_t = 2)]
    s: usize,
    #[arg(long, default_value_t = 77)]
    token_limit: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Train {
    /// Training corpus from gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Per-step loss CSV.
    #[arg(long)]
    log: Option<PathBuf>,
    /// TrainConfig as JSON or key = value lines; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the tuned desk-scale reference settings.
    #[arg(long)]
    reference: bool,
    /// Master seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Passes over the training set [default: 30]
    #[arg(long)]
    epochs: Option<usize>,
    /// Images per batch [default: 16]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Peak learning rate [default: 5e-4, reference 2e-3]
    #[arg(long)]
    lr: Option<f64>,
    /// AdamW decoupled decay [default: 0.5, reference 0.05]
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Sub-captions per image [default: 4]
    #[arg(long)]
    k: Option<usize>,
    /// Sentences per sub-caption [default: 2]
    #[arg(long)]
    s: Option<usize>,
    /// One of vtc_jk_t_jk, vtc_jk_t_ik, vtc_ik_t_jk, vtc_jk_t_lk, vtc_ik_t_im [default: vtc_jk_t_jk]
    #[arg(long)]
    negative: Option<NegativeType>,
    /// literal, siglip or desk [default: literal, reference desk]
    #[arg(long)]
    loss_init: Option<LossInit>,
    /// Train without the text-conditioned loss.
    #[arg(long)]
    no_tcs: bool,
    /// Train without the global loss.
    #[arg(long)]
    no_mps: bool,
}

#[derive(Args)]
struct EvalRetrieval {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// conditioned or global.
    #[arg(long, default_value = "conditioned")]
    mode: ScoreMode,
    /// JSON report path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// CSV dump of the image-by-text score matrix.
    #[arg(long)]
    scores: Option<PathBuf>,
}

#[derive(Args)]
struct EvalSeg {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// clip (token-text cosine) or tc (class-conditioned attention).
    #[arg(long, default_value = "tc")]
    mode: SegMode,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalClassify {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Single-object scenes (gen-data --objects 1).
    #[arg(long)]
    data: PathBuf,
    /// global or conditioned.
    #[arg(long, default_value = "global")]
    route: ScoreMode,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct HeatmapArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Scene index within the corpus.
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long)]
    text: String,
    /// similarity or attention.
    #[arg(long, default_value = "attention")]
    kind: HeatmapKind,
    /// Output side length in pixels.
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long)]
    pgm: PathBuf,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct GradCheck {
    #[arg(long, default_value_t = 2)]
    batch: usize,
    #[arg(long, default_value_t = 2)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Coordinates checked per parameter tensor (0 = all).
    #[arg(long, default_value_t = 8)]
    coords: usize,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<tcpool::Error> for Failure {
    fn from(e: tcpool::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Runtime(format!("{}: {e}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Outcome {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Prints `value` and also writes it to `out` when given.
fn report(value: &serde_json::Value, out: Option<&Path>) -> Outcome {
    let text = serde_json::to_string_pretty(value).expect("serializable report");
    println!("{text}");
    match out {
        Some(p) => write_text(p, &(text + "\n")),
        None => Ok(()),
    }
}

fn load_model(path: &Path) -> Result<Model, Failure> {
    Ok(load_checkpoint(path)?.model)
}

fn load_scenes(path: &Path) -> Result<Vec<SyntheticScene>, Failure> {
    Ok(import_corpus(path)?)
}

fn gen_data(a: GenData) -> Outcome {
    let scenes = generate_scenes(a.scenes, a.objects, a.seed, &a.prefix)?;
    export_corpus(&scenes, &a.out)?;
    eprintln!("wrote {} scenes to {}", scenes.len(), a.out.display());
    Ok(())
}

fn sample_captions(a: SampleCaptions) -> Outcome {
    let cfg = SamplerConfig {
        k: a.k,
        s: a.s,
        token_limit: a.token_limit,
    };
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let scenes = load_scenes(&a.corpus)?;
    let mut lines = String::new();
    for (i, s) in scenes.iter().enumerate() {
        let mut r = rng::stream(a.seed, &[rng::STREAM_CAPTIONS, i as u64]);
        let subs: Vec<_> = sample_subcaptions(&s.caption, &cfg, &mut r)
            .into_iter()
            .map(|c| json!({"text": c.text, "sentences": c.source_indices}))
            .collect();
        lines.push_str(&json!({"image_id": s.image_id, "subcaptions": subs}).to_string());
        lines.push('\n');
    }
    match a.out {
        Some(p) => write_text(&p, &lines),
        None => {
            print!("{lines}");
            Ok(())
        }
    }
}

fn train_cmd(a: Train) -> Outcome {
    let base = if a.reference {
        TrainConfig::reference()
    } else {
        TrainConfig::default()
    };
    let mut cfg = match &a.config {
        Some(p) if !p.exists() => return Err(Failure::Usage(format!("config file {} does not exist", p.display()))),
        Some(p) => config::load(p, &base).map_err(Failure::Usage)?,
        None => base,
    };
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.weight_decay {
        cfg.weight_decay = v;
    }
    if let Some(v) = a.k {
        cfg.sampler.k = v;
    }
    if let Some(v) = a.s {
        cfg.sampler.s = v;
    }
    if let Some(v) = a.negative {
        cfg.negative = v;
    }
    if let Some(v) = a.loss_init {
        cfg = cfg.with_loss_init(v);
    }
    cfg.enable_tcs &= !a.no_tcs;
    cfg.enable_mps &= !a.no_mps;
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;

    let scenes = load_scenes(&a.data)?;
    let data = TrainingSet::from_scenes(&scenes)?;
    let (state, rows) = train(&data, cfg, a.log.as_deref())?;
    save_checkpoint(&state, &a.out)?;
    if let Some(last) = rows.last() {
        eprintln!("{} steps, final loss {:.4}, checkpoint {}", rows.len(), last.total, a.out.display());
    }
    Ok(())
}

fn write_scores(path: &Path, scores: &ScoreMatrix) -> Outcome {
    let mut w = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    let m = scores.i2t();
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", row.join(",")).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn retrieval(a: EvalRetrieval, finegrained: bool) -> Outcome {
    let model = load_model(&a.checkpoint)?;
    let scenes = load_scenes(&a.data)?;
    let images: Vec<_> = scenes.iter().map(SyntheticScene::image).collect();
    let (texts, owners): (Vec<String>, Vec<usize>) = if finegrained {
        scenes
            .iter()
            .enumerate()
            .flat_map(|(i, s)| s.caption.sentences.iter().map(move |t| (t.clone(), i)))
            .unzip()
    } else {
        scenes.iter().enumerate().map(|(i, s)| (s.caption.text(), i)).unzip()
    };
    let img = model.encode_images(&images)?;
    let txt = model.encode_texts(&texts)?;
    let scores = eval::retrieval_scores(&model, &img, &txt, a.mode)?;
    let r: RetrievalReport = eval::retrieval_report(&scores, &owners)?;
    if let Some(p) = &a.scores {
        write_scores(p, &scores)?;
    }
    let mut v = serde_json::to_value(r).expect("report");
    v["mode"] = json!(a.mode);
    v["finegrained"] = json!(finegrained);
    report(&v, a.out.as_deref())
}

fn eval_seg(a: EvalSeg) -> Outcome {
    let model = load_model(&a.checkpoint)?;
    let scenes = load_scenes(&a.data)?;
    let r = eval::segmentation_eval(&model, &scenes, a.mode)?;
    let mut v = serde_json::to_value(r).expect("report");
    v["ratio_to_baseline"] = json!(r.miou / r.random_baseline);
    report(&v, a.out.as_deref())
}

fn eval_classify(a: EvalClassify) -> Outcome {
    let model = load_model(&a.checkpoint)?;
    let scenes = load_scenes(&a.data)?;
    let acc = eval::classification_accuracy(&model, &scenes, a.route)?;
    let v = json!({
        "accuracy": acc,
        "route": a.route,
        "n_scenes": scenes.len(),
        "n_classes": class_names().len(),
        "templates": DEFAULT_TEMPLATES,
    });
    report(&v, a.out.as_deref())
}

fn heatmap(a: HeatmapArgs) -> Outcome {
    let model = load_model(&a.checkpoint)?;
    let scenes = load_scenes(&a.data)?;
    let scene = scenes
        .get(a.index)
        .ok_or_else(|| Failure::Usage(format!("scene index {} out of range (corpus has {})", a.index, scenes.len())))?;
    let h = eval::token_similarity_heatmap(&model, &scene.image(), &a.text, a.kind)?;
    h.write_pgm(&a.pgm, a.size)?;
    if let Some(p) = &a.csv {
        h.write_csv(p)?;
    }
    eprintln!("wrote {}", a.pgm.display());
    Ok(())
}

fn grad_check(a: GradCheck) -> Outcome {
    let scenes = generate_scenes(a.batch, 3, a.seed, "gc")?;
    let data = TrainingSet::from_scenes(&scenes)?;
    let mut cfg = TrainConfig {
        batch_size: a.batch,
        epochs: 1,
        seed: a.seed,
        ..TrainConfig::default()
    };
    cfg.sampler.k = a.k;
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let trainer = Trainer::new(&data, cfg)?;
    let gc = GradCheckConfig {
        tolerance: a.tolerance,
        max_coords: (a.coords > 0).then_some(a.coords),
        seed: a.seed,
        ..GradCheckConfig::default()
    };
    let r = trainer.grad_check(&gc)?;
    report(&serde_json::to_value(&r).expect("report"), a.out.as_deref())?;
    if r.passed {
        Ok(())
    } else {
        Err(Failure::Runtime(format!(
            "gradient check failed: max relative error {:.3e} >= {:.1e}",
            r.max_rel_error, r.tolerance
        )))
    }
}

fn run(cli: Cli) -> Outcome {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| Failure::Runtime(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::SampleCaptions(a) => sample_captions(a),
        Command::Train(a) => train_cmd(*a),
        Command::EvalRetrieval(a) => retrieval(a, false),
        Command::EvalFinegrained(a) => retrieval(a, true),
        Command::EvalSeg(a) => eval_seg(a),
        Command::EvalClassify(a) => eval_classify(a),
        Command::Heatmap(a) => heatmap(a),
        Command::GradCheck(a) => grad_check(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {}", msg.replace('\n', " "));
            ExitCode::from(2)
        }
    }
}
