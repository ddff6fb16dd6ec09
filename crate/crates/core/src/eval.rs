//! Retrieval, segmentation, classification and heatmap evaluations.

use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::caption::{build_finegrained_benchmark, LongCaption};
use crate::diffmath::{cosine, Array};
use crate::encoders::{ImageTokens, TextEmbedding};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::pooling::{aggregate_heads, attn_pool, Heatmap};
use crate::synth::{article, class_names, SyntheticScene, IGNORE};

/// Prompt templates for class names; `{}` becomes e.g. "an orange circle".
pub const DEFAULT_TEMPLATES: [&str; 3] = ["There is {}.", "A dark picture with {}.", "In the picture we see {}."];

/// How an image-text pair is scored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// Cosine of the text-conditioned pooled vector with the text embedding.
    Conditioned,
    /// Cosine of the global image and text embeddings.
    Global,
}

impl FromStr for ScoreMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conditioned" | "tc" => Ok(Self::Conditioned),
            "global" | "gl" => Ok(Self::Global),
            _ => Err(Error::Config(format!("unknown score mode {s:?}; expected conditioned or global"))),
        }
    }
}

/// Image-to-text scores; the text-to-image view is its transpose.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    i2t: Array,
}

impl ScoreMatrix {
    pub fn new(i2t: Array) -> Result<Self> {
        if i2t.shape().len() != 2 {
            return Err(Error::dim("score matrix", i2t.shape(), &[0, 0]));
        }
        Ok(Self { i2t })
    }

    pub fn n_images(&self) -> usize {
        self.i2t.rows()
    }

    pub fn n_texts(&self) -> usize {
        self.i2t.cols()
    }

    /// Rows are images, columns texts.
    pub fn i2t(&self) -> &Array {
        &self.i2t
    }

    /// Rows are texts, columns images.
    pub fn t2i(&self) -> Array {
        let (r, c) = (self.n_images(), self.n_texts());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.i2t.get(i, j);
            }
        }
        Array::matrix(c, r, out).expect("transpose shape")
    }
}

/// Scores every image against every text. In conditioned mode each entry
/// pools image `i` with text `j` as the query.
pub fn retrieval_scores(
    model: &Model,
    images: &[ImageTokens],
    texts: &[TextEmbedding],
    mode: ScoreMode,
) -> Result<ScoreMatrix> {
    if images.is_empty() || texts.is_empty() {
        return Err(Error::Input("retrieval needs at least one image and one text".into()));
    }
    let rows: Vec<Vec<f64>> = match mode {
        ScoreMode::Global => images
            .par_iter()
            .map(|im| texts.iter().map(|t| cosine(im.v_g.data(), t.t_g.data())).collect())
            .collect(),
        ScoreMode::Conditioned => {
            let pool = model.pool_params()?;
            let queries = texts
                .iter()
                .map(|t| pool.project_query(t.t_g.data()))
                .collect::<Result<Vec<_>>>()?;
            images
                .par_iter()
                .map(|im| {
                    let prepared = pool.prepare(&im.v_loc)?;
                    Ok(texts
                        .iter()
                        .zip(&queries)
                        .map(|(t, q)| cosine(&pool.pool_projected(&prepared, q).0, t.t_g.data()))
                        .collect())
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    let n_txt = texts.len();
    ScoreMatrix::new(Array::matrix(images.len(), n_txt, rows.into_iter().flatten().collect())?)
}

/// Fraction of query rows whose top `k` candidates (ties to the lower
/// index) contain a positive.
pub fn recall_at_k(scores: &Array, positives: &[Vec<usize>], k: usize) -> Result<f64> {
    let (nq, nc) = (scores.rows(), scores.cols());
    if positives.len() != nq {
        return Err(Error::dim("recall_at_k", &[nq], &[positives.len()]));
    }
    if k == 0 || k > nc {
        return Err(Error::Input(format!("k={k} outside 1..={nc} candidates")));
    }
    let mut hits = 0;
    for (q, pos) in positives.iter().enumerate() {
        if pos.is_empty() {
            return Err(Error::Input(format!("query {q} has no positive")));
        }
        let row = scores.row(q);
        // a positive is in the top k iff fewer than k candidates outrank it
        let hit = pos.iter().any(|&p| {
            let s = row[p];
            let better = row
                .iter()
                .enumerate()
                .filter(|&(c, &v)| v > s || (v == s && c < p))
                .count();
            better < k
        });
        hits += usize::from(hit);
    }
    Ok(hits as f64 / nq as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub i2t_r1: f64,
    pub i2t_r5: f64,
    pub t2i_r1: f64,
    pub t2i_r5: f64,
    pub n_images: usize,
    pub n_texts: usize,
    /// Expected text-to-image R@1 of a random ranking.
    pub t2i_chance: f64,
}

/// Recall in both directions; `text_owner[j]` is the image text `j`
/// belongs to. `k` values larger than the candidate count are clipped.
pub fn retrieval_report(scores: &ScoreMatrix, text_owner: &[usize]) -> Result<RetrievalReport> {
    let (ni, nt) = (scores.n_images(), scores.n_texts());
    if text_owner.len() != nt {
        return Err(Error::dim("retrieval_report", &[nt], &[text_owner.len()]));
    }
    let mut img_pos = vec![Vec::new(); ni];
    for (j, &i) in text_owner.iter().enumerate() {
        img_pos
            .get_mut(i)
            .ok_or_else(|| Error::Input(format!("text {j} owned by missing image {i}")))?
            .push(j);
    }
    let txt_pos: Vec<Vec<usize>> = text_owner.iter().map(|&i| vec![i]).collect();
    let t2i = scores.t2i();
    Ok(RetrievalReport {
        i2t_r1: recall_at_k(scores.i2t(), &img_pos, 1)?,
        i2t_r5: recall_at_k(scores.i2t(), &img_pos, 5.min(nt))?,
        t2i_r1: recall_at_k(&t2i, &txt_pos, 1)?,
        t2i_r5: recall_at_k(&t2i, &txt_pos, 5.min(ni))?,
        n_images: ni,
        n_texts: nt,
        t2i_chance: 1.0 / ni as f64,
    })
}

/// Retrieval where every text is one caption sentence.
pub fn finegrained_eval(model: &Model, images: &[Array], captions: &[LongCaption], mode: ScoreMode) -> Result<RetrievalReport> {
    if images.len() != captions.len() {
        return Err(Error::dim("finegrained_eval", &[images.len()], &[captions.len()]));
    }
    let bench = build_finegrained_benchmark(captions)?;
    let img = model.encode_images(images)?;
    let texts: Vec<&str> = bench.iter().map(|e| e.sentence.as_str()).collect();
    let txt = model.encode_texts(&texts)?;
    let scores = retrieval_scores(model, &img, &txt, mode)?;
    let owners: Vec<usize> = bench.iter().map(|e| e.image_index).collect();
    retrieval_report(&scores, &owners)
}

/// Retrieval with each image's full caption as its single text.
pub fn caption_retrieval_eval(
    model: &Model,
    images: &[Array],
    captions: &[LongCaption],
    mode: ScoreMode,
) -> Result<RetrievalReport> {
    if images.len() != captions.len() {
        return Err(Error::dim("caption_retrieval_eval", &[images.len()], &[captions.len()]));
    }
    let img = model.encode_images(images)?;
    let texts: Vec<String> = captions.iter().map(LongCaption::text).collect();
    let txt = model.encode_texts(&texts)?;
    let scores = retrieval_scores(model, &img, &txt, mode)?;
    retrieval_report(&scores, &(0..images.len()).collect::<Vec<_>>())
}

/// The phrase a template is filled with, e.g. "an orange circle".
pub fn class_phrase(name: &str) -> String {
    format!("{} {name}", article(name))
}

/// Mean text embedding of each class over the templates.
pub fn class_embeddings(model: &Model, names: &[String], templates: &[&str]) -> Result<Vec<Array>> {
    if names.is_empty() || templates.is_empty() {
        return Err(Error::Input("need at least one class and one template".into()));
    }
    let prompts: Vec<String> = names
        .iter()
        .flat_map(|n| templates.iter().map(move |t| t.replacen("{}", &class_phrase(n), 1)))
        .collect();
    let enc = model.encode_texts(&prompts)?;
    let d = model.config.encoder.d;
    Ok(enc
        .chunks(templates.len())
        .map(|group| {
            let mut mean = vec![0.0; d];
            for e in group {
                for (m, v) in mean.iter_mut().zip(e.t_g.data()) {
                    *m += v / group.len() as f64;
                }
            }
            Array::vector(mean)
        })
        .collect())
}

fn argmax(xs: &[f64]) -> usize {
    (0..xs.len()).fold(0, |best, i| if xs[i] > xs[best] { i } else { best })
}

/// Scores each class for an image: global cosine, or the cosine of the
/// class-conditioned pooled vector.
pub fn class_scores(model: &Model, tokens: &ImageTokens, classes: &[Array], route: ScoreMode) -> Result<Vec<f64>> {
    if classes.is_empty() {
        return Err(Error::Input("no classes".into()));
    }
    match route {
        ScoreMode::Global => Ok(classes.iter().map(|c| cosine(tokens.v_g.data(), c.data())).collect()),
        ScoreMode::Conditioned => {
            let pool = model.pool_params()?;
            let prepared = pool.prepare(&tokens.v_loc)?;
            classes
                .iter()
                .map(|c| {
                    let q = pool.project_query(c.data())?;
                    Ok(cosine(&pool.pool_projected(&prepared, &q).0, c.data()))
                })
                .collect()
        }
    }
}

/// Predicted class id; the first maximal score wins.
pub fn zero_shot_classify(model: &Model, tokens: &ImageTokens, classes: &[Array], route: ScoreMode) -> Result<usize> {
    Ok(argmax(&class_scores(model, tokens, classes, route)?))
}

/// Accuracy over single-object scenes against all 24 classes.
pub fn classification_accuracy(model: &Model, scenes: &[SyntheticScene], route: ScoreMode) -> Result<f64> {
    if scenes.is_empty() {
        return Err(Error::Input("no scenes to classify".into()));
    }
    let classes = class_embeddings(model, &class_names(), &DEFAULT_TEMPLATES)?;
    let images: Vec<Array> = scenes.iter().map(SyntheticScene::image).collect();
    let tokens = model.encode_images(&images)?;
    let correct = scenes
        .par_iter()
        .zip(&tokens)
        .map(|(s, t)| {
            let truth = s
                .objects
                .first()
                .ok_or_else(|| Error::Input(format!("scene {} has no object", s.image_id)))?
                .class_id();
            Ok(usize::from(zero_shot_classify(model, t, &classes, route)? == truth))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(correct as f64 / scenes.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegMode {
    /// Token-text cosine, no pooling.
    Clip,
    /// Attention weights under each class query, scaled by the class's
    /// conditioned cosine.
    Tc,
}

impl FromStr for SegMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clip" => Ok(Self::Clip),
            "tc" => Ok(Self::Tc),
            _ => Err(Error::Config(format!("unknown segmentation mode {s:?}; expected clip or tc"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegPrediction {
    /// Row-major class id per pixel.
    pub labels: Vec<u32>,
    pub size: usize,
    pub mode: SegMode,
}

/// Per-token class scores, `n × M`.
pub fn token_class_scores(model: &Model, tokens: &ImageTokens, classes: &[Array], mode: SegMode) -> Result<Vec<Vec<f64>>> {
    let n = tokens.v_loc.rows();
    match mode {
        SegMode::Clip => Ok((0..n)
            .map(|p| classes.iter().map(|c| cosine(tokens.v_loc.row(p), c.data())).collect())
            .collect()),
        SegMode::Tc => {
            let pool = model.pool_params()?;
            let prepared = pool.prepare(&tokens.v_loc)?;
            let stride = n + 1;
            let mut scores = vec![vec![0.0; classes.len()]; n];
            for (j, c) in classes.iter().enumerate() {
                let q = pool.project_query(c.data())?;
                let (v_tc, w) = pool.pool_projected(&prepared, &q);
                let sim = cosine(&v_tc, c.data());
                for (p, row) in scores.iter_mut().enumerate() {
                    let mean = (0..pool.n_heads).map(|h| w[h * stride + p]).sum::<f64>() / pool.n_heads as f64;
                    row[j] = mean * sim;
                }
            }
            Ok(scores)
        }
    }
}

/// Labels every pixel with the best class of the token covering it.
pub fn segment(model: &Model, tokens: &ImageTokens, classes: &[Array], mode: SegMode) -> Result<SegPrediction> {
    if classes.is_empty() {
        return Err(Error::Input("empty class vocabulary".into()));
    }
    let cfg = &model.config.encoder;
    let (grid, patch, size) = (cfg.grid(), cfg.patch_size, cfg.image_size);
    let per_token: Vec<u32> = token_class_scores(model, tokens, classes, mode)?
        .iter()
        .map(|s| argmax(s) as u32)
        .collect();
    let labels = (0..size * size)
        .map(|px| {
            let (y, x) = (px / size, px % size);
            per_token[(y / patch) * grid + x / patch]
        })
        .collect();
    Ok(SegPrediction { labels, size, mode })
}

/// Mean IoU over classes present in the prediction or the truth; pixels
/// whose truth is [`IGNORE`] are skipped.
pub fn miou(predictions: &[Vec<u32>], truths: &[Vec<u32>], m: usize) -> Result<f64> {
    if predictions.len() != truths.len() {
        return Err(Error::dim("miou", &[predictions.len()], &[truths.len()]));
    }
    let (mut tp, mut fp, mut fnn) = (vec![0u64; m], vec![0u64; m], vec![0u64; m]);
    for (p, t) in predictions.iter().zip(truths) {
        if p.len() != t.len() {
            return Err(Error::dim("miou", &[p.len()], &[t.len()]));
        }
        for (&pc, &tc) in p.iter().zip(t) {
            if tc == IGNORE {
                continue;
            }
            let (pc, tc) = (pc as usize, tc as usize);
            if pc >= m || tc >= m {
                return Err(Error::Input(format!("class id outside 0..{m}")));
            }
            if pc == tc {
                tp[pc] += 1;
            } else {
                fp[pc] += 1;
                fnn[tc] += 1;
            }
        }
    }
    let ious: Vec<f64> = (0..m)
        .filter(|&c| tp[c] + fp[c] + fnn[c] > 0)
        .map(|c| tp[c] as f64 / (tp[c] + fp[c] + fnn[c]) as f64)
        .collect();
    if ious.is_empty() {
        return Err(Error::Input("no class occurs in prediction or truth".into()));
    }
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

/// Expected mIoU of labeling each valid pixel uniformly at random among
/// `m` classes: class `c` with `n_c` of `N` pixels scores
/// `n_c / (N + (m−1)·n_c)`, and every class is predicted somewhere.
pub fn random_baseline_miou(truths: &[Vec<u32>], m: usize) -> Result<f64> {
    let mut counts = vec![0u64; m];
    for &t in truths.iter().flatten().filter(|&&t| t != IGNORE) {
        *counts
            .get_mut(t as usize)
            .ok_or_else(|| Error::Input(format!("class id {t} outside 0..{m}")))? += 1;
    }
    let n: u64 = counts.iter().sum();
    if n == 0 || m == 0 {
        return Err(Error::Input("no labeled pixels".into()));
    }
    let mf = m as f64;
    Ok(counts
        .iter()
        .map(|&c| c as f64 / (n as f64 + (mf - 1.0) * c as f64))
        .sum::<f64>()
        / mf)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegReport {
    pub miou: f64,
    pub random_baseline: f64,
    pub mode: SegMode,
}

/// Segments every scene against the full class vocabulary.
pub fn segmentation_eval(model: &Model, scenes: &[SyntheticScene], mode: SegMode) -> Result<SegReport> {
    if scenes.is_empty() {
        return Err(Error::Input("no scenes to segment".into()));
    }
    let names = class_names();
    let classes = class_embeddings(model, &names, &DEFAULT_TEMPLATES)?;
    let images: Vec<Array> = scenes.iter().map(SyntheticScene::image).collect();
    let tokens = model.encode_images(&images)?;
    let preds = tokens
        .par_iter()
        .map(|t| segment(model, t, &classes, mode).map(|p| p.labels))
        .collect::<Result<Vec<_>>>()?;
    let truths: Vec<Vec<u32>> = scenes.iter().map(SyntheticScene::label_map).collect();
    Ok(SegReport {
        miou: miou(&preds, &truths, names.len())?,
        random_baseline: random_baseline_miou(&truths, names.len())?,
        mode,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatmapKind {
    /// Cosine of each local token with the text embedding.
    Similarity,
    /// Pooling attention over the local tokens, all heads averaged.
    Attention,
}

impl FromStr for HeatmapKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "similarity" | "sim" => Ok(Self::Similarity),
            "attention" | "attn" => Ok(Self::Attention),
            _ => Err(Error::Config(format!("unknown heatmap kind {s:?}; expected similarity or attention"))),
        }
    }
}

/// Token-grid heatmap of one text over one image, min-max normalized.
pub fn token_heatmap(model: &Model, tokens: &ImageTokens, t_g: &Array, kind: HeatmapKind) -> Result<Heatmap> {
    let grid = model.config.encoder.grid();
    let values = match kind {
        HeatmapKind::Similarity => (0..tokens.v_loc.rows())
            .map(|p| cosine(tokens.v_loc.row(p), t_g.data()))
            .collect(),
        HeatmapKind::Attention => {
            let pool = model.pool_params()?;
            let (_, map) = attn_pool(t_g.data(), &tokens.v_loc, &pool)?;
            let heads: Vec<usize> = (0..map.n_heads()).collect();
            aggregate_heads(&map, &heads)?
        }
    };
    Ok(Heatmap::new(values, grid)?.normalized())
}

pub fn token_similarity_heatmap(model: &Model, image: &Array, text: &str, kind: HeatmapKind) -> Result<Heatmap> {
    let tokens = model.encode_image(image)?;
    let t = model.encode_text(&model.tokenize(text))?;
    token_heatmap(model, &tokens, &t.t_g, kind)
}

/// IoU of the top-quartile heatmap pixels with `mask`, and the IoU expected
/// when the same number of pixels is placed uniformly at random.
pub fn top_quartile_overlap(pixels: &[f64], mask: &[bool]) -> Result<(f64, f64)> {
    if pixels.len() != mask.len() || pixels.is_empty() {
        return Err(Error::dim("top_quartile_overlap", &[pixels.len()], &[mask.len()]));
    }
    let n = pixels.len();
    let q = n.div_ceil(4);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| pixels[b].total_cmp(&pixels[a]).then(a.cmp(&b)));
    let area = mask.iter().filter(|&&m| m).count();
    let inter = order[..q].iter().filter(|&&i| mask[i]).count();
    let iou = inter as f64 / (q + area - inter) as f64;
    let expected_inter = q as f64 * area as f64 / n as f64;
    let expected = expected_inter / (q as f64 + area as f64 - expected_inter);
    Ok((iou, expected))
}

/// Fraction of (scene, object) pairs where the argmax of the head-averaged
/// pooling attention under the object's sentence falls on a patch that
/// overlaps the object's mask.
pub fn attention_localization(model: &Model, scenes: &[SyntheticScene]) -> Result<f64> {
    let pool = model.pool_params()?;
    let images: Vec<Array> = scenes.iter().map(SyntheticScene::image).collect();
    let tokens = model.encode_images(&images)?;
    let patch = model.config.encoder.patch_size;
    let heads: Vec<usize> = (0..pool.n_heads).collect();
    let mut hits = 0usize;
    let mut total = 0usize;
    for (scene, tok) in scenes.iter().zip(&tokens) {
        for obj in 0..scene.objects.len() {
            let Some(sentence) = scene.object_sentence(obj) else {
                continue;
            };
            let t = model.encode_text(&model.tokenize(sentence))?;
            let (_, map) = attn_pool(t.t_g.data(), &tok.v_loc, &pool)?;
            let agg = aggregate_heads(&map, &heads)?;
            total += 1;
            hits += usize::from(scene.object_patches(obj, patch).contains(&argmax(&agg)));
        }
    }
    if total == 0 {
        return Err(Error::Input("no object sentences to localize".into()));
    }
    Ok(hits as f64 / total as f64)
}
