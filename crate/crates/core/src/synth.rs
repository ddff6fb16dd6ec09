//! Synthetic fine-grained scenes: colored shapes on a 2×2 grid with
//! templated long captions and per-object pixel masks.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::caption::LongCaption;
use crate::diffmath::Array;
use crate::error::{Error, Result};
use crate::rng;

pub const IMAGE_SIZE: usize = 32;
pub const GRID: usize = 2;
pub const CELL_SIZE: usize = IMAGE_SIZE / GRID;
pub const NUM_CELLS: usize = GRID * GRID;
pub const NUM_CLASSES: usize = Color::ALL.len() * Shape::ALL.len();

/// Ground-truth label for pixels that belong to no object.
pub const IGNORE: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Cyan,
    Magenta,
    White,
    Orange,
}

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Cyan,
        Color::Magenta,
        Color::White,
        Color::Orange,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Cyan => "cyan",
            Color::Magenta => "magenta",
            Color::White => "white",
            Color::Orange => "orange",
        }
    }

    fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [225, 40, 40],
            Color::Green => [40, 200, 60],
            Color::Blue => [45, 85, 235],
            Color::Yellow => [235, 220, 40],
            Color::Cyan => [40, 215, 220],
            Color::Magenta => [215, 50, 215],
            Color::White => [240, 240, 240],
            Color::Orange => [250, 140, 25],
        }
    }
}

const POSITIONS: [&str; NUM_CELLS] = ["top left", "top right", "bottom left", "bottom right"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    /// Row-major cell on the 2×2 grid.
    pub cell: usize,
}

impl SceneObject {
    pub fn class_id(&self) -> usize {
        class_id(self.color, self.shape)
    }

    pub fn class_name(&self) -> String {
        format!("{} {}", self.color.name(), self.shape.name())
    }

    pub fn position(&self) -> &'static str {
        POSITIONS[self.cell]
    }
}

pub fn class_id(color: Color, shape: Shape) -> usize {
    let c = Color::ALL.iter().position(|&x| x == color).unwrap();
    let s = Shape::ALL.iter().position(|&x| x == shape).unwrap();
    c * Shape::ALL.len() + s
}

pub fn class_of(id: usize) -> Option<(Color, Shape)> {
    (id < NUM_CLASSES).then(|| (Color::ALL[id / Shape::ALL.len()], Shape::ALL[id % Shape::ALL.len()]))
}

/// The 24 `"<color> <shape>"` class names, indexed by class id.
pub fn class_names() -> Vec<String> {
    (0..NUM_CLASSES)
        .map(|id| {
            let (c, s) = class_of(id).unwrap();
            format!("{} {}", c.name(), s.name())
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub image_id: String,
    /// Row-major RGB bytes, `IMAGE_SIZE × IMAGE_SIZE × 3`.
    pub pixels: Vec<u8>,
    pub objects: Vec<SceneObject>,
    /// One mask per object, same order.
    pub masks: Vec<Mask>,
    pub caption: LongCaption,
}

impl SyntheticScene {
    /// Pixels as an `H × W × 3` array in `[0, 1]`.
    pub fn image(&self) -> Array {
        let data = self.pixels.iter().map(|&p| p as f64 / 255.0).collect();
        Array::new(vec![IMAGE_SIZE, IMAGE_SIZE, 3], data).expect("scene image shape")
    }

    /// Per-pixel class ids, [`IGNORE`] on background.
    pub fn label_map(&self) -> Vec<u32> {
        let mut labels = vec![IGNORE; IMAGE_SIZE * IMAGE_SIZE];
        for (obj, mask) in self.objects.iter().zip(&self.masks) {
            for (l, &b) in labels.iter_mut().zip(&mask.bits) {
                if b {
                    *l = obj.class_id() as u32;
                }
            }
        }
        labels
    }

    /// Indices (row-major on the patch grid) of patches that overlap the
    /// object's mask.
    pub fn object_patches(&self, object: usize, patch: usize) -> Vec<usize> {
        let grid = IMAGE_SIZE / patch;
        let mask = &self.masks[object];
        let mut out = Vec::new();
        for py in 0..grid {
            for px in 0..grid {
                let hit = (0..patch).any(|y| {
                    (0..patch).any(|x| mask.bits[(py * patch + y) * IMAGE_SIZE + px * patch + x])
                });
                if hit {
                    out.push(py * grid + px);
                }
            }
        }
        out
    }

    /// The caption sentence describing `object`, if any.
    pub fn object_sentence(&self, object: usize) -> Option<&str> {
        let obj = &self.objects[object];
        let name = obj.class_name();
        self.caption
            .sentences
            .iter()
            .find(|s| s.contains(&name) && s.contains(obj.position()))
            .map(String::as_str)
    }

    fn layout_key(&self) -> Vec<(usize, usize)> {
        let mut key: Vec<_> = self.objects.iter().map(|o| (o.cell, o.class_id())).collect();
        key.sort_unstable();
        key
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub n_train: usize,
    pub n_test: usize,
    pub objects_per_scene: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_test: 200,
            objects_per_scene: 3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub train: Vec<SyntheticScene>,
    pub test: Vec<SyntheticScene>,
}

const MAX_COLLISION_RETRIES: u64 = 10_000;

/// Generates train and test scenes from disjoint seed streams. Test scenes
/// whose exact layout occurs in the training set are redrawn.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    if !(1..=NUM_CELLS).contains(&spec.objects_per_scene) {
        return Err(Error::Config(format!(
            "objects_per_scene must be in 1..={NUM_CELLS}, got {}",
            spec.objects_per_scene
        )));
    }
    let train: Vec<_> = (0..spec.n_train)
        .map(|i| {
            let mut r = rng::stream(spec.seed, &[rng::STREAM_TRAIN_SCENES, i as u64]);
            generate_scene(format!("train-{i:06}"), spec.objects_per_scene, &mut r)
        })
        .collect();
    let seen: HashSet<_> = train.iter().map(SyntheticScene::layout_key).collect();
    let mut test = Vec::with_capacity(spec.n_test);
    for i in 0..spec.n_test {
        let mut attempt = 0;
        loop {
            let mut r = rng::stream(spec.seed, &[rng::STREAM_TEST_SCENES, i as u64, attempt]);
            let scene = generate_scene(format!("test-{i:06}"), spec.objects_per_scene, &mut r);
            if !seen.contains(&scene.layout_key()) {
                test.push(scene);
                break;
            }
            attempt += 1;
            if attempt > MAX_COLLISION_RETRIES {
                return Err(Error::Config(
                    "cannot draw a test scene that differs from every training scene".into(),
                ));
            }
        }
    }
    Ok(Corpus { train, test })
}

/// Held-out scenes with a fresh seed stream, for evaluations that need a
/// different layout distribution than training (e.g. single-object scenes).
pub fn generate_scenes(n: usize, objects_per_scene: usize, seed: u64, prefix: &str) -> Result<Vec<SyntheticScene>> {
    if !(1..=NUM_CELLS).contains(&objects_per_scene) {
        return Err(Error::Config(format!("objects_per_scene {objects_per_scene} out of range")));
    }
    Ok((0..n)
        .map(|i| {
            let mut r = rng::stream(seed, &[rng::STREAM_TEST_SCENES, i as u64, u64::MAX]);
            generate_scene(format!("{prefix}-{i:06}"), objects_per_scene, &mut r)
        })
        .collect())
}

fn generate_scene(image_id: String, n_objects: usize, rng: &mut ChaCha8Rng) -> SyntheticScene {
    let cells = sample(rng, NUM_CELLS, n_objects).into_vec();
    let classes = sample(rng, NUM_CLASSES, n_objects).into_vec();
    let mut objects: Vec<SceneObject> = cells
        .iter()
        .zip(&classes)
        .map(|(&cell, &class)| {
            let (color, shape) = class_of(class).unwrap();
            SceneObject { shape, color, cell }
        })
        .collect();
    objects.sort_by_key(|o| o.cell);

    let mut pixels = vec![0u8; IMAGE_SIZE * IMAGE_SIZE * 3];
    for p in pixels.iter_mut() {
        *p = 18 + rng.gen_range(0..14u8);
    }
    let mut masks = Vec::with_capacity(objects.len());
    for obj in &objects {
        let dx = rng.gen_range(-1i32..=1);
        let dy = rng.gen_range(-1i32..=1);
        let shade = rng.gen_range(-12i32..=12);
        let bits = shape_mask(obj.shape, obj.cell, dx, dy);
        let rgb = obj.color.rgb().map(|c| (c as i32 + shade).clamp(0, 255) as u8);
        for (i, &b) in bits.iter().enumerate() {
            if b {
                pixels[i * 3..i * 3 + 3].copy_from_slice(&rgb);
            }
        }
        masks.push(Mask { bits });
    }

    let mut sentences: Vec<String> = objects.iter().map(|o| object_sentence(o, rng)).collect();
    sentences.push(global_sentence(&objects));
    sentences.shuffle(rng);
    let caption = LongCaption::new(image_id.clone(), sentences).expect("generated caption");
    SyntheticScene {
        image_id,
        pixels,
        objects,
        masks,
        caption,
    }
}

fn shape_mask(shape: Shape, cell: usize, dx: i32, dy: i32) -> Vec<bool> {
    let ox = (cell % GRID * CELL_SIZE) as i32 + dx;
    let oy = (cell / GRID * CELL_SIZE) as i32 + dy;
    let mut bits = vec![false; IMAGE_SIZE * IMAGE_SIZE];
    let cell_range = |o: i32| (o.max(0), (o + CELL_SIZE as i32).min(IMAGE_SIZE as i32));
    let (x0, x1) = cell_range(ox);
    let (y0, y1) = cell_range(oy);
    for y in y0..y1 {
        for x in x0..x1 {
            // local coordinates inside the 16 × 16 cell
            let lx = (x - ox) as f64 + 0.5;
            let ly = (y - oy) as f64 + 0.5;
            let inside = match shape {
                Shape::Square => (2.0..14.0).contains(&lx) && (2.0..14.0).contains(&ly),
                Shape::Circle => (lx - 8.0).powi(2) + (ly - 8.0).powi(2) <= 36.0,
                Shape::Triangle => {
                    (2.0..14.0).contains(&ly) && (lx - 8.0).abs() <= (ly - 2.0) * 0.5 + 0.5
                }
            };
            bits[y as usize * IMAGE_SIZE + x as usize] = inside;
        }
    }
    bits
}

/// Indefinite article for `word`.
pub fn article(word: &str) -> &'static str {
    if word.starts_with(['a', 'e', 'i', 'o', 'u']) {
        "an"
    } else {
        "a"
    }
}

fn object_sentence(obj: &SceneObject, rng: &mut ChaCha8Rng) -> String {
    let (c, s, p) = (obj.color.name(), obj.shape.name(), obj.position());
    let a = article(c);
    match rng.gen_range(0..4) {
        0 => format!("There is {a} {c} {s} in the {p}."),
        1 => format!("{} {c} {s} sits in the {p}.", capitalize(a)),
        2 => format!("The {p} corner holds {a} {c} {s}."),
        _ => format!("In the {p} we see {a} {c} {s}."),
    }
}

fn global_sentence(objects: &[SceneObject]) -> String {
    let names: Vec<String> = objects
        .iter()
        .map(|o| format!("{} {}", article(o.color.name()), o.class_name()))
        .collect();
    let listed = match names.len() {
        1 => names[0].clone(),
        n => format!("{} and {}", names[..n - 1].join(", "), names[n - 1]),
    };
    format!("A dark picture with {listed}.")
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

// ---------------------------------------------------------------------------
// Files

/// One line of a corpus JSONL file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub image_id: String,
    /// `base64:<raw RGB bytes>` inline, or a path (relative to the corpus
    /// file) to a raw RGB or binary PPM file.
    pub image: String,
    pub caption: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct MaskRecord {
    image_id: String,
    width: usize,
    height: usize,
    objects: Vec<MaskObject>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct MaskObject {
    class_id: usize,
    color: Color,
    shape: Shape,
    cell: usize,
    /// Run lengths over the row-major mask, alternating, starting with unset.
    rle: Vec<u32>,
}

const INLINE_PREFIX: &str = "base64:";

pub fn rle_encode(bits: &[bool]) -> Vec<u32> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0u32;
    for &b in bits {
        if b == current {
            len += 1;
        } else {
            runs.push(len);
            current = b;
            len = 1;
        }
    }
    runs.push(len);
    runs
}

pub fn rle_decode(runs: &[u32], len: usize) -> Result<Vec<bool>> {
    let mut bits = Vec::with_capacity(len);
    let mut value = false;
    for &r in runs {
        bits.extend(std::iter::repeat(value).take(r as usize));
        value = !value;
    }
    if bits.len() != len {
        return Err(Error::Input(format!("run lengths cover {} of {len} pixels", bits.len())));
    }
    Ok(bits)
}

/// Sidecar path holding masks for `corpus_path`.
pub fn masks_path(corpus_path: &Path) -> PathBuf {
    let mut name = corpus_path.file_stem().unwrap_or_default().to_os_string();
    name.push(".masks.jsonl");
    corpus_path.with_file_name(name)
}

/// Writes the corpus JSONL and the masks sidecar.
pub fn export_corpus(scenes: &[SyntheticScene], path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for scene in scenes {
        let rec = CorpusRecord {
            image_id: scene.image_id.clone(),
            image: format!("{INLINE_PREFIX}{}", B64.encode(&scene.pixels)),
            caption: scene.caption.text(),
        };
        let line = serde_json::to_string(&rec).map_err(|e| Error::Internal(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))?;

    let mpath = masks_path(path);
    let mut out = BufWriter::new(File::create(&mpath).map_err(|e| Error::io(&mpath, e))?);
    for scene in scenes {
        let rec = MaskRecord {
            image_id: scene.image_id.clone(),
            width: IMAGE_SIZE,
            height: IMAGE_SIZE,
            objects: scene
                .objects
                .iter()
                .zip(&scene.masks)
                .map(|(o, m)| MaskObject {
                    class_id: o.class_id(),
                    color: o.color,
                    shape: o.shape,
                    cell: o.cell,
                    rle: rle_encode(&m.bits),
                })
                .collect(),
        };
        let line = serde_json::to_string(&rec).map_err(|e| Error::Internal(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| Error::io(&mpath, e))?;
    }
    out.flush().map_err(|e| Error::io(&mpath, e))
}

/// Writes the class vocabulary as `[{"id": .., "name": ..}, ..]`.
pub fn export_class_vocab(path: &Path) -> Result<()> {
    #[derive(Serialize)]
    struct Entry {
        id: usize,
        name: String,
    }
    let entries: Vec<Entry> = class_names()
        .into_iter()
        .enumerate()
        .map(|(id, name)| Entry { id, name })
        .collect();
    let text = serde_json::to_string_pretty(&entries).map_err(|e| Error::Internal(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            detail: format!("line {}: {e}", n + 1),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_corpus_records(path: &Path) -> Result<Vec<CorpusRecord>> {
    read_jsonl(path)
}

/// Decodes the image field of a record into RGB bytes.
pub fn load_record_pixels(rec: &CorpusRecord, corpus_path: &Path) -> Result<Vec<u8>> {
    let expected = IMAGE_SIZE * IMAGE_SIZE * 3;
    let bytes = if let Some(data) = rec.image.strip_prefix(INLINE_PREFIX) {
        B64.decode(data).map_err(|e| Error::Format {
            path: corpus_path.to_path_buf(),
            detail: format!("{}: bad base64 image: {e}", rec.image_id),
        })?
    } else {
        let p = corpus_path.parent().unwrap_or(Path::new(".")).join(&rec.image);
        let raw = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
        strip_ppm_header(&raw).unwrap_or(raw)
    };
    if bytes.len() != expected {
        return Err(Error::Format {
            path: corpus_path.to_path_buf(),
            detail: format!("{}: image has {} bytes, expected {expected}", rec.image_id, bytes.len()),
        });
    }
    Ok(bytes)
}

fn strip_ppm_header(raw: &[u8]) -> Option<Vec<u8>> {
    if !raw.starts_with(b"P6") {
        return None;
    }
    // magic, width, height, maxval, then exactly one whitespace byte
    let mut fields = 0;
    let mut i = 2;
    while fields < 3 && i < raw.len() {
        while i < raw.len() && raw[i].is_ascii_whitespace() {
            i += 1;
        }
        while i < raw.len() && !raw[i].is_ascii_whitespace() {
            i += 1;
        }
        fields += 1;
    }
    raw.get(i + 1..).map(<[u8]>::to_vec)
}

/// Reads a corpus and its masks sidecar back into scenes.
pub fn import_corpus(path: &Path) -> Result<Vec<SyntheticScene>> {
    let records = read_corpus_records(path)?;
    let mpath = masks_path(path);
    let masks: Vec<MaskRecord> = read_jsonl(&mpath)?;
    if masks.len() != records.len() {
        return Err(Error::Format {
            path: mpath,
            detail: format!("{} mask records for {} images", masks.len(), records.len()),
        });
    }
    records
        .iter()
        .zip(masks)
        .map(|(rec, m)| {
            if m.image_id != rec.image_id {
                return Err(Error::Format {
                    path: mpath.clone(),
                    detail: format!("mask record {} does not match image {}", m.image_id, rec.image_id),
                });
            }
            let pixels = load_record_pixels(rec, path)?;
            let mut objects = Vec::new();
            let mut obj_masks = Vec::new();
            for o in m.objects {
                objects.push(SceneObject {
                    shape: o.shape,
                    color: o.color,
                    cell: o.cell,
                });
                obj_masks.push(Mask {
                    bits: rle_decode(&o.rle, m.width * m.height)?,
                });
            }
            Ok(SyntheticScene {
                image_id: rec.image_id.clone(),
                pixels,
                objects,
                masks: obj_masks,
                caption: LongCaption::from_text(rec.image_id.clone(), &rec.caption)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use proptest::prelude::*;

    use super::*;
    use crate::caption::build_finegrained_benchmark;
    use crate::tokenizer::word_pieces;

    fn small() -> Corpus {
        generate_corpus(&CorpusSpec {
            n_train: 60,
            n_test: 20,
            objects_per_scene: 3,
            seed: 5,
        })
        .unwrap()
    }

    #[test]
    fn caption_has_object_plus_global_sentences() {
        let c = small();
        for s in c.train.iter().chain(&c.test) {
            assert_eq!(s.caption.sentences.len(), 4);
            assert_eq!(s.objects.len(), 3);
        }
        let bench = build_finegrained_benchmark(
            &c.test.iter().map(|s| s.caption.clone()).collect::<Vec<_>>(),
        )
        .unwrap();
        assert_eq!(bench.len(), c.test.len() * 4);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = small();
        let b = small();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
    }

    #[test]
    fn object_sentences_identify_their_object() {
        // generator self-check: every object sentence names exactly one
        // (color, shape) pair and that pair is present in its own scene
        let c = small();
        let names = class_names();
        for s in c.train.iter().chain(&c.test) {
            for (i, obj) in s.objects.iter().enumerate() {
                let sentence = s.object_sentence(i).expect("sentence for object");
                let pieces = word_pieces(sentence);
                let mentioned: Vec<_> = names
                    .iter()
                    .enumerate()
                    .filter(|(_, n)| {
                        let w: Vec<&str> = n.split(' ').collect();
                        pieces.windows(2).any(|p| p[0] == w[0] && p[1] == w[1])
                    })
                    .map(|(id, _)| id)
                    .collect();
                assert_eq!(mentioned, vec![obj.class_id()], "{sentence}");
                assert!(sentence.contains(obj.position()));
            }
        }
    }

    #[test]
    fn masks_are_disjoint_and_cover_four_patches() {
        let c = small();
        for s in &c.train {
            let mut owner = vec![None; IMAGE_SIZE * IMAGE_SIZE];
            for (i, m) in s.masks.iter().enumerate() {
                assert!(m.area() > 40);
                for (p, &b) in m.bits.iter().enumerate() {
                    if b {
                        assert!(owner[p].is_none());
                        owner[p] = Some(i);
                    }
                }
                assert!(s.object_patches(i, 8).len() >= 4);
            }
            let cells: HashSet<_> = s.objects.iter().map(|o| o.cell).collect();
            assert_eq!(cells.len(), s.objects.len());
        }
    }

    #[test]
    fn test_layouts_never_occur_in_training() {
        let c = generate_corpus(&CorpusSpec {
            n_train: 400,
            n_test: 100,
            objects_per_scene: 2,
            seed: 1,
        })
        .unwrap();
        let seen: HashSet<_> = c.train.iter().map(SyntheticScene::layout_key).collect();
        assert!(c.test.iter().all(|s| !seen.contains(&s.layout_key())));
    }

    #[test]
    fn exhausted_layout_space_is_an_error() {
        // 96 single-object layouts, all taken by 2000 training scenes
        let spec = CorpusSpec {
            n_train: 2000,
            n_test: 1,
            objects_per_scene: 1,
            seed: 1,
        };
        assert!(generate_corpus(&spec).is_err());
    }

    #[test]
    fn class_frequencies_are_balanced() {
        let c = generate_corpus(&CorpusSpec {
            n_train: 2000,
            n_test: 0,
            objects_per_scene: 3,
            seed: 0,
        })
        .unwrap();
        let mut counts: HashMap<usize, usize> = HashMap::new();
        for s in &c.train {
            for o in &s.objects {
                *counts.entry(o.class_id()).or_default() += 1;
            }
        }
        assert_eq!(counts.len(), NUM_CLASSES);
        let mean = 6000.0 / NUM_CLASSES as f64;
        for (&id, &n) in &counts {
            assert!((n as f64 - mean).abs() <= 0.2 * mean, "class {id}: {n}");
        }
    }

    #[test]
    fn export_import_round_trip() {
        let c = small();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        export_corpus(&c.test, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), c.test.len());
        let back = import_corpus(&path).unwrap();
        assert_eq!(back, c.test);
    }

    #[test]
    fn rle_round_trips_every_mask() {
        let c = small();
        for s in &c.train {
            for m in &s.masks {
                let runs = rle_encode(&m.bits);
                assert_eq!(rle_decode(&runs, m.bits.len()).unwrap(), m.bits);
            }
        }
        assert!(rle_decode(&[3, 2], 4).is_err());
    }

    #[test]
    fn bad_corpus_spec() {
        let spec = CorpusSpec {
            objects_per_scene: 5,
            ..CorpusSpec::default()
        };
        assert!(generate_corpus(&spec).is_err());
    }

    proptest! {
        #[test]
        fn rle_codec(bits in proptest::collection::vec(any::<bool>(), 1..300)) {
            let runs = rle_encode(&bits);
            prop_assert_eq!(rle_decode(&runs, bits.len()).unwrap(), bits);
        }
    }
}
