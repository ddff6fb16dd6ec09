//! Text-conditioned attention pooling.
//!
//! A caption's global embedding queries an image's local tokens plus one
//! appended all-zero token. Projections carry no bias, so the appended token
//! always has a zero key (logit 0) and a zero value: attention mass that
//! lands on it contributes nothing to the pooled vector.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::{dot, softmax_in_place, Array, KeyRange, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{init_matrix, Bound, ParamStore};

const LN_EPS: f64 = 1e-5;

thread_local! {
    static POOL_CALLS: std::cell::Cell<u64> = const { std::cell::Cell::new(0) };
}

/// Number of pooled queries evaluated on the current thread so far.
pub fn pool_call_count() -> u64 {
    POOL_CALLS.with(|c| c.get())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoolConfig {
    pub n_heads: usize,
    pub output_proj: bool,
    pub layer_norm: bool,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            n_heads: 4,
            output_proj: true,
            layer_norm: false,
        }
    }
}

pub(crate) fn init_pool<R: Rng + ?Sized>(store: &mut ParamStore, d: usize, cfg: &PoolConfig, rng: &mut R) {
    for w in ["wq", "wk", "wv"] {
        store.insert(format!("pool.{w}"), init_matrix(rng, d, d, 1.0), true);
    }
    if cfg.output_proj {
        store.insert("pool.wo", init_matrix(rng, d, d, 1.0), true);
    }
    if cfg.layer_norm {
        store.insert("pool.ln.g", Array::filled(&[d], 1.0), false);
        store.insert("pool.ln.b", Array::zeros(&[d]), false);
    }
}

/// Pooling weights. `w_q`, `w_k`, `w_v` are `d × d`; head `h` uses columns
/// `h·d/n_heads .. (h+1)·d/n_heads`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnPoolParams {
    pub w_q: Array,
    pub w_k: Array,
    pub w_v: Array,
    pub w_o: Option<Array>,
    /// Gain and bias of an optional output layer norm.
    pub ln: Option<(Array, Array)>,
    pub n_heads: usize,
}

impl AttnPoolParams {
    pub fn from_store(store: &ParamStore, cfg: &PoolConfig) -> Result<Self> {
        let opt = |n: &str| store.get(n).ok().cloned();
        let p = Self {
            w_q: store.get("pool.wq")?.clone(),
            w_k: store.get("pool.wk")?.clone(),
            w_v: store.get("pool.wv")?.clone(),
            w_o: if cfg.output_proj { Some(store.get("pool.wo")?.clone()) } else { None },
            ln: match (cfg.layer_norm, opt("pool.ln.g"), opt("pool.ln.b")) {
                (true, Some(g), Some(b)) => Some((g, b)),
                (true, _, _) => return Err(Error::Internal("pooling layer norm missing".into())),
                _ => None,
            },
            n_heads: cfg.n_heads,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn d(&self) -> usize {
        self.w_q.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.w_q.rows();
        for w in [&self.w_q, &self.w_k, &self.w_v].into_iter().chain(&self.w_o) {
            if w.shape() != [d, d] {
                return Err(Error::dim("attn_pool", w.shape(), &[d, d]));
            }
        }
        if self.n_heads == 0 || d % self.n_heads != 0 {
            return Err(Error::Config(format!("d={d} not divisible by {} heads", self.n_heads)));
        }
        Ok(())
    }

    /// Projects one image's local tokens (plus the zero token) to keys and
    /// values, reusable across any number of queries.
    pub fn prepare(&self, v_loc: &Array) -> Result<PreparedImage> {
        let d = self.d();
        if v_loc.shape().len() != 2 || v_loc.cols() != d {
            return Err(Error::dim("attn_pool", v_loc.shape(), &[v_loc.rows(), d]));
        }
        let n = v_loc.rows();
        let mut keys = project_rows(v_loc, &self.w_k);
        let mut values = project_rows(v_loc, &self.w_v);
        keys.extend(std::iter::repeat(0.0).take(d));
        values.extend(std::iter::repeat(0.0).take(d));
        Ok(PreparedImage { n, d, keys, values })
    }

    pub fn project_query(&self, t_g: &[f64]) -> Result<Vec<f64>> {
        if t_g.len() != self.d() {
            return Err(Error::dim("attn_pool", &[t_g.len()], &[self.d()]));
        }
        Ok(vec_mat(t_g, &self.w_q))
    }

    /// Pools a prepared image with an already projected query. Returns the
    /// pooled vector and the `heads × (n+1)` attention weights.
    pub fn pool_projected(&self, img: &PreparedImage, q: &[f64]) -> (Vec<f64>, Vec<f64>) {
        POOL_CALLS.with(|c| c.set(c.get() + 1));
        let (d, slots, heads) = (img.d, img.n + 1, self.n_heads);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut weights = vec![0.0; heads * slots];
        let mut out = vec![0.0; d];
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let w = &mut weights[h * slots..(h + 1) * slots];
            for (j, wj) in w.iter_mut().enumerate() {
                *wj = scale * dot(&q[cols.clone()], &img.keys[j * d..(j + 1) * d][cols.clone()]);
            }
            softmax_in_place(w);
            for (j, &wj) in w.iter().enumerate() {
                let vrow = &img.values[j * d..(j + 1) * d][cols.clone()];
                for (o, v) in out[cols.clone()].iter_mut().zip(vrow) {
                    *o += wj * v;
                }
            }
        }
        if let Some(wo) = &self.w_o {
            out = vec_mat(&out, wo);
        }
        if let Some((g, b)) = &self.ln {
            layer_norm_in_place(&mut out, g.data(), b.data());
        }
        (out, weights)
    }
}

fn project_rows(x: &Array, w: &Array) -> Vec<f64> {
    (0..x.rows()).flat_map(|r| vec_mat(x.row(r), w)).collect()
}

fn vec_mat(x: &[f64], w: &Array) -> Vec<f64> {
    let mut out = vec![0.0; w.cols()];
    for (xi, wrow) in x.iter().zip(w.data().chunks_exact(w.cols())) {
        for (o, wv) in out.iter_mut().zip(wrow) {
            *o += xi * wv;
        }
    }
    out
}

fn layer_norm_in_place(x: &mut [f64], g: &[f64], b: &[f64]) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    for ((v, g), b) in x.iter_mut().zip(g).zip(b) {
        *v = (*v - mean) * inv * g + b;
    }
}

/// Keys and values of one image: `n + 1` rows each, the last one zero.
#[derive(Clone, Debug)]
pub struct PreparedImage {
    n: usize,
    d: usize,
    keys: Vec<f64>,
    values: Vec<f64>,
}

impl PreparedImage {
    pub fn n_local(&self) -> usize {
        self.n
    }
}

/// Per-head weights over the `n` local tokens followed by the empty token.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub weights: Array,
}

impl AttentionMap {
    pub fn n_heads(&self) -> usize {
        self.weights.rows()
    }

    pub fn n_local(&self) -> usize {
        self.weights.cols() - 1
    }

    /// Weight on the empty token, per head.
    pub fn sink_weights(&self) -> Vec<f64> {
        (0..self.n_heads()).map(|h| self.weights.get(h, self.n_local())).collect()
    }
}

pub fn attn_pool(t_g: &[f64], v_loc: &Array, params: &AttnPoolParams) -> Result<(Array, AttentionMap)> {
    if !t_g.iter().all(|v| v.is_finite()) || !v_loc.is_finite() {
        return Err(Error::Numeric {
            op: "attn_pool",
            detail: "non-finite input".into(),
        });
    }
    let img = params.prepare(v_loc)?;
    let q = params.project_query(t_g)?;
    let (v_tc, w) = params.pool_projected(&img, &q);
    let weights = Array::matrix(params.n_heads, img.n + 1, w)?;
    Ok((Array::vector(v_tc), AttentionMap { weights }))
}

/// Mean of the selected heads over the real tokens, renormalized to sum 1.
pub fn aggregate_heads(map: &AttentionMap, heads: &[usize]) -> Result<Vec<f64>> {
    if heads.is_empty() {
        return Err(Error::Input("no heads selected".into()));
    }
    if let Some(&h) = heads.iter().find(|&&h| h >= map.n_heads()) {
        return Err(Error::Input(format!("head {h} out of range (have {})", map.n_heads())));
    }
    let n = map.n_local();
    let mut acc = vec![0.0; n];
    for &h in heads {
        for (a, w) in acc.iter_mut().zip(&map.weights.row(h)[..n]) {
            *a += w;
        }
    }
    let total: f64 = acc.iter().sum();
    if total > 0.0 {
        acc.iter_mut().for_each(|a| *a /= total);
    } else {
        acc.iter_mut().for_each(|a| *a = 1.0 / n as f64);
    }
    Ok(acc)
}

/// Pooling parameters registered on a tape.
#[derive(Clone, Copy, Debug)]
pub struct PoolVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Option<Var>,
    pub ln: Option<(Var, Var)>,
    pub n_heads: usize,
}

impl PoolVars {
    pub fn bind(p: &Bound<'_>, cfg: &PoolConfig) -> Result<Self> {
        Ok(Self {
            wq: p.var("pool.wq")?,
            wk: p.var("pool.wk")?,
            wv: p.var("pool.wv")?,
            wo: if cfg.output_proj { Some(p.var("pool.wo")?) } else { None },
            ln: if cfg.layer_norm {
                Some((p.var("pool.ln.g")?, p.var("pool.ln.b")?))
            } else {
                None
            },
            n_heads: cfg.n_heads,
        })
    }
}

/// Output of [`pool_on_tape`].
#[derive(Clone, Copy, Debug)]
pub struct PooledBatch {
    /// One pooled row per query.
    pub pooled: Var,
    /// The attention node; see [`Tape::attention_weights`].
    pub attention: Var,
}

/// Pools on a tape. `local` stacks `n_local` token rows per image; query row
/// `q` pools image `image_of[q]`.
pub fn pool_on_tape(
    tape: &mut Tape,
    pv: &PoolVars,
    local: Var,
    n_local: usize,
    queries: Var,
    image_of: &[usize],
) -> Result<PooledBatch> {
    let rows = tape.shape(local)[0];
    let d = tape.shape(local)[1];
    if n_local == 0 || rows % n_local != 0 {
        return Err(Error::dim("pool_on_tape", &[rows, d], &[n_local, d]));
    }
    let count = rows / n_local;
    if let Some(&bad) = image_of.iter().find(|&&i| i >= count) {
        return Err(Error::Input(format!("query refers to image {bad} of {count}")));
    }
    let zero = tape.constant(Array::zeros(&[1, d]));
    let padded = tape.concat_rows(&[local, zero])?;
    let order: Vec<usize> = (0..count)
        .flat_map(|i| (i * n_local..(i + 1) * n_local).chain(std::iter::once(rows)))
        .collect();
    let x = tape.gather_rows(padded, &order)?;
    let k = tape.matmul(x, pv.wk)?;
    let v = tape.matmul(x, pv.wv)?;
    let q = tape.matmul(queries, pv.wq)?;
    let ranges: Vec<KeyRange> = image_of.iter().map(|&i| KeyRange::new(i * (n_local + 1), n_local + 1)).collect();
    let attention = tape.attention(q, k, v, &ranges, pv.n_heads)?;
    POOL_CALLS.with(|c| c.set(c.get() + image_of.len() as u64));
    let mut pooled = attention;
    if let Some(wo) = pv.wo {
        pooled = tape.matmul(pooled, wo)?;
    }
    if let Some((g, b)) = pv.ln {
        pooled = tape.layer_norm(pooled, g, b)?;
    }
    Ok(PooledBatch { pooled, attention })
}

/// Token-grid heatmap with export to graymap and CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    /// `grid × grid` values, row-major.
    pub grid: Vec<f64>,
    pub grid_size: usize,
}

impl Heatmap {
    pub fn new(grid: Vec<f64>, grid_size: usize) -> Result<Self> {
        if grid_size == 0 || grid.len() != grid_size * grid_size {
            return Err(Error::dim("heatmap", &[grid.len()], &[grid_size * grid_size]));
        }
        Ok(Self { grid, grid_size })
    }

    /// Min-max scaled copy; a constant map becomes all 0.5.
    pub fn normalized(&self) -> Self {
        let lo = self.grid.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.grid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let grid = if hi - lo > 1e-12 {
            self.grid.iter().map(|v| (v - lo) / (hi - lo)).collect()
        } else {
            vec![0.5; self.grid.len()]
        };
        Self {
            grid,
            grid_size: self.grid_size,
        }
    }

    /// Bilinear upsampling to `size × size` pixels (pixel-center aligned).
    pub fn upsample(&self, size: usize) -> Vec<f64> {
        let g = self.grid_size;
        let at = |y: usize, x: usize| self.grid[y * g + x];
        let coord = |p: usize| {
            let s = ((p as f64 + 0.5) * g as f64 / size as f64 - 0.5).clamp(0.0, (g - 1) as f64);
            let i0 = s.floor() as usize;
            (i0, (i0 + 1).min(g - 1), s - i0 as f64)
        };
        let mut out = Vec::with_capacity(size * size);
        for py in 0..size {
            let (y0, y1, fy) = coord(py);
            for px in 0..size {
                let (x0, x1, fx) = coord(px);
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
        out
    }

    /// Writes the upsampled map as a binary graymap; values are clamped to
    /// `[0, 1]` before quantization.
    pub fn write_pgm(&self, path: &Path, size: usize) -> Result<()> {
        let pixels = self.upsample(size);
        let mut f = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        let bytes: Vec<u8> = pixels.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        write!(f, "P5\n{size} {size}\n255\n")
            .and_then(|_| f.write_all(&bytes))
            .and_then(|_| f.flush())
            .map_err(|e| Error::io(path, e))
    }

    /// Raw grid values, one grid row per line.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        for row in self.grid.chunks(self.grid_size) {
            let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            writeln!(f, "{}", line.join(",")).map_err(|e| Error::io(path, e))?;
        }
        f.flush().map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::diffmath::{cosine, finite_diff_check, GradCheckConfig};

    fn identity_params(d: usize) -> AttnPoolParams {
        AttnPoolParams {
            w_q: Array::identity(d),
            w_k: Array::identity(d),
            w_v: Array::identity(d),
            w_o: Some(Array::identity(d)),
            ln: None,
            n_heads: 1,
        }
    }

    fn random_params(d: usize, heads: usize, seed: u64) -> AttnPoolParams {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = PoolConfig {
            n_heads: heads,
            ..PoolConfig::default()
        };
        init_pool(&mut store, d, &cfg, &mut rng);
        AttnPoolParams::from_store(&store, &cfg).unwrap()
    }

    fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array {
        Array::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn orthogonal_query_splits_evenly_with_sink() {
        let p = identity_params(2);
        let v = Array::matrix(1, 2, vec![0.0, 3.0]).unwrap();
        let (v_tc, map) = attn_pool(&[1.0, 0.0], &v, &p).unwrap();
        assert_eq!(map.weights.data(), &[0.5, 0.5]);
        assert_eq!(v_tc.data(), &[0.0, 1.5]);
    }

    #[test]
    fn zero_tokens_give_uniform_weights_and_zero_output() {
        let p = random_params(8, 2, 1);
        let (v_tc, map) = attn_pool(&[0.3; 8], &Array::zeros(&[4, 8]), &p).unwrap();
        assert!(map.weights.data().iter().all(|&w| (w - 0.2).abs() < 1e-15));
        assert!(v_tc.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn shape_errors() {
        let p = random_params(8, 2, 1);
        assert!(attn_pool(&[0.0; 7], &Array::zeros(&[4, 8]), &p).is_err());
        assert!(attn_pool(&[0.0; 8], &Array::zeros(&[4, 6]), &p).is_err());
        assert!(attn_pool(&[f64::NAN; 8], &Array::zeros(&[4, 8]), &p).is_err());
    }

    #[test]
    fn tape_path_matches_direct_path() {
        let (d, n) = (8, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let cfg = PoolConfig {
            n_heads: 2,
            output_proj: true,
            layer_norm: true,
        };
        init_pool(&mut store, d, &cfg, &mut rng);
        let params = AttnPoolParams::from_store(&store, &cfg).unwrap();
        let local = random_matrix(2 * n, d, &mut rng);
        let queries = random_matrix(3, d, &mut rng);
        let image_of = [1, 0, 1];

        let mut tape = Tape::new();
        let bound = store.bind_frozen(&mut tape);
        let pv = PoolVars::bind(&bound, &cfg).unwrap();
        let l = tape.constant(local.clone());
        let q = tape.constant(queries.clone());
        let out = pool_on_tape(&mut tape, &pv, l, n, q, &image_of).unwrap();
        for (r, &img) in image_of.iter().enumerate() {
            let v_loc = Array::matrix(n, d, local.data()[img * n * d..(img + 1) * n * d].to_vec()).unwrap();
            let (v_tc, map) = attn_pool(queries.row(r), &v_loc, &params).unwrap();
            for (a, b) in tape.value(out.pooled).row(r).iter().zip(v_tc.data()) {
                assert!((a - b).abs() < 1e-12);
            }
            let w = tape.attention_weights(out.attention, r).unwrap();
            for (a, b) in w.data().iter().zip(map.weights.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cosine_objective_gradients_match_finite_differences() {
        let (d, n, heads) = (8, 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_params(d, heads, 6);
        let t_g = random_matrix(1, d, &mut rng);
        let v_loc = random_matrix(n, d, &mut rng);
        let params = vec![p.w_q.clone(), p.w_k.clone(), p.w_v.clone(), p.w_o.clone().unwrap()];
        let names = ["wq", "wk", "wv", "wo"].map(String::from).to_vec();

        let build = |tape: &mut Tape, ws: &[Var]| -> Result<Var> {
            let pv = PoolVars {
                wq: ws[0],
                wk: ws[1],
                wv: ws[2],
                wo: Some(ws[3]),
                ln: None,
                n_heads: heads,
            };
            let l = tape.constant(v_loc.clone());
            let q = tape.constant(t_g.clone());
            let out = pool_on_tape(tape, &pv, l, n, q, &[0])?;
            let a = tape.l2_normalize(out.pooled)?;
            let b = tape.l2_normalize(q)?;
            let s = tape.row_dot(a, b)?;
            Ok(tape.sum(s))
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|w| tape.param(w.clone())).collect();
        let loss = build(&mut tape, &vars).unwrap();
        let grads = tape.backward(loss).unwrap();
        let analytic: Vec<Array> = vars.iter().map(|&v| grads.get(v)).collect();
        let report = finite_diff_check(
            |ws| {
                let mut t = Tape::new();
                let vs: Vec<Var> = ws.iter().map(|w| t.constant(w.clone())).collect();
                let l = build(&mut t, &vs)?;
                Ok(t.value(l).data()[0])
            },
            &names,
            &params,
            &analytic,
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn aggregate_heads_rules() {
        let map = AttentionMap {
            weights: Array::from_rows(&[vec![0.2, 0.3, 0.5], vec![0.1, 0.1, 0.8]]).unwrap(),
        };
        assert_eq!(aggregate_heads(&map, &[0]).unwrap(), vec![0.4, 0.6]);
        let both = aggregate_heads(&map, &[0, 1]).unwrap();
        assert!((both[0] - 0.3 / 0.7).abs() < 1e-15);
        assert!(aggregate_heads(&map, &[]).is_err());
        assert!(aggregate_heads(&map, &[2]).is_err());
        let same = AttentionMap {
            weights: Array::from_rows(&[vec![0.2, 0.3, 0.5], vec![0.2, 0.3, 0.5]]).unwrap(),
        };
        assert_eq!(aggregate_heads(&same, &[0, 1]).unwrap(), aggregate_heads(&same, &[1]).unwrap());
    }

    #[test]
    fn heatmap_degenerate_and_export() {
        let h = Heatmap::new(vec![2.0; 4], 2).unwrap().normalized();
        assert_eq!(h.grid, vec![0.5; 4]);
        let dir = tempfile::tempdir().unwrap();
        let pgm = dir.path().join("h.pgm");
        let h = Heatmap::new(vec![0.0, 1.0, 0.0, 1.0], 2).unwrap();
        h.write_pgm(&pgm, 32).unwrap();
        let bytes = std::fs::read(&pgm).unwrap();
        assert!(bytes.starts_with(b"P5\n32 32\n255\n"));
        assert_eq!(bytes.len(), b"P5\n32 32\n255\n".len() + 32 * 32);
        // left edge clamps to the left column, right edge to the right
        let up = h.upsample(32);
        assert_eq!((up[0], up[31]), (0.0, 1.0));
        assert!(up.iter().all(|v| (0.0..=1.0).contains(v)));
        h.write_csv(&dir.path().join("h.csv")).unwrap();
        assert_eq!(std::fs::read_to_string(dir.path().join("h.csv")).unwrap(), "0,1\n0,1\n");
        assert!(Heatmap::new(vec![0.0; 3], 2).is_err());
    }

    proptest! {
        #[test]
        fn weights_are_distributions(seed in 0u64..500, scale in 0.01f64..20.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_params(8, 4, seed);
            let v = random_matrix(5, 8, &mut rng);
            let q: Vec<f64> = (0..8).map(|_| scale * rng.gen_range(-1.0..1.0)).collect();
            let (_, map) = attn_pool(&q, &v, &p).unwrap();
            for h in 0..4 {
                let row = map.weights.row(h);
                prop_assert!(row.iter().all(|&w| w > 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn query_scaling_keeps_real_token_argmax(seed in 0u64..500, factor in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_params(8, 1, seed);
            let v = random_matrix(5, 8, &mut rng);
            let q: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let scaled: Vec<f64> = q.iter().map(|x| x * factor).collect();
            let argmax = |q: &[f64]| {
                let (_, m) = attn_pool(q, &v, &p).unwrap();
                let w = &m.weights.row(0)[..5];
                (0..5).fold(0, |b, i| if w[i] > w[b] { i } else { b })
            };
            prop_assert_eq!(argmax(&q), argmax(&scaled));
        }

        #[test]
        fn permuting_tokens_permutes_weights(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_params(8, 2, seed);
            let v = random_matrix(4, 8, &mut rng);
            let perm = [2, 0, 3, 1];
            let rows: Vec<Vec<f64>> = perm.iter().map(|&i| v.row(i).to_vec()).collect();
            let vp = Array::from_rows(&rows).unwrap();
            let q: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (a, ma) = attn_pool(&q, &v, &p).unwrap();
            let (b, mb) = attn_pool(&q, &vp, &p).unwrap();
            prop_assert!(cosine(a.data(), b.data()) > 1.0 - 1e-12);
            for h in 0..2 {
                for (k, &i) in perm.iter().enumerate() {
                    prop_assert!((mb.weights.get(h, k) - ma.weights.get(h, i)).abs() < 1e-12);
                }
            }
        }
    }
}
