//! Style image grouping.
//!
//! Given a query artwork `y0`, the related style set is every image of the
//! corpus whose embedding lies closer to `y0` than a threshold `t` under the
//! cosine distance, where `t` is a low quantile of all pairwise distances in
//! the corpus. Retrieval is an exact linear scan.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels;
use crate::model::ImageBatch;

pub const INDEX_MAGIC: [u8; 4] = *b"SKEI";
pub const INDEX_VERSION: u32 = 1;
pub const DEFAULT_QUANTILE: f64 = 0.10;
/// Pair count above which the quantile is estimated from a sample.
pub const DEFAULT_PAIR_CAP: usize = 1_000_000;
pub const DISTANCE_METRIC: &str = "cosine: 1 - a.b / (|a| |b|)";

/// Anything that maps an image to a fixed-width feature vector.
pub trait Embedder {
    fn dim(&self) -> usize;
    fn embed(&self, img: &ImageBatch) -> Result<Vec<f64>>;
}

/// Cosine distance `1 - a.b / (|a| |b|)`, clamped to `[0, 2]`.
pub fn distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((1.0 - dot / (na * nb).sqrt()).clamp(0.0, 2.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    ids: Vec<String>,
    dim: usize,
    vectors: Vec<f32>,
    pub source: String,
}

impl EmbeddingIndex {
    pub fn new(ids: Vec<String>, rows: &[Vec<f64>], source: impl Into<String>) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut vectors = Vec::with_capacity(rows.len() * dim);
        for (id, r) in ids.iter().zip(rows) {
            if r.len() != dim {
                return Err(Error::Shape(format!(
                    "embedding `{}` has length {}, expected {}",
                    id,
                    r.len(),
                    dim
                )));
            }
            vectors.extend(r.iter().map(|&v| v as f32));
        }
        if ids.len() != rows.len() {
            return Err(Error::Shape(format!(
                "{} ids for {} vectors",
                ids.len(),
                rows.len()
            )));
        }
        Self::from_parts(ids, dim, vectors, source.into())
    }

    fn from_parts(ids: Vec<String>, dim: usize, vectors: Vec<f32>, source: String) -> Result<Self> {
        if ids.len() < 2 {
            return Err(Error::DegenerateIndex(format!(
                "need at least 2 embeddings, got {}",
                ids.len()
            )));
        }
        if dim == 0 {
            return Err(Error::DegenerateIndex("zero-width embeddings".into()));
        }
        let mut seen = HashSet::new();
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::DegenerateIndex(format!("duplicate id `{}`", id)));
            }
        }
        for (id, row) in ids.iter().zip(vectors.chunks(dim)) {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("embedding `{}`", id)));
            }
            if row.iter().all(|&v| v == 0.0) {
                return Err(Error::DegenerateIndex(format!("embedding `{}` is zero", id)));
            }
        }
        Ok(Self {
            ids,
            dim,
            vectors,
            source,
        })
    }

    pub fn build(
        embedder: &dyn Embedder,
        items: &[(String, ImageBatch)],
        source: impl Into<String>,
    ) -> Result<Self> {
        let mut ids = Vec::with_capacity(items.len());
        let mut rows = Vec::with_capacity(items.len());
        for (id, img) in items {
            ids.push(id.clone());
            rows.push(embedder.embed(img)?);
        }
        Self::new(ids, &rows, source)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    pub fn vector(&self, i: usize) -> Vec<f64> {
        self.vectors[i * self.dim..(i + 1) * self.dim]
            .iter()
            .map(|&v| v as f64)
            .collect()
    }

    pub fn pair_distance(&self, i: usize, j: usize) -> Result<f64> {
        distance(&self.vector(i), &self.vector(j))
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&INDEX_MAGIC)?;
        w.write_all(&INDEX_VERSION.to_le_bytes())?;
        w.write_all(&(self.ids.len() as u64).to_le_bytes())?;
        w.write_all(&(self.dim as u64).to_le_bytes())?;
        for id in &self.ids {
            w.write_all(&(id.len() as u32).to_le_bytes())?;
            w.write_all(id.as_bytes())?;
        }
        for v in &self.vectors {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn from_bytes(bytes: &[u8], source: impl Into<String>) -> std::result::Result<Self, String> {
        let mut r = bytes;
        let mut take = |n: usize| -> std::result::Result<Vec<u8>, String> {
            let mut buf = vec![0u8; n];
            r.read_exact(&mut buf).map_err(|_| "truncated".to_string())?;
            Ok(buf)
        };
        if take(4)? != INDEX_MAGIC {
            return Err("bad magic".into());
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != INDEX_VERSION {
            return Err(format!("unsupported version {}", version));
        }
        let m = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let f = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let mut ids = Vec::with_capacity(m.min(1 << 20));
        for _ in 0..m {
            let len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let id = String::from_utf8(take(len)?).map_err(|_| "id is not UTF-8".to_string())?;
            ids.push(id);
        }
        let n = m.checked_mul(f).ok_or("size overflow")?;
        let raw = take(n.checked_mul(4).ok_or("size overflow")?)?;
        let vectors = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if !r.is_empty() {
            return Err("trailing bytes".into());
        }
        Self::from_parts(ids, f, vectors, source.into()).map_err(|e| e.to_string())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path.display().to_string()).map_err(|reason| Error::CorruptFile {
            path: path.to_path_buf(),
            reason,
        })
    }
}

/// 1-based rank of the lower empirical `q`-quantile among `count` sorted
/// values: the smallest `k` with `k / count >= q`.
pub fn lower_quantile_rank(count: usize, q: f64) -> usize {
    let c = count as f64;
    let mut k = ((q * c).ceil() as usize).clamp(1, count);
    while k > 1 && (k - 1) as f64 / c >= q {
        k -= 1;
    }
    while k < count && (k as f64) / c < q {
        k += 1;
    }
    k
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantileOptions {
    pub pair_cap: usize,
    pub seed: u64,
}

impl Default for QuantileOptions {
    fn default() -> Self {
        Self {
            pair_cap: DEFAULT_PAIR_CAP,
            seed: 0,
        }
    }
}

pub fn quantile_threshold(index: &EmbeddingIndex, q: f64) -> Result<f64> {
    quantile_threshold_with(index, q, &QuantileOptions::default())
}

/// Lower empirical quantile of distances over distinct unordered pairs. When
/// the pair count exceeds `opts.pair_cap`, a seeded uniform sample of
/// `pair_cap` pairs is used instead.
pub fn quantile_threshold_with(index: &EmbeddingIndex, q: f64, opts: &QuantileOptions) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::OutOfRange(format!("quantile {} not in (0, 1)", q)));
    }
    let m = index.len();
    if m < 2 {
        return Err(Error::DegenerateIndex(format!("{} embeddings", m)));
    }
    let pairs = m * (m - 1) / 2;
    let mut dists = Vec::with_capacity(pairs.min(opts.pair_cap));
    if pairs <= opts.pair_cap {
        for i in 0..m {
            let vi = index.vector(i);
            for j in i + 1..m {
                dists.push(distance(&vi, &index.vector(j))?);
            }
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        for _ in 0..opts.pair_cap {
            let i = rng.random_range(0..m);
            let mut j = rng.random_range(0..m - 1);
            if j >= i {
                j += 1;
            }
            dists.push(index.pair_distance(i, j)?);
        }
    }
    let k = lower_quantile_rank(dists.len(), q);
    let (_, kth, _) = dists.select_nth_unstable_by(k - 1, f64::total_cmp);
    Ok(*kth)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleSet {
    pub query_id: String,
    pub member_ids: Vec<String>,
    pub threshold: f64,
    pub quantile: f64,
    pub distance_metric: String,
}

impl StyleSet {
    pub fn len(&self) -> usize {
        self.member_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.member_ids.is_empty()
    }

    /// Line-oriented manifest: `#`-prefixed header lines, then one member per
    /// line in index order.
    pub fn to_manifest(&self) -> String {
        let mut s = String::new();
        s.push_str("# style-set v1\n");
        s.push_str(&format!("# query: {}\n", self.query_id));
        s.push_str(&format!("# quantile: {}\n", self.quantile));
        s.push_str(&format!("# threshold: {}\n", self.threshold));
        s.push_str(&format!("# metric: {}\n", self.distance_metric));
        s.push_str(&format!("# members: {}\n", self.member_ids.len()));
        for m in &self.member_ids {
            s.push_str(m);
            s.push('\n');
        }
        s
    }

    pub fn from_manifest(text: &str) -> std::result::Result<Self, String> {
        let mut set = StyleSet {
            query_id: String::new(),
            member_ids: Vec::new(),
            threshold: f64::NAN,
            quantile: f64::NAN,
            distance_metric: String::new(),
        };
        let mut lines = text.lines();
        if lines.next() != Some("# style-set v1") {
            return Err("missing `# style-set v1` header".into());
        }
        for line in lines {
            if let Some(h) = line.strip_prefix("# ") {
                let (k, v) = h.split_once(": ").ok_or_else(|| format!("bad header `{line}`"))?;
                match k {
                    "query" => set.query_id = v.to_string(),
                    "quantile" => set.quantile = v.parse().map_err(|_| format!("bad quantile `{v}`"))?,
                    "threshold" => {
                        set.threshold = v.parse().map_err(|_| format!("bad threshold `{v}`"))?
                    }
                    "metric" => set.distance_metric = v.to_string(),
                    _ => {}
                }
            } else if !line.is_empty() {
                set.member_ids.push(line.to_string());
            }
        }
        Ok(set)
    }
}

/// Members of the index strictly closer than `threshold` to `query`. The
/// entry `query_pos`, if given, is always a member.
fn scan(index: &EmbeddingIndex, query: &[f64], query_pos: Option<usize>, threshold: f64) -> Result<Vec<String>> {
    let mut members = Vec::new();
    for i in 0..index.len() {
        if Some(i) == query_pos || distance(query, &index.vector(i))? < threshold {
            members.push(index.ids[i].clone());
        }
    }
    Ok(members)
}

pub fn build_style_set(query_id: &str, index: &EmbeddingIndex, q: f64) -> Result<StyleSet> {
    build_style_set_with(query_id, index, q, &QuantileOptions::default())
}

pub fn build_style_set_with(
    query_id: &str,
    index: &EmbeddingIndex,
    q: f64,
    opts: &QuantileOptions,
) -> Result<StyleSet> {
    let pos = index
        .position(query_id)
        .ok_or_else(|| Error::UnknownQuery(query_id.to_string()))?;
    let threshold = quantile_threshold_with(index, q, opts)?;
    Ok(StyleSet {
        query_id: query_id.to_string(),
        member_ids: scan(index, &index.vector(pos), Some(pos), threshold)?,
        threshold,
        quantile: q,
        distance_metric: DISTANCE_METRIC.to_string(),
    })
}

/// Style set for a query that is not itself part of the corpus.
pub fn build_style_set_for_vector(
    query_id: &str,
    query: &[f64],
    index: &EmbeddingIndex,
    q: f64,
) -> Result<StyleSet> {
    build_style_set_for_vector_with(query_id, query, index, q, &QuantileOptions::default())
}

pub fn build_style_set_for_vector_with(
    query_id: &str,
    query: &[f64],
    index: &EmbeddingIndex,
    q: f64,
    opts: &QuantileOptions,
) -> Result<StyleSet> {
    if query.len() != index.dim() {
        return Err(Error::Shape(format!(
            "query has {} dims, index has {}",
            query.len(),
            index.dim()
        )));
    }
    let threshold = quantile_threshold_with(index, q, opts)?;
    Ok(StyleSet {
        query_id: query_id.to_string(),
        member_ids: scan(index, query, None, threshold)?,
        threshold,
        quantile: q,
        distance_metric: DISTANCE_METRIC.to_string(),
    })
}

/// Fixed colour-statistics descriptor: a 4x4 bilinear thumbnail, per-channel
/// mean and standard deviation, and a constant 1 (so no image maps to the zero
/// vector). Used when no trained classifier is available.
#[derive(Debug, Clone, Copy, Default)]
pub struct ColorStatsEmbedder;

impl Embedder for ColorStatsEmbedder {
    fn dim(&self) -> usize {
        3 * 16 + 6 + 1
    }

    fn embed(&self, img: &ImageBatch) -> Result<Vec<f64>> {
        let t = img.sample(0)?.into_tensor();
        let thumb = kernels::resize_bilinear(&t, 4, 4)?;
        let mut v = thumb.data().to_vec();
        let plane = img.height() * img.width();
        for ch in t.data().chunks(plane) {
            let mean = ch.iter().sum::<f64>() / plane as f64;
            let var = ch.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / plane as f64;
            v.push(mean);
            v.push(var.sqrt());
        }
        v.push(1.0);
        Ok(v)
    }
}
