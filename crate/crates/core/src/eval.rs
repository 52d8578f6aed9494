//! Retrieval scoring and shortcut diagnostics.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container::{self, NamedArray};
use crate::data::{EvalSplit, Item, DATASET_MAGIC};
use crate::error::{Error, Result};
use crate::model::EncoderParams;
use crate::ranking::rank_of;
use crate::rng::SeededRng;

/// Text resamples per composed query in the shortcut index.
pub const DEFAULT_RESAMPLES: usize = 8;

/// Queries whose pools are encoded together in one forward pass.
const POOL_CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub split: String,
    pub accuracy_at_1: f64,
    pub accuracy_at_5: f64,
    pub n_queries: usize,
    pub shortcut_index: f64,
    pub composition_margin_rate: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Rank of the gold candidate for every query, by cosine against its pool.
pub fn gold_ranks(params: &EncoderParams, split: &EvalSplit) -> Result<Vec<usize>> {
    let queries: Vec<Item> = split.queries.iter().map(|q| q.query.clone()).collect();
    if queries.is_empty() {
        return Ok(vec![]);
    }
    let q_emb = params.encode(&queries)?;
    let mut ranks = Vec::with_capacity(queries.len());
    for (c, chunk) in split.queries.chunks(POOL_CHUNK).enumerate() {
        let pool: Vec<Item> = chunk.iter().flat_map(|q| q.pool.iter().cloned()).collect();
        let p_emb = params.encode(&pool)?;
        let mut start = 0;
        for (i, q) in chunk.iter().enumerate() {
            let qe = &q_emb[c * POOL_CHUNK + i];
            let scores: Vec<f64> = p_emb[start..start + q.pool.len()].iter().map(|p| dot(qe, p)).collect();
            ranks.push(rank_of(&scores, q.gold));
            start += q.pool.len();
        }
    }
    Ok(ranks)
}

/// Accuracy@1/@5 plus both shortcut diagnostics with default settings.
pub fn evaluate(params: &EncoderParams, split: &EvalSplit) -> Result<RetrievalReport> {
    evaluate_with(params, split, DEFAULT_RESAMPLES, 0)
}

pub fn evaluate_with(params: &EncoderParams, split: &EvalSplit, n_resample: usize, seed: u64) -> Result<RetrievalReport> {
    let ranks = gold_ranks(params, split)?;
    let n = ranks.len();
    let frac = |k: usize| {
        if n == 0 {
            0.0
        } else {
            ranks.iter().filter(|&&r| r < k).count() as f64 / n as f64
        }
    };
    Ok(RetrievalReport {
        split: split.name.clone(),
        accuracy_at_1: frac(1),
        accuracy_at_5: frac(5),
        n_queries: n,
        shortcut_index: shortcut_index(params, split, n_resample, seed)?,
        composition_margin_rate: composition_margin_rate(params, split)?,
    })
}

/// Mean cosine between `encode(img, t)` and `encode(img, t')` over composed
/// queries and `n_resample` uniformly drawn tokens `t' != t`. Values near 1
/// mean the text barely moves the composed embedding.
pub fn shortcut_index(params: &EncoderParams, split: &EvalSplit, n_resample: usize, seed: u64) -> Result<f64> {
    let vocab = params.config().text_vocab;
    if vocab < 2 {
        return Err(Error::InvalidInput("shortcut index needs a vocabulary of at least 2 tokens".into()));
    }
    if n_resample == 0 {
        return Err(Error::InvalidInput("n_resample must be >= 1".into()));
    }
    let composed: Vec<&Item> = split
        .queries
        .iter()
        .map(|q| &q.query)
        .filter(|q| q.is_composed())
        .collect();
    if composed.is_empty() {
        return Err(Error::Contract(format!("split '{}' has no composed queries", split.name)));
    }
    let mut rng = SeededRng::derive(seed, "eval/shortcut");
    let mut items = Vec::with_capacity(composed.len() * (n_resample + 1));
    for q in &composed {
        let t = q.text_token.expect("composed") as usize;
        items.push((*q).clone());
        for _ in 0..n_resample {
            let draw = rng.below(vocab - 1);
            let t2 = if draw >= t { draw + 1 } else { draw };
            items.push(Item::composed(q.image_view.clone().expect("composed"), t2 as u32));
        }
    }
    let emb = params.encode(&items)?;
    let mut total = 0.0;
    for group in emb.chunks(n_resample + 1) {
        for other in &group[1..] {
            total += dot(&group[0], other);
        }
    }
    Ok(total / (composed.len() * n_resample) as f64)
}

/// Fraction of composed queries whose composed embedding is closer to the gold
/// candidate than both of its unimodal parts are.
pub fn composition_margin_rate(params: &EncoderParams, split: &EvalSplit) -> Result<f64> {
    let mut items = Vec::new();
    for q in split.queries.iter().filter(|q| q.query.is_composed()) {
        let [img, txt] = q.query.unimodal_parts()?;
        items.extend([q.query.clone(), img, txt, q.pool[q.gold].clone()]);
    }
    if items.is_empty() {
        return Err(Error::Contract(format!("split '{}' has no composed queries", split.name)));
    }
    let emb = params.encode(&items)?;
    let n = emb.len() / 4;
    let wins = emb
        .chunks(4)
        .filter(|g| {
            let c = dot(&g[0], &g[3]);
            c > dot(&g[1], &g[3]) && c > dot(&g[2], &g[3])
        })
        .count();
    Ok(wins as f64 / n as f64)
}

/// Group labels of exported embeddings.
pub const GROUP_COMPOSED: i32 = 0;
pub const GROUP_TEXT: i32 = 1;
pub const GROUP_IMAGE: i32 = 2;
pub const GROUP_TARGET: i32 = 3;

/// Embeddings of every composed query, its text and image parts, and its gold
/// target, with group labels and the owning query index.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDump {
    pub split: String,
    pub embeddings: Vec<Vec<f64>>,
    pub groups: Vec<i32>,
    pub query_index: Vec<i32>,
}

pub fn embed_groups(params: &EncoderParams, split: &EvalSplit) -> Result<EmbeddingDump> {
    let mut items = Vec::new();
    let mut groups = Vec::new();
    let mut query_index = Vec::new();
    for (i, q) in split.queries.iter().enumerate().filter(|(_, q)| q.query.is_composed()) {
        let [img, txt] = q.query.unimodal_parts()?;
        items.extend([q.query.clone(), txt, img, q.pool[q.gold].clone()]);
        groups.extend([GROUP_COMPOSED, GROUP_TEXT, GROUP_IMAGE, GROUP_TARGET]);
        query_index.extend([i as i32; 4]);
    }
    if items.is_empty() {
        return Err(Error::Contract(format!("split '{}' has no composed queries", split.name)));
    }
    Ok(EmbeddingDump {
        split: split.name.clone(),
        embeddings: params.encode(&items)?,
        groups,
        query_index,
    })
}

pub fn embeddings_bytes(dump: &EmbeddingDump) -> Result<Vec<u8>> {
    let n = dump.embeddings.len();
    let d = dump.embeddings.first().map_or(0, Vec::len);
    let flat: Vec<f32> = dump.embeddings.iter().flatten().map(|&x| x as f32).collect();
    let meta = json!({
        "kind": "embeddings",
        "split": dump.split,
        "groups": {"composed": GROUP_COMPOSED, "text": GROUP_TEXT, "image": GROUP_IMAGE, "target": GROUP_TARGET},
    });
    let arrays = [
        NamedArray::f32("embeddings", vec![n, d], flat),
        NamedArray::i32("group", vec![n], dump.groups.clone()),
        NamedArray::i32("query_index", vec![n], dump.query_index.clone()),
    ];
    container::encode(DATASET_MAGIC, meta, &arrays)
}

pub fn embeddings_from_bytes(bytes: &[u8]) -> Result<EmbeddingDump> {
    let dec = container::decode(DATASET_MAGIC, bytes)?;
    if dec.meta.get("kind").and_then(|k| k.as_str()) != Some("embeddings") {
        return Err(Error::format(16, "header: not an embedding file"));
    }
    let shape = dec
        .arrays
        .iter()
        .find(|a| a.name == "embeddings")
        .map(|a| a.shape.clone())
        .ok_or_else(|| Error::format(16, "header: missing 'embeddings'"))?;
    if shape.len() != 2 {
        return Err(Error::format(16, "header: 'embeddings' must be 2-D"));
    }
    let (n, d) = (shape[0], shape[1]);
    let flat = dec.f32("embeddings", &[n, d])?;
    let embeddings = (0..n)
        .map(|r| flat[r * d..(r + 1) * d].iter().map(|&x| x as f64).collect())
        .collect();
    Ok(EmbeddingDump {
        split: dec.meta["split"].as_str().unwrap_or_default().to_string(),
        embeddings,
        groups: dec.i32("group", &[n])?.to_vec(),
        query_index: dec.i32("query_index", &[n])?.to_vec(),
    })
}

pub fn export_embeddings(params: &EncoderParams, split: &EvalSplit, path: &Path) -> Result<EmbeddingDump> {
    let dump = embed_groups(params, split)?;
    container::write_file(path, &embeddings_bytes(&dump)?)?;
    Ok(dump)
}

/// Projects points onto their top `k` principal components. Each component
/// is signed so that its largest-magnitude loading is positive.
pub fn pca_project(points: &[Vec<f64>], k: usize) -> Result<Vec<Vec<f64>>> {
    let n = points.len();
    if n < 2 {
        return Err(Error::DegenerateProjection(format!("PCA needs at least 2 points, got {n}")));
    }
    let d = points[0].len();
    if points.iter().any(|p| p.len() != d) {
        return Err(Error::InvalidShape("PCA points have differing widths".into()));
    }
    if k == 0 || k > d {
        return Err(Error::InvalidInput(format!("cannot take {k} components of {d}-dimensional points")));
    }
    let mean: Vec<f64> = (0..d).map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n as f64).collect();
    let centered = DMatrix::from_fn(n, d, |i, j| points[i][j] - mean[j]);
    let spread = centered.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let scale = mean.iter().fold(1.0f64, |m, x| m.max(x.abs()));
    if spread <= 1e-12 * scale {
        return Err(Error::DegenerateProjection("all points are identical".into()));
    }
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let components: Vec<Vec<f64>> = order[..k]
        .iter()
        .map(|&c| {
            let v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
            let lead = v
                .iter()
                .enumerate()
                .fold(0, |best, (i, x)| if x.abs() > v[best].abs() { i } else { best });
            let sign = if v[lead] < 0.0 { -1.0 } else { 1.0 };
            v.into_iter().map(|x| x * sign).collect()
        })
        .collect();
    Ok((0..n)
        .map(|i| {
            let row: Vec<f64> = centered.row(i).iter().copied().collect();
            components.iter().map(|c| dot(&row, c)).collect()
        })
        .collect())
}
