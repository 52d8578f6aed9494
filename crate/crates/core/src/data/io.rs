use std::path::Path;

use serde_json::json;

use super::{DatasetBundle, EvalQuery, EvalSplit, GeneratorConfig, Item, Pair};
use crate::container::{self, Decoded, NamedArray};
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 8] = b"MCALAB01";

/// Flattens items into `{prefix}_image` (zeros where absent),
/// `{prefix}_has_image` and `{prefix}_token` (-1 where absent).
pub(crate) fn item_arrays(prefix: &str, items: &[&Item], image_dim: usize) -> Vec<NamedArray> {
    let n = items.len();
    let mut image = Vec::with_capacity(n * image_dim);
    let mut has = Vec::with_capacity(n);
    let mut token = Vec::with_capacity(n);
    for it in items {
        match &it.image_view {
            Some(v) => {
                image.extend_from_slice(v);
                has.push(1);
            }
            None => {
                image.extend(std::iter::repeat_n(0.0f32, image_dim));
                has.push(0);
            }
        }
        token.push(it.text_token.map_or(-1, |t| t as i32));
    }
    vec![
        NamedArray::f32(format!("{prefix}_image"), vec![n, image_dim], image),
        NamedArray::i32(format!("{prefix}_has_image"), vec![n], has),
        NamedArray::i32(format!("{prefix}_token"), vec![n], token),
    ]
}

pub(crate) fn read_items(d: &Decoded, prefix: &str, n: usize, image_dim: usize) -> Result<Vec<Item>> {
    let image = d.f32(&format!("{prefix}_image"), &[n, image_dim])?;
    let has = d.i32(&format!("{prefix}_has_image"), &[n])?;
    let token = d.i32(&format!("{prefix}_token"), &[n])?;
    (0..n)
        .map(|i| {
            let item = Item {
                image_view: (has[i] != 0).then(|| image[i * image_dim..(i + 1) * image_dim].to_vec()),
                text_token: (token[i] >= 0).then_some(token[i] as u32),
            };
            if item.is_empty() {
                Err(Error::format(0, format!("{prefix} item {i} has no modality")))
            } else {
                Ok(item)
            }
        })
        .collect()
}

fn latents(rows: impl Iterator<Item = Vec<f32>>) -> Vec<f32> {
    rows.flatten().collect()
}

fn split_arrays(s: &EvalSplit, cfg: &GeneratorConfig) -> Vec<NamedArray> {
    let q = s.queries.len();
    let p = cfg.pool_size;
    let l = cfg.latent_dim;
    let p_name = &s.name;
    let queries: Vec<&Item> = s.queries.iter().map(|x| &x.query).collect();
    let pool: Vec<&Item> = s.queries.iter().flat_map(|x| x.pool.iter()).collect();
    let mut out = item_arrays(&format!("{p_name}_query"), &queries, cfg.image_dim);
    out.extend(item_arrays(&format!("{p_name}_pool"), &pool, cfg.image_dim));
    out.push(NamedArray::i32(
        format!("{p_name}_gold"),
        vec![q],
        s.queries.iter().map(|x| x.gold as i32).collect(),
    ));
    out.push(NamedArray::f32(
        format!("{p_name}_latent_base"),
        vec![q, l],
        latents(s.queries.iter().map(|x| x.latent_base.clone())),
    ));
    out.push(NamedArray::i32(
        format!("{p_name}_modification"),
        vec![q],
        s.queries.iter().map(|x| x.modification_id as i32).collect(),
    ));
    out.push(NamedArray::f32(
        format!("{p_name}_pool_latent"),
        vec![q * p, l],
        latents(s.queries.iter().flat_map(|x| x.pool_latents.iter().cloned())),
    ));
    out
}

fn read_split(d: &Decoded, name: &str, q: usize, cfg: &GeneratorConfig) -> Result<EvalSplit> {
    let (p, l) = (cfg.pool_size, cfg.latent_dim);
    let queries = read_items(d, &format!("{name}_query"), q, cfg.image_dim)?;
    let pool = read_items(d, &format!("{name}_pool"), q * p, cfg.image_dim)?;
    let gold = d.i32(&format!("{name}_gold"), &[q])?;
    let base = d.f32(&format!("{name}_latent_base"), &[q, l])?;
    let modif = d.i32(&format!("{name}_modification"), &[q])?;
    let pool_lat = d.f32(&format!("{name}_pool_latent"), &[q * p, l])?;
    let mut pool = pool.into_iter();
    let queries = queries
        .into_iter()
        .enumerate()
        .map(|(i, query)| {
            if gold[i] < 0 || gold[i] as usize >= p {
                return Err(Error::format(0, format!("{name} query {i}: gold index {} out of pool", gold[i])));
            }
            Ok(EvalQuery {
                query,
                pool: pool.by_ref().take(p).collect(),
                gold: gold[i] as usize,
                latent_base: base[i * l..(i + 1) * l].to_vec(),
                modification_id: modif[i] as u32,
                pool_latents: (0..p)
                    .map(|j| pool_lat[(i * p + j) * l..(i * p + j + 1) * l].to_vec())
                    .collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalSplit {
        name: name.to_string(),
        queries,
    })
}

pub fn to_bytes(bundle: &DatasetBundle) -> Result<Vec<u8>> {
    let cfg = &bundle.config;
    let n = bundle.train.len();
    let mut arrays = vec![NamedArray::f32(
        "modification_offsets",
        vec![cfg.vocab_size, cfg.latent_dim],
        latents(bundle.modification_offsets.iter().cloned()),
    )];
    let q: Vec<&Item> = bundle.train.iter().map(|p| &p.query).collect();
    let d: Vec<&Item> = bundle.train.iter().map(|p| &p.positive_doc).collect();
    arrays.extend(item_arrays("train_query", &q, cfg.image_dim));
    arrays.extend(item_arrays("train_doc", &d, cfg.image_dim));
    arrays.push(NamedArray::f32(
        "train_latent_base",
        vec![n, cfg.latent_dim],
        latents(bundle.train.iter().map(|p| p.latent_base.clone())),
    ));
    arrays.push(NamedArray::i32(
        "train_modification",
        vec![n],
        bundle.train.iter().map(|p| p.modification_id.map_or(-1, |m| m as i32)).collect(),
    ));
    arrays.extend(split_arrays(&bundle.ind_test, cfg));
    arrays.extend(split_arrays(&bundle.ood_test, cfg));
    let meta = json!({
        "kind": "dataset",
        "config": cfg,
        "counts": {
            "train": n,
            "ind": bundle.ind_test.queries.len(),
            "ood": bundle.ood_test.queries.len(),
        },
    });
    container::encode(DATASET_MAGIC, meta, &arrays)
}

pub fn from_bytes(bytes: &[u8]) -> Result<DatasetBundle> {
    let d = container::decode(DATASET_MAGIC, bytes)?;
    let meta_err = |m: &str| Error::format(16, format!("header: {m}"));
    if d.meta.get("kind").and_then(|k| k.as_str()) != Some("dataset") {
        return Err(meta_err("not a dataset file"));
    }
    let cfg: GeneratorConfig = serde_json::from_value(d.meta["config"].clone())
        .map_err(|e| meta_err(&format!("bad config: {e}")))?;
    let count = |k: &str| {
        d.meta["counts"][k]
            .as_u64()
            .map(|v| v as usize)
            .ok_or_else(|| meta_err(&format!("missing count '{k}'")))
    };
    let (n, n_ind, n_ood) = (count("train")?, count("ind")?, count("ood")?);

    let offs = d.f32("modification_offsets", &[cfg.vocab_size, cfg.latent_dim])?;
    let modification_offsets = offs.chunks(cfg.latent_dim).map(<[f32]>::to_vec).collect();
    let queries = read_items(&d, "train_query", n, cfg.image_dim)?;
    let docs = read_items(&d, "train_doc", n, cfg.image_dim)?;
    let base = d.f32("train_latent_base", &[n, cfg.latent_dim])?;
    let modif = d.i32("train_modification", &[n])?;
    let l = cfg.latent_dim;
    let train = queries
        .into_iter()
        .zip(docs)
        .enumerate()
        .map(|(i, (query, positive_doc))| Pair {
            query,
            positive_doc,
            latent_base: base[i * l..(i + 1) * l].to_vec(),
            modification_id: (modif[i] >= 0).then_some(modif[i] as u32),
        })
        .collect();
    Ok(DatasetBundle {
        ind_test: read_split(&d, "ind", n_ind, &cfg)?,
        ood_test: read_split(&d, "ood", n_ood, &cfg)?,
        config: cfg,
        modification_offsets,
        train,
    })
}

pub fn serialize(bundle: &DatasetBundle, path: &Path) -> Result<()> {
    container::write_file(path, &to_bytes(bundle)?)
}

pub fn deserialize(path: &Path) -> Result<DatasetBundle> {
    from_bytes(&container::read_file(path)?)
}
