use serde::{Deserialize, Serialize};

use super::{DatasetBundle, EvalSplit};
use crate::error::{Error, Result};
use crate::ranking::{cosine, rank_of};

/// Accuracy@1 per evaluation split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitAccuracy {
    pub ind: f64,
    pub ood: f64,
}

fn as_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

fn split_accuracy<F>(split: &EvalSplit, score: F) -> Result<f64>
where
    F: Fn(usize, usize) -> f64,
{
    if split.queries.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (qi, q) in split.queries.iter().enumerate() {
        if q.pool.is_empty() {
            return Err(Error::InvalidInput(format!("{} query {qi} has an empty pool", split.name)));
        }
        let scores: Vec<f64> = (0..q.pool.len()).map(|j| score(qi, j)).collect();
        if rank_of(&scores, q.gold) == 0 {
            hits += 1;
        }
    }
    Ok(hits as f64 / split.queries.len() as f64)
}

/// Ranks each pool by cosine between the raw query image and raw candidate
/// images. Candidates without an image score `-inf`.
pub fn oracle_image_only(bundle: &DatasetBundle) -> Result<SplitAccuracy> {
    let run = |split: &EvalSplit| {
        split_accuracy(split, |qi, j| {
            let q = &split.queries[qi];
            match (&q.query.image_view, &q.pool[j].image_view) {
                (Some(a), Some(b)) => cosine(&as_f64(a), &as_f64(b)),
                _ => f64::NEG_INFINITY,
            }
        })
    };
    Ok(SplitAccuracy {
        ind: run(&bundle.ind_test)?,
        ood: run(&bundle.ood_test)?,
    })
}

/// Ranks each pool by cosine between the true composed latent and every
/// candidate's true latent.
pub fn oracle_latent(bundle: &DatasetBundle) -> Result<SplitAccuracy> {
    let run = |split: &EvalSplit| {
        let targets: Vec<Vec<f64>> = split.queries.iter().map(|q| bundle.composed_latent(q)).collect();
        split_accuracy(split, |qi, j| {
            cosine(&targets[qi], &as_f64(&split.queries[qi].pool_latents[j]))
        })
    };
    Ok(SplitAccuracy {
        ind: run(&bundle.ind_test)?,
        ood: run(&bundle.ood_test)?,
    })
}
