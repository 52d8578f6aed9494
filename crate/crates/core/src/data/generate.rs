use super::{DatasetBundle, EvalQuery, EvalSplit, GeneratorConfig, Item, Pair};
use crate::error::Result;
use crate::rng::SeededRng;

struct World<'a> {
    cfg: &'a GeneratorConfig,
    /// `image_dim x latent_dim`, row-major.
    mixing: Vec<f64>,
    offsets: Vec<Vec<f64>>,
}

fn normalize(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

impl World<'_> {
    fn render(&self, latent: &[f64], rng: &mut SeededRng) -> Vec<f32> {
        let l = self.cfg.latent_dim;
        (0..self.cfg.image_dim)
            .map(|r| {
                let clean: f64 = self.mixing[r * l..(r + 1) * l]
                    .iter()
                    .zip(latent)
                    .map(|(a, z)| a * z)
                    .sum();
                let noise = if self.cfg.image_noise_std > 0.0 {
                    rng.gaussian(0.0, self.cfg.image_noise_std)
                } else {
                    0.0
                };
                (clean + noise) as f32
            })
            .collect()
    }

    fn target(&self, z: &[f64], m: usize) -> Vec<f64> {
        normalize(z.iter().zip(&self.offsets[m]).map(|(a, b)| a + b).collect())
    }

    fn ind_tokens(&self) -> std::ops::Range<usize> {
        0..self.cfg.ind_vocab()
    }

    fn ood_tokens(&self) -> std::ops::Range<usize> {
        self.cfg.ind_vocab()..self.cfg.vocab_size
    }

    fn pick(range: std::ops::Range<usize>, rng: &mut SeededRng) -> usize {
        range.start + rng.below(range.len())
    }

    fn train_pair(&self, bases: &[Vec<f64>], rng: &mut SeededRng) -> Pair {
        let z = if bases.is_empty() {
            rng.unit_vector(self.cfg.latent_dim)
        } else {
            bases[rng.below(bases.len())].clone()
        };
        if rng.uniform() < self.cfg.unimodal_pair_fraction {
            if rng.uniform() < 0.5 {
                // Near-duplicate image pair.
                let q = self.render(&z, rng);
                let d = self.render(&z, rng);
                Pair {
                    query: Item::image(q),
                    positive_doc: Item::image(d),
                    latent_base: to_f32(&z),
                    modification_id: None,
                }
            } else {
                // Text names the modification; the document shows its direction.
                let m = rng.below(self.cfg.vocab_size);
                let dir = normalize(self.offsets[m].clone());
                Pair {
                    query: Item::text(m as u32),
                    positive_doc: Item::image(self.render(&dir, rng)),
                    latent_base: to_f32(&z),
                    modification_id: Some(m as u32),
                }
            }
        } else {
            let m = Self::pick(self.ind_tokens(), rng);
            let q = self.render(&z, rng);
            let d = self.render(&self.target(&z, m), rng);
            Pair {
                query: Item::composed(q, m as u32),
                positive_doc: Item::image(d),
                latent_base: to_f32(&z),
                modification_id: Some(m as u32),
            }
        }
    }

    /// Hard distractors share the base latent but take their modification
    /// from the opposite vocabulary half, so only the query text separates
    /// them from the gold document.
    fn eval_query(&self, ood: bool, rng: &mut SeededRng) -> EvalQuery {
        let (own, other) = if ood {
            (self.ood_tokens(), self.ind_tokens())
        } else {
            (self.ind_tokens(), self.ood_tokens())
        };
        let z = rng.unit_vector(self.cfg.latent_dim);
        let m = Self::pick(own.clone(), rng);
        let query = Item::composed(self.render(&z, rng), m as u32);

        let mut latents: Vec<Vec<f64>> = Vec::with_capacity(self.cfg.pool_size);
        latents.push(self.target(&z, m));
        let perm = rng.permutation(other.len());
        for &k in perm.iter().take(self.cfg.hard_distractors) {
            latents.push(self.target(&z, other.start + k));
        }
        while latents.len() < self.cfg.pool_size {
            let z2 = rng.unit_vector(self.cfg.latent_dim);
            let m2 = rng.below(self.cfg.vocab_size);
            latents.push(self.target(&z2, m2));
        }
        let order = rng.permutation(latents.len());
        let gold = order.iter().position(|&i| i == 0).unwrap();
        let mut pool = Vec::with_capacity(latents.len());
        let mut pool_latents = Vec::with_capacity(latents.len());
        for &i in &order {
            pool.push(Item::image(self.render(&latents[i], rng)));
            pool_latents.push(to_f32(&latents[i]));
        }
        EvalQuery {
            query,
            pool,
            gold,
            latent_base: to_f32(&z),
            modification_id: m as u32,
            pool_latents,
        }
    }
}

/// Builds a dataset bundle. Pure function of `config`.
pub fn generate(config: &GeneratorConfig) -> Result<DatasetBundle> {
    config.validate()?;
    let (l, d) = (config.latent_dim, config.image_dim);

    let mut mix_rng = SeededRng::derive(config.seed, "data/mixing");
    // Unit-variance entries: each rendered coordinate has unit expected power,
    // so `image_noise_std` is directly the per-coordinate noise-to-signal ratio.
    let mixing: Vec<f64> = (0..d * l).map(|_| mix_rng.normal()).collect();

    let mut mod_rng = SeededRng::derive(config.seed, "data/modifications");
    let offsets: Vec<Vec<f64>> = (0..config.vocab_size)
        .map(|m| {
            let norm = if m < config.ind_vocab() {
                config.ind_modification_norm
            } else {
                config.ood_modification_norm
            };
            mod_rng.unit_vector(l).into_iter().map(|x| x * norm).collect()
        })
        .collect();
    // Round the offsets once so the stored table reproduces every target.
    let offsets: Vec<Vec<f64>> = offsets
        .iter()
        .map(|v| v.iter().map(|&x| x as f32 as f64).collect())
        .collect();

    let world = World {
        cfg: config,
        mixing,
        offsets,
    };

    let mut train_rng = SeededRng::derive(config.seed, "data/train");
    let bases: Vec<Vec<f64>> = (0..config.n_train_bases)
        .map(|_| train_rng.unit_vector(l))
        .collect();
    let train = (0..config.n_train)
        .map(|_| world.train_pair(&bases, &mut train_rng))
        .collect();

    let mut ind_rng = SeededRng::derive(config.seed, "data/ind_test");
    let ind_test = EvalSplit {
        name: "ind".into(),
        queries: (0..config.n_ind_test).map(|_| world.eval_query(false, &mut ind_rng)).collect(),
    };
    let mut ood_rng = SeededRng::derive(config.seed, "data/ood_test");
    let ood_test = EvalSplit {
        name: "ood".into(),
        queries: (0..config.n_ood_test).map(|_| world.eval_query(true, &mut ood_rng)).collect(),
    };

    Ok(DatasetBundle {
        config: config.clone(),
        modification_offsets: world.offsets.iter().map(|v| to_f32(v)).collect(),
        train,
        ind_test,
        ood_test,
    })
}
