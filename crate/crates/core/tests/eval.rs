use mca_lab::data::{generate, DatasetBundle, EvalSplit, GeneratorConfig, Item};
use mca_lab::eval::{
    composition_margin_rate, embeddings_bytes, embeddings_from_bytes, evaluate, evaluate_with, export_embeddings,
    gold_ranks, pca_project, shortcut_index, GROUP_COMPOSED, GROUP_TARGET,
};
use mca_lab::model::{EncoderConfig, EncoderParams};
use mca_lab::rng::SeededRng;
use mca_lab::Error;

fn data(seed: u64) -> DatasetBundle {
    generate(&GeneratorConfig {
        n_train: 256,
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn encoder_for(data: &DatasetBundle, seed: u64) -> EncoderParams {
    let cfg = EncoderConfig {
        image_dim: data.config.image_dim,
        text_vocab: data.config.vocab_size,
        ..Default::default()
    };
    EncoderParams::init(&cfg, seed).unwrap()
}

fn without_text(mut p: EncoderParams) -> EncoderParams {
    for x in p.get_mut("text_embedding").unwrap().data_mut() {
        *x = 0.0;
    }
    p
}

fn take(split: &EvalSplit, n: usize) -> EvalSplit {
    EvalSplit {
        name: split.name.clone(),
        queries: split.queries[..n].to_vec(),
    }
}

#[test]
fn duplicated_gold_pool_scores_perfectly() {
    let d = data(0);
    let p = encoder_for(&d, 0);
    let mut split = take(&d.ind_test, 50);
    for q in &mut split.queries {
        let gold = q.pool[q.gold].clone();
        q.pool = vec![gold; q.pool.len()];
        q.gold = 0;
    }
    let r = evaluate(&p, &split).unwrap();
    assert_eq!(r.accuracy_at_1, 1.0);
    assert_eq!(r.n_queries, 50);
}

#[test]
fn ranks_do_not_depend_on_pool_batching() {
    let d = data(1);
    let p = encoder_for(&d, 1);
    let split = take(&d.ood_test, 40);
    let together = gold_ranks(&p, &split).unwrap();
    for (i, q) in split.queries.iter().enumerate().step_by(7) {
        let alone = EvalSplit {
            name: "one".into(),
            queries: vec![q.clone()],
        };
        assert_eq!(gold_ranks(&p, &alone).unwrap()[0], together[i]);
    }
}

#[test]
fn text_blind_encoder_has_unit_shortcut_index() {
    let d = data(2);
    let p = without_text(encoder_for(&d, 2));
    for split in d.splits() {
        let s = shortcut_index(&p, &take(split, 100), 8, 0).unwrap();
        assert!((s - 1.0).abs() < 1e-9, "{s}");
    }
}

#[test]
fn random_encoder_is_not_text_blind() {
    for seed in 0..3 {
        let d = data(seed);
        let p = encoder_for(&d, seed);
        let s = shortcut_index(&p, &d.ind_test, 8, seed).unwrap();
        assert!(s < 1.0 - 1e-4, "seed {seed}: {s}");
        assert!((-1.0..=1.0).contains(&s));
    }
}

#[test]
fn text_blind_margin_rate_reduces_to_image_versus_text() {
    let d = data(3);
    let p = without_text(encoder_for(&d, 3));
    let split = take(&d.ind_test, 200);
    let rate = composition_margin_rate(&p, &split).unwrap();
    let mut wins = 0;
    for q in &split.queries {
        let [img, txt] = q.query.unimodal_parts().unwrap();
        let e = p.encode(&[q.query.clone(), img, txt, q.pool[q.gold].clone()]).unwrap();
        let sim = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let c = sim(&e[0], &e[3]);
        if c > sim(&e[1], &e[3]) && c > sim(&e[2], &e[3]) {
            wins += 1;
        }
    }
    assert_eq!(rate, wins as f64 / 200.0);
    assert!((0.0..=1.0).contains(&rate));
}

#[test]
fn splits_without_composed_queries_are_contract_errors() {
    let d = data(4);
    let p = encoder_for(&d, 4);
    let mut split = take(&d.ind_test, 5);
    for q in &mut split.queries {
        q.query = q.query.unimodal_parts().unwrap()[0].clone();
    }
    assert!(matches!(composition_margin_rate(&p, &split), Err(Error::Contract(_))));
    assert!(matches!(shortcut_index(&p, &split, 8, 0), Err(Error::Contract(_))));
    assert!(matches!(
        shortcut_index(&p, &take(&d.ind_test, 5), 0, 0),
        Err(Error::InvalidInput(_))
    ));
}

#[test]
fn single_token_vocabulary_is_rejected() {
    let cfg = EncoderConfig {
        text_vocab: 1,
        image_dim: 2,
        ..Default::default()
    };
    let p = EncoderParams::init(&cfg, 0).unwrap();
    let split = EvalSplit {
        name: "tiny".into(),
        queries: vec![],
    };
    assert!(matches!(shortcut_index(&p, &split, 8, 0), Err(Error::InvalidInput(_))));
}

#[test]
fn reports_are_deterministic_and_bounded() {
    let d = data(5);
    let p = encoder_for(&d, 5);
    let split = take(&d.ood_test, 100);
    let a = evaluate_with(&p, &split, 4, 7).unwrap();
    let b = evaluate_with(&p, &split, 4, 7).unwrap();
    assert_eq!(a, b);
    assert!(a.accuracy_at_1 <= a.accuracy_at_5);
    assert!((0.0..=1.0).contains(&a.composition_margin_rate));
}

#[test]
fn export_round_trips() {
    let d = data(6);
    let p = encoder_for(&d, 6);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.bin");
    let split = take(&d.ind_test, 20);
    let dump = export_embeddings(&p, &split, &path).unwrap();
    assert_eq!(dump.embeddings.len(), 80);
    assert_eq!(dump.groups[0], GROUP_COMPOSED);
    assert_eq!(dump.groups[3], GROUP_TARGET);
    let bytes = std::fs::read(&path).unwrap();
    let back = embeddings_from_bytes(&bytes).unwrap();
    assert_eq!(embeddings_bytes(&back).unwrap(), bytes);
    assert_eq!(back.groups, dump.groups);
    assert_eq!(back.query_index, dump.query_index);
    for (a, b) in back.embeddings.iter().flatten().zip(dump.embeddings.iter().flatten()) {
        assert!((a - b).abs() < 1e-6);
    }
}

fn distances(points: &[Vec<f64>]) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            out.push(points[i].iter().zip(&points[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt());
        }
    }
    out
}

#[test]
fn pca_is_exact_on_planar_data() {
    let mut rng = SeededRng::derive(0, "test/pca");
    let d = 12;
    let u = rng.unit_vector(d);
    let mut v = rng.unit_vector(d);
    let uv: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
    v.iter_mut().zip(&u).for_each(|(x, y)| *x -= uv * y);
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= nv);
    let offset: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    let points: Vec<Vec<f64>> = (0..40)
        .map(|_| {
            let (a, b) = (3.0 * rng.normal(), rng.normal());
            (0..d).map(|k| offset[k] + a * u[k] + b * v[k]).collect()
        })
        .collect();
    let proj = pca_project(&points, 2).unwrap();
    for (a, b) in distances(&points).iter().zip(distances(&proj)) {
        assert!((a - b).abs() < 1e-9);
    }
    let var = |k: usize| proj.iter().map(|p| p[k] * p[k]).sum::<f64>();
    assert!(var(0) >= var(1));
    assert_eq!(pca_project(&points, 2).unwrap(), proj);
}

#[test]
fn pca_orders_components_by_variance() {
    let mut rng = SeededRng::derive(1, "test/pca");
    let points: Vec<Vec<f64>> = (0..200)
        .map(|_| (0..6).map(|k| rng.normal() * (k + 1) as f64).collect())
        .collect();
    let proj = pca_project(&points, 6).unwrap();
    let vars: Vec<f64> = (0..6).map(|k| proj.iter().map(|p| p[k] * p[k]).sum()).collect();
    assert!(vars.windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn pca_rejects_degenerate_input() {
    let same = vec![vec![1.0, 2.0, 3.0]; 5];
    assert!(matches!(pca_project(&same, 2), Err(Error::DegenerateProjection(_))));
    assert!(matches!(pca_project(&same[..1], 2), Err(Error::DegenerateProjection(_))));
    let ok = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    assert!(matches!(pca_project(&ok, 3), Err(Error::InvalidInput(_))));
}

#[test]
fn untrained_encoder_is_at_chance_without_query_signal() {
    let d = generate(&GeneratorConfig::default()).unwrap();
    let p = encoder_for(&d, 0);
    let mut split = d.ind_test.clone();
    let mut rng = SeededRng::derive(0, "test/signal-free");
    for q in &mut split.queries {
        let view: Vec<f32> = (0..d.config.image_dim).map(|_| rng.normal() as f32).collect();
        q.query = Item::composed(view, q.query.text_token.unwrap());
    }
    let r = evaluate(&p, &split).unwrap();
    assert_eq!(r.n_queries, 1024);
    assert!((r.accuracy_at_1 - 1.0 / 64.0).abs() <= 0.012, "{}", r.accuracy_at_1);
}

#[test]
fn untrained_encoder_inherits_the_image_shortcut() {
    let d = generate(&GeneratorConfig::default()).unwrap();
    let r = evaluate(&encoder_for(&d, 0), &d.ind_test).unwrap();
    let oracle = mca_lab::data::oracle_image_only(&d).unwrap();
    assert!(r.accuracy_at_1 > 0.5, "{}", r.accuracy_at_1);
    assert!(r.accuracy_at_1 <= oracle.ind);
}
