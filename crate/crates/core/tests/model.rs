use mca_lab::data::Item;
use mca_lab::model::{
    checkpoint_bytes, checkpoint_from_bytes, encode_on_tape, load_checkpoint, load_checkpoint_for, save_checkpoint,
    EncoderConfig, EncoderParams,
};
use mca_lab::rng::SeededRng;
use mca_lab::tensor::Tape;
use mca_lab::Error;

fn random_view(rng: &mut SeededRng, dim: usize) -> Vec<f32> {
    (0..dim).map(|_| rng.normal() as f32).collect()
}

fn random_items(cfg: &EncoderConfig, n: usize, seed: u64) -> Vec<Item> {
    let mut rng = SeededRng::derive(seed, "test/items");
    (0..n)
        .map(|i| match i % 3 {
            0 => Item::image(random_view(&mut rng, cfg.image_dim)),
            1 => Item::text(rng.below(cfg.text_vocab) as u32),
            _ => Item::composed(random_view(&mut rng, cfg.image_dim), rng.below(cfg.text_vocab) as u32),
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn rows_are_unit_norm() {
    let cfg = EncoderConfig::default();
    let p = EncoderParams::init(&cfg, 4).unwrap();
    for row in p.encode(&random_items(&cfg, 60, 4)).unwrap() {
        assert!((dot(&row, &row).sqrt() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn swapping_inputs_swaps_rows_exactly() {
    let cfg = EncoderConfig::default();
    let p = EncoderParams::init(&cfg, 1).unwrap();
    let items = random_items(&cfg, 3, 1);
    let ab = p.encode(&[items[2].clone(), items[0].clone()]).unwrap();
    let ba = p.encode(&[items[0].clone(), items[2].clone()]).unwrap();
    assert_eq!(ab[0], ba[1]);
    assert_eq!(ab[1], ba[0]);
}

#[test]
fn rows_do_not_depend_on_batch_composition() {
    let cfg = EncoderConfig::default();
    let p = EncoderParams::init(&cfg, 2).unwrap();
    let items = random_items(&cfg, 30, 2);
    let together = p.encode(&items).unwrap();
    for (i, item) in items.iter().enumerate() {
        let alone = p.encode(std::slice::from_ref(item)).unwrap();
        for (a, b) in alone[0].iter().zip(&together[i]) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn composed_rows_differ_from_image_parts_at_init() {
    let cfg = EncoderConfig::default();
    for seed in 0..3 {
        let p = EncoderParams::init(&cfg, seed).unwrap();
        let mut rng = SeededRng::derive(seed, "test/composed");
        let composed: Vec<Item> = (0..1000)
            .map(|_| Item::composed(random_view(&mut rng, cfg.image_dim), rng.below(cfg.text_vocab) as u32))
            .collect();
        let images: Vec<Item> = composed.iter().map(|c| c.unimodal_parts().unwrap()[0].clone()).collect();
        let ec = p.encode(&composed).unwrap();
        let ei = p.encode(&images).unwrap();
        let distinct = ec.iter().zip(&ei).filter(|(a, b)| dot(a, b) < 1.0 - 1e-6).count();
        assert!(distinct >= 990, "seed {seed}: only {distinct} of 1000 differ");
    }
}

#[test]
fn invalid_items_are_rejected() {
    let cfg = EncoderConfig::default();
    let p = EncoderParams::init(&cfg, 0).unwrap();
    let empty = Item {
        image_view: None,
        text_token: None,
    };
    assert!(matches!(p.encode(&[empty]), Err(Error::Contract(_))));
    let oov = Item::text(cfg.text_vocab as u32);
    assert!(matches!(p.encode(&[oov]), Err(Error::InvalidInput(_))));
    let short = Item::image(vec![0.0; cfg.image_dim - 1]);
    assert!(matches!(p.encode(&[short]), Err(Error::InvalidInput(_))));
}

#[test]
fn unimodal_parts_project_fields() {
    let c = Item::composed(vec![0.5, -1.0], 3);
    let [img, txt] = c.unimodal_parts().unwrap();
    assert_eq!(img, Item::image(vec![0.5, -1.0]));
    assert_eq!(txt, Item::text(3));
    assert!(!img.is_composed() && !txt.is_composed());
    assert!(matches!(img.unimodal_parts(), Err(Error::Contract(_))));
}

#[test]
fn text_free_batch_leaves_table_rows_without_gradient() {
    let cfg = EncoderConfig::default();
    let p = EncoderParams::init(&cfg, 5).unwrap();
    let mut rng = SeededRng::derive(5, "test/probe");
    let items: Vec<Item> = (0..8).map(|_| Item::image(random_view(&mut rng, cfg.image_dim))).collect();
    let mut tape = Tape::new();
    let vars = p.register(&mut tape, true);
    let out = encode_on_tape(&mut tape, &vars, &cfg, &items).unwrap();
    let weights = tape.constant(mca_lab::tensor::Tensor::matrix(8, cfg.d_out, (0..8 * cfg.d_out).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap());
    let prod = tape.mul_elementwise(out, weights).unwrap();
    let loss = tape.sum_all(prod).unwrap();
    tape.backward(loss).unwrap();
    let names: Vec<String> = cfg.manifest().into_iter().map(|(n, _)| n).collect();
    let table = names.iter().position(|n| n == "text_embedding").unwrap();
    let absent = names.iter().position(|n| n == "absent_text").unwrap();
    let table_grad = tape.grad(vars.vars[table]).unwrap();
    assert!(table_grad.iter().all(|&g| g == 0.0));
    let absent_grad = tape.grad(vars.vars[absent]).unwrap();
    assert!(absent_grad.iter().any(|&g| g != 0.0));
}

#[test]
fn checkpoint_round_trip() {
    let cfg = EncoderConfig::default();
    let p = EncoderParams::init(&cfg, 11).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.bin");
    save_checkpoint(&p, 42, &path).unwrap();
    let (q, step) = load_checkpoint(&path).unwrap();
    assert_eq!(step, 42);
    let items = random_items(&cfg, 30, 11);
    for (a, b) in p.encode(&items).unwrap().iter().zip(q.encode(&items).unwrap()) {
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6);
        }
    }
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(checkpoint_bytes(&q, 42).unwrap(), bytes);
    let names: Vec<String> = q.named().map(|(n, _)| n).collect();
    assert_eq!(names[0], "image_proj.weight");
    assert_eq!(names.last().unwrap(), "output.bias");
}

#[test]
fn mismatched_config_is_incompatible() {
    let cfg = EncoderConfig::default();
    let p = EncoderParams::init(&cfg, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.bin");
    save_checkpoint(&p, 0, &path).unwrap();
    let other = EncoderConfig {
        d_out: 32,
        ..cfg.clone()
    };
    assert!(matches!(load_checkpoint_for(&path, &other), Err(Error::IncompatibleCheckpoint(_))));
    assert!(load_checkpoint_for(&path, &cfg).is_ok());
    let wrong = EncoderParams::init(&other, 0).unwrap();
    assert!(matches!(
        EncoderParams::from_tensors(&cfg, wrong.tensors().to_vec()),
        Err(Error::IncompatibleCheckpoint(_))
    ));
}

#[test]
fn corrupted_checksum_is_a_format_error() {
    let p = EncoderParams::init(&EncoderConfig::default(), 0).unwrap();
    let mut bytes = checkpoint_bytes(&p, 3).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x40;
    assert!(matches!(checkpoint_from_bytes(&bytes), Err(Error::Format { .. })));
    let mut body = checkpoint_bytes(&p, 3).unwrap();
    body[200] ^= 0x01;
    assert!(matches!(checkpoint_from_bytes(&body), Err(Error::Format { .. })));
    let truncated = &checkpoint_bytes(&p, 3).unwrap()[..100];
    assert!(matches!(checkpoint_from_bytes(truncated), Err(Error::Format { .. })));
}
