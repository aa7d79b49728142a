use eagle_core::config::TrainConfig;
use eagle_core::encoders::{encode_image, encode_text, init_params, ArchConfig, Model, Vocab};
use eagle_core::rng::RngStream;
use eagle_core::train;
use eagle_core::Tensor;

fn vocab() -> Vocab {
    Vocab::new(&["disk", "square", "triangle", "ring", "cross", "bar", "diamond", "ell"]).unwrap()
}

fn model(arch: &ArchConfig) -> Model {
    init_params(arch, &vocab(), &RngStream::new(4096)).unwrap()
}

fn image(arch: &ArchConfig, seed: u64) -> Tensor {
    let s = arch.image_size;
    let mut rng = RngStream::new(seed);
    Tensor::new(vec![s, s, arch.channels], (0..s * s * arch.channels).map(|_| rng.uniform()).collect()).unwrap()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[test]
fn output_contract() {
    let arch = ArchConfig::default();
    let m = model(&arch);
    let out = encode_image(&m, &arch, &image(&arch, 1)).unwrap();
    assert_eq!(out.seq.rows(), 16);
    assert_eq!(out.seq.cols(), arch.embed_dim);
    assert_eq!(out.raw_seq.shape(), &[16, arch.width]);
    assert!((norm(&out.cls) - 1.0).abs() < 1e-6);
    for r in 0..out.seq.rows() {
        assert!((norm(out.seq.row(r)) - 1.0).abs() < 1e-6);
    }
    let again = encode_image(&m, &arch, &image(&arch, 1)).unwrap();
    assert_eq!(out, again);
}

#[test]
fn wrong_image_shape_is_an_error() {
    let arch = ArchConfig::default();
    let bad = Tensor::zeros(&[16, 16, 3]);
    assert!(encode_image(&model(&arch), &arch, &bad).is_err());
}

#[test]
fn constant_image_without_positions_gives_identical_rows() {
    let arch = ArchConfig::default();
    let mut m = model(&arch);
    m.vision.pos_embed = Tensor::zeros(m.vision.pos_embed.shape());
    let out = encode_image(&m, &arch, &Tensor::zeros(&[32, 32, 3])).unwrap();
    for r in 1..out.seq.rows() {
        assert_eq!(out.seq.row(r), out.seq.row(0));
    }
}

#[test]
fn patch_permutation_permutes_tokens() {
    let arch = ArchConfig::default();
    let mut m = model(&arch);
    m.vision.pos_embed = Tensor::zeros(m.vision.pos_embed.shape());
    let img = image(&arch, 2);
    let (p, s, c) = (arch.patch_size, arch.image_size, arch.channels);
    // Swap patch (0,0) with patch (2,3).
    let (a, b) = ((0usize, 0usize), (2usize, 3usize));
    let mut swapped = img.clone();
    for dy in 0..p {
        for dx in 0..p {
            for ch in 0..c {
                let ia = ((a.0 * p + dy) * s + a.1 * p + dx) * c + ch;
                let ib = ((b.0 * p + dy) * s + b.1 * p + dx) * c + ch;
                swapped.data_mut().swap(ia, ib);
            }
        }
    }
    let x = encode_image(&m, &arch, &img).unwrap();
    let y = encode_image(&m, &arch, &swapped).unwrap();
    let g = arch.grid();
    let (ta, tb) = (a.0 * g + a.1, b.0 * g + b.1);
    for t in 0..arch.seq_len() {
        let src = if t == ta { tb } else if t == tb { ta } else { t };
        for (u, v) in y.seq.row(t).iter().zip(x.seq.row(src)) {
            assert!((u - v).abs() < 1e-12);
        }
    }
    for (u, v) in x.cls.iter().zip(&y.cls) {
        assert!((u - v).abs() < 1e-12);
    }
}

#[test]
fn text_embeddings_are_unit_pure_and_distinct() {
    let arch = ArchConfig::default();
    let m = model(&arch);
    let v = vocab();
    let embs: Vec<Vec<f64>> = (0..8).map(|c| encode_text(&m, &arch, &v, c).unwrap()).collect();
    for (c, e) in embs.iter().enumerate() {
        assert!((norm(e) - 1.0).abs() < 1e-6);
        assert_eq!(*e, encode_text(&m, &arch, &v, c).unwrap());
    }
    for i in 0..8 {
        for j in 0..i {
            let d: Vec<f64> = embs[i].iter().zip(&embs[j]).map(|(a, b)| a - b).collect();
            assert!(norm(&d) > 0.0);
        }
    }
    assert!(encode_text(&m, &arch, &v, 8).is_err());
}

#[test]
fn init_is_seeded() {
    let arch = ArchConfig::default();
    assert_eq!(model(&arch), model(&arch));
    let other = init_params(&arch, &vocab(), &RngStream::new(4097)).unwrap();
    assert_ne!(model(&arch), other);
    let m = model(&arch);
    assert!((m.logit_scale_value() - (1.0f64 / 0.07).ln()).abs() < 1e-12);
}

#[test]
fn pretraining_is_bit_reproducible() {
    let cfg = TrainConfig::tiny();
    let data = train::in_memory_dataset(&cfg).unwrap();
    let (a, la) = train::pretrain(&cfg, &data).unwrap();
    let (b, lb) = train::pretrain(&cfg, &data).unwrap();
    assert_eq!(a, b);
    assert_eq!(la, lb);
    assert!(la.losses.iter().all(|l| l.is_finite()));
}

#[test]
fn full_objective_gradients_match_finite_differences() {
    let cfg = TrainConfig::tiny();
    let data = train::in_memory_dataset(&cfg).unwrap();
    let m = train::init_model(&cfg, &train::vocab_for(&data).unwrap()).unwrap();
    let report = train::gradient_check(&cfg, &data, &m).unwrap();
    assert!(report.passed(), "{report}");
    assert_eq!(report.tensors.len(), m.names().len());
}
