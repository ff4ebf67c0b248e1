use djpeg_core::features::{assemble_hq, FreqOrder, HistogramSet, AC_COUNT};
use djpeg_core::jpeg::standard_qmatrix;
use djpeg_core::model::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, EncoderParams, HqBatch, Model, ModelConfig,
    Pooling, Projector,
};
use djpeg_core::nn::{bce_loss, BnMode};
use djpeg_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn tiny(depth: usize, residual: bool, pooling: Pooling, projector: Projector) -> ModelConfig {
    ModelConfig {
        b: 2,
        n: 4,
        filters: 2,
        depth,
        residual,
        pooling,
        projector,
        dropout: 0.2,
        recurrent_dropout: 0.2,
        ..ModelConfig::default()
    }
}

fn random_batch(len: usize, b: usize, seed: u64) -> HqBatch {
    let mut r = rng(seed);
    let bins = 2 * b + 1;
    let mut values = Vec::with_capacity(len * AC_COUNT * bins * 2);
    for _ in 0..len {
        for _ in 0..AC_COUNT {
            let q = r.random_range(1..40) as f64;
            for _ in 0..bins {
                values.push(r.random_range(0.0..1.0));
                values.push(q);
            }
        }
    }
    HqBatch { len, bins, values }
}

/// Randomize every trainable tensor so that no gradient is trivially zero.
fn perturbed(config: &ModelConfig, seed: u64) -> Model {
    let mut r = rng(seed);
    let mut model = Model::build(config, &mut r).unwrap();
    for t in model.params_mut() {
        for v in &mut t.data {
            *v += r.random_range(-0.3..0.3);
        }
    }
    model
}

#[test]
fn ablation_grid_parameter_counts() {
    let expected = [
        (1, 10_144),
        (2, 10_283),
        (3, 297_474),
        (4, 297_613),
        (5, 691_714),
        (6, 691_853),
        (7, 1_085_954),
        (8, 1_086_093),
        (9, 1_085_954),
        (10, 1_086_093),
        (11, 1_085_961),
        (12, 1_086_029),
        (13, 1_086_221),
        (14, 1_480_194),
        (15, 1_480_333),
        (16, 1_480_194),
        (17, 1_480_333),
    ];
    for (row, total) in expected {
        let config = ModelConfig::ablation(row).unwrap();
        assert_eq!(config.count_params().total, total, "model {row}");
        let model = Model::zeros(&config).unwrap();
        assert_eq!(model.param_count(), config.count_params(), "model {row} tensors");
    }
    assert_eq!(ModelConfig::default().count_params().total, 1_086_093);
    assert_eq!(ModelConfig::default(), ModelConfig::ablation(10).unwrap());
    assert!(matches!(ModelConfig::ablation(18), Err(Error::Config(_))));
}

#[test]
fn parameter_count_decomposition() {
    // flattened logistic baseline: 63·(2b+1) + 1
    let base = ModelConfig::ablation(1).unwrap();
    assert_eq!(base.count_params().total, 63 * 161 + 1);
    // projector: 3C + 4(C+2) + (C+3), with 2(C+2) non-trainable
    for c in [8, 16, 32] {
        let with = ModelConfig {
            filters: c,
            ..ModelConfig::ablation(2).unwrap()
        };
        let count = with.count_params();
        assert_eq!(count.total - base.count_params().total, 3 * c + 4 * (c + 2) + c + 3);
        assert_eq!(count.non_trainable, 2 * (c + 2));
    }
    // one more BiLSTM over 2n inputs
    let d3 = ModelConfig::ablation(10).unwrap().count_params().total;
    let d4 = ModelConfig::ablation(17).unwrap().count_params().total;
    assert_eq!(d4 - d3, 2 * 4 * (128 * (256 + 128) + 128));
    let concat = ModelConfig {
        pooling: Pooling::ConcatFirstLast,
        ..ModelConfig::default()
    };
    assert_eq!(concat.pooled_dim(), 4 * 128);
    let last = ModelConfig {
        pooling: Pooling::Last,
        ..ModelConfig::default()
    };
    // no attention vector, same head width
    assert_eq!(
        ModelConfig::default().count_params().total - last.count_params().total,
        2 * 128 + 1
    );
}

#[test]
fn invalid_configs() {
    let bad = [
        ModelConfig {
            depth: 2,
            residual: true,
            ..ModelConfig::default()
        },
        ModelConfig {
            depth: 5,
            ..ModelConfig::default()
        },
        ModelConfig {
            b: 0,
            ..ModelConfig::default()
        },
        ModelConfig {
            dropout: 1.0,
            ..ModelConfig::default()
        },
        ModelConfig {
            filters: 0,
            ..ModelConfig::default()
        },
    ];
    for c in bad {
        assert!(matches!(Model::build(&c, &mut rng(0)), Err(Error::Config(_))), "{c:?}");
    }
}

#[test]
fn build_initialization() {
    let config = tiny(3, true, Pooling::Wam, Projector::Hq);
    let model = Model::build(&config, &mut rng(4)).unwrap();
    let EncoderParams::Recurrent { layers, .. } = &model.encoder else {
        panic!("recurrent encoder expected")
    };
    for layer in layers {
        for p in [&layer.fwd, &layer.bwd] {
            let n = p.n;
            assert!(p.b.data[..n].iter().all(|&v| v == 1.0));
            assert!(p.b.data[n..].iter().all(|&v| v == 0.0));
            for g in 0..4 {
                assert!(djpeg_core::nn::orthogonality_error(&p.recurrent_gate(g)) < 1e-6);
            }
            let limit = (6.0 / (p.m + 4 * n) as f64).sqrt();
            assert!(p.w.data.iter().all(|v| v.abs() <= limit));
        }
    }
    for e in model.entries() {
        if e.name == "proj.bn.gamma" || e.name == "proj.bn.running_var" {
            assert!(e.tensor.data.iter().all(|&v| v == 1.0));
        }
        if e.name.ends_with("bn.beta") || e.name.ends_with("running_mean") {
            assert!(e.tensor.data.iter().all(|&v| v == 0.0));
        }
    }
    assert_eq!(Model::build(&config, &mut rng(4)).unwrap(), model);
}

fn gradcheck(config: &ModelConfig, seed: u64) {
    let batch_len = 4;
    let model = perturbed(config, seed);
    let batch = random_batch(batch_len, config.b, seed + 100);
    let targets: Vec<f64> = (0..batch_len).map(|i| (i % 2) as f64).collect();
    let mut mr = rng(seed + 200);
    let masks: Vec<_> = (0..batch_len).map(|_| model.sample_masks(&mut mr)).collect();
    let loss = |m: &Model| {
        let f = m.forward(&batch, BnMode::Train, Some(&masks)).unwrap();
        bce_loss(&f.probs, &targets)
    };
    let out = model.loss_and_grads(&batch, &targets, BnMode::Train, Some(&masks), 3).unwrap();
    assert!((out.loss - loss(&model)).abs() < 1e-12);

    let names: Vec<String> = model.entries().into_iter().filter(|e| e.trainable).map(|e| e.name).collect();
    let grads = out.grads.params();
    let h = 1e-5;
    for (i, name) in names.iter().enumerate() {
        for k in 0..grads[i].len() {
            let mut plus = model.clone();
            plus.params_mut()[i].data[k] += h;
            let mut minus = model.clone();
            minus.params_mut()[i].data[k] -= h;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let analytic = grads[i].data[k];
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
            assert!(
                err <= 1e-5,
                "{config:?}: {name}[{k}] analytic {analytic} numeric {numeric}"
            );
        }
    }
}

#[test]
fn gradients_match_finite_differences_default_shape() {
    gradcheck(&tiny(3, true, Pooling::Wam, Projector::Hq), 1);
}

#[test]
fn gradients_match_finite_differences_variants() {
    gradcheck(&tiny(0, false, Pooling::Wam, Projector::None), 2);
    gradcheck(&tiny(0, false, Pooling::Wam, Projector::Hq), 3);
    gradcheck(&tiny(1, false, Pooling::Wam, Projector::SingleConv), 4);
    gradcheck(&tiny(2, false, Pooling::Last, Projector::Hq), 5);
    gradcheck(&tiny(1, false, Pooling::First, Projector::None), 6);
    gradcheck(&tiny(1, false, Pooling::AddFirstLast, Projector::Hq), 7);
    gradcheck(&tiny(1, false, Pooling::ConcatFirstLast, Projector::Hq), 8);
    gradcheck(&tiny(4, true, Pooling::Wam, Projector::Hq), 9);
}

#[test]
fn zero_head_predicts_one_half() {
    let config = tiny(3, true, Pooling::Wam, Projector::Hq);
    let mut model = perturbed(&config, 10);
    if let EncoderParams::Recurrent { head_v, head_b, .. } = &mut model.encoder {
        head_v.data.fill(0.0);
        head_b.data.fill(0.0);
    }
    let probs = model.predict(&random_batch(5, 2, 11), 2).unwrap();
    assert!(probs.iter().all(|&p| p == 0.5));
}

#[test]
fn attention_weights_form_a_distribution() {
    let config = tiny(3, true, Pooling::Wam, Projector::Hq);
    let model = perturbed(&config, 12);
    let f = model.forward(&random_batch(3, 2, 13), BnMode::Infer, None).unwrap();
    assert_eq!(f.attention.len(), 3 * AC_COUNT);
    for a in f.attention.chunks_exact(AC_COUNT) {
        assert!(a.iter().all(|&v| v > 0.0 && v < 1.0));
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    assert_eq!(f.pooled.len(), 3 * 2 * config.n);
    assert_eq!(f.encoder_input.len(), 3 * AC_COUNT * config.bins());
}

/// With zero input and recurrent weights and a closed forget gate every
/// step computes the same state, so both directions emit a constant
/// sequence.
fn constant_sequence_model(pooling: Pooling) -> Model {
    let config = tiny(1, false, pooling, Projector::None);
    let mut model = Model::zeros(&config).unwrap();
    let mut r = rng(14);
    if let EncoderParams::Recurrent { layers, .. } = &mut model.encoder {
        let layer = &mut layers[0];
        for p in [&mut layer.fwd, &mut layer.bwd] {
            let n = p.n;
            p.b.data.iter_mut().for_each(|v| *v = r.random_range(-1.0..1.0));
            p.b.data[..n].fill(-1e3);
        }
    }
    model
}

#[test]
fn pooling_of_a_constant_sequence() {
    let batch = random_batch(2, 2, 15);
    let wam = constant_sequence_model(Pooling::Wam).forward(&batch, BnMode::Infer, None).unwrap();
    for a in wam.attention.chunks_exact(AC_COUNT) {
        for &v in a {
            assert!((v - 1.0 / 63.0).abs() < 1e-12);
        }
    }
    let last = constant_sequence_model(Pooling::Last).forward(&batch, BnMode::Infer, None).unwrap();
    let first = constant_sequence_model(Pooling::First).forward(&batch, BnMode::Infer, None).unwrap();
    let add = constant_sequence_model(Pooling::AddFirstLast)
        .forward(&batch, BnMode::Infer, None)
        .unwrap();
    let concat = constant_sequence_model(Pooling::ConcatFirstLast)
        .forward(&batch, BnMode::Infer, None)
        .unwrap();
    let n2 = 8;
    assert_eq!(concat.pooled.len(), 2 * 2 * n2);
    for i in 0..2 * n2 {
        assert!((wam.pooled[i] - last.pooled[i]).abs() < 1e-12);
        assert!(last.pooled[i] != 0.0);
        assert_eq!(first.pooled[i], last.pooled[i]);
        assert_eq!(add.pooled[i], 2.0 * last.pooled[i]);
    }
    for bi in 0..2 {
        let c = &concat.pooled[bi * 2 * n2..(bi + 1) * 2 * n2];
        assert_eq!(&c[..n2], &c[n2..]);
        assert_eq!(&c[..n2], &last.pooled[bi * n2..(bi + 1) * n2]);
    }
}

#[test]
fn wam_and_last_pooling_differ() {
    let batch = random_batch(4, 2, 16);
    let wam = perturbed(&tiny(1, false, Pooling::Wam, Projector::None), 17);
    let mut last = Model::zeros(&tiny(1, false, Pooling::Last, Projector::None)).unwrap();
    if let (
        EncoderParams::Recurrent {
            layers, head_v, head_b, ..
        },
        EncoderParams::Recurrent {
            layers: l2,
            head_v: v2,
            head_b: b2,
            ..
        },
    ) = (&wam.encoder, &mut last.encoder)
    {
        *l2 = layers.clone();
        *v2 = head_v.clone();
        *b2 = head_b.clone();
    }
    let a = wam.forward(&batch, BnMode::Infer, None).unwrap().logits;
    let b = last.forward(&batch, BnMode::Infer, None).unwrap().logits;
    assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-6));
}

#[test]
fn projector_is_frequency_local() {
    let mut r = rng(18);
    let b = 2;
    let bins = 2 * b + 1;
    let counts: Vec<u32> = (0..AC_COUNT * bins).map(|_| r.random_range(0..50)).collect();
    let hist = HistogramSet { b, counts };
    let q = standard_qmatrix(70).unwrap();
    let raster = assemble_hq(&hist, &q, FreqOrder::Raster);
    let zigzag = assemble_hq(&hist, &q, FreqOrder::Zigzag);
    let config = tiny(3, true, Pooling::Wam, Projector::Hq);
    let model = perturbed(&config, 19);
    let zig_model = Model {
        config: ModelConfig {
            order: FreqOrder::Zigzag,
            ..config
        },
        ..model.clone()
    };
    let xr = model
        .forward(&HqBatch::from_inputs(&[raster]).unwrap(), BnMode::Infer, None)
        .unwrap()
        .encoder_input;
    let xz = zig_model
        .forward(&HqBatch::from_inputs(&[zigzag]).unwrap(), BnMode::Infer, None)
        .unwrap()
        .encoder_input;
    let rp = FreqOrder::Raster.positions();
    let zp = FreqOrder::Zigzag.positions();
    for (zi, f) in zp.iter().enumerate() {
        let ri = rp.iter().position(|g| g == f).unwrap();
        assert_eq!(&xz[zi * bins..(zi + 1) * bins], &xr[ri * bins..(ri + 1) * bins]);
    }
    let mut a: Vec<Vec<u64>> = xr.chunks(bins).map(|c| c.iter().map(|v| v.to_bits()).collect()).collect();
    let mut z: Vec<Vec<u64>> = xz.chunks(bins).map(|c| c.iter().map(|v| v.to_bits()).collect()).collect();
    a.sort();
    z.sort();
    assert_eq!(a, z);
}

#[test]
fn inference_is_deterministic() {
    let config = tiny(3, true, Pooling::Wam, Projector::Hq);
    let model = perturbed(&config, 20);
    let batch = random_batch(6, 2, 21);
    let a = model.predict(&batch, 4).unwrap();
    let b = model.predict(&batch, 4).unwrap();
    assert_eq!(
        a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    let c = model.predict(&batch, 1).unwrap();
    assert_eq!(a, c);
}

#[test]
fn chunked_gradients_agree() {
    let config = tiny(3, true, Pooling::Wam, Projector::Hq);
    let model = perturbed(&config, 22);
    let batch = random_batch(6, 2, 23);
    let targets = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0];
    let a = model.loss_and_grads(&batch, &targets, BnMode::Train, None, 2).unwrap();
    let b = model.loss_and_grads(&batch, &targets, BnMode::Train, None, 2).unwrap();
    let c = model.loss_and_grads(&batch, &targets, BnMode::Train, None, 6).unwrap();
    assert_eq!(a.grads, b.grads);
    for (x, y) in a.grads.params().iter().zip(c.grads.params()) {
        for (u, v) in x.data.iter().zip(&y.data) {
            assert!((u - v).abs() < 1e-12);
        }
    }
    let stats = a.bn_stats.unwrap();
    assert_eq!(stats.mean.len(), config.filters + 2);
}

#[test]
fn shape_errors() {
    let config = tiny(1, false, Pooling::Wam, Projector::Hq);
    let model = perturbed(&config, 24);
    let wrong = random_batch(2, 3, 25);
    assert!(matches!(model.predict(&wrong, 2), Err(Error::Shape(_))));
    let batch = random_batch(2, 2, 25);
    assert!(matches!(
        model.loss_and_grads(&batch, &[1.0], BnMode::Train, None, 2),
        Err(Error::Shape(_))
    ));
}

#[test]
fn checkpoint_roundtrip() {
    let config = ModelConfig {
        order: FreqOrder::Zigzag,
        pooling: Pooling::ConcatFirstLast,
        ..tiny(3, true, Pooling::Wam, Projector::SingleConv)
    };
    let mut model = perturbed(&config, 26);
    model.update_bn_running(&djpeg_core::model::BnStats {
        mean: vec![0.5],
        var: vec![2.0],
    });
    let mut buf = Vec::new();
    write_checkpoint(&model, &mut buf).unwrap();
    assert_eq!(&buf[..4], b"DJPM");
    assert_eq!(read_checkpoint(buf.as_slice()).unwrap(), model);
    assert!(matches!(read_checkpoint(&b"XXXX\x01\0\0\0\0\0\0\0"[..]), Err(Error::Format(_))));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.djpm");
    save_checkpoint(&model, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    let batch = random_batch(3, 2, 27);
    assert_eq!(model.predict(&batch, 3).unwrap(), back.predict(&batch, 3).unwrap());
}
