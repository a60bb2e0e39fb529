use eapcr::autodiff::{Tape, Tensor};
use eapcr::encoding::{binarize_pixels, Target};
use eapcr::model::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_indices(n: usize, v: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..v)).collect()
}

/// A crude digit-like image: a filled ring, so both binary values occur.
fn ring_image() -> Vec<usize> {
    let mut px = vec![0u8; 784];
    for r in 0..28 {
        for c in 0..28 {
            let d = ((r as f64 - 13.5).powi(2) + (c as f64 - 13.5).powi(2)).sqrt();
            if (6.0..10.0).contains(&d) {
                px[r * 28 + c] = 220;
            }
        }
    }
    binarize_pixels(&px).into_iter().map(|v| v as usize).collect()
}

#[test]
fn reported_parameter_counts() {
    let eapcr = [(1, 37355), (2, 67565), (3, 87440)];
    let eacr = [(1, 29151), (2, 59361), (3, 79236)];
    for (l, reported) in eapcr {
        let c = ModelConfig::eapcr_mnist(l).unwrap();
        assert!(
            c.param_count().abs_diff(reported) <= 2,
            "EAPCR-{l}: {}",
            c.param_count()
        );
    }
    for (l, reported) in eacr {
        let c = ModelConfig::eacr_mnist(l).unwrap();
        assert!(c.param_count().abs_diff(reported) <= 2, "EACR-{l}: {}", c.param_count());
    }
    let mlp = [20680, 31810, 41350, 50890, 63610, 71560, 83485, 91435, 101770];
    for (k, reported) in (1..=9).zip(mlp) {
        assert_eq!(ModelConfig::mlp_mnist(k).unwrap().param_count(), reported, "MLP-{k}");
    }
    assert_eq!(ModelConfig::plain_cnn_mnist().param_count(), 21928);
}

#[test]
fn exact_analytic_counts() {
    assert_eq!(ModelConfig::eapcr_mnist(1).unwrap().param_count(), 37354);
    assert_eq!(ModelConfig::eacr_mnist(1).unwrap().param_count(), 29150);
}

#[test]
fn analytic_count_matches_allocated_tensors() {
    let mut configs: Vec<ModelConfig> = (1..=3).map(|l| ModelConfig::eapcr_mnist(l).unwrap()).collect();
    configs.extend((1..=3).map(|l| ModelConfig::eacr_mnist(l).unwrap()));
    configs.extend((1..=9).map(|k| ModelConfig::mlp_mnist(k).unwrap()));
    configs.push(ModelConfig::plain_cnn_mnist());
    configs.push(ModelConfig::tiny_eapcr());
    for c in configs {
        let m = Model::<f32>::new(c.clone(), 1).unwrap();
        assert_eq!(m.params().count(), c.param_count(), "{:?} h={}", c.arch, c.hidden);
    }
}

#[test]
fn first_conv_layer_has_68_parameters() {
    let m = Model::<f32>::new(ModelConfig::eapcr_mnist(1).unwrap(), 0).unwrap();
    let n: usize = m
        .params()
        .iter()
        .filter(|(name, _)| name.starts_with("stack0.conv0"))
        .map(|(_, t)| t.numel())
        .sum();
    assert_eq!(n, 68);
    let res: usize = m
        .params()
        .iter()
        .filter(|(name, _)| name.starts_with("hidden"))
        .map(|(_, t)| t.numel())
        .sum();
    assert_eq!(res, 20410);
}

#[test]
fn tiny_eapcr_end_to_end_gradient() {
    let m = Model::<f64>::new(ModelConfig::tiny_eapcr(), 3).unwrap();
    for (seed, label) in [(5u64, 0usize), (6, 1)] {
        let x = random_indices(9, 4, seed);
        let r = m.gradient_check(&x, Target::Class(label), seed, None).unwrap();
        assert_eq!(r.checked, m.params().count());
        assert!(r.passes(1e-3), "max relative error {:e}", r.max_rel_error);
    }
}

#[test]
fn tiny_eacr_mlp_and_cnn_gradients() {
    let eacr = ModelConfig {
        arch: Architecture::Eacr,
        permutation: None,
        ..ModelConfig::tiny_eapcr()
    };
    let mlp = ModelConfig {
        arch: Architecture::Mlp,
        permutation: None,
        conv: vec![],
        embed_size: 0,
        adaptive_out: 0,
        ..ModelConfig::tiny_eapcr()
    };
    let cnn = ModelConfig {
        arch: Architecture::PlainCnn,
        permutation: None,
        image_side: Some(3),
        conv: vec![ConvLayer::new(2, 2)],
        embed_size: 0,
        adaptive_out: 0,
        ..ModelConfig::tiny_eapcr()
    };
    for c in [eacr, mlp, cnn] {
        let m = Model::<f64>::new(c.clone(), 4).unwrap();
        let r = m
            .gradient_check(&random_indices(9, 4, 8), Target::Class(1), 2, None)
            .unwrap();
        assert!(r.passes(1e-3), "{:?}: {:e}", c.arch, r.max_rel_error);
    }
}

#[test]
fn regression_gradient() {
    let c = ModelConfig {
        outputs: 1,
        ..ModelConfig::tiny_eapcr()
    };
    let mut m = Model::<f64>::new(c, 9).unwrap();
    m.set_target_norm(Some(TargetNorm { mean: 2.0, std: 3.0 }));
    let r = m
        .gradient_check(&random_indices(9, 4, 1), Target::Value(4.5), 3, None)
        .unwrap();
    assert!(r.passes(1e-3), "{:e}", r.max_rel_error);
}

#[test]
fn gram_and_direct_attention_agree() {
    let gram = Model::<f64>::new(ModelConfig::tiny_eapcr(), 11).unwrap();
    let mut cfg = ModelConfig::tiny_eapcr();
    cfg.attention = AttentionPath::Direct;
    let direct = Model::<f64>::new(cfg, 11).unwrap();
    let x = random_indices(9, 4, 2);
    let run = |m: &Model<f64>| {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fv = m.forward(&mut tape, &x, true, &mut rng).unwrap();
        let a = tape.value(fv.attention.unwrap()).clone();
        let logits = tape.value(fv.logits).clone();
        let loss = m.loss(&mut tape, fv.logits, Target::Class(1)).unwrap();
        let g = tape.backward(loss).unwrap();
        let mut store = m.params().clone();
        g.accumulate_into(&tape, &mut store);
        (a, logits, store)
    };
    let (a1, l1, s1) = run(&gram);
    let (a2, l2, s2) = run(&direct);
    assert!(a1.max_abs_diff(&a2) < 1e-14);
    assert!(l1.max_abs_diff(&l2) < 1e-12);
    for ((name, t1), (_, t2)) in s1.iter().zip(s2.iter()) {
        let (g1, g2) = (t1.grad().unwrap(), t2.grad().unwrap());
        let d = g1.iter().zip(g2).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(d < 1e-12, "{name}: {d:e}");
    }
}

#[test]
fn mnist_attention_is_symmetric_with_nonnegative_diagonal() {
    let m = Model::<f32>::new(ModelConfig::eapcr_mnist(1).unwrap(), 2).unwrap();
    let x = ring_image();
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let fv = m.forward(&mut tape, &x, false, &mut rng).unwrap();
    let a = tape.value(fv.attention.unwrap());
    assert_eq!(a.shape(), [784, 784]);
    let table = m.params().iter().find(|(n, _)| *n == "embedding").unwrap().1;
    assert_eq!(table.shape(), [2, 128]);
    let d = a.data();
    for i in 0..784 {
        let e = &table.data()[x[i] * 128..(x[i] + 1) * 128];
        let norm2: f32 = e.iter().map(|v| v * v).sum();
        assert!((d[i * 784 + i] - norm2.tanh()).abs() < 1e-5);
        assert!(d[i * 784 + i] >= 0.0);
        for j in 0..i {
            assert_eq!(d[i * 784 + j], d[j * 784 + i]);
        }
    }
}

#[test]
fn identity_permutation_with_tied_weights_gives_equal_branches() {
    let mut cfg = ModelConfig::tiny_eapcr();
    cfg.permutation = Some(PermutationKind::Identity);
    let mut m = Model::<f64>::new(cfg, 5).unwrap();
    let ids: Vec<_> = m.params().ids().collect();
    let raw: Vec<(String, Tensor<f64>)> = ids
        .iter()
        .map(|&id| (m.params().name(id).to_string(), m.params().get(id).clone()))
        .filter(|(n, _)| n.starts_with("stack0."))
        .collect();
    for &id in &ids {
        let name = m.params().name(id).to_string();
        if let Some(rest) = name.strip_prefix("stack1.") {
            let src = raw.iter().find(|(n, _)| n == &format!("stack0.{rest}")).unwrap();
            *m.params_mut().get_mut(id) = src.1.clone();
        }
    }
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let fv = m.forward(&mut tape, &random_indices(9, 4, 3), false, &mut rng).unwrap();
    assert_eq!(tape.value(fv.branches[0]), tape.value(fv.branches[1]));
}

#[test]
fn zero_cnn_head_reduces_to_residual() {
    let mut m = Model::<f64>::new(ModelConfig::tiny_eapcr(), 6).unwrap();
    let ids: Vec<_> = m.params().ids().collect();
    for id in ids {
        if m.params().name(id).starts_with("head") || m.params().name(id).starts_with("stack") {
            m.params_mut().get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let fv = m.forward(&mut tape, &random_indices(9, 4, 4), false, &mut rng).unwrap();
    assert_eq!(tape.value(fv.logits), tape.value(fv.residual.unwrap()));
}

#[test]
fn full_mnist_backward_is_finite_everywhere() {
    let m = Model::<f32>::new(ModelConfig::eapcr_mnist(1).unwrap(), 7).unwrap();
    let x = ring_image();
    let start = std::time::Instant::now();
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let fv = m.forward(&mut tape, &x, true, &mut rng).unwrap();
    let loss = m.loss(&mut tape, fv.logits, Target::Class(3)).unwrap();
    let g = tape.backward(loss).unwrap();
    let mut store = m.params().clone();
    g.accumulate_into(&tape, &mut store);
    eprintln!("one EAPCR-1 forward+backward: {:?}", start.elapsed());
    for (name, t) in store.iter() {
        let grad = t.grad().unwrap_or_else(|| panic!("{name} has no gradient"));
        assert!(grad.iter().all(|v| v.is_finite()), "{name}");
    }
}

#[test]
fn sample_length_and_index_errors() {
    let m = Model::<f64>::new(ModelConfig::tiny_eapcr(), 0).unwrap();
    assert!(matches!(m.predict(&[0; 8]), Err(eapcr::Error::Dimension(_))));
    assert!(matches!(
        m.predict(&[0, 0, 0, 0, 9, 0, 0, 0, 0]),
        Err(eapcr::Error::Index(_))
    ));
}

#[test]
fn regression_prediction_passes_value_through() {
    let c = ModelConfig {
        outputs: 1,
        ..ModelConfig::tiny_eapcr()
    };
    let mut m = Model::<f64>::new(c, 1).unwrap();
    assert_eq!(m.interpret(&[0.75]), Prediction::Value(0.75));
    m.set_target_norm(Some(TargetNorm { mean: 10.0, std: 2.0 }));
    assert_eq!(m.interpret(&[0.75]), Prediction::Value(11.5));
    let two = Model::<f64>::new(ModelConfig::tiny_eapcr(), 1).unwrap();
    assert_eq!(two.interpret(&[0.2, 0.9]), Prediction::Class(1));
    assert_eq!(two.interpret(&[0.4, 0.4]), Prediction::Class(0));
}

#[test]
fn checkpoint_round_trip_and_hash_check() {
    let m = Model::<f32>::new(ModelConfig::tiny_eapcr(), 12).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    m.to_checkpoint("abc").save(&path).unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    let back = Model::<f32>::from_checkpoint(&ck, Some("abc")).unwrap();
    let x = random_indices(9, 4, 1);
    assert_eq!(back.logits(&x).unwrap(), m.logits(&x).unwrap());
    assert!(matches!(
        Model::<f32>::from_checkpoint(&ck, Some("xyz")),
        Err(eapcr::Error::Config(_))
    ));
}

#[test]
fn random_permutation_config_is_seeded() {
    let mut c = ModelConfig::tiny_eapcr();
    c.permutation = Some(PermutationKind::Random { seed: 4 });
    let a = Model::<f32>::new(c.clone(), 0).unwrap();
    let b = Model::<f32>::new(c, 99).unwrap();
    assert_eq!(a.permutation(), b.permutation());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn row_means_follow_input_order(seed in any::<u64>(), shift in 1usize..9) {
        // rotating the feature order rotates the residual input z
        let m = Model::<f64>::new(ModelConfig::tiny_eapcr(), 1).unwrap();
        let x = random_indices(9, 4, seed);
        let mut rot = x.clone();
        rot.rotate_left(shift);
        let z = |idx: &[usize]| {
            let mut tape = Tape::new();
            let t = tape.input(m.params().iter().find(|(n, _)| *n == "embedding").unwrap().1.clone());
            let e = tape.embedding(t, idx).unwrap();
            let z = tape.row_mean(e).unwrap();
            tape.value(z).data().to_vec()
        };
        let mut want = z(&x);
        want.rotate_left(shift);
        prop_assert_eq!(z(&rot), want);
    }

    #[test]
    fn forward_is_deterministic(seed in any::<u64>()) {
        let m = Model::<f32>::new(ModelConfig::tiny_eapcr(), seed).unwrap();
        let x = random_indices(9, 4, seed ^ 1);
        prop_assert_eq!(m.logits(&x).unwrap(), m.logits(&x).unwrap());
    }
}
