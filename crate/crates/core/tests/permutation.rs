use std::collections::HashMap;

use eapcr::autodiff::{kernels, Tensor};
use eapcr::permutation::PermutationSpec;
use proptest::prelude::*;

fn matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    kernels::matmul(a.data(), b.data(), m, k, n, &mut out);
    Tensor::new(&[m, n], out).unwrap()
}

fn transpose(a: &Tensor<f64>) -> Tensor<f64> {
    let (r, c) = (a.shape()[0], a.shape()[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a.data()[i * c + j];
        }
    }
    Tensor::new(&[c, r], out).unwrap()
}

#[test]
fn matrix_is_orthogonal_for_image_sizes() {
    for n in [9, 28, 784] {
        let m = PermutationSpec::designed(n).unwrap().as_matrix::<f64>();
        let mt = transpose(&m);
        assert_eq!(matmul(&m, &mt), Tensor::eye(n), "M Mᵀ at n={n}");
        assert_eq!(matmul(&mt, &m), Tensor::eye(n), "Mᵀ M at n={n}");
    }
}

#[test]
fn matrix_rows_and_columns_sum_to_one_at_784() {
    let m = PermutationSpec::designed(784).unwrap().as_matrix::<f64>();
    let d = m.data();
    for i in 0..784 {
        let row: f64 = d[i * 784..(i + 1) * 784].iter().sum();
        let col: f64 = (0..784).map(|r| d[r * 784 + i]).sum();
        assert_eq!((row, col), (1.0, 1.0));
    }
    assert!(d.iter().all(|&v| v == 0.0 || v == 1.0));
}

#[test]
fn separation_784_is_28() {
    let p = PermutationSpec::designed(784).unwrap();
    assert_eq!(p.min_adjacent_separation().unwrap(), 28);
}

#[test]
fn side_two_wraps_rows_one_apart() {
    // the row-wrap pair lands (s-1)·s - 1 apart, which is below s only for s = 2
    let p = PermutationSpec::designed(4).unwrap();
    assert_eq!(p.map(), [0, 2, 1, 3]);
    assert_eq!(p.min_adjacent_separation().unwrap(), 1);
}

#[test]
fn gather_equals_matrix_product_on_nine() {
    let p = PermutationSpec::designed(9).unwrap();
    let a = Tensor::<f64>::new(&[9, 9], (0..81).map(|v| ((v * 37 % 81) as f64).sin()).collect()).unwrap();
    let m = p.as_matrix::<f64>();
    let want = matmul(&matmul(&m, &a), &transpose(&m));
    assert_eq!(p.apply_two_sided(&a).unwrap(), want);
}

#[test]
fn identity_leaves_matrix_unchanged() {
    let p = PermutationSpec::identity(6).unwrap();
    let a = Tensor::<f64>::new(&[6, 6], (0..36).map(f64::from).collect()).unwrap();
    assert_eq!(p.apply_two_sided(&a).unwrap(), a);
}

#[test]
fn random_draws_are_uniform_over_s5() {
    // 120 outcomes, 10⁴ draws: each count ~ Binomial(10⁴, 1/120)
    let draws = 10_000u64;
    let mut counts: HashMap<Vec<usize>, u64> = HashMap::new();
    for seed in 0..draws {
        let p = PermutationSpec::random(5, seed).unwrap();
        *counts.entry(p.map().to_vec()).or_default() += 1;
    }
    assert_eq!(counts.len(), 120);
    let mean = draws as f64 / 120.0;
    let sd = (draws as f64 * (1.0 / 120.0) * (119.0 / 120.0)).sqrt();
    for (perm, &c) in &counts {
        assert!((c as f64 - mean).abs() < 5.0 * sd, "{perm:?} drawn {c} times");
    }
}

#[test]
fn random_is_reproducible() {
    assert_eq!(
        PermutationSpec::random(50, 3).unwrap(),
        PermutationSpec::random(50, 3).unwrap()
    );
    assert_ne!(
        PermutationSpec::random(50, 3).unwrap().map(),
        PermutationSpec::random(50, 4).unwrap().map()
    );
    assert!(PermutationSpec::random(1, 9).unwrap().is_identity());
}

proptest! {
    #[test]
    fn designed_is_a_bijection(n in 1usize..2000) {
        let p = PermutationSpec::designed(n).unwrap();
        let mut image = p.map().to_vec();
        image.sort_unstable();
        prop_assert!(image.iter().copied().eq(0..n));
    }

    #[test]
    fn inverse_composes_to_identity(n in 1usize..500, seed in any::<u64>(), designed in any::<bool>()) {
        let p = if designed { PermutationSpec::designed(n).unwrap() } else { PermutationSpec::random(n, seed).unwrap() };
        prop_assert!(p.compose(&p.inverse()).unwrap().is_identity());
        prop_assert!(p.inverse().compose(&p).unwrap().is_identity());
    }

    #[test]
    fn square_sizes_separate_by_side(s in 3usize..60) {
        let p = PermutationSpec::designed(s * s).unwrap();
        prop_assert_eq!(p.min_adjacent_separation().unwrap(), s);
    }

    #[test]
    fn two_sided_then_inverse_restores(n in 1usize..40, seed in any::<u64>()) {
        let p = PermutationSpec::random(n, seed).unwrap();
        let a: Vec<f64> = (0..n * n).map(|v| v as f64 * 0.5 - 3.0).collect();
        let a = Tensor::new(&[n, n], a).unwrap();
        let back = p.inverse().apply_two_sided(&p.apply_two_sided(&a).unwrap()).unwrap();
        prop_assert_eq!(back, a);
    }

    #[test]
    fn gather_matches_matmul(n in 1usize..24, seed in any::<u64>()) {
        let p = PermutationSpec::random(n, seed).unwrap();
        let a: Vec<f64> = (0..n * n).map(|v| ((v as f64) * 1.7).cos()).collect();
        let a = Tensor::new(&[n, n], a).unwrap();
        let m = p.as_matrix::<f64>();
        let want = matmul(&matmul(&m, &a), &transpose(&m));
        prop_assert_eq!(p.apply_two_sided(&a).unwrap(), want);
    }
}
