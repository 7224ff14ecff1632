use proptest::prelude::*;
use zskd_core::models::build_lenet5;
use zskd_core::prior::{class_similarity, SimilarityMatrix, EPSILON_FLOOR};
use zskd_core::{Error, Tensor};

fn templates(n: usize, k: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-1.0f64..1.0, n * k)
        .prop_filter("columns need non-zero norm", move |d| {
            (0..k).all(|j| (0..n).map(|r| d[r * k + j].abs()).sum::<f64>() > 1e-3)
        })
        .prop_map(move |d| Tensor::new([n, k], d).unwrap())
}

fn check_invariants(s: &SimilarityMatrix) {
    let k = s.k();
    for i in 0..k {
        assert!((s.raw()[i * k + i] - 1.0).abs() < 1e-12);
        assert!((s.normalized()[i * k + i] - 1.0).abs() < 1e-12);
        for j in 0..k {
            let r = s.raw()[i * k + j];
            assert_eq!(r, s.raw()[j * k + i]);
            assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
            let v = s.normalized()[i * k + j];
            assert!((EPSILON_FLOOR..=1.0).contains(&v), "{v}");
        }
        let row = s.normalized_row(i);
        assert!(row.contains(&EPSILON_FLOOR) || row.iter().all(|&v| v == 1.0));
    }
}

proptest! {
    #[test]
    fn random_templates_satisfy_invariants(w in templates(12, 6)) {
        check_invariants(&SimilarityMatrix::from_templates(&w).unwrap());
    }

    #[test]
    fn power_of_two_column_scaling_is_exact(w in templates(9, 5), col in 0usize..5, p in -8i32..8) {
        let mut scaled = w.clone();
        let f = 2f64.powi(p);
        for r in 0..9 {
            scaled.data_mut()[r * 5 + col] *= f;
        }
        let a = SimilarityMatrix::from_templates(&w).unwrap();
        let b = SimilarityMatrix::from_templates(&scaled).unwrap();
        prop_assert_eq!(a.raw(), b.raw());
        prop_assert_eq!(a.normalized(), b.normalized());
    }

    #[test]
    fn permuting_classes_permutes_the_matrix(w in templates(8, 4), shift in 1usize..4) {
        let perm: Vec<usize> = (0..4).map(|j| (j + shift) % 4).collect();
        let mut moved = Tensor::zeros([8, 4]);
        for r in 0..8 {
            for (j, &pj) in perm.iter().enumerate() {
                moved.data_mut()[r * 4 + j] = w.data()[r * 4 + pj];
            }
        }
        let a = SimilarityMatrix::from_templates(&w).unwrap();
        let b = SimilarityMatrix::from_templates(&moved).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let want = a.raw()[perm[i] * 4 + perm[j]];
                prop_assert!((b.raw()[i * 4 + j] - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn lenet_teacher_prior_invariants() {
    let s = class_similarity(&build_lenet5(21)).unwrap();
    assert_eq!(s.k(), 10);
    check_invariants(&s);
    assert_eq!(s.normalized_csv().lines().count(), 10);
}

#[test]
fn zero_column_names_its_class() {
    let mut w = Tensor::full([4, 3], 0.5);
    for r in 0..4 {
        w.data_mut()[r * 3 + 2] = 0.0;
    }
    assert!(matches!(SimilarityMatrix::from_templates(&w), Err(Error::DegenerateTemplate { class: 2 })));
}
