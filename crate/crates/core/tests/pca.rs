mod common;

use common::{dense_eigen, random_tensor, rng, same_up_to_sign};
use rand::Rng;
use usseg::pca::pca_rgb;
use usseg::{Error, Tensor};

#[test]
fn components_match_dense_eigensolver() {
    let mut r = rng(17);
    for case in 0..30 {
        let d = r.random_range(3..=8);
        let (h, w) = (r.random_range(2..=6), r.random_range(2..=6));
        // anisotropic features so the top three eigenvalues are separated
        let mut f = random_tensor(&[1, h, w, d], &mut r);
        for (i, v) in f.data_mut().iter_mut().enumerate() {
            *v *= 1.0 + (i % d) as f64;
        }
        let pca = pca_rgb(&f).unwrap();
        let s = &pca.samples[0];
        let oracle = dense_eigen(f.data(), h * w, d);
        let rank = (h * w - 1).min(d);
        for k in 0..3.min(rank) {
            if s.degenerate[k] {
                continue;
            }
            assert!(
                (s.eigenvalues[k] - oracle[k].0).abs() < 1e-6 * oracle[0].0.max(1.0),
                "case {case}"
            );
            assert!(
                same_up_to_sign(&s.components[k], &oracle[k].1, 1e-4),
                "case {case} component {k}"
            );
            // projections agree up to the same sign
            let sign = if s.components[k]
                .iter()
                .zip(&oracle[k].1)
                .map(|(a, b)| a * b)
                .sum::<f64>()
                < 0.0
            {
                -1.0
            } else {
                1.0
            };
            let mean: Vec<f64> = (0..d)
                .map(|j| f.data().iter().skip(j).step_by(d).sum::<f64>() / (h * w) as f64)
                .collect();
            for (pos, row) in f.data().chunks(d).enumerate() {
                let expect: f64 = row
                    .iter()
                    .zip(&mean)
                    .zip(&oracle[k].1)
                    .map(|((x, m), v)| (x - m) * v)
                    .sum();
                assert!((s.projections[pos][k] - sign * expect).abs() < 1e-4, "case {case}");
            }
        }
    }
}

#[test]
fn five_by_five_by_four_projections() {
    let f = random_tensor(&[1, 5, 5, 4], &mut rng(5));
    let pca = pca_rgb(&f).unwrap();
    let oracle = dense_eigen(f.data(), 25, 4);
    for k in 0..3 {
        assert!(same_up_to_sign(&pca.samples[0].components[k], &oracle[k].1, 1e-4));
    }
}

#[test]
fn components_are_orthonormal() {
    let mut r = rng(2);
    for _ in 0..20 {
        let f = random_tensor(&[2, 4, 4, 8], &mut r);
        for s in pca_rgb(&f).unwrap().samples {
            for i in 0..3 {
                for j in 0..3 {
                    let dot: f64 = s.components[i].iter().zip(&s.components[j]).map(|(a, b)| a * b).sum();
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert!((dot - expect).abs() < 1e-6, "{dot}");
                }
            }
        }
    }
}

#[test]
fn rank_one_features_are_fully_explained_by_the_first_component() {
    let v = [0.3, -1.2, 0.5, 2.0];
    let mut r = rng(9);
    let scalars: Vec<f64> = (0..12).map(|_| r.random_range(-2.0..2.0)).collect();
    let f = Tensor::new(
        vec![1, 3, 4, 4],
        scalars.iter().flat_map(|s| v.map(|x| s * x)).collect(),
    )
    .unwrap();
    let pca = pca_rgb(&f).unwrap();
    let s = &pca.samples[0];
    assert!((s.explained[0] - 1.0).abs() < 1e-9);
    assert_eq!(s.degenerate, [false, true, true]);
    assert!(pca.warning());
    assert!(pca.rgb.data().chunks(3).all(|p| p[1] == 0.5 && p[2] == 0.5));
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!(same_up_to_sign(&s.components[0], &v.map(|x| x / norm), 1e-9));
}

#[test]
fn output_is_in_unit_range_and_constant_input_is_gray() {
    let f = random_tensor(&[2, 6, 5, 7], &mut rng(1)).cast::<f32>();
    let pca = pca_rgb(&f).unwrap();
    assert_eq!(pca.rgb.shape(), &[2, 6, 5, 3]);
    assert!(pca.rgb.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(!pca.warning());

    let flat = pca_rgb(&Tensor::<f64>::full(&[1, 3, 3, 4], 2.5)).unwrap();
    assert!(flat.warning());
    assert!(flat.rgb.data().iter().all(|&v| v == 0.5));
}

#[test]
fn too_few_channels_or_positions_is_an_error() {
    assert!(matches!(
        pca_rgb(&Tensor::<f64>::zeros(&[1, 4, 4, 2])),
        Err(Error::Shape { .. })
    ));
    assert!(matches!(
        pca_rgb(&Tensor::<f64>::zeros(&[1, 1, 2, 4])),
        Err(Error::Shape { .. })
    ));
}
