mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rejuv_core::analysis::*;
use rejuv_core::data::{Pair, ParallelCorpus, Split};
use rejuv_core::model::{ModelConfig, Transformer};
use rejuv_core::train::PhaseKind;
use rejuv_core::Error;

fn random_matrix(rng: &mut ChaCha8Rng, m: usize, d: usize) -> Vec<Vec<f64>> {
    (0..m).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

fn centered(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = m[0].len();
    let mean: Vec<f64> = (0..d).map(|j| m.iter().map(|r| r[j]).sum::<f64>() / m.len() as f64).collect();
    m.iter().map(|r| r.iter().zip(&mean).map(|(x, mu)| x - mu).collect()).collect()
}

fn reconstruction_error(m: &[Vec<f64>], svd: &Svd) -> f64 {
    let c = centered(m);
    let mut err = 0.0;
    for (row, red) in c.iter().zip(&svd.reduced) {
        for j in 0..row.len() {
            let approx: f64 = svd.components.iter().zip(red).map(|(comp, r)| comp[j] * r).sum();
            err += (row[j] - approx).powi(2);
        }
    }
    err.sqrt()
}

#[test]
fn rank_one_reconstructs_exactly() {
    let u = [1.0, -2.0, 0.5, 3.0];
    let v = [0.3, -0.1, 0.7];
    let m: Vec<Vec<f64>> = u.iter().map(|a| v.iter().map(|b| a * b).collect()).collect();
    let svd = truncated_svd(&m, 1).unwrap();
    assert!(reconstruction_error(&m, &svd) < 1e-6);
}

#[test]
fn diagonal_case_matches_dense_oracle() {
    let m = vec![vec![3.0, 0.0], vec![0.0, 1.0]];
    let svd = truncated_svd(&m, 1).unwrap();
    let want = common::dense_singular_values(&m)[0];
    assert!((svd.singular_values[0] - want).abs() < 1e-6, "{} vs {want}", svd.singular_values[0]);
}

#[test]
fn random_matrices_match_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let m = random_matrix(&mut rng, 10, 6);
    let svd = truncated_svd(&m, 2).unwrap();
    let want = common::dense_singular_values(&m);
    for i in 0..2 {
        assert!((svd.singular_values[i] - want[i]).abs() <= 1e-6 * want[i], "{i}: {} vs {}", svd.singular_values[i], want[i]);
    }
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (r, c) = (rng.gen_range(2..=20), rng.gen_range(2..=20));
        let m = random_matrix(&mut rng, r, c);
        // Centering removes one dimension, so only the first r - 1 values are nonzero.
        let k = (r - 1).min(c).min(4);
        let svd = truncated_svd(&m, k).unwrap();
        let want = common::dense_singular_values(&m);
        for i in 0..k {
            assert!(
                (svd.singular_values[i] - want[i]).abs() <= 1e-6 * want[i].max(1e-12),
                "seed {seed} [{r}x{c}] {i}: {} vs {}",
                svd.singular_values[i],
                want[i]
            );
        }
    }
}

#[test]
fn components_are_orthonormal_with_sign_convention() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m = random_matrix(&mut rng, 12, 8);
    let svd = truncated_svd(&m, 4).unwrap();
    for (i, a) in svd.components.iter().enumerate() {
        let norm: f64 = a.iter().map(|x| x * x).sum();
        assert!((norm - 1.0).abs() < 1e-9);
        let big = a.iter().copied().fold(0.0f64, |b, x| if x.abs() > b.abs() { x } else { b });
        assert!(big > 0.0);
        for b in &svd.components[i + 1..] {
            assert!(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>().abs() < 1e-6);
        }
    }
    for w in svd.singular_values.windows(2) {
        assert!(w[0] >= w[1]);
    }
}

#[test]
fn reconstruction_error_does_not_grow_with_k() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let m = random_matrix(&mut rng, 9, 7);
    let errs: Vec<f64> = (1..=7).map(|k| reconstruction_error(&m, &truncated_svd(&m, k).unwrap())).collect();
    for w in errs.windows(2) {
        assert!(w[1] <= w[0] + 1e-9, "{errs:?}");
    }
}

#[test]
fn k_too_large_is_usage_error() {
    let m = vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![0.0, 1.0]];
    assert!(matches!(truncated_svd(&m, 3), Err(Error::Usage(_))));
    assert!(matches!(truncated_svd(&m, 0), Err(Error::Usage(_))));
    let bad = vec![vec![f64::NAN, 1.0], vec![0.0, 1.0]];
    assert!(matches!(truncated_svd(&bad, 1), Err(Error::Numerical(_))));
}

fn corpus(pairs: &[(&[u32], &[u32])]) -> ParallelCorpus {
    ParallelCorpus { split: Split::Dev, pairs: pairs.iter().map(|(s, t)| Pair { src: s.to_vec(), tgt: t.to_vec() }).collect() }
}

fn small_model(seed: u64) -> Transformer {
    Transformer::build(ModelConfig { vocab_size: 16, ..ModelConfig::default() }, seed).unwrap()
}

#[test]
fn mean_vector_of_single_sentence_is_its_state_average() {
    let model = small_model(1);
    let c = corpus(&[(&[5], &[5])]);
    let mean = encoder_mean_vector(&model, &c).unwrap();
    let states = model.encode(&[5, 2]).unwrap();
    let d = model.config.d_model;
    for j in 0..d {
        let want = (states.data[j] as f64 + states.data[d + j] as f64) / 2.0;
        assert!((mean[j] - want).abs() < 1e-6);
    }
}

#[test]
fn mean_vector_ignores_duplication_and_differs_across_models() {
    let model = small_model(1);
    let once = corpus(&[(&[5, 6, 7], &[7, 6, 5]), (&[9, 3], &[3, 9])]);
    let twice = corpus(&[(&[5, 6, 7], &[7, 6, 5]), (&[9, 3], &[3, 9]), (&[5, 6, 7], &[7, 6, 5]), (&[9, 3], &[3, 9])]);
    let a = encoder_mean_vector(&model, &once).unwrap();
    let b = encoder_mean_vector(&model, &twice).unwrap();
    assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-9));
    let other = encoder_mean_vector(&small_model(2), &once).unwrap();
    assert!(a.iter().zip(&other).any(|(x, y)| (x - y).abs() > 1e-4));
}

#[test]
fn trajectory_points_and_csv() {
    let dev = corpus(&[(&[5, 6, 7], &[7, 6, 5]), (&[9, 3, 4], &[4, 3, 9])]);
    let cks: Vec<(String, PhaseKind, Transformer)> = vec![
        ("a".into(), PhaseKind::Base, small_model(1)),
        ("b".into(), PhaseKind::Base, small_model(2)),
        ("c".into(), PhaseKind::PruTrain, small_model(2)),
        ("d".into(), PhaseKind::RejTrain, small_model(3)),
    ];
    let pts = trajectory(&cks, &dev).unwrap();
    assert_eq!(pts.len(), 4);
    assert_eq!(pts[1].coord, pts[2].coord);
    assert!(pts.iter().all(|p| p.coord.iter().all(|x| x.is_finite())));
    let csv = trajectory_csv(&pts);
    assert_eq!(csv.lines().count(), 5);
    assert_eq!(csv.lines().next().unwrap(), TRAJECTORY_HEADER);
    assert_eq!(csv, trajectory_csv(&trajectory(&cks, &dev).unwrap()));
    let svg = trajectory_svg(&pts);
    assert!(svg.starts_with("<svg") && svg.matches("<circle").count() == 4);
    assert!(matches!(trajectory(&cks[..2], &dev), Err(Error::Usage(_))));
}
