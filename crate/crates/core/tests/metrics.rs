mod common;

use common::frechet_1d;
use gelina_core::metrics::{beat_consistency, beat_score, fgd, gesture_beats, l1_diversity, GaussianStats};
use gelina_core::motion::{frame_to_feature, MotionFrame, MotionSequence, MOTION_FPS};
use gelina_core::rotation::{axis_angle_to_matrix, matrix_to_rot6d, AxisAngle};
use gelina_core::Error;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn stats(mean: &[f64], cov: &[f64]) -> GaussianStats {
    let d = mean.len();
    GaussianStats {
        mean: DVector::from_column_slice(mean),
        cov: DMatrix::from_row_slice(d, d, cov),
        count: 100,
    }
}

#[test]
fn univariate_frechet_closed_form() {
    let a = stats(&[0.0], &[1.0]);
    let b = stats(&[3.0], &[4.0]);
    let expect = frechet_1d(0.0, 1.0, 3.0, 2.0);
    assert!((fgd(&a, &b).unwrap() - expect).abs() < 1e-8);
    assert!((expect - 10.0).abs() < 1e-12);
}

#[test]
fn dimension_mismatch() {
    assert!(matches!(
        fgd(&stats(&[0.0], &[1.0]), &stats(&[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0])),
        Err(Error::DimMismatch(1, 2))
    ));
}

#[test]
fn three_point_mean_and_covariance() {
    // points (0,0), (2,0), (1,3): mean (1,1); deviations (-1,-1), (1,-1), (0,2)
    let s = GaussianStats::from_rows(&[vec![0.0, 0.0], vec![2.0, 0.0], vec![1.0, 3.0]]).unwrap();
    assert_eq!(s.mean.as_slice(), &[1.0, 1.0]);
    let expect = [(1.0 + 1.0) / 2.0, (1.0 - 1.0) / 2.0, (1.0 - 1.0) / 2.0, (1.0 + 1.0 + 4.0) / 2.0];
    for (a, b) in s.cov.transpose().as_slice().iter().zip(expect) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(!GaussianStats::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap().cov.iter().any(|&v| v != 0.0));
    assert!(GaussianStats::from_rows(&[vec![1.0]]).is_err());
}

fn random_rows(seed: u64, n: usize, d: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..d).map(|k| rng.random_range(-1.0..1.0) * (k + 1) as f64).collect())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fgd_is_zero_on_itself_and_symmetric(seed in 0u64..10_000, d in 1usize..6) {
        let a = GaussianStats::from_rows(&random_rows(seed, 12, d)).unwrap();
        let b = GaussianStats::from_rows(&random_rows(seed + 1, 9, d)).unwrap();
        prop_assert!(fgd(&a, &a).unwrap().abs() < 1e-8);
        let ab = fgd(&a, &b).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - fgd(&b, &a).unwrap()).abs() < 1e-8);
    }

    #[test]
    fn stats_ignore_row_order(seed in 0u64..10_000) {
        let mut rows = random_rows(seed, 7, 3);
        let a = GaussianStats::from_rows(&rows).unwrap();
        rows.reverse();
        rows.swap(0, 3);
        let b = GaussianStats::from_rows(&rows).unwrap();
        prop_assert!((a.mean - b.mean).abs().max() < 1e-12);
        prop_assert!((a.cov - b.cov).abs().max() < 1e-12);
    }

    #[test]
    fn beat_score_properties(
        gesture in proptest::collection::vec(0.0f64..10.0, 1..8),
        audio in proptest::collection::vec(0.0f64..10.0, 1..8),
        sigma in 0.05f64..1.0,
    ) {
        let s = beat_score(&gesture, &audio, sigma);
        prop_assert!((0.0..=1.0).contains(&s));
        let mut rev = audio.clone();
        rev.reverse();
        prop_assert_eq!(s, beat_score(&gesture, &rev, sigma));
        let g2: Vec<f64> = gesture.iter().map(|x| 2.0 * x).collect();
        let a2: Vec<f64> = audio.iter().map(|x| 2.0 * x).collect();
        prop_assert!((beat_score(&g2, &a2, 2.0 * sigma) - s).abs() < 1e-12);
    }
}

#[test]
fn coincident_and_distant_beats() {
    let beats = [0.5, 2.0, 4.0];
    assert_eq!(beat_score(&beats, &beats, 0.1), 1.0);
    let far: Vec<f64> = beats.iter().map(|b| b + 0.5).collect();
    assert!(beat_score(&far, &beats, 0.1) < 4e-6);
}

/// One joint swinging as `sin²` so its angular speed dips to zero at known frames.
fn swinging_clip(frames: usize, period: usize) -> MotionSequence<f64> {
    let mut data = Vec::new();
    for i in 0..frames {
        let phase = (i as f64 + 0.5) / period as f64 * std::f64::consts::PI;
        let mut f = MotionFrame::<f64>::rest();
        f.joints[16] = matrix_to_rot6d(&axis_angle_to_matrix(AxisAngle([0.0, 0.0, 0.8 * phase.cos()])));
        data.extend(frame_to_feature(&f));
    }
    MotionSequence::new(data, MOTION_FPS).unwrap()
}

#[test]
fn beats_found_at_angular_speed_minima() {
    let clip = swinging_clip(60, 10);
    let beats = gesture_beats(&clip);
    assert!(!beats.is_empty());
    let report = beat_consistency(&clip, &beats, 0.1);
    assert_eq!(report.score, 1.0);
    assert!(!report.no_beats);
    let still = MotionSequence::from_frames(&vec![MotionFrame::<f64>::rest(); 20], MOTION_FPS).unwrap();
    let r = beat_consistency(&still, &[0.5], 0.1);
    assert!(r.no_beats);
    assert_eq!(r.score, 0.0);
}

#[test]
fn diversity_definition() {
    let a = swinging_clip(10, 5);
    assert_eq!(l1_diversity(&[a.clone(), a.clone(), a.clone()]).unwrap(), 0.0);
    let shifted = MotionSequence::new(a.data().iter().map(|v| v + 1.0).collect(), MOTION_FPS).unwrap();
    assert!((l1_diversity(&[a.clone(), shifted.clone()]).unwrap() - 1.0).abs() < 1e-12);
    let b = swinging_clip(10, 3);
    let fwd = l1_diversity(&[a.clone(), b.clone(), shifted.clone()]).unwrap();
    let back = l1_diversity(&[shifted.clone(), a.clone(), b.clone()]).unwrap();
    assert!((fwd - back).abs() < 1e-12);
    let scale = |m: &MotionSequence<f64>| MotionSequence::new(m.data().iter().map(|v| 3.0 * v).collect(), MOTION_FPS).unwrap();
    let scaled = l1_diversity(&[scale(&a), scale(&b), scale(&shifted)]).unwrap();
    assert!((scaled - 3.0 * fwd).abs() < 1e-9);
    assert!(matches!(l1_diversity(std::slice::from_ref(&a)), Err(Error::TooFewClips { .. })));
    assert!(matches!(l1_diversity(&[a, swinging_clip(11, 5)]), Err(Error::LengthMismatch { .. })));
}
