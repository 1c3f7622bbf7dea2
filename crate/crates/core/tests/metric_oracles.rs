mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use spike_saliency::metrics::{self, pixel_ratio_analysis, summarise};

#[test]
fn worked_f_beta() {
    assert_eq!(metrics::f_beta_from_pr(0.5, 0.5), 0.5);
    assert_eq!(metrics::f_beta_from_pr(0.0, 0.0), 0.0);
    // P = 1, R = 0.5: 1.3·0.5 / (0.3 + 0.5)
    assert!((metrics::f_beta_from_pr(1.0, 0.5) - 0.8125).abs() < 1e-15);
}

#[test]
fn metrics_match_naive_references() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..200 {
        let (p, g) = common::random_pair(&mut rng, 64);
        assert!((metrics::mae(&p, &g).unwrap() - common::naive_mae(&p, &g)).abs() < 1e-10);
        assert!((metrics::mean_f_beta(&p, &g).unwrap() - common::naive_mean_f(&p, &g)).abs() < 1e-10);
        assert!((metrics::max_f_beta(&p, &g).unwrap() - common::naive_max_f(&p, &g)).abs() < 1e-10);
        assert!((metrics::psnr(&p, &g).unwrap() - common::naive_psnr(&p, &g)).abs() < 1e-10);
        assert!((metrics::ssim(&p, &g, 8, 8).unwrap() - common::naive_ssim(&p, &g, 8, 8)).abs() < 1e-6);
    }
}

#[test]
fn ssim_reference_on_a_non_square_image() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let (p, g) = common::random_pair(&mut rng, 6 * 13);
    assert!((metrics::ssim(&p, &g, 13, 6).unwrap() - common::naive_ssim(&p, &g, 13, 6)).abs() < 1e-6);
}

#[test]
fn perfect_prediction_scores() {
    let mut g = vec![0.0; 64];
    for i in [9, 10, 17, 18, 19, 27] {
        g[i] = 1.0;
    }
    assert_eq!(metrics::mae(&g, &g).unwrap(), 0.0);
    assert_eq!(metrics::max_f_beta(&g, &g).unwrap(), 1.0);
    assert_eq!(metrics::mean_f_beta(&g, &g).unwrap(), 1.0);
    assert_eq!(metrics::psnr(&g, &g).unwrap(), metrics::PSNR_CAP);
    assert!((metrics::ssim(&g, &g, 8, 8).unwrap() - 1.0).abs() < 1e-12);
    assert!((metrics::s_measure(&g, &g, 8, 8).unwrap() - 1.0).abs() < 1e-9);
}

#[test]
fn s_measure_of_empty_mask_is_one_minus_mean_prediction() {
    let p = vec![0.25; 16];
    let g = vec![0.0; 16];
    assert!((metrics::s_measure(&p, &g, 4, 4).unwrap() - 0.75).abs() < 1e-12);
    let full = vec![1.0; 16];
    assert!((metrics::s_measure(&p, &full, 4, 4).unwrap() - 0.25).abs() < 1e-12);
}

#[test]
fn pixel_ratio_counts_by_class() {
    let preds = vec![vec![0.9, 0.1, 0.6, 0.2], vec![0.0; 4], vec![1.0; 4]];
    let gts = vec![vec![1.0, 0.0, 0.0, 0.0], vec![1.0, 1.0, 0.0, 0.0], vec![1.0; 4]];
    let classes = vec!["a".to_string(), "b".to_string(), "a".to_string()];
    let r = pixel_ratio_analysis(&preds, &gts, &classes).unwrap();
    assert_eq!(r.len(), 2);
    let a = r.iter().find(|c| c.class == "a").unwrap();
    assert_eq!(a.samples, 2);
    assert!((a.predicted - (0.5 + 1.0) / 2.0).abs() < 1e-12);
    assert!((a.ground_truth - (0.25 + 1.0) / 2.0).abs() < 1e-12);
    let b = r.iter().find(|c| c.class == "b").unwrap();
    assert_eq!((b.predicted, b.ground_truth), (0.0, 0.5));
}

#[test]
fn summary_averages_per_image_scores() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let pairs: Vec<_> = (0..5).map(|_| common::random_pair(&mut rng, 64)).collect();
    let preds: Vec<Vec<f64>> = pairs.iter().map(|p| p.0.clone()).collect();
    let gts: Vec<Vec<f64>> = pairs.iter().map(|p| p.1.clone()).collect();
    let classes = vec!["x".to_string(); 5];
    let rep = summarise(&preds, &gts, &classes, 8, 8).unwrap();
    let mean = |f: &dyn Fn(&[f64], &[f64]) -> f64| pairs.iter().map(|(p, g)| f(p, g)).sum::<f64>() / 5.0;
    assert!((rep.mae - mean(&common::naive_mae)).abs() < 1e-12);
    assert!((rep.max_f_beta - mean(&common::naive_max_f)).abs() < 1e-12);
    assert!(rep.max_f_beta >= rep.mean_f_beta);
    assert_eq!(rep.samples, 5);
}
