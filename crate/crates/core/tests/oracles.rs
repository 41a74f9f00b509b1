//! Checks against independent reference computations and randomized
//! invariants.

use dcco::codec::{decode_stats, encode_stats};
use dcco::stats::{aggregate_stats, cco_loss_value, correlation_value, EncodingStats};
use dcco::Tensor;
use proptest::prelude::*;

/// Textbook two-pass Pearson coefficient.
fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn column(t: &Tensor, j: usize) -> Vec<f64> {
    (0..t.rows()).map(|i| t.row(i)[j]).collect()
}

fn batch(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| Tensor::matrix(rows, cols, v).unwrap())
}

fn pair() -> impl Strategy<Value = (Tensor, Tensor)> {
    (3usize..12, 2usize..5).prop_flat_map(|(n, d)| (batch(n, d), batch(n, d)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn correlation_matches_two_pass_pearson((f, g) in pair()) {
        let s = EncodingStats::from_batch(&f, &g).unwrap();
        let c = correlation_value(&s, 0.0).unwrap();
        let d = f.cols();
        for i in 0..d {
            for j in 0..d {
                let want = pearson(&column(&f, i), &column(&g, j));
                prop_assert!((c.data()[i * d + j] - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn loss_is_nonnegative((f, g) in pair(), lambda in 0.0f64..30.0) {
        let s = EncodingStats::from_batch(&f, &g).unwrap();
        let c = correlation_value(&s, 1e-8).unwrap();
        prop_assert!(cco_loss_value(&c, lambda).unwrap() >= 0.0);
    }

    #[test]
    fn loss_is_invariant_to_jointly_permuting_dimensions((f, g) in pair(), lambda in 0.0f64..30.0) {
        let d = f.cols();
        let perm: Vec<usize> = (0..d).rev().collect();
        let shuffle = |t: &Tensor| {
            let rows: Vec<Vec<f64>> = (0..t.rows()).map(|i| perm.iter().map(|&j| t.row(i)[j]).collect()).collect();
            Tensor::from_rows(&rows).unwrap()
        };
        let loss = |f: &Tensor, g: &Tensor| {
            let c = correlation_value(&EncodingStats::from_batch(f, g).unwrap(), 1e-8).unwrap();
            cco_loss_value(&c, lambda).unwrap()
        };
        prop_assert!((loss(&f, &g) - loss(&shuffle(&f), &shuffle(&g))).abs() < 1e-12);
    }

    #[test]
    fn aggregation_ignores_client_order((f, g) in pair(), cut in 1usize..3) {
        let n = f.rows();
        let cut = cut.min(n - 1);
        let part = |lo: usize, hi: usize| {
            let idx: Vec<usize> = (lo..hi).collect();
            EncodingStats::from_batch(&f.select_rows(&idx).unwrap(), &g.select_rows(&idx).unwrap()).unwrap()
        };
        let (a, b) = (part(0, cut), part(cut, n));
        let ab = aggregate_stats(&[a.clone(), b.clone()]).unwrap();
        let ba = aggregate_stats(&[b, a]).unwrap();
        prop_assert!(ab.max_abs_diff(&ba) < 1e-12);
        prop_assert_eq!(ab.count, n as u64);
    }

    #[test]
    fn stats_codec_round_trips_bitwise((f, g) in pair()) {
        let s = EncodingStats::from_batch(&f, &g).unwrap();
        prop_assert_eq!(decode_stats(&encode_stats(&s)).unwrap(), s);
    }
}

#[test]
fn correlation_of_affine_copies_is_one() {
    let f = Tensor::from_rows(&[vec![1.0, 4.0], vec![2.0, -1.0], vec![5.0, 0.5]]).unwrap();
    let g = Tensor::from_rows(&[vec![3.0, 9.0], vec![5.0, -1.0], vec![11.0, 2.0]]).unwrap();
    let c = correlation_value(&EncodingStats::from_batch(&f, &g).unwrap(), 0.0).unwrap();
    assert!((c.data()[0] - 1.0).abs() < 1e-12);
    assert!((c.data()[3] - 1.0).abs() < 1e-12);
}
