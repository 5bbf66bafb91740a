//! Rank correlation against an exact rational oracle, plus algebraic
//! properties.

use harmonizer_core::metrics::{fractional_ranks, spearman, MetricsError};
use num_rational::Ratio;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Q = Ratio<i128>;

/// Average-tie ranks as exact fractions.
fn oracle_ranks(v: &[i64]) -> Vec<Q> {
    v.iter()
        .map(|&x| {
            let below = v.iter().filter(|&&y| y < x).count() as i128;
            let equal = v.iter().filter(|&&y| y == x).count() as i128;
            // Mean of positions below+1 ..= below+equal.
            Q::new(2 * below + equal + 1, 2)
        })
        .collect()
}

/// Pearson on exact ranks: the numerator and the squared denominator are
/// exact; only the final square root rounds.
fn oracle_rho(a: &[i64], b: &[i64]) -> Option<f64> {
    let (ra, rb) = (oracle_ranks(a), oracle_ranks(b));
    let n = Q::from_integer(a.len() as i128);
    let ma = ra.iter().sum::<Q>() / n;
    let mb = rb.iter().sum::<Q>() / n;
    let cov: Q = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: Q = ra.iter().map(|x| (x - ma) * (x - ma)).sum();
    let vb: Q = rb.iter().map(|y| (y - mb) * (y - mb)).sum();
    if va == Q::from_integer(0) || vb == Q::from_integer(0) {
        return None;
    }
    let r2 = cov * cov / (va * vb);
    let mag = (*r2.numer() as f64 / *r2.denom() as f64).sqrt();
    Some(if cov < Q::from_integer(0) { -mag } else { mag })
}

fn permutations(n: usize) -> Vec<Vec<i64>> {
    fn go(prefix: &mut Vec<i64>, left: &mut Vec<i64>, out: &mut Vec<Vec<i64>>) {
        if left.is_empty() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..left.len() {
            let x = left.remove(i);
            prefix.push(x);
            go(prefix, left, out);
            prefix.pop();
            left.insert(i, x);
        }
    }
    let mut out = Vec::new();
    go(&mut Vec::new(), &mut (0..n as i64).collect(), &mut out);
    out
}

fn as_f64(v: &[i64]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

#[test]
fn all_permutations_up_to_six() {
    let mut checked = 0;
    for n in 2..=6 {
        let id: Vec<i64> = (0..n as i64).collect();
        for p in permutations(n) {
            let want = oracle_rho(&id, &p).unwrap();
            let got = spearman(&as_f64(&id), &as_f64(&p)).unwrap();
            assert!((got - want).abs() <= 1e-12, "{p:?}: {got} vs {want}");
            checked += 1;
        }
    }
    assert_eq!(checked, 2 + 6 + 24 + 120 + 720);
}

#[test]
fn random_tied_vectors() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut checked = 0;
    while checked < 200 {
        let n = rng.random_range(3..40);
        let levels = rng.random_range(2..6);
        let a: Vec<i64> = (0..n).map(|_| rng.random_range(0..levels)).collect();
        let b: Vec<i64> = (0..n).map(|_| rng.random_range(0..levels)).collect();
        match oracle_rho(&a, &b) {
            Some(want) => {
                let got = spearman(&as_f64(&a), &as_f64(&b)).unwrap();
                assert!((got - want).abs() <= 1e-12, "{a:?} {b:?}: {got} vs {want}");
                checked += 1;
            }
            None => assert_eq!(spearman(&as_f64(&a), &as_f64(&b)), Err(MetricsError::Constant)),
        }
    }
}

#[test]
fn ranks_match_oracle_on_ties() {
    let v = [3, 1, 3, 2, 1, 3];
    let want: Vec<f64> = oracle_ranks(&v)
        .iter()
        .map(|q| *q.numer() as f64 / *q.denom() as f64)
        .collect();
    assert_eq!(fractional_ranks(&as_f64(&v)), want);
}

#[test]
fn undefined_inputs_are_errors() {
    assert_eq!(spearman(&[1.0, 2.0], &[1.0]), Err(MetricsError::LengthMismatch(2, 1)));
    assert_eq!(spearman(&[1.0], &[1.0]), Err(MetricsError::TooShort(1)));
    assert_eq!(
        spearman(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]),
        Err(MetricsError::Constant)
    );
}

fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (3usize..30).prop_flat_map(|n| {
        (
            prop::collection::vec(-5i32..5, n).prop_map(|v| v.into_iter().map(f64::from).collect()),
            prop::collection::vec(-1e3f64..1e3, n),
        )
    })
}

proptest! {
    #[test]
    fn symmetric_and_bounded((a, b) in pair()) {
        if let (Ok(x), Ok(y)) = (spearman(&a, &b), spearman(&b, &a)) {
            prop_assert!((x - y).abs() <= 1e-12);
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&x));
        }
    }

    #[test]
    fn invariant_to_monotone_maps((a, b) in pair()) {
        let warped: Vec<f64> = b.iter().map(|v| (v / 100.0).exp() * 3.0 + 1.0).collect();
        if let (Ok(x), Ok(y)) = (spearman(&a, &b), spearman(&a, &warped)) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn reversal_negates((a, b) in pair()) {
        let neg: Vec<f64> = b.iter().map(|v| -v).collect();
        if let (Ok(x), Ok(y)) = (spearman(&a, &b), spearman(&a, &neg)) {
            prop_assert!((x + y).abs() <= 1e-12);
        }
    }
}
