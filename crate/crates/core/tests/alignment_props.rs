use proptest::prelude::*;
use scomp_core::align::{fit_scale_offset, AlignError, FitDirection};

/// Normal equations `[Σx² Σx; Σx n] [s; o] = [Σxy; Σy]` by Cramer's rule.
fn normal_equations(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sx += a;
        sy += b;
        sxx += a * a;
        sxy += a * b;
    }
    let det = sxx * n - sx * sx;
    ((sxy * n - sx * sy) / det, (sxx * sy - sx * sxy) / det)
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn matches_normal_equations(
        pred in prop::collection::vec(0.5f64..20.0, 8..200),
        scale in 0.1f64..5.0,
        offset in -2.0f64..2.0,
        noise_seed in any::<u64>(),
    ) {
        let mut state = noise_seed;
        let clue: Vec<f64> = pred
            .iter()
            .map(|p| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                let n = ((state >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * 0.1;
                scale * p + offset + n
            })
            .collect();
        let mask = vec![true; pred.len()];
        let Ok(fit) = fit_scale_offset(&clue, &pred, &mask, FitDirection::PredictedToClue) else { return Ok(()) };
        let (s, o) = normal_equations(&pred, &clue);
        prop_assert!(close(fit.scale, s, 1e-9), "{} vs {}", fit.scale, s);
        prop_assert!(close(fit.offset, o, 1e-9), "{} vs {}", fit.offset, o);
    }

    #[test]
    fn equivariant_and_idempotent(
        pred in prop::collection::vec(0.5f64..20.0, 8..100),
        jitter in prop::collection::vec(-0.5f64..0.5, 100),
        a in 0.1f64..10.0,
        b in -5.0f64..5.0,
    ) {
        let clue: Vec<f64> = pred.iter().zip(&jitter).map(|(p, j)| 1.5 * p + 0.3 + j).collect();
        let mask = vec![true; pred.len()];
        let Ok(base) = fit_scale_offset(&clue, &pred, &mask, FitDirection::PredictedToClue) else { return Ok(()) };
        let moved: Vec<f64> = clue.iter().map(|c| a * c + b).collect();
        let fit = fit_scale_offset(&moved, &pred, &mask, FitDirection::PredictedToClue).unwrap();
        prop_assert!(close(fit.scale, a * base.scale, 1e-9));
        prop_assert!(close(fit.offset, a * base.offset + b, 1e-9));

        let aligned: Vec<f64> = pred.iter().map(|p| base.apply(*p)).collect();
        let again = fit_scale_offset(&clue, &aligned, &mask, FitDirection::PredictedToClue).unwrap();
        prop_assert!((again.scale - 1.0).abs() <= 1e-9);
        prop_assert!(again.offset.abs() <= 1e-9 * clue.iter().fold(1.0f64, |m, c| m.max(c.abs())));
    }
}

#[test]
fn masked_out_samples_are_ignored() {
    let clue = [3.0, 5.0, 7.0, 100.0];
    let pred = [1.0, 2.0, 3.0, -4.0];
    let fit = fit_scale_offset(&clue, &pred, &[true, true, true, false], FitDirection::PredictedToClue).unwrap();
    assert!((fit.scale - 2.0).abs() < 1e-12 && (fit.offset - 1.0).abs() < 1e-12);
    assert_eq!(fit.n_samples, 3);
    assert_eq!(
        fit_scale_offset(&clue, &pred, &[true, false, false, false], FitDirection::PredictedToClue),
        Err(AlignError::TooFewSamples(1))
    );
}
