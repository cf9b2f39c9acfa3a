use super::LatentTensor;
use crate::error::Result;

/// Mean squared error between true and predicted noise, averaged over all
/// elements.
pub fn loss_sgldm(eps_true: &LatentTensor, eps_pred: &LatentTensor) -> Result<f64> {
    eps_true.ensure_same_shape(eps_pred)?;
    let n = eps_true.len().max(1) as f64;
    Ok(eps_true
        .as_array()
        .iter()
        .zip(eps_pred.as_array())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / n)
}

/// Gradient of [`loss_sgldm`] with respect to `eps_pred`.
pub fn loss_sgldm_grad(eps_true: &LatentTensor, eps_pred: &LatentTensor) -> Result<LatentTensor> {
    let n = eps_true.len().max(1) as f64;
    eps_pred.lincomb(2.0 / n, eps_true, -2.0 / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn trivial_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = LatentTensor::randn((3, 4, 4), &mut rng);
        assert_eq!(loss_sgldm(&e, &e).unwrap(), 0.0);
        let one = LatentTensor::filled((1, 1, 1), 1.0);
        let zero = LatentTensor::zeros((1, 1, 1));
        assert_eq!(loss_sgldm(&one, &zero).unwrap(), 1.0);
        assert!(loss_sgldm(&one, &LatentTensor::zeros((1, 1, 2))).is_err());
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let truth = LatentTensor::randn((2, 3, 3), &mut rng);
        let pred = LatentTensor::randn((2, 3, 3), &mut rng);
        let grad = loss_sgldm_grad(&truth, &pred).unwrap();
        let h = 1e-6;
        let base = pred.to_vec();
        for i in 0..base.len() {
            let at = |delta: f64| {
                let mut v = base.clone();
                v[i] += delta;
                let p = LatentTensor::from_vec((2, 3, 3), v).unwrap();
                loss_sgldm(&truth, &p).unwrap()
            };
            let fd = (at(h) - at(-h)) / (2.0 * h);
            let g = grad.to_vec()[i];
            assert!((fd - g).abs() <= 1e-5 * g.abs().max(1e-3), "{fd} vs {g}");
        }
    }

    proptest::proptest! {
        #[test]
        fn nonnegative_and_zero_only_on_match(a in proptest::collection::vec(-5.0f64..5.0, 12), b in proptest::collection::vec(-5.0f64..5.0, 12)) {
            let x = LatentTensor::from_vec((3, 2, 2), a.clone()).unwrap();
            let y = LatentTensor::from_vec((3, 2, 2), b.clone()).unwrap();
            let l = loss_sgldm(&x, &y).unwrap();
            proptest::prop_assert!(l >= 0.0);
            proptest::prop_assert_eq!(l == 0.0, a == b);
        }
    }
}
