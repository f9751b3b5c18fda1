use super::ops::dims4;
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Mean over pixels of `w[t] * -log softmax(logits)[t]`.
///
/// `logits` is N x K x H x W; `target` holds N*H*W class indices in
/// row-major N, H, W order; `class_weights` has K positive entries.
pub fn weighted_cross_entropy<T: Real>(
    logits: &Tensor<T>,
    target: &[u8],
    class_weights: &[T],
) -> Result<Tensor<T>> {
    let (n, k, h, w) = dims4(logits, "weighted_cross_entropy")?;
    let hw = h * w;
    if target.len() != n * hw {
        return Err(Error::shape(
            "weighted_cross_entropy",
            format!("target has {} pixels, logits have {}", target.len(), n * hw),
        ));
    }
    if class_weights.len() != k {
        return Err(Error::shape(
            "weighted_cross_entropy",
            format!("{} class weights for {k} classes", class_weights.len()),
        ));
    }
    if let Some(bad) = class_weights.iter().position(|&w| !(w > T::zero())) {
        return Err(Error::invalid("weighted_cross_entropy", format!("weight {bad} is not positive")));
    }
    if let Some(&value) = target.iter().find(|&&t| t as usize >= k) {
        return Err(Error::LabelOutOfRange { value, classes: k as u8 });
    }

    let pixels = T::from_usize(n * hw).unwrap();
    // Softmax probabilities are kept for the backward pass.
    let mut probs = vec![T::zero(); n * k * hw];
    let mut total = T::zero();
    {
        let z = logits.data();
        let mut col = vec![T::zero(); k];
        for s in 0..n {
            for p in 0..hw {
                for (ci, v) in col.iter_mut().enumerate() {
                    *v = z[(s * k + ci) * hw + p];
                }
                let max = col.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
                let denom = col.iter().fold(T::zero(), |a, &b| a + (b - max).exp());
                let t = target[s * hw + p] as usize;
                total += class_weights[t] * (denom.ln() + max - col[t]);
                for ci in 0..k {
                    probs[(s * k + ci) * hw + p] = (col[ci] - max).exp() / denom;
                }
            }
        }
    }
    let loss = total / pixels;

    let target = target.to_vec();
    let weights = class_weights.to_vec();
    Ok(Tensor::from_op(Vec::new(), vec![loss], vec![logits.clone()], move |g| {
        let mut gz = probs.clone();
        for s in 0..n {
            for p in 0..hw {
                let t = target[s * hw + p] as usize;
                let f = g[0] * weights[t] / pixels;
                gz[(s * k + t) * hw + p] -= T::one();
                for ci in 0..k {
                    gz[(s * k + ci) * hw + p] *= f;
                }
            }
        }
        vec![Some(gz)]
    }))
}

#[cfg(test)]
mod tests {
    use super::super::testutil::{check_gradients, random_vec, rng};
    use super::*;
    use rand::Rng;

    #[test]
    fn uniform_logits_give_ln_seven() {
        let mut r = rng(1);
        let logits = Tensor::<f64>::full(&[1, 7, 3, 3], 0.25).unwrap();
        let target: Vec<u8> = (0..9).map(|_| r.random_range(0..7)).collect();
        let loss = weighted_cross_entropy(&logits, &target, &[1.0; 7]).unwrap();
        assert!((loss.item().unwrap() - 7f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn confident_correct_logits_drive_loss_to_zero() {
        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 60.0] {
            let mut z = vec![0.0; 7];
            z[3] = margin;
            let logits = Tensor::<f64>::new(&[1, 7, 1, 1], z).unwrap();
            let loss = weighted_cross_entropy(&logits, &[3], &[1.0; 7]).unwrap().item().unwrap();
            assert!(loss < prev);
            prev = loss;
        }
        assert!(prev < 1e-20);
    }

    #[test]
    fn matches_per_pixel_oracle() {
        let mut r = rng(2);
        let z = random_vec(&mut r, 7 * 16).iter().map(|v| 3.0 * v).collect::<Vec<_>>();
        let target: Vec<u8> = (0..16).map(|_| r.random_range(0..7)).collect();
        let weights: Vec<f64> = (0..7).map(|i| 0.5 + i as f64 * 0.3).collect();
        let loss = weighted_cross_entropy(&Tensor::new(&[1, 7, 4, 4], z.clone()).unwrap(), &target, &weights)
            .unwrap()
            .item()
            .unwrap();
        let mut want = 0.0;
        for p in 0..16 {
            let den: f64 = (0..7).map(|c| z[c * 16 + p].exp()).sum();
            let t = target[p] as usize;
            want += weights[t] * -(z[t * 16 + p].exp() / den).ln();
        }
        want /= 16.0;
        assert!((loss - want).abs() < 1e-5);
    }

    #[test]
    fn rejects_out_of_range_target() {
        let logits = Tensor::<f32>::zeros(&[1, 7, 1, 2]).unwrap();
        let err = weighted_cross_entropy(&logits, &[0, 7], &[1.0; 7]).unwrap_err();
        assert!(matches!(err, Error::LabelOutOfRange { value: 7, .. }));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut r = rng(3);
        let logits = Tensor::parameter(&[2, 7, 2, 3], random_vec(&mut r, 84)).unwrap();
        let target: Vec<u8> = (0..12).map(|_| r.random_range(0..7)).collect();
        let weights: Vec<f64> = (0..7).map(|i| 1.0 + i as f64 * 0.5).collect();
        check_gradients(&[logits], |i| weighted_cross_entropy(&i[0], &target, &weights).unwrap(), 1e-3, 1e-2);
    }
}
