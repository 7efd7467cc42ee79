//! Segmentation cross-entropy, entropy maps and the adversarial losses,
//! each with the gradient pieces the trainers chain together.

use crate::data::{DenseLabelMap, EntropyMap, ProbMap, IGNORE};
use crate::error::{Error, Result};
use crate::nn::layers::{sigmoid, Tensor};
use crate::nn::Discriminator;
use crate::scalar::Scalar;

/// Lower clamp on probabilities inside every logarithm.
pub const LOG_EPS: f64 = 1e-12;

#[inline]
fn safe_ln<T: Scalar>(p: T) -> T {
    p.max(T::of(LOG_EPS)).ln()
}

fn check_shape<T: Scalar>(p: &ProbMap<T>, height: usize, width: usize) -> Result<()> {
    if (p.height(), p.width()) != (height, width) {
        return Err(Error::Shape(format!(
            "prediction is {}x{}, labels are {height}x{width}",
            p.height(),
            p.width()
        )));
    }
    Ok(())
}

/// Mean over non-IGNORE pixels of `-ln P[label]`; zero when nothing is counted.
pub fn seg_loss<T: Scalar>(p: &ProbMap<T>, y: &DenseLabelMap) -> Result<T> {
    check_shape(p, y.height(), y.width())?;
    y.validate(p.classes())?;
    Ok(cross_entropy(p, y.as_slice(), None, T::one()).0)
}

/// Weighted cross-entropy and its gradient with respect to the logits.
///
/// The value is `sum_i w_i * -ln P_i[y_i] / N` with `N` the number of
/// non-IGNORE pixels (weights do not change `N`). The returned gradient is
/// scaled by `scale` and laid out `C x H x W`.
pub fn cross_entropy<T: Scalar>(
    p: &ProbMap<T>,
    labels: &[u8],
    weights: Option<&[T]>,
    scale: T,
) -> (T, Tensor<T>) {
    let (h, w, c) = (p.height(), p.width(), p.classes());
    let plane = h * w;
    debug_assert_eq!(labels.len(), plane);
    let mut grad = Tensor::zeros(c, h, w);
    let counted = labels.iter().filter(|&&l| l != IGNORE).count();
    if counted == 0 {
        return (T::zero(), grad);
    }
    let inv_n = T::one() / T::of(counted as f64);
    let eps = T::of(LOG_EPS);
    let mut total = T::zero();
    for (pix, (probs, &label)) in p.as_slice().chunks_exact(c).zip(labels).enumerate() {
        if label == IGNORE {
            continue;
        }
        let wgt = weights.map_or(T::one(), |ws| ws[pix]);
        let py = probs[usize::from(label)];
        total += wgt * -safe_ln(py);
        if py < eps || wgt == T::zero() {
            continue;
        }
        let g = scale * wgt * inv_n;
        for k in 0..c {
            let onehot = if k == usize::from(label) { T::one() } else { T::zero() };
            grad.data[k * plane + pix] = g * (probs[k] - onehot);
        }
    }
    (total * inv_n, grad)
}

/// `E = -P ln P` elementwise, with `0 ln 0 = 0`.
pub fn entropy_map<T: Scalar>(p: &ProbMap<T>) -> EntropyMap<T> {
    let values = p.as_slice().iter().map(|&v| T::zero() - v * safe_ln(v)).collect();
    EntropyMap::from_trusted(p.height(), p.width(), p.classes(), values)
}

/// Gradient of a scalar through [`entropy_map`]: `d/dp = -(ln p + 1)`.
pub fn entropy_backward<T: Scalar>(p: &ProbMap<T>, d_entropy: &[T]) -> Vec<T> {
    let eps = T::of(LOG_EPS);
    p.as_slice()
        .iter()
        .zip(d_entropy)
        .map(|(&v, &g)| if v >= eps { -g * (v.ln() + T::one()) } else { -g * eps.ln() })
        .collect()
}

/// Which discriminator output means "source".
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DomainConvention {
    #[default]
    SourceIsOne,
    TargetIsOne,
}

impl DomainConvention {
    pub fn source_is_one(self) -> bool {
        matches!(self, Self::SourceIsOne)
    }
}

/// Mean binary cross-entropy of sigmoid logits against a constant label,
/// with its gradient (scaled by `scale`).
///
/// `-ln sigma(z) = softplus(-z)`, `-ln(1 - sigma(z)) = softplus(z)`.
pub fn bce_with_logits<T: Scalar>(logits: &Tensor<T>, label_one: bool, scale: T) -> (T, Tensor<T>) {
    let n = T::of(logits.data.len() as f64);
    let mut total = T::zero();
    let mut grad = Tensor::zeros(logits.channels, logits.height, logits.width);
    for (g, &z) in grad.data.iter_mut().zip(&logits.data) {
        let signed = if label_one { -z } else { z };
        total += softplus(signed);
        let s = sigmoid(z);
        *g = scale * (if label_one { s - T::one() } else { s }) / n;
    }
    (total / n, grad)
}

#[inline]
fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdvLosses<T> {
    /// `mean(-ln D(E_s)) + mean(-ln(1 - D(E_t)))`
    pub loss_d: T,
    /// `mean(-ln D(E_t))`, the non-saturating generator term.
    pub loss_g_fool: T,
}

/// Adversarial losses from discriminator probability maps.
///
/// Minimizing `loss_d` over D while minimizing `loss_g_fool` over G has the
/// same fixed points as the min-max of `ln D(E_s) + ln(1 - D(E_t))`; the
/// generator side uses `-ln D(E_t)` instead of `ln(1 - D(E_t))` because it
/// keeps gradients alive while D is confident.
pub fn adv_losses<T: Scalar>(d_source: &[T], d_target: &[T]) -> Result<AdvLosses<T>> {
    if d_source.is_empty() || d_target.is_empty() {
        return Err(Error::Shape("discriminator maps must be non-empty".into()));
    }
    let one = T::one();
    let mean = |xs: &[T], f: &dyn Fn(T) -> T| {
        xs.iter().fold(T::zero(), |a, &x| a + f(x)) / T::of(xs.len() as f64)
    };
    let src = mean(d_source, &|d| -safe_ln(d));
    let tgt = mean(d_target, &|d| -safe_ln(one - d));
    let fool = mean(d_target, &|d| -safe_ln(d));
    let out = AdvLosses { loss_d: src + tgt, loss_g_fool: fool };
    if !out.loss_d.is_finite() || !out.loss_g_fool.is_finite() {
        return Err(Error::NonFinite { what: "adversarial loss".into(), iteration: 0 });
    }
    Ok(out)
}

/// Runs `disc` on both entropy maps and evaluates [`adv_losses`].
pub fn adv_losses_for<T: Scalar>(
    e_source: &EntropyMap<T>,
    e_target: &EntropyMap<T>,
    disc: &Discriminator<T>,
) -> Result<AdvLosses<T>> {
    let ds = disc.forward(&Discriminator::entropy_tensor(e_source)).probs();
    let dt = disc.forward(&Discriminator::entropy_tensor(e_target)).probs();
    adv_losses(&ds, &dt)
}

#[cfg(test)]
#[allow(clippy::approx_constant)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pm(h: usize, w: usize, c: usize, v: Vec<f64>) -> ProbMap<f64> {
        ProbMap::new(h, w, c, v).unwrap()
    }

    fn random_probmap(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> ProbMap<f64> {
        let mut v = Vec::new();
        for _ in 0..h * w {
            let raw: Vec<f64> = (0..c).map(|_| rng.random::<f64>()).collect();
            let s: f64 = raw.iter().sum();
            v.extend(raw.iter().map(|x| x / s));
        }
        pm(h, w, c, v)
    }

    #[test]
    fn seg_loss_uniform_is_ln2() {
        let p = pm(1, 1, 2, vec![0.5, 0.5]);
        let y = DenseLabelMap::new(1, 1, vec![0]).unwrap();
        assert!((seg_loss(&p, &y).unwrap() - 0.693147).abs() < 1e-6);
    }

    #[test]
    fn seg_loss_one_hot_is_zero() {
        let p = pm(1, 2, 3, vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let y = DenseLabelMap::new(1, 2, vec![1, 2]).unwrap();
        assert_eq!(seg_loss(&p, &y).unwrap(), 0.0);
    }

    #[test]
    fn seg_loss_matches_scalar_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_probmap(&mut rng, 2, 2, 3);
        let y = DenseLabelMap::new(2, 2, vec![2, IGNORE, 0, 1]).unwrap();
        let mut sum = 0.0;
        let mut n = 0;
        for yy in 0..2 {
            for xx in 0..2 {
                let l = y.get(xx, yy);
                if l != IGNORE {
                    sum -= p.pixel(xx, yy)[l as usize].ln();
                    n += 1;
                }
            }
        }
        assert!((seg_loss(&p, &y).unwrap() - sum / n as f64).abs() < 1e-12);
    }

    #[test]
    fn seg_loss_rejects_shape_mismatch() {
        let p = ProbMap::<f64>::uniform(2, 2, 3);
        let y = DenseLabelMap::filled(2, 3, 0);
        assert!(matches!(seg_loss(&p, &y), Err(Error::Shape(_))));
    }

    #[test]
    fn all_ignore_contributes_nothing() {
        let p = ProbMap::<f64>::uniform(2, 2, 3);
        let (v, g) = cross_entropy(&p, &[IGNORE; 4], None, 1.0);
        assert_eq!(v, 0.0);
        assert!(g.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn entropy_closed_forms() {
        let u = ProbMap::<f64>::uniform(1, 1, 4);
        let e = entropy_map(&u);
        assert!((e.pixel_entropy()[0] - 4f64.ln()).abs() < 1e-15);
        let one_hot = pm(1, 1, 4, vec![0.0, 0.0, 1.0, 0.0]);
        assert!(entropy_map(&one_hot).as_slice().iter().all(|&v| v == 0.0 && v.is_sign_positive()));
        let p = pm(1, 1, 2, vec![0.7, 0.3]);
        let e = entropy_map(&p);
        assert!((e.as_slice()[0] - 0.249672).abs() < 1e-6);
        assert!((e.as_slice()[1] - 0.361192).abs() < 1e-6);
        assert!((e.pixel_entropy()[0] - 0.610864).abs() < 1e-6);
    }

    #[test]
    fn entropy_backward_matches_finite_difference() {
        let p = pm(1, 1, 3, vec![0.2, 0.5, 0.3]);
        let g = entropy_backward(&p, &[1.0, 1.0, 1.0]);
        for (k, &gk) in g.iter().enumerate() {
            let f = |x: f64| -x * x.ln();
            let v = p.as_slice()[k];
            let num = (f(v + 1e-6) - f(v - 1e-6)) / 2e-6;
            assert!((gk - num).abs() < 1e-8);
        }
    }

    #[test]
    fn chance_discriminator_losses() {
        let half = vec![0.5f64; 16];
        let l = adv_losses(&half, &half).unwrap();
        assert!((l.loss_d - 1.386294).abs() < 1e-6);
        assert!((l.loss_g_fool - 0.693147).abs() < 1e-6);
    }

    #[test]
    fn perfect_discriminator_has_near_zero_loss() {
        let l = adv_losses(&[1.0f64; 4], &[1e-12f64; 4]).unwrap();
        assert!(l.loss_d.abs() < 1e-9, "{l:?}");
    }

    #[test]
    fn adv_losses_match_scalar_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ds: Vec<f64> = (0..9).map(|_| rng.random_range(0.01..0.99)).collect();
        let dt: Vec<f64> = (0..9).map(|_| rng.random_range(0.01..0.99)).collect();
        let l = adv_losses(&ds, &dt).unwrap();
        let mut d = 0.0;
        let mut f = 0.0;
        for i in 0..9 {
            d += -ds[i].ln() / 9.0 - (1.0 - dt[i]).ln() / 9.0;
            f += -dt[i].ln() / 9.0;
        }
        assert!((l.loss_d - d).abs() < 1e-12);
        assert!((l.loss_g_fool - f).abs() < 1e-12);
    }

    #[test]
    fn logit_route_agrees_with_probability_route() {
        let z = Tensor { channels: 1, height: 1, width: 4, data: vec![-3.0f64, -0.2, 0.7, 5.0] };
        let probs: Vec<f64> = z.data.iter().map(|&v| sigmoid(v)).collect();
        let (as_source, _) = bce_with_logits(&z, true, 1.0);
        let (as_target, _) = bce_with_logits(&z, false, 1.0);
        let l = adv_losses(&probs, &probs).unwrap();
        assert!((as_source - l.loss_g_fool).abs() < 1e-12);
        assert!((as_source + as_target - l.loss_d).abs() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn entropy_bounds_hold(seed in 0u64..10_000, c in 2usize..7) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let p = random_probmap(&mut rng, 3, 3, c);
                let e = entropy_map(&p);
                let cap = (-1f64).exp() + 1e-9;
                prop_assert!(e.as_slice().iter().all(|&v| (0.0..=cap).contains(&v)));
                let lnc = (c as f64).ln() + 1e-6;
                prop_assert!(e.pixel_entropy().iter().all(|&v| (0.0..=lnc).contains(&v)));
            }

            #[test]
            fn seg_loss_non_negative(seed in 0u64..10_000) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let p = random_probmap(&mut rng, 2, 3, 4);
                let labels: Vec<u8> = (0..6).map(|_| rng.random_range(0..4)).collect();
                let y = DenseLabelMap::new(2, 3, labels).unwrap();
                prop_assert!(seg_loss(&p, &y).unwrap() >= 0.0);
            }
        }
    }
}
