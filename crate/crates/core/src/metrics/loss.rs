//! Dice + cross-entropy training loss.

use crate::scalar::Scalar;

/// Smoothing constant added to numerator and denominator of every soft Dice
/// term.
pub const DICE_SMOOTH: f64 = 1e-5;
pub const DICE_WEIGHT: f64 = 1.0;
pub const CE_WEIGHT: f64 = 1.0;

/// Row-wise softmax over the trailing `classes` axis.
pub(crate) fn softmax_rows<T: Scalar>(logits: &[T], classes: usize) -> Vec<T> {
    let mut out = vec![T::zero(); logits.len()];
    for (z, p) in logits.chunks_exact(classes).zip(out.chunks_exact_mut(classes)) {
        let m = z.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for (pi, &zi) in p.iter_mut().zip(z) {
            *pi = (zi - m).exp();
            s += *pi;
        }
        for pi in p.iter_mut() {
            *pi /= s;
        }
    }
    out
}

/// Per-(sample, class) intersection, prediction mass and target mass.
fn dice_sums<T: Scalar>(probs: &[T], target: &[usize], batch: usize, classes: usize) -> Vec<[T; 3]> {
    let pixels = target.len() / batch;
    let mut sums = vec![[T::zero(); 3]; batch * classes];
    for b in 0..batch {
        for px in 0..pixels {
            let i = b * pixels + px;
            let row = &probs[i * classes..][..classes];
            for (c, &p) in row.iter().enumerate() {
                let s = &mut sums[b * classes + c];
                if target[i] == c {
                    s[0] += p;
                    s[2] += T::one();
                }
                s[1] += p;
            }
        }
    }
    sums
}

/// Returns `(loss, probs)`. Soft Dice is averaged over samples and classes,
/// background included; cross-entropy is averaged over pixels.
pub(crate) fn dice_ce_forward<T: Scalar>(logits: &[T], target: &[usize], batch: usize, classes: usize) -> (T, Vec<T>) {
    let probs = softmax_rows(logits, classes);
    let n = target.len();
    let mut ce = T::zero();
    for (i, &y) in target.iter().enumerate() {
        let z = &logits[i * classes..][..classes];
        let m = z.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + z.iter().map(|&zi| (zi - m).exp()).sum::<T>().ln();
        ce += lse - z[y];
    }
    ce /= T::from_usize_lossy(n);

    let eps = T::from_f64_lossy(DICE_SMOOTH);
    let two = T::from_f64_lossy(2.0);
    let dice_mean = dice_sums(&probs, target, batch, classes)
        .iter()
        .map(|&[i, s, g]| (two * i + eps) / (s + g + eps))
        .sum::<T>()
        / T::from_usize_lossy(batch * classes);
    let loss = T::from_f64_lossy(DICE_WEIGHT) * (T::one() - dice_mean) + T::from_f64_lossy(CE_WEIGHT) * ce;
    (loss, probs)
}

pub(crate) fn dice_ce_backward<T: Scalar>(
    probs: &[T],
    target: &[usize],
    batch: usize,
    classes: usize,
    upstream: T,
) -> Vec<T> {
    let n = target.len();
    let pixels = n / batch;
    let eps = T::from_f64_lossy(DICE_SMOOTH);
    let two = T::from_f64_lossy(2.0);
    let sums = dice_sums(probs, target, batch, classes);
    let dice_scale = -upstream * T::from_f64_lossy(DICE_WEIGHT) / T::from_usize_lossy(batch * classes);
    let ce_scale = upstream * T::from_f64_lossy(CE_WEIGHT) / T::from_usize_lossy(n);

    let mut dz = vec![T::zero(); probs.len()];
    let mut gp = vec![T::zero(); classes];
    for i in 0..n {
        let b = i / pixels;
        let p = &probs[i * classes..][..classes];
        for c in 0..classes {
            let [inter, s, g] = sums[b * classes + c];
            let denom = s + g + eps;
            let onehot = if target[i] == c { T::one() } else { T::zero() };
            gp[c] = dice_scale * (two * onehot * denom - (two * inter + eps)) / (denom * denom);
        }
        let dot: T = p.iter().zip(&gp).map(|(&pi, &gi)| pi * gi).sum();
        let row = &mut dz[i * classes..][..classes];
        for c in 0..classes {
            let onehot = if target[i] == c { T::one() } else { T::zero() };
            row[c] = p[c] * (gp[c] - dot) + ce_scale * (p[c] - onehot);
        }
    }
    dz
}
