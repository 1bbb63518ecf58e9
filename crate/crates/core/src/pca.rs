//! Three-component PCA of dense feature maps, rendered as RGB.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MIN_ITERS: usize = 100;
const MAX_ITERS: usize = 100_000;
const TOL: f64 = 1e-12;
/// Eigenvalues below this fraction of the total variance count as absent.
const DEGENERATE_RATIO: f64 = 1e-10;

/// Principal axes of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePca {
    /// Unit-norm directions, largest variance first.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    /// Fraction of total variance per component.
    pub explained: Vec<f64>,
    pub degenerate: Vec<bool>,
    /// Raw (un-normalized) projections, `[positions][component]`.
    pub projections: Vec<[f64; 3]>,
}

#[derive(Clone, Debug)]
pub struct PcaRgb<T> {
    /// `[b, h, w, 3]` with every value in `[0, 1]`.
    pub rgb: Tensor<T>,
    pub samples: Vec<SamplePca>,
}

impl<T> PcaRgb<T> {
    /// True when any sample had fewer than three usable directions.
    pub fn warning(&self) -> bool {
        self.samples.iter().any(|s| s.degenerate.iter().any(|&d| d))
    }
}

fn matvec(c: &[f64], v: &[f64], d: usize) -> Vec<f64> {
    (0..d).map(|i| (0..d).map(|j| c[i * d + j] * v[j]).sum()).collect()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
        v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
    }
}

/// Top-3 eigenpairs of a symmetric `d×d` matrix by power iteration with
/// deflation.
fn top3(cov: &[f64], d: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut c = cov.to_vec();
    let mut vecs: Vec<Vec<f64>> = Vec::new();
    let mut vals = Vec::new();
    for k in 0..3 {
        let mut v: Vec<f64> = (0..d).map(|j| 1.0 + 0.1 * (((j + 3 * k) * 37 % 11) as f64)).collect();
        orthogonalize(&mut v, &vecs);
        if normalize(&mut v) == 0.0 {
            v = vec![0.0; d];
            v[k % d] = 1.0;
        }
        for it in 0..MAX_ITERS {
            let mut next = matvec(&c, &v, d);
            orthogonalize(&mut next, &vecs);
            if normalize(&mut next) == 0.0 {
                break;
            }
            let delta = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            v = next;
            if it + 1 >= MIN_ITERS && delta < TOL {
                break;
            }
        }
        let cv = matvec(&c, &v, d);
        let lambda: f64 = v.iter().zip(&cv).map(|(a, b)| a * b).sum::<f64>().max(0.0);
        // force the largest-magnitude loading positive
        let lead = v
            .iter()
            .copied()
            .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        for i in 0..d {
            for j in 0..d {
                c[i * d + j] -= lambda * v[i] * v[j];
            }
        }
        vecs.push(v);
        vals.push(lambda);
    }
    (vecs, vals)
}

/// Per-sample PCA over spatial positions of `features [b, h, w, d]`; each
/// component is min-max scaled to `[0, 1]` per sample. Degenerate components
/// render as 0.5 gray.
pub fn pca_rgb<T: Scalar>(features: &Tensor<T>) -> Result<PcaRgb<T>> {
    let (b, h, w, d) = match *features.shape() {
        [b, h, w, d] => (b, h, w, d),
        ref s => return Err(Error::shape("pca_rgb", format!("expected (b,h,w,d), got {s:?}"))),
    };
    if d < 3 || h * w < 3 {
        return Err(Error::shape(
            "pca_rgb",
            format!("need d >= 3 and h*w >= 3, got d={d}, h*w={}", h * w),
        ));
    }
    let n = h * w;
    let mut rgb = Vec::with_capacity(b * n * 3);
    let mut samples = Vec::with_capacity(b);
    for bi in 0..b {
        let x: Vec<f64> = features.data()[bi * n * d..][..n * d]
            .iter()
            .map(|v| v.as_f64())
            .collect();
        let mut mean = vec![0.0; d];
        for row in x.chunks_exact(d) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let centered: Vec<f64> = x
            .chunks_exact(d)
            .flat_map(|r| r.iter().zip(&mean).map(|(v, m)| v - m))
            .collect();
        let mut cov = vec![0.0; d * d];
        for row in centered.chunks_exact(d) {
            for i in 0..d {
                for j in 0..d {
                    cov[i * d + j] += row[i] * row[j];
                }
            }
        }
        cov.iter_mut().for_each(|c| *c /= n as f64);
        let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();

        let (components, eigenvalues) = top3(&cov, d);
        let degenerate: Vec<bool> = eigenvalues
            .iter()
            .map(|&l| trace <= 0.0 || l <= DEGENERATE_RATIO * trace)
            .collect();
        let explained = eigenvalues
            .iter()
            .map(|&l| if trace > 0.0 { l / trace } else { 0.0 })
            .collect();
        let projections: Vec<[f64; 3]> = centered
            .chunks_exact(d)
            .map(|row| {
                let mut p = [0.0; 3];
                for (k, comp) in components.iter().enumerate() {
                    p[k] = row.iter().zip(comp).map(|(a, b)| a * b).sum();
                }
                p
            })
            .collect();
        let mut scaled = vec![[0.5f64; 3]; n];
        for k in 0..3 {
            if degenerate[k] {
                continue;
            }
            let lo = projections.iter().map(|p| p[k]).fold(f64::INFINITY, f64::min);
            let hi = projections.iter().map(|p| p[k]).fold(f64::NEG_INFINITY, f64::max);
            if hi > lo {
                for (s, p) in scaled.iter_mut().zip(&projections) {
                    s[k] = ((p[k] - lo) / (hi - lo)).clamp(0.0, 1.0);
                }
            }
        }
        rgb.extend(scaled.iter().flatten().map(|&v| T::from_f64_lossy(v)));
        samples.push(SamplePca {
            components,
            eigenvalues,
            explained,
            degenerate,
            projections,
        });
    }
    Ok(PcaRgb {
        rgb: Tensor::new(vec![b, h, w, 3], rgb)?,
        samples,
    })
}
