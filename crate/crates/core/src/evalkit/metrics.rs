//! FID, R-precision, multimodal distance, diversity and multimodality.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor2;
use crate::error::{Error, Result};
use crate::rng;

pub const R_PRECISION_POOL: usize = 32;
pub const DIVERSITY_TIMES: usize = 300;
pub const MM_CAPTIONS: usize = 100;
pub const MM_TIMES: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    /// Row-major `F x F`.
    pub cov: Vec<f64>,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Sample mean and unbiased covariance; needs at least `F + 1` rows.
    pub fn fit(features: &Tensor2) -> Result<Self> {
        let (n, f) = features.shape();
        if n < f + 1 {
            return Err(Error::InvalidArgument(format!(
                "covariance of {f}-dim features needs at least {} samples, got {n}",
                f + 1
            )));
        }
        let mut mean = vec![0.0; f];
        for r in 0..n {
            for (m, x) in mean.iter_mut().zip(features.row(r)) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = vec![0.0; f * f];
        for r in 0..n {
            let row = features.row(r);
            for i in 0..f {
                let di = row[i] - mean[i];
                for j in i..f {
                    cov[i * f + j] += di * (row[j] - mean[j]);
                }
            }
        }
        for i in 0..f {
            for j in i..f {
                let v = cov[i * f + j] / (n - 1) as f64;
                cov[i * f + j] = v;
                cov[j * f + i] = v;
            }
        }
        Ok(Self { mean, cov })
    }

    fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim(), self.dim(), &self.cov)
    }

    fn check(&self) -> Result<()> {
        if self.cov.len() != self.dim() * self.dim() {
            return Err(Error::Shape {
                op: "gaussian_stats",
                detail: format!("{} covariance entries for dim {}", self.cov.len(), self.dim()),
            });
        }
        if self.mean.iter().chain(&self.cov).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("feature statistics".into()));
        }
        Ok(())
    }
}

/// Symmetric PSD square root with negative eigenvalues clamped to zero.
fn sqrt_psd(m: DMatrix<f64>) -> DMatrix<f64> {
    let sym = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `||mu_r - mu_g||^2 + Tr(S_r + S_g - 2 (S_r S_g)^(1/2))`, using
/// `Tr((S_r S_g)^(1/2)) = Tr((S_r^(1/2) S_g S_r^(1/2))^(1/2))`.
pub fn fid(real: &GaussianStats, gen: &GaussianStats) -> Result<f64> {
    real.check()?;
    gen.check()?;
    if real.dim() != gen.dim() {
        return Err(Error::Shape {
            op: "fid",
            detail: format!("dims {} and {}", real.dim(), gen.dim()),
        });
    }
    let mean_term: f64 = real.mean.iter().zip(&gen.mean).map(|(a, b)| (a - b) * (a - b)).sum();
    let sr = real.matrix();
    let sg = gen.matrix();
    let root_r = sqrt_psd(sr.clone());
    let inner = &root_r * &sg * &root_r;
    let cross = sqrt_psd(inner).trace();
    let value = mean_term + sr.trace() + sg.trace() - 2.0 * cross;
    if !value.is_finite() {
        return Err(Error::NonFinite("fid".into()));
    }
    if value < -1e-6 {
        log::warn!("fid evaluated to {value:e}; clamping to 0");
    }
    Ok(value.max(0.0))
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Top-1/2/3 retrieval rates. Text row `i` is the true caption of motion row
/// `i`; `caption_ids` groups rows sharing a caption. Each pool holds the true
/// text plus `pool - 1` texts of distinct other captions.
pub fn r_precision(
    motion: &Tensor2,
    text: &Tensor2,
    caption_ids: &[usize],
    pool: usize,
    seed: u64,
) -> Result<[f64; 3]> {
    let n = motion.rows();
    if text.rows() != n || caption_ids.len() != n || n == 0 {
        return Err(Error::Shape {
            op: "r_precision",
            detail: format!("{n} motions, {} texts, {} caption ids", text.rows(), caption_ids.len()),
        });
    }
    let mut first_row: Vec<(usize, usize)> = Vec::new();
    for (i, &c) in caption_ids.iter().enumerate() {
        if !first_row.iter().any(|&(k, _)| k == c) {
            first_row.push((c, i));
        }
    }
    if first_row.len() < pool {
        return Err(Error::InvalidArgument(format!(
            "R-precision needs {pool} distinct captions, found {}",
            first_row.len()
        )));
    }
    let mut r = rng::stream(seed, &[0x52]);
    let mut hits = [0.0; 3];
    for i in 0..n {
        let mut others: Vec<usize> = first_row
            .iter()
            .filter(|&&(c, _)| c != caption_ids[i])
            .map(|&(_, row)| row)
            .collect();
        rng::shuffle(&mut r, &mut others);
        let d_true = dist(motion.row(i), text.row(i));
        let closer = others[..pool - 1]
            .iter()
            .filter(|&&j| dist(motion.row(i), text.row(j)) < d_true)
            .count();
        for (k, h) in hits.iter_mut().enumerate() {
            if closer <= k {
                *h += 1.0;
            }
        }
    }
    Ok(hits.map(|h| h / n as f64))
}

/// Mean paired Euclidean distance; with `literal` the alternative
/// `sqrt(sum ||v_i - t_i||) / N` instead.
pub fn mm_dist(motion: &Tensor2, text: &Tensor2, literal: bool) -> Result<f64> {
    let n = motion.rows();
    if text.shape() != motion.shape() || n == 0 {
        return Err(Error::Shape {
            op: "mm_dist",
            detail: format!("{:?} vs {:?}", motion.shape(), text.shape()),
        });
    }
    let sum: f64 = (0..n).map(|i| dist(motion.row(i), text.row(i))).sum();
    Ok(if literal { sum.sqrt() / n as f64 } else { sum / n as f64 })
}

/// Mean distance between two disjoint seeded subsets of size `p`.
pub fn diversity(features: &Tensor2, p: usize, seed: u64) -> Result<f64> {
    let n = features.rows();
    if p == 0 || n < 2 * p {
        return Err(Error::InvalidArgument(format!(
            "diversity with p = {p} needs at least {} features, got {n}",
            2 * p
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    rng::shuffle(&mut rng::stream(seed, &[0xD1]), &mut idx);
    let total: f64 = (0..p).map(|i| dist(features.row(idx[i]), features.row(idx[p + i]))).sum();
    Ok(total / p as f64)
}

/// Default diversity subset size for a set of `n` features.
pub fn diversity_times(n: usize) -> usize {
    DIVERSITY_TIMES.min(n / 2)
}

/// Mean distance between two disjoint size-`d` subsets of generations for
/// each of `m` seeded captions.
pub fn multimodality(per_caption: &[Tensor2], m: usize, d: usize, seed: u64) -> Result<f64> {
    if m == 0 || d == 0 || m > per_caption.len() {
        return Err(Error::InvalidArgument(format!(
            "multimodality with m = {m}, d = {d} over {} captions",
            per_caption.len()
        )));
    }
    let mut r = rng::stream(seed, &[0x33]);
    let mut caps: Vec<usize> = (0..per_caption.len()).collect();
    rng::shuffle(&mut r, &mut caps);
    let mut total = 0.0;
    for &j in &caps[..m] {
        let set = &per_caption[j];
        if set.rows() < 2 * d {
            return Err(Error::InvalidArgument(format!(
                "caption {j} has {} generations, multimodality needs {}",
                set.rows(),
                2 * d
            )));
        }
        let mut idx: Vec<usize> = (0..set.rows()).collect();
        rng::shuffle(&mut r, &mut idx);
        total += (0..d).map(|i| dist(set.row(idx[i]), set.row(idx[d + i]))).sum::<f64>();
    }
    Ok(total / (m * d) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(mean: Vec<f64>, cov: Vec<f64>) -> GaussianStats {
        GaussianStats { mean, cov }
    }

    #[test]
    fn fid_identical_and_one_dimensional() {
        let s = stats(vec![0.3, -1.0], vec![2.0, 0.4, 0.4, 1.0]);
        assert!(fid(&s, &s).unwrap() < 1e-6);
        let a = stats(vec![0.0], vec![1.0]);
        let b = stats(vec![1.0], vec![1.0]);
        assert_eq!(fid(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn fid_diagonal_closed_form() {
        let a = stats(vec![0.0, 1.0, 2.0], vec![1.0, 0.0, 0.0, 0.0, 4.0, 0.0, 0.0, 0.0, 0.25]);
        let b = stats(vec![1.0, 1.0, 0.0], vec![9.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.36]);
        let mut want = 0.0;
        for i in 0..3 {
            let (va, vb) = (a.cov[i * 4], b.cov[i * 4]);
            want += (a.mean[i] - b.mean[i]).powi(2) + va + vb - 2.0 * (va * vb).sqrt();
        }
        assert!((fid(&a, &b).unwrap() - want).abs() < 1e-8);
        assert!((fid(&a, &b).unwrap() - fid(&b, &a).unwrap()).abs() < 1e-8);
    }

    #[test]
    fn fid_rejects_bad_stats() {
        let a = stats(vec![0.0], vec![f64::NAN]);
        assert!(fid(&a, &a).is_err());
        let b = stats(vec![0.0, 0.0], vec![1.0, 0.0, 0.0, 1.0]);
        let c = stats(vec![0.0], vec![1.0]);
        assert!(fid(&b, &c).is_err());
    }

    #[test]
    fn covariance_fit_needs_enough_samples() {
        let x = Tensor2::from_fn(3, 3, |r, c| (r + c) as f64);
        assert!(GaussianStats::fit(&x).is_err());
        let y = Tensor2::from_rows(&[vec![1.0], vec![3.0]]).unwrap();
        let s = GaussianStats::fit(&y).unwrap();
        assert_eq!(s.mean, vec![2.0]);
        assert_eq!(s.cov, vec![2.0]);
    }

    #[test]
    fn perfect_retrieval() {
        let n = 40;
        let f = Tensor2::from_fn(n, 8, |r, c| ((r * 8 + c) as f64 * 1.3).sin());
        let ids: Vec<usize> = (0..n).collect();
        assert_eq!(r_precision(&f, &f, &ids, 32, 1).unwrap(), [1.0, 1.0, 1.0]);
        assert!(r_precision(&f, &f, &ids[..n].iter().map(|i| i % 10).collect::<Vec<_>>(), 32, 1).is_err());
    }

    #[test]
    fn mm_dist_cases() {
        let a = Tensor2::from_fn(3, 2, |r, c| (r + c) as f64);
        assert_eq!(mm_dist(&a, &a, false).unwrap(), 0.0);
        let p = Tensor2::row_vector(vec![0.0, 0.0]);
        let q = Tensor2::row_vector(vec![0.0, 2.0]);
        assert_eq!(mm_dist(&p, &q, false).unwrap(), 2.0);
        let b = a.map(|x| x * 3.0 + 1.0);
        let k = mm_dist(&a.map(|x| x * 2.5), &b.map(|x| x * 2.5), false).unwrap();
        assert!((k - 2.5 * mm_dist(&a, &b, false).unwrap()).abs() < 1e-12);
        assert_eq!(mm_dist(&p, &q, true).unwrap(), 2f64.sqrt());
    }

    #[test]
    fn diversity_cases() {
        let same = Tensor2::full(10, 3, 0.7);
        assert_eq!(diversity(&same, 5, 1).unwrap(), 0.0);
        let two = Tensor2::from_rows(&[vec![0.0, 0.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(diversity(&two, 1, 9).unwrap(), 5.0);
        assert!(diversity(&two, 2, 9).is_err());
        assert_eq!(diversity_times(64), 32);
        assert_eq!(diversity_times(10_000), 300);
    }

    #[test]
    fn multimodality_cases() {
        let flat = vec![Tensor2::full(4, 2, 1.0), Tensor2::full(4, 2, -1.0)];
        assert_eq!(multimodality(&flat, 2, 2, 3).unwrap(), 0.0);
        let one = vec![Tensor2::from_rows(&[vec![0.0], vec![3.0]]).unwrap()];
        assert_eq!(multimodality(&one, 1, 1, 3).unwrap(), 3.0);
        assert!(multimodality(&one, 1, 2, 3).is_err());
    }

    #[test]
    fn translation_invariance() {
        let f = Tensor2::from_fn(20, 4, |r, c| ((r * 4 + c) as f64 * 0.77).sin());
        let g = f.map(|x| x + 5.0);
        assert!((diversity(&f, 10, 4).unwrap() - diversity(&g, 10, 4).unwrap()).abs() < 1e-12);
    }
}
