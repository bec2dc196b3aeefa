//! Per-dimension feature standardization.

use serde::{Deserialize, Serialize};

use super::codec::MotionFeatures;
use crate::diffcore::Tensor2;
use crate::error::{Error, Result};

/// Lower bound on the per-dimension standard deviation.
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Mean and population std over every frame of every motion.
    pub fn fit(train: &[MotionFeatures]) -> Result<Self> {
        let first = train
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot fit normalizer on an empty list".into()))?;
        let d = first.dim();
        let mut mean = vec![0.0; d];
        let mut count = 0usize;
        for f in train {
            if f.dim() != d {
                return Err(Error::Shape {
                    op: "fit_normalizer",
                    detail: format!("dims {} and {} differ", d, f.dim()),
                });
            }
            for t in 0..f.frames() {
                for (m, v) in mean.iter_mut().zip(f.data.row(t)) {
                    *m += v;
                }
            }
            count += f.frames();
        }
        if count == 0 {
            return Err(Error::InvalidArgument("normalizer input has no frames".into()));
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        let mut var = vec![0.0; d];
        for f in train {
            for t in 0..f.frames() {
                for ((s, v), m) in var.iter_mut().zip(f.data.row(t)).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
        }
        let std = var
            .into_iter()
            .map(|s| (s / count as f64).sqrt().max(STD_FLOOR))
            .collect();
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, x: &Tensor2) -> Result<()> {
        if x.cols() != self.dim() {
            return Err(Error::Shape {
                op: "normalizer",
                detail: format!("features have {} dims, stats have {}", x.cols(), self.dim()),
            });
        }
        Ok(())
    }

    pub fn apply(&self, f: &MotionFeatures) -> Result<MotionFeatures> {
        self.check(&f.data)?;
        let d = self.dim();
        Ok(MotionFeatures::new(Tensor2::from_fn(f.frames(), d, |r, c| {
            (f.data.get(r, c) - self.mean[c]) / self.std[c]
        })))
    }

    pub fn invert(&self, f: &MotionFeatures) -> Result<MotionFeatures> {
        self.check(&f.data)?;
        let d = self.dim();
        Ok(MotionFeatures::new(Tensor2::from_fn(f.frames(), d, |r, c| {
            f.data.get(r, c) * self.std[c] + self.mean[c]
        })))
    }
}
