use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Per-dimension affine map to zero mean and unit variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    /// Fit on row-major data. Scales are population standard deviations so
    /// the transformed data has variance exactly one.
    pub fn fit(data: &[f64], dim: usize) -> Result<Self> {
        if dim == 0 || data.is_empty() {
            return Err(Error::EmptyData);
        }
        assert_eq!(data.len() % dim, 0, "data length must be a multiple of dim");
        let n = data.len() / dim;
        if n < 2 {
            return Err(Error::EmptyData);
        }
        let mut mean = vec![0.0; dim];
        for row in data.chunks(dim) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= n as f64;
        }
        let mut var = vec![0.0; dim];
        for row in data.chunks(dim) {
            for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
                let d = x - m;
                *v += d * d;
            }
        }
        let mut scale = vec![0.0; dim];
        for (j, v) in var.iter().enumerate() {
            let sd = (v / n as f64).sqrt();
            if !(sd > 0.0) || !sd.is_finite() {
                return Err(Error::ConstantDimension { dim: j });
            }
            scale[j] = sd;
        }
        Ok(Self { mean, scale })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((x, m), s)| (x - m) / s)
            .collect()
    }

    pub fn invert_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((z, m), s)| z * s + m)
            .collect()
    }

    /// Standardize row-major data in place.
    pub fn apply_rows(&self, data: &mut [f64]) {
        let d = self.dim();
        for row in data.chunks_mut(d) {
            for j in 0..d {
                row[j] = (row[j] - self.mean[j]) / self.scale[j];
            }
        }
    }

    pub fn invert_rows(&self, data: &mut [f64]) {
        let d = self.dim();
        for row in data.chunks_mut(d) {
            for j in 0..d {
                row[j] = row[j] * self.scale[j] + self.mean[j];
            }
        }
    }

    /// Jacobian correction picked up when a density defined on standardized
    /// values is mapped back to raw space.
    pub fn log_det_correction(&self) -> f64 {
        -self.scale.iter().map(|s| s.ln()).sum::<f64>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn two_point_fit() {
        let s = Standardizer::fit(&[0.0, 2.0], 1).unwrap();
        assert_abs_diff_eq!(s.mean[0], 1.0);
        assert_abs_diff_eq!(s.scale[0], 1.0);
    }

    #[test]
    fn standardized_data_has_unit_moments() {
        let data: Vec<f64> = (0..100).map(|i| (i as f64) * 0.3 - 7.0).collect();
        let s = Standardizer::fit(&data, 1).unwrap();
        let mut z = data.clone();
        s.apply_rows(&mut z);
        let mean: f64 = z.iter().sum::<f64>() / z.len() as f64;
        let var: f64 = z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / z.len() as f64;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-10);
    }

    #[test]
    fn scaling_data_scales_fit_linearly() {
        let data = vec![1.0, 4.0, -2.0, 0.5, 3.0, 8.0];
        let scaled: Vec<f64> = data.iter().map(|v| v * 10.0).collect();
        let a = Standardizer::fit(&data, 1).unwrap();
        let b = Standardizer::fit(&scaled, 1).unwrap();
        assert_abs_diff_eq!(b.scale[0], 10.0 * a.scale[0], epsilon = 1e-12);
        assert_abs_diff_eq!(b.mean[0], 10.0 * a.mean[0], epsilon = 1e-12);
    }

    #[test]
    fn constant_dimension_named() {
        let data = vec![1.0, 5.0, 1.0, 6.0, 1.0, 7.0];
        match Standardizer::fit(&data, 2) {
            Err(Error::ConstantDimension { dim }) => assert_eq!(dim, 0),
            other => panic!("expected constant-dimension error, got {other:?}"),
        }
    }

    #[test]
    fn round_trip_identity() {
        let s = Standardizer {
            mean: vec![3.0, -1.0],
            scale: vec![2.0, 0.5],
        };
        let row = vec![0.7, 0.9];
        let back = s.invert_row(&s.apply_row(&row));
        for (a, b) in row.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
