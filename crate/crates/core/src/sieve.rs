//! Univariate cosine sieve `[1, cos(jπ x̃_d)]` over the heterogeneity
//! covariates, each min-max scaled to `[0, 1]`.

use std::f64::consts::PI;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::SurvivalDataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegreeRule {
    /// `ceil(n^{1/3})`, capped.
    CubeRoot { cap: usize },
    Fixed(usize),
}

impl Default for DegreeRule {
    fn default() -> Self {
        Self::CubeRoot { cap: 15 }
    }
}

impl DegreeRule {
    pub fn degree(&self, n: usize) -> usize {
        match *self {
            Self::CubeRoot { cap } => {
                let mut j = (n as f64).cbrt().round() as usize;
                // guard against rounding in the cube root
                while j * j * j < n {
                    j += 1;
                }
                while j > 0 && (j - 1) * (j - 1) * (j - 1) >= n {
                    j -= 1;
                }
                j.min(cap)
            }
            Self::Fixed(j) => j,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SieveBasis {
    /// Learned scaling bounds per heterogeneity covariate.
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub degree: usize,
    /// Covariates with a nonzero range; the others contribute no columns.
    pub active: Vec<bool>,
}

impl SieveBasis {
    /// Basis from explicit rows of the heterogeneity covariates.
    pub fn from_rows(x: ArrayView2<f64>, degree: usize) -> Result<Self> {
        if x.ncols() == 0 {
            return Err(Error::InvalidInput("heterogeneity index is empty".into()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite heterogeneity covariate".into()));
        }
        let d = x.ncols();
        let mut lower = vec![f64::INFINITY; d];
        let mut upper = vec![f64::NEG_INFINITY; d];
        for row in x.rows() {
            for j in 0..d {
                lower[j] = lower[j].min(row[j]);
                upper[j] = upper[j].max(row[j]);
            }
        }
        let active: Vec<bool> = (0..d).map(|j| upper[j] > lower[j]).collect();
        for (j, a) in active.iter().enumerate() {
            if !a {
                log::warn!("heterogeneity covariate {j} is constant; its cosine columns are omitted");
            }
        }
        Ok(Self {
            lower,
            upper,
            degree,
            active,
        })
    }

    pub fn dim(&self) -> usize {
        1 + self.degree * self.active.iter().filter(|a| **a).count()
    }

    pub fn input_dim(&self) -> usize {
        self.lower.len()
    }

    /// Scaled position in `[0, 1]`, clamped to the training range.
    pub fn scaled(&self, j: usize, v: f64) -> f64 {
        ((v.clamp(self.lower[j], self.upper[j]) - self.lower[j]) / (self.upper[j] - self.lower[j])).clamp(0.0, 1.0)
    }

    pub fn evaluate(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "basis expects {} heterogeneity covariates, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite heterogeneity covariate".into()));
        }
        let mut out = Array2::zeros((x.nrows(), self.dim()));
        for (i, row) in x.rows().into_iter().enumerate() {
            out[[i, 0]] = 1.0;
            let mut c = 1;
            for j in 0..self.input_dim() {
                if !self.active[j] {
                    continue;
                }
                let s = self.scaled(j, row[j]);
                for k in 1..=self.degree {
                    out[[i, c]] = (k as f64 * PI * s).cos();
                    c += 1;
                }
            }
        }
        Ok(out)
    }
}

/// Basis on the dataset's heterogeneity covariates with the degree set by
/// `rule` from the sample size.
pub fn build_basis(dataset: &SurvivalDataset, rule: DegreeRule) -> Result<SieveBasis> {
    SieveBasis::from_rows(dataset.heterogeneity_covariates().view(), rule.degree(dataset.n()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn degree_rule() {
        assert_eq!(DegreeRule::default().degree(1000), 10);
        assert_eq!(DegreeRule::default().degree(800), 10);
        assert_eq!(DegreeRule::default().degree(1001), 11);
        assert_eq!(DegreeRule::default().degree(8), 2);
        assert_eq!(DegreeRule::default().degree(1_000_000), 15);
    }

    #[test]
    fn cosine_values() {
        let b = SieveBasis::from_rows(array![[0.0], [1.0], [0.5]].view(), 3).unwrap();
        let m = b.evaluate(array![[0.0], [0.5], [-3.0], [9.0]].view()).unwrap();
        assert_eq!(m.ncols(), 4);
        for k in 0..4 {
            assert_eq!(m[[0, k]], 1.0);
            assert_eq!(m[[2, k]], 1.0);
        }
        assert_abs_diff_eq!(m[[1, 1]], 0.0, epsilon = 1e-15);
        assert_eq!(m.row(3), b.evaluate(array![[1.0]].view()).unwrap().row(0));
    }

    #[test]
    fn constant_covariate_dropped() {
        let b = SieveBasis::from_rows(array![[0.0, 2.0], [1.0, 2.0]].view(), 4).unwrap();
        assert_eq!(b.dim(), 5);
        assert!(SieveBasis::from_rows(Array2::<f64>::zeros((3, 0)).view(), 2).is_err());
        assert!(b.evaluate(array![[f64::NAN, 2.0]].view()).is_err());
    }

    #[test]
    fn near_orthogonal_on_uniform_grid() {
        let m = 400;
        let x = Array2::from_shape_fn((m, 1), |(i, _)| (i as f64 + 0.5) / m as f64);
        let b = SieveBasis::from_rows(x.view(), 5).unwrap();
        // scaling maps the midpoints onto [0,1] exactly, so evaluate on the
        // scaled midpoints directly
        let e = b.evaluate(x.view()).unwrap();
        for j in 1..6 {
            for k in (j + 1)..6 {
                let ip: f64 = (0..m).map(|i| e[[i, j]] * e[[i, k]]).sum::<f64>() / m as f64;
                assert!(ip.abs() < 5.0 / m as f64, "{j},{k}: {ip}");
            }
        }
    }
}
