//! Linear depth parametrization: a dense depth map is a per-frame mean plane
//! plus a weighted sum of `K` factor planes, `D = mu + sum_k beta_k sigma_k`.
//!
//! Planes live on a coarse basis grid. Frame pixels map onto that grid with
//! pixel-center alignment, `(u + 0.5) * W_b / W_f - 0.5`, and are sampled
//! bilinearly so that sampled depth stays linear in the code.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Pixel;

/// Basis planes for one frame. Planes are row-major `basis_height x basis_width`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthBasis {
    basis_width: usize,
    basis_height: usize,
    frame_width: usize,
    frame_height: usize,
    k: usize,
    mu: Vec<f64>,
    /// `k` consecutive planes.
    sigma: Vec<f64>,
}

/// Coefficients selecting one depth map from a [`DepthBasis`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthCode {
    pub beta: Vec<f64>,
}

impl DepthCode {
    pub fn zeros(k: usize) -> Self {
        DepthCode { beta: vec![0.0; k] }
    }

    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    pub fn norm_squared(&self) -> f64 {
        self.beta.iter().map(|b| b * b).sum()
    }
}

impl From<Vec<f64>> for DepthCode {
    fn from(beta: Vec<f64>) -> Self {
        DepthCode { beta }
    }
}

/// Dense row-major depth map.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

/// Frame pixel of node `(row, col)` of a grid `grid_width` nodes wide laid
/// over a frame `frame_width` pixels wide, with pixel centres aligned.
pub fn grid_pixel(frame_width: usize, grid_width: usize, row: usize, col: usize) -> Pixel {
    let s = frame_width as f64 / grid_width as f64;
    Pixel::new((col as f64 + 0.5) * s - 0.5, (row as f64 + 0.5) * s - 0.5)
}

impl DepthMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::DimensionMismatch {
                what: "depth map values",
                expected: width * height,
                actual: values.len(),
            });
        }
        Ok(DepthMap { width, height, values })
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }
}

/// Basis planes sampled at a set of keypoints: per keypoint a mean depth and
/// a length-`K` factor row, so that `depth_m = mean_m + factors_m . beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledBasis {
    k: usize,
    mean: Vec<f64>,
    factors: Vec<f64>,
}

impl SampledBasis {
    pub fn new(k: usize, mean: Vec<f64>, factors: Vec<f64>) -> Result<Self> {
        if factors.len() != mean.len() * k {
            return Err(Error::DimensionMismatch {
                what: "sampled factor rows",
                expected: mean.len() * k,
                actual: factors.len(),
            });
        }
        Ok(SampledBasis { k, mean, factors })
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn mean(&self, m: usize) -> f64 {
        self.mean[m]
    }

    pub fn factors(&self, m: usize) -> &[f64] {
        &self.factors[m * self.k..(m + 1) * self.k]
    }

    /// `b_mu + b_sigma . beta` at keypoint `m`.
    pub fn depth(&self, m: usize, beta: &[f64]) -> f64 {
        self.mean[m] + dot(self.factors(m), beta)
    }

    /// Rows `indices` of this sample, in that order.
    pub fn select(&self, indices: &[usize]) -> SampledBasis {
        let mut mean = Vec::with_capacity(indices.len());
        let mut factors = Vec::with_capacity(indices.len() * self.k);
        for &m in indices {
            mean.push(self.mean[m]);
            factors.extend_from_slice(self.factors(m));
        }
        SampledBasis { k: self.k, mean, factors }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Four-tap bilinear stencil into a basis plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stencil {
    pub indices: [usize; 4],
    pub weights: [f64; 4],
}

impl Stencil {
    pub fn apply(&self, plane: &[f64]) -> f64 {
        self.indices
            .iter()
            .zip(&self.weights)
            .map(|(&i, w)| w * plane[i])
            .sum()
    }
}

impl DepthBasis {
    pub fn new(
        basis_width: usize,
        basis_height: usize,
        frame_width: usize,
        frame_height: usize,
        mu: Vec<f64>,
        sigma: Vec<f64>,
    ) -> Result<Self> {
        let area = basis_width * basis_height;
        if area == 0 || frame_width == 0 || frame_height == 0 {
            return Err(Error::Domain("basis and frame resolutions must be nonzero".into()));
        }
        if mu.len() != area {
            return Err(Error::DimensionMismatch {
                what: "mean plane",
                expected: area,
                actual: mu.len(),
            });
        }
        if sigma.is_empty() || sigma.len() % area != 0 {
            return Err(Error::Domain(format!(
                "factor planes hold {} values, not a positive multiple of {area}",
                sigma.len()
            )));
        }
        let sx = frame_width as f64 / basis_width as f64;
        let sy = frame_height as f64 / basis_height as f64;
        if (sx - sy).abs() > 1e-9 * sx.max(sy) {
            return Err(Error::Domain(format!(
                "basis {basis_width}x{basis_height} does not scale uniformly to frame {frame_width}x{frame_height}"
            )));
        }
        if let Some(bad) = mu.iter().find(|&&m| !(m > 0.0) || !m.is_finite()) {
            return Err(Error::Domain(format!("mean depth must be positive and finite, found {bad}")));
        }
        if sigma.iter().any(|s| !s.is_finite()) {
            return Err(Error::Domain("factor planes contain non-finite values".into()));
        }
        Ok(DepthBasis {
            basis_width,
            basis_height,
            frame_width,
            frame_height,
            k: sigma.len() / area,
            mu,
            sigma,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn basis_width(&self) -> usize {
        self.basis_width
    }

    pub fn basis_height(&self) -> usize {
        self.basis_height
    }

    pub fn frame_width(&self) -> usize {
        self.frame_width
    }

    pub fn frame_height(&self) -> usize {
        self.frame_height
    }

    pub fn area(&self) -> usize {
        self.basis_width * self.basis_height
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn plane(&self, k: usize) -> &[f64] {
        let a = self.area();
        &self.sigma[k * a..(k + 1) * a]
    }

    /// Frame-pixel coordinates of basis node `(row, col)`.
    pub fn node_pixel(&self, row: usize, col: usize) -> Pixel {
        grid_pixel(self.frame_width, self.basis_width, row, col)
    }

    /// Bilinear stencil for a frame pixel. Coordinates beyond the outermost
    /// nodes clamp to the border.
    pub fn stencil(&self, p: Pixel) -> Result<Stencil> {
        if !(p.u >= 0.0 && p.v >= 0.0 && p.u < self.frame_width as f64 && p.v < self.frame_height as f64) {
            return Err(Error::OutOfBounds {
                u: p.u,
                v: p.v,
                width: self.frame_width,
                height: self.frame_height,
            });
        }
        let s = self.basis_width as f64 / self.frame_width as f64;
        let (w, h) = (self.basis_width, self.basis_height);
        let x = ((p.u + 0.5) * s - 0.5).clamp(0.0, (w - 1) as f64);
        let y = ((p.v + 0.5) * s - 0.5).clamp(0.0, (h - 1) as f64);
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        Ok(Stencil {
            indices: [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1],
            weights: [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
        })
    }

    /// Dense depth `mu + sum_k beta_k sigma_k` on the basis grid.
    pub fn evaluate_dense(&self, code: &DepthCode) -> Result<DepthMap> {
        self.check_code(code)?;
        let mut values = self.mu.clone();
        for (k, &b) in code.beta.iter().enumerate() {
            if b == 0.0 {
                continue;
            }
            for (v, s) in values.iter_mut().zip(self.plane(k)) {
                *v += b * s;
            }
        }
        Ok(DepthMap {
            width: self.basis_width,
            height: self.basis_height,
            values,
        })
    }

    pub fn sample_at(&self, pixels: &[Pixel]) -> Result<SampledBasis> {
        let mut mean = Vec::with_capacity(pixels.len());
        let mut factors = Vec::with_capacity(pixels.len() * self.k);
        for &p in pixels {
            let st = self.stencil(p)?;
            mean.push(st.apply(&self.mu));
            factors.extend((0..self.k).map(|k| st.apply(self.plane(k))));
        }
        Ok(SampledBasis { k: self.k, mean, factors })
    }

    fn check_code(&self, code: &DepthCode) -> Result<()> {
        if code.len() != self.k {
            return Err(Error::DimensionMismatch {
                what: "depth code",
                expected: self.k,
                actual: code.len(),
            });
        }
        Ok(())
    }

    fn check_target(&self, target: &DepthMap) -> Result<()> {
        if target.width != self.basis_width || target.height != self.basis_height {
            return Err(Error::DimensionMismatch {
                what: "target depth resolution",
                expected: self.area(),
                actual: target.width * target.height,
            });
        }
        Ok(())
    }

    /// `B_sigma^T B_sigma` (K x K) and `B_sigma^T (target - mu)`.
    fn normal_equations(&self, target: &DepthMap) -> (DMatrix<f64>, DVector<f64>) {
        let k = self.k;
        let residual: Vec<f64> = target.values.iter().zip(&self.mu).map(|(t, m)| t - m).collect();
        let mut gram = DMatrix::zeros(k, k);
        let mut rhs = DVector::zeros(k);
        for a in 0..k {
            let pa = self.plane(a);
            rhs[a] = dot(pa, &residual);
            for b in a..k {
                let g = dot(pa, self.plane(b));
                gram[(a, b)] = g;
                gram[(b, a)] = g;
            }
        }
        (gram, rhs)
    }

    /// Closed-form ridge coefficients
    /// `(B_sigma^T B_sigma + lambda I)^-1 B_sigma^T (target - mu)`.
    pub fn ridge_fit(&self, target: &DepthMap, lambda: f64) -> Result<DepthCode> {
        self.check_target(target)?;
        if !(lambda > 0.0) {
            return Err(Error::Domain(format!("ridge lambda must be positive, got {lambda}")));
        }
        let (mut gram, rhs) = self.normal_equations(target);
        for i in 0..self.k {
            gram[(i, i)] += lambda;
        }
        let beta = gram
            .cholesky()
            .ok_or_else(|| Error::Degenerate("regularized gram matrix is not positive definite".into()))?
            .solve(&rhs);
        Ok(DepthCode {
            beta: beta.iter().copied().collect(),
        })
    }

    /// Ridge objective `||phi(beta) - target||^2 + lambda ||beta||^2`.
    pub fn ridge_objective(&self, target: &DepthMap, code: &DepthCode, lambda: f64) -> Result<f64> {
        self.check_target(target)?;
        let dense = self.evaluate_dense(code)?;
        let fit: f64 = dense.values.iter().zip(&target.values).map(|(d, t)| (d - t).powi(2)).sum();
        Ok(fit + lambda * code.norm_squared())
    }

    /// Sample variance (denominator `n - 1`) of each factor plane.
    pub fn row_variance(&self) -> Result<Vec<f64>> {
        let n = self.area();
        if n < 2 {
            return Err(Error::Domain("row variance needs at least two basis pixels".into()));
        }
        Ok((0..self.k)
            .map(|k| {
                let plane = self.plane(k);
                let mean = plane.iter().sum::<f64>() / n as f64;
                plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
            })
            .collect())
    }

    /// Training diagnostic built on [`DepthBasis::ridge_fit`].
    pub fn depth_training_loss(&self, target: &DepthMap, lambda: f64, opts: DepthLossOptions) -> Result<DepthLoss> {
        let code = self.ridge_fit(target, lambda)?;
        let fitted = self.evaluate_dense(&code)?;
        let n = self.area() as f64;
        let prior_sq: f64 = self.mu.iter().zip(&target.values).map(|(m, t)| (m - t).powi(2)).sum();
        let fit_sq: f64 = fitted.values.iter().zip(&target.values).map(|(d, t)| (d - t).powi(2)).sum();
        let variance: Vec<f64> = self.row_variance()?;
        let variance_l1: f64 = variance.iter().map(|v| (v - 1.0).abs()).sum();

        let (prior_term, fit_term, variance_term) = match opts.reduction {
            Reduction::Sum => (
                prior_sq,
                if opts.squared_fit_term { fit_sq } else { fit_sq.sqrt() },
                variance_l1,
            ),
            Reduction::Mean => (
                prior_sq / n,
                if opts.squared_fit_term { fit_sq / n } else { (fit_sq / n).sqrt() },
                variance_l1 / self.k as f64,
            ),
        };
        let code_term = lambda * code.norm_squared();
        Ok(DepthLoss {
            total: prior_term + fit_term + code_term + variance_term,
            prior_term,
            fit_term,
            code_term,
            variance_term,
            code,
        })
    }
}

/// How pixel sums are reduced in [`DepthBasis::depth_training_loss`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepthLossOptions {
    /// Square the fitted-depth residual norm instead of using the plain L2 norm.
    pub squared_fit_term: bool,
    pub reduction: Reduction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthLoss {
    pub total: f64,
    /// `||mu - D*||^2`
    pub prior_term: f64,
    /// `||mu + sigma beta* - D*||`
    pub fit_term: f64,
    /// `lambda ||beta*||^2`
    pub code_term: f64,
    /// `||RowVar(sigma) - 1||_1`
    pub variance_term: f64,
    pub code: DepthCode,
}
