//! Shared Gaussian task-themes and their coupling to diagonal-Gaussian
//! embedding posteriors.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::dirichlet::DirichletParams;
use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Relative size of the ridge added to estimated covariances.
pub const COVARIANCE_FLOOR: f64 = 1e-6;
/// Number of ×10 escalations of the ridge before giving up.
pub const FLOOR_ESCALATIONS: usize = 3;

/// One Gaussian component `N(μ, Σ)` with its Cholesky factor cached.
#[derive(Debug, Clone)]
pub struct TaskTheme {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    factor: Cholesky<f64, Dyn>,
    log_det: f64,
    precision_diag: DVector<f64>,
}

/// Cached quantities are functions of mean and covariance, so equality
/// compares only those.
impl PartialEq for TaskTheme {
    fn eq(&self, other: &Self) -> bool {
        self.mean == other.mean && self.covariance == other.covariance
    }
}

impl TaskTheme {
    /// Factorizes `covariance` exactly as given (after symmetrizing).
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(Error::Usage("theme dimension must be positive".into()));
        }
        if covariance.shape() != (d, d) {
            return Err(Error::Usage(format!(
                "covariance shape {:?} does not match mean length {d}",
                covariance.shape()
            )));
        }
        if mean.iter().chain(covariance.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Degeneracy("non-finite theme parameters".into()));
        }
        let covariance = symmetrize(covariance);
        let factor = Cholesky::new(covariance.clone()).ok_or_else(|| {
            Error::Degeneracy("covariance is not positive definite".into())
        })?;
        let l = factor.l_dirty();
        let mut log_det = 0.0;
        for i in 0..d {
            let pivot = l[(i, i)];
            if !(pivot > 0.0 && pivot.is_finite()) {
                return Err(Error::Degeneracy(format!("non-positive pivot {pivot}")));
            }
            log_det += pivot.ln();
        }
        log_det *= 2.0;
        let inverse = factor.inverse();
        let precision_diag = inverse.diagonal();
        Ok(Self {
            mean,
            covariance,
            factor,
            log_det,
            precision_diag,
        })
    }

    /// Adds the ridge `εI`, `ε = 1e-6·tr(Σ)/D`, before factorizing, escalating
    /// `ε` tenfold up to three times if the factorization still fails.
    pub fn floored(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let d = mean.len().max(1) as f64;
        let scale = (covariance.trace() / d).max(1e-6);
        let mut eps = COVARIANCE_FLOOR * scale;
        let mut last = None;
        for _ in 0..=FLOOR_ESCALATIONS {
            let ridge = DMatrix::identity(covariance.nrows(), covariance.ncols()) * eps;
            match Self::new(mean.clone(), &covariance + ridge) {
                Ok(theme) => return Ok(theme),
                Err(e @ Error::Usage(_)) => return Err(e),
                Err(e) => last = Some(e),
            }
            eps *= 10.0;
        }
        Err(Error::Degeneracy(format!(
            "covariance factorization failed after {FLOOR_ESCALATIONS} floor escalations ({})",
            last.map(|e| e.to_string()).unwrap_or_default()
        )))
    }

    /// Exact factorization, falling back to the escalating floor.
    pub fn new_or_floored(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        match Self::new(mean.clone(), covariance.clone()) {
            Ok(t) => Ok(t),
            Err(Error::Degeneracy(_)) => Self::floored(mean, covariance),
            Err(e) => Err(e),
        }
    }

    pub fn standard(d: usize) -> Self {
        Self::new(DVector::zeros(d), DMatrix::identity(d, d)).expect("identity is SPD")
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    /// Lower-triangular `L` with `LLᵀ = Σ`.
    pub fn factor(&self) -> DMatrix<f64> {
        self.factor.l()
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// Diagonal of `Σ⁻¹`.
    pub fn precision_diag(&self) -> &DVector<f64> {
        &self.precision_diag
    }

    /// `Σ⁻¹ v` via two triangular solves.
    pub fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        self.factor.solve(v)
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        if len == self.dim() {
            Ok(())
        } else {
            Err(Error::Usage(format!(
                "vector of length {len} against theme of dimension {}",
                self.dim()
            )))
        }
    }

    /// Squared Mahalanobis distance `(x−μ)ᵀΣ⁻¹(x−μ)`.
    pub(crate) fn mahalanobis_sq(&self, x: &DVector<f64>) -> f64 {
        let diff = x - &self.mean;
        let mut z = diff;
        self.factor.l_dirty().solve_lower_triangular_mut(&mut z);
        // l_dirty's upper triangle holds garbage, but the lower solve only reads
        // the lower triangle.
        z.norm_squared()
    }
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    let t = m.transpose();
    (m + t) * 0.5
}

/// The global model: K themes plus the Dirichlet prior over their mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct ThemeSet {
    themes: Vec<TaskTheme>,
    alpha: DirichletParams,
}

impl ThemeSet {
    pub fn new(themes: Vec<TaskTheme>, alpha: DirichletParams) -> Result<Self> {
        if themes.is_empty() {
            return Err(Error::Usage("a theme set needs at least one theme".into()));
        }
        if alpha.len() != themes.len() {
            return Err(Error::Usage(format!(
                "alpha has {} components for {} themes",
                alpha.len(),
                themes.len()
            )));
        }
        let d = themes[0].dim();
        if themes.iter().any(|t| t.dim() != d) {
            return Err(Error::Usage("themes must share one dimension".into()));
        }
        Ok(Self { themes, alpha })
    }

    pub fn k(&self) -> usize {
        self.themes.len()
    }

    pub fn dim(&self) -> usize {
        self.themes[0].dim()
    }

    pub fn themes(&self) -> &[TaskTheme] {
        &self.themes
    }

    pub fn theme(&self, k: usize) -> &TaskTheme {
        &self.themes[k]
    }

    pub fn alpha(&self) -> &DirichletParams {
        &self.alpha
    }

    pub fn into_parts(self) -> (Vec<TaskTheme>, DirichletParams) {
        (self.themes, self.alpha)
    }
}

/// `q(u) = N(m, diag(s²))` for one data point.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingPosterior {
    m: DVector<f64>,
    s: DVector<f64>,
}

impl EmbeddingPosterior {
    pub fn new(m: DVector<f64>, s: DVector<f64>) -> Result<Self> {
        if m.len() != s.len() {
            return Err(Error::Usage(format!(
                "mean length {} vs std length {}",
                m.len(),
                s.len()
            )));
        }
        if let Some(bad) = s.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::Domain(format!("standard deviation must be positive, got {bad}")));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("embedding mean must be finite".into()));
        }
        Ok(Self { m, s })
    }

    pub fn dim(&self) -> usize {
        self.m.len()
    }

    pub fn m(&self) -> &DVector<f64> {
        &self.m
    }

    pub fn s(&self) -> &DVector<f64> {
        &self.s
    }
}

/// `ln N(x; μ, Σ)`.
pub fn gaussian_log_density(x: &DVector<f64>, theme: &TaskTheme) -> Result<f64> {
    theme.check_dim(x.len())?;
    Ok(-0.5 * (theme.dim() as f64 * LN_2PI + theme.log_det + theme.mahalanobis_sq(x)))
}

/// `E_{q(u)}[ln N(u; μₖ, Σₖ)] = −½ tr(Σₖ⁻¹ diag(s²)) + ln N(m; μₖ, Σₖ)`.
pub fn expected_gaussian_loglik(post: &EmbeddingPosterior, theme: &TaskTheme) -> Result<f64> {
    let density = gaussian_log_density(&post.m, theme)?;
    let trace: f64 = theme
        .precision_diag
        .iter()
        .zip(post.s.iter())
        .map(|(p, s)| p * s * s)
        .sum();
    Ok(density - 0.5 * trace)
}

/// N×K matrix of expected log-likelihoods of every posterior under every theme.
pub fn expected_loglik_matrix(posts: &[EmbeddingPosterior], model: &ThemeSet) -> Result<DMatrix<f64>> {
    let mut out = DMatrix::zeros(posts.len(), model.k());
    for (n, post) in posts.iter().enumerate() {
        for (k, theme) in model.themes().iter().enumerate() {
            out[(n, k)] = expected_gaussian_loglik(post, theme)?;
        }
    }
    Ok(out)
}
