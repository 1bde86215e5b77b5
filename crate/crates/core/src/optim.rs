//! Classic majorise-minimise steps.
//!
//! Each step minimises a tangent upper bound of a truncated Taylor expansion:
//!
//! | step                | order | majorisation term          |
//! |---------------------|-------|----------------------------|
//! | gradient descent    | 1     | `λ/2 ‖Δw‖²`                |
//! | mirror descent      | 1     | Bregman divergence `h_ψ`   |
//! | cubic Newton        | 2     | `λ/6 ‖Δw‖³`                |
//! | Gauss-Newton        | 1     | `½ Δwᵀ F_X Δw`             |

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::numerics::{ensure_finite, ensure_finite_vec, RngStream};

pub trait SmoothObjective {
    fn dim(&self) -> usize;
    fn value(&self, w: &DVector<f64>) -> f64;
    fn gradient(&self, w: &DVector<f64>) -> DVector<f64>;
    fn hessian(&self, _w: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }
}

/// `L(w) = ½ wᵀAw − bᵀw`.
#[derive(Clone, Debug)]
pub struct Quadratic {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl Quadratic {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        ensure_finite(&a, "quadratic form")?;
        ensure_finite_vec(&b, "linear term")?;
        if !a.is_square() || a.nrows() != b.len() {
            return Err(Error::DimensionMismatch {
                expected: a.nrows(),
                got: b.len(),
            });
        }
        Ok(Self {
            a: (&a + a.transpose()) * 0.5,
            b,
        })
    }
}

impl SmoothObjective for Quadratic {
    fn dim(&self) -> usize {
        self.b.len()
    }
    fn value(&self, w: &DVector<f64>) -> f64 {
        0.5 * w.dot(&(&self.a * w)) - self.b.dot(w)
    }
    fn gradient(&self, w: &DVector<f64>) -> DVector<f64> {
        &self.a * w - &self.b
    }
    fn hessian(&self, _w: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(self.a.clone())
    }
}

/// Square loss of a linear model, `L(w) = (1/2m)‖Xw − Y‖²` with inputs as rows of `X`.
#[derive(Clone, Debug)]
pub struct LinearRegression {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
}

impl LinearRegression {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        ensure_finite(&x, "inputs")?;
        ensure_finite_vec(&y, "targets")?;
        if x.nrows() != y.len() {
            return Err(Error::DimensionMismatch {
                expected: x.nrows(),
                got: y.len(),
            });
        }
        Ok(Self { x, y })
    }

    fn m(&self) -> f64 {
        self.x.nrows() as f64
    }

    pub fn jacobian(&self) -> PredictorJacobian {
        PredictorJacobian {
            outputs: DVector::zeros(self.x.nrows()),
            jacobian: self.x.clone(),
        }
    }
}

impl SmoothObjective for LinearRegression {
    fn dim(&self) -> usize {
        self.x.ncols()
    }
    fn value(&self, w: &DVector<f64>) -> f64 {
        (&self.x * w - &self.y).norm_squared() / (2.0 * self.m())
    }
    fn gradient(&self, w: &DVector<f64>) -> DVector<f64> {
        self.x.tr_mul(&(&self.x * w - &self.y)) / self.m()
    }
    fn hessian(&self, _w: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(self.x.tr_mul(&self.x) / self.m())
    }
}

type ValueFn = Box<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;
type GradFn = Box<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
type HessFn = Box<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;

/// Objective assembled from closures.
pub struct FnObjective {
    dim: usize,
    value: ValueFn,
    gradient: GradFn,
    hessian: Option<HessFn>,
}

impl FnObjective {
    pub fn new(
        dim: usize,
        value: impl Fn(&DVector<f64>) -> f64 + Send + Sync + 'static,
        gradient: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            dim,
            value: Box::new(value),
            gradient: Box::new(gradient),
            hessian: None,
        }
    }

    pub fn with_hessian(
        mut self,
        hessian: impl Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        self.hessian = Some(Box::new(hessian));
        self
    }
}

impl SmoothObjective for FnObjective {
    fn dim(&self) -> usize {
        self.dim
    }
    fn value(&self, w: &DVector<f64>) -> f64 {
        (self.value)(w)
    }
    fn gradient(&self, w: &DVector<f64>) -> DVector<f64> {
        (self.gradient)(w)
    }
    fn hessian(&self, w: &DVector<f64>) -> Option<DMatrix<f64>> {
        self.hessian.as_ref().map(|h| h(w))
    }
}

/// Largest relative disagreement between the gradient oracle and central
/// differences of the value oracle over `probes` random points.
pub fn gradient_check(obj: &dyn SmoothObjective, rng: &mut RngStream, probes: usize) -> f64 {
    let step = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let w = DVector::from_fn(obj.dim(), |_, _| rng.normal());
        let g = obj.gradient(&w);
        let mut fd = DVector::zeros(obj.dim());
        for i in 0..obj.dim() {
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp[i] += step;
            wm[i] -= step;
            fd[i] = (obj.value(&wp) - obj.value(&wm)) / (2.0 * step);
        }
        let denom = g.norm().max(fd.norm()).max(1e-12);
        worst = worst.max((g - fd).norm() / denom);
    }
    worst
}

fn checked_gradient(obj: &dyn SmoothObjective, w: &DVector<f64>) -> Result<DVector<f64>> {
    if w.len() != obj.dim() {
        return Err(Error::DimensionMismatch {
            expected: obj.dim(),
            got: w.len(),
        });
    }
    let g = obj.gradient(w);
    if g.iter().all(|v| v.is_finite()) {
        Ok(g)
    } else {
        Err(Error::Diverged("non-finite gradient".into()))
    }
}

/// `w − (1/λ)∇L(w)`.
pub fn gd_step(obj: &dyn SmoothObjective, w: &DVector<f64>, lambda: f64) -> Result<DVector<f64>> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidInput(format!("lambda must be positive, got {lambda}")));
    }
    let g = checked_gradient(obj, w)?;
    Ok(w - g / lambda)
}

pub trait MirrorMap {
    fn potential(&self, w: &DVector<f64>) -> Result<f64>;
    fn grad(&self, w: &DVector<f64>) -> Result<DVector<f64>>;
    fn grad_inverse(&self, theta: &DVector<f64>) -> Result<DVector<f64>>;

    /// `h_ψ(w, w+Δw) = ψ(w+Δw) − ψ(w) − ∇ψ(w)ᵀΔw`.
    fn bregman(&self, w: &DVector<f64>, dw: &DVector<f64>) -> Result<f64> {
        let moved = w + dw;
        Ok(self.potential(&moved)? - self.potential(w)? - self.grad(w)?.dot(dw))
    }
}

/// `ψ = ½‖w‖²`; the mirror step reduces to gradient descent with λ = 1.
#[derive(Clone, Copy, Debug, Default)]
pub struct EuclideanMap;

impl MirrorMap for EuclideanMap {
    fn potential(&self, w: &DVector<f64>) -> Result<f64> {
        Ok(0.5 * w.norm_squared())
    }
    fn grad(&self, w: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(w.clone())
    }
    fn grad_inverse(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(theta.clone())
    }
}

/// Negative entropy `ψ(w) = Σ wᵢ log wᵢ`.
///
/// On the positive orthant `(∇ψ)⁻¹(θ) = exp(θ − 1)`. With `simplex` set the
/// inverse also renormalises onto the probability simplex, which turns the
/// mirror step into the exponentiated-gradient update `w ∝ w·exp(−∇L)`.
#[derive(Clone, Copy, Debug)]
pub struct NegEntropyMap {
    pub simplex: bool,
}

impl MirrorMap for NegEntropyMap {
    fn potential(&self, w: &DVector<f64>) -> Result<f64> {
        check_positive(w)?;
        Ok(w.iter().map(|x| x * x.ln()).sum())
    }
    fn grad(&self, w: &DVector<f64>) -> Result<DVector<f64>> {
        check_positive(w)?;
        if self.simplex && (w.sum() - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!(
                "point sums to {} but must lie on the simplex",
                w.sum()
            )));
        }
        Ok(w.map(|x| x.ln() + 1.0))
    }
    fn grad_inverse(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        if !theta.iter().all(|t| t.is_finite()) {
            return Err(Error::Domain("non-finite mirror coordinates".into()));
        }
        if self.simplex {
            let shift = theta.max();
            let e = theta.map(|t| (t - shift).exp());
            Ok(&e / e.sum())
        } else {
            let w = theta.map(|t| (t - 1.0).exp());
            if w.iter().all(|x| x.is_finite() && *x > 0.0) {
                Ok(w)
            } else {
                Err(Error::Domain("inverse map left the positive orthant".into()))
            }
        }
    }
}

fn check_positive(w: &DVector<f64>) -> Result<()> {
    if w.iter().all(|x| *x > 0.0 && x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Domain("negative entropy needs strictly positive coordinates".into()))
    }
}

/// `(∇ψ)⁻¹(∇ψ(w) − ∇L(w))`.
pub fn mirror_step(
    obj: &dyn SmoothObjective,
    map: &dyn MirrorMap,
    w: &DVector<f64>,
) -> Result<DVector<f64>> {
    let g = checked_gradient(obj, w)?;
    let theta = map.grad(w)? - g;
    map.grad_inverse(&theta)
}

const CUBIC_MAX_BISECTIONS: usize = 200;

/// Global minimiser of `gᵀΔ + ½ΔᵀHΔ + (λ/6)‖Δ‖³`.
///
/// At the minimiser `(H + (λ/2)r·I)Δ = −g` with `r = ‖Δ‖` and
/// `H + (λ/2)r·I ⪰ 0`. After diagonalising `H`, `r` is found by bisection on
/// the secular function `‖(Λ + (λ/2)r)⁻¹ g̃‖ − r`, which decreases on
/// `r > max(0, −2λ_min/λ)`.
pub fn cubic_subproblem(g: &DVector<f64>, h: &DMatrix<f64>, lambda: f64) -> Result<DVector<f64>> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidInput(format!("lambda must be positive, got {lambda}")));
    }
    ensure_finite(h, "hessian")?;
    ensure_finite_vec(g, "gradient")?;
    let d = g.len();
    if h.nrows() != d || h.ncols() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: h.nrows(),
        });
    }
    let eig = SymmetricEigen::new((h + h.transpose()) * 0.5);
    let lam = &eig.eigenvalues;
    let q = &eig.eigenvectors;
    let gt = q.tr_mul(g);
    let sigma = 0.5 * lambda;
    let lmin = lam.min();
    let r_min = (-lmin / sigma).max(0.0);
    let scale = lam.amax().max(1.0);
    let gnorm = g.norm();

    let step_for = |r: f64, skip: &[bool]| -> DVector<f64> {
        DVector::from_fn(d, |i, _| {
            if skip[i] {
                0.0
            } else {
                -gt[i] / (lam[i] + sigma * r)
            }
        })
    };

    // Eigen-directions that become singular at r_min.
    let degenerate: Vec<bool> = lam
        .iter()
        .map(|&l| lmin < 0.0 && (l - lmin).abs() <= 1e-12 * scale)
        .collect();
    if lmin < 0.0 {
        let grad_on_min: f64 = gt
            .iter()
            .zip(&degenerate)
            .filter(|(_, &deg)| deg)
            .map(|(v, _)| v * v)
            .sum::<f64>()
            .sqrt();
        if grad_on_min <= 1e-12 * gnorm.max(f64::MIN_POSITIVE) {
            let partial = step_for(r_min, &degenerate);
            let pn = partial.norm();
            if pn <= r_min {
                // Hard case: fill the remaining radius along the bottom eigenvector.
                let k = degenerate.iter().position(|&b| b).expect("lmin is attained");
                let tau = (r_min * r_min - pn * pn).max(0.0).sqrt();
                let mut z = partial;
                z[k] += tau;
                return Ok(q * z);
            }
        }
    } else if gnorm == 0.0 {
        return Ok(DVector::zeros(d));
    }

    let no_skip = vec![false; d];
    let secular = |r: f64| step_for(r, &no_skip).norm() - r;
    let mut lo = r_min;
    let mut hi = (2.0 * r_min).max(1.0);
    let mut grow = 0;
    while secular(hi) > 0.0 {
        hi *= 2.0;
        grow += 1;
        if grow > CUBIC_MAX_BISECTIONS || !hi.is_finite() {
            return Err(Error::Subproblem(grow));
        }
    }
    for _ in 0..CUBIC_MAX_BISECTIONS {
        if hi - lo <= 4.0 * f64::EPSILON * hi {
            return Ok(q * step_for(hi, &no_skip));
        }
        let mid = 0.5 * (lo + hi);
        if secular(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if hi - lo <= 1e-12 * hi.max(1.0) {
        Ok(q * step_for(hi, &no_skip))
    } else {
        Err(Error::Subproblem(CUBIC_MAX_BISECTIONS))
    }
}

/// `w + argmin_Δ [gᵀΔ + ½ΔᵀHΔ + (λ/6)‖Δ‖³]`.
pub fn cubic_newton_step(
    obj: &dyn SmoothObjective,
    w: &DVector<f64>,
    lambda: f64,
) -> Result<DVector<f64>> {
    let g = checked_gradient(obj, w)?;
    let h = obj
        .hessian(w)
        .ok_or_else(|| Error::InvalidInput("cubic Newton needs a Hessian oracle".into()))?;
    Ok(w + cubic_subproblem(&g, &h, lambda)?)
}

/// Projected outputs `f_X` (length m) and their Jacobian `∇_w f_X` (m×d).
#[derive(Clone, Debug)]
pub struct PredictorJacobian {
    pub outputs: DVector<f64>,
    pub jacobian: DMatrix<f64>,
}

impl PredictorJacobian {
    pub fn new(outputs: DVector<f64>, jacobian: DMatrix<f64>) -> Result<Self> {
        ensure_finite_vec(&outputs, "outputs")?;
        ensure_finite(&jacobian, "jacobian")?;
        if jacobian.nrows() != outputs.len() {
            return Err(Error::DimensionMismatch {
                expected: outputs.len(),
                got: jacobian.nrows(),
            });
        }
        Ok(Self { outputs, jacobian })
    }

    /// `F_X = (1/m) ∇f_Xᵀ ∇f_X`.
    pub fn squared_jacobian(&self) -> DMatrix<f64> {
        self.jacobian.tr_mul(&self.jacobian) / self.outputs.len() as f64
    }
}

/// Gauss-Newton perturbation `−(F_X + reg·I)⁻¹ ∇_w L₂`.
///
/// `reg = None` uses `1e-10·tr(F_X)/d`.
pub fn gauss_newton_step(
    pj: &PredictorJacobian,
    labels: &DVector<f64>,
    reg: Option<f64>,
) -> Result<DVector<f64>> {
    let m = pj.outputs.len();
    let d = pj.jacobian.ncols();
    if labels.len() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            got: labels.len(),
        });
    }
    let residual = &pj.outputs - labels;
    if residual.iter().all(|r| *r == 0.0) {
        return Ok(DVector::zeros(d));
    }
    let f = pj.squared_jacobian();
    let reg = match reg {
        Some(r) if r < 0.0 => {
            return Err(Error::InvalidInput(format!("regulariser must be >= 0, got {r}")))
        }
        Some(r) => r,
        None => 1e-10 * f.trace() / d as f64,
    };
    let grad = pj.jacobian.tr_mul(&residual) / m as f64;
    let mut system = f;
    for i in 0..d {
        system[(i, i)] += reg;
    }
    let chol = system.cholesky().ok_or(Error::SingularCurvature)?;
    let step = -chol.solve(&grad);
    if step.iter().all(|v| v.is_finite()) {
        Ok(step)
    } else {
        Err(Error::SingularCurvature)
    }
}

pub enum Majorisation<'a> {
    /// `λ/2 ‖Δw‖²` on the first-order expansion.
    Euclidean(f64),
    /// `λ/6 ‖Δw‖³` on the second-order expansion.
    Cubic(f64),
    /// Bregman divergence of the given potential on the first-order expansion.
    Bregman(&'a dyn MirrorMap),
    /// `(d/2)‖Δw‖²` for square-loss linear regression on the radius-√d sphere.
    LinearRegression(usize),
}

/// `(L(w+Δw) − truncated Taylor model, majorisation term)`.
pub fn majorisation_gap(
    obj: &dyn SmoothObjective,
    w: &DVector<f64>,
    dw: &DVector<f64>,
    kind: &Majorisation<'_>,
) -> Result<(f64, f64)> {
    ensure_finite_vec(dw, "perturbation")?;
    let g = checked_gradient(obj, w)?;
    let moved = obj.value(&(w + dw));
    let first_order = obj.value(w) + g.dot(dw);
    let out = match kind {
        Majorisation::Euclidean(lambda) => (moved - first_order, 0.5 * lambda * dw.norm_squared()),
        Majorisation::Cubic(lambda) => {
            let h = obj
                .hessian(w)
                .ok_or_else(|| Error::InvalidInput("cubic majorisation needs a Hessian".into()))?;
            let second_order = first_order + 0.5 * dw.dot(&(h * dw));
            (moved - second_order, lambda / 6.0 * dw.norm().powi(3))
        }
        Majorisation::Bregman(map) => (moved - first_order, map.bregman(w, dw)?),
        Majorisation::LinearRegression(d) => {
            (moved - first_order, 0.5 * *d as f64 * dw.norm_squared())
        }
    };
    if dw.iter().all(|v| *v == 0.0) {
        return Ok((0.0, 0.0));
    }
    Ok(out)
}
