//! Kernels, minimum-norm interpolation, Gaussian-process conditioning and the
//! neural network–Gaussian process correspondence for scaled-relu networks.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{chol_logdet, ensure_finite, gaussian_matrix, psd_factor, CholFactor, RngStream};

/// Tolerance on `‖x‖ = √d_0` for the arccosine kernel.
pub const ARCCOS_SPHERE_TOL: f64 = 1e-6;
/// Normalised dot products within this distance of `±1` are clamped.
pub const CLAMP_TOL: f64 = 1e-9;
/// Default Gram jitter, relative to `trace/m`.
pub const DEFAULT_JITTER: f64 = 1e-10;

#[derive(Clone, Debug)]
pub enum Kernel {
    /// `exp(−‖x − x′‖² / 2σ²)`
    Gaussian { sigma: f64 },
    /// Compositional arccosine kernel of a depth-`L` scaled-relu network.
    ArcCos { depth: usize },
    /// Fixed table: input `x` refers to row/column `x[0]` (a non-negative integer).
    Table(Arc<DMatrix<f64>>),
}

/// `h(t) = (1/π)[√(1 − t²) + t(π − arccos t)]`
pub fn arccos_h(t: f64) -> f64 {
    let t = t.clamp(-1.0, 1.0);
    ((1.0 - t * t).max(0.0).sqrt() + t * (PI - t.acos())) / PI
}

pub fn gaussian_kernel(x: &[f64], xp: &[f64], sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidInput(format!("sigma must be positive, got {sigma}")));
    }
    if x.len() != xp.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: xp.len(),
        });
    }
    let d2: f64 = x.iter().zip(xp).map(|(a, b)| (a - b).powi(2)).sum();
    Ok((-d2 / (2.0 * sigma * sigma)).exp())
}

pub fn arccos_kernel(x: &[f64], xp: &[f64], depth: usize) -> Result<f64> {
    if depth == 0 {
        return Err(Error::InvalidInput("arccos kernel depth must be >= 1".into()));
    }
    if x.len() != xp.len() || x.is_empty() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: xp.len(),
        });
    }
    let d0 = x.len() as f64;
    let r = d0.sqrt();
    for v in [x, xp] {
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if !((n - r).abs() <= ARCCOS_SPHERE_TOL * r) {
            return Err(Error::Domain(format!("input norm {n} is not √d0 = {r}")));
        }
    }
    let mut t = x.iter().zip(xp).map(|(a, b)| a * b).sum::<f64>() / d0;
    if t.abs() > 1.0 + CLAMP_TOL {
        return Err(Error::Domain(format!("normalised dot product {t} outside [-1, 1]")));
    }
    t = t.clamp(-1.0, 1.0);
    for _ in 1..depth {
        t = arccos_h(t);
    }
    Ok(t)
}

impl Kernel {
    pub fn eval(&self, x: &[f64], xp: &[f64]) -> Result<f64> {
        match self {
            Kernel::Gaussian { sigma } => gaussian_kernel(x, xp, *sigma),
            Kernel::ArcCos { depth } => arccos_kernel(x, xp, *depth),
            Kernel::Table(t) => {
                let idx = |v: &[f64]| -> Result<usize> {
                    let i = v.first().copied().unwrap_or(f64::NAN);
                    if i >= 0.0 && i.fract() == 0.0 && (i as usize) < t.nrows() {
                        Ok(i as usize)
                    } else {
                        Err(Error::InvalidInput(format!("table kernel has no entry {i}")))
                    }
                };
                Ok(t[(idx(x)?, idx(xp)?)])
            }
        }
    }

    /// `K_{AB}` with one sample per row of `a` and `b`.
    pub fn cross(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let rows_a: Vec<Vec<f64>> = a.row_iter().map(|r| r.iter().copied().collect()).collect();
        let rows_b: Vec<Vec<f64>> = b.row_iter().map(|r| r.iter().copied().collect()).collect();
        let mut k = DMatrix::zeros(a.nrows(), b.nrows());
        for (i, ra) in rows_a.iter().enumerate() {
            for (j, rb) in rows_b.iter().enumerate() {
                k[(i, j)] = self.eval(ra, rb)?;
            }
        }
        Ok(k)
    }

    pub fn gram(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mut k = self.cross(x, x)?;
        // Enforce exact symmetry.
        for i in 0..k.nrows() {
            for j in 0..i {
                let v = 0.5 * (k[(i, j)] + k[(j, i)]);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        Ok(k)
    }
}

/// Gram matrix `K_XX` together with its Cholesky factor.
#[derive(Clone, Debug)]
pub struct GramBundle {
    kernel: Option<Kernel>,
    inputs: Option<DMatrix<f64>>,
    k: DMatrix<f64>,
    chol: CholFactor,
}

impl GramBundle {
    /// Gram of `kernel` on `x`, jitter defaulting to `1e-10·trace/m`.
    pub fn new(kernel: Kernel, x: DMatrix<f64>, jitter: Option<f64>) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(Error::InvalidInput("empty training set".into()));
        }
        ensure_finite(&x, "inputs")?;
        let k = kernel.gram(&x)?;
        let chol = factor(&k, jitter)?;
        Ok(Self {
            kernel: Some(kernel),
            inputs: Some(x),
            k,
            chol,
        })
    }

    /// Bundle for a bare Gram matrix with no kernel attached.
    pub fn from_gram(k: DMatrix<f64>, jitter: Option<f64>) -> Result<Self> {
        let chol = factor(&k, jitter)?;
        Ok(Self {
            kernel: None,
            inputs: None,
            k,
            chol,
        })
    }

    pub fn m(&self) -> usize {
        self.k.nrows()
    }

    pub fn k(&self) -> &DMatrix<f64> {
        &self.k
    }

    pub fn chol(&self) -> &CholFactor {
        &self.chol
    }

    pub fn logdet(&self) -> f64 {
        self.chol.logdet()
    }

    pub fn inputs(&self) -> Option<&DMatrix<f64>> {
        self.inputs.as_ref()
    }

    pub fn kernel(&self) -> Option<&Kernel> {
        self.kernel.as_ref()
    }

    fn attached(&self) -> Result<(&Kernel, &DMatrix<f64>)> {
        match (&self.kernel, &self.inputs) {
            (Some(k), Some(x)) => Ok((k, x)),
            _ => Err(Error::InvalidInput("gram has no kernel attached".into())),
        }
    }

    /// `K_{qX}` for query rows `xq`.
    pub fn cross(&self, xq: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let (kernel, x) = self.attached()?;
        kernel.cross(xq, x)
    }

    pub fn query_gram(&self, xq: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let (kernel, _) = self.attached()?;
        kernel.gram(xq)
    }

    /// `K_qq − K_qX K_XX⁻¹ K_Xq`, computed through `L⁻¹K_Xq`.
    fn schur(&self, kqx: &DMatrix<f64>, kqq: &DMatrix<f64>) -> DMatrix<f64> {
        let v = self
            .chol
            .l()
            .solve_lower_triangular(&kqx.transpose())
            .expect("cholesky diagonal is positive");
        let s = kqq - v.tr_mul(&v);
        (&s + s.transpose()) * 0.5
    }
}

fn factor(k: &DMatrix<f64>, jitter: Option<f64>) -> Result<CholFactor> {
    if !k.is_square() || k.nrows() == 0 {
        return Err(Error::InvalidInput("gram must be square and non-empty".into()));
    }
    let j = jitter.unwrap_or_else(|| DEFAULT_JITTER * k.trace() / k.nrows() as f64);
    chol_logdet(k, j.max(0.0))
}

/// `x ↦ K_xX α` with `α = K_XX⁻¹ Y`.
#[derive(Clone, Debug)]
pub struct Interpolator {
    pub alpha: DVector<f64>,
    gram: GramBundle,
}

impl Interpolator {
    pub fn predict(&self, xq: &DMatrix<f64>) -> Result<DVector<f64>> {
        Ok(self.gram.cross(xq)? * &self.alpha)
    }

    pub fn rkhs_norm(&self) -> Result<f64> {
        rkhs_norm(&self.gram, &self.alpha)
    }
}

fn check_len(gram: &GramBundle, v: &DVector<f64>) -> Result<()> {
    if v.len() != gram.m() {
        return Err(Error::DimensionMismatch {
            expected: gram.m(),
            got: v.len(),
        });
    }
    Ok(())
}

/// Minimum-RKHS-norm interpolator of `(X, Y)`.
pub fn min_norm_interpolate(gram: &GramBundle, y: &DVector<f64>) -> Result<Interpolator> {
    check_len(gram, y)?;
    Ok(Interpolator {
        alpha: gram.chol.solve_vec(y),
        gram: gram.clone(),
    })
}

/// `√(αᵀ K_XX α)`.
pub fn rkhs_norm(gram: &GramBundle, alpha: &DVector<f64>) -> Result<f64> {
    check_len(gram, alpha)?;
    let q = alpha.dot(&(gram.k() * alpha));
    if q < -1e-10 {
        return Err(Error::PsdViolation(q));
    }
    Ok(q.max(0.0).sqrt())
}

/// GP with kernel `τ²·k` conditioned to interpolate `targets` at the Gram inputs.
#[derive(Clone, Debug)]
pub struct GpPosterior {
    pub gram: GramBundle,
    pub targets: DVector<f64>,
    /// Kernel normalisation `τ²` (or `σ^{2L}` for networks).
    pub tau2: f64,
}

impl GpPosterior {
    pub fn new(gram: GramBundle, targets: DVector<f64>, tau2: f64) -> Result<Self> {
        check_len(&gram, &targets)?;
        if !(tau2 > 0.0) {
            return Err(Error::InvalidInput(format!("tau² must be positive, got {tau2}")));
        }
        Ok(Self { gram, targets, tau2 })
    }
}

/// Posterior mean and covariance at `xq`.
pub fn gp_condition(post: &GpPosterior, xq: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let kqx = post.gram.cross(xq)?;
    let kqq = post.gram.query_gram(xq)?;
    // The τ² factors cancel in the mean.
    let mean = &kqx * post.gram.chol.solve_vec(&post.targets);
    let cov = post.gram.schur(&kqx, &kqq) * post.tau2;
    Ok((mean, cov))
}

/// `K_xx − K_xX K_XX⁻¹ K_Xx`: squared RKHS distance from `k(·, x)` to the
/// span of the training basis functions.
pub fn posterior_variance_distance(gram: &GramBundle, x: &[f64]) -> Result<f64> {
    let xq = DMatrix::from_row_slice(1, x.len(), x);
    let kqx = gram.cross(&xq)?;
    let kqq = gram.query_gram(&xq)?;
    Ok(gram.schur(&kqx, &kqq)[(0, 0)].max(0.0))
}

/// `√(‖g‖² − ‖f⋆‖²) · √(posterior variance at x)`.
pub fn interpolation_error_bound(gram: &GramBundle, g_norm: f64, fstar_norm: f64, x: &[f64]) -> Result<f64> {
    if !(g_norm >= fstar_norm) || fstar_norm < 0.0 {
        return Err(Error::InvalidInput(format!(
            "need ‖g‖ >= ‖f⋆‖ >= 0, got {g_norm} and {fstar_norm}"
        )));
    }
    let gap = (g_norm * g_norm - fstar_norm * fstar_norm).max(0.0);
    Ok(gap.sqrt() * posterior_variance_distance(gram, x)?.sqrt())
}

/// Draws of `f_q / γ` where `f` is the GP with kernel `τ²k` conditioned on
/// `f_X = γ·Y`; distributed as `N(K_qX K⁻¹ Y, (τ²/γ²)·Schur)`.
pub fn concentration_sample(
    gram: &GramBundle,
    y: &DVector<f64>,
    gamma: f64,
    tau: f64,
    xq: &DMatrix<f64>,
    n: usize,
    rng: &mut RngStream,
) -> Result<Vec<DVector<f64>>> {
    if !(gamma > 0.0 && tau > 0.0) {
        return Err(Error::InvalidInput("gamma and tau must be positive".into()));
    }
    let post = GpPosterior::new(gram.clone(), y * gamma, tau * tau)?;
    let (mean, cov) = gp_condition(&post, xq)?;
    let s = psd_factor(&cov)?;
    let mean = mean / gamma;
    Ok((0..n)
        .map(|_| {
            let z = DVector::from_fn(mean.len(), |_, _| rng.normal());
            &mean + (&s * z) / gamma
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NngpMethod {
    /// Sample each layer's pre-activations on the inputs directly from their
    /// exact conditional law `N(0, H_{l-1}ᵀH_{l-1}/d_{l-1})` row by row.
    Conditional,
    /// Materialise every weight matrix.
    Explicit,
}

const NNGP_CHUNK: usize = 64;

/// Empirical second moment `(1/n) Σ f(x_i) f(x_j)` of a random scaled-relu
/// network with hidden width `width`, `depth` weight matrices and weights
/// `N(0, 1/d_{l-1})`. Inputs are the rows of `x`.
///
/// Draws are grouped in fixed chunks, each with its own substream of `rng`,
/// and reduced in chunk order, so the result does not depend on the number of
/// worker threads.
pub fn nngp_empirical_kernel(
    width: usize,
    depth: usize,
    n_samples: usize,
    x: &DMatrix<f64>,
    method: NngpMethod,
    rng: &RngStream,
) -> Result<DMatrix<f64>> {
    if depth == 0 || width == 0 || n_samples == 0 {
        return Err(Error::InvalidInput("depth, width and sample count must be positive".into()));
    }
    crate::deep_linear::check_sphere(x)?;
    let m = x.nrows();
    let chunks = n_samples.div_ceil(NNGP_CHUNK);
    let partial: Vec<Result<DMatrix<f64>>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut sub = rng.substream(&[c as u64]);
            let draws = NNGP_CHUNK.min(n_samples - c * NNGP_CHUNK);
            let mut acc = DMatrix::zeros(m, m);
            for _ in 0..draws {
                let f = match method {
                    NngpMethod::Conditional => nngp_draw_conditional(width, depth, x, &mut sub)?,
                    NngpMethod::Explicit => nngp_draw_explicit(width, depth, x, &mut sub),
                };
                acc += &f * f.transpose();
            }
            Ok(acc)
        })
        .collect();
    let mut total = DMatrix::zeros(m, m);
    for p in partial {
        total += p?;
    }
    Ok(total / n_samples as f64)
}

fn relu_scaled(z: &mut DMatrix<f64>) {
    z.apply(|v| *v = std::f64::consts::SQRT_2 * v.max(0.0));
}

/// One network output on the inputs; `H` is kept as `units × m`.
fn nngp_draw_conditional(width: usize, depth: usize, x: &DMatrix<f64>, rng: &mut RngStream) -> Result<DVector<f64>> {
    let m = x.nrows();
    let d0 = x.ncols() as f64;
    // Row covariance of the first pre-activation layer.
    let mut cov = x * x.transpose() / d0;
    for l in 1..=depth {
        let units = if l == depth { 1 } else { width };
        let s = psd_factor(&cov)?;
        let xi = gaussian_matrix(rng, units, m, 1.0);
        let mut z = xi * s.transpose();
        if l == depth {
            return Ok(z.row(0).transpose());
        }
        relu_scaled(&mut z);
        cov = z.tr_mul(&z) / width as f64;
    }
    unreachable!("loop returns at the output layer")
}

fn nngp_draw_explicit(width: usize, depth: usize, x: &DMatrix<f64>, rng: &mut RngStream) -> DVector<f64> {
    let mut h = x.transpose();
    for l in 1..=depth {
        let fan_in = h.nrows();
        let units = if l == depth { 1 } else { width };
        let w = gaussian_matrix(rng, units, fan_in, 1.0 / (fan_in as f64).sqrt());
        let mut z = w * h;
        if l == depth {
            return z.row(0).transpose();
        }
        relu_scaled(&mut z);
        h = z;
    }
    unreachable!("loop returns at the output layer")
}
