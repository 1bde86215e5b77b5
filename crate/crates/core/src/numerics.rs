//! Linear-algebra and random-sampling primitives shared by the rest of the crate.
//!
//! Matrices are `nalgebra::DMatrix<f64>`; every public entry point checks that
//! its inputs are finite before doing any work.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub const DEFAULT_POWER_TOL: f64 = 1e-6;
pub const DEFAULT_POWER_ITERS: usize = 100;

/// Deterministic random stream keyed by `(seed, stream_id)`.
///
/// Backed by ChaCha8, whose output is specified bit-for-bit, so a given key
/// reproduces the same sequence on every platform.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// A fresh stream with the same seed and an id derived from `coords`.
    pub fn substream(&self, coords: &[u64]) -> Self {
        let mut all = Vec::with_capacity(coords.len() + 1);
        all.push(self.stream_id);
        all.extend_from_slice(coords);
        Self::new(self.seed, stream_id_for(&all))
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream id for a grid cell; depends only on the coordinates, never on
/// scheduling, so worker count cannot change results.
pub fn stream_id_for(coords: &[u64]) -> u64 {
    coords
        .iter()
        .fold(0x243f_6a88_85a3_08d3, |acc, &c| splitmix64(acc ^ splitmix64(c)))
}

pub fn gaussian_draws(rng: &mut RngStream, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

pub fn gaussian_matrix(rng: &mut RngStream, rows: usize, cols: usize, std: f64) -> DMatrix<f64> {
    // Row-major fill so the draw order matches the checkpoint layout.
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            m[(i, j)] = std * rng.normal();
        }
    }
    m
}

pub fn ensure_finite(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{what} has non-finite entries")))
    }
}

pub fn ensure_finite_vec(v: &DVector<f64>, what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{what} has non-finite entries")))
    }
}

fn ensure_nonempty(m: &DMatrix<f64>) -> Result<()> {
    if m.is_empty() {
        Err(Error::InvalidInput("empty matrix".into()))
    } else {
        Ok(())
    }
}

/// Largest singular value by power iteration on the smaller Gram matrix.
///
/// The start vector is seeded from the matrix shape. An estimate is accepted
/// once the eigen-residual `‖Gv − θv‖ ≤ tol·θ`; if that never happens within
/// `max_iter` steps the exact value from a dense SVD is returned instead.
pub fn spectral_norm(m: &DMatrix<f64>, tol: f64, max_iter: usize) -> Result<f64> {
    ensure_nonempty(m)?;
    ensure_finite(m, "matrix")?;
    if !(tol > 0.0) {
        return Err(Error::InvalidInput(format!("tolerance must be positive, got {tol}")));
    }
    let tall = m.nrows() >= m.ncols();
    let n = if tall { m.ncols() } else { m.nrows() };
    let mut rng = RngStream::new(
        (m.nrows() as u64).wrapping_mul(1_000_003) ^ m.ncols() as u64,
        0x5eed,
    );
    let mut v = DVector::from_vec(gaussian_draws(&mut rng, n));
    let norm = v.norm();
    v /= norm;

    let gram_apply = |v: &DVector<f64>| -> DVector<f64> {
        if tall {
            m.tr_mul(&(m * v))
        } else {
            m * m.tr_mul(v)
        }
    };

    for _ in 0..max_iter {
        let w = gram_apply(&v);
        let theta = v.dot(&w);
        if theta <= 0.0 {
            // v landed in the null space; either the matrix is zero or we
            // were unlucky, and the dense path settles both.
            break;
        }
        let residual = (&w - &v * theta).norm();
        if residual <= tol * theta {
            return Ok(theta.sqrt());
        }
        v = &w / w.norm();
    }
    Ok(spectral_norm_exact(m))
}

pub fn spectral_norm_default(m: &DMatrix<f64>) -> Result<f64> {
    spectral_norm(m, DEFAULT_POWER_TOL, DEFAULT_POWER_ITERS)
}

/// Largest singular value from a dense SVD.
pub fn spectral_norm_exact(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

pub fn frobenius_norm(m: &DMatrix<f64>) -> Result<f64> {
    ensure_nonempty(m)?;
    ensure_finite(m, "matrix")?;
    Ok(m.norm())
}

/// Cholesky factor of a (jittered) positive-definite matrix.
#[derive(Clone, Debug)]
pub struct CholFactor {
    l: DMatrix<f64>,
    logdet: f64,
    jitter: f64,
}

impl CholFactor {
    /// Lower-triangular `L` with `LLᵀ = A + jitter·I`.
    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    /// Log-determinant of the jittered matrix.
    pub fn logdet(&self) -> f64 {
        self.logdet
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let y = self
            .l
            .solve_lower_triangular(b)
            .expect("cholesky diagonal is positive");
        self.l
            .tr_solve_lower_triangular(&y)
            .expect("cholesky diagonal is positive")
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let y = self
            .l
            .solve_lower_triangular(b)
            .expect("cholesky diagonal is positive");
        self.l
            .tr_solve_lower_triangular(&y)
            .expect("cholesky diagonal is positive")
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.solve_mat(&DMatrix::identity(self.dim(), self.dim()))
    }

    /// `bᵀ A⁻¹ b`, computed as `‖L⁻¹b‖²`.
    pub fn inv_quad_form(&self, b: &DVector<f64>) -> f64 {
        let y = self
            .l
            .solve_lower_triangular(b)
            .expect("cholesky diagonal is positive");
        y.norm_squared()
    }

    /// `tr A⁻¹ = ‖L⁻¹‖_F²`.
    pub fn inv_trace(&self) -> f64 {
        let n = self.dim();
        let linv = self
            .l
            .solve_lower_triangular(&DMatrix::identity(n, n))
            .expect("cholesky diagonal is positive");
        linv.norm_squared()
    }

    /// Reconstruction `LLᵀ` (includes the jitter).
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.l * self.l.transpose()
    }
}

const SYMMETRY_TOL: f64 = 1e-10;

/// Cholesky factorisation with jitter escalation.
///
/// Starts at `jitter` (or `1e-12·trace/m` when that is zero and the plain
/// factorisation fails) and multiplies by ten until the factorisation succeeds
/// or the jitter would exceed `1e-4·trace/m`.
pub fn chol_logdet(psd: &DMatrix<f64>, jitter: f64) -> Result<CholFactor> {
    ensure_nonempty(psd)?;
    ensure_finite(psd, "gram matrix")?;
    if !psd.is_square() {
        return Err(Error::InvalidInput(format!(
            "matrix is {}x{}, expected square",
            psd.nrows(),
            psd.ncols()
        )));
    }
    if !(jitter >= 0.0) {
        return Err(Error::InvalidInput(format!("jitter must be non-negative, got {jitter}")));
    }
    let scale = psd.amax();
    let asym = (psd - psd.transpose()).amax();
    if asym > SYMMETRY_TOL * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::InvalidInput(format!(
            "matrix asymmetric: max |a_ij - a_ji| = {asym:e}"
        )));
    }
    let n = psd.nrows();
    let mean_diag = psd.trace() / n as f64;
    let base = if mean_diag > 0.0 { mean_diag } else { 1.0 };
    let cap = 1e-4 * base;

    let mut j = jitter;
    loop {
        let mut a = psd.clone();
        for i in 0..n {
            a[(i, i)] += j;
        }
        // Symmetrise away rounding-level asymmetry before factorising.
        let a = (&a + a.transpose()) * 0.5;
        if let Some(ch) = a.cholesky() {
            let l = ch.unpack();
            let logdet = 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
            if logdet.is_finite() {
                return Ok(CholFactor { l, logdet, jitter: j });
            }
        }
        let next = if j == 0.0 { 1e-12 * base } else { j * 10.0 };
        if next > cap * (1.0 + 1e-12) {
            return Err(Error::SingularGram { jitter: j });
        }
        j = next;
    }
}

/// Symmetric square root factor `S` with `SSᵀ = A`, clamping tiny negative
/// eigenvalues (rounding noise) to zero. Used for covariances that are only
/// positive semi-definite, such as posterior covariances at training inputs.
pub fn psd_factor(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    ensure_finite(a, "covariance")?;
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
    let mut out = eig.eigenvectors.clone();
    for (j, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam < -1e-8 * scale {
            return Err(Error::PsdViolation(lam));
        }
        let s = lam.max(0.0).sqrt();
        out.column_mut(j).scale_mut(s);
    }
    Ok(out)
}

pub fn mean_and_std_error(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// `sign` with the convention `sign(0) = +1`.
pub fn sign(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn spectral_norm_identity_and_diagonal() {
        let eye = DMatrix::<f64>::identity(3, 3);
        assert_relative_eq!(spectral_norm_default(&eye).unwrap(), 1.0, epsilon = 1e-9);
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 1.0]));
        assert_relative_eq!(spectral_norm_default(&d).unwrap(), 3.0, epsilon = 1e-6);
    }

    #[test]
    fn spectral_norm_matches_svd() {
        let mut rng = RngStream::new(7, 0);
        for _ in 0..20 {
            let m = gaussian_matrix(&mut rng, 5, 4, 1.0);
            let est = spectral_norm_default(&m).unwrap();
            let exact = m.singular_values().max();
            assert!((est - exact).abs() <= 1e-6 * exact, "{est} vs {exact}");
        }
    }

    #[test]
    fn spectral_norm_rejects_non_finite() {
        let mut m = DMatrix::<f64>::identity(2, 2);
        m[(0, 1)] = f64::NAN;
        assert!(matches!(spectral_norm_default(&m), Err(Error::InvalidInput(_))));
        assert!(matches!(
            spectral_norm(&DMatrix::identity(2, 2), 0.0, 10),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn spectral_norm_of_zero_matrix() {
        let z = DMatrix::<f64>::zeros(3, 2);
        assert_eq!(spectral_norm_default(&z).unwrap(), 0.0);
    }

    #[test]
    fn frobenius_examples() {
        assert_relative_eq!(
            frobenius_norm(&DMatrix::identity(3, 3)).unwrap(),
            3f64.sqrt(),
            epsilon = 1e-15
        );
        assert_eq!(frobenius_norm(&DMatrix::zeros(2, 2)).unwrap(), 0.0);
        let m = DMatrix::from_row_slice(1, 2, &[3.0, 4.0]);
        assert_eq!(frobenius_norm(&m).unwrap(), 5.0);
    }

    #[test]
    fn chol_logdet_examples() {
        let f = chol_logdet(&DMatrix::identity(4, 4), 0.0).unwrap();
        assert_eq!(f.logdet(), 0.0);
        let f = chol_logdet(&DMatrix::from_element(1, 1, 4.0), 0.0).unwrap();
        assert_relative_eq!(f.logdet(), 4f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn chol_logdet_matches_eigen_oracle() {
        let mut rng = RngStream::new(11, 3);
        for _ in 0..10 {
            let g = gaussian_matrix(&mut rng, 4, 8, 1.0);
            let w = &g * g.transpose();
            let f = chol_logdet(&w, 0.0).unwrap();
            let oracle: f64 = SymmetricEigen::new(w.clone())
                .eigenvalues
                .iter()
                .map(|l| l.ln())
                .sum();
            assert!((f.logdet() - oracle).abs() < 1e-8);
            let rec = f.reconstruct();
            assert!((rec - &w).norm() <= 1e-8 * w.norm());
        }
    }

    #[test]
    fn chol_escalates_jitter_on_singular_input() {
        let v = DMatrix::from_row_slice(3, 1, &[1.0, 1.0, 1.0]);
        let rank_one = &v * v.transpose();
        let f = chol_logdet(&rank_one, 0.0).unwrap();
        assert!(f.jitter() > 0.0);
        assert!(f.jitter() <= 1e-4);
    }

    #[test]
    fn chol_fails_on_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(chol_logdet(&m, 0.0), Err(Error::SingularGram { .. })));
    }

    #[test]
    fn chol_rejects_asymmetric() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(chol_logdet(&m, 0.0), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn gaussian_draws_determinism() {
        assert!(gaussian_draws(&mut RngStream::new(1, 1), 0).is_empty());
        let a = gaussian_draws(&mut RngStream::new(42, 9), 3);
        let b = gaussian_draws(&mut RngStream::new(42, 9), 3);
        assert_eq!(a, b);
        let c = gaussian_draws(&mut RngStream::new(42, 10), 3);
        assert_ne!(a, c);
    }

    #[test]
    fn gaussian_draws_moments() {
        let n = 1_000_000;
        let xs = gaussian_draws(&mut RngStream::new(2024, 0), n);
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        // Four standard errors: 4/sqrt(n) = 0.004 for the mean,
        // 4*sqrt(2/n) ≈ 0.0057 for the variance.
        assert!(mean.abs() < 0.004, "mean {mean}");
        assert!((var - 1.0).abs() < 0.0057, "var {var}");
    }

    #[test]
    fn stream_ids_depend_on_coordinates_only() {
        assert_eq!(stream_id_for(&[1, 2, 3]), stream_id_for(&[1, 2, 3]));
        assert_ne!(stream_id_for(&[1, 2, 3]), stream_id_for(&[3, 2, 1]));
    }

    #[test]
    fn sign_of_zero_is_positive() {
        assert_eq!(sign(0.0), 1.0);
        assert_eq!(sign(-0.0), 1.0);
        assert_eq!(sign(-1e-300), -1.0);
    }
}
