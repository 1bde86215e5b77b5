//! Gibbs, Bayes and BPM classification strategies over Gaussian-process
//! classification posteriors.
//!
//! Posterior draws live on the training outputs `f_X` and are carried to test
//! inputs through the prior's conditional `f_q | f_X`. Every error statistic
//! here is a per-test-point quantity, so the extension draws each test
//! point's noise from its own conditional marginal instead of the joint
//! conditional over all test points; the per-point laws are identical.

use std::f64::consts::{E, PI};
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::GramBundle;
use crate::numerics::{mean_and_std_error, psd_factor, sign, RngStream};
use crate::pac_bayes::{orthant_prob_mc, spherised_variance, MIN_ORTHANT_SAMPLES};

pub const DEFAULT_VOTE: usize = 501;
pub const DEFAULT_MEAN_SAMPLES: usize = 2001;
pub const MIN_ACCEPTANCE: f64 = 1e-4;
pub const GIBBS_BURN_IN: usize = 1000;
pub const GIBBS_THIN: usize = 10;
pub const GIBBS_CHAINS: usize = 4;
const DRAW_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PosteriorKind {
    /// `N(0, K_XX)` truncated to the label orthant.
    ExactOrthant,
    /// `N(0, |K_XX|^{1/m} I)` truncated to the label orthant.
    Spherised,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrthantSampling {
    /// Rejection when a pilot run predicts acceptance of at least `1e-4`,
    /// coordinate Gibbs otherwise.
    Auto,
    Rejection,
    CoordinateGibbs,
}

#[derive(Clone, Debug)]
pub struct PosteriorSampler {
    pub kind: PosteriorKind,
    pub gram: GramBundle,
    pub labels: DVector<f64>,
}

impl PosteriorSampler {
    pub fn new(kind: PosteriorKind, gram: GramBundle, labels: DVector<f64>) -> Result<Self> {
        if labels.len() != gram.m() {
            return Err(Error::DimensionMismatch {
                expected: gram.m(),
                got: labels.len(),
            });
        }
        if labels.iter().any(|&v| v != 1.0 && v != -1.0) {
            return Err(Error::InvalidInput("labels must be +1 or -1".into()));
        }
        Ok(Self { kind, gram, labels })
    }

    pub fn m(&self) -> usize {
        self.labels.len()
    }

    /// `n` posterior draws of `f_X`, as the columns of an `m × n` matrix.
    pub fn sample(&self, n: usize, rng: &RngStream) -> Result<DMatrix<f64>> {
        match self.kind {
            PosteriorKind::Spherised => sample_spherised(self, n, rng),
            PosteriorKind::ExactOrthant => Ok(sample_orthant(self, n, rng, OrthantSampling::Auto)?.samples),
        }
    }

    /// Posterior mean of `f_X`: closed form for the spherised posterior,
    /// Monte Carlo over `n` draws for the exact one.
    pub fn mean_labels(&self, n: usize, rng: &RngStream) -> Result<DVector<f64>> {
        match self.kind {
            PosteriorKind::Spherised => {
                let s = spherised_variance(&self.gram);
                Ok(&self.labels * (2.0 * s / PI).sqrt())
            }
            PosteriorKind::ExactOrthant => Ok(self.sample(n, rng)?.column_mean()),
        }
    }
}

fn check_orthant(f: &DMatrix<f64>, y: &DVector<f64>) -> Result<()> {
    for (c, col) in f.column_iter().enumerate() {
        for i in 0..y.len() {
            if sign(col[i]) != y[i] {
                return Err(Error::Consistency(format!("draw {c} leaves the orthant at coordinate {i}")));
            }
        }
    }
    Ok(())
}

/// Run `body` for every draw index, each on its own substream, in parallel
/// chunks; output order is the index order.
fn par_columns<F>(m: usize, n: usize, rng: &RngStream, body: F) -> Result<DMatrix<f64>>
where
    F: Fn(&mut RngStream, &mut [f64]) -> Result<()> + Sync,
{
    let chunks = n.div_ceil(DRAW_CHUNK);
    let parts: Vec<Result<Vec<f64>>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * DRAW_CHUNK;
            let hi = n.min(lo + DRAW_CHUNK);
            let mut buf = vec![0.0; m * (hi - lo)];
            let mut sub = rng.substream(&[c as u64]);
            for col in buf.chunks_mut(m) {
                body(&mut sub, col)?;
            }
            Ok(buf)
        })
        .collect();
    let mut data = Vec::with_capacity(m * n);
    for p in parts {
        data.extend(p?);
    }
    Ok(DMatrix::from_vec(m, n, data))
}

/// Draws of `Q_sph`: `f_i = Y_i · |z_i| · √(|K|^{1/m})`.
pub fn sample_spherised(sampler: &PosteriorSampler, n: usize, rng: &RngStream) -> Result<DMatrix<f64>> {
    let sd = spherised_variance(&sampler.gram).sqrt();
    let y = &sampler.labels;
    let f = par_columns(y.len(), n, rng, |sub, col| {
        for (i, v) in col.iter_mut().enumerate() {
            // |z| = 0 would land on the boundary, where sign(0) = +1.
            let mut z = sub.normal().abs();
            while z == 0.0 {
                z = sub.normal().abs();
            }
            *v = y[i] * z * sd;
        }
        Ok(())
    })?;
    check_orthant(&f, y)?;
    Ok(f)
}

#[derive(Clone, Debug)]
pub struct OrthantSamples {
    pub samples: DMatrix<f64>,
    pub method: OrthantSampling,
    /// Accepted fraction of proposals, for rejection sampling.
    pub acceptance: Option<f64>,
}

/// Draws of `Q_GP = N(0, K_XX | sign f_X = Y)`.
pub fn sample_orthant(sampler: &PosteriorSampler, n: usize, rng: &RngStream, method: OrthantSampling) -> Result<OrthantSamples> {
    let method = match method {
        OrthantSampling::CoordinateGibbs => OrthantSampling::CoordinateGibbs,
        m => {
            let pilot = orthant_prob_mc(&sampler.gram, &sampler.labels, MIN_ORTHANT_SAMPLES, &rng.substream(&[u64::MAX]))?;
            let p = if pilot.zero_hits { 0.0 } else { pilot.log_p.exp() };
            match (m, p >= MIN_ACCEPTANCE) {
                (_, true) => OrthantSampling::Rejection,
                (OrthantSampling::Rejection, false) => return Err(Error::AcceptanceTooLow(p)),
                _ => OrthantSampling::CoordinateGibbs,
            }
        }
    };
    let out = match method {
        OrthantSampling::Rejection => rejection(sampler, n, rng)?,
        _ => OrthantSamples {
            samples: coordinate_gibbs(sampler, n, rng)?,
            method,
            acceptance: None,
        },
    };
    check_orthant(&out.samples, &sampler.labels)?;
    Ok(out)
}

fn rejection(sampler: &PosteriorSampler, n: usize, rng: &RngStream) -> Result<OrthantSamples> {
    let l = sampler.gram.chol().l();
    let y = &sampler.labels;
    let m = y.len();
    let tries = std::sync::atomic::AtomicU64::new(0);
    let samples = par_columns(m, n, rng, |sub, col| {
        let mut z = vec![0.0; m];
        let mut count = 0u64;
        'draw: loop {
            count += 1;
            for i in 0..m {
                z[i] = sub.normal();
                let mut f = 0.0;
                for j in 0..=i {
                    f += l[(i, j)] * z[j];
                }
                if sign(f) != y[i] {
                    continue 'draw;
                }
                col[i] = f;
            }
            break;
        }
        tries.fetch_add(count, std::sync::atomic::Ordering::Relaxed);
        Ok(())
    })?;
    let total = tries.into_inner() as f64;
    Ok(OrthantSamples {
        samples,
        method: OrthantSampling::Rejection,
        acceptance: Some(n as f64 / total),
    })
}

/// `z ~ N(0,1)` conditioned on `z > a`. Plain rejection when `a ≤ 0`,
/// otherwise the translated-exponential proposal of Robert (1995).
pub fn truncated_standard_normal(a: f64, rng: &mut RngStream) -> f64 {
    if a <= 0.0 {
        loop {
            let z = rng.normal();
            if z > a {
                return z;
            }
        }
    }
    let lambda = 0.5 * (a + (a * a + 4.0).sqrt());
    loop {
        let z = a - (1.0 - rng.uniform()).ln() / lambda;
        if rng.uniform() <= (-0.5 * (z - lambda).powi(2)).exp() {
            return z;
        }
    }
}

fn coordinate_gibbs(sampler: &PosteriorSampler, n: usize, rng: &RngStream) -> Result<DMatrix<f64>> {
    let y = &sampler.labels;
    let m = y.len();
    let prec = sampler.gram.chol().inverse();
    let diag: Vec<f64> = (0..m).map(|i| prec[(i, i)]).collect();
    if diag.iter().any(|&d| !(d > 0.0 && d.is_finite())) {
        return Err(Error::SingularGram {
            jitter: sampler.gram.chol().jitter(),
        });
    }
    let per_chain = n.div_ceil(GIBBS_CHAINS);
    let chains: Vec<Vec<f64>> = (0..GIBBS_CHAINS)
        .into_par_iter()
        .map(|c| {
            let mut sub = rng.substream(&[c as u64]);
            let k = sampler.gram.k();
            let mut f = DVector::from_fn(m, |i, _| y[i] * k[(i, i)].sqrt());
            // r = P f, kept current so each coordinate update is O(m).
            let mut r = &prec * &f;
            let mut out = Vec::with_capacity(per_chain * m);
            let sweeps = GIBBS_BURN_IN + per_chain * GIBBS_THIN;
            for s in 1..=sweeps {
                for i in 0..m {
                    let v = 1.0 / diag[i];
                    let mu = -v * (r[i] - diag[i] * f[i]);
                    let sd = v.sqrt();
                    let centre = y[i] * mu;
                    let t = loop {
                        let t = centre + sd * truncated_standard_normal(-centre / sd, &mut sub);
                        if t > 0.0 {
                            break t;
                        }
                    };
                    let new = y[i] * t;
                    let delta = new - f[i];
                    if delta != 0.0 {
                        r.axpy(delta, &prec.column(i), 1.0);
                        f[i] = new;
                    }
                }
                if s > GIBBS_BURN_IN && (s - GIBBS_BURN_IN) % GIBBS_THIN == 0 {
                    out.extend(f.iter().copied());
                }
            }
            out
        })
        .collect();
    let data: Vec<f64> = chains.into_iter().flatten().take(n * m).collect();
    Ok(DMatrix::from_vec(m, n, data))
}

/// Linear map from training outputs to test outputs plus the conditional
/// standard deviation at each test point.
#[derive(Clone, Debug)]
pub struct QueryMap {
    /// `K_qX K_XX⁻¹`, one row per test point.
    pub coef: DMatrix<f64>,
    pub noise_sd: DVector<f64>,
}

pub fn query_map(gram: &GramBundle, xq: &DMatrix<f64>) -> Result<QueryMap> {
    let kernel = gram
        .kernel()
        .ok_or_else(|| Error::InvalidInput("gram has no kernel attached".into()))?;
    let kqx = gram.cross(xq)?;
    let coef = gram.chol().solve_mat(&kqx.transpose()).transpose();
    let mut noise_sd = DVector::zeros(xq.nrows());
    for q in 0..xq.nrows() {
        let row: Vec<f64> = xq.row(q).iter().copied().collect();
        let kqq = kernel.eval(&row, &row)?;
        let explained = kqx.row(q).dot(&coef.row(q));
        noise_sd[q] = (kqq - explained).max(0.0).sqrt();
    }
    Ok(QueryMap { coef, noise_sd })
}

/// Test-point outputs for every training-output draw (columns of `fx`).
pub fn extend_draws(map: &QueryMap, fx: &DMatrix<f64>, rng: &RngStream) -> DMatrix<f64> {
    let mut fq = &map.coef * fx;
    let q = fq.nrows();
    let noise = par_columns(q, fx.ncols(), rng, |sub, col| {
        for v in col.iter_mut() {
            *v = sub.normal();
        }
        Ok(())
    })
    .expect("noise draws are infallible");
    for c in 0..fq.ncols() {
        for r in 0..q {
            fq[(r, c)] += map.noise_sd[r] * noise[(r, c)];
        }
    }
    fq
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Gibbs,
    Bayes(usize),
    Bpm,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Gibbs => "gibbs",
            Strategy::Bayes(_) => "bayes",
            Strategy::Bpm => "bpm",
        }
    }
}

/// `±1` predictions at the rows of `xq`.
pub fn strategy_predict(sampler: &PosteriorSampler, xq: &DMatrix<f64>, strategy: Strategy, rng: &RngStream) -> Result<Vec<f64>> {
    let map = query_map(&sampler.gram, xq)?;
    match strategy {
        Strategy::Gibbs | Strategy::Bayes(_) => {
            let n = if let Strategy::Bayes(n) = strategy { n } else { 1 };
            if n == 0 {
                return Err(Error::InvalidInput("vote needs at least one draw".into()));
            }
            let fx = sampler.sample(n, &rng.substream(&[0]))?;
            let fq = extend_draws(&map, &fx, &rng.substream(&[1]));
            Ok(fq
                .row_iter()
                .map(|row| sign(row.iter().map(|&v| sign(v)).sum::<f64>()))
                .collect())
        }
        Strategy::Bpm => {
            let mean = sampler.mean_labels(DEFAULT_MEAN_SAMPLES, &rng.substream(&[2]))?;
            Ok((&map.coef * mean).iter().map(|&v| sign(v)).collect())
        }
    }
}

/// Monte Carlo estimates of the strategy error rates on a labelled test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyErrors {
    pub gibbs: f64,
    pub bayes: f64,
    pub bpm: f64,
    /// `E_x[(E_f sign f(x))²]`.
    pub alpha: f64,
    /// Rate at which the Bayes and BPM classifiers disagree.
    pub delta: f64,
    pub ensemble: usize,
    pub se_gibbs: f64,
    pub se_bayes: f64,
    pub se_bpm: f64,
    pub se_alpha: f64,
    pub se_delta: f64,
    /// Per-point Gibbs error rates.
    #[serde(skip)]
    pub gibbs_points: Vec<f64>,
    #[serde(skip)]
    pub bayes_wrong: Vec<f64>,
    #[serde(skip)]
    pub bpm_wrong: Vec<f64>,
}

/// Error statistics from test-point draws `fq` (`q × n`), the posterior-mean
/// outputs at the test points and the test labels.
///
/// Standard errors combine the spread over test points with the binomial
/// spread of the finite ensemble.
pub fn errors_from_draws(fq: &DMatrix<f64>, mean_q: &DVector<f64>, yq: &[f64]) -> Result<StrategyErrors> {
    let q = fq.nrows();
    let n = fq.ncols();
    if q == 0 || n == 0 {
        return Err(Error::InvalidInput("need at least one test point and one draw".into()));
    }
    if yq.len() != q || mean_q.len() != q {
        return Err(Error::DimensionMismatch {
            expected: q,
            got: yq.len().min(mean_q.len()),
        });
    }
    let nf = n as f64;
    let mut gibbs = Vec::with_capacity(q);
    let mut bayes = Vec::with_capacity(q);
    let mut bpm = Vec::with_capacity(q);
    let mut alpha = Vec::with_capacity(q);
    let mut disagree = Vec::with_capacity(q);
    let (mut var_g, mut var_a) = (0.0, 0.0);
    for i in 0..q {
        let votes: f64 = fq.row(i).iter().map(|&v| sign(v)).sum();
        let s = votes / nf;
        let wrong = fq.row(i).iter().filter(|&&v| sign(v) != yq[i]).count() as f64 / nf;
        let fb = sign(votes);
        let fm = sign(mean_q[i]);
        gibbs.push(wrong);
        alpha.push(s * s);
        bayes.push((fb != yq[i]) as u8 as f64);
        bpm.push((fm != yq[i]) as u8 as f64);
        disagree.push((fb != fm) as u8 as f64);
        var_g += wrong * (1.0 - wrong) / nf;
        var_a += 4.0 * s * s * (1.0 - s * s) / nf;
    }
    let qf = q as f64;
    let stat = |xs: &[f64], extra: f64| {
        let (m, se) = mean_and_std_error(xs);
        (m, (se * se + extra / (qf * qf)).sqrt())
    };
    let (g, se_g) = stat(&gibbs, var_g);
    let (b, se_b) = stat(&bayes, 0.0);
    let (p, se_p) = stat(&bpm, 0.0);
    let (a, se_a) = stat(&alpha, var_a);
    let (d, se_d) = stat(&disagree, 0.0);
    Ok(StrategyErrors {
        gibbs: g,
        bayes: b,
        bpm: p,
        alpha: a,
        delta: d,
        ensemble: n,
        se_gibbs: se_g,
        se_bayes: se_b,
        se_bpm: se_p,
        se_alpha: se_a,
        se_delta: se_d,
        gibbs_points: gibbs,
        bayes_wrong: bayes,
        bpm_wrong: bpm,
    })
}

pub fn strategy_errors(sampler: &PosteriorSampler, xq: &DMatrix<f64>, yq: &[f64], n: usize, rng: &RngStream) -> Result<StrategyErrors> {
    let map = query_map(&sampler.gram, xq)?;
    let fx = sampler.sample(n, &rng.substream(&[0]))?;
    let fq = extend_draws(&map, &fx, &rng.substream(&[1]));
    let mean = match sampler.kind {
        PosteriorKind::Spherised => sampler.mean_labels(0, rng)?,
        PosteriorKind::ExactOrthant => fx.column_mean(),
    };
    errors_from_draws(&fq, &(&map.coef * mean), yq)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InequalityCheck {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub pass: bool,
    /// Holds only under the log-concave linear-representation hypothesis.
    pub conditional: bool,
    /// False when the inequality's premise fails (the C-bound needs a Gibbs
    /// error below one half); such rows pass vacuously.
    pub applicable: bool,
}

fn check(name: &str, lhs: f64, rhs: f64, slack: f64, conditional: bool, applicable: bool) -> InequalityCheck {
    InequalityCheck {
        name: name.to_string(),
        lhs,
        rhs,
        slack,
        pass: !applicable || lhs <= rhs + slack,
        conditional,
        applicable,
    }
}

/// Every strategy inequality with a `3·SE` Monte Carlo slack.
pub fn inequality_report(e: &StrategyErrors) -> Vec<InequalityCheck> {
    let hyp = |a: f64, b: f64| (a * a + b * b).sqrt();
    let c_ok = e.gibbs < 0.5 && e.alpha > 0.0;
    let (c_bound, se_c) = if c_ok {
        let u = 1.0 - 2.0 * e.gibbs;
        let val = 1.0 - u * u / e.alpha;
        let se = hyp(4.0 * u / e.alpha * e.se_gibbs, u * u / (e.alpha * e.alpha) * e.se_alpha);
        (val, se)
    } else {
        (1.0, 0.0)
    };
    vec![
        check("bayes_le_2gibbs", e.bayes, 2.0 * e.gibbs, 3.0 * hyp(e.se_bayes, 2.0 * e.se_gibbs), false, true),
        check("bayes_le_cbound", e.bayes, c_bound, 3.0 * hyp(e.se_bayes, se_c), false, c_ok),
        check("bpm_le_e_gibbs", e.bpm, E * e.gibbs, 3.0 * hyp(e.se_bpm, E * e.se_gibbs), true, true),
        check("bpm_le_bayes_plus_delta", e.bpm, e.bayes + e.delta, 3.0 * hyp(e.se_bpm, hyp(e.se_bayes, e.se_delta)), false, true),
        check(
            "bpm_le_cbound_plus_delta",
            e.bpm,
            c_bound + e.delta,
            3.0 * hyp(e.se_bpm, hyp(se_c, e.se_delta)),
            false,
            c_ok,
        ),
    ]
}

#[derive(Clone, Debug)]
pub enum LogConcave {
    Gaussian { mean: DVector<f64>, cov: DMatrix<f64> },
    UniformBox { lo: DVector<f64>, hi: DVector<f64> },
}

impl LogConcave {
    pub fn dim(&self) -> usize {
        match self {
            LogConcave::Gaussian { mean, .. } => mean.len(),
            LogConcave::UniformBox { lo, .. } => lo.len(),
        }
    }

    pub fn mean(&self) -> DVector<f64> {
        match self {
            LogConcave::Gaussian { mean, .. } => mean.clone(),
            LogConcave::UniformBox { lo, hi } => (lo + hi) * 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrunbaumEstimate {
    pub agreement: f64,
    pub se: f64,
    pub n: usize,
}

/// Monte Carlo estimate of `P_w[sign wᵀx = sign μᵀx]`.
pub fn grunbaum_estimate(density: &LogConcave, x: &DVector<f64>, n: usize, rng: &RngStream) -> Result<GrunbaumEstimate> {
    let d = density.dim();
    if x.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: x.len() });
    }
    if n == 0 {
        return Err(Error::InvalidInput("need at least one draw".into()));
    }
    let mu = density.mean();
    let proj = mu.dot(x);
    if proj.abs() <= 1e-14 * mu.norm() * x.norm() || proj == 0.0 {
        return Err(Error::AmbiguousMean);
    }
    let target = sign(proj);
    let agree: DMatrix<f64> = match density {
        LogConcave::Gaussian { mean, cov } => {
            if cov.nrows() != d || cov.ncols() != d {
                return Err(Error::DimensionMismatch { expected: d, got: cov.nrows() });
            }
            let s = psd_factor(cov)?;
            let sx = s.transpose() * x;
            let mx = mean.dot(x);
            par_columns(1, n, rng, |sub, col| {
                let z = DVector::from_fn(d, |_, _| sub.normal());
                col[0] = (sign(mx + sx.dot(&z)) == target) as u8 as f64;
                Ok(())
            })?
        }
        LogConcave::UniformBox { lo, hi } => {
            if hi.len() != d || lo.iter().zip(hi.iter()).any(|(a, b)| !(a < b)) {
                return Err(Error::InvalidInput("box needs lo < hi in every coordinate".into()));
            }
            par_columns(1, n, rng, |sub, col| {
                let dot: f64 = (0..d).map(|i| (lo[i] + (hi[i] - lo[i]) * sub.uniform()) * x[i]).sum();
                col[0] = (sign(dot) == target) as u8 as f64;
                Ok(())
            })?
        }
    };
    let p = agree.mean();
    Ok(GrunbaumEstimate {
        agreement: p,
        se: (p * (1.0 - p) / n as f64).sqrt(),
        n,
    })
}

/// One row per test point: id, true label, then one column per strategy.
pub fn write_predictions_csv<W: Write>(out: W, labels: &[f64], columns: &[(&str, Vec<f64>)]) -> Result<()> {
    for (name, col) in columns {
        if col.len() != labels.len() {
            return Err(Error::Consistency(format!(
                "column {name} has {} rows, expected {}",
                col.len(),
                labels.len()
            )));
        }
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["id".to_string(), "label".to_string()];
    header.extend(columns.iter().map(|(n, _)| n.to_string()));
    w.write_record(&header)?;
    for (i, y) in labels.iter().enumerate() {
        let mut row = vec![i.to_string(), format!("{}", *y as i64)];
        row.extend(columns.iter().map(|(_, c)| format!("{}", c[i] as i64)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deep_linear::project_to_sphere;
    use crate::kernel::{min_norm_interpolate, Kernel};
    use crate::numerics::gaussian_matrix;
    use statrs::distribution::{Continuous, ContinuousCDF, Normal};
    use std::sync::Arc;

    fn sphere(rng: &mut RngStream, m: usize, d: usize) -> DMatrix<f64> {
        project_to_sphere(&gaussian_matrix(rng, m, d, 1.0)).unwrap()
    }

    fn table_sampler(kind: PosteriorKind, k: DMatrix<f64>, y: Vec<f64>) -> PosteriorSampler {
        let m = y.len();
        let x = DMatrix::from_fn(m, 1, |i, _| i as f64);
        let gram = GramBundle::new(Kernel::Table(Arc::new(k)), x, Some(0.0)).unwrap();
        PosteriorSampler::new(kind, gram, DVector::from_vec(y)).unwrap()
    }

    fn moments(f: &DMatrix<f64>, i: usize, j: usize) -> (f64, f64) {
        let prods: Vec<f64> = f.column_iter().map(|c| c[i] * c[j]).collect();
        mean_and_std_error(&prods)
    }

    #[test]
    fn spherised_moments_match_half_normal_identity() {
        let mut rng = RngStream::new(1, 0);
        let g = gaussian_matrix(&mut rng, 3, 5, 1.0);
        let k = &g * g.transpose() / 5.0;
        let s = table_sampler(PosteriorKind::Spherised, k, vec![1.0, -1.0, 1.0]);
        let det = spherised_variance(&s.gram);
        let f = sample_spherised(&s, 100_000, &rng).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let (mean, se) = moments(&f, i, j);
                let y = &s.labels;
                let exact = if i == j { det } else { det * 2.0 / PI * y[i] * y[j] };
                assert!((mean - exact).abs() < 4.0 * se, "({i},{j}) {mean} vs {exact}");
            }
        }
    }

    #[test]
    fn identity_orthant_matches_spherised() {
        let rng = RngStream::new(2, 0);
        let s = table_sampler(PosteriorKind::ExactOrthant, DMatrix::identity(3, 3), vec![1.0, 1.0, -1.0]);
        let out = sample_orthant(&s, 40_000, &rng, OrthantSampling::Auto).unwrap();
        assert_eq!(out.method, OrthantSampling::Rejection);
        let acc = out.acceptance.unwrap();
        assert!((acc - 0.125).abs() < 0.01);
        for (i, j, exact) in [(0, 0, 1.0), (0, 1, 2.0 / PI), (1, 2, -2.0 / PI)] {
            let (mean, se) = moments(&out.samples, i, j);
            assert!((mean - exact).abs() < 4.0 * se);
        }
    }

    #[test]
    fn bivariate_acceptance_is_one_third() {
        let rng = RngStream::new(3, 0);
        let k = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        let s = table_sampler(PosteriorKind::ExactOrthant, k, vec![1.0, 1.0]);
        let n = 50_000;
        let out = sample_orthant(&s, n, &rng, OrthantSampling::Rejection).unwrap();
        let acc = out.acceptance.unwrap();
        let p = 1.0 / 3.0;
        // Proposals per accepted draw are geometric; the accepted fraction has
        // delta-method standard error p·√((1−p)/n).
        let se = p * ((1.0 - p) / n as f64).sqrt();
        assert!((acc - p).abs() < 3.0 * se, "{acc}");
    }

    #[test]
    fn gibbs_chain_agrees_with_rejection() {
        let rng = RngStream::new(4, 0);
        let k = DMatrix::from_row_slice(3, 3, &[1.0, 0.6, -0.3, 0.6, 1.5, 0.2, -0.3, 0.2, 0.8]);
        let s = table_sampler(PosteriorKind::ExactOrthant, k, vec![1.0, -1.0, 1.0]);
        let a = sample_orthant(&s, 40_000, &rng.substream(&[0]), OrthantSampling::Rejection).unwrap();
        let b = sample_orthant(&s, 40_000, &rng.substream(&[1]), OrthantSampling::CoordinateGibbs).unwrap();
        for i in 0..3 {
            for j in i..3 {
                let (ma, sa) = moments(&a.samples, i, j);
                let (mb, sb) = moments(&b.samples, i, j);
                // Thinned chain draws stay mildly correlated, so the naive
                // standard error is inflated by a factor of two.
                assert!((ma - mb).abs() < 4.0 * (sa * sa + 4.0 * sb * sb).sqrt(), "({i},{j}) {ma} vs {mb}");
            }
            let (ma, sa) = mean_and_std_error(&a.samples.row(i).iter().copied().collect::<Vec<_>>());
            let (mb, sb) = mean_and_std_error(&b.samples.row(i).iter().copied().collect::<Vec<_>>());
            assert!((ma - mb).abs() < 4.0 * (sa * sa + 4.0 * sb * sb).sqrt());
        }
    }

    #[test]
    fn rejection_refuses_tiny_orthants() {
        let rng = RngStream::new(5, 0);
        let k = DMatrix::from_fn(20, 20, |i, j| if i == j { 1.0 } else { 0.05 });
        let s = table_sampler(PosteriorKind::ExactOrthant, k, vec![1.0; 20]);
        assert!(matches!(
            sample_orthant(&s, 10, &rng, OrthantSampling::Rejection),
            Err(Error::AcceptanceTooLow(_))
        ));
        let auto = sample_orthant(&s, 50, &rng, OrthantSampling::Auto).unwrap();
        assert_eq!(auto.method, OrthantSampling::CoordinateGibbs);
        assert_eq!(auto.samples.ncols(), 50);
    }

    #[test]
    fn truncated_normal_tail() {
        let mut rng = RngStream::new(6, 0);
        for a in [-1.0, 0.0, 0.5, 3.0, 8.0] {
            let xs: Vec<f64> = (0..20_000).map(|_| truncated_standard_normal(a, &mut rng)).collect();
            assert!(xs.iter().all(|&x| x > a));
            let n = Normal::standard();
            let exact = n.pdf(a) / n.sf(a);
            let (m, se) = mean_and_std_error(&xs);
            assert!((m - exact).abs() < 4.0 * se, "a={a}: {m} vs {exact}");
        }
    }

    #[test]
    fn spherised_bpm_is_the_interpolator() {
        let mut rng = RngStream::new(7, 0);
        let x = sphere(&mut rng, 12, 4);
        let y = DVector::from_fn(12, |i, _| if x[(i, 0)] > 0.0 { 1.0 } else { -1.0 });
        let gram = GramBundle::new(Kernel::ArcCos { depth: 2 }, x, None).unwrap();
        let s = PosteriorSampler::new(PosteriorKind::Spherised, gram.clone(), y.clone()).unwrap();
        let xq = sphere(&mut rng, 50, 4);
        let bpm = strategy_predict(&s, &xq, Strategy::Bpm, &rng).unwrap();
        let interp = min_norm_interpolate(&gram, &y).unwrap().predict(&xq).unwrap();
        for (a, b) in bpm.iter().zip(interp.iter()) {
            assert_eq!(*a, sign(*b));
        }
    }

    #[test]
    fn single_point_all_strategies_return_label() {
        let rng = RngStream::new(8, 0);
        let x = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        for label in [1.0, -1.0] {
            for kind in [PosteriorKind::Spherised, PosteriorKind::ExactOrthant] {
                let gram = GramBundle::new(Kernel::ArcCos { depth: 1 }, x.clone(), Some(0.0)).unwrap();
                let s = PosteriorSampler::new(kind, gram, DVector::from_element(1, label)).unwrap();
                for st in [Strategy::Gibbs, Strategy::Bayes(11), Strategy::Bpm] {
                    assert_eq!(strategy_predict(&s, &x, st, &rng).unwrap(), vec![label]);
                }
            }
        }
    }

    #[test]
    fn bayes_vote_stabilises() {
        let mut rng = RngStream::new(9, 0);
        let x = sphere(&mut rng, 60, 3);
        let y = DVector::from_fn(60, |i, _| sign(x[(i, 0)] + 0.3 * x[(i, 1)]));
        let gram = GramBundle::new(Kernel::ArcCos { depth: 2 }, x, None).unwrap();
        let s = PosteriorSampler::new(PosteriorKind::Spherised, gram, y).unwrap();
        let xq = sphere(&mut rng, 1000, 3);
        let a = strategy_predict(&s, &xq, Strategy::Bayes(501), &rng.substream(&[1])).unwrap();
        let b = strategy_predict(&s, &xq, Strategy::Bayes(2001), &rng.substream(&[2])).unwrap();
        let flips = a.iter().zip(&b).filter(|(u, v)| u != v).count();
        assert!(flips as f64 / 1000.0 <= 0.02, "{flips} flips");
    }

    #[test]
    fn concentrated_and_coin_flip_ensembles() {
        let fq = DMatrix::from_row_slice(3, 4, &[1.0, 2.0, 0.5, 1.0, -1.0, -1.0, -2.0, -0.1, 3.0, 3.0, 3.0, 3.0]);
        let mean = fq.column_mean();
        let e = errors_from_draws(&fq, &mean, &[1.0, 1.0, -1.0]).unwrap();
        assert_eq!(e.gibbs, 2.0 / 3.0);
        assert_eq!(e.bayes, e.gibbs);
        assert_eq!(e.bpm, e.gibbs);
        assert_eq!(e.alpha, 1.0);
        assert_eq!(e.delta, 0.0);

        let mut rng = RngStream::new(10, 0);
        let coin = DMatrix::from_fn(1, 10_000, |_, _| rng.normal());
        let e = errors_from_draws(&coin, &DVector::from_element(1, 0.1), &[1.0]).unwrap();
        assert!(e.alpha < 1e-3);

        let three = DMatrix::from_row_slice(1, 3, &[-1.0, -1.0, 1.0]);
        let e = errors_from_draws(&three, &three.column_mean(), &[1.0]).unwrap();
        assert_eq!(e.bayes, 1.0);
        assert!((e.gibbs - 2.0 / 3.0).abs() < 1e-15);
        let report = inequality_report(&e);
        assert!(report.iter().all(|c| c.pass));
        assert!(report[0].lhs <= report[0].rhs);
    }

    #[test]
    fn gp_posterior_inequalities_hold() {
        let mut rng = RngStream::new(11, 0);
        for t in 0..4u64 {
            let x = sphere(&mut rng, 10, 3);
            let y = DVector::from_fn(10, |i, _| sign(x[(i, 0)] - 0.2 * x[(i, 2)]));
            let xq = sphere(&mut rng, 200, 3);
            let yq: Vec<f64> = (0..200).map(|i| sign(xq[(i, 0)] - 0.2 * xq[(i, 2)])).collect();
            let gram = GramBundle::new(Kernel::ArcCos { depth: 2 }, x, None).unwrap();
            let s = PosteriorSampler::new(PosteriorKind::ExactOrthant, gram, y).unwrap();
            let e = strategy_errors(&s, &xq, &yq, 801, &rng.substream(&[t])).unwrap();
            for c in inequality_report(&e) {
                assert!(c.pass, "{c:?}");
            }
        }
    }

    #[test]
    fn grunbaum_examples() {
        let rng = RngStream::new(12, 0);
        let g = LogConcave::Gaussian {
            mean: DVector::from_vec(vec![1.0, 0.0]),
            cov: DMatrix::identity(2, 2),
        };
        let est = grunbaum_estimate(&g, &DVector::from_vec(vec![1.0, 0.0]), 200_000, &rng).unwrap();
        assert!((est.agreement - 0.841_344_746_068_542_9).abs() < 3.0 * est.se);

        let shifted = LogConcave::Gaussian {
            mean: DVector::from_vec(vec![1e-3, 0.0]),
            cov: DMatrix::identity(2, 2),
        };
        let est = grunbaum_estimate(&shifted, &DVector::from_vec(vec![1.0, 0.0]), 200_000, &rng).unwrap();
        assert!((est.agreement - 0.5).abs() < 0.01);
        assert!(est.agreement >= 1.0 / E - 3.0 * est.se);

        let cube = LogConcave::UniformBox {
            lo: DVector::zeros(2),
            hi: DVector::from_element(2, 1.0),
        };
        let est = grunbaum_estimate(&cube, &DVector::from_element(2, 1.0), 10_000, &rng).unwrap();
        assert_eq!(est.agreement, 1.0);

        let centred = LogConcave::Gaussian {
            mean: DVector::zeros(2),
            cov: DMatrix::identity(2, 2),
        };
        assert!(matches!(
            grunbaum_estimate(&centred, &DVector::from_element(2, 1.0), 100, &rng),
            Err(Error::AmbiguousMean)
        ));
    }

    #[test]
    fn predictions_csv_layout() {
        let mut buf = Vec::new();
        write_predictions_csv(&mut buf, &[1.0, -1.0], &[("gibbs", vec![1.0, 1.0]), ("bpm", vec![-1.0, -1.0])]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "id,label,gibbs,bpm\n0,1,1,-1\n1,-1,1,-1\n");
        assert!(write_predictions_csv(Vec::new(), &[1.0], &[("x", vec![])]).is_err());
    }

    #[test]
    fn draws_do_not_depend_on_worker_count() {
        let s = table_sampler(
            PosteriorKind::ExactOrthant,
            DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 1.0]),
            vec![1.0, -1.0],
        );
        let rng = RngStream::new(13, 0);
        let a = s.sample(1000, &rng).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| s.sample(1000, &rng).unwrap());
        assert_eq!(a, b);
    }
}
