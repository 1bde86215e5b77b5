//! Generalisation bounds: VC, uniform stability, PAC-Bayes with binary-KL
//! inversion, and the Gaussian-process classification specialisations built
//! on the orthant probability `P_Y` and the kernel complexity `A(k, X, Y)`.
//!
//! Probabilities are carried in log space throughout; `P_Y` underflows long
//! before the bounds stop being informative.

use std::collections::BTreeMap;
use std::f64::consts::{E, LN_2, PI};

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::GramBundle;
use crate::numerics::RngStream;

pub const KL_INVERSE_ITERS: usize = 200;
pub const DEFAULT_ORTHANT_SAMPLES: usize = 1_000_000;
pub const MIN_ORTHANT_SAMPLES: usize = 10_000;
const ORTHANT_CHUNK: usize = 16_384;

/// Everything a bound formula may consume. Optional fields are checked by the
/// formula that needs them.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub m: usize,
    pub delta: f64,
    pub train_error: Option<f64>,
    /// `log N(f, 2m)`.
    pub log_shattering: Option<f64>,
    pub beta: Option<f64>,
    pub kl: Option<f64>,
    pub log_orthant: Option<f64>,
    pub complexity: Option<f64>,
}

impl BoundInputs {
    pub fn new(m: usize, delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::InvalidInput(format!("delta must lie in (0,1), got {delta}")));
        }
        if m == 0 {
            return Err(Error::InvalidInput("sample count must be positive".into()));
        }
        Ok(Self {
            m,
            delta,
            ..Self::default()
        })
    }

    pub fn with_train_error(mut self, e: f64) -> Self {
        self.train_error = Some(e);
        self
    }

    pub fn with_log_shattering(mut self, v: f64) -> Self {
        self.log_shattering = Some(v);
        self
    }

    pub fn with_beta(mut self, b: f64) -> Self {
        self.beta = Some(b);
        self
    }

    pub fn with_kl(mut self, kl: f64) -> Self {
        self.kl = Some(kl);
        self
    }

    fn train(&self) -> Result<f64> {
        let t = missing(self.train_error, "train_error")?;
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidInput(format!("train error {t} outside [0,1]")));
        }
        Ok(t)
    }

    fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidInput(format!("delta must lie in (0,1), got {}", self.delta)));
        }
        if self.m == 0 {
            return Err(Error::InvalidInput("sample count must be positive".into()));
        }
        Ok(())
    }
}

fn missing(v: Option<f64>, name: &str) -> Result<f64> {
    v.ok_or_else(|| Error::InvalidInput(format!("bound input `{name}` is required")))
}

pub fn vc_bound(inputs: &BoundInputs) -> Result<f64> {
    inputs.validate()?;
    let train = inputs.train()?;
    let log_n = missing(inputs.log_shattering, "log_shattering")?;
    let m = inputs.m as f64;
    Ok(train + ((8.0 / m) * (log_n + (4.0 / inputs.delta).ln())).sqrt())
}

pub fn stability_bound(inputs: &BoundInputs) -> Result<f64> {
    inputs.validate()?;
    let train = inputs.train()?;
    let beta = missing(inputs.beta, "beta")?;
    if beta < 0.0 {
        return Err(Error::InvalidInput(format!("stability must be non-negative, got {beta}")));
    }
    let m = inputs.m as f64;
    Ok(train + 2.0 * beta + (4.0 * m * beta + 1.0) * ((1.0 / inputs.delta).ln() / (2.0 * m)).sqrt())
}

/// `(KL + log(2m/δ)) / (m − 1)`.
pub fn pac_bayes_cap(kl: f64, m: usize, delta: f64) -> Result<f64> {
    if m < 2 {
        return Err(Error::InvalidInput("PAC-Bayes needs m >= 2".into()));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidInput(format!("delta must lie in (0,1), got {delta}")));
    }
    if !(kl >= 0.0) {
        return Err(Error::InvalidInput(format!("KL must be non-negative, got {kl}")));
    }
    Ok((kl + (2.0 * m as f64 / delta).ln()) / (m as f64 - 1.0))
}

/// Binary KL divergence `kl(p‖q)` with the usual `0 log 0 = 0`.
pub fn kl_bernoulli(p: f64, q: f64) -> f64 {
    let term = |a: f64, b: f64| {
        if a == 0.0 {
            0.0
        } else if b == 0.0 {
            f64::INFINITY
        } else {
            a * (a / b).ln()
        }
    };
    term(p, q) + term(1.0 - p, 1.0 - q)
}

/// Largest `q ∈ [train, 1]` with `kl(train‖q) ≤ cap`, by bisection.
pub fn kl_inverse_bound(train: f64, cap: f64) -> f64 {
    let train = train.clamp(0.0, 1.0);
    if !(cap > 0.0) {
        return train;
    }
    let (mut lo, mut hi) = (train, 1.0);
    if kl_bernoulli(train, hi) <= cap {
        return 1.0;
    }
    for _ in 0..KL_INVERSE_ITERS {
        let mid = 0.5 * (lo + hi);
        if kl_bernoulli(train, mid) <= cap {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// PAC-Bayes test-error bound from `train_error` and `kl`.
pub fn pac_bayes_bound(inputs: &BoundInputs) -> Result<f64> {
    inputs.validate()?;
    let train = inputs.train()?;
    let kl = missing(inputs.kl, "kl")?;
    Ok(kl_inverse_bound(train, pac_bayes_cap(kl, inputs.m, inputs.delta)?))
}

/// Zero-train-error form `1 − exp(−cap)`.
pub fn realisable_bound(kl: f64, m: usize, delta: f64) -> Result<f64> {
    Ok(-(-pac_bayes_cap(kl, m, delta)?).exp_m1())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrthantMethod {
    MonteCarlo,
    ExactDiagonal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrthantEstimate {
    pub log_p: f64,
    /// Binomial standard error of the estimate of `P_Y` itself.
    pub se: f64,
    /// Delta-method standard error of `log P_Y`.
    pub log_se: f64,
    pub n: usize,
    pub hits: usize,
    pub method: OrthantMethod,
    /// No draw landed in the orthant; `log_p` is then the rule-of-three upper
    /// confidence value `log(3/n)`.
    pub zero_hits: bool,
}

impl OrthantEstimate {
    pub fn log_inv_p(&self) -> f64 {
        -self.log_p
    }
}

fn check_labels(y: &DVector<f64>, m: usize) -> Result<()> {
    if y.len() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            got: y.len(),
        });
    }
    if y.iter().any(|&v| v != 1.0 && v != -1.0) {
        return Err(Error::InvalidInput("labels must be +1 or -1".into()));
    }
    Ok(())
}

fn is_diagonal(gram: &GramBundle) -> bool {
    let k = gram.k();
    let m = k.nrows();
    (0..m).all(|i| (0..m).all(|j| i == j || k[(i, j)] == 0.0))
}

/// Prior mass of the label orthant `{f : sign f = Y}` under `N(0, K_XX)`.
///
/// Diagonal Grams return the exact `2^{-m}`; otherwise Monte Carlo with draws
/// split into fixed chunks on substreams of `rng`.
pub fn orthant_prob(gram: &GramBundle, y: &DVector<f64>, n_samples: usize, rng: &RngStream) -> Result<OrthantEstimate> {
    check_labels(y, gram.m())?;
    if is_diagonal(gram) {
        return Ok(OrthantEstimate {
            log_p: -(gram.m() as f64) * LN_2,
            se: 0.0,
            log_se: 0.0,
            n: 0,
            hits: 0,
            method: OrthantMethod::ExactDiagonal,
            zero_hits: false,
        });
    }
    orthant_prob_mc(gram, y, n_samples, rng)
}

/// Monte Carlo orthant estimate, never short-circuiting.
pub fn orthant_prob_mc(gram: &GramBundle, y: &DVector<f64>, n_samples: usize, rng: &RngStream) -> Result<OrthantEstimate> {
    check_labels(y, gram.m())?;
    if n_samples < MIN_ORTHANT_SAMPLES {
        return Err(Error::InvalidInput(format!(
            "orthant Monte Carlo needs at least {MIN_ORTHANT_SAMPLES} samples"
        )));
    }
    let l = gram.chol().l();
    let m = gram.m();
    let chunks = n_samples.div_ceil(ORTHANT_CHUNK);
    let counts: Vec<usize> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut sub = rng.substream(&[c as u64]);
            let draws = ORTHANT_CHUNK.min(n_samples - c * ORTHANT_CHUNK);
            let mut z = vec![0.0; m];
            let mut hits = 0;
            for _ in 0..draws {
                // Coordinates of f = Lz are revealed in order; the first sign
                // mismatch rejects the draw without touching the rest.
                let mut inside = true;
                for i in 0..m {
                    z[i] = sub.normal();
                    let mut f = 0.0;
                    for j in 0..=i {
                        f += l[(i, j)] * z[j];
                    }
                    if crate::numerics::sign(f) != y[i] {
                        inside = false;
                        break;
                    }
                }
                hits += inside as usize;
            }
            hits
        })
        .collect();
    let hits: usize = counts.iter().sum();
    let n = n_samples as f64;
    if hits == 0 {
        let p = 3.0 / n;
        return Ok(OrthantEstimate {
            log_p: p.ln(),
            se: p,
            log_se: 1.0,
            n: n_samples,
            hits,
            method: OrthantMethod::MonteCarlo,
            zero_hits: true,
        });
    }
    let p = hits as f64 / n;
    let se = if hits == n_samples { 1.0 / n } else { (p * (1.0 - p) / n).sqrt() };
    Ok(OrthantEstimate {
        log_p: p.ln(),
        se,
        log_se: se / p,
        n: n_samples,
        hits,
        method: OrthantMethod::MonteCarlo,
        zero_hits: false,
    })
}

/// `|K|^{1/m}`, the per-coordinate variance of the spherised posterior.
pub fn spherised_variance(gram: &GramBundle) -> f64 {
    (gram.logdet() / gram.m() as f64).exp()
}

/// `A(k,X,Y) = m(log 2 − ½) + |K|^{1/m}[(½ − 1/π) tr K⁻¹ + (1/π) YᵀK⁻¹Y]`.
pub fn kernel_complexity(gram: &GramBundle, y: &DVector<f64>) -> Result<f64> {
    check_labels(y, gram.m())?;
    let m = gram.m() as f64;
    let chol = gram.chol();
    let s = spherised_variance(gram);
    let a = m * (LN_2 - 0.5) + s * ((0.5 - 1.0 / PI) * chol.inv_trace() + chol.inv_quad_form(y) / PI);
    if !a.is_finite() {
        return Err(Error::SingularGram { jitter: chol.jitter() });
    }
    Ok(a)
}

/// `(KL(Q_GP‖P), KL(Q_sph‖P)) = (log 1/P_Y, A)`.
///
/// Fails with `Consistency` when the Monte Carlo `log 1/P̂_Y` exceeds `A` by
/// more than three standard errors.
pub fn kl_values(gram: &GramBundle, y: &DVector<f64>, orthant: &OrthantEstimate) -> Result<(f64, f64)> {
    let a = kernel_complexity(gram, y)?;
    let kl_gp = orthant.log_inv_p();
    let slack = 3.0 * orthant.log_se + 1e-9 * a.abs().max(1.0);
    if kl_gp - slack > a {
        return Err(Error::Consistency(format!(
            "orthant KL {kl_gp} exceeds kernel complexity {a} beyond Monte Carlo error"
        )));
    }
    Ok((kl_gp, a))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundEntry {
    pub value: f64,
    pub inputs: BTreeMap<String, f64>,
    pub vacuous_flag: bool,
    /// Which posterior's classifier the bound certifies.
    pub posterior: String,
}

impl BoundEntry {
    pub fn new(value: f64, inputs: BTreeMap<String, f64>, posterior: &str) -> Self {
        Self {
            value,
            inputs,
            vacuous_flag: !(value < 1.0),
            posterior: posterior.to_string(),
        }
    }
}

/// Named bounds; serialises as a flat JSON object keyed by bound name.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BoundReport {
    pub bounds: BTreeMap<String, BoundEntry>,
}

impl BoundReport {
    pub fn get(&self, name: &str) -> Option<&BoundEntry> {
        self.bounds.get(name)
    }

    pub fn value(&self, name: &str) -> Option<f64> {
        self.get(name).map(|b| b.value)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub const GIBBS_GP_ORTHANT: &str = "gibbs_gp_orthant";
pub const GIBBS_GP_COMPLEXITY: &str = "gibbs_gp_complexity";
pub const GIBBS_SPH_COMPLEXITY: &str = "gibbs_sph_complexity";
pub const BPM_GP_ORTHANT: &str = "bpm_gp_orthant";
pub const BPM_GP_COMPLEXITY: &str = "bpm_gp_complexity";
pub const BPM_SPH_COMPLEXITY: &str = "bpm_sph_complexity";

/// Gibbs-classifier bounds for GP classification: the orthant bound, the
/// complexity relaxation for `Q_GP`, and the complexity bound for `Q_sph`.
///
/// `log 1/P_Y ≤ A` holds exactly, so a Monte Carlo estimate above `A` is
/// replaced by `A`; the input map records when that happened.
pub fn gp_pac_bayes_bounds(gram: &GramBundle, y: &DVector<f64>, orthant: &OrthantEstimate, delta: f64) -> Result<BoundReport> {
    let m = gram.m();
    let (kl_gp_raw, a) = kl_values(gram, y, orthant)?;
    let kl_gp = kl_gp_raw.min(a);
    let base = |kl: f64| -> BTreeMap<String, f64> {
        BTreeMap::from([
            ("m".to_string(), m as f64),
            ("delta".to_string(), delta),
            ("kl".to_string(), kl),
        ])
    };
    let mut orthant_inputs = base(kl_gp);
    orthant_inputs.insert("log_inv_p_estimate".into(), kl_gp_raw);
    orthant_inputs.insert("log_se".into(), orthant.log_se);
    orthant_inputs.insert("samples".into(), orthant.n as f64);
    orthant_inputs.insert("zero_hits".into(), orthant.zero_hits as u8 as f64);
    orthant_inputs.insert("clamped_to_complexity".into(), (kl_gp_raw > a) as u8 as f64);
    let mut report = BoundReport::default();
    report.bounds.insert(
        GIBBS_GP_ORTHANT.into(),
        BoundEntry::new(realisable_bound(kl_gp, m, delta)?, orthant_inputs, "gp"),
    );
    let ba = realisable_bound(a, m, delta)?;
    report
        .bounds
        .insert(GIBBS_GP_COMPLEXITY.into(), BoundEntry::new(ba, base(a), "gp"));
    report
        .bounds
        .insert(GIBBS_SPH_COMPLEXITY.into(), BoundEntry::new(ba, base(a), "spherised"));
    Ok(report)
}

/// Test-error bounds for the kernel interpolators of the centre-of-mass and
/// centroidal labels: `e` times the matching Gibbs bounds.
pub fn kernel_bpm_bounds(gram: &GramBundle, y: &DVector<f64>, orthant: &OrthantEstimate, delta: f64) -> Result<BoundReport> {
    let gibbs = gp_pac_bayes_bounds(gram, y, orthant, delta)?;
    let mut report = BoundReport::default();
    for (from, to) in [
        (GIBBS_GP_ORTHANT, BPM_GP_ORTHANT),
        (GIBBS_GP_COMPLEXITY, BPM_GP_COMPLEXITY),
        (GIBBS_SPH_COMPLEXITY, BPM_SPH_COMPLEXITY),
    ] {
        let g = &gibbs.bounds[from];
        let mut inputs = g.inputs.clone();
        inputs.insert("gibbs_bound".into(), g.value);
        report
            .bounds
            .insert(to.into(), BoundEntry::new(E * g.value, inputs, &g.posterior));
    }
    Ok(report)
}
