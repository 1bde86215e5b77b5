//! Finite-width relu multilayer perceptrons: normalised margins, gradient
//! checking and the two training regimes used by the experiments.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::deep_linear::{check_sphere, EtaRule, train_architecture_aware, TrainConfig, Trajectory, UpdateRule};
use crate::error::{Error, Result};
use crate::network::{LossKind, Network, WeightTuple};
use crate::numerics::{frobenius_norm, spectral_norm_default, RngStream};

pub type MlpNet = Network;

#[derive(Clone, Debug, Serialize)]
pub struct MarginReport {
    /// `ρ⋆`
    pub spectral: f64,
    /// `ρ_F`
    pub frobenius: f64,
    /// `min y·f(x)`
    pub raw: f64,
    pub spectral_norms: Vec<f64>,
    /// `‖W_l‖_F / √min(d_l, d_{l-1})`
    pub rms_norms: Vec<f64>,
}

/// Spectrally- and Frobenius-normalised margins of a scalar-output network.
pub fn margins(net: &Network, x: &DMatrix<f64>, y: &[f64]) -> Result<MarginReport> {
    check_sphere(x)?;
    if y.len() != x.nrows() {
        return Err(Error::DimensionMismatch {
            expected: x.nrows(),
            got: y.len(),
        });
    }
    let f = net.project(x)?;
    let mut spectral_norms = Vec::with_capacity(net.depth());
    let mut rms_norms = Vec::with_capacity(net.depth());
    for (l, w) in net.weights().iter().enumerate() {
        let s = spectral_norm_default(w)?;
        let r = frobenius_norm(w)? / (w.nrows().min(w.ncols()) as f64).sqrt();
        if s == 0.0 || r == 0.0 {
            return Err(Error::DegenerateLayer(l + 1));
        }
        spectral_norms.push(s);
        rms_norms.push(r);
    }
    let mut raw = f64::INFINITY;
    let mut scaled = f64::INFINITY;
    for (i, (fi, yi)) in f.iter().zip(y).enumerate() {
        let norm = x.row(i).norm();
        raw = raw.min(fi * yi);
        scaled = scaled.min(fi * yi / norm);
    }
    Ok(MarginReport {
        spectral: scaled / spectral_norms.iter().product::<f64>(),
        frobenius: scaled / rms_norms.iter().product::<f64>(),
        raw,
        spectral_norms,
        rms_norms,
    })
}

/// Worst relative disagreement between backprop and central differences
/// (step `1e-5`) over `coords` random entries of every layer.
///
/// The error at an entry is `|fd − g| / max(|fd|, |g|, 1e-2·max_l|g|)`, so
/// entries far below the layer's gradient scale are judged against that scale.
pub fn gradient_check(
    net: &Network,
    x: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    kind: LossKind,
    coords: usize,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    use rand::Rng;
    let (_, grads) = net.loss_and_gradient(x, targets, kind)?;
    let step = 1e-5;
    let mut worst = Vec::with_capacity(net.depth());
    for (l, g) in grads.iter().enumerate() {
        let floor = 1e-2 * g.amax();
        let mut err: f64 = 0.0;
        for _ in 0..coords {
            let i = rng.random_range(0..g.nrows());
            let j = rng.random_range(0..g.ncols());
            let mut plus: WeightTuple = net.weights().to_vec();
            let mut minus = plus.clone();
            plus[l][(i, j)] += step;
            minus[l][(i, j)] -= step;
            let fp = net.with_weights(plus)?.loss(x, targets, kind)?;
            let fm = net.with_weights(minus)?.loss(x, targets, kind)?;
            let fd = (fp - fm) / (2.0 * step);
            let denom = fd.abs().max(g[(i, j)].abs()).max(floor);
            if denom > 0.0 {
                err = err.max((fd - g[(i, j)]).abs() / denom);
            }
        }
        worst.push(err);
    }
    Ok(worst)
}

/// Square-loss training with the architecture-aware update; identical to the
/// deep linear trainer when the nonlinearity is the identity.
pub fn train_mlp(
    net: &Network,
    x: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    cfg: &TrainConfig,
    rng: &mut RngStream,
) -> Result<Trajectory> {
    train_architecture_aware(net, x, targets, cfg, rng)
}

#[derive(Clone, Debug)]
pub struct MarginFitConfig {
    pub gamma: f64,
    pub steps: usize,
    pub rule: UpdateRule,
    /// Fixed Frobenius radius per layer; `None` keeps the initial norms.
    pub radii: Option<Vec<f64>>,
    /// Training counts as an interpolating fit when every `y·f ≥ fit_fraction·γ`.
    pub fit_fraction: f64,
    /// Decay a fixed `η` linearly to zero over the run.
    pub anneal: bool,
}

#[derive(Clone, Debug)]
pub struct MarginFit {
    pub net: Network,
    pub losses: Vec<f64>,
    pub interpolates: bool,
    pub warning: Option<String>,
}

/// Fit `γ·Y` under square loss, rescaling every layer back to its fixed
/// Frobenius radius after each step.
pub fn train_margin_projected(
    net: &Network,
    x: &DMatrix<f64>,
    y: &[f64],
    cfg: &MarginFitConfig,
) -> Result<MarginFit> {
    check_sphere(x)?;
    if !(cfg.gamma >= 0.0) {
        return Err(Error::InvalidInput(format!("gamma must be >= 0, got {}", cfg.gamma)));
    }
    if y.len() != x.nrows() {
        return Err(Error::DimensionMismatch {
            expected: x.nrows(),
            got: y.len(),
        });
    }
    let radii = match &cfg.radii {
        Some(r) if r.len() == net.depth() && r.iter().all(|v| *v > 0.0) => r.clone(),
        Some(_) => return Err(Error::InvalidInput("one positive radius per layer required".into())),
        None => net.weights().iter().map(|w| w.norm()).collect(),
    };
    let targets = DMatrix::from_iterator(y.len(), 1, y.iter().map(|v| v * cfg.gamma));
    let mut current = project_radii(net, &radii)?;
    let scale = crate::deep_linear::label_scale(&targets);
    let mut losses = vec![current.loss(x, &targets, LossKind::Square)?];
    for k in 0..cfg.steps {
        let (_, grads) = current.loss_and_gradient(x, &targets, LossKind::Square)?;
        let mut rule = cfg.rule;
        if let (true, EtaRule::Fixed(eta)) = (cfg.anneal, rule.eta) {
            rule.eta = EtaRule::Fixed(eta * (1.0 - k as f64 / cfg.steps as f64));
        }
        match crate::deep_linear::architecture_aware_update(&current, &grads, scale, &rule) {
            Ok((next, _)) => current = project_radii(&next, &radii)?,
            Err(Error::ZeroGradient(_)) => {}
            Err(e) => return Err(e),
        }
        let loss = current.loss(x, &targets, LossKind::Square)?;
        losses.push(loss);
        if !loss.is_finite() {
            return Err(Error::Diverged("projected training produced a non-finite loss".into()));
        }
    }
    let f = current.project(x)?;
    let interpolates = cfg.gamma > 0.0
        && f.iter()
            .zip(y)
            .all(|(fi, yi)| fi * yi >= cfg.fit_fraction * cfg.gamma);
    let warning = (!interpolates).then(|| {
        format!(
            "did not interpolate γ = {} (final square loss {:.3e})",
            cfg.gamma,
            losses.last().copied().unwrap_or(f64::NAN)
        )
    });
    if let Some(w) = &warning {
        log::warn!("{w}");
    }
    Ok(MarginFit {
        net: current,
        losses,
        interpolates,
        warning,
    })
}

fn project_radii(net: &Network, radii: &[f64]) -> Result<Network> {
    let weights = net
        .weights()
        .iter()
        .zip(radii)
        .enumerate()
        .map(|(l, (w, r))| {
            let n = w.norm();
            if n == 0.0 {
                Err(Error::DegenerateLayer(l + 1))
            } else {
                Ok(w * (r / n))
            }
        })
        .collect::<Result<WeightTuple>>()?;
    net.with_weights(weights)
}
