//! Deep linear networks, their architectural perturbation bounds and the
//! architecture-aware majorise-minimise update.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::network::{LossKind, Network, WeightTuple};
use crate::numerics::{frobenius_norm, spectral_norm_default, spectral_norm_exact, RngStream};

pub type DeepLinearNet = Network;

/// Relative tolerance for the `‖x‖ = √d_0` input constraint.
pub const SPHERE_TOL: f64 = 1e-8;

#[derive(Clone, Debug, Serialize)]
pub struct PerturbationBoundReport {
    pub first_order: f64,
    pub second_order: f64,
    pub output_scale: f64,
    pub relative_sizes: Vec<f64>,
    /// `‖Δf_X‖`
    pub measured_first: f64,
    /// `‖Δf_X − ∇_w f_X Δw‖`
    pub measured_second: f64,
}

pub fn check_sphere(x: &DMatrix<f64>) -> Result<()> {
    let r = (x.ncols() as f64).sqrt();
    for (i, row) in x.row_iter().enumerate() {
        let n = row.norm();
        if !((n - r).abs() <= SPHERE_TOL * r) {
            return Err(Error::InvalidInput(format!(
                "input {i} has norm {n}, expected √d0 = {r}"
            )));
        }
    }
    Ok(())
}

/// Rescale every row of `x` to norm `√d_0`.
pub fn project_to_sphere(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let r = (x.ncols() as f64).sqrt();
    let mut out = x.clone();
    for (i, mut row) in out.row_iter_mut().enumerate() {
        let n = row.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::InvalidInput(format!("input {i} cannot be projected")));
        }
        row *= r / n;
    }
    Ok(out)
}

/// `‖Y‖_F / √m`, constant for a dataset.
pub fn label_scale(targets: &DMatrix<f64>) -> f64 {
    targets.norm() / (targets.nrows() as f64).sqrt()
}

fn operator_norms(weights: &[DMatrix<f64>], exact: bool) -> Result<Vec<f64>> {
    weights
        .iter()
        .map(|w| {
            if exact {
                Ok(spectral_norm_exact(w))
            } else {
                spectral_norm_default(w)
            }
        })
        .collect()
}

fn rms_singular_value(w: &DMatrix<f64>) -> Result<f64> {
    Ok(frobenius_norm(w)? / (w.nrows().min(w.ncols()) as f64).sqrt())
}

/// `F(w) = √d_0 · Π_l ‖W_l‖_*`.
pub fn output_scale(net: &Network) -> Result<f64> {
    let norms = operator_norms(net.weights(), false)?;
    Ok((net.input_dim() as f64).sqrt() * norms.iter().product::<f64>())
}

/// Measured output perturbation against both product bounds, using exact
/// operator norms.
pub fn perturbation_bounds(
    net: &Network,
    delta: &[DMatrix<f64>],
    x: &DMatrix<f64>,
) -> Result<PerturbationBoundReport> {
    check_sphere(x)?;
    let norms = operator_norms(net.weights(), true)?;
    if let Some(l) = norms.iter().position(|n| *n == 0.0) {
        return Err(Error::DegenerateLayer(l + 1));
    }
    let moved = net.perturbed(delta)?;
    let rel: Vec<f64> = delta
        .iter()
        .zip(&norms)
        .map(|(d, n)| spectral_norm_exact(d) / n)
        .collect();
    let f = (net.input_dim() as f64).sqrt() * norms.iter().product::<f64>();
    let sqrt_m = (x.nrows() as f64).sqrt();
    // Elementary symmetric sums of the relative sizes, so that the product
    // expansion minus its low-order terms is formed without cancellation.
    let mut e = vec![0.0; rel.len() + 1];
    e[0] = 1.0;
    for (i, r) in rel.iter().enumerate() {
        for k in (1..=i + 1).rev() {
            e[k] += r * e[k - 1];
        }
    }
    let higher: f64 = e.iter().skip(2).sum();
    let sum = e.get(1).copied().unwrap_or(0.0);

    let f0 = net.forward_batch(x)?;
    let df = moved.forward_batch(x)? - &f0;
    let lin = net.tangent(x, delta)?;
    Ok(PerturbationBoundReport {
        first_order: sqrt_m * f * (sum + higher),
        second_order: sqrt_m * f * higher,
        output_scale: f,
        relative_sizes: rel,
        measured_first: df.norm(),
        measured_second: (df - lin).norm(),
    })
}

/// `(√m·F·(e^η − 1), √m·F·(e^η − η − 1))`.
pub fn ansatz_bounds(f: f64, eta: f64, m: usize) -> Result<(f64, f64)> {
    if !(eta >= 0.0) {
        return Err(Error::InvalidInput(format!("eta must be >= 0, got {eta}")));
    }
    let s = (m as f64).sqrt() * f;
    Ok((s * eta.exp_m1(), s * (eta.exp_m1() - eta)))
}

/// `½·F·(F + ‖Y‖/√m)·(e^{2η} − 2η − 1)`.
pub fn square_loss_majorisation_rhs(f: f64, y_norm: f64, m: usize, eta: f64) -> Result<f64> {
    if !(eta >= 0.0) {
        return Err(Error::InvalidInput(format!("eta must be >= 0, got {eta}")));
    }
    Ok(0.5 * f * (f + y_norm / (m as f64).sqrt()) * ((2.0 * eta).exp_m1() - 2.0 * eta))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Flavour {
    /// Operator-norm scales with the `η⋆` learning rate.
    OperatorNorm,
    /// RMS-singular-value scales and Frobenius gradient norms with `η†`.
    Conditioned,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EtaRule {
    ClosedForm,
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateRule {
    pub flavour: Flavour,
    pub eta: EtaRule,
    /// Divide the per-layer step by depth `L`.
    pub depth_scaled: bool,
}

impl UpdateRule {
    pub fn closed_form(flavour: Flavour) -> Self {
        Self {
            flavour,
            eta: EtaRule::ClosedForm,
            depth_scaled: true,
        }
    }

    pub fn fixed(flavour: Flavour, eta: f64) -> Self {
        Self {
            flavour,
            eta: EtaRule::Fixed(eta),
            depth_scaled: true,
        }
    }
}

struct LayerScales {
    /// Weight scale `s_l`.
    weight: Vec<f64>,
    /// Gradient normaliser `n_l`.
    grad: Vec<f64>,
    grad_fro: Vec<f64>,
}

fn layer_scales(net: &Network, grads: &[DMatrix<f64>], flavour: Flavour) -> Result<LayerScales> {
    if grads.len() != net.depth() {
        return Err(Error::DimensionMismatch {
            expected: net.depth(),
            got: grads.len(),
        });
    }
    let mut s = LayerScales {
        weight: Vec::with_capacity(grads.len()),
        grad: Vec::with_capacity(grads.len()),
        grad_fro: Vec::with_capacity(grads.len()),
    };
    for (l, (w, g)) in net.weights().iter().zip(grads).enumerate() {
        if g.shape() != w.shape() {
            return Err(Error::InvalidInput(format!("gradient {} has wrong shape", l + 1)));
        }
        let fro = frobenius_norm(g)?;
        if fro == 0.0 {
            return Err(Error::ZeroGradient(l + 1));
        }
        let (sw, ng) = match flavour {
            Flavour::OperatorNorm => (spectral_norm_default(w)?, spectral_norm_default(g)?),
            Flavour::Conditioned => (rms_singular_value(w)?, fro),
        };
        if sw == 0.0 {
            return Err(Error::DegenerateLayer(l + 1));
        }
        s.weight.push(sw);
        s.grad.push(ng);
        s.grad_fro.push(fro);
    }
    Ok(s)
}

fn closed_form_eta(net: &Network, s: &LayerScales, label_scale: f64) -> f64 {
    let depth = net.depth() as f64;
    let f = (net.input_dim() as f64).sqrt() * s.weight.iter().product::<f64>();
    let gain: f64 = s
        .weight
        .iter()
        .zip(&s.grad)
        .zip(&s.grad_fro)
        .map(|((sw, ng), gf)| sw * gf * gf / ng)
        .sum::<f64>()
        / depth;
    0.5 * (gain / (f * (f + label_scale))).ln_1p()
}

/// `η⋆ = ½ log(1 + [(1/L) Σ ‖W_l‖_* ‖∇_l‖_F²/‖∇_l‖_*] / [F(F + ‖Y‖/√m)])`.
pub fn eta_star(net: &Network, grads: &[DMatrix<f64>], label_scale: f64) -> Result<f64> {
    let s = layer_scales(net, grads, Flavour::OperatorNorm)?;
    Ok(closed_form_eta(net, &s, label_scale))
}

/// `η†`: `η⋆` with weights assumed well conditioned and gradients rank one.
/// The output scale is evaluated with RMS singular values in place of
/// operator norms.
pub fn eta_dagger(net: &Network, grads: &[DMatrix<f64>], label_scale: f64) -> Result<f64> {
    let s = layer_scales(net, grads, Flavour::Conditioned)?;
    Ok(closed_form_eta(net, &s, label_scale))
}

/// `W_l ← W_l − η·(1/L)·s_l·∇_l/n_l`; returns the new network and the `η` used.
pub fn architecture_aware_update(
    net: &Network,
    grads: &[DMatrix<f64>],
    label_scale: f64,
    rule: &UpdateRule,
) -> Result<(Network, f64)> {
    let s = layer_scales(net, grads, rule.flavour)?;
    let eta = match rule.eta {
        EtaRule::ClosedForm => closed_form_eta(net, &s, label_scale),
        EtaRule::Fixed(e) if e >= 0.0 && e.is_finite() => e,
        EtaRule::Fixed(e) => {
            return Err(Error::InvalidInput(format!("learning rate must be >= 0, got {e}")))
        }
    };
    let per_layer = if rule.depth_scaled {
        eta / net.depth() as f64
    } else {
        eta
    };
    let weights: WeightTuple = net
        .weights()
        .iter()
        .zip(grads)
        .zip(s.weight.iter().zip(&s.grad))
        .map(|((w, g), (sw, ng))| w - g * (per_layer * sw / ng))
        .collect();
    if weights.iter().any(|w| w.iter().any(|v| !v.is_finite())) {
        return Err(Error::Diverged("update produced non-finite weights".into()));
    }
    Ok((net.with_weights(weights)?, eta))
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub steps: usize,
    pub rule: UpdateRule,
    /// Minibatch size; `None` uses the full sample every step.
    pub batch: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub eta: f64,
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    /// Entry 0 is the initial loss; entry `k` is the loss after `k` updates.
    pub records: Vec<StepRecord>,
    pub diverged: bool,
    pub net: Network,
}

impl Trajectory {
    pub fn final_loss(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.loss)
    }
}

fn batch_rows(x: &DMatrix<f64>, y: &DMatrix<f64>, rows: &[usize]) -> (DMatrix<f64>, DMatrix<f64>) {
    (x.select_rows(rows), y.select_rows(rows))
}

/// Square-loss training with the architecture-aware update. Shared by the
/// deep linear and relu networks.
pub fn train_architecture_aware(
    net: &Network,
    x: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    cfg: &TrainConfig,
    rng: &mut RngStream,
) -> Result<Trajectory> {
    check_sphere(x)?;
    if targets.nrows() != x.nrows() {
        return Err(Error::DimensionMismatch {
            expected: x.nrows(),
            got: targets.nrows(),
        });
    }
    let m = x.nrows();
    if let Some(b) = cfg.batch {
        if b == 0 || b > m {
            return Err(Error::InvalidInput(format!("batch size {b} not in 1..={m}")));
        }
    }
    let scale = label_scale(targets);
    let mut current = net.clone();
    let mut records = vec![StepRecord {
        step: 0,
        loss: current.loss(x, targets, LossKind::Square)?,
        eta: 0.0,
    }];
    let mut diverged = !records[0].loss.is_finite();
    let mut step = 0;
    while !diverged && step < cfg.steps {
        step += 1;
        let grads = match cfg.batch {
            Some(b) if b < m => {
                let rows = rand::seq::index::sample(rng, m, b).into_vec();
                let (bx, by) = batch_rows(x, targets, &rows);
                current.loss_and_gradient(&bx, &by, LossKind::Square)?.1
            }
            _ => current.loss_and_gradient(x, targets, LossKind::Square)?.1,
        };
        let grads_finite = grads.iter().all(|g| g.iter().all(|v| v.is_finite()));
        let eta = if !grads_finite {
            diverged = true;
            f64::NAN
        } else {
            match architecture_aware_update(&current, &grads, scale, &cfg.rule) {
                Ok((next, eta)) => {
                    current = next;
                    eta
                }
                Err(Error::ZeroGradient(_)) => 0.0,
                Err(Error::Diverged(_)) => {
                    diverged = true;
                    f64::NAN
                }
                Err(e) => return Err(e),
            }
        };
        let loss = if diverged {
            f64::NAN
        } else {
            current.loss(x, targets, LossKind::Square)?
        };
        if !loss.is_finite() {
            diverged = true;
            log::debug!("training diverged at step {step}");
        }
        records.push(StepRecord { step, loss, eta });
    }
    Ok(Trajectory {
        records,
        diverged,
        net: current,
    })
}
