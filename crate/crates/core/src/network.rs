//! Layered networks `f(x) = W_L φ(W_{L-1} ⋯ φ(W_1 x))` shared by the deep
//! linear and relu code paths.
//!
//! Batches are stored with one sample per row, so a layer acts as
//! `H_l = φ(H_{l-1} W_lᵀ)` on an `m × d_{l-1}` input.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ensure_finite, gaussian_matrix, sign, RngStream};

const CHECKPOINT_MAGIC: &[u8; 4] = b"PMM1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    /// `√2·max(0, z)`
    ScaledRelu,
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::ScaledRelu => std::f64::consts::SQRT_2 * z.max(0.0),
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::ScaledRelu => {
                if z > 0.0 {
                    std::f64::consts::SQRT_2
                } else {
                    0.0
                }
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "scaled-relu" => Ok(Activation::ScaledRelu),
            "relu" => Ok(Activation::Relu),
            "identity" | "linear" => Ok(Activation::Identity),
            other => Err(Error::Config(format!("unknown nonlinearity `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LossKind {
    /// `(1/2m)‖f_X − Y‖²`
    Square,
    /// `(1/m) Σ log(1 + e^{−y f})`, scalar outputs only.
    Logistic,
    /// Square loss plus `λ Σ‖W_l‖_F²`.
    SquareL2(f64),
    /// `(1/m) Σ 𝟙[sign f ≠ y]`, scalar outputs only; not differentiable.
    ZeroOne,
}

/// Ordered tuple of layer matrices `W_l ∈ ℝ^{d_l × d_{l-1}}` plus a nonlinearity.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    weights: Vec<DMatrix<f64>>,
    activation: Activation,
}

pub type WeightTuple = Vec<DMatrix<f64>>;

struct Cache {
    /// `H_0 = X, H_1, …, H_{L-1}` (post-activation inputs to each layer).
    inputs: Vec<DMatrix<f64>>,
    /// Pre-activations `Z_1, …, Z_L`.
    pre: Vec<DMatrix<f64>>,
}

impl Network {
    pub fn new(weights: WeightTuple, activation: Activation) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidInput("network needs at least one layer".into()));
        }
        for (l, w) in weights.iter().enumerate() {
            ensure_finite(w, &format!("layer {}", l + 1))?;
            if w.nrows() == 0 || w.ncols() == 0 {
                return Err(Error::InvalidInput(format!("layer {} is empty", l + 1)));
            }
            if l > 0 && weights[l - 1].nrows() != w.ncols() {
                return Err(Error::DimensionMismatch {
                    expected: weights[l - 1].nrows(),
                    got: w.ncols(),
                });
            }
        }
        Ok(Self {
            weights,
            activation,
        })
    }

    pub fn linear(weights: WeightTuple) -> Result<Self> {
        Self::new(weights, Activation::Identity)
    }

    /// Gaussian weights with entry variance `1/max(d_l, d_{l-1})`, so every
    /// layer has root-mean-square singular value close to one.
    pub fn init_rms_one(widths: &[usize], activation: Activation, rng: &mut RngStream) -> Result<Self> {
        Self::init_gaussian(widths, activation, rng, |fan_out, fan_in| fan_out.max(fan_in))
    }

    /// Gaussian weights with entry variance `1/d_{l-1}`, the scaling under
    /// which wide scaled-relu networks converge to the arccosine-kernel GP.
    pub fn init_fan_in(widths: &[usize], activation: Activation, rng: &mut RngStream) -> Result<Self> {
        Self::init_gaussian(widths, activation, rng, |_, fan_in| fan_in)
    }

    fn init_gaussian(
        widths: &[usize],
        activation: Activation,
        rng: &mut RngStream,
        denom: impl Fn(usize, usize) -> usize,
    ) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidInput(format!("invalid widths {widths:?}")));
        }
        let weights = widths
            .windows(2)
            .map(|p| gaussian_matrix(rng, p[1], p[0], 1.0 / (denom(p[1], p[0]) as f64).sqrt()))
            .collect();
        Self::new(weights, activation)
    }

    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.weights[0].ncols()];
        w.extend(self.weights.iter().map(|m| m.nrows()));
        w
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights[self.depth() - 1].nrows()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &[DMatrix<f64>] {
        &self.weights
    }

    pub fn into_weights(self) -> WeightTuple {
        self.weights
    }

    /// Same architecture, new weights.
    pub fn with_weights(&self, weights: WeightTuple) -> Result<Self> {
        if weights.len() != self.depth()
            || weights
                .iter()
                .zip(&self.weights)
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::InvalidInput("weight tuple does not match architecture".into()));
        }
        Self::new(weights, self.activation)
    }

    pub fn perturbed(&self, delta: &[DMatrix<f64>]) -> Result<Self> {
        if delta.len() != self.depth() {
            return Err(Error::DimensionMismatch {
                expected: self.depth(),
                got: delta.len(),
            });
        }
        self.with_weights(self.weights.iter().zip(delta).map(|(w, d)| w + d).collect())
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            weights: self.weights.iter().map(|w| w * factor).collect(),
            activation: self.activation,
        }
    }

    fn check_input(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        ensure_finite(x, "inputs")
    }

    fn forward_cached(&self, x: &DMatrix<f64>) -> (DMatrix<f64>, Cache) {
        let depth = self.depth();
        let mut inputs = Vec::with_capacity(depth);
        let mut pre = Vec::with_capacity(depth);
        let mut h = x.clone();
        for (l, w) in self.weights.iter().enumerate() {
            let z = &h * w.transpose();
            inputs.push(h);
            h = if l + 1 < depth {
                z.map(|v| self.activation.apply(v))
            } else {
                z.clone()
            };
            pre.push(z);
        }
        (h, Cache { inputs, pre })
    }

    /// Outputs for a batch, `m × d_L`.
    pub fn forward_batch(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_input(x)?;
        Ok(self.forward_cached(x).0)
    }

    pub fn forward(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let row = DMatrix::from_row_slice(1, x.len(), x.as_slice());
        let out = self.forward_batch(&row)?;
        Ok(DVector::from_iterator(out.ncols(), out.iter().copied()))
    }

    /// Scalar-output convenience: `f_X` as a vector.
    pub fn project(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        let out = self.forward_batch(x)?;
        if out.ncols() != 1 {
            return Err(Error::InvalidInput(format!(
                "expected a scalar-output network, found {} outputs",
                out.ncols()
            )));
        }
        Ok(out.column(0).into_owned())
    }

    /// Forward-mode derivative `∇_w f_X Δw`.
    pub fn tangent(&self, x: &DMatrix<f64>, delta: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
        self.check_input(x)?;
        if delta.len() != self.depth() {
            return Err(Error::DimensionMismatch {
                expected: self.depth(),
                got: delta.len(),
            });
        }
        let (_, cache) = self.forward_cached(x);
        let depth = self.depth();
        let mut dh: DMatrix<f64> = DMatrix::zeros(x.nrows(), x.ncols());
        for l in 0..depth {
            let mut dz = &dh * self.weights[l].transpose() + &cache.inputs[l] * delta[l].transpose();
            if l + 1 < depth {
                dz.zip_apply(&cache.pre[l], |d, z| *d *= self.activation.derivative(z));
            }
            dh = dz;
        }
        Ok(dh)
    }

    /// Loss value and exact gradient with respect to every layer.
    pub fn loss_and_gradient(
        &self,
        x: &DMatrix<f64>,
        targets: &DMatrix<f64>,
        kind: LossKind,
    ) -> Result<(f64, WeightTuple)> {
        self.check_input(x)?;
        let (out, cache) = self.forward_cached(x);
        let (value, mut g) = output_loss(&out, targets, kind)?;
        let depth = self.depth();
        let mut grads = vec![DMatrix::zeros(0, 0); depth];
        for l in (0..depth).rev() {
            grads[l] = g.transpose() * &cache.inputs[l];
            if l > 0 {
                let mut prev = &g * &self.weights[l];
                prev.zip_apply(&cache.pre[l - 1], |d, z| *d *= self.activation.derivative(z));
                g = prev;
            }
        }
        let mut value = value;
        if let LossKind::SquareL2(lambda) = kind {
            for (gl, w) in grads.iter_mut().zip(&self.weights) {
                *gl += w * (2.0 * lambda);
                value += lambda * w.norm_squared();
            }
        }
        Ok((value, grads))
    }

    pub fn loss(&self, x: &DMatrix<f64>, targets: &DMatrix<f64>, kind: LossKind) -> Result<f64> {
        let out = self.forward_batch(x)?;
        let mut value = output_loss_value(&out, targets, kind)?;
        if let LossKind::SquareL2(lambda) = kind {
            value += lambda * self.weights.iter().map(|w| w.norm_squared()).sum::<f64>();
        }
        Ok(value)
    }

    pub fn predict_labels(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        Ok(self.project(x)?.map(sign))
    }

    /// Little-endian record: magic, depth, widths, row-major weights.
    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&(self.depth() as u32).to_le_bytes())?;
        for w in self.widths() {
            out.write_all(&(w as u32).to_le_bytes())?;
        }
        for w in &self.weights {
            for i in 0..w.nrows() {
                for j in 0..w.ncols() {
                    out.write_all(&w[(i, j)].to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut input: R, activation: Activation) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut input, &mut magic, "checkpoint magic")?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
        }
        let depth = read_u32(&mut input)? as usize;
        if depth == 0 {
            return Err(Error::Format("checkpoint declares zero layers".into()));
        }
        let widths = (0..=depth)
            .map(|_| read_u32(&mut input).map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let mut weights = Vec::with_capacity(depth);
        for p in widths.windows(2) {
            let (rows, cols) = (p[1], p[0]);
            let mut data = Vec::with_capacity(rows * cols);
            let mut buf = [0u8; 8];
            for _ in 0..rows * cols {
                read_exact(&mut input, &mut buf, "checkpoint weights")?;
                data.push(f64::from_le_bytes(buf));
            }
            weights.push(DMatrix::from_row_slice(rows, cols, &data));
        }
        Self::new(weights, activation)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_checkpoint(std::io::BufWriter::new(file))
    }

    pub fn load(path: &Path, activation: Activation) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_checkpoint(std::io::BufReader::new(file), activation)
    }
}

fn read_exact<R: Read>(input: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    input.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Length(format!("{what} ended early")),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(input, &mut b, "checkpoint header")?;
    Ok(u32::from_le_bytes(b))
}

fn check_targets(out: &DMatrix<f64>, targets: &DMatrix<f64>) -> Result<()> {
    if out.shape() != targets.shape() {
        return Err(Error::DimensionMismatch {
            expected: out.len(),
            got: targets.len(),
        });
    }
    if out.nrows() == 0 {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    Ok(())
}

/// `log(1 + e^{−z})` without overflow.
pub fn softplus_neg(z: f64) -> f64 {
    if z > 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

fn output_loss_value(out: &DMatrix<f64>, targets: &DMatrix<f64>, kind: LossKind) -> Result<f64> {
    check_targets(out, targets)?;
    let m = out.nrows() as f64;
    Ok(match kind {
        LossKind::Square | LossKind::SquareL2(_) => (out - targets).norm_squared() / (2.0 * m),
        LossKind::Logistic => {
            scalar_only(out)?;
            out.iter().zip(targets.iter()).map(|(f, y)| softplus_neg(y * f)).sum::<f64>() / m
        }
        LossKind::ZeroOne => {
            scalar_only(out)?;
            out.iter()
                .zip(targets.iter())
                .filter(|(f, y)| sign(**f) != **y)
                .count() as f64
                / m
        }
    })
}

fn output_loss(
    out: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    kind: LossKind,
) -> Result<(f64, DMatrix<f64>)> {
    let value = output_loss_value(out, targets, kind)?;
    let m = out.nrows() as f64;
    let grad = match kind {
        LossKind::Square | LossKind::SquareL2(_) => (out - targets) / m,
        LossKind::Logistic => out.zip_map(targets, |f, y| {
            // d/df log(1 + e^{−yf}) = −y / (1 + e^{yf})
            -y / (1.0 + (y * f).exp()) / m
        }),
        LossKind::ZeroOne => {
            return Err(Error::InvalidInput("zero-one loss has no gradient".into()))
        }
    };
    Ok((value, grad))
}

fn scalar_only(out: &DMatrix<f64>) -> Result<()> {
    if out.ncols() == 1 {
        Ok(())
    } else {
        Err(Error::InvalidInput("loss needs a scalar-output network".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere_batch(rng: &mut RngStream, m: usize, d: usize) -> DMatrix<f64> {
        let mut x = gaussian_matrix(rng, m, d, 1.0);
        for mut row in x.row_iter_mut() {
            let n = row.norm();
            row *= (d as f64).sqrt() / n;
        }
        x
    }

    fn straight_line(net: &Network, x: &DVector<f64>) -> DVector<f64> {
        let mut h = x.clone();
        for (l, w) in net.weights().iter().enumerate() {
            let mut z = DVector::zeros(w.nrows());
            for i in 0..w.nrows() {
                let mut acc = 0.0;
                for j in 0..w.ncols() {
                    acc += w[(i, j)] * h[j];
                }
                z[i] = acc;
            }
            if l + 1 < net.depth() {
                for v in z.iter_mut() {
                    *v = net.activation().apply(*v);
                }
            }
            h = z;
        }
        h
    }

    #[test]
    fn forward_matches_straight_line_evaluator() {
        let mut rng = RngStream::new(1, 0);
        let net = Network::init_rms_one(&[5, 7, 6, 3], Activation::ScaledRelu, &mut rng).unwrap();
        for _ in 0..20 {
            let x = DVector::from_fn(5, |_, _| rng.normal());
            let a = net.forward(&x).unwrap();
            let b = straight_line(&net, &x);
            assert!((a - b).amax() <= 1e-12);
        }
    }

    #[test]
    fn relu_kills_negative_preactivations() {
        let w1 = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let w2 = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let net = Network::new(vec![w1, w2], Activation::Relu).unwrap();
        let out = net.forward(&DVector::from_vec(vec![-1.0, -2.0])).unwrap();
        assert_eq!(out[0], 0.0);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let bad = Network::linear(vec![DMatrix::zeros(3, 2), DMatrix::zeros(1, 4)]);
        assert!(matches!(bad, Err(Error::DimensionMismatch { .. })));
        let net = Network::linear(vec![DMatrix::identity(2, 2)]).unwrap();
        assert!(net.forward(&DVector::zeros(3)).is_err());
    }

    #[test]
    fn tangent_matches_directional_difference() {
        let mut rng = RngStream::new(2, 0);
        let net = Network::init_rms_one(&[4, 6, 5, 2], Activation::Relu, &mut rng).unwrap();
        let x = sphere_batch(&mut rng, 3, 4);
        let delta: WeightTuple = net
            .weights()
            .iter()
            .map(|w| gaussian_matrix(&mut rng, w.nrows(), w.ncols(), 1.0))
            .collect();
        let t = net.tangent(&x, &delta).unwrap();
        let h = 1e-6;
        let scaled: WeightTuple = delta.iter().map(|d| d * h).collect();
        let neg: WeightTuple = delta.iter().map(|d| d * -h).collect();
        let fd = (net.perturbed(&scaled).unwrap().forward_batch(&x).unwrap()
            - net.perturbed(&neg).unwrap().forward_batch(&x).unwrap())
            / (2.0 * h);
        assert!((t - &fd).amax() <= 1e-6 * fd.amax().max(1.0));
    }

    #[test]
    fn logistic_of_zero_output_is_log_two() {
        let net = Network::linear(vec![DMatrix::zeros(1, 3)]).unwrap();
        let x = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let y = DMatrix::from_column_slice(2, 1, &[1.0, -1.0]);
        let v = net.loss(&x, &y, LossKind::Logistic).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn zero_one_and_square_on_perfect_fit() {
        let net = Network::linear(vec![DMatrix::from_row_slice(1, 2, &[1.0, 0.0])]).unwrap();
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, -1.0, 0.0]);
        let y = DMatrix::from_column_slice(2, 1, &[1.0, -1.0]);
        assert_eq!(net.loss(&x, &y, LossKind::ZeroOne).unwrap(), 0.0);
        assert_eq!(net.loss(&x, &y, LossKind::Square).unwrap(), 0.0);
        let (_, g) = net.loss_and_gradient(&x, &y, LossKind::Square).unwrap();
        assert!(g.iter().all(|m| m.amax() == 0.0));
    }

    #[test]
    fn square_loss_matches_projected_form() {
        let mut rng = RngStream::new(3, 0);
        let net = Network::init_rms_one(&[3, 4, 1], Activation::ScaledRelu, &mut rng).unwrap();
        let x = sphere_batch(&mut rng, 5, 3);
        let y = DMatrix::from_fn(5, 1, |_, _| rng.normal());
        let f = net.project(&x).unwrap();
        let direct: f64 = f.iter().zip(y.iter()).map(|(a, b)| 0.5 * (a - b).powi(2)).sum::<f64>() / 5.0;
        let projected = (&f - y.column(0)).norm_squared() / 10.0;
        let v = net.loss(&x, &y, LossKind::Square).unwrap();
        assert!((v - direct).abs() < 1e-14 && (v - projected).abs() < 1e-14);
    }

    #[test]
    fn l2_penalty_gradient_is_two_lambda_w() {
        let mut rng = RngStream::new(4, 0);
        let net = Network::init_rms_one(&[3, 4, 1], Activation::Relu, &mut rng).unwrap();
        let x = sphere_batch(&mut rng, 5, 3);
        let y = DMatrix::from_fn(5, 1, |i, _| if i % 2 == 0 { 1.0 } else { -1.0 });
        let (_, g0) = net.loss_and_gradient(&x, &y, LossKind::Square).unwrap();
        let (_, g1) = net.loss_and_gradient(&x, &y, LossKind::SquareL2(0.3)).unwrap();
        for ((a, b), w) in g0.iter().zip(&g1).zip(net.weights()) {
            assert!((b - a - w * 0.6).amax() < 1e-14);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = RngStream::new(5, 0);
        let net = Network::init_rms_one(&[3, 4, 2], Activation::ScaledRelu, &mut rng).unwrap();
        let mut buf = Vec::new();
        net.write_checkpoint(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"PMM1");
        assert_eq!(buf.len(), 4 + 4 + 3 * 4 + 8 * (12 + 8));
        let back = Network::read_checkpoint(&buf[..], Activation::ScaledRelu).unwrap();
        assert_eq!(back, net);
        assert!(matches!(
            Network::read_checkpoint(&buf[..buf.len() - 3], Activation::ScaledRelu),
            Err(Error::Length(_))
        ));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            Network::read_checkpoint(&bad[..], Activation::ScaledRelu),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn init_is_reproducible_and_has_expected_variance() {
        let a = Network::init_rms_one(&[128, 256, 64, 1], Activation::ScaledRelu, &mut RngStream::new(9, 1))
            .unwrap();
        let b = Network::init_rms_one(&[128, 256, 64, 1], Activation::ScaledRelu, &mut RngStream::new(9, 1))
            .unwrap();
        assert_eq!(a, b);
        for w in a.weights() {
            let rms = w.norm() / (w.nrows().min(w.ncols()) as f64).sqrt();
            assert!((rms - 1.0).abs() < 0.2, "{rms}");
        }
        let c = Network::init_fan_in(&[128, 256, 1], Activation::ScaledRelu, &mut RngStream::new(9, 1)).unwrap();
        let w = &c.weights()[0];
        let var = w.norm_squared() / w.len() as f64;
        assert!((var * 128.0 - 1.0).abs() < 0.05);
    }
}
