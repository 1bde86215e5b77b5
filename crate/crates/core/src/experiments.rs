//! Desk-scale experiment drivers: learning-rate transfer, margin
//! concentration, classification-strategy comparison, NNGP check, bound
//! report and a self test. Every grid cell draws from its own stream, keyed by
//! its coordinates, and rows are emitted in grid order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::bpm::{strategy_errors, strategy_predict, write_predictions_csv, PosteriorKind, PosteriorSampler, Strategy};
use crate::config::ConfigFile;
use crate::data::{load_idx, preprocess, synth_teacher_data, SynthSpec, TrainSample};
use crate::deep_linear::{project_to_sphere, train_architecture_aware, Flavour, TrainConfig, UpdateRule};
use crate::error::{Error, Result};
use crate::kernel::{concentration_sample, gp_condition, min_norm_interpolate, nngp_empirical_kernel, GpPosterior, GramBundle, Kernel, NngpMethod};
use crate::mlp::{margins, train_margin_projected, MarginFitConfig};
use crate::network::{Activation, Network};
use crate::numerics::{gaussian_matrix, mean_and_std_error, sign, stream_id_for, RngStream};
use crate::pac_bayes::{
    MIN_ORTHANT_SAMPLES,
    kernel_bpm_bounds, gp_pac_bayes_bounds, kl_inverse_bound, orthant_prob, pac_bayes_cap, stability_bound, vc_bound,
    BoundEntry, BoundInputs, BoundReport, BPM_SPH_COMPLEXITY, GIBBS_SPH_COMPLEXITY,
};

const TAG_DATA: u64 = 0;
const TAG_LR: u64 = 1;
const TAG_MARGIN_GP: u64 = 2;
const TAG_MARGIN_NET: u64 = 3;
const TAG_STRATEGY: u64 = 4;
const TAG_NNGP: u64 = 5;
const TAG_BOUNDS: u64 = 6;
const TAG_STRATEGY_NET: u64 = 7;
const TAG_SELFTEST: u64 = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    LrTransfer,
    MarginSweep,
    StrategyCompare,
    NngpCheck,
    Bounds,
    Selftest,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 6] = [
        ExperimentKind::LrTransfer,
        ExperimentKind::MarginSweep,
        ExperimentKind::StrategyCompare,
        ExperimentKind::NngpCheck,
        ExperimentKind::Bounds,
        ExperimentKind::Selftest,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::LrTransfer => "lr-transfer",
            ExperimentKind::MarginSweep => "margin-sweep",
            ExperimentKind::StrategyCompare => "strategy-compare",
            ExperimentKind::NngpCheck => "nngp-check",
            ExperimentKind::Bounds => "bounds",
            ExperimentKind::Selftest => "selftest",
        }
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case", tag = "source")]
pub enum DataSource {
    Synthetic(SynthSpec),
    Idx {
        images: PathBuf,
        labels: PathBuf,
        digits: (u8, u8),
        m_train: usize,
        m_test: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DataConfig {
    pub source: DataSource,
    /// Seed for the dataset draw, separate from the run seeds.
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LrTransferConfig {
    pub widths: Vec<usize>,
    pub depths: Vec<usize>,
    pub log2_etas: Vec<i32>,
    pub steps: usize,
    /// Run with the `1/L` factor (`true`), without it (`false`), or both.
    pub depth_scaled: Vec<bool>,
    pub batch: Option<usize>,
}

impl Default for LrTransferConfig {
    fn default() -> Self {
        Self {
            widths: vec![32, 128, 512],
            depths: vec![2, 4, 6],
            log2_etas: (-12..=0).collect(),
            steps: 30,
            depth_scaled: vec![true, false],
            batch: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MarginConfig {
    pub kernel_depth: usize,
    /// NNGP normalised margins `γ/τ`.
    pub gamma_over_tau: Vec<f64>,
    pub ensemble_sizes: Vec<usize>,
    /// Disjoint ensembles of the largest size drawn per margin.
    pub repeats: usize,
    pub finite: bool,
    pub width: usize,
    pub depth: usize,
    /// Target margins `γ` for the finite networks.
    pub gammas: Vec<f64>,
    pub steps: usize,
    pub log2_eta: i32,
    pub nets: usize,
}

impl Default for MarginConfig {
    fn default() -> Self {
        Self {
            kernel_depth: 3,
            gamma_over_tau: vec![1.0, 10.0, 100.0, 1000.0],
            ensemble_sizes: vec![1, 9, 81],
            repeats: 20,
            finite: true,
            width: 256,
            depth: 3,
            gammas: vec![0.05, 5.0],
            steps: 300,
            log2_eta: -3,
            nets: 81,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StrategyConfig {
    pub kernel_depth: usize,
    pub m_values: Vec<usize>,
    pub vote: usize,
    pub delta: f64,
    pub orthant_samples: usize,
    pub predictions: bool,
    /// Finite networks per strategy; `0` skips the network path.
    pub finite_nets: usize,
    pub width: usize,
    pub depth: usize,
    pub small_gamma: f64,
    pub large_gamma: f64,
    pub steps: usize,
    pub log2_eta: i32,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            kernel_depth: 3,
            m_values: vec![25, 50, 100, 200],
            vote: 501,
            delta: 0.05,
            orthant_samples: 100_000,
            predictions: true,
            finite_nets: 0,
            width: 256,
            depth: 3,
            small_gamma: 0.05,
            large_gamma: 5.0,
            steps: 300,
            log2_eta: -3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NngpConfig {
    pub width: usize,
    pub depth: usize,
    pub samples: usize,
    pub points: usize,
    pub d0: usize,
}

impl Default for NngpConfig {
    fn default() -> Self {
        Self {
            width: 4096,
            depth: 3,
            samples: 10_000,
            points: 8,
            d0: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundsConfig {
    pub m: usize,
    pub kernel_depth: usize,
    pub delta: f64,
    pub orthant_samples: usize,
    pub train_error: Option<f64>,
    pub log_shattering: Option<f64>,
    pub beta: Option<f64>,
}

impl Default for BoundsConfig {
    fn default() -> Self {
        Self {
            m: 100,
            kernel_depth: 3,
            delta: 0.05,
            orthant_samples: 1_000_000,
            train_error: None,
            log_shattering: None,
            beta: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub name: Option<ExperimentKind>,
    pub seeds: Vec<u64>,
    /// Where results go; not part of the hashed configuration.
    #[serde(skip)]
    pub out: PathBuf,
    pub data: DataConfig,
    pub lr_transfer: LrTransferConfig,
    pub margin: MarginConfig,
    pub strategy: StrategyConfig,
    pub nngp: NngpConfig,
    pub bounds: BoundsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: None,
            seeds: vec![0, 1, 2],
            out: PathBuf::from("results"),
            data: DataConfig {
                source: DataSource::Synthetic(SynthSpec::default()),
                seed: 0,
            },
            lr_transfer: LrTransferConfig::default(),
            margin: MarginConfig::default(),
            strategy: StrategyConfig::default(),
            nngp: NngpConfig::default(),
            bounds: BoundsConfig::default(),
        }
    }
}

const SECTIONS: [&str; 7] = [
    "experiment",
    "data",
    "lr-transfer",
    "margin-sweep",
    "strategy-compare",
    "nngp-check",
    "bounds",
];

fn cfg_err<T>(msg: String) -> Result<T> {
    Err(Error::Config(msg))
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_config(&ConfigFile::load(path)?)
    }

    pub fn from_config(c: &ConfigFile) -> Result<Self> {
        for s in c.section_names() {
            if !SECTIONS.contains(&s) {
                return cfg_err(format!("unknown section `[{s}]`"));
            }
        }
        let mut cfg = ExperimentConfig::default();

        c.check_keys("experiment", &["name", "seeds", "out"])?;
        cfg.name = c.get("experiment", "name")?;
        cfg.seeds = c.list_or("experiment", "seeds", cfg.seeds)?;
        if let Some(out) = c.get::<String>("experiment", "out")? {
            cfg.out = PathBuf::from(out);
        }

        c.check_keys(
            "data",
            &["source", "seed", "d0", "m_train", "m_test", "teacher_depth", "teacher_width", "images", "labels", "digits"],
        )?;
        cfg.data.seed = c.get_or("data", "seed", 0)?;
        let def = SynthSpec::default();
        let m_train = c.get_or("data", "m_train", def.m_train)?;
        let m_test = c.get_or("data", "m_test", def.m_test)?;
        let source: String = c.get_or("data", "source", "synthetic".to_string())?;
        cfg.data.source = match source.as_str() {
            "synthetic" => {
                for k in ["images", "labels", "digits"] {
                    if c.raw("data", k).is_some() {
                        return cfg_err(format!("`data.{k}` only applies to source = idx"));
                    }
                }
                DataSource::Synthetic(SynthSpec {
                    d0: c.get_or("data", "d0", def.d0)?,
                    m_train,
                    m_test,
                    teacher_depth: c.get_or("data", "teacher_depth", def.teacher_depth)?,
                    teacher_width: c.get_or("data", "teacher_width", def.teacher_width)?,
                })
            }
            "idx" => {
                let path = |k: &str| -> Result<PathBuf> {
                    let p: String = c
                        .get("data", k)?
                        .ok_or_else(|| Error::Config(format!("source = idx needs `data.{k}`")))?;
                    let p = PathBuf::from(p);
                    if !p.is_file() {
                        return cfg_err(format!("`data.{k}`: {} does not exist", p.display()));
                    }
                    Ok(p)
                };
                let digits: Vec<u8> = c
                    .list("data", "digits")?
                    .ok_or_else(|| Error::Config("source = idx needs `data.digits`".into()))?;
                if digits.len() != 2 || digits[0] == digits[1] {
                    return cfg_err("`data.digits` must name two different classes".into());
                }
                DataSource::Idx {
                    images: path("images")?,
                    labels: path("labels")?,
                    digits: (digits[0], digits[1]),
                    m_train,
                    m_test,
                }
            }
            other => return cfg_err(format!("`data.source` must be synthetic or idx, got `{other}`")),
        };

        let s = "lr-transfer";
        c.check_keys(s, &["widths", "depths", "log2_eta", "steps", "depth_scaled", "batch"])?;
        let lr = &mut cfg.lr_transfer;
        lr.widths = c.list_or(s, "widths", lr.widths.clone())?;
        lr.depths = c.list_or(s, "depths", lr.depths.clone())?;
        lr.log2_etas = c.list_or(s, "log2_eta", lr.log2_etas.clone())?;
        lr.steps = c.get_or(s, "steps", lr.steps)?;
        lr.depth_scaled = c.list_or(s, "depth_scaled", lr.depth_scaled.clone())?;
        lr.batch = c.get(s, "batch")?;

        let s = "margin-sweep";
        c.check_keys(
            s,
            &["kernel_depth", "gamma_over_tau", "ensemble_sizes", "repeats", "finite", "width", "depth", "gammas", "steps", "log2_eta", "nets"],
        )?;
        let mg = &mut cfg.margin;
        mg.kernel_depth = c.get_or(s, "kernel_depth", mg.kernel_depth)?;
        mg.gamma_over_tau = c.list_or(s, "gamma_over_tau", mg.gamma_over_tau.clone())?;
        mg.ensemble_sizes = c.list_or(s, "ensemble_sizes", mg.ensemble_sizes.clone())?;
        mg.repeats = c.get_or(s, "repeats", mg.repeats)?;
        mg.finite = c.get_or(s, "finite", mg.finite)?;
        mg.width = c.get_or(s, "width", mg.width)?;
        mg.depth = c.get_or(s, "depth", mg.depth)?;
        mg.gammas = c.list_or(s, "gammas", mg.gammas.clone())?;
        mg.steps = c.get_or(s, "steps", mg.steps)?;
        mg.log2_eta = c.get_or(s, "log2_eta", mg.log2_eta)?;
        mg.nets = c.get_or(s, "nets", mg.nets)?;

        let s = "strategy-compare";
        c.check_keys(
            s,
            &[
                "kernel_depth", "m", "vote", "delta", "orthant_samples", "predictions", "finite_nets", "width", "depth",
                "small_gamma", "large_gamma", "steps", "log2_eta",
            ],
        )?;
        let st = &mut cfg.strategy;
        st.kernel_depth = c.get_or(s, "kernel_depth", st.kernel_depth)?;
        st.m_values = c.list_or(s, "m", st.m_values.clone())?;
        st.vote = c.get_or(s, "vote", st.vote)?;
        st.delta = c.get_or(s, "delta", st.delta)?;
        st.orthant_samples = c.get_or(s, "orthant_samples", st.orthant_samples)?;
        st.predictions = c.get_or(s, "predictions", st.predictions)?;
        st.finite_nets = c.get_or(s, "finite_nets", st.finite_nets)?;
        st.width = c.get_or(s, "width", st.width)?;
        st.depth = c.get_or(s, "depth", st.depth)?;
        st.small_gamma = c.get_or(s, "small_gamma", st.small_gamma)?;
        st.large_gamma = c.get_or(s, "large_gamma", st.large_gamma)?;
        st.steps = c.get_or(s, "steps", st.steps)?;
        st.log2_eta = c.get_or(s, "log2_eta", st.log2_eta)?;

        let s = "nngp-check";
        c.check_keys(s, &["width", "depth", "samples", "points", "d0"])?;
        let ng = &mut cfg.nngp;
        ng.width = c.get_or(s, "width", ng.width)?;
        ng.depth = c.get_or(s, "depth", ng.depth)?;
        ng.samples = c.get_or(s, "samples", ng.samples)?;
        ng.points = c.get_or(s, "points", ng.points)?;
        ng.d0 = c.get_or(s, "d0", ng.d0)?;

        let s = "bounds";
        c.check_keys(s, &["m", "kernel_depth", "delta", "orthant_samples", "train_error", "log_shattering", "beta"])?;
        let b = &mut cfg.bounds;
        b.m = c.get_or(s, "m", b.m)?;
        b.kernel_depth = c.get_or(s, "kernel_depth", b.kernel_depth)?;
        b.delta = c.get_or(s, "delta", b.delta)?;
        b.orthant_samples = c.get_or(s, "orthant_samples", b.orthant_samples)?;
        b.train_error = c.get(s, "train_error")?;
        b.log_shattering = c.get(s, "log_shattering")?;
        b.beta = c.get(s, "beta")?;

        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: usize, what: &str| -> Result<()> {
            if v == 0 {
                return cfg_err(format!("{what} must be positive"));
            }
            Ok(())
        };
        let nonempty = |n: usize, what: &str| -> Result<()> {
            if n == 0 {
                return cfg_err(format!("{what} must not be empty"));
            }
            Ok(())
        };
        nonempty(self.seeds.len(), "experiment.seeds")?;
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return cfg_err("experiment.seeds must be distinct".into());
        }
        match &self.data.source {
            DataSource::Synthetic(s) => {
                positive(s.d0, "data.d0")?;
                positive(s.m_train, "data.m_train")?;
                positive(s.m_test, "data.m_test")?;
                positive(s.teacher_depth, "data.teacher_depth")?;
                positive(s.teacher_width, "data.teacher_width")?;
            }
            DataSource::Idx { m_train, m_test, .. } => {
                positive(*m_train, "data.m_train")?;
                positive(*m_test, "data.m_test")?;
            }
        }
        let lr = &self.lr_transfer;
        nonempty(lr.widths.len(), "lr-transfer.widths")?;
        nonempty(lr.depths.len(), "lr-transfer.depths")?;
        nonempty(lr.log2_etas.len(), "lr-transfer.log2_eta")?;
        nonempty(lr.depth_scaled.len(), "lr-transfer.depth_scaled")?;
        for &w in &lr.widths {
            positive(w, "lr-transfer.widths")?;
        }
        for &d in &lr.depths {
            positive(d, "lr-transfer.depths")?;
        }
        if lr.batch == Some(0) {
            return cfg_err("lr-transfer.batch must be positive".into());
        }
        for (n, key) in [
            (self.strategy.orthant_samples, "strategy-compare.orthant_samples"),
            (self.bounds.orthant_samples, "bounds.orthant_samples"),
        ] {
            if n < MIN_ORTHANT_SAMPLES {
                return cfg_err(format!("{key} must be at least {MIN_ORTHANT_SAMPLES}, got {n}"));
            }
        }
        let mg = &self.margin;
        positive(mg.kernel_depth, "margin-sweep.kernel_depth")?;
        positive(mg.repeats, "margin-sweep.repeats")?;
        positive(mg.width, "margin-sweep.width")?;
        positive(mg.depth, "margin-sweep.depth")?;
        positive(mg.nets, "margin-sweep.nets")?;
        if mg.gamma_over_tau.iter().chain(&mg.gammas).any(|g| !(*g > 0.0 && g.is_finite())) {
            return cfg_err("margin-sweep margins must be positive and finite".into());
        }
        for &k in &mg.ensemble_sizes {
            positive(k, "margin-sweep.ensemble_sizes")?;
            if k > mg.nets && mg.finite {
                return cfg_err(format!("ensemble size {k} exceeds margin-sweep.nets = {}", mg.nets));
            }
        }
        let st = &self.strategy;
        positive(st.kernel_depth, "strategy-compare.kernel_depth")?;
        positive(st.vote, "strategy-compare.vote")?;
        for &m in &st.m_values {
            if m < 2 {
                return cfg_err("strategy-compare.m values must be at least 2".into());
            }
        }
        if !(st.delta > 0.0 && st.delta < 1.0) {
            return cfg_err("strategy-compare.delta must lie in (0, 1)".into());
        }
        if !(st.small_gamma > 0.0 && st.large_gamma > 0.0) {
            return cfg_err("strategy-compare margins must be positive".into());
        }
        let ng = &self.nngp;
        positive(ng.width, "nngp-check.width")?;
        positive(ng.depth, "nngp-check.depth")?;
        positive(ng.samples, "nngp-check.samples")?;
        positive(ng.points, "nngp-check.points")?;
        positive(ng.d0, "nngp-check.d0")?;
        let b = &self.bounds;
        if b.m < 2 {
            return cfg_err("bounds.m must be at least 2".into());
        }
        positive(b.kernel_depth, "bounds.kernel_depth")?;
        if !(b.delta > 0.0 && b.delta < 1.0) {
            return cfg_err("bounds.delta must lie in (0, 1)".into());
        }
        Ok(())
    }

    /// SHA-256 of the resolved configuration, as hex.
    pub fn sha256(&self) -> Result<String> {
        let bytes = serde_json::to_vec(self)?;
        Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
    }
}

fn cell_rng(seed: u64, coords: &[u64]) -> RngStream {
    RngStream::new(seed, stream_id_for(coords))
}

/// Train and test samples for the configured data source. `m_train` overrides
/// the configured training-set size.
pub fn load_data(cfg: &DataConfig, m_train: Option<usize>) -> Result<(TrainSample, TrainSample)> {
    match &cfg.source {
        DataSource::Synthetic(spec) => {
            let mut spec = spec.clone();
            if let Some(m) = m_train {
                spec.m_train = m;
            }
            let (train, test, _) = synth_teacher_data(&spec, &mut cell_rng(cfg.seed, &[TAG_DATA]))?;
            Ok((train, test))
        }
        DataSource::Idx {
            images,
            labels,
            digits,
            m_train: mt,
            m_test,
        } => {
            let ds = load_idx(images, labels)?;
            preprocess(&ds, *digits, m_train.unwrap_or(*mt), *m_test, cfg.seed)
        }
    }
}

fn error_string(e: &Error) -> Option<String> {
    Some(e.to_string())
}

fn accuracy(pred: &[f64], y: &[f64]) -> f64 {
    pred.iter().zip(y).filter(|(p, t)| sign(**p) == **t).count() as f64 / y.len() as f64
}

// ---------------------------------------------------------------- lr-transfer

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LrRow {
    pub width: usize,
    pub depth: usize,
    pub depth_scaled: bool,
    pub log2_eta: i32,
    /// `η†`.
    pub eta: f64,
    /// `η†/L`, the per-layer relative step.
    pub eta_over_depth: f64,
    pub seed: u64,
    pub final_train_loss: f64,
    pub diverged: bool,
    pub error: Option<String>,
}

/// One training run per (scaling, width, depth, η, seed). Networks for a given
/// (width, depth, seed) share their initialisation across the η grid.
pub fn lr_transfer_rows(cfg: &ExperimentConfig) -> Result<Vec<LrRow>> {
    let lr = &cfg.lr_transfer;
    let (train, _) = load_data(&cfg.data, None)?;
    let targets = train.targets(1.0);
    let d0 = train.x.ncols();
    let mut cells = Vec::new();
    for &scaled in &lr.depth_scaled {
        for &width in &lr.widths {
            for &depth in &lr.depths {
                for &e in &lr.log2_etas {
                    for &seed in &cfg.seeds {
                        cells.push((scaled, width, depth, e, seed));
                    }
                }
            }
        }
    }
    Ok(cells
        .into_par_iter()
        .map(|(scaled, width, depth, e, seed)| {
            let eta = 2f64.powi(e);
            let mut row = LrRow {
                width,
                depth,
                depth_scaled: scaled,
                log2_eta: e,
                eta,
                eta_over_depth: eta / depth as f64,
                seed,
                final_train_loss: f64::NAN,
                diverged: false,
                error: None,
            };
            let mut rng = cell_rng(seed, &[TAG_LR, width as u64, depth as u64]);
            let mut widths = vec![d0];
            widths.extend(std::iter::repeat_n(width, depth - 1));
            widths.push(1);
            let run = Network::init_rms_one(&widths, Activation::ScaledRelu, &mut rng).and_then(|net| {
                let mut rule = UpdateRule::fixed(Flavour::Conditioned, eta);
                rule.depth_scaled = scaled;
                let tc = TrainConfig {
                    steps: lr.steps,
                    rule,
                    batch: lr.batch,
                };
                train_architecture_aware(&net, &train.x, &targets, &tc, &mut rng)
            });
            match run {
                Ok(t) => {
                    row.final_train_loss = t.final_loss();
                    row.diverged = t.diverged || !row.final_train_loss.is_finite();
                }
                Err(Error::Diverged(_)) => {
                    row.final_train_loss = f64::INFINITY;
                    row.diverged = true;
                }
                Err(e) => row.error = error_string(&e),
            }
            row
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BestEta {
    pub depth_scaled: bool,
    pub width: usize,
    pub depth: usize,
    pub log2_eta: i32,
    /// Mean over seeds of `log(final train loss)` at the best `η`.
    pub mean_log_loss: f64,
}

/// Per (scaling, width, depth): the grid `η` minimising the seed-averaged log
/// final loss. Diverged and failed runs count as infinite loss.
pub fn best_etas(rows: &[LrRow]) -> Vec<BestEta> {
    let mut acc: BTreeMap<(bool, usize, usize, i32), (f64, usize)> = BTreeMap::new();
    for r in rows {
        let l = if r.error.is_none() && !r.diverged && r.final_train_loss.is_finite() {
            r.final_train_loss.max(f64::MIN_POSITIVE).ln()
        } else {
            f64::INFINITY
        };
        let e = acc.entry((r.depth_scaled, r.width, r.depth, r.log2_eta)).or_insert((0.0, 0));
        e.0 += l;
        e.1 += 1;
    }
    let mut best: BTreeMap<(bool, usize, usize), BestEta> = BTreeMap::new();
    for ((scaled, width, depth, e), (sum, n)) in acc {
        let mean = sum / n as f64;
        let entry = best.entry((scaled, width, depth)).or_insert(BestEta {
            depth_scaled: scaled,
            width,
            depth,
            log2_eta: e,
            mean_log_loss: mean,
        });
        if mean < entry.mean_log_loss {
            entry.log2_eta = e;
            entry.mean_log_loss = mean;
        }
    }
    // Scaled runs first, matching the sweep order.
    let mut out: Vec<BestEta> = best.into_values().collect();
    out.sort_by_key(|b| (!b.depth_scaled, b.width, b.depth));
    out
}

// --------------------------------------------------------------- margin-sweep

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MarginRow {
    /// `nngp` or `finite`.
    pub path: String,
    pub seed: u64,
    /// `γ/τ` for the NNGP, target `γ` for finite networks.
    pub target_margin: f64,
    /// `γ/τ` for the NNGP, mean Frobenius-normalised margin for networks.
    pub normalised_margin: f64,
    pub ensemble_size: usize,
    pub ensembles: usize,
    pub test_accuracy: f64,
    pub se: f64,
    /// Networks that reached the target margin; equals the draw count for the NNGP.
    pub interpolating: usize,
    pub error: Option<String>,
}

/// Accuracy of averaging `k` consecutive columns of `fq` (test points × draws),
/// over all disjoint groups.
fn ensemble_accuracy(fq: &DMatrix<f64>, y: &[f64], k: usize) -> (f64, f64, usize) {
    let groups = fq.ncols() / k;
    let accs: Vec<f64> = (0..groups)
        .map(|g| {
            let avg: Vec<f64> = fq.columns(g * k, k).row_iter().map(|r| r.sum()).collect();
            accuracy(&avg, y)
        })
        .collect();
    let (m, se) = mean_and_std_error(&accs);
    (m, se, groups)
}

fn failed_margin_rows(path: &str, seed: u64, margin: f64, sizes: &[usize], e: &Error) -> Vec<MarginRow> {
    sizes
        .iter()
        .map(|&k| MarginRow {
            path: path.into(),
            seed,
            target_margin: margin,
            normalised_margin: f64::NAN,
            ensemble_size: k,
            ensembles: 0,
            test_accuracy: f64::NAN,
            se: f64::NAN,
            interpolating: 0,
            error: error_string(e),
        })
        .collect()
}

pub fn margin_nngp_rows(cfg: &ExperimentConfig, train: &TrainSample, test: &TrainSample) -> Result<Vec<MarginRow>> {
    let mg = &cfg.margin;
    let gram = GramBundle::new(Kernel::ArcCos { depth: mg.kernel_depth }, train.x.clone(), None)?;
    let y = train.labels();
    let kmax = *mg.ensemble_sizes.iter().max().unwrap_or(&1);
    let n = kmax * mg.repeats;
    let mut cells = Vec::new();
    for &seed in &cfg.seeds {
        for (i, &g) in mg.gamma_over_tau.iter().enumerate() {
            cells.push((seed, i, g));
        }
    }
    let rows: Vec<Vec<MarginRow>> = cells
        .into_par_iter()
        .map(|(seed, i, g)| {
            let mut rng = cell_rng(seed, &[TAG_MARGIN_GP, i as u64]);
            match concentration_sample(&gram, &y, g, 1.0, &test.x, n, &mut rng) {
                Ok(draws) => {
                    let fq = DMatrix::from_columns(&draws);
                    mg.ensemble_sizes
                        .iter()
                        .map(|&k| {
                            let (acc, se, groups) = ensemble_accuracy(&fq, &test.y, k);
                            MarginRow {
                                path: "nngp".into(),
                                seed,
                                target_margin: g,
                                normalised_margin: g,
                                ensemble_size: k,
                                ensembles: groups,
                                test_accuracy: acc,
                                se,
                                interpolating: n,
                                error: None,
                            }
                        })
                        .collect()
                }
                Err(e) => failed_margin_rows("nngp", seed, g, &mg.ensemble_sizes, &e),
            }
        })
        .collect();
    Ok(rows.into_iter().flatten().collect())
}

/// A network trained to target margin `γ` under fixed Frobenius radii.
pub struct MarginNet {
    /// `f/γ` at the test points.
    pub test_outputs: DVector<f64>,
    pub frobenius_margin: f64,
    pub interpolates: bool,
}

pub struct MarginNetSpec {
    pub width: usize,
    pub depth: usize,
    pub gamma: f64,
    pub steps: usize,
    pub log2_eta: i32,
}

/// Initialisation depends only on `rng`, so nets sharing a stream share their
/// starting point across margins.
pub fn train_margin_net(spec: &MarginNetSpec, train: &TrainSample, test: &TrainSample, rng: &mut RngStream) -> Result<MarginNet> {
    let mut widths = vec![train.x.ncols()];
    widths.extend(std::iter::repeat_n(spec.width, spec.depth.saturating_sub(1)));
    widths.push(1);
    let net = Network::init_rms_one(&widths, Activation::ScaledRelu, rng)?;
    let fit = train_margin_projected(
        &net,
        &train.x,
        &train.y,
        &MarginFitConfig {
            gamma: spec.gamma,
            steps: spec.steps,
            rule: UpdateRule::fixed(Flavour::Conditioned, 2f64.powi(spec.log2_eta)),
            radii: None,
            fit_fraction: 0.5,
            anneal: true,
        },
    )?;
    let report = margins(&fit.net, &train.x, &train.y)?;
    Ok(MarginNet {
        test_outputs: fit.net.project(&test.x)? / spec.gamma,
        frobenius_margin: report.frobenius,
        interpolates: fit.interpolates,
    })
}

pub fn margin_finite_rows(cfg: &ExperimentConfig, train: &TrainSample, test: &TrainSample) -> Result<Vec<MarginRow>> {
    let mg = &cfg.margin;
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        for &gamma in &mg.gammas {
            let spec = MarginNetSpec {
                width: mg.width,
                depth: mg.depth,
                gamma,
                steps: mg.steps,
                log2_eta: mg.log2_eta,
            };
            let nets: Vec<Result<MarginNet>> = (0..mg.nets)
                .into_par_iter()
                .map(|j| train_margin_net(&spec, train, test, &mut cell_rng(seed, &[TAG_MARGIN_NET, j as u64])))
                .collect();
            let nets = match nets.into_iter().collect::<Result<Vec<_>>>() {
                Ok(n) => n,
                Err(e) => {
                    rows.extend(failed_margin_rows("finite", seed, gamma, &mg.ensemble_sizes, &e));
                    continue;
                }
            };
            let fq = DMatrix::from_columns(&nets.iter().map(|n| n.test_outputs.clone()).collect::<Vec<_>>());
            let rho = nets.iter().map(|n| n.frobenius_margin).sum::<f64>() / nets.len() as f64;
            let fit = nets.iter().filter(|n| n.interpolates).count();
            for &k in &mg.ensemble_sizes {
                let (acc, se, groups) = ensemble_accuracy(&fq, &test.y, k);
                rows.push(MarginRow {
                    path: "finite".into(),
                    seed,
                    target_margin: gamma,
                    normalised_margin: rho,
                    ensemble_size: k,
                    ensembles: groups,
                    test_accuracy: acc,
                    se,
                    interpolating: fit,
                    error: None,
                });
            }
        }
    }
    Ok(rows)
}

pub fn margin_rows(cfg: &ExperimentConfig) -> Result<Vec<MarginRow>> {
    let (train, test) = load_data(&cfg.data, None)?;
    let mut rows = margin_nngp_rows(cfg, &train, &test)?;
    if cfg.margin.finite {
        rows.extend(margin_finite_rows(cfg, &train, &test)?);
    }
    Ok(rows)
}

// ----------------------------------------------------------- strategy-compare

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StrategyRow {
    pub m: usize,
    pub seed: u64,
    pub strategy: String,
    pub test_error: f64,
    pub se: f64,
    /// Gibbs bound for the spherised posterior.
    pub gibbs_bound: f64,
    /// Bound for the kernel interpolator.
    pub bpm_bound: f64,
    pub bpm_bound_vacuous: bool,
    pub error: Option<String>,
}

#[derive(Clone, Debug)]
pub struct StrategyOutcome {
    pub rows: Vec<StrategyRow>,
    /// Paired differences `gibbs − bayes` and `gibbs − bpm` with their SEs, per (m, seed).
    pub paired: Vec<PairedGap>,
    /// Predictions per (m, seed): labels then columns.
    pub predictions: Vec<(usize, u64, Vec<f64>, Vec<(&'static str, Vec<f64>)>)>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairedGap {
    pub m: usize,
    pub seed: u64,
    pub gibbs_minus_bayes: f64,
    pub se_bayes_gap: f64,
    pub gibbs_minus_bpm: f64,
    pub se_bpm_gap: f64,
}

fn failed_strategy_rows(m: usize, seed: u64, e: &Error) -> Vec<StrategyRow> {
    ["gibbs", "bayes", "bpm"]
        .iter()
        .map(|s| StrategyRow {
            m,
            seed,
            strategy: s.to_string(),
            test_error: f64::NAN,
            se: f64::NAN,
            gibbs_bound: f64::NAN,
            bpm_bound: f64::NAN,
            bpm_bound_vacuous: true,
            error: error_string(e),
        })
        .collect()
}

type StrategyCell = (Vec<StrategyRow>, PairedGap, Option<(Vec<f64>, Vec<(&'static str, Vec<f64>)>)>);

fn first_m(train: &TrainSample, m: usize) -> Result<TrainSample> {
    if m > train.m() {
        return Err(Error::InvalidInput(format!("m = {m} but only {} training examples", train.m())));
    }
    Ok(train.head(m))
}

fn strategy_cell(cfg: &ExperimentConfig, train: &TrainSample, test: &TrainSample, m: usize, seed: u64) -> Result<StrategyCell> {
    let st = &cfg.strategy;
    let sub = first_m(train, m)?;
    let gram = GramBundle::new(Kernel::ArcCos { depth: st.kernel_depth }, sub.x.clone(), None)?;
    let y = sub.labels();
    let rng = cell_rng(seed, &[TAG_STRATEGY, m as u64]);
    let orthant = orthant_prob(&gram, &y, st.orthant_samples, &rng.substream(&[0]))?;
    let bounds = kernel_bpm_bounds(&gram, &y, &orthant, st.delta)?;
    let gibbs_bounds = gp_pac_bayes_bounds(&gram, &y, &orthant, st.delta)?;
    let gb = gibbs_bounds.value(GIBBS_SPH_COMPLEXITY).unwrap_or(f64::NAN);
    let bpm = bounds.get(BPM_SPH_COMPLEXITY).ok_or_else(|| Error::Consistency("missing bpm bound".into()))?;
    let sampler = PosteriorSampler::new(PosteriorKind::Spherised, gram, y)?;
    let e = strategy_errors(&sampler, &test.x, &test.y, st.vote, &rng.substream(&[1]))?;
    let row = |name: &str, err: f64, se: f64| StrategyRow {
        m,
        seed,
        strategy: name.into(),
        test_error: err,
        se,
        gibbs_bound: gb,
        bpm_bound: bpm.value,
        bpm_bound_vacuous: bpm.vacuous_flag,
        error: None,
    };
    let rows = vec![
        row("gibbs", e.gibbs, e.se_gibbs),
        row("bayes", e.bayes, e.se_bayes),
        row("bpm", e.bpm, e.se_bpm),
    ];
    let gap = |other: &[f64]| {
        let d: Vec<f64> = e.gibbs_points.iter().zip(other).map(|(g, o)| g - o).collect();
        mean_and_std_error(&d)
    };
    let (gb_gap, se_gb) = gap(&e.bayes_wrong);
    let (gp_gap, se_gp) = gap(&e.bpm_wrong);
    // The per-point Gibbs rates carry binomial noise from the finite draw.
    let draw_var: f64 = e.gibbs_points.iter().map(|p| p * (1.0 - p) / e.ensemble as f64).sum::<f64>()
        / (e.gibbs_points.len() as f64).powi(2);
    let paired = PairedGap {
        m,
        seed,
        gibbs_minus_bayes: gb_gap,
        se_bayes_gap: (se_gb * se_gb + draw_var).sqrt(),
        gibbs_minus_bpm: gp_gap,
        se_bpm_gap: (se_gp * se_gp + draw_var).sqrt(),
    };
    let preds = if st.predictions {
        let p = |s: Strategy, c: u64| strategy_predict(&sampler, &test.x, s, &rng.substream(&[2, c]));
        Some((
            test.y.clone(),
            vec![
                ("gibbs", p(Strategy::Gibbs, 0)?),
                ("bayes", p(Strategy::Bayes(st.vote), 1)?),
                ("bpm", p(Strategy::Bpm, 2)?),
            ],
        ))
    } else {
        None
    };
    Ok((rows, paired, preds))
}

/// Finite-network strategies: one small-margin net (Gibbs), a majority vote of
/// small-margin nets (Bayes) and one large-margin net (BPM).
fn strategy_net_rows(cfg: &ExperimentConfig, train: &TrainSample, test: &TrainSample, m: usize, seed: u64) -> Result<Vec<StrategyRow>> {
    let st = &cfg.strategy;
    let sub = first_m(train, m)?;
    let spec = |gamma| MarginNetSpec {
        width: st.width,
        depth: st.depth,
        gamma,
        steps: st.steps,
        log2_eta: st.log2_eta,
    };
    let small = spec(st.small_gamma);
    let large = spec(st.large_gamma);
    let pairs: Vec<Result<(MarginNet, MarginNet)>> = (0..st.finite_nets)
        .into_par_iter()
        .map(|j| {
            let rng = cell_rng(seed, &[TAG_STRATEGY_NET, m as u64, j as u64]);
            let a = train_margin_net(&small, &sub, test, &mut rng.clone())?;
            let b = train_margin_net(&large, &sub, test, &mut rng.clone())?;
            Ok((a, b))
        })
        .collect();
    let pairs = pairs.into_iter().collect::<Result<Vec<_>>>()?;
    let err = |out: &DVector<f64>| 1.0 - accuracy(out.as_slice(), &test.y);
    let gibbs: Vec<f64> = pairs.iter().map(|(a, _)| err(&a.test_outputs)).collect();
    let bpm: Vec<f64> = pairs.iter().map(|(_, b)| err(&b.test_outputs)).collect();
    let votes: Vec<f64> = (0..test.m())
        .map(|i| pairs.iter().map(|(a, _)| sign(a.test_outputs[i])).sum())
        .collect();
    let bayes_wrong: Vec<f64> = votes.iter().zip(&test.y).map(|(v, y)| (sign(*v) != *y) as u8 as f64).collect();
    let (g, se_g) = mean_and_std_error(&gibbs);
    let (b, se_b) = mean_and_std_error(&bayes_wrong);
    let (p, se_p) = mean_and_std_error(&bpm);
    let row = |name: &str, e: f64, se: f64| StrategyRow {
        m,
        seed,
        strategy: name.into(),
        test_error: e,
        se,
        gibbs_bound: f64::NAN,
        bpm_bound: f64::NAN,
        bpm_bound_vacuous: true,
        error: None,
    };
    Ok(vec![row("net-gibbs", g, se_g), row("net-bayes", b, se_b), row("net-bpm", p, se_p)])
}

pub fn strategy_outcome(cfg: &ExperimentConfig) -> Result<StrategyOutcome> {
    let st = &cfg.strategy;
    let m_max = *st.m_values.iter().max().ok_or_else(|| Error::Config("no m values".into()))?;
    let (train, test) = load_data(&cfg.data, Some(m_max))?;
    let mut cells = Vec::new();
    for &m in &st.m_values {
        for &seed in &cfg.seeds {
            cells.push((m, seed));
        }
    }
    let results: Vec<(usize, u64, Result<StrategyCell>)> = cells
        .into_par_iter()
        .map(|(m, seed)| (m, seed, strategy_cell(cfg, &train, &test, m, seed)))
        .collect();
    let mut out = StrategyOutcome {
        rows: Vec::new(),
        paired: Vec::new(),
        predictions: Vec::new(),
    };
    for (m, seed, r) in results {
        match r {
            Ok((rows, gap, preds)) => {
                out.rows.extend(rows);
                out.paired.push(gap);
                if let Some((labels, cols)) = preds {
                    out.predictions.push((m, seed, labels, cols));
                }
            }
            Err(e) => out.rows.extend(failed_strategy_rows(m, seed, &e)),
        }
        if st.finite_nets > 0 {
            match strategy_net_rows(cfg, &train, &test, m, seed) {
                Ok(rows) => out.rows.extend(rows),
                Err(e) => out.rows.extend(failed_strategy_rows(m, seed, &e).into_iter().map(|mut r| {
                    r.strategy = format!("net-{}", r.strategy);
                    r
                })),
            }
        }
    }
    Ok(out)
}

// ----------------------------------------------------------------- nngp-check

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NngpRow {
    pub seed: u64,
    pub i: usize,
    pub j: usize,
    pub empirical: f64,
    pub analytic: f64,
    pub abs_error: f64,
}

/// Empirical second moments of random finite networks against the
/// compositional arccosine kernel, on random hyperspherical inputs.
pub fn nngp_rows(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<NngpRow>> {
    let ng = &cfg.nngp;
    let mut rng = cell_rng(seed, &[TAG_NNGP, 0]);
    let x = project_to_sphere(&gaussian_matrix(&mut rng, ng.points, ng.d0, 1.0))?;
    let emp = nngp_empirical_kernel(ng.width, ng.depth, ng.samples, &x, NngpMethod::Conditional, &cell_rng(seed, &[TAG_NNGP, 1]))?;
    let ana = Kernel::ArcCos { depth: ng.depth }.gram(&x)?;
    let mut rows = Vec::new();
    for i in 0..ng.points {
        for j in i..ng.points {
            rows.push(NngpRow {
                seed,
                i,
                j,
                empirical: emp[(i, j)],
                analytic: ana[(i, j)],
                abs_error: (emp[(i, j)] - ana[(i, j)]).abs(),
            });
        }
    }
    Ok(rows)
}

// --------------------------------------------------------------------- bounds

/// GP, spherised and kernel-interpolator bounds on the first `bounds.m`
/// training points, plus the VC and stability bounds when their inputs are given.
pub fn bounds_report(cfg: &ExperimentConfig, seed: u64) -> Result<BoundReport> {
    let b = &cfg.bounds;
    let (train, _) = load_data(&cfg.data, Some(b.m))?;
    let gram = GramBundle::new(Kernel::ArcCos { depth: b.kernel_depth }, train.x.clone(), None)?;
    let y = train.labels();
    let orthant = orthant_prob(&gram, &y, b.orthant_samples, &cell_rng(seed, &[TAG_BOUNDS]))?;
    let mut report = gp_pac_bayes_bounds(&gram, &y, &orthant, b.delta)?;
    report.bounds.extend(kernel_bpm_bounds(&gram, &y, &orthant, b.delta)?.bounds);
    let m = train.m();
    let base = BoundInputs::new(m, b.delta)?.with_train_error(b.train_error.unwrap_or(0.0));
    let mut inputs = BTreeMap::from([
        ("m".to_string(), m as f64),
        ("delta".to_string(), b.delta),
        ("train_error".to_string(), b.train_error.unwrap_or(0.0)),
    ]);
    if let Some(ls) = b.log_shattering {
        let mut i = inputs.clone();
        i.insert("log_shattering".into(), ls);
        let v = vc_bound(&base.clone().with_log_shattering(ls))?;
        report.bounds.insert("vc".into(), BoundEntry::new(v, i, "deterministic"));
    }
    if let Some(beta) = b.beta {
        inputs.insert("beta".into(), beta);
        let v = stability_bound(&base.with_beta(beta))?;
        report.bounds.insert("stability".into(), BoundEntry::new(v, inputs, "deterministic"));
    }
    Ok(report)
}

// ------------------------------------------------------------------- selftest

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SelftestRow {
    pub check: String,
    pub value: f64,
    pub expected: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Fast analytic checks of the numerical core.
pub fn selftest_rows(seed: u64) -> Result<Vec<SelftestRow>> {
    let mut rows = Vec::new();
    let mut push = |check: &str, value: f64, expected: f64, tolerance: f64| {
        rows.push(SelftestRow {
            check: check.into(),
            value,
            expected,
            tolerance,
            pass: (value - expected).abs() <= tolerance,
        })
    };
    let rng = cell_rng(seed, &[TAG_SELFTEST]);

    let id = GramBundle::from_gram(DMatrix::identity(4, 4), Some(0.0))?;
    let y4 = DVector::from_vec(vec![1.0, -1.0, 1.0, 1.0]);
    let orth = orthant_prob(&id, &y4, 10_000, &rng.substream(&[0]))?;
    push("orthant_identity_m4", orth.log_inv_p(), 4.0 * std::f64::consts::LN_2, 1e-12);
    push(
        "complexity_identity_m4",
        crate::pac_bayes::kernel_complexity(&id, &y4)?,
        4.0 * std::f64::consts::LN_2,
        1e-12,
    );
    let cap = pac_bayes_cap(3.0, 100, 0.05)?;
    push("kl_inverse_realisable", kl_inverse_bound(0.0, cap), 1.0 - (-cap).exp(), 1e-9);

    let mut r = rng.substream(&[1]);
    let x = project_to_sphere(&gaussian_matrix(&mut r, 12, 5, 1.0))?;
    let xq = project_to_sphere(&gaussian_matrix(&mut r, 6, 5, 1.0))?;
    let yv = DVector::from_fn(12, |i, _| if i % 3 == 0 { -1.0 } else { 1.0 });
    let gram = GramBundle::new(Kernel::ArcCos { depth: 2 }, x, None)?;
    let interp = min_norm_interpolate(&gram, &yv)?.predict(&xq)?;
    let (mean, _) = gp_condition(&GpPosterior::new(gram, yv, 1.0)?, &xq)?;
    push("gp_mean_equals_interpolator", (interp - mean).amax(), 0.0, 1e-8);

    let inputs = BoundInputs::new(1000, 0.05)?.with_train_error(0.1).with_log_shattering(1000.0);
    let expected = 0.1 + ((8.0 / 1000.0) * (1000.0 + (4.0f64 / 0.05).ln())).sqrt();
    push("vc_bound", vc_bound(&inputs)?, expected, 1e-12);

    let t = 0.3f64;
    let h = crate::kernel::arccos_h(t);
    let h_ref = ((1.0 - t * t).sqrt() + t * (std::f64::consts::PI - t.acos())) / std::f64::consts::PI;
    push("arccos_h", h, h_ref, 1e-15);
    Ok(rows)
}

// ---------------------------------------------------------------- orchestration

#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub experiment: ExperimentKind,
    pub config_sha256: String,
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub mc_budgets: BTreeMap<String, u64>,
    pub versions: BTreeMap<String, String>,
    pub files: Vec<String>,
    pub failed_cells: usize,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub files: Vec<PathBuf>,
    pub failed_cells: usize,
    pub manifest: PathBuf,
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn mc_budgets(kind: ExperimentKind, cfg: &ExperimentConfig) -> BTreeMap<String, u64> {
    let mut b = BTreeMap::new();
    match kind {
        ExperimentKind::MarginSweep => {
            let kmax = cfg.margin.ensemble_sizes.iter().max().copied().unwrap_or(1);
            b.insert("nngp_draws_per_margin".into(), (kmax * cfg.margin.repeats) as u64);
            if cfg.margin.finite {
                b.insert("networks_per_margin".into(), cfg.margin.nets as u64);
            }
        }
        ExperimentKind::StrategyCompare => {
            b.insert("posterior_draws".into(), cfg.strategy.vote as u64);
            b.insert("orthant_samples".into(), cfg.strategy.orthant_samples as u64);
            b.insert("networks_per_strategy".into(), cfg.strategy.finite_nets as u64);
        }
        ExperimentKind::NngpCheck => {
            b.insert("network_draws".into(), cfg.nngp.samples as u64);
        }
        ExperimentKind::Bounds => {
            b.insert("orthant_samples".into(), cfg.bounds.orthant_samples as u64);
        }
        ExperimentKind::Selftest => {
            b.insert("orthant_samples".into(), 10_000);
        }
        ExperimentKind::LrTransfer => {}
    }
    b
}

/// Runs one experiment, writing its CSV/JSON outputs and `manifest.json`
/// into `cfg.out`. Failed grid cells are recorded in the outputs and counted
/// in the summary; the run carries on past them.
pub fn run(kind: ExperimentKind, cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    if let Some(named) = cfg.name {
        if named != kind {
            return cfg_err(format!(
                "config names experiment `{}` but `{}` was requested",
                named.name(),
                kind.name()
            ));
        }
    }
    std::fs::create_dir_all(&cfg.out)?;
    let out = |name: &str| cfg.out.join(name);
    let mut files = Vec::new();
    let mut failed = 0;
    match kind {
        ExperimentKind::LrTransfer => {
            let rows = lr_transfer_rows(cfg)?;
            failed += rows.iter().filter(|r| r.error.is_some()).count();
            let p = out("lr_transfer.csv");
            write_csv(&p, &rows)?;
            files.push(p);
            let p = out("lr_transfer_best.csv");
            write_csv(&p, &best_etas(&rows))?;
            files.push(p);
        }
        ExperimentKind::MarginSweep => {
            let rows = margin_rows(cfg)?;
            failed += rows.iter().filter(|r| r.error.is_some()).count();
            let p = out("margin_sweep.csv");
            write_csv(&p, &rows)?;
            files.push(p);
        }
        ExperimentKind::StrategyCompare => {
            let o = strategy_outcome(cfg)?;
            failed += o.rows.iter().filter(|r| r.error.is_some()).count();
            let p = out("strategy_compare.csv");
            write_csv(&p, &o.rows)?;
            files.push(p);
            let p = out("strategy_gaps.csv");
            write_csv(&p, &o.paired)?;
            files.push(p);
            for (m, seed, labels, cols) in &o.predictions {
                let p = out(&format!("predictions_m{m}_seed{seed}.csv"));
                write_predictions_csv(BufWriter::new(File::create(&p)?), labels, cols)?;
                files.push(p);
            }
        }
        ExperimentKind::NngpCheck => {
            let mut rows = Vec::new();
            for &seed in &cfg.seeds {
                match nngp_rows(cfg, seed) {
                    Ok(r) => rows.extend(r),
                    Err(e) => {
                        log::warn!("nngp-check seed {seed} failed: {e}");
                        failed += 1;
                    }
                }
            }
            let p = out("nngp_check.csv");
            write_csv(&p, &rows)?;
            files.push(p);
        }
        ExperimentKind::Bounds => {
            let mut all = BTreeMap::new();
            for &seed in &cfg.seeds {
                match bounds_report(cfg, seed) {
                    Ok(r) => {
                        all.insert(format!("seed_{seed}"), r);
                    }
                    Err(e) => {
                        log::warn!("bounds seed {seed} failed: {e}");
                        failed += 1;
                    }
                }
            }
            let p = out("bounds.json");
            std::fs::write(&p, serde_json::to_string_pretty(&all)?)?;
            files.push(p);
        }
        ExperimentKind::Selftest => {
            let rows = selftest_rows(cfg.seeds[0])?;
            for r in rows.iter().filter(|r| !r.pass) {
                log::warn!("selftest {} failed: {} vs {}", r.check, r.value, r.expected);
            }
            failed += rows.iter().filter(|r| !r.pass).count();
            let p = out("selftest.csv");
            write_csv(&p, &rows)?;
            files.push(p);
        }
    }
    let manifest = Manifest {
        experiment: kind,
        config_sha256: cfg.sha256()?,
        config: cfg.clone(),
        seeds: cfg.seeds.clone(),
        mc_budgets: mc_budgets(kind, cfg),
        versions: BTreeMap::from([
            ("mmlab".to_string(), env!("CARGO_PKG_VERSION").to_string()),
            ("manifest".to_string(), "1".to_string()),
        ]),
        files: files
            .iter()
            .map(|f| f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default())
            .collect(),
        failed_cells: failed,
    };
    let mpath = out("manifest.json");
    std::fs::write(&mpath, serde_json::to_string_pretty(&manifest)?)?;
    Ok(RunSummary {
        files,
        failed_cells: failed,
        manifest: mpath,
    })
}
