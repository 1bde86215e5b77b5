//! Datasets: the IDX image/label format, binary-digit preprocessing onto the
//! input hypersphere, and a synthetic scaled-relu teacher task.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::deep_linear::project_to_sphere;
use crate::error::{Error, Result};
use crate::network::{Activation, Network};
use crate::numerics::{gaussian_matrix, sign, RngStream};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const BALANCE_RETRIES: usize = 20;
const NORM_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxDataset {
    pub rows: usize,
    pub cols: usize,
    /// Row-major pixels, image after image.
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
}

impl IdxDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let d = self.rows * self.cols;
        &self.images[i * d..(i + 1) * d]
    }
}

fn read_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Length(format!("{what}: header ends at byte {}", bytes.len())))
}

/// `(count, rows, cols, pixels)` from an IDX3 image file.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = read_u32(bytes, 0, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!("image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")));
    }
    let count = read_u32(bytes, 4, "images")? as usize;
    let rows = read_u32(bytes, 8, "images")? as usize;
    let cols = read_u32(bytes, 12, "images")? as usize;
    let need = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::Format("image dimensions overflow".into()))?;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::Length(format!("images: {} pixel bytes, header promises {need}", body.len())));
    }
    if body.len() > need {
        return Err(Error::Format(format!("images: {} trailing bytes", body.len() - need)));
    }
    Ok((count, rows, cols, body.to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_u32(bytes, 0, "labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!("label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")));
    }
    let count = read_u32(bytes, 4, "labels")? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(Error::Length(format!("labels: {} bytes, header promises {count}", body.len())));
    }
    if body.len() > count {
        return Err(Error::Format(format!("labels: {} trailing bytes", body.len() - count)));
    }
    Ok(body.to_vec())
}

pub fn encode_idx_images(ds: &IdxDataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + ds.images.len());
    for v in [IDX_IMAGES_MAGIC, ds.len() as u32, ds.rows as u32, ds.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&ds.images);
    out
}

pub fn encode_idx_labels(ds: &IdxDataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + ds.labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(ds.labels.len() as u32).to_be_bytes());
    out.extend_from_slice(&ds.labels);
    out
}

pub fn decode_idx(images: &[u8], labels: &[u8]) -> Result<IdxDataset> {
    let (count, rows, cols, pixels) = parse_idx_images(images)?;
    let labels = parse_idx_labels(labels)?;
    if labels.len() != count {
        return Err(Error::Consistency(format!("{count} images but {} labels", labels.len())));
    }
    Ok(IdxDataset {
        rows,
        cols,
        images: pixels,
        labels,
    })
}

pub fn load_idx(images: &Path, labels: &Path) -> Result<IdxDataset> {
    decode_idx(&fs::read(images)?, &fs::read(labels)?)
}

/// Inputs on the `√d_0` sphere, one per row, with `±1` labels.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub x: DMatrix<f64>,
    pub y: Vec<f64>,
}

impl TrainSample {
    pub fn m(&self) -> usize {
        self.y.len()
    }

    pub fn labels(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.y)
    }

    pub fn targets(&self, scale: f64) -> DMatrix<f64> {
        DMatrix::from_iterator(self.y.len(), 1, self.y.iter().map(|v| v * scale))
    }

    pub fn head(&self, m: usize) -> TrainSample {
        let m = m.min(self.m());
        TrainSample {
            x: self.x.rows(0, m).into_owned(),
            y: self.y[..m].to_vec(),
        }
    }
}

/// Two-digit task: `a → +1`, `b → −1`, each image centred and scaled to norm
/// `√(rows·cols)`. Constant images are dropped with a warning.
pub fn preprocess(
    ds: &IdxDataset,
    pair: (u8, u8),
    m_train: usize,
    m_test: usize,
    seed: u64,
) -> Result<(TrainSample, TrainSample)> {
    let (a, b) = pair;
    if a == b {
        return Err(Error::InvalidInput("digit pair must be two different classes".into()));
    }
    let d = ds.rows * ds.cols;
    let mut keep = Vec::new();
    for i in 0..ds.len() {
        let l = ds.labels[i];
        if l != a && l != b {
            continue;
        }
        let img = ds.image(i);
        if img.iter().all(|&p| p == img[0]) {
            log::warn!("image {i} is constant and cannot be centred; excluded");
            continue;
        }
        keep.push(i);
    }
    let need = m_train + m_test;
    let count = |label: u8| keep.iter().filter(|&&i| ds.labels[i] == label).count();
    if keep.len() < need || count(a) == 0 || count(b) == 0 {
        return Err(Error::InsufficientData(format!(
            "{} usable images of classes {a} ({}) and {b} ({}), need {need}",
            keep.len(),
            count(a),
            count(b)
        )));
    }
    let mut rng = RngStream::new(seed, 0);
    keep.shuffle(&mut rng);
    let build = |idx: &[usize]| -> Result<TrainSample> {
        let mut x = DMatrix::zeros(idx.len(), d);
        let mut y = Vec::with_capacity(idx.len());
        for (r, &i) in idx.iter().enumerate() {
            let img = ds.image(i);
            let mean = img.iter().map(|&p| p as f64).sum::<f64>() / d as f64;
            for (c, &p) in img.iter().enumerate() {
                x[(r, c)] = p as f64 - mean;
            }
            y.push(if ds.labels[i] == a { 1.0 } else { -1.0 });
        }
        let x = project_to_sphere(&x)?;
        let r = (d as f64).sqrt();
        debug_assert!(x.row_iter().all(|row| (row.norm() - r).abs() <= NORM_TOL * r));
        Ok(TrainSample { x, y })
    };
    Ok((build(&keep[..m_train])?, build(&keep[m_train..need])?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub d0: usize,
    pub m_train: usize,
    pub m_test: usize,
    pub teacher_depth: usize,
    pub teacher_width: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            d0: 16,
            m_train: 100,
            m_test: 500,
            teacher_depth: 2,
            teacher_width: 32,
        }
    }
}

/// Inputs uniform on the sphere, labelled by a random scaled-relu teacher.
/// A teacher whose training labels fall outside 60/40 is redrawn.
pub fn synth_teacher_data(spec: &SynthSpec, rng: &mut RngStream) -> Result<(TrainSample, TrainSample, Network)> {
    if spec.teacher_depth == 0 || spec.d0 == 0 || spec.teacher_width == 0 {
        return Err(Error::InvalidInput("teacher depth, width and d0 must be positive".into()));
    }
    if spec.m_train == 0 {
        return Err(Error::InvalidInput("need at least one training point".into()));
    }
    let mut widths = vec![spec.d0];
    widths.extend(std::iter::repeat_n(spec.teacher_width, spec.teacher_depth - 1));
    widths.push(1);
    for attempt in 0..BALANCE_RETRIES {
        let teacher = Network::init_fan_in(&widths, Activation::ScaledRelu, rng)?;
        let x = project_to_sphere(&gaussian_matrix(rng, spec.m_train + spec.m_test, spec.d0, 1.0))?;
        let f = teacher.project(&x)?;
        let y: Vec<f64> = f.iter().map(|&v| sign(v)).collect();
        let pos = y[..spec.m_train].iter().filter(|&&v| v > 0.0).count() as f64 / spec.m_train as f64;
        if (0.4..=0.6).contains(&pos) {
            let train = TrainSample {
                x: x.rows(0, spec.m_train).into_owned(),
                y: y[..spec.m_train].to_vec(),
            };
            let test = TrainSample {
                x: x.rows(spec.m_train, spec.m_test).into_owned(),
                y: y[spec.m_train..].to_vec(),
            };
            return Ok((train, test, teacher));
        }
        log::debug!("teacher {attempt} unbalanced ({pos:.2} positive); redrawing");
    }
    Err(Error::Balance(BALANCE_RETRIES))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> IdxDataset {
        IdxDataset {
            rows: 2,
            cols: 2,
            images: vec![0, 255, 17, 3, 9, 9, 200, 1],
            labels: vec![3, 7],
        }
    }

    #[test]
    fn idx_round_trip_is_byte_exact() {
        let ds = fixture();
        let img = encode_idx_images(&ds);
        let lab = encode_idx_labels(&ds);
        assert_eq!(&img[..4], &[0, 0, 8, 3]);
        assert_eq!(&lab[..8], &[0, 0, 8, 1, 0, 0, 0, 2]);
        let back = decode_idx(&img, &lab).unwrap();
        assert_eq!(back, ds);
        assert_eq!(encode_idx_images(&back), img);
        assert_eq!(back.image(1), &[9, 9, 200, 1]);
    }

    #[test]
    fn idx_error_classes() {
        let ds = fixture();
        let mut img = encode_idx_images(&ds);
        let lab = encode_idx_labels(&ds);
        let mut bad = img.clone();
        bad[3] = 0x02;
        assert!(matches!(decode_idx(&bad, &lab), Err(Error::Format(_))));
        img.pop();
        assert!(matches!(decode_idx(&img, &lab), Err(Error::Length(_))));
        assert!(matches!(decode_idx(&img[..10], &lab), Err(Error::Length(_))));
        let short = IdxDataset {
            labels: vec![3],
            ..fixture()
        };
        assert!(matches!(
            decode_idx(&encode_idx_images(&ds), &encode_idx_labels(&short)),
            Err(Error::Consistency(_))
        ));
    }

    #[test]
    fn preprocess_projects_and_filters() {
        let mut rng = RngStream::new(0, 0);
        let n = 40;
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            labels.push([1u8, 4, 9][i % 3]);
            for _ in 0..9 {
                images.push((rng.uniform() * 255.0) as u8);
            }
        }
        // One constant image of a kept class.
        labels.push(1);
        images.extend([5u8; 9]);
        let ds = IdxDataset {
            rows: 3,
            cols: 3,
            images,
            labels,
        };
        let (train, test) = preprocess(&ds, (1, 4), 10, 5, 7).unwrap();
        assert_eq!((train.m(), test.m()), (10, 5));
        for row in train.x.row_iter().chain(test.x.row_iter()) {
            assert!((row.norm() - 3.0).abs() < 1e-10 * 3.0);
            assert!(row.sum().abs() < 1e-9);
        }
        assert!(train.y.iter().all(|v| *v == 1.0 || *v == -1.0));
        let again = preprocess(&ds, (1, 4), 10, 5, 7).unwrap();
        assert_eq!(again.0, train);
        assert!(matches!(preprocess(&ds, (1, 4), 25, 5, 7), Err(Error::InsufficientData(_))));
        assert!(preprocess(&ds, (4, 4), 1, 1, 7).is_err());
    }

    #[test]
    fn teacher_data_properties() {
        let spec = SynthSpec::default();
        let (train, test, teacher) = synth_teacher_data(&spec, &mut RngStream::new(3, 0)).unwrap();
        let (train2, _, _) = synth_teacher_data(&spec, &mut RngStream::new(3, 0)).unwrap();
        assert_eq!(train, train2);
        assert!(train.y.iter().chain(&test.y).all(|v| *v == 1.0 || *v == -1.0));
        let pos = train.y.iter().filter(|v| **v > 0.0).count() as f64 / train.m() as f64;
        assert!((0.4..=0.6).contains(&pos));
        let pred = teacher.predict_labels(&test.x).unwrap();
        assert!(pred.iter().zip(&test.y).all(|(a, b)| a == b));
    }
}
