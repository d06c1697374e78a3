//! Dataset ingestion, presets, normalization and augmentation.
//!
//! Binary container (`.lwd`), all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "LWTADATA"
//! version   u32      1
//! dtype     u8       0 = u8, 1 = f32, 2 = f64
//! ndim      u8       number of dims including N
//! reserved  u16      0
//! dims      ndim × u64
//! n_labels  u64      must equal dims[0]
//! labels    n_labels × u32
//! data      prod(dims) values of dtype
//! ```
//!
//! CSV files hold one vector per row with the integer label in the last column;
//! an optional header row is skipped.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::samplers::RngState;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"LWTADATA";
pub const FORMAT_VERSION: u32 = 1;

static DIGITS: &[u8] = include_bytes!("../data/digits8x8.bin");

pub const PRESETS: [&str; 3] = ["blobs", "spirals", "digits8x8"];

/// Labeled samples: `x` is `[N, J]` (vectors) or `[N, H, W, C]` (images).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(x: Tensor, labels: Vec<usize>) -> Result<Self> {
        let n = x.shape().first().copied().unwrap_or(0);
        if labels.len() != n {
            return Err(Error::data(format!("{} labels for {n} samples", labels.len())));
        }
        if n == 0 {
            return Err(Error::data("dataset is empty"));
        }
        let classes = labels.iter().max().map_or(0, |m| m + 1);
        Ok(Dataset { x, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.x.shape()[1..]
    }

    pub fn is_image(&self) -> bool {
        self.x.ndim() == 4
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }
}

/// Per-channel statistics (last axis) used to standardize inputs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn fit(x: &Tensor) -> Self {
        let c = *x.shape().last().unwrap_or(&1);
        let rows = x.len() / c.max(1);
        let mut mean = vec![0.0; c];
        for row in x.data().chunks(c) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0; c];
        for row in x.data().chunks(c) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .iter()
            .map(|s| {
                let sd = (s / rows as f64).sqrt();
                if sd > 0.0 { sd } else { 1.0 }
            })
            .collect();
        Normalization { mean, std }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.mean.len();
        if x.shape().last() != Some(&c) {
            return Err(Error::data(format!(
                "normalization has {c} channels, input shape is {:?}",
                x.shape()
            )));
        }
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(c) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }
}

/// Normalized train/test split of one source.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub source: String,
    pub train: Dataset,
    pub test: Dataset,
    pub normalization: Normalization,
}

/// Loads a preset or file, normalizes it once with whole-dataset statistics,
/// and splits it by a seeded shuffle.
pub fn ingest(source: &str, seed: u64, test_fraction: f64) -> Result<DatasetBundle> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::config(format!("test_fraction must be in [0, 1), got {test_fraction}")));
    }
    let raw = if PRESETS.contains(&source) { load_preset(source, seed)? } else { load_file(Path::new(source))? };
    let normalization = Normalization::fit(&raw.x);
    let all = Dataset { x: normalization.apply(&raw.x)?, ..raw };
    let mut idx: Vec<usize> = (0..all.len()).collect();
    RngState::seed(seed ^ SPLIT_STREAM).shuffle(&mut idx);
    let n_test = ((all.len() as f64) * test_fraction).round() as usize;
    let (test_idx, train_idx) = idx.split_at(n_test);
    Ok(DatasetBundle {
        source: source.to_string(),
        train: all.subset(train_idx),
        test: all.subset(test_idx),
        normalization,
    })
}

/// Mixed into the seed so the split does not reuse the generator's stream.
const SPLIT_STREAM: u64 = 0x5eed_0000_5a11_7000;

pub fn load_preset(name: &str, seed: u64) -> Result<Dataset> {
    match name {
        "blobs" => blobs(1000, seed),
        "spirals" => spirals(1000, seed),
        "digits8x8" => parse_binary(DIGITS),
        _ => Err(Error::config(format!("unknown preset '{name}' (one of {})", PRESETS.join(", ")))),
    }
}

pub fn load_file(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(MAGIC) {
        parse_binary(&bytes)
    } else {
        parse_csv(&bytes)
    }
}

/// Two isotropic unit-variance Gaussians centred at ±(2, 2); labels alternate
/// before shuffling so the classes are balanced.
pub fn blobs(n: usize, seed: u64) -> Result<Dataset> {
    let mut rng = RngState::seed(seed);
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let mut x = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for &i in &order {
        let l = i % 2;
        let c = if l == 0 { -2.0 } else { 2.0 };
        x.push(c + rng.normal());
        x.push(c + rng.normal());
        labels.push(l);
    }
    Dataset::new(Tensor::new(&[n, 2], x)?, labels)
}

/// Two interleaved Archimedean spirals with small Gaussian jitter.
pub fn spirals(n: usize, seed: u64) -> Result<Dataset> {
    let mut rng = RngState::seed(seed);
    let mut x = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let l = i % 2;
        let t = 0.25 + 2.75 * rng.uniform();
        let angle = t * 2.0 * PI + l as f64 * PI;
        x.push(t * angle.cos() + 0.05 * rng.normal());
        x.push(t * angle.sin() + 0.05 * rng.normal());
        labels.push(l);
    }
    Dataset::new(Tensor::new(&[n, 2], x)?, labels)
}

// ── Binary format ──────────────────────────────────────────────────────────

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Parse {
                offset: self.pos as u64,
                message: format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn fail<T>(&self, at: usize, message: String) -> Result<T> {
        Err(Error::Parse { offset: at as u64, message })
    }
}

pub fn parse_binary(bytes: &[u8]) -> Result<Dataset> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8, "magic")? != MAGIC {
        return c.fail(0, "bad magic, expected LWTADATA".into());
    }
    let at = c.pos;
    let version = c.u32("version")?;
    if version != FORMAT_VERSION {
        return c.fail(at, format!("unsupported version {version}"));
    }
    let at = c.pos;
    let dtype = c.u8("dtype")?;
    let width = match dtype {
        0 => 1,
        1 => 4,
        2 => 8,
        _ => return c.fail(at, format!("unknown dtype code {dtype}")),
    };
    let at = c.pos;
    let ndim = c.u8("ndim")? as usize;
    if ndim != 2 && ndim != 4 {
        return c.fail(at, format!("ndim must be 2 or 4, got {ndim}"));
    }
    c.u16("reserved")?;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(c.u64("dims")? as usize);
    }
    let at = c.pos;
    let n_labels = c.u64("label count")? as usize;
    if n_labels != dims[0] {
        return Err(Error::data(format!(
            "label count {n_labels} does not match sample count {} (byte {at})",
            dims[0]
        )));
    }
    let mut labels = Vec::with_capacity(n_labels);
    for _ in 0..n_labels {
        labels.push(c.u32("labels")? as usize);
    }
    let count: usize = dims.iter().product();
    let raw = c.take(count * width, "data")?;
    if c.pos != bytes.len() {
        return c.fail(c.pos, format!("{} trailing bytes", bytes.len() - c.pos));
    }
    let data: Vec<f64> = match dtype {
        0 => raw.iter().map(|&b| b as f64).collect(),
        1 => raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4")) as f64).collect(),
        _ => raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8"))).collect(),
    };
    Dataset::new(Tensor::new(&dims, data)?, labels)
}

/// Serializes a dataset as f64 in the binary container.
pub fn write_binary(data: &Dataset) -> Vec<u8> {
    let shape = data.x.shape();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(2);
    out.push(shape.len() as u8);
    out.extend_from_slice(&0u16.to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.extend_from_slice(&(data.labels.len() as u64).to_le_bytes());
    for &l in &data.labels {
        out.extend_from_slice(&(l as u32).to_le_bytes());
    }
    for v in data.x.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

// ── CSV ────────────────────────────────────────────────────────────────────

pub fn parse_csv(bytes: &[u8]) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(bytes);
    let mut x = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            offset: e.position().map_or(0, |p| p.byte()),
            message: e.to_string(),
        })?;
        let offset = rec.position().map_or(0, |p| p.byte());
        let fail = |message: String| Error::Parse { offset, message };
        if rec.len() < 2 {
            return Err(fail("need at least one feature and a label per row".into()));
        }
        let parsed: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        let vals = match parsed {
            Ok(v) => v,
            Err(_) if row == 0 => continue,
            Err(e) => return Err(fail(format!("row {}: {e}", row + 1))),
        };
        let w = vals.len() - 1;
        if *width.get_or_insert(w) != w {
            return Err(fail(format!("row {} has {w} features, expected {}", row + 1, width.unwrap_or(0))));
        }
        let l = vals[w];
        if l < 0.0 || l.fract() != 0.0 {
            return Err(fail(format!("row {}: label {l} is not a nonnegative integer", row + 1)));
        }
        x.extend_from_slice(&vals[..w]);
        labels.push(l as usize);
    }
    let w = width.ok_or_else(|| Error::data("csv file has no data rows"))?;
    Dataset::new(Tensor::new(&[labels.len(), w], x)?, labels)
}

// ── Augmentation ───────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentFlags {
    /// Random crop after 4-pixel reflect padding.
    pub crop: bool,
    /// Horizontal flip with probability 0.5.
    pub flip: bool,
}

pub const CROP_PAD: usize = 4;

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i.clamp(0, n - 1) as usize
}

/// Applies per-sample crop and flip to an `[N, H, W, C]` batch. Each sample
/// draws its crop offsets (when enabled) and then its flip coin.
pub fn augment(x: &Tensor, flags: AugmentFlags, rng: &mut RngState) -> Result<Tensor> {
    if !flags.crop && !flags.flip {
        return Ok(x.clone());
    }
    let &[n, h, w, c] = x.shape() else {
        return Err(Error::config("augmentation requires image data [N, H, W, C]"));
    };
    let mut out = vec![0.0; x.len()];
    let img = h * w * c;
    for s in 0..n {
        let (dy, dx) = if flags.crop {
            (rng.below(2 * CROP_PAD + 1) as isize - CROP_PAD as isize, rng.below(2 * CROP_PAD + 1) as isize - CROP_PAD as isize)
        } else {
            (0, 0)
        };
        let flip = flags.flip && rng.uniform() < 0.5;
        let src = &x.data()[s * img..(s + 1) * img];
        let dst = &mut out[s * img..(s + 1) * img];
        for i in 0..h {
            let si = reflect(i as isize + dy, h);
            for j in 0..w {
                let jj = if flip { w - 1 - j } else { j };
                let sj = reflect(jj as isize + dx, w);
                dst[(i * w + j) * c..][..c].copy_from_slice(&src[(si * w + sj) * c..][..c]);
            }
        }
    }
    Tensor::new(x.shape(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_are_balanced() {
        let d = blobs(1000, 7).unwrap();
        assert_eq!(d.len(), 1000);
        assert_eq!(d.classes, 2);
        let ones = d.labels.iter().filter(|&&l| l == 1).count() as i64;
        assert!((ones - 500).abs() <= 1);
    }

    #[test]
    fn digits_preset_loads() {
        let d = load_preset("digits8x8", 0).unwrap();
        assert_eq!(d.x.shape(), &[1797, 8, 8, 1]);
        assert_eq!(d.classes, 10);
    }

    #[test]
    fn normalization_is_standard() {
        let b = ingest("blobs", 3, 0.0).unwrap();
        let n = Normalization::fit(&b.train.x);
        for (m, s) in n.mean.iter().zip(&n.std) {
            assert!(m.abs() < 1e-6 && (s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn binary_round_trip_and_errors() {
        let d = blobs(10, 1).unwrap();
        let bytes = write_binary(&d);
        assert_eq!(parse_binary(&bytes).unwrap(), d);
        match parse_binary(&bytes[..bytes.len() - 3]) {
            Err(Error::Parse { offset, .. }) => assert!(offset > 0),
            other => panic!("expected parse error, got {other:?}"),
        }
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(parse_binary(&bad), Err(Error::Parse { offset: 8, .. })));
        let mut short = bytes.clone();
        // label count 11 for 10 samples
        let at = 8 + 4 + 4 + 16;
        short[at..at + 8].copy_from_slice(&11u64.to_le_bytes());
        assert!(matches!(parse_binary(&short), Err(Error::Data(_))));
    }

    #[test]
    fn csv_parsing() {
        let d = parse_csv(b"x1,x2,label\n0.5,1.0,0\n-1,2,1\n").unwrap();
        assert_eq!(d.x.shape(), &[2, 2]);
        assert_eq!(d.labels, vec![0, 1]);
        match parse_csv(b"0.5,1.0,0\n-1,oops,1\n") {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 10),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn augmentation_contracts() {
        let mut rng = RngState::seed(0);
        let x = Tensor::new(&[3, 8, 8, 2], rng.normals(384)).unwrap();
        assert_eq!(augment(&x, AugmentFlags::default(), &mut rng).unwrap(), x);
        let flip = AugmentFlags { crop: false, flip: true };
        let once = augment(&x, flip, &mut RngState::seed(5)).unwrap();
        let twice = augment(&once, flip, &mut RngState::seed(5)).unwrap();
        assert_eq!(twice, x);
        let crop = AugmentFlags { crop: true, flip: true };
        assert_eq!(augment(&x, crop, &mut rng).unwrap().shape(), x.shape());
        let v = Tensor::zeros(&[4, 2]);
        assert!(matches!(augment(&v, crop, &mut rng), Err(Error::Config(_))));
    }
}
