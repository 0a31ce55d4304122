//! Data ingestion and artifact formats.
//!
//! * CIFAR-10 binary batches: 3073-byte records, one label byte followed by
//!   1024 red, 1024 green and 1024 blue bytes (each channel 32×32, row-major).
//! * PPM (`P6`, maxval 255) image export. Rows are read channel-planar, the
//!   same layout as CIFAR.
//! * Dataset CSV: one row per sample, `label,x0,x1,...` with shortest
//!   round-trip float formatting.
//! * Weights file: `u64` little-endian header length, a UTF-8 JSON header,
//!   then the flat parameters as little-endian `f64`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dataset, LossSpec, ModelSpec, ParamVector};
use crate::numcore::{Matrix, RngStream};

pub const CIFAR_RECORD_LEN: usize = 3073;
pub const CIFAR_PIXELS: usize = 3072;

/// Standard deviation of each synthetic blob, per pixel.
pub const SYNTH_BLOB_STD: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CifarRecord {
    pub label: u8,
    pub pixels: Vec<u8>,
}

impl CifarRecord {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() != CIFAR_RECORD_LEN {
            return Err(Error::Format(format!("CIFAR record must be {CIFAR_RECORD_LEN} bytes, got {}", bytes.len())));
        }
        if bytes[0] > 9 {
            return Err(Error::Format(format!("CIFAR label byte {} is out of range 0..=9", bytes[0])));
        }
        Ok(Self { label: bytes[0], pixels: bytes[1..].to_vec() })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(CIFAR_RECORD_LEN);
        out.push(self.label);
        out.extend_from_slice(&self.pixels);
        out
    }

    /// Pixels scaled to [0, 1] by `v / 255`.
    pub fn normalized(&self) -> Vec<f64> {
        self.pixels.iter().map(|&v| f64::from(v) / 255.0).collect()
    }
}

/// Images with their original class ids.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImages {
    pub inputs: Matrix,
    pub classes: Vec<u8>,
}

impl LabeledImages {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

pub fn parse_cifar10(bytes: &[u8]) -> Result<LabeledImages> {
    if bytes.len() % CIFAR_RECORD_LEN != 0 {
        return Err(Error::Format(format!(
            "truncated CIFAR-10 data: {} bytes is not a multiple of {CIFAR_RECORD_LEN}",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD_LEN;
    let mut data = Vec::with_capacity(n * CIFAR_PIXELS);
    let mut classes = Vec::with_capacity(n);
    for chunk in bytes.chunks_exact(CIFAR_RECORD_LEN) {
        let rec = CifarRecord::parse(chunk)?;
        classes.push(rec.label);
        data.extend(rec.pixels.iter().map(|&v| f64::from(v) / 255.0));
    }
    Ok(LabeledImages { inputs: Matrix::from_vec(n, CIFAR_PIXELS, data)?, classes })
}

/// Concatenates the records of all given batch files.
pub fn load_cifar10<P: AsRef<Path>>(paths: &[P]) -> Result<LabeledImages> {
    let mut bytes = Vec::new();
    for p in paths {
        let chunk = fs::read(p).map_err(|e| Error::io(p, e))?;
        if chunk.len() % CIFAR_RECORD_LEN != 0 {
            return Err(Error::Format(format!(
                "{}: truncated CIFAR-10 file ({} bytes)",
                p.as_ref().display(),
                chunk.len()
            )));
        }
        bytes.extend_from_slice(&chunk);
    }
    parse_cifar10(&bytes)
}

/// Two-class subset: `class_a → +1`, `class_b → −1`, `per_class` of each,
/// chosen by a seeded shuffle. Rows of class A come first.
pub fn select_binary(set: &LabeledImages, class_a: u8, class_b: u8, per_class: usize, seed: u64) -> Result<Dataset> {
    if class_a == class_b {
        return Err(Error::Config(format!("binary selection needs two distinct classes, got {class_a} twice")));
    }
    if per_class == 0 {
        return Err(Error::Config("per_class must be positive".into()));
    }
    let mut rows = Vec::with_capacity(2 * per_class);
    let mut labels = Vec::with_capacity(2 * per_class);
    for (class, label) in [(class_a, 1.0), (class_b, -1.0)] {
        let members: Vec<usize> = (0..set.len()).filter(|&i| set.classes[i] == class).collect();
        if members.len() < per_class {
            return Err(Error::Config(format!(
                "class {class} has {} samples, {per_class} requested",
                members.len()
            )));
        }
        let order = RngStream::for_stage(seed, "select_binary", u64::from(class)).permutation(members.len());
        let mut picked: Vec<usize> = order[..per_class].iter().map(|&j| members[j]).collect();
        picked.sort_unstable();
        rows.extend(picked);
        labels.extend(std::iter::repeat(label).take(per_class));
    }
    Dataset::binary(set.inputs.select_rows(&rows), labels)
}

/// Row-disjoint split of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub train: Dataset,
    pub holdout: Dataset,
    /// Source row of every training sample.
    pub train_idx: Vec<usize>,
    pub holdout_idx: Vec<usize>,
}

/// Seeded shuffle, then the first `⌊fraction·N⌋` rows train and the rest are
/// held out.
pub fn partition_disjoint(data: &Dataset, fraction: f64, seed: u64) -> Result<Partition> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("partition fraction must lie in (0, 1), got {fraction}")));
    }
    partition_counts(data, (fraction * data.len() as f64).floor() as usize, seed)
}

/// As [`partition_disjoint`] with an exact training-set size.
pub fn partition_counts(data: &Dataset, n_train: usize, seed: u64) -> Result<Partition> {
    let n = data.len();
    if n_train == 0 || n_train >= n {
        return Err(Error::Config(format!("partition of {n} rows with {n_train} training rows leaves one side empty")));
    }
    let perm = RngStream::for_stage(seed, "partition", 0).permutation(n);
    let train_idx = perm[..n_train].to_vec();
    let holdout_idx = perm[n_train..].to_vec();
    let pick = |idx: &[usize]| {
        Dataset::new(data.inputs.select_rows(idx), idx.iter().map(|&i| data.labels[i]).collect())
    };
    Ok(Partition { train: pick(&train_idx)?, holdout: pick(&holdout_idx)?, train_idx, holdout_idx })
}

/// Two Gaussian blobs in [0,1]^K with per-pixel std [`SYNTH_BLOB_STD`].
///
/// The class means are `0.5 ± (separation/2)·u` for a random unit vector `u`;
/// samples are clipped to the unit box. Labels alternate `+1, −1, …`.
pub fn synth_dataset(n: usize, k: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if n == 0 || n % 2 != 0 {
        return Err(Error::Config(format!("synthetic dataset size must be even and positive, got {n}")));
    }
    if k == 0 {
        return Err(Error::Config("synthetic input dimension must be positive".into()));
    }
    if !(separation > 0.0) {
        return Err(Error::Config(format!("separation must be positive, got {separation}")));
    }
    let mut rng = RngStream::for_stage(seed, "synth", 0);
    let mut dir = rng.normal_vec(k);
    let norm = crate::numcore::norm2(&dir);
    dir.iter_mut().for_each(|d| *d /= norm);
    let mut inputs = Matrix::zeros(n, k);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = if i % 2 == 0 { 1.0 } else { -1.0 };
        for (j, d) in dir.iter().enumerate() {
            let v = 0.5 + y * 0.5 * separation * d + SYNTH_BLOB_STD * rng.normal();
            inputs.set(i, j, v.clamp(0.0, 1.0));
        }
        labels.push(y);
    }
    Dataset::binary(inputs, labels)
}

/// Image geometry used to lay a flat row out as pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub height: usize,
    pub width: usize,
    /// 1 (grey) or 3 (RGB, channel-planar).
    pub channels: usize,
}

impl Geometry {
    pub const CIFAR: Geometry = Geometry { height: 32, width: 32, channels: 3 };

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A square RGB or grey layout when `k` allows one, else a single grey row.
    pub fn infer(k: usize) -> Geometry {
        let isqrt = |v: usize| {
            let r = (v as f64).sqrt().round() as usize;
            (r * r == v).then_some(r)
        };
        if k % 3 == 0 {
            if let Some(s) = isqrt(k / 3) {
                return Geometry { height: s, width: s, channels: 3 };
            }
        }
        if let Some(s) = isqrt(k) {
            return Geometry { height: s, width: s, channels: 1 };
        }
        Geometry { height: 1, width: k, channels: 1 }
    }
}

/// Index written next to exported images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportManifest {
    pub geometry: Geometry,
    pub files: Vec<String>,
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes one row as a binary PPM.
pub fn encode_ppm(row: &[f64], geometry: Geometry) -> Result<Vec<u8>> {
    if row.len() != geometry.len() || !(geometry.channels == 1 || geometry.channels == 3) {
        return Err(Error::Shape(format!("row of length {} does not fit geometry {geometry:?}", row.len())));
    }
    let plane = geometry.height * geometry.width;
    let mut out = format!("P6\n{} {}\n255\n", geometry.width, geometry.height).into_bytes();
    out.reserve(3 * plane);
    for p in 0..plane {
        for c in 0..3 {
            let ch = if geometry.channels == 3 { c } else { 0 };
            out.push(to_byte(row[ch * plane + p]));
        }
    }
    Ok(out)
}

/// Decodes a PPM written by [`encode_ppm`] back into a planar row in [0, 1].
pub fn decode_ppm(bytes: &[u8], geometry: Geometry) -> Result<Vec<f64>> {
    let header = format!("P6\n{} {}\n255\n", geometry.width, geometry.height);
    let body = bytes
        .strip_prefix(header.as_bytes())
        .ok_or_else(|| Error::Format("unexpected PPM header".into()))?;
    let plane = geometry.height * geometry.width;
    if body.len() != 3 * plane {
        return Err(Error::Format(format!("PPM body has {} bytes, expected {}", body.len(), 3 * plane)));
    }
    let mut row = vec![0.0; geometry.len()];
    for p in 0..plane {
        for c in 0..geometry.channels {
            row[c * plane + p] = f64::from(body[3 * p + c]) / 255.0;
        }
    }
    Ok(row)
}

/// Writes one `img_XXXX.ppm` per row plus `index.json`.
pub fn export_images(x: &Matrix, geometry: Geometry, out_dir: &Path) -> Result<ExportManifest> {
    if geometry.len() != x.cols() {
        return Err(Error::Shape(format!(
            "geometry {}x{}x{} does not match row length {}",
            geometry.height,
            geometry.width,
            geometry.channels,
            x.cols()
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut files = Vec::with_capacity(x.rows());
    for (i, row) in x.row_iter().enumerate() {
        let name = format!("img_{i:04}.ppm");
        let path = out_dir.join(&name);
        fs::write(&path, encode_ppm(row, geometry)?).map_err(|e| Error::io(&path, e))?;
        files.push(name);
    }
    let manifest = ExportManifest { geometry, files };
    write_json(&out_dir.join("index.json"), &manifest)?;
    Ok(manifest)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// `label,x0,...,x{K-1}` per row, no header.
pub fn write_dataset_csv(path: &Path, data: &Dataset) -> Result<()> {
    let mut out = String::new();
    for (row, y) in data.inputs.row_iter().zip(&data.labels) {
        out.push_str(&y.to_string());
        for v in row {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_dataset_csv(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let mut vals = line.split(',').map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), lineno + 1)))
        });
        let y = vals.next().ok_or_else(|| Error::Format(format!("{}:{}: empty row", path.display(), lineno + 1)))??;
        labels.push(y);
        rows.push(vals.collect::<Result<Vec<f64>>>()?);
    }
    Dataset::new(Matrix::from_rows(&rows)?, labels)
}

/// JSON header of a weights file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsHeader {
    pub format: String,
    pub model: ModelSpec,
    pub loss: LossSpec,
    pub weight_decay: f64,
    pub seed: u64,
    pub n_params: usize,
}

pub const WEIGHTS_FORMAT: &str = "recon-weights/1";

impl WeightsHeader {
    pub fn new(model: ModelSpec, loss: LossSpec, seed: u64) -> Self {
        let n_params = model.param_count();
        Self { format: WEIGHTS_FORMAT.into(), model, loss, weight_decay: loss.weight_decay, seed, n_params }
    }
}

pub fn encode_weights(header: &WeightsHeader, theta: &ParamVector) -> Result<Vec<u8>> {
    if theta.len() != header.n_params || !theta.matches(&header.model) {
        return Err(Error::Shape(format!("{} parameters for a header declaring {}", theta.len(), header.n_params)));
    }
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(8 + json.len() + 8 * theta.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in theta.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_weights(bytes: &[u8]) -> Result<(WeightsHeader, ParamVector)> {
    let len_bytes: [u8; 8] = bytes
        .get(..8)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| Error::Format("weights file shorter than its length prefix".into()))?;
    let hlen = usize::try_from(u64::from_le_bytes(len_bytes))
        .map_err(|_| Error::Format("weights header length overflows".into()))?;
    let json = bytes
        .get(8..8 + hlen)
        .ok_or_else(|| Error::Format("weights header is truncated".into()))?;
    let header: WeightsHeader = serde_json::from_slice(json)?;
    if header.format != WEIGHTS_FORMAT {
        return Err(Error::Format(format!("unsupported weights format {:?}", header.format)));
    }
    header.model.validate()?;
    let payload = &bytes[8 + hlen..];
    if payload.len() != 8 * header.n_params || header.n_params != header.model.param_count() {
        return Err(Error::Format(format!(
            "weights payload has {} bytes, header declares {} parameters",
            payload.len(),
            header.n_params
        )));
    }
    let flat = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunks of 8")))
        .collect();
    let theta = ParamVector::from_flat(&header.model, flat)?;
    Ok((header, theta))
}

pub fn write_weights(path: &Path, header: &WeightsHeader, theta: &ParamVector) -> Result<()> {
    let bytes = encode_weights(header, theta)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_weights(path: &Path) -> Result<(WeightsHeader, ParamVector)> {
    decode_weights(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Writes a CSV with a header line and pre-formatted rows.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&r.join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// `dir/name`, creating `dir` if needed.
pub fn artifact_path(dir: &Path, name: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(dir.join(name))
}
