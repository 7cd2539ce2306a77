//! Dataset loading and synthesis.
//!
//! Three sources: the CIFAR-10 binary layout (3073-byte records, one label
//! byte then 3072 planar RGB bytes), seeded synthetic static images
//! (class-conditional Gaussian blobs, linearly separable by construction),
//! and seeded synthetic event streams (class-conditional moving dots with
//! on/off polarity channels). Synthetic data round-trips through a small
//! self-describing container so generated files are byte-reproducible.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CIFAR_RECORD_LEN: usize = 3073;
const DATASET_MAGIC: &[u8; 4] = b"SMDS";
const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataKind {
    Cifar10Binary,
    SyntheticStatic,
    SyntheticEvents,
}

impl std::str::FromStr for DataKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cifar10-binary" => Ok(DataKind::Cifar10Binary),
            "synthetic-static" => Ok(DataKind::SyntheticStatic),
            "synthetic-events" => Ok(DataKind::SyntheticEvents),
            other => Err(Error::contract(format!("unknown data kind '{other}'"))),
        }
    }
}

/// Where a dataset comes from and how to slice it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub kind: DataKind,
    pub path: Option<String>,
    /// Leading fraction used for training; the rest is validation.
    pub train_fraction: f64,
    /// Optional per-channel (mean, std) applied after the `[0,1]` scaling.
    pub normalization: Option<(Vec<f64>, Vec<f64>)>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec { kind: DataKind::SyntheticStatic, path: None, train_fraction: 0.9, normalization: None }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset<S> {
    pub kind: DataKind,
    /// Per-sample flattened values: `(C, H, W)` static, `(T, 2, H, W)` events.
    pub samples: Vec<Vec<S>>,
    pub labels: Vec<usize>,
    pub sample_shape: Vec<usize>,
    pub num_classes: usize,
}

impl<S: Scalar> Dataset<S> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn is_events(&self) -> bool {
        matches!(self.kind, DataKind::SyntheticEvents)
    }

    /// Keep only the first `n` samples.
    pub fn truncate(&mut self, n: usize) {
        self.samples.truncate(n);
        self.labels.truncate(n);
    }

    /// Leading-fraction split into (train, validation) index lists.
    pub fn split(&self, train_fraction: f64) -> (Vec<usize>, Vec<usize>) {
        let n_train = ((self.len() as f64) * train_fraction).floor() as usize;
        let n_train = n_train.min(self.len());
        ((0..n_train).collect(), (n_train..self.len()).collect())
    }

    /// Assemble a static batch `(B, C, H, W)`.
    pub fn batch_static(&self, idxs: &[usize]) -> Vec<S> {
        let mut out = Vec::with_capacity(idxs.len() * self.samples.first().map_or(0, Vec::len));
        for &i in idxs {
            out.extend_from_slice(&self.samples[i]);
        }
        out
    }

    /// Assemble an event batch `(T, B, 2, H, W)` from `(T, 2, H, W)` samples.
    pub fn batch_events(&self, idxs: &[usize]) -> Vec<S> {
        let t_len = self.sample_shape[0];
        let frame = self.sample_shape[1..].iter().product::<usize>();
        let mut out = vec![S::zero(); t_len * idxs.len() * frame];
        for (b, &i) in idxs.iter().enumerate() {
            for t in 0..t_len {
                let src = &self.samples[i][t * frame..(t + 1) * frame];
                let dst = (t * idxs.len() + b) * frame;
                out[dst..dst + frame].copy_from_slice(src);
            }
        }
        out
    }

    pub fn labels_for(&self, idxs: &[usize]) -> Vec<usize> {
        idxs.iter().map(|&i| self.labels[i]).collect()
    }
}

// ── CIFAR-10 binary ─────────────────────────────────────────────────

/// Parse one CIFAR-10 binary file: 3073-byte records, label then planar RGB.
pub fn load_cifar10_file<S: Scalar>(path: &Path) -> Result<Dataset<S>> {
    let bytes = fs::read(path)?;
    if !bytes.len().is_multiple_of(CIFAR_RECORD_LEN) {
        let offset = (bytes.len() / CIFAR_RECORD_LEN * CIFAR_RECORD_LEN) as u64;
        return Err(Error::format(
            offset,
            format!("truncated record: file length {} is not a multiple of {CIFAR_RECORD_LEN}", bytes.len()),
        ));
    }
    let count = bytes.len() / CIFAR_RECORD_LEN;
    let scale = S::from_f64_c(1.0 / 255.0);
    let mut samples = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let offset = i * CIFAR_RECORD_LEN;
        let label = bytes[offset];
        if label > 9 {
            return Err(Error::format(offset as u64, format!("label byte {label} out of range 0..=9")));
        }
        labels.push(label as usize);
        let pixels: Vec<S> = bytes[offset + 1..offset + CIFAR_RECORD_LEN]
            .iter()
            .map(|&b| S::from_f64_c(b as f64) * scale)
            .collect();
        samples.push(pixels);
    }
    Ok(Dataset {
        kind: DataKind::Cifar10Binary,
        samples,
        labels,
        sample_shape: vec![3, 32, 32],
        num_classes: 10,
    })
}

/// Load from a single `.bin` file or a directory in the standard layout
/// (`data_batch_1..5.bin` and `test_batch.bin`, whichever exist).
pub fn load_cifar10<S: Scalar>(path: &Path) -> Result<Dataset<S>> {
    if path.is_file() {
        return load_cifar10_file(path);
    }
    let names = ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin", "test_batch.bin"];
    let mut combined: Option<Dataset<S>> = None;
    for name in names {
        let file = path.join(name);
        if !file.is_file() {
            continue;
        }
        let part = load_cifar10_file(&file)?;
        match combined.as_mut() {
            None => combined = Some(part),
            Some(d) => {
                d.samples.extend(part.samples);
                d.labels.extend(part.labels);
            }
        }
    }
    combined.ok_or_else(|| Error::contract(format!("no CIFAR-10 binary files under {}", path.display())))
}

// ── synthetic generators ────────────────────────────────────────────

/// Class-conditional Gaussian-blob images `(3, side, side)` in `[0, 1]`.
/// Blob position and channel mix are class-determined, so the classes are
/// linearly separable; the seed only jitters position and noise.
pub fn gen_synthetic_static<S: Scalar>(seed: u64, count: usize, classes: usize, side: usize) -> Dataset<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = side as f64 / 6.0;
    let mut samples = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let class = i % classes;
        let angle = std::f64::consts::TAU * class as f64 / classes as f64;
        let cx = (0.5 + 0.28 * angle.cos()) * side as f64 + rng.random_range(-1.0..1.0);
        let cy = (0.5 + 0.28 * angle.sin()) * side as f64 + rng.random_range(-1.0..1.0);
        let amps = [
            0.55 + 0.45 * (angle).cos().abs(),
            0.55 + 0.45 * (angle + 1.0).sin().abs(),
            0.55 + 0.45 * (2.0 * angle).cos().abs(),
        ];
        let mut img = vec![S::zero(); 3 * side * side];
        for c in 0..3 {
            for y in 0..side {
                for x in 0..side {
                    let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    let bump = amps[c] * (-d2 / (2.0 * sigma * sigma)).exp();
                    let noise = rng.random_range(0.0..0.04);
                    let v = (bump + noise).clamp(0.0, 1.0);
                    img[(c * side + y) * side + x] = S::from_f64_c(v);
                }
            }
        }
        samples.push(img);
        labels.push(class);
    }
    Dataset {
        kind: DataKind::SyntheticStatic,
        samples,
        labels,
        sample_shape: vec![3, side, side],
        num_classes: classes,
    }
}

/// Class-conditional moving-dot event streams `(T, 2, side, side)` with
/// binary entries: channel 0 carries the dot's new position, channel 1 the
/// position it vacated.
pub fn gen_synthetic_events<S: Scalar>(
    seed: u64,
    count: usize,
    classes: usize,
    side: usize,
    timesteps: usize,
) -> Dataset<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    let frame = 2 * side * side;
    for i in 0..count {
        let class = i % classes;
        let angle = std::f64::consts::TAU * class as f64 / classes as f64;
        let speed = side as f64 * 0.6 / timesteps.max(1) as f64;
        let mut px = side as f64 * 0.5 + rng.random_range(-2.0..2.0);
        let mut py = side as f64 * 0.5 + rng.random_range(-2.0..2.0);
        let (vx, vy) = (angle.cos() * speed, angle.sin() * speed);
        let mut stream = vec![S::zero(); timesteps * frame];
        let mut prev: Option<(usize, usize)> = None;
        for t in 0..timesteps {
            let x = (px.round() as isize).clamp(1, side as isize - 2) as usize;
            let y = (py.round() as isize).clamp(1, side as isize - 2) as usize;
            for dy in -1i32..=1 {
                for dx in -1i32..=1 {
                    let yy = (y as i32 + dy) as usize;
                    let xx = (x as i32 + dx) as usize;
                    stream[t * frame + yy * side + xx] = S::one();
                }
            }
            if let Some((ox, oy)) = prev {
                if (ox, oy) != (x, y) {
                    stream[t * frame + side * side + oy * side + ox] = S::one();
                }
            }
            prev = Some((x, y));
            px += vx;
            py += vy;
        }
        samples.push(stream);
        labels.push(class);
    }
    Dataset {
        kind: DataKind::SyntheticEvents,
        samples,
        labels,
        sample_shape: vec![timesteps, 2, side, side],
        num_classes: classes,
    }
}

// ── dataset container ───────────────────────────────────────────────

/// Write a dataset to the self-describing container (magic, version, kind,
/// shapes, labels, f32 little-endian values). Atomic via temp-then-rename.
pub fn save_dataset<S: Scalar>(data: &Dataset<S>, path: &Path) -> Result<()> {
    if data.labels.iter().any(|&l| l > u8::MAX as usize) {
        return Err(Error::contract("dataset container stores labels as single bytes"));
    }
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    buf.push(match data.kind {
        DataKind::Cifar10Binary => 0,
        DataKind::SyntheticStatic => 1,
        DataKind::SyntheticEvents => 2,
    });
    buf.extend_from_slice(&(data.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(data.num_classes as u32).to_le_bytes());
    buf.extend_from_slice(&(data.sample_shape.len() as u32).to_le_bytes());
    for &d in &data.sample_shape {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &l in &data.labels {
        buf.push(l as u8);
    }
    for sample in &data.samples {
        for &v in sample {
            buf.extend_from_slice(&v.to_f32_s().to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_dataset<S: Scalar>(path: &Path) -> Result<Dataset<S>> {
    let bytes = fs::read(path)?;
    let mut r = ByteReader::new(&bytes);
    let magic = r.take(4)?;
    if magic != DATASET_MAGIC {
        return Err(Error::format(0, "bad dataset magic"));
    }
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(Error::format(4, format!("unsupported dataset version {version}")));
    }
    let kind = match r.u8()? {
        0 => DataKind::Cifar10Binary,
        1 => DataKind::SyntheticStatic,
        2 => DataKind::SyntheticEvents,
        other => return Err(Error::format(r.pos as u64 - 1, format!("unknown dataset kind {other}"))),
    };
    let count = r.u32()? as usize;
    let classes = r.u32()? as usize;
    let ndim = r.u32()? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.u32()? as usize);
    }
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        labels.push(r.u8()? as usize);
    }
    let sample_len: usize = shape.iter().product();
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let mut s = Vec::with_capacity(sample_len);
        for _ in 0..sample_len {
            s.push(S::from_f32_s(r.f32()?));
        }
        samples.push(s);
    }
    Ok(Dataset { kind, samples, labels, sample_shape: shape, num_classes: classes })
}

/// Load per a [`DatasetSpec`]: explicit files win, otherwise synthesis.
/// Per-channel normalization constants, when present, are applied after
/// the `[0,1]` scaling.
pub fn load_spec<S: Scalar>(spec: &DatasetSpec, seed: u64, count: usize) -> Result<Dataset<S>> {
    let mut data = match (&spec.kind, &spec.path) {
        (DataKind::Cifar10Binary, Some(p)) => load_cifar10(Path::new(p))?,
        (DataKind::Cifar10Binary, None) => {
            return Err(Error::contract("cifar10-binary needs --data-path"));
        }
        (_, Some(p)) => load_dataset(Path::new(p))?,
        (DataKind::SyntheticStatic, None) => gen_synthetic_static(seed, count, 10, 32),
        (DataKind::SyntheticEvents, None) => gen_synthetic_events(seed, count, 10, 32, 4),
    };
    if let Some((mean, std)) = &spec.normalization {
        if data.is_events() {
            return Err(Error::contract("normalization applies to static images only"));
        }
        let channels = data.sample_shape[0];
        if mean.len() != channels || std.len() != channels {
            return Err(Error::dim(format!(
                "normalization constants need {channels} channels, got {}/{}",
                mean.len(),
                std.len()
            )));
        }
        let plane: usize = data.sample_shape[1..].iter().product();
        for sample in &mut data.samples {
            for c in 0..channels {
                let (m, s) = (S::from_f64_c(mean[c]), S::from_f64_c(std[c]));
                for v in &mut sample[c * plane..(c + 1) * plane] {
                    *v = (*v - m) / s;
                }
            }
        }
    }
    Ok(data)
}

/// Horizontal flip plus 4-pixel zero-pad-and-crop for `(C, H, W)` images.
pub fn augment_static<S: Scalar>(sample: &[S], shape: &[usize], rng: &mut ChaCha8Rng) -> Vec<S> {
    let (c_len, h, w) = (shape[0], shape[1], shape[2]);
    let flip = rng.random_bool(0.5);
    let pad = 4usize;
    let dy = rng.random_range(0..=2 * pad);
    let dx = rng.random_range(0..=2 * pad);
    let mut out = vec![S::zero(); sample.len()];
    for c in 0..c_len {
        for y in 0..h {
            for x in 0..w {
                // source position in the padded image
                let sy = y as isize + dy as isize - pad as isize;
                let sx = x as isize + dx as isize - pad as isize;
                if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                    continue;
                }
                let sx = if flip { w - 1 - sx as usize } else { sx as usize };
                out[(c * h + y) * w + x] = sample[(c * h + sy as usize) * w + sx];
            }
        }
    }
    out
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.pos as u64, "unexpected end of file"));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
