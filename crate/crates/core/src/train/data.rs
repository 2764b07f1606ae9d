//! Image classification datasets: a seeded synthetic generator and loaders
//! for IDX and CSV files.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Rng;

/// Parameters of the synthetic generator. Each class has a smooth random
/// prototype image (coarse grid upsampled by nearest neighbour); a sample is
/// its prototype cyclically shifted by up to `jitter` pixels plus Gaussian
/// noise. Prototypes depend only on `proto_seed`, samples on `seed`, so
/// datasets with the same prototypes and different seeds are i.i.d. splits.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n: usize,
    pub classes: usize,
    pub size: usize,
    pub channels: usize,
    pub seed: u64,
    pub proto_seed: u64,
    pub grid: usize,
    pub noise: f64,
    pub jitter: usize,
    /// Strength of a fixed perturbation added to every prototype; non-zero
    /// values give a shifted distribution over the same classes.
    pub shift: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n: 4096,
            classes: 10,
            size: 32,
            channels: 3,
            seed: 0,
            proto_seed: 1234,
            grid: 4,
            noise: 1.0,
            jitter: 2,
            shift: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSpec {
    Synthetic(SyntheticSpec),
    Idx { images: PathBuf, labels: PathBuf },
    Csv { path: PathBuf, channels: usize, size: Option<usize> },
}

impl DatasetSpec {
    /// Held-out companion of a synthetic spec: same prototypes, fresh
    /// samples, a quarter of the size.
    pub fn eval_companion(&self) -> Option<DatasetSpec> {
        match self {
            DatasetSpec::Synthetic(s) => Some(DatasetSpec::Synthetic(SyntheticSpec {
                n: (s.n / 4).max(s.classes),
                seed: s.seed ^ 0x0E7A_1000,
                ..s.clone()
            })),
            _ => None,
        }
    }
}

fn kv_pairs(body: &str) -> Result<Vec<(&str, &str)>> {
    body.split(',')
        .filter(|s| !s.is_empty())
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Config(format!("dataset option {kv:?} is not key=value")))
        })
        .collect()
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("dataset option {key}={v:?} is not a valid number")))
}

/// Spec strings:
///
/// * `synthetic[:n=4096,classes=10,size=32,channels=3,seed=0,proto=1234,grid=4,noise=1.0,jitter=2,shift=0]`
/// * `idx:images=<path>,labels=<path>`
/// * `csv:<path>` or `csv:path=<path>,channels=1,size=28`
impl FromStr for DatasetSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, body) = s.split_once(':').unwrap_or((s, ""));
        match kind {
            "synthetic" => {
                let mut spec = SyntheticSpec::default();
                for (k, v) in kv_pairs(body)? {
                    match k {
                        "n" => spec.n = num(k, v)?,
                        "classes" => spec.classes = num(k, v)?,
                        "size" => spec.size = num(k, v)?,
                        "channels" => spec.channels = num(k, v)?,
                        "seed" => spec.seed = num(k, v)?,
                        "proto" => spec.proto_seed = num(k, v)?,
                        "grid" => spec.grid = num(k, v)?,
                        "noise" => spec.noise = num(k, v)?,
                        "jitter" => spec.jitter = num(k, v)?,
                        "shift" => spec.shift = num(k, v)?,
                        _ => return Err(Error::Config(format!("unknown synthetic option {k:?}"))),
                    }
                }
                if spec.n == 0 || spec.classes == 0 || spec.size == 0 || spec.channels == 0 || spec.grid == 0 {
                    return Err(Error::Config("synthetic n, classes, size, channels and grid must be positive".into()));
                }
                Ok(DatasetSpec::Synthetic(spec))
            }
            "idx" => {
                let (mut images, mut labels) = (None, None);
                for (k, v) in kv_pairs(body)? {
                    match k {
                        "images" => images = Some(PathBuf::from(v)),
                        "labels" => labels = Some(PathBuf::from(v)),
                        _ => return Err(Error::Config(format!("unknown idx option {k:?}"))),
                    }
                }
                match (images, labels) {
                    (Some(images), Some(labels)) => Ok(DatasetSpec::Idx { images, labels }),
                    _ => Err(Error::Config("idx dataset needs images=<path>,labels=<path>".into())),
                }
            }
            "csv" => {
                if !body.contains('=') {
                    if body.is_empty() {
                        return Err(Error::Config("csv dataset needs a path".into()));
                    }
                    return Ok(DatasetSpec::Csv {
                        path: PathBuf::from(body),
                        channels: 1,
                        size: None,
                    });
                }
                let (mut path, mut channels, mut size) = (None, 1, None);
                for (k, v) in kv_pairs(body)? {
                    match k {
                        "path" => path = Some(PathBuf::from(v)),
                        "channels" => channels = num(k, v)?,
                        "size" => size = Some(num(k, v)?),
                        _ => return Err(Error::Config(format!("unknown csv option {k:?}"))),
                    }
                }
                let path = path.ok_or_else(|| Error::Config("csv dataset needs path=<path>".into()))?;
                Ok(DatasetSpec::Csv { path, channels, size })
            }
            other => Err(Error::Config(format!(
                "unknown dataset kind {other:?} (expected synthetic, idx or csv)"
            ))),
        }
    }
}

impl fmt::Display for DatasetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetSpec::Synthetic(s) => write!(
                f,
                "synthetic:n={},classes={},size={},channels={},seed={},proto={},grid={},noise={},jitter={},shift={}",
                s.n, s.classes, s.size, s.channels, s.seed, s.proto_seed, s.grid, s.noise, s.jitter, s.shift
            ),
            DatasetSpec::Idx { images, labels } => {
                write!(f, "idx:images={},labels={}", images.display(), labels.display())
            }
            DatasetSpec::Csv { path, channels, size } => {
                write!(f, "csv:path={},channels={channels}", path.display())?;
                if let Some(s) = size {
                    write!(f, ",size={s}")?;
                }
                Ok(())
            }
        }
    }
}

/// In-memory labelled images, `[C×H×W]` each, stored as `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pixels: Vec<f32>,
    labels: Vec<usize>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub n_classes: usize,
}

impl Dataset {
    pub fn new(
        pixels: Vec<f32>,
        labels: Vec<usize>,
        channels: usize,
        height: usize,
        width: usize,
        n_classes: usize,
    ) -> Result<Self> {
        let per = channels * height * width;
        if per == 0 || pixels.len() != labels.len() * per {
            return Err(Error::InvalidArgument(format!(
                "{} pixels for {} images of {channels}x{height}x{width}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::InvalidArgument(format!("label {l} out of range for {n_classes} classes")));
        }
        Ok(Self {
            pixels,
            labels,
            channels,
            height,
            width,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    /// Images `[B×C×H×W]` and labels for the given indices.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!("index {i} past dataset of {}", self.len())));
            }
            data.extend(self.image(i).iter().map(|&v| v as f64));
        }
        let t = Tensor::new(vec![indices.len(), self.channels, self.height, self.width], data)?;
        Ok((t, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    /// Permutation of `0..len` for `epoch`, determined by `seed`.
    pub fn epoch_order(&self, seed: u64, epoch: u64) -> Vec<usize> {
        let mut rng = Rng::seed_from_u64(seed);
        // kept clear of the low streams the trainer uses for init, dropout and routers
        rng.set_stream(DATA_ORDER_STREAMS | epoch);
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut rng);
        order
    }

    /// Deterministic split: the last `fraction` of a seeded permutation is
    /// returned as the second set.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(fraction > 0.0 && fraction < 1.0) || self.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "cannot split {} items with fraction {fraction}",
                self.len()
            )));
        }
        let order = self.epoch_order(seed, u64::MAX);
        let n_held = ((self.len() as f64 * fraction).round() as usize).clamp(1, self.len() - 1);
        let (a, b) = order.split_at(self.len() - n_held);
        Ok((self.subset(a), self.subset(b)))
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut pixels = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        Dataset {
            pixels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ..self.clone_header()
        }
    }

    fn clone_header(&self) -> Dataset {
        Dataset {
            pixels: Vec::new(),
            labels: Vec::new(),
            channels: self.channels,
            height: self.height,
            width: self.width,
            n_classes: self.n_classes,
        }
    }
}

/// Stream range for per-epoch batch order: `DATA_ORDER_STREAMS | epoch`.
pub const DATA_ORDER_STREAMS: u64 = 1 << 63;

pub fn load_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    match spec {
        DatasetSpec::Synthetic(s) => Ok(synthetic(s)),
        DatasetSpec::Idx { images, labels } => load_idx_pair(images, labels),
        DatasetSpec::Csv { path, channels, size } => load_csv(path, *channels, *size),
    }
}

fn prototypes(spec: &SyntheticSpec) -> Vec<Vec<f32>> {
    let mut rng = Rng::seed_from_u64(spec.proto_seed);
    let (g, s, c) = (spec.grid, spec.size, spec.channels);
    let coarse = |rng: &mut Rng| -> Vec<f64> {
        (0..c * g * g).map(|_| StandardNormal.sample(rng)).collect()
    };
    let base: Vec<Vec<f64>> = (0..spec.classes).map(|_| coarse(&mut rng)).collect();
    let mut shift_rng = Rng::seed_from_u64(spec.proto_seed);
    shift_rng.set_stream(1);
    let shift: Vec<Vec<f64>> = (0..spec.classes).map(|_| coarse(&mut shift_rng)).collect();
    base.iter()
        .zip(&shift)
        .map(|(b, d)| {
            let mut img = Vec::with_capacity(c * s * s);
            for ci in 0..c {
                for y in 0..s {
                    for x in 0..s {
                        let k = (ci * g + y * g / s) * g + x * g / s;
                        img.push((b[k] + spec.shift * d[k]) as f32);
                    }
                }
            }
            img
        })
        .collect()
}

/// Class-balanced synthetic images: labels cycle through the classes and
/// the item order is shuffled by `seed`.
pub fn synthetic(spec: &SyntheticSpec) -> Dataset {
    let protos = prototypes(spec);
    let mut rng = Rng::seed_from_u64(spec.seed);
    let mut labels: Vec<usize> = (0..spec.n).map(|i| i % spec.classes).collect();
    labels.shuffle(&mut rng);
    let (s, c) = (spec.size, spec.channels);
    let j = spec.jitter as i64;
    let mut pixels = Vec::with_capacity(spec.n * c * s * s);
    for &l in &labels {
        let p = &protos[l];
        let dy = rng.random_range(-j..=j);
        let dx = rng.random_range(-j..=j);
        for ci in 0..c {
            for y in 0..s {
                let sy = (y as i64 - dy).rem_euclid(s as i64) as usize;
                for x in 0..s {
                    let sx = (x as i64 - dx).rem_euclid(s as i64) as usize;
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    pixels.push(p[(ci * s + sy) * s + sx] + (spec.noise * noise) as f32);
                }
            }
        }
    }
    Dataset {
        pixels,
        labels,
        channels: c,
        height: s,
        width: s,
        n_classes: spec.classes,
    }
}

/// A parsed IDX array: dims and values widened to `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxArray {
    pub type_code: u8,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

fn parse_err<T>(offset: usize, message: impl Into<String>) -> Result<T> {
    Err(Error::Parse {
        offset: offset as u64,
        message: message.into(),
    })
}

/// Parses a big-endian IDX buffer (`00 00 <type> <ndim>` then `ndim`
/// u32 dims and the payload).
pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return parse_err(bytes.len(), "truncated IDX header");
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return parse_err(0, format!("bad IDX magic {:02x}{:02x}", bytes[0], bytes[1]));
    }
    let type_code = bytes[2];
    let width = match type_code {
        0x08 | 0x09 => 1,
        0x0B => 2,
        0x0C | 0x0D => 4,
        0x0E => 8,
        t => return parse_err(2, format!("unknown IDX element type 0x{t:02x}")),
    };
    let ndim = bytes[3] as usize;
    if ndim == 0 {
        return parse_err(3, "IDX array with zero dimensions");
    }
    let mut dims = Vec::with_capacity(ndim);
    for d in 0..ndim {
        let off = 4 + 4 * d;
        let Some(b) = bytes.get(off..off + 4) else {
            return parse_err(bytes.len(), format!("truncated IDX header: dimension {d} missing"));
        };
        dims.push(u32::from_be_bytes(b.try_into().expect("4 bytes")) as usize);
    }
    let start = 4 + 4 * ndim;
    let count: usize = dims.iter().product();
    let need = count * width;
    let have = bytes.len() - start;
    if have < need {
        return parse_err(bytes.len(), format!("IDX payload truncated: {need} bytes expected, {have} present"));
    }
    if have > need {
        return parse_err(start + need, format!("{} trailing bytes after IDX payload", have - need));
    }
    let payload = &bytes[start..];
    let values = match type_code {
        0x08 => payload.iter().map(|&b| b as f64).collect(),
        0x09 => payload.iter().map(|&b| b as i8 as f64).collect(),
        0x0B => payload
            .chunks_exact(2)
            .map(|c| i16::from_be_bytes([c[0], c[1]]) as f64)
            .collect(),
        0x0C => payload
            .chunks_exact(4)
            .map(|c| i32::from_be_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        0x0D => payload
            .chunks_exact(4)
            .map(|c| f32::from_be_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        _ => payload
            .chunks_exact(8)
            .map(|c| f64::from_be_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    };
    Ok(IdxArray { type_code, dims, values })
}

/// Encodes a `u8` IDX buffer; the inverse of [`parse_idx`] for type 0x08.
pub fn encode_idx_u8(dims: &[usize], values: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, 0x08, dims.len() as u8];
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(values);
    out
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })
}

/// Images IDX (`[N×H×W]` or `[N×C×H×W]`) plus labels IDX (`[N]`). Unsigned
/// byte pixels are scaled to `[0, 1]`.
pub fn load_idx_pair(images: &Path, labels: &Path) -> Result<Dataset> {
    let img = parse_idx(&read(images)?)?;
    let lab = parse_idx(&read(labels)?)?;
    let (n, c, h, w) = match img.dims[..] {
        [n, h, w] => (n, 1, h, w),
        [n, c, h, w] => (n, c, h, w),
        ref d => return parse_err(3, format!("image IDX must have 3 or 4 dims, got {d:?}")),
    };
    if lab.dims.len() != 1 || lab.dims[0] != n {
        return parse_err(4, format!("label IDX dims {:?} do not match {n} images", lab.dims));
    }
    let scale = if img.type_code == 0x08 { 1.0 / 255.0 } else { 1.0 };
    let mut label_vec = Vec::with_capacity(n);
    let label_start = 8;
    for (i, &v) in lab.values.iter().enumerate() {
        if v < 0.0 || v.fract() != 0.0 {
            return parse_err(label_start + i, format!("label {v} is not a class index"));
        }
        label_vec.push(v as usize);
    }
    let n_classes = label_vec.iter().max().map_or(1, |m| m + 1);
    let pixels = img.values.iter().map(|&v| (v * scale) as f32).collect();
    Dataset::new(pixels, label_vec, c, h, w, n_classes)
}

/// Rows of `label,pixel,pixel,...` with no header. Without `size` the
/// image is taken to be square.
pub fn load_csv(path: &Path, channels: usize, size: Option<usize>) -> Result<Dataset> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    parse_csv(file, channels, size)
}

pub fn parse_csv<R: std::io::Read>(reader: R, channels: usize, size: Option<usize>) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    let mut side = size;
    let mut record = csv::StringRecord::new();
    loop {
        let offset = rdr.position().byte();
        let more = rdr.read_record(&mut record).map_err(|e| Error::Parse {
            offset: e.position().map_or(offset, |p| p.byte()),
            message: e.to_string(),
        })?;
        if !more {
            break;
        }
        if record.iter().all(str::is_empty) {
            continue;
        }
        let label: usize = record[0].parse().map_err(|_| Error::Parse {
            offset,
            message: format!("label {:?} is not a non-negative integer", &record[0]),
        })?;
        let n_px = record.len() - 1;
        let s = match side {
            Some(s) => s,
            None => {
                let per = n_px / channels.max(1);
                let s = (per as f64).sqrt().round() as usize;
                side = Some(s);
                s
            }
        };
        if n_px != channels * s * s || s == 0 {
            return parse_err(
                offset as usize,
                format!("row has {n_px} pixels, expected {} ({channels}x{s}x{s})", channels * s * s),
            );
        }
        for (k, field) in record.iter().skip(1).enumerate() {
            let v: f32 = field.parse().map_err(|_| Error::Parse {
                offset,
                message: format!("pixel {k} value {field:?} is not a number"),
            })?;
            pixels.push(v);
        }
        labels.push(label);
    }
    if labels.is_empty() {
        return parse_err(0, "CSV dataset has no rows");
    }
    let s = side.unwrap_or(1);
    let n_classes = labels.iter().max().map_or(1, |m| m + 1);
    Dataset::new(pixels, labels, channels, s, s, n_classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_balanced_and_seeded() {
        let spec: DatasetSpec = "synthetic:n=1024,classes=10,size=32,seed=7".parse().unwrap();
        let d = load_dataset(&spec).unwrap();
        assert_eq!(d.len(), 1024);
        let counts = d.class_counts();
        let (lo, hi) = (*counts.iter().min().unwrap(), *counts.iter().max().unwrap());
        assert!(hi - lo <= 1, "{counts:?}");
        assert_eq!(d, load_dataset(&spec).unwrap());
        assert_eq!(d.epoch_order(3, 0), d.epoch_order(3, 0));
        assert_ne!(d.epoch_order(3, 0), d.epoch_order(3, 1));
    }

    #[test]
    fn spec_round_trip() {
        for s in [
            "synthetic:n=64,classes=4,size=8,channels=1,seed=2,proto=3,grid=2,noise=0.5,jitter=1,shift=0.25",
            "idx:images=a.idx,labels=b.idx",
            "csv:path=x.csv,channels=3,size=4",
        ] {
            let spec: DatasetSpec = s.parse().unwrap();
            assert_eq!(spec.to_string(), s);
            assert_eq!(spec.to_string().parse::<DatasetSpec>().unwrap(), spec);
        }
        assert!("mnist".parse::<DatasetSpec>().is_err());
        assert!("synthetic:n=x".parse::<DatasetSpec>().is_err());
        assert!("synthetic:foo=1".parse::<DatasetSpec>().is_err());
    }

    #[test]
    fn idx_u8_images() {
        let bytes = encode_idx_u8(&[2, 2, 2], &[0, 255, 1, 2, 3, 4, 5, 6]);
        let a = parse_idx(&bytes).unwrap();
        assert_eq!(&bytes[..4], &[0, 0, 8, 3]);
        assert_eq!(u32::from_be_bytes(bytes[0..4].try_into().unwrap()), 0x0000_0803);
        assert_eq!(a.dims, vec![2, 2, 2]);
        assert_eq!(a.values[1], 255.0);
    }

    #[test]
    fn idx_errors_name_offsets() {
        let good = encode_idx_u8(&[2, 2], &[1, 2, 3, 4]);
        let mut bad = good.clone();
        bad[0] = 1;
        assert!(matches!(parse_idx(&bad), Err(Error::Parse { offset: 0, .. })));
        let truncated = &good[..good.len() - 1];
        assert!(matches!(parse_idx(truncated), Err(Error::Parse { offset: 15, .. })));
        let mut long = good.clone();
        long.push(9);
        assert!(matches!(parse_idx(&long), Err(Error::Parse { offset: 16, .. })));
        let mut ty = good;
        ty[2] = 0x07;
        assert!(matches!(parse_idx(&ty), Err(Error::Parse { offset: 2, .. })));
    }

    #[test]
    fn csv_rows() {
        let d = parse_csv("1,0.5,0.25,0,1\n0,1,1,1,1\n".as_bytes(), 1, None).unwrap();
        assert_eq!((d.len(), d.height, d.n_classes), (2, 2, 2));
        assert_eq!(d.image(0), &[0.5, 0.25, 0.0, 1.0]);
        let err = parse_csv("1,0.5,0.25,0,1\n0,1,x,1,1\n".as_bytes(), 1, None).unwrap_err();
        assert!(matches!(err, Error::Parse { offset: 15, .. }), "{err}");
        let err = parse_csv("1,0.5,0.25,0,1\n0,1,1\n".as_bytes(), 1, None).unwrap_err();
        assert!(matches!(err, Error::Parse { offset: 15, .. }), "{err}");
    }

    #[test]
    fn split_is_a_partition() {
        let d = synthetic(&SyntheticSpec {
            n: 50,
            size: 4,
            ..Default::default()
        });
        let (a, b) = d.split(0.2, 1).unwrap();
        assert_eq!((a.len(), b.len()), (40, 10));
        let mut counts = a.class_counts();
        for (c, x) in counts.iter_mut().zip(b.class_counts()) {
            *c += x;
        }
        assert_eq!(counts, d.class_counts());
    }

    #[test]
    fn shift_changes_prototypes_only() {
        let base = SyntheticSpec {
            n: 20,
            size: 8,
            noise: 0.0,
            jitter: 0,
            ..Default::default()
        };
        let a = synthetic(&base);
        let b = synthetic(&SyntheticSpec { shift: 0.5, ..base });
        assert_eq!(a.labels(), b.labels());
        assert_ne!(a.image(0), b.image(0));
    }
}
