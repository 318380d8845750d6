//! Multi-QF datasets: synthetic texture sources, CIFAR binaries and PNG
//! folders as inputs; a compact container with a QST dictionary as output.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{compress_rgb8, scale_default_table, CodecError};
use crate::jpeg::{classify_qst, Qst, QstClass};

pub const CONTAINER_MAGIC: &[u8; 4] = b"QSDS";
pub const CONTAINER_VERSION: u16 = 1;
pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("quality-factor list is empty")]
    EmptyQfList,
    #[error("source set is empty")]
    EmptySource,
    #[error("bad synthetic spec: {0}")]
    BadSpec(String),
    #[error("CIFAR file size {0} is not a multiple of {CIFAR_RECORD}")]
    BadRecordSize(usize),
    #[error("container: {0}")]
    Container(String),
    #[error("image {path}: {msg}")]
    Image { path: String, msg: String },
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn container_err(msg: impl Into<String>) -> DataError {
    DataError::Container(msg.into())
}

/// Uncompressed labelled images, interleaved 8-bit RGB.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceSet {
    pub classes: usize,
    pub width: usize,
    pub height: usize,
    pub images: Vec<Vec<u8>>,
    pub labels: Vec<u16>,
    /// Class names when known (PNG folders).
    pub class_names: Vec<String>,
}

impl SourceSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub label: u16,
    pub qst_id: u16,
    pub height: u16,
    pub width: u16,
    pub pixels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Dataset {
    pub classes: u16,
    pub qsts: Vec<Qst>,
    pub records: Vec<SampleRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn qst(&self, record: &SampleRecord) -> &Qst {
        &self.qsts[record.qst_id as usize]
    }

    pub fn validate(&self) -> Result<(), DataError> {
        for i in 0..self.qsts.len() {
            if self.qsts[i + 1..].contains(&self.qsts[i]) {
                return Err(container_err(format!("duplicate dictionary entry {i}")));
            }
        }
        for (i, r) in self.records.iter().enumerate() {
            if r.label >= self.classes {
                return Err(container_err(format!("record {i} label {} out of range", r.label)));
            }
            if r.qst_id as usize >= self.qsts.len() {
                return Err(container_err(format!("record {i} qst id {} out of range", r.qst_id)));
            }
            if r.pixels.len() != r.height as usize * r.width as usize * 3 {
                return Err(container_err(format!("record {i} pixel count")));
            }
        }
        Ok(())
    }

    /// Common image size, if every record shares one.
    pub fn uniform_size(&self) -> Option<(usize, usize)> {
        let first = self.records.first()?;
        let size = (first.height as usize, first.width as usize);
        self.records
            .iter()
            .all(|r| (r.height as usize, r.width as usize) == size)
            .then_some(size)
    }
}

pub fn write_container(ds: &Dataset) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CONTAINER_MAGIC);
    out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    out.extend_from_slice(&ds.classes.to_le_bytes());
    out.extend_from_slice(&(ds.qsts.len() as u16).to_le_bytes());
    for q in &ds.qsts {
        out.extend_from_slice(&q.to_bytes());
    }
    out.extend_from_slice(&(ds.records.len() as u64).to_le_bytes());
    for r in &ds.records {
        for v in [r.label, r.qst_id, r.height, r.width] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&r.pixels);
    }
    out
}

pub fn read_container(bytes: &[u8]) -> Result<Dataset, DataError> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8], DataError> {
        let end = pos.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| container_err("truncated"))?;
        let s = &bytes[pos..end];
        pos = end;
        Ok(s)
    };
    if take(4)? != CONTAINER_MAGIC {
        return Err(container_err("bad magic"));
    }
    let u16_at = |s: &[u8]| u16::from_le_bytes([s[0], s[1]]);
    let version = u16_at(take(2)?);
    if version != CONTAINER_VERSION {
        return Err(container_err(format!("unsupported version {version}")));
    }
    let classes = u16_at(take(2)?);
    let nq = u16_at(take(2)?) as usize;
    let mut qsts = Vec::with_capacity(nq);
    for _ in 0..nq {
        qsts.push(Qst::from_bytes(take(128)?).map_err(|e| container_err(e.to_string()))?);
    }
    let count = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
    let mut records = Vec::new();
    for _ in 0..count {
        let h = take(8)?;
        let (label, qst_id, height, width) = (u16_at(&h[0..]), u16_at(&h[2..]), u16_at(&h[4..]), u16_at(&h[6..]));
        let n = height as usize * width as usize * 3;
        records.push(SampleRecord {
            label,
            qst_id,
            height,
            width,
            pixels: take(n)?.to_vec(),
        });
    }
    if pos != bytes.len() {
        return Err(container_err("trailing bytes"));
    }
    let ds = Dataset {
        classes,
        qsts,
        records,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn save_container(ds: &Dataset, path: &Path) -> Result<(), DataError> {
    std::fs::write(path, write_container(ds))?;
    Ok(())
}

pub fn load_container(path: &Path) -> Result<Dataset, DataError> {
    read_container(&std::fs::read(path)?)
}

/// Compresses every source image at every QF. Records are image-major:
/// image 0 at each QF, then image 1, and so on.
pub fn build_compressed_dataset(source: &SourceSet, qf_list: &[u8]) -> Result<Dataset, DataError> {
    if qf_list.is_empty() {
        return Err(DataError::EmptyQfList);
    }
    if source.is_empty() {
        return Err(DataError::EmptySource);
    }
    let mut qsts: Vec<Qst> = Vec::new();
    let mut ids = Vec::with_capacity(qf_list.len());
    for &qf in qf_list {
        let q = scale_default_table(qf)?;
        let id = match qsts.iter().position(|x| *x == q) {
            Some(i) => i,
            None => {
                qsts.push(q);
                qsts.len() - 1
            }
        };
        ids.push(id);
    }
    let (w, h) = (source.width, source.height);
    let records: Result<Vec<Vec<SampleRecord>>, CodecError> = source
        .images
        .par_iter()
        .zip(source.labels.par_iter())
        .map(|(img, &label)| {
            ids.iter()
                .map(|&id| {
                    Ok(SampleRecord {
                        label,
                        qst_id: id as u16,
                        height: h as u16,
                        width: w as u16,
                        pixels: compress_rgb8(w, h, img, &qsts[id])?,
                    })
                })
                .collect()
        })
        .collect();
    Ok(Dataset {
        classes: source.classes as u16,
        qsts,
        records: records?.into_iter().flatten().collect(),
    })
}

/// Texture recipe for one class: a sum of oriented sinusoidal gratings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRecipe {
    /// Spatial frequency band, cycles per pixel.
    pub freq: (f64, f64),
    /// Orientation band, radians.
    pub angle: (f64, f64),
    pub gratings: usize,
    /// Per-image amplitude band of the grating sum, in pixel levels.
    pub amplitude: (f64, f64),
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: Vec<ClassRecipe>,
    pub width: usize,
    pub height: usize,
    pub samples_per_class: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    /// The desk-scale corpus: one oriented grating per image, class
    /// orientations spread evenly over half a turn, and class frequency
    /// bands rising with the class id modulo four, so higher classes carry
    /// their signal in more coarsely quantized frequencies.
    pub fn desk(classes: usize, samples_per_class: usize, seed: u64) -> Self {
        let spacing = PI / classes.max(1) as f64;
        let jitter = (0.2f64).min(spacing / 3.0);
        let recipes = (0..classes)
            .map(|c| {
                let center = c as f64 * spacing;
                let lo = 0.12 + 0.06 * (c % 4) as f64;
                ClassRecipe {
                    freq: (lo, lo + 0.1),
                    angle: (center - jitter, center + jitter),
                    gratings: 1,
                    amplitude: (6.0, 30.0),
                    noise: 10.0,
                }
            })
            .collect();
        Self {
            classes: recipes,
            width: 32,
            height: 32,
            samples_per_class,
            seed,
        }
    }

    fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::BadSpec(m.to_string()));
        if self.classes.is_empty() || self.classes.len() > u16::MAX as usize {
            return bad("class count must be in 1..=65535");
        }
        if self.width == 0 || self.height == 0 || self.width > u16::MAX as usize || self.height > u16::MAX as usize {
            return bad("image size must be in 1..=65535");
        }
        for (k, r) in self.classes.iter().enumerate() {
            let ok = r.freq.0 >= 0.0
                && r.freq.0 <= r.freq.1
                && r.freq.1 <= 0.5
                && r.angle.0 <= r.angle.1
                && r.amplitude.0 >= 0.0
                && r.amplitude.0 <= r.amplitude.1
                && r.noise >= 0.0
                && r.gratings >= 1;
            if !ok {
                return Err(DataError::BadSpec(format!("class {k} recipe out of range")));
            }
        }
        Ok(())
    }
}

fn uniform<R: Rng>(rng: &mut R, band: (f64, f64)) -> f64 {
    if band.0 == band.1 {
        band.0
    } else {
        rng.gen_range(band.0..band.1)
    }
}

fn synth_image<R: Rng>(r: &ClassRecipe, w: usize, h: usize, rng: &mut R) -> Vec<u8> {
    let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(96.0..160.0));
    let amp = uniform(rng, r.amplitude) / r.gratings as f64;
    let waves: Vec<(f64, f64, f64, [f64; 3])> = (0..r.gratings)
        .map(|_| {
            let f = uniform(rng, r.freq);
            let a = uniform(rng, r.angle);
            let phase = rng.gen_range(0.0..2.0 * PI);
            let tint: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.7..1.3));
            (2.0 * PI * f * a.cos(), 2.0 * PI * f * a.sin(), phase, tint)
        })
        .collect();
    let noise = Normal::new(0.0, r.noise.max(f64::MIN_POSITIVE)).expect("finite");
    let mut out = vec![0u8; w * h * 3];
    for y in 0..h {
        for x in 0..w {
            let mut px = base;
            for (kx, ky, phase, tint) in &waves {
                let v = amp * (kx * x as f64 + ky * y as f64 + phase).cos();
                for c in 0..3 {
                    px[c] += v * tint[c];
                }
            }
            for c in 0..3 {
                let n = if r.noise > 0.0 { noise.sample(rng) } else { 0.0 };
                out[(y * w + x) * 3 + c] = (px[c] + n).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}

/// Class-major synthetic images; identical specs give identical bytes.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SourceSet, DataError> {
    spec.validate()?;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (k, recipe) in spec.classes.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (k as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        for _ in 0..spec.samples_per_class {
            images.push(synth_image(recipe, spec.width, spec.height, &mut rng));
            labels.push(k as u16);
        }
    }
    Ok(SourceSet {
        classes: spec.classes.len(),
        width: spec.width,
        height: spec.height,
        images,
        labels,
        class_names: Vec::new(),
    })
}

/// Parses the CIFAR binary layout: per record one label byte, then the red,
/// green and blue 32×32 planes.
pub fn parse_cifar_binary(bytes: &[u8]) -> Result<SourceSet, DataError> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(DataError::BadRecordSize(bytes.len()));
    }
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut images = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    let mut labels = Vec::with_capacity(images.capacity());
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        labels.push(rec[0] as u16);
        let px = &rec[1..];
        let mut img = vec![0u8; plane * 3];
        for p in 0..plane {
            for c in 0..3 {
                img[p * 3 + c] = px[c * plane + p];
            }
        }
        images.push(img);
    }
    let classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    Ok(SourceSet {
        classes,
        width: CIFAR_SIDE,
        height: CIFAR_SIDE,
        images,
        labels,
        class_names: Vec::new(),
    })
}

pub fn read_cifar_binary(path: &Path) -> Result<SourceSet, DataError> {
    parse_cifar_binary(&std::fs::read(path)?)
}

pub fn write_cifar_binary(src: &SourceSet) -> Result<Vec<u8>, DataError> {
    if src.width != CIFAR_SIDE || src.height != CIFAR_SIDE {
        return Err(DataError::BadSpec("CIFAR records are 32×32".into()));
    }
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut out = Vec::with_capacity(src.len() * CIFAR_RECORD);
    for (img, &label) in src.images.iter().zip(&src.labels) {
        if label > u8::MAX as u16 {
            return Err(DataError::BadSpec(format!("label {label} does not fit a byte")));
        }
        out.push(label as u8);
        for c in 0..3 {
            out.extend((0..plane).map(|p| img[p * 3 + c]));
        }
    }
    Ok(out)
}

/// Loads `root/<class>/*.png`; classes are the sorted subdirectory names.
/// Every image must share one size.
pub fn load_png_dir(root: &Path) -> Result<SourceSet, DataError> {
    let mut class_dirs: Vec<_> = std::fs::read_dir(root)?
        .filter_map(Result::ok)
        .filter(|e| e.path().is_dir())
        .map(|e| e.path())
        .collect();
    class_dirs.sort();
    let mut set = SourceSet {
        classes: class_dirs.len(),
        width: 0,
        height: 0,
        images: Vec::new(),
        labels: Vec::new(),
        class_names: Vec::new(),
    };
    for (k, dir) in class_dirs.iter().enumerate() {
        set.class_names.push(dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default());
        let mut files: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(Result::ok)
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        files.sort();
        for f in files {
            let err = |msg: String| DataError::Image {
                path: f.display().to_string(),
                msg,
            };
            let img = image::open(&f).map_err(|e| err(e.to_string()))?.to_rgb8();
            let (w, h) = (img.width() as usize, img.height() as usize);
            if set.images.is_empty() {
                set.width = w;
                set.height = h;
            } else if (w, h) != (set.width, set.height) {
                return Err(err(format!("size {w}×{h} differs from {}×{}", set.width, set.height)));
            }
            set.images.push(img.into_raw());
            set.labels.push(k as u16);
        }
    }
    if set.images.is_empty() {
        return Err(DataError::EmptySource);
    }
    Ok(set)
}

/// Display label for a QST: `QF<n>` for scaled default tables, otherwise
/// `Qu<id>` with its dictionary index.
pub fn qst_label(q: &Qst, id: usize) -> String {
    match classify_qst(q) {
        QstClass::DefaultQf(qf) => format!("QF{qf}"),
        QstClass::NonDefault => format!("Qu{id}"),
    }
}

/// Sort key: descending quality for default tables, non-default last.
pub fn qst_order_key(q: &Qst) -> (u8, u8) {
    match classify_qst(q) {
        QstClass::DefaultQf(qf) => (0, 100 - qf),
        QstClass::NonDefault => (1, 0),
    }
}

/// CSV histogram `qst,count,fraction`, ordered by count (desc) then QF (asc).
pub fn qst_report(ds: &Dataset) -> String {
    let mut counts: BTreeMap<u16, usize> = BTreeMap::new();
    for r in &ds.records {
        *counts.entry(r.qst_id).or_default() += 1;
    }
    let mut rows: Vec<(u16, usize, u8)> = counts
        .into_iter()
        .map(|(id, n)| {
            let qf = match classify_qst(&ds.qsts[id as usize]) {
                QstClass::DefaultQf(qf) => qf,
                QstClass::NonDefault => u8::MAX,
            };
            (id, n, qf)
        })
        .collect();
    rows.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)).then(a.0.cmp(&b.0)));
    let total = ds.len() as f64;
    let mut out = String::from("qst,count,fraction\n");
    for (id, n, _) in rows {
        out.push_str(&format!(
            "{},{},{}\n",
            qst_label(&ds.qsts[id as usize], id as usize),
            n,
            n as f64 / total
        ));
    }
    out
}
