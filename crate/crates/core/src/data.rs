//! Datasets: synthetic generators, IDX files and CSV import/export.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::export;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Provenance {
    Synthetic1D,
    Synthetic2D,
    IdxFiles { images: PathBuf, labels: PathBuf },
    Csv,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub feature_dim: usize,
    pub n_classes: usize,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, feature_dim: usize, n_classes: usize, provenance: Provenance) -> Result<Self> {
        for (i, s) in samples.iter().enumerate() {
            if s.features.len() != feature_dim {
                return Err(Error::InvalidParameter(format!(
                    "sample {i} has {} features, expected {feature_dim}",
                    s.features.len()
                )));
            }
            if s.label >= n_classes {
                return Err(Error::InvalidParameter(format!(
                    "sample {i} has label {} but there are {n_classes} classes",
                    s.label
                )));
            }
        }
        Ok(Self {
            samples,
            feature_dim,
            n_classes,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_classes];
        for s in &self.samples {
            c[s.label] += 1;
        }
        c
    }

    fn with_samples(&self, samples: Vec<Sample>) -> Self {
        Self {
            samples,
            feature_dim: self.feature_dim,
            n_classes: self.n_classes,
            provenance: self.provenance.clone(),
        }
    }

    /// Columns `label, f0, f1, …`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut header = vec!["label".to_string()];
        header.extend((0..self.feature_dim).map(|i| format!("f{i}")));
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        let rows = self.samples.iter().map(|s| {
            let mut row = vec![s.label.to_string()];
            row.extend(s.features.iter().map(|&v| export::float(v)));
            row
        });
        export::write_rows(out, &header, rows)
    }

    pub fn read_csv<R: Read>(input: R, n_classes: usize) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let feature_dim = r.headers()?.len().saturating_sub(1);
        let mut samples = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let bad = |what: &str| Error::InvalidParameter(format!("csv row {}: bad {what}", i + 1));
            let label = rec
                .get(0)
                .ok_or_else(|| bad("label"))?
                .parse()
                .map_err(|_| bad("label"))?;
            let features = rec
                .iter()
                .skip(1)
                .map(|f| f.parse::<f64>().map_err(|_| bad("feature")))
                .collect::<Result<Vec<_>>>()?;
            samples.push(Sample { features, label });
        }
        Self::new(samples, feature_dim, n_classes, Provenance::Csv)
    }
}

/// Labeling rule of the 1-D example: class 1 on `[0, 1)`, class 0 elsewhere.
///
/// Splitting at the median 0 alone is linearly separable; flipping the band
/// `v ≥ 1` back to class 0 forces the network to bend the line once more.
pub fn label_1d(v: f64) -> usize {
    usize::from((0.0..1.0).contains(&v))
}

/// Labeling rule of the 2-D example: class 1 inside the upward wedge `v2 > |v1|`.
///
/// The rule depends on direction only because a bias-free CQnet with
/// halfspace `Q` sets and norm-scaled annuli is positively homogeneous.
pub fn label_2d(v1: f64, v2: f64) -> usize {
    usize::from(v2 > v1.abs())
}

/// `n` standard-normal values embedded as `(v, 0)`.
pub fn gen_1d_embedded(n: usize, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::InvalidParameter("need at least two samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            Sample {
                features: vec![v, 0.0],
                label: label_1d(v),
            }
        })
        .collect();
    Dataset::new(samples, 2, 2, Provenance::Synthetic1D)
}

/// `n` standard-normal points in the plane embedded as `(v1, v2, 0)`.
pub fn gen_2d_embedded(n: usize, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::InvalidParameter("need at least two samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n)
        .map(|_| {
            let v1: f64 = StandardNormal.sample(&mut rng);
            let v2: f64 = StandardNormal.sample(&mut rng);
            Sample {
                features: vec![v1, v2, 0.0],
                label: label_2d(v1, v2),
            }
        })
        .collect();
    Dataset::new(samples, 3, 2, Provenance::Synthetic2D)
}

/// Seeded shuffle, then the first `round(fraction·n)` samples go to the first part.
pub fn split_fraction(ds: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidParameter(format!(
            "split fraction {fraction} outside [0, 1]"
        )));
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = (fraction * ds.len() as f64).round() as usize;
    let pick = |ids: &[usize]| ds.with_samples(ids.iter().map(|&i| ds.samples[i].clone()).collect());
    Ok((pick(&idx[..cut]), pick(&idx[cut..])))
}

/// Disjoint stratified draws: `first` then `second` samples per class, each
/// part in original order.
pub fn stratified_split(ds: &Dataset, first: usize, second: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for class in 0..ds.n_classes {
        let mut idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.samples[i].label == class).collect();
        let requested = first + second;
        if idx.len() < requested {
            return Err(Error::InsufficientSamples {
                class,
                requested,
                available: idx.len(),
            });
        }
        idx.shuffle(&mut rng);
        a.extend_from_slice(&idx[..first]);
        b.extend_from_slice(&idx[first..requested]);
    }
    a.sort_unstable();
    b.sort_unstable();
    let pick = |ids: &[usize]| ds.with_samples(ids.iter().map(|&i| ds.samples[i].clone()).collect());
    Ok((pick(&a), pick(&b)))
}

/// Seeded stratified subsample with exactly `n_per_class` samples per class.
pub fn subsample(ds: &Dataset, n_per_class: usize, seed: u64) -> Result<Dataset> {
    Ok(stratified_split(ds, n_per_class, 0, seed)?.0)
}

/// Per-feature affine normalization `(x − mean) / (std + floor)` with
/// statistics taken from one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(ds: &Dataset, floor: f64) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::InvalidParameter("cannot standardize an empty dataset".into()));
        }
        if !(floor > 0.0 && floor.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "standardization floor must be positive, got {floor}"
            )));
        }
        let n = ds.len() as f64;
        let mut mean = vec![0.0; ds.feature_dim];
        for s in &ds.samples {
            for (m, x) in mean.iter_mut().zip(&s.features) {
                *m += x / n;
            }
        }
        let mut var = vec![0.0; ds.feature_dim];
        for s in &ds.samples {
            for ((v, x), m) in var.iter_mut().zip(&s.features).zip(&mean) {
                *v += (x - m) * (x - m) / n;
            }
        }
        let scale = var.into_iter().map(|v| 1.0 / (v.sqrt() + floor)).collect();
        Ok(Self { mean, scale })
    }

    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        if ds.feature_dim != self.mean.len() {
            return Err(Error::DimensionMismatch {
                context: "standardize",
                expected: self.mean.len(),
                found: ds.feature_dim,
            });
        }
        let mut out = ds.clone();
        for s in &mut out.samples {
            for ((x, m), k) in s.features.iter_mut().zip(&self.mean).zip(&self.scale) {
                *x = (*x - m) * k;
            }
        }
        Ok(out)
    }
}

fn open_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let file = BufReader::new(File::open(path)?);
    let mut bytes = Vec::new();
    if path.extension().is_some_and(|e| e == "gz") {
        GzDecoder::new(file).read_to_end(&mut bytes)?;
    } else {
        let mut file = file;
        file.read_to_end(&mut bytes)?;
    }
    Ok(bytes)
}

fn be_u32(buf: &[u8], offset: usize) -> Result<u32> {
    buf.get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or(Error::Idx {
            offset: offset as u64,
            message: format!("truncated header: file has {} bytes", buf.len()),
        })
}

fn parse_idx(buf: &[u8], magic: u32, what: &str) -> Result<(Vec<usize>, usize)> {
    let found = be_u32(buf, 0)?;
    if found != magic {
        return Err(Error::Idx {
            offset: 0,
            message: format!("{what}: magic {found:#010x}, expected {magic:#010x}"),
        });
    }
    let ndim = (magic & 0xff) as usize;
    let dims = (0..ndim)
        .map(|i| be_u32(buf, 4 + 4 * i).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * ndim;
    let end = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_add(start));
    let Some(end) = end else {
        return Err(Error::Idx {
            offset: 4,
            message: format!("{what}: dimensions {dims:?} overflow"),
        });
    };
    if buf.len() < end {
        return Err(Error::Idx {
            offset: buf.len() as u64,
            message: format!("{what}: truncated payload, expected {end} bytes"),
        });
    }
    Ok((dims, start))
}

/// Parses an IDX image/label pair (optionally gzipped, by `.gz` extension).
/// Pixels are scaled by 1/255.
pub fn read_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img = open_maybe_gz(images_path)?;
    let lab = open_maybe_gz(labels_path)?;
    let (dims, img_start) = parse_idx(&img, IDX_IMAGES_MAGIC, "images")?;
    let (ldims, lab_start) = parse_idx(&lab, IDX_LABELS_MAGIC, "labels")?;
    if dims[0] != ldims[0] {
        return Err(Error::Idx {
            offset: 4,
            message: format!("{} images but {} labels", dims[0], ldims[0]),
        });
    }
    let pixels = dims[1] * dims[2];
    let labels = &lab[lab_start..lab_start + ldims[0]];
    let n_classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    let samples = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| Sample {
            features: img[img_start + i * pixels..img_start + (i + 1) * pixels]
                .iter()
                .map(|&p| f64::from(p) / 255.0)
                .collect(),
            label: l as usize,
        })
        .collect();
    Dataset::new(
        samples,
        pixels,
        n_classes,
        Provenance::IdxFiles {
            images: images_path.to_path_buf(),
            labels: labels_path.to_path_buf(),
        },
    )
}

/// Writes `ds` as an IDX pair of `rows × cols` images; features are mapped
/// back to bytes by `round(255·v)` clamped to `[0, 255]`.
pub fn write_idx(ds: &Dataset, rows: usize, cols: usize, images_path: &Path, labels_path: &Path) -> Result<()> {
    if rows * cols != ds.feature_dim {
        return Err(Error::InvalidParameter(format!(
            "{rows}x{cols} images do not match feature dim {}",
            ds.feature_dim
        )));
    }
    let n = ds.len() as u32;
    let mut img = Vec::with_capacity(16 + ds.len() * ds.feature_dim);
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for d in [n, rows as u32, cols as u32] {
        img.extend_from_slice(&d.to_be_bytes());
    }
    let mut lab = Vec::with_capacity(8 + ds.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&n.to_be_bytes());
    for s in &ds.samples {
        img.extend(s.features.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
        let label = u8::try_from(s.label)
            .map_err(|_| Error::InvalidParameter(format!("label {} does not fit a byte", s.label)))?;
        lab.push(label);
    }
    write_maybe_gz(images_path, &img)?;
    write_maybe_gz(labels_path, &lab)
}

fn write_maybe_gz(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    if path.extension().is_some_and(|e| e == "gz") {
        let mut enc = GzEncoder::new(file, Compression::default());
        enc.write_all(bytes)?;
        enc.finish()?.flush()?;
    } else {
        let mut file = file;
        file.write_all(bytes)?;
        file.flush()?;
    }
    Ok(())
}
