//! Binary checkpoints.
//!
//! Layout: `b"CQNT"`, a version byte, the payload length as `u64`, the payload,
//! then the CRC32 of the payload as `u32`. All integers and floats are
//! little-endian; floats are stored as their IEEE-754 bits so round trips are
//! exact. The payload lists the model flags, every stage (operator shape and
//! coefficients, stepsize, sets, certificate) and the classifier.

use crate::error::{CheckpointError, Error, Result};
use crate::linalg::DenseMatrix;
use crate::linops::{AvgPool2d, CertificateMethod, Conv2d, KernelTensor, LinearOperator, SpectralCertificate};
use crate::sets::ConstraintSet;

use super::{CqnetModel, EmbedSpec, LayerSpec, SetSpec, Stage};

pub const MAGIC: &[u8; 4] = b"CQNT";
pub const VERSION: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 8;

pub fn save_checkpoint(model: &CqnetModel) -> Vec<u8> {
    let mut p = Writer::default();
    p.u8(u8::from(model.bias_mode));
    p.u8(u8::from(model.certified_nonexpansive));
    p.len(model.stages.len());
    for s in &model.stages {
        match s {
            Stage::Cq(l) => {
                p.u8(0);
                p.op(&l.op);
                p.f64(l.alpha);
                p.len(l.c_sets.len());
                for c in &l.c_sets {
                    match c {
                        SetSpec::Fixed(set) => {
                            p.u8(0);
                            p.set(set);
                        }
                        SetSpec::InputNormAnnulus {
                            inner_factor,
                            outer_factor,
                        } => {
                            p.u8(1);
                            p.f64(*inner_factor);
                            p.f64(*outer_factor);
                        }
                    }
                }
                p.set(&l.q_set);
                p.cert(&l.certificate);
            }
            Stage::Pool(pool) => {
                p.u8(1);
                p.len(pool.channels());
                p.len(pool.height());
                p.len(pool.width());
            }
            Stage::Embed(e) => {
                p.u8(2);
                p.op(&e.op);
                p.f64(e.gain);
                p.cert(&e.certificate);
            }
        }
    }
    p.matrix(&model.classifier);

    let payload = p.0;
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len() + 4);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    out
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<CqnetModel> {
    if bytes.len() < 4 {
        return Err(CheckpointError::Truncated { offset: 0, needed: 4 }.into());
    }
    if &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    let mut header = Reader { buf: bytes, pos: 4 };
    let version = header.u8()?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion {
            found: version,
            supported: VERSION,
        }
        .into());
    }
    let len = header.u64()? as usize;
    let end = HEADER_LEN.checked_add(len).ok_or(CheckpointError::Corrupt {
        offset: 5,
        message: "payload length overflows".into(),
    })?;
    if bytes.len() < end + 4 {
        return Err(CheckpointError::Truncated {
            offset: bytes.len(),
            needed: end + 4 - bytes.len(),
        }
        .into());
    }
    if bytes.len() > end + 4 {
        return Err(CheckpointError::Corrupt {
            offset: end + 4,
            message: "trailing bytes after checksum".into(),
        }
        .into());
    }
    let payload = &bytes[HEADER_LEN..end];
    let stored = u32::from_le_bytes(bytes[end..end + 4].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(CheckpointError::ChecksumMismatch { stored, computed }.into());
    }

    let mut r = Reader {
        buf: &bytes[..end],
        pos: HEADER_LEN,
    };
    let bias_mode = r.flag()?;
    let certified = r.flag()?;
    let n_stages = r.len()?;
    let mut stages = Vec::new();
    for _ in 0..n_stages {
        let at = r.pos;
        let stage = match r.u8()? {
            0 => {
                let op = r.op()?;
                let alpha = r.f64()?;
                let n_c = r.len()?;
                let mut c_sets = Vec::new();
                for _ in 0..n_c {
                    let at = r.pos;
                    c_sets.push(match r.u8()? {
                        0 => SetSpec::Fixed(r.set()?),
                        1 => SetSpec::InputNormAnnulus {
                            inner_factor: r.f64()?,
                            outer_factor: r.f64()?,
                        },
                        t => return Err(r.corrupt_at(at, format!("unknown set spec tag {t}"))),
                    });
                }
                let q_set = r.set()?;
                let certificate = r.cert()?;
                let spec = LayerSpec {
                    op,
                    alpha,
                    c_sets,
                    q_set,
                    certificate,
                };
                spec.validate().map_err(|e| r.corrupt_at(at, e.to_string()))?;
                Stage::Cq(spec)
            }
            1 => {
                let (c, h, w) = (r.len()?, r.len()?, r.len()?);
                Stage::Pool(AvgPool2d::new(c, h, w).map_err(|e| r.corrupt_at(at, e.to_string()))?)
            }
            2 => Stage::Embed(EmbedSpec {
                op: r.op()?,
                gain: r.f64()?,
                certificate: r.cert()?,
            }),
            t => return Err(r.corrupt_at(at, format!("unknown stage tag {t}"))),
        };
        stages.push(stage);
    }
    let classifier = r.matrix()?;
    if r.pos != end {
        return Err(r.corrupt_at(r.pos, "unconsumed payload bytes".into()));
    }
    let mut model =
        CqnetModel::new(stages, classifier, bias_mode).map_err(|e| r.corrupt_at(HEADER_LEN, e.to_string()))?;
    model.certified_nonexpansive = certified;
    Ok(model)
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    fn len(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u64).to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_bits().to_le_bytes());
    }

    fn vec(&mut self, v: &[f64]) {
        self.len(v.len());
        v.iter().for_each(|&x| self.f64(x));
    }

    fn matrix(&mut self, m: &DenseMatrix) {
        self.len(m.rows());
        self.len(m.cols());
        m.data().iter().for_each(|&x| self.f64(x));
    }

    fn op(&mut self, op: &LinearOperator) {
        match op {
            LinearOperator::Dense(m) => {
                self.u8(0);
                self.matrix(m);
            }
            LinearOperator::Conv2d(c) => {
                self.u8(1);
                let k = c.kernels();
                self.len(k.c_out());
                self.len(k.c_in());
                self.len(k.width());
                self.len(c.height());
                self.len(c.width());
                k.data().iter().for_each(|&x| self.f64(x));
            }
            LinearOperator::AvgPool2d(p) => {
                self.u8(2);
                self.len(p.channels());
                self.len(p.height());
                self.len(p.width());
            }
            LinearOperator::BiasAugmented { inner, bias } => {
                self.u8(3);
                self.op(inner);
                self.vec(bias);
            }
        }
    }

    fn set(&mut self, s: &ConstraintSet) {
        match s {
            ConstraintSet::NonnegOrthant => self.u8(0),
            ConstraintSet::Halfspace { normal, offset } => {
                self.u8(1);
                self.vec(normal);
                self.f64(*offset);
            }
            ConstraintSet::Box { lo, hi } => {
                self.u8(2);
                self.vec(lo);
                self.vec(hi);
            }
            ConstraintSet::Ball { center, radius } => {
                self.u8(3);
                self.vec(center);
                self.f64(*radius);
            }
            ConstraintSet::Annulus { center, inner, outer } => {
                self.u8(4);
                self.vec(center);
                self.f64(*inner);
                self.f64(*outer);
            }
            ConstraintSet::ExteriorBall { center, radius } => {
                self.u8(5);
                self.vec(center);
                self.f64(*radius);
            }
            ConstraintSet::ZeroMean => self.u8(6),
            ConstraintSet::FixedLastEntry(v) => {
                self.u8(7);
                self.f64(*v);
            }
            ConstraintSet::MinPairDistance { split, min_distance } => {
                self.u8(8);
                self.len(*split);
                self.f64(*min_distance);
            }
            ConstraintSet::FullSpace => self.u8(9),
        }
    }

    fn cert(&mut self, c: &SpectralCertificate) {
        match &c.method {
            CertificateMethod::ClosedFormProp1 { width, c_out } => {
                self.u8(0);
                self.len(*width);
                self.len(*c_out);
            }
            CertificateMethod::PowerIteration {
                iters,
                estimate,
                safety_factor,
            } => {
                self.u8(1);
                self.len(*iters);
                self.f64(*estimate);
                self.f64(*safety_factor);
            }
        }
        self.f64(c.lambda_bound);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated {
                offset: self.pos,
                needed: n,
            }
            .into());
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn corrupt_at(&self, offset: usize, message: String) -> Error {
        CheckpointError::Corrupt { offset, message }.into()
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn flag(&mut self) -> Result<bool> {
        let at = self.pos;
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(self.corrupt_at(at, format!("flag byte {v} is not 0 or 1"))),
        }
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    /// A count, checked against the bytes left so corrupt lengths cannot
    /// trigger huge allocations.
    fn len(&mut self) -> Result<usize> {
        let at = self.pos;
        let v = self.u64()?;
        if v > self.buf.len() as u64 {
            return Err(self.corrupt_at(at, format!("count {v} exceeds checkpoint size")));
        }
        Ok(v as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        let needed = n
            .checked_mul(8)
            .ok_or_else(|| self.corrupt_at(self.pos, "length overflow".into()))?;
        let raw = self.take(needed)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect())
    }

    fn vec(&mut self) -> Result<Vec<f64>> {
        let n = self.len()?;
        self.floats(n)
    }

    fn matrix(&mut self) -> Result<DenseMatrix> {
        let at = self.pos;
        let (rows, cols) = (self.len()?, self.len()?);
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| self.corrupt_at(at, "matrix size overflows".into()))?;
        let data = self.floats(n)?;
        DenseMatrix::new(rows, cols, data).map_err(|e| self.corrupt_at(at, e.to_string()))
    }

    fn op(&mut self) -> Result<LinearOperator> {
        let at = self.pos;
        match self.u8()? {
            0 => Ok(LinearOperator::Dense(self.matrix()?)),
            1 => {
                let (c_out, c_in, w, h, wd) = (self.len()?, self.len()?, self.len()?, self.len()?, self.len()?);
                let n = c_out
                    .checked_mul(c_in)
                    .and_then(|v| v.checked_mul(w))
                    .and_then(|v| v.checked_mul(w))
                    .ok_or_else(|| self.corrupt_at(at, "kernel size overflows".into()))?;
                let data = self.floats(n)?;
                let k = KernelTensor::new(c_out, c_in, w, data).map_err(|e| self.corrupt_at(at, e.to_string()))?;
                Ok(LinearOperator::Conv2d(
                    Conv2d::new(k, h, wd).map_err(|e| self.corrupt_at(at, e.to_string()))?,
                ))
            }
            2 => {
                let (c, h, w) = (self.len()?, self.len()?, self.len()?);
                Ok(LinearOperator::AvgPool2d(
                    AvgPool2d::new(c, h, w).map_err(|e| self.corrupt_at(at, e.to_string()))?,
                ))
            }
            3 => {
                let inner = self.op()?;
                let bias = self.vec()?;
                LinearOperator::bias_augmented(inner, bias).map_err(|e| self.corrupt_at(at, e.to_string()))
            }
            t => Err(self.corrupt_at(at, format!("unknown operator tag {t}"))),
        }
    }

    fn set(&mut self) -> Result<ConstraintSet> {
        let at = self.pos;
        let set = match self.u8()? {
            0 => ConstraintSet::NonnegOrthant,
            1 => ConstraintSet::Halfspace {
                normal: self.vec()?,
                offset: self.f64()?,
            },
            2 => ConstraintSet::Box {
                lo: self.vec()?,
                hi: self.vec()?,
            },
            3 => ConstraintSet::Ball {
                center: self.vec()?,
                radius: self.f64()?,
            },
            4 => ConstraintSet::Annulus {
                center: self.vec()?,
                inner: self.f64()?,
                outer: self.f64()?,
            },
            5 => ConstraintSet::ExteriorBall {
                center: self.vec()?,
                radius: self.f64()?,
            },
            6 => ConstraintSet::ZeroMean,
            7 => ConstraintSet::FixedLastEntry(self.f64()?),
            8 => ConstraintSet::MinPairDistance {
                split: self.len()?,
                min_distance: self.f64()?,
            },
            9 => ConstraintSet::FullSpace,
            t => return Err(self.corrupt_at(at, format!("unknown set tag {t}"))),
        };
        set.validate().map_err(|e| self.corrupt_at(at, e.to_string()))?;
        Ok(set)
    }

    fn cert(&mut self) -> Result<SpectralCertificate> {
        let at = self.pos;
        let method = match self.u8()? {
            0 => CertificateMethod::ClosedFormProp1 {
                width: self.len()?,
                c_out: self.len()?,
            },
            1 => CertificateMethod::PowerIteration {
                iters: self.len()?,
                estimate: self.f64()?,
                safety_factor: self.f64()?,
            },
            t => return Err(self.corrupt_at(at, format!("unknown certificate tag {t}"))),
        };
        let lambda_bound = self.f64()?;
        if !(lambda_bound > 0.0) {
            return Err(self.corrupt_at(at, format!("certificate bound {lambda_bound} is not positive")));
        }
        Ok(SpectralCertificate { lambda_bound, method })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> CqnetModel {
        let layer = LayerSpec::new(
            LinearOperator::Dense(DenseMatrix::from_rows(&[vec![0.5, 0.1], vec![-0.3, 0.8]]).unwrap()),
            0.7,
            vec![SetSpec::Fixed(ConstraintSet::ZeroMean)],
            ConstraintSet::NonnegOrthant,
        )
        .unwrap();
        CqnetModel::new(vec![Stage::Cq(layer)], DenseMatrix::identity(2), false).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let m = tiny();
        let back = load_checkpoint(&save_checkpoint(&m)).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn header_errors() {
        let bytes = save_checkpoint(&tiny());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            load_checkpoint(&bad),
            Err(Error::Checkpoint(CheckpointError::BadMagic))
        ));
        let mut bumped = bytes.clone();
        bumped[4] = VERSION + 1;
        assert!(matches!(
            load_checkpoint(&bumped),
            Err(Error::Checkpoint(CheckpointError::UnsupportedVersion {
                found: 2,
                supported: 1
            }))
        ));
        for cut in [0, 3, 10, bytes.len() - 1] {
            assert!(matches!(
                load_checkpoint(&bytes[..cut]),
                Err(Error::Checkpoint(CheckpointError::Truncated { .. }))
            ));
        }
        let mut flipped = bytes.clone();
        flipped[HEADER_LEN + 3] ^= 1;
        assert!(matches!(
            load_checkpoint(&flipped),
            Err(Error::Checkpoint(CheckpointError::ChecksumMismatch { .. }))
        ));
    }
}
