//! External patch-feature files for register alignment, plus a deterministic
//! mock extractor.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

pub const FEATURE_MAGIC: &[u8; 8] = b"HDITFEAT";
pub const FEATURE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub id: String,
    /// `K × D_f` tokens in raster order.
    pub tokens: Array2<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile {
    pub tokens: usize,
    pub dim: usize,
    pub records: Vec<FeatureRecord>,
}

impl FeatureFile {
    pub fn new(tokens: usize, dim: usize) -> Self {
        Self { tokens, dim, records: Vec::new() }
    }

    pub fn push(&mut self, id: impl Into<String>, tokens: Array2<f32>) -> Result<()> {
        if tokens.dim() != (self.tokens, self.dim) {
            return Err(Error::InconsistentShape(format!(
                "record has {:?} tokens, file declares ({}, {})",
                tokens.dim(),
                self.tokens,
                self.dim
            )));
        }
        if tokens.iter().any(|v| !v.is_finite()) {
            return Err(Error::CorruptFile("non-finite feature value".into()));
        }
        self.records.push(FeatureRecord { id: id.into(), tokens });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Index by record id.
    pub fn by_id(&self) -> HashMap<&str, &Array2<f32>> {
        self.records.iter().map(|r| (r.id.as_str(), &r.tokens)).collect()
    }

    pub fn write_to(&self, out: &mut impl Write) -> Result<()> {
        let k = u32::try_from(self.tokens).map_err(|_| Error::InconsistentShape("K exceeds u32".into()))?;
        let d = u32::try_from(self.dim).map_err(|_| Error::InconsistentShape("D_f exceeds u32".into()))?;
        out.write_all(FEATURE_MAGIC)?;
        out.write_all(&FEATURE_VERSION.to_le_bytes())?;
        out.write_all(&k.to_le_bytes())?;
        out.write_all(&d.to_le_bytes())?;
        out.write_all(&(self.records.len() as u64).to_le_bytes())?;
        for record in &self.records {
            if record.tokens.dim() != (self.tokens, self.dim) {
                return Err(Error::InconsistentShape(format!(
                    "record `{}` has shape {:?}",
                    record.id,
                    record.tokens.dim()
                )));
            }
            let id = record.id.as_bytes();
            out.write_all(&(id.len() as u32).to_le_bytes())?;
            out.write_all(id)?;
            let mut buf = Vec::with_capacity(4 * record.tokens.len());
            for v in record.tokens.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            out.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(input: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(input, &mut magic)?;
        if &magic != FEATURE_MAGIC {
            return Err(Error::CorruptFile("bad feature-file magic".into()));
        }
        let version = read_u32(input)?;
        if version != FEATURE_VERSION {
            return Err(Error::VersionMismatch(format!("feature file version {version}, expected {FEATURE_VERSION}")));
        }
        let k = read_u32(input)? as usize;
        let d = read_u32(input)? as usize;
        let count = read_u64(input)?;
        let mut file = FeatureFile::new(k, d);
        for _ in 0..count {
            let len = read_u32(input)? as usize;
            let mut id = vec![0u8; len];
            read_exact(input, &mut id)?;
            let id = String::from_utf8(id).map_err(|_| Error::CorruptFile("record id is not UTF-8".into()))?;
            let raw = read_payload(input, 4 * k * d, 4 * d)?;
            let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let tokens = Array2::from_shape_vec((k, d), values).expect("length checked");
            file.push(id, tokens)?;
        }
        let mut trailing = Vec::new();
        input.read_to_end(&mut trailing)?;
        if !trailing.is_empty() {
            if d > 0 && trailing.len() % (4 * d) == 0 && count > 0 {
                return Err(Error::InconsistentShape(format!(
                    "last record carries {} extra tokens beyond K = {k}",
                    trailing.len() / (4 * d)
                )));
            }
            return Err(Error::CorruptFile("trailing bytes after last record".into()));
        }
        Ok(file)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }
}

pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureFile> {
    let bytes = std::fs::read(path)?;
    FeatureFile::read_from(&mut bytes.as_slice())
}

fn read_exact(input: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    input.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::CorruptFile("truncated feature file".into()),
        _ => Error::Io(e),
    })
}

/// Reads one token payload; a short read that ends on a token boundary is a shape error.
fn read_payload(input: &mut impl Read, expected: usize, token_bytes: usize) -> Result<Vec<u8>> {
    let mut raw = Vec::with_capacity(expected);
    input.take(expected as u64).read_to_end(&mut raw)?;
    if raw.len() < expected {
        if token_bytes > 0 && !raw.is_empty() && raw.len() % token_bytes == 0 {
            return Err(Error::InconsistentShape(format!(
                "record holds {} tokens, header declares {}",
                raw.len() / token_bytes,
                expected / token_bytes
            )));
        }
        return Err(Error::CorruptFile("truncated feature file".into()));
    }
    Ok(raw)
}

fn read_u32(input: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(input, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(input: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(input, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn square_side(k: usize) -> Option<usize> {
    let s = (k as f64).sqrt().round() as usize;
    (s * s == k).then_some(s)
}

/// Deterministic stand-in for a foundation-model encoder.
///
/// The image is average-pooled onto a `√K × √K` grid; each cell's channel
/// means, with a constant 1 appended, are projected by a seeded Gaussian
/// matrix and L2-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct MockExtractor {
    side: usize,
    projection: Array2<f32>,
}

impl MockExtractor {
    pub fn new(channels: usize, tokens: usize, dim: usize, seed: u64) -> Result<Self> {
        let side = square_side(tokens)
            .filter(|&s| s > 0)
            .ok_or_else(|| Error::DimensionMismatch(format!("K = {tokens} is not a positive perfect square")))?;
        if dim == 0 {
            return Err(Error::DimensionMismatch("feature width must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let projection = Array2::from_shape_simple_fn((channels + 1, dim), || {
            let v: f64 = StandardNormal.sample(&mut rng);
            v as f32
        });
        Ok(Self { side, projection })
    }

    pub fn tokens(&self) -> usize {
        self.side * self.side
    }

    pub fn dim(&self) -> usize {
        self.projection.ncols()
    }

    pub fn extract(&self, image: &ImageTensor<f32>) -> Result<Array2<f32>> {
        let (c, h, w) = image.dims();
        if c + 1 != self.projection.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "extractor built for {} channels, image has {c}",
                self.projection.nrows() - 1
            )));
        }
        let s = self.side;
        if h % s != 0 || w % s != 0 {
            return Err(Error::DimensionMismatch(format!("{h}x{w} image does not pool onto a {s}x{s} grid")));
        }
        let (ch, cw) = (h / s, w / s);
        let area = (ch * cw) as f64;
        let mut pooled = Array2::<f32>::zeros((s * s, c + 1));
        for gy in 0..s {
            for gx in 0..s {
                let row = gy * s + gx;
                for k in 0..c {
                    let mut sum = 0.0f64;
                    for y in gy * ch..(gy + 1) * ch {
                        for x in gx * cw..(gx + 1) * cw {
                            sum += f64::from(image.data()[[k, y, x]]);
                        }
                    }
                    pooled[[row, k]] = (sum / area) as f32;
                }
                pooled[[row, c]] = 1.0;
            }
        }
        let mut out = pooled.dot(&self.projection);
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let norm = row.iter().map(|v| f64::from(*v).powi(2)).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::ZeroNorm(i));
            }
            row.mapv_inplace(|v| (f64::from(v) / norm) as f32);
        }
        Ok(out)
    }
}

/// One-shot [`MockExtractor`].
pub fn mock_features(image: &ImageTensor<f32>, tokens: usize, dim: usize, seed: u64) -> Result<Array2<f32>> {
    MockExtractor::new(image.channels(), tokens, dim, seed)?.extract(image)
}

/// Mean-pools a raster `√K × √K` token grid onto a coarser `√l × √l` grid.
pub fn pool_tokens(tokens: &Array2<f32>, target: usize) -> Result<Array2<f32>> {
    let k = tokens.nrows();
    if k == target {
        return Ok(tokens.clone());
    }
    let (Some(src), Some(dst)) = (square_side(k), square_side(target)) else {
        return Err(Error::DimensionMismatch(format!("cannot pool {k} tokens onto {target}: counts must be square")));
    };
    if dst == 0 || dst > src || src % dst != 0 {
        return Err(Error::DimensionMismatch(format!("cannot pool a {src}x{src} grid onto {dst}x{dst}")));
    }
    let f = src / dst;
    let mut out = Array2::<f32>::zeros((target, tokens.ncols()));
    for gy in 0..dst {
        for gx in 0..dst {
            let mut acc = ndarray::Array1::<f64>::zeros(tokens.ncols());
            for y in gy * f..(gy + 1) * f {
                for x in gx * f..(gx + 1) * f {
                    acc.zip_mut_with(&tokens.row(y * src + x), |a, &v| *a += f64::from(v));
                }
            }
            let n = (f * f) as f64;
            out.row_mut(gy * dst + gx).assign(&acc.mapv(|v| (v / n) as f32));
        }
    }
    Ok(out)
}
