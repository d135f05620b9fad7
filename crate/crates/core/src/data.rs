//! MNIST IDX ingestion, MCAR mask generation, and zero-imputation.

use crate::error::{Error, Result};
use ndarray::{Array4, IxDyn};
use std::io::{Read, Write};
use std::path::Path;

pub const IDX_IMAGE_MAGIC: u32 = 2051;
pub const IDX_LABEL_MAGIC: u32 = 2049;
const MASK_MAGIC: [u8; 4] = *b"MCAR";

/// A batch of grayscale images with values in `[0,1]`.
#[derive(Clone, Debug)]
pub struct ImageBatch {
    /// `[N, C, H, W]`
    pub data: Array4<f32>,
    pub labels: Option<Vec<u8>>,
}

impl ImageBatch {
    pub fn len(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape_chw(&self) -> (usize, usize, usize) {
        let s = self.data.shape();
        (s[1], s[2], s[3])
    }

    /// Select rows by index, cloning data (and labels when present).
    pub fn select(&self, idx: &[usize]) -> ImageBatch {
        let views: Vec<_> = idx.iter().map(|&i| self.data.index_axis(ndarray::Axis(0), i)).collect();
        let data = ndarray::stack(ndarray::Axis(0), &views).unwrap();
        let labels = self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect());
        ImageBatch { data, labels }
    }
}

/// Per-pixel binary observation masks (1 = observed) aligned with an
/// [`ImageBatch`].
#[derive(Clone, Debug)]
pub struct MaskSet {
    /// `[N, C, H, W]`, elements in {0, 1}
    pub masks: Array4<u8>,
    pub rate: f32,
    pub seed: u32,
}

impl MaskSet {
    pub fn len(&self) -> usize {
        self.masks.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Fraction of entries that are missing (0).
    pub fn empirical_missing_rate(&self) -> f64 {
        let total = self.masks.len();
        let observed: u64 = self.masks.iter().map(|&m| m as u64).sum();
        1.0 - observed as f64 / total as f64
    }

    pub fn select(&self, idx: &[usize]) -> MaskSet {
        let views: Vec<_> = idx.iter().map(|&i| self.masks.index_axis(ndarray::Axis(0), i)).collect();
        let masks = ndarray::stack(ndarray::Axis(0), &views).unwrap();
        MaskSet { masks, rate: self.rate, seed: self.seed }
    }

    /// Masks as an `f32` tensor for arithmetic.
    pub fn as_f32(&self) -> Array4<f32> {
        self.masks.mapv(|m| m as f32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitRole {
    Train,
    Test,
}

/// Images plus the masks sampled once at split creation (persistent
/// missingness for the lifetime of the split).
#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub images: ImageBatch,
    pub masks: MaskSet,
    pub role: SplitRole,
}

impl DatasetSplit {
    pub fn new(images: ImageBatch, masks: MaskSet, role: SplitRole) -> Result<Self> {
        if images.data.shape() != masks.masks.shape() {
            return Err(Error::ShapeMismatch {
                expected: images.data.shape().to_vec(),
                found: masks.masks.shape().to_vec(),
                context: "dataset split masks".into(),
            });
        }
        Ok(Self { images, masks, role })
    }

    /// Zero-imputed view of the images.
    pub fn zero_imputed(&self) -> Result<ImageBatch> {
        zero_impute(&self.images, &self.masks)
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?
        .read_to_end(&mut buf)?;
    Ok(buf)
}

fn be_u32(buf: &[u8], offset: usize, path: &Path) -> Result<u32> {
    let bytes: [u8; 4] = buf
        .get(offset..offset + 4)
        .ok_or_else(|| Error::Truncated {
            path: path.display().to_string(),
            offset,
            needed: 4,
            have: buf.len().saturating_sub(offset),
        })?
        .try_into()
        .unwrap();
    Ok(u32::from_be_bytes(bytes))
}

/// Load an IDX image file (magic 2051) and optionally its label file
/// (magic 2049). Pixels are scaled to `[0,1]` by division by 255.
pub fn load_idx(images_path: &Path, labels_path: Option<&Path>) -> Result<ImageBatch> {
    let buf = read_file(images_path)?;
    let magic = be_u32(&buf, 0, images_path)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::BadMagic {
            path: images_path.display().to_string(),
            expected: IDX_IMAGE_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(&buf, 4, images_path)? as usize;
    let h = be_u32(&buf, 8, images_path)? as usize;
    let w = be_u32(&buf, 12, images_path)? as usize;
    let need = 16 + n * h * w;
    if buf.len() < need {
        return Err(Error::Truncated {
            path: images_path.display().to_string(),
            offset: 16,
            needed: need - 16,
            have: buf.len() - 16,
        });
    }
    let data: Vec<f32> = buf[16..need].iter().map(|&b| b as f32 / 255.0).collect();
    let data = Array4::from_shape_vec((n, 1, h, w), data).unwrap();

    let labels = match labels_path {
        None => None,
        Some(lp) => {
            let lbuf = read_file(lp)?;
            let lmagic = be_u32(&lbuf, 0, lp)?;
            if lmagic != IDX_LABEL_MAGIC {
                return Err(Error::BadMagic {
                    path: lp.display().to_string(),
                    expected: IDX_LABEL_MAGIC,
                    found: lmagic,
                });
            }
            let ln = be_u32(&lbuf, 4, lp)? as usize;
            if ln != n {
                return Err(Error::DimensionMismatch {
                    path: lp.display().to_string(),
                    detail: format!("label count {ln} != image count {n}"),
                });
            }
            if lbuf.len() < 8 + ln {
                return Err(Error::Truncated {
                    path: lp.display().to_string(),
                    offset: 8,
                    needed: ln,
                    have: lbuf.len() - 8,
                });
            }
            Some(lbuf[8..8 + ln].to_vec())
        }
    };
    Ok(ImageBatch { data, labels })
}

/// Counter-based per-element hash so mask generation is order-independent:
/// the draw for element `i` depends only on `(seed, i)`.
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

#[inline]
fn unit_uniform(seed: u64, index: u64) -> f64 {
    let h = mix64(seed ^ mix64(index.wrapping_add(0xa0761d6478bd642f)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Generate MCAR masks: each entry is independently missing (0) with
/// probability `rate`; bit-identical regeneration given `(seed, rate, n, shape)`.
pub fn mcar_mask(n: usize, shape: (usize, usize, usize), rate: f64, seed: u32) -> Result<MaskSet> {
    if !(0.0..=1.0).contains(&rate) || rate.is_nan() {
        return Err(Error::InvalidRate(rate));
    }
    let (c, h, w) = shape;
    let total = n * c * h * w;
    let mut bits = Vec::with_capacity(total);
    for i in 0..total {
        let u = unit_uniform(seed as u64, i as u64);
        bits.push(if u < rate { 0u8 } else { 1u8 });
    }
    let masks = Array4::from_shape_vec((n, c, h, w), bits).unwrap();
    Ok(MaskSet { masks, rate: rate as f32, seed })
}

/// Replace missing entries with zero: `out = images ⊙ masks`.
pub fn zero_impute(images: &ImageBatch, masks: &MaskSet) -> Result<ImageBatch> {
    if images.data.shape() != masks.masks.shape() {
        return Err(Error::ShapeMismatch {
            expected: images.data.shape().to_vec(),
            found: masks.masks.shape().to_vec(),
            context: "zero_impute".into(),
        });
    }
    let mut data = images.data.clone();
    ndarray::Zip::from(&mut data).and(&masks.masks).for_each(|d, &m| {
        if m == 0 {
            *d = 0.0;
        }
    });
    Ok(ImageBatch { data, labels: images.labels.clone() })
}

impl MaskSet {
    /// Serialize: 16-byte header (magic "MCAR", u32 seed, f32 rate, u32 N,
    /// little-endian) followed by packed bits in element order, LSB first.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&MASK_MAGIC)?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&self.rate.to_le_bytes())?;
        w.write_all(&(self.len() as u32).to_le_bytes())?;
        let flat = self.masks.as_slice().unwrap();
        let mut packed = vec![0u8; flat.len().div_ceil(8)];
        for (i, &m) in flat.iter().enumerate() {
            if m != 0 {
                packed[i / 8] |= 1 << (i % 8);
            }
        }
        w.write_all(&packed)?;
        Ok(())
    }

    /// Deserialize; `shape` is the per-image `(C,H,W)` implied by the paired
    /// dataset (the header records only N).
    pub fn read_from(r: &mut impl Read, shape: (usize, usize, usize), path: &str) -> Result<MaskSet> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header).map_err(|_| Error::Truncated {
            path: path.into(),
            offset: 0,
            needed: 16,
            have: 0,
        })?;
        if header[0..4] != MASK_MAGIC {
            return Err(Error::BadMagic {
                path: path.into(),
                expected: u32::from_le_bytes(MASK_MAGIC),
                found: u32::from_le_bytes(header[0..4].try_into().unwrap()),
            });
        }
        let seed = u32::from_le_bytes(header[4..8].try_into().unwrap());
        let rate = f32::from_le_bytes(header[8..12].try_into().unwrap());
        let n = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
        let (c, h, w) = shape;
        let total = n * c * h * w;
        let mut packed = vec![0u8; total.div_ceil(8)];
        r.read_exact(&mut packed).map_err(|_| Error::Truncated {
            path: path.into(),
            offset: 16,
            needed: total.div_ceil(8),
            have: 0,
        })?;
        let bits: Vec<u8> = (0..total).map(|i| (packed[i / 8] >> (i % 8)) & 1).collect();
        let masks = Array4::from_shape_vec((n, c, h, w), bits).unwrap();
        Ok(MaskSet { masks, rate, seed })
    }
}

/// Convert a `[N,C,H,W]` f32 view into a dynamic tensor (for the nn engine).
pub fn to_dyn(a: &Array4<f32>) -> ndarray::ArrayD<f32> {
    a.clone().into_dyn()
}

/// Clamp a dynamic tensor into `[0,1]` and reshape to `[N,C,H,W]`.
pub fn to_image_batch(a: &ndarray::ArrayD<f32>, labels: Option<Vec<u8>>) -> ImageBatch {
    let s = a.shape().to_vec();
    assert_eq!(s.len(), 4, "expected [N,C,H,W]");
    let clamped = a.mapv(|v| v.clamp(0.0, 1.0));
    let data = clamped.into_shape_with_order(IxDyn(&s)).unwrap();
    let data = data.into_dimensionality::<ndarray::Ix4>().unwrap();
    ImageBatch { data, labels }
}
