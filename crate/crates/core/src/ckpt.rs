//! Model checkpoint container.
//!
//! Layout: 4-byte magic `LCKP`, little-endian u64 JSON length, a JSON
//! metadata block (format version, kind, seed, config, loss trace, optional
//! latent scale, and the name/shape directory), then the parameter arrays
//! concatenated in directory order as little-endian f32.

use crate::error::{Error, Result};
use lacuna_nn::{ParamSet, Scalar, Tensor};
use ndarray::IxDyn;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const CKPT_MAGIC: [u8; 4] = *b"LCKP";
pub const CKPT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    /// "score" | "vae" | "classifier"
    pub kind: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub loss_trace: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latent_scale: Option<f64>,
    pub params: Vec<ParamEntry>,
}

pub fn checkpoint_bytes<F: Scalar>(meta: &CheckpointMeta, params: &ParamSet<F>) -> Result<Vec<u8>> {
    let mut meta = meta.clone();
    meta.format_version = CKPT_FORMAT_VERSION;
    meta.params = params
        .iter()
        .map(|(name, v)| ParamEntry { name: name.to_string(), shape: v.shape().to_vec() })
        .collect();
    let json = serde_json::to_vec(&meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + params.total_elems() * 4);
    out.extend_from_slice(&CKPT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, v) in params.iter() {
        for x in v.iter() {
            out.extend_from_slice(&(x.f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_checkpoint<F: Scalar>(
    path: &Path,
    meta: &CheckpointMeta,
    params: &ParamSet<F>,
) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let bytes = checkpoint_bytes(meta, params)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<(CheckpointMeta, ParamSet<F>)> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?
        .read_to_end(&mut buf)?;
    checkpoint_from_bytes(&buf, &path.display().to_string())
}

pub fn checkpoint_from_bytes<F: Scalar>(
    buf: &[u8],
    path: &str,
) -> Result<(CheckpointMeta, ParamSet<F>)> {
    if buf.len() < 12 || buf[0..4] != CKPT_MAGIC {
        return Err(Error::BadMagic {
            path: path.into(),
            expected: u32::from_le_bytes(CKPT_MAGIC),
            found: u32::from_le_bytes(buf.get(0..4).map(|b| b.try_into().unwrap()).unwrap_or([0; 4])),
        });
    }
    let json_len = u64::from_le_bytes(buf[4..12].try_into().unwrap()) as usize;
    let json_end = 12 + json_len;
    if buf.len() < json_end {
        return Err(Error::Truncated { path: path.into(), offset: 12, needed: json_len, have: buf.len() - 12 });
    }
    let meta: CheckpointMeta = serde_json::from_slice(&buf[12..json_end])
        .map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
    if meta.format_version != CKPT_FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {}", meta.format_version)));
    }
    let mut params = ParamSet::<F>::new();
    let mut off = json_end;
    for entry in &meta.params {
        let n: usize = entry.shape.iter().product();
        let need = n * 4;
        if buf.len() < off + need {
            return Err(Error::Truncated { path: path.into(), offset: off, needed: need, have: buf.len() - off });
        }
        let mut data = Vec::with_capacity(n);
        for k in 0..n {
            let b4: [u8; 4] = buf[off + 4 * k..off + 4 * k + 4].try_into().unwrap();
            data.push(F::c(f32::from_le_bytes(b4) as f64));
        }
        off += need;
        params.add(entry.name.clone(), Tensor::from_shape_vec(IxDyn(&entry.shape), data).unwrap());
    }
    Ok((meta, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use lacuna_nn::params::ones;

    #[test]
    fn roundtrip_preserves_values_and_names() {
        let mut params = ParamSet::<f32>::new();
        params.add("layer.w", ones(&[2, 3]) * 0.25f32);
        params.add("layer.b", ones(&[3]));
        let meta = CheckpointMeta {
            format_version: CKPT_FORMAT_VERSION,
            kind: "score".into(),
            seed: 9,
            config: serde_json::json!({"width": 3}),
            loss_trace: vec![1.0, 0.5],
            latent_scale: Some(2.0),
            params: vec![],
        };
        let bytes = checkpoint_bytes(&meta, &params).unwrap();
        let (m2, p2) = checkpoint_from_bytes::<f32>(&bytes, "mem").unwrap();
        assert_eq!(m2.kind, "score");
        assert_eq!(m2.seed, 9);
        assert_eq!(m2.loss_trace, vec![1.0, 0.5]);
        assert_eq!(m2.latent_scale, Some(2.0));
        assert_eq!(m2.params.len(), 2);
        assert_eq!(p2.len(), 2);
        assert_eq!(p2.value(lacuna_nn::ParamId(0)), params.value(lacuna_nn::ParamId(0)));
        // byte-stable: re-serializing produces identical bytes
        let bytes2 = checkpoint_bytes(&m2, &p2).unwrap();
        assert_eq!(bytes, bytes2);
    }

    #[test]
    fn bad_magic_rejected() {
        let err = checkpoint_from_bytes::<f32>(b"NOPE12345678", "mem");
        assert!(matches!(err, Err(Error::BadMagic { .. })));
    }
}
