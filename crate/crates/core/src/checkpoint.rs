//! Cohort checkpoint container.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "CDCK" | version | net_count
//! per net:   net_id | arch_len | arch JSON (arch_len bytes) | param_count
//! per param: ndim | dims[ndim] | f32 LE values[prod(dims)]
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{ArchSpec, NetworkState};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CDCK";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode(nets: &[NetworkState]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    push_u32(&mut out, FORMAT_VERSION);
    push_u32(&mut out, nets.len() as u32);
    for net in nets {
        push_u32(&mut out, net.net_id as u32);
        let arch = serde_json::to_vec(&net.arch).map_err(|e| Error::Config(e.to_string()))?;
        push_u32(&mut out, arch.len() as u32);
        out.extend_from_slice(&arch);
        push_u32(&mut out, net.params.len() as u32);
        for p in &net.params {
            push_u32(&mut out, p.shape().len() as u32);
            for &d in p.shape() {
                push_u32(&mut out, d as u32);
            }
            for &v in p.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(self.path, self.pos as u64, format!("truncated while reading {what}"))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Vec<NetworkState>> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(path, 0, "not a checkpoint (bad magic)"));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::format(path, 4, format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32("net count")?;
    let mut nets = Vec::new();
    for _ in 0..count {
        let net_id = r.u32("net id")? as usize;
        let arch_len = r.u32("arch length")? as usize;
        let at = r.pos as u64;
        let arch: ArchSpec = serde_json::from_slice(r.take(arch_len, "arch")?)
            .map_err(|e| Error::format(path, at, format!("bad arch record: {e}")))?;
        let n_params = r.u32("param count")?;
        let mut params = Vec::new();
        for _ in 0..n_params {
            let ndim = r.u32("ndim")? as usize;
            let shape = (0..ndim).map(|_| r.u32("dim").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let at = r.pos as u64;
            let raw = r.take(numel.saturating_mul(4), "tensor data")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            params.push(Tensor::new(shape, data).map_err(|e| Error::format(path, at, e.to_string()))?);
        }
        let at = r.pos as u64;
        nets.push(NetworkState::from_params(arch, params, net_id).map_err(|e| Error::format(path, at, e.to_string()))?);
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, r.pos as u64, "trailing bytes after last network"));
    }
    Ok(nets)
}

pub fn read(path: impl AsRef<Path>) -> Result<Vec<NetworkState>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_at_f32_precision() {
        let nets = vec![
            NetworkState::init(&ArchSpec::mlp(4, &[6], 3), 1, 0).unwrap(),
            NetworkState::init(&ArchSpec::small_cnn([1, 4, 4], [2, 2], 5, 3), 1, 1).unwrap(),
        ];
        let bytes = encode(&nets).unwrap();
        assert_eq!(&bytes[..4], MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), FORMAT_VERSION);
        let back = decode(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in nets.iter().zip(&back) {
            assert_eq!(a.arch, b.arch);
            assert_eq!(a.net_id, b.net_id);
            for (pa, pb) in a.params.iter().zip(&b.params) {
                let rounded: Vec<f64> = pa.data().iter().map(|&v| v as f32 as f64).collect();
                assert_eq!(pb.data(), rounded.as_slice());
            }
        }
        // A second pass is exact once values are f32-representable.
        assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn truncation_is_a_format_error() {
        let nets = vec![NetworkState::init(&ArchSpec::mlp(4, &[6], 3), 1, 0).unwrap()];
        let bytes = encode(&nets).unwrap();
        for cut in [3, 10, bytes.len() - 1] {
            let err = decode(&bytes[..cut], Path::new("mem")).unwrap_err();
            assert!(matches!(err, Error::Format { .. }), "{err}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad, Path::new("mem")), Err(Error::Format { offset: 0, .. })));
    }
}
