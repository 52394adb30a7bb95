//! Model serialization: a small self-describing binary with a whole-file
//! SHA-256 trailer. Saving is atomic (temp file + rename) so a crash never
//! leaves a half-written checkpoint behind.
//!
//! Layout, all integers little-endian:
//!   magic "MMIX" | u32 version | u64 json_len | config JSON
//!   | u64 n_params | n x (name, dtype u8, rank u64, dims, raw data)
//!   | u64 n_buffers | n x (name, mean tensor, var tensor)
//!   | 32-byte SHA-256 of everything above

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mixers::BnPair;
use crate::models::{Model, ModelConfig};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MMIX";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 1;

pub fn save_model(path: impl AsRef<Path>, model: &Model) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());

    let config = serde_json::to_vec(&model.config)
        .map_err(|e| Error::Checkpoint { detail: format!("config encode: {e}") })?;
    buf.extend_from_slice(&(config.len() as u64).to_le_bytes());
    buf.extend_from_slice(&config);

    buf.extend_from_slice(&(model.num_params() as u64).to_le_bytes());
    for (name, t) in model.named_params() {
        write_str(&mut buf, name);
        write_tensor(&mut buf, t);
    }
    let buffers: Vec<_> = model.named_buffers().collect();
    buf.extend_from_slice(&(buffers.len() as u64).to_le_bytes());
    for (name, pair) in buffers {
        write_str(&mut buf, name);
        write_tensor(&mut buf, &pair.mean);
        write_tensor(&mut buf, &pair.var);
    }

    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);

    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &buf).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.len() < 4 + 4 + 32 {
        return Err(Error::Checkpoint { detail: format!("{}: truncated", path.display()) });
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != trailer {
        return Err(Error::Checkpoint {
            detail: format!("{}: checksum mismatch (corrupt or partial file)", path.display()),
        });
    }

    let mut r = Reader { buf: body, pos: 0, path };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(r.err("bad magic, not a model checkpoint"));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(r.err(format!("unsupported version {version}")));
    }

    let json = r.take_len_prefixed()?;
    let config: ModelConfig = serde_json::from_slice(json)
        .map_err(|e| Error::Checkpoint { detail: format!("{}: config: {e}", path.display()) })?;
    // Rebuilding from config validates it and pins the expected shapes; every
    // stored blob must then match a known slot exactly.
    let mut model = Model::build(config, 0)?;

    let n_params = r.take_u64()? as usize;
    if n_params != model.num_params() {
        return Err(r.err(format!(
            "parameter count {n_params} does not match config ({})",
            model.num_params()
        )));
    }
    for _ in 0..n_params {
        let name = r.take_string()?;
        let t = r.take_tensor()?;
        model.set_param(&name, t)?;
    }

    let n_buffers = r.take_u64()? as usize;
    if n_buffers != model.named_buffers().count() {
        return Err(r.err(format!("buffer count {n_buffers} does not match config")));
    }
    for _ in 0..n_buffers {
        let name = r.take_string()?;
        let mean = r.take_tensor()?;
        let var = r.take_tensor()?;
        model.set_buffer(&name, BnPair { mean, var })?;
    }
    if r.pos != r.buf.len() {
        return Err(r.err("trailing bytes after last buffer"));
    }
    Ok(model)
}

/// Hex SHA-256 of a file, for mutation checks and dataset fingerprints.
pub fn file_sha256(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u64).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

fn write_tensor(buf: &mut Vec<u8>, t: &Tensor<f32>) {
    buf.push(DTYPE_F32);
    buf.extend_from_slice(&(t.rank() as u64).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    buf.extend_from_slice(&(t.numel() as u64).to_le_bytes());
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, detail: impl Into<String>) -> Error {
        Error::Checkpoint { detail: format!("{}: {}", self.path.display(), detail.into()) }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.err("unexpected end of file"));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn take_u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn take_len_prefixed(&mut self) -> Result<&'a [u8]> {
        let n = self.take_u64()? as usize;
        self.take(n)
    }

    fn take_string(&mut self) -> Result<String> {
        let raw = self.take_len_prefixed()?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.err("non-utf8 name"))
    }

    fn take_tensor(&mut self) -> Result<Tensor<f32>> {
        let dtype = self.take(1)?[0];
        if dtype != DTYPE_F32 {
            return Err(self.err(format!("unsupported dtype tag {dtype}")));
        }
        let rank = self.take_u64()? as usize;
        if rank > 8 {
            return Err(self.err(format!("implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.take_u64()? as usize);
        }
        let numel = self.take_u64()? as usize;
        if numel != shape.iter().product::<usize>() {
            return Err(self.err("element count disagrees with shape"));
        }
        let raw = self.take(numel * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::from_vec(&shape, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Family, ModelConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_model() -> Model {
        let cfg = ModelConfig {
            family: Family::WaveMixNet,
            depth: 2,
            embed_dim: 8,
            patch_size: 4,
            input_size: (16, 16),
            num_classes: 2,
            in_channels: 3,
            mlp_ratio: 2.0,
            heads: 4,
            dwt_levels: 1,
            kernel_size: 3,
        };
        Model::build(cfg, 21).unwrap()
    }

    #[test]
    fn round_trip_preserves_params_buffers_and_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f32>::randn(&[2, 3, 16, 16], 1.0, &mut rng);

        let mut m = tiny_model();
        m.forward(&x, true).unwrap(); // move BN stats off their init values
        save_model(&path, &m).unwrap();
        let mut loaded = load_model(&path).unwrap();

        assert_eq!(loaded.config, m.config);
        for ((na, ta), (nb, tb)) in m.named_params().zip(loaded.named_params()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data(), "{na}");
        }
        for ((na, pa), (nb, pb)) in m.named_buffers().zip(loaded.named_buffers()) {
            assert_eq!(na, nb);
            assert_eq!(pa.mean.data(), pb.mean.data(), "{na}");
            assert_eq!(pa.var.data(), pb.var.data(), "{na}");
        }
        let a = m.forward(&x, false).unwrap();
        let b = loaded.forward(&x, false).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn saving_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let m = tiny_model();
        save_model(&p1, &m).unwrap();
        save_model(&p2, &m).unwrap();
        assert_eq!(file_sha256(&p1).unwrap(), file_sha256(&p2).unwrap());
    }

    #[test]
    fn corruption_and_truncation_are_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_model(&path, &tiny_model()).unwrap();

        let mut bytes = fs::read(&path).unwrap();
        bytes[100] ^= 0x40;
        fs::write(&path, &bytes).unwrap();
        let err = match load_model(&path) {
            Err(e) => e,
            Ok(_) => panic!("corrupted checkpoint must not load"),
        };
        assert!(err.to_string().contains("checksum"), "{err}");

        let good = {
            save_model(&path, &tiny_model()).unwrap();
            fs::read(&path).unwrap()
        };
        fs::write(&path, &good[..good.len() / 2]).unwrap();
        assert!(load_model(&path).is_err());

        fs::write(&path, b"PK\x03\x04 definitely not a checkpoint").unwrap();
        assert!(load_model(&path).is_err());
    }
}
