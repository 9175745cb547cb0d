//! Model checkpoints.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! 8  bytes  magic "FPALAB01"
//! u32       format version (currently 1)
//! u32       architecture JSON length, then that many JSON bytes
//! u32       tensor count
//! per tensor:
//!   u32     name length, then name bytes (UTF-8)
//!   u8      dtype tag (0 = f32)
//!   u8      rank
//!   u32*    one dimension per rank
//!   f32*    raw little-endian data, product(dims) values
//! u32       training-metadata JSON length, then that many JSON bytes
//! ```
//!
//! Loading a checkpoint reproduces every parameter bit-exactly; format
//! violations report the byte offset at which parsing failed.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::zoo::arch::ArchSpec;
use crate::zoo::model::Model;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"FPALAB01";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// Provenance of the stored weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub seed: u64,
    pub epochs: usize,
    pub final_test_accuracy: f32,
}

impl TrainMeta {
    pub fn untrained(seed: u64) -> Self {
        TrainMeta {
            seed,
            epochs: 0,
            final_test_accuracy: 0.0,
        }
    }
}

pub fn save_checkpoint(model: &Model, meta: &TrainMeta, path: &Path) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    let arch = serde_json::to_vec(model.spec()).map_err(|e| Error::config(format!("arch serialization: {e}")))?;
    w.write_all(&(arch.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&arch).map_err(io)?;
    w.write_all(&(model.params().len() as u32).to_le_bytes()).map_err(io)?;
    for (name, tensor) in model.params() {
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        w.write_all(&[DTYPE_F32, tensor.rank() as u8]).map_err(io)?;
        for &dim in tensor.shape() {
            w.write_all(&(dim as u32).to_le_bytes()).map_err(io)?;
        }
        for v in tensor.data() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    let meta_json =
        serde_json::to_vec(meta).map_err(|e| Error::config(format!("metadata serialization: {e}")))?;
    w.write_all(&(meta_json.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&meta_json).map_err(io)?;
    w.flush().map_err(io)
}

/// Byte-counting reader so parse errors can name the offending offset.
struct Counted<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Counted<R> {
    fn take(&mut self, buf: &mut [u8], path: &Path, what: &str) -> Result<()> {
        let at = self.offset;
        self.inner.read_exact(buf).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            offset: at,
            detail: format!("{what}: {e}"),
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u32(&mut self, path: &Path, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.take(&mut b, path, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u8(&mut self, path: &Path, what: &str) -> Result<u8> {
        let mut b = [0u8; 1];
        self.take(&mut b, path, what)?;
        Ok(b[0])
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, TrainMeta)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = Counted {
        inner: BufReader::new(file),
        offset: 0,
    };
    let mut magic = [0u8; 8];
    r.take(&mut magic, path, "magic")?;
    if &magic != MAGIC {
        return Err(Error::format(path, 0, format!("bad magic {magic:02x?}, expected {MAGIC:02x?}")));
    }
    let version = r.u32(path, "version")?;
    if version != VERSION {
        return Err(Error::format(path, 8, format!("unsupported version {version}, expected {VERSION}")));
    }

    let arch_len = r.u32(path, "arch length")? as usize;
    let mut arch_bytes = vec![0u8; arch_len];
    let arch_at = r.offset;
    r.take(&mut arch_bytes, path, "arch json")?;
    let spec: ArchSpec = serde_json::from_slice(&arch_bytes)
        .map_err(|e| Error::format(path, arch_at, format!("arch json: {e}")))?;

    let count = r.u32(path, "tensor count")? as usize;
    let mut params = Vec::with_capacity(count);
    for i in 0..count {
        let name_len = r.u32(path, "name length")? as usize;
        let mut name_bytes = vec![0u8; name_len];
        let name_at = r.offset;
        r.take(&mut name_bytes, path, "name")?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| Error::format(path, name_at, format!("tensor {i} name: {e}")))?;
        let dtype_at = r.offset;
        let dtype = r.u8(path, "dtype")?;
        if dtype != DTYPE_F32 {
            return Err(Error::format(path, dtype_at, format!("tensor '{name}': unknown dtype tag {dtype}")));
        }
        let rank = r.u8(path, "rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32(path, "dimension")? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = vec![0.0f32; numel];
        let mut raw = vec![0u8; numel * 4];
        r.take(&mut raw, path, "tensor data")?;
        for (v, chunk) in data.iter_mut().zip(raw.chunks_exact(4)) {
            *v = f32::from_le_bytes(chunk.try_into().expect("chunk is 4 bytes"));
        }
        params.push((
            name,
            Tensor::new(shape, data).map_err(|e| Error::format(path, dtype_at, e.to_string()))?,
        ));
    }

    let meta_len = r.u32(path, "metadata length")? as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    let meta_at = r.offset;
    r.take(&mut meta_bytes, path, "metadata json")?;
    let meta: TrainMeta = serde_json::from_slice(&meta_bytes)
        .map_err(|e| Error::format(path, meta_at, format!("metadata json: {e}")))?;

    let model = Model::from_parts(spec, params)?;
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds::rng_from_seed;
    use crate::zoo::arch::{standard_input, zoo_presets};
    use crate::zoo::model::{build_model, classify};

    fn sample_meta() -> TrainMeta {
        TrainMeta {
            seed: 42,
            epochs: 3,
            final_test_accuracy: 0.97,
        }
    }

    #[test]
    fn round_trip_is_bit_exact_for_all_families() {
        let dir = tempfile::tempdir().unwrap();
        for spec in zoo_presets(standard_input(), 10) {
            let model = build_model(&spec, &mut rng_from_seed(21)).unwrap();
            let path = dir.path().join(format!("{}.ckpt", spec.name()));
            save_checkpoint(&model, &sample_meta(), &path).unwrap();
            let (loaded, meta) = load_checkpoint(&path).unwrap();
            assert_eq!(meta, sample_meta());
            assert_eq!(loaded.spec(), model.spec());
            assert_eq!(loaded.params().len(), model.params().len());
            for ((na, ta), (nb, tb)) in model.params().iter().zip(loaded.params()) {
                assert_eq!(na, nb);
                assert!(ta.bit_eq(tb), "{na} changed across round trip");
            }
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let model = build_model(&zoo_presets(standard_input(), 10)[0], &mut rng_from_seed(22)).unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&model, &sample_meta(), &p1).unwrap();
        let (loaded, meta) = load_checkpoint(&p1).unwrap();
        save_checkpoint(&loaded, &meta, &p2).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        let b2 = std::fs::read(&p2).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn logits_survive_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let model = build_model(&zoo_presets(standard_input(), 10)[2], &mut rng_from_seed(23)).unwrap();
        let path = dir.path().join("t.ckpt");
        save_checkpoint(&model, &sample_meta(), &path).unwrap();
        let (loaded, _) = load_checkpoint(&path).unwrap();
        let x = Tensor::uniform(&[4, 1, 32, 32], 0.0, 1.0, &mut rng_from_seed(24));
        let (_, l1) = classify(&model, &x).unwrap();
        let (_, l2) = classify(&loaded, &x).unwrap();
        assert_eq!(l1.max_abs_diff(&l2).unwrap(), 0.0);
    }

    #[test]
    fn corrupted_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let model = build_model(&zoo_presets(standard_input(), 10)[0], &mut rng_from_seed(25)).unwrap();
        let path = dir.path().join("bad.ckpt");
        save_checkpoint(&model, &sample_meta(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }), "{err}");
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn truncated_file_reports_an_offset() {
        let dir = tempfile::tempdir().unwrap();
        let model = build_model(&zoo_presets(standard_input(), 10)[0], &mut rng_from_seed(26)).unwrap();
        let path = dir.path().join("trunc.ckpt");
        save_checkpoint(&model, &sample_meta(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        match err {
            Error::Format { offset, .. } => assert!(offset > 0 && offset <= bytes.len() as u64),
            other => panic!("expected a format error, got {other}"),
        }
    }

    #[test]
    fn future_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let model = build_model(&zoo_presets(standard_input(), 10)[0], &mut rng_from_seed(27)).unwrap();
        let path = dir.path().join("v2.ckpt");
        save_checkpoint(&model, &sample_meta(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }
}
