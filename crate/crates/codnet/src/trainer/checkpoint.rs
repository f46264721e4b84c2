//! Single-file binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic               8 bytes  b"CODNET01"
//! element width       1 byte   4 (f32) or 8 (f64)
//! config length       u64
//! config JSON         …        embedded RunConfig snapshot
//! epoch               u64
//! rng seed            32 bytes
//! rng word position   u128
//! rng stream          u64
//! optimizer steps     u64
//! tensor count        u64
//! per tensor:
//!   name length       u64
//!   name              …        UTF-8
//!   ndim              u64
//!   dims              u64 × ndim
//!   data              element width × product(dims), little-endian
//! ```
//!
//! Tensors hold parameters and batch-norm buffers under their visitor
//! names plus optimizer moments under `adam.m.` / `adam.v.` prefixes.
//! Loading is strict: wrong magic, wrong element width, truncation, or
//! trailing bytes are all errors, so a checkpoint either round-trips
//! bitwise or fails loudly.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::scalar::{Dtype, Scalar};

pub const MAGIC: [u8; 8] = *b"CODNET01";

/// Full ChaCha20 generator state, enough to resume the exact stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
    pub stream: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha20Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            word_pos: rng.get_word_pos(),
            stream: rng.get_stream(),
        }
    }

    pub fn restore(&self) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Everything needed to resume or evaluate a run.
#[derive(Debug, Clone)]
pub struct Checkpoint<T: Scalar> {
    pub config: RunConfig,
    pub epoch: u64,
    pub rng: RngState,
    pub optimizer_steps: u64,
    pub tensors: BTreeMap<String, ArrayD<T>>,
}

fn corrupt(path: &Path, what: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{}: {what}", path.display()))
}

fn write_u64(out: &mut impl Write, v: u64, path: &Path) -> Result<()> {
    out.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))
}

fn read_exact<const N: usize>(input: &mut impl Read, path: &Path) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    input
        .read_exact(&mut buf)
        .map_err(|_| corrupt(path, "truncated"))?;
    Ok(buf)
}

fn read_u64(input: &mut impl Read, path: &Path) -> Result<u64> {
    Ok(u64::from_le_bytes(read_exact::<8>(input, path)?))
}

fn read_vec(input: &mut impl Read, len: usize, path: &Path) -> Result<Vec<u8>> {
    // Sanity cap so a corrupt length field cannot trigger a huge allocation.
    const MAX_FIELD: usize = 1 << 33;
    if len > MAX_FIELD {
        return Err(corrupt(path, format!("implausible field length {len}")));
    }
    let mut buf = vec![0u8; len];
    input
        .read_exact(&mut buf)
        .map_err(|_| corrupt(path, "truncated"))?;
    Ok(buf)
}

impl<T: Scalar> Checkpoint<T> {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        out.write_all(&MAGIC).map_err(|e| Error::io(path, e))?;
        out.write_all(&[T::BYTE_WIDTH as u8])
            .map_err(|e| Error::io(path, e))?;

        let config = serde_json::to_vec(&self.config)?;
        write_u64(&mut out, config.len() as u64, path)?;
        out.write_all(&config).map_err(|e| Error::io(path, e))?;

        write_u64(&mut out, self.epoch, path)?;
        out.write_all(&self.rng.seed).map_err(|e| Error::io(path, e))?;
        out.write_all(&self.rng.word_pos.to_le_bytes())
            .map_err(|e| Error::io(path, e))?;
        write_u64(&mut out, self.rng.stream, path)?;
        write_u64(&mut out, self.optimizer_steps, path)?;

        write_u64(&mut out, self.tensors.len() as u64, path)?;
        for (name, tensor) in &self.tensors {
            write_u64(&mut out, name.len() as u64, path)?;
            out.write_all(name.as_bytes()).map_err(|e| Error::io(path, e))?;
            write_u64(&mut out, tensor.ndim() as u64, path)?;
            for &d in tensor.shape() {
                write_u64(&mut out, d as u64, path)?;
            }
            let mut data = Vec::with_capacity(tensor.len() * T::BYTE_WIDTH);
            for &v in tensor.iter() {
                v.write_le(&mut data);
            }
            out.write_all(&data).map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut input = BufReader::new(file);

        let magic = read_exact::<8>(&mut input, path)?;
        if magic != MAGIC {
            return Err(corrupt(path, "not a checkpoint (bad magic)"));
        }
        let width = read_exact::<1>(&mut input, path)?[0] as usize;
        if width != T::BYTE_WIDTH {
            return Err(corrupt(
                path,
                format!(
                    "element width mismatch: file holds {}-byte elements, loader expects {} ({})",
                    width,
                    T::BYTE_WIDTH,
                    T::DTYPE
                ),
            ));
        }

        let config_len = read_u64(&mut input, path)? as usize;
        let config_bytes = read_vec(&mut input, config_len, path)?;
        let config: RunConfig = serde_json::from_slice(&config_bytes)
            .map_err(|e| corrupt(path, format!("embedded config: {e}")))?;

        let epoch = read_u64(&mut input, path)?;
        let seed = read_exact::<32>(&mut input, path)?;
        let word_pos = u128::from_le_bytes(read_exact::<16>(&mut input, path)?);
        let stream = read_u64(&mut input, path)?;
        let optimizer_steps = read_u64(&mut input, path)?;

        let count = read_u64(&mut input, path)? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u64(&mut input, path)? as usize;
            let name = String::from_utf8(read_vec(&mut input, name_len, path)?)
                .map_err(|_| corrupt(path, "tensor name is not UTF-8"))?;
            let ndim = read_u64(&mut input, path)? as usize;
            if ndim > 8 {
                return Err(corrupt(path, format!("tensor {name}: implausible rank {ndim}")));
            }
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(read_u64(&mut input, path)? as usize);
            }
            let len: usize = dims.iter().product();
            let data = read_vec(&mut input, len * T::BYTE_WIDTH, path)?;
            let values: Vec<T> = data
                .chunks_exact(T::BYTE_WIDTH)
                .map(T::read_le)
                .collect();
            let tensor = ArrayD::from_shape_vec(IxDyn(&dims), values)
                .map_err(|e| corrupt(path, format!("tensor {name}: {e}")))?;
            if tensors.insert(name.clone(), tensor).is_some() {
                return Err(corrupt(path, format!("duplicate tensor {name}")));
            }
        }

        let mut trailing = [0u8; 1];
        if input.read(&mut trailing).map_err(|e| Error::io(path, e))? != 0 {
            return Err(corrupt(path, "trailing bytes after tensor section"));
        }

        Ok(Checkpoint {
            config,
            epoch,
            rng: RngState {
                seed,
                word_pos,
                stream,
            },
            optimizer_steps,
            tensors,
        })
    }
}

/// Element type stored in a checkpoint, without loading it — used to
/// dispatch the generic loader from the CLI.
pub fn peek_dtype(path: &Path) -> Result<Dtype> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut input = BufReader::new(file);
    let magic = read_exact::<8>(&mut input, path)?;
    if magic != MAGIC {
        return Err(corrupt(path, "not a checkpoint (bad magic)"));
    }
    match read_exact::<1>(&mut input, path)?[0] {
        4 => Ok(Dtype::F32),
        8 => Ok(Dtype::F64),
        other => Err(corrupt(path, format!("unknown element width {other}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::RngCore;
    use std::path::PathBuf;

    fn tmp_file(tag: &str) -> PathBuf {
        std::env::temp_dir().join(format!("codnet-ckpt-{tag}-{}.ckpt", std::process::id()))
    }

    fn sample_checkpoint() -> Checkpoint<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(41);
        rng.set_stream(7);
        let _ = rng.next_u64(); // advance so word_pos is nontrivial
        let mut tensors = BTreeMap::new();
        tensors.insert(
            "layer.weight".to_string(),
            ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![0.5, -0.25, 1.0e-12, -0.0, 3.25, 7.0])
                .unwrap(),
        );
        tensors.insert(
            "adam.m.layer.weight".to_string(),
            ArrayD::from_elem(IxDyn(&[2, 3]), 1e-3),
        );
        Checkpoint {
            config: RunConfig::default(),
            epoch: 12,
            rng: RngState::capture(&rng),
            optimizer_steps: 96,
            tensors,
        }
    }

    #[test]
    fn round_trip_is_bitwise_and_resumes_the_rng_stream() {
        let path = tmp_file("roundtrip");
        let original = sample_checkpoint();
        original.save(&path).unwrap();
        let loaded = Checkpoint::<f64>::load(&path).unwrap();

        assert_eq!(loaded.config, original.config);
        assert_eq!(loaded.epoch, 12);
        assert_eq!(loaded.optimizer_steps, 96);
        assert_eq!(loaded.rng, original.rng);
        assert_eq!(loaded.tensors.len(), original.tensors.len());
        for (name, tensor) in &original.tensors {
            let back = &loaded.tensors[name];
            assert_eq!(back.shape(), tensor.shape());
            for (a, b) in tensor.iter().zip(back.iter()) {
                assert_eq!(a.to_bits(), b.to_bits(), "{name} must round-trip bitwise");
            }
        }

        // The restored generator continues exactly where the captured one
        // would have.
        let mut resumed = loaded.rng.restore();
        let mut reference = original.rng.restore();
        for _ in 0..8 {
            assert_eq!(resumed.next_u64(), reference.next_u64());
        }

        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn dtype_is_peekable_and_mismatches_are_rejected() {
        let path = tmp_file("dtype");
        sample_checkpoint().save(&path).unwrap();
        assert_eq!(peek_dtype(&path).unwrap(), Dtype::F64);
        let err = Checkpoint::<f32>::load(&path).unwrap_err();
        assert!(
            err.to_string().contains("element width mismatch"),
            "got: {err}"
        );
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let path = tmp_file("corrupt");
        sample_checkpoint().save(&path).unwrap();

        // Truncation.
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(Checkpoint::<f64>::load(&path).unwrap_err().to_string().contains("truncated"));

        // Trailing garbage.
        let mut extended = bytes.clone();
        extended.extend_from_slice(b"xx");
        std::fs::write(&path, &extended).unwrap();
        assert!(Checkpoint::<f64>::load(&path)
            .unwrap_err()
            .to_string()
            .contains("trailing"));

        // Bad magic.
        let mut bad = bytes;
        bad[0] ^= 0xFF;
        std::fs::write(&path, &bad).unwrap();
        assert!(Checkpoint::<f64>::load(&path).unwrap_err().to_string().contains("magic"));
        assert!(peek_dtype(&path).is_err());

        std::fs::remove_file(&path).ok();
    }
}
