//! Little-endian checkpoint container.
//!
//! Layout: 8-byte magic, `u32` version, `u32` length plus UTF-8 JSON
//! metadata, `u32` record count, then per tensor: `u32` name length, name
//! bytes, `u32` rank, `rank × u64` dims and the `f64` payload.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ConfuError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CONFUCKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: u64,
    /// Stage that produced the checkpoint.
    pub stage: String,
    /// Configuration text echoed from the run.
    pub config: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor<f64>)>,
}

impl Checkpoint {
    pub fn new<S: Scalar>(meta: CheckpointMeta, named: &[(String, Tensor<S>)]) -> Self {
        let tensors = named.iter().map(|(n, t)| (n.clone(), t.cast::<f64>())).collect();
        Self { version: VERSION, meta, tensors }
    }

    /// Tensors cast to the model scalar.
    pub fn named<S: Scalar>(&self) -> Vec<(String, Tensor<S>)> {
        self.tensors.iter().map(|(n, t)| (n.clone(), t.cast::<S>())).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f64>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&self.version.to_le_bytes())?;
        let meta = serde_json::to_vec(&self.meta).map_err(|e| ConfuError::Format(e.to_string()))?;
        write_len(w, meta.len())?;
        w.write_all(&meta)?;
        write_len(w, self.tensors.len())?;
        for (name, t) in &self.tensors {
            write_len(w, name.len())?;
            w.write_all(name.as_bytes())?;
            write_len(w, t.shape().len())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for x in t.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(ConfuError::Format("not a checkpoint (bad magic)".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(ConfuError::Format(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = read_u32(r)? as usize;
        let meta_bytes = read_bytes(r, meta_len)?;
        let meta: CheckpointMeta =
            serde_json::from_slice(&meta_bytes).map_err(|e| ConfuError::Format(format!("checkpoint metadata: {e}")))?;
        let count = read_u32(r)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u32(r)? as usize;
            let name = String::from_utf8(read_bytes(r, name_len)?)
                .map_err(|e| ConfuError::Format(format!("tensor name: {e}")))?;
            let rank = read_u32(r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                shape.push(usize::try_from(u64::from_le_bytes(b)).map_err(|_| ConfuError::Format("dim overflow".into()))?);
            }
            let n: usize = shape.iter().product();
            let raw = read_bytes(r, n * 8)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        Ok(Self { version, meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn write_len(w: &mut impl Write, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| ConfuError::Format(format!("length {n} exceeds u32")))?;
    w.write_all(&n.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_bytes(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let meta = CheckpointMeta { step: 7, stage: "confu".into(), config: "[target]\nd_model = 8\n".into() };
        let tensors = vec![
            ("a.w".to_string(), Tensor::matrix(2, 3, vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300, -2.5, 0.1]).unwrap()),
            ("b".to_string(), Tensor::row_vector(vec![std::f64::consts::PI])),
            ("empty".to_string(), Tensor::zeros(&[0, 4])),
        ];
        Checkpoint { version: VERSION, meta, tensors }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.meta, ck.meta);
        for ((n1, t1), (n2, t2)) in ck.tensors.iter().zip(&back.tensors) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let bits = |t: &Tensor<f64>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(t1), bits(t2));
        }
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn header_is_magic_then_version() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), VERSION);
    }

    #[test]
    fn corrupt_inputs_are_format_errors() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::read_from(&mut bad.as_slice()), Err(ConfuError::Format(_))));
        let mut ver = buf.clone();
        ver[8] = 9;
        assert!(matches!(Checkpoint::read_from(&mut ver.as_slice()), Err(ConfuError::Format(_))));
        let truncated = &buf[..buf.len() - 3];
        assert!(matches!(Checkpoint::read_from(&mut &truncated[..]), Err(ConfuError::Io(_))));
    }
}
