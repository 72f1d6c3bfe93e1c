//! CKPT: training state as named tensors.
//!
//! ```text
//! "CKPT" | version u32 = 1 | step u64 | config_len u32 | config (UTF-8)
//! | num_tensors u32 | tensor × num_tensors
//! tensor: name_len u16 | name | dtype u8 (0 = f32, 1 = f64) | rank u32 | dims u32 × rank | values
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, WriteBytesExt};

use crate::binio::{u32_of, write_f32s, write_f64s, Reader};
use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

const MAGIC: &[u8; 4] = b"CKPT";
const VERSION: u32 = 1;
const WHAT: &str = "CKPT checkpoint";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub step: u64,
    /// Echo of the run configuration.
    pub config: String,
    pub tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors.get(name).ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))
    }
}

fn dtype_tag(d: DType) -> u8 {
    match d {
        DType::F32 => 0,
        DType::F64 => 1,
    }
}

pub fn write_checkpoint<T: Scalar, W: Write>(mut w: W, c: &Checkpoint<T>) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LE>(VERSION)?;
    w.write_u64::<LE>(c.step)?;
    w.write_u32::<LE>(u32_of(WHAT, c.config.len())?)?;
    w.write_all(c.config.as_bytes())?;
    w.write_u32::<LE>(u32_of(WHAT, c.tensors.len())?)?;
    for (name, t) in &c.tensors {
        let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("tensor name `{name}` too long")))?;
        w.write_u16::<LE>(len)?;
        w.write_all(name.as_bytes())?;
        w.write_u8(dtype_tag(T::DTYPE))?;
        w.write_u32::<LE>(u32_of(WHAT, t.rank())?)?;
        for &d in t.shape() {
            w.write_u32::<LE>(u32_of(WHAT, d)?)?;
        }
        match T::DTYPE {
            DType::F32 => write_f32s(&mut w, &t.data().iter().map(|v| v.as_f64() as f32).collect::<Vec<_>>())?,
            DType::F64 => write_f64s(&mut w, &t.data().iter().map(|v| v.as_f64()).collect::<Vec<_>>())?,
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a whole checkpoint; nothing is returned unless every tensor parsed.
pub fn read_checkpoint<T: Scalar, R: Read>(r: R) -> Result<Checkpoint<T>> {
    let mut r = Reader::new(r, WHAT);
    r.expect_header(MAGIC, VERSION)?;
    let step = r.u64()?;
    let len = r.u32()? as usize;
    let config = r.string(len)?;
    let n = r.u32()? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..n {
        let len = r.u16()? as usize;
        let name = r.string(len)?;
        let tag = r.bytes(1)?[0];
        if tag != dtype_tag(T::DTYPE) {
            return Err(Error::Format(format!("{WHAT}: tensor `{name}` has dtype tag {tag}, expected {:?}", T::DTYPE)));
        }
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("{WHAT}: tensor `{name}` is too large")))?;
        let data: Vec<T> = match T::DTYPE {
            DType::F32 => r.f32s(count)?.into_iter().map(|v| T::lit(v as f64)).collect(),
            DType::F64 => r.f64s(count)?.into_iter().map(T::lit).collect(),
        };
        if tensors.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(Error::Format(format!("{WHAT}: duplicate tensor `{name}`")));
        }
    }
    r.expect_end()?;
    Ok(Checkpoint { step, config, tensors })
}

pub fn save_checkpoint<T: Scalar>(c: &Checkpoint<T>, path: impl AsRef<Path>) -> Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), c)
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn sample<T: Scalar>() -> Checkpoint<T> {
        let mut rng = SplitMix64::new(3);
        let mut tensors = BTreeMap::new();
        tensors.insert("param.w".to_string(), Tensor::randn([3, 2], 1.0, &mut rng));
        tensors.insert("bn.mean".to_string(), Tensor::randn([2], 1.0, &mut rng));
        tensors.insert("scalar".to_string(), Tensor::scalar(T::lit(-0.0)));
        Checkpoint {
            step: 42,
            config: "train.seed = 1\n".into(),
            tensors,
        }
    }

    fn bytes<T: Scalar>(c: &Checkpoint<T>) -> Vec<u8> {
        let mut b = Vec::new();
        write_checkpoint(&mut b, c).unwrap();
        b
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample::<f32>();
        let back: Checkpoint<f32> = read_checkpoint(&bytes(&c)[..]).unwrap();
        assert_eq!(bytes(&back), bytes(&c));
        let c = sample::<f64>();
        let back: Checkpoint<f64> = read_checkpoint(&bytes(&c)[..]).unwrap();
        for (k, t) in &c.tensors {
            let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(t), bits(&back.tensors[k]));
        }
        assert_eq!(back.step, 42);
    }

    #[test]
    fn rejects_bad_files() {
        let good = bytes(&sample::<f32>());
        for cut in [0, 3, 9, 20, good.len() - 1] {
            assert!(matches!(read_checkpoint::<f32, _>(&good[..cut]), Err(Error::Truncated { .. })), "cut {cut}");
        }
        let mut bad = good.clone();
        bad[..4].copy_from_slice(b"CKPX");
        assert!(matches!(read_checkpoint::<f32, _>(&bad[..]), Err(Error::BadMagic { .. })));
        let mut bad = good.clone();
        bad[4] = 7;
        assert!(matches!(read_checkpoint::<f32, _>(&bad[..]), Err(Error::BadVersion { found: 7, .. })));
        assert!(read_checkpoint::<f64, _>(&good[..]).is_err());
        assert!(sample::<f32>().get("nope").is_err());
    }
}
