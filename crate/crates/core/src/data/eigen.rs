//! EIGV: per-dimension PCA eigenvalues used to undo feature whitening.
//!
//! ```text
//! "EIGV" | version u32 = 1 | dim u32 | f64 × dim
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, WriteBytesExt};

use crate::binio::{u32_of, write_f64s, Reader};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"EIGV";
const VERSION: u32 = 1;
const WHAT: &str = "EIGV eigenvalues";

/// Strictly positive, finite eigenvalues, one per video feature dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct Eigenvalues {
    values: Vec<f64>,
}

impl Eigenvalues {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("eigenvalues", "at least one value is required"));
        }
        if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::invalid("eigenvalues", format!("value {v} at index {i} is not positive and finite")));
        }
        Ok(Self { values })
    }

    pub fn ones(dim: usize) -> Self {
        Self { values: vec![1.0; dim.max(1)] }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

pub fn write_eigenvalues<W: Write>(mut w: W, e: &Eigenvalues) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LE>(VERSION)?;
    w.write_u32::<LE>(u32_of(WHAT, e.len())?)?;
    write_f64s(&mut w, e.values())?;
    w.flush()?;
    Ok(())
}

/// Reads and validates an EIGV stream; `expected_dim` enforces the length.
pub fn read_eigenvalues<R: Read>(r: R, expected_dim: Option<usize>) -> Result<Eigenvalues> {
    let mut r = Reader::new(r, WHAT);
    r.expect_header(MAGIC, VERSION)?;
    let dim = r.u32()? as usize;
    if let Some(want) = expected_dim.filter(|&w| w != dim) {
        return Err(Error::invalid("eigenvalues", format!("file has {dim} values, video dimension is {want}")));
    }
    let values = r.f64s(dim)?;
    r.expect_end()?;
    Eigenvalues::new(values)
}

pub fn save_eigenvalues(e: &Eigenvalues, path: impl AsRef<Path>) -> Result<()> {
    write_eigenvalues(BufWriter::new(File::create(path)?), e)
}

pub fn load_eigenvalues(path: impl AsRef<Path>, expected_dim: Option<usize>) -> Result<Eigenvalues> {
    read_eigenvalues(BufReader::new(File::open(path)?), expected_dim)
}
