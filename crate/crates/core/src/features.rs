//! Extracted binary codes and the `HYBF1` feature file.
//!
//! ```text
//! "HYBF1"          5 bytes
//! sample count     u32 LE
//! latent bits      u32 LE
//! per sample:      label byte, then ceil(latent_bits / 8) code bytes
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::autodiff::{read_exact, read_u32};
use crate::binarize::{unpack, BitVector};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 5] = b"HYBF1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeatureSet {
    pub latent_bits: usize,
    pub codes: Vec<BitVector>,
    pub labels: Vec<u8>,
}

impl FeatureSet {
    pub fn new(latent_bits: usize, codes: Vec<BitVector>, labels: Vec<u8>) -> Result<Self> {
        if codes.len() != labels.len() {
            return Err(Error::CountMismatch {
                images: codes.len(),
                labels: labels.len(),
            });
        }
        if let Some(c) = codes.iter().find(|c| c.len() != latent_bits) {
            return Err(Error::shape(format!(
                "code has {} bits, expected {latent_bits}",
                c.len()
            )));
        }
        Ok(FeatureSet {
            latent_bits,
            codes,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> FeatureSet {
        FeatureSet {
            latent_bits: self.latent_bits,
            codes: idx.iter().map(|&i| self.codes[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn label_indices(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize).collect()
    }

    /// Bytes of one serialized code.
    pub fn code_bytes(&self) -> usize {
        self.latent_bits.div_ceil(8)
    }

    /// ±1 tensor `[idx.len(), latent_bits]` for the chosen samples.
    pub fn batch_pm1(&self, idx: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * self.latent_bits);
        for &i in idx {
            data.extend(unpack(&self.codes[i]));
        }
        Tensor::new(&[idx.len(), self.latent_bits], data).expect("consistent widths")
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(FEATURE_MAGIC)?;
        w.write_all(&(self.len() as u32).to_le_bytes())?;
        w.write_all(&(self.latent_bits as u32).to_le_bytes())?;
        for (code, &label) in self.codes.iter().zip(&self.labels) {
            w.write_all(&[label])?;
            w.write_all(&code.to_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::with_capacity(13 + self.len() * (1 + self.code_bytes()));
        self.write_to(&mut v).expect("Vec write");
        v
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 5];
        read_exact(r, &mut magic, "feature magic")?;
        if &magic != FEATURE_MAGIC {
            return Err(Error::BadMagic {
                path: "<features>".into(),
                expected: "HYBF1".into(),
                found: String::from_utf8_lossy(&magic).into_owned(),
            });
        }
        let n = read_u32(r, "sample count")? as usize;
        let bits = read_u32(r, "latent bits")? as usize;
        if bits == 0 {
            return Err(Error::Format("latent width must be positive".into()));
        }
        let mut codes = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        let mut rec = vec![0u8; 1 + bits.div_ceil(8)];
        for _ in 0..n {
            read_exact(r, &mut rec, "feature record")?;
            labels.push(rec[0]);
            codes.push(BitVector::from_bytes(bits, &rec[1..])?);
        }
        FeatureSet::new(bits, codes, labels)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| {
            Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
        })?;
        Self::read_from(&mut BufReader::new(f)).map_err(|e| match e {
            Error::BadMagic { expected, found, .. } => Error::BadMagic {
                path: path.display().to_string(),
                expected,
                found,
            },
            other => other,
        })
    }
}
