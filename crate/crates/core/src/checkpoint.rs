//! `TLCK` checkpoint container: every network parameter plus both sets of
//! Gaussian widths.
//!
//! Layout (little endian): magic `TLCK`, `u32` version, `u32` entry count,
//! then per entry a `u32` name length, the UTF-8 name and an embedded TNSR
//! tensor. Entries are written in name order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::heatmap::{SigmaParams, SigmaRole};
use crate::network::{ParamGroup, ParamStore};
use crate::tensor::Tensor;

pub const TLCK_MAGIC: &[u8; 4] = b"TLCK";
pub const TLCK_VERSION: u32 = 1;

pub const SIGMA_H_ENTRY: &str = "sigma.h";
pub const SIGMA_T_ENTRY: &str = "sigma.t";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub sigma_h: SigmaParams,
    pub sigma_t: SigmaParams,
}

impl Checkpoint {
    fn entries(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .params
            .iter()
            .map(|(k, e)| (k.clone(), e.tensor.clone()))
            .collect();
        out.push((SIGMA_H_ENTRY.to_string(), self.sigma_h.tensor()));
        out.push((SIGMA_T_ENTRY.to_string(), self.sigma_t.tensor()));
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let entries = self.entries();
        w.write_all(TLCK_MAGIC)?;
        w.write_all(&TLCK_VERSION.to_le_bytes())?;
        w.write_all(&(entries.len() as u32).to_le_bytes())?;
        for (name, t) in &entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            t.write_to(&mut w)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)
            .expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let fmt = |e: std::io::Error| Error::Format(format!("truncated TLCK stream: {e}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(fmt)?;
        if &magic != TLCK_MAGIC {
            return Err(Error::Format(format!("bad TLCK magic {magic:?}")));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word).map_err(fmt)?;
        let version = u32::from_le_bytes(word);
        if version != TLCK_VERSION {
            return Err(Error::Format(format!("unsupported TLCK version {version}")));
        }
        r.read_exact(&mut word).map_err(fmt)?;
        let count = u32::from_le_bytes(word);

        let mut params = ParamStore::default();
        let (mut sigma_h, mut sigma_t) = (None, None);
        for _ in 0..count {
            r.read_exact(&mut word).map_err(fmt)?;
            let mut name = vec![0u8; u32::from_le_bytes(word) as usize];
            r.read_exact(&mut name).map_err(fmt)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Format("entry name is not UTF-8".into()))?;
            let tensor = Tensor::read_from(&mut r)?;
            match name.as_str() {
                SIGMA_H_ENTRY => sigma_h = Some(sigma_from(tensor, SigmaRole::Regression)?),
                SIGMA_T_ENTRY => sigma_t = Some(sigma_from(tensor, SigmaRole::Topology)?),
                _ => {
                    let prefix = name.split('.').next().unwrap_or_default();
                    let group = ParamGroup::parse(prefix).map_err(|_| {
                        Error::Format(format!("entry `{name}` belongs to no parameter group"))
                    })?;
                    let decay = name.ends_with(".weight");
                    params.insert(name, group, tensor, decay);
                }
            }
        }
        let missing = |n: &str| Error::Format(format!("checkpoint lacks `{n}`"));
        Ok(Self {
            params,
            sigma_h: sigma_h.ok_or_else(|| missing(SIGMA_H_ENTRY))?,
            sigma_t: sigma_t.ok_or_else(|| missing(SIGMA_T_ENTRY))?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(file))
    }
}

fn sigma_from(t: Tensor, role: SigmaRole) -> Result<SigmaParams> {
    if t.rank() != 1 {
        return Err(Error::Format(format!(
            "sigma entry must be a vector, got shape {:?}",
            t.shape()
        )));
    }
    Ok(SigmaParams {
        log_sigma: t.into_data(),
        role,
    })
}
