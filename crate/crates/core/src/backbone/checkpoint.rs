use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;
use crate::{Error, Result};

use super::params::{ModelConfig, ModelParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// `manifest.json` next to `params.bin`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    pub entity_count: usize,
    pub relation_count: usize,
    pub seed: u64,
    pub snapshot: usize,
}

fn write_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&u32::try_from(v).expect("fits u32").to_le_bytes());
}

/// Writes `params.bin` (length-prefixed named tensors, little-endian f64) and `manifest.json`.
pub fn save_checkpoint(params: &ModelParams, dir: &Path, seed: u64, snapshot: usize) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut buf = Vec::with_capacity(params.scalar_count() * 8 + 1024);
    write_u32(&mut buf, params.tensors.len());
    for (name, t) in params.names.iter().zip(&params.tensors) {
        write_u32(&mut buf, name.len());
        buf.extend_from_slice(name.as_bytes());
        write_u32(&mut buf, t.shape().len());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let bin = dir.join("params.bin");
    let mut f = fs::File::create(&bin).map_err(|e| Error::io(&bin, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&bin, e))?;
    let manifest = Manifest {
        config: params.config.clone(),
        tensors: params
            .names
            .iter()
            .zip(&params.tensors)
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        entity_count: params.entity_count(),
        relation_count: params.relation_count(),
        seed,
        snapshot,
    };
    let mp = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&mp, e))?;
    fs::write(&mp, json + "\n").map_err(|e| Error::io(&mp, e))
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::parse(self.path, 0, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Loads a checkpoint written by [`save_checkpoint`]; tensor names and shapes
/// must match a freshly laid-out model of the recorded sizes.
pub fn load_checkpoint(dir: &Path) -> Result<(ModelParams, Manifest)> {
    let mp = dir.join("manifest.json");
    let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(&mp, e))?;
    let bin = dir.join("params.bin");
    let mut raw = Vec::new();
    fs::File::open(&bin)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(&bin, e))?;
    let mut rd = Reader {
        data: &raw,
        pos: 0,
        path: &bin,
    };
    let mut params = ModelParams::init(&manifest.config, manifest.entity_count, manifest.relation_count, 0)?;
    let count = rd.u32()?;
    if count != params.tensors.len() {
        return Err(Error::parse(
            &bin,
            0,
            format!("{count} tensors, layout has {}", params.tensors.len()),
        ));
    }
    for i in 0..count {
        let name_len = rd.u32()?;
        let name = String::from_utf8(rd.take(name_len)?.to_vec())
            .map_err(|_| Error::parse(&bin, 0, "tensor name is not UTF-8"))?;
        if name != params.names[i] {
            return Err(Error::parse(
                &bin,
                0,
                format!("tensor {i} is {name}, expected {}", params.names[i]),
            ));
        }
        let rank = rd.u32()?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(rd.u64()? as usize);
        }
        if shape != params.tensors[i].shape() {
            return Err(Error::parse(
                &bin,
                0,
                format!("{name}: shape {shape:?} does not match layout"),
            ));
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_le_bytes(rd.take(8)?.try_into().unwrap()));
        }
        params.tensors[i] = Tensor::new(&shape, data)?;
    }
    if rd.pos != raw.len() {
        return Err(Error::parse(&bin, 0, "trailing bytes"));
    }
    Ok((params, manifest))
}
