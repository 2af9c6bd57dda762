//! One-file-per-sample cache: a JSON header line, then raw little-endian f32.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TurboError};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheHeader {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub seed: u64,
    pub label: usize,
}

pub fn write_sample(path: &Path, frames: &Tensor<f32>, seed: u64, label: usize) -> Result<()> {
    let header = CacheHeader { shape: frames.shape().to_vec(), dtype: "f32".into(), seed, label };
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer(&mut f, &header)?;
    f.write_all(b"\n")?;
    for v in frames.data() {
        f.write_all(&v.to_le_bytes())?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_sample(path: &Path) -> Result<(CacheHeader, Tensor<f32>)> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut line = String::new();
    r.read_line(&mut line)?;
    let header: CacheHeader = serde_json::from_str(line.trim_end())?;
    if header.dtype != "f32" {
        return Err(TurboError::Data(format!("unsupported dtype {}", header.dtype)));
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let n: usize = header.shape.iter().product();
    if bytes.len() != 4 * n {
        return Err(TurboError::Data(format!("{}: expected {} bytes of data, found {}", path.display(), 4 * n, bytes.len())));
    }
    let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    let t = Tensor::new(header.shape.clone(), data)?;
    Ok((header, t))
}
