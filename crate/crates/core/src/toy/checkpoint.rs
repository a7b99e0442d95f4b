//! Flat binary checkpoints: `u64` little-endian header length, a JSON header
//! (config, precision, names, shapes), then every tensor's elements in order
//! as little-endian floats.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::model::{ToyConfig, ToyModel};
use crate::error::ToyError;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: ToyConfig,
    pub precision: String,
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
}

fn io(e: std::io::Error) -> ToyError {
    ToyError::Checkpoint(e.to_string())
}

pub fn save<T: Real, W: Write>(model: &ToyModel<T>, mut w: W) -> Result<(), ToyError> {
    let header = Header {
        config: model.config.clone(),
        precision: T::NAME.to_string(),
        names: model.names.clone(),
        shapes: model.params.iter().map(|p| p.shape().to_vec()).collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| ToyError::Checkpoint(e.to_string()))?;
    w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    for p in &model.params {
        for &x in p.data() {
            match T::BYTES {
                4 => w.write_all(&(x.as_f64() as f32).to_le_bytes()),
                _ => w.write_all(&x.as_f64().to_le_bytes()),
            }
            .map_err(io)?;
        }
    }
    Ok(())
}

pub fn load<T: Real, R: Read>(mut r: R) -> Result<ToyModel<T>, ToyError> {
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(io)?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 1 << 24 {
        return Err(ToyError::Checkpoint(format!("header length {len} is implausible")));
    }
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(io)?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| ToyError::Checkpoint(e.to_string()))?;
    if header.precision != T::NAME {
        return Err(ToyError::Checkpoint(format!("stored as {}, requested {}", header.precision, T::NAME)));
    }
    if header.names.len() != header.shapes.len() {
        return Err(ToyError::Checkpoint("names and shapes differ in length".into()));
    }
    let mut params = Vec::with_capacity(header.shapes.len());
    for shape in &header.shapes {
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * T::BYTES];
        r.read_exact(&mut bytes).map_err(io)?;
        let data = bytes
            .chunks_exact(T::BYTES)
            .map(|c| match T::BYTES {
                4 => T::lit(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64),
                _ => T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))),
            })
            .collect();
        params.push(Tensor::new(shape, data)?);
    }
    let fresh = ToyModel::<T>::init(header.config.clone(), 0)?;
    if fresh.names != header.names || fresh.params.iter().zip(&params).any(|(a, b)| a.shape() != b.shape()) {
        return Err(ToyError::Checkpoint("tensor layout does not match the configuration".into()));
    }
    Ok(ToyModel { config: header.config, names: header.names, params })
}
