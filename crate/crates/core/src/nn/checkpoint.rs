//! Checkpoint format: the magic line `TRM1`, one line of JSON describing the
//! layers, input shape, seed and parameter block shapes, then every parameter
//! tensor as raw little-endian `f64` in layer order.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{LayerSpec, ModelState, NnError, Result};
use crate::tensor::Tensor;

const MAGIC: &str = "TRM1";

#[derive(Serialize, Deserialize)]
struct Header {
    input_shape: Vec<usize>,
    seed: u64,
    layers: Vec<LayerSpec>,
    /// Shapes of each layer's parameter blocks, in storage order.
    blocks: Vec<Vec<Vec<usize>>>,
}

pub fn write_checkpoint<W: Write>(model: &ModelState, mut out: W) -> Result<()> {
    let header = Header {
        input_shape: model.input_shape.clone(),
        seed: model.seed,
        layers: model.layers.clone(),
        blocks: model
            .params
            .iter()
            .map(|p| p.iter().map(|t| t.shape().to_vec()).collect())
            .collect(),
    };
    let json = serde_json::to_string(&header).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    writeln!(out, "{MAGIC}")?;
    writeln!(out, "{json}")?;
    for t in model.params.iter().flatten() {
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: BufRead>(mut input: R) -> Result<ModelState> {
    let mut line = String::new();
    input.read_line(&mut line)?;
    if line.trim_end() != MAGIC {
        return Err(NnError::Checkpoint(format!("bad magic {:?}, expected {MAGIC}", line.trim_end())));
    }
    line.clear();
    input.read_line(&mut line)?;
    let header: Header = serde_json::from_str(line.trim_end()).map_err(|e| NnError::Checkpoint(format!("header: {e}")))?;
    if header.blocks.len() != header.layers.len() {
        return Err(NnError::Checkpoint("one block list per layer expected".into()));
    }
    let mut params = Vec::with_capacity(header.blocks.len());
    let mut buf = [0u8; 8];
    for shapes in &header.blocks {
        let mut layer = Vec::with_capacity(shapes.len());
        for shape in shapes {
            let len: usize = shape.iter().product();
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                input
                    .read_exact(&mut buf)
                    .map_err(|e| NnError::Checkpoint(format!("truncated parameter data: {e}")))?;
                data.push(f64::from_le_bytes(buf));
            }
            layer.push(Tensor::new(shape.clone(), data).map_err(|e| NnError::Checkpoint(e.to_string()))?);
        }
        params.push(layer);
    }
    if input.read(&mut buf)? != 0 {
        return Err(NnError::Checkpoint("trailing bytes after parameter data".into()));
    }
    ModelState::from_parts(header.layers, header.input_shape, header.seed, params)
}
