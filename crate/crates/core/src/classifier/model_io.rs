//! Model container.
//!
//! Layout (all little-endian):
//!
//! ```text
//! "AMAVA-MLP1"                      10-byte magic
//! mean[0] mean[1] std[0] std[1]     4 x f32
//! 6 x tensor: rows u32, cols u32, rows*cols x f32 (row-major)
//!     in the order W1 b1 W2 b2 W3 b3; biases are stored as rows x 1
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{Layer, MlpParams, Scaler, LAYER_DIMS};

pub const MODEL_MAGIC: &[u8; 10] = b"AMAVA-MLP1";

const TENSOR_NAMES: [&str; 6] = ["W1", "b1", "W2", "b2", "W3", "b3"];

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model io: {0}")]
    Io(#[from] io::Error),
    #[error("not a model file (bad magic)")]
    BadMagic,
    #[error("model file truncated while reading {0}")]
    Truncated(&'static str),
    #[error("tensor {tensor} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        tensor: &'static str,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("tensor {0} contains non-finite values")]
    NonFinite(&'static str),
    #[error("scaler std must be positive")]
    BadScaler,
    #[error("{0} unexpected trailing bytes")]
    TrailingBytes(usize),
}

fn expected_shapes() -> [(usize, usize); 6] {
    [
        (LAYER_DIMS[1], LAYER_DIMS[0]),
        (LAYER_DIMS[1], 1),
        (LAYER_DIMS[2], LAYER_DIMS[1]),
        (LAYER_DIMS[2], 1),
        (LAYER_DIMS[3], LAYER_DIMS[2]),
        (LAYER_DIMS[3], 1),
    ]
}

pub fn write_model(mut w: impl Write, params: &MlpParams, scaler: &Scaler) -> Result<(), ModelError> {
    w.write_all(MODEL_MAGIC)?;
    for v in scaler.mean.iter().chain(scaler.std.iter()) {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    for layer in &params.layers {
        write_tensor(&mut w, layer.rows, layer.cols, &layer.weights)?;
        write_tensor(&mut w, layer.rows, 1, &layer.bias)?;
    }
    Ok(())
}

fn write_tensor(w: &mut impl Write, rows: usize, cols: usize, data: &[f64]) -> Result<(), ModelError> {
    w.write_all(&(rows as u32).to_le_bytes())?;
    w.write_all(&(cols as u32).to_le_bytes())?;
    for v in data {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_model(mut r: impl Read) -> Result<(MlpParams, Scaler), ModelError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };

    let magic = cur.take(MODEL_MAGIC.len()).ok_or(ModelError::BadMagic)?;
    if magic != MODEL_MAGIC {
        return Err(ModelError::BadMagic);
    }
    let mut scaler_vals = [0.0f64; 4];
    for v in scaler_vals.iter_mut() {
        *v = cur.f32().ok_or(ModelError::Truncated("scaler"))? as f64;
    }
    let scaler = Scaler {
        mean: [scaler_vals[0], scaler_vals[1]],
        std: [scaler_vals[2], scaler_vals[3]],
    };
    if !scaler.std.iter().all(|s| *s > 0.0 && s.is_finite()) || !scaler.mean.iter().all(|m| m.is_finite()) {
        return Err(ModelError::BadScaler);
    }

    let mut tensors: Vec<Vec<f64>> = Vec::with_capacity(6);
    for (name, expected) in TENSOR_NAMES.into_iter().zip(expected_shapes()) {
        let rows = cur.u32().ok_or(ModelError::Truncated(name))? as usize;
        let cols = cur.u32().ok_or(ModelError::Truncated(name))? as usize;
        if (rows, cols) != expected {
            return Err(ModelError::ShapeMismatch {
                tensor: name,
                expected,
                found: (rows, cols),
            });
        }
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            let v = cur.f32().ok_or(ModelError::Truncated(name))?;
            if !v.is_finite() {
                return Err(ModelError::NonFinite(name));
            }
            data.push(v as f64);
        }
        tensors.push(data);
    }
    let rest = bytes.len() - cur.pos;
    if rest != 0 {
        return Err(ModelError::TrailingBytes(rest));
    }

    let mut it = tensors.into_iter();
    let mut layer = |rows: usize, cols: usize| Layer {
        rows,
        cols,
        weights: it.next().expect("six tensors"),
        bias: it.next().expect("six tensors"),
    };
    let params = MlpParams {
        layers: [
            layer(LAYER_DIMS[1], LAYER_DIMS[0]),
            layer(LAYER_DIMS[2], LAYER_DIMS[1]),
            layer(LAYER_DIMS[3], LAYER_DIMS[2]),
        ],
    };
    Ok((params, scaler))
}

/// Writes atomically: temp file in the same directory, then rename.
pub fn save_model(params: &MlpParams, scaler: &Scaler, path: &Path) -> Result<(), ModelError> {
    let mut buf = Vec::new();
    write_model(&mut buf, params, scaler)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &buf)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<(MlpParams, Scaler), ModelError> {
    read_model(fs::File::open(path)?)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn f32(&mut self) -> Option<f32> {
        self.take(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()))
    }
}
