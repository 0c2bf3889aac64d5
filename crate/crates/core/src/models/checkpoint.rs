//! Binary model checkpoints.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! magic "CSIPCKPT" | version | family id (len + utf-8) | header JSON (len + utf-8)
//! tensor count | per tensor: ndim, dims..., f32 data
//! ```
//!
//! Neural tensors follow parameter declaration order. The autoregressive
//! baseline stores its coefficients as `[order, dim, dim]` and the intercept
//! as `[dim]`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Family, MarModel, ModelBundle, ModelConfig, NeuralModel};
use crate::binio::{get_f32s, get_str, get_u32, put_f32, put_str, put_u32};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CSIPCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    #[serde(default)]
    ridge: bool,
}

pub(crate) fn put_tensor<W: Write>(w: &mut W, t: &Tensor<f32>) -> Result<()> {
    put_u32(w, t.ndim())?;
    for &d in t.shape() {
        put_u32(w, d)?;
    }
    for &v in t.data() {
        put_f32(w, v)?;
    }
    Ok(())
}

pub(crate) fn get_tensor<R: Read>(r: &mut R) -> Result<Tensor<f32>> {
    let nd = get_u32(r)?;
    if nd > 8 {
        return Err(Error::Format(format!("tensor rank {nd} is implausible")));
    }
    let shape = (0..nd).map(|_| get_u32(r)).collect::<Result<Vec<_>>>()?;
    let n: usize = shape.iter().product();
    Tensor::new(&shape, get_f32s(r, n)?)
}

pub fn write_checkpoint<W: Write>(w: &mut W, model: &ModelBundle) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    put_u32(w, CHECKPOINT_VERSION as usize)?;
    put_str(w, model.family().id())?;
    let ridge = matches!(model, ModelBundle::Mar(m) if m.ridge);
    put_str(w, &serde_json::to_string(&Header { config: model.config(), ridge })?)?;
    match model {
        ModelBundle::Neural(m) => {
            put_u32(w, m.params.len())?;
            for t in m.params.tensors() {
                put_tensor(w, t)?;
            }
        }
        ModelBundle::Mar(m) => {
            put_u32(w, 2)?;
            let mut coef = Vec::with_capacity(m.order * m.dim * m.dim);
            for a in &m.coefficients {
                coef.extend(a.data().iter().map(|&v| v as f32));
            }
            put_tensor(w, &Tensor::new(&[m.order, m.dim, m.dim], coef)?)?;
            let c = m.intercept.iter().map(|&v| v as f32).collect();
            put_tensor(w, &Tensor::new(&[m.dim], c)?)?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<ModelBundle> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = get_u32(r)?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let family: Family = get_str(r, 64)?.parse()?;
    let header: Header = serde_json::from_str(&get_str(r, 1 << 16)?)?;
    if header.config.family() != family {
        return Err(Error::Format(format!(
            "family tag {family} disagrees with config ({})",
            header.config.family()
        )));
    }
    let count = get_u32(r)?;
    let tensors = (0..count).map(|_| get_tensor(r)).collect::<Result<Vec<_>>>()?;
    match header.config {
        ModelConfig::Mar(c) => {
            let [coef, intercept]: [Tensor<f32>; 2] = tensors
                .try_into()
                .map_err(|_| Error::Format("autoregressive checkpoint needs 2 tensors".into()))?;
            if coef.shape() != [c.order, c.dim, c.dim] || intercept.shape() != [c.dim] {
                return Err(Error::Format("autoregressive tensor shapes disagree with config".into()));
            }
            let per = c.dim * c.dim;
            let coefficients = (0..c.order)
                .map(|k| Tensor::from_fn(&[c.dim, c.dim], |i| coef.data()[k * per + i] as f64))
                .collect();
            Ok(ModelBundle::Mar(MarModel {
                order: c.order,
                dim: c.dim,
                coefficients,
                intercept: intercept.data().iter().map(|&v| v as f64).collect(),
                ridge: header.ridge,
            }))
        }
        config => {
            let mut m = NeuralModel::<f32>::new(config, 0)?;
            m.params.load(tensors)?;
            Ok(ModelBundle::Neural(m))
        }
    }
}

pub fn save_checkpoint(path: &Path, model: &ModelBundle) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, model)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelBundle> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}
