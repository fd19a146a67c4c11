//! TRMZ model container.
//!
//! ```text
//! "TRMZ"                 4 bytes
//! version                u8 (= 1)
//! descriptor text        u32 LE byte length + UTF-8 (key=value lines,
//!                        architecture followed by meta.* training lines)
//! tensor count           u32 LE, number of parameterized layers
//! per layer:
//!   layer position       u32 LE
//!   weight               u32 ndim (= 2), u32 rows, u32 cols, f32 LE data
//!   bias                 u32 ndim (= 1), u32 len, f32 LE data
//! ```

use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::matcore::Matrix;
use crate::zoo::model::{TrainedModel, TrainingMeta};
use crate::zoo::network::{LayerParams, NetworkDescriptor};

pub const TRMZ_MAGIC: &[u8; 4] = b"TRMZ";
pub const TRMZ_VERSION: u8 = 1;

fn meta_text(meta: &TrainingMeta) -> String {
    let history: Vec<String> = meta.loss_history.iter().map(|v| v.to_string()).collect();
    format!(
        "meta.epochs={}\nmeta.learning_rate={}\nmeta.batch_size={}\nmeta.subsample={}\n\
         meta.train_accuracy={}\nmeta.test_accuracy={}\nmeta.loss_history={}\n",
        meta.epochs,
        meta.learning_rate,
        meta.batch_size,
        meta.subsample,
        meta.train_accuracy,
        meta.test_accuracy,
        history.join(",")
    )
}

fn parse_meta(text: &str) -> Result<TrainingMeta> {
    let mut meta = TrainingMeta::default();
    for line in text.lines() {
        let Some((k, v)) = line.split_once('=') else { continue };
        let bad = || Error::Config(format!("bad training metadata '{line}'"));
        let f = |s: &str| s.parse::<f64>().map_err(|_| bad());
        let u = |s: &str| s.parse::<usize>().map_err(|_| bad());
        match k {
            "meta.epochs" => meta.epochs = u(v)?,
            "meta.learning_rate" => meta.learning_rate = f(v)?,
            "meta.batch_size" => meta.batch_size = u(v)?,
            "meta.subsample" => meta.subsample = f(v)?,
            "meta.train_accuracy" => meta.train_accuracy = f(v)?,
            "meta.test_accuracy" => meta.test_accuracy = f(v)?,
            "meta.loss_history" if !v.is_empty() => {
                meta.loss_history = v.split(',').map(f).collect::<Result<_>>()?;
            }
            _ => {}
        }
    }
    Ok(meta)
}

pub fn encode_model(model: &TrainedModel) -> Result<Vec<u8>> {
    let mut w = Writer::new();
    w.bytes(TRMZ_MAGIC);
    w.u8(TRMZ_VERSION);
    let text = model.descriptor().to_text() + &meta_text(model.meta());
    w.string(&text)?;
    let layers: Vec<(usize, &LayerParams)> = model
        .params()
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.as_ref().map(|p| (i, p)))
        .collect();
    w.len_u32(layers.len())?;
    for (pos, p) in layers {
        w.len_u32(pos)?;
        w.u32(2);
        w.len_u32(p.weight.rows())?;
        w.len_u32(p.weight.cols())?;
        w.f32s(p.weight.data());
        w.u32(1);
        w.len_u32(p.bias.len())?;
        w.f32s(&p.bias);
    }
    Ok(w.buf)
}

pub fn decode_model(bytes: &[u8]) -> Result<TrainedModel> {
    let mut r = Reader::new(bytes);
    r.expect_magic(TRMZ_MAGIC)?;
    let at = r.offset();
    let version = r.u8("version")?;
    if version != TRMZ_VERSION {
        return Err(Error::format(at, format!("unsupported version {version}")));
    }
    let text = r.string("descriptor")?;
    let descriptor = NetworkDescriptor::from_text(&text)?;
    let meta = parse_meta(&text)?;
    let mut params: Vec<Option<LayerParams>> = vec![None; descriptor.layers().len()];
    let count = r.u32("tensor count")? as usize;
    for _ in 0..count {
        let at = r.offset();
        let pos = r.u32("layer position")? as usize;
        if pos >= params.len() || params[pos].is_some() {
            return Err(Error::format(at, format!("invalid layer position {pos}")));
        }
        let at = r.offset();
        if r.u32("weight ndim")? != 2 {
            return Err(Error::format(at, "weight tensor must be 2-D"));
        }
        let rows = r.u32("weight rows")? as usize;
        let cols = r.u32("weight cols")? as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::format(at, "weight dimensions overflow"))?;
        let data = r.f32s(n, "weight data")?;
        let weight = Matrix::new(rows, cols, data).map_err(|e| Error::format(at, e.to_string()))?;
        let at = r.offset();
        if r.u32("bias ndim")? != 1 {
            return Err(Error::format(at, "bias tensor must be 1-D"));
        }
        let len = r.u32("bias length")? as usize;
        let bias = r.f32s(len, "bias data")?;
        params[pos] = Some(LayerParams { weight, bias });
    }
    r.finish()?;
    TrainedModel::from_parts(descriptor, params, meta)
}

pub fn save_model(model: &TrainedModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_model(model)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<TrainedModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}
