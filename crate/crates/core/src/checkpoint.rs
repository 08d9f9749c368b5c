//! Self-describing checkpoints: `params.bin` with named little-endian f32
//! arrays and a `manifest.json` with configuration and provenance of the run.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::FourierBasis;
use crate::model::{Model, ModelConfig};
use crate::tape::Mat;
use crate::training::TrainConfig;

pub const FORMAT_VERSION: u32 = 1;
pub const PARAMS_FILE: &str = "params.bin";
pub const MANIFEST_FILE: &str = "manifest.json";
const MAGIC: &[u8; 4] = b"MVSG";
pub const BASIS_3D: &str = "basis.3d";
pub const BASIS_2D: &str = "basis.2d";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub step: usize,
    pub seed: u64,
    pub arrays: Vec<String>,
}

/// One named array as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn write_arrays(w: &mut impl Write, arrays: &[NamedArray]) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(arrays.len() as u32).to_le_bytes())?;
    for a in arrays {
        w.write_all(&(a.name.len() as u32).to_le_bytes())?;
        w.write_all(a.name.as_bytes())?;
        w.write_all(&(a.shape.len() as u32).to_le_bytes())?;
        for &d in &a.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in &a.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn take<'a>(buf: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if buf.len() < n {
        return Err(Error::Load {
            file: PARAMS_FILE.into(),
            message: "truncated".into(),
        });
    }
    let (head, tail) = buf.split_at(n);
    *buf = tail;
    Ok(head)
}

fn u32_le(buf: &mut &[u8]) -> Result<u32> {
    Ok(u32::from_le_bytes(take(buf, 4)?.try_into().unwrap()))
}

pub fn read_arrays(bytes: &[u8]) -> Result<Vec<NamedArray>> {
    let bad = |message: String| Error::Load {
        file: PARAMS_FILE.into(),
        message,
    };
    let mut buf = bytes;
    if take(&mut buf, 4)? != MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = u32_le(&mut buf)?;
    if version != FORMAT_VERSION {
        return Err(bad(format!("format version {version}, expected {FORMAT_VERSION}")));
    }
    let count = u32_le(&mut buf)? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = u32_le(&mut buf)? as usize;
        let name = String::from_utf8(take(&mut buf, len)?.to_vec()).map_err(|_| bad("non-utf8 array name".into()))?;
        let ndim = u32_le(&mut buf)? as usize;
        let shape = (0..ndim)
            .map(|_| Ok(u64::from_le_bytes(take(&mut buf, 8)?.try_into().unwrap()) as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad(format!("{name}: shape overflow")))?;
        let raw = take(&mut buf, n.checked_mul(4).ok_or_else(|| bad(format!("{name}: shape overflow")))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        out.push(NamedArray { name, shape, data });
    }
    if !buf.is_empty() {
        return Err(bad(format!("{} trailing bytes", buf.len())));
    }
    Ok(out)
}

fn model_arrays(model: &Model) -> Vec<NamedArray> {
    let mut arrays: Vec<NamedArray> = model
        .params
        .iter()
        .map(|(name, m)| NamedArray {
            name: name.to_string(),
            shape: m.shape().to_vec(),
            data: m.iter().map(|&v| v as f32).collect(),
        })
        .collect();
    for (name, b) in [(BASIS_3D, &model.basis3), (BASIS_2D, &model.basis2)] {
        arrays.push(NamedArray {
            name: name.into(),
            shape: vec![b.input_dim(), b.k()],
            data: b.matrix().iter().map(|&v| v as f32).collect(),
        });
    }
    arrays
}

/// Write `params.bin` and `manifest.json` into `dir`, creating it.
pub fn save_checkpoint(dir: &Path, model: &Model, train: Option<&TrainConfig>, step: usize, seed: u64) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let arrays = model_arrays(model);
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        model: model.config.clone(),
        train: train.cloned(),
        step,
        seed,
        arrays: arrays.iter().map(|a| a.name.clone()).collect(),
    };
    let mut bytes = Vec::new();
    write_arrays(&mut bytes, &arrays).expect("writing to a Vec cannot fail");
    let params = dir.join(PARAMS_FILE);
    fs::write(&params, bytes).map_err(|e| Error::io(&params, e))?;
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::Load {
        file: path.display().to_string(),
        message: e.to_string(),
    })?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Load {
        file: path.display().to_string(),
        message: e.to_string(),
    })?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Load {
            file: path.display().to_string(),
            message: format!("format version {}, expected {FORMAT_VERSION}", m.format_version),
        });
    }
    Ok(m)
}

/// Load a checkpoint; every array named by the model layout must be present
/// with the expected shape.
pub fn load_checkpoint(dir: &Path) -> Result<(Model, Manifest)> {
    let manifest = read_manifest(dir)?;
    let path = dir.join(PARAMS_FILE);
    let mut bytes = Vec::new();
    fs::File::open(&path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::Load {
            file: path.display().to_string(),
            message: e.to_string(),
        })?;
    let arrays = read_arrays(&bytes)?;
    let mut model = Model::new(manifest.model.clone(), 0)?;
    let bad = |message: String| Error::Load {
        file: path.display().to_string(),
        message,
    };
    let mut seen = 0usize;
    for a in &arrays {
        let as_f64 = || a.data.iter().map(|&v| v as f64).collect::<Vec<_>>();
        match a.name.as_str() {
            BASIS_3D | BASIS_2D => {
                let b = if a.name == BASIS_3D { &mut model.basis3 } else { &mut model.basis2 };
                if a.shape != [b.input_dim(), b.k()] {
                    return Err(bad(format!("{}: shape {:?}", a.name, a.shape)));
                }
                *b = FourierBasis::from_matrix(b.input_dim(), b.k(), as_f64(), b.seed())?;
            }
            name => {
                if model.params.id(name).is_none() {
                    return Err(bad(format!("unexpected array {name}")));
                }
                let slot = model.params.get_mut(name);
                if a.shape != slot.shape() {
                    return Err(bad(format!("{name}: shape {:?}, expected {:?}", a.shape, slot.shape())));
                }
                *slot = Mat::from_shape_vec((a.shape[0], a.shape[1]), as_f64()).expect("shape checked");
                seen += 1;
            }
        }
    }
    if seen != model.params.len() {
        return Err(bad(format!("{} of {} parameter arrays present", seen, model.params.len())));
    }
    Ok((model, manifest))
}
