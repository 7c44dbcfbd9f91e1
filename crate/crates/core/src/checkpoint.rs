//! Binary checkpoint container.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic      8 bytes  "CCGCKPT\0"
//! version    u32      currently 1
//! config     u32 length + UTF-8 text (flat key = value form)
//! classes    u64      number of output classes
//! epochs     u64      completed epochs
//! step       u64      optimizer steps taken
//! tensors    u32 count, then per tensor:
//!   role     u8       0 = parameter, 1 = momentum buffer
//!   name     u32 length + UTF-8
//!   dtype    u8       1 = f64
//!   rank     u32, then rank × u64 dimensions
//!   data     product(dims) values, row-major
//! ```

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{CcgModel, ModelConfig};
use crate::optim::Sgd;

pub const MAGIC: &[u8; 8] = b"CCGCKPT\0";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;
const ROLE_PARAM: u8 = 0;
const ROLE_MOMENTUM: u8 = 1;

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub num_classes: usize,
    pub epochs_completed: usize,
    pub step: usize,
    pub params: Vec<(String, ArrayD<f64>)>,
    pub momentum: Vec<(String, ArrayD<f64>)>,
}

impl Checkpoint {
    pub fn capture(
        model: &CcgModel,
        optimizer: Option<&Sgd>,
        config: &TrainConfig,
        epochs_completed: usize,
        step: usize,
    ) -> Self {
        let params = model
            .store
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        let momentum = optimizer
            .map(|o| {
                model
                    .store
                    .iter()
                    .zip(o.buffers())
                    .map(|(p, b)| (p.name.clone(), b.clone()))
                    .collect()
            })
            .unwrap_or_default();
        Self {
            config: config.clone(),
            num_classes: model.config.num_classes,
            epochs_completed,
            step,
            params,
            momentum,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("partial");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            w.write_all(MAGIC)?;
            w.write_u32::<LE>(VERSION)?;
            write_str(&mut w, &self.config.to_text())?;
            w.write_u64::<LE>(self.num_classes as u64)?;
            w.write_u64::<LE>(self.epochs_completed as u64)?;
            w.write_u64::<LE>(self.step as u64)?;
            w.write_u32::<LE>((self.params.len() + self.momentum.len()) as u32)?;
            let tagged = self
                .params
                .iter()
                .map(|t| (ROLE_PARAM, t))
                .chain(self.momentum.iter().map(|t| (ROLE_MOMENTUM, t)));
            for (role, (name, value)) in tagged {
                w.write_u8(role)?;
                write_str(&mut w, name)?;
                w.write_u8(DTYPE_F64)?;
                w.write_u32::<LE>(value.ndim() as u32)?;
                for &d in value.shape() {
                    w.write_u64::<LE>(d as u64)?;
                }
                for &v in value.iter() {
                    w.write_f64::<LE>(v)?;
                }
            }
            w.flush()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(ckpt_err(format!("{} is not a checkpoint", path.display())));
        }
        let version = r.read_u32::<LE>()?;
        if version != VERSION {
            return Err(ckpt_err(format!(
                "unsupported checkpoint version {version} (this build reads version {VERSION})"
            )));
        }
        let config = TrainConfig::parse(&read_str(&mut r)?)?;
        let num_classes = r.read_u64::<LE>()? as usize;
        let epochs_completed = r.read_u64::<LE>()? as usize;
        let step = r.read_u64::<LE>()? as usize;
        let count = r.read_u32::<LE>()?;
        let mut params = Vec::new();
        let mut momentum = Vec::new();
        for _ in 0..count {
            let role = r.read_u8()?;
            let name = read_str(&mut r)?;
            let dtype = r.read_u8()?;
            if dtype != DTYPE_F64 {
                return Err(ckpt_err(format!(
                    "tensor {name}: unknown dtype tag {dtype}"
                )));
            }
            let rank = r.read_u32::<LE>()? as usize;
            let shape = (0..rank)
                .map(|_| r.read_u64::<LE>().map(|d| d as usize))
                .collect::<std::io::Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let mut data = vec![0.0; len];
            r.read_f64_into::<LE>(&mut data)?;
            let value =
                ArrayD::from_shape_vec(IxDyn(&shape), data).map_err(|e| ckpt_err(e.to_string()))?;
            match role {
                ROLE_PARAM => params.push((name, value)),
                ROLE_MOMENTUM => momentum.push((name, value)),
                other => return Err(ckpt_err(format!("tensor {name}: unknown role {other}"))),
            }
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(ckpt_err("trailing bytes after the last tensor"));
        }
        Ok(Self {
            config,
            num_classes,
            epochs_completed,
            step,
            params,
            momentum,
        })
    }

    /// Writes the stored parameters into `model`, which must have the same
    /// architecture and class count.
    pub fn load_into(&self, model: &mut CcgModel) -> Result<()> {
        if model.config.num_classes != self.num_classes {
            return Err(ckpt_err(format!(
                "checkpoint has {} classes, model has {}",
                self.num_classes, model.config.num_classes
            )));
        }
        if model.store.len() != self.params.len() {
            return Err(ckpt_err(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                model.store.len()
            )));
        }
        for (p, (name, value)) in model.store.iter_mut().zip(&self.params) {
            if &p.name != name || p.value.shape() != value.shape() {
                return Err(ckpt_err(format!(
                    "parameter {name} {:?} does not match model parameter {} {:?}",
                    value.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            p.value.assign(value);
        }
        Ok(())
    }

    /// Rebuilds the model (and optimizer state, when present).
    pub fn restore(&self) -> Result<(CcgModel, Sgd)> {
        let mut model = CcgModel::new(
            ModelConfig::from_train(&self.config, self.num_classes),
            self.config.seed,
        )?;
        self.load_into(&mut model)?;
        let mut opt = Sgd::new(&model.store, self.config.momentum, self.config.weight_decay);
        if !self.momentum.is_empty() {
            opt.set_buffers(self.momentum.iter().map(|(_, b)| b.clone()).collect())?;
        }
        Ok((model, opt))
    }
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_u32::<LE>(s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let len = r.read_u32::<LE>()? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| ckpt_err("non UTF-8 string"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(c: usize, seed: u64) -> (TrainConfig, CcgModel) {
        let cfg = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let m = CcgModel::new(ModelConfig::from_train(&cfg, c), seed).unwrap();
        (cfg, m)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let (cfg, m) = model(2, 3);
        let mut opt = Sgd::new(&m.store, 0.9, 1e-4);
        let bufs = m
            .store
            .iter()
            .map(|p| p.value.mapv(|v| v * 0.5 + 1e-300))
            .collect();
        opt.set_buffers(bufs).unwrap();
        let ck = Checkpoint::capture(&m, Some(&opt), &cfg, 4, 300);
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let (m2, opt2) = back.restore().unwrap();
        for (a, b) in m.store.iter().zip(m2.store.iter()) {
            assert!(a
                .value
                .iter()
                .zip(b.value.iter())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(opt2, opt);
    }

    #[test]
    fn mismatches_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let (cfg, m) = model(2, 0);
        Checkpoint::capture(&m, None, &cfg, 1, 1)
            .save(&path)
            .unwrap();
        let (_, mut other) = model(3, 0);
        assert!(Checkpoint::load(&path)
            .unwrap()
            .load_into(&mut other)
            .is_err());

        let mut bytes = fs::read(&path).unwrap();
        bytes[8] = 99;
        fs::write(&path, &bytes).unwrap();
        let err = Checkpoint::load(&path).unwrap_err().to_string();
        assert!(err.contains("version 99"), "{err}");
        assert!(matches!(
            Checkpoint::load(&dir.path().join("none")),
            Err(Error::MissingFile(_))
        ));
    }
}
