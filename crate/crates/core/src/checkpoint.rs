//! Versioned binary checkpoints of named tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "HVCK"
//! version u32      currently 1
//! count   u32      number of entries
//! entry:  name_len u32 | name utf-8 bytes
//!         dtype    u8  (0 = f32, 1 = f64)
//!         rank     u32 | extent u32 per axis
//!         payload  little-endian scalars, row-major
//! ```
//!
//! A training checkpoint stores `param/<name>` for every trainable tensor,
//! `bn/<i>/mean` and `bn/<i>/var` for the running statistics, `ema/<name>`
//! for the shadow weights, and the optimizer accumulators under `opt/...`.

use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::Optimizer;
use crate::tensor::Tensor;
use crate::trainer::EmaState;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"HVCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorEntry {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub entries: Vec<(String, TensorEntry)>,
}

impl Checkpoint {
    pub fn push_f32(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.entries.push((name.into(), TensorEntry::F32(t)));
    }

    pub fn get(&self, name: &str) -> Option<&TensorEntry> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_f32(&self, name: &str) -> Option<Tensor<f32>> {
        match self.get(name)? {
            TensorEntry::F32(t) => Some(t.clone()),
            TensorEntry::F64(t) => Some(t.cast::<f32>()),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, entry) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            match entry {
                TensorEntry::F32(t) => {
                    w.write_all(&[0u8])?;
                    write_shape(&mut w, t.shape())?;
                    for &v in t.data() {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
                TensorEntry::F64(t) => {
                    w.write_all(&[1u8])?;
                    write_shape(&mut w, t.shape())?;
                    for &v in t.data() {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::format(format!(
                "bad checkpoint magic in {}",
                path.display()
            )));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let count = read_u32(&mut r)? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::corrupt("non-utf8 tensor name in checkpoint"))?;
            let mut dtype = [0u8; 1];
            r.read_exact(&mut dtype)?;
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(&mut r)? as usize);
            }
            let n: usize = shape.iter().product();
            let entry = match dtype[0] {
                0 => {
                    let mut data = Vec::with_capacity(n);
                    let mut b = [0u8; 4];
                    for _ in 0..n {
                        r.read_exact(&mut b)?;
                        data.push(f32::from_le_bytes(b));
                    }
                    TensorEntry::F32(Tensor::new(shape, data)?)
                }
                1 => {
                    let mut data = Vec::with_capacity(n);
                    let mut b = [0u8; 8];
                    for _ in 0..n {
                        r.read_exact(&mut b)?;
                        data.push(f64::from_le_bytes(b));
                    }
                    TensorEntry::F64(Tensor::new(shape, data)?)
                }
                other => {
                    return Err(Error::corrupt(format!(
                        "unknown dtype tag {other} in checkpoint"
                    )))
                }
            };
            entries.push((name, entry));
        }
        Ok(Checkpoint { entries })
    }
}

fn write_shape(w: &mut impl Write, shape: &[usize]) -> Result<()> {
    w.write_all(&(shape.len() as u32).to_le_bytes())?;
    for &e in shape {
        w.write_all(&(e as u32).to_le_bytes())?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Which weight set to restore from a training checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightSource {
    Raw,
    Ema,
}

/// Bundle the full training state of an f32 model into a checkpoint.
pub fn training_checkpoint(
    model: &Model<f32>,
    ema: &EmaState<f32>,
    optimizer: &Optimizer<f32>,
) -> Checkpoint {
    let mut ckpt = Checkpoint::default();
    for (name, p) in model.param_names().iter().zip(&model.params) {
        ckpt.push_f32(format!("param/{name}"), p.clone());
    }
    for (i, bn) in model.bn_states.iter().enumerate() {
        ckpt.push_f32(format!("bn/{i}/mean"), bn.mean.clone());
        ckpt.push_f32(format!("bn/{i}/var"), bn.var.clone());
    }
    for (name, s) in model.param_names().iter().zip(&ema.shadow) {
        ckpt.push_f32(format!("ema/{name}"), s.clone());
    }
    for (name, t) in optimizer.export_state(model.param_names()) {
        ckpt.push_f32(name, t);
    }
    ckpt
}

/// Restore parameters (raw or EMA) and running statistics into `model`.
pub fn load_weights(model: &mut Model<f32>, ckpt: &Checkpoint, source: WeightSource) -> Result<()> {
    let prefix = match source {
        WeightSource::Raw => "param",
        WeightSource::Ema => "ema",
    };
    let names: Vec<String> = model.param_names().to_vec();
    for (i, name) in names.iter().enumerate() {
        let key = format!("{prefix}/{name}");
        let t = ckpt
            .get_f32(&key)
            .ok_or_else(|| Error::corrupt(format!("checkpoint missing {key}")))?;
        if t.shape() != model.params[i].shape() {
            return Err(Error::corrupt(format!(
                "checkpoint tensor {key} has shape {:?}, model wants {:?}",
                t.shape(),
                model.params[i].shape()
            )));
        }
        model.params[i] = t;
    }
    for i in 0..model.bn_states.len() {
        let mean = ckpt
            .get_f32(&format!("bn/{i}/mean"))
            .ok_or_else(|| Error::corrupt(format!("checkpoint missing bn/{i}/mean")))?;
        let var = ckpt
            .get_f32(&format!("bn/{i}/var"))
            .ok_or_else(|| Error::corrupt(format!("checkpoint missing bn/{i}/var")))?;
        model.bn_states[i].mean = mean;
        model.bn_states[i].var = var;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capsule::{CapsMethod, HeadKind};
    use crate::data::synth_dataset;
    use crate::model::{HeadSpec, ModelSpec, StemKind};
    use crate::optim::{preset, Preset};
    use crate::trainer::{evaluate, train, TimingMode, TrainOptions};
    use tempfile::tempdir;

    #[test]
    fn container_round_trip() {
        let mut ckpt = Checkpoint::default();
        ckpt.push_f32("a/w", Tensor::new(vec![2, 2], vec![1.0, -2.5, 3.25, 0.0]).unwrap());
        ckpt.entries.push((
            "b/v".to_string(),
            TensorEntry::F64(Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap()),
        ));
        let dir = tempdir().unwrap();
        let path = dir.path().join("state.ckpt");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.entries, ckpt.entries);
    }

    #[test]
    fn reloaded_weights_evaluate_identically() {
        let spec = ModelSpec {
            input: (20, 20, 1),
            stem: StemKind::Tiny,
            head: HeadSpec {
                kind: HeadKind::Hvc,
                method: CapsMethod::B,
                capsule_dim: 0,
                capsule_dim_out: 0,
            },
            classes: 2,
        };
        let mut model = Model::<f32>::new(spec, 1).unwrap();
        let ds = synth_dataset(2, 16, 20, 20, 1).unwrap();
        let opts = TrainOptions {
            epochs: 1,
            batch_size: 8,
            timing: TimingMode::Fixed,
            ..Default::default()
        };
        let out = train(&mut model, &preset(Preset::O3), &ds, &ds, &opts).unwrap();
        let optimizer = Optimizer::<f32>::new(preset(Preset::O3), &model.param_shapes());
        let ckpt = training_checkpoint(&model, &out.ema, &optimizer);

        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        ckpt.save(&path).unwrap();

        let acc_before = evaluate(&model, &ds, 8).unwrap();
        let mut fresh = Model::<f32>::new(spec, 999).unwrap();
        load_weights(&mut fresh, &Checkpoint::load(&path).unwrap(), WeightSource::Raw).unwrap();
        let acc_after = evaluate(&fresh, &ds, 8).unwrap();
        assert_eq!(acc_before, acc_after);
        assert_eq!(fresh.params, model.params);
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Format(_))));
    }
}
