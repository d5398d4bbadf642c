//! Checkpoint files.
//!
//! Layout (little-endian): magic `MLRN`, version u16, tensor count u32;
//! per tensor a u16 name length and UTF-8 name, rank u8, one u32 per
//! dimension and the `f32` values. Optimizer moments follow the parameters
//! as `opt/m/<name>` and `opt/v/<name>`. Integer counters and the model
//! config are stored bit-exactly in `f32` slots under `opt/` and `meta/`.

use std::fs;
use std::path::Path;

use super::config::{parse_model, render_model_config};
use crate::error::{Error, Result};
use crate::model::{check_params, ModelConfig};
use crate::optim::OptimizerState;
use crate::tensor::{ParamSet, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MLRN";
pub const CHECKPOINT_VERSION: u16 = 1;

const STEP: &str = "opt/t";
const MODEL: &str = "meta/model";
const PROGRESS: &str = "meta/progress";

/// Where training stands when a checkpoint is written.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Progress {
    /// Completed epochs.
    pub epoch: u64,
    /// Completed optimizer iterations.
    pub iteration: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub params: ParamSet<f32>,
    pub optimizer: Option<OptimizerState<f32>>,
    pub progress: Progress,
}

fn u64_slots(v: u64) -> [f32; 2] {
    [f32::from_bits(v as u32), f32::from_bits((v >> 32) as u32)]
}

fn slots_u64(s: &[f32]) -> u64 {
    s[0].to_bits() as u64 | ((s[1].to_bits() as u64) << 32)
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], values: &[f32]) -> Result<()> {
    let len = u16::try_from(name.len())
        .map_err(|_| Error::Format(format!("tensor name too long: {name}")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(u8::try_from(shape.len()).map_err(|_| Error::Format("tensor rank too large".into()))?);
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| Error::Format("tensor dimension too large".into()))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn tensor(&mut self) -> Result<(String, Vec<usize>, Vec<f32>)> {
        let len = self.u16()? as usize;
        let name = std::str::from_utf8(self.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = self.u8()? as usize;
        let shape = (0..rank)
            .map(|_| self.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("tensor {name} too large")))?;
        let raw = self.take(
            numel
                .checked_mul(4)
                .ok_or_else(|| Error::Format("tensor too large".into()))?,
        )?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_bits(u32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        Ok((name, shape, values))
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        check_params(&self.params, &self.model)?;
        let mut entries: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
        for (name, t) in self.params.iter() {
            entries.push((name.to_string(), t.shape().to_vec(), t.data().to_vec()));
        }
        if let Some(opt) = &self.optimizer {
            if opt.m.len() != self.params.len() || opt.v.len() != self.params.len() {
                return Err(Error::Format(
                    "optimizer state does not match the parameters".into(),
                ));
            }
            for (prefix, moments) in [("opt/m/", &opt.m), ("opt/v/", &opt.v)] {
                for (i, t) in moments.iter().enumerate() {
                    let name = format!("{prefix}{}", self.params.name(i));
                    entries.push((name, t.shape().to_vec(), t.data().to_vec()));
                }
            }
            entries.push((STEP.into(), vec![2], u64_slots(opt.t).to_vec()));
        }
        let model: Vec<f32> = render_model_config(&self.model)
            .bytes()
            .map(f32::from)
            .collect();
        entries.push((MODEL.into(), vec![model.len()], model));
        let mut progress = u64_slots(self.progress.epoch).to_vec();
        progress.extend(u64_slots(self.progress.iteration));
        entries.push((PROGRESS.into(), vec![4], progress));

        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (name, shape, values) in &entries {
            put_tensor(&mut out, name, shape, values)?;
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let count = r.u32()?;
        let mut params = ParamSet::new();
        let (mut m, mut v) = (Vec::new(), Vec::new());
        let mut step = None;
        let mut model = None;
        let mut progress = None;
        for _ in 0..count {
            let (name, shape, values) = r.tensor()?;
            if let Some(rest) = name.strip_prefix("opt/m/") {
                m.push((rest.to_string(), Tensor::new(&shape, values)?));
            } else if let Some(rest) = name.strip_prefix("opt/v/") {
                v.push((rest.to_string(), Tensor::new(&shape, values)?));
            } else if name == STEP && values.len() == 2 {
                step = Some(slots_u64(&values));
            } else if name == MODEL {
                let text: Vec<u8> = values.iter().map(|&b| b as u8).collect();
                let text = String::from_utf8(text)
                    .map_err(|_| Error::Format("model config is not UTF-8".into()))?;
                model = Some(parse_model(&text)?);
            } else if name == PROGRESS && values.len() == 4 {
                progress = Some(Progress {
                    epoch: slots_u64(&values[..2]),
                    iteration: slots_u64(&values[2..]),
                });
            } else if name.starts_with("opt/") || name.starts_with("meta/") {
                return Err(Error::Format(format!("unexpected checkpoint entry {name}")));
            } else {
                params.push(name, Tensor::new(&shape, values)?)?;
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        let model =
            model.ok_or_else(|| Error::Format("checkpoint lacks the model config".into()))?;
        check_params(&params, &model)?;
        let optimizer = match step {
            None if m.is_empty() && v.is_empty() => None,
            None => {
                return Err(Error::Format(
                    "optimizer moments without a step counter".into(),
                ))
            }
            Some(t) => {
                let ordered = |list: Vec<(String, Tensor<f32>)>| -> Result<Vec<Tensor<f32>>> {
                    if list.len() != params.len() {
                        return Err(Error::Format(
                            "optimizer moments do not cover every parameter".into(),
                        ));
                    }
                    list.into_iter()
                        .enumerate()
                        .map(|(i, (name, t))| {
                            if name == params.name(i) && t.shape() == params.tensor(i).shape() {
                                Ok(t)
                            } else {
                                Err(Error::Format(format!(
                                    "optimizer moment {name} out of place"
                                )))
                            }
                        })
                        .collect()
                };
                Some(OptimizerState {
                    m: ordered(m)?,
                    v: ordered(v)?,
                    t,
                })
            }
        };
        Ok(Checkpoint {
            model,
            params,
            optimizer,
            progress: progress.unwrap_or_default(),
        })
    }

    /// Writes through a temporary file so a crash never leaves a partial
    /// checkpoint behind.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.encode()?;
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn sample() -> Checkpoint {
        let model = ModelConfig::tiny();
        let params = init_params(&model, 4).unwrap();
        let mut opt = OptimizerState::new(&params);
        opt.t = (7u64 << 32) | 0x7fc0_0001;
        opt.m[0].data_mut()[0] = -0.25;
        opt.v[3].data_mut()[1] = 1e-30;
        Checkpoint {
            model,
            params,
            optimizer: Some(opt),
            progress: Progress {
                epoch: 3,
                iteration: u64::MAX - 1,
            },
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let bytes = ck.encode().unwrap();
        assert_eq!(&bytes[..4], b"MLRN");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.encode().unwrap(), bytes);
    }

    #[test]
    fn optimizer_state_is_optional() {
        let mut ck = sample();
        ck.optimizer = None;
        let back = Checkpoint::decode(&ck.encode().unwrap()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn rejects_damage() {
        let bytes = sample().encode().unwrap();
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::decode(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::decode(&long).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let ck = sample();
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }
}
