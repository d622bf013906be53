//! Binary model container.
//!
//! Layout (all integers little-endian): `b"APSL"`, `u32` version, `u32` count
//! of config words followed by that many `u64` config words, `u32` tensor
//! count, then per tensor `u32` name length, UTF-8 name, `u32` rank, `u64`
//! dims, `f64` data. Besides the parameters the file carries the Laplacian
//! eigenpairs and the fitted scaler so a reload needs no graph or data pass.

use std::io::{Read, Write};
use std::path::Path;

use crate::data::MinMaxScaler;
use crate::error::{Error, Result};
use crate::graph::LaplacianEmbedding;
use crate::model::{ApsLstm, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"APSL";
const VERSION: u32 = 1;
const CONFIG_FIELDS: [&str; 14] = [
    "n_stations",
    "input_len",
    "horizon",
    "blocks",
    "top_k",
    "hidden",
    "psa_kernel_h",
    "psa_kernel_w",
    "ssa_kernel",
    "embed_dim",
    "disable_psa",
    "disable_ssa",
    "differentiable_agg_weights",
    "seed",
];

fn config_words(c: &ModelConfig, seed: u64) -> [u64; 14] {
    [
        c.n_stations as u64,
        c.input_len as u64,
        c.horizon as u64,
        c.blocks as u64,
        c.top_k as u64,
        c.hidden as u64,
        c.psa_kernel.0 as u64,
        c.psa_kernel.1 as u64,
        c.ssa_kernel as u64,
        c.embed_dim as u64,
        c.disable_psa as u64,
        c.disable_ssa as u64,
        c.differentiable_agg_weights as u64,
        seed,
    ]
}

fn config_from_words(w: &[u64]) -> (ModelConfig, u64) {
    let u = |i: usize| w[i] as usize;
    (
        ModelConfig {
            n_stations: u(0),
            input_len: u(1),
            horizon: u(2),
            blocks: u(3),
            top_k: u(4),
            hidden: u(5),
            psa_kernel: (u(6), u(7)),
            ssa_kernel: u(8),
            embed_dim: u(9),
            disable_psa: w[10] != 0,
            disable_ssa: w[11] != 0,
            differentiable_agg_weights: w[12] != 0,
        },
        w[13],
    )
}

/// A trained model plus the scaler it was trained against.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ApsLstm,
    pub scaler: Option<MinMaxScaler>,
}

fn put_tensor(buf: &mut Vec<u8>, name: &str, t: &Tensor) {
    buf.extend((name.len() as u32).to_le_bytes());
    buf.extend(name.as_bytes());
    buf.extend((t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend((d as u64).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend(v.to_le_bytes());
    }
}

pub fn to_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let m = &ckpt.model;
    let mut tensors: Vec<(String, Tensor)> =
        m.params().iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    let lap = m.laplacian();
    if let Some(v) = &lap.eigvecs {
        tensors.push(("laplacian.eigvals".into(), Tensor::from_vec(lap.eigvals.clone())));
        tensors.push(("laplacian.eigvecs".into(), v.clone()));
    }
    if let Some(s) = &ckpt.scaler {
        tensors.push(("scaler.min".into(), Tensor::from_vec(s.min()?.to_vec())));
        tensors.push(("scaler.max".into(), Tensor::from_vec(s.max()?.to_vec())));
    }

    let mut buf = Vec::new();
    buf.extend(MAGIC);
    buf.extend(VERSION.to_le_bytes());
    let words = config_words(m.config(), m.seed());
    buf.extend((words.len() as u32).to_le_bytes());
    for w in words {
        buf.extend(w.to_le_bytes());
    }
    buf.extend((tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        put_tensor(&mut buf, name, t);
    }
    Ok(buf)
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = to_bytes(ckpt)?;
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

struct Reader<'a> {
    rest: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.rest.len() < n {
            return Err(Error::Checkpoint("checkpoint is truncated".into()));
        }
        let (head, tail) = self.rest.split_at(n);
        self.rest = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let len = self.u32()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("tensor {name} has implausible rank {rank}")));
        }
        let shape = (0..rank).map(|_| Ok(self.u64()? as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = match numel {
            Some(n) if n.checked_mul(8).is_some_and(|b| b <= self.rest.len()) => n,
            _ => return Err(Error::Checkpoint(format!("tensor {name} {shape:?} exceeds the file"))),
        };
        let data = (0..numel).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
        Ok((name, t))
    }
}

/// Parses a checkpoint. With `expected`, every config word is compared before
/// any tensor is read; the first difference is reported by field name. The
/// seed is not compared.
pub fn from_bytes(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let mut r = Reader { rest: bytes };
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let n_words = r.u32()? as usize;
    if n_words != CONFIG_FIELDS.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint config has {n_words} fields, expected {}",
            CONFIG_FIELDS.len()
        )));
    }
    let words = (0..n_words).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
    if let Some(want) = expected {
        let want_words = config_words(want, words[13]);
        for (i, (a, b)) in words.iter().zip(want_words).enumerate() {
            if *a != b {
                return Err(Error::Checkpoint(format!(
                    "checkpoint {} = {a} but the run config has {b}",
                    CONFIG_FIELDS[i]
                )));
            }
        }
    }
    let (config, seed) = config_from_words(&words);
    config
        .validate()
        .map_err(|e| Error::Checkpoint(format!("stored config is invalid: {e}")))?;

    let count = r.u32()? as usize;
    let mut params = ParamStore::new();
    let mut eigvals = None;
    let mut eigvecs = None;
    let mut smin = None;
    let mut smax = None;
    for _ in 0..count {
        let (name, t) = r.tensor()?;
        match name.as_str() {
            "laplacian.eigvals" => eigvals = Some(t.into_data()),
            "laplacian.eigvecs" => eigvecs = Some(t),
            "scaler.min" => smin = Some(t.into_data()),
            "scaler.max" => smax = Some(t.into_data()),
            _ => {
                params.push(name, t);
            }
        }
    }
    if !r.rest.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes in checkpoint", r.rest.len())));
    }
    let laplacian = match (eigvecs, eigvals) {
        (Some(v), Some(e)) if v.shape() == [config.n_stations, config.embed_dim] && e.len() == config.embed_dim => {
            LaplacianEmbedding {
                eigvecs: Some(v),
                eigvals: e,
            }
        }
        (None, None) if config.embed_dim == 0 => LaplacianEmbedding {
            eigvecs: None,
            eigvals: Vec::new(),
        },
        _ => return Err(Error::Checkpoint("laplacian embedding missing or misshapen".into())),
    };
    let scaler = match (smin, smax) {
        (Some(a), Some(b)) if a.len() == config.n_stations => {
            Some(MinMaxScaler::from_bounds(a, b).map_err(|e| Error::Checkpoint(e.to_string()))?)
        }
        (None, None) => None,
        _ => return Err(Error::Checkpoint("scaler bounds missing or misshapen".into())),
    };
    let model = ApsLstm::from_parts(config, seed, laplacian, params)?;
    Ok(Checkpoint { model, scaler })
}

pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("cannot open checkpoint {}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    from_bytes(&bytes, expected)
}
