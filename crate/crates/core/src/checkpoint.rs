//! Single-file binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "RJV1" | u32 version | u32 len, metadata text (key=value lines)
//! tensor table: u32 count, then per tensor
//!     u32 len, name | u8 rank | u64 dims[rank] | u8 dtype (0 = f32) | values
//! sections, each introduced by a tag byte:
//!     1 mask:      u32 count, per tensor u32 len, name | u64 bits | packed bytes (LSB first)
//!     2 optimizer: u64 step | f32 beta1, beta2, eps | first-moment table | second-moment table
//!     0 end
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParameterStore, Transformer};
use crate::pruning::PruneMask;
use crate::train::{OptimizerState, PhaseKind, TrainState};

pub const MAGIC: &[u8; 4] = b"RJV1";
pub const VERSION: u32 = 1;

const TAG_END: u8 = 0;
const TAG_MASK: u8 = 1;
const TAG_OPTIMIZER: u8 = 2;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub id: String,
    pub phase: PhaseKind,
    pub step: u64,
    pub seed: u64,
    pub parent: Option<String>,
    /// Learning rate of the last update before the checkpoint.
    pub lr: Option<f64>,
    pub config: ModelConfig,
    pub params: ParameterStore,
    pub mask: Option<PruneMask>,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn from_state(id: impl Into<String>, phase: PhaseKind, state: &TrainState, seed: u64, parent: Option<&str>) -> Self {
        Checkpoint {
            id: id.into(),
            phase,
            step: state.opt.step,
            seed,
            parent: parent.map(str::to_string),
            lr: state.last_lr,
            config: state.model.config.clone(),
            params: state.model.params.clone(),
            mask: state.mask.clone(),
            optimizer: Some(state.opt.clone()),
        }
    }

    /// Rebuilds the training state, starting a fresh optimizer when none was stored.
    pub fn into_state(self) -> Result<TrainState> {
        let model = Transformer::from_parts(self.config, self.params)?;
        let opt = match self.optimizer {
            Some(o) => o,
            None => OptimizerState::new(&model.params),
        };
        Ok(TrainState { model, mask: self.mask, opt, last_lr: self.lr, last_phase: Some(self.phase) })
    }

    pub fn model(&self) -> Result<Transformer> {
        Transformer::from_parts(self.config.clone(), self.params.clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    fn metadata(&self) -> String {
        let c = &self.config;
        let lines = [
            ("id", self.id.clone()),
            ("phase", self.phase.to_string()),
            ("step", self.step.to_string()),
            ("seed", self.seed.to_string()),
            ("parent", self.parent.clone().unwrap_or_default()),
            ("lr", self.lr.map(|l| l.to_string()).unwrap_or_default()),
            ("model.vocab_size", c.vocab_size.to_string()),
            ("model.d_model", c.d_model.to_string()),
            ("model.n_heads", c.n_heads.to_string()),
            ("model.ffn_dim", c.ffn_dim.to_string()),
            ("model.enc_layers", c.enc_layers.to_string()),
            ("model.dec_layers", c.dec_layers.to_string()),
            ("model.max_len", c.max_len.to_string()),
            ("model.dropout", c.dropout.to_string()),
            ("model.tied_embedding", "true".to_string()),
        ];
        lines.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.metadata());
        let tensors: Vec<(&str, &Tensor<f32>)> = self.params.iter().map(|(n, p)| (n, &p.tensor)).collect();
        put_table(&mut out, &tensors);
        if let Some(mask) = &self.mask {
            out.push(TAG_MASK);
            out.extend_from_slice(&(mask.len() as u32).to_le_bytes());
            for (name, bits) in mask.iter() {
                put_str(&mut out, name);
                out.extend_from_slice(&(bits.len() as u64).to_le_bytes());
                let mut packed = vec![0u8; bits.len().div_ceil(8)];
                for (i, &b) in bits.iter().enumerate() {
                    if b {
                        packed[i / 8] |= 1 << (i % 8);
                    }
                }
                out.extend_from_slice(&packed);
            }
        }
        if let Some(opt) = &self.optimizer {
            out.push(TAG_OPTIMIZER);
            out.extend_from_slice(&opt.step.to_le_bytes());
            for h in [opt.beta1, opt.beta2, opt.eps] {
                out.extend_from_slice(&h.to_le_bytes());
            }
            for table in [&opt.m, &opt.v] {
                let shaped: Vec<(&str, Tensor<f32>)> = table
                    .iter()
                    .map(|(n, vals)| {
                        let shape = self.params.get(n).map(|p| p.tensor.shape.clone()).unwrap_or(vec![vals.len()]);
                        (n.as_str(), Tensor { shape, data: vals.clone(), requires_grad: false, grad: None })
                    })
                    .collect();
                let refs: Vec<(&str, &Tensor<f32>)> = shaped.iter().map(|(n, t)| (*n, t)).collect();
                put_table(&mut out, &refs);
            }
        }
        out.push(TAG_END);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0, section: "header" };
        if r.take(4)? != MAGIC {
            return Err(r.corrupt("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.corrupt(format!("unsupported version {version}")));
        }
        r.section = "metadata";
        let text = r.string()?;
        let meta = parse_metadata(&text).map_err(|d| r.corrupt(d))?;
        let get = |k: &str| meta.get(k).map(String::as_str).ok_or_else(|| format!("missing key `{k}`"));
        let parsed = (|| -> std::result::Result<_, String> {
            fn num<T: std::str::FromStr>(k: &str, v: &str) -> std::result::Result<T, String> {
                v.parse().map_err(|_| format!("bad value `{v}` for `{k}`"))
            }
            let config = ModelConfig {
                vocab_size: num("model.vocab_size", get("model.vocab_size")?)?,
                d_model: num("model.d_model", get("model.d_model")?)?,
                n_heads: num("model.n_heads", get("model.n_heads")?)?,
                ffn_dim: num("model.ffn_dim", get("model.ffn_dim")?)?,
                enc_layers: num("model.enc_layers", get("model.enc_layers")?)?,
                dec_layers: num("model.dec_layers", get("model.dec_layers")?)?,
                max_len: num("model.max_len", get("model.max_len")?)?,
                dropout: num("model.dropout", get("model.dropout")?)?,
            };
            let phase: PhaseKind = get("phase")?.parse().map_err(|e: Error| e.to_string())?;
            let opt_str = |k: &str| get(k).map(|v| (!v.is_empty()).then(|| v.to_string()));
            let lr = match opt_str("lr")? {
                Some(v) => Some(num("lr", &v)?),
                None => None,
            };
            Ok((
                get("id")?.to_string(),
                phase,
                num::<u64>("step", get("step")?)?,
                num::<u64>("seed", get("seed")?)?,
                opt_str("parent")?,
                lr,
                config,
            ))
        })();
        let (id, phase, step, seed, parent, lr, config) = parsed.map_err(|d| r.corrupt(d))?;

        r.section = "tensors";
        let mut params = ParameterStore::new();
        for (name, t) in r.table()? {
            params.insert(name, t).map_err(|e| r.corrupt(e.to_string()))?;
        }

        let mut mask = None;
        let mut optimizer = None;
        loop {
            r.section = "sections";
            match r.u8()? {
                TAG_END => break,
                TAG_MASK if mask.is_none() => {
                    r.section = "mask";
                    let mut m = PruneMask::new();
                    for _ in 0..r.u32()? {
                        let name = r.string()?;
                        let n = r.u64()? as usize;
                        let packed = r.take(n.div_ceil(8))?;
                        m.insert(name, (0..n).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect());
                    }
                    mask = Some(m);
                }
                TAG_OPTIMIZER if optimizer.is_none() => {
                    r.section = "optimizer";
                    let step = r.u64()?;
                    let (beta1, beta2, eps) = (r.f32()?, r.f32()?, r.f32()?);
                    let mut tables = [BTreeMap::new(), BTreeMap::new()];
                    for table in &mut tables {
                        *table = r.table()?.into_iter().map(|(n, t)| (n, t.data)).collect();
                    }
                    let [m, v] = tables;
                    optimizer = Some(OptimizerState { step, beta1, beta2, eps, m, v });
                }
                tag => return Err(r.corrupt(format!("unexpected section tag {tag}"))),
            }
        }
        if r.pos != bytes.len() {
            return Err(r.corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }

        Transformer::from_parts(config.clone(), params.clone())?;
        if let Some(m) = &mask {
            m.check_matches(&params)?;
        }
        if let Some(o) = &optimizer {
            o.check_matches(&params)?;
        }
        Ok(Checkpoint { id, phase, step, seed, parent, lr, config, params, mask, optimizer })
    }
}

fn parse_metadata(text: &str) -> std::result::Result<BTreeMap<String, String>, String> {
    let mut out = BTreeMap::new();
    for line in text.lines() {
        let (k, v) = line.split_once('=').ok_or_else(|| format!("malformed line `{line}`"))?;
        out.insert(k.to_string(), v.to_string());
    }
    Ok(out)
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_table(out: &mut Vec<u8>, tensors: &[(&str, &Tensor<f32>)]) {
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        put_str(out, name);
        out.push(t.shape.len() as u8);
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.push(DTYPE_F32);
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    section: &'static str,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, detail: impl Into<String>) -> Error {
        Error::CorruptCheckpoint { section: self.section, detail: detail.into() }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.corrupt(format!("truncated at byte {}", self.buf.len())));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| self.corrupt("invalid UTF-8"))
    }

    fn table(&mut self) -> Result<Vec<(String, Tensor<f32>)>> {
        let count = self.u32()?;
        let mut out = Vec::new();
        for _ in 0..count {
            let name = self.string()?;
            let rank = self.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(self.u64()? as usize);
            }
            let dtype = self.u8()?;
            if dtype != DTYPE_F32 {
                return Err(self.corrupt(format!("tensor `{name}` has unknown dtype {dtype}")));
            }
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let bytes = match n.and_then(|n| n.checked_mul(4)) {
                Some(b) => self.take(b)?,
                None => return Err(self.corrupt(format!("tensor `{name}` has impossible shape {shape:?}"))),
            };
            let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            out.push((name, Tensor::new(shape, data)?));
        }
        Ok(out)
    }
}
