use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, ParameterStore};
use crate::autograd::{Tape, Tensor, Var, LN_EPS};
use crate::data::{PaddedBatch, BOS, EOS};
use crate::error::{Error, Result};

/// Per-parameter gradient arrays keyed by parameter name.
pub type Gradients = BTreeMap<String, Vec<f32>>;

/// Encoder–decoder transformer: pre-norm layers, sinusoidal positions, one
/// embedding table shared by both inputs and the tied output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Transformer {
    pub config: ModelConfig,
    pub params: ParameterStore,
}

pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Transformer> {
    Transformer::build(config.clone(), seed)
}

impl Transformer {
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterStore::new();
        for (name, shape) in config.parameter_shapes() {
            let n: usize = shape.iter().product();
            let data = if shape.len() == 2 {
                let s = (6.0 / (shape[0] + shape[1]) as f32).sqrt();
                (0..n).map(|_| rng.gen_range(-s..s)).collect()
            } else if name.ends_with(".gain") {
                vec![1.0; n]
            } else {
                vec![0.0; n]
            };
            params.insert(name, Tensor::new(shape, data)?)?;
        }
        Ok(Transformer { config, params })
    }

    /// Wraps an existing store after checking it has exactly the expected layout.
    pub fn from_parts(config: ModelConfig, params: ParameterStore) -> Result<Self> {
        config.validate()?;
        let expected = config.parameter_shapes();
        if expected.len() != params.len() {
            return Err(Error::Integrity(format!("store has {} tensors, config expects {}", params.len(), expected.len())));
        }
        for (name, shape) in &expected {
            let t = params.tensor(name)?;
            if &t.shape != shape {
                return Err(Error::Integrity(format!("parameter `{name}` has shape {:?}, config expects {shape:?}", t.shape)));
            }
        }
        Ok(Transformer { config, params })
    }

    /// Mean target NLL with dropout disabled.
    pub fn forward_loss(&self, batch: &PaddedBatch) -> Result<f32> {
        let mut ctx = Ctx::new(self, Mode::Eval, false);
        let loss = ctx.loss(batch)?;
        Ok(ctx.tape.value(loss).item())
    }

    /// Loss and gradients for one training step. Dropout is active when an
    /// RNG is supplied and the configured rate is positive.
    pub fn loss_and_grads(&self, batch: &PaddedBatch, dropout_rng: Option<&mut ChaCha8Rng>) -> Result<(f32, Gradients)> {
        let mode = match dropout_rng {
            Some(rng) if self.config.dropout > 0.0 => Mode::Train { rate: self.config.dropout, rng },
            _ => Mode::Eval,
        };
        let mut ctx = Ctx::new(self, mode, true);
        let loss = ctx.loss(batch)?;
        ctx.tape.backward(loss)?;
        let mut grads = Gradients::new();
        for (name, &v) in &ctx.vars {
            let g = match ctx.tape.grad(v) {
                Some(g) => g.to_vec(),
                None => vec![0.0; ctx.tape.value(v).numel()],
            };
            grads.insert(name.clone(), g);
        }
        Ok((ctx.tape.value(loss).item(), grads))
    }

    /// Summed target NLL and the number of scored positions, dropout off.
    pub fn nll(&self, batch: &PaddedBatch) -> Result<(f64, usize)> {
        let loss = self.forward_loss(batch)? as f64;
        let n = batch.n_target_tokens();
        Ok((loss * n as f64, n))
    }

    /// Decoder logits `[batch * tgt_len, vocab]`, dropout off.
    pub fn logits(&self, batch: &PaddedBatch) -> Result<Tensor<f32>> {
        let mut ctx = Ctx::new(self, Mode::Eval, false);
        let mem = ctx.encoder(&batch.src, &batch.src_pad, batch.batch, batch.src_len)?;
        let h = ctx.decoder(mem, &batch.src_pad, &batch.tgt_in, &batch.tgt_pad, batch.batch, batch.src_len, batch.tgt_len)?;
        let logits = ctx.output(h)?;
        Ok(ctx.tape.value(logits).clone())
    }

    /// Final encoder-layer states `[len, d_model]` for one encoder input
    /// sequence, taken as given (no EOS is appended).
    pub fn encode(&self, src: &[u32]) -> Result<Tensor<f32>> {
        let ids: Vec<usize> = src.iter().map(|&t| t as usize).collect();
        let mut ctx = Ctx::new(self, Mode::Eval, false);
        let h = ctx.encoder(&ids, &vec![false; ids.len()], 1, ids.len())?;
        let mut t = ctx.tape.value(h).clone();
        t.shape = vec![ids.len(), self.config.d_model];
        Ok(t)
    }

    /// Final encoder states for a padded batch, `[batch * src_len, d_model]`.
    pub fn encode_batch(&self, batch: &PaddedBatch) -> Result<Tensor<f32>> {
        let mut ctx = Ctx::new(self, Mode::Eval, false);
        let h = ctx.encoder(&batch.src, &batch.src_pad, batch.batch, batch.src_len)?;
        Ok(ctx.tape.value(h).clone())
    }

    /// Greedy translation of one source sentence (EOS is appended internally).
    pub fn greedy_decode(&self, src: &[u32], max_len: usize) -> Result<Vec<u32>> {
        Ok(self.greedy_decode_batch(&[src.to_vec()], max_len)?.remove(0))
    }

    /// Greedy translation of many sources at once. Each row stops at its
    /// first EOS (not included in the output) or after `max_len` tokens.
    pub fn greedy_decode_batch(&self, srcs: &[Vec<u32>], max_len: usize) -> Result<Vec<Vec<u32>>> {
        let b = srcs.len();
        let mut outputs = vec![Vec::new(); b];
        let max_len = max_len.min(self.config.max_len);
        if b == 0 || max_len == 0 {
            return Ok(outputs);
        }
        let s_len = srcs.iter().map(|s| s.len() + 1).max().unwrap_or(1);
        let mut src = vec![0usize; b * s_len];
        let mut src_pad = vec![true; b * s_len];
        for (i, s) in srcs.iter().enumerate() {
            for (j, &t) in s.iter().chain([EOS].iter()).enumerate() {
                src[i * s_len + j] = t as usize;
                src_pad[i * s_len + j] = false;
            }
        }
        let memory = {
            let mut ctx = Ctx::new(self, Mode::Eval, false);
            let h = ctx.encoder(&src, &src_pad, b, s_len)?;
            ctx.tape.value(h).clone()
        };
        let vocab = self.config.vocab_size;
        let mut done = vec![false; b];
        for step in 0..max_len {
            let t_len = step + 1;
            let mut tgt_in = vec![BOS as usize; b * t_len];
            for (i, out) in outputs.iter().enumerate() {
                for (j, &t) in out.iter().enumerate() {
                    tgt_in[i * t_len + j + 1] = t as usize;
                }
            }
            let mut ctx = Ctx::new(self, Mode::Eval, false);
            let mem = ctx.tape.constant(memory.clone());
            let h = ctx.decoder(mem, &src_pad, &tgt_in, &vec![false; b * t_len], b, s_len, t_len)?;
            let logits = ctx.output(h)?;
            let data = ctx.tape.data(logits);
            for i in 0..b {
                if done[i] {
                    continue;
                }
                let row = &data[(i * t_len + step) * vocab..(i * t_len + step + 1) * vocab];
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                if best as u32 == EOS {
                    done[i] = true;
                } else {
                    outputs[i].push(best as u32);
                }
            }
            if done.iter().all(|&d| d) {
                break;
            }
        }
        Ok(outputs)
    }
}

enum Mode<'r> {
    Eval,
    Train { rate: f32, rng: &'r mut ChaCha8Rng },
}

/// One forward pass: a tape with every parameter bound as a leaf.
struct Ctx<'m, 'r> {
    model: &'m Transformer,
    tape: Tape<f32>,
    vars: BTreeMap<String, Var>,
    mode: Mode<'r>,
}

impl<'m, 'r> Ctx<'m, 'r> {
    fn new(model: &'m Transformer, mode: Mode<'r>, trainable: bool) -> Self {
        let mut tape = Tape::new();
        let mut vars = BTreeMap::new();
        for (name, p) in model.params.iter() {
            let v = if trainable { tape.param(p.tensor.clone()) } else { tape.constant(p.tensor.clone()) };
            vars.insert(name.to_string(), v);
        }
        Ctx { model, tape, vars, mode }
    }

    fn p(&self, name: &str) -> Var {
        self.vars[name]
    }

    fn cfg(&self) -> &'m ModelConfig {
        &self.model.config
    }

    fn loss(&mut self, batch: &PaddedBatch) -> Result<Var> {
        let mem = self.encoder(&batch.src, &batch.src_pad, batch.batch, batch.src_len)?;
        let h = self.decoder(mem, &batch.src_pad, &batch.tgt_in, &batch.tgt_pad, batch.batch, batch.src_len, batch.tgt_len)?;
        let logits = self.output(h)?;
        let valid: Vec<bool> = batch.tgt_pad.iter().map(|&p| !p).collect();
        self.tape.cross_entropy(logits, &batch.tgt_out, &valid)
    }

    fn dropout(&mut self, x: Var) -> Result<Var> {
        let Mode::Train { rate, rng } = &mut self.mode else {
            return Ok(x);
        };
        let keep = 1.0 / (1.0 - *rate);
        let n = self.tape.value(x).numel();
        let mask: Vec<f32> = (0..n).map(|_| if rng.gen::<f32>() < *rate { 0.0 } else { keep }).collect();
        let m = self.tape.constant(Tensor::new(self.tape.shape(x).to_vec(), mask)?);
        self.tape.mul(x, m)
    }

    fn linear(&mut self, x: Var, w: &str, b: &str) -> Result<Var> {
        let y = self.tape.matmul(x, self.p(w))?;
        self.tape.add_bias(y, self.p(b))
    }

    fn layer_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let (g, s) = (self.p(&format!("{prefix}.gain")), self.p(&format!("{prefix}.shift")));
        self.tape.layer_norm(x, g, s, LN_EPS)
    }

    /// Scaled token embeddings plus sinusoidal positions, `[b * t, d]`.
    fn embed(&mut self, ids: &[usize], b: usize, t: usize) -> Result<Var> {
        let cfg = self.cfg();
        if t > cfg.max_len {
            return Err(Error::Data(format!("sequence length {t} exceeds model.max_len {}", cfg.max_len)));
        }
        let d = cfg.d_model;
        let e = self.tape.embedding(self.p("emb.weight"), ids)?;
        let e = self.tape.scale(e, (d as f32).sqrt());
        let table = positional_table(t, d);
        let mut pe = Vec::with_capacity(b * t * d);
        for _ in 0..b {
            pe.extend_from_slice(&table);
        }
        let pe = self.tape.constant(Tensor::new(vec![b * t, d], pe)?);
        let x = self.tape.add(e, pe)?;
        self.dropout(x)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(&mut self, prefix: &str, xq: Var, xkv: Var, b: usize, tq: usize, tk: usize, mask: &[bool]) -> Result<Var> {
        let cfg = self.cfg();
        let (h, dh, d) = (cfg.n_heads, cfg.head_dim(), cfg.d_model);
        let q = self.linear(xq, &format!("{prefix}.wq"), &format!("{prefix}.bq"))?;
        let k = self.linear(xkv, &format!("{prefix}.wk"), &format!("{prefix}.bk"))?;
        let v = self.linear(xkv, &format!("{prefix}.wv"), &format!("{prefix}.bv"))?;
        let q = self.split_heads(q, b, tq)?;
        let k = self.split_heads(k, b, tk)?;
        let v = self.split_heads(v, b, tk)?;
        let q = self.tape.scale(q, 1.0 / (dh as f32).sqrt());
        let scores = self.tape.matmul_t(q, k)?;
        let scores = self.tape.masked_fill(scores, mask)?;
        let probs = self.tape.softmax(scores)?;
        let ctx = self.tape.matmul(probs, v)?;
        let ctx = self.tape.reshape(ctx, &[b, h, tq, dh])?;
        let ctx = self.tape.swap_axes12(ctx)?;
        let ctx = self.tape.reshape(ctx, &[b * tq, d])?;
        self.linear(ctx, &format!("{prefix}.wo"), &format!("{prefix}.bo"))
    }

    /// `[b * t, d] -> [b * heads, t, head_dim]`
    fn split_heads(&mut self, x: Var, b: usize, t: usize) -> Result<Var> {
        let cfg = self.cfg();
        let (h, dh) = (cfg.n_heads, cfg.head_dim());
        let x = self.tape.reshape(x, &[b, t, h, dh])?;
        let x = self.tape.swap_axes12(x)?;
        self.tape.reshape(x, &[b * h, t, dh])
    }

    fn ffn(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let y = self.linear(x, &format!("{prefix}.w1"), &format!("{prefix}.b1"))?;
        let y = self.tape.relu(y);
        self.linear(y, &format!("{prefix}.w2"), &format!("{prefix}.b2"))
    }

    fn residual(&mut self, x: Var, y: Var) -> Result<Var> {
        let y = self.dropout(y)?;
        self.tape.add(x, y)
    }

    fn encoder(&mut self, src: &[usize], src_pad: &[bool], b: usize, ts: usize) -> Result<Var> {
        let h = self.cfg().n_heads;
        let mask = key_mask(src_pad, b, h, ts, ts, false);
        let mut x = self.embed(src, b, ts)?;
        for i in 0..self.cfg().enc_layers {
            let n = self.layer_norm(x, &format!("enc.{i}.ln1"))?;
            let a = self.attention(&format!("enc.{i}.attn"), n, n, b, ts, ts, &mask)?;
            x = self.residual(x, a)?;
            let n = self.layer_norm(x, &format!("enc.{i}.ln2"))?;
            let f = self.ffn(n, &format!("enc.{i}.ffn"))?;
            x = self.residual(x, f)?;
        }
        self.layer_norm(x, "enc.ln")
    }

    #[allow(clippy::too_many_arguments)]
    fn decoder(&mut self, mem: Var, src_pad: &[bool], tgt: &[usize], tgt_pad: &[bool], b: usize, ts: usize, tt: usize) -> Result<Var> {
        let h = self.cfg().n_heads;
        let self_mask = key_mask(tgt_pad, b, h, tt, tt, true);
        let cross_mask = key_mask(src_pad, b, h, tt, ts, false);
        let mut x = self.embed(tgt, b, tt)?;
        for i in 0..self.cfg().dec_layers {
            let n = self.layer_norm(x, &format!("dec.{i}.ln1"))?;
            let a = self.attention(&format!("dec.{i}.self"), n, n, b, tt, tt, &self_mask)?;
            x = self.residual(x, a)?;
            let n = self.layer_norm(x, &format!("dec.{i}.ln2"))?;
            let c = self.attention(&format!("dec.{i}.cross"), n, mem, b, tt, ts, &cross_mask)?;
            x = self.residual(x, c)?;
            let n = self.layer_norm(x, &format!("dec.{i}.ln3"))?;
            let f = self.ffn(n, &format!("dec.{i}.ffn"))?;
            x = self.residual(x, f)?;
        }
        self.layer_norm(x, "dec.ln")
    }

    /// Tied output projection onto the embedding table.
    fn output(&mut self, h: Var) -> Result<Var> {
        self.tape.matmul_t(h, self.p("emb.weight"))
    }
}

/// Attention mask `[b * heads, tq, tk]`; true marks blocked positions.
fn key_mask(key_pad: &[bool], b: usize, heads: usize, tq: usize, tk: usize, causal: bool) -> Vec<bool> {
    let mut mask = Vec::with_capacity(b * heads * tq * tk);
    for bi in 0..b {
        for _ in 0..heads {
            for i in 0..tq {
                for j in 0..tk {
                    mask.push(key_pad[bi * tk + j] || (causal && j > i));
                }
            }
        }
    }
    mask
}

fn positional_table(t: usize, d: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(t * d);
    for pos in 0..t {
        for i in 0..d {
            let exponent = (2 * (i / 2)) as f64 / d as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            out.push(if i % 2 == 0 { angle.sin() } else { angle.cos() } as f32);
        }
    }
    out
}
