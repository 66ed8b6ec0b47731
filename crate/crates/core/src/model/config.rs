use crate::error::{Error, Result};

/// Transformer shape hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub max_len: usize,
    pub dropout: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { vocab_size: 64, d_model: 32, n_heads: 4, ffn_dim: 64, enc_layers: 2, dec_layers: 2, max_len: 16, dropout: 0.1 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("ffn_dim", self.ffn_dim),
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!("model.d_model {} is not divisible by model.n_heads {}", self.d_model, self.n_heads)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("model.dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Every parameter name with its shape, in lexicographic order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (self.d_model, self.ffn_dim);
        let mut out = vec![("emb.weight".to_string(), vec![self.vocab_size, d])];
        let attn = |out: &mut Vec<(String, Vec<usize>)>, p: &str| {
            for w in ["q", "k", "v", "o"] {
                out.push((format!("{p}.w{w}"), vec![d, d]));
                out.push((format!("{p}.b{w}"), vec![d]));
            }
        };
        let ln = |out: &mut Vec<(String, Vec<usize>)>, p: &str| {
            out.push((format!("{p}.gain"), vec![d]));
            out.push((format!("{p}.shift"), vec![d]));
        };
        let ffn = |out: &mut Vec<(String, Vec<usize>)>, p: &str| {
            out.push((format!("{p}.w1"), vec![d, f]));
            out.push((format!("{p}.b1"), vec![f]));
            out.push((format!("{p}.w2"), vec![f, d]));
            out.push((format!("{p}.b2"), vec![d]));
        };
        for i in 0..self.enc_layers {
            attn(&mut out, &format!("enc.{i}.attn"));
            ln(&mut out, &format!("enc.{i}.ln1"));
            ln(&mut out, &format!("enc.{i}.ln2"));
            ffn(&mut out, &format!("enc.{i}.ffn"));
        }
        ln(&mut out, "enc.ln");
        for i in 0..self.dec_layers {
            attn(&mut out, &format!("dec.{i}.self"));
            attn(&mut out, &format!("dec.{i}.cross"));
            ln(&mut out, &format!("dec.{i}.ln1"));
            ln(&mut out, &format!("dec.{i}.ln2"));
            ln(&mut out, &format!("dec.{i}.ln3"));
            ffn(&mut out, &format!("dec.{i}.ffn"));
        }
        ln(&mut out, "dec.ln");
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }
}
