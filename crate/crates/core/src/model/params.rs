use rand::Rng;

use super::config::{ModelConfig, TaskKind};
use crate::autodiff::Tensor;
use crate::error::{shape_err, Error, Result};

/// Id reserved for padding; its embedding row is all zeros.
pub const PAD_ID: usize = 0;
/// Id reserved for out-of-vocabulary tokens.
pub const UNK_ID: usize = 1;

/// One LSTM direction. Gate blocks are stacked in the order
/// input, forget, candidate, output along the rows of `w_ih`/`w_hh`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    /// `4h × input`
    pub w_ih: Tensor,
    /// `4h × h`
    pub w_hh: Tensor,
    /// `1 × 4h`
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiLstmParams {
    pub forward: LstmParams,
    pub backward: LstmParams,
}

/// Additive attention `c·tanh(W h_t [+ W_q q] + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    /// `d' × m`
    pub w: Tensor,
    /// `d' × m`, pair tasks only.
    pub w_query: Option<Tensor>,
    /// `1 × d'`
    pub b: Tensor,
    /// `1 × d'`
    pub c: Tensor,
}

/// Every trainable tensor of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParameters {
    /// `|V| × d`
    pub embedding: Tensor,
    /// `Enc` for single tasks, `Enc_P` for pair tasks.
    pub encoder: BiLstmParams,
    /// `Enc_Q`, pair tasks only.
    pub query_encoder: Option<BiLstmParams>,
    pub attention: AttentionParams,
    /// `|y| × m`
    pub dec_w: Tensor,
    /// `1 × |y|`
    pub dec_b: Tensor,
}

fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, bound: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(rows, cols, data).expect("sized")
}

fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}

impl LstmParams {
    pub fn init(input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut bias = Tensor::zeros(1, 4 * hidden);
        for j in hidden..2 * hidden {
            bias.data_mut()[j] = 1.0;
        }
        Self {
            w_ih: uniform(rng, 4 * hidden, input, fan_in_bound(input)),
            w_hh: uniform(rng, 4 * hidden, hidden, fan_in_bound(hidden)),
            bias,
        }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_ih: Tensor::zeros(4 * hidden, input),
            w_hh: Tensor::zeros(4 * hidden, hidden),
            bias: Tensor::zeros(1, 4 * hidden),
        }
    }
}

impl BiLstmParams {
    pub fn init(input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            forward: LstmParams::init(input, hidden, rng),
            backward: LstmParams::init(input, hidden, rng),
        }
    }
}

impl ModelParameters {
    /// Seeded initialisation: embeddings uniform in ±0.1 (padding row zero),
    /// weight matrices uniform in ±1/√fan_in, biases zero except the LSTM
    /// forget gate which starts at one.
    pub fn init(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (v, d, m, a, y) = (
            config.vocab_size,
            config.embed_dim,
            config.hidden_dim,
            config.attn_dim,
            config.label_count,
        );
        let h = config.direction_dim();
        let mut embedding = uniform(rng, v, d, 0.1);
        embedding.row_slice_mut(PAD_ID).fill(0.0);
        let encoder = BiLstmParams::init(d, h, rng);
        let query_encoder = match config.task_kind {
            TaskKind::Single => None,
            TaskKind::Pair => Some(BiLstmParams::init(d, h, rng)),
        };
        let w = uniform(rng, a, m, fan_in_bound(m));
        let w_query = match config.task_kind {
            TaskKind::Single => None,
            TaskKind::Pair => Some(uniform(rng, a, m, fan_in_bound(m))),
        };
        let c = uniform(rng, 1, a, fan_in_bound(a));
        Ok(Self {
            embedding,
            encoder,
            query_encoder,
            attention: AttentionParams {
                w,
                w_query,
                b: Tensor::zeros(1, a),
                c,
            },
            dec_w: uniform(rng, y, m, fan_in_bound(m)),
            dec_b: Tensor::zeros(1, y),
        })
    }

    /// All tensors with stable names, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        let enc = if self.query_encoder.is_some() { "enc_p" } else { "enc" };
        push_bilstm(&mut out, enc, &self.encoder);
        if let Some(q) = &self.query_encoder {
            push_bilstm(&mut out, "enc_q", q);
        }
        out.push(("attn.w".into(), &self.attention.w));
        if let Some(wq) = &self.attention.w_query {
            out.push(("attn.w_query".into(), wq));
        }
        out.push(("attn.b".into(), &self.attention.b));
        out.push(("attn.c".into(), &self.attention.c));
        out.push(("dec.w".into(), &self.dec_w));
        out.push(("dec.b".into(), &self.dec_b));
        out
    }

    /// Mutable counterpart of [`ModelParameters::named`], same order.
    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let pair = self.query_encoder.is_some();
        let Self {
            embedding,
            encoder,
            query_encoder,
            attention,
            dec_w,
            dec_b,
        } = self;
        let mut out = vec![("embedding".to_string(), embedding)];
        push_bilstm_mut(&mut out, if pair { "enc_p" } else { "enc" }, encoder);
        if let Some(q) = query_encoder {
            push_bilstm_mut(&mut out, "enc_q", q);
        }
        let AttentionParams { w, w_query, b, c } = attention;
        out.push(("attn.w".into(), w));
        if let Some(wq) = w_query {
            out.push(("attn.w_query".into(), wq));
        }
        out.push(("attn.b".into(), b));
        out.push(("attn.c".into(), c));
        out.push(("dec.w".into(), dec_w));
        out.push(("dec.b".into(), dec_b));
        out
    }

    /// Checks every tensor shape against `config` and that all values are finite.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        config.validate()?;
        let (v, d, m, a, y, h) = (
            config.vocab_size,
            config.embed_dim,
            config.hidden_dim,
            config.attn_dim,
            config.label_count,
            config.direction_dim(),
        );
        let pair = config.task_kind == TaskKind::Pair;
        if self.query_encoder.is_some() != pair || self.attention.w_query.is_some() != pair {
            return Err(shape_err("parameters", "query encoder presence does not match task kind"));
        }
        for (name, t) in self.named() {
            let want = match name.as_str() {
                "embedding" => [v, d],
                "attn.w" | "attn.w_query" => [a, m],
                "attn.b" | "attn.c" => [1, a],
                "dec.w" => [y, m],
                "dec.b" => [1, y],
                n if n.ends_with(".w_ih") => [4 * h, d],
                n if n.ends_with(".w_hh") => [4 * h, h],
                n if n.ends_with(".bias") => [1, 4 * h],
                _ => unreachable!("unknown tensor {name}"),
            };
            if t.shape() != want {
                return Err(shape_err("parameters", format!("{name}: expected {want:?}, got {:?}", t.shape())));
            }
            if !t.is_finite() {
                return Err(Error::NonFinite { op: "parameters" });
            }
        }
        Ok(())
    }

    /// Rebuilds parameters from `(name, tensor)` pairs as produced by
    /// [`ModelParameters::named`]. Every name must be present exactly once.
    pub fn from_named(config: &ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let mut params = Self::init(config, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
        let mut by_name: std::collections::HashMap<String, Tensor> = std::collections::HashMap::new();
        for (name, t) in tensors {
            if by_name.insert(name.clone(), t).is_some() {
                return Err(Error::Checkpoint(format!("tensor '{name}' appears twice")));
            }
        }
        for (name, slot) in params.named_mut() {
            let t = by_name
                .remove(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{name}'")))?;
            *slot = t;
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor '{extra}'")));
        }
        params.validate(config)?;
        Ok(params)
    }

    pub fn count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

fn push_bilstm<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: &str, p: &'a BiLstmParams) {
    for (dir, l) in [("fwd", &p.forward), ("bwd", &p.backward)] {
        out.push((format!("{prefix}.{dir}.w_ih"), &l.w_ih));
        out.push((format!("{prefix}.{dir}.w_hh"), &l.w_hh));
        out.push((format!("{prefix}.{dir}.bias"), &l.bias));
    }
}

fn push_bilstm_mut<'a>(out: &mut Vec<(String, &'a mut Tensor)>, prefix: &str, p: &'a mut BiLstmParams) {
    for (dir, l) in [("fwd", &mut p.forward), ("bwd", &mut p.backward)] {
        let LstmParams { w_ih, w_hh, bias } = l;
        out.push((format!("{prefix}.{dir}.w_ih"), w_ih));
        out.push((format!("{prefix}.{dir}.w_hh"), w_hh));
        out.push((format!("{prefix}.{dir}.bias"), bias));
    }
}
